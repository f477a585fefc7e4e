//! Input features: date encoding, identifier vocabularies and the per-step
//! embedding.
//!
//! Each time step is described by a continuous block (target, covariates,
//! date features and, when enabled, the inter-series output) and two
//! identifiers. The continuous block goes through a linear layer, each
//! identifier through its own embedding table, and the concatenation is
//! projected to `d_model`.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{SeriesPanel, YearMonth};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::tensor::Tensor;

/// Index 0 is reserved for identifiers never seen in training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().collect();
        let mut lookup = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if lookup.insert(t.clone(), i + 1).is_some() {
                return Err(Error::Schema(format!("identifier {t:?} appears twice in vocabulary")));
            }
        }
        Ok(Self { tokens, lookup })
    }

    fn rebuild(&mut self) {
        self.lookup = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i + 1))
            .collect();
    }

    /// Table index of `token`, `None` when unknown.
    pub fn get(&self, token: &str) -> Option<usize> {
        self.lookup.get(token).copied()
    }

    /// Table index of `token`, the reserved index 0 when unknown.
    pub fn index(&self, token: &str) -> usize {
        self.get(token).unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Rows in the embedding table (vocabulary plus the reserved row).
    pub fn table_rows(&self) -> usize {
        self.tokens.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    /// Covariate names in column order.
    pub continuous: Vec<String>,
    pub products: Vocab,
    pub locations: Vocab,
    pub embedding_dim: usize,
    pub d_model: usize,
    pub date_features: bool,
    pub inter_series: bool,
}

impl FeatureSpec {
    /// Vocabularies from the distinct identifiers of `panel`, sorted.
    pub fn from_panel(
        panel: &SeriesPanel,
        embedding_dim: usize,
        d_model: usize,
        date_features: bool,
        inter_series: bool,
    ) -> Result<Self> {
        let mut products: Vec<String> = panel.series().iter().map(|s| s.product_id.clone()).collect();
        let mut locations: Vec<String> = panel.series().iter().map(|s| s.location_id.clone()).collect();
        products.sort();
        products.dedup();
        locations.sort();
        locations.dedup();
        Ok(Self {
            continuous: panel.covariate_names().to_vec(),
            products: Vocab::new(products)?,
            locations: Vocab::new(locations)?,
            embedding_dim,
            d_model,
            date_features,
            inter_series,
        })
    }

    pub(crate) fn rebuild_lookups(&mut self) {
        self.products.rebuild();
        self.locations.rebuild();
    }

    /// Width of the continuous block: target, covariates, dates, inter-series.
    pub fn continuous_width(&self) -> usize {
        1 + self.continuous.len() + 2 * self.date_features as usize + self.inter_series as usize
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let (c, d, e) = (self.continuous_width(), self.d_model, self.embedding_dim);
        store.insert("embed.cont.w", Tensor::xavier_uniform(c, d, rng))?;
        store.insert("embed.cont.b", Tensor::zeros(&[d]).with_grad())?;
        store.insert(
            "embed.product",
            Tensor::embedding_normal(self.products.table_rows(), e, rng),
        )?;
        store.insert(
            "embed.location",
            Tensor::embedding_normal(self.locations.table_rows(), e, rng),
        )?;
        store.insert("embed.in.w", Tensor::xavier_uniform(d + 2 * e, d, rng))?;
        store.insert("embed.in.b", Tensor::zeros(&[d]).with_grad())?;
        Ok(())
    }

    /// Embeds `T` steps of one series: `cont` is `T x continuous_width`.
    pub fn embed<'a>(
        &self,
        g: &mut Graph<'a>,
        binder: &mut Binder<'a>,
        cont: Var,
        product: usize,
        location: usize,
    ) -> Result<Var> {
        let s = g.shape(cont).to_vec();
        if s.len() != 2 || s[1] != self.continuous_width() {
            return Err(Error::Schema(format!(
                "continuous block of shape {s:?}, expected {} features per step",
                self.continuous_width()
            )));
        }
        let steps = s[0];
        let w = binder.var(g, "embed.cont.w")?;
        let b = binder.var(g, "embed.cont.b")?;
        let proj = g.matmul(cont, w)?;
        let proj = g.add(proj, b)?;
        let pt = binder.var(g, "embed.product")?;
        let lt = binder.var(g, "embed.location")?;
        let pe = g.gather_rows(pt, &vec![product; steps])?;
        let le = g.gather_rows(lt, &vec![location; steps])?;
        let cat = g.concat(&[proj, pe, le])?;
        let w = binder.var(g, "embed.in.w")?;
        let b = binder.var(g, "embed.in.b")?;
        let out = g.matmul(cat, w)?;
        g.add(out, b)
    }
}

/// `[ln(year - base_year + 1), (month - 1) / 11 - 0.5]` per date.
pub fn build_date_features(dates: &[YearMonth], base_year: i32) -> Result<Tensor> {
    if dates.is_empty() {
        return Err(Error::Contract("no dates given".into()));
    }
    let mut data = Vec::with_capacity(dates.len() * 2);
    for d in dates {
        if d.year() < base_year {
            return Err(Error::Contract(format!("date {d} precedes the base year {base_year}")));
        }
        data.push(((d.year() - base_year + 1) as f64).ln());
        data.push((d.month() as f64 - 1.0) / 11.0 - 0.5);
    }
    Tensor::new(vec![dates.len(), 2], data)
}

/// Sine/cosine encoding of positions `offset..offset + steps`.
pub fn sinusoidal_encoding(steps: usize, offset: usize, d_model: usize) -> Tensor {
    let mut data = Vec::with_capacity(steps * d_model);
    for p in offset..offset + steps {
        for i in 0..d_model {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d_model as f64);
            let a = p as f64 / rate;
            data.push(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Tensor::new(vec![steps, d_model], data).expect("positive sizes")
}
