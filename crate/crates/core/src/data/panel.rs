//! Aligned monthly panels and their long-format CSV representation.
//!
//! The CSV header is `series_id,product_id,location_id,date,target` followed
//! by any number of named covariate columns. Every series is placed on one
//! global month axis spanning the earliest to the latest date in the file;
//! months without a row are marked unobserved.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use super::date::YearMonth;
use crate::error::{Error, Result};

const FIXED_COLUMNS: [&str; 5] = ["series_id", "product_id", "location_id", "date", "target"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub series_id: String,
    pub product_id: String,
    pub location_id: String,
    /// Target value per month of the axis; 0 where unobserved.
    pub values: Vec<f64>,
    /// `false` where the series has no observation.
    pub mask: Vec<bool>,
    /// One vector per covariate, aligned with the axis; 0 where absent.
    pub covariates: Vec<Vec<f64>>,
}

impl Series {
    pub fn observed(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values
            .iter()
            .zip(&self.mask)
            .enumerate()
            .filter(|(_, (_, &m))| m)
            .map(|(i, (&v, _))| (i, v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPanel {
    start: YearMonth,
    len: usize,
    covariate_names: Vec<String>,
    series: Vec<Series>,
}

impl SeriesPanel {
    /// Builds a panel, sorting series by id and validating alignment.
    pub fn new(start: YearMonth, len: usize, covariate_names: Vec<String>, mut series: Vec<Series>) -> Result<Self> {
        if len == 0 || series.is_empty() {
            return Err(Error::Data("empty panel".into()));
        }
        series.sort_by(|a, b| a.series_id.cmp(&b.series_id));
        for w in series.windows(2) {
            if w[0].series_id == w[1].series_id {
                return Err(Error::Data(format!("series {} appears twice", w[0].series_id)));
            }
        }
        for s in &series {
            if s.values.len() != len || s.mask.len() != len {
                return Err(Error::Data(format!(
                    "series {} is not aligned to the {len}-month axis",
                    s.series_id
                )));
            }
            if s.covariates.len() != covariate_names.len() || s.covariates.iter().any(|c| c.len() != len) {
                return Err(Error::Data(format!(
                    "series {} covariates do not match the schema",
                    s.series_id
                )));
            }
            if let Some((i, v)) = s.observed().find(|(_, v)| !v.is_finite() || *v < 0.0) {
                return Err(Error::Data(format!(
                    "series {} has invalid target {v} at {}",
                    s.series_id,
                    start.add_months(i as i64)
                )));
            }
        }
        Ok(Self {
            start,
            len,
            covariate_names,
            series,
        })
    }

    pub fn start(&self) -> YearMonth {
        self.start
    }

    pub fn end(&self) -> YearMonth {
        self.start.add_months(self.len as i64 - 1)
    }

    /// Number of months on the axis.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_series(&self) -> usize {
        self.series.len()
    }

    pub fn series(&self) -> &[Series] {
        &self.series
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn date(&self, index: usize) -> YearMonth {
        self.start.add_months(index as i64)
    }

    pub fn dates(&self) -> Vec<YearMonth> {
        (0..self.len).map(|i| self.date(i)).collect()
    }

    /// Axis position of `date`; may lie outside `0..len`.
    pub fn offset_of(&self, date: YearMonth) -> i64 {
        date.months_since(self.start)
    }

    pub fn index_of(&self, date: YearMonth) -> Option<usize> {
        let o = self.offset_of(date);
        (0..self.len as i64).contains(&o).then_some(o as usize)
    }

    pub fn series_index(&self, series_id: &str) -> Option<usize> {
        self.series
            .binary_search_by(|s| s.series_id.as_str().cmp(series_id))
            .ok()
    }

    pub fn observation_count(&self) -> usize {
        self.series.iter().map(|s| s.mask.iter().filter(|&&m| m).count()).sum()
    }

    /// Earliest year with an observation.
    pub fn first_observed_year(&self) -> Option<i32> {
        self.series
            .iter()
            .filter_map(|s| s.mask.iter().position(|&m| m))
            .min()
            .map(|i| self.date(i).year())
    }

    /// Copy of the panel with every observation after `end` removed.
    pub fn truncated(&self, end: YearMonth) -> Result<Self> {
        let keep = self.offset_of(end) + 1;
        if keep <= 0 {
            return Err(Error::Data(format!("no months on or before {end}")));
        }
        let keep = (keep as usize).min(self.len);
        let series = self
            .series
            .iter()
            .map(|s| Series {
                values: s.values[..keep].to_vec(),
                mask: s.mask[..keep].to_vec(),
                covariates: s.covariates.iter().map(|c| c[..keep].to_vec()).collect(),
                ..s.clone()
            })
            .collect();
        Self::new(self.start, keep, self.covariate_names.clone(), series)
    }
}

pub fn load_panel(path: impl AsRef<Path>) -> Result<SeriesPanel> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_panel(file)
}

/// Parses a long-format panel. Row numbers in errors are 1-based file lines
/// (the header is line 1).
pub fn read_panel<R: Read>(reader: R) -> Result<SeriesPanel> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        None => return Err(Error::Data("empty panel file".into())),
        Some(h) => h.map_err(|e| Error::Row {
            row: 1,
            message: e.to_string(),
        })?,
    };
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < FIXED_COLUMNS.len() || cols[..5] != FIXED_COLUMNS {
        return Err(Error::Row {
            row: 1,
            message: format!("header must start with {}", FIXED_COLUMNS.join(",")),
        });
    }
    let covariate_names: Vec<String> = cols[5..].iter().map(|s| s.to_string()).collect();

    struct Raw {
        product_id: String,
        location_id: String,
        points: BTreeMap<YearMonth, (f64, Vec<f64>)>,
    }
    let mut raw: HashMap<String, Raw> = HashMap::new();
    let mut lo: Option<YearMonth> = None;
    let mut hi: Option<YearMonth> = None;

    for (k, rec) in records.enumerate() {
        let row = k + 2;
        let rec = rec.map_err(|e| Error::Row {
            row,
            message: e.to_string(),
        })?;
        if rec.len() != cols.len() {
            return Err(Error::Row {
                row,
                message: format!("expected {} fields, found {}", cols.len(), rec.len()),
            });
        }
        let err = |message: String| Error::Row { row, message };
        let date: YearMonth = rec[3].parse().map_err(|e: Error| err(e.to_string()))?;
        let target: f64 = rec[4]
            .parse()
            .map_err(|_| err(format!("target {:?} is not a number", &rec[4])))?;
        if !target.is_finite() || target < 0.0 {
            return Err(err(format!("target {target} must be finite and non-negative")));
        }
        let mut covs = Vec::with_capacity(covariate_names.len());
        for (j, name) in covariate_names.iter().enumerate() {
            let v: f64 = rec[5 + j]
                .parse()
                .map_err(|_| err(format!("covariate {name} value {:?} is not a number", &rec[5 + j])))?;
            if !v.is_finite() {
                return Err(err(format!("covariate {name} is not finite")));
            }
            covs.push(v);
        }
        let entry = raw.entry(rec[0].to_string()).or_insert_with(|| Raw {
            product_id: rec[1].to_string(),
            location_id: rec[2].to_string(),
            points: BTreeMap::new(),
        });
        if entry.product_id != rec[1] || entry.location_id != rec[2] {
            return Err(err(format!("series {} changes its product or location id", &rec[0])));
        }
        if entry.points.insert(date, (target, covs)).is_some() {
            return Err(err(format!("duplicate row for series {} at {date}", &rec[0])));
        }
        lo = Some(lo.map_or(date, |d| d.min(date)));
        hi = Some(hi.map_or(date, |d| d.max(date)));
    }

    let (Some(lo), Some(hi)) = (lo, hi) else {
        return Err(Error::Data("empty panel: no data rows".into()));
    };
    let len = hi.months_since(lo) as usize + 1;
    let series = raw
        .into_iter()
        .map(|(series_id, r)| {
            let mut values = vec![0.0; len];
            let mut mask = vec![false; len];
            let mut covariates = vec![vec![0.0; len]; covariate_names.len()];
            for (date, (v, covs)) in r.points {
                let i = date.months_since(lo) as usize;
                values[i] = v;
                mask[i] = true;
                for (c, x) in covariates.iter_mut().zip(covs) {
                    c[i] = x;
                }
            }
            Series {
                series_id,
                product_id: r.product_id,
                location_id: r.location_id,
                values,
                mask,
                covariates,
            }
        })
        .collect();
    SeriesPanel::new(lo, len, covariate_names, series)
}

/// Writes observed entries in the long CSV schema, sorted by series then date.
pub fn write_panel<W: Write>(panel: &SeriesPanel, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| Error::Data(format!("writing panel: {e}"));
    let mut header: Vec<&str> = FIXED_COLUMNS.to_vec();
    header.extend(panel.covariate_names.iter().map(String::as_str));
    w.write_record(&header).map_err(to_err)?;
    for s in &panel.series {
        for (i, v) in s.observed() {
            let mut rec = vec![
                s.series_id.clone(),
                s.product_id.clone(),
                s.location_id.clone(),
                panel.date(i).to_string(),
                v.to_string(),
            ];
            rec.extend(s.covariates.iter().map(|c| c[i].to_string()));
            w.write_record(&rec).map_err(to_err)?;
        }
    }
    w.flush().map_err(|e| Error::Data(format!("writing panel: {e}")))?;
    Ok(())
}

pub fn save_panel(panel: &SeriesPanel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_panel(panel, std::io::BufWriter::new(file))
}
