//! Helpers shared by the integration tests and the acceptance run.
#![allow(dead_code, clippy::needless_range_loop)]

use isformer::attention::{
    attention, inter_series_attention, multi_head, InterSeriesMode, MultiHeadConfig, MultiHeadVars, SeriesMask,
};
use isformer::autograd::{Graph, Var};
use isformer::data::{build_window, fit_scaler, generate_synthetic, ScalerMode, SynthConfig, WindowBatch};
use isformer::network::{FeatureSpec, LossKind, ModelState, NetworkConfig};
use isformer::params::ParamStore;
use isformer::tensor::Tensor;
use isformer::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Denominator floor of [`rel_err`]. A central difference with step 1e-5
/// on an O(1) loss carries about 1e-10 of round-off, so gradient entries
/// below this floor are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Same as [`random_tensor`] but bounded away from zero, for ops with a
/// kink at the origin.
pub fn random_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random_tensor(rng, shape);
    for x in t.data_mut() {
        if x.abs() < 0.05 {
            *x += 0.1f64.copysign(*x);
        }
    }
    t
}

/// Fixed weights that turn any output into a scalar loss with a
/// non-uniform gradient.
fn probe(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|k| (1.3 * k as f64 + 0.5).sin() + 0.2).collect(),
    )
    .unwrap()
}

/// Compares the analytic gradient of `sum(build(inputs) * probe)` with
/// central differences for every input entry. Returns the max relative error.
pub fn check_op<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        let w = g.constant(probe(g.shape(out)));
        let p = g.mul(out, w).unwrap();
        let l = g.sum(p);
        let value = g.value(l).item();
        let grads = g.backward(l).unwrap();
        let gs = vars
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .map_or_else(|| vec![0.0; g.value(v).numel()], <[f64]>::to_vec)
            })
            .collect();
        (value, gs)
    };
    let (_, analytic) = eval(inputs);
    let mut worst: f64 = 0.0;
    let mut ins = inputs.to_vec();
    for i in 0..ins.len() {
        for j in 0..ins[i].numel() {
            let x = ins[i].data()[j];
            ins[i].data_mut()[j] = x + FD_STEP;
            let up = eval(&ins).0;
            ins[i].data_mut()[j] = x - FD_STEP;
            let down = eval(&ins).0;
            ins[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

/// Max relative error over every differentiable operation for one seed.
/// Returns `(op name, error)` pairs.
pub fn op_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = |lo: usize| rng.random_range(lo..=6usize);
    let (a, b, c) = (dims(1), dims(1), dims(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let r = &mut rng;
    let mut out = Vec::new();

    let x = random_tensor(r, &[a, b]);
    let y = random_tensor(r, &[b, c]);
    out.push(("matmul", check_op(&[x.clone(), y], |g, v| g.matmul(v[0], v[1]))));
    out.push((
        "transpose",
        check_op(std::slice::from_ref(&x), |g, v| g.transpose(v[0])),
    ));
    let y = random_tensor(r, &[a, b]);
    let row = random_tensor(r, &[b]);
    out.push(("add", check_op(&[x.clone(), y.clone()], |g, v| g.add(v[0], v[1]))));
    out.push((
        "add_broadcast",
        check_op(&[x.clone(), row.clone()], |g, v| g.add(v[0], v[1])),
    ));
    out.push(("sub", check_op(&[x.clone(), y.clone()], |g, v| g.sub(v[0], v[1]))));
    out.push(("mul", check_op(&[x.clone(), y.clone()], |g, v| g.mul(v[0], v[1]))));
    out.push(("mul_broadcast", check_op(&[x.clone(), row], |g, v| g.mul(v[0], v[1]))));
    out.push((
        "scale",
        check_op(std::slice::from_ref(&x), |g, v| Ok(g.scale(v[0], -0.7))),
    ));
    let kinked = random_away_from_zero(r, &[a, b]);
    out.push(("relu", check_op(std::slice::from_ref(&kinked), |g, v| Ok(g.relu(v[0])))));
    out.push(("abs", check_op(&[kinked], |g, v| Ok(g.abs(v[0])))));
    out.push(("gelu", check_op(std::slice::from_ref(&x), |g, v| Ok(g.gelu(v[0])))));
    let pos = Tensor::new(vec![a, b], x.data().iter().map(|v| v.abs() + 0.1).collect()).unwrap();
    out.push(("log1p", check_op(&[pos], |g, v| Ok(g.log1p(v[0])))));
    let z = random_tensor(r, &[a, c]);
    out.push(("concat", check_op(&[x.clone(), z], |g, v| g.concat(&[v[0], v[1]]))));
    out.push((
        "softmax_rows",
        check_op(std::slice::from_ref(&x), |g, v| g.softmax_rows(v[0])),
    ));
    let mask: Vec<bool> = (0..a * b).map(|k| k % b == 0 || r.random::<bool>()).collect();
    out.push((
        "masked_softmax_rows",
        check_op(std::slice::from_ref(&x), |g, v| {
            g.masked_softmax_rows(v[0], Some(&mask))
        }),
    ));
    let gain = random_tensor(r, &[b]);
    let bias = random_tensor(r, &[b]);
    let wide = random_tensor(r, &[a, b.max(2)]);
    let (gain, bias) = if b >= 2 {
        (gain, bias)
    } else {
        (random_tensor(r, &[2]), random_tensor(r, &[2]))
    };
    out.push((
        "layer_norm",
        check_op(&[wide, gain, bias], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
    ));
    out.push(("sum", check_op(std::slice::from_ref(&x), |g, v| Ok(g.sum(v[0])))));
    out.push(("mean", check_op(std::slice::from_ref(&x), |g, v| Ok(g.mean(v[0])))));
    out.push((
        "reshape",
        check_op(std::slice::from_ref(&x), |g, v| g.reshape(v[0], vec![a * b])),
    ));
    let rows: Vec<usize> = (0..c + 1).map(|_| r.random_range(0..a)).collect();
    out.push((
        "gather_rows",
        check_op(std::slice::from_ref(&x), |g, v| g.gather_rows(v[0], &rows)),
    ));

    let q = random_tensor(r, &[a, b]);
    let k = random_tensor(r, &[c, b]);
    let vv = random_tensor(r, &[c, a]);
    let key_mask: Vec<bool> = (0..c).map(|j| j == 0 || r.random::<bool>()).collect();
    out.push((
        "attention",
        check_op(&[q, k, vv], |g, v| {
            Ok(attention(g, v[0], v[1], v[2], Some(&key_mask))?.0)
        }),
    ));

    // multi-head and projected inter-series attention, gradients w.r.t.
    // inputs and projections together
    let heads = [1usize, 2, 3][r.random_range(0..3usize)];
    let cfg = MultiHeadConfig::new(2 * heads, heads).unwrap();
    let mut store = ParamStore::new();
    cfg.init_params("mh", &mut store, r).unwrap();
    let x = random_tensor(r, &[a, cfg.d_model]);
    let mut inputs = vec![x];
    inputs.extend(
        store
            .tensors()
            .iter()
            .map(|t| Tensor::new(t.shape().to_vec(), t.data().to_vec()).unwrap()),
    );
    out.push((
        "multi_head",
        check_op(&inputs, |g, v| {
            // parameters are stored per head as (wq, wk, wv), then wo
            let vars = MultiHeadVars {
                wq: (0..heads).map(|i| v[1 + 3 * i]).collect(),
                wk: (0..heads).map(|i| v[2 + 3 * i]).collect(),
                wv: (0..heads).map(|i| v[3 + 3 * i]).collect(),
                wo: v[1 + 3 * heads],
            };
            Ok(multi_head(g, v[0], v[0], v[0], &cfg, &vars, None)?.0)
        }),
    ));

    let (m, l) = (a.max(2), b.max(2));
    let panel = random_tensor(r, &[m, l]);
    let pq = Tensor::new(vec![1, l], panel.row(0).to_vec()).unwrap();
    let smask = SeriesMask::new((0..m).map(|j| j == 0 || r.random::<bool>()).collect()).unwrap();
    out.push((
        "inter_series_raw",
        check_op(&[pq.clone(), panel.clone()], |g, v| {
            Ok(inter_series_attention(g, v[0], v[1], &smask, InterSeriesMode::Raw, None)?.0)
        }),
    ));
    let is_cfg = MultiHeadConfig::square(l, 1).unwrap();
    let mut store = ParamStore::new();
    is_cfg.init_params("is", &mut store, r).unwrap();
    let mut inputs = vec![pq, panel];
    inputs.extend(
        store
            .tensors()
            .iter()
            .map(|t| Tensor::new(t.shape().to_vec(), t.data().to_vec()).unwrap()),
    );
    out.push((
        "inter_series_projected",
        check_op(&inputs, |g, v| {
            let vars = MultiHeadVars {
                wq: vec![v[2]],
                wk: vec![v[3]],
                wv: vec![v[4]],
                wo: v[5],
            };
            Ok(inter_series_attention(
                g,
                v[0],
                v[1],
                &smask,
                InterSeriesMode::Projected,
                Some((&is_cfg, &vars)),
            )?
            .0)
        }),
    ));
    out
}

/// Two-series panel, `L = 4`, `h = 2`, `d_model = 8` model and one window.
pub fn tiny_network(seed: u64, mode: Option<InterSeriesMode>) -> (ModelState, WindowBatch) {
    let panel = generate_synthetic(&SynthConfig {
        num_series: 2,
        months: 10,
        seed,
        ..Default::default()
    })
    .unwrap();
    let net = NetworkConfig {
        inter_series: mode,
        ..NetworkConfig::small(8, 2, 4, 2)
    };
    let features = FeatureSpec::from_panel(&panel, 6, 8, true, net.inter_series_enabled()).unwrap();
    let scaler = fit_scaler(&panel, panel.end(), ScalerMode::default()).unwrap();
    let model = ModelState::init(net, features, scaler, panel.start().year(), seed).unwrap();
    let window = build_window(&panel, &model.scaler, (seed % 2) as usize, 6, 4, 2).unwrap();
    (model, window)
}

/// Max relative error between backprop and central differences over every
/// parameter of the tiny network.
pub fn network_gradient_error(seed: u64) -> f64 {
    let mode = match seed % 3 {
        0 => Some(InterSeriesMode::Raw),
        1 => Some(InterSeriesMode::Projected),
        _ => None,
    };
    let (mut model, window) = tiny_network(seed, mode);
    let (_, grads) = model.loss_and_gradients(&window, LossKind::Mse, None).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..model.params.len() {
        for j in 0..model.params.tensors()[i].numel() {
            let x = model.params.tensors()[i].data()[j];
            model.params.tensors_mut()[i].data_mut()[j] = x + FD_STEP;
            let up = model.loss(&window, LossKind::Mse).unwrap();
            model.params.tensors_mut()[i].data_mut()[j] = x - FD_STEP;
            let down = model.loss(&window, LossKind::Mse).unwrap();
            model.params.tensors_mut()[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads[i].as_ref().map_or(0.0, |g| g[j]);
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    worst
}

/// Metric definitions written as plain loops, independent of the library.
pub mod oracle {
    pub fn wmape(a: &[f64], f: &[f64], m: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..a.len() {
            if m[i] {
                num += if a[i] > f[i] { a[i] - f[i] } else { f[i] - a[i] };
                den += if a[i] < 0.0 { -a[i] } else { a[i] };
            }
        }
        num / den
    }

    pub fn rmse(a: &[f64], f: &[f64], m: &[bool]) -> f64 {
        let mut s = 0.0;
        let mut n = 0.0;
        for i in 0..a.len() {
            if m[i] {
                s += (a[i] - f[i]) * (a[i] - f[i]);
                n += 1.0;
            }
        }
        (s / n).sqrt()
    }

    pub fn rmsse(hist: &[f64], a: &[f64], f: &[f64]) -> f64 {
        let mut naive = 0.0;
        for t in 1..hist.len() {
            naive += (hist[t] - hist[t - 1]) * (hist[t] - hist[t - 1]);
        }
        naive /= (hist.len() - 1) as f64;
        let mut err = 0.0;
        for i in 0..a.len() {
            err += (a[i] - f[i]) * (a[i] - f[i]);
        }
        err /= a.len() as f64;
        (err / naive).sqrt()
    }

    pub fn wbias(am: &[f64], fm: &[f64], vol: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for s in 0..am.len() {
            let d = am[s] - fm[s];
            num += vol[s] * if d < 0.0 { -d } else { d };
            den += vol[s];
        }
        num / den
    }
}
