mod common;

use isformer::attention::InterSeriesMode;
use isformer::network::LossKind;
use isformer::Error;

#[test]
fn forecast_has_one_value_per_horizon_step() {
    for mode in [None, Some(InterSeriesMode::Raw), Some(InterSeriesMode::Projected)] {
        let (model, window) = common::tiny_network(1, mode);
        let f = model.forward(&window).unwrap();
        assert_eq!(f.scaled.len(), 2);
        assert_eq!(f.encoder_attention.len(), model.config.encoder_blocks);
        assert_eq!(
            f.inter_series_weights.len(),
            model.config.inter_series_enabled() as usize
        );
    }
}

#[test]
fn without_inter_series_only_the_target_row_matters() {
    // the input is then just [P_q, X_q]
    let (model, window) = common::tiny_network(2, None);
    let mut other = window.clone();
    let row = 1 - other.target;
    let l = other.context_len();
    for t in 0..l {
        other.context.data_mut()[row * l + t] += 3.0;
    }
    assert_eq!(
        model.forward(&window).unwrap().scaled,
        model.forward(&other).unwrap().scaled
    );

    let (model, window) = common::tiny_network(2, Some(InterSeriesMode::Raw));
    let mut other = window.clone();
    for t in 0..l {
        other.context.data_mut()[row * l + t] += 3.0;
    }
    assert_ne!(
        model.forward(&window).unwrap().scaled,
        model.forward(&other).unwrap().scaled
    );
}

#[test]
fn horizon_and_schema_mismatches_are_rejected() {
    let (model, window) = common::tiny_network(3, Some(InterSeriesMode::Raw));
    let mut short = window.clone();
    short.future_dates.pop();
    short.labels.pop();
    short.label_mask.pop();
    assert!(matches!(model.forward(&short), Err(Error::Shape(_))));
    let width = model.features.continuous_width();
    assert!(matches!(
        model.embed_step(0.0, &vec![0.0; width], "P000", "L00"),
        Err(Error::Schema(_))
    ));
}

#[test]
fn embed_step_identifiers() {
    let (model, _) = common::tiny_network(5, Some(InterSeriesMode::Raw));
    let rest = vec![0.3; model.features.continuous_width() - 1];
    let a = model.embed_step(0.5, &rest, "P000", "L00").unwrap();
    let b = model.embed_step(0.5, &rest, "P001", "L00").unwrap();
    assert_eq!(a.shape(), &[model.config.d_model]);
    assert_ne!(a.data(), b.data());

    // zero continuous input with zero bias: only the identifiers contribute
    let zeros = vec![0.0; rest.len()];
    let z = model.embed_step(0.0, &zeros, "P001", "L00").unwrap();
    let p = model.params.get("embed.product").unwrap();
    let loc = model.params.get("embed.location").unwrap();
    let w = model.params.get("embed.in.w").unwrap();
    let bias = model.params.get("embed.in.b").unwrap();
    let (d, e) = (model.config.d_model, model.config.embedding_dim);
    let pi = model.features.products.index("P001");
    let li = model.features.locations.index("L00");
    for col in 0..d {
        let mut s = bias.data()[col];
        for k in 0..e {
            s += p.row(pi)[k] * w.at(d + k, col) + loc.row(li)[k] * w.at(d + e + k, col);
        }
        assert!((z.data()[col] - s).abs() < 1e-12);
    }

    // unknown identifiers fall back to the reserved row
    let u = model.embed_step(0.5, &rest, "nope", "L00").unwrap();
    assert_ne!(u.data(), a.data());
}

#[test]
fn loss_ignores_unobserved_labels() {
    let (model, window) = common::tiny_network(6, Some(InterSeriesMode::Raw));
    let mut masked = window.clone();
    masked.label_mask[1] = false;
    masked.labels[1] = 1e6;
    let f = model.forward(&window).unwrap().scaled;
    let expected = (f[0] - window.labels[0]).powi(2);
    assert!((model.loss(&masked, LossKind::Mse).unwrap() - expected).abs() < 1e-12);
    let mae = (f[0] - window.labels[0]).abs();
    assert!((model.loss(&masked, LossKind::Mae).unwrap() - mae).abs() < 1e-12);
}
