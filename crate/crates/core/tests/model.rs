mod common;

use collidenet_core::decomposition::decompose;
use collidenet_core::numerics::{matmul, Tensor};
use collidenet_core::segment_attention::mssc;
use collidenet_core::spatial::{AttentionMode, SpatialConfig};
use collidenet_core::stationarity::{normalize, Rescalers};
use collidenet_core::temporal::{ablation_row, ClipInput, CollideNet, ModelConfig, Pooling, Toggles, ABLATION_ROWS};
use common::{rng, uniform};

const SEQ: usize = 8;

fn compact(toggles: Toggles) -> ModelConfig {
    ModelConfig {
        toggles,
        ..ModelConfig::compact(SEQ)
    }
}

fn toggles(ms: bool, t: bool, s: bool, ns: bool) -> Toggles {
    Toggles {
        multi_scale: ms,
        trend: t,
        seasonality: s,
        non_stationary: ns,
    }
}

fn embeddings(seed: u64) -> Tensor {
    uniform(&mut rng(seed), &[SEQ, 16]).scale(2.0)
}

fn param(model: &CollideNet, name: &str) -> Tensor {
    model.params.get(model.params.id(name).unwrap_or_else(|| panic!("no parameter {name}"))).clone()
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, d) = (x.dims2().unwrap().0, w.shape()[1]);
    let h = matmul(x, w).unwrap();
    let bias = Tensor::new(&[n, d], (0..n).flat_map(|_| b.data().to_vec()).collect()).unwrap();
    h.add(&bias).unwrap()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

#[test]
fn encoder_without_splits_is_attention_then_feed_forward() {
    let model = CollideNet::new(compact(toggles(true, false, false, false)), 1).unwrap();
    let z = embeddings(2);
    let r = Rescalers::identity();
    let got = model.encoder_forward(&z, &r).unwrap();

    let p = |s: &str| param(&model, &format!("encoder0.{s}"));
    let (q, k, v) = (matmul(&z, &p("attn.wq")).unwrap(), matmul(&z, &p("attn.wk")).unwrap(), matmul(&z, &p("attn.wv")).unwrap());
    let y = mssc(&q, &k, &v, &model.effective_config().temporal.attention, &r).unwrap();
    let x = z.add(&affine(&y, &p("attn.wo"), &p("attn.bo"))).unwrap();
    let h = affine(&x, &p("ff.w1"), &p("ff.b1")).map(gelu);
    let want = x.add(&affine(&h, &p("ff.w2"), &p("ff.b2"))).unwrap();

    assert_eq!(got.shape(), &[SEQ, 16]);
    assert!(got.max_abs_diff(&want) <= 1e-12, "{}", got.max_abs_diff(&want));
}

#[test]
fn encoder_keeps_zero_seasonality_of_constant_input() {
    let model = CollideNet::new(compact(Toggles::all()), 3).unwrap();
    let z = Tensor::full(&[SEQ, 16], 0.4);
    let out = model.encoder_forward(&z, &Rescalers::identity()).unwrap();
    let k = model.config().temporal.window;
    for t in k / 2..SEQ - k / 2 {
        assert!(out.row(t).iter().all(|v| v.abs() <= 1e-6), "row {t}");
    }
}

#[test]
fn decoder_with_fresh_trend_projection_adds_trend_seed() {
    let with_trend = CollideNet::new(compact(toggles(true, true, true, false)), 4).unwrap();
    let seasonal_only = CollideNet::new(compact(toggles(true, false, true, false)), 4).unwrap();
    let z_enc = embeddings(5);
    let dec = decompose(&embeddings(6), 3).unwrap();
    let r = Rescalers::identity();
    let full = with_trend.decoder_forward(&z_enc, &dec.trend, &dec.seasonality, &r, None).unwrap();
    let stream = seasonal_only.decoder_forward(&z_enc, &dec.trend, &dec.seasonality, &r, None).unwrap();
    assert_eq!(full.shape(), &[SEQ, 16]);
    assert_eq!(full, stream.add(&dec.trend).unwrap());
}

#[test]
fn predictive_lag_changes_the_decoder() {
    let mut plain_cfg = compact(Toggles::all());
    plain_cfg.temporal.predictive_lag = false;
    let lagged = CollideNet::new(compact(Toggles::all()), 7).unwrap();
    let plain = CollideNet::new(plain_cfg, 7).unwrap();
    assert_eq!(lagged.param_count(), plain.param_count());
    let z_enc = embeddings(8);
    let dec = decompose(&embeddings(9), 3).unwrap();
    let r = Rescalers::identity();
    let a = lagged.decoder_forward(&z_enc, &dec.trend, &dec.seasonality, &r, None).unwrap();
    let b = plain.decoder_forward(&z_enc, &dec.trend, &dec.seasonality, &r, None).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-3);
}

#[test]
fn normalisation_sandwich_is_transparent_on_standardised_input() {
    let (z, _) = normalize(&embeddings(10)).unwrap();
    let input = ClipInput::Embeddings(z);
    for (t, s) in [(true, true), (false, false), (true, false), (false, true)] {
        let on = CollideNet::new(compact(toggles(true, t, s, true)), 11).unwrap();
        let off = CollideNet::new(compact(toggles(true, t, s, false)), 11).unwrap();
        let (a, b) = (on.predict(&input).unwrap().ttc, off.predict(&input).unwrap().ttc);
        assert!((a - b).abs() <= 1e-9, "T={t} S={s}: {a} vs {b}");
    }
}

#[test]
fn predictions_are_deterministic() {
    let frames = uniform(&mut rng(12), &[SEQ, 32, 32, 3]).map(|v| v.abs());
    let a = CollideNet::new(compact(Toggles::all()), 13).unwrap();
    let b = CollideNet::new(compact(Toggles::all()), 13).unwrap();
    assert_eq!(a, b);
    let input = ClipInput::Frames(frames.clone());
    let p = a.predict(&input).unwrap();
    assert_eq!(p.ttc.to_bits(), a.predict(&ClipInput::Frames(frames)).unwrap().ttc.to_bits());
    assert_eq!(p.ttc.to_bits(), b.predict(&input).unwrap().ttc.to_bits());
    assert!(p.ttc.is_finite());
}

#[test]
fn every_toggle_combination_runs() {
    let frames = ClipInput::Frames(uniform(&mut rng(14), &[SEQ, 32, 32, 3]).map(|v| v.abs()));
    for bits in 0..16u8 {
        let tg = toggles(bits & 8 != 0, bits & 4 != 0, bits & 2 != 0, bits & 1 != 0);
        let model = CollideNet::new(compact(tg), 15).unwrap();
        let (loss, pred, grads) = model.loss_and_grads(&frames, 1.5, collidenet_core::temporal::Mode::Eval).unwrap();
        assert!(pred.is_finite() && loss.is_finite(), "{tg:?}");
        assert_eq!(grads.len(), model.params.len());
    }
    assert_eq!(ABLATION_ROWS.len(), 14);
}

#[test]
fn malformed_clips_are_input_errors() {
    let model = CollideNet::new(compact(Toggles::all()), 0).unwrap();
    let short = ClipInput::Embeddings(Tensor::zeros(&[SEQ - 1, 16]));
    assert!(matches!(model.predict(&short), Err(collidenet_core::Error::Input(_))));
    let small = ClipInput::Frames(Tensor::zeros(&[SEQ, 16, 16, 3]));
    assert!(matches!(model.predict(&small), Err(collidenet_core::Error::Input(_))));
}

/// Parameter count of a model with one spatial stage (no pooling) and no
/// projector, trend projection or fusion weights, from layer shapes alone.
fn reduced_param_count(cfg: &ModelConfig) -> usize {
    let lin = |i: usize, o: usize| i * o + o;
    let s = &cfg.spatial;
    let c = s.stages[0].width;
    let block = 2 * c + 3 * c * c + lin(c, c) + 2 * c + lin(c, c * s.mlp_ratio) + lin(c * s.mlp_ratio, c);
    let spatial = lin(s.patch_size * s.patch_size * 3, c) + block + 2 * c + lin(c, s.embed_dim);
    let d = s.embed_dim;
    let attn = 3 * d * d + lin(d, d);
    let ff = lin(d, cfg.temporal.ff_width) + lin(cfg.temporal.ff_width, d);
    let head = lin(d, cfg.head_hidden) + lin(cfg.head_hidden, 1);
    spatial + (attn + ff) + (2 * attn + ff) + head
}

#[test]
fn all_off_row_is_the_plain_transformer() {
    let id14 = CollideNet::new(compact(ablation_row(14).unwrap()), 16).unwrap();
    let mut direct = ModelConfig::compact(SEQ);
    direct.toggles = Toggles::none();
    direct.spatial = SpatialConfig {
        stages: vec![collidenet_core::spatial::StageConfig {
            attention: AttentionMode::Global,
            ..direct.spatial.stages[0].clone()
        }],
        ..direct.spatial
    };
    direct.temporal.attention.num_scales = 1;
    let direct = CollideNet::new(direct, 16).unwrap();

    assert_eq!(id14.param_count(), reduced_param_count(&direct.config().clone()));
    assert_eq!(id14.param_count(), direct.param_count());

    let input = ClipInput::Frames(uniform(&mut rng(17), &[SEQ, 32, 32, 3]).map(|v| v.abs()));
    let trace = id14.op_trace(&input).unwrap();
    assert_eq!(trace, direct.op_trace(&input).unwrap());
    let count = |op: &str| trace.iter().filter(|o| **o == op).count();
    assert_eq!(count("segment_correlation"), 3);
    assert_eq!(count("attention"), 1);
    for absent in ["moving_average", "column_stats", "exp", "dropout", "concat_cols"] {
        assert_eq!(count(absent), 0, "{absent}");
    }
    assert_eq!(id14.predict(&input).unwrap(), direct.predict(&input).unwrap());

    let full = CollideNet::new(compact(Toggles::all()), 16).unwrap();
    let full_trace = full.op_trace(&input).unwrap();
    assert_eq!(full_trace.iter().filter(|o| **o == "segment_correlation").count(), 6);
    assert!(full_trace.contains(&"moving_average") && full_trace.contains(&"column_stats"));
    assert!(full.param_count() > id14.param_count());
}

#[test]
fn mean_pooling_discards_a_purely_seasonal_output() {
    // Edge-clamped k = 3 smoothing preserves column sums, so the seasonal
    // stream sums to zero over time and the pooled head input is zero.
    let predict = |pooling, seed| {
        let cfg = ModelConfig { pooling, ..compact(ablation_row(11).unwrap()) };
        let model = CollideNet::new(cfg, 18).unwrap();
        model.predict(&ClipInput::Embeddings(embeddings(seed))).unwrap().ttc
    };
    let (a, b) = (predict(Pooling::Mean, 19), predict(Pooling::Mean, 20));
    assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    let (c, d) = (predict(Pooling::Last, 19), predict(Pooling::Last, 20));
    assert!((c - d).abs() > 1e-6);
}
