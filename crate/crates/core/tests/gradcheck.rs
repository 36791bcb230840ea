mod common;

use std::rc::Rc;

use collidenet_core::numerics::{AttentionGroups, RowOp, Tape, Tensor, Var};
use collidenet_core::params::{Bound, ParamStore};
use collidenet_core::segment_attention::{mssc_on_tape, Pairing, ScaleFusion, SegmentAttentionConfig, SegmentPlan};
use collidenet_core::spatial::{SpatialConfig, SpatialEncoder};
use collidenet_core::stationarity::{denormalize_on_tape, normalize, normalize_on_tape, Projector, Rescalers};
use collidenet_core::temporal::{ClipInput, CollideNet, Mode, ModelConfig, Toggles};
use common::{check, rel_err, rng, uniform, weighted_sum, EPS, TOL};

fn unary(shape: &[usize], seed: u64, op: impl Fn(&mut Tape, Var) -> collidenet_core::Result<Var>) {
    let x = uniform(&mut rng(seed), shape);
    check(&[x], |t, v| {
        let y = op(t, v[0])?;
        weighted_sum(t, y, seed + 100)
    });
}

#[test]
fn matmul_add_sub_mul_scale() {
    let mut r = rng(1);
    let (a, b) = (uniform(&mut r, &[3, 4]), uniform(&mut r, &[4, 2]));
    check(&[a.clone(), b], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, 2)
    });
    let c = uniform(&mut r, &[3, 4]);
    check(&[a, c], |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(s, v[1])?;
        let d = t.sub(d, v[1])?;
        let m = t.mul(d, v[0])?;
        let y = t.scale(m, -1.7)?;
        weighted_sum(t, y, 3)
    });
}

#[test]
fn row_ops_and_linear() {
    let mut r = rng(4);
    let x = uniform(&mut r, &[4, 3]);
    let row = uniform(&mut r, &[3]).map(|v| v + 2.0);
    for kind in [RowOp::Add, RowOp::Sub, RowOp::Mul, RowOp::Div] {
        check(&[x.clone(), row.clone()], |t, v| {
            let y = t.row_op(kind, v[0], v[1])?;
            weighted_sum(t, y, 5)
        });
    }
    let (w, b) = (uniform(&mut r, &[3, 5]), uniform(&mut r, &[5]));
    check(&[x, w, b], |t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        weighted_sum(t, y, 6)
    });
}

#[test]
fn pointwise_nonlinearities() {
    unary(&[3, 4], 7, |t, x| t.gelu(x));
    unary(&[3, 4], 8, |t, x| t.exp(x));
    // Keep inputs away from the kink.
    let x = uniform(&mut rng(9), &[12]).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    check(&[x], |t, v| {
        let y = t.relu(v[0])?;
        weighted_sum(t, y, 10)
    });
    let x = uniform(&mut rng(11), &[12]);
    let mask: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 1.5 }).collect();
    check(&[x], |t, v| {
        let y = t.dropout(v[0], mask.clone())?;
        weighted_sum(t, y, 12)
    });
}

#[test]
fn softmax_and_layer_norm() {
    unary(&[3, 5], 13, |t, x| t.softmax(x));
    let mut r = rng(14);
    let (x, g, b) = (uniform(&mut r, &[4, 6]), uniform(&mut r, &[6]), uniform(&mut r, &[6]));
    check(&[x, g, b], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?;
        weighted_sum(t, y, 15)
    });
}

#[test]
fn reductions_and_statistics() {
    unary(&[5, 3], 16, |t, x| t.mean_rows(x));
    unary(&[5, 3], 17, |t, x| {
        let s = t.sum(x)?;
        t.scale(s, 0.5)
    });
    unary(&[6, 4], 18, |t, x| t.column_stats(x, 1e-5));
}

#[test]
fn indexing_and_layout() {
    let idx = Rc::new(vec![3, 0, 0, 5, 2, 2, 1, 4]);
    unary(&[2, 3], 19, move |t, x| t.gather(x, idx.clone(), &[2, 4]));
    unary(&[4, 2], 20, |t, x| t.gather_rows(x, &[0, 3, 3, 1, 2]));
    unary(&[4, 3], 21, |t, x| t.reshape(x, &[2, 6]));
    let mut r = rng(22);
    let (a, b) = (uniform(&mut r, &[3, 2]), uniform(&mut r, &[3, 4]));
    check(&[a, b], |t, v| {
        let y = t.concat_cols(&[v[0], v[1], v[0]])?;
        weighted_sum(t, y, 23)
    });
}

#[test]
fn moving_average_windows() {
    for k in [1, 3, 5, 7, 9] {
        unary(&[5, 2], 24 + k as u64, move |t, x| t.moving_average(x, k));
    }
}

#[test]
fn grouped_attention() {
    let mut r = rng(30);
    let (q, k, v) = (uniform(&mut r, &[6, 4]), uniform(&mut r, &[6, 4]), uniform(&mut r, &[6, 4]));
    let groups = Rc::new(AttentionGroups {
        q: vec![vec![0, 1, 2], vec![3, 4, 5]],
        kv: vec![vec![0, 1, 2], vec![2, 3, 4, 5]],
    });
    check(&[q.clone(), k.clone(), v.clone()], |t, x| {
        let y = t.attention(x[0], x[1], x[2], 2, groups.clone())?;
        weighted_sum(t, y, 31)
    });
    // Pooled queries: fewer query rows than keys.
    let q2 = uniform(&mut r, &[2, 4]);
    let pooled = Rc::new(AttentionGroups {
        q: vec![vec![0], vec![1]],
        kv: vec![vec![0, 1, 2], vec![3, 4, 5]],
    });
    check(&[q2, k, v], |t, x| {
        let y = t.attention(x[0], x[1], x[2], 1, pooled.clone())?;
        weighted_sum(t, y, 32)
    });
}

#[test]
fn segment_correlation_all_inputs() {
    for (pairing, seg_len, heads, n, valid) in [
        (Pairing::Aligned, 2, 2, 8, 8),
        (Pairing::Predictive, 2, 1, 8, 8),
        (Pairing::Aligned, 3, 1, 9, 7),
        (Pairing::Predictive, 4, 2, 12, 10),
    ] {
        let mut r = rng(40 + seg_len as u64);
        let d = 4;
        let n_seg = n / seg_len;
        let inputs = vec![
            uniform(&mut r, &[n, d]),
            uniform(&mut r, &[n, d]),
            uniform(&mut r, &[n, d]),
            Tensor::scalar(0.8),
            uniform(&mut r, &[n_seg]),
        ];
        let plan = SegmentPlan {
            seg_len,
            heads,
            pairing,
            valid_len: valid,
        };
        check(&inputs, |t, x| {
            let y = t.segment_correlation(x[0], x[1], x[2], x[3], Some(x[4]), plan.clone())?;
            weighted_sum(t, y, 41)
        });
    }
}

#[test]
fn multi_scale_with_learned_fusion() {
    let cfg = SegmentAttentionConfig {
        base_segment_len: 1,
        num_scales: 3,
        head_dim: 2,
        num_heads: 2,
        pad_to_fit: true,
        fusion: ScaleFusion::Learned,
    };
    let n = 7;
    let mut r = rng(50);
    let inputs = vec![
        uniform(&mut r, &[n, 4]),
        uniform(&mut r, &[n, 4]),
        uniform(&mut r, &[n, 4]),
        Tensor::scalar(1.3),
        uniform(&mut r, &[cfg.coarsest_segments(n)]),
        uniform(&mut r, &[3]),
    ];
    for pairing in [Pairing::Aligned, Pairing::Predictive] {
        check(&inputs, |t, x| {
            let y = mssc_on_tape(t, x[0], x[1], x[2], &cfg, x[3], Some(x[4]), pairing, Some(x[5]))?;
            weighted_sum(t, y, 51)
        });
    }
}

#[test]
fn normalisation_sandwich() {
    let z = uniform(&mut rng(60), &[6, 3]);
    check(&[z.clone()], |t, x| {
        let (zn, mu, sigma) = normalize_on_tape(t, x[0])?;
        let sq = t.mul(zn, zn)?;
        let y = denormalize_on_tape(t, sq, mu, sigma)?;
        weighted_sum(t, y, 61)
    });
}

#[test]
fn projector_parameter_gradients() {
    let z = uniform(&mut rng(60), &[6, 3]);
    let mut store = ParamStore::with_seed(3);
    let proj = Projector::new(&mut store, "p", 3, 5, 2).unwrap();
    // Non-zero output weights so tau and delta both depend on every parameter.
    for id in proj.param_ids() {
        let noise = uniform(&mut rng(62 + id.index() as u64), store.get(id).shape());
        *store.get_mut(id) = noise;
    }
    let objective = |r: &Rescalers| 0.7 * r.tau - 1.1 * r.delta[0] + 0.4 * r.delta[1];
    let (zn, stats) = normalize(&z).unwrap();

    let mut tape = Tape::new();
    let mut b = Bound::new(&store, true);
    let zv = tape.constant(zn.clone());
    let mu = tape.constant(Tensor::new(&[3], stats.mu.clone()).unwrap());
    let sigma = tape.constant(Tensor::new(&[3], stats.sigma.clone()).unwrap());
    let (tau, delta) = proj.forward(&mut tape, &mut b, mu, sigma, zv).unwrap();
    let w = tape.constant(Tensor::new(&[2], vec![-1.1, 0.4]).unwrap());
    let wd = tape.mul(delta, w).unwrap();
    let wd = tape.sum(wd).unwrap();
    let wt = tape.scale(tau, 0.7).unwrap();
    let loss = tape.add(wt, wd).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    let grads = b.collect(&mut grads);

    for id in proj.param_ids() {
        for j in 0..store.get(id).numel() {
            let mut s = store.clone();
            s.get_mut(id).data_mut()[j] += EPS;
            let up = objective(&proj.project(&s, &stats, &zn).unwrap());
            s.get_mut(id).data_mut()[j] -= 2.0 * EPS;
            let down = objective(&proj.project(&s, &stats, &zn).unwrap());
            let fd = (up - down) / (2.0 * EPS);
            let a = grads[id.index()].data()[j];
            assert!(rel_err(a, fd) < TOL, "{}[{j}]: {a} vs {fd}", store.name(id));
        }
    }
}

fn spatial_config(image: usize) -> SpatialConfig {
    SpatialConfig::hierarchical(image, 4, 4, 2, 6)
}

#[test]
fn spatial_encoder_pixel_gradients() {
    let cfg = spatial_config(16);
    let mut store = ParamStore::with_seed(70);
    let enc = SpatialEncoder::new(&mut store, "s", cfg).unwrap();
    let frame = uniform(&mut rng(71), &[1, 16, 16, 3]).map(|v| 0.5 + 0.5 * v);
    check(&[frame], |t, x| {
        let mut p = Bound::new(&store, false);
        let z = enc.encode_on_tape(t, &mut p, x[0])?;
        weighted_sum(t, z, 72)
    });
}

fn tiny_model(toggles: Toggles) -> ModelConfig {
    let mut c = ModelConfig::compact(6);
    c.spatial = SpatialConfig::hierarchical(8, 2, 4, 2, 4);
    c.temporal.attention.head_dim = 2;
    c.temporal.attention.num_heads = 2;
    c.temporal.ff_width = 6;
    c.temporal.projector_hidden = 5;
    c.temporal.window = 3;
    c.temporal.input_window = 5;
    c.head_hidden = 5;
    c.toggles = toggles;
    c
}

/// Randomises zero-initialised parameters so every path carries gradient.
fn perturbed(config: ModelConfig, seed: u64) -> CollideNet {
    let mut m = CollideNet::new(config, seed).unwrap();
    let ids: Vec<_> = m.params.ids().collect();
    for id in ids {
        let t = m.params.get_mut(id);
        let noise = uniform(&mut rng(seed ^ id.index() as u64), t.shape());
        *t = t.add(&noise.scale(0.3)).unwrap();
    }
    m
}

fn model_fd(model: &CollideNet, input: &ClipInput, label: f64, fraction: f64, seed: u64) {
    let (_, _, grads) = model.loss_and_grads(input, label, Mode::Eval).unwrap();
    let loss = |m: &CollideNet| {
        let y = m.predict(input).unwrap().ttc;
        (y - label) * (y - label)
    };
    let mut r = rng(seed);
    let mut checked = 0;
    let ids: Vec<_> = model.params.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for j in 0..model.params.get(id).numel() {
            if rand::Rng::random::<f64>(&mut r) >= fraction {
                continue;
            }
            let mut m = model.clone();
            m.params.get_mut(id).data_mut()[j] += EPS;
            let up = loss(&m);
            m.params.get_mut(id).data_mut()[j] -= 2.0 * EPS;
            let down = loss(&m);
            let fd = (up - down) / (2.0 * EPS);
            let a = grads[pi].data()[j];
            let e = rel_err(a, fd);
            assert!(e < TOL, "{}[{j}]: analytic {a} vs fd {fd} ({e:.2e})", model.params.name(id));
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn end_to_end_model_every_parameter() {
    let model = perturbed(tiny_model(Toggles::all()), 80);
    let frames = uniform(&mut rng(81), &[6, 8, 8, 3]).map(|v| 0.5 + 0.5 * v);
    model_fd(&model, &ClipInput::Frames(frames), 1.5, 1.0, 82);
}

#[test]
fn end_to_end_model_sampled_parameters_default_size() {
    let mut cfg = ModelConfig::compact(8);
    cfg.temporal.attention.fusion = ScaleFusion::Learned;
    let model = perturbed(cfg, 83);
    let frames = uniform(&mut rng(84), &[8, 32, 32, 3]).map(|v| 0.5 + 0.5 * v);
    model_fd(&model, &ClipInput::Frames(frames), 2.0, 0.01, 85);
}

#[test]
fn end_to_end_every_toggle_combination() {
    for bits in 0..16u8 {
        let toggles = Toggles {
            multi_scale: bits & 8 != 0,
            trend: bits & 4 != 0,
            seasonality: bits & 2 != 0,
            non_stationary: bits & 1 != 0,
        };
        let model = perturbed(tiny_model(toggles), 90 + bits as u64);
        let z = uniform(&mut rng(91), &[6, 4]);
        model_fd(&model, &ClipInput::Embeddings(z), 0.7, 0.25, 92);
    }
}
