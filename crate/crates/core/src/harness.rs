//! Training, evaluation, the ablation grid and sensitivity sweeps.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{ClipSample, Dataset};
use crate::error::{bail, Result};
use crate::numerics::Tensor;
use crate::params::{fnv1a, ParamStore};
use crate::spatial::SpatialConfig;
use crate::temporal::{ClipInput, CollideNet, Mode, ModelConfig, Toggles, ABLATION_ROWS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    /// Adam with β = (0.9, 0.999), ε = 1e-8.
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Epochs without validation improvement before the learning rate halves.
    pub plateau_patience: usize,
    /// Epochs without validation improvement before training stops.
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            plateau_patience: 5,
            early_stop_patience: 15,
            max_epochs: 50,
            batch_size: 16,
            seed: 0,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    /// Learning rate 1e-6, for fine-tuning pretrained backbones.
    pub fn fine_tune() -> Self {
        Self {
            lr: 1e-6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!(Config, "batch size must be at least 1");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            bail!(Config, "learning rate must be finite and non-negative");
        }
        if self.max_epochs > 0 && (self.plateau_patience >= self.max_epochs || self.early_stop_patience >= self.max_epochs) {
            bail!(
                Config,
                "patiences ({}, {}) must be below max epochs {}",
                self.plateau_patience,
                self.early_stop_patience,
                self.max_epochs
            );
        }
        Ok(())
    }
}

/// Anything that maps a clip to a TTC estimate.
pub trait Predictor {
    fn predict_ttc(&self, input: &ClipInput) -> Result<f64>;
    fn fingerprint(&self) -> u64;
}

impl Predictor for CollideNet {
    fn predict_ttc(&self, input: &ClipInput) -> Result<f64> {
        Ok(self.predict(input)?.ttc)
    }

    fn fingerprint(&self) -> u64 {
        fnv1a(format!("{:?}", self.config()).as_bytes())
    }
}

/// Predicts the same value for every clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantPredictor(pub f64);

impl ConstantPredictor {
    /// The training-label mean.
    pub fn mean_of(samples: &[ClipSample]) -> Self {
        Self(samples.iter().map(|s| s.ttc_label).sum::<f64>() / samples.len().max(1) as f64)
    }
}

impl Predictor for ConstantPredictor {
    fn predict_ttc(&self, _: &ClipInput) -> Result<f64> {
        Ok(self.0)
    }

    fn fingerprint(&self) -> u64 {
        fnv1a(&self.0.to_bits().to_le_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub id: String,
    pub label: f64,
    pub prediction: f64,
}

impl Residual {
    pub fn error(&self) -> f64 {
        self.prediction - self.label
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mse: f64,
    pub residuals: Vec<Residual>,
    pub fingerprint: u64,
    pub seed: u64,
}

/// Mean squared error over `samples`, dropout disabled.
pub fn evaluate(predictor: &impl Predictor, samples: &[ClipSample], seed: u64) -> Result<EvalReport> {
    if samples.is_empty() {
        bail!(Input, "cannot evaluate an empty split");
    }
    let residuals = samples
        .iter()
        .map(|s| {
            Ok(Residual {
                id: s.id.clone(),
                label: s.ttc_label,
                prediction: predictor.predict_ttc(&s.input)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mse = residuals.iter().map(|r| r.error() * r.error()).sum::<f64>() / residuals.len() as f64;
    Ok(EvalReport {
        mse,
        residuals,
        fingerprint: predictor.fingerprint(),
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    /// Whether the plateau rule halved the rate after this epoch.
    pub lr_decayed: bool,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Validation MSE of the untrained parameters.
    pub initial_val_mse: f64,
    pub best_val_mse: f64,
    /// 0 when no epoch beat the initial parameters.
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

struct OptState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: i32,
}

impl OptState {
    fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64, opt: Optimizer) {
        if lr == 0.0 {
            return;
        }
        self.step += 1;
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let w = params.get_mut(id).data_mut();
            let g = grads[i].data();
            match opt {
                Optimizer::Sgd => w.iter_mut().zip(g).for_each(|(w, g)| *w -= lr * g),
                Optimizer::Adam => {
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    for j in 0..w.len() {
                        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                        w[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

fn non_finite_dump(model: &CollideNet, epoch: usize, sample: &ClipSample, loss: f64) -> crate::Error {
    let bad: Vec<&str> = model
        .params
        .iter()
        .filter(|(_, t)| !t.is_finite())
        .map(|(n, _)| n)
        .collect();
    crate::Error::NonFinite(format!(
        "loss {loss} at epoch {epoch} on clip {} (label {}); non-finite parameters: {:?}",
        sample.id, sample.ttc_label, bad
    ))
}

/// Mini-batch training with validation-driven learning-rate halving and
/// early stopping. On return `model` holds the best-validation parameters
/// (the initial ones if no epoch improved on them).
pub fn train(model: &mut CollideNet, train_set: &[ClipSample], val_set: &[ClipSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        bail!(Input, "training needs non-empty train and validation splits");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptState::new(&model.params);
    let initial_val_mse = evaluate(model, val_set, cfg.seed)?.mse;
    let mut best = (initial_val_mse, 0usize, model.params.clone());
    let mut lr = cfg.lr;
    let mut since_best = 0;
    let mut since_decay = 0;
    let mut history = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in batch {
                let s = &train_set[i];
                let (loss, _, grads) = model.loss_and_grads(&s.input, s.ttc_label, Mode::Train(&mut rng))?;
                if !loss.is_finite() {
                    return Err(non_finite_dump(model, epoch, s, loss));
                }
                loss_sum += loss;
                acc = Some(match acc {
                    None => grads,
                    Some(a) => a.iter().zip(&grads).map(|(a, g)| a.add(g)).collect::<Result<_>>()?,
                });
            }
            let scale = 1.0 / batch.len() as f64;
            let grads: Vec<Tensor> = acc.unwrap_or_default().iter().map(|g| g.scale(scale)).collect();
            opt.update(&mut model.params, &grads, lr, cfg.optimizer);
            if model.params.iter().any(|(_, t)| !t.is_finite()) {
                return Err(non_finite_dump(model, epoch, &train_set[batch[0]], f64::NAN));
            }
        }
        let train_mse = loss_sum / train_set.len() as f64;
        let val_mse = evaluate(model, val_set, cfg.seed)?.mse;
        let improved = val_mse < best.0;
        let used_lr = lr;
        if improved {
            best = (val_mse, epoch, model.params.clone());
            since_best = 0;
            since_decay = 0;
        } else {
            since_best += 1;
            since_decay += 1;
        }
        let lr_decayed = since_decay >= cfg.plateau_patience;
        if lr_decayed {
            lr *= 0.5;
            since_decay = 0;
        }
        history.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
            lr: used_lr,
            lr_decayed,
            improved,
        });
        if since_best >= cfg.early_stop_patience {
            stopped_early = true;
            break;
        }
    }
    let (best_val_mse, best_epoch, params) = best;
    model.params = params;
    Ok(TrainOutcome {
        initial_val_mse,
        best_val_mse,
        best_epoch,
        history,
        stopped_early,
    })
}

/// Builds, trains and evaluates one model on the test split.
pub fn train_and_test(config: &ModelConfig, data: &Dataset, train_cfg: &TrainConfig, seed: u64) -> Result<(CollideNet, TrainOutcome, EvalReport)> {
    let mut model = CollideNet::new(config.clone(), seed)?;
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let outcome = train(&mut model, &data.train, &data.val, &cfg)?;
    let report = evaluate(&model, &data.test, seed)?;
    Ok((model, outcome, report))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

pub fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-seed outcome of one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub result: core::result::Result<f64, String>,
}

impl SeedRun {
    pub fn mse(&self) -> Option<f64> {
        self.result.as_ref().ok().copied()
    }
}

fn run_seeds(config: &ModelConfig, data: &Dataset, train_cfg: &TrainConfig, seeds: &[u64]) -> Vec<SeedRun> {
    seeds
        .iter()
        .map(|&seed| SeedRun {
            seed,
            result: train_and_test(config, data, train_cfg, seed)
                .map(|(_, _, r)| r.mse)
                .map_err(|e| format!("{e}")),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub id: u8,
    pub toggles: Toggles,
    pub runs: Vec<SeedRun>,
}

impl AblationRow {
    pub fn mses(&self) -> Vec<f64> {
        self.runs.iter().filter_map(SeedRun::mse).collect()
    }

    /// Mean and population standard deviation over successful seeds.
    pub fn mse_mean_std(&self) -> (f64, f64) {
        mean_std(&self.mses())
    }

    pub fn mse_median(&self) -> f64 {
        median(&self.mses())
    }
}

/// The base configuration with one ablation row's toggles.
pub fn with_toggles(base: &ModelConfig, toggles: Toggles) -> ModelConfig {
    ModelConfig {
        toggles,
        ..base.clone()
    }
}

/// Trains one ablation row over `seeds`; failures are recorded per seed.
pub fn run_ablation_row(base: &ModelConfig, id: u8, data: &Dataset, train_cfg: &TrainConfig, seeds: &[u64]) -> Result<AblationRow> {
    let Some(toggles) = crate::temporal::ablation_row(id) else {
        bail!(Config, "no ablation row with id {}", id);
    };
    Ok(AblationRow {
        id,
        toggles,
        runs: run_seeds(&with_toggles(base, toggles), data, train_cfg, seeds),
    })
}

/// All fourteen rows, in id order.
pub fn run_ablation(base: &ModelConfig, data: &Dataset, train_cfg: &TrainConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    ABLATION_ROWS
        .iter()
        .map(|&(id, _)| run_ablation_row(base, id, data, train_cfg, seeds))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Number of spatial stages.
    SpatialScales,
    /// Number of temporal segment scales.
    TemporalScales,
    /// Decomposition window inside the encoder and decoder.
    WindowK,
}

impl SweepAxis {
    pub fn default_values(self) -> Vec<usize> {
        match self {
            SweepAxis::SpatialScales => vec![1, 2, 3, 4],
            SweepAxis::TemporalScales => vec![1, 2, 3, 4, 5],
            SweepAxis::WindowK => vec![1, 3, 7, 15],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::SpatialScales => "spatial_scales",
            SweepAxis::TemporalScales => "temporal_scales",
            SweepAxis::WindowK => "window_k",
        }
    }

    /// `base` with this axis set to `value`, validated.
    pub fn apply(self, base: &ModelConfig, value: usize) -> Result<ModelConfig> {
        let mut c = base.clone();
        match self {
            SweepAxis::SpatialScales => {
                let s = &base.spatial;
                c.spatial = SpatialConfig::hierarchical(s.image_size, s.patch_size, s.stages[0].width, value, s.embed_dim);
            }
            SweepAxis::TemporalScales => c.temporal.attention.num_scales = value,
            SweepAxis::WindowK => c.temporal.window = value,
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: usize,
    pub runs: Vec<SeedRun>,
}

impl SweepRow {
    pub fn mse_mean_std(&self) -> (f64, f64) {
        mean_std(&self.runs.iter().filter_map(SeedRun::mse).collect::<Vec<_>>())
    }
}

/// One train+eval per value and seed. Every value is validated before any
/// training starts.
pub fn run_sensitivity(axis: SweepAxis, values: &[usize], base: &ModelConfig, data: &Dataset, train_cfg: &TrainConfig, seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        bail!(Config, "sweep needs at least one value");
    }
    let configs = values
        .iter()
        .map(|&v| {
            axis.apply(base, v)
                .map_err(|e| crate::Error::Config(format!("{} = {}: {}", axis.name(), v, e)))
        })
        .collect::<Result<Vec<_>>>()?;
    train_cfg.validate()?;
    Ok(values
        .iter()
        .zip(&configs)
        .map(|(&value, c)| SweepRow {
            value,
            runs: run_seeds(c, data, train_cfg, seeds),
        })
        .collect())
}
