//! Temporal encoder–decoder, the regression head and the full model.
//!
//! Pipeline: frame embeddings → input-level trend/seasonality split →
//! normalisation and rescaler projection → N encoder layers (multi-scale
//! self-attention, feed-forward, keep seasonality) → M decoder layers
//! (self-attention, predictive cross-attention over the encoder output,
//! feed-forward, each followed by a split whose trend is accumulated) →
//! de-normalisation → pooling over time → two-layer head.

use alloc::format;
use alloc::vec::Vec;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::decomposition::{decompose_on_tape, EmbeddingSequence};
use crate::error::{bail, Result};
use crate::numerics::{RowOp, Tape, Tensor, Var};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::segment_attention::{mssc_on_tape, Pairing, ScaleFusion, SegmentAttentionConfig};
use crate::spatial::{AttentionMode, SpatialConfig, SpatialEncoder};
use crate::stationarity::{denormalize_on_tape, normalize_on_tape, Projector, Rescalers, SeriesStats};

/// Component switches of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Toggles {
    /// Multi-stage spatial hierarchy and multi-scale temporal attention.
    pub multi_scale: bool,
    pub trend: bool,
    pub seasonality: bool,
    pub non_stationary: bool,
}

impl Toggles {
    pub const fn all() -> Self {
        Self {
            multi_scale: true,
            trend: true,
            seasonality: true,
            non_stationary: true,
        }
    }

    pub const fn none() -> Self {
        Self {
            multi_scale: false,
            trend: false,
            seasonality: false,
            non_stationary: false,
        }
    }

    const fn from_bits(ms: bool, t: bool, s: bool, ns: bool) -> Self {
        Self {
            multi_scale: ms,
            trend: t,
            seasonality: s,
            non_stationary: ns,
        }
    }

    fn decomposes(&self) -> bool {
        self.trend || self.seasonality
    }
}

/// The fourteen ablation rows as `(id, toggles)`.
pub const ABLATION_ROWS: [(u8, Toggles); 14] = [
    (1, Toggles::from_bits(true, true, true, true)),
    (2, Toggles::from_bits(false, true, true, true)),
    (3, Toggles::from_bits(true, false, true, true)),
    (4, Toggles::from_bits(true, true, false, true)),
    (5, Toggles::from_bits(true, true, true, false)),
    (6, Toggles::from_bits(false, true, true, false)),
    (7, Toggles::from_bits(true, false, true, false)),
    (8, Toggles::from_bits(true, false, false, true)),
    (9, Toggles::from_bits(true, true, false, false)),
    (10, Toggles::from_bits(false, false, false, true)),
    (11, Toggles::from_bits(false, false, true, false)),
    (12, Toggles::from_bits(false, true, false, false)),
    (13, Toggles::from_bits(true, false, false, false)),
    (14, Toggles::from_bits(false, false, false, false)),
];

pub fn ablation_row(id: u8) -> Option<Toggles> {
    ABLATION_ROWS.iter().find(|(i, _)| *i == id).map(|(_, t)| *t)
}

/// How the decoder output sequence becomes the head's input vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pooling {
    /// Temporal mean. A purely seasonal output averages to zero.
    Mean,
    /// The final time step.
    Last,
    /// All time steps concatenated; the head sees `seq_len × d` inputs.
    Flatten,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::Mean => "mean",
            Pooling::Last => "last",
            Pooling::Flatten => "flatten",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Pooling::Mean, Pooling::Last, Pooling::Flatten].into_iter().find(|p| p.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub attention: SegmentAttentionConfig,
    pub ff_width: usize,
    /// Window of the splits inside encoder and decoder layers.
    pub window: usize,
    /// Window of the input-level split taken before normalisation.
    pub input_window: usize,
    pub projector_hidden: usize,
    /// Decoder cross-attention pairs keys with the next value segment.
    pub predictive_lag: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub spatial: SpatialConfig,
    pub temporal: TemporalConfig,
    /// Frames per clip seen by the model.
    pub seq_len: usize,
    pub pooling: Pooling,
    pub head_hidden: usize,
    pub dropout: f64,
    pub toggles: Toggles,
}

impl ModelConfig {
    /// Full-length clips: 32×32 frames in 4×4 patches, three spatial
    /// stages of width 32, 64 and 128, every frame of a 30-frame clip.
    pub fn desk_default() -> Self {
        Self {
            spatial: SpatialConfig::hierarchical(32, 4, 32, 3, 128),
            temporal: TemporalConfig {
                encoder_layers: 1,
                decoder_layers: 1,
                attention: SegmentAttentionConfig {
                    base_segment_len: 1,
                    num_scales: 2,
                    head_dim: 16,
                    num_heads: 8,
                    pad_to_fit: true,
                    fusion: ScaleFusion::Mean,
                },
                ff_width: 256,
                window: 7,
                input_window: 7,
                projector_hidden: 64,
                predictive_lag: true,
            },
            seq_len: 30,
            pooling: Pooling::Last,
            head_hidden: 64,
            dropout: 0.1,
            toggles: Toggles::all(),
        }
    }

    /// A cheaper variant for quick experiments: 8×8 patches, two spatial
    /// stages and clips subsampled to `seq_len` frames.
    pub fn compact(seq_len: usize) -> Self {
        Self {
            spatial: SpatialConfig::hierarchical(32, 8, 16, 2, 16),
            temporal: TemporalConfig {
                encoder_layers: 1,
                decoder_layers: 1,
                attention: SegmentAttentionConfig {
                    base_segment_len: 1,
                    num_scales: 2,
                    head_dim: 8,
                    num_heads: 2,
                    pad_to_fit: true,
                    fusion: ScaleFusion::Mean,
                },
                ff_width: 32,
                window: 3,
                input_window: 3,
                projector_hidden: 16,
                predictive_lag: true,
            },
            seq_len,
            pooling: Pooling::Last,
            head_hidden: 16,
            dropout: 0.0,
            toggles: Toggles::all(),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.spatial.embed_dim
    }

    /// Width of the pooled vector fed to the head.
    pub fn head_input(&self) -> usize {
        match self.pooling {
            Pooling::Flatten => self.seq_len * self.embed_dim(),
            Pooling::Mean | Pooling::Last => self.embed_dim(),
        }
    }

    /// The configuration actually built once the toggles are applied:
    /// without the multi-scale switch the spatial stream keeps one global
    /// stage and attention uses a single temporal scale.
    pub fn effective(&self) -> ModelConfig {
        let mut c = self.clone();
        if !self.toggles.multi_scale {
            c.spatial.stages.truncate(1);
            c.spatial.stages[0].attention = AttentionMode::Global;
            c.spatial.stages[0].pool = 1;
            c.temporal.attention.num_scales = 1;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let eff = self.effective();
        eff.spatial.validate()?;
        let t = &eff.temporal;
        if t.encoder_layers == 0 || t.decoder_layers == 0 {
            bail!(Config, "encoder and decoder need at least one layer");
        }
        if t.attention.model_dim() != eff.spatial.embed_dim {
            bail!(
                Config,
                "attention heads×head_dim = {} must equal embedding dim {}",
                t.attention.model_dim(),
                eff.spatial.embed_dim
            );
        }
        if eff.seq_len < 2 {
            bail!(Config, "sequence length must be at least 2");
        }
        t.attention.validate(eff.seq_len)?;
        if t.predictive_lag && eff.seq_len.div_ceil(t.attention.max_segment_len()) < 2 {
            bail!(Config, "predictive cross-attention needs at least 2 segments at the coarsest scale");
        }
        for (k, what) in [(t.window, "window"), (t.input_window, "input window")] {
            crate::numerics::check_window(k, eff.seq_len).map_err(|e| match e {
                crate::Error::Config(m) => crate::Error::Config(format!("{what}: {m}")),
                other => other,
            })?;
        }
        if t.ff_width == 0 || t.projector_hidden == 0 || self.head_hidden == 0 {
            bail!(Config, "layer widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Scalar time-to-collision estimate in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTCPrediction {
    pub ttc: f64,
}

/// Model input: raw frames or a precomputed embedding sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum ClipInput {
    /// `[F, H, W, 3]`
    Frames(Tensor),
    /// `n × d`
    Embeddings(EmbeddingSequence),
}

/// Dropout is active only in training mode.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

#[derive(Debug, Clone, PartialEq)]
struct AttnParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    fusion: Option<ParamId>,
}

impl AttnParams {
    fn new(store: &mut ParamStore, prefix: &str, d: usize, cfg: &SegmentAttentionConfig) -> Result<Self> {
        let n = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            wq: store.init(&n("wq"), &[d, d], Init::Xavier)?,
            wk: store.init(&n("wk"), &[d, d], Init::Xavier)?,
            wv: store.init(&n("wv"), &[d, d], Init::Xavier)?,
            wo: store.init(&n("wo"), &[d, d], Init::Xavier)?,
            bo: store.init(&n("bo"), &[d], Init::Zeros)?,
            fusion: match cfg.fusion {
                ScaleFusion::Learned if cfg.num_scales > 1 => {
                    Some(store.init(&n("fusion"), &[cfg.num_scales], Init::Zeros)?)
                }
                _ => None,
            },
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(&self, tape: &mut Tape, p: &mut Bound<'_>, query_src: Var, kv_src: Var, cfg: &SegmentAttentionConfig, r: &TapeRescalers, pairing: Pairing) -> Result<Var> {
        let (wq, wk, wv) = (p.var(tape, self.wq), p.var(tape, self.wk), p.var(tape, self.wv));
        let q = tape.matmul(query_src, wq)?;
        let k = tape.matmul(kv_src, wk)?;
        let v = tape.matmul(kv_src, wv)?;
        let fusion = self.fusion.map(|f| p.var(tape, f));
        let y = mssc_on_tape(tape, q, k, v, cfg, r.tau, r.delta, pairing, fusion)?;
        let (wo, bo) = (p.var(tape, self.wo), p.var(tape, self.bo));
        tape.linear(y, wo, bo)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FeedForward {
    fn new(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize) -> Result<Self> {
        let n = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            w1: store.init(&n("w1"), &[d, hidden], Init::Xavier)?,
            b1: store.init(&n("b1"), &[hidden], Init::Zeros)?,
            w2: store.init(&n("w2"), &[hidden, d], Init::Xavier)?,
            b2: store.init(&n("b2"), &[d], Init::Zeros)?,
        })
    }

    fn forward(&self, tape: &mut Tape, p: &mut Bound<'_>, x: Var) -> Result<Var> {
        let (w1, b1) = (p.var(tape, self.w1), p.var(tape, self.b1));
        let h = tape.linear(x, w1, b1)?;
        let h = tape.gelu(h)?;
        let (w2, b2) = (p.var(tape, self.w2), p.var(tape, self.b2));
        tape.linear(h, w2, b2)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderLayer {
    attn: AttnParams,
    ff: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderLayer {
    self_attn: AttnParams,
    cross_attn: AttnParams,
    ff: FeedForward,
    /// Projects the layer's extracted trend into the accumulator; starts at zero.
    trend_proj: Option<ParamId>,
}

/// Rescalers as tape values; `delta` is `None` when non-stationarity is off.
#[derive(Debug, Clone, Copy)]
pub struct TapeRescalers {
    pub tau: Var,
    pub delta: Option<Var>,
}

impl TapeRescalers {
    pub fn constant(tape: &mut Tape, r: &Rescalers) -> Result<Self> {
        let tau = tape.constant(Tensor::scalar(r.tau));
        let delta = if r.delta.is_empty() {
            None
        } else {
            Some(tape.constant(Tensor::new(&[r.delta.len()], r.delta.clone())?))
        };
        Ok(Self { tau, delta })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Head {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// The full two-stream model with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CollideNet {
    config: ModelConfig,
    effective: ModelConfig,
    pub params: ParamStore,
    spatial: SpatialEncoder,
    projector: Option<Projector>,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    head: Head,
}

impl CollideNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let eff = config.effective();
        let toggles = eff.toggles;
        let d = eff.embed_dim();
        let t = &eff.temporal;
        let mut store = ParamStore::with_seed(seed);
        let spatial = SpatialEncoder::new(&mut store, "spatial", eff.spatial.clone())?;
        let projector = if toggles.non_stationary {
            let delta_len = t.attention.coarsest_segments(eff.seq_len);
            Some(Projector::new(&mut store, "projector", d, t.projector_hidden, delta_len)?)
        } else {
            None
        };
        let mut encoder = Vec::new();
        for l in 0..t.encoder_layers {
            encoder.push(EncoderLayer {
                attn: AttnParams::new(&mut store, &format!("encoder{l}.attn"), d, &t.attention)?,
                ff: FeedForward::new(&mut store, &format!("encoder{l}.ff"), d, t.ff_width)?,
            });
        }
        let mut decoder = Vec::new();
        for l in 0..t.decoder_layers {
            decoder.push(DecoderLayer {
                self_attn: AttnParams::new(&mut store, &format!("decoder{l}.self_attn"), d, &t.attention)?,
                cross_attn: AttnParams::new(&mut store, &format!("decoder{l}.cross_attn"), d, &t.attention)?,
                ff: FeedForward::new(&mut store, &format!("decoder{l}.ff"), d, t.ff_width)?,
                trend_proj: if toggles.trend {
                    Some(store.init(&format!("decoder{l}.trend_proj"), &[d, d], Init::Zeros)?)
                } else {
                    None
                },
            });
        }
        let head = Head {
            w1: store.init("head.w1", &[eff.head_input(), eff.head_hidden], Init::Xavier)?,
            b1: store.init("head.b1", &[eff.head_hidden], Init::Zeros)?,
            w2: store.init("head.w2", &[eff.head_hidden, 1], Init::Xavier)?,
            b2: store.init("head.b2", &[1], Init::Zeros)?,
        };
        Ok(Self {
            config,
            effective: eff,
            params: store,
            spatial,
            projector,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn effective_config(&self) -> &ModelConfig {
        &self.effective
    }

    pub fn spatial(&self) -> &SpatialEncoder {
        &self.spatial
    }

    pub fn projector(&self) -> Option<&Projector> {
        self.projector.as_ref()
    }

    fn toggles(&self) -> Toggles {
        self.effective.toggles
    }

    fn pairing(&self) -> Pairing {
        if self.effective.temporal.predictive_lag {
            Pairing::Predictive
        } else {
            Pairing::Aligned
        }
    }

    /// Applies the layer-internal split: returns `(trend, stream)` where the
    /// trend is `None` when trend modelling is off and the stream keeps only
    /// the seasonal part when seasonality modelling is on.
    fn split(&self, tape: &mut Tape, x: Var) -> Result<(Option<Var>, Var)> {
        let tg = self.toggles();
        let k = self.effective.temporal.window;
        if !tg.decomposes() {
            return Ok((None, x));
        }
        let (trend, seasonal) = decompose_on_tape(tape, x, k)?;
        let stream = if tg.seasonality { seasonal } else { x };
        Ok((tg.trend.then_some(trend), stream))
    }

    pub fn encoder_on_tape(&self, tape: &mut Tape, p: &mut Bound<'_>, z_prime: Var, r: &TapeRescalers) -> Result<Var> {
        let cfg = &self.effective.temporal.attention;
        let k = self.effective.temporal.window;
        let mut x = z_prime;
        for layer in &self.encoder {
            let a = layer.attn.forward(tape, p, x, x, cfg, r, Pairing::Aligned)?;
            x = tape.add(x, a)?;
            let f = layer.ff.forward(tape, p, x)?;
            x = tape.add(x, f)?;
            if self.toggles().seasonality {
                let (_, seasonal) = decompose_on_tape(tape, x, k)?;
                x = seasonal;
            }
        }
        Ok(x)
    }

    /// `seasonal` initialises the decoder stream; `trend_seed` (if any)
    /// initialises the trend accumulator.
    pub fn decoder_on_tape(&self, tape: &mut Tape, p: &mut Bound<'_>, z_enc: Var, seasonal: Var, trend_seed: Option<Var>, r: &TapeRescalers) -> Result<Var> {
        let cfg = &self.effective.temporal.attention;
        let mut s = seasonal;
        let mut trend = trend_seed;
        for layer in &self.decoder {
            let a = layer.self_attn.forward(tape, p, s, s, cfg, r, Pairing::Aligned)?;
            s = tape.add(s, a)?;
            let (t1, s1) = self.split(tape, s)?;
            s = s1;
            let c = layer.cross_attn.forward(tape, p, s, z_enc, cfg, r, self.pairing())?;
            s = tape.add(s, c)?;
            let (t2, s2) = self.split(tape, s)?;
            s = s2;
            let f = layer.ff.forward(tape, p, s)?;
            s = tape.add(s, f)?;
            let (t3, s3) = self.split(tape, s)?;
            s = s3;
            if let (Some(t1), Some(t2), Some(t3), Some(wp)) = (t1, t2, t3, layer.trend_proj) {
                let sum = tape.add(t1, t2)?;
                let sum = tape.add(sum, t3)?;
                let wp = p.var(tape, wp);
                let proj = tape.matmul(sum, wp)?;
                trend = Some(match trend {
                    Some(acc) => tape.add(acc, proj)?,
                    None => proj,
                });
            }
        }
        match trend {
            Some(t) if self.toggles().trend => tape.add(s, t),
            _ => Ok(s),
        }
    }

    /// Full forward pass to a `[1]` prediction on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape, p: &mut Bound<'_>, input: Var, is_frames: bool, mode: Mode<'_>) -> Result<Var> {
        let tg = self.toggles();
        let eff = &self.effective;
        let z = if is_frames {
            self.spatial.encode_on_tape(tape, p, input)?
        } else {
            input
        };
        let (n, d) = tape.value(z).dims2()?;
        if n != eff.seq_len || d != eff.embed_dim() {
            bail!(Input, "expected a {}×{} embedding sequence, got {}×{}", eff.seq_len, eff.embed_dim(), n, d);
        }
        let input_split = if tg.decomposes() {
            Some(decompose_on_tape(tape, z, eff.temporal.input_window)?)
        } else {
            None
        };
        let (z_prime, stats, rescalers) = match &self.projector {
            Some(proj) => {
                let (zn, mu, sigma) = normalize_on_tape(tape, z)?;
                let (tau, delta) = proj.forward(tape, p, mu, sigma, z)?;
                (zn, Some((mu, sigma)), TapeRescalers { tau, delta: Some(delta) })
            }
            None => (z, None, TapeRescalers::constant(tape, &Rescalers::identity())?),
        };
        let z_enc = self.encoder_on_tape(tape, p, z_prime, &rescalers)?;
        let (seasonal, trend_seed) = match (input_split, tg.seasonality) {
            (Some((t0, s0)), true) => {
                let s_init = match stats {
                    Some((_, sigma)) => tape.row_op(RowOp::Div, s0, sigma)?,
                    None => s0,
                };
                let seed = if tg.trend {
                    Some(match stats {
                        Some((mu, sigma)) => {
                            let c = tape.row_op(RowOp::Sub, t0, mu)?;
                            tape.row_op(RowOp::Div, c, sigma)?
                        }
                        None => t0,
                    })
                } else {
                    None
                };
                (s_init, seed)
            }
            _ => (z_prime, None),
        };
        let z_dec = self.decoder_on_tape(tape, p, z_enc, seasonal, trend_seed, &rescalers)?;
        let out = match stats {
            Some((mu, sigma)) => denormalize_on_tape(tape, z_dec, mu, sigma)?,
            None => z_dec,
        };
        let pooled = match eff.pooling {
            Pooling::Mean => tape.mean_rows(out)?,
            Pooling::Last => tape.gather_rows(out, &[n - 1])?,
            Pooling::Flatten => tape.reshape(out, &[1, n * d])?,
        };
        let (w1, b1) = (p.var(tape, self.head.w1), p.var(tape, self.head.b1));
        let h = tape.linear(pooled, w1, b1)?;
        let mut h = tape.relu(h)?;
        if let Mode::Train(rng) = mode {
            if eff.dropout > 0.0 {
                let keep = 1.0 - eff.dropout;
                let mask = (0..tape.value(h).numel())
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                h = tape.dropout(h, mask)?;
            }
        }
        let (w2, b2) = (p.var(tape, self.head.w2), p.var(tape, self.head.b2));
        let y = tape.linear(h, w2, b2)?;
        tape.reshape(y, &[1])
    }

    fn input_var(&self, tape: &mut Tape, input: &ClipInput) -> (Var, bool) {
        match input {
            ClipInput::Frames(f) => (tape.constant(f.clone()), true),
            ClipInput::Embeddings(z) => (tape.constant(z.clone()), false),
        }
    }

    /// Inference-mode prediction.
    pub fn predict(&self, input: &ClipInput) -> Result<TTCPrediction> {
        let mut tape = Tape::new();
        let mut p = Bound::new(&self.params, false);
        let (x, frames) = self.input_var(&mut tape, input);
        let y = self.forward_on_tape(&mut tape, &mut p, x, frames, Mode::Eval)?;
        Ok(TTCPrediction {
            ttc: tape.value(y).data()[0],
        })
    }

    /// Squared error of one sample and its gradient for every parameter
    /// (in store order). Returns `(loss, prediction, grads)`.
    pub fn loss_and_grads(&self, input: &ClipInput, label: f64, mode: Mode<'_>) -> Result<(f64, f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let mut p = Bound::new(&self.params, true);
        let (x, frames) = self.input_var(&mut tape, input);
        let y = self.forward_on_tape(&mut tape, &mut p, x, frames, mode)?;
        let target = tape.constant(Tensor::scalar(label));
        let diff = tape.sub(y, target)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.sum(sq)?;
        let pred = tape.value(y).data()[0];
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss)?;
        Ok((value, pred, p.collect(&mut grads)))
    }

    /// Ops recorded by one inference pass, for structural comparisons.
    pub fn op_trace(&self, input: &ClipInput) -> Result<Vec<&'static str>> {
        let mut tape = Tape::new();
        let mut p = Bound::new(&self.params, false);
        let (x, frames) = self.input_var(&mut tape, input);
        self.forward_on_tape(&mut tape, &mut p, x, frames, Mode::Eval)?;
        Ok(tape.op_trace())
    }

    /// Encoder stack on a normalised sequence.
    pub fn encoder_forward(&self, z_prime: &EmbeddingSequence, rescalers: &Rescalers) -> Result<EmbeddingSequence> {
        let mut tape = Tape::new();
        let mut p = Bound::new(&self.params, false);
        let z = tape.constant(z_prime.clone());
        let r = TapeRescalers::constant(&mut tape, rescalers)?;
        let out = self.encoder_on_tape(&mut tape, &mut p, z, &r)?;
        Ok(tape.value(out).clone())
    }

    /// Decoder stack. With `stats`, the seasonal input is scaled by `1/σ`
    /// and the trend seed mapped through `(T0 - μ)/σ`, as in the full pass.
    pub fn decoder_forward(
        &self,
        z_enc: &EmbeddingSequence,
        trend0: &EmbeddingSequence,
        seasonal0: &EmbeddingSequence,
        rescalers: &Rescalers,
        stats: Option<&SeriesStats>,
    ) -> Result<EmbeddingSequence> {
        let (n, d) = z_enc.dims2()?;
        if trend0.shape() != [n, d] || seasonal0.shape() != [n, d] {
            bail!(Dimension, "trend/seasonality must match the encoder output shape");
        }
        let mut tape = Tape::new();
        let mut p = Bound::new(&self.params, false);
        let enc = tape.constant(z_enc.clone());
        let mut s = tape.constant(seasonal0.clone());
        let mut t = tape.constant(trend0.clone());
        if let Some(st) = stats {
            let mu = tape.constant(Tensor::new(&[d], st.mu.clone())?);
            let sigma = tape.constant(Tensor::new(&[d], st.sigma.clone())?);
            s = tape.row_op(RowOp::Div, s, sigma)?;
            let c = tape.row_op(RowOp::Sub, t, mu)?;
            t = tape.row_op(RowOp::Div, c, sigma)?;
        }
        let seed = self.toggles().trend.then_some(t);
        let r = TapeRescalers::constant(&mut tape, rescalers)?;
        let out = self.decoder_on_tape(&mut tape, &mut p, enc, s, seed, &r)?;
        Ok(tape.value(out).clone())
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }
}
