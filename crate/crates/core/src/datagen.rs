//! Synthetic data with known ground truth.
//!
//! Approaching-object videos stand in for dashcam footage: a square of
//! fixed physical size closes on the camera at constant speed, so its
//! apparent width follows `w(t) = w0·d0/(d0 - v·t)` and the collision time
//! is exactly `d0/v`. Component series give decomposition and stationarity
//! code a sequence whose trend and seasonal parts are known.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::decomposition::EmbeddingSequence;
use crate::error::{bail, Result};
use crate::numerics::Tensor;
use crate::temporal::ClipInput;

/// Photometric perturbation ranges. Each factor is drawn uniformly from
/// `±range` around its neutral value; a zero range leaves that transform
/// out entirely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    /// Additive offset.
    pub brightness: f64,
    /// Multiplicative spread about the clip mean, `1 ± contrast`.
    pub contrast: f64,
    /// Chroma scale about the per-pixel grey level, `1 ± saturation`.
    pub saturation: f64,
    /// Rotation about the grey axis, in radians.
    pub hue: f64,
}

impl Jitter {
    pub const fn none() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        }
    }

    pub const fn mild() -> Self {
        Self {
            brightness: 0.05,
            contrast: 0.1,
            saturation: 0.1,
            hue: 0.1,
        }
    }

    /// Applies one random draw to a `[F, H, W, 3]` tensor in place.
    pub fn apply(&self, frames: &mut Tensor, rng: &mut ChaCha8Rng) {
        let b = draw(rng, self.brightness);
        let c = draw(rng, self.contrast);
        let s = draw(rng, self.saturation);
        let h = draw(rng, self.hue);
        apply_photometric(frames.data_mut(), b, c.map(|c| 1.0 + c), s.map(|s| 1.0 + s), h);
    }
}

fn draw(rng: &mut ChaCha8Rng, range: f64) -> Option<f64> {
    (range > 0.0).then(|| rng.random_range(-range..=range))
}

/// Brightness, contrast, saturation then hue; finally clipped to `[0, 1]`.
/// `None` skips a transform so untouched pixels stay bit-identical.
pub fn apply_photometric(px: &mut [f64], brightness: Option<f64>, contrast: Option<f64>, saturation: Option<f64>, hue: Option<f64>) {
    if let Some(b) = brightness {
        px.iter_mut().for_each(|x| *x += b);
    }
    if let Some(c) = contrast {
        let m = px.iter().sum::<f64>() / px.len() as f64;
        px.iter_mut().for_each(|x| *x = (*x - m) * c + m);
    }
    if let Some(s) = saturation {
        for p in px.chunks_exact_mut(3) {
            let g = (p[0] + p[1] + p[2]) / 3.0;
            p.iter_mut().for_each(|x| *x = g + (*x - g) * s);
        }
    }
    if let Some(a) = hue {
        // Rodrigues rotation about the unit grey axis (1,1,1)/√3.
        let (sin, cos) = a.sin_cos();
        let k = (1.0 - cos) / 3.0;
        let r = sin / 3.0_f64.sqrt();
        let m = [[cos + k, k - r, k + r], [k + r, cos + k, k - r], [k - r, k + r, cos + k]];
        for p in px.chunks_exact_mut(3) {
            let v = [p[0], p[1], p[2]];
            for (o, row) in p.iter_mut().zip(&m) {
                *o = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
            }
        }
    }
    if brightness.is_some() || contrast.is_some() || saturation.is_some() || hue.is_some() {
        px.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Background {
    Static,
    /// Texture translating by a fixed number of pixels per second.
    Drifting,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    /// Initial object distance in metres.
    pub distance: f64,
    /// Closing speed in m/s.
    pub speed: f64,
    /// Object edge length in metres.
    pub object_size: f64,
    /// Focal length in pixels: an object of size `s` at distance `z` spans `focal·s/z` px.
    pub focal: f64,
    pub image_size: usize,
    pub background: Background,
    pub fps: f64,
    pub duration: f64,
    pub jitter: Jitter,
    /// Standard deviation of additive per-pixel Gaussian noise.
    pub noise: f64,
}

impl SceneParams {
    pub fn time_of_collision(&self) -> f64 {
        self.distance / self.speed
    }

    /// Apparent object width in pixels at time `t` (infinite at and after collision).
    pub fn apparent_width(&self, t: f64) -> f64 {
        let z = self.distance - self.speed * t;
        if z <= 0.0 {
            f64::INFINITY
        } else {
            self.focal * self.object_size / z
        }
    }

    pub fn frame_count(&self) -> usize {
        (self.fps * self.duration).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.speed > 0.0) {
            bail!(Param, "speed must be positive, got {}", self.speed);
        }
        if !(self.distance > 0.0 && self.object_size > 0.0 && self.focal > 0.0) {
            bail!(Param, "distance, object size and focal length must be positive");
        }
        if !(self.fps > 0.0 && self.duration > 0.0) || self.frame_count() == 0 || self.image_size == 0 {
            bail!(Param, "video must have at least one frame and pixel");
        }
        let toc = self.time_of_collision();
        if toc > self.duration {
            bail!(Param, "collision at {:.3} s falls outside the {:.3} s video", toc, self.duration);
        }
        if self.noise < 0.0 {
            bail!(Param, "noise level must be non-negative");
        }
        Ok(())
    }
}

/// Ranges from which per-video scene parameters are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRanges {
    pub toc: (f64, f64),
    pub speed: (f64, f64),
    pub object_size: f64,
    pub focal: f64,
    pub image_size: usize,
    pub fps: f64,
    pub duration: f64,
    /// Probability of a drifting rather than static background.
    pub drifting: f64,
    pub jitter: Jitter,
    pub noise: f64,
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self {
            toc: (0.5, 3.9),
            speed: (4.0, 6.0),
            object_size: 1.0,
            focal: 32.0,
            image_size: 32,
            fps: 30.0,
            duration: 4.0,
            drifting: 0.5,
            jitter: Jitter::mild(),
            noise: 0.02,
        }
    }
}

impl SceneRanges {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> SceneParams {
        let toc = rng.random_range(self.toc.0..=self.toc.1);
        let speed = rng.random_range(self.speed.0..=self.speed.1);
        SceneParams {
            distance: toc * speed,
            speed,
            object_size: self.object_size,
            focal: self.focal,
            image_size: self.image_size,
            background: if rng.random::<f64>() < self.drifting {
                Background::Drifting
            } else {
                Background::Static
            },
            fps: self.fps,
            duration: self.duration,
            jitter: self.jitter,
            noise: self.noise,
        }
    }
}

/// Length of `[a0, a1] ∩ [b0, b1]`.
fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Renders a `[F, S, S, 3]` video in `[0, 1]` and returns it with the exact
/// collision time. The object square is anti-aliased by exact pixel
/// coverage, so its rendered width equals the analytic width while it fits.
pub fn gen_approach_video(params: &SceneParams, seed: u64) -> Result<(Tensor, f64)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.frame_count();
    let s = params.image_size;
    let sf = s as f64;

    // Smooth random texture: a few oriented sinusoids per channel.
    let waves: Vec<[f64; 5]> = (0..9)
        .map(|_| {
            [
                rng.random_range(0.5..2.5) * 2.0 * PI / sf,
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.03..0.08),
                0.0,
            ]
        })
        .collect();
    let base: [f64; 3] = core::array::from_fn(|_| rng.random_range(0.35..0.65));
    let object: [f64; 3] = if rng.random::<bool>() {
        core::array::from_fn(|_| rng.random_range(0.0..0.15))
    } else {
        core::array::from_fn(|_| rng.random_range(0.85..1.0))
    };
    let drift = match params.background {
        Background::Static => (0.0, 0.0),
        Background::Drifting => {
            let a = rng.random_range(0.0..2.0 * PI);
            let speed = rng.random_range(2.0..6.0);
            (speed * a.cos(), speed * a.sin())
        }
    };
    let centre = (sf / 2.0 + rng.random_range(-3.0..3.0), sf / 2.0 + rng.random_range(-3.0..3.0));

    let mut data = vec![0.0; n * s * s * 3];
    for f in 0..n {
        let t = f as f64 / params.fps;
        let (ox, oy) = (drift.0 * t, drift.1 * t);
        let w = params.apparent_width(t).min(4.0 * sf);
        let (x0, x1) = (centre.0 - w / 2.0, centre.0 + w / 2.0);
        let (y0, y1) = (centre.1 - w / 2.0, centre.1 + w / 2.0);
        for y in 0..s {
            let cy = overlap(y as f64, y as f64 + 1.0, y0, y1);
            for x in 0..s {
                let cov = cy * overlap(x as f64, x as f64 + 1.0, x0, x1);
                let (px, py) = (x as f64 + 0.5 + ox, y as f64 + 0.5 + oy);
                let at = ((f * s + y) * s + x) * 3;
                for c in 0..3 {
                    let mut bg = base[c];
                    for wv in &waves[c * 3..c * 3 + 3] {
                        bg += wv[3] * (wv[0] * (px * wv[1].cos() + py * wv[1].sin()) + wv[2]).sin();
                    }
                    data[at + c] = cov * object[c] + (1.0 - cov) * bg;
                }
            }
        }
    }
    let mut video = Tensor::new(&[n, s, s, 3], data)?;
    params.jitter.apply(&mut video, &mut rng);
    if params.noise > 0.0 {
        for x in video.data_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *x = (*x + params.noise * e).clamp(0.0, 1.0);
        }
    }
    Ok((video, params.time_of_collision()))
}

/// A clip with its time-to-collision label.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    pub input: ClipInput,
    /// Seconds from the clip's first frame to the collision.
    pub ttc_label: f64,
    pub id: String,
}

impl ClipSample {
    /// Keeps every `stride`-th frame; embedding clips subsample rows.
    pub fn strided(&self, stride: usize) -> Result<ClipSample> {
        if stride == 0 {
            bail!(Config, "frame stride must be positive");
        }
        let input = match &self.input {
            ClipInput::Frames(f) => ClipInput::Frames(subsample_frames(f, stride)?),
            ClipInput::Embeddings(z) => ClipInput::Embeddings(subsample_frames(z, stride)?),
        };
        Ok(ClipSample {
            input,
            ttc_label: self.ttc_label,
            id: self.id.clone(),
        })
    }
}

/// Keeps leading-axis slices `0, stride, 2·stride, …`.
pub fn subsample_frames(t: &Tensor, stride: usize) -> Result<Tensor> {
    let n = t.shape()[0];
    let per = t.numel() / n;
    let keep: Vec<usize> = (0..n).step_by(stride).collect();
    let mut data = Vec::with_capacity(keep.len() * per);
    for &i in &keep {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = keep.len();
    Tensor::new(&shape, data)
}

/// Cuts `video` into consecutive non-overlapping clips of `clip_len`
/// seconds, labelled `toc - start`. Clips starting after the collision are
/// dropped; one starting exactly at it is kept with label 0. A trailing
/// partial clip is dropped.
pub fn segment_clips(video: &Tensor, toc: f64, fps: f64, clip_len: f64, id: &str) -> Result<Vec<ClipSample>> {
    if video.rank() == 0 || video.numel() == 0 {
        bail!(Input, "empty video");
    }
    let per_clip = fps * clip_len;
    if (per_clip - per_clip.round()).abs() > 1e-9 || per_clip < 1.0 {
        bail!(Config, "fps·clip_len = {} must be a positive integer", per_clip);
    }
    let per_clip = per_clip.round() as usize;
    let frames = video.shape()[0];
    let per_frame = video.numel() / frames;
    let mut clips = Vec::new();
    for c in 0..frames / per_clip {
        let start = c as f64 * clip_len;
        let ttc = toc - start;
        if ttc < -1e-9 {
            break;
        }
        let lo = c * per_clip * per_frame;
        let hi = lo + per_clip * per_frame;
        let mut shape = video.shape().to_vec();
        shape[0] = per_clip;
        clips.push(ClipSample {
            input: ClipInput::Frames(Tensor::new(&shape, video.data()[lo..hi].to_vec())?),
            ttc_label: ttc.max(0.0),
            id: format!("{id}-c{c}"),
        });
    }
    Ok(clips)
}

/// Parameters of a component series `z = trend + seasonal + noise`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentSpec {
    /// Per-step trend increase (each dimension scales it by a factor in `[0.5, 1.5]`).
    pub trend_slope: f64,
    pub season_period: f64,
    pub season_amp: f64,
    pub noise_sigma: f64,
    /// Step standard deviation of a random-walk mean, folded into the trend.
    pub mean_drift: f64,
    /// Noise standard deviation grows linearly to `noise_sigma·(1 + var_drift)`.
    pub var_drift: f64,
    pub n: usize,
    pub d: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSeries {
    pub z: EmbeddingSequence,
    pub trend: EmbeddingSequence,
    pub seasonal: EmbeddingSequence,
}

pub fn gen_component_series(spec: &ComponentSpec, seed: u64) -> Result<ComponentSeries> {
    let ComponentSpec { n, d, .. } = *spec;
    if d == 0 || n < 3 || (n as f64) <= 2.0 * spec.season_period {
        bail!(Param, "need n > 2·period and d ≥ 1 (n = {}, period = {}, d = {})", n, spec.season_period, d);
    }
    if spec.season_period <= 0.0 {
        bail!(Param, "season period must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = vec![0.0; n * d];
    let mut trend = vec![0.0; n * d];
    let mut seasonal = vec![0.0; n * d];
    for j in 0..d {
        let slope = spec.trend_slope * rng.random_range(0.5..1.5);
        let phase = rng.random_range(0.0..2.0 * PI);
        let mut walk = 0.0;
        for t in 0..n {
            if t > 0 && spec.mean_drift > 0.0 {
                let e: f64 = StandardNormal.sample(&mut rng);
                walk += spec.mean_drift * e;
            }
            let tr = slope * t as f64 + walk;
            let se = spec.season_amp * (2.0 * PI * t as f64 / spec.season_period + phase).sin();
            let noise = if spec.noise_sigma > 0.0 {
                let e: f64 = StandardNormal.sample(&mut rng);
                spec.noise_sigma * (1.0 + spec.var_drift * t as f64 / n as f64) * e
            } else {
                0.0
            };
            trend[t * d + j] = tr;
            seasonal[t * d + j] = se;
            z[t * d + j] = tr + se + noise;
        }
    }
    Ok(ComponentSeries {
        z: Tensor::new(&[n, d], z)?,
        trend: Tensor::new(&[n, d], trend)?,
        seasonal: Tensor::new(&[n, d], seasonal)?,
    })
}

/// Equalises the one-second label bins by appending jittered copies of
/// minority-bin clips (round-robin within each bin). Labels are unchanged.
pub fn balance_and_augment(samples: &[ClipSample], jitter: &Jitter, seed: u64) -> Vec<ClipSample> {
    let mut bins: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        bins.entry(s.ttc_label.floor() as i64).or_default().push(i);
    }
    let target = bins.values().map(Vec::len).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = samples.to_vec();
    for members in bins.values() {
        for extra in 0..target - members.len() {
            let src = &samples[members[extra % members.len()]];
            let mut copy = src.clone();
            copy.id = format!("{}-aug{}", src.id, extra);
            if let ClipInput::Frames(f) = &mut copy.input {
                jitter.apply(f, &mut rng);
            }
            out.push(copy);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub videos: usize,
    pub scene: SceneRanges,
    pub clip_len: f64,
    /// Train and validation fractions; the remainder is test.
    pub split: (f64, f64),
    pub balance: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            videos: 200,
            scene: SceneRanges::default(),
            clip_len: 1.0,
            split: (0.70, 0.15),
            balance: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<ClipSample>,
    pub val: Vec<ClipSample>,
    pub test: Vec<ClipSample>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[ClipSample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn map(&self, f: impl Fn(&ClipSample) -> Result<ClipSample>) -> Result<Dataset> {
        let go = |v: &[ClipSample]| v.iter().map(&f).collect::<Result<Vec<_>>>();
        Ok(Dataset {
            train: go(&self.train)?,
            val: go(&self.val)?,
            test: go(&self.test)?,
        })
    }
}

/// Seed of video `index` derived from the dataset seed.
pub fn video_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.random()
}

/// Which split video `index` of `videos` lands in. Assignment is by video,
/// never by clip, so no video contributes to two splits.
pub fn video_split(index: usize, videos: usize, split: (f64, f64)) -> Split {
    let n_train = (videos as f64 * split.0).round() as usize;
    let n_val = (videos as f64 * split.1).round() as usize;
    if index < n_train {
        Split::Train
    } else if index < n_train + n_val {
        Split::Val
    } else {
        Split::Test
    }
}

/// Renders and segments one video; a pure function of `(config, seed, index)`.
pub fn generate_video_clips(config: &DatasetConfig, seed: u64, index: usize) -> Result<Vec<ClipSample>> {
    let vs = video_seed(seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(vs);
    let params = config.scene.sample(&mut rng);
    let (video, toc) = gen_approach_video(&params, rng.random())?;
    segment_clips(&video, toc, params.fps, config.clip_len, &format!("v{index:04}"))
}

pub fn generate_dataset(config: &DatasetConfig, seed: u64) -> Result<Dataset> {
    if config.videos == 0 {
        bail!(Param, "dataset needs at least one video");
    }
    let mut ds = Dataset::default();
    for i in 0..config.videos {
        let clips = generate_video_clips(config, seed, i)?;
        match video_split(i, config.videos, config.split) {
            Split::Train => ds.train.extend(clips),
            Split::Val => ds.val.extend(clips),
            Split::Test => ds.test.extend(clips),
        }
    }
    if config.balance {
        ds.train = balance_and_augment(&ds.train, &config.scene.jitter, seed ^ 0xba1a);
    }
    Ok(ds)
}
