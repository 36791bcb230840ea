//! Line-oriented `section.key = value` configuration.
//!
//! A file starts from a preset (`run.preset = desk` unless given) and then
//! overrides individual keys. Blank lines and `#` comments are ignored;
//! unknown or repeated keys are errors. [`RunConfig::to_text`] writes every
//! key in a fixed order, so equal configurations have equal text.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use collidenet_core::datagen::DatasetConfig;
use collidenet_core::harness::{Optimizer, TrainConfig};
use collidenet_core::segment_attention::ScaleFusion;
use collidenet_core::spatial::{AttentionMode, SpatialConfig};
use collidenet_core::temporal::{ModelConfig, Pooling};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DatasetConfig,
    /// Keep every `stride`-th frame of a clip before it reaches the model.
    pub stride: usize,
    /// Seeds per ablation row or sweep value, counted up from the base seed.
    pub seeds: usize,
}

impl RunConfig {
    /// Full 30-frame clips through the desk-scale model.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk_default(),
            train: TrainConfig::default(),
            data: DatasetConfig::default(),
            stride: 1,
            seeds: 3,
        }
    }

    /// Every fourth frame (8 per clip) through the compact model.
    pub fn compact() -> Self {
        Self {
            model: ModelConfig::compact(8),
            train: TrainConfig {
                max_epochs: 30,
                ..TrainConfig::default()
            },
            stride: 4,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "compact" => Ok(Self::compact()),
            other => bail!("unknown preset `{other}` (expected desk or compact)"),
        }
    }

    /// Frames per clip before striding.
    pub fn clip_frames(&self) -> usize {
        (self.data.scene.fps * self.data.clip_len).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.stride == 0 || self.seeds == 0 {
            bail!("data.stride and run.seeds must be positive");
        }
        let frames = self.clip_frames().div_ceil(self.stride);
        if frames != self.model.seq_len {
            bail!(
                "clips of {} frames at stride {} give {} frames, but model.seq_len = {}",
                self.clip_frames(),
                self.stride,
                frames,
                self.model.seq_len
            );
        }
        if self.data.scene.image_size != self.model.spatial.image_size {
            bail!(
                "data.image_size = {} differs from spatial.image_size = {}",
                self.data.scene.image_size,
                self.model.spatial.image_size
            );
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `section.key = value`", i + 1))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if !seen.insert(k.clone()) {
                bail!("line {}: `{k}` given twice", i + 1);
            }
            entries.push((i + 1, k, v));
        }
        let preset = entries.iter().find(|(_, k, _)| k == "run.preset").map(|(_, _, v)| v.as_str());
        let mut cfg = Self::preset(preset.unwrap_or("desk"))?;
        // The stage count rebuilds the stage list, so it goes before any
        // per-stage override.
        entries.sort_by_key(|(_, k, _)| k != "spatial.stages");
        for (line, k, v) in &entries {
            if k != "run.preset" {
                cfg.set(k, v).with_context(|| format!("line {line}: `{k}`"))?;
            }
        }
        Ok(cfg)
    }

    /// Every key in canonical order.
    pub fn to_text(&self) -> String {
        render(&self.entries(true))
    }

    /// Just the keys that shape the model and its input: what a checkpoint records.
    pub fn model_text(&self) -> String {
        render(&self.entries(false))
    }

    fn entries(&self, all: bool) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut put = |k: &str, v: &dyn Display| out.push((k.to_string(), v.to_string()));
        let m = &self.model;
        put("model.seq_len", &m.seq_len);
        put("model.pooling", &m.pooling.name());
        put("model.head_hidden", &m.head_hidden);
        put("model.dropout", &m.dropout);
        put("toggles.multi_scale", &m.toggles.multi_scale);
        put("toggles.trend", &m.toggles.trend);
        put("toggles.seasonality", &m.toggles.seasonality);
        put("toggles.non_stationary", &m.toggles.non_stationary);
        let s = &m.spatial;
        put("spatial.image_size", &s.image_size);
        put("spatial.patch_size", &s.patch_size);
        put("spatial.embed_dim", &s.embed_dim);
        put("spatial.mlp_ratio", &s.mlp_ratio);
        put("spatial.stages", &s.stages.len());
        for (i, st) in s.stages.iter().enumerate() {
            put(&format!("spatial.stage{i}.width"), &st.width);
            put(&format!("spatial.stage{i}.blocks"), &st.blocks);
            put(&format!("spatial.stage{i}.heads"), &st.heads);
            put(&format!("spatial.stage{i}.pool"), &st.pool);
            put(&format!("spatial.stage{i}.attention"), &attention_name(st.attention));
        }
        let t = &m.temporal;
        put("temporal.encoder_layers", &t.encoder_layers);
        put("temporal.decoder_layers", &t.decoder_layers);
        put("temporal.ff_width", &t.ff_width);
        put("temporal.window", &t.window);
        put("temporal.input_window", &t.input_window);
        put("temporal.projector_hidden", &t.projector_hidden);
        put("temporal.predictive_lag", &t.predictive_lag);
        let a = &t.attention;
        put("attention.base_segment_len", &a.base_segment_len);
        put("attention.num_scales", &a.num_scales);
        put("attention.head_dim", &a.head_dim);
        put("attention.num_heads", &a.num_heads);
        put("attention.pad_to_fit", &a.pad_to_fit);
        put("attention.fusion", &if a.fusion == ScaleFusion::Mean { "mean" } else { "learned" });
        put("data.stride", &self.stride);
        if !all {
            return out;
        }
        let tr = &self.train;
        put("train.lr", &tr.lr);
        put("train.plateau_patience", &tr.plateau_patience);
        put("train.early_stop_patience", &tr.early_stop_patience);
        put("train.max_epochs", &tr.max_epochs);
        put("train.batch_size", &tr.batch_size);
        put("train.optimizer", &if tr.optimizer == Optimizer::Adam { "adam" } else { "sgd" });
        let d = &self.data;
        let sc = &d.scene;
        put("data.videos", &d.videos);
        put("data.clip_len", &d.clip_len);
        put("data.train_fraction", &d.split.0);
        put("data.val_fraction", &d.split.1);
        put("data.balance", &d.balance);
        put("data.toc_min", &sc.toc.0);
        put("data.toc_max", &sc.toc.1);
        put("data.speed_min", &sc.speed.0);
        put("data.speed_max", &sc.speed.1);
        put("data.object_size", &sc.object_size);
        put("data.focal", &sc.focal);
        put("data.image_size", &sc.image_size);
        put("data.fps", &sc.fps);
        put("data.duration", &sc.duration);
        put("data.drifting", &sc.drifting);
        put("data.noise", &sc.noise);
        put("data.brightness", &sc.jitter.brightness);
        put("data.contrast", &sc.jitter.contrast);
        put("data.saturation", &sc.jitter.saturation);
        put("data.hue", &sc.jitter.hue);
        put("run.seeds", &self.seeds);
        out
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let sc = &mut self.data.scene;
        match key {
            "model.seq_len" => m.seq_len = num(v)?,
            "model.pooling" => {
                m.pooling = Pooling::parse(v).with_context(|| format!("expected mean, last or flatten, got `{v}`"))?
            }
            "model.head_hidden" => m.head_hidden = num(v)?,
            "model.dropout" => m.dropout = num(v)?,
            "toggles.multi_scale" => m.toggles.multi_scale = flag(v)?,
            "toggles.trend" => m.toggles.trend = flag(v)?,
            "toggles.seasonality" => m.toggles.seasonality = flag(v)?,
            "toggles.non_stationary" => m.toggles.non_stationary = flag(v)?,
            "spatial.image_size" => m.spatial.image_size = num(v)?,
            "spatial.patch_size" => m.spatial.patch_size = num(v)?,
            "spatial.embed_dim" => m.spatial.embed_dim = num(v)?,
            "spatial.mlp_ratio" => m.spatial.mlp_ratio = num(v)?,
            "spatial.stages" => {
                let s = &m.spatial;
                let stages = SpatialConfig::hierarchical(s.image_size, s.patch_size, s.stages[0].width, num(v)?, s.embed_dim).stages;
                m.spatial.stages = stages;
            }
            "temporal.encoder_layers" => m.temporal.encoder_layers = num(v)?,
            "temporal.decoder_layers" => m.temporal.decoder_layers = num(v)?,
            "temporal.ff_width" => m.temporal.ff_width = num(v)?,
            "temporal.window" => m.temporal.window = num(v)?,
            "temporal.input_window" => m.temporal.input_window = num(v)?,
            "temporal.projector_hidden" => m.temporal.projector_hidden = num(v)?,
            "temporal.predictive_lag" => m.temporal.predictive_lag = flag(v)?,
            "attention.base_segment_len" => m.temporal.attention.base_segment_len = num(v)?,
            "attention.num_scales" => m.temporal.attention.num_scales = num(v)?,
            "attention.head_dim" => m.temporal.attention.head_dim = num(v)?,
            "attention.num_heads" => m.temporal.attention.num_heads = num(v)?,
            "attention.pad_to_fit" => m.temporal.attention.pad_to_fit = flag(v)?,
            "attention.fusion" => {
                m.temporal.attention.fusion = match v {
                    "mean" => ScaleFusion::Mean,
                    "learned" => ScaleFusion::Learned,
                    _ => bail!("expected mean or learned, got `{v}`"),
                }
            }
            "train.lr" => self.train.lr = num(v)?,
            "train.plateau_patience" => self.train.plateau_patience = num(v)?,
            "train.early_stop_patience" => self.train.early_stop_patience = num(v)?,
            "train.max_epochs" => self.train.max_epochs = num(v)?,
            "train.batch_size" => self.train.batch_size = num(v)?,
            "train.optimizer" => {
                self.train.optimizer = match v {
                    "adam" => Optimizer::Adam,
                    "sgd" => Optimizer::Sgd,
                    _ => bail!("expected adam or sgd, got `{v}`"),
                }
            }
            "data.stride" => self.stride = num(v)?,
            "data.videos" => self.data.videos = num(v)?,
            "data.clip_len" => self.data.clip_len = num(v)?,
            "data.train_fraction" => self.data.split.0 = num(v)?,
            "data.val_fraction" => self.data.split.1 = num(v)?,
            "data.balance" => self.data.balance = flag(v)?,
            "data.toc_min" => sc.toc.0 = num(v)?,
            "data.toc_max" => sc.toc.1 = num(v)?,
            "data.speed_min" => sc.speed.0 = num(v)?,
            "data.speed_max" => sc.speed.1 = num(v)?,
            "data.object_size" => sc.object_size = num(v)?,
            "data.focal" => sc.focal = num(v)?,
            "data.image_size" => sc.image_size = num(v)?,
            "data.fps" => sc.fps = num(v)?,
            "data.duration" => sc.duration = num(v)?,
            "data.drifting" => sc.drifting = num(v)?,
            "data.noise" => sc.noise = num(v)?,
            "data.brightness" => sc.jitter.brightness = num(v)?,
            "data.contrast" => sc.jitter.contrast = num(v)?,
            "data.saturation" => sc.jitter.saturation = num(v)?,
            "data.hue" => sc.jitter.hue = num(v)?,
            "run.seeds" => self.seeds = num(v)?,
            _ => match stage_key(key) {
                Some((i, field)) => {
                    let n = m.spatial.stages.len();
                    let st = m
                        .spatial
                        .stages
                        .get_mut(i)
                        .ok_or_else(|| anyhow!("stage {i} does not exist ({n} stages)"))?;
                    match field {
                        "width" => st.width = num(v)?,
                        "blocks" => st.blocks = num(v)?,
                        "heads" => st.heads = num(v)?,
                        "pool" => st.pool = num(v)?,
                        "attention" => st.attention = parse_attention(v)?,
                        _ => bail!("unknown key"),
                    }
                }
                None => bail!("unknown key"),
            },
        }
        Ok(())
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn render(entries: &[(String, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

fn num<T: FromStr>(v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| anyhow!("bad value `{v}`: {e}"))
}

fn flag(v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => bail!("expected true or false, got `{v}`"),
    }
}

fn stage_key(key: &str) -> Option<(usize, &str)> {
    let rest = key.strip_prefix("spatial.stage")?;
    let (idx, field) = rest.split_once('.')?;
    Some((idx.parse().ok()?, field))
}

fn attention_name(a: AttentionMode) -> String {
    match a {
        AttentionMode::Global => "global".into(),
        AttentionMode::Local { mask_unit } => format!("local:{mask_unit}"),
    }
}

fn parse_attention(v: &str) -> Result<AttentionMode> {
    if v == "global" {
        return Ok(AttentionMode::Global);
    }
    match v.strip_prefix("local:") {
        Some(u) => Ok(AttentionMode::Local { mask_unit: num(u)? }),
        None => bail!("expected global or local:<unit>, got `{v}`"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        for cfg in [RunConfig::desk(), RunConfig::compact()] {
            let text = cfg.to_text();
            assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
            assert_eq!(RunConfig::parse(&text).unwrap().to_text(), text);
        }
    }

    #[test]
    fn presets_are_consistent() {
        RunConfig::desk().validate().unwrap();
        RunConfig::compact().validate().unwrap();
    }

    #[test]
    fn overrides_apply_on_top_of_the_preset() {
        let cfg = RunConfig::parse(
            "# quick run\nrun.preset = compact\n\ntrain.lr = 0.01  # faster\ntoggles.trend = false\nspatial.stage1.attention = local:1\n",
        )
        .unwrap();
        assert_eq!(cfg.stride, 4);
        assert_eq!(cfg.train.lr, 0.01);
        assert!(!cfg.model.toggles.trend);
        assert_eq!(cfg.model.spatial.stages[1].attention, AttentionMode::Local { mask_unit: 1 });
    }

    #[test]
    fn stage_count_is_applied_before_stage_keys() {
        let cfg = RunConfig::parse("spatial.stage2.width = 100\nspatial.stages = 3\n").unwrap();
        assert_eq!(cfg.model.spatial.stages.len(), 3);
        assert_eq!(cfg.model.spatial.stages[2].width, 100);
    }

    #[test]
    fn bad_lines_are_errors() {
        for text in [
            "model.colour = red",
            "model.seq_len",
            "model.seq_len = 3\nmodel.seq_len = 4",
            "train.optimizer = rmsprop",
            "toggles.trend = maybe",
            "spatial.stage9.width = 4",
            "run.preset = huge",
            "model.seq_len = -1",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn model_text_is_a_prefix_of_full_text() {
        let cfg = RunConfig::compact();
        assert!(cfg.to_text().starts_with(&cfg.model_text()));
        assert!(!cfg.model_text().contains("train."));
    }

    #[test]
    fn stride_must_match_sequence_length() {
        let mut cfg = RunConfig::compact();
        cfg.stride = 3;
        assert!(cfg.validate().is_err());
    }
}
