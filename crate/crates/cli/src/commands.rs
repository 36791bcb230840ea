//! The subcommands. Each reads its inputs, writes its tables under the
//! output directory and returns a short summary for the terminal.
//!
//! Tables are written with shortest round-trip float formatting, so equal
//! inputs give byte-identical files whether or not rows run in parallel.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use collidenet_core::datagen::{gen_component_series, generate_dataset, ComponentSpec, Dataset, Split};
use collidenet_core::decomposition::decompose;
use collidenet_core::diagnostics::{stationarity_report, DimensionStats, Normalizer};
use collidenet_core::harness::{
    evaluate, run_ablation_row, run_sensitivity, train, ConstantPredictor, EpochRecord, SeedRun, SweepAxis, TrainConfig,
};
use collidenet_core::numerics::Tensor;
use collidenet_core::temporal::{ClipInput, CollideNet, ABLATION_ROWS};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{checkpoint, cnt, manifest};

/// Settings shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub config: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
    /// Run ablation rows and sweep values one after another.
    pub deterministic: bool,
}

impl Ctx {
    fn prepare(&self) -> Result<()> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn seeds(&self) -> Vec<u64> {
        (0..self.config.seeds as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    fn default_manifest(&self) -> PathBuf {
        self.path("manifest.csv")
    }

    /// The dataset at `data` (or the output directory's manifest), strided for the model.
    fn load_data(&self, data: Option<&Path>, stride: usize) -> Result<Dataset> {
        let path = data.map(Path::to_path_buf).unwrap_or_else(|| self.default_manifest());
        if !path.exists() {
            bail!("no dataset at {} (run gen-data first or pass --data)", path.display());
        }
        Ok(manifest::read(&path)?.map(|s| s.strided(stride))?)
    }

    fn map<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
        if self.deterministic {
            items.iter().map(f).collect()
        } else {
            items.par_iter().map(f).collect()
        }
    }
}

fn write_csv<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// For tables whose columns depend on the data.
fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn gen_data(ctx: &Ctx) -> Result<String> {
    ctx.config.validate()?;
    ctx.prepare()?;
    let data = generate_dataset(&ctx.config.data, ctx.seed)?;
    let path = manifest::write(&ctx.out, &data)?;
    fs::write(ctx.path("config.txt"), ctx.config.to_text())?;
    Ok(format!(
        "{} train / {} val / {} test clips -> {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        path.display()
    ))
}

#[derive(Serialize)]
struct HistoryRow {
    epoch: usize,
    train_mse: f64,
    val_mse: f64,
    lr: f64,
    lr_decayed: bool,
    improved: bool,
}

impl From<&EpochRecord> for HistoryRow {
    fn from(h: &EpochRecord) -> Self {
        Self {
            epoch: h.epoch,
            train_mse: h.train_mse,
            val_mse: h.val_mse,
            lr: h.lr,
            lr_decayed: h.lr_decayed,
            improved: h.improved,
        }
    }
}

#[derive(Serialize)]
struct TrainSummary {
    seed: u64,
    epochs: usize,
    best_epoch: usize,
    initial_val_mse: f64,
    best_val_mse: f64,
    stopped_early: bool,
    test_mse: f64,
    baseline_mse: f64,
}

pub fn train_cmd(ctx: &Ctx, data: Option<&Path>) -> Result<String> {
    ctx.config.validate()?;
    ctx.prepare()?;
    let data = ctx.load_data(data, ctx.config.stride)?;
    let mut model = CollideNet::new(ctx.config.model.clone(), ctx.seed)?;
    let tc = TrainConfig {
        seed: ctx.seed,
        ..ctx.config.train.clone()
    };
    let outcome = train(&mut model, &data.train, &data.val, &tc)?;
    let test = evaluate(&model, &data.test, ctx.seed)?;
    let baseline = evaluate(&ConstantPredictor::mean_of(&data.train), &data.test, ctx.seed)?;

    checkpoint::save(&ctx.path("checkpoint.cnck"), &ctx.config, &model)?;
    write_csv(&ctx.path("history.csv"), outcome.history.iter().map(HistoryRow::from))?;
    let mut jsonl = String::new();
    for h in &outcome.history {
        jsonl.push_str(&serde_json::to_string(&HistoryRow::from(h))?);
        jsonl.push('\n');
    }
    fs::write(ctx.path("history.jsonl"), jsonl)?;
    write_csv(
        &ctx.path("train_summary.csv"),
        [TrainSummary {
            seed: ctx.seed,
            epochs: outcome.history.len(),
            best_epoch: outcome.best_epoch,
            initial_val_mse: outcome.initial_val_mse,
            best_val_mse: outcome.best_val_mse,
            stopped_early: outcome.stopped_early,
            test_mse: test.mse,
            baseline_mse: baseline.mse,
        }],
    )?;
    Ok(format!(
        "{} epochs, best val MSE {:.4} at epoch {}; test MSE {:.4} (mean baseline {:.4})",
        outcome.history.len(),
        outcome.best_val_mse,
        outcome.best_epoch,
        test.mse,
        baseline.mse
    ))
}

#[derive(Serialize)]
struct ResidualRow<'a> {
    id: &'a str,
    label: f64,
    prediction: f64,
    error: f64,
}

#[derive(Serialize)]
struct EvalSummary {
    split: &'static str,
    clips: usize,
    mse: f64,
    baseline_mse: f64,
}

/// The baseline predicts the training-split mean label.
pub fn eval(ctx: &Ctx, checkpoint: Option<&Path>, data: Option<&Path>, split: Split) -> Result<String> {
    ctx.prepare()?;
    let ck = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| ctx.path("checkpoint.cnck"));
    let (ck_cfg, model) = checkpoint::load(&ck)?;
    let data = ctx.load_data(data, ck_cfg.stride)?;
    let set = data.split(split);
    let report = evaluate(&model, set, ctx.seed)?;
    let baseline = evaluate(&ConstantPredictor::mean_of(&data.train), set, ctx.seed)?;
    let name = split.as_str();
    write_csv(
        &ctx.path(&format!("residuals_{name}.csv")),
        report.residuals.iter().map(|r| ResidualRow {
            id: &r.id,
            label: r.label,
            prediction: r.prediction,
            error: r.error(),
        }),
    )?;
    write_csv(
        &ctx.path(&format!("eval_{name}.csv")),
        [EvalSummary {
            split: name,
            clips: set.len(),
            mse: report.mse,
            baseline_mse: baseline.mse,
        }],
    )?;
    Ok(format!("{name}: MSE {:.4} over {} clips (mean baseline {:.4})", report.mse, set.len(), baseline.mse))
}

#[derive(Serialize)]
struct RunRow<'a> {
    key: usize,
    seed: u64,
    mse: Option<f64>,
    error: Option<&'a str>,
}

fn run_rows(key: usize, runs: &[SeedRun]) -> Vec<RunRow<'_>> {
    runs.iter()
        .map(|r| RunRow {
            key,
            seed: r.seed,
            mse: r.mse(),
            error: r.result.as_ref().err().map(String::as_str),
        })
        .collect()
}

#[derive(Serialize)]
struct AblationLine {
    id: u8,
    multi_scale: bool,
    trend: bool,
    seasonality: bool,
    non_stationary: bool,
    mse_mean: f64,
    mse_std: f64,
    mse_median: f64,
    runs_ok: usize,
}

/// Trains every ablation row (or the subset in `rows`) once per seed.
pub fn ablate(ctx: &Ctx, data: Option<&Path>, rows: Option<&[u8]>) -> Result<String> {
    ctx.config.validate()?;
    ctx.prepare()?;
    let all: Vec<u8> = ABLATION_ROWS.iter().map(|&(id, _)| id).collect();
    let ids = rows.map(<[u8]>::to_vec).unwrap_or(all);
    for id in &ids {
        ensure!(ABLATION_ROWS.iter().any(|&(r, _)| r == *id), "no ablation row {id}");
    }
    let data = ctx.load_data(data, ctx.config.stride)?;
    let seeds = ctx.seeds();
    let results = ctx.map(&ids, |&id| run_ablation_row(&ctx.config.model, id, &data, &ctx.config.train, &seeds));
    let results = results.into_iter().collect::<collidenet_core::Result<Vec<_>>>()?;

    let lines = results.iter().map(|r| {
        let (mean, std) = r.mse_mean_std();
        AblationLine {
            id: r.id,
            multi_scale: r.toggles.multi_scale,
            trend: r.toggles.trend,
            seasonality: r.toggles.seasonality,
            non_stationary: r.toggles.non_stationary,
            mse_mean: mean,
            mse_std: std,
            mse_median: r.mse_median(),
            runs_ok: r.mses().len(),
        }
    });
    write_csv(&ctx.path("ablation.csv"), lines)?;
    write_csv(
        &ctx.path("ablation_runs.csv"),
        results.iter().flat_map(|r| run_rows(r.id as usize, &r.runs)),
    )?;
    let ok: usize = results.iter().map(|r| r.mses().len()).sum();
    Ok(format!("{} rows x {} seeds, {ok} runs succeeded", results.len(), seeds.len()))
}

pub fn parse_axis(s: &str) -> Result<SweepAxis> {
    [SweepAxis::SpatialScales, SweepAxis::TemporalScales, SweepAxis::WindowK]
        .into_iter()
        .find(|a| a.name() == s)
        .with_context(|| format!("unknown axis `{s}` (expected spatial_scales, temporal_scales or window_k)"))
}

#[derive(Serialize)]
struct SweepLine {
    value: usize,
    mse_mean: f64,
    mse_std: f64,
}

pub fn sweep(ctx: &Ctx, data: Option<&Path>, axis: SweepAxis, values: Option<&[usize]>) -> Result<String> {
    ctx.config.validate()?;
    ctx.prepare()?;
    let values = values.map(<[usize]>::to_vec).unwrap_or_else(|| axis.default_values());
    ensure!(!values.is_empty(), "sweep needs at least one value");
    for &v in &values {
        axis.apply(&ctx.config.model, v).with_context(|| format!("{} = {v}", axis.name()))?;
    }
    let data = ctx.load_data(data, ctx.config.stride)?;
    let seeds = ctx.seeds();
    let rows = ctx.map(&values, |&v| run_sensitivity(axis, &[v], &ctx.config.model, &data, &ctx.config.train, &seeds));
    let rows: Vec<_> = rows.into_iter().map(|r| r.map(|mut r| r.remove(0))).collect::<collidenet_core::Result<_>>()?;
    let name = axis.name();
    write_csv(
        &ctx.path(&format!("sweep_{name}.csv")),
        rows.iter().map(|r| {
            let (mse_mean, mse_std) = r.mse_mean_std();
            SweepLine {
                value: r.value,
                mse_mean,
                mse_std,
            }
        }),
    )?;
    write_csv(
        &ctx.path(&format!("sweep_{name}_runs.csv")),
        rows.iter().flat_map(|r| run_rows(r.value, &r.runs)),
    )?;
    Ok(format!("{name}: {} values x {} seeds", rows.len(), seeds.len()))
}

pub fn parse_normalizer(s: &str) -> Result<Normalizer> {
    match s {
        "identity" => Ok(Normalizer::Identity),
        "per-sequence" => Ok(Normalizer::PerSequence),
        _ => match s.strip_prefix("windowed:") {
            Some(n) => Ok(Normalizer::Windowed(n.parse().with_context(|| format!("bad window in `{s}`"))?)),
            None => bail!("unknown normalizer `{s}` (expected identity, per-sequence or windowed:N)"),
        },
    }
}

/// Where `diagnose` gets its sequences from.
pub enum DiagnoseSource<'a> {
    /// Clips of a dataset split, through a checkpoint's spatial encoder, or
    /// through a freshly initialised one when no checkpoint is given.
    Data {
        manifest: Option<&'a Path>,
        checkpoint: Option<&'a Path>,
        split: Split,
    },
    /// Drifting component series cut into clip-length pieces.
    Synthetic,
}

fn synthetic_sequences(seed: u64) -> Result<Vec<Tensor>> {
    let spec = ComponentSpec {
        trend_slope: 0.0,
        season_period: 8.0,
        season_amp: 0.5,
        noise_sigma: 1.0,
        mean_drift: 0.3,
        var_drift: 3.0,
        n: 300,
        d: 6,
    };
    let z = gen_component_series(&spec, seed)?.z;
    (0..10).map(|i| Ok(z.rows(30 * i, 30 * (i + 1))?)).collect()
}

fn stats_cells(s: &DimensionStats) -> [String; 4] {
    [s.adf_stat, s.adf_p, s.kpss_stat, s.kpss_p].map(|v| v.to_string())
}

pub fn diagnose(ctx: &Ctx, source: DiagnoseSource<'_>, normalizer: Normalizer) -> Result<String> {
    ctx.prepare()?;
    let seqs = match source {
        DiagnoseSource::Synthetic => synthetic_sequences(ctx.seed)?,
        DiagnoseSource::Data { manifest, checkpoint, split } => {
            let (cfg, model) = match checkpoint {
                Some(p) => checkpoint::load(p)?,
                None => (ctx.config.clone(), CollideNet::new(ctx.config.model.clone(), ctx.seed)?),
            };
            let data = ctx.load_data(manifest, cfg.stride)?;
            let clips = data.split(split);
            ensure!(!clips.is_empty(), "split {} is empty", split.as_str());
            clips
                .iter()
                .map(|c| match &c.input {
                    ClipInput::Frames(f) => Ok(model.spatial().encode_clip(&model.params, f)?),
                    ClipInput::Embeddings(z) => Ok(z.clone()),
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let report = stationarity_report(&seqs, normalizer)?;
    let mut header = vec!["dim".to_string()];
    for side in ["raw", "normalized"] {
        for stat in ["adf_stat", "adf_p", "kpss_stat", "kpss_p"] {
            header.push(format!("{side}_{stat}"));
        }
    }
    let mut rows: Vec<Vec<String>> = report
        .raw
        .iter()
        .zip(&report.normalized)
        .enumerate()
        .map(|(j, (r, n))| std::iter::once(j.to_string()).chain(stats_cells(r)).chain(stats_cells(n)).collect())
        .collect();
    rows.push(
        std::iter::once("median".to_string())
            .chain(stats_cells(&report.median_raw()))
            .chain(stats_cells(&report.median_normalized()))
            .collect(),
    );
    write_table(&ctx.path("diagnose.csv"), &header, &rows)?;
    let text = format!(
        "{} sequences, {} dimensions\n{}ADF sign test p = {:.4}\n",
        seqs.len(),
        report.raw.len(),
        report.table(),
        report.adf_sign_test()
    );
    fs::write(ctx.path("diagnose.txt"), &text)?;
    Ok(text)
}

fn component_table(z: &Tensor) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let (n, d) = z.dims2()?;
    let header = std::iter::once("t".to_string()).chain((0..d).map(|j| format!("dim_{j}"))).collect();
    let rows = (0..n)
        .map(|t| std::iter::once(t.to_string()).chain(z.row(t).iter().map(f64::to_string)).collect())
        .collect();
    Ok((header, rows))
}

/// Splits an `n × d` sequence (a CNT1 file, or a synthetic trend plus
/// seasonality series) into trend and seasonal CSVs.
pub fn decompose_cmd(ctx: &Ctx, input: Option<&Path>, window: Option<usize>) -> Result<String> {
    ctx.prepare()?;
    let z = match input {
        Some(p) => cnt::load(p)?,
        None => {
            let spec = ComponentSpec {
                trend_slope: 0.05,
                season_period: 12.0,
                season_amp: 1.0,
                noise_sigma: 0.1,
                mean_drift: 0.0,
                var_drift: 0.0,
                n: 120,
                d: 4,
            };
            gen_component_series(&spec, ctx.seed)?.z
        }
    };
    ensure!(z.rank() == 2, "decompose needs an n x d sequence, got shape {:?}", z.shape());
    let k = window.unwrap_or(ctx.config.model.temporal.window);
    let dec = decompose(&z, k)?;
    for (name, part) in [("trend", &dec.trend), ("seasonal", &dec.seasonality)] {
        let (header, rows) = component_table(part)?;
        write_table(&ctx.path(&format!("decompose_{name}.csv")), &header, &rows)?;
    }
    let (n, d) = z.dims2()?;
    Ok(format!("{n} x {d} sequence, window {k} -> decompose_trend.csv, decompose_seasonal.csv"))
}
