//! Implementations behind the `scd` command-line verbs.
//!
//! Every command writes human-readable output to a caller-supplied sink and
//! returns an [`ExitStatus`]; errors surface as [`Error`] and map to
//! [`ExitStatus::Invalid`].

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::diagnostics::{full_correlation_report, CorrelationReport};
use crate::error::{Error, Result};
use crate::experiment::{ExperimentConfig, Preset};
use crate::gradcheck::run_suite;
use crate::nn::{Checkpoint, ShapeRow};
use crate::scd::ScdConfig;
use crate::siamese::SiameseModel;
use crate::trainer::{stream_rng, Batch, MetricRow, Stream, Trainer};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_DIR: &str = "reports";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_SEEDS: [u64; 5] = [11, 22, 33, 44, 55];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    Invalid = 1,
    NumericalFailure = 2,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub preset: Option<Preset>,
}

/// Reads `--config` if given, else the `--preset` defaults (desk when
/// neither is set), then applies `--seed` and `--out`.
pub fn resolve_config(ov: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match (&ov.config, ov.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, p) => ExperimentConfig::preset(p.unwrap_or(Preset::Desk)),
    };
    if let Some(seed) = ov.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &ov.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// CSV header for the given tapped layers.
pub fn metrics_header(layers: &BTreeSet<usize>) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "lr", "task_loss", "scd_loss_mean", "combined_loss"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for l in layers {
        h.push(format!("meanAbsP_l{l}"));
        h.push(format!("maxAbsP_l{l}"));
        h.push(format!("fracOver_l{l}"));
    }
    h
}

fn metrics_record(row: &MetricRow) -> Vec<String> {
    let mut r = vec![
        row.epoch.to_string(),
        row.lr.to_string(),
        row.task_loss.to_string(),
        row.scd_loss_mean.to_string(),
        row.combined_loss.to_string(),
    ];
    for l in &row.report.layers {
        r.push(l.mean_abs_p.to_string());
        r.push(l.max_abs_p.to_string());
        r.push(l.frac_over_eps.to_string());
    }
    r
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Summary of a finished training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub rows: Vec<MetricRow>,
    pub model: SiameseModel,
}

impl TrainOutcome {
    pub fn final_row(&self) -> &MetricRow {
        self.rows.last().expect("training emits at least one row")
    }
}

/// Trains with `cfg`, writing into `cfg.output.dir`:
/// `config.json`, `metrics.csv`, `reports/epoch_NNN.json` and
/// `checkpoints/epoch_NNN.bin` per epoch, and the final `checkpoint.bin`.
pub fn train_run(cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dir = cfg.output.dir.clone();
    fs::create_dir_all(dir.join(REPORT_DIR))?;
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_json())?;

    let model = cfg.build_model()?;
    let taps = model.scd_taps().clone();
    let mut trainer = Trainer::new(model, cfg.train.clone(), cfg.scd.clone())?;
    let mut csv = csv::Writer::from_path(dir.join(METRICS_FILE))?;
    csv.write_record(metrics_header(&taps))?;
    let mut rows = Vec::new();
    let per_epoch = cfg.output.metrics_per_epoch;
    trainer.run(per_epoch, |row, model| {
        csv.write_record(metrics_record(row))?;
        csv.flush()?;
        if rows.len() % per_epoch == per_epoch - 1 {
            let epoch = row.epoch.round() as usize;
            write_json(&dir.join(REPORT_DIR).join(format!("epoch_{epoch:03}.json")), &row.report)?;
            model
                .to_checkpoint()
                .save(&dir.join("checkpoints").join(format!("epoch_{epoch:03}.bin")))?;
            writeln!(
                log,
                "epoch {epoch:>3}  lr {:.3e}  task {:.5}  scd {:.5}  combined {:.5}",
                row.lr, row.task_loss, row.scd_loss_mean, row.combined_loss
            )?;
        }
        rows.push(row.clone());
        Ok(())
    })?;
    drop(csv);
    let model = trainer.model;
    model.to_checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
    Ok(TrainOutcome { dir, rows, model })
}

pub fn cmd_train(ov: &Overrides, log: &mut dyn Write) -> Result<ExitStatus> {
    let cfg = resolve_config(ov)?;
    let out = train_run(&cfg, log)?;
    writeln!(log, "wrote {}", out.dir.display())?;
    Ok(ExitStatus::Success)
}

/// Final statistics of one tapped layer in both arms.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerComparison {
    pub layer: usize,
    pub scd_mean_abs_p: f64,
    pub control_mean_abs_p: f64,
    pub scd_frac_over: f64,
    pub control_frac_over: f64,
    pub scd_excess: f64,
    pub control_excess: f64,
}

impl LayerComparison {
    /// Relative reduction of the mean excess correlation, 1 = eliminated.
    pub fn excess_reduction(&self) -> f64 {
        if self.control_excess == 0.0 {
            if self.scd_excess == 0.0 { 0.0 } else { f64::NEG_INFINITY }
        } else {
            1.0 - self.scd_excess / self.control_excess
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AbComparison {
    pub epsilon: f64,
    pub scd_task_loss: f64,
    pub control_task_loss: f64,
    pub layers: Vec<LayerComparison>,
}

impl AbComparison {
    pub fn from_reports(
        epsilon: f64,
        scd: (&CorrelationReport, f64),
        control: (&CorrelationReport, f64),
    ) -> Result<Self> {
        let layers = scd
            .0
            .layers
            .iter()
            .map(|s| {
                let c = control.0.layer(s.layer).ok_or_else(|| {
                    Error::Invalid(format!("control run has no statistics for layer {}", s.layer))
                })?;
                Ok(LayerComparison {
                    layer: s.layer,
                    scd_mean_abs_p: s.mean_abs_p,
                    control_mean_abs_p: c.mean_abs_p,
                    scd_frac_over: s.frac_over_eps,
                    control_frac_over: c.frac_over_eps,
                    scd_excess: s.mean_excess,
                    control_excess: c.mean_excess,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AbComparison {
            epsilon,
            scd_task_loss: scd.1,
            control_task_loss: control.1,
            layers,
        })
    }

    /// The SCD arm has a strictly lower fraction of pairs over the margin
    /// and a lower mean |p| on every tapped layer.
    pub fn scd_is_less_correlated(&self) -> bool {
        !self.layers.is_empty()
            && self
                .layers
                .iter()
                .all(|l| l.scd_frac_over < l.control_frac_over && l.scd_mean_abs_p < l.control_mean_abs_p)
    }

    /// `scd / control - 1` for the final task loss.
    pub fn task_loss_change(&self) -> f64 {
        self.scd_task_loss / self.control_task_loss - 1.0
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<6} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}\n",
            "layer", "mean|p| scd", "mean|p| ctl", "frac>e scd", "frac>e ctl", "excess scd", "excess ctl"
        );
        for l in &self.layers {
            s += &format!(
                "{:<6} {:>12.5} {:>12.5} {:>12.5} {:>12.5} {:>12.5} {:>12.5}\n",
                l.layer,
                l.scd_mean_abs_p,
                l.control_mean_abs_p,
                l.scd_frac_over,
                l.control_frac_over,
                l.scd_excess,
                l.control_excess
            );
        }
        s += &format!(
            "final task loss: scd {:.5}, control {:.5} ({:+.1}%)\n",
            self.scd_task_loss,
            self.control_task_loss,
            100.0 * self.task_loss_change()
        );
        s
    }
}

/// Runs `cfg` with SCD enabled and disabled from the same seed, in two
/// threads, under `<out>/scd` and `<out>/control`.
pub fn ab_run(cfg: &ExperimentConfig) -> Result<(AbComparison, TrainOutcome, TrainOutcome)> {
    let mut on = cfg.clone();
    on.scd.enabled = true;
    on.output.dir = cfg.output.dir.join("scd");
    let mut off = cfg.clone();
    off.scd = ScdConfig {
        enabled: false,
        ..cfg.scd.clone()
    };
    off.output.dir = cfg.output.dir.join("control");
    let (a, b) = std::thread::scope(|s| {
        let ha = s.spawn(|| train_run(&on, &mut std::io::sink()));
        let hb = s.spawn(|| train_run(&off, &mut std::io::sink()));
        (ha.join(), hb.join())
    });
    let a = a.map_err(|_| Error::Invalid("SCD training thread panicked".into()))??;
    let b = b.map_err(|_| Error::Invalid("control training thread panicked".into()))??;
    let (ra, rb) = (a.final_row(), b.final_row());
    let cmp = AbComparison::from_reports(cfg.scd.epsilon, (&ra.report, ra.task_loss), (&rb.report, rb.task_loss))?;
    write_json(&cfg.output.dir.join("comparison.json"), &cmp)?;
    Ok((cmp, a, b))
}

pub fn cmd_ab_compare(ov: &Overrides, log: &mut dyn Write) -> Result<ExitStatus> {
    let cfg = resolve_config(ov)?;
    let (cmp, _, _) = ab_run(&cfg)?;
    write!(log, "{}", cmp.render())?;
    if cmp.scd_is_less_correlated() {
        Ok(ExitStatus::Success)
    } else {
        writeln!(log, "SCD run is not less correlated than the control")?;
        Ok(ExitStatus::NumericalFailure)
    }
}

/// Shape tables for the exemplar and search inputs.
pub fn shape_tables(cfg: &ExperimentConfig, sizes: (usize, usize)) -> Result<(Vec<ShapeRow>, Vec<ShapeRow>)> {
    let emb = cfg.embedding.resolve()?;
    Ok((emb.infer_shapes((sizes.0, sizes.0))?, emb.infer_shapes((sizes.1, sizes.1))?))
}

pub fn render_shapes(z: &[ShapeRow], x: &[ShapeRow], sizes: (usize, usize)) -> String {
    let mut s = format!(
        "{:<7} {:>6} {:>6} {:>8}  {:>14} {:>14}\n",
        "layer", "kernel", "stride", "channels", format!("exemplar {}", sizes.0), format!("search {}", sizes.1)
    );
    for (a, b) in z.iter().zip(x) {
        s += &format!(
            "{:<7} {:>6} {:>6} {:>8}  {:>14} {:>14}\n",
            a.name,
            format!("{0}x{0}", a.kernel),
            a.stride,
            a.c,
            format!("{}x{}", a.h, a.w),
            format!("{}x{}", b.h, b.w)
        );
    }
    s
}

pub fn cmd_shapes(ov: &Overrides, log: &mut dyn Write) -> Result<ExitStatus> {
    let cfg = resolve_config(ov)?;
    let sizes = match (&ov.config, cfg.embedding.preset) {
        (None, Some(p)) => p.input_sizes(),
        _ => (cfg.train.data.exemplar_size, cfg.train.data.search_size),
    };
    let (z, x) = shape_tables(&cfg, sizes)?;
    write!(log, "{}", render_shapes(&z, &x, sizes))?;
    Ok(ExitStatus::Success)
}

pub fn cmd_gradcheck(log: &mut dyn Write) -> Result<ExitStatus> {
    let start = Instant::now();
    let checks = run_suite(&GRADCHECK_SEEDS)?;
    let mut ok = true;
    for c in &checks {
        let pass = c.max_rel_error < GRADCHECK_TOLERANCE;
        ok &= pass;
        writeln!(
            log,
            "{:<18} worst rel err {:.3e} over {} seeds, {} elements  {}",
            c.op,
            c.max_rel_error,
            c.seeds,
            c.checked,
            if pass { "ok" } else { "FAIL" }
        )?;
    }
    writeln!(log, "{:.2}s", start.elapsed().as_secs_f64())?;
    Ok(if ok { ExitStatus::Success } else { ExitStatus::NumericalFailure })
}

/// Correlation report of a saved checkpoint on the config's held-out batch.
pub fn checkpoint_report(cfg: &ExperimentConfig, path: &Path) -> Result<CorrelationReport> {
    let ck = Checkpoint::load(path)?;
    let model = SiameseModel::from_checkpoint(cfg.embedding.resolve()?, cfg.scd.layers.clone(), &ck)?;
    let eval = Batch::generate(
        &mut stream_rng(cfg.train.seed, Stream::Eval),
        &cfg.train.data,
        cfg.train.eval_pairs,
    )?;
    full_correlation_report(&model, &eval.searches, &cfg.scd.layers, cfg.scd.epsilon, cfg.scd.delta)
}

pub fn cmd_report(ov: &Overrides, checkpoint: Option<&Path>, log: &mut dyn Write) -> Result<ExitStatus> {
    let cfg = resolve_config(ov)?;
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output.dir.join(CHECKPOINT_FILE));
    let report = checkpoint_report(&cfg, &path)?;
    writeln!(log, "{}", serde_json::to_string_pretty(&report)?)?;
    Ok(ExitStatus::Success)
}
