//! SGD training of the Siamese matcher with the decorrelation penalty.

pub mod synthetic;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::diagnostics::{full_correlation_report, CorrelationReport};
use crate::error::{Error, Result};
use crate::scd::{combined_loss, combined_objective, layer_scd_loss, LossBreakdown, ScdConfig};
use crate::siamese::{cross_correlate, make_labels, task_loss, ModelVars, ScoreMap, SiameseModel};
use crate::tensor::Tensor4;

pub use synthetic::{generate_pair, PairSpec, SyntheticPair};

/// Optimizer and data settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Training pairs drawn per epoch; the last batch may be short.
    pub samples_per_epoch: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Radius of the positive disk on the score map, in score cells.
    pub label_radius: f64,
    /// Constant multiplier on the raw cross-correlation scores.
    pub score_scale: f64,
    /// Held-out pairs used for correlation reports.
    pub eval_pairs: usize,
    pub data: PairSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 50,
            samples_per_epoch: 5000,
            lr_initial: 1e-3,
            lr_final: 1e-5,
            weight_decay: 5e-4,
            seed: 0,
            label_radius: 2.0,
            score_scale: 1e-3,
            eval_pairs: 16,
            data: PairSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.samples_per_epoch == 0 {
            return Err(Error::config("train.samples_per_epoch", "must be >= 1"));
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return Err(Error::config("train.lr_initial", format!("must be positive, got {}", self.lr_initial)));
        }
        if !(self.lr_final > 0.0 && self.lr_final.is_finite()) {
            return Err(Error::config("train.lr_final", format!("must be positive, got {}", self.lr_final)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be a finite non-negative number"));
        }
        if !(self.label_radius >= 0.0) {
            return Err(Error::config("train.label_radius", "must be >= 0"));
        }
        if !(self.score_scale > 0.0 && self.score_scale.is_finite()) {
            return Err(Error::config("train.score_scale", "must be positive"));
        }
        if self.eval_pairs == 0 {
            return Err(Error::config("train.eval_pairs", "must be >= 1"));
        }
        self.data.validate()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples_per_epoch.div_ceil(self.batch_size)
    }

    fn batch_len(&self, step: usize) -> usize {
        let start = step * self.batch_size;
        self.batch_size.min(self.samples_per_epoch - start)
    }
}

/// Learning rate for 0-based `epoch`: geometric decay from `lr_initial` at
/// the first epoch to `lr_final` at the last.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Invalid(format!("epoch {epoch} is outside 0..{}", cfg.epochs)));
    }
    if cfg.epochs == 1 {
        return Ok(cfg.lr_initial);
    }
    let factor = (cfg.lr_final / cfg.lr_initial).powf(1.0 / (cfg.epochs - 1) as f64);
    Ok(cfg.lr_initial * factor.powi(epoch as i32))
}

/// `w <- w - lr * (grad + weight_decay * w)` for every parameter, then
/// clears the gradients.
pub fn sgd_step(params: Vec<&mut Tensor4>, lr: f64, weight_decay: f64) -> Result<()> {
    if params.iter().any(|p| p.requires_grad() && p.grad().is_none()) {
        return Err(Error::Backward("sgd_step: a parameter has no gradient".into()));
    }
    for p in params {
        if !p.requires_grad() {
            continue;
        }
        let grad = p.grad().expect("checked above").to_vec();
        for (w, g) in p.data_mut().iter_mut().zip(&grad) {
            *w -= lr * (g + weight_decay * *w);
        }
        p.zero_grad();
    }
    Ok(())
}

/// A stacked batch of pairs with the score-map cell of each target.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub exemplars: Tensor4,
    pub searches: Tensor4,
    pub cells: Vec<(usize, usize)>,
}

impl Batch {
    pub fn from_pairs(pairs: &[SyntheticPair]) -> Result<Self> {
        let ex: Vec<Tensor4> = pairs.iter().map(|p| p.exemplar.clone()).collect();
        let se: Vec<Tensor4> = pairs.iter().map(|p| p.search.clone()).collect();
        Ok(Batch {
            exemplars: Tensor4::stack(&ex)?,
            searches: Tensor4::stack(&se)?,
            cells: pairs.iter().map(|p| p.grid_cell).collect(),
        })
    }

    pub fn generate(rng: &mut ChaCha8Rng, spec: &PairSpec, n: usize) -> Result<Self> {
        let pairs = (0..n).map(|_| generate_pair(rng, spec)).collect::<Result<Vec<_>>>()?;
        Self::from_pairs(&pairs)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Forward graph of one training step, before backward.
pub struct StepGraph {
    pub graph: Graph,
    pub vars: ModelVars,
    pub task: Var,
    /// Layer losses keyed by conv ordinal (active layers only).
    pub per_layer: BTreeMap<usize, Var>,
    pub mean_abs_p: BTreeMap<usize, f64>,
    pub objective: Var,
}

impl StepGraph {
    pub fn breakdown(&self, scd: &ScdConfig) -> Result<LossBreakdown> {
        let per_layer = self
            .per_layer
            .iter()
            .map(|(l, v)| Ok((*l, self.graph.item(*v)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let mut out = combined_loss(self.graph.item(self.task)?, &per_layer, scd)?;
        out.mean_abs_p = self.mean_abs_p.clone();
        Ok(out)
    }
}

/// Builds the training objective for `batch`. Batch-norm running statistics
/// of `model` are updated as a side effect.
pub fn forward_step(
    model: &mut SiameseModel,
    batch: &Batch,
    cfg: &TrainConfig,
    scd: &ScdConfig,
    scd_rng: &mut ChaCha8Rng,
) -> Result<StepGraph> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let z = g.constant(batch.exemplars.clone());
    let x = g.constant(batch.searches.clone());
    let ez = model.embed(&mut g, &vars, z, true)?;
    let ex = model.embed(&mut g, &vars, x, true)?;
    let raw = cross_correlate(&mut g, ez.features, ex.features)?;
    let score = g.scale(raw, cfg.score_scale)?;
    let d = g.dims(score);
    let labels = batch
        .cells
        .iter()
        .map(|c| make_labels((d.h, d.w), *c, cfg.label_radius))
        .collect::<Result<Vec<_>>>()?;
    let map = ScoreMap::new(&g, score, labels)?;
    let task = task_loss(&mut g, &map)?;

    let mut per_layer = BTreeMap::new();
    let mut mean_abs_p = BTreeMap::new();
    for layer in scd.active_layers() {
        let tap = *ex
            .taps
            .get(&layer)
            .ok_or_else(|| Error::Invalid(format!("layer {layer} is not tapped by the model")))?;
        let s = layer_scd_loss(&mut g, tap, scd, scd_rng)?;
        let (loss, abs_p) = if scd.include_exemplar {
            let e = layer_scd_loss(&mut g, ez.taps[&layer], scd, scd_rng)?;
            let sum = g.add(s.loss, e.loss)?;
            (g.scale(sum, 0.5)?, 0.5 * (s.mean_abs_p + e.mean_abs_p))
        } else {
            (s.loss, s.mean_abs_p)
        };
        per_layer.insert(layer, loss);
        mean_abs_p.insert(layer, abs_p);
    }
    let objective = combined_objective(&mut g, task, &per_layer, scd)?;
    Ok(StepGraph {
        graph: g,
        vars,
        task,
        per_layer,
        mean_abs_p,
        objective,
    })
}

/// One SGD iteration on `batch`; returns the losses before the update.
pub fn train_step(
    model: &mut SiameseModel,
    batch: &Batch,
    cfg: &TrainConfig,
    scd: &ScdConfig,
    lr: f64,
    scd_rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let mut step = forward_step(model, batch, cfg, scd, scd_rng)?;
    let losses = step.breakdown(scd)?;
    if !losses.combined.is_finite() {
        return Err(Error::Invalid(format!("non-finite training loss {}", losses.combined)));
    }
    step.graph.backward(step.objective)?;
    model.accumulate_grads(&step.graph, &step.vars)?;
    sgd_step(model.params_mut(), lr, cfg.weight_decay)?;
    Ok(losses)
}

/// Independent random streams derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Data = 1,
    Scd = 2,
    Eval = 3,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// One metrics row: training losses averaged since the previous row, plus
/// correlation statistics on the held-out batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// Fractional epochs completed.
    pub epoch: f64,
    pub lr: f64,
    pub task_loss: f64,
    pub scd_loss_mean: f64,
    pub combined_loss: f64,
    pub report: CorrelationReport,
}

/// Training state carried across epochs.
pub struct Trainer {
    pub model: SiameseModel,
    pub cfg: TrainConfig,
    pub scd: ScdConfig,
    data_rng: ChaCha8Rng,
    scd_rng: ChaCha8Rng,
    eval_images: Tensor4,
}

impl Trainer {
    /// Fresh model and streams. Models built from the same embedding,
    /// taps and seed start from identical weights regardless of `scd`.
    pub fn new(model: SiameseModel, cfg: TrainConfig, scd: ScdConfig) -> Result<Self> {
        cfg.validate()?;
        scd.validate()?;
        let eval = Batch::generate(&mut stream_rng(cfg.seed, Stream::Eval), &cfg.data, cfg.eval_pairs)?;
        Ok(Trainer {
            data_rng: stream_rng(cfg.seed, Stream::Data),
            scd_rng: stream_rng(cfg.seed, Stream::Scd),
            eval_images: eval.searches,
            model,
            cfg,
            scd,
        })
    }

    pub fn report(&self, epoch: f64) -> Result<CorrelationReport> {
        let mut r = full_correlation_report(
            &self.model,
            &self.eval_images,
            self.model.scd_taps(),
            self.scd.epsilon,
            self.scd.delta,
        )?;
        r.epoch = epoch;
        Ok(r)
    }

    /// Runs every epoch, emitting `rows_per_epoch` metric rows per epoch
    /// together with the model as it stands at that row.
    pub fn run(&mut self, rows_per_epoch: usize, mut on_row: impl FnMut(&MetricRow, &SiameseModel) -> Result<()>) -> Result<()> {
        let steps = self.cfg.steps_per_epoch();
        if rows_per_epoch == 0 || rows_per_epoch > steps {
            return Err(Error::config(
                "output.metrics_per_epoch",
                format!("must lie in 1..={steps} (steps per epoch)"),
            ));
        }
        for epoch in 0..self.cfg.epochs {
            let lr = lr_schedule(epoch, &self.cfg)?;
            let mut acc = [0.0; 3];
            let mut count = 0usize;
            let mut row = 0;
            for step in 0..steps {
                let batch = Batch::generate(&mut self.data_rng, &self.cfg.data, self.cfg.batch_len(step))?;
                let l = train_step(&mut self.model, &batch, &self.cfg, &self.scd, lr, &mut self.scd_rng)?;
                acc[0] += l.task_loss;
                acc[1] += l.scd_mean();
                acc[2] += l.combined;
                count += 1;
                if (step + 1) * rows_per_epoch >= (row + 1) * steps {
                    let progress = epoch as f64 + (row + 1) as f64 / rows_per_epoch as f64;
                    let n = count as f64;
                    let metrics = MetricRow {
                        epoch: progress,
                        lr,
                        task_loss: acc[0] / n,
                        scd_loss_mean: acc[1] / n,
                        combined_loss: acc[2] / n,
                        report: self.report(progress)?,
                    };
                    on_row(&metrics, &self.model)?;
                    acc = [0.0; 3];
                    count = 0;
                    row += 1;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
