//! Stochastic channel decorrelation.
//!
//! Each iteration a random subset of channel pairs of a conv layer is drawn.
//! For every pair the normalized cross correlation `p` of the two channel
//! maps is penalized with the squared hinge `max(0, |p| - epsilon)^2`. The
//! per-layer loss is the mean over sampled pairs (and batch samples), and
//! the layer losses join the task loss as
//! `alpha * task + beta * mean(layer losses)`.
//!
//! Pairs are unordered, since `p` is symmetric in its arguments, and the pair
//! budget caps the number of unordered pairs drawn per layer per iteration.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

/// Regularizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScdConfig {
    pub enabled: bool,
    /// Margin below which `|p|` is not penalized.
    pub epsilon: f64,
    /// Maximum number of unordered pairs drawn per layer per iteration.
    pub pair_budget: usize,
    /// Decorrelated layers as 1-based conv ordinals.
    pub layers: BTreeSet<usize>,
    /// Weight of the task loss.
    pub alpha: f64,
    /// Weight of the mean layer loss.
    pub beta: f64,
    /// Added to the NCC denominator outside the square root.
    pub delta: f64,
    /// Also decorrelate the exemplar branch; the search branch always is.
    pub include_exemplar: bool,
}

impl Default for ScdConfig {
    fn default() -> Self {
        ScdConfig {
            enabled: true,
            epsilon: 0.3,
            pair_budget: 1000,
            layers: BTreeSet::from([3, 5]),
            alpha: 1.0,
            beta: 2.0,
            delta: 1e-8,
            include_exemplar: false,
        }
    }
}

impl ScdConfig {
    /// The same weights with the regularizer switched off.
    pub fn disabled() -> Self {
        ScdConfig {
            enabled: false,
            ..ScdConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::config("scd.epsilon", format!("must lie in [0, 1), got {}", self.epsilon)));
        }
        if self.pair_budget == 0 {
            return Err(Error::config("scd.pair_budget", "must be >= 1"));
        }
        if self.enabled && self.layers.is_empty() {
            return Err(Error::config("scd.layers", "must be non-empty when SCD is enabled"));
        }
        if self.layers.contains(&0) {
            return Err(Error::config("scd.layers", "layer ordinals start at 1"));
        }
        if !(self.delta > 0.0) {
            return Err(Error::config("scd.delta", format!("must be > 0, got {}", self.delta)));
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::config("scd.alpha", "alpha and beta must be finite"));
        }
        Ok(())
    }

    /// Layers that actually contribute a loss term.
    pub fn active_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.iter().copied().filter(move |_| self.enabled)
    }
}

/// Distinct unordered channel pairs `(m, n)` with `m < n`, 0-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSample {
    pairs: Vec<(usize, usize)>,
}

impl PairSample {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Number of unordered pairs among `channels` channels.
pub fn universe_size(channels: usize) -> usize {
    channels * channels.saturating_sub(1) / 2
}

/// The `index`-th unordered pair in row-major order
/// (0,1), (0,2), .., (0,C-1), (1,2), ...
fn pair_at(channels: usize, mut index: usize) -> (usize, usize) {
    let mut m = 0;
    loop {
        let row = channels - m - 1;
        if index < row {
            return (m, m + 1 + index);
        }
        index -= row;
        m += 1;
    }
}

/// Draws `min(budget, C(C-1)/2)` distinct pairs uniformly without replacement.
///
/// The pairs come back sorted, so the result depends only on which subset
/// was drawn.
pub fn sample_pairs<R: Rng + ?Sized>(channels: usize, budget: usize, rng: &mut R) -> Result<PairSample> {
    if channels < 2 {
        return Err(Error::Invalid(format!(
            "pair sampling needs at least 2 channels, got {channels}"
        )));
    }
    if budget == 0 {
        return Err(Error::Invalid("pair budget must be >= 1".into()));
    }
    let universe = universe_size(channels);
    let take = budget.min(universe);
    let mut pairs: Vec<(usize, usize)> = if take == universe {
        (0..universe).map(|i| pair_at(channels, i)).collect()
    } else {
        rand::seq::index::sample(rng, universe, take)
            .into_iter()
            .map(|i| pair_at(channels, i))
            .collect()
    };
    pairs.sort_unstable();
    Ok(PairSample { pairs })
}

/// Normalized cross correlation of two equally shaped maps, as a graph node:
/// `sum(a*b) / (sqrt(sum(a*a) * sum(b*b)) + delta)`.
pub fn ncc(g: &mut Graph, a: Var, b: Var, delta: f64) -> Result<Var> {
    if g.dims(a) != g.dims(b) {
        return Err(Error::shape("ncc", format!("{} vs {}", g.dims(a), g.dims(b))));
    }
    let aa = g.mul(a, a)?;
    let sa = g.sum_all(aa)?;
    let bb = g.mul(b, b)?;
    let sb = g.sum_all(bb)?;
    ncc_from_energies(g, a, b, sa, sb, delta)
}

fn ncc_from_energies(g: &mut Graph, a: Var, b: Var, energy_a: Var, energy_b: Var, delta: f64) -> Result<Var> {
    let ab = g.mul(a, b)?;
    let num = g.sum_all(ab)?;
    let prod = g.mul(energy_a, energy_b)?;
    let root = g.sqrt(prod)?;
    let den = g.add_const(root, delta)?;
    g.div(num, den)
}

/// [`ncc`] on plain slices.
pub fn ncc_value(a: &[f64], b: &[f64], delta: f64) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / ((aa * bb).sqrt() + delta)
}

/// Squared hinge on `|p|`: `max(0, |p| - epsilon)^2`.
pub fn pair_margin_loss(g: &mut Graph, p: Var, epsilon: f64) -> Result<Var> {
    if !(epsilon >= 0.0) {
        return Err(Error::Invalid(format!("margin must be >= 0, got {epsilon}")));
    }
    let a = g.abs(p)?;
    let shifted = g.add_const(a, -epsilon)?;
    let hinge = g.relu(shifted)?;
    g.mul(hinge, hinge)
}

/// [`pair_margin_loss`] on a plain value.
pub fn pair_margin_loss_value(p: f64, epsilon: f64) -> f64 {
    let h = (p.abs() - epsilon).max(0.0);
    h * h
}

/// Output of [`layer_scd_loss`].
#[derive(Clone, Debug)]
pub struct LayerScd {
    /// Scalar loss node.
    pub loss: Var,
    /// Mean `|p|` over the sampled pairs and batch samples.
    pub mean_abs_p: f64,
    pub pairs: PairSample,
}

/// Per-layer decorrelation loss over a (n, c, h, w) feature tensor.
///
/// One pair sample is drawn and shared by every batch sample. For each
/// sampled pair and sample the pair loss is computed from that sample's own
/// NCC; the result is the mean over pairs and samples.
pub fn layer_scd_loss<R: Rng + ?Sized>(g: &mut Graph, features: Var, cfg: &ScdConfig, rng: &mut R) -> Result<LayerScd> {
    let dims = g.dims(features);
    if dims.c < 2 {
        return Err(Error::shape(
            "layer_scd_loss",
            format!("needs at least 2 channels, got {}", dims.c),
        ));
    }
    let pairs = sample_pairs(dims.c, cfg.pair_budget, rng)?;
    let mut used = vec![false; dims.c];
    for &(m, n) in pairs.pairs() {
        used[m] = true;
        used[n] = true;
    }
    let mut terms = Vec::with_capacity(pairs.len() * dims.n);
    let mut abs_sum = 0.0;
    for s in 0..dims.n {
        let mut maps: Vec<Option<(Var, Var)>> = vec![None; dims.c];
        for c in (0..dims.c).filter(|c| used[*c]) {
            let map = g.slice_channel(features, s, c)?;
            let sq = g.mul(map, map)?;
            let energy = g.sum_all(sq)?;
            maps[c] = Some((map, energy));
        }
        for &(m, n) in pairs.pairs() {
            let (a, ea) = maps[m].expect("sliced above");
            let (b, eb) = maps[n].expect("sliced above");
            let p = ncc_from_energies(g, a, b, ea, eb, cfg.delta)?;
            abs_sum += g.item(p)?.abs();
            terms.push(pair_margin_loss(g, p, cfg.epsilon)?);
        }
    }
    let count = terms.len() as f64;
    let total = g.add_n(&terms)?;
    let loss = g.scale(total, 1.0 / count)?;
    Ok(LayerScd {
        loss,
        mean_abs_p: abs_sum / count,
        pairs,
    })
}

/// Task loss, per-layer decorrelation losses and their weighted combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_loss: f64,
    pub scd_per_layer: BTreeMap<usize, f64>,
    pub combined: f64,
    /// Mean `|p|` over the pairs sampled for each layer.
    #[serde(default)]
    pub mean_abs_p: BTreeMap<usize, f64>,
}

impl LossBreakdown {
    /// Mean of the per-layer losses, 0 when there are none.
    pub fn scd_mean(&self) -> f64 {
        if self.scd_per_layer.is_empty() {
            0.0
        } else {
            self.scd_per_layer.values().sum::<f64>() / self.scd_per_layer.len() as f64
        }
    }
}

fn check_layer_keys<T>(per_layer: &BTreeMap<usize, T>, cfg: &ScdConfig) -> Result<()> {
    let expected: BTreeSet<usize> = cfg.active_layers().collect();
    let got: BTreeSet<usize> = per_layer.keys().copied().collect();
    if expected != got {
        return Err(Error::Invalid(format!(
            "per-layer losses for {got:?} do not match configured layers {expected:?}"
        )));
    }
    Ok(())
}

/// `alpha * task + beta * mean(per_layer)`, or `alpha * task` when SCD is
/// disabled.
pub fn combined_loss(task: f64, per_layer: &BTreeMap<usize, f64>, cfg: &ScdConfig) -> Result<LossBreakdown> {
    check_layer_keys(per_layer, cfg)?;
    let mut out = LossBreakdown {
        task_loss: task,
        scd_per_layer: per_layer.clone(),
        combined: 0.0,
        mean_abs_p: BTreeMap::new(),
    };
    out.combined = cfg.alpha * task;
    if cfg.enabled {
        out.combined += cfg.beta * out.scd_mean();
    }
    Ok(out)
}

/// Graph form of [`combined_loss`].
pub fn combined_objective(g: &mut Graph, task: Var, per_layer: &BTreeMap<usize, Var>, cfg: &ScdConfig) -> Result<Var> {
    check_layer_keys(per_layer, cfg)?;
    let weighted_task = g.scale(task, cfg.alpha)?;
    if !cfg.enabled {
        return Ok(weighted_task);
    }
    let terms: Vec<Var> = per_layer.values().copied().collect();
    let sum = g.add_n(&terms)?;
    let reg = g.scale(sum, cfg.beta / terms.len() as f64)?;
    g.add(weighted_task, reg)
}
