//! Central finite-difference checks against [`Graph::backward`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scd::{layer_scd_loss, ncc, pair_margin_loss, ScdConfig};
use crate::siamese::{make_labels, task_loss, ScoreMap};
use crate::tensor::{Dims, Tensor4};

/// Step used for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

/// Worst disagreement found by [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares analytic gradients of `f` with central differences of step `h`.
///
/// `f` must build a one-element root from leaves bound to `inputs`, in
/// order. Every input is treated as differentiable.
pub fn check_gradients<F>(inputs: &[Tensor4], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &f)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor4> = inputs.to_vec();
    for (t, grads) in analytic.iter().enumerate() {
        for (i, a) in grads.iter().enumerate() {
            let x0 = work[t].data()[i];
            work[t].data_mut()[i] = x0 + h;
            let up = evaluate(&work, &f)?;
            work[t].data_mut()[i] = x0 - h;
            let down = evaluate(&work, &f)?;
            work[t].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(*a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst = (t, i);
                report.analytic = *a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Gradients of `f` at `inputs` from one backward pass.
pub fn analytic_gradients<F>(inputs: &[Tensor4], f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    Ok(vars
        .iter()
        .map(|v| g.grad(*v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect())
}

/// Value of `f` at `inputs` without differentiation.
pub fn evaluate<F>(inputs: &[Tensor4], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.item(root)
}

/// Reduces `v` to a scalar through a fixed projection `sum(v * weights)`,
/// so every output element contributes with a distinct weight.
pub fn project(g: &mut Graph, v: Var, weights: &Tensor4) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(v, w)?;
    g.sum_all(p)
}

/// Uniform weights in [-1, 1) for [`project`].
pub fn projection_weights<R: Rng + ?Sized>(dims: Dims, rng: &mut R) -> Result<Tensor4> {
    Tensor4::uniform(dims, -1.0, 1.0, rng)
}

/// Random input in [-1, 1) whose every pooling window has a unique maximum
/// at least `gap` above the runner-up, so a finite-difference step smaller
/// than `gap` never changes which element wins.
pub fn separated_pool_input<R: Rng + ?Sized>(
    dims: Dims,
    kernel: usize,
    stride: usize,
    gap: f64,
    rng: &mut R,
) -> Result<Tensor4> {
    loop {
        let t = Tensor4::uniform(dims, -1.0, 1.0, rng)?;
        if min_window_gap(&t, kernel, stride) >= gap {
            return Ok(t);
        }
    }
}

fn min_window_gap(t: &Tensor4, k: usize, stride: usize) -> f64 {
    let d = t.dims();
    let mut worst = f64::INFINITY;
    let mut vals = Vec::with_capacity(k * k);
    for n in 0..d.n {
        for c in 0..d.c {
            for oy in 0..(d.h - k) / stride + 1 {
                for ox in 0..(d.w - k) / stride + 1 {
                    vals.clear();
                    vals.extend((0..k * k).map(|i| t.at(n, c, oy * stride + i / k, ox * stride + i % k)));
                    vals.sort_by(|a, b| b.total_cmp(a));
                    worst = worst.min(vals[0] - vals[1]);
                }
            }
        }
    }
    worst
}
/// Operations covered by [`run_suite`].
pub const SUITE_OPS: [&str; 8] = [
    "conv2d",
    "max_pool",
    "batch_norm",
    "cross_correlate",
    "ncc",
    "pair_margin_loss",
    "layer_scd_loss",
    "task_loss",
];

/// Worst relative error of one operation over all seeds.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Finite-difference checks of `op` at a random point drawn from `seed`.
pub fn check_op(op: &str, seed: u64) -> Result<GradCheckReport> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let h = DEFAULT_STEP;
    match op {
        "conv2d" => {
            let x = Tensor4::uniform(Dims::new(2, 3, 7, 6), -1.0, 1.0, rng)?;
            let w = Tensor4::uniform(Dims::new(4, 3, 3, 3), -1.0, 1.0, rng)?;
            let b = Tensor4::uniform(Dims::new(1, 4, 1, 1), -1.0, 1.0, rng)?;
            let proj = projection_weights(Dims::new(2, 4, 3, 2), rng)?;
            check_gradients(&[x, w, b], h, |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 2)?;
                project(g, y, &proj)
            })
        }
        "max_pool" => {
            let x = separated_pool_input(Dims::new(2, 2, 7, 7), 3, 2, 1e-3, rng)?;
            let proj = projection_weights(Dims::new(2, 2, 3, 3), rng)?;
            check_gradients(&[x], h, |g, v| {
                let y = g.max_pool(v[0], 3, 2)?;
                project(g, y, &proj)
            })
        }
        "batch_norm" => {
            let x = Tensor4::uniform(Dims::new(3, 2, 3, 3), -1.0, 1.0, rng)?;
            let gamma = Tensor4::uniform(Dims::new(1, 2, 1, 1), 0.5, 1.5, rng)?;
            let beta = Tensor4::uniform(Dims::new(1, 2, 1, 1), -0.5, 0.5, rng)?;
            let proj = projection_weights(Dims::new(3, 2, 3, 3), rng)?;
            check_gradients(&[x, gamma, beta], h, |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], 1e-5)?;
                project(g, y, &proj)
            })
        }
        "cross_correlate" => {
            let z = Tensor4::uniform(Dims::new(2, 3, 3, 3), -1.0, 1.0, rng)?;
            let x = Tensor4::uniform(Dims::new(2, 3, 6, 5), -1.0, 1.0, rng)?;
            let proj = projection_weights(Dims::new(2, 1, 4, 3), rng)?;
            check_gradients(&[z, x], h, |g, v| {
                let y = g.cross_correlate(v[0], v[1])?;
                project(g, y, &proj)
            })
        }
        "ncc" => {
            let a = Tensor4::uniform(Dims::new(1, 1, 4, 5), -1.0, 1.0, rng)?;
            let b = Tensor4::uniform(Dims::new(1, 1, 4, 5), -1.0, 1.0, rng)?;
            check_gradients(&[a, b], h, |g, v| ncc(g, v[0], v[1], 1e-8))
        }
        "pair_margin_loss" => {
            // Stay clear of the kinks at 0 and +-epsilon.
            let eps = 0.3;
            let p: Vec<f64> = (0..8)
                .map(|i| {
                    let mag = if i % 2 == 0 {
                        rng.random_range(0.02..eps - 0.02)
                    } else {
                        rng.random_range(eps + 0.02..1.0)
                    };
                    if rng.random_bool(0.5) { mag } else { -mag }
                })
                .collect();
            let p = Tensor4::row(&p)?;
            check_gradients(&[p], h, |g, v| {
                let l = pair_margin_loss(g, v[0], eps)?;
                g.sum_all(l)
            })
        }
        "layer_scd_loss" => {
            let x = Tensor4::uniform(Dims::new(2, 6, 4, 4), -1.0, 1.0, rng)?;
            let cfg = ScdConfig {
                pair_budget: 10,
                epsilon: 0.1,
                ..ScdConfig::default()
            };
            let pair_seed = rng.random::<u64>();
            check_gradients(&[x], h, |g, v| {
                let mut pairs = ChaCha8Rng::seed_from_u64(pair_seed);
                Ok(layer_scd_loss(g, v[0], &cfg, &mut pairs)?.loss)
            })
        }
        "task_loss" => {
            let s = Tensor4::uniform(Dims::new(2, 1, 5, 5), -2.0, 2.0, rng)?;
            let labels = vec![
                make_labels((5, 5), (rng.random_range(0..5), rng.random_range(0..5)), 1.0)?,
                make_labels((5, 5), (rng.random_range(0..5), rng.random_range(0..5)), 1.5)?,
            ];
            check_gradients(&[s], h, |g, v| {
                let map = ScoreMap::new(g, v[0], labels.clone())?;
                task_loss(g, &map)
            })
        }
        other => Err(Error::Invalid(format!("unknown operation `{other}`"))),
    }
}

/// Runs every operation in [`SUITE_OPS`] at each seed.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<OpCheck>> {
    SUITE_OPS
        .iter()
        .map(|op| {
            let mut out = OpCheck {
                op,
                seeds: seeds.len(),
                max_rel_error: 0.0,
                checked: 0,
            };
            for &seed in seeds {
                let r = check_op(op, seed)?;
                out.max_rel_error = out.max_rel_error.max(r.max_rel_error);
                out.checked += r.checked;
            }
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_five_seeds() {
        for c in run_suite(&[1, 2, 3, 4, 5]).unwrap() {
            assert!(c.max_rel_error < 1e-4, "{}: {:e}", c.op, c.max_rel_error);
            assert!(c.checked > 0);
        }
    }

    #[test]
    fn unknown_op_is_an_error() {
        assert!(check_op("softmax", 0).is_err());
    }
}
