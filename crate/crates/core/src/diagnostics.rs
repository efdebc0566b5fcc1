//! Full inter-channel correlation statistics on a held-out batch.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::scd::ncc_value;
use crate::siamese::SiameseModel;
use crate::tensor::Tensor4;

/// Correlation summary for one conv layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCorrelation {
    /// 1-based conv ordinal.
    pub layer: usize,
    pub channels: usize,
    /// C x C matrix of NCC values averaged over the batch samples.
    pub matrix: Vec<Vec<f64>>,
    /// Mean `|p|` over the off-diagonal unordered pairs.
    pub mean_abs_p: f64,
    pub max_abs_p: f64,
    /// Fraction of off-diagonal pairs with `|p| > epsilon`.
    pub frac_over_eps: f64,
    /// Mean of `max(0, |p| - epsilon)` over off-diagonal pairs.
    pub mean_excess: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// Training progress in epochs at which the report was taken.
    pub epoch: f64,
    pub epsilon: f64,
    pub layers: Vec<LayerCorrelation>,
}

impl CorrelationReport {
    pub fn layer(&self, layer: usize) -> Option<&LayerCorrelation> {
        self.layers.iter().find(|l| l.layer == layer)
    }
}

/// Per-sample NCC matrices of a (n, c, h, w) tensor, averaged over `n`.
pub fn correlation_matrix(features: &Tensor4, delta: f64) -> Vec<Vec<f64>> {
    let d = features.dims();
    let mut m = vec![vec![0.0; d.c]; d.c];
    for s in 0..d.n {
        for a in 0..d.c {
            for b in a..d.c {
                let p = ncc_value(features.channel(s, a), features.channel(s, b), delta);
                m[a][b] += p;
                if a != b {
                    m[b][a] += p;
                }
            }
        }
    }
    let inv = 1.0 / d.n as f64;
    for row in &mut m {
        for v in row {
            *v *= inv;
        }
    }
    m
}

/// Summary statistics of a correlation matrix.
pub fn summarize(layer: usize, matrix: Vec<Vec<f64>>, epsilon: f64) -> LayerCorrelation {
    let c = matrix.len();
    let (mut sum, mut max, mut over, mut excess, mut count) = (0.0, 0.0f64, 0usize, 0.0, 0usize);
    for a in 0..c {
        for b in a + 1..c {
            let p = matrix[a][b].abs();
            sum += p;
            max = max.max(p);
            over += usize::from(p > epsilon);
            excess += (p - epsilon).max(0.0);
            count += 1;
        }
    }
    let denom = count.max(1) as f64;
    LayerCorrelation {
        layer,
        channels: c,
        matrix,
        mean_abs_p: sum / denom,
        max_abs_p: max,
        frac_over_eps: over as f64 / denom,
        mean_excess: excess / denom,
    }
}

/// Embeds `images` with batch norm in inference mode and reports the
/// correlation of every requested conv layer's output.
pub fn full_correlation_report(
    model: &SiameseModel,
    images: &Tensor4,
    layers: &BTreeSet<usize>,
    epsilon: f64,
    delta: f64,
) -> Result<CorrelationReport> {
    let convs = model.config().conv_count();
    if let Some(bad) = layers.iter().find(|l| **l == 0 || **l > convs) {
        return Err(Error::Invalid(format!(
            "layer {bad} is not a conv ordinal of this embedding (1..={convs})"
        )));
    }
    let mut probe = model.clone();
    probe.set_scd_taps(layers.clone())?;
    let mut g = Graph::new();
    let vars = probe.bind(&mut g);
    let x = g.constant(images.clone());
    let emb = probe.embed(&mut g, &vars, x, false)?;
    let layers = layers
        .iter()
        .map(|l| {
            let tap = emb.taps[l];
            summarize(*l, correlation_matrix(g.value(tap), delta), epsilon)
        })
        .collect();
    Ok(CorrelationReport {
        epoch: 0.0,
        epsilon,
        layers,
    })
}
