//! Fully-convolutional Siamese matcher.
//!
//! Exemplar and search images pass through one embedding stack whose
//! parameters are bound into the graph once, so both branches read and
//! write the very same leaves. The score map is the cross-correlation of
//! the two feature volumes, supervised with a class-balanced logistic loss.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNormLayer, BnVars, Checkpoint, ConvLayer, ConvVars, EmbeddingConfig, LayerDesc};
use crate::tensor::{Dims, Tensor4};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Pool { kernel: usize, stride: usize },
    Bn(BatchNormLayer),
    Relu,
}

#[derive(Clone, Copy, Debug)]
enum LayerVars {
    Conv(ConvVars),
    Bn(BnVars),
    None,
}

/// Parameter leaves of a [`SiameseModel`] bound into one graph.
#[derive(Clone, Debug)]
pub struct ModelVars {
    layers: Vec<LayerVars>,
}

/// Result of [`SiameseModel::embed`].
#[derive(Clone, Debug)]
pub struct Embedding {
    pub features: Var,
    /// Conv outputs (before any batch norm) keyed by 1-based conv ordinal.
    pub taps: BTreeMap<usize, Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiameseModel {
    config: EmbeddingConfig,
    layers: Vec<Layer>,
    scd_taps: BTreeSet<usize>,
}

impl SiameseModel {
    /// Fresh parameters: He-normal conv weights, zero biases, unit BN scale.
    pub fn new<R: Rng + ?Sized>(config: EmbeddingConfig, scd_taps: BTreeSet<usize>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layers
            .iter()
            .map(|desc| {
                Ok(match *desc {
                    LayerDesc::Conv {
                        kernel,
                        stride,
                        in_channels,
                        out_channels,
                    } => Layer::Conv(ConvLayer::new(in_channels, out_channels, kernel, stride, rng)?),
                    LayerDesc::Pool { kernel, stride } => Layer::Pool { kernel, stride },
                    LayerDesc::Bn { channels } => Layer::Bn(BatchNormLayer::new(channels)?),
                    LayerDesc::Relu => Layer::Relu,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = SiameseModel {
            config,
            layers,
            scd_taps,
        };
        model.check_taps()?;
        Ok(model)
    }

    fn check_taps(&self) -> Result<()> {
        let convs = self.config.conv_count();
        for &t in &self.scd_taps {
            if t == 0 || t > convs {
                return Err(Error::config(
                    "scd.layers",
                    format!("conv layer {t} does not exist; the embedding has {convs} conv layers"),
                ));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &EmbeddingConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn scd_taps(&self) -> &BTreeSet<usize> {
        &self.scd_taps
    }

    pub fn set_scd_taps(&mut self, taps: BTreeSet<usize>) -> Result<()> {
        let old = std::mem::replace(&mut self.scd_taps, taps);
        self.check_taps().inspect_err(|_| self.scd_taps = old.clone())
    }

    /// Binds every parameter into `g` once; both branches share these leaves.
    pub fn bind(&self, g: &mut Graph) -> ModelVars {
        ModelVars {
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv(c) => LayerVars::Conv(c.bind(g)),
                    Layer::Bn(b) => LayerVars::Bn(b.bind(g)),
                    _ => LayerVars::None,
                })
                .collect(),
        }
    }

    /// Runs the embedding stack on a (n, c, h, w) image batch.
    ///
    /// Training mode normalizes with batch statistics and updates the
    /// running statistics of every batch-norm layer.
    pub fn embed(&mut self, g: &mut Graph, vars: &ModelVars, image: Var, training: bool) -> Result<Embedding> {
        let d = g.dims(image);
        if d.c != self.config.input_channels {
            return Err(Error::shape(
                "embed",
                format!("image has {} channels, embedding expects {}", d.c, self.config.input_channels),
            ));
        }
        self.config.infer_shapes((d.h, d.w))?;
        let mut x = image;
        let mut taps = BTreeMap::new();
        let mut conv_ordinal = 0;
        for (layer, bound) in self.layers.iter_mut().zip(&vars.layers) {
            x = match (layer, bound) {
                (Layer::Conv(c), LayerVars::Conv(v)) => {
                    conv_ordinal += 1;
                    let y = v.apply(g, x, c.stride)?;
                    if self.scd_taps.contains(&conv_ordinal) {
                        taps.insert(conv_ordinal, y);
                    }
                    y
                }
                (Layer::Pool { kernel, stride }, _) => g.max_pool(x, *kernel, *stride)?,
                (Layer::Bn(b), LayerVars::Bn(v)) => b.apply(g, x, v, training)?,
                (Layer::Relu, _) => g.relu(x)?,
                _ => return Err(Error::Invalid("model variables were bound to a different model".into())),
            };
        }
        Ok(Embedding { features: x, taps })
    }

    /// Adds the graph gradients of the bound parameters into the model's
    /// gradient buffers.
    pub fn accumulate_grads(&mut self, g: &Graph, vars: &ModelVars) -> Result<()> {
        for (layer, bound) in self.layers.iter_mut().zip(&vars.layers) {
            match (layer, bound) {
                (Layer::Conv(c), LayerVars::Conv(v)) => {
                    add_grad(&mut c.weight, g, v.weight)?;
                    add_grad(&mut c.bias, g, v.bias)?;
                }
                (Layer::Bn(b), LayerVars::Bn(v)) => {
                    add_grad(&mut b.gamma, g, v.gamma)?;
                    add_grad(&mut b.beta, g, v.beta)?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<&Tensor4> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Conv(c) => out.extend([&c.weight, &c.bias]),
                Layer::Bn(b) => out.extend([&b.gamma, &b.beta]),
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor4> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Conv(c) => out.extend([&mut c.weight, &mut c.bias]),
                Layer::Bn(b) => out.extend([&mut b.gamma, &mut b.beta]),
                _ => {}
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Parameters and running statistics.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Conv(c) => {
                    ck.push(i, "weight", c.weight.clone());
                    ck.push(i, "bias", c.bias.clone());
                }
                Layer::Bn(b) => {
                    let d = b.gamma.dims();
                    ck.push(i, "gamma", b.gamma.clone());
                    ck.push(i, "beta", b.beta.clone());
                    ck.push(i, "running_mean", Tensor4::new(d, b.running_mean.clone()).expect("C values"));
                    ck.push(i, "running_var", Tensor4::new(d, b.running_var.clone()).expect("C values"));
                }
                _ => {}
            }
        }
        ck
    }

    /// Rebuilds a model for `config` from checkpointed values.
    pub fn from_checkpoint(config: EmbeddingConfig, scd_taps: BTreeSet<usize>, ck: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let fetch = |i: usize, name: &str, dims: Dims| -> Result<Tensor4> {
            let t = ck
                .get(i, name)
                .ok_or_else(|| Error::Checkpoint(format!("layer {i} has no `{name}`")))?;
            if t.dims() != dims {
                return Err(Error::Checkpoint(format!(
                    "layer {i} `{name}` is {}, expected {dims}",
                    t.dims()
                )));
            }
            Ok(t.clone())
        };
        let mut layers = Vec::with_capacity(config.layers.len());
        for (i, desc) in config.layers.iter().enumerate() {
            layers.push(match *desc {
                LayerDesc::Conv {
                    kernel,
                    stride,
                    in_channels,
                    out_channels,
                } => Layer::Conv(ConvLayer::from_parts(
                    fetch(i, "weight", Dims::new(out_channels, in_channels, kernel, kernel))?,
                    fetch(i, "bias", Dims::new(1, out_channels, 1, 1))?,
                    stride,
                )?),
                LayerDesc::Pool { kernel, stride } => Layer::Pool { kernel, stride },
                LayerDesc::Bn { channels } => {
                    let d = Dims::new(1, channels, 1, 1);
                    let mut b = BatchNormLayer::new(channels)?;
                    b.gamma = fetch(i, "gamma", d)?.with_requires_grad(true);
                    b.beta = fetch(i, "beta", d)?.with_requires_grad(true);
                    b.running_mean = fetch(i, "running_mean", d)?.into_data();
                    b.running_var = fetch(i, "running_var", d)?.into_data();
                    Layer::Bn(b)
                }
                LayerDesc::Relu => Layer::Relu,
            });
        }
        let model = SiameseModel {
            config,
            layers,
            scd_taps,
        };
        model.check_taps()?;
        Ok(model)
    }
}

fn add_grad(t: &mut Tensor4, g: &Graph, v: Var) -> Result<()> {
    match g.grad(v) {
        Some(d) => t.accumulate_grad(d),
        None => Ok(()),
    }
}

/// Score map of every exemplar sample swept over its search sample.
pub fn cross_correlate(g: &mut Graph, exemplar_feat: Var, search_feat: Var) -> Result<Var> {
    g.cross_correlate(exemplar_feat, search_feat)
}

/// Per-pixel labels (+1 / -1) and non-negative weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelGrid {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<f64>,
    pub weights: Vec<f64>,
}

impl LabelGrid {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|l| **l > 0.0).count()
    }
}

/// +1 within Euclidean distance `radius` of `center` (row, col), -1
/// elsewhere; each class gets half of the total weight.
pub fn make_labels(dims: (usize, usize), center: (usize, usize), radius: f64) -> Result<LabelGrid> {
    let (h, w) = dims;
    if center.0 >= h || center.1 >= w {
        return Err(Error::Invalid(format!("label center {center:?} lies outside the {h}x{w} grid")));
    }
    if !(radius >= 0.0) {
        return Err(Error::Invalid(format!("label radius must be >= 0, got {radius}")));
    }
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - center.0 as f64;
            let dx = x as f64 - center.1 as f64;
            labels.push(if dy * dy + dx * dx <= radius * radius { 1.0 } else { -1.0 });
        }
    }
    let pos = labels.iter().filter(|l| **l > 0.0).count();
    let neg = labels.len() - pos;
    if neg == 0 {
        return Err(Error::Invalid(format!(
            "radius {radius} covers the whole {h}x{w} grid; no negative pixels remain"
        )));
    }
    let weights = labels
        .iter()
        .map(|l| if *l > 0.0 { 0.5 / pos as f64 } else { 0.5 / neg as f64 })
        .collect();
    Ok(LabelGrid { h, w, labels, weights })
}

/// Score tensor (n, 1, h, w) with one label grid per sample.
#[derive(Clone, Debug)]
pub struct ScoreMap {
    pub score: Var,
    pub labels: Vec<LabelGrid>,
}

impl ScoreMap {
    pub fn new(g: &Graph, score: Var, labels: Vec<LabelGrid>) -> Result<Self> {
        let d = g.dims(score);
        if d.c != 1 || labels.len() != d.n {
            return Err(Error::shape(
                "score_map",
                format!("score {d} needs one channel and {} label grids, got {}", d.n, labels.len()),
            ));
        }
        for (i, l) in labels.iter().enumerate() {
            if (l.h, l.w) != (d.h, d.w) || l.labels.len() != d.plane() || l.weights.len() != d.plane() {
                return Err(Error::shape(
                    "score_map",
                    format!("label grid {i} is {}x{}, score map is {}x{}", l.h, l.w, d.h, d.w),
                ));
            }
            let total: f64 = l.weights.iter().sum();
            if l.weights.iter().any(|w| *w < 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::Invalid(format!(
                    "label grid {i}: weights must be non-negative and sum to 1 (sum = {total})"
                )));
            }
        }
        Ok(ScoreMap { score, labels })
    }
}

/// Weighted logistic loss averaged over the batch.
pub fn task_loss(g: &mut Graph, map: &ScoreMap) -> Result<Var> {
    let labels: Vec<f64> = map.labels.iter().flat_map(|l| l.labels.iter().copied()).collect();
    let weights: Vec<f64> = map.labels.iter().flat_map(|l| l.weights.iter().copied()).collect();
    g.logistic_loss(map.score, &labels, &weights)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{check_gradients, project, projection_weights, DEFAULT_STEP};
    use crate::nn::PresetOptions;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn desk_model(seed: u64) -> SiameseModel {
        SiameseModel::new(
            EmbeddingConfig::desk(PresetOptions::default()),
            BTreeSet::from([2, 3]),
            &mut rng(seed),
        )
        .unwrap()
    }

    #[test]
    fn desk_embedding_agrees_with_shape_inference() {
        let mut m = desk_model(0);
        let mut g = Graph::new();
        let vars = m.bind(&mut g);
        let img = g.constant(Tensor4::uniform(Dims::new(2, 3, 32, 32), 0.0, 1.0, &mut rng(1)).unwrap());
        let e = m.embed(&mut g, &vars, img, true).unwrap();
        let rows = m.config().infer_shapes((32, 32)).unwrap();
        let last = rows.last().unwrap();
        assert_eq!(g.dims(e.features), Dims::new(2, last.c, last.h, last.w));
        assert_eq!(g.dims(e.taps[&2]), Dims::new(2, 16, 12, 12));
        assert_eq!(e.taps.keys().copied().collect::<Vec<_>>(), [2, 3]);
    }

    #[test]
    fn taps_must_name_existing_conv_layers() {
        let cfg = EmbeddingConfig::desk(PresetOptions::default());
        assert!(SiameseModel::new(cfg.clone(), BTreeSet::from([4]), &mut rng(0)).is_err());
        assert!(SiameseModel::new(cfg, BTreeSet::from([0]), &mut rng(0)).is_err());
    }

    #[test]
    fn embed_reports_shape_failures() {
        let mut m = desk_model(0);
        let mut g = Graph::new();
        let vars = m.bind(&mut g);
        let img = g.constant(Tensor4::zeros(Dims::new(1, 3, 8, 8)).unwrap());
        assert!(matches!(m.embed(&mut g, &vars, img, false), Err(Error::Shape { .. })));
    }

    #[test]
    fn branches_share_parameter_leaves() {
        let mut m = desk_model(2);
        let mut g = Graph::new();
        let vars = m.bind(&mut g);
        let z = g.constant(Tensor4::uniform(Dims::new(2, 3, 32, 32), 0.0, 1.0, &mut rng(3)).unwrap());
        let x = g.constant(Tensor4::uniform(Dims::new(2, 3, 64, 64), 0.0, 1.0, &mut rng(4)).unwrap());
        let ez = m.embed(&mut g, &vars, z, true).unwrap();
        let ex = m.embed(&mut g, &vars, x, true).unwrap();
        let s = cross_correlate(&mut g, ez.features, ex.features).unwrap();
        assert_eq!(g.dims(s), Dims::new(2, 1, 17, 17));
        let total = g.sum_all(s).unwrap();
        g.backward(total).unwrap();
        let before = m.params().len();
        let leaves_before = g.len();
        m.accumulate_grads(&g, &vars).unwrap();
        assert_eq!(before, m.params().len());
        assert_eq!(leaves_before, g.len());
        assert!(m.params().iter().all(|p| p.grad().is_some()));
    }

    #[test]
    fn cross_correlation_shapes_and_errors() {
        let mut g = Graph::new();
        let z = g.constant(Tensor4::zeros(Dims::new(1, 32, 17, 17)).unwrap());
        let x = g.constant(Tensor4::zeros(Dims::new(1, 32, 49, 49)).unwrap());
        let s = cross_correlate(&mut g, z, x).unwrap();
        assert_eq!(g.dims(s), Dims::new(1, 1, 33, 33));
        assert!(cross_correlate(&mut g, x, z).is_err());
        let c = g.constant(Tensor4::zeros(Dims::new(1, 31, 49, 49)).unwrap());
        assert!(cross_correlate(&mut g, z, c).is_err());
    }

    #[test]
    fn delta_exemplar_crops_the_search_map() {
        let search = Tensor4::uniform(Dims::new(1, 1, 6, 7), -1.0, 1.0, &mut rng(5)).unwrap();
        let delta = Tensor4::from_fn(Dims::new(1, 1, 3, 3), |_, _, h, w| if h == 0 && w == 0 { 1.0 } else { 0.0 }).unwrap();
        let mut g = Graph::new();
        let z = g.constant(delta);
        let x = g.constant(search.clone());
        let s = cross_correlate(&mut g, z, x).unwrap();
        let out = g.value(s);
        assert_eq!(out.dims(), Dims::new(1, 1, 4, 5));
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(out.at(0, 0, y, x), search.at(0, 0, y, x));
            }
        }
    }

    #[test]
    fn cross_correlation_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut r = rng(20 + seed);
            let z = Tensor4::uniform(Dims::new(2, 3, 3, 2), -1.0, 1.0, &mut r).unwrap();
            let x = Tensor4::uniform(Dims::new(2, 3, 5, 6), -1.0, 1.0, &mut r).unwrap();
            let proj = projection_weights(Dims::new(2, 1, 3, 5), &mut r).unwrap();
            let rep = check_gradients(&[z, x], DEFAULT_STEP, |g, v| {
                let s = g.cross_correlate(v[0], v[1])?;
                project(g, s, &proj)
            })
            .unwrap();
            assert!(rep.max_rel_error < 1e-4, "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn self_match_peaks_at_true_offset() {
        for seed in 0..10 {
            let mut r = rng(40 + seed);
            let z = Tensor4::uniform(Dims::new(1, 4, 5, 5), -1.0, 1.0, &mut r).unwrap();
            let (oy, ox) = (r.random_range(0..8), r.random_range(0..8));
            let x = Tensor4::from_fn(Dims::new(1, 4, 12, 12), |_, c, h, w| {
                if (oy..oy + 5).contains(&h) && (ox..ox + 5).contains(&w) {
                    z.at(0, c, h - oy, w - ox)
                } else {
                    0.0
                }
            })
            .unwrap();
            let mut g = Graph::new();
            let (zv, xv) = (g.constant(z), g.constant(x));
            let s = cross_correlate(&mut g, zv, xv).unwrap();
            let data = g.value(s).data();
            let best = (0..data.len()).max_by(|a, b| data[*a].total_cmp(&data[*b])).unwrap();
            assert_eq!((best / 8, best % 8), (oy, ox));
        }
    }

    #[test]
    fn label_examples() {
        let l = make_labels((33, 33), (16, 16), 0.0).unwrap();
        assert_eq!(l.positives(), 1);
        assert_eq!(l.labels[16 * 33 + 16], 1.0);

        // Lattice points with x^2 + y^2 <= 4.
        let disk = (-2i32..=2)
            .flat_map(|y| (-2i32..=2).map(move |x| (y, x)))
            .filter(|(y, x)| y * y + x * x <= 4)
            .count();
        assert_eq!(disk, 13);
        let l = make_labels((33, 33), (16, 16), 2.0).unwrap();
        assert_eq!(l.positives(), disk);
        assert!((l.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        assert!(make_labels((5, 5), (2, 2), 10.0).is_err());
        assert!(make_labels((5, 5), (5, 0), 1.0).is_err());
    }

    fn loss_for(scores: &[f64], grid: LabelGrid) -> f64 {
        let mut g = Graph::new();
        let s = g.constant(Tensor4::new(Dims::new(1, 1, grid.h, grid.w), scores.to_vec()).unwrap());
        let map = ScoreMap::new(&g, s, vec![grid]).unwrap();
        let l = task_loss(&mut g, &map).unwrap();
        g.item(l).unwrap()
    }

    #[test]
    fn task_loss_limits() {
        let grid = make_labels((5, 5), (2, 2), 1.0).unwrap();
        assert!((loss_for(&[0.0; 25], grid.clone()) - std::f64::consts::LN_2).abs() < 1e-12);
        let perfect: Vec<f64> = grid.labels.iter().map(|l| 60.0 * l).collect();
        assert!(loss_for(&perfect, grid) < 1e-20);
    }

    #[test]
    fn score_map_rejects_bad_weights() {
        let mut g = Graph::new();
        let s = g.constant(Tensor4::zeros(Dims::new(1, 1, 2, 2)).unwrap());
        let grid = LabelGrid {
            h: 2,
            w: 2,
            labels: vec![1.0; 4],
            weights: vec![0.0; 4],
        };
        assert!(ScoreMap::new(&g, s, vec![grid]).is_err());
    }

    #[test]
    fn task_loss_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut r = rng(60 + seed);
            let scores = Tensor4::uniform(Dims::new(2, 1, 5, 5), -3.0, 3.0, &mut r).unwrap();
            let grids = vec![
                make_labels((5, 5), (r.random_range(0..5), r.random_range(0..5)), 1.0).unwrap(),
                make_labels((5, 5), (r.random_range(0..5), r.random_range(0..5)), 1.5).unwrap(),
            ];
            let rep = check_gradients(&[scores], DEFAULT_STEP, |g, v| {
                let map = ScoreMap::new(g, v[0], grids.clone())?;
                task_loss(g, &map)
            })
            .unwrap();
            assert!(rep.max_rel_error < 1e-5, "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let mut m = desk_model(7);
        let mut g = Graph::new();
        let vars = m.bind(&mut g);
        let img = g.constant(Tensor4::uniform(Dims::new(2, 3, 32, 32), 0.0, 1.0, &mut rng(8)).unwrap());
        m.embed(&mut g, &vars, img, true).unwrap();
        let ck = m.to_checkpoint();
        let back = SiameseModel::from_checkpoint(
            m.config().clone(),
            m.scd_taps().clone(),
            &crate::nn::Checkpoint::from_bytes(&ck.to_bytes()).unwrap(),
        )
        .unwrap();
        assert_eq!(back.to_checkpoint().to_bytes(), ck.to_bytes());

        let other = EmbeddingConfig::table1(PresetOptions::default());
        assert!(SiameseModel::from_checkpoint(other, BTreeSet::new(), &ck).is_err());
    }
}
