use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

/// Valid-mode convolution with per-output-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// (C_out, C_in, k, k)
    pub weight: Tensor4,
    /// (1, C_out, 1, 1)
    pub bias: Tensor4,
    pub stride: usize,
}

impl ConvLayer {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            return Err(Error::Invalid("conv kernel and stride must be >= 1".into()));
        }
        let dims = Dims::new(out_channels, in_channels, kernel, kernel);
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let data = (0..dims.len()).map(|_| normal.sample(rng)).collect();
        Ok(ConvLayer {
            weight: Tensor4::new(dims, data)?.with_requires_grad(true),
            bias: Tensor4::zeros(Dims::new(1, out_channels, 1, 1))?.with_requires_grad(true),
            stride,
        })
    }

    pub fn from_parts(weight: Tensor4, bias: Tensor4, stride: usize) -> Result<Self> {
        if bias.len() != weight.dims().n {
            return Err(Error::shape(
                "conv",
                format!("{} bias values for {} kernels", bias.len(), weight.dims().n),
            ));
        }
        let c_out = weight.dims().n;
        Ok(ConvLayer {
            weight: weight.with_requires_grad(true),
            bias: bias.reshaped(Dims::new(1, c_out, 1, 1))?.with_requires_grad(true),
            stride,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims().n
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims().h
    }

    pub fn bind(&self, g: &mut Graph) -> ConvVars {
        ConvVars {
            weight: g.leaf(self.weight.clone()),
            bias: g.leaf(self.bias.clone()),
        }
    }

    /// Binds the parameters into `g` and applies the layer once.
    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<(Var, ConvVars)> {
        let vars = self.bind(g);
        let out = vars.apply(g, input, self.stride)?;
        Ok((out, vars))
    }
}

/// Graph leaves holding a conv layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

impl ConvVars {
    pub fn apply(&self, g: &mut Graph, input: Var, stride: usize) -> Result<Var> {
        g.conv2d(input, self.weight, Some(self.bias), stride)
    }
}

/// Max pooling over square windows.
pub fn maxpool_forward(g: &mut Graph, input: Var, kernel: usize, stride: usize) -> Result<Var> {
    g.max_pool(input, kernel, stride)
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer {
    /// (1, C, 1, 1)
    pub gamma: Tensor4,
    /// (1, C, 1, 1)
    pub beta: Tensor4,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormLayer {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Result<Self> {
        let dims = Dims::new(1, channels, 1, 1);
        Ok(BatchNormLayer {
            gamma: Tensor4::ones(dims)?.with_requires_grad(true),
            beta: Tensor4::zeros(dims)?.with_requires_grad(true),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn bind(&self, g: &mut Graph) -> BnVars {
        BnVars {
            gamma: g.leaf(self.gamma.clone()),
            beta: g.leaf(self.beta.clone()),
        }
    }

    /// Training mode normalizes with batch statistics and folds them into the
    /// running averages; eval mode applies the running statistics as a fixed
    /// per-channel affine map.
    pub fn apply(&mut self, g: &mut Graph, input: Var, vars: &BnVars, training: bool) -> Result<Var> {
        let c = g.dims(input).c;
        if c != self.channels() {
            return Err(Error::shape(
                "batch_norm",
                format!("input has {c} channels, layer has {}", self.channels()),
            ));
        }
        if training {
            let (out, stats) = g.batch_norm(input, vars.gamma, vars.beta, self.eps)?;
            let unbias = stats.count as f64 / (stats.count as f64 - 1.0);
            let m = self.momentum;
            for ch in 0..c {
                self.running_mean[ch] = (1.0 - m) * self.running_mean[ch] + m * stats.mean[ch];
                self.running_var[ch] = (1.0 - m) * self.running_var[ch] + m * stats.var[ch] * unbias;
            }
            Ok(out)
        } else {
            let (scale, shift) = self.eval_coefficients();
            g.channel_affine(input, &scale, &shift)
        }
    }

    /// Binds the parameters into `g` and applies the layer once.
    pub fn forward(&mut self, g: &mut Graph, input: Var, training: bool) -> Result<(Var, BnVars)> {
        let vars = self.bind(g);
        let out = self.apply(g, input, &vars, training)?;
        Ok((out, vars))
    }

    fn eval_coefficients(&self) -> (Vec<f64>, Vec<f64>) {
        let scale: Vec<f64> = self
            .gamma
            .data()
            .iter()
            .zip(&self.running_var)
            .map(|(g, v)| g / (v + self.eps).sqrt())
            .collect();
        let shift = self
            .beta
            .data()
            .iter()
            .zip(&self.running_mean)
            .zip(&scale)
            .map(|((b, m), s)| b - m * s)
            .collect();
        (scale, shift)
    }
}

/// Graph leaves holding a batch-norm layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BnVars {
    pub gamma: Var,
    pub beta: Var,
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{check_gradients, project, projection_weights, separated_pool_input};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn conv1_geometry_from_the_baseline_stack() {
        let layer = ConvLayer::new(3, 96, 11, 2, &mut rng(0)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor4::uniform(Dims::new(1, 3, 127, 127), 0.0, 1.0, &mut rng(1)).unwrap());
        let (y, _) = layer.forward(&mut g, x).unwrap();
        assert_eq!(g.dims(y), Dims::new(1, 96, 59, 59));
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let layer = ConvLayer::from_parts(
            Tensor4::ones(Dims::new(1, 1, 1, 1)).unwrap(),
            Tensor4::zeros(Dims::new(1, 1, 1, 1)).unwrap(),
            1,
        )
        .unwrap();
        let x = Tensor4::uniform(Dims::new(1, 1, 3, 3), -1.0, 1.0, &mut rng(2)).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (y, _) = layer.forward(&mut g, xv).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn conv_matches_direct_summation() {
        let layer = ConvLayer::new(2, 3, 3, 2, &mut rng(3)).unwrap();
        let x = Tensor4::uniform(Dims::new(2, 2, 7, 6), -1.0, 1.0, &mut rng(4)).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (y, _) = layer.forward(&mut g, xv).unwrap();
        let out = g.value(y);
        assert_eq!(out.dims(), Dims::new(2, 3, 3, 2));
        for n in 0..2 {
            for co in 0..3 {
                for oy in 0..3 {
                    for ox in 0..2 {
                        let mut s = layer.bias.data()[co];
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    s += layer.weight.at(co, ci, ky, kx) * x.at(n, ci, oy * 2 + ky, ox * 2 + kx);
                                }
                            }
                        }
                        assert!((out.at(n, co, oy, ox) - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let layer = ConvLayer::new(3, 4, 5, 1, &mut rng(5)).unwrap();
        let mut g = Graph::new();
        let wrong_c = g.constant(Tensor4::zeros(Dims::new(1, 2, 8, 8)).unwrap());
        assert!(matches!(layer.forward(&mut g, wrong_c), Err(Error::Shape { .. })));
        let too_small = g.constant(Tensor4::zeros(Dims::new(1, 3, 4, 4)).unwrap());
        assert!(matches!(layer.forward(&mut g, too_small), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv_is_linear_without_bias() {
        let layer = ConvLayer::new(2, 3, 3, 1, &mut rng(6)).unwrap();
        let x = Tensor4::uniform(Dims::new(1, 2, 6, 6), -1.0, 1.0, &mut rng(7)).unwrap();
        for a in [-2.5, 0.3, 7.0] {
            let mut g = Graph::new();
            let w = g.constant(layer.weight.clone());
            let xv = g.constant(x.clone());
            let ax = g.scale(xv, a).unwrap();
            let y = g.conv2d(xv, w, None, 1).unwrap();
            let ay = g.conv2d(ax, w, None, 1).unwrap();
            for (l, r) in g.value(ay).data().iter().zip(g.value(y).data()) {
                assert!((l - a * r).abs() < 1e-12 * (1.0 + r.abs() * a.abs()));
            }
            let aw = g.scale(w, a).unwrap();
            let yw = g.conv2d(xv, aw, None, 1).unwrap();
            for (l, r) in g.value(yw).data().iter().zip(g.value(y).data()) {
                assert!((l - a * r).abs() < 1e-12 * (1.0 + r.abs() * a.abs()));
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut r = rng(100 + seed);
            let x = Tensor4::uniform(Dims::new(2, 2, 6, 5), -1.0, 1.0, &mut r).unwrap();
            let w = Tensor4::uniform(Dims::new(3, 2, 3, 2), -1.0, 1.0, &mut r).unwrap();
            let b = Tensor4::uniform(Dims::new(1, 3, 1, 1), -1.0, 1.0, &mut r).unwrap();
            let proj = projection_weights(Dims::new(2, 3, 2, 2), &mut r).unwrap();
            let rep = check_gradients(&[x, w, b], 1e-5, |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 2)?;
                project(g, y, &proj)
            })
            .unwrap();
            assert!(rep.max_rel_error < 1e-4, "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn pool1_geometry_and_constant_input() {
        let mut g = Graph::new();
        let x = g.constant(Tensor4::zeros(Dims::new(1, 96, 59, 59)).unwrap());
        let y = maxpool_forward(&mut g, x, 3, 2).unwrap();
        assert_eq!(g.dims(y), Dims::new(1, 96, 29, 29));

        let c = g.constant(Tensor4::full(Dims::new(2, 2, 5, 5), 0.7).unwrap());
        let y = maxpool_forward(&mut g, c, 3, 1).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.7));
        assert!(maxpool_forward(&mut g, c, 6, 1).is_err());
    }

    #[test]
    fn maxpool_ties_route_to_first_position() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor4::full(Dims::new(1, 1, 2, 2), 1.0).unwrap().with_requires_grad(true));
        let y = g.max_pool(x, 2, 1).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let dims = Dims::new(2, 2, 5, 5);
            let x = separated_pool_input(dims, 2, 1, 1e-3, &mut rng(200 + seed)).unwrap();
            let proj = projection_weights(Dims::new(2, 2, 4, 4), &mut rng(300 + seed)).unwrap();
            let rep = check_gradients(&[x], 1e-5, |g, v| {
                let y = g.max_pool(v[0], 2, 1)?;
                project(g, y, &proj)
            })
            .unwrap();
            assert!(rep.max_rel_error < 1e-4, "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn batchnorm_training_normalizes_each_channel() {
        let mut bn = BatchNormLayer::new(3).unwrap();
        let x = Tensor4::uniform(Dims::new(4, 3, 5, 5), -3.0, 5.0, &mut rng(8)).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (y, _) = bn.forward(&mut g, xv, true).unwrap();
        let out = g.value(y);
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|n| out.channel(n, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
        assert!(bn.running_mean.iter().all(|m| *m != 0.0));
    }

    #[test]
    fn batchnorm_eval_with_unit_statistics_is_identity() {
        let mut bn = BatchNormLayer::new(2).unwrap();
        let x = Tensor4::uniform(Dims::new(1, 2, 3, 3), -1.0, 1.0, &mut rng(9)).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (y, _) = bn.forward(&mut g, xv, false).unwrap();
        for (a, b) in g.value(y).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5 * (1.0 + b.abs()));
        }
        assert_eq!(bn.running_mean, vec![0.0, 0.0]);
    }

    #[test]
    fn batchnorm_rejects_channel_mismatch() {
        let mut bn = BatchNormLayer::new(2).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor4::zeros(Dims::new(2, 3, 2, 2)).unwrap());
        assert!(matches!(bn.forward(&mut g, x, true), Err(Error::Shape { .. })));
        let single = g.constant(Tensor4::zeros(Dims::new(1, 2, 1, 1)).unwrap());
        assert!(bn.forward(&mut g, single, true).is_err());
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut r = rng(400 + seed);
            let dims = Dims::new(3, 2, 3, 3);
            let x = Tensor4::uniform(dims, -1.0, 1.0, &mut r).unwrap();
            let gamma = Tensor4::uniform(Dims::new(1, 2, 1, 1), 0.5, 1.5, &mut r).unwrap();
            let beta = Tensor4::uniform(Dims::new(1, 2, 1, 1), -0.5, 0.5, &mut r).unwrap();
            let proj = projection_weights(dims, &mut r).unwrap();
            let rep = check_gradients(&[x, gamma, beta], 1e-5, |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], BatchNormLayer::DEFAULT_EPS)?;
                project(g, y, &proj)
            })
            .unwrap();
            assert!(rep.max_rel_error < 1e-4, "seed {seed}: {rep:?}");
        }
    }
}
