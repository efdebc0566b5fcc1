//! Layer descriptions, the shipped embedding presets, and shape inference.

use serde::{Deserialize, Serialize};

use crate::autograd::valid_extent;
use crate::error::{Error, Result};

/// One layer of an embedding stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerDesc {
    Conv {
        kernel: usize,
        stride: usize,
        in_channels: usize,
        out_channels: usize,
    },
    Pool {
        kernel: usize,
        stride: usize,
    },
    Bn {
        channels: usize,
    },
    Relu,
}

/// Where activations follow the batch norms of a preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PresetOptions {
    /// Insert a ReLU after every batch norm.
    pub relu_after_bn: bool,
    /// Give the last conv layer its own batch norm (and ReLU, if enabled).
    pub final_bn: bool,
}

impl Default for PresetOptions {
    fn default() -> Self {
        PresetOptions {
            relu_after_bn: true,
            final_bn: false,
        }
    }
}

/// An ordered embedding stack over images with `input_channels` channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub input_channels: usize,
    pub layers: Vec<LayerDesc>,
}

/// Activation size after one conv or pool layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ShapeRow {
    pub name: String,
    pub kernel: usize,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

/// (name, kernel, stride, out channels, followed by a pool of (kernel, stride)).
type ConvSpec = (usize, usize, usize, Option<(usize, usize)>);

impl EmbeddingConfig {
    /// The five-conv, two-pool stack used by the baseline tracker:
    /// 127x127 exemplars embed to 17x17x32, 255x255 searches to 49x49x32.
    pub fn table1(opts: PresetOptions) -> Self {
        const CONVS: [ConvSpec; 5] = [
            (11, 2, 96, Some((3, 2))),
            (5, 1, 256, Some((3, 1))),
            (3, 1, 384, None),
            (3, 1, 384, None),
            (3, 1, 32, None),
        ];
        Self::from_convs(3, &CONVS, opts)
    }

    /// Three conv layers, small enough to train on one CPU core in minutes.
    /// 32x32 exemplars embed to 10x10x16 and 64x64 searches to 26x26x16.
    pub fn desk(opts: PresetOptions) -> Self {
        const CONVS: [ConvSpec; 3] = [(5, 2, 8, None), (3, 1, 16, None), (3, 1, 16, None)];
        Self::from_convs(3, &CONVS, opts)
    }

    fn from_convs(input_channels: usize, convs: &[ConvSpec], opts: PresetOptions) -> Self {
        let mut layers = Vec::new();
        let mut c_in = input_channels;
        for (i, &(kernel, stride, c_out, pool)) in convs.iter().enumerate() {
            layers.push(LayerDesc::Conv {
                kernel,
                stride,
                in_channels: c_in,
                out_channels: c_out,
            });
            let last = i + 1 == convs.len();
            if !last || opts.final_bn {
                layers.push(LayerDesc::Bn { channels: c_out });
                if opts.relu_after_bn {
                    layers.push(LayerDesc::Relu);
                }
            }
            if let Some((kernel, stride)) = pool {
                layers.push(LayerDesc::Pool { kernel, stride });
            }
            c_in = c_out;
        }
        EmbeddingConfig {
            input_channels,
            layers,
        }
    }

    /// Human-readable names: conv1.., pool1.., bn1.., relu1.., numbered per kind.
    pub fn layer_names(&self) -> Vec<String> {
        let mut counts = [0usize; 4];
        self.layers
            .iter()
            .map(|l| {
                let (slot, stem) = match l {
                    LayerDesc::Conv { .. } => (0, "conv"),
                    LayerDesc::Pool { .. } => (1, "pool"),
                    LayerDesc::Bn { .. } => (2, "bn"),
                    LayerDesc::Relu => (3, "relu"),
                };
                counts[slot] += 1;
                format!("{stem}{}", counts[slot])
            })
            .collect()
    }

    /// Number of conv layers. SCD layer indices are 1-based conv ordinals.
    pub fn conv_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerDesc::Conv { .. }))
            .count()
    }

    /// Output channels of the `ordinal`-th conv layer (1-based).
    pub fn conv_channels(&self, ordinal: usize) -> Option<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerDesc::Conv { out_channels, .. } => Some(*out_channels),
                _ => None,
            })
            .nth(ordinal.checked_sub(1)?)
    }

    /// Total stride of the stack.
    pub fn total_stride(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerDesc::Conv { stride, .. } | LayerDesc::Pool { stride, .. } => *stride,
                _ => 1,
            })
            .product()
    }

    /// Checks that channel counts chain and every kernel and stride is positive.
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::config("embedding.input_channels", "must be >= 1"));
        }
        if self.conv_count() == 0 {
            return Err(Error::config("embedding.layers", "needs at least one conv layer"));
        }
        let names = self.layer_names();
        let mut c = self.input_channels;
        for (layer, name) in self.layers.iter().zip(&names) {
            match *layer {
                LayerDesc::Conv {
                    kernel,
                    stride,
                    in_channels,
                    out_channels,
                } => {
                    if kernel == 0 || stride == 0 || out_channels == 0 {
                        return Err(Error::shape(
                            "embedding",
                            format!("{name}: kernel, stride and out_channels must be >= 1"),
                        ));
                    }
                    if in_channels != c {
                        return Err(Error::shape(
                            "embedding",
                            format!("{name}: expects {in_channels} input channels, receives {c}"),
                        ));
                    }
                    c = out_channels;
                }
                LayerDesc::Pool { kernel, stride } => {
                    if kernel == 0 || stride == 0 {
                        return Err(Error::shape(
                            "embedding",
                            format!("{name}: kernel and stride must be >= 1"),
                        ));
                    }
                }
                LayerDesc::Bn { channels } => {
                    if channels != c {
                        return Err(Error::shape(
                            "embedding",
                            format!("{name}: normalizes {channels} channels, receives {c}"),
                        ));
                    }
                }
                LayerDesc::Relu => {}
            }
        }
        Ok(())
    }

    /// Activation sizes after every conv and pool layer for an input of
    /// `input_hw`. Batch norm and ReLU preserve shape and are not listed.
    pub fn infer_shapes(&self, input_hw: (usize, usize)) -> Result<Vec<ShapeRow>> {
        self.validate()?;
        let names = self.layer_names();
        let (mut h, mut w, mut c) = (input_hw.0, input_hw.1, self.input_channels);
        let mut rows = Vec::new();
        for (layer, name) in self.layers.iter().zip(names) {
            let (kernel, stride, c_out) = match *layer {
                LayerDesc::Conv {
                    kernel,
                    stride,
                    out_channels,
                    ..
                } => (kernel, stride, out_channels),
                LayerDesc::Pool { kernel, stride } => (kernel, stride, c),
                _ => continue,
            };
            let (Some(nh), Some(nw)) = (valid_extent(h, kernel, stride), valid_extent(w, kernel, stride)) else {
                return Err(Error::shape(
                    "infer_shapes",
                    format!("{name}: {kernel}x{kernel} window at stride {stride} does not fit {h}x{w}"),
                ));
            };
            (h, w, c) = (nh, nw, c_out);
            rows.push(ShapeRow {
                name,
                kernel,
                stride,
                h,
                w,
                c,
            });
        }
        Ok(rows)
    }

    /// Final (h, w, c) for an input of `input_hw`.
    pub fn output_shape(&self, input_hw: (usize, usize)) -> Result<(usize, usize, usize)> {
        let rows = self.infer_shapes(input_hw)?;
        let last = rows.last().expect("validated stacks have a conv layer");
        Ok((last.h, last.w, last.c))
    }
}
