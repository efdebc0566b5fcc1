//! JSON experiment configuration.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{EmbeddingConfig, PresetOptions};
use crate::scd::ScdConfig;
use crate::siamese::SiameseModel;
use crate::trainer::{stream_rng, PairSpec, Stream, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Table1,
    Desk,
}

impl Preset {
    pub fn embedding(self, opts: PresetOptions) -> EmbeddingConfig {
        match self {
            Preset::Table1 => EmbeddingConfig::table1(opts),
            Preset::Desk => EmbeddingConfig::desk(opts),
        }
    }

    /// Native (exemplar, search) input sizes.
    pub fn input_sizes(self) -> (usize, usize) {
        match self {
            Preset::Table1 => (127, 255),
            Preset::Desk => (32, 64),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Table1 => "table1",
            Preset::Desk => "desk",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSection {
    /// Named preset; exactly one of `preset` and `custom` must be set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom: Option<EmbeddingConfig>,
    /// Preset construction switches; ignored for custom stacks.
    #[serde(default)]
    pub options: PresetOptions,
}

impl EmbeddingSection {
    pub fn resolve(&self) -> Result<EmbeddingConfig> {
        match (&self.preset, &self.custom) {
            (Some(p), None) => Ok(p.embedding(self.options)),
            (None, Some(c)) => {
                c.validate()?;
                Ok(c.clone())
            }
            _ => Err(Error::config("embedding", "set exactly one of `preset` and `custom`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Metric rows written per epoch.
    pub metrics_per_epoch: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs/default"),
            metrics_per_epoch: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub embedding: EmbeddingSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub scd: ScdConfig,
    #[serde(default)]
    pub output: OutputSection,
}

impl ExperimentConfig {
    /// Desk-scale defaults: 3-layer embedding on 32/64 pixel pairs.
    pub fn desk() -> Self {
        ExperimentConfig {
            embedding: EmbeddingSection {
                preset: Some(Preset::Desk),
                custom: None,
                options: PresetOptions::default(),
            },
            train: TrainConfig {
                batch_size: 8,
                epochs: 10,
                samples_per_epoch: 200,
                lr_initial: 0.05,
                lr_final: 0.005,
                seed: 7,
                score_scale: 0.01,
                data: PairSpec::default(),
                ..TrainConfig::default()
            },
            scd: ScdConfig {
                layers: BTreeSet::from([2]),
                ..ScdConfig::default()
            },
            output: OutputSection {
                dir: PathBuf::from("runs/desk"),
                metrics_per_epoch: 1,
            },
        }
    }

    /// Full-size defaults on 127/255 pixel pairs.
    pub fn table1() -> Self {
        ExperimentConfig {
            embedding: EmbeddingSection {
                preset: Some(Preset::Table1),
                custom: None,
                options: PresetOptions::default(),
            },
            train: TrainConfig {
                data: PairSpec {
                    exemplar_size: 128,
                    search_size: 256,
                    target_size: 64,
                    center_step: 4,
                    ..PairSpec::default()
                },
                ..TrainConfig::default()
            },
            scd: ScdConfig::default(),
            output: OutputSection {
                dir: PathBuf::from("runs/table1"),
                metrics_per_epoch: 1,
            },
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Table1 => Self::table1(),
            Preset::Desk => Self::desk(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let emb = self.embedding.resolve()?;
        self.train.validate()?;
        self.scd.validate()?;
        if self.output.metrics_per_epoch == 0 || self.output.metrics_per_epoch > self.train.steps_per_epoch() {
            return Err(Error::config(
                "output.metrics_per_epoch",
                format!("must lie in 1..={} (steps per epoch)", self.train.steps_per_epoch()),
            ));
        }
        let convs = emb.conv_count();
        if let Some(bad) = self.scd.layers.iter().find(|l| **l > convs) {
            return Err(Error::config(
                "scd.layers",
                format!("layer {bad} does not exist; the embedding has {convs} conv layers"),
            ));
        }
        for &l in &self.scd.layers {
            if emb.conv_channels(l).unwrap_or(0) < 2 {
                return Err(Error::config("scd.layers", format!("layer {l} needs at least 2 channels")));
            }
        }
        let d = &self.train.data;
        if d.center_step != emb.total_stride() {
            return Err(Error::config(
                "train.data.center_step",
                format!("must equal the embedding's total stride {}", emb.total_stride()),
            ));
        }
        let (zh, zw, _) = emb.output_shape((d.exemplar_size, d.exemplar_size))?;
        let (xh, xw, _) = emb.output_shape((d.search_size, d.search_size))?;
        if xh < zh || xw < zw || xh - zh + 1 != d.positions() {
            return Err(Error::config(
                "train.data",
                format!(
                    "score map is {}x{} but the generator has {} target positions per axis",
                    xh.saturating_sub(zh) + 1,
                    xw.saturating_sub(zw) + 1,
                    d.positions()
                ),
            ));
        }
        Ok(())
    }

    /// Fresh model; its initial weights depend only on the embedding,
    /// the tapped layers and the seed.
    pub fn build_model(&self) -> Result<SiameseModel> {
        SiameseModel::new(
            self.embedding.resolve()?,
            self.scd.layers.clone(),
            &mut stream_rng(self.train.seed, Stream::Init),
        )
    }
}
