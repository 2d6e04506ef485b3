//! Run configuration files (TOML).
//!
//! ```toml
//! output = "runs/toy"
//!
//! [backbone]
//! dim = 16
//! depth = 2
//! heads = 2
//! patch = 4
//! image_size = 16
//! in_channels = 3
//! num_classes = 4
//! seed = 7
//!
//! [[tuners]]
//! kind = "res-attn"      # res-attn | prefix | prompt | adapter
//! op = "mha"             # mha | ffn | block
//! blocks = "all"         # or a list such as [0, 1]
//! rank = 4
//! heads = 4
//!
//! [train]
//! lr = 0.03
//! epochs = 40
//!
//! [data]
//! num_classes = 4
//! image_size = 16
//! size = 240
//! train_fraction = 0.8
//! test_fraction = 0.2
//! ```
//!
//! Unknown keys anywhere are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, ModelConfig, ModelGraph};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::training::TrainConfig;
use crate::tuners::{AttachOp, AttachSpec, TunerConfig, TunerKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Blocks {
    Keyword(String),
    List(Vec<usize>),
}

impl Default for Blocks {
    fn default() -> Self {
        Blocks::Keyword("all".into())
    }
}

/// One `[[tuners]]` entry; expands to one attachment per listed block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TunerEntry {
    pub kind: TunerKind,
    pub op: AttachOp,
    #[serde(default)]
    pub blocks: Blocks,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qkv_bias: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attn_drop: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proj_drop: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bottleneck: Option<usize>,
}

impl TunerEntry {
    pub fn new(kind: TunerKind, op: AttachOp) -> Self {
        TunerEntry {
            kind,
            op,
            blocks: Blocks::default(),
            rank: None,
            heads: None,
            qkv_bias: None,
            attn_drop: None,
            proj_drop: None,
            length: None,
            bottleneck: None,
        }
    }

    pub fn tuner_config(&self, index: usize) -> Result<TunerConfig> {
        let set: [(&str, bool); 7] = [
            ("rank", self.rank.is_some()),
            ("heads", self.heads.is_some()),
            ("qkv_bias", self.qkv_bias.is_some()),
            ("attn_drop", self.attn_drop.is_some()),
            ("proj_drop", self.proj_drop.is_some()),
            ("length", self.length.is_some()),
            ("bottleneck", self.bottleneck.is_some()),
        ];
        let allowed: &[&str] = match self.kind {
            TunerKind::ResAttn => &["rank", "heads", "qkv_bias", "attn_drop", "proj_drop"],
            TunerKind::Prefix | TunerKind::Prompt => &["length"],
            TunerKind::Adapter => &["bottleneck"],
        };
        if let Some((key, _)) = set.iter().find(|(k, on)| *on && !allowed.contains(k)) {
            return Err(Error::Config(format!(
                "tuners[{index}]: key `{key}` is not valid for kind {}",
                self.kind.as_str()
            )));
        }
        let mut tc = TunerConfig::default_for(self.kind);
        match &mut tc {
            TunerConfig::ResAttn {
                rank,
                heads,
                qkv_bias,
                attn_drop,
                proj_drop,
            } => {
                *rank = self.rank.unwrap_or(*rank);
                *heads = self.heads.unwrap_or(*heads);
                *qkv_bias = self.qkv_bias.unwrap_or(*qkv_bias);
                *attn_drop = self.attn_drop.unwrap_or(*attn_drop);
                *proj_drop = self.proj_drop.unwrap_or(*proj_drop);
            }
            TunerConfig::Prefix { length } | TunerConfig::Prompt { length } => {
                *length = self.length.unwrap_or(*length);
            }
            TunerConfig::Adapter { bottleneck } => *bottleneck = self.bottleneck.unwrap_or(*bottleneck),
        }
        Ok(tc)
    }

    pub fn to_specs(&self, index: usize, depth: usize) -> Result<Vec<AttachSpec>> {
        let tc = self.tuner_config(index)?;
        let blocks: Vec<usize> = match &self.blocks {
            Blocks::Keyword(k) if k == "all" => (0..depth).collect(),
            Blocks::Keyword(k) => {
                return Err(Error::Config(format!(
                    "tuners[{index}]: blocks = \"{k}\" (expected \"all\" or a list of indices)"
                )))
            }
            Blocks::List(v) => v.clone(),
        };
        Ok(blocks.into_iter().map(|b| AttachSpec::new(b, self.op, tc.clone())).collect())
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub tuners: Vec<TunerEntry>,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DatasetSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        let b = &self.backbone;
        let d = &self.data;
        if d.num_classes != b.num_classes {
            return Err(Error::Config(format!(
                "data.num_classes {} differs from backbone.num_classes {}",
                d.num_classes, b.num_classes
            )));
        }
        if d.image_size != b.image_size || d.channels != b.in_channels {
            return Err(Error::Config(format!(
                "data images {}×{}×{} do not match backbone {}×{}×{}",
                d.channels, d.image_size, d.image_size, b.in_channels, b.image_size, b.image_size
            )));
        }
        ModelGraph::layout(&self.model_config()?)?;
        Ok(())
    }

    pub fn attach_specs(&self) -> Result<Vec<AttachSpec>> {
        let mut out = Vec::new();
        for (i, e) in self.tuners.iter().enumerate() {
            out.extend(e.to_specs(i, self.backbone.depth)?);
        }
        Ok(out)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            backbone: self.backbone.clone(),
            tuners: self.attach_specs()?,
        })
    }
}
