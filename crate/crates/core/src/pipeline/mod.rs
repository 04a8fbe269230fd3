//! End-to-end run: data, three branches, fusion templates, metrics,
//! reports and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod report;
pub mod train;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::capsnet::CapsNetClassifier;
use crate::classifier::Classifier;
use crate::cnn::CnnClassifier;
use crate::error::Result;
use crate::vit::VitClassifier;

pub use checkpoint::{load_artifacts, save_artifacts, Checkpoint, Metadata};
pub use config::RunConfig;
pub use data::{ingest_dataset, split, synth_generate, Dataset, Domain};
pub use eval::{evaluate, Confusion, Metrics};
pub use report::{write_report, RunReport};
pub use train::{prepare_data, train_all, Artifacts, CurvePoint, Prepared};

/// A trained branch behind a trait object.
pub type Model = Box<dyn Classifier<f32> + Send + Sync>;

/// The three classifiers, in decision-profile row order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Vit,
    Capsnet,
    Cnn,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Vit, Branch::Capsnet, Branch::Cnn];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Vit => "vit",
            Branch::Capsnet => "capsnet",
            Branch::Cnn => "cnn",
        }
    }

    /// Whether this branch consumes boosted source-domain weights.
    pub fn uses_transfer(self) -> bool {
        self != Branch::Cnn
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }

    /// Fresh, untrained model for this branch.
    pub fn build(self, cfg: &RunConfig, seed: u64) -> Result<Model> {
        let mut model: Model = match self {
            Branch::Vit => Box::new(VitClassifier::<f32>::new(&cfg.vit, seed)?),
            Branch::Capsnet => Box::new(CapsNetClassifier::<f32>::new(&cfg.capsnet, seed)?),
            Branch::Cnn => Box::new(CnnClassifier::<f32>::new(&cfg.cnn, seed)?),
        };
        if cfg.train.freeze_backbone {
            model.params_mut().set_trainable_prefix("backbone.", false);
        }
        Ok(model)
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Independent seed for one purpose of a run (splitmix64 mixing).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    mix(seed ^ mix(tag))
}
