//! Hyperparameter presets.
//!
//! `Scale::Full` carries the tuned settings for the three public benchmarks;
//! `Scale::Desk` keeps batch size and learning rate but caps the dimension so a
//! run fits on a laptop CPU.

use serde::{Deserialize, Serialize};

use crate::error::{KgError, Result};
use crate::model::ModelKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dataset {
    #[serde(rename = "WN18RR")]
    Wn18rr,
    #[serde(rename = "FB15K237")]
    Fb15k237,
    #[serde(rename = "YAGO3-10")]
    Yago3_10,
}

impl std::str::FromStr for Dataset {
    type Err = KgError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace(['-', '_'], "").as_str() {
            "WN18RR" => Ok(Dataset::Wn18rr),
            "FB15K237" => Ok(Dataset::Fb15k237),
            "YAGO310" => Ok(Dataset::Yago3_10),
            _ => Err(KgError::Config(format!("unknown dataset {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Full,
    Desk,
}

pub const DESK_MAX_DIM: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub model: ModelKind,
    pub dataset: Dataset,
    pub dim: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

pub fn preset(model: ModelKind, dataset: Dataset, scale: Scale) -> Result<Preset> {
    use Dataset::*;
    use ModelKind::*;
    let (dim, batch_size, learning_rate) = match (model, dataset) {
        (Cp, Wn18rr) => (2000, 100, 0.1),
        (Cp, Fb15k237) => (2000, 100, 0.05),
        (Cp, Yago3_10) => (2000, 500, 0.1),
        (ComplEx, Wn18rr) => (2000, 200, 0.05),
        (ComplEx, Fb15k237) => (2000, 200, 0.1),
        (ComplEx, Yago3_10) => (2000, 1000, 0.05),
        (Rescal, Wn18rr) => (512, 400, 0.1),
        (Rescal, Fb15k237) => (512, 400, 0.1),
        (Rescal, Yago3_10) => (512, 1000, 0.05),
        (RotatE, Wn18rr) => (400, 100, 0.1),
        (RotatE, Fb15k237) => (400, 100, 0.05),
        (RotatE, Yago3_10) => (400, 500, 0.05),
        _ => {
            return Err(KgError::Config(format!("no preset for {model} on {dataset:?}")));
        }
    };
    let dim = match scale {
        Scale::Full => dim,
        Scale::Desk if model == Rescal => 64,
        Scale::Desk => DESK_MAX_DIM,
    };
    Ok(Preset {
        model,
        dataset,
        dim,
        batch_size,
        learning_rate,
    })
}
