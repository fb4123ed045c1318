use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::checkpoint::Stage;

/// One training progress record, emitted as a JSON line by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Progress {
    pub stage: Stage,
    pub step: u64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

impl Progress {
    pub fn new(stage: Stage, step: u64, loss: f64) -> Self {
        Self {
            stage,
            step,
            loss,
            psnr: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("progress serializes")
    }
}

pub type Observer<'a> = &'a mut dyn FnMut(&Progress);

/// Observer that drops every record.
pub fn ignore(_: &Progress) {}

/// Per-step RNG seed, so any step can be replayed from its index alone.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
