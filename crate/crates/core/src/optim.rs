//! Training helpers shared by the two learned models.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use unitts_nn::Float;

/// Learning-rate multiplier as a function of optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear ramp over the first `warmup` fraction of steps, then a cosine
    /// decay to zero at the last step.
    WarmupCosine { warmup: f64 },
}

impl LrSchedule {
    /// Multiplier for step `step` (0-based) out of `total`.
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::WarmupCosine { warmup } => {
                let total = total.max(1) as f64;
                let t = step as f64 + 1.0;
                let ramp = (warmup * total).max(1.0);
                if t <= ramp {
                    t / ramp
                } else {
                    0.5 * (1.0 + (PI * (t - ramp) / (total - ramp + 1.0)).cos())
                }
            }
        }
    }
}

/// Sum per-example gradients into `acc`.
pub(crate) fn accumulate<T: Float>(
    acc: &mut Option<BTreeMap<String, Array2<T>>>,
    g: BTreeMap<String, Array2<T>>,
) {
    match acc {
        None => *acc = Some(g),
        Some(a) => {
            for (name, v) in g {
                *a.get_mut(&name).expect("same parameter set") += &v;
            }
        }
    }
}
