use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VelvetError};
use crate::nn::scalar_f64;

/// Component names in logging order.
pub const COMPONENTS: [&str; 9] = [
    "vis_inp", "vis_rot", "vis_con", "lan_mlm", "cm_top", "cm_mid", "cm_bot", "mm_match", "mm_mlm",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossFlags(pub [bool; 9]);

impl LossFlags {
    pub fn all() -> Self {
        Self([true; 9])
    }

    pub fn only(names: &[&str]) -> Self {
        Self(std::array::from_fn(|i| names.contains(&COMPONENTS[i])))
    }

    pub fn get(&self, name: &str) -> bool {
        COMPONENTS.iter().position(|&c| c == name).map(|i| self.0[i]).unwrap_or(false)
    }

    pub fn enabled_names(&self) -> Vec<&'static str> {
        COMPONENTS.iter().zip(self.0).filter(|(_, on)| *on).map(|(n, _)| *n).collect()
    }

    pub fn any_vis(&self) -> bool {
        self.0[0] || self.0[1] || self.0[2]
    }

    pub fn any_cm(&self) -> bool {
        self.0[4] || self.0[5] || self.0[6]
    }
}

/// Per-component loss tensors as produced by a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Components(pub [Option<Tensor>; 9]);

impl Components {
    pub fn set(&mut self, name: &str, t: Tensor) {
        let i = COMPONENTS.iter().position(|&c| c == name).expect("known component");
        self.0[i] = Some(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        COMPONENTS.iter().position(|&c| c == name).and_then(|i| self.0[i].as_ref())
    }
}

/// Scalar loss values for one step. Disabled components are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub values: [Option<f64>; 9],
    pub total: f64,
}

impl LossBundle {
    pub fn get(&self, name: &str) -> Option<f64> {
        COMPONENTS.iter().position(|&c| c == name).and_then(|i| self.values[i])
    }

    /// Weighted sum of the present components, recomputed from the logged values.
    pub fn resum(&self, weights: &[f64; 9]) -> f64 {
        self.values.iter().zip(weights).filter_map(|(v, w)| v.map(|v| v * w)).sum()
    }

    pub fn to_json(&self) -> String {
        let map: serde_json::Map<String, serde_json::Value> = COMPONENTS
            .iter()
            .zip(self.values)
            .map(|(n, v)| (n.to_string(), v.map_or(serde_json::Value::Null, |v| serde_json::json!(v))))
            .chain([("total".to_string(), serde_json::json!(self.total))])
            .collect();
        serde_json::Value::Object(map).to_string()
    }
}

/// Weighted sum of the enabled components. A component that is enabled but
/// missing is an error; present-but-disabled components are ignored.
pub fn composite_loss(
    parts: &Components,
    flags: &LossFlags,
    weights: &[f64; 9],
) -> Result<(Tensor, LossBundle)> {
    let mut total: Option<Tensor> = None;
    let mut values = [None; 9];
    for i in 0..9 {
        if !flags.0[i] {
            continue;
        }
        let t = parts.0[i].as_ref().ok_or(VelvetError::MissingComponent(COMPONENTS[i]))?;
        values[i] = Some(scalar_f64(t)?);
        let w = (t * weights[i])?;
        total = Some(match total {
            None => w,
            Some(acc) => (acc + w)?,
        });
    }
    let total = total.ok_or_else(|| VelvetError::Config("no loss component enabled".into()))?;
    let bundle = LossBundle { values, total: scalar_f64(&total)? };
    Ok((total, bundle))
}
