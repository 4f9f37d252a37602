use serde::{Deserialize, Serialize};

use crate::error::SimError;

/// Unit-disk connectivity plus a log-distance power law for received-power samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadioModel {
    pub tx_power_w: f64,
    pub range_m: f64,
    pub path_loss_exponent: f64,
    pub reference_distance_m: f64,
    /// One-hop delivery latency.
    pub latency_s: f64,
}

impl Default for RadioModel {
    fn default() -> Self {
        RadioModel {
            tx_power_w: 0.1,
            range_m: 250.0,
            path_loss_exponent: 2.0,
            reference_distance_m: 1.0,
            latency_s: 0.001,
        }
    }
}

impl RadioModel {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.range_m > 0.0) {
            return Err(SimError::Config("radio.range_m must be > 0".into()));
        }
        if !(self.path_loss_exponent >= 2.0) {
            return Err(SimError::Config(
                "radio.path_loss_exponent must be >= 2".into(),
            ));
        }
        if !(self.reference_distance_m > 0.0) || !(self.tx_power_w > 0.0) {
            return Err(SimError::Config(
                "radio.tx_power_w and radio.reference_distance_m must be > 0".into(),
            ));
        }
        if !(self.latency_s > 0.0) {
            return Err(SimError::Config("radio.latency_s must be > 0".into()));
        }
        Ok(())
    }

    /// Link existence; the boundary is inclusive.
    pub fn in_range(&self, distance_sq: f64) -> bool {
        distance_sq <= self.range_m * self.range_m
    }

    pub fn received_power(&self, distance: f64) -> f64 {
        if distance < self.reference_distance_m {
            self.tx_power_w
        } else {
            self.tx_power_w * (self.reference_distance_m / distance).powf(self.path_loss_exponent)
        }
    }
}
