// SPDX-License-Identifier: Apache-2.0

//! Layer-by-layer comparison of the pipelined emulator against the
//! brute-force references.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lrn::{lrn_apply, PwlTable};
use crate::model::{AcceleratorConfig, FeatureMap, LayerDescriptor, LayerWeights};
use crate::reference::{
    conv_reference, fc_reference, lrn_reference, max_normalized_error, max_relative_error, pool_reference,
};
use crate::runtime::{execute_layer, RuntimeOptions};

pub const CONV_TOLERANCE: f64 = 1e-5;
pub const LRN_TOLERANCE: f64 = 5e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCheck {
    pub layer: usize,
    /// `conv`, `fc` or `lrn`.
    pub stage: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<LayerCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,stage,max_error,tolerance,pass\n");
        for c in &self.checks {
            writeln!(s, "{},{},{:e},{:e},{}", c.layer, c.stage, c.max_error, c.tolerance, c.pass).unwrap();
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:>5}  {:>5}  {:>12}  {:>10}  {}\n", "layer", "stage", "max_error", "tolerance", "result");
        for c in &self.checks {
            writeln!(
                s,
                "{:>5}  {:>5}  {:>12.3e}  {:>10.1e}  {}",
                c.layer,
                c.stage,
                c.max_error,
                c.tolerance,
                if c.pass { "ok" } else { "FAIL" }
            )
            .unwrap();
        }
        s
    }
}

fn check(layer: usize, stage: &str, max_error: f64, tolerance: f64) -> LayerCheck {
    LayerCheck {
        layer,
        stage: stage.into(),
        max_error,
        tolerance,
        pass: max_error <= tolerance,
    }
}

/// Runs each layer on the emulator's own input for that layer, so errors do
/// not compound across layers.
pub fn validate_run(
    net: &[LayerDescriptor],
    weights: &[LayerWeights],
    input: &FeatureMap,
    cfg: &AcceleratorConfig,
    opts: &RuntimeOptions,
) -> Result<ValidationReport> {
    let mut checks = Vec::new();
    let mut current = input.clone();
    for (i, (layer, w)) in net.iter().zip(weights).enumerate() {
        let pipe_layer = LayerDescriptor {
            lrn: None,
            ..layer.clone()
        };
        let (out, _) = execute_layer(&pipe_layer, i, &current, w, cfg, opts)?;
        let dense_in = current.to_dense();
        let dense_w = w.weights.to_dense();
        let mut reference = if layer.is_fc() {
            fc_reference(&dense_in, &dense_w, &w.bias, layer.relu)
        } else {
            conv_reference(layer, &dense_in, &dense_w, &w.bias)
        };
        if let Some(p) = layer.pool {
            reference = pool_reference(&reference, &p);
        }
        let stage = if layer.is_fc() { "fc" } else { "conv" };
        checks.push(check(i, stage, max_normalized_error(&out.to_dense(), &reference), CONV_TOLERANCE));
        current = out;
        if let Some(lrn) = layer.lrn {
            let table = PwlTable::for_lrn(cfg.lrn_n, &lrn)?;
            let normalized = lrn_apply(&current, &lrn, &table, opts.threads.max(1))?;
            let exact = lrn_reference(current.shape(), &current.to_dense(), &lrn);
            checks.push(check(i, "lrn", max_relative_error(&normalized.to_dense(), &exact), LRN_TOLERANCE));
            current = normalized;
        }
    }
    Ok(ValidationReport { checks })
}
