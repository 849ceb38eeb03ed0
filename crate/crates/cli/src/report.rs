//! JSON report envelope shared by all commands.

use std::path::Path;

use polarity::numerics::format_sig;
use polarity::GroundState;
use serde::Serialize;
use serde_json::Value;

use crate::error::CliError;

/// Significant digits of every printed or reported number.
pub const DIGITS: usize = 6;

pub fn sig(v: f64) -> String {
    format_sig(v, DIGITS)
}

#[derive(Debug, Clone, Serialize)]
pub struct GroundStateInfo {
    pub alpha: f64,
    pub half_width: f64,
    pub step: f64,
    pub sigma0_at_0: f64,
    pub l1_norm: f64,
}

impl GroundStateInfo {
    pub fn of(gs: &GroundState) -> Self {
        GroundStateInfo {
            alpha: gs.alpha(),
            half_width: gs.half_width(),
            step: gs.grid_step(),
            sigma0_at_0: gs.eval(0.0),
            l1_norm: gs.l1_norm(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Report<'a, C: Serialize, R: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub config: &'a C,
    pub ground_state: GroundStateInfo,
    pub result: &'a R,
}

impl<C: Serialize, R: Serialize> Report<'_, C, R> {
    pub fn to_json(&self) -> Result<String, CliError> {
        let mut value = serde_json::to_value(self).map_err(|e| CliError::Io(format!("serializing report: {e}")))?;
        round_numbers(&mut value);
        serde_json::to_string_pretty(&value).map_err(|e| CliError::Io(format!("serializing report: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| CliError::io(path, e))
    }
}

/// Rounds every non-integer number to [`DIGITS`] significant digits.
fn round_numbers(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().unwrap_or(f64::NAN);
            if let Some(r) = sig(x).parse::<f64>().ok().and_then(serde_json::Number::from_f64) {
                *n = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_numbers),
        Value::Object(map) => map.values_mut().for_each(round_numbers),
        _ => {}
    }
}
