use serde::{Deserialize, Serialize};

use crate::error::{Result, SacError};

/// Signed value carried as two nonnegative rail currents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifferentialSignal {
    pub plus: f64,
    pub minus: f64,
}

impl DifferentialSignal {
    pub fn value(&self) -> f64 {
        self.plus - self.minus
    }
}

/// Symmetric split around `bias`.
pub fn to_differential(value: f64, bias: f64) -> Result<DifferentialSignal> {
    if !(bias > 0.0) || !value.is_finite() || value.abs() > 2.0 * bias {
        return Err(SacError::RangeViolation {
            term: "differential split".into(),
            value,
        });
    }
    Ok(DifferentialSignal {
        plus: bias + 0.5 * value,
        minus: bias - 0.5 * value,
    })
}
