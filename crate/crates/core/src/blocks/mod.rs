//! Compute blocks built from margin-propagation nodes.

mod dac;
mod differential;
mod multiplier;
mod relu;

pub use dac::{
    dac_convert, dac_fit_offsets, dac_fit_offsets_with, dac_rebase, ideal_log_curve,
    reference_log_curves, Dac, DacConfig, DacFit, DacFitOptions, LogCurves,
};
pub use differential::{to_differential, DifferentialSignal};
pub use multiplier::{
    calibrated_error, mac, multiply, multiply_calibrate, GainMap, Multiplier, MultiplierConfig,
};
pub use relu::{soft_relu, SoftRelu};
