//! Behavioral simulator for shape-based analog computing.
//!
//! A single primitive, the margin-propagation node, is solved for a chosen
//! transistor law. Compute blocks (differential signals, logarithmic DAC,
//! four-quadrant multiplier, soft ReLU) are compositions of that node, and
//! small feed-forward networks are built from the blocks.

pub mod blocks;
pub mod design;
pub mod device;
pub mod error;
pub mod experiment;
pub mod gmp;
pub mod network;
pub mod optim;
pub mod root;

pub use blocks::{
    calibrated_error, dac_convert, dac_fit_offsets, dac_fit_offsets_with, dac_rebase, ideal_log_curve, mac,
    multiply, multiply_calibrate, soft_relu, to_differential, Dac, DacConfig, DacFit, DacFitOptions,
    DifferentialSignal, GainMap, Multiplier, MultiplierConfig, SoftRelu,
};
pub use design::SplineDesign;
pub use device::{make_model, DiodeModel, Law, Regime, TransistorModel, DEFAULT_TEMPERATURE};
pub use error::{Result, SacError};
pub use experiment::{
    curve_csv, emit_curve_csv, format_value, invariance_report, read_curve_csv, round_sig, run_experiment,
    Check, CurveRecord, ExperimentConfig, ExperimentKind, InvarianceSummary, Report,
};
pub use gmp::{jacobian, proto_shape, solve_node, solve_rectifier_closed_form, sweep, ProtoShape, SacNodeConfig};
pub use network::{
    evaluate, finish, fit, fit_continuous, inject_mismatch, make_sine_dataset, train, train_reference, Dataset,
    Engine, Evaluation, FitRecipe, NetworkSpec, ReferenceNet, TrainHyper, TrainedNetwork,
};
