//! Training loops, experiment presets reproducing the desk-scale protocols,
//! and result export.
//!
//! Every preset is a pure function of its [`ExperimentConfig`]: rerunning
//! with the same config writes byte-identical `metrics.csv`, `trainlog.csv`
//! and `report.json`. Wall times go to a separate `meta.json`.

mod config;
mod eval;
mod experiments;
mod export;
mod properties;
mod train;

pub use config::{
    apply_override, ExperimentConfig, ExperimentKind, LossKind, PropertyConfig, ToyConfig, TrainConfig,
};
pub use eval::{evaluate, output_stats, salient_channel, OutputStats};
pub use experiments::{
    run_alpha_ablation, run_cells, run_experiment, run_fidelity_sweep, run_image_cell, run_texture_metrics,
    run_toy_imbalance, CellResult, Confusion, ImageCell, ImageData, ToyReport, ToyRun, CELL_COLUMNS, CONFIDENCE,
    F_BETA_DROP, F_BETA_TOLERANCE,
};
pub use export::{cell, loss_curve_svg, Check, ExperimentOutcome, Table};
pub use properties::{
    bound_violations, cace_flip_invariance, discriminator_grid_search, kkt_residuals, loss_gradient_error,
    network_gradient_error, network_gradient_errors, one_hot_minimum, permutation_invariance, random_instance,
    run_property_checks, sparsity_run, LOSS_GRADIENT_TOLERANCE, NETWORK_GRADIENT_TOLERANCE,
};
pub use train::{image_net, item_loss_and_grad, predict, train, EvalItem, LogEntry, TrainItem, TrainLog};
