//! Synthetic benchmark, training loop, evaluation protocol and ablations.

mod eval;
mod model;
mod pipeline;
mod synth;
mod train;

pub use eval::{
    chunk_ranges, dice_slice, dice_volume, evaluate_model, evaluate_volume, mean_dice, miou, read_metrics, support_slices,
    write_metrics, MetricsRow, Volume, VolumeEval,
};
pub use model::{streams, AblationFlags, Model, ModelShape, ModelVars};
pub use pipeline::{predict, run_episode, EpisodeOutput, Losses};
pub use synth::{generate_dataset, manifest_path, synthesize, ClassSpec, Dataset, Scan, ShapeFamily, Split, SyntheticTaskSpec};
pub use train::{ablate, train, variant_mean, AblationRun, TrainConfig, TrainSummary, Trainer};
