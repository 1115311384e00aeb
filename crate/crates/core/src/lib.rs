//! Partitioned coupled neural operator for gas pipeline networks: input
//! encoding, datasets, model variants, physics losses and training.

pub mod container;
pub mod dataset;
pub mod encoding;
pub mod error;
pub mod losses;
pub mod model;
pub mod trainer;

pub use container::{read_container, write_container, Record};
pub use dataset::{generate, read_dataset, write_dataset, DatasetManifest, GenerationConfig, Sample};
pub use encoding::{encode_inputs, ChannelLayout, InputEncoding, NormStats};
pub use error::{CoreError, Result};
pub use losses::{data_loss, pde_loss, LossContext, LossReport, LossWeights};
pub use model::{
    align_a1, build_variant, forward, init_params, param_count, plan_alignment, unalign_a2, AlignmentPlan,
    OutputAffine, PcnoConfig, Prediction, Variant,
};
pub use trainer::{evaluate, predict, relative_l2, train, Checkpoint, EvalReport, TrainConfig, TrainIo, TrainOutcome};
