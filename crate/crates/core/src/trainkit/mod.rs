//! Task losses, metrics, the NSG-MoE model, its training loop and the
//! concatenation baseline.

pub mod baseline;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod run;
pub mod train;

pub use baseline::{baseline_concat_gcn, ConcatGcn};
pub use losses::{bce_link_loss, cross_entropy_nc, link_scores};
pub use metrics::{Metrics, Task};
pub use model::{ArchConfig, ModelGraph, NsgMoeModel};
pub use run::{evaluate_checkpoint, write_run};
pub use train::{fit, prepare_task, train, EpochRecord, NsgRunner, TaskConfig, TaskData, TrainReport};
