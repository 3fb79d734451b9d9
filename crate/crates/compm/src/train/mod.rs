//! Training and evaluation: optimizer, schedule, clipping, metrics, masked
//! pretraining, and the epoch loop.

mod metrics;
mod mlm;
mod optimizer;
mod schedule;
mod trainer;

pub use metrics::{evaluate, ClassScores, ConfusionMatrix, MetricsReport};
pub use mlm::{pretrain_pm, PretrainConfig, PretrainRecord};
pub use optimizer::{clip_gradients, AdamW, AdamWConfig, ClipReport};
pub use schedule::{lr_at, ScheduleConfig};
pub use trainer::{train, train_multi, EpochRecord, MultiRunRecord, TrainConfig, TrainRunRecord};
