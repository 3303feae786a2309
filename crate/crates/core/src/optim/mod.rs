//! SGD with momentum, the warmup + cyclic cosine learning-rate schedule and
//! EMA weight averaging.

mod ema;
mod schedule;
mod sgd;

pub use ema::Ema;
pub use schedule::{lr_at, ScheduleConfig};
pub use sgd::{Sgd, SgdConfig};
