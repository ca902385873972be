//! Configuration, synthetic tasks, training, checkpoints and reports.

pub mod checkpoint;
pub mod config;
pub mod dialog;
pub mod fusion_toy;
pub mod instruct;
pub mod multiview;
pub mod records;
pub mod run;
pub mod sweep;
pub mod train;
