//! On-disk formats and synthetic data.

pub mod netpbm;
pub mod sequence;
pub mod synth;

pub use sequence::{list_sequences, parse_gt_line, Sequence, SequenceDir};
