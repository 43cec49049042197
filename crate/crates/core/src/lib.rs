//! Semi-supervised referring segmentation of lung lesions.
//!
//! The crate covers the whole pipeline: a rule-based parser for anatomical
//! position phrases, alignment-preserving image/text augmentation, a small
//! text-conditioned segmentation network with hand-written backpropagation,
//! the training objectives, a teacher-student trainer and a synthetic
//! dataset generator with exact ground truth.

pub mod augment;
pub mod error;
pub mod grid;
pub mod model;
pub mod objectives;
pub mod postext;
pub mod rng;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::{Grid, GridRole};
pub use postext::{parse_positions, PositionLabel, PositionSpan, ReferringExpression};
