pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod linalg;
pub mod mtt;
pub mod train;
pub mod trees;
pub mod verify;

pub use autodiff::{Tape, Var};
pub use corpus::{Example, SentencePair, TokenizedDocument, Vocabulary};
pub use encoders::{AttentionMode, Level, LevelConfig, Model, ModelConfig, Pooling, Task};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use mtt::{ScoreSet, TreeMarginals};
pub use trees::{DependencyTree, TreeStats};
