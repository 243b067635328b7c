pub mod attack;
pub mod data;
pub mod distill;
pub mod dtw;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod teacher;
pub mod tensor;

pub use data::{LabeledDataset, MultivariateSeries, Predictor};
pub use error::{Error, Result};
pub use teacher::{AttackMode, Teacher, TeacherKind};
pub use tensor::{Graph, Tensor, Var};
