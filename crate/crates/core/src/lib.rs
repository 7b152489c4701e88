pub mod corpus;
pub mod eval;
pub mod model;
pub mod supervision;
pub mod synth;
pub mod tensor;
pub mod training;
