pub mod chunking;
pub mod cli;
pub mod corpus;
pub mod evaluation;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod stats;
pub mod tokenizer;
pub mod training;
