pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod linalg;
pub mod retrieval;
pub mod trainer;
pub mod provider;
pub mod seed;
pub mod synthesis;
pub mod desk;
pub mod harness;
