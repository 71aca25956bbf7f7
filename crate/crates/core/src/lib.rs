pub mod diffkit;
pub mod encoder;
pub mod evalkit;
pub mod experiment;
pub mod langsim;
pub mod mining;
pub mod objectives;
pub mod rng;
pub mod trainer;
