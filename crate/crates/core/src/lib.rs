pub mod checks;
pub mod data;
pub mod decode;
pub mod experiments;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod rng;
pub mod training;
