pub mod datagen;
pub mod estimators;
pub mod funcdraw;
pub mod harness;
pub mod mechanisms;
pub mod metrics;
pub mod polytope;
pub mod seed;
pub mod universe;
