//! Compositional neural module networks trained with curriculum schedules
//! on synthetic scene-graph data.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] / [`tape`]: dense f64 math and reverse-mode autodiff.
//! * [`dsl`]: the typed program language (module calls, parsing, printing).
//! * [`registry`] / [`modules`]: shared parameter layers and the forward
//!   formula of every module kind.
//! * [`executor`]: runs a program over scene features and attaches losses.
//! * [`synth`]: synthetic scenes, a symbolic oracle and dataset generation.
//! * [`curriculum`]: training plans, difficulty buckets, sampling weights.
//! * [`trainer`]: SGD loop, evaluation, metrics and checkpoints.
//! * [`gradcheck`]: finite-difference validation of every module's backward
//!   pass.

pub mod curriculum;
pub mod dsl;
pub mod executor;
pub mod gradcheck;
pub mod modules;
pub mod registry;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;
