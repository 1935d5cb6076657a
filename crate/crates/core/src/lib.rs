//! Synthetic-world triangulation engine.
//!
//! This crate builds small structural causal worlds with planted circuits,
//! proposes candidate circuits by integrated-gradient attribution, fits
//! affine translation maps between environments, and then accepts or rejects
//! mechanism classes with a triangulation score: a preregistered mixture of
//! knockout, predicate-swap, stability, and cue-only interventions whose
//! Bernoulli outcomes feed a Beta–Binomial posterior and a calibrated
//! decision rule.
//!
//! All numeric code is generic over the [`scalar::Real`] scalar; `f64` is
//! the default used by the CLI and the acceptance suite.

pub mod beta;
pub mod discovery;
pub mod family;
pub mod intervene;
pub mod linalg;
pub mod scalar;
pub mod scenario;
pub mod seeding;
pub mod triangulate;
pub mod tmap;
pub mod world;

pub use scalar::Real;
pub use world::{
    build_cue_shortcut_world, build_world, ActivationKind, ActivationTrace, LowLevelModel,
    Modality, PredicateInstance, ScoreSpec, SiteId, World, WorldError, WorldFamily, WorldSpec,
};

/// Concrete double-precision aliases (the default instantiation).
pub type World64 = world::World<f64>;
pub type WorldSpec64 = world::WorldSpec<f64>;
/// Single-precision variants for memory-constrained sweeps.
pub type World32 = world::World<f32>;
pub type WorldSpec32 = world::WorldSpec<f32>;
