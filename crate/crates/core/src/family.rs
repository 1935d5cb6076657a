//! Predicate-preserving reference families and swap siblings.
//!
//! A reference family holds the predicate instance fixed while the
//! environment varies; swap siblings hold the semantic content fixed while
//! the predicate value changes. The predicate checker is exact in synthetic
//! worlds: it compares the predicate coordinate blocks bit for bit. Stress
//! tests corrupt one member and verify the acceptance rule notices.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;
use crate::seeding::stream_rng;
use crate::world::{PredicateInstance, TraceAnnotation, World, WorldError};

#[derive(Debug, Error, PartialEq)]
pub enum FamilyError {
    #[error("reference family needs at least one environment")]
    NoEnvironments,
    #[error("reference family needs members from ≥ 2 distinct environments, got {0}")]
    SingleEnvironment(usize),
    #[error("input has length {got}, world expects {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("violation injection needs ≥ 2 members, got {0}")]
    TooFewMembers(usize),
    #[error("entity swap needs a semantic block wider than 1")]
    SemanticBlockTooNarrow,
    #[error("swap sibling must change the predicate value ({0})")]
    SameValue(usize),
    #[error("no predicted direction between values {base} and {swapped}: abstract scores tie")]
    NoPredictedDirection { base: usize, swapped: usize },
    #[error(transparent)]
    World(#[from] WorldError),
}

/// One family member: an encoded input and the environment it realizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyMember<R> {
    pub input: Vec<R>,
    pub environment: usize,
}

impl<R> FamilyMember<R> {
    /// The annotation the harness believes this member carries. Corrupted
    /// members keep the anchor's annotation: that is exactly the blind spot
    /// stress tests probe.
    pub fn annotation(&self, anchor: PredicateInstance) -> TraceAnnotation {
        TraceAnnotation { z: anchor, environment: self.environment }
    }
}

/// A predicate-preserving family: one member per environment, all sharing
/// the anchor predicate instance (unless deliberately corrupted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFamily<R> {
    pub anchor: PredicateInstance,
    pub members: Vec<FamilyMember<R>>,
    pub quality: R,
}

/// The kinds of deliberate predicate violations used in stress tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    /// Permutes the semantic one-hot: a different entity, same value.
    EntitySwap,
    /// Moves the predicate value one-hot to a contradicting value.
    MeaningFlip,
}

/// A predicate-swap pair: same semantic content, different predicate value,
/// with the direction of score change the abstract model predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapSibling {
    pub base: PredicateInstance,
    pub swapped: PredicateInstance,
    pub predicted_direction: i8,
}

/// Exact predicate checker: 1 iff the predicate coordinate blocks agree.
pub fn predicate_checker<R: Real>(
    x: &[R],
    y: &[R],
    world: &World<R>,
) -> Result<u8, FamilyError> {
    let dim = world.spec.input_dim;
    if x.len() != dim {
        return Err(FamilyError::DimensionMismatch { got: x.len(), expected: dim });
    }
    if y.len() != dim {
        return Err(FamilyError::DimensionMismatch { got: y.len(), expected: dim });
    }
    let coords = world.layout.predicate_coords();
    Ok(u8::from(x[coords.clone()] == y[coords]))
}

/// Builds a family for `z` across `envs`: one member per environment.
pub fn build_reference_family<R: Real>(
    z: PredicateInstance,
    envs: &[usize],
    world: &World<R>,
) -> Result<ReferenceFamily<R>, FamilyError> {
    if envs.is_empty() {
        return Err(FamilyError::NoEnvironments);
    }
    let mut distinct: Vec<usize> = envs.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(FamilyError::SingleEnvironment(distinct.len()));
    }
    let members = envs
        .iter()
        .map(|&e| {
            Ok(FamilyMember { input: world.encode_input(z, e)?, environment: e })
        })
        .collect::<Result<Vec<_>, FamilyError>>()?;
    let mut family = ReferenceFamily { anchor: z, members, quality: R::one() };
    family.quality = family_quality(&family, world)?;
    Ok(family)
}

/// Fraction of members whose predicate block matches the anchor's.
pub fn family_quality<R: Real>(
    family: &ReferenceFamily<R>,
    world: &World<R>,
) -> Result<R, FamilyError> {
    if family.members.is_empty() {
        return Err(FamilyError::NoEnvironments);
    }
    let reference = world.encode_input(family.anchor, family.members[0].environment)?;
    let mut passing = 0usize;
    for member in &family.members {
        passing += usize::from(predicate_checker(&member.input, &reference, world)?);
    }
    Ok(R::from_usize(passing).unwrap() / R::from_usize(family.members.len()).unwrap())
}

/// Returns a copy of the family with one member's predicate coordinates
/// perturbed. The member is chosen by the seed; the perturbation itself is
/// deterministic given the kind.
pub fn inject_violation<R: Real>(
    family: &ReferenceFamily<R>,
    kind: ViolationKind,
    world: &World<R>,
    rng_seed: u64,
) -> Result<ReferenceFamily<R>, FamilyError> {
    if family.members.len() < 2 {
        return Err(FamilyError::TooFewMembers(family.members.len()));
    }
    let mut rng = stream_rng(rng_seed, "family-violation", 0);
    let victim = rng.gen_range(0..family.members.len());
    let mut corrupted = family.clone();
    let layout = world.layout;
    let member = &mut corrupted.members[victim];
    match kind {
        ViolationKind::EntitySwap => {
            if layout.sem_len < 2 {
                return Err(FamilyError::SemanticBlockTooNarrow);
            }
            let new_sem = (family.anchor.z_sem + 1) % layout.sem_len;
            for c in layout.sem_start..layout.sem_start + layout.sem_len {
                member.input[c] = R::zero();
            }
            member.input[layout.sem_start + new_sem] = R::one();
        }
        ViolationKind::MeaningFlip => {
            let flip = contradicting_value(world, family.anchor.z_g);
            for c in layout.pred_start..layout.pred_start + layout.pred_len {
                member.input[c] = R::zero();
            }
            member.input[layout.pred_start + flip] = R::one();
        }
    }
    corrupted.quality = family_quality(&corrupted, world)?;
    Ok(corrupted)
}

/// The domain value whose abstract score sits furthest below the anchor's:
/// the strongest meaning flip.
fn contradicting_value<R: Real>(world: &World<R>, anchor_g: usize) -> usize {
    let mut best = (anchor_g + 1) % world.spec.predicate_domain.len();
    let mut best_score = f64::INFINITY;
    for g in 0..world.spec.predicate_domain.len() {
        if g == anchor_g {
            continue;
        }
        let s = world
            .ideal_score(g, Some(anchor_g))
            .map(|v| v.to_f64_lossy())
            .unwrap_or(f64::INFINITY);
        if s < best_score {
            best_score = s;
            best = g;
        }
    }
    best
}

/// Builds a predicate-swap sibling and its predicted direction.
pub fn build_swap_sibling<R: Real>(
    z: PredicateInstance,
    g_new: usize,
    world: &World<R>,
) -> Result<SwapSibling, FamilyError> {
    if g_new == z.z_g {
        return Err(FamilyError::SameValue(g_new));
    }
    let direction = world
        .predicted_direction(z.z_g, g_new)
        .ok_or(FamilyError::NoPredictedDirection { base: z.z_g, swapped: g_new })?;
    Ok(SwapSibling { base: z, swapped: z.with_value(g_new), predicted_direction: direction })
}
