//! The intervention algebra: knockouts, interchange patches, and their
//! score deltas.
//!
//! Every intervention reduces to the same do-operator: pin values at circuit
//! sites, recompute downstream once (the network is feedforward, so no
//! fixed-point iteration is needed). Knockout pins null-source values (zero,
//! context mean, or a resampled context input); patching pins the values the
//! sites take in a source run, optionally routed through a translation map.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;
use crate::seeding::stream_rng;
use crate::tmap::{MapError, TranslationMap};
use crate::world::{
    ActivationTrace, LowLevelModel, PredicateInstance, SiteId, TraceAnnotation, World, WorldError,
};

#[derive(Debug, Error, PartialEq)]
pub enum InterventionError {
    #[error("circuit {0:?} is empty; interventions need at least one site")]
    EmptyCircuit(String),
    #[error("circuit {label:?} holds invalid site {site}")]
    InvalidSite { label: String, site: SiteId },
    #[error("{ablation:?} ablation needs a nonempty context set")]
    EmptyContext { ablation: Ablation },
    #[error(
        "type-incompatible patch: base circuit {base:?} has {base_dim} sites, \
         source circuit {source_label:?} has {source_dim}; supply a translation map"
    )]
    TypeIncompatible { base: String, base_dim: usize, source_label: String, source_dim: usize },
    #[error("translation map shape ({rows}×{cols}) does not match circuits ({base_dim}×{source_dim})")]
    MapShapeMismatch { rows: usize, cols: usize, base_dim: usize, source_dim: usize },
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Map(#[from] MapError),
}

/// A nominated set of internal sites.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Circuit {
    pub sites: std::collections::BTreeSet<SiteId>,
    pub label: String,
}

impl Circuit {
    pub fn new(label: impl Into<String>, sites: impl IntoIterator<Item = SiteId>) -> Self {
        Self { sites: sites.into_iter().collect(), label: label.into() }
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.sites.len()
    }

    /// Sites in their canonical (sorted) flattening order.
    pub fn ordered_sites(&self) -> impl Iterator<Item = SiteId> + '_ {
        self.sites.iter().copied()
    }

    fn ensure_valid<R: Real>(&self, model: &LowLevelModel<R>) -> Result<(), InterventionError> {
        if self.is_empty() {
            return Err(InterventionError::EmptyCircuit(self.label.clone()));
        }
        for site in &self.sites {
            if !model.site_valid(*site) {
                return Err(InterventionError::InvalidSite {
                    label: self.label.clone(),
                    site: *site,
                });
            }
        }
        Ok(())
    }
}

/// Null-source choices for knockout ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Zero,
    Mean,
    Resample,
}

/// The four intervention families of the acceptance distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterventionKind {
    Knockout,
    PredicateSwap,
    Stability,
    CueOnly,
}

impl InterventionKind {
    pub const ALL: [InterventionKind; 4] = [
        InterventionKind::Knockout,
        InterventionKind::PredicateSwap,
        InterventionKind::Stability,
        InterventionKind::CueOnly,
    ];
}

impl std::fmt::Display for InterventionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Knockout => "knockout",
            Self::PredicateSwap => "predicate-swap",
            Self::Stability => "stability",
            Self::CueOnly => "cue-only",
        };
        f.write_str(s)
    }
}

/// One sampled low-level intervention, with everything needed to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub kind: InterventionKind,
    pub index: u64,
    /// Index of the base anchor in the scenario dataset.
    pub anchor: usize,
    pub base_z: PredicateInstance,
    pub base_env: usize,
    pub source_z: Option<PredicateInstance>,
    pub source_env: Option<usize>,
    pub ablation: Option<Ablation>,
    pub predicted_direction: Option<i8>,
    /// Per-intervention seed for any auxiliary randomness (resampling).
    pub seed: u64,
}

/// Forward pass with circuit sites pinned to explicit values.
fn forward_pinned<R: Real>(
    model: &LowLevelModel<R>,
    x: &[R],
    circuit: &Circuit,
    values: &[R],
) -> Result<ActivationTrace<R>, InterventionError> {
    let overrides: BTreeMap<SiteId, R> =
        circuit.ordered_sites().zip(values.iter().copied()).collect();
    Ok(model.forward_with_overrides(x, &overrides)?)
}

/// Knockout: pins each circuit site to a null-source value and recomputes
/// downstream. Zero pins 0; mean pins the per-site context mean; resample
/// pins the site values from one uniformly drawn context input.
pub fn apply_knockout<R: Real>(
    model: &LowLevelModel<R>,
    x: &[R],
    circuit: &Circuit,
    ablation: Ablation,
    context: &[Vec<R>],
    seed: u64,
) -> Result<ActivationTrace<R>, InterventionError> {
    circuit.ensure_valid(model)?;
    let values: Vec<R> = match ablation {
        Ablation::Zero => vec![R::zero(); circuit.dim()],
        Ablation::Mean => {
            if context.is_empty() {
                return Err(InterventionError::EmptyContext { ablation });
            }
            let mut sums = vec![R::zero(); circuit.dim()];
            for ctx in context {
                let trace = model.forward(ctx)?;
                for (slot, site) in sums.iter_mut().zip(circuit.ordered_sites()) {
                    *slot = *slot + trace.site(site);
                }
            }
            let n = R::from_usize(context.len()).unwrap();
            sums.into_iter().map(|s| s / n).collect()
        }
        Ablation::Resample => {
            if context.is_empty() {
                return Err(InterventionError::EmptyContext { ablation });
            }
            let mut rng = stream_rng(seed, "resample", 0);
            let pick = rng.gen_range(0..context.len());
            let trace = model.forward(&context[pick])?;
            circuit.ordered_sites().map(|s| trace.site(s)).collect()
        }
    };
    forward_pinned(model, x, circuit, &values)
}

/// Interchange intervention: runs the source, extracts the source circuit's
/// activations, optionally translates them, and pins them into the base
/// circuit during a forward pass on the base input.
pub fn apply_patch<R: Real>(
    model: &LowLevelModel<R>,
    x_base: &[R],
    x_source: &[R],
    circuit_base: &Circuit,
    circuit_source: &Circuit,
    map: Option<&TranslationMap<R>>,
) -> Result<ActivationTrace<R>, InterventionError> {
    circuit_base.ensure_valid(model)?;
    circuit_source.ensure_valid(model)?;
    let source_trace = model.forward(x_source)?;
    let source_values: Vec<R> =
        circuit_source.ordered_sites().map(|s| source_trace.site(s)).collect();
    let values = match map {
        Some(m) => {
            if m.source_dim() != circuit_source.dim() || m.target_dim() != circuit_base.dim() {
                return Err(InterventionError::MapShapeMismatch {
                    rows: m.target_dim(),
                    cols: m.source_dim(),
                    base_dim: circuit_base.dim(),
                    source_dim: circuit_source.dim(),
                });
            }
            m.apply(&source_values)?
        }
        None => {
            if circuit_base.dim() != circuit_source.dim() {
                return Err(InterventionError::TypeIncompatible {
                    base: circuit_base.label.clone(),
                    base_dim: circuit_base.dim(),
                    source_label: circuit_source.label.clone(),
                    source_dim: circuit_source.dim(),
                });
            }
            source_values
        }
    };
    forward_pinned(model, x_base, circuit_base, &values)
}

fn annotated_score<R: Real>(
    world: &World<R>,
    mut trace: ActivationTrace<R>,
    annotation: TraceAnnotation,
) -> Result<R, WorldError> {
    trace.annotation = Some(annotation);
    world.task_score(&trace)
}

/// Necessity delta: clean score minus knocked-out score. Positive means the
/// circuit supports the behavior.
pub fn delta_ko<R: Real>(
    world: &World<R>,
    x: &[R],
    annotation: TraceAnnotation,
    circuit: &Circuit,
    ablation: Ablation,
    context: &[Vec<R>],
    seed: u64,
) -> Result<R, InterventionError> {
    let clean = annotated_score(world, world.model.forward(x)?, annotation)?;
    let ko = apply_knockout(&world.model, x, circuit, ablation, context, seed)?;
    let ko_score = annotated_score(world, ko, annotation)?;
    Ok(clean - ko_score)
}

/// Signed score change of the base run under an interchange patch.
pub fn delta_swap<R: Real>(
    world: &World<R>,
    x_base: &[R],
    annotation: TraceAnnotation,
    x_source: &[R],
    circuit_base: &Circuit,
    circuit_source: &Circuit,
    map: Option<&TranslationMap<R>>,
) -> Result<R, InterventionError> {
    let clean = annotated_score(world, world.model.forward(x_base)?, annotation)?;
    let patched =
        apply_patch(&world.model, x_base, x_source, circuit_base, circuit_source, map)?;
    let patched_score = annotated_score(world, patched, annotation)?;
    Ok(patched_score - clean)
}

/// Score change under a cue-circuit patch. Cue-only falsifiers inject the
/// raw source values (no translation): translating them would rewrite the
/// surface cue back into the base environment and blunt the falsifier.
pub fn delta_cue<R: Real>(
    world: &World<R>,
    x_base: &[R],
    annotation: TraceAnnotation,
    x_source: &[R],
    cue_base: &Circuit,
    cue_source: &Circuit,
) -> Result<R, InterventionError> {
    if cue_base.is_empty() && cue_source.is_empty() {
        // Nothing nominated: the falsifier is vacuous.
        return Ok(R::zero());
    }
    delta_swap(world, x_base, annotation, x_source, cue_base, cue_source, None)
}

pub use crate::tmap::on_manifold_distance;
