//! Synthetic layered causal worlds with planted pathways.
//!
//! A world is a small feedforward network wrapped in an explicit causal
//! structure: a predicate instance `z = (z_sem, z_g)` and an environment
//! index `e` are encoded into one-hot input blocks, propagate through hidden
//! sites, and produce output logits scored by a task score. Two site sets are
//! planted at construction time: a predicate pathway that carries all
//! dependence of the score on `z_g`, and a cue pathway that absorbs all
//! dependence on `e`. In clean worlds the cue pathway is terminal (no route
//! to the output); the cue-shortcut variant instead routes an
//! environment-gated copy of the predicate signal through the cue sites, so
//! the behavior looks predicate-driven inside one environment and vanishes
//! elsewhere.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::scalar::Real;
use crate::seeding::stream_rng;

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("planted predicate and cue sites overlap at {0}")]
    OverlappingPlantedSites(SiteId),
    #[error("site {site} invalid: {reason}")]
    InvalidSite { site: SiteId, reason: String },
    #[error("layer {0} has zero width")]
    ZeroWidthLayer(usize),
    #[error("need at least 2 environments, got {0}")]
    TooFewEnvironments(usize),
    #[error("predicate domain needs at least 2 values, got {0}")]
    DomainTooSmall(usize),
    #[error("nuisance_dim {nuisance_dim} cannot one-hot encode {environments} environments")]
    NuisanceTooNarrow { nuisance_dim: usize, environments: usize },
    #[error(
        "input_dim {input_dim} leaves no semantic block: needs > {reserved} \
         (predicate {predicate} + nuisance {nuisance})"
    )]
    NoSemanticBlock { input_dim: usize, reserved: usize, predicate: usize, nuisance: usize },
    #[error("planted {role} sites must cover layers 1..={expected}, layer {layer} is empty")]
    UncoveredLayer { role: &'static str, expected: usize, layer: usize },
    #[error("planted {role} slices must have equal sizes; layer {layer} has {got}, expected {expected}")]
    UnevenSlices { role: &'static str, layer: usize, got: usize, expected: usize },
    #[error("correct-attribute scoring needs ≥ {domain} planted predicate sites per layer, got {got}")]
    TooFewDetectors { domain: usize, got: usize },
    #[error("output group {0:?} is empty")]
    EmptyOutputGroup(String),
    #[error("output groups {0:?} and {1:?} overlap")]
    OverlappingOutputGroups(String, String),
    #[error("no output groups declared")]
    NoOutputGroups,
    #[error("score references unknown output group {0:?}")]
    UnknownGroup(String),
    #[error("cue-shortcut worlds need a saturating activation, not identity")]
    ShortcutNeedsSaturation,
    #[error("cue-shortcut worlds need planted cue sites")]
    ShortcutNeedsCueSites,
    #[error("shortcut home environment {home} out of range (K = {environments})")]
    BadHomeEnvironment { home: usize, environments: usize },
    #[error("predicate instance out of range: {0}")]
    BadPredicateInstance(String),
    #[error("environment {e} out of range (K = {environments})")]
    BadEnvironment { e: usize, environments: usize },
    #[error("input has length {got}, model expects {expected}")]
    InputDimensionMismatch { got: usize, expected: usize },
    #[error("score needs a trace annotated with its predicate instance")]
    MissingAnnotation,
    #[error("score target group has no support")]
    EmptyTargetSupport,
}

/// Address of one internal variable: `(layer, unit)`. Layer 0 is the input
/// encoding; the last layer holds the output logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SiteId {
    pub layer: usize,
    pub unit: usize,
}

impl SiteId {
    pub fn new(layer: usize, unit: usize) -> Self {
        Self { layer, unit }
    }
}

impl std::fmt::Display for SiteId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.layer, self.unit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationKind {
    Identity,
    Tanh,
    Relu,
}

impl ActivationKind {
    pub fn apply<R: Real>(self, x: R) -> R {
        match self {
            Self::Identity => x,
            Self::Tanh => x.tanh(),
            Self::Relu => x.max(R::zero()),
        }
    }

    pub fn derivative<R: Real>(self, pre: R) -> R {
        match self {
            Self::Identity => R::one(),
            Self::Tanh => {
                let t = pre.tanh();
                R::one() - t * t
            }
            Self::Relu => {
                if pre > R::zero() {
                    R::one()
                } else {
                    R::zero()
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    TextOnly,
    Bimodal,
}

/// A full predicate instance: semantic content index plus the predicate
/// value index into the world's predicate domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PredicateInstance {
    pub z_sem: usize,
    pub z_g: usize,
}

impl PredicateInstance {
    pub fn new(z_sem: usize, z_g: usize) -> Self {
        Self { z_sem, z_g }
    }

    pub fn with_value(self, z_g: usize) -> Self {
        Self { z_g, ..self }
    }
}

/// How output logits are reduced to the scalar task score.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ScoreSpec {
    /// Log-sum-exp of the target group minus the max over competitor groups
    /// (a log-odds margin favoring the target realization).
    LogOdds { target: String, competitors: Vec<String> },
    /// Log of the normalized probability mass on the group named by the
    /// trace's own predicate value.
    CorrectAttribute,
}

fn default_planted_weight<R: Real>() -> R {
    R::of(2.0)
}

fn default_free_scale<R: Real>() -> R {
    R::of(0.2)
}

fn default_bias_scale<R: Real>() -> R {
    R::of(0.05)
}

fn default_gate<R: Real>() -> R {
    R::of(6.0)
}

/// Declarative description of a world; `build_world` turns it into weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "R: Real", deserialize = "R: Real"))]
pub struct WorldSpec<R> {
    pub num_environments: usize,
    pub predicate_domain: Vec<String>,
    pub nuisance_dim: usize,
    pub input_dim: usize,
    pub layer_widths: Vec<usize>,
    pub activation: ActivationKind,
    pub planted_predicate_sites: BTreeSet<SiteId>,
    pub planted_cue_sites: BTreeSet<SiteId>,
    pub output_groups: BTreeMap<String, BTreeSet<usize>>,
    pub score: ScoreSpec,
    pub modality: Modality,
    pub seed: u64,
    /// Fixed magnitude for planted pathway weights.
    #[serde(default = "default_planted_weight")]
    pub planted_weight: R,
    /// Free weights are U[−1, 1] times this scale, so planted effects
    /// dominate the background at default settings.
    #[serde(default = "default_free_scale")]
    pub free_weight_scale: R,
    #[serde(default = "default_bias_scale")]
    pub bias_scale: R,
    /// Saturation magnitude for the environment gate in shortcut worlds.
    #[serde(default = "default_gate")]
    pub shortcut_gate: R,
}

/// Byte spans of the one-hot input blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    pub sem_start: usize,
    pub sem_len: usize,
    pub pred_start: usize,
    pub pred_len: usize,
    pub nuis_start: usize,
    pub nuis_len: usize,
}

impl InputLayout {
    /// Coordinates that define the predicate (semantic + value blocks).
    pub fn predicate_coords(&self) -> std::ops::Range<usize> {
        self.sem_start..self.pred_start + self.pred_len
    }

    pub fn nuisance_coords(&self) -> std::ops::Range<usize> {
        self.nuis_start..self.nuis_start + self.nuis_len
    }
}

/// The low-level model: per-layer weights, biases, activation, and readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowLevelModel<R> {
    /// Layer widths including input (index 0) and output (last).
    pub widths: Vec<usize>,
    /// `weights[l]` maps layer `l` to layer `l + 1`.
    pub weights: Vec<Matrix<R>>,
    pub biases: Vec<Vec<R>>,
    pub activation: ActivationKind,
    pub output_groups: BTreeMap<String, BTreeSet<usize>>,
    pub score: ScoreSpec,
    /// Predicate domain labels, used to resolve correct-attribute lookups.
    pub attribute_labels: Vec<String>,
}

/// Labels a trace with the input it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceAnnotation {
    pub z: PredicateInstance,
    pub environment: usize,
}

/// All site values from one forward pass, layer by layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace<R> {
    pub layers: Vec<Vec<R>>,
    pub annotation: Option<TraceAnnotation>,
}

impl<R: Real> ActivationTrace<R> {
    pub fn logits(&self) -> &[R] {
        self.layers.last().expect("trace has an output layer")
    }

    pub fn site(&self, site: SiteId) -> R {
        self.layers[site.layer][site.unit]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorldFamily {
    Clean,
    /// Cue sites carry an environment-gated copy of the predicate signal and
    /// feed the readout; the designated predicate sites are inert. Violates
    /// the clean separability invariants on purpose.
    CueShortcut { home_env: usize },
}

/// A built world: spec, input layout, weights, and its family tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "R: Real", deserialize = "R: Real"))]
pub struct World<R> {
    pub spec: WorldSpec<R>,
    pub layout: InputLayout,
    pub model: LowLevelModel<R>,
    pub family: WorldFamily,
}

impl<R: Real> LowLevelModel<R> {
    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len()
    }

    pub fn hidden_layers(&self) -> std::ops::Range<usize> {
        1..self.widths.len() - 1
    }

    pub fn site_valid(&self, site: SiteId) -> bool {
        site.layer < self.widths.len() && site.unit < self.widths[site.layer]
    }

    /// Plain forward pass; a pure function of the input.
    pub fn forward(&self, x: &[R]) -> Result<ActivationTrace<R>, WorldError> {
        self.forward_with_overrides(x, &BTreeMap::new())
    }

    /// Forward pass with site values pinned after each layer is computed.
    /// This is the do-operator all interventions reduce to: overridden sites
    /// keep their pinned value for the rest of the pass and downstream
    /// layers are recomputed from the pinned state.
    pub fn forward_with_overrides(
        &self,
        x: &[R],
        overrides: &BTreeMap<SiteId, R>,
    ) -> Result<ActivationTrace<R>, WorldError> {
        if x.len() != self.input_dim() {
            return Err(WorldError::InputDimensionMismatch {
                got: x.len(),
                expected: self.input_dim(),
            });
        }
        let last = self.widths.len() - 1;
        let mut layers: Vec<Vec<R>> = Vec::with_capacity(self.widths.len());
        let mut current = x.to_vec();
        apply_layer_overrides(&mut current, 0, overrides);
        layers.push(current.clone());
        for l in 0..last {
            let pre = add(&self.weights[l].matvec(&current), &self.biases[l]);
            let mut next = if l + 1 == last {
                pre
            } else {
                pre.into_iter().map(|v| self.activation.apply(v)).collect()
            };
            apply_layer_overrides(&mut next, l + 1, overrides);
            layers.push(next.clone());
            current = next;
        }
        Ok(ActivationTrace { layers, annotation: None })
    }
}

fn apply_layer_overrides<R: Real>(values: &mut [R], layer: usize, overrides: &BTreeMap<SiteId, R>) {
    for (site, v) in overrides.range(SiteId::new(layer, 0)..SiteId::new(layer + 1, 0)) {
        values[site.unit] = *v;
    }
}

fn add<R: Real>(a: &[R], b: &[R]) -> Vec<R> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

/// Numerically stable log-sum-exp over selected logits.
fn lse_over<R: Real>(logits: &[R], units: impl Iterator<Item = usize>) -> Option<R> {
    let vals: Vec<R> = units.map(|u| logits[u]).collect();
    if vals.is_empty() {
        return None;
    }
    let m = vals.iter().fold(R::neg_infinity(), |acc, &v| acc.max(v));
    let s = vals.iter().fold(R::zero(), |acc, &v| acc + (v - m).exp());
    Some(m + s.ln())
}

/// The scalar task score of a trace under the model's score spec.
///
/// Log-odds mode: `lse(target) − max_g lse(competitor_g)`. Correct-attribute
/// mode: `lse(correct group) − lse(all)`, the log of the normalized
/// probability mass on the group named by the trace's predicate value.
pub fn task_score<R: Real>(
    trace: &ActivationTrace<R>,
    model: &LowLevelModel<R>,
) -> Result<R, WorldError> {
    score_logits(trace.logits(), model, trace.annotation.as_ref())
}

pub(crate) fn score_logits<R: Real>(
    logits: &[R],
    model: &LowLevelModel<R>,
    annotation: Option<&TraceAnnotation>,
) -> Result<R, WorldError> {
    match &model.score {
        ScoreSpec::LogOdds { target, competitors } => {
            let target_units = model
                .output_groups
                .get(target)
                .ok_or_else(|| WorldError::UnknownGroup(target.clone()))?;
            let target_lse = lse_over(logits, target_units.iter().copied())
                .ok_or(WorldError::EmptyTargetSupport)?;
            let mut best = R::neg_infinity();
            for comp in competitors {
                let units = model
                    .output_groups
                    .get(comp)
                    .ok_or_else(|| WorldError::UnknownGroup(comp.clone()))?;
                let l = lse_over(logits, units.iter().copied())
                    .ok_or_else(|| WorldError::EmptyOutputGroup(comp.clone()))?;
                best = best.max(l);
            }
            Ok(target_lse - best)
        }
        ScoreSpec::CorrectAttribute => {
            let ann = annotation.ok_or(WorldError::MissingAnnotation)?;
            let label = model
                .attribute_labels
                .get(ann.z.z_g)
                .ok_or_else(|| WorldError::BadPredicateInstance(format!("{}", ann.z.z_g)))?;
            let units = model
                .output_groups
                .get(label)
                .ok_or_else(|| WorldError::UnknownGroup(label.clone()))?;
            let correct = lse_over(logits, units.iter().copied())
                .ok_or(WorldError::EmptyTargetSupport)?;
            let all = lse_over(logits, 0..logits.len()).ok_or(WorldError::EmptyTargetSupport)?;
            Ok(correct - all)
        }
    }
}

/// Gradient of the task score with respect to the output logits.
pub(crate) fn score_logit_gradient<R: Real>(
    logits: &[R],
    model: &LowLevelModel<R>,
    correct_group: Option<&str>,
) -> Result<Vec<R>, WorldError> {
    let mut grad = vec![R::zero(); logits.len()];
    match &model.score {
        ScoreSpec::LogOdds { target, competitors } => {
            let target_units = model
                .output_groups
                .get(target)
                .ok_or_else(|| WorldError::UnknownGroup(target.clone()))?;
            softmax_into(logits, target_units.iter().copied(), R::one(), &mut grad);
            // Subgradient through the max: the argmax competitor group.
            let mut best: Option<(&String, R)> = None;
            for comp in competitors {
                let units = model
                    .output_groups
                    .get(comp)
                    .ok_or_else(|| WorldError::UnknownGroup(comp.clone()))?;
                let l = lse_over(logits, units.iter().copied())
                    .ok_or_else(|| WorldError::EmptyOutputGroup(comp.clone()))?;
                if best.map_or(true, |(_, b)| l > b) {
                    best = Some((comp, l));
                }
            }
            if let Some((comp, _)) = best {
                let units = &model.output_groups[comp];
                softmax_into(logits, units.iter().copied(), -R::one(), &mut grad);
            }
        }
        ScoreSpec::CorrectAttribute => {
            let label = correct_group.ok_or(WorldError::MissingAnnotation)?;
            let units = model
                .output_groups
                .get(label)
                .ok_or_else(|| WorldError::UnknownGroup(label.to_string()))?;
            softmax_into(logits, units.iter().copied(), R::one(), &mut grad);
            softmax_into(logits, 0..logits.len(), -R::one(), &mut grad);
        }
    }
    Ok(grad)
}

fn softmax_into<R: Real>(
    logits: &[R],
    units: impl Iterator<Item = usize> + Clone,
    sign: R,
    out: &mut [R],
) {
    let m = units
        .clone()
        .map(|u| logits[u])
        .fold(R::neg_infinity(), |acc, v| acc.max(v));
    let z = units
        .clone()
        .map(|u| (logits[u] - m).exp())
        .fold(R::zero(), |acc, v| acc + v);
    for u in units {
        out[u] = out[u] + sign * (logits[u] - m).exp() / z;
    }
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

struct PlantedLayout {
    /// Sorted planted sites per layer, indexed by layer.
    slices: Vec<Vec<usize>>,
    /// Deepest covered layer (0 when the set is empty).
    max_layer: usize,
    /// Sites per covered layer.
    width: usize,
}

fn planted_layout(
    sites: &BTreeSet<SiteId>,
    role: &'static str,
    hidden: usize,
    widths: &[usize],
    require_full_depth: bool,
) -> Result<PlantedLayout, WorldError> {
    let mut slices = vec![Vec::new(); hidden + 2];
    for site in sites {
        if site.layer == 0 || site.layer > hidden {
            return Err(WorldError::InvalidSite {
                site: *site,
                reason: format!("planted {role} sites must sit in hidden layers 1..={hidden}"),
            });
        }
        if site.unit >= widths[site.layer] {
            return Err(WorldError::InvalidSite {
                site: *site,
                reason: format!("unit exceeds layer width {}", widths[site.layer]),
            });
        }
        slices[site.layer].push(site.unit);
    }
    if sites.is_empty() {
        return Ok(PlantedLayout { slices, max_layer: 0, width: 0 });
    }
    let max_layer = if require_full_depth {
        hidden
    } else {
        (1..=hidden).rev().find(|&l| !slices[l].is_empty()).unwrap_or(0)
    };
    let width = slices[1].len();
    for l in 1..=max_layer {
        if slices[l].is_empty() {
            return Err(WorldError::UncoveredLayer { role, expected: max_layer, layer: l });
        }
        if slices[l].len() != width {
            return Err(WorldError::UnevenSlices {
                role,
                layer: l,
                got: slices[l].len(),
                expected: width,
            });
        }
        slices[l].sort_unstable();
    }
    Ok(PlantedLayout { slices, max_layer, width })
}

impl<R: Real> WorldSpec<R> {
    fn layout(&self) -> Result<InputLayout, WorldError> {
        let pred = self.predicate_domain.len();
        let reserved = pred + self.nuisance_dim;
        if self.input_dim <= reserved {
            return Err(WorldError::NoSemanticBlock {
                input_dim: self.input_dim,
                reserved,
                predicate: pred,
                nuisance: self.nuisance_dim,
            });
        }
        let sem_len = self.input_dim - reserved;
        Ok(InputLayout {
            sem_start: 0,
            sem_len,
            pred_start: sem_len,
            pred_len: pred,
            nuis_start: sem_len + pred,
            nuis_len: self.nuisance_dim,
        })
    }

    fn validate(&self) -> Result<InputLayout, WorldError> {
        if self.num_environments < 2 {
            return Err(WorldError::TooFewEnvironments(self.num_environments));
        }
        if self.predicate_domain.len() < 2 {
            return Err(WorldError::DomainTooSmall(self.predicate_domain.len()));
        }
        if self.nuisance_dim < self.num_environments {
            return Err(WorldError::NuisanceTooNarrow {
                nuisance_dim: self.nuisance_dim,
                environments: self.num_environments,
            });
        }
        for (i, &w) in self.layer_widths.iter().enumerate() {
            if w == 0 {
                return Err(WorldError::ZeroWidthLayer(i + 1));
            }
        }
        if self.layer_widths.is_empty() {
            return Err(WorldError::ZeroWidthLayer(1));
        }
        if let Some(site) = self.planted_predicate_sites.intersection(&self.planted_cue_sites).next()
        {
            return Err(WorldError::OverlappingPlantedSites(*site));
        }
        if self.output_groups.is_empty() {
            return Err(WorldError::NoOutputGroups);
        }
        let mut seen: BTreeMap<usize, &String> = BTreeMap::new();
        for (label, units) in &self.output_groups {
            if units.is_empty() {
                return Err(WorldError::EmptyOutputGroup(label.clone()));
            }
            for &u in units {
                if let Some(other) = seen.insert(u, label) {
                    return Err(WorldError::OverlappingOutputGroups(other.clone(), label.clone()));
                }
            }
        }
        match &self.score {
            ScoreSpec::LogOdds { target, competitors } => {
                for label in std::iter::once(target).chain(competitors) {
                    if !self.output_groups.contains_key(label) {
                        return Err(WorldError::UnknownGroup(label.clone()));
                    }
                }
            }
            ScoreSpec::CorrectAttribute => {
                for label in &self.predicate_domain {
                    if !self.output_groups.contains_key(label) {
                        return Err(WorldError::UnknownGroup(label.clone()));
                    }
                }
            }
        }
        self.layout()
    }

    fn output_dim(&self) -> usize {
        1 + self
            .output_groups
            .values()
            .flat_map(|units| units.iter().copied())
            .max()
            .unwrap_or(0)
    }

    /// Role scalar of a predicate value under the log-odds score: +1 for the
    /// target group, −1 for competitors, 0 for values with no group.
    fn role_scalar(&self, g: usize) -> R {
        let label = &self.predicate_domain[g];
        match &self.score {
            ScoreSpec::LogOdds { target, competitors } => {
                if label == target {
                    R::one()
                } else if competitors.contains(label) {
                    -R::one()
                } else {
                    R::zero()
                }
            }
            ScoreSpec::CorrectAttribute => R::zero(),
        }
    }
}

/// Builds a clean world: planted predicate pathway wired to the readout,
/// planted cue pathway absorbing the environment signal but terminal.
pub fn build_world<R: Real>(spec: WorldSpec<R>) -> Result<World<R>, WorldError> {
    build(spec, WorldFamily::Clean)
}

/// Builds a cue-shortcut world: the cue pathway reads the predicate block
/// gated by one home environment and drives the readout; the designated
/// predicate sites are inert.
pub fn build_cue_shortcut_world<R: Real>(
    spec: WorldSpec<R>,
    home_env: usize,
) -> Result<World<R>, WorldError> {
    if spec.activation == ActivationKind::Identity {
        return Err(WorldError::ShortcutNeedsSaturation);
    }
    if spec.planted_cue_sites.is_empty() {
        return Err(WorldError::ShortcutNeedsCueSites);
    }
    if home_env >= spec.num_environments {
        return Err(WorldError::BadHomeEnvironment {
            home: home_env,
            environments: spec.num_environments,
        });
    }
    build(spec, WorldFamily::CueShortcut { home_env })
}

fn build<R: Real>(spec: WorldSpec<R>, family: WorldFamily) -> Result<World<R>, WorldError> {
    let layout = spec.validate()?;
    let hidden = spec.layer_widths.len();
    let mut widths = Vec::with_capacity(hidden + 2);
    widths.push(spec.input_dim);
    widths.extend_from_slice(&spec.layer_widths);
    widths.push(spec.output_dim());

    let shortcut = matches!(family, WorldFamily::CueShortcut { .. });
    let pred = planted_layout(&spec.planted_predicate_sites, "predicate", hidden, &widths, true)?;
    let cue = planted_layout(&spec.planted_cue_sites, "cue", hidden, &widths, shortcut)?;

    if matches!(spec.score, ScoreSpec::CorrectAttribute)
        && !spec.planted_predicate_sites.is_empty()
        && pred.width < spec.predicate_domain.len()
    {
        return Err(WorldError::TooFewDetectors {
            domain: spec.predicate_domain.len(),
            got: pred.width,
        });
    }

    // Free background: every weight and bias gets scaled uniform noise. The
    // f64 stream is shared across scalar instantiations so seeds agree.
    let mut rng = stream_rng(spec.seed, "world-weights", 0);
    let mut weights: Vec<Matrix<R>> = Vec::with_capacity(widths.len() - 1);
    let mut biases: Vec<Vec<R>> = Vec::with_capacity(widths.len() - 1);
    for l in 0..widths.len() - 1 {
        let mut m = Matrix::zeros(widths[l + 1], widths[l]);
        for v in m.data.iter_mut() {
            *v = R::of(rng.gen_range(-1.0..=1.0)) * spec.free_weight_scale;
        }
        weights.push(m);
        biases.push(
            (0..widths[l + 1])
                .map(|_| R::of(rng.gen_range(-1.0..=1.0)) * spec.bias_scale)
                .collect(),
        );
    }

    // Per-(cue site, environment) embedding codes, drawn before wiring so the
    // stream layout is stable.
    let cue_codes: Vec<Vec<f64>> = (0..cue.width.max(1))
        .map(|_| (0..spec.num_environments).map(|_| rng.gen_range(-1.0..=1.0)).collect())
        .collect();

    let w = spec.planted_weight;
    let zero = R::zero();

    // The environment signal enters cue sites only: nuisance columns are
    // zeroed everywhere first.
    for r in 0..widths[1] {
        for c in layout.nuisance_coords() {
            weights[0][(r, c)] = zero;
        }
    }
    // The predicate value enters the planted predicate sites only.
    for r in 0..widths[1] {
        for c in layout.pred_start..layout.pred_start + layout.pred_len {
            weights[0][(r, c)] = zero;
        }
    }

    // Predicate pathway.
    if pred.width > 0 && !shortcut {
        // Entry rows read only the predicate block.
        for (i, &u) in pred.slices[1].iter().enumerate() {
            for c in 0..widths[0] {
                weights[0][(u, c)] = zero;
            }
            biases[0][u] = zero;
            for g in 0..layout.pred_len {
                let col = layout.pred_start + g;
                let v = match spec.score {
                    ScoreSpec::CorrectAttribute => {
                        if g % pred.width == i {
                            w
                        } else {
                            zero
                        }
                    }
                    ScoreSpec::LogOdds { .. } => w * spec.role_scalar(g),
                };
                weights[0][(u, col)] = v;
            }
        }
        // Relay through deeper layers: positional, exclusive.
        for l in 1..pred.max_layer {
            for (i, &u_next) in pred.slices[l + 1].iter().enumerate() {
                for c in 0..widths[l] {
                    weights[l][(u_next, c)] = zero;
                }
                biases[l][u_next] = zero;
                weights[l][(u_next, pred.slices[l][i])] = w;
            }
        }
        // Readout from the final slice.
        wire_readout(&mut weights, &spec, &pred.slices[hidden], hidden, w, false);
    }
    if pred.width > 0 && shortcut {
        // Inert designated predicate sites: read nothing, say nothing.
        for l in 1..=pred.max_layer {
            for &u in &pred.slices[l] {
                for c in 0..widths[l - 1] {
                    weights[l - 1][(u, c)] = zero;
                }
                biases[l - 1][u] = zero;
                for r in 0..widths[l + 1] {
                    weights[l][(r, u)] = zero;
                }
            }
        }
    }

    // Cue pathway.
    if cue.width > 0 {
        for (i, &u) in cue.slices[1].iter().enumerate() {
            for c in 0..widths[0] {
                weights[0][(u, c)] = zero;
            }
            biases[0][u] = zero;
            match family {
                WorldFamily::Clean => {
                    for e in 0..spec.num_environments {
                        weights[0][(u, layout.nuis_start + e)] = w * R::of(cue_codes[i][e]);
                    }
                }
                WorldFamily::CueShortcut { home_env } => {
                    // Pre-activation: w·ψ(z_g) + gate·1[e = home] − gate.
                    for g in 0..layout.pred_len {
                        weights[0][(u, layout.pred_start + g)] = w * spec.role_scalar(g);
                    }
                    weights[0][(u, layout.nuis_start + home_env)] = spec.shortcut_gate;
                    biases[0][u] = -spec.shortcut_gate;
                }
            }
        }
        for l in 1..cue.max_layer {
            for (i, &u_next) in cue.slices[l + 1].iter().enumerate() {
                for c in 0..widths[l] {
                    weights[l][(u_next, c)] = zero;
                }
                biases[l][u_next] = zero;
                weights[l][(u_next, cue.slices[l][i])] = w;
            }
        }
        // Outgoing edges: terminal in clean worlds, wired to the readout in
        // shortcut worlds. Intermediate cue sites only feed their relay.
        for l in 1..=cue.max_layer {
            for (i, &u) in cue.slices[l].iter().enumerate() {
                for r in 0..widths[l + 1] {
                    weights[l][(r, u)] = zero;
                }
                if l < cue.max_layer {
                    weights[l][(cue.slices[l + 1][i], u)] = w;
                }
            }
        }
        if shortcut {
            wire_readout(&mut weights, &spec, &cue.slices[hidden], hidden, w, true);
        }
    }

    let model = LowLevelModel {
        widths,
        weights,
        biases,
        activation: spec.activation,
        output_groups: spec.output_groups.clone(),
        score: spec.score.clone(),
        attribute_labels: spec.predicate_domain.clone(),
    };
    Ok(World { spec, layout, model, family })
}

/// Wires a hidden slice into the output groups. In log-odds mode each site
/// pushes the target group up and competitors down; in correct-attribute
/// mode site `i` feeds exactly the groups of the values it detects.
fn wire_readout<R: Real>(
    weights: &mut [Matrix<R>],
    spec: &WorldSpec<R>,
    slice: &[usize],
    hidden: usize,
    w: R,
    overwrite_only: bool,
) {
    let k = R::from_usize(slice.len().max(1)).unwrap();
    let readout = &mut weights[hidden];
    for (i, &u) in slice.iter().enumerate() {
        if !overwrite_only {
            for r in 0..readout.rows {
                readout[(r, u)] = R::zero();
            }
        }
        match &spec.score {
            ScoreSpec::LogOdds { target, competitors } => {
                for (label, units) in &spec.output_groups {
                    let sign = if label == target {
                        R::one()
                    } else if competitors.contains(label) {
                        -R::one()
                    } else {
                        continue;
                    };
                    let per_unit = w * sign / (k * R::from_usize(units.len()).unwrap());
                    for &o in units {
                        readout[(o, u)] = per_unit;
                    }
                }
            }
            ScoreSpec::CorrectAttribute => {
                for (g, label) in spec.predicate_domain.iter().enumerate() {
                    if g % slice.len() != i {
                        continue;
                    }
                    let units = &spec.output_groups[label];
                    let per_unit = w / R::from_usize(units.len()).unwrap();
                    for &o in units {
                        readout[(o, u)] = per_unit;
                    }
                }
            }
        }
    }
}

impl<R: Real> World<R> {
    /// Encodes `(z, e)` into the one-hot block input vector. Holding `z`
    /// fixed and varying `e` changes only the nuisance block.
    pub fn encode_input(&self, z: PredicateInstance, e: usize) -> Result<Vec<R>, WorldError> {
        if e >= self.spec.num_environments {
            return Err(WorldError::BadEnvironment {
                e,
                environments: self.spec.num_environments,
            });
        }
        if z.z_sem >= self.layout.sem_len {
            return Err(WorldError::BadPredicateInstance(format!(
                "z_sem {} exceeds semantic block width {}",
                z.z_sem, self.layout.sem_len
            )));
        }
        if z.z_g >= self.spec.predicate_domain.len() {
            return Err(WorldError::BadPredicateInstance(format!(
                "z_g {} exceeds domain size {}",
                z.z_g,
                self.spec.predicate_domain.len()
            )));
        }
        let mut x = vec![R::zero(); self.spec.input_dim];
        x[self.layout.sem_start + z.z_sem] = R::one();
        x[self.layout.pred_start + z.z_g] = R::one();
        x[self.layout.nuis_start + e] = R::one();
        Ok(x)
    }

    /// Splits an encoded input into its bimodal channels: the image channel
    /// (fixed by `z`) and the text channel (set by `e`).
    pub fn input_channels<'a>(&self, x: &'a [R]) -> (&'a [R], &'a [R]) {
        let split = self.layout.nuis_start;
        (&x[..split], &x[split..])
    }

    /// Forward pass annotated with the input description.
    pub fn run(&self, z: PredicateInstance, e: usize) -> Result<ActivationTrace<R>, WorldError> {
        let x = self.encode_input(z, e)?;
        let mut trace = self.model.forward(&x)?;
        trace.annotation = Some(TraceAnnotation { z, environment: e });
        Ok(trace)
    }

    /// Task score of a trace under this world's score spec.
    pub fn task_score(&self, trace: &ActivationTrace<R>) -> Result<R, WorldError> {
        task_score(trace, &self.model)
    }

    /// Gradient of the task score with respect to the logits of this trace.
    pub(crate) fn score_gradient(
        &self,
        logits: &[R],
        annotation: Option<&TraceAnnotation>,
    ) -> Result<Vec<R>, WorldError> {
        let correct = match &self.model.score {
            ScoreSpec::LogOdds { .. } => None,
            ScoreSpec::CorrectAttribute => {
                let ann = annotation.ok_or(WorldError::MissingAnnotation)?;
                Some(self.spec.predicate_domain[ann.z.z_g].clone())
            }
        };
        score_logit_gradient(logits, &self.model, correct.as_deref())
    }

    /// The planted site sets, verbatim: (predicate circuit, cue circuit).
    pub fn ground_truth(&self) -> (&BTreeSet<SiteId>, &BTreeSet<SiteId>) {
        (&self.spec.planted_predicate_sites, &self.spec.planted_cue_sites)
    }

    /// Idealized score the abstract predicate model assigns to value `g`,
    /// computed by running the score formula on the planted push pattern.
    pub fn ideal_score(&self, g: usize, scored_against: Option<usize>) -> Result<R, WorldError> {
        let out_dim = self.model.output_dim();
        let mut logits = vec![R::zero(); out_dim];
        let w = self.spec.planted_weight;
        let act = self.spec.activation;
        match &self.model.score {
            ScoreSpec::LogOdds { target, competitors } => {
                let carrier = act.apply(w * self.spec.role_scalar(g));
                for (label, units) in &self.spec.output_groups {
                    let sign = if label == target {
                        R::one()
                    } else if competitors.contains(label) {
                        -R::one()
                    } else {
                        continue;
                    };
                    let per_unit = w * sign / R::from_usize(units.len()).unwrap();
                    for &o in units {
                        logits[o] = per_unit * carrier;
                    }
                }
                let annotation = None;
                score_logits(&logits, &self.model, annotation)
            }
            ScoreSpec::CorrectAttribute => {
                let scored = scored_against.unwrap_or(g);
                let label = &self.spec.predicate_domain[g];
                let units = &self.spec.output_groups[label];
                let per_unit = w * act.apply(w) / R::from_usize(units.len()).unwrap();
                for &o in units {
                    logits[o] = per_unit;
                }
                let scored_label = &self.spec.predicate_domain[scored];
                let scored_units = &self.spec.output_groups[scored_label];
                let correct = lse_over(&logits, scored_units.iter().copied())
                    .ok_or(WorldError::EmptyTargetSupport)?;
                let all =
                    lse_over(&logits, 0..logits.len()).ok_or(WorldError::EmptyTargetSupport)?;
                Ok(correct - all)
            }
        }
    }

    /// Sign the abstract model predicts for swapping the predicate value of
    /// a base input from `g_base` to `g_source`. `None` when the abstract
    /// scores tie (no testable direction).
    pub fn predicted_direction(&self, g_base: usize, g_source: usize) -> Option<i8> {
        if g_base == g_source {
            return None;
        }
        let (m_src, m_base) = match self.model.score {
            ScoreSpec::LogOdds { .. } => (
                self.ideal_score(g_source, None).ok()?,
                self.ideal_score(g_base, None).ok()?,
            ),
            ScoreSpec::CorrectAttribute => (
                self.ideal_score(g_source, Some(g_base)).ok()?,
                self.ideal_score(g_base, Some(g_base)).ok()?,
            ),
        };
        let diff = m_src - m_base;
        let tol = R::of(1e-9);
        if diff > tol {
            Some(1)
        } else if diff < -tol {
            Some(-1)
        } else {
            None
        }
    }

    /// Index of a predicate value label in the domain.
    pub fn value_index(&self, label: &str) -> Option<usize> {
        self.spec.predicate_domain.iter().position(|v| v == label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn micro_spec(seed: u64) -> WorldSpec<f64> {
        WorldSpec {
            num_environments: 3,
            predicate_domain: vec![
                "masculine".into(),
                "feminine".into(),
                "inclusive".into(),
                "ambiguous".into(),
            ],
            nuisance_dim: 3,
            input_dim: 15,
            layer_widths: vec![10],
            activation: ActivationKind::Tanh,
            planted_predicate_sites: [SiteId::new(1, 0), SiteId::new(1, 1)].into(),
            planted_cue_sites: [SiteId::new(1, 2)].into(),
            output_groups: [
                ("inclusive".to_string(), BTreeSet::from([0])),
                ("masculine".to_string(), BTreeSet::from([1])),
                ("feminine".to_string(), BTreeSet::from([2])),
            ]
            .into(),
            score: ScoreSpec::LogOdds {
                target: "inclusive".into(),
                competitors: vec!["masculine".into(), "feminine".into()],
            },
            modality: Modality::TextOnly,
            seed,
            planted_weight: 2.0,
            free_weight_scale: 0.2,
            bias_scale: 0.05,
            shortcut_gate: 6.0,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_world(micro_spec(7)).unwrap();
        let b = build_world(micro_spec(7)).unwrap();
        assert_eq!(a.model, b.model);
        let c = build_world(micro_spec(8)).unwrap();
        assert_ne!(a.model, c.model);
    }

    #[test]
    fn overlapping_planted_sites_rejected() {
        let mut spec = micro_spec(1);
        spec.planted_cue_sites.insert(SiteId::new(1, 0));
        assert!(matches!(
            build_world(spec),
            Err(WorldError::OverlappingPlantedSites(s)) if s == SiteId::new(1, 0)
        ));
    }

    #[test]
    fn zero_width_layer_rejected() {
        let mut spec = micro_spec(1);
        spec.layer_widths = vec![0];
        spec.planted_predicate_sites.clear();
        spec.planted_cue_sites.clear();
        assert!(matches!(build_world(spec), Err(WorldError::ZeroWidthLayer(1))));
    }

    #[test]
    fn encode_varies_only_nuisance_across_environments() {
        let world = build_world(micro_spec(3)).unwrap();
        let z = PredicateInstance::new(2, 2);
        let x0 = world.encode_input(z, 0).unwrap();
        let x1 = world.encode_input(z, 1).unwrap();
        for c in 0..world.layout.nuis_start {
            assert_eq!(x0[c], x1[c], "predicate coordinate {c} moved with e");
        }
        assert_ne!(
            &x0[world.layout.nuis_start..],
            &x1[world.layout.nuis_start..]
        );
        // Flipping z_g moves only predicate coordinates.
        let x_flip = world.encode_input(z.with_value(0), 1).unwrap();
        assert_ne!(
            &x1[world.layout.pred_start..world.layout.pred_start + 4],
            &x_flip[world.layout.pred_start..world.layout.pred_start + 4]
        );
        // Determinism.
        assert_eq!(x0, world.encode_input(z, 0).unwrap());
    }

    #[test]
    fn forward_identity_single_layer_is_matvec() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let model = LowLevelModel {
            widths: vec![2, 2],
            weights: vec![w.clone()],
            biases: vec![vec![0.0, 0.0]],
            activation: ActivationKind::Identity,
            output_groups: BTreeMap::from([("a".to_string(), BTreeSet::from([0]))]),
            score: ScoreSpec::LogOdds { target: "a".into(), competitors: vec!["a".into()] },
            attribute_labels: vec![],
        };
        let trace = model.forward(&[1.0, 1.0]).unwrap();
        assert_eq!(trace.logits(), w.matvec(&[1.0, 1.0]).as_slice());
    }

    #[test]
    fn forward_zero_input_zero_bias_is_zero() {
        let mut spec = micro_spec(5);
        spec.bias_scale = 0.0;
        spec.activation = ActivationKind::Tanh;
        let world = build_world(spec).unwrap();
        let trace = world.model.forward(&vec![0.0; 15]).unwrap();
        for layer in &trace.layers {
            assert!(layer.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_matches_straight_line_reimplementation() {
        // Independent oracle: an explicit loop with no shared code path.
        let mut spec = micro_spec(11);
        spec.layer_widths = vec![8, 7, 6];
        spec.planted_predicate_sites =
            [SiteId::new(1, 0), SiteId::new(2, 0), SiteId::new(3, 0)].into();
        spec.planted_cue_sites = [SiteId::new(1, 1)].into();
        let world = build_world(spec).unwrap();
        let x: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
        let trace = world.model.forward(&x).unwrap();

        let m = &world.model;
        let mut acts = x.clone();
        for l in 0..m.widths.len() - 1 {
            let mut next = vec![0.0; m.widths[l + 1]];
            for (r, slot) in next.iter_mut().enumerate() {
                let mut s = m.biases[l][r];
                for c in 0..m.widths[l] {
                    s += m.weights[l][(r, c)] * acts[c];
                }
                *slot = if l + 1 == m.widths.len() - 1 { s } else { s.tanh() };
            }
            acts = next;
            for (a, b) in acts.iter().zip(&trace.layers[l + 1]) {
                assert!((a - b).abs() < 1e-15, "layer {l} mismatch");
            }
        }
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let world = build_world(micro_spec(2)).unwrap();
        assert!(matches!(
            world.model.forward(&[0.0; 3]),
            Err(WorldError::InputDimensionMismatch { got: 3, expected: 15 })
        ));
    }

    #[test]
    fn task_score_singleton_groups() {
        let world = build_world(micro_spec(2)).unwrap();
        let trace = ActivationTrace { layers: vec![vec![10.0, 0.0, 0.0]], annotation: None };
        assert_eq!(world.task_score(&trace).unwrap(), 10.0);
        let sym = ActivationTrace { layers: vec![vec![1.5, 1.5, 1.5]], annotation: None };
        assert_eq!(world.task_score(&sym).unwrap(), 0.0);
    }

    #[test]
    fn task_score_multi_token_matches_brute_force() {
        let mut spec = micro_spec(2);
        spec.output_groups = [
            ("inclusive".to_string(), BTreeSet::from([0, 1])),
            ("masculine".to_string(), BTreeSet::from([2, 3])),
            ("feminine".to_string(), BTreeSet::from([4])),
        ]
        .into();
        spec.planted_predicate_sites.clear();
        spec.planted_cue_sites.clear();
        let world = build_world(spec).unwrap();
        let logits = vec![0.3, -1.2, 0.7, 0.1, -0.4];
        let trace = ActivationTrace { layers: vec![logits.clone()], annotation: None };
        let got = world.task_score(&trace).unwrap();
        let sum = |units: &[usize]| units.iter().map(|&u| logits[u].exp()).sum::<f64>().ln();
        let expected = sum(&[0, 1]) - sum(&[2, 3]).max(sum(&[4]));
        assert!((got - expected).abs() < 1e-14);
    }

    #[test]
    fn ground_truth_echoes_planted_sets() {
        let world = build_world(micro_spec(9)).unwrap();
        let (p, c) = world.ground_truth();
        assert_eq!(p, &BTreeSet::from([SiteId::new(1, 0), SiteId::new(1, 1)]));
        assert_eq!(c, &BTreeSet::from([SiteId::new(1, 2)]));
        assert!(p.is_disjoint(c));
    }

    #[test]
    fn predicted_directions_follow_group_ordering() {
        let world = build_world(micro_spec(4)).unwrap();
        let m = world.value_index("masculine").unwrap();
        let f = world.value_index("feminine").unwrap();
        let incl = world.value_index("inclusive").unwrap();
        let amb = world.value_index("ambiguous").unwrap();
        assert_eq!(world.predicted_direction(m, incl), Some(1));
        assert_eq!(world.predicted_direction(incl, m), Some(-1));
        assert_eq!(world.predicted_direction(incl, amb), Some(-1));
        // Masculine vs feminine tie: no testable direction.
        assert_eq!(world.predicted_direction(m, f), None);
        assert_eq!(world.predicted_direction(m, m), None);
    }

    #[test]
    fn bimodal_channels_split_at_nuisance_block() {
        let mut spec = micro_spec(4);
        spec.modality = Modality::Bimodal;
        spec.score = ScoreSpec::CorrectAttribute;
        spec.output_groups = [
            ("masculine".to_string(), BTreeSet::from([0])),
            ("feminine".to_string(), BTreeSet::from([1])),
            ("inclusive".to_string(), BTreeSet::from([2])),
            ("ambiguous".to_string(), BTreeSet::from([3])),
        ]
        .into();
        spec.planted_predicate_sites = (0..4).map(|u| SiteId::new(1, u)).collect();
        spec.planted_cue_sites = [SiteId::new(1, 5)].into();
        let world = build_world(spec).unwrap();
        let z = PredicateInstance::new(1, 2);
        let x0 = world.encode_input(z, 0).unwrap();
        let x1 = world.encode_input(z, 1).unwrap();
        let (img0, txt0) = world.input_channels(&x0);
        let (img1, txt1) = world.input_channels(&x1);
        assert_eq!(img0, img1, "image channel is fixed by z");
        assert_ne!(txt0, txt1, "text channel varies with e");
    }

    #[test]
    fn bimodal_run_scores_correct_attribute() {
        let mut spec = micro_spec(6);
        spec.modality = Modality::Bimodal;
        spec.score = ScoreSpec::CorrectAttribute;
        spec.output_groups = [
            ("masculine".to_string(), BTreeSet::from([0])),
            ("feminine".to_string(), BTreeSet::from([1])),
            ("inclusive".to_string(), BTreeSet::from([2])),
            ("ambiguous".to_string(), BTreeSet::from([3])),
        ]
        .into();
        spec.planted_predicate_sites = (0..4).map(|u| SiteId::new(1, u)).collect();
        spec.planted_cue_sites = [SiteId::new(1, 5)].into();
        let world = build_world(spec).unwrap();
        for g in 0..4 {
            let trace = world.run(PredicateInstance::new(0, g), 1).unwrap();
            let score = world.task_score(&trace).unwrap();
            // log p(correct) should be close to 0 (most mass on the correct group).
            assert!(score > -0.7, "g={g}: {score}");
            assert!(score < 0.0);
        }
    }
}
