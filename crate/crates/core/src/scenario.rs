//! Scenario configuration and dataset construction.
//!
//! A scenario is the human-editable description of one experiment: the world
//! spec, the anchor dataset, the intervention mixture, acceptance settings,
//! and baseline toggles. It parses from TOML and hashes canonically so runs
//! can be replayed bit-for-bit.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::family::{build_reference_family, inject_violation, FamilyError, ReferenceFamily, ViolationKind};
use crate::intervene::Ablation;
use crate::scalar::Real;
use crate::seeding::child_seed;
use crate::world::{PredicateInstance, TraceAnnotation, World, WorldError, WorldFamily, WorldSpec};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("failed to read scenario file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown anchor predicate value {0:?}")]
    UnknownAnchorValue(String),
    #[error("dataset needs ≥ 2 anchors, got {0}")]
    TooFewAnchors(usize),
    #[error("{requested} anchors exceed the semantic block width {available}")]
    TooManyAnchors { requested: usize, available: usize },
    #[error("calibration fraction must lie in (0,1), got {0}")]
    BadCalibrationFraction(f64),
    #[error("calibration split left no evaluation anchors")]
    EmptyEvaluationSplit,
    #[error("no swap sibling with a defined direction exists for anchor value {0:?}")]
    NoSwapSiblings(String),
    #[error("intervention weights are invalid: {0}")]
    BadWeights(String),
    #[error("base environment law has {got} weights for {expected} environments")]
    BadEnvLaw { got: usize, expected: usize },
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Family(#[from] FamilyError),
}

/// Mixture weights over the four intervention families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindWeights {
    pub knockout: f64,
    pub predicate_swap: f64,
    pub stability: f64,
    pub cue_only: f64,
}

impl Default for KindWeights {
    fn default() -> Self {
        Self { knockout: 0.25, predicate_swap: 0.25, stability: 0.25, cue_only: 0.25 }
    }
}

impl KindWeights {
    pub fn normalized(&self) -> Result<Self, ScenarioError> {
        let parts = [self.knockout, self.predicate_swap, self.stability, self.cue_only];
        if parts.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(ScenarioError::BadWeights("weights must be finite and ≥ 0".into()));
        }
        let sum: f64 = parts.iter().sum();
        if sum <= 0.0 {
            return Err(ScenarioError::BadWeights("weights sum to zero".into()));
        }
        Ok(Self {
            knockout: self.knockout / sum,
            predicate_swap: self.predicate_swap / sum,
            stability: self.stability / sum,
            cue_only: self.cue_only / sum,
        })
    }
}

/// How base environments are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseEnvLaw {
    Uniform,
    Weighted(Vec<f64>),
}

impl Default for BaseEnvLaw {
    fn default() -> Self {
        Self::Uniform
    }
}

impl BaseEnvLaw {
    pub fn validate(&self, envs: usize) -> Result<(), ScenarioError> {
        if let Self::Weighted(w) = self {
            if w.len() != envs {
                return Err(ScenarioError::BadEnvLaw { got: w.len(), expected: envs });
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                return Err(ScenarioError::BadWeights("environment weights invalid".into()));
            }
        }
        Ok(())
    }

    /// Probability the law assigns to environment `e`.
    pub fn probability(&self, e: usize, envs: usize) -> f64 {
        match self {
            Self::Uniform => 1.0 / envs as f64,
            Self::Weighted(w) => w[e] / w.iter().sum::<f64>(),
        }
    }
}

/// The preregistered intervention distribution P.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionDistribution {
    #[serde(default)]
    pub weights: KindWeights,
    #[serde(default)]
    pub base_env_law: BaseEnvLaw,
    #[serde(default = "default_ablation")]
    pub ablation: Ablation,
}

fn default_ablation() -> Ablation {
    Ablation::Zero
}

impl Default for InterventionDistribution {
    fn default() -> Self {
        Self {
            weights: KindWeights::default(),
            base_env_law: BaseEnvLaw::Uniform,
            ablation: Ablation::Zero,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_anchors: usize,
    /// Predicate-domain label of the anchor value (the behavior under study).
    pub anchor_value: String,
    #[serde(default = "default_calibration_fraction")]
    pub calibration_fraction: f64,
}

fn default_calibration_fraction() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceConfig {
    pub n_interventions: usize,
    #[serde(default = "default_prior")]
    pub prior: (f64, f64),
    #[serde(default = "default_credible_level")]
    pub credible_level: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_placebos")]
    pub placebos: usize,
    /// Overrides the calibrated η when set.
    #[serde(default)]
    pub eta_override: Option<f64>,
    #[serde(default = "default_eta_floor")]
    pub eta_floor: f64,
    #[serde(default = "default_eta_ceiling")]
    pub eta_ceiling: f64,
}

fn default_prior() -> (f64, f64) {
    (1.0, 1.0)
}
fn default_credible_level() -> f64 {
    0.95
}
fn default_alpha() -> f64 {
    0.05
}
fn default_placebos() -> usize {
    100
}
fn default_eta_floor() -> f64 {
    0.05
}
fn default_eta_ceiling() -> f64 {
    0.99
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_ig_baseline")]
    pub baseline: IgBaseline,
    #[serde(default = "default_keep_threshold")]
    pub keep_threshold: f64,
    #[serde(default = "default_eps_m")]
    pub eps_m: f64,
    #[serde(default = "default_ridge")]
    pub probe_ridge: f64,
    #[serde(default = "default_ridge")]
    pub map_ridge: f64,
    #[serde(default = "default_holdout_fraction")]
    pub holdout_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IgBaseline {
    Zero,
    Mean,
}

fn default_steps() -> usize {
    64
}
fn default_ig_baseline() -> IgBaseline {
    IgBaseline::Zero
}
fn default_keep_threshold() -> f64 {
    0.1
}
fn default_eps_m() -> f64 {
    1e-6
}
fn default_ridge() -> f64 {
    1e-6
}
fn default_holdout_fraction() -> f64 {
    0.2
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            baseline: default_ig_baseline(),
            keep_threshold: default_keep_threshold(),
            eps_m: default_eps_m(),
            probe_ridge: default_ridge(),
            map_ridge: default_ridge(),
            holdout_fraction: default_holdout_fraction(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineToggles {
    #[serde(default = "default_true")]
    pub single_env: bool,
    #[serde(default = "default_true")]
    pub faithfulness: bool,
}

fn default_true() -> bool {
    true
}

impl Default for BaselineToggles {
    fn default() -> Self {
        Self { single_env: true, faithfulness: true }
    }
}

/// Optional explicit thresholds; anything left `None` is calibrated.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ThresholdOverrides {
    pub tau_n: Option<f64>,
    pub tau_s: Option<f64>,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
}

/// One full experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "R: Real", deserialize = "R: Real"))]
pub struct Scenario<R> {
    #[serde(default = "default_version")]
    pub version: u32,
    pub master_seed: u64,
    pub world: WorldSpec<R>,
    #[serde(default = "default_family")]
    pub world_family: WorldFamily,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub distribution: InterventionDistribution,
    pub acceptance: AcceptanceConfig,
    #[serde(default)]
    pub discovery: DiscoveryConfig,
    #[serde(default)]
    pub thresholds: ThresholdOverrides,
    #[serde(default)]
    pub baselines: BaselineToggles,
}

fn default_version() -> u32 {
    1
}

fn default_family() -> WorldFamily {
    WorldFamily::Clean
}

impl<R: Real> Scenario<R> {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Self = toml::from_str(text)?;
        Ok(scenario)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ScenarioError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Canonical content hash of the scenario.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("scenario serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_string(&hasher.finalize())
    }

    /// Builds the world this scenario describes.
    pub fn build_world(&self) -> Result<World<R>, WorldError> {
        match self.world_family {
            WorldFamily::Clean => crate::world::build_world(self.world.clone()),
            WorldFamily::CueShortcut { home_env } => {
                crate::world::build_cue_shortcut_world(self.world.clone(), home_env)
            }
        }
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// The materialized dataset: anchors, their reference families, and the
/// swap-sibling inputs, with the calibration/evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioData<R> {
    /// Domain index of the anchor predicate value g*.
    pub anchor_value: usize,
    pub anchors: Vec<PredicateInstance>,
    pub families: Vec<ReferenceFamily<R>>,
    /// Per anchor: swap value -> per-environment encoded sibling inputs.
    pub siblings: Vec<BTreeMap<usize, Vec<Vec<R>>>>,
    /// Swap values with a defined predicted direction against g*.
    pub swap_values: Vec<usize>,
    /// Predicted direction per swap value.
    pub directions: BTreeMap<usize, i8>,
    pub calib: Vec<usize>,
    pub eval: Vec<usize>,
    pub environments: usize,
}

impl<R: Real> ScenarioData<R> {
    /// The member input the harness uses for `(anchor, environment)`, with
    /// the annotation it believes the member carries.
    pub fn member(&self, anchor: usize, env: usize) -> (&[R], TraceAnnotation) {
        let member = &self.families[anchor].members[env];
        (member.input.as_slice(), member.annotation(self.anchors[anchor]))
    }

    pub fn sibling(&self, anchor: usize, g: usize, env: usize) -> (&[R], TraceAnnotation) {
        let input = &self.siblings[anchor][&g][env];
        (
            input.as_slice(),
            TraceAnnotation { z: self.anchors[anchor].with_value(g), environment: env },
        )
    }

    /// All family-member inputs, the default context population for mean
    /// ablation.
    pub fn all_member_inputs(&self) -> Vec<Vec<R>> {
        self.families
            .iter()
            .flat_map(|f| f.members.iter().map(|m| m.input.clone()))
            .collect()
    }

    /// A corrupted copy for stress tests: every family gets the same
    /// seeded violation, so one environment's members silently break the
    /// predicate-preservation assumption.
    pub fn corrupted(
        &self,
        kind: ViolationKind,
        world: &World<R>,
        seed: u64,
    ) -> Result<Self, FamilyError> {
        let mut out = self.clone();
        let violation_seed = child_seed(seed, "stress-violation", 0);
        for family in out.families.iter_mut() {
            *family = inject_violation(family, kind, world, violation_seed)?;
        }
        Ok(out)
    }
}

/// Materializes the dataset for a scenario against its built world.
pub fn build_dataset<R: Real>(
    world: &World<R>,
    scenario: &Scenario<R>,
) -> Result<ScenarioData<R>, ScenarioError> {
    let cfg = &scenario.dataset;
    let g_star = world
        .value_index(&cfg.anchor_value)
        .ok_or_else(|| ScenarioError::UnknownAnchorValue(cfg.anchor_value.clone()))?;
    if cfg.num_anchors < 2 {
        return Err(ScenarioError::TooFewAnchors(cfg.num_anchors));
    }
    if cfg.num_anchors > world.layout.sem_len {
        return Err(ScenarioError::TooManyAnchors {
            requested: cfg.num_anchors,
            available: world.layout.sem_len,
        });
    }
    if !(cfg.calibration_fraction > 0.0 && cfg.calibration_fraction < 1.0) {
        return Err(ScenarioError::BadCalibrationFraction(cfg.calibration_fraction));
    }
    scenario.distribution.weights.normalized()?;
    scenario.distribution.base_env_law.validate(world.spec.num_environments)?;

    let envs: Vec<usize> = (0..world.spec.num_environments).collect();
    let anchors: Vec<PredicateInstance> =
        (0..cfg.num_anchors).map(|s| PredicateInstance::new(s, g_star)).collect();

    let mut families = Vec::with_capacity(anchors.len());
    let mut siblings = Vec::with_capacity(anchors.len());
    let mut swap_values = Vec::new();
    let mut directions = BTreeMap::new();
    for g in 0..world.spec.predicate_domain.len() {
        if g == g_star {
            continue;
        }
        if let Some(d) = world.predicted_direction(g_star, g) {
            swap_values.push(g);
            directions.insert(g, d);
        }
    }
    if swap_values.is_empty() {
        return Err(ScenarioError::NoSwapSiblings(cfg.anchor_value.clone()));
    }

    for z in &anchors {
        families.push(build_reference_family(*z, &envs, world)?);
        let mut per_value = BTreeMap::new();
        for &g in &swap_values {
            let sib = z.with_value(g);
            let inputs = envs
                .iter()
                .map(|&e| world.encode_input(sib, e))
                .collect::<Result<Vec<_>, _>>()?;
            per_value.insert(g, inputs);
        }
        siblings.push(per_value);
    }

    let n_calib = ((cfg.num_anchors as f64) * cfg.calibration_fraction).round().max(1.0) as usize;
    if n_calib >= cfg.num_anchors {
        return Err(ScenarioError::EmptyEvaluationSplit);
    }
    let calib: Vec<usize> = (0..n_calib).collect();
    let eval: Vec<usize> = (n_calib..cfg.num_anchors).collect();

    Ok(ScenarioData {
        anchor_value: g_star,
        anchors,
        families,
        siblings,
        swap_values,
        directions,
        calib,
        eval,
        environments: world.spec.num_environments,
    })
}

/// Labeled inputs for discovery, drawn from the calibration anchors so the
/// evaluation split never leaks into stage (i).
pub fn discovery_inputs<R: Real>(
    data: &ScenarioData<R>,
) -> Vec<crate::discovery::LabeledInput<R>> {
    let mut out = Vec::new();
    for &a in &data.calib {
        for e in 0..data.environments {
            let (x, ann) = data.member(a, e);
            out.push(crate::discovery::LabeledInput { x: x.to_vec(), annotation: ann });
        }
        // Swap siblings give the probe and attribution runs predicate
        // variation as well as environment variation.
        for &g in &data.swap_values {
            for e in 0..data.environments {
                let (x, ann) = data.sibling(a, g, e);
                out.push(crate::discovery::LabeledInput { x: x.to_vec(), annotation: ann });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{ActivationKind, ScoreSpec, SiteId};
    use std::collections::BTreeSet;

    pub(crate) fn demo_toml() -> String {
        r#"
version = 1
master_seed = 42

[world]
num_environments = 3
predicate_domain = ["masculine", "feminine", "inclusive", "ambiguous"]
nuisance_dim = 3
input_dim = 19
layer_widths = [12]
activation = "tanh"
planted_predicate_sites = [{ layer = 1, unit = 0 }, { layer = 1, unit = 1 }]
planted_cue_sites = [{ layer = 1, unit = 2 }]
modality = "text-only"
seed = 7

[world.output_groups]
inclusive = [0]
masculine = [1]
feminine = [2]

[world.score]
mode = "log-odds"
target = "inclusive"
competitors = ["masculine", "feminine"]

[dataset]
num_anchors = 8
anchor_value = "inclusive"
calibration_fraction = 0.25

[acceptance]
n_interventions = 400
"#
        .to_string()
    }

    #[test]
    fn scenario_parses_with_defaults() {
        let s: Scenario<f64> = Scenario::from_toml(&demo_toml()).unwrap();
        assert_eq!(s.master_seed, 42);
        assert_eq!(s.world.planted_weight, 2.0, "default planted weight");
        assert_eq!(s.distribution.weights, KindWeights::default());
        assert_eq!(s.acceptance.prior, (1.0, 1.0));
        assert_eq!(s.acceptance.placebos, 100);
        assert_eq!(s.discovery.steps, 64);
        assert!(s.baselines.single_env);
        assert_eq!(s.world_family, WorldFamily::Clean);
    }

    #[test]
    fn scenario_hash_is_stable_and_content_sensitive() {
        let a: Scenario<f64> = Scenario::from_toml(&demo_toml()).unwrap();
        let b: Scenario<f64> = Scenario::from_toml(&demo_toml()).unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.master_seed = 43;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn dataset_spans_environments_and_splits() {
        let s: Scenario<f64> = Scenario::from_toml(&demo_toml()).unwrap();
        let world = s.build_world().unwrap();
        let data = build_dataset(&world, &s).unwrap();
        assert_eq!(data.anchors.len(), 8);
        assert_eq!(data.calib, vec![0, 1]);
        assert_eq!(data.eval, (2..8).collect::<Vec<_>>());
        assert_eq!(data.families[0].members.len(), 3);
        // Swap values: everything except the anchor and the direction-free
        // masculine/feminine tie partner. Anchor = inclusive, so masculine,
        // feminine, ambiguous all have defined directions.
        assert_eq!(data.swap_values.len(), 3);
        for (&g, &d) in &data.directions {
            assert_ne!(g, data.anchor_value);
            assert_eq!(d, -1, "all swaps away from inclusive lower the score");
        }
    }

    #[test]
    fn dataset_validation_errors() {
        let mut s: Scenario<f64> = Scenario::from_toml(&demo_toml()).unwrap();
        s.dataset.anchor_value = "neutral".into();
        let world = s.build_world().unwrap();
        assert!(matches!(
            build_dataset(&world, &s),
            Err(ScenarioError::UnknownAnchorValue(_))
        ));

        let mut s: Scenario<f64> = Scenario::from_toml(&demo_toml()).unwrap();
        s.dataset.num_anchors = 100;
        let world = s.build_world().unwrap();
        assert!(matches!(
            build_dataset(&world, &s),
            Err(ScenarioError::TooManyAnchors { requested: 100, .. })
        ));
    }

    #[test]
    fn corrupted_dataset_flips_one_member_per_family() {
        let s: Scenario<f64> = Scenario::from_toml(&demo_toml()).unwrap();
        let world = s.build_world().unwrap();
        let data = build_dataset(&world, &s).unwrap();
        let bad = data.corrupted(ViolationKind::MeaningFlip, &world, 5).unwrap();
        let mut corrupted_envs = BTreeSet::new();
        for (clean, dirty) in data.families.iter().zip(&bad.families) {
            assert!(dirty.quality < clean.quality);
            let diff: Vec<usize> = clean
                .members
                .iter()
                .zip(&dirty.members)
                .enumerate()
                .filter(|(_, (a, b))| a.input != b.input)
                .map(|(e, _)| e)
                .collect();
            assert_eq!(diff.len(), 1);
            corrupted_envs.insert(diff[0]);
        }
        // The shared seed corrupts the same environment in every family.
        assert_eq!(corrupted_envs.len(), 1);
    }

    #[test]
    fn shortcut_scenario_builds_shortcut_world() {
        let mut s: Scenario<f64> = Scenario::from_toml(&demo_toml()).unwrap();
        s.world_family = WorldFamily::CueShortcut { home_env: 0 };
        let world = s.build_world().unwrap();
        assert_eq!(world.family, WorldFamily::CueShortcut { home_env: 0 });
    }

    #[test]
    fn hand_built_spec_round_trips_toml() {
        let s: Scenario<f64> = Scenario::from_toml(&demo_toml()).unwrap();
        let text = toml::to_string(&s).unwrap();
        let back: Scenario<f64> = Scenario::from_toml(&text).unwrap();
        assert_eq!(s, back);
        assert_eq!(s.hash(), back.hash());
    }

    #[test]
    fn spec_fields_resolve_in_world() {
        let s: Scenario<f64> = Scenario::from_toml(&demo_toml()).unwrap();
        assert_eq!(s.world.activation, ActivationKind::Tanh);
        assert!(matches!(s.world.score, ScoreSpec::LogOdds { .. }));
        assert!(s.world.planted_predicate_sites.contains(&SiteId::new(1, 0)));
    }
}
