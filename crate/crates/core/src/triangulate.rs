//! The triangulation acceptance engine.
//!
//! A mechanism class is accepted when a preregistered mixture of
//! interventions — knockouts, predicate-swap patches, predicate-matched
//! stability patches, and cue-only falsifiers — behaves the way the abstract
//! predicate model predicts, both pooled and conditioned on every base
//! environment. Each sampled intervention yields a Bernoulli indicator; the
//! tally feeds a conjugate Beta posterior, an equal-tailed credible
//! interval, and the decision rule `t̂ ≥ η ∧ min_e t̂(e) ≥ η`, with η
//! calibrated so placebo circuits are accepted at a target rate α.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beta::{BetaError, BetaParams};
use crate::intervene::{
    apply_knockout, apply_patch, Ablation, Circuit, Intervention, InterventionError,
    InterventionKind,
};
use crate::scalar::Real;
use crate::scenario::{BaseEnvLaw, InterventionDistribution, ScenarioData};
use crate::seeding::{child_seed, stream_rng};
use crate::tmap::{on_manifold_distance, TranslationMap};
use crate::world::{ScoreSpec, TraceAnnotation, World, WorldError};
use rand::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum TriangulationError {
    #[error("threshold {name} invalid: {value}")]
    BadThreshold { name: &'static str, value: f64 },
    #[error("mechanism {label:?} lacks a circuit for environment {env}")]
    MissingCircuit { label: String, env: usize },
    #[error(
        "mechanism {label:?} needs a translation map for ({base} <- {source_env}): \
         circuit dimensions differ ({base_dim} vs {source_dim})"
    )]
    MissingMap { label: String, base: usize, source_env: usize, base_dim: usize, source_dim: usize },
    #[error("estimator needs n ≥ 1 interventions")]
    ZeroSamples,
    #[error("sampling failed for family {family}: {reason}")]
    Sampling { family: InterventionKind, reason: String },
    #[error("calibration needs ≥ {needed} placebo mechanisms, got {got}")]
    TooFewPlacebos { needed: usize, got: usize },
    #[error(transparent)]
    Intervention(#[from] InterventionError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Beta(#[from] BetaError),
}

/// The preregistered acceptance-region thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds<R> {
    /// Minimum necessity drop under knockout.
    pub tau_n: R,
    /// Minimum directed transfer under predicate-swap patching.
    pub tau_s: R,
    /// Tolerable score change for stability and cue-only interventions.
    pub epsilon: R,
    /// On-manifold bound on activation distortion for translated patches.
    pub delta: R,
    /// Minimum triangulation score for acceptance.
    pub eta: R,
    /// Target placebo acceptance rate used in calibration.
    pub alpha: R,
}

impl<R: Real> Thresholds<R> {
    pub fn validate(&self) -> Result<(), TriangulationError> {
        let check = |name: &'static str, v: R, ok: bool| {
            if v.is_finite() && ok {
                Ok(())
            } else {
                Err(TriangulationError::BadThreshold { name, value: v.to_f64_lossy() })
            }
        };
        check("tau_n", self.tau_n, self.tau_n > R::zero())?;
        check("tau_s", self.tau_s, self.tau_s > R::zero())?;
        check("epsilon", self.epsilon, self.epsilon >= R::zero())?;
        check("delta", self.delta, self.delta > R::zero())?;
        check("eta", self.eta, self.eta > R::zero() && self.eta < R::one())?;
        check("alpha", self.alpha, self.alpha > R::zero() && self.alpha < R::one())?;
        Ok(())
    }
}

/// Necessity indicator: the knockout drop reaches τ_N (boundary inclusive).
pub fn sim_necessity<R: Real>(delta_ko: R, thresholds: &Thresholds<R>) -> bool {
    delta_ko >= thresholds.tau_n
}

/// Sufficiency indicator: the swap moves the score in the predicted
/// direction by at least τ_S, and the injected activations stay within the
/// on-manifold bound δ.
pub fn sim_sufficiency<R: Real>(
    delta_swap: R,
    direction: i8,
    distortion: R,
    thresholds: &Thresholds<R>,
) -> bool {
    let dir = R::from_i8(direction).unwrap();
    dir * delta_swap >= thresholds.tau_s && distortion <= thresholds.delta
}

/// Invariance indicator for stability and cue-only deltas: |Δ| ≤ ε
/// (boundary inclusive).
pub fn sim_invariance<R: Real>(delta: R, thresholds: &Thresholds<R>) -> bool {
    delta.abs() <= thresholds.epsilon
}

/// The unit under test: an environment-indexed family of circuits, the
/// translation maps between them, and nominated cue circuits as negative
/// controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismClass<R> {
    pub label: String,
    pub circuits: BTreeMap<usize, Circuit>,
    /// Keyed (base/target env, source env).
    pub maps: BTreeMap<(usize, usize), TranslationMap<R>>,
    pub cue_circuits: BTreeMap<usize, Circuit>,
}

impl<R: Real> MechanismClass<R> {
    pub fn validate(&self, environments: usize) -> Result<(), TriangulationError> {
        for e in 0..environments {
            let circuit = self
                .circuits
                .get(&e)
                .ok_or(TriangulationError::MissingCircuit { label: self.label.clone(), env: e })?;
            for s in 0..environments {
                if s == e {
                    continue;
                }
                let source = self.circuits.get(&s).ok_or(TriangulationError::MissingCircuit {
                    label: self.label.clone(),
                    env: s,
                })?;
                if circuit.dim() != source.dim() && !self.maps.contains_key(&(e, s)) {
                    return Err(TriangulationError::MissingMap {
                        label: self.label.clone(),
                        base: e,
                        source_env: s,
                        base_dim: circuit.dim(),
                        source_dim: source.dim(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn map_for(&self, base_env: usize, source_env: usize) -> Option<&TranslationMap<R>> {
        if base_env == source_env {
            None
        } else {
            self.maps.get(&(base_env, source_env))
        }
    }

    pub fn circuit(&self, env: usize) -> Result<&Circuit, TriangulationError> {
        self.circuits
            .get(&env)
            .ok_or(TriangulationError::MissingCircuit { label: self.label.clone(), env })
    }

    pub fn cue_circuit(&self, env: usize) -> Option<&Circuit> {
        self.cue_circuits.get(&env)
    }
}

/// Failure taxonomy rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureKind {
    /// The target token group has no support.
    Lexicalization,
    /// Positive score but the realized output lands in a competitor group.
    Agreement,
    /// Cue-only or stability violation.
    CueSensitivity,
    /// Effect present but below (or above) its threshold.
    ThresholdMiss,
}

/// Outcome of one evaluated intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome<R> {
    pub pass: bool,
    pub kind: InterventionKind,
    pub base_env: usize,
    pub delta: R,
    pub distortion: Option<R>,
    pub failure: Option<FailureKind>,
}

/// Draws the `index`-th intervention of a run. Deterministic in
/// `(master_seed, index)` and independent of evaluation order.
pub fn sample_intervention<R: Real>(
    p: &InterventionDistribution,
    data: &ScenarioData<R>,
    master_seed: u64,
    index: u64,
) -> Result<Intervention, TriangulationError> {
    let mut rng = stream_rng(master_seed, "intervention", index);
    let weights = p.weights.normalized().map_err(|e| TriangulationError::Sampling {
        family: InterventionKind::Knockout,
        reason: e.to_string(),
    })?;

    let roll: f64 = rng.gen();
    let kind = if roll < weights.knockout {
        InterventionKind::Knockout
    } else if roll < weights.knockout + weights.predicate_swap {
        InterventionKind::PredicateSwap
    } else if roll < weights.knockout + weights.predicate_swap + weights.stability {
        InterventionKind::Stability
    } else {
        InterventionKind::CueOnly
    };

    if data.eval.is_empty() {
        return Err(TriangulationError::Sampling {
            family: kind,
            reason: "evaluation split is empty".into(),
        });
    }
    let anchor = data.eval[rng.gen_range(0..data.eval.len())];
    let envs = data.environments;
    let base_env = match &p.base_env_law {
        BaseEnvLaw::Uniform => rng.gen_range(0..envs),
        BaseEnvLaw::Weighted(w) => {
            let total: f64 = w.iter().sum();
            let mut t = rng.gen_range(0.0..total);
            let mut pick = envs - 1;
            for (e, &we) in w.iter().enumerate() {
                if t < we {
                    pick = e;
                    break;
                }
                t -= we;
            }
            pick
        }
    };

    let base_z = data.anchors[anchor];
    let (source_z, source_env, predicted_direction, ablation) = match kind {
        InterventionKind::Knockout => (None, None, None, Some(p.ablation)),
        InterventionKind::PredicateSwap => {
            if data.swap_values.is_empty() {
                return Err(TriangulationError::Sampling {
                    family: kind,
                    reason: "no swap sibling with a defined direction exists".into(),
                });
            }
            let g = data.swap_values[rng.gen_range(0..data.swap_values.len())];
            let e_s = rng.gen_range(0..envs);
            (Some(base_z.with_value(g)), Some(e_s), Some(data.directions[&g]), None)
        }
        InterventionKind::Stability | InterventionKind::CueOnly => {
            if envs < 2 {
                return Err(TriangulationError::Sampling {
                    family: kind,
                    reason: "cross-environment interventions need ≥ 2 environments".into(),
                });
            }
            let mut e_s = rng.gen_range(0..envs - 1);
            if e_s >= base_env {
                e_s += 1;
            }
            (Some(base_z), Some(e_s), None, None)
        }
    };

    Ok(Intervention {
        kind,
        index,
        anchor,
        base_z,
        base_env,
        source_z,
        source_env,
        ablation,
        predicted_direction,
        seed: child_seed(master_seed, "intervention-aux", index),
    })
}

fn scored<R: Real>(
    world: &World<R>,
    mut trace: crate::world::ActivationTrace<R>,
    annotation: TraceAnnotation,
) -> Result<(R, crate::world::ActivationTrace<R>), WorldError> {
    trace.annotation = Some(annotation);
    let score = world.task_score(&trace)?;
    Ok((score, trace))
}

/// Checks the agreement-failure condition on an intervened trace: positive
/// score while the realized (argmax) output unit sits in a competitor group.
fn agreement_violation<R: Real>(
    world: &World<R>,
    score: R,
    trace: &crate::world::ActivationTrace<R>,
) -> bool {
    let ScoreSpec::LogOdds { competitors, .. } = &world.model.score else {
        return false;
    };
    if score <= R::zero() {
        return false;
    }
    let logits = trace.logits();
    let mut argmax = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[argmax] {
            argmax = i;
        }
    }
    competitors
        .iter()
        .filter_map(|label| world.model.output_groups.get(label))
        .any(|units| units.contains(&argmax))
}

/// Evaluates one sampled intervention against a mechanism class, returning
/// the Bernoulli outcome and its diagnostics.
pub fn evaluate_intervention<R: Real>(
    iv: &Intervention,
    mechanism: &MechanismClass<R>,
    world: &World<R>,
    thresholds: &Thresholds<R>,
    data: &ScenarioData<R>,
) -> Result<EvalOutcome<R>, TriangulationError> {
    let circuit_b = mechanism.circuit(iv.base_env)?;
    let (x_b, ann_b) = data.member(iv.anchor, iv.base_env);
    let model = &world.model;

    let clean = match scored(world, model.forward(x_b)?, ann_b) {
        Ok((score, trace)) => Some((score, trace)),
        Err(WorldError::EmptyTargetSupport) | Err(WorldError::EmptyOutputGroup(_)) => None,
        Err(e) => return Err(e.into()),
    };
    let Some((m_clean, _)) = clean else {
        return Ok(EvalOutcome {
            pass: false,
            kind: iv.kind,
            base_env: iv.base_env,
            delta: R::zero(),
            distortion: None,
            failure: Some(FailureKind::Lexicalization),
        });
    };

    let (delta, distortion, trace, pass) = match iv.kind {
        InterventionKind::Knockout => {
            let context = data.all_member_inputs();
            let ko = apply_knockout(
                model,
                x_b,
                circuit_b,
                iv.ablation.unwrap_or(Ablation::Zero),
                &context,
                iv.seed,
            )?;
            let (m_ko, trace) = scored(world, ko, ann_b)?;
            let delta = m_clean - m_ko;
            (delta, None, trace, sim_necessity(delta, thresholds))
        }
        InterventionKind::PredicateSwap => {
            let source_env = iv.source_env.expect("swap has a source");
            let g = iv.source_z.expect("swap has a source value").z_g;
            let (x_s, _) = data.sibling(iv.anchor, g, source_env);
            let circuit_s = mechanism.circuit(source_env)?;
            let map = mechanism.map_for(iv.base_env, source_env);
            let patched = apply_patch(model, x_b, x_s, circuit_b, circuit_s, map)?;
            let (m_patched, trace) = scored(world, patched, ann_b)?;
            let delta = m_patched - m_clean;

            // On-manifold reference: the base environment's own realization
            // of the source predicate value. The injected state should look
            // like a state the base environment could produce.
            let source_trace = model.forward(x_s)?;
            let source_values: Vec<R> =
                circuit_s.ordered_sites().map(|s| source_trace.site(s)).collect();
            let (x_ref, _) = data.sibling(iv.anchor, g, iv.base_env);
            let ref_trace = model.forward(x_ref)?;
            let ref_values: Vec<R> =
                circuit_b.ordered_sites().map(|s| ref_trace.site(s)).collect();
            let distortion = on_manifold_distance(map, &source_values, &ref_values)
                .map_err(InterventionError::from)?;

            let direction = iv.predicted_direction.expect("swap has a direction");
            let pass = sim_sufficiency(delta, direction, distortion, thresholds);
            (delta, Some(distortion), trace, pass)
        }
        InterventionKind::Stability => {
            let source_env = iv.source_env.expect("stability has a source");
            let (x_s, _) = data.member(iv.anchor, source_env);
            let circuit_s = mechanism.circuit(source_env)?;
            let map = mechanism.map_for(iv.base_env, source_env);
            let patched = apply_patch(model, x_b, x_s, circuit_b, circuit_s, map)?;
            let (m_patched, trace) = scored(world, patched, ann_b)?;
            let delta = m_patched - m_clean;
            (delta, None, trace, sim_invariance(delta, thresholds))
        }
        InterventionKind::CueOnly => {
            let source_env = iv.source_env.expect("cue patch has a source");
            let (x_s, _) = data.member(iv.anchor, source_env);
            let empty = Circuit::new("cue:(none)", []);
            let cue_b = mechanism.cue_circuit(iv.base_env).unwrap_or(&empty);
            let cue_s = mechanism.cue_circuit(source_env).unwrap_or(&empty);
            if cue_b.is_empty() || cue_s.is_empty() {
                // No nominated cue circuit: the falsifier is vacuous.
                (R::zero(), None, model.forward(x_b)?, true)
            } else {
                // Raw injection: translating the cue values would rewrite
                // the surface cue back into the base environment.
                let patched = apply_patch(model, x_b, x_s, cue_b, cue_s, None)?;
                let (m_patched, trace) = scored(world, patched, ann_b)?;
                let delta = m_patched - m_clean;
                let pass = sim_invariance(delta, thresholds);
                (delta, None, trace, pass)
            }
        }
    };

    let failure = if pass {
        None
    } else if agreement_violation(world, world.task_score(&trace).unwrap_or(R::zero()), &trace) {
        Some(FailureKind::Agreement)
    } else if matches!(iv.kind, InterventionKind::CueOnly | InterventionKind::Stability) {
        Some(FailureKind::CueSensitivity)
    } else {
        Some(FailureKind::ThresholdMiss)
    };

    Ok(EvalOutcome { pass, kind: iv.kind, base_env: iv.base_env, delta, distortion, failure })
}

/// Bernoulli tally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Tally {
    pub n: u64,
    pub k: u64,
}

impl Tally {
    pub fn rate<R: Real>(&self) -> R {
        if self.n == 0 {
            R::zero()
        } else {
            R::from_u64(self.k).unwrap() / R::from_u64(self.n).unwrap()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Accept,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MechanismLabel {
    /// High score pooled and in every environment: a predicate mechanism.
    VisualPredicate,
    /// Succeeds somewhere but fails stability or cue falsifiers.
    LinguisticCue,
    /// Fails knockout or predicate swaps broadly.
    Spurious,
}

/// Counts per failure-taxonomy row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FailureTaxonomy {
    pub lexicalization: u64,
    pub agreement: u64,
    pub cue_sensitivity: u64,
    pub threshold_miss: u64,
}

impl FailureTaxonomy {
    fn record(&mut self, kind: FailureKind) {
        match kind {
            FailureKind::Lexicalization => self.lexicalization += 1,
            FailureKind::Agreement => self.agreement += 1,
            FailureKind::CueSensitivity => self.cue_sensitivity += 1,
            FailureKind::ThresholdMiss => self.threshold_miss += 1,
        }
    }
}

/// Stability/cue-only pass rates, the diagnostics mechanism classification
/// reads alongside the pooled report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueDiagnostics {
    pub stability: Tally,
    pub cue_only: Tally,
}

/// The full acceptance report for one mechanism class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "R: Real", deserialize = "R: Real"))]
pub struct TriangulationReport<R> {
    pub version: u32,
    pub mechanism: String,
    pub n: u64,
    pub k: u64,
    pub t_hat: R,
    pub per_env: BTreeMap<usize, Tally>,
    pub per_kind: BTreeMap<InterventionKind, Tally>,
    pub posterior: BetaParams<R>,
    pub credible_interval: (R, R),
    pub credible_level: R,
    pub decision: Decision,
    pub eta_used: R,
    pub failure_taxonomy: FailureTaxonomy,
    pub class_label: MechanismLabel,
    /// Environments with positive sampling weight but zero samples; any
    /// entry forces rejection (invariance unverifiable).
    pub untested_envs: Vec<usize>,
}

impl<R: Real> TriangulationReport<R> {
    pub fn cue_diagnostics(&self) -> CueDiagnostics {
        CueDiagnostics {
            stability: self.per_kind.get(&InterventionKind::Stability).copied().unwrap_or_default(),
            cue_only: self.per_kind.get(&InterventionKind::CueOnly).copied().unwrap_or_default(),
        }
    }
}

/// Runs the n sampled interventions of a triangulation pass, in parallel,
/// deterministically in `(master_seed, index)`.
pub fn run_outcomes<R: Real>(
    mechanism: &MechanismClass<R>,
    world: &World<R>,
    p: &InterventionDistribution,
    data: &ScenarioData<R>,
    n: u64,
    thresholds: &Thresholds<R>,
    master_seed: u64,
) -> Result<Vec<(Intervention, EvalOutcome<R>)>, TriangulationError> {
    mechanism.validate(data.environments)?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let iv = sample_intervention(p, data, master_seed, i)?;
            let outcome = evaluate_intervention(&iv, mechanism, world, thresholds, data)?;
            Ok((iv, outcome))
        })
        .collect()
}

/// The estimator: samples n interventions, tallies Bernoulli outcomes
/// overall and per environment, and assembles the report with the conjugate
/// posterior, the equal-tailed credible interval, the decision, the failure
/// taxonomy, and the mechanism classification.
#[allow(clippy::too_many_arguments)]
pub fn estimate_score<R: Real>(
    mechanism: &MechanismClass<R>,
    world: &World<R>,
    p: &InterventionDistribution,
    data: &ScenarioData<R>,
    n: u64,
    thresholds: &Thresholds<R>,
    master_seed: u64,
    prior: BetaParams<R>,
    credible_level: R,
) -> Result<TriangulationReport<R>, TriangulationError> {
    if n == 0 {
        return Err(TriangulationError::ZeroSamples);
    }
    thresholds.validate()?;
    let outcomes = run_outcomes(mechanism, world, p, data, n, thresholds, master_seed)?;
    report_from_outcomes(
        mechanism.label.clone(),
        &outcomes,
        data,
        p,
        thresholds,
        prior,
        credible_level,
    )
}

/// Assembles a report from already-evaluated outcomes.
pub fn report_from_outcomes<R: Real>(
    mechanism: String,
    outcomes: &[(Intervention, EvalOutcome<R>)],
    data: &ScenarioData<R>,
    p: &InterventionDistribution,
    thresholds: &Thresholds<R>,
    prior: BetaParams<R>,
    credible_level: R,
) -> Result<TriangulationReport<R>, TriangulationError> {
    let n = outcomes.len() as u64;
    let mut k = 0u64;
    let mut per_env: BTreeMap<usize, Tally> = BTreeMap::new();
    let mut per_kind: BTreeMap<InterventionKind, Tally> = BTreeMap::new();
    let mut taxonomy = FailureTaxonomy::default();
    for (_, o) in outcomes {
        let env = per_env.entry(o.base_env).or_default();
        env.n += 1;
        let kind = per_kind.entry(o.kind).or_default();
        kind.n += 1;
        if o.pass {
            k += 1;
            env.k += 1;
            kind.k += 1;
        } else if let Some(f) = o.failure {
            taxonomy.record(f);
        }
    }

    let untested_envs: Vec<usize> = (0..data.environments)
        .filter(|&e| {
            p.base_env_law.probability(e, data.environments) > 0.0
                && per_env.get(&e).map_or(true, |t| t.n == 0)
        })
        .collect();

    let t_hat = R::from_u64(k).unwrap() / R::from_u64(n.max(1)).unwrap();
    let posterior = prior.update(k, n)?;
    let credible_interval = posterior.credible_interval(credible_level)?;

    let min_env_rate = per_env
        .values()
        .filter(|t| t.n > 0)
        .map(|t| t.rate::<R>())
        .fold(R::infinity(), |a, b| a.min(b));
    let decision = if untested_envs.is_empty()
        && t_hat >= thresholds.eta
        && min_env_rate >= thresholds.eta
    {
        Decision::Accept
    } else {
        Decision::Reject
    };

    let mut report = TriangulationReport {
        version: 1,
        mechanism,
        n,
        k,
        t_hat,
        per_env,
        per_kind,
        posterior,
        credible_interval,
        credible_level,
        decision,
        eta_used: thresholds.eta,
        failure_taxonomy: taxonomy,
        class_label: MechanismLabel::Spurious,
        untested_envs,
    };
    let diag = report.cue_diagnostics();
    report.class_label = classify_mechanism(&report, &diag);
    Ok(report)
}

/// Classification per the three-row taxonomy: predicate mechanism,
/// linguistic/cue mechanism, or spurious.
pub fn classify_mechanism<R: Real>(
    report: &TriangulationReport<R>,
    cue: &CueDiagnostics,
) -> MechanismLabel {
    let eta = report.eta_used;
    let tested = report.per_env.values().filter(|t| t.n > 0);
    let min_env = tested.clone().map(|t| t.rate::<R>()).fold(R::infinity(), |a, b| a.min(b));
    let max_env = report
        .per_env
        .values()
        .filter(|t| t.n > 0)
        .map(|t| t.rate::<R>())
        .fold(R::neg_infinity(), |a, b| a.max(b));

    if report.untested_envs.is_empty() && min_env >= eta {
        return MechanismLabel::VisualPredicate;
    }
    let stab_rate = if cue.stability.n > 0 { cue.stability.rate::<R>() } else { R::one() };
    let cue_rate = if cue.cue_only.n > 0 { cue.cue_only.rate::<R>() } else { R::one() };
    if max_env >= eta && (stab_rate < eta || cue_rate < eta) {
        return MechanismLabel::LinguisticCue;
    }
    MechanismLabel::Spurious
}

/// Result of η calibration on placebo mechanisms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "R: Real", deserialize = "R: Real"))]
pub struct EtaCalibration<R> {
    pub eta: R,
    pub placebo_scores: Vec<R>,
    /// Placebo acceptance rate at the returned η (pooled-score semantics).
    pub rate_at_eta: R,
}

/// Minimum number of placebo mechanisms calibration accepts.
pub const MIN_PLACEBOS: usize = 20;

/// Calibrates η so that the placebo acceptance rate (pooled scores) is as
/// close to α as the discrete score distribution allows, clamped to
/// `[floor, ceiling]`.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_eta<R: Real>(
    placebos: &[MechanismClass<R>],
    world: &World<R>,
    p: &InterventionDistribution,
    data: &ScenarioData<R>,
    n: u64,
    thresholds: &Thresholds<R>,
    alpha: R,
    master_seed: u64,
    floor: R,
    ceiling: R,
) -> Result<EtaCalibration<R>, TriangulationError> {
    if placebos.len() < MIN_PLACEBOS {
        return Err(TriangulationError::TooFewPlacebos {
            needed: MIN_PLACEBOS,
            got: placebos.len(),
        });
    }
    let scores: Vec<R> = placebos
        .par_iter()
        .enumerate()
        .map(|(i, placebo)| {
            let seed = child_seed(master_seed, "placebo", i as u64);
            let outcomes = run_outcomes(placebo, world, p, data, n, thresholds, seed)?;
            let k = outcomes.iter().filter(|(_, o)| o.pass).count();
            Ok(R::from_usize(k).unwrap() / R::from_u64(n).unwrap())
        })
        .collect::<Result<_, TriangulationError>>()?;

    let mut sorted = scores.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.dedup();

    // Candidate thresholds: midpoints between adjacent distinct scores plus
    // one candidate above the maximum (acceptance rate zero).
    let mut candidates: Vec<R> = Vec::with_capacity(sorted.len() + 1);
    for w in sorted.windows(2) {
        candidates.push((w[0] + w[1]) / R::of(2.0));
    }
    candidates.push(*sorted.last().unwrap() + R::of(1e-9));
    if sorted.len() == 1 {
        candidates.push(*sorted.first().unwrap());
    }

    let total = R::from_usize(scores.len()).unwrap();
    let rate_at = |eta: R| -> R {
        R::from_usize(scores.iter().filter(|&&s| s >= eta).count()).unwrap() / total
    };
    let mut best = candidates[0];
    let mut best_gap = R::infinity();
    for &c in &candidates {
        let gap = (rate_at(c) - alpha).abs();
        // Prefer the stricter (higher) threshold on ties.
        if gap < best_gap || (gap == best_gap && c > best) {
            best_gap = gap;
            best = c;
        }
    }
    let eta = best.max(floor).min(ceiling);
    Ok(EtaCalibration { eta, rate_at_eta: rate_at(eta), placebo_scores: scores })
}
