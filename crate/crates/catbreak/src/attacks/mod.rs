//! Attack procedures under one common contract.
//!
//! All methods take a [`ClassifierHandle`] (which owns the run's query
//! accounting), the instance to perturb, and an [`AttackConfig`]; they
//! return an [`AttackResult`] whose `queries` field equals the handle's
//! counter delta. Runs are strictly sequential and fully determined by
//! `(config.seed, model, instance)`; wall-clock limits are only checked
//! between evaluations so generous limits never affect results.

mod exhaustive;
mod feat;
mod gradattack;
mod greedy;

pub use exhaustive::exhaustive_attack;
pub use feat::{feat_attack, feat_b_attack};
pub use gradattack::grad_attack;
pub use greedy::{fsgs_attack, ompgs_attack};

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bandit::{reward, ucb_score_with, ArmStats, BanditConfig, RewardVariant};
use crate::categorical::{diff, Instance, Perturbation};
use crate::classifier::{Classifier, ClassifierHandle, ConfidenceVector, Objective};
use crate::error::{Error, Result};

/// Hard ceiling on enumeration sizes for the exhaustive oracle and the
/// combinatorial gradient-attack variant.
pub const ENUMERATION_GUARD: u128 = 1_000_000;

/// The attack methods shipped by this crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Feat,
    FeatB,
    Fsgs,
    Ompgs,
    Gradattack,
    Exhaustive,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Feat,
        Method::FeatB,
        Method::Fsgs,
        Method::Ompgs,
        Method::Gradattack,
        Method::Exhaustive,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Feat => "feat",
            Method::FeatB => "feat-b",
            Method::Fsgs => "fsgs",
            Method::Ompgs => "ompgs",
            Method::Gradattack => "gradattack",
            Method::Exhaustive => "exhaustive",
        }
    }

    /// Whether the method needs gradients from the target.
    pub fn white_box(&self) -> bool {
        matches!(self, Method::Feat | Method::Ompgs | Method::Gradattack)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feat" => Ok(Method::Feat),
            "feat-b" => Ok(Method::FeatB),
            "fsgs" => Ok(Method::Fsgs),
            "ompgs" => Ok(Method::Ompgs),
            "gradattack" => Ok(Method::Gradattack),
            "exhaustive" => Ok(Method::Exhaustive),
            other => Err(Error::InvalidArg(format!("unknown method '{other}'"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Shared attack parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// Maximum number of distinct modified features.
    pub budget: usize,
    /// Wall-clock limit in seconds, checked between evaluations.
    pub time_limit: f64,
    /// Number of candidate features kept per ranking round.
    pub top_l: usize,
    /// Inner UCB rounds per ranking refresh; defaults to a third of the
    /// budget (at least one).
    pub tau: Option<usize>,
    pub alpha: f64,
    pub lambda: f64,
    pub reward_variant: RewardVariant,
    pub seed: u64,
    /// Abort greedy search when a single iteration would enumerate more
    /// subsets of the modified set than this.
    pub fsgs_subset_cap: u64,
    /// Depth of the combinatorial gradient-attack variant; 0 keeps the
    /// default single-flip greedy behaviour.
    pub grad_combo_depth: usize,
    /// Let attacks delete present feature values (off by default; the
    /// substitution/insertion set matches the common threat model).
    pub allow_delete: bool,
    /// Aggregate gradient rows by Euclidean norm instead of the largest
    /// absolute slot when ranking features.
    pub omp_row_norm: bool,
    /// Use the alpha^2 exploration bonus variant in UCB scores.
    pub appendix_bonus: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            budget: 6,
            time_limit: 60.0,
            top_l: 10,
            tau: None,
            alpha: 4.0,
            lambda: 1.0,
            reward_variant: RewardVariant::Perturbed,
            seed: 0,
            fsgs_subset_cap: 1 << 16,
            grad_combo_depth: 0,
            allow_delete: false,
            omp_row_norm: false,
            appendix_bonus: false,
        }
    }
}

impl AttackConfig {
    pub fn with_budget(budget: usize) -> Self {
        Self { budget, ..Self::default() }
    }

    /// Inner UCB rounds per window: `tau` if set, otherwise
    /// `max(1, budget / 3)`.
    pub fn effective_tau(&self) -> usize {
        self.tau.unwrap_or_else(|| (self.budget / 3).max(1))
    }

    pub fn bandit(&self) -> BanditConfig {
        BanditConfig {
            alpha: self.alpha,
            lambda: self.lambda,
            appendix_bonus: self.appendix_bonus,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_l == 0 {
            return Err(Error::InvalidArg("top_l must be >= 1".into()));
        }
        if self.effective_tau() == 0 {
            return Err(Error::InvalidArg("tau must be >= 1".into()));
        }
        if self.time_limit.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::InvalidArg("time_limit must be positive".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::InvalidArg("alpha must be >= 0".into()));
        }
        if !self.lambda.is_finite() {
            return Err(Error::NonFinite("lambda".into()));
        }
        Ok(())
    }
}

/// One per-iteration record of an attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    /// Margin of the unmodified instance.
    PreCheck { margin: f64, success: bool },
    /// Candidate arms picked for a bandit window (ranked or sampled).
    Rank { outer: usize, arms: Vec<usize> },
    /// Initialization pull of one arm; nothing applied.
    InitPull {
        outer: usize,
        feature: usize,
        /// Target value; `null` encodes a deletion candidate.
        value: Option<usize>,
        reward: f64,
        margin: f64,
    },
    /// One inner UCB round: scores per arm (window order), the selected
    /// feature, its applied value and realized reward.
    UcbRound {
        outer: usize,
        round: usize,
        scores: Vec<f64>,
        selected: usize,
        value: Option<usize>,
        reward: f64,
        margin: f64,
    },
    /// The selection wanted a fresh feature past the budget; nothing was
    /// applied and the attack stopped.
    BudgetStop { outer: usize, round: usize, scores: Vec<f64>, selected: usize },
    /// One greedy iteration: winning candidate, value, subset of previously
    /// modified features it was combined with, and the iteration's query
    /// count.
    GreedyIteration {
        iter: usize,
        queries: u64,
        feature: usize,
        value: Option<usize>,
        subset: Vec<usize>,
        reward: f64,
        margin: f64,
    },
    /// One single-slot gradient flip.
    GradFlip {
        iter: usize,
        feature: usize,
        value: Option<usize>,
        predicted_gain: f64,
        margin: f64,
    },
    /// One combinatorial gradient iteration.
    GradCombo {
        iter: usize,
        queries: u64,
        features: Vec<usize>,
        reward: f64,
        margin: f64,
    },
    /// One exhaustive enumeration level.
    ExhaustiveLevel { cardinality: usize, evaluations: u64, successes: u64 },
}

/// Outcome of one attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub success: bool,
    pub perturbation: Perturbation,
    /// Number of features differing from the input (No.change).
    pub changed: usize,
    /// Confidence evaluations spent (No.query); equals the handle's
    /// counter delta.
    pub queries: u64,
    pub grad_passes: u64,
    /// Wall seconds; the only nondeterministic field.
    pub wall_time: f64,
    pub outer_iterations: usize,
    /// Margin of the returned perturbed instance.
    pub margin: f64,
    pub trace: Vec<TraceEvent>,
}

/// Margin and success flag of an instance as-is; costs one query.
pub fn check_success(handle: &mut ClassifierHandle, inst: &Instance) -> Result<(bool, f64)> {
    let conf = handle.predict(inst)?;
    let margin = conf.margin(inst.label);
    Ok((margin >= 0.0, margin))
}

/// A candidate single-feature edit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CandidateEdit {
    /// Set the feature to this value (substitution if present, insertion
    /// if absent).
    Set(usize),
    /// Remove the present value.
    Clear,
}

impl CandidateEdit {
    pub fn value(&self) -> Option<usize> {
        match self {
            CandidateEdit::Set(v) => Some(*v),
            CandidateEdit::Clear => None,
        }
    }
}

/// Instance with one feature reassigned; the input is untouched.
pub(crate) fn with_feature(inst: &Instance, feature: usize, edit: CandidateEdit) -> Instance {
    let mut categories = inst.categories.clone();
    categories[feature] = edit.value();
    Instance::new(categories, inst.label)
}

/// Admissible single-feature edits: every alternative value for a present
/// feature, every value for an absent one, plus deletion when enabled.
pub(crate) fn admissible_edits(
    inst: &Instance,
    values_per_feature: &[usize],
    feature: usize,
    allow_delete: bool,
) -> Vec<CandidateEdit> {
    let m = values_per_feature[feature];
    let mut edits = Vec::new();
    match inst.categories[feature] {
        Some(cur) => {
            for j in 0..m {
                if j != cur {
                    edits.push(CandidateEdit::Set(j));
                }
            }
            if allow_delete {
                edits.push(CandidateEdit::Clear);
            }
        }
        None => {
            for j in 0..m {
                edits.push(CandidateEdit::Set(j));
            }
        }
    }
    edits
}

/// Features with at least one admissible edit.
pub(crate) fn eligible_features(
    inst: &Instance,
    values_per_feature: &[usize],
    allow_delete: bool,
) -> Vec<usize> {
    (0..inst.num_features())
        .filter(|&i| match inst.categories[i] {
            Some(_) => values_per_feature[i] > 1 || allow_delete,
            None => values_per_feature[i] > 0,
        })
        .collect()
}

/// Result of evaluating every admissible edit of one feature.
#[derive(Debug, Clone, PartialEq)]
pub struct BestPull {
    pub edit: CandidateEdit,
    pub reward: f64,
    /// Margin of the best candidate's perturbed state.
    pub margin: f64,
    pub queries_used: u64,
}

/// Evaluates every admissible edit of `feature` on `inst` and returns the
/// reward-maximizing one.
///
/// Costs one query per candidate. `base_conf` anchors the original-base
/// reward variant and must be the unperturbed instance's confidences; the
/// perturbed-base variant ignores it.
pub fn best_value_pull(
    handle: &mut ClassifierHandle,
    inst: &Instance,
    feature: usize,
    lambda: f64,
    variant: RewardVariant,
    base_conf: &ConfidenceVector,
    allow_delete: bool,
) -> Result<BestPull> {
    let edits = admissible_edits(inst, handle.values_per_feature(), feature, allow_delete);
    if edits.is_empty() {
        return Err(Error::NoAlternatives(feature));
    }
    let mut best: Option<BestPull> = None;
    let mut queries = 0;
    for edit in edits {
        let candidate = with_feature(inst, feature, edit);
        let conf = handle.predict(&candidate)?;
        queries += 1;
        let g = match variant {
            RewardVariant::Perturbed => reward(&conf, &conf, inst.label, lambda)?,
            RewardVariant::Original => reward(&conf, base_conf, inst.label, lambda)?,
        };
        let margin = conf.margin(inst.label);
        let better = best.as_ref().is_none_or(|b| g > b.reward);
        if better {
            best = Some(BestPull { edit, reward: g, margin, queries_used: 0 });
        }
    }
    let mut best = best.expect("at least one candidate evaluated");
    best.queries_used = queries;
    Ok(best)
}

/// Feature ordering from an already-computed gradient, strongest first.
///
/// The per-feature score aggregates the admissible slots of the gradient
/// row (the current value's slot is excluded) by largest absolute value, or
/// by Euclidean norm with `row_norm`; ties break toward the lowest index.
/// Features in `exclude` or without admissible edits are dropped.
pub(crate) fn rank_from_grad(
    grad: &[Vec<f64>],
    inst: &Instance,
    values_per_feature: &[usize],
    row_norm: bool,
    exclude: &BTreeSet<usize>,
) -> Vec<usize> {
    let eligible = eligible_features(inst, values_per_feature, false);
    let mut scored: Vec<(usize, f64)> = eligible
        .into_iter()
        .filter(|i| !exclude.contains(i))
        .map(|i| {
            let current = inst.categories[i];
            let slots = grad[i]
                .iter()
                .enumerate()
                .filter(|(j, _)| current != Some(*j))
                .map(|(_, g)| *g);
            let score = if row_norm {
                slots.map(|g| g * g).sum::<f64>().sqrt()
            } else {
                slots.fold(0.0f64, |acc, g| acc.max(g.abs()))
            };
            (i, score)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.into_iter().map(|(i, _)| i).collect()
}

/// Full feature ordering by gradient influence; one gradient pass, no
/// confidence queries.
pub(crate) fn rank_features(
    handle: &mut ClassifierHandle,
    inst: &Instance,
    objective: Objective,
    row_norm: bool,
    exclude: &BTreeSet<usize>,
) -> Result<Vec<usize>> {
    let grad = handle.grad_indicators(inst, objective)?;
    Ok(rank_from_grad(&grad, inst, handle.values_per_feature(), row_norm, exclude))
}

/// UCB scores of every arm at round `t`, in arm order.
pub(crate) fn ucb_scores(stats: &[ArmStats], t: f64, cfg: &BanditConfig) -> Result<Vec<f64>> {
    stats.iter().map(|s| ucb_score_with(s, t, cfg)).collect()
}

/// Top-`l` features by gradient influence (the matching-pursuit ranking).
pub fn omp_rank(
    handle: &mut ClassifierHandle,
    inst: &Instance,
    objective: Objective,
    l: usize,
    row_norm: bool,
) -> Result<Vec<usize>> {
    let mut order = rank_features(handle, inst, objective, row_norm, &BTreeSet::new())?;
    order.truncate(l);
    Ok(order)
}

/// Assembles an [`AttackResult`] from the final perturbed state.
#[allow(clippy::too_many_arguments)]
pub(crate) fn finish(
    original: &Instance,
    final_state: &Instance,
    success: bool,
    margin: f64,
    handle: &ClassifierHandle,
    start_queries: u64,
    start_grads: u64,
    started: Instant,
    outer_iterations: usize,
    trace: Vec<TraceEvent>,
) -> Result<AttackResult> {
    let perturbation = Perturbation::between(original, final_state)?;
    let changed = perturbation.len();
    Ok(AttackResult {
        success,
        perturbation,
        changed,
        queries: handle.queries() - start_queries,
        grad_passes: handle.grad_passes() - start_grads,
        wall_time: started.elapsed().as_secs_f64(),
        outer_iterations,
        margin,
        trace,
    })
}

/// Runs the named method.
pub fn run_attack(
    method: Method,
    handle: &mut ClassifierHandle,
    inst: &Instance,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    match method {
        Method::Feat => feat_attack(handle, inst, cfg),
        Method::FeatB => feat_b_attack(handle, inst, cfg),
        Method::Fsgs => fsgs_attack(handle, inst, cfg),
        Method::Ompgs => ompgs_attack(handle, inst, cfg),
        Method::Gradattack => grad_attack(handle, inst, cfg),
        Method::Exhaustive => exhaustive_attack(handle, inst, cfg),
    }
}

/// Re-verifies a success claim outside the run's accounting: the recorded
/// perturbation must fit the budget, apply cleanly, and yield a
/// non-negative margin.
pub fn verify_result(
    model: &dyn Classifier,
    inst: &Instance,
    result: &AttackResult,
    budget: usize,
) -> Result<bool> {
    if !result.success {
        return Ok(true);
    }
    if result.changed > budget {
        return Ok(false);
    }
    let perturbed = crate::categorical::apply_perturbation(inst, &result.perturbation)?;
    if diff(inst, &perturbed)?.len() != result.changed {
        return Ok(false);
    }
    let conf = model.predict(&perturbed)?;
    Ok(conf.margin(inst.label) >= 0.0)
}
