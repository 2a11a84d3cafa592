//! Bandit-driven attack: ranked (or sampled) candidate features explored
//! with the variance-aware UCB policy.
//!
//! Each outer iteration (a window) re-ranks candidates on the current
//! perturbed state, pulls every arm once to initialize its statistics
//! (evaluating all of its values, applying nothing), then runs `tau` inner
//! rounds. An inner round selects the highest-scoring arm, applies the best
//! value remembered from that arm's initialization pull, observes the
//! realized reward with a single confidence query, and stops on success or
//! when a fresh feature would exceed the budget. Windows discard arm
//! statistics entirely, which keeps the rewards the policy sees
//! approximately stationary.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::bandit::{reward, ArmStats, RewardVariant};
use crate::categorical::Instance;
use crate::classifier::{ClassifierHandle, Objective};
use crate::error::{Error, Result};

use super::{
    best_value_pull, eligible_features, finish, omp_rank, ucb_scores, with_feature, AttackConfig,
    AttackResult, CandidateEdit, TraceEvent,
};

/// How a window picks its candidate arms.
enum ArmSource {
    /// Gradient ranking on the current perturbed state.
    Ranked(Objective),
    /// Uniform sample without replacement.
    Sampled,
}

/// Gradient-ranked UCB attack; requires a white-box handle.
pub fn feat_attack(
    handle: &mut ClassifierHandle,
    inst: &Instance,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    if !handle.white_box() {
        return Err(Error::BlackBoxModel);
    }
    bandit_attack(handle, inst, cfg, ArmSource::Ranked(Objective::Margin))
}

/// UCB attack over uniformly sampled candidate features; black-box.
///
/// With `top_l >= N` every eligible feature becomes an arm, which is the
/// standard UCB policy over the whole feature set.
pub fn feat_b_attack(
    handle: &mut ClassifierHandle,
    inst: &Instance,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    bandit_attack(handle, inst, cfg, ArmSource::Sampled)
}

fn bandit_attack(
    handle: &mut ClassifierHandle,
    inst: &Instance,
    cfg: &AttackConfig,
    source: ArmSource,
) -> Result<AttackResult> {
    cfg.validate()?;
    let started = Instant::now();
    let start_queries = handle.queries();
    let start_grads = handle.grad_passes();
    let mut trace = Vec::new();

    let base_conf = handle.predict(inst)?;
    let margin0 = base_conf.margin(inst.label);
    trace.push(TraceEvent::PreCheck { margin: margin0, success: margin0 >= 0.0 });
    if margin0 >= 0.0 {
        return finish(inst, inst, true, margin0, handle, start_queries, start_grads, started, 0, trace);
    }

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let tau = cfg.effective_tau();
    // The outer count is bounded by ceil(budget / tau): each window can
    // admit at most tau fresh features, so more windows cannot add budget.
    let max_outer = cfg.budget.div_ceil(tau);
    let bandit_cfg = cfg.bandit();

    let mut x_hat = inst.clone();
    let mut selected: BTreeSet<usize> = BTreeSet::new();
    let mut best_state = inst.clone();
    let mut best_margin = margin0;
    let mut outer = 0;

    'windows: while outer < max_outer {
        if started.elapsed().as_secs_f64() >= cfg.time_limit {
            break;
        }
        let arms: Vec<usize> = match &source {
            ArmSource::Ranked(objective) => {
                omp_rank(handle, &x_hat, *objective, cfg.top_l, cfg.omp_row_norm)?
            }
            ArmSource::Sampled => {
                let eligible =
                    eligible_features(&x_hat, handle.values_per_feature(), cfg.allow_delete);
                let mut sample: Vec<usize> = eligible
                    .choose_multiple(&mut rng, cfg.top_l.min(eligible.len()))
                    .copied()
                    .collect();
                sample.sort_unstable();
                sample
            }
        };
        if arms.is_empty() {
            break;
        }
        trace.push(TraceEvent::Rank { outer, arms: arms.clone() });

        // Initialization pulls: evaluate each arm's values, apply nothing.
        let mut stats = vec![ArmStats::new(); arms.len()];
        let mut remembered: Vec<CandidateEdit> = Vec::with_capacity(arms.len());
        for (a, &feature) in arms.iter().enumerate() {
            let pull = best_value_pull(
                handle,
                &x_hat,
                feature,
                cfg.lambda,
                cfg.reward_variant,
                &base_conf,
                cfg.allow_delete,
            )?;
            stats[a].update(pull.reward)?;
            remembered.push(pull.edit);
            trace.push(TraceEvent::InitPull {
                outer,
                feature,
                value: pull.edit.value(),
                reward: pull.reward,
                margin: pull.margin,
            });
        }

        for round in 1..=tau {
            if started.elapsed().as_secs_f64() >= cfg.time_limit {
                outer += 1;
                break 'windows;
            }
            // Rounds count every pull of the window, initialization included.
            let t = (arms.len() + round) as f64;
            let scores = ucb_scores(&stats, t, &bandit_cfg)?;
            let arm = argmax(&scores);
            let feature = arms[arm];

            if !selected.contains(&feature) && selected.len() >= cfg.budget {
                trace.push(TraceEvent::BudgetStop { outer, round, scores, selected: feature });
                outer += 1;
                break 'windows;
            }

            selected.insert(feature);
            x_hat = with_feature(&x_hat, feature, remembered[arm]);
            let conf = handle.predict(&x_hat)?;
            let g = match cfg.reward_variant {
                RewardVariant::Perturbed => reward(&conf, &conf, inst.label, cfg.lambda)?,
                RewardVariant::Original => reward(&conf, &base_conf, inst.label, cfg.lambda)?,
            };
            stats[arm].update(g)?;
            let margin = conf.margin(inst.label);
            trace.push(TraceEvent::UcbRound {
                outer,
                round,
                scores,
                selected: feature,
                value: remembered[arm].value(),
                reward: g,
                margin,
            });
            if margin > best_margin {
                best_margin = margin;
                best_state = x_hat.clone();
            }
            if margin >= 0.0 {
                return finish(
                    inst,
                    &x_hat,
                    true,
                    margin,
                    handle,
                    start_queries,
                    start_grads,
                    started,
                    outer + 1,
                    trace,
                );
            }
        }
        outer += 1;
    }

    finish(
        inst,
        &best_state,
        false,
        best_margin,
        handle,
        start_queries,
        start_grads,
        started,
        outer,
        trace,
    )
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}
