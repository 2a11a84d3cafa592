//! Exhaustive ground-truth oracle.
//!
//! Enumerates every perturbation within the budget, smallest cardinality
//! first, and returns a minimal-cardinality successful perturbation with
//! the highest margin among those — the exact optimum of the budgeted
//! attack problem. A feasibility guard rejects search spaces past one
//! million evaluations; the oracle ignores the wall-clock limit since the
//! guard already bounds its work.

use std::time::Instant;

use crate::categorical::Instance;
use crate::classifier::ClassifierHandle;
use crate::error::{Error, Result};

use super::{
    admissible_edits, finish, with_feature, AttackConfig, AttackResult, CandidateEdit, TraceEvent,
    ENUMERATION_GUARD,
};

/// Exact search over all perturbations with at most `budget` changed
/// features.
pub fn exhaustive_attack(
    handle: &mut ClassifierHandle,
    inst: &Instance,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let started = Instant::now();
    let start_queries = handle.queries();
    let start_grads = handle.grad_passes();
    let mut trace = Vec::new();

    let n = inst.num_features();
    let alternatives: Vec<Vec<CandidateEdit>> = (0..n)
        .map(|f| admissible_edits(inst, handle.values_per_feature(), f, cfg.allow_delete))
        .collect();
    let total = evaluation_count(&alternatives, cfg.budget);
    if total > ENUMERATION_GUARD {
        return Err(Error::TooLarge(total, ENUMERATION_GUARD));
    }

    // Cardinality zero: the instance itself.
    let base_conf = handle.predict(inst)?;
    let margin0 = base_conf.margin(inst.label);
    trace.push(TraceEvent::PreCheck { margin: margin0, success: margin0 >= 0.0 });
    if margin0 >= 0.0 {
        return finish(inst, inst, true, margin0, handle, start_queries, start_grads, started, 0, trace);
    }

    let mut best_state = inst.clone();
    let mut best_margin = margin0;
    let mut levels = 0;

    for k in 1..=cfg.budget {
        if k > n {
            break;
        }
        let mut level_best: Option<(Instance, f64)> = None;
        let mut evaluations = 0u64;
        let mut successes = 0u64;
        let mut subset: Vec<usize> = (0..k).collect();
        loop {
            // Odometer over the value assignments of this feature subset;
            // the last feature's candidate list spins fastest.
            let lists: Vec<&[CandidateEdit]> =
                subset.iter().map(|&f| alternatives[f].as_slice()).collect();
            if lists.iter().all(|l| !l.is_empty()) {
                let mut idx = vec![0usize; k];
                'assignments: loop {
                    let mut state = inst.clone();
                    for (pos, &f) in subset.iter().enumerate() {
                        state = with_feature(&state, f, lists[pos][idx[pos]]);
                    }
                    let conf = handle.predict(&state)?;
                    evaluations += 1;
                    let margin = conf.margin(inst.label);
                    if margin > best_margin {
                        best_margin = margin;
                        best_state = state.clone();
                    }
                    if margin >= 0.0 {
                        successes += 1;
                        if level_best.as_ref().is_none_or(|(_, m)| margin > *m) {
                            level_best = Some((state, margin));
                        }
                    }
                    // Advance the odometer.
                    let mut pos = k;
                    loop {
                        if pos == 0 {
                            break 'assignments;
                        }
                        pos -= 1;
                        idx[pos] += 1;
                        if idx[pos] < lists[pos].len() {
                            break;
                        }
                        idx[pos] = 0;
                    }
                }
            }
            // Next lexicographic subset of size k.
            let mut advanced = false;
            let mut pos = k;
            while pos > 0 {
                pos -= 1;
                if subset[pos] < n - k + pos {
                    subset[pos] += 1;
                    for later in pos + 1..k {
                        subset[later] = subset[later - 1] + 1;
                    }
                    advanced = true;
                    break;
                }
            }
            if !advanced {
                break;
            }
        }
        levels = k;
        trace.push(TraceEvent::ExhaustiveLevel { cardinality: k, evaluations, successes });
        if let Some((state, margin)) = level_best {
            return finish(
                inst,
                &state,
                true,
                margin,
                handle,
                start_queries,
                start_grads,
                started,
                levels,
                trace,
            );
        }
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
        levels,
        trace,
    )
}

/// Exact evaluation count `sum_{k<=budget} e_k(a_1..a_N)` where `a_i` is
/// feature `i`'s admissible-edit count and `e_k` the elementary symmetric
/// polynomial; includes the cardinality-zero check.
fn evaluation_count(alternatives: &[Vec<CandidateEdit>], budget: usize) -> u128 {
    let depth = budget.min(alternatives.len());
    let mut e = vec![0u128; depth + 1];
    e[0] = 1;
    for alts in alternatives {
        let a = alts.len() as u128;
        for k in (1..=depth).rev() {
            e[k] = e[k].saturating_add(e[k - 1].saturating_mul(a));
        }
    }
    e.iter().fold(0u128, |acc, &v| acc.saturating_add(v))
}
