//! Single-flip gradient attack.
//!
//! Each iteration takes one gradient pass on the current state, ranks the
//! strongest `L` not-yet-modified features, picks the value slot with the
//! largest first-order predicted objective gain among their rows, applies
//! that single flip and spends one confidence query on the result. No
//! subset re-combination happens, so a run costs one query and one
//! gradient pass per iteration on top of the initial check.
//!
//! A combinatorial variant (enumerate subsets of the top-`L` up to a
//! configured depth with all value assignments) sits behind
//! `grad_combo_depth`; it is off by default.

use std::collections::BTreeSet;
use std::time::Instant;

use crate::categorical::{diff, Instance};
use crate::classifier::{ClassifierHandle, Objective};
use crate::error::{Error, Result};

use super::{
    admissible_edits, finish, rank_from_grad, with_feature, AttackConfig, AttackResult,
    CandidateEdit, TraceEvent, ENUMERATION_GUARD,
};

/// White-box gradient attack (single best flip per iteration).
pub fn grad_attack(
    handle: &mut ClassifierHandle,
    inst: &Instance,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    if !handle.white_box() {
        return Err(Error::BlackBoxModel);
    }
    cfg.validate()?;
    if cfg.grad_combo_depth > 0 {
        return grad_combo_attack(handle, inst, cfg);
    }
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

    let objective = Objective::Margin;
    let mut x_hat = inst.clone();
    let mut modified: BTreeSet<usize> = BTreeSet::new();
    let mut best_state = inst.clone();
    let mut best_margin = margin0;
    let mut iterations = 0;

    // Each iteration flips one fresh feature, so the budget caps the count.
    while modified.len() < cfg.budget {
        if started.elapsed().as_secs_f64() >= cfg.time_limit {
            break;
        }
        let grad = handle.grad_indicators(&x_hat, objective)?;
        let ranked = rank_from_grad(
            &grad,
            &x_hat,
            handle.values_per_feature(),
            cfg.omp_row_norm,
            &modified,
        );
        // Best single slot by predicted gain across the strongest L rows.
        let mut best: Option<(usize, CandidateEdit, f64)> = None;
        for &feature in ranked.iter().take(cfg.top_l) {
            let current_term = match x_hat.categories[feature] {
                Some(cur) => grad[feature][cur],
                None => 0.0,
            };
            for edit in
                admissible_edits(&x_hat, handle.values_per_feature(), feature, cfg.allow_delete)
            {
                let gain = match edit {
                    CandidateEdit::Set(j) => grad[feature][j] - current_term,
                    CandidateEdit::Clear => -current_term,
                };
                if best.as_ref().is_none_or(|(_, _, g)| gain > *g) {
                    best = Some((feature, edit, gain));
                }
            }
        }
        let Some((feature, edit, gain)) = best else {
            break;
        };
        x_hat = with_feature(&x_hat, feature, edit);
        modified.insert(feature);
        let conf = handle.predict(&x_hat)?;
        let margin = conf.margin(inst.label);
        iterations += 1;
        trace.push(TraceEvent::GradFlip {
            iter: iterations - 1,
            feature,
            value: edit.value(),
            predicted_gain: gain,
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
                iterations,
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
        iterations,
        trace,
    )
}

/// Combinatorial variant: per iteration, enumerate subsets of the top-`L`
/// features up to `grad_combo_depth` with every value assignment, apply the
/// best combination.
fn grad_combo_attack(
    handle: &mut ClassifierHandle,
    inst: &Instance,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
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

    let objective = Objective::Margin;
    let mut x_hat = inst.clone();
    let mut best_state = inst.clone();
    let mut best_margin = margin0;
    let mut iterations = 0;

    while iterations < cfg.budget.max(1) {
        if started.elapsed().as_secs_f64() >= cfg.time_limit {
            break;
        }
        let grad = handle.grad_indicators(&x_hat, objective)?;
        let ranked: Vec<usize> = rank_from_grad(
            &grad,
            &x_hat,
            handle.values_per_feature(),
            cfg.omp_row_norm,
            &BTreeSet::new(),
        )
        .into_iter()
        .take(cfg.top_l)
        .collect();
        if ranked.is_empty() {
            break;
        }
        let depth = cfg.grad_combo_depth.min(ranked.len());
        let values_per_feature = handle.values_per_feature().to_vec();
        guard_combo_count(&ranked, &values_per_feature, depth)?;

        let mut iter_queries = 0u64;
        let mut winner: Option<(Instance, Vec<usize>, f64, f64)> = None;
        let mut subset = Vec::new();
        enumerate_combos(
            &ranked,
            &values_per_feature,
            depth,
            0,
            &mut subset,
            &mut |features: &[(usize, usize)]| -> Result<()> {
                let mut state = x_hat.clone();
                for &(f, v) in features {
                    state = with_feature(&state, f, CandidateEdit::Set(v));
                }
                if diff(inst, &state)?.len() > cfg.budget {
                    return Ok(());
                }
                let conf = handle.predict(&state)?;
                iter_queries += 1;
                let g = crate::bandit::reward(&conf, &conf, inst.label, cfg.lambda)?;
                let margin = conf.margin(inst.label);
                if margin > best_margin {
                    best_margin = margin;
                    best_state = state.clone();
                }
                if winner.as_ref().is_none_or(|(_, _, r, _)| g > *r) {
                    winner = Some((state, features.iter().map(|&(f, _)| f).collect(), g, margin));
                }
                Ok(())
            },
        )?;
        iterations += 1;
        let Some((state, features, g, margin)) = winner else {
            break;
        };
        trace.push(TraceEvent::GradCombo {
            iter: iterations - 1,
            queries: iter_queries,
            features,
            reward: g,
            margin,
        });
        if state == x_hat {
            // The do-nothing combination won; no further progress possible.
            break;
        }
        x_hat = state;
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
                iterations,
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
        iterations,
        trace,
    )
}

/// Errors out when `sum_{k<=depth} C(L,k) * prod(M)` would pass the guard.
fn guard_combo_count(ranked: &[usize], values_per_feature: &[usize], depth: usize) -> Result<()> {
    // Elementary symmetric polynomials of the per-feature value counts give
    // the exact number of size-k combinations.
    let mut e = vec![0u128; depth + 1];
    e[0] = 1;
    for &f in ranked {
        let m = values_per_feature[f] as u128;
        for k in (1..=depth).rev() {
            e[k] = e[k].saturating_add(e[k - 1].saturating_mul(m));
        }
    }
    let total: u128 = e.iter().fold(0u128, |acc, &v| acc.saturating_add(v));
    if total > ENUMERATION_GUARD {
        return Err(Error::CapExceeded { size: total, cap: ENUMERATION_GUARD });
    }
    Ok(())
}

/// Callback receiving one `(feature, value)` assignment combination.
type ComboVisitor<'a> = dyn FnMut(&[(usize, usize)]) -> Result<()> + 'a;

/// Visits every subset of `ranked` of size <= `depth` (by index order) with
/// every value assignment; the empty combination is visited first.
fn enumerate_combos(
    ranked: &[usize],
    values_per_feature: &[usize],
    depth: usize,
    start: usize,
    current: &mut Vec<(usize, usize)>,
    visit: &mut ComboVisitor,
) -> Result<()> {
    visit(current)?;
    if current.len() == depth {
        return Ok(());
    }
    for idx in start..ranked.len() {
        let f = ranked[idx];
        for v in 0..values_per_feature[f] {
            current.push((f, v));
            enumerate_combos(ranked, values_per_feature, depth, idx + 1, current, visit)?;
            current.pop();
        }
    }
    Ok(())
}
