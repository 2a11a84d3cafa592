//! Empirical companions to the attack machinery: feature sensitivity,
//! gradient rank fidelity, reward stationarity inside one bandit window,
//! and the closed-form query-complexity formulas.

use serde::{Deserialize, Serialize};

use crate::attacks::{admissible_edits, best_value_pull, with_feature, CandidateEdit, Method};
use crate::bandit::{select_arm, ArmStats, BanditConfig, RewardVariant};
use crate::categorical::Instance;
use crate::classifier::{Classifier, ClassifierHandle, Objective};
use crate::error::{Error, Result};

/// Which replacement value probes a feature's sensitivity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ValueRule {
    /// Worst case over all admissible values (attack-relevant reading).
    #[default]
    MaxValue,
    /// The first admissible value.
    FirstAlt,
}

/// Which class's confidence change defines sensitivity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ClassRule {
    /// Gain of the instance's strongest wrong class.
    #[default]
    BestWrong,
    /// Drop of the true class's confidence.
    TrueDrop,
}

/// Mean per-feature confidence change over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub per_feature: Vec<f64>,
    pub instances: usize,
    pub value_rule: ValueRule,
    pub class_rule: ClassRule,
}

impl SensitivityReport {
    /// Feature indices ordered by descending sensitivity, ties by index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.per_feature.len()).collect();
        order.sort_by(|&a, &b| {
            self.per_feature[b]
                .partial_cmp(&self.per_feature[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        order
    }

    /// Two-column CSV (`feature,sensitivity`) for plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,sensitivity\n");
        for (i, fs) in self.per_feature.iter().enumerate() {
            out.push_str(&format!("{i},{fs}\n"));
        }
        out
    }
}

/// Mean per-feature change of the decision confidence when only that
/// feature is modified.
///
/// For each instance the probed class is fixed up front (best wrong class
/// by default); feature `i`'s contribution is the change of that class's
/// confidence under the rule's replacement value, and the report averages
/// contributions over instances. Features with no admissible change
/// contribute zero.
pub fn feature_sensitivity(
    model: &dyn Classifier,
    dataset: &[Instance],
    value_rule: ValueRule,
    class_rule: ClassRule,
) -> Result<SensitivityReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = model.num_features();
    let mut totals = vec![0.0; n];
    for inst in dataset {
        let conf0 = model.predict(inst)?;
        let (wrong, _) = conf0.best_wrong(inst.label);
        for (feature, total) in totals.iter_mut().enumerate() {
            let edits = admissible_edits(inst, model.values_per_feature(), feature, false);
            let mut change = 0.0f64;
            let mut any = false;
            for edit in edits {
                let conf = model.predict(&with_feature(inst, feature, edit))?;
                let delta = match class_rule {
                    ClassRule::BestWrong => conf.probs()[wrong] - conf0.probs()[wrong],
                    ClassRule::TrueDrop => conf0.probs()[inst.label] - conf.probs()[inst.label],
                };
                if !any || delta > change {
                    change = delta;
                    any = true;
                }
                if matches!(value_rule, ValueRule::FirstAlt) {
                    break;
                }
            }
            *total += change;
        }
    }
    let count = dataset.len();
    Ok(SensitivityReport {
        per_feature: totals.into_iter().map(|t| t / count as f64).collect(),
        instances: count,
        value_rule,
        class_rule,
    })
}

/// Rank agreement between gradient scores and measured single-edit changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    /// Mean Spearman correlation over the non-degenerate sampled instances;
    /// NaN when every instance was degenerate.
    pub mean_correlation: f64,
    /// Per-instance correlations; NaN marks a degenerate instance.
    pub per_instance: Vec<f64>,
    pub degenerate: usize,
    pub sampled: usize,
}

/// Spearman rank correlation between per-feature gradient scores and true
/// single-edit confidence changes, averaged over instances.
///
/// The probed class is the instance's best wrong class. The gradient score
/// of feature `i` is the largest first-order predicted change over its
/// admissible edits, `max_j |g[i][j] - g[i][current]|`, which the true
/// change `max_j |f(changed) - f(original)|` matches exactly on targets
/// affine in the indicators. Instances whose scores are tied everywhere
/// (a constant classifier, say) have no defined ranking and are reported
/// as NaN with a degenerate count.
pub fn gradient_indicator_fidelity(
    model: &dyn Classifier,
    dataset: &[Instance],
    sample: usize,
) -> Result<FidelityReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !model.white_box() {
        return Err(Error::BlackBoxModel);
    }
    let mut per_instance = Vec::new();
    let mut degenerate = 0;
    for inst in dataset.iter().take(sample) {
        let conf0 = model.predict(inst)?;
        let (wrong, _) = conf0.best_wrong(inst.label);
        let grad = model.grad_indicators(inst, Objective::Class(wrong))?;
        let n = model.num_features();
        let mut scores = Vec::with_capacity(n);
        let mut true_changes = Vec::with_capacity(n);
        for (feature, grad_row) in grad.iter().enumerate() {
            let current_term = match inst.categories[feature] {
                Some(cur) => grad_row[cur],
                None => 0.0,
            };
            let mut score = 0.0f64;
            let mut change = 0.0f64;
            for edit in admissible_edits(inst, model.values_per_feature(), feature, false) {
                let predicted = match edit {
                    CandidateEdit::Set(j) => grad_row[j] - current_term,
                    CandidateEdit::Clear => -current_term,
                };
                score = score.max(predicted.abs());
                let conf = model.predict(&with_feature(inst, feature, edit))?;
                change = change.max((conf.probs()[wrong] - conf0.probs()[wrong]).abs());
            }
            scores.push(score);
            true_changes.push(change);
        }
        match spearman(&scores, &true_changes) {
            Some(rho) => per_instance.push(rho),
            None => {
                per_instance.push(f64::NAN);
                degenerate += 1;
            }
        }
    }
    let valid: Vec<f64> = per_instance.iter().copied().filter(|r| !r.is_nan()).collect();
    let mean = if valid.is_empty() {
        f64::NAN
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    Ok(FidelityReport {
        mean_correlation: mean,
        per_instance,
        degenerate,
        sampled: dataset.len().min(sample),
    })
}

/// Spearman rank correlation with average ranks on ties; `None` when either
/// side has zero rank variance.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    pearson(&ra, &rb)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && values[order[end + 1]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end) as f64 / 2.0 + 1.0;
        for &idx in &order[start..=end] {
            ranks[idx] = avg;
        }
        start = end + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Spread measure reported per watched feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RatioKind {
    /// Standard deviation over mean.
    #[default]
    StdOverMean,
    /// Variance over mean.
    VarOverMean,
}

/// Parameters of the stationarity measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityConfig {
    /// Consecutive iterations whose rewards enter the ratio; >= 2.
    pub window: usize,
    /// Bandit rounds executed before the window starts, so the measurement
    /// covers the search's working phase rather than the initial sweep in
    /// which the exploration bonus cycles through every arm once. Defaults
    /// to `2 * arms + 2`.
    pub warmup: Option<usize>,
    pub alpha: f64,
    pub lambda: f64,
    pub ratio: RatioKind,
}

impl Default for StationarityConfig {
    fn default() -> Self {
        Self { window: 6, warmup: None, alpha: 4.0, lambda: 1.0, ratio: RatioKind::StdOverMean }
    }
}

impl StationarityConfig {
    fn effective_warmup(&self, arms: usize) -> usize {
        self.warmup.unwrap_or(2 * arms + 2)
    }
}

/// Per-feature reward spread across one bandit window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub features: Vec<usize>,
    /// `spread / mean` per watched feature, aligned with `features`.
    pub ratios: Vec<f64>,
    /// Probed rewards, feature-major over the window.
    pub rewards: Vec<Vec<f64>>,
    pub window: usize,
    pub ratio_kind: RatioKind,
}

/// Measures how stable each watched feature's reward stays across
/// consecutive bandit iterations of one window.
///
/// The bandit runs exactly as the attack does — initialization pulls fix
/// each arm's value, rounds apply the selected arm's remembered value and
/// feed back the realized reward — but never exits early; success is not
/// the point here. At every window iteration each watched feature's best
/// single-modification reward is probed on the current state without
/// applying it, and the per-feature ratio of reward spread to reward mean
/// over the window is reported.
pub fn stationarity_ratio(
    model: &dyn Classifier,
    inst: &Instance,
    features: &[usize],
    cfg: &StationarityConfig,
) -> Result<StationarityReport> {
    if cfg.window < 2 {
        return Err(Error::InvalidArg(format!("window {} below 2", cfg.window)));
    }
    if features.is_empty() {
        return Err(Error::InvalidArg("no features to watch".into()));
    }
    let bandit_cfg = BanditConfig { alpha: cfg.alpha, lambda: cfg.lambda, appendix_bonus: false };
    let mut handle = ClassifierHandle::new(model);
    let base_conf = handle.predict(inst)?;

    // Initialization pulls on the unmodified instance.
    let mut stats = vec![ArmStats::new(); features.len()];
    let mut remembered = Vec::with_capacity(features.len());
    for (a, &feature) in features.iter().enumerate() {
        let pull = best_value_pull(
            &mut handle,
            inst,
            feature,
            cfg.lambda,
            RewardVariant::Perturbed,
            &base_conf,
            false,
        )?;
        stats[a].update(pull.reward)?;
        remembered.push(pull.edit);
    }

    let warmup = cfg.effective_warmup(features.len());
    let mut x_hat = inst.clone();
    let mut rewards = vec![Vec::with_capacity(cfg.window); features.len()];
    for round in 1..=warmup + cfg.window {
        if round > warmup {
            // Observation probes; they do not touch the bandit state.
            for (a, &feature) in features.iter().enumerate() {
                let probe = best_value_pull(
                    &mut handle,
                    &x_hat,
                    feature,
                    cfg.lambda,
                    RewardVariant::Perturbed,
                    &base_conf,
                    false,
                )?;
                rewards[a].push(probe.reward);
            }
        }
        let t = (features.len() + round) as f64;
        let arm = select_arm(&stats, t, &bandit_cfg)?;
        x_hat = with_feature(&x_hat, features[arm], remembered[arm]);
        let conf = handle.predict(&x_hat)?;
        let g = crate::bandit::reward(&conf, &conf, inst.label, cfg.lambda)?;
        stats[arm].update(g)?;
    }

    let ratios = rewards
        .iter()
        .map(|series| {
            let n = series.len() as f64;
            let mean = series.iter().sum::<f64>() / n;
            let var = series.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / n;
            match cfg.ratio {
                RatioKind::StdOverMean => var.sqrt() / mean,
                RatioKind::VarOverMean => var / mean,
            }
        })
        .collect();

    Ok(StationarityReport {
        features: features.to_vec(),
        ratios,
        rewards,
        window: cfg.window,
        ratio_kind: cfg.ratio,
    })
}

/// Parameters of the closed-form query-count formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityParams {
    pub n: u64,
    pub m: u64,
    pub l: u64,
    pub t: u64,
    pub tau: u64,
}

/// Evaluates a method's closed-form confidence-query count.
///
/// Stepwise greedy: `sum_{t=0}^{T} (N-t) * M * 2^t`. Gradient attack
/// (combinatorial form): `T * sum_{k=0}^{L} C(L,k) * M^k`. Restricted
/// greedy: `sum_{t=0}^{T} L * 2^t`. Sampled bandit: `L*M + T`. Ranked
/// bandit: `(L*M + tau) * T`.
pub fn complexity_formula(method: Method, p: &ComplexityParams) -> Result<u128> {
    let overflow = || Error::InvalidArg("complexity formula overflowed".into());
    let pow2 = |e: u64| -> Result<u128> {
        if e >= 127 {
            return Err(overflow());
        }
        Ok(1u128 << e)
    };
    match method {
        Method::Fsgs => {
            if p.n == 0 || p.m == 0 {
                return Err(Error::InvalidArg("need n, m >= 1".into()));
            }
            if p.t > p.n {
                return Err(Error::InvalidArg(format!(
                    "t = {} exceeds the {} available features",
                    p.t, p.n
                )));
            }
            let mut total = 0u128;
            for t in 0..=p.t {
                let term = ((p.n - t) as u128)
                    .checked_mul(p.m as u128)
                    .and_then(|v| v.checked_mul(pow2(t).ok()?))
                    .ok_or_else(overflow)?;
                total = total.checked_add(term).ok_or_else(overflow)?;
            }
            Ok(total)
        }
        Method::Gradattack => {
            if p.l == 0 || p.m == 0 || p.t == 0 {
                return Err(Error::InvalidArg("need l, m, t >= 1".into()));
            }
            // sum_{k=0}^{L} C(L,k) * M^k = (1 + M)^L by the binomial theorem.
            let base = 1u128.checked_add(p.m as u128).ok_or_else(overflow)?;
            let inner = base
                .checked_pow(u32::try_from(p.l).map_err(|_| overflow())?)
                .ok_or_else(overflow)?;
            inner.checked_mul(p.t as u128).ok_or_else(overflow)
        }
        Method::Ompgs => {
            if p.l == 0 {
                return Err(Error::InvalidArg("need l >= 1".into()));
            }
            let mut total = 0u128;
            for t in 0..=p.t {
                let term = (p.l as u128).checked_mul(pow2(t)?).ok_or_else(overflow)?;
                total = total.checked_add(term).ok_or_else(overflow)?;
            }
            Ok(total)
        }
        Method::FeatB => {
            if p.l == 0 || p.m == 0 {
                return Err(Error::InvalidArg("need l, m >= 1".into()));
            }
            (p.l as u128)
                .checked_mul(p.m as u128)
                .and_then(|v| v.checked_add(p.t as u128))
                .ok_or_else(overflow)
        }
        Method::Feat => {
            if p.l == 0 || p.m == 0 || p.tau == 0 {
                return Err(Error::InvalidArg("need l, m, tau >= 1".into()));
            }
            (p.l as u128)
                .checked_mul(p.m as u128)
                .and_then(|v| v.checked_add(p.tau as u128))
                .and_then(|v| v.checked_mul(p.t as u128))
                .ok_or_else(overflow)
        }
        Method::Exhaustive => Err(Error::InvalidArg(
            "no closed-form query count for the exhaustive oracle".into(),
        )),
    }
}
