//! Target-classifier contract and a self-contained differentiable target.
//!
//! The attack code only sees the [`Classifier`] trait: class confidences for
//! a discrete instance, a forward pass over relaxed (real-valued) indicator
//! rows, and, for white-box targets, the gradient of an attack objective
//! with respect to those indicators. [`ClassifierHandle`] wraps a classifier
//! with per-run query accounting.
//!
//! [`EmbedMlpModel`] is the shipped target: per-feature value embeddings are
//! pooled into an `N*D` vector (the sum over each feature's indicator-
//! weighted value embeddings, blocks concatenated per feature), followed by
//! rectified hidden layers and a softmax head. The pooling is linear in the
//! indicators, so relaxed gradients are well defined everywhere and can be
//! checked against central finite differences.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::categorical::{EmbeddingTable, Instance};
use crate::error::{Error, Result};

/// Softmax confidences over the `K` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceVector {
    probs: Vec<f64>,
}

impl ConfidenceVector {
    /// Wraps raw probabilities, checking the simplex invariant.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidArg("need at least two classes".into()));
        }
        let sum: f64 = probs.iter().sum();
        if !probs.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)) {
            return Err(Error::NonFinite(format!("confidences out of range: {probs:?}")));
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArg(format!("confidences sum to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Index of the most confident class (lowest index on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = k;
            }
        }
        best
    }

    /// The most confident class other than `label`, with its confidence.
    pub fn best_wrong(&self, label: usize) -> (usize, f64) {
        let mut best = usize::MAX;
        let mut best_p = f64::NEG_INFINITY;
        for (k, &p) in self.probs.iter().enumerate() {
            if k != label && p > best_p {
                best = k;
                best_p = p;
            }
        }
        (best, best_p)
    }

    /// Best wrong-class confidence minus the true-class confidence.
    ///
    /// Non-negative margin means the instance is misclassified.
    pub fn margin(&self, label: usize) -> f64 {
        let (_, wrong) = self.best_wrong(label);
        wrong - self.probs[label]
    }
}

/// Attack objective whose gradient/value the classifier exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    /// Best wrong-class confidence minus true-class confidence.
    Margin,
    /// Confidence of one fixed class.
    Class(usize),
}

/// Value of an objective given the confidences and the true label.
pub fn objective_value(conf: &ConfidenceVector, label: usize, objective: Objective) -> f64 {
    match objective {
        Objective::Margin => conf.margin(label),
        Objective::Class(k) => conf.probs()[k],
    }
}

/// The target-classifier contract.
///
/// `predict` and `predict_relaxed` must be pure functions of the model
/// parameters and input. `predict_relaxed` accepts arbitrary finite
/// indicator values (not just `[0, 1]`) so that central finite differences
/// around binary points are well defined.
pub trait Classifier: Sync {
    fn values_per_feature(&self) -> &[usize];

    fn num_classes(&self) -> usize;

    fn num_features(&self) -> usize {
        self.values_per_feature().len()
    }

    fn predict(&self, inst: &Instance) -> Result<ConfidenceVector>;

    /// Forward pass over real-valued indicator rows (row `i` of length `M_i`).
    fn predict_relaxed(&self, rows: &[Vec<f64>]) -> Result<ConfidenceVector>;

    fn white_box(&self) -> bool {
        false
    }

    /// Gradient of `objective` with respect to the relaxed indicators,
    /// evaluated at the instance's binary indicator point. Shape `[N][M_i]`.
    fn grad_indicators(&self, _inst: &Instance, _objective: Objective) -> Result<Vec<Vec<f64>>> {
        Err(Error::BlackBoxModel)
    }
}

/// Per-attack-run accounting wrapper around a classifier.
///
/// Confidence queries and gradient passes are counted separately: the query
/// budget metric counts confidence evaluations only. Each attack run owns
/// its handle, so counters need no synchronization.
pub struct ClassifierHandle<'a> {
    model: &'a dyn Classifier,
    queries: u64,
    grad_passes: u64,
    mask_gradients: bool,
}

impl<'a> ClassifierHandle<'a> {
    pub fn new(model: &'a dyn Classifier) -> Self {
        Self { model, queries: 0, grad_passes: 0, mask_gradients: false }
    }

    /// A handle that hides gradients even if the model is white-box.
    pub fn black_box(model: &'a dyn Classifier) -> Self {
        Self { model, queries: 0, grad_passes: 0, mask_gradients: true }
    }

    pub fn white_box(&self) -> bool {
        !self.mask_gradients && self.model.white_box()
    }

    pub fn values_per_feature(&self) -> &[usize] {
        self.model.values_per_feature()
    }

    pub fn num_features(&self) -> usize {
        self.model.num_features()
    }

    pub fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    /// Confidence query; increments the query counter by exactly one.
    pub fn predict(&mut self, inst: &Instance) -> Result<ConfidenceVector> {
        self.queries += 1;
        self.model.predict(inst)
    }

    /// Gradient pass; counted separately from confidence queries.
    pub fn grad_indicators(
        &mut self,
        inst: &Instance,
        objective: Objective,
    ) -> Result<Vec<Vec<f64>>> {
        if !self.white_box() {
            return Err(Error::BlackBoxModel);
        }
        self.grad_passes += 1;
        self.model.grad_indicators(inst, objective)
    }

    pub fn queries(&self) -> u64 {
        self.queries
    }

    pub fn grad_passes(&self) -> u64 {
        self.grad_passes
    }
}

/// How feature influence is distributed by the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sensitivity {
    /// Features `0..top` get embedding scales >= 10x the rest, so their
    /// measured sensitivity dominates.
    Skewed { top: usize },
    /// All features get scales from a narrow band.
    Uniform,
}

/// Generator parameters for [`EmbedMlpModel::generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub values_per_feature: Vec<usize>,
    pub num_classes: usize,
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub sensitivity: Sensitivity,
    pub seed: u64,
}

impl GenSpec {
    /// Uniform `M` per feature, one hidden layer of 16 units.
    pub fn uniform_m(n: usize, m: usize, k: usize, d: usize, sensitivity: Sensitivity, seed: u64) -> Self {
        Self {
            values_per_feature: vec![m; n],
            num_classes: k,
            dim: d,
            hidden: vec![16],
            sensitivity,
            seed,
        }
    }
}

// Embedding-norm scales used by the generator. The planted/rest ratio stays
// above the 10x separation the skewed contract requires.
const SKEWED_PLANTED_SCALE: f64 = 2.8;
const SKEWED_REST_SCALE: f64 = 0.22;
const UNIFORM_SCALE_LO: f64 = 0.95;
const UNIFORM_SCALE_HI: f64 = 1.05;

/// Differentiable embedding-MLP target with a softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedMlpModel {
    table: EmbeddingTable,
    num_classes: usize,
    /// `[N*D, hidden..., K]`.
    layer_sizes: Vec<usize>,
    /// Row-major `[out x in]` per layer.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    seed: u64,
}

impl EmbedMlpModel {
    /// Assembles a model from parts, checking that layer shapes chain from
    /// `N*D` to `K` and that all parameters are finite.
    pub fn from_parts(
        table: EmbeddingTable,
        num_classes: usize,
        hidden: &[usize],
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
        seed: u64,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArg("need at least two classes".into()));
        }
        let mut layer_sizes = vec![table.num_features() * table.dim()];
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(num_classes);
        let n_layers = layer_sizes.len() - 1;
        if weights.len() != n_layers || biases.len() != n_layers {
            return Err(Error::ShapeMismatch(format!(
                "expected {n_layers} weight/bias pairs, got {}/{}",
                weights.len(),
                biases.len()
            )));
        }
        for l in 0..n_layers {
            let (rows, cols) = (layer_sizes[l + 1], layer_sizes[l]);
            if weights[l].len() != rows * cols {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l} weights: {} entries, expected {rows}x{cols}",
                    weights[l].len()
                )));
            }
            if biases[l].len() != rows {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l} biases: {} entries, expected {rows}",
                    biases[l].len()
                )));
            }
            if !weights[l].iter().chain(biases[l].iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {l} contains a non-finite parameter")));
            }
        }
        Ok(Self { table, num_classes, layer_sizes, weights, biases, seed })
    }

    /// Draws a model with the requested sensitivity profile. Deterministic
    /// in the seed.
    pub fn generate(spec: &GenSpec) -> Result<Self> {
        let n = spec.values_per_feature.len();
        if n == 0 || spec.dim == 0 {
            return Err(Error::InvalidArg("need n >= 1 and d >= 1".into()));
        }
        if spec.num_classes < 2 {
            return Err(Error::InvalidArg("need at least two classes".into()));
        }
        if let Sensitivity::Skewed { top } = spec.sensitivity {
            if top == 0 || top > n {
                return Err(Error::InvalidArg(format!(
                    "skewed top {top} outside 1..={n}"
                )));
            }
        }
        let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");

        let scales: Vec<f64> = (0..n)
            .map(|i| match spec.sensitivity {
                Sensitivity::Skewed { top } => {
                    if i < top {
                        SKEWED_PLANTED_SCALE
                    } else {
                        SKEWED_REST_SCALE
                    }
                }
                Sensitivity::Uniform => rng.gen_range(UNIFORM_SCALE_LO..UNIFORM_SCALE_HI),
            })
            .collect();

        // Per-feature value embeddings, centered and rescaled so the mean
        // pairwise distance inside each feature equals that feature's scale.
        // Pinning the achievable single-edit delta keeps uniform features at
        // comparable sensitivity and makes the planted/rest separation exact.
        let mut emb = Vec::with_capacity(spec.values_per_feature.iter().sum::<usize>() * spec.dim);
        for (i, &m) in spec.values_per_feature.iter().enumerate() {
            let mut vectors: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..spec.dim).map(|_| normal.sample(&mut rng)).collect())
                .collect();
            if m >= 2 {
                for d in 0..spec.dim {
                    let mean = vectors.iter().map(|v| v[d]).sum::<f64>() / m as f64;
                    for v in &mut vectors {
                        v[d] -= mean;
                    }
                }
                let mut dist_sum = 0.0;
                let mut pairs = 0;
                for a in 0..m {
                    for b in a + 1..m {
                        dist_sum += vectors[a]
                            .iter()
                            .zip(&vectors[b])
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum::<f64>()
                            .sqrt();
                        pairs += 1;
                    }
                }
                let mean_dist = (dist_sum / pairs as f64).max(1e-12);
                for v in &mut vectors {
                    for x in v {
                        *x *= scales[i] / mean_dist;
                    }
                }
            } else {
                let norm = vectors[0].iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                for x in &mut vectors[0] {
                    *x *= scales[i] / norm;
                }
            }
            for v in vectors {
                emb.extend_from_slice(&v);
            }
        }
        let table = EmbeddingTable::from_flat(spec.values_per_feature.clone(), spec.dim, emb)?;

        let mut layer_sizes = vec![n * spec.dim];
        layer_sizes.extend_from_slice(&spec.hidden);
        layer_sizes.push(spec.num_classes);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..layer_sizes.len() - 1 {
            let (rows, cols) = (layer_sizes[l + 1], layer_sizes[l]);
            // Pooled inputs carry one unit-scale block per feature, so the
            // first layer scales by 1/sqrt(N); later layers by 1/sqrt(fan_in).
            let sigma = if l == 0 {
                1.3 / (n as f64).sqrt()
            } else {
                1.4 / (cols as f64).sqrt()
            };
            weights.push((0..rows * cols).map(|_| sigma * normal.sample(&mut rng)).collect());
            biases.push((0..rows).map(|_| 0.1 * normal.sample(&mut rng)).collect());
        }
        let mut model =
            Self::from_parts(table, spec.num_classes, &spec.hidden, weights, biases, spec.seed)?;
        model.calibrate_output_bias(&mut rng)?;
        if matches!(spec.sensitivity, Sensitivity::Uniform) {
            model.equalize_feature_sensitivity(&mut rng)?;
        }
        Ok(model)
    }

    /// Centers the output biases on the mean logits of a seeded sample of
    /// random instances, so no class is preferred independently of the
    /// input. Random draws keep the whole generation deterministic.
    fn calibrate_output_bias(&mut self, rng: &mut ChaCha12Rng) -> Result<()> {
        const CALIBRATION_SAMPLES: usize = 64;
        let n = self.table.num_features();
        let mut mean_logits = vec![0.0; self.num_classes];
        for _ in 0..CALIBRATION_SAMPLES {
            let categories: Vec<Option<usize>> =
                (0..n).map(|i| Some(rng.gen_range(0..self.table.num_values(i)))).collect();
            let z = self.pool_instance(&Instance::new(categories, 0))?;
            let (_, logits) = self.forward_states(z)?;
            for (acc, l) in mean_logits.iter_mut().zip(&logits) {
                *acc += l / CALIBRATION_SAMPLES as f64;
            }
        }
        // Centering removes the arbitrary class preference random weights
        // bake in; the redrawn bounded offsets keep decisions input-driven
        // while leaving typical instances confidently classified, the way a
        // trained model behaves. Signs alternate across a shuffled class
        // order so the offsets neither cancel (margins too shallow) nor
        // pile up (no budgeted perturbation could cross the boundary).
        const OFFSET_LO: f64 = 0.25;
        const OFFSET_HI: f64 = 0.5;
        let k = self.num_classes;
        let mut offsets: Vec<f64> = (0..k)
            .map(|i| {
                let magnitude = rng.gen_range(OFFSET_LO..OFFSET_HI);
                if i % 2 == 0 {
                    magnitude
                } else {
                    -magnitude
                }
            })
            .collect();
        offsets.shuffle(rng);
        let out_bias = self.biases.last_mut().expect("at least one layer");
        for ((b, mean), offset) in out_bias.iter_mut().zip(&mean_logits).zip(offsets) {
            *b += offset - mean;
        }
        Ok(())
    }

    /// Evens out the measured per-feature sensitivity of a uniform target.
    ///
    /// Random weight draws leave each feature with a different downstream
    /// gain, so matching embedding scales alone still spreads sensitivities
    /// several-fold. This probes each feature's best single-edit confidence
    /// change on a seeded sample, rescales its embeddings by a damped
    /// correction toward the mean, and re-centers the output bias.
    fn equalize_feature_sensitivity(&mut self, rng: &mut ChaCha12Rng) -> Result<()> {
        const SAMPLES: usize = 24;
        const ROUNDS: usize = 2;
        let n = self.table.num_features();
        for _ in 0..ROUNDS {
            let instances: Vec<Instance> = (0..SAMPLES)
                .map(|_| {
                    let categories =
                        (0..n).map(|i| Some(rng.gen_range(0..self.table.num_values(i)))).collect();
                    Instance::new(categories, 0)
                })
                .collect();
            let mut fs = vec![0.0; n];
            for inst in &instances {
                let conf0 = self.predict(inst)?;
                let label = conf0.argmax();
                let (wrong, _) = conf0.best_wrong(label);
                for (feature, acc) in fs.iter_mut().enumerate() {
                    let cur = inst.categories[feature];
                    let mut best = 0.0f64;
                    for j in 0..self.table.num_values(feature) {
                        if Some(j) == cur {
                            continue;
                        }
                        let mut categories = inst.categories.clone();
                        categories[feature] = Some(j);
                        let conf = self.predict(&Instance::new(categories, 0))?;
                        best = best.max((conf.probs()[wrong] - conf0.probs()[wrong]).abs());
                    }
                    *acc += best / SAMPLES as f64;
                }
            }
            let mean_fs = fs.iter().sum::<f64>() / n as f64;
            for (feature, &measured) in fs.iter().enumerate() {
                let factor = (mean_fs / measured.max(1e-9)).powf(0.7).clamp(0.25, 4.0);
                self.table.scale_feature(feature, factor);
            }
            self.calibrate_output_bias(rng)?;
        }
        Ok(())
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    pub fn hidden_sizes(&self) -> &[usize] {
        &self.layer_sizes[1..self.layer_sizes.len() - 1]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layer_weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn layer_biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    /// Zeroes the first-layer columns of one feature's input block, making
    /// the model provably ignore that feature. Diagnostic helper for
    /// sensitivity and gradient oracles.
    pub fn zero_feature_columns(&mut self, feature: usize) {
        let d = self.table.dim();
        let cols = self.layer_sizes[0];
        let rows = self.layer_sizes[1];
        for r in 0..rows {
            for c in feature * d..(feature + 1) * d {
                self.weights[0][r * cols + c] = 0.0;
            }
        }
    }

    /// Sum-pools an instance's value embeddings into the `N*D` input vector.
    fn pool_instance(&self, inst: &Instance) -> Result<Vec<f64>> {
        inst.validate_shape(self.table.values_per_feature())?;
        let d = self.table.dim();
        let mut z = vec![0.0; self.table.num_features() * d];
        for (i, cat) in inst.categories.iter().enumerate() {
            if let Some(j) = cat {
                z[i * d..(i + 1) * d].copy_from_slice(self.table.vector(i, *j));
            }
        }
        Ok(z)
    }

    fn pool_relaxed(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        if rows.len() != self.table.num_features() {
            return Err(Error::ShapeMismatch(format!(
                "indicator rows {} != features {}",
                rows.len(),
                self.table.num_features()
            )));
        }
        let d = self.table.dim();
        let mut z = vec![0.0; self.table.num_features() * d];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != self.table.num_values(i) {
                return Err(Error::ShapeMismatch(format!(
                    "indicator row {i} has {} slots, expected {}",
                    row.len(),
                    self.table.num_values(i)
                )));
            }
            for (j, &b) in row.iter().enumerate() {
                if !b.is_finite() {
                    return Err(Error::NonFinite(format!("indicator ({i},{j}) = {b}")));
                }
                if b != 0.0 {
                    let e = self.table.vector(i, j);
                    for (slot, &ev) in z[i * d..(i + 1) * d].iter_mut().zip(e) {
                        *slot += b * ev;
                    }
                }
            }
        }
        Ok(z)
    }

    /// Forward pass keeping per-layer activations for backprop.
    fn forward_states(&self, z: Vec<f64>) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let n_layers = self.weights.len();
        let mut acts = Vec::with_capacity(n_layers);
        acts.push(z);
        let mut logits = Vec::new();
        for l in 0..n_layers {
            let input = &acts[l];
            let (rows, cols) = (self.layer_sizes[l + 1], self.layer_sizes[l]);
            let mut a = self.biases[l].clone();
            for (r, slot) in a.iter_mut().enumerate().take(rows) {
                let w_row = &self.weights[l][r * cols..(r + 1) * cols];
                let mut acc = 0.0;
                for (w, x) in w_row.iter().zip(input) {
                    acc += w * x;
                }
                *slot += acc;
            }
            if l + 1 < n_layers {
                for v in &mut a {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                acts.push(a);
            } else {
                logits = a;
            }
        }
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("logits overflowed".into()));
        }
        Ok((acts, logits))
    }

    fn softmax(logits: &[f64]) -> Vec<f64> {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|e| e / sum).collect()
    }

    fn forward(&self, z: Vec<f64>) -> Result<ConfidenceVector> {
        let (_, logits) = self.forward_states(z)?;
        ConfidenceVector::new(Self::softmax(&logits))
    }

    /// Backprop of `sum_k w_k * p_k` from the probabilities down to the
    /// pooled input, then through the embedding pooling to the indicators.
    fn backward_to_indicators(
        &self,
        acts: &[Vec<f64>],
        probs: &[f64],
        w_out: &[f64],
    ) -> Vec<Vec<f64>> {
        let n_layers = self.weights.len();
        // d(objective)/d(logit_j) = p_j * (w_j - sum_k w_k p_k).
        let dot: f64 = w_out.iter().zip(probs).map(|(w, p)| w * p).sum();
        let mut g: Vec<f64> = probs
            .iter()
            .zip(w_out)
            .map(|(&p, &w)| p * (w - dot))
            .collect();
        for l in (0..n_layers).rev() {
            let (rows, cols) = (self.layer_sizes[l + 1], self.layer_sizes[l]);
            let mut g_prev = vec![0.0; cols];
            for (r, &gr) in g.iter().enumerate().take(rows) {
                if gr == 0.0 {
                    continue;
                }
                let w_row = &self.weights[l][r * cols..(r + 1) * cols];
                for (gp, w) in g_prev.iter_mut().zip(w_row) {
                    *gp += gr * w;
                }
            }
            if l > 0 {
                // Rectifier mask; the stored activation is already rectified.
                for (gp, &h) in g_prev.iter_mut().zip(&acts[l]) {
                    if h <= 0.0 {
                        *gp = 0.0;
                    }
                }
            }
            g = g_prev;
        }
        // d(z[i*D + d])/d(b[i][j]) = emb(i, j)[d].
        let d = self.table.dim();
        (0..self.table.num_features())
            .map(|i| {
                let gz = &g[i * d..(i + 1) * d];
                (0..self.table.num_values(i))
                    .map(|j| {
                        self.table
                            .vector(i, j)
                            .iter()
                            .zip(gz)
                            .map(|(e, gzd)| e * gzd)
                            .sum()
                    })
                    .collect()
            })
            .collect()
    }
}

impl Classifier for EmbedMlpModel {
    fn values_per_feature(&self) -> &[usize] {
        self.table.values_per_feature()
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn predict(&self, inst: &Instance) -> Result<ConfidenceVector> {
        let z = self.pool_instance(inst)?;
        self.forward(z)
    }

    fn predict_relaxed(&self, rows: &[Vec<f64>]) -> Result<ConfidenceVector> {
        let z = self.pool_relaxed(rows)?;
        self.forward(z)
    }

    fn white_box(&self) -> bool {
        true
    }

    fn grad_indicators(&self, inst: &Instance, objective: Objective) -> Result<Vec<Vec<f64>>> {
        let z = self.pool_instance(inst)?;
        let (acts, logits) = self.forward_states(z)?;
        let probs = Self::softmax(&logits);
        let mut w_out = vec![0.0; self.num_classes];
        match objective {
            Objective::Margin => {
                let conf = ConfidenceVector::new(probs.clone())?;
                let (wrong, _) = conf.best_wrong(inst.label);
                w_out[wrong] = 1.0;
                w_out[inst.label] -= 1.0;
            }
            Objective::Class(k) => {
                if k >= self.num_classes {
                    return Err(Error::InvalidArg(format!("class {k} out of range")));
                }
                w_out[k] = 1.0;
            }
        }
        Ok(self.backward_to_indicators(&acts, &probs, &w_out))
    }
}

/// Central-difference gradient of `objective` over the relaxed indicators.
///
/// Independent oracle for [`Classifier::grad_indicators`]: each slot is
/// `(f(b + step*e_ij) - f(b - step*e_ij)) / (2*step)` through the relaxed
/// forward pass.
pub fn finite_diff_grad(
    model: &dyn Classifier,
    inst: &Instance,
    objective: Objective,
    step: f64,
) -> Result<Vec<Vec<f64>>> {
    if step <= 0.0 {
        return Err(Error::InvalidArg(format!("step must be positive, got {step}")));
    }
    inst.validate_shape(model.values_per_feature())?;
    let mut rows = inst.indicators(model.values_per_feature());
    let mut grad = Vec::with_capacity(rows.len());
    for i in 0..rows.len() {
        let mut grad_row = Vec::with_capacity(rows[i].len());
        for j in 0..rows[i].len() {
            let orig = rows[i][j];
            rows[i][j] = orig + step;
            let up = objective_value(&model.predict_relaxed(&rows)?, inst.label, objective);
            rows[i][j] = orig - step;
            let down = objective_value(&model.predict_relaxed(&rows)?, inst.label, objective);
            rows[i][j] = orig;
            grad_row.push((up - down) / (2.0 * step));
        }
        grad.push(grad_row);
    }
    Ok(grad)
}

/// Largest relative slot-wise disagreement between two gradients.
///
/// The denominator is floored to keep near-zero slots from inflating the
/// ratio past round-off scale.
pub fn max_relative_error(a: &[Vec<f64>], b: &[Vec<f64>], floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for (ra, rb) in a.iter().zip(b) {
        for (&x, &y) in ra.iter().zip(rb) {
            let denom = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

/// Generates an embedding-MLP target with planted feature sensitivity.
///
/// Uniform `M` values per feature and one 16-unit hidden layer; see
/// [`EmbedMlpModel::generate`] for full control.
pub fn make_planted_classifier(
    n: usize,
    m: usize,
    k: usize,
    d: usize,
    sensitivity: Sensitivity,
    seed: u64,
) -> Result<EmbedMlpModel> {
    if n == 0 || m == 0 || k < 2 || d == 0 {
        return Err(Error::InvalidArg(format!(
            "bad generator dims n={n}, m={m}, k={k}, d={d}"
        )));
    }
    EmbedMlpModel::generate(&GenSpec::uniform_m(n, m, k, d, sensitivity, seed))
}

/// A classifier whose confidences are affine in the indicators.
///
/// `probs_k(b) = base_k + sum_ij coeffs[k][i][j] * b[i][j]`. The constructor
/// requires the per-slot coefficients to sum to zero across classes and the
/// bases to sum to one, so the simplex constraint holds identically and the
/// analytic gradient is exact. Reference target for gradient and ranking
/// oracles.
#[derive(Debug, Clone)]
pub struct AffineClassifier {
    values_per_feature: Vec<usize>,
    base: Vec<f64>,
    coeffs: Vec<Vec<Vec<f64>>>,
}

impl AffineClassifier {
    pub fn new(values_per_feature: Vec<usize>, base: Vec<f64>, coeffs: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let k = base.len();
        if k < 2 {
            return Err(Error::InvalidArg("need at least two classes".into()));
        }
        if (base.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArg("base confidences must sum to 1".into()));
        }
        if coeffs.len() != k {
            return Err(Error::ShapeMismatch("one coefficient grid per class".into()));
        }
        for grid in &coeffs {
            if grid.len() != values_per_feature.len() {
                return Err(Error::ShapeMismatch("coefficient rows != features".into()));
            }
            for (i, row) in grid.iter().enumerate() {
                if row.len() != values_per_feature[i] {
                    return Err(Error::ShapeMismatch(format!("coefficient row {i} wrong length")));
                }
            }
        }
        for i in 0..values_per_feature.len() {
            for j in 0..values_per_feature[i] {
                let s: f64 = coeffs.iter().map(|g| g[i][j]).sum();
                if s.abs() > 1e-12 {
                    return Err(Error::InvalidArg(format!(
                        "slot ({i},{j}) coefficients sum to {s}, not 0"
                    )));
                }
            }
        }
        Ok(Self { values_per_feature, base, coeffs })
    }

    fn eval(&self, rows: &[Vec<f64>]) -> Result<ConfidenceVector> {
        if rows.len() != self.values_per_feature.len() {
            return Err(Error::ShapeMismatch("indicator rows != features".into()));
        }
        let mut probs = self.base.clone();
        for (k, p) in probs.iter_mut().enumerate() {
            for (i, row) in rows.iter().enumerate() {
                for (j, &b) in row.iter().enumerate() {
                    *p += self.coeffs[k][i][j] * b;
                }
            }
        }
        ConfidenceVector::new(probs)
    }
}

impl Classifier for AffineClassifier {
    fn values_per_feature(&self) -> &[usize] {
        &self.values_per_feature
    }

    fn num_classes(&self) -> usize {
        self.base.len()
    }

    fn predict(&self, inst: &Instance) -> Result<ConfidenceVector> {
        inst.validate_shape(&self.values_per_feature)?;
        self.eval(&inst.indicators(&self.values_per_feature))
    }

    fn predict_relaxed(&self, rows: &[Vec<f64>]) -> Result<ConfidenceVector> {
        self.eval(rows)
    }

    fn white_box(&self) -> bool {
        true
    }

    fn grad_indicators(&self, inst: &Instance, objective: Objective) -> Result<Vec<Vec<f64>>> {
        let conf = self.predict(inst)?;
        let grid = |k: usize| -> Vec<Vec<f64>> { self.coeffs[k].clone() };
        Ok(match objective {
            Objective::Margin => {
                let (wrong, _) = conf.best_wrong(inst.label);
                let mut g = grid(wrong);
                for (row, trow) in g.iter_mut().zip(&self.coeffs[inst.label]) {
                    for (v, t) in row.iter_mut().zip(trow) {
                        *v -= t;
                    }
                }
                g
            }
            Objective::Class(k) => grid(k),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn zero_model(n: usize, m: usize, k: usize, d: usize) -> EmbedMlpModel {
        let spec = GenSpec::uniform_m(n, m, k, d, Sensitivity::Uniform, 7);
        let mut model = EmbedMlpModel::generate(&spec).unwrap();
        for w in &mut model.weights {
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        for b in &mut model.biases {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
        model
    }

    #[test]
    fn zero_parameters_give_uniform_confidences() {
        let model = zero_model(3, 2, 4, 2);
        let inst = Instance::new(vec![Some(0), Some(1), None], 0);
        let conf = model.predict(&inst).unwrap();
        for &p in conf.probs() {
            assert_relative_eq!(p, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn identical_embeddings_are_interchangeable() {
        // Two values of feature 0 share an embedding vector.
        let table = EmbeddingTable::from_flat(
            vec![2, 2],
            2,
            vec![0.3, -0.7, 0.3, -0.7, 0.1, 0.2, -0.4, 0.5],
        )
        .unwrap();
        let w = vec![vec![0.5, -0.2, 0.8, 0.3, -0.6, 0.9, 0.1, -0.3]];
        let b = vec![vec![0.05, -0.05]];
        let model = EmbedMlpModel::from_parts(table, 2, &[], w, b, 0).unwrap();
        let a = model.predict(&Instance::new(vec![Some(0), Some(1)], 0)).unwrap();
        let b2 = model.predict(&Instance::new(vec![Some(1), Some(1)], 0)).unwrap();
        assert_eq!(a.probs(), b2.probs());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = GenSpec::uniform_m(5, 3, 3, 4, Sensitivity::Skewed { top: 2 }, 42);
        let a = EmbedMlpModel::generate(&spec).unwrap();
        let b = EmbedMlpModel::generate(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prediction_is_reproducible() {
        let spec = GenSpec::uniform_m(4, 3, 3, 4, Sensitivity::Uniform, 42);
        let model = EmbedMlpModel::generate(&spec).unwrap();
        let inst = Instance::new(vec![Some(0), Some(2), Some(1), Some(0)], 1);
        let a = model.predict(&inst).unwrap();
        let b = model.predict(&inst).unwrap();
        assert_eq!(a.probs(), b.probs());
        // Golden bits recorded once from this seed; any drift in the
        // generator or forward pass shows up as an exact mismatch.
        let golden =
            [0x3fe9e5d31ce0d37fu64, 0x3fc39642cca2e683, 0x3fa349c2ff672dff].map(f64::from_bits);
        assert_eq!(a.probs(), &golden);
    }

    #[test]
    fn constant_model_has_zero_gradient() {
        let model = zero_model(3, 2, 2, 2);
        let inst = Instance::new(vec![Some(0), Some(1), Some(0)], 0);
        let g = model.grad_indicators(&inst, Objective::Margin).unwrap();
        assert!(g.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn single_feature_model_has_local_gradient() {
        let spec = GenSpec::uniform_m(3, 2, 2, 2, Sensitivity::Uniform, 11);
        let mut model = EmbedMlpModel::generate(&spec).unwrap();
        // Zero the first-layer columns of features 1 and 2 (blocks of dim 2).
        let cols = model.layer_sizes[0];
        let rows = model.layer_sizes[1];
        for r in 0..rows {
            for c in 2..cols {
                model.weights[0][r * cols + c] = 0.0;
            }
        }
        let inst = Instance::new(vec![Some(0), Some(1), Some(0)], 0);
        let g = model.grad_indicators(&inst, Objective::Margin).unwrap();
        assert!(g[0].iter().any(|&v| v != 0.0));
        assert!(g[1].iter().all(|&v| v == 0.0));
        assert!(g[2].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..8u64 {
            let spec = GenSpec::uniform_m(5, 3, 3, 4, Sensitivity::Uniform, seed);
            let model = EmbedMlpModel::generate(&spec).unwrap();
            let inst = Instance::new(vec![Some(0), Some(2), Some(1), Some(0), Some(2)], 1);
            for objective in [Objective::Margin, Objective::Class(0)] {
                let analytic = model.grad_indicators(&inst, objective).unwrap();
                let fd = finite_diff_grad(&model, &inst, objective, 1e-5).unwrap();
                let err = max_relative_error(&analytic, &fd, 1e-6);
                assert!(err <= 1e-4, "seed {seed} {objective:?}: rel err {err}");
            }
        }
    }

    #[test]
    fn finite_diff_exact_on_affine_classifier() {
        let coeffs = vec![
            vec![vec![0.04, -0.02], vec![0.01, 0.03]],
            vec![vec![-0.04, 0.02], vec![-0.01, -0.03]],
        ];
        let model = AffineClassifier::new(vec![2, 2], vec![0.6, 0.4], coeffs).unwrap();
        let inst = Instance::new(vec![Some(0), Some(1)], 0);
        let analytic = model.grad_indicators(&inst, Objective::Margin).unwrap();
        let fd = finite_diff_grad(&model, &inst, Objective::Margin, 1e-3).unwrap();
        for (ra, rf) in analytic.iter().zip(&fd) {
            for (&a, &f) in ra.iter().zip(rf) {
                assert_relative_eq!(a, f, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn overflowing_parameters_reported_non_finite() {
        let table =
            EmbeddingTable::from_flat(vec![2], 1, vec![1e308, 1e308]).unwrap();
        let model = EmbedMlpModel::from_parts(
            table,
            2,
            &[],
            vec![vec![1e308, 1e308]],
            vec![vec![0.0, 0.0]],
            0,
        )
        .unwrap();
        let inst = Instance::new(vec![Some(0)], 0);
        assert!(matches!(model.predict(&inst), Err(Error::NonFinite(_))));
    }

    #[test]
    fn handle_counts_queries_and_grads() {
        let model = make_planted_classifier(4, 3, 2, 3, Sensitivity::Uniform, 5).unwrap();
        let mut handle = ClassifierHandle::new(&model);
        let inst = Instance::new(vec![Some(0), Some(1), Some(2), Some(0)], 0);
        handle.predict(&inst).unwrap();
        handle.predict(&inst).unwrap();
        handle.grad_indicators(&inst, Objective::Margin).unwrap();
        assert_eq!(handle.queries(), 2);
        assert_eq!(handle.grad_passes(), 1);

        let mut masked = ClassifierHandle::black_box(&model);
        assert!(matches!(
            masked.grad_indicators(&inst, Objective::Margin),
            Err(Error::BlackBoxModel)
        ));
        assert_eq!(masked.grad_passes(), 0);
    }

    #[test]
    fn planted_skewed_dominates_uniform_spread() {
        // Scale contract: planted features' achievable embedding deltas are
        // at least 10x the rest.
        let model = make_planted_classifier(6, 3, 2, 4, Sensitivity::Skewed { top: 2 }, 9).unwrap();
        let mean_dist = |i: usize| -> f64 {
            let mut sum = 0.0;
            let mut pairs = 0;
            for a in 0..3 {
                for b in a + 1..3 {
                    sum += model
                        .table()
                        .vector(i, a)
                        .iter()
                        .zip(model.table().vector(i, b))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt();
                    pairs += 1;
                }
            }
            sum / pairs as f64
        };
        for planted in 0..2 {
            for rest in 2..6 {
                assert!(mean_dist(planted) >= 10.0 * mean_dist(rest));
            }
        }
    }
}
