//! Categorical instances, their indicator/embedding encodings, and feature
//! edits.
//!
//! An instance is a vector of `N` categorical features; feature `i` either
//! holds one of `M_i` values or is absent. The binary indicator view `b`
//! has `b[i][j] = 1` exactly when feature `i` holds value `j`, so an absent
//! feature is an all-zero row. Edits come in three kinds (insert, delete,
//! substitute) and each kind changes exactly one feature, so the edit
//! budget counts features, not indicator flips.
//!
//! All types here are immutable after construction and all operations are
//! pure.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Marker for an absent feature in serialized form (`null` in JSON).
pub const ABSENT: Option<usize> = None;

/// Per-feature, per-value embedding vectors.
///
/// Storage is a single flat buffer in row-major `(feature, value, component)`
/// order, which is also the on-disk payload layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    num_features: usize,
    values_per_feature: Vec<usize>,
    dim: usize,
    /// Flat `(i, j, d)`-ordered buffer of length `sum(M_i) * dim`.
    data: Vec<f64>,
    /// `offsets[i]` = number of (value, component) slots before feature `i`.
    offsets: Vec<usize>,
}

impl EmbeddingTable {
    /// Builds a table from a flat `(feature, value, component)`-ordered buffer.
    pub fn from_flat(values_per_feature: Vec<usize>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || values_per_feature.is_empty() {
            return Err(Error::InvalidArg(
                "embedding table needs at least one feature and dim >= 1".into(),
            ));
        }
        if values_per_feature.contains(&0) {
            return Err(Error::InvalidArg("every feature needs at least one value".into()));
        }
        let total: usize = values_per_feature.iter().sum::<usize>() * dim;
        if data.len() != total {
            return Err(Error::ShapeMismatch(format!(
                "embedding payload has {} values, expected {}",
                data.len(),
                total
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("embedding table contains a non-finite entry".into()));
        }
        let mut offsets = Vec::with_capacity(values_per_feature.len());
        let mut acc = 0usize;
        for &m in &values_per_feature {
            offsets.push(acc);
            acc += m * dim;
        }
        Ok(Self {
            num_features: values_per_feature.len(),
            values_per_feature,
            dim,
            data,
            offsets,
        })
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn values_per_feature(&self) -> &[usize] {
        &self.values_per_feature
    }

    /// Number of optional values of feature `i`.
    pub fn num_values(&self, feature: usize) -> usize {
        self.values_per_feature[feature]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Largest `M_i` across features.
    pub fn max_values(&self) -> usize {
        self.values_per_feature.iter().copied().max().unwrap_or(0)
    }

    /// The embedding vector of value `j` of feature `i`.
    pub fn vector(&self, feature: usize, value: usize) -> &[f64] {
        debug_assert!(value < self.values_per_feature[feature]);
        let start = self.offsets[feature] + value * self.dim;
        &self.data[start..start + self.dim]
    }

    /// The flat `(feature, value, component)`-ordered payload.
    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    /// Multiplies every embedding vector of one feature by `factor`.
    pub(crate) fn scale_feature(&mut self, feature: usize, factor: f64) {
        let start = self.offsets[feature];
        let len = self.values_per_feature[feature] * self.dim;
        for v in &mut self.data[start..start + len] {
            *v *= factor;
        }
    }
}

/// A categorical sample: one optional value index per feature plus a class
/// label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instance {
    /// `categories[i]` is `Some(j)` when feature `i` takes value `j`,
    /// `None` when the feature is absent.
    pub categories: Vec<Option<usize>>,
    /// True class index.
    pub label: usize,
}

impl Instance {
    pub fn new(categories: Vec<Option<usize>>, label: usize) -> Self {
        Self { categories, label }
    }

    pub fn num_features(&self) -> usize {
        self.categories.len()
    }

    /// Checks value ranges against per-feature value counts.
    pub fn validate_shape(&self, values_per_feature: &[usize]) -> Result<()> {
        if self.categories.len() != values_per_feature.len() {
            return Err(Error::ShapeMismatch(format!(
                "instance has {} features, expected {}",
                self.categories.len(),
                values_per_feature.len()
            )));
        }
        for (i, cat) in self.categories.iter().enumerate() {
            if let Some(j) = cat {
                if *j >= values_per_feature[i] {
                    return Err(Error::InvalidEdit(format!(
                        "feature {i} holds value {j} but only {} values exist",
                        values_per_feature[i]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Binary indicator rows; row `i` has length `M_i`.
    pub fn indicators(&self, values_per_feature: &[usize]) -> Vec<Vec<f64>> {
        self.categories
            .iter()
            .zip(values_per_feature)
            .map(|(cat, &m)| {
                let mut row = vec![0.0; m];
                if let Some(j) = cat {
                    row[*j] = 1.0;
                }
                row
            })
            .collect()
    }
}

/// The three edit kinds of a single-feature modification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditKind {
    Insert,
    Delete,
    Substitute,
}

/// One single-feature edit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edit {
    pub feature: usize,
    pub kind: EditKind,
    /// Target value for insert/substitute; must be empty for delete.
    pub new_value: Option<usize>,
}

impl Edit {
    pub fn insert(feature: usize, value: usize) -> Self {
        Self { feature, kind: EditKind::Insert, new_value: Some(value) }
    }

    pub fn delete(feature: usize) -> Self {
        Self { feature, kind: EditKind::Delete, new_value: None }
    }

    pub fn substitute(feature: usize, value: usize) -> Self {
        Self { feature, kind: EditKind::Substitute, new_value: Some(value) }
    }
}

/// A set of single-feature edits; the budget cost of applying it is exactly
/// `edits.len()`.
///
/// The struct itself is plain data; validity (distinct features, kind
/// preconditions) is enforced by [`apply_perturbation`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perturbation {
    pub edits: Vec<Edit>,
}

impl Perturbation {
    pub fn empty() -> Self {
        Self { edits: Vec::new() }
    }

    pub fn new(edits: Vec<Edit>) -> Self {
        Self { edits }
    }

    pub fn len(&self) -> usize {
        self.edits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edits.is_empty()
    }

    /// The perturbation that undoes `self` on `original`.
    ///
    /// Inserts become deletes, deletes become inserts of the original value,
    /// substitutes go back to the original value.
    pub fn inverse_on(&self, original: &Instance) -> Result<Perturbation> {
        let mut edits = Vec::with_capacity(self.edits.len());
        for e in &self.edits {
            if e.feature >= original.num_features() {
                return Err(Error::ShapeMismatch(format!(
                    "edit feature {} out of range",
                    e.feature
                )));
            }
            let orig = original.categories[e.feature];
            let inv = match e.kind {
                EditKind::Insert => Edit::delete(e.feature),
                EditKind::Delete => {
                    let v = orig.ok_or_else(|| {
                        Error::InvalidEdit(format!("delete on absent feature {}", e.feature))
                    })?;
                    Edit::insert(e.feature, v)
                }
                EditKind::Substitute => {
                    let v = orig.ok_or_else(|| {
                        Error::InvalidEdit(format!("substitute on absent feature {}", e.feature))
                    })?;
                    Edit::substitute(e.feature, v)
                }
            };
            edits.push(inv);
        }
        Ok(Perturbation::new(edits))
    }

    /// Reconstructs the edit set that turns `original` into `modified`.
    pub fn between(original: &Instance, modified: &Instance) -> Result<Perturbation> {
        let changed = diff(original, modified)?;
        let mut edits = Vec::with_capacity(changed.len());
        for i in changed {
            let edit = match (original.categories[i], modified.categories[i]) {
                (None, Some(v)) => Edit::insert(i, v),
                (Some(_), None) => Edit::delete(i),
                (Some(_), Some(v)) => Edit::substitute(i, v),
                (None, None) => unreachable!("diff never reports an unchanged feature"),
            };
            edits.push(edit);
        }
        Ok(Perturbation::new(edits))
    }
}

/// Applies a perturbation, returning the modified instance.
///
/// Every edit must satisfy its kind's precondition on `inst`: insert needs
/// the feature absent, delete needs it present, substitute needs it present
/// with a different target value. The input is left untouched.
pub fn apply_perturbation(inst: &Instance, p: &Perturbation) -> Result<Instance> {
    let mut seen = BTreeSet::new();
    for e in &p.edits {
        if !seen.insert(e.feature) {
            return Err(Error::DuplicateFeature(e.feature));
        }
        if e.feature >= inst.num_features() {
            return Err(Error::InvalidEdit(format!(
                "edit feature {} out of range (N = {})",
                e.feature,
                inst.num_features()
            )));
        }
    }
    let mut categories = inst.categories.clone();
    for e in &p.edits {
        let current = categories[e.feature];
        match e.kind {
            EditKind::Insert => {
                if current.is_some() {
                    return Err(Error::InvalidEdit(format!(
                        "insert on present feature {}",
                        e.feature
                    )));
                }
                let v = e.new_value.ok_or_else(|| {
                    Error::InvalidEdit(format!("insert on feature {} needs a value", e.feature))
                })?;
                categories[e.feature] = Some(v);
            }
            EditKind::Delete => {
                if current.is_none() {
                    return Err(Error::InvalidEdit(format!(
                        "delete on absent feature {}",
                        e.feature
                    )));
                }
                if e.new_value.is_some() {
                    return Err(Error::InvalidEdit(format!(
                        "delete on feature {} must not carry a value",
                        e.feature
                    )));
                }
                categories[e.feature] = None;
            }
            EditKind::Substitute => {
                let cur = current.ok_or_else(|| {
                    Error::InvalidEdit(format!("substitute on absent feature {}", e.feature))
                })?;
                let v = e.new_value.ok_or_else(|| {
                    Error::InvalidEdit(format!(
                        "substitute on feature {} needs a value",
                        e.feature
                    ))
                })?;
                if v == cur {
                    return Err(Error::InvalidEdit(format!(
                        "substitute on feature {} targets its current value {v}",
                        e.feature
                    )));
                }
                categories[e.feature] = Some(v);
            }
        }
    }
    Ok(Instance::new(categories, inst.label))
}

/// The set of features whose indicator rows differ between two instances.
///
/// Symmetric; each returned feature costs one unit of attack budget
/// regardless of the edit kind that produced it.
pub fn diff(a: &Instance, b: &Instance) -> Result<BTreeSet<usize>> {
    if a.num_features() != b.num_features() {
        return Err(Error::ShapeMismatch(format!(
            "instances have {} vs {} features",
            a.num_features(),
            b.num_features()
        )));
    }
    Ok(a.categories
        .iter()
        .zip(&b.categories)
        .enumerate()
        .filter(|(_, (x, y))| x != y)
        .map(|(i, _)| i)
        .collect())
}

/// Stacks an instance into its `[N][M_i][D]` embedding tensor.
///
/// Slice `(i, j, :)` equals the embedding vector of value `j` of feature `i`
/// when the instance holds that value, and the zero vector otherwise.
pub fn stack_tensor(inst: &Instance, table: &EmbeddingTable) -> Result<Vec<Vec<Vec<f64>>>> {
    inst.validate_shape(table.values_per_feature())?;
    let indicators = inst.indicators(table.values_per_feature());
    stack_tensor_relaxed(&indicators, table)
}

/// Relaxed overload of [`stack_tensor`]: slice `(i, j, :)` is the embedding
/// vector scaled by the real-valued indicator `b[i][j]`.
pub fn stack_tensor_relaxed(
    indicators: &[Vec<f64>],
    table: &EmbeddingTable,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if indicators.len() != table.num_features() {
        return Err(Error::ShapeMismatch(format!(
            "indicator rows {} != features {}",
            indicators.len(),
            table.num_features()
        )));
    }
    let mut out = Vec::with_capacity(indicators.len());
    for (i, row) in indicators.iter().enumerate() {
        if row.len() != table.num_values(i) {
            return Err(Error::ShapeMismatch(format!(
                "indicator row {i} has {} slots, expected {}",
                row.len(),
                table.num_values(i)
            )));
        }
        let mut feature_rows = Vec::with_capacity(row.len());
        for (j, &b) in row.iter().enumerate() {
            feature_rows.push(table.vector(i, j).iter().map(|e| b * e).collect());
        }
        out.push(feature_rows);
    }
    Ok(out)
}

/// Real-valued indicator rows, each entry in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedIndicators {
    values: Vec<Vec<f64>>,
}

impl RelaxedIndicators {
    /// Validates that every entry lies in `[0, 1]`.
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        for (i, row) in values.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidArg(format!(
                        "relaxed indicator ({i},{j}) = {v} outside [0,1]"
                    )));
                }
            }
        }
        Ok(Self { values })
    }

    /// The exact binary indicators of an instance.
    pub fn from_instance(inst: &Instance, values_per_feature: &[usize]) -> Result<Self> {
        inst.validate_shape(values_per_feature)?;
        Ok(Self { values: inst.indicators(values_per_feature) })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn into_rows(self) -> Vec<Vec<f64>> {
        self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(categories: &[Option<usize>]) -> Instance {
        Instance::new(categories.to_vec(), 0)
    }

    fn table_2x2() -> EmbeddingTable {
        // Feature 0: e(0,0)=[1,0], e(0,1)=[0,1]; feature 1: e(1,0)=[2,0], e(1,1)=[0,2].
        EmbeddingTable::from_flat(vec![2, 2], 2, vec![1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 2.0])
            .unwrap()
    }

    #[test]
    fn substitute_changes_exactly_one_feature() {
        let x = inst(&[Some(0), Some(1), Some(2)]);
        let p = Perturbation::new(vec![Edit::substitute(1, 0)]);
        let y = apply_perturbation(&x, &p).unwrap();
        assert_eq!(y.categories, vec![Some(0), Some(0), Some(2)]);
        assert_eq!(x.categories, vec![Some(0), Some(1), Some(2)]);
    }

    #[test]
    fn empty_perturbation_is_identity() {
        let x = inst(&[Some(0), None]);
        let y = apply_perturbation(&x, &Perturbation::empty()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn duplicate_feature_rejected() {
        let x = inst(&[Some(0), Some(1)]);
        let p = Perturbation::new(vec![Edit::substitute(0, 1), Edit::delete(0)]);
        assert!(matches!(apply_perturbation(&x, &p), Err(Error::DuplicateFeature(0))));
    }

    #[test]
    fn kind_preconditions_enforced() {
        let x = inst(&[Some(0), None]);
        let cases = vec![
            Edit::insert(0, 1),     // present
            Edit::delete(1),        // absent
            Edit::substitute(1, 0), // absent
            Edit::substitute(0, 0), // same value
        ];
        for e in cases {
            let p = Perturbation::new(vec![e]);
            assert!(matches!(apply_perturbation(&x, &p), Err(Error::InvalidEdit(_))), "{e:?}");
        }
    }

    #[test]
    fn diff_identity_and_single_edit() {
        let a = inst(&[Some(0), Some(1), Some(2)]);
        assert!(diff(&a, &a).unwrap().is_empty());
        let b = inst(&[Some(0), Some(0), Some(2)]);
        assert_eq!(diff(&a, &b).unwrap().into_iter().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn diff_counts_insert_and_substitute() {
        let a = inst(&[Some(0), None]);
        let b = inst(&[Some(1), Some(0)]);
        assert_eq!(diff(&a, &b).unwrap().into_iter().collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(diff(&b, &a).unwrap(), diff(&a, &b).unwrap());
    }

    #[test]
    fn diff_shape_mismatch() {
        let a = inst(&[Some(0)]);
        let b = inst(&[Some(0), Some(1)]);
        assert!(matches!(diff(&a, &b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn stack_tensor_one_hot() {
        let t = table_2x2();
        let x = Instance::new(vec![Some(1), None], 0);
        let tensor = stack_tensor(&x, &t).unwrap();
        assert_eq!(tensor[0][1], vec![0.0, 1.0]);
        assert_eq!(tensor[0][0], vec![0.0, 0.0]);
        assert_eq!(tensor[1][0], vec![0.0, 0.0]);
        assert_eq!(tensor[1][1], vec![0.0, 0.0]);
    }

    #[test]
    fn stack_tensor_all_absent_is_zero() {
        let t = table_2x2();
        let x = Instance::new(vec![None, None], 0);
        let tensor = stack_tensor(&x, &t).unwrap();
        for row in tensor.iter().flatten() {
            assert!(row.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn stack_tensor_relaxed_is_linear() {
        let t = table_2x2();
        let half = stack_tensor_relaxed(&[vec![0.5, 0.0], vec![0.0, 0.0]], &t).unwrap();
        assert_eq!(half[0][0], vec![0.5, 0.0]);
        let quarter = stack_tensor_relaxed(&[vec![0.25, 0.0], vec![0.0, 0.0]], &t).unwrap();
        for d in 0..2 {
            assert_eq!(half[0][0][d], 2.0 * quarter[0][0][d]);
        }
    }

    #[test]
    fn relaxed_indicators_range_checked() {
        assert!(RelaxedIndicators::new(vec![vec![0.0, 1.0]]).is_ok());
        assert!(RelaxedIndicators::new(vec![vec![1.1]]).is_err());
        assert!(RelaxedIndicators::new(vec![vec![-0.1]]).is_err());
    }

    #[test]
    fn inverse_restores_substitutions() {
        let x = inst(&[Some(0), Some(1), Some(2)]);
        let p = Perturbation::new(vec![Edit::substitute(0, 1), Edit::substitute(2, 0)]);
        let y = apply_perturbation(&x, &p).unwrap();
        let back = apply_perturbation(&y, &p.inverse_on(&x).unwrap()).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn between_reconstructs_all_kinds() {
        let a = inst(&[Some(0), None, Some(2)]);
        let b = inst(&[None, Some(1), Some(0)]);
        let p = Perturbation::between(&a, &b).unwrap();
        assert_eq!(apply_perturbation(&a, &p).unwrap(), b);
        assert_eq!(p.len(), 3);
    }

    #[test]
    fn embedding_table_shape_checks() {
        assert!(EmbeddingTable::from_flat(vec![2], 2, vec![0.0; 3]).is_err());
        assert!(EmbeddingTable::from_flat(vec![2], 2, vec![0.0, 0.0, 0.0, f64::NAN]).is_err());
        assert!(EmbeddingTable::from_flat(vec![0], 2, vec![]).is_err());
    }
}
