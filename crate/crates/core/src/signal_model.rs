//! Joint signal distributions, Delta matrices, and world classification.
//!
//! A world is a joint distribution over the signal pair observed by two
//! agents on one task. Its Delta matrix (joint minus product of marginals)
//! encodes which signal pairs are positively correlated; the binary sign
//! structure of Delta is all the correlated-agreement mechanism needs.
//! Signals are indexed `0..n` internally; file formats use 1-based signal
//! numbers only where noted.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::SquareMatrix;

/// Default tolerance for probability-level checks (sums to one, row sums
/// of Delta to zero, symmetry).
pub const DEFAULT_PROB_TOL: f64 = 1e-9;
/// Default tolerance below which a Delta entry is treated as zero when
/// signing.
pub const DEFAULT_SIGN_TOL: f64 = 1e-12;
/// Cap on the n!-sized permutation-pair search in [`classify`].
pub const PERMUTATION_SEARCH_CAP: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub prob: f64,
    pub sign: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { prob: DEFAULT_PROB_TOL, sign: DEFAULT_SIGN_TOL }
    }
}

/// Joint distribution P(S1 = i, S2 = j) over the two agents' signals.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSignalModel {
    n: usize,
    labels: Option<Vec<String>>,
    joint: SquareMatrix,
    tolerances: Tolerances,
}

impl JointSignalModel {
    pub fn new(joint: SquareMatrix) -> Result<Self> {
        Self::with_tolerances(joint, Tolerances::default())
    }

    pub fn with_tolerances(joint: SquareMatrix, tolerances: Tolerances) -> Result<Self> {
        let n = joint.n();
        if n < 2 {
            return Err(Error::validation(format!("signal count n = {n}, need n >= 2")));
        }
        for i in 0..n {
            for j in 0..n {
                let p = joint.get(i, j);
                if !p.is_finite() || p < -tolerances.prob {
                    return Err(Error::validation(format!(
                        "joint[{i}][{j}] = {p} is negative or non-finite"
                    )));
                }
            }
        }
        let total = joint.sum();
        if (total - 1.0).abs() > tolerances.prob {
            return Err(Error::validation(format!(
                "joint entries sum to {total}, expected 1 within {}",
                tolerances.prob
            )));
        }
        Ok(JointSignalModel { n, labels: None, joint, tolerances })
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n {
            return Err(Error::validation(format!(
                "{} labels for {} signals",
                labels.len(),
                self.n
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn joint(&self) -> &SquareMatrix {
        &self.joint
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn tolerances(&self) -> Tolerances {
        self.tolerances
    }

    /// P(S1 = i), by row sums.
    pub fn marginal1(&self) -> Vec<f64> {
        self.joint.row_sums()
    }

    /// P(S2 = j), by column sums.
    pub fn marginal2(&self) -> Vec<f64> {
        self.joint.col_sums()
    }

    /// Exchangeability (symmetry of the joint) is checked and reported,
    /// never required.
    pub fn is_exchangeable(&self) -> bool {
        self.joint.is_symmetric(self.tolerances.prob)
    }
}

/// Delta matrix: joint minus the product of its marginals. Rows and
/// columns each sum to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaMatrix {
    n: usize,
    delta: SquareMatrix,
    zero_tolerance: f64,
}

impl DeltaMatrix {
    /// Wrap a pre-computed Delta, validating the zero row/column sums.
    /// Intended for hand-built fixtures; models go through [`delta_of`].
    pub fn from_matrix(delta: SquareMatrix, zero_tolerance: f64) -> Result<Self> {
        let n = delta.n();
        for (i, s) in delta.row_sums().iter().enumerate() {
            if s.abs() > DEFAULT_PROB_TOL {
                return Err(Error::validation(format!("delta row {i} sums to {s}, expected 0")));
            }
        }
        for (j, s) in delta.col_sums().iter().enumerate() {
            if s.abs() > DEFAULT_PROB_TOL {
                return Err(Error::validation(format!("delta column {j} sums to {s}, expected 0")));
            }
        }
        Ok(DeltaMatrix { n, delta, zero_tolerance })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &SquareMatrix {
        &self.delta
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.delta.get(i, j)
    }

    pub fn zero_tolerance(&self) -> f64 {
        self.zero_tolerance
    }

    /// Sum of the strictly positive entries: the truthful expected score
    /// under the correlated-agreement score matrix.
    pub fn positive_entry_sum(&self) -> f64 {
        self.delta
            .entries()
            .iter()
            .filter(|&&v| v > self.zero_tolerance)
            .sum()
    }

    /// True when some entry is indistinguishable from zero at the sign
    /// tolerance. Verdicts that rely on "all Delta entries nonzero" carry
    /// this as a caveat.
    pub fn has_zero_entries(&self) -> bool {
        self.delta.entries().iter().any(|v| v.abs() <= self.zero_tolerance)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.delta.is_symmetric(tol)
    }
}

/// Sign(Delta): entry 1 where Delta is strictly positive, 0 otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignStructure {
    n: usize,
    sign: Vec<u8>,
}

impl SignStructure {
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        let mut sign = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::dimension(format!("sign row {i} has {} entries", row.len())));
            }
            for &v in row {
                if v > 1 {
                    return Err(Error::validation(format!("sign entries must be 0 or 1, got {v}")));
                }
                sign.push(v);
            }
        }
        Ok(SignStructure { n, sign })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.sign[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.sign[i * self.n..(i + 1) * self.n]
    }

    pub fn column(&self, j: usize) -> Vec<u8> {
        (0..self.n).map(|i| self.get(i, j)).collect()
    }

    pub fn is_identity(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.get(i, j) == u8::from(i == j)))
    }

    pub fn is_all_zero(&self) -> bool {
        self.sign.iter().all(|&v| v == 0)
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterAxis {
    Rows,
    Columns,
}

/// Two signals whose Sign(Delta) rows (or columns) coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterWitness {
    pub axis: ClusterAxis,
    pub first: usize,
    pub second: usize,
}

/// Classification of a world's correlation structure.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldClassification {
    /// Sign(Delta) is the identity: every signal makes all others less
    /// likely than their prior.
    pub categorical: bool,
    pub clustered_signals: bool,
    pub clustered_witness: Option<ClusterWitness>,
    /// Distinct permutation matrices P ≠ Q with P·Sign(Δ) = Sign(Δ)·Q.
    pub paired_permutations: bool,
    /// Witness permutations as maps: index i reports p[i].
    pub paired_witness: Option<(Vec<usize>, Vec<usize>)>,
    pub stochastically_relevant: bool,
    pub has_zero_delta_entries: bool,
    /// Whether the joint was symmetric. Theorem-style converse guarantees
    /// are only claimed for exchangeable worlds.
    pub exchangeable: bool,
}

/// Delta = joint − marginal1·marginal2ᵀ.
pub fn delta_of(model: &JointSignalModel) -> DeltaMatrix {
    let outer = SquareMatrix::outer(&model.marginal1(), &model.marginal2());
    DeltaMatrix {
        n: model.n(),
        delta: model.joint().sub(&outer),
        zero_tolerance: model.tolerances().sign,
    }
}

/// Binary sign structure of a Delta matrix: 1 iff the entry exceeds the
/// sign tolerance.
pub fn sign_of(delta: &DeltaMatrix) -> SignStructure {
    sign_of_matrix(delta.matrix(), delta.zero_tolerance())
}

/// Sign structure of an arbitrary matrix, e.g. an empirical Γ estimate
/// whose rows need not sum to zero.
pub fn sign_of_matrix(m: &SquareMatrix, tol: f64) -> SignStructure {
    let n = m.n();
    let sign = m.entries().iter().map(|&v| u8::from(v > tol)).collect();
    SignStructure { n, sign }
}

/// Classify a world: categorical / clustered / paired-permutation
/// structure, stochastic relevance, degeneracy and exchangeability flags.
///
/// The permutation-pair search is exact for all n!² pairs but works per
/// row permutation, matching column multisets instead of enumerating the
/// second permutation; it errors above [`PERMUTATION_SEARCH_CAP`].
pub fn classify(model: &JointSignalModel) -> Result<WorldClassification> {
    let n = model.n();
    if n > PERMUTATION_SEARCH_CAP {
        return Err(Error::CapExceeded { n, cap: PERMUTATION_SEARCH_CAP });
    }
    let delta = delta_of(model);
    let sign = sign_of(&delta);

    let clustered_witness = find_cluster(&sign);
    let paired_witness = find_paired_permutations(&sign);

    Ok(WorldClassification {
        categorical: sign.is_identity(),
        clustered_signals: clustered_witness.is_some(),
        clustered_witness,
        paired_permutations: paired_witness.is_some(),
        paired_witness,
        stochastically_relevant: stochastically_relevant(model),
        has_zero_delta_entries: delta.has_zero_entries(),
        exchangeable: model.is_exchangeable(),
    })
}

fn find_cluster(sign: &SignStructure) -> Option<ClusterWitness> {
    let n = sign.n();
    for i in 0..n {
        for j in (i + 1)..n {
            if sign.row(i) == sign.row(j) {
                return Some(ClusterWitness { axis: ClusterAxis::Rows, first: i, second: j });
            }
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if sign.column(i) == sign.column(j) {
                return Some(ClusterWitness { axis: ClusterAxis::Columns, first: i, second: j });
            }
        }
    }
    None
}

/// Search for distinct permutations p ≠ q with P·S = S·Q.
///
/// Row i of P·S is row p(i) of S, and column k of S·Q is column q⁻¹(k) of
/// S. For each p we therefore need a bijection q matching every column of
/// the row-permuted matrix to an equal column of S; encoding columns as
/// n-bit keys makes this a multiset comparison.
fn find_paired_permutations(sign: &SignStructure) -> Option<(Vec<usize>, Vec<usize>)> {
    let n = sign.n();
    // Column keys of S: bit i of key[k] is S[i][k].
    let col_key = |perm: Option<&[usize]>, k: usize| -> u32 {
        let mut key = 0u32;
        for i in 0..n {
            let row = perm.map_or(i, |p| p[i]);
            key |= u32::from(sign.get(row, k)) << i;
        }
        key
    };
    let s_keys: Vec<u32> = (0..n).map(|k| col_key(None, k)).collect();
    let mut s_sorted: Vec<(u32, usize)> =
        s_keys.iter().copied().enumerate().map(|(k, v)| (v, k)).collect();
    s_sorted.sort_unstable();

    for p in (0..n).permutations(n) {
        let ps_keys: Vec<u32> = (0..n).map(|k| col_key(Some(&p), k)).collect();
        let mut ps_sorted: Vec<(u32, usize)> =
            ps_keys.iter().copied().enumerate().map(|(k, v)| (v, k)).collect();
        ps_sorted.sort_unstable();
        if s_sorted.iter().map(|(v, _)| v).ne(ps_sorted.iter().map(|(v, _)| v)) {
            continue; // column multisets differ: no q exists for this p
        }
        // Canonical matching: pair equal keys in sorted order. q maps the
        // S-column index to the P·S-column index holding the same vector.
        let mut q = vec![0usize; n];
        for ((_, c), (_, k)) in s_sorted.iter().zip(ps_sorted.iter()) {
            q[*c] = *k;
        }
        if q != p {
            return Some((p, q));
        }
        // q == p: any duplicate column group yields a second valid q.
        for w in ps_sorted.windows(2) {
            if w[0].0 == w[1].0 {
                let mut q2 = q.clone();
                let (a, b) = (w[0].1, w[1].1);
                let (ca, cb) = (
                    q2.iter().position(|&k| k == a).unwrap(),
                    q2.iter().position(|&k| k == b).unwrap(),
                );
                q2.swap(ca, cb);
                return Some((p, q2));
            }
        }
    }
    None
}

/// Stochastic relevance: any two distinct signals of one agent induce
/// different conditional distributions over the other agent's signal (and
/// symmetrically). A zero-probability signal has no conditional and fails
/// the check.
fn stochastically_relevant(model: &JointSignalModel) -> bool {
    let n = model.n();
    let tol = model.tolerances().prob;
    let relevant_along = |marginal: &[f64], cond_row: &dyn Fn(usize) -> Vec<f64>| -> bool {
        for s in 0..n {
            if marginal[s] <= tol {
                return false;
            }
        }
        let rows: Vec<Vec<f64>> = (0..n).map(cond_row).collect();
        for a in 0..n {
            for b in (a + 1)..n {
                let distinct = rows[a]
                    .iter()
                    .zip(&rows[b])
                    .any(|(x, y)| (x - y).abs() > tol);
                if !distinct {
                    return false;
                }
            }
        }
        true
    };
    let m1 = model.marginal1();
    let m2 = model.marginal2();
    let joint = model.joint();
    relevant_along(&m1, &|i| (0..n).map(|j| joint.get(i, j) / m1[i]).collect())
        && relevant_along(&m2, &|j| (0..n).map(|i| joint.get(i, j) / m2[j]).collect())
}

// --- model file format -----------------------------------------------

/// JSON document shape for model files:
/// `{ "n": 2, "labels": ["low","high"], "joint": [[0.4,0.15],[0.15,0.3]] }`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    pub joint: Vec<Vec<f64>>,
}

impl ModelFile {
    pub fn into_model(self) -> Result<JointSignalModel> {
        if self.joint.len() != self.n {
            return Err(Error::validation(format!(
                "joint has {} rows but n = {}",
                self.joint.len(),
                self.n
            )));
        }
        let joint = SquareMatrix::from_rows(&self.joint)?;
        let model = JointSignalModel::new(joint)?;
        match self.labels {
            Some(labels) => model.with_labels(labels),
            None => Ok(model),
        }
    }

    pub fn from_model(model: &JointSignalModel) -> Self {
        ModelFile {
            n: model.n(),
            labels: model.labels().map(<[String]>::to_vec),
            joint: model.joint().to_rows(),
        }
    }
}

pub fn model_from_json(json: &str) -> Result<JointSignalModel> {
    let file: ModelFile = serde_json::from_str(json)?;
    file.into_model()
}

pub fn model_to_json(model: &JointSignalModel) -> String {
    serde_json::to_string_pretty(&ModelFile::from_model(model)).expect("model serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn paper_model() -> JointSignalModel {
        let joint =
            SquareMatrix::from_rows(&[vec![0.4, 0.15], vec![0.15, 0.3]]).unwrap();
        JointSignalModel::new(joint).unwrap()
    }

    #[test]
    fn paper_example_delta_exact() {
        let delta = delta_of(&paper_model());
        // 0.4 − 0.55² and 0.15 − 0.55·0.45, computed by hand.
        assert!((delta.get(0, 0) - 0.0975).abs() < 1e-15);
        assert!((delta.get(0, 1) + 0.0975).abs() < 1e-15);
        assert!((delta.get(1, 0) + 0.0975).abs() < 1e-15);
        assert!((delta.get(1, 1) - 0.0975).abs() < 1e-15);
        let sign = sign_of(&delta);
        assert!(sign.is_identity());
    }

    #[test]
    fn independent_signals_have_zero_delta() {
        let m1 = [0.3, 0.7];
        let joint = SquareMatrix::outer(&m1, &m1);
        let model = JointSignalModel::new(joint).unwrap();
        let delta = delta_of(&model);
        assert!(delta.matrix().entries().iter().all(|v| v.abs() < 1e-15));
        assert!(sign_of(&delta).is_all_zero());
        assert!(delta.has_zero_entries());
    }

    #[test]
    fn malformed_models_rejected_by_named_constraint() {
        let neg = SquareMatrix::from_rows(&[vec![0.5, -0.1], vec![0.3, 0.3]]).unwrap();
        let err = JointSignalModel::new(neg).unwrap_err();
        assert!(err.to_string().contains("negative"), "{err}");

        let bad_sum = SquareMatrix::from_rows(&[vec![0.5, 0.1], vec![0.1, 0.1]]).unwrap();
        let err = JointSignalModel::new(bad_sum).unwrap_err();
        assert!(err.to_string().contains("sum"), "{err}");
    }

    #[test]
    fn delta_row_and_column_sums_vanish() {
        let delta = delta_of(&paper_model());
        for s in delta.matrix().row_sums() {
            assert!(s.abs() < 1e-12);
        }
        for s in delta.matrix().col_sums() {
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn classify_paper_model_categorical() {
        let c = classify(&paper_model()).unwrap();
        assert!(c.categorical);
        assert!(!c.clustered_signals);
        assert!(!c.paired_permutations);
        assert!(c.stochastically_relevant);
        assert!(c.exchangeable);
        assert!(!c.has_zero_delta_entries);
    }

    #[test]
    fn identity_sign_has_no_paired_permutations() {
        // P·I = I·Q forces P = Q, so the search must come back empty.
        for n in 2..=5 {
            let rows: Vec<Vec<u8>> =
                (0..n).map(|i| (0..n).map(|j| u8::from(i == j)).collect()).collect();
            let sign = SignStructure::from_rows(&rows).unwrap();
            assert!(find_paired_permutations(&sign).is_none(), "n = {n}");
        }
    }

    #[test]
    fn clustered_rows_detected() {
        let sign = SignStructure::from_rows(&[
            vec![1, 1, 0, 0],
            vec![1, 1, 0, 0],
            vec![0, 0, 1, 1],
            vec![0, 0, 1, 1],
        ])
        .unwrap();
        let w = find_cluster(&sign).unwrap();
        assert_eq!(w.axis, ClusterAxis::Rows);
        assert_eq!((w.first, w.second), (0, 1));
        // Identical sign rows also admit P = swap, Q = identity.
        assert!(find_paired_permutations(&sign).is_some());
    }

    #[test]
    fn classify_cap() {
        let n = 9;
        let mut joint = SquareMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                joint.set(i, j, if i == j { 0.1 } else { 0.1 / 72.0 });
            }
        }
        let model = JointSignalModel::new(joint).unwrap();
        match classify(&model) {
            Err(Error::CapExceeded { n: 9, cap }) => assert_eq!(cap, PERMUTATION_SEARCH_CAP),
            other => panic!("expected cap error, got {other:?}"),
        }
    }

    #[test]
    fn model_json_round_trip() {
        let json = r#"{ "n": 2, "labels": ["lo","hi"], "joint": [[0.4,0.15],[0.15,0.3]] }"#;
        let model = model_from_json(json).unwrap();
        assert_eq!(model.labels().unwrap(), ["lo", "hi"]);
        let back = model_from_json(&model_to_json(&model)).unwrap();
        assert_eq!(back, model);
    }
}
