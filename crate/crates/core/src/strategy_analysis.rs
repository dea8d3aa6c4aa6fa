//! Exhaustive truthfulness verification over deterministic strategy
//! profiles, best responses, the strong-truthfulness feasibility search,
//! and the unintended-signal payoff bound.
//!
//! Restricting to deterministic strategies is sound: the expected score is
//! bilinear in the two mixed strategies, so some deterministic profile
//! always attains the optimum. Everything here enumerates the n^n × n^n
//! deterministic grid (or an exact per-column decomposition of it).

use std::collections::HashSet;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::SquareMatrix;
use crate::scoring::{expected_score_det, DeterministicStrategy, ScoreMatrix};
use crate::signal_model::DeltaMatrix;

/// Hard cap for enumerating a single agent's n^n strategies.
pub const STRATEGY_ENUM_CAP: usize = 6;
/// Above this, [`verify`] switches from the full profile cross product to
/// the per-column decomposition.
pub const FULL_PROFILE_CAP: usize = 4;
/// Cap for the feasibility LP, which enumerates all profiles as
/// constraints.
pub const FEASIBILITY_CAP: usize = 4;
/// Scores within this of each other count as equal in verdicts.
pub const DEFAULT_EQ_TOL: f64 = 1e-9;
/// Minimum LP margin for a score matrix to count as strictly separating.
pub const DEFAULT_FEAS_TOL: f64 = 1e-7;

const MAX_BEST_PROFILES: usize = 64;
const TIE_PRODUCT_CAP: usize = 20_000;

/// All n^n deterministic strategies, in lexicographic report order.
pub fn enumerate_strategies(n: usize) -> Result<Vec<DeterministicStrategy>> {
    if n > STRATEGY_ENUM_CAP {
        return Err(Error::CapExceeded { n, cap: STRATEGY_ENUM_CAP });
    }
    let count = n.pow(n as u32);
    let mut out = Vec::with_capacity(count);
    let mut reports = vec![0usize; n];
    loop {
        out.push(DeterministicStrategy::new(reports.clone()).expect("in range"));
        // odometer increment
        let mut k = n;
        loop {
            if k == 0 {
                return Ok(out);
            }
            k -= 1;
            reports[k] += 1;
            if reports[k] < n {
                break;
            }
            reports[k] = 0;
        }
    }
}

/// Stream of all strategy profiles (the n^n × n^n cross product).
pub fn enumerate_profiles(
    n: usize,
) -> Result<impl Iterator<Item = (DeterministicStrategy, DeterministicStrategy)>> {
    let strategies = enumerate_strategies(n)?;
    let right = strategies.clone();
    Ok(strategies
        .into_iter()
        .cartesian_product(right))
}

/// A profile with its expected score.
pub type ScoredProfile = (DeterministicStrategy, DeterministicStrategy, f64);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictCaveats {
    /// Some Delta entry is indistinguishable from zero; the clustered /
    /// paired-permutation lemmas assume none are.
    pub degenerate_delta_entries: bool,
    /// Delta is not symmetric; converse-direction guarantees assume it is.
    pub asymmetric_delta: bool,
    /// The tie search hit its enumeration cap; the tie list may be
    /// incomplete (flags are still based on found evidence only).
    pub tie_enumeration_truncated: bool,
}

#[derive(Debug, Clone)]
pub struct TruthfulnessVerdict {
    pub strictly_proper: bool,
    pub strongly_truthful: bool,
    pub informed_truthful: bool,
    pub truthful_score: f64,
    /// Profiles attaining the maximum expected score (within tolerance),
    /// truncated at a fixed size.
    pub best_profiles: Vec<ScoredProfile>,
    pub best_profiles_truncated: bool,
    /// A profile breaking strong truthfulness, present iff it is broken.
    /// Prefers the constructive deviations (signal merges, row
    /// replacements, permutation pairs) over an arbitrary maximizer.
    pub witness_violation: Option<ScoredProfile>,
    pub caveats: VerdictCaveats,
}

/// Per-strategy score table: `c[j][r]` is the contribution of agent 2
/// reporting `r` on signal `j`, given agent 1 plays `f`. The expected
/// score of `(f, g)` is the sum of `c[j][g(j)]` over columns, so for a
/// fixed `f` the optimal `g` decomposes column by column.
fn column_table(delta: &DeltaMatrix, s: &ScoreMatrix, f: &DeterministicStrategy) -> Vec<Vec<f64>> {
    let n = delta.n();
    let mut c = vec![vec![0.0; n]; n];
    for i in 0..n {
        let fi = f.report(i);
        for j in 0..n {
            let d = delta.get(i, j);
            if d == 0.0 {
                continue;
            }
            for (r, cell) in c[j].iter_mut().enumerate() {
                *cell += d * s.get(fi, r);
            }
        }
    }
    c
}

fn score_from_table(c: &[Vec<f64>], g: &DeterministicStrategy) -> f64 {
    c.iter().enumerate().map(|(j, col)| col[g.report(j)]).sum()
}

/// Column values closer than this count as tied in [`best_response`];
/// zero column sums of Delta otherwise leave ~1e−16 noise that would make
/// the tie-break arbitrary.
const BEST_RESPONSE_TIE_TOL: f64 = 1e-12;

/// Best response to a fixed deterministic strategy: each report of agent 2
/// maximizes its column independently; ties break to the lowest report.
pub fn best_response(
    delta: &DeltaMatrix,
    s: &ScoreMatrix,
    f: &DeterministicStrategy,
) -> Result<(DeterministicStrategy, f64)> {
    if f.n() != delta.n() || s.n() != delta.n() {
        return Err(Error::dimension(format!(
            "delta n = {}, score n = {}, strategy n = {}",
            delta.n(),
            s.n(),
            f.n()
        )));
    }
    let c = column_table(delta, s, f);
    let mut reports = Vec::with_capacity(delta.n());
    let mut score = 0.0;
    for col in &c {
        let (best_r, best_v) = col
            .iter()
            .copied()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(br, bv), (r, v)| {
                if v > bv + BEST_RESPONSE_TIE_TOL {
                    (r, v)
                } else {
                    (br, bv)
                }
            });
        reports.push(best_r);
        score += best_v;
    }
    Ok((DeterministicStrategy::new(reports)?, score))
}

fn is_exempt(f: &DeterministicStrategy, g: &DeterministicStrategy) -> bool {
    f == g && f.is_permutation()
}

/// Verify a (Delta, score-matrix) pair with the default equality
/// tolerance.
pub fn verify(delta: &DeltaMatrix, s: &ScoreMatrix) -> Result<TruthfulnessVerdict> {
    verify_with(delta, s, DEFAULT_EQ_TOL)
}

pub fn verify_with(delta: &DeltaMatrix, s: &ScoreMatrix, eq_tol: f64) -> Result<TruthfulnessVerdict> {
    let n = delta.n();
    if s.n() != n {
        return Err(Error::dimension(format!("delta n = {n}, score n = {}", s.n())));
    }
    if n > STRATEGY_ENUM_CAP {
        return Err(Error::CapExceeded { n, cap: STRATEGY_ENUM_CAP });
    }
    let identity = DeterministicStrategy::identity(n);
    let truthful_score = expected_score_det(delta, s, &identity, &identity)?;
    let strategies = enumerate_strategies(n)?;

    let mut caveats = VerdictCaveats {
        degenerate_delta_entries: delta.has_zero_entries(),
        asymmetric_delta: !delta.is_symmetric(crate::signal_model::DEFAULT_PROB_TOL),
        tie_enumeration_truncated: false,
    };

    // Pass 1: global maximum and strict properness, via the per-column
    // decomposition (exact at every n).
    let mut max_score = f64::NEG_INFINITY;
    let mut strictly_proper = true;
    let mut tables: Vec<Vec<Vec<f64>>> = Vec::with_capacity(strategies.len());
    let id_index = strategies
        .iter()
        .position(DeterministicStrategy::is_identity)
        .expect("identity enumerated");
    for f in &strategies {
        let c = column_table(delta, s, f);
        let best: f64 = c
            .iter()
            .map(|col| col.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .sum();
        max_score = max_score.max(best);
        if !f.is_identity() {
            let vs_truthful = score_from_table(&c, &identity);
            if vs_truthful >= truthful_score - eq_tol {
                strictly_proper = false;
            }
        }
        tables.push(c);
    }
    // Unilateral deviations by agent 2 against a truthful agent 1.
    for g in &strategies {
        if !g.is_identity()
            && score_from_table(&tables[id_index], g) >= truthful_score - eq_tol
        {
            strictly_proper = false;
        }
    }

    // Pass 2: collect the profiles within tolerance of the target level
    // (the global max), and classify ties against truthful.
    let target = max_score;
    let mut best_profiles: Vec<ScoredProfile> = Vec::new();
    let mut best_profiles_truncated = false;
    let mut nonexempt_tie: Option<ScoredProfile> = None;
    let mut uninformed_tie = false;
    let beaten = max_score > truthful_score + eq_tol;

    let mut consider = |f: &DeterministicStrategy, g: &DeterministicStrategy, e: f64| {
        if (e - target).abs() <= eq_tol {
            if best_profiles.len() < MAX_BEST_PROFILES {
                best_profiles.push((f.clone(), g.clone(), e));
            } else {
                best_profiles_truncated = true;
            }
        }
        if (e - truthful_score).abs() <= eq_tol {
            if nonexempt_tie.is_none() && !is_exempt(f, g) {
                nonexempt_tie = Some((f.clone(), g.clone(), e));
            }
            if f.is_uninformed() || g.is_uninformed() {
                uninformed_tie = true;
            }
        }
    };

    if n <= FULL_PROFILE_CAP {
        for (fi, f) in strategies.iter().enumerate() {
            for g in &strategies {
                let e = score_from_table(&tables[fi], g);
                consider(f, g, e);
            }
        }
    } else {
        // Per-column decomposition: a profile ties a level L ≤ maxE(f)
        // only if every column is within (maxE(f) − L) + tol of its
        // column max, so enumerating near-max column choices is exact.
        for (fi, f) in strategies.iter().enumerate() {
            let c = &tables[fi];
            let col_max: Vec<f64> = c
                .iter()
                .map(|col| col.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            let best: f64 = col_max.iter().sum();
            let relevant = |level: f64| best >= level - eq_tol;
            if !relevant(target) && !relevant(truthful_score) {
                continue;
            }
            let slack = (best - truthful_score.min(target)) + 2.0 * eq_tol;
            let options: Vec<Vec<usize>> = (0..n)
                .map(|j| {
                    (0..n)
                        .filter(|&r| c[j][r] >= col_max[j] - slack)
                        .collect()
                })
                .collect();
            let combos: usize = options.iter().map(Vec::len).product();
            if combos > TIE_PRODUCT_CAP {
                caveats.tie_enumeration_truncated = true;
            }
            let mut seen = 0usize;
            let mut reports = vec![0usize; n];
            let mut idx = vec![0usize; n];
            'combos: loop {
                for j in 0..n {
                    reports[j] = options[j][idx[j]];
                }
                let g = DeterministicStrategy::new(reports.clone()).expect("in range");
                let e = score_from_table(c, &g);
                consider(f, &g, e);
                seen += 1;
                if seen >= TIE_PRODUCT_CAP {
                    break 'combos;
                }
                let mut k = n;
                loop {
                    if k == 0 {
                        break 'combos;
                    }
                    k -= 1;
                    idx[k] += 1;
                    if idx[k] < options[k].len() {
                        break;
                    }
                    idx[k] = 0;
                }
            }
        }
    }

    let strongly_truthful = !beaten && nonexempt_tie.is_none();
    let informed_truthful = !beaten && !uninformed_tie;

    let witness_violation = if strongly_truthful {
        None
    } else if beaten {
        canonical_strict_witness(delta, s, truthful_score, eq_tol)
            .or_else(|| {
                best_profiles
                    .iter()
                    .find(|(f, g, _)| !is_exempt(f, g))
                    .cloned()
            })
            .or_else(|| best_profiles.first().cloned())
    } else {
        canonical_tie_witness(delta, s, truthful_score, eq_tol).or(nonexempt_tie)
    };

    Ok(TruthfulnessVerdict {
        strictly_proper,
        strongly_truthful,
        informed_truthful,
        truthful_score,
        best_profiles,
        best_profiles_truncated,
        witness_violation,
        caveats,
    })
}

/// Look for a strictly profitable symmetric merge: both agents report
/// `into` whenever they see `from`. Returns the best one.
fn canonical_strict_witness(
    delta: &DeltaMatrix,
    s: &ScoreMatrix,
    truthful: f64,
    tol: f64,
) -> Option<ScoredProfile> {
    let n = delta.n();
    let mut best: Option<ScoredProfile> = None;
    for from in 0..n {
        for into in 0..n {
            if from == into {
                continue;
            }
            let f = DeterministicStrategy::merge(n, from, into);
            let e = expected_score_det(delta, s, &f, &f).ok()?;
            if e > truthful + tol && best.as_ref().is_none_or(|(_, _, b)| e > *b) {
                best = Some((f.clone(), f, e));
            }
        }
    }
    best
}

/// Look for an exact tie of the constructive kinds: an uninformed
/// profile, a one-sided row replacement against a truthful opponent, or
/// an asymmetric permutation pair.
fn canonical_tie_witness(
    delta: &DeltaMatrix,
    s: &ScoreMatrix,
    truthful: f64,
    tol: f64,
) -> Option<ScoredProfile> {
    let n = delta.n();
    let identity = DeterministicStrategy::identity(n);
    if truthful.abs() <= tol {
        let c = DeterministicStrategy::constant(n, 0);
        let e = expected_score_det(delta, s, &c, &c).ok()?;
        return Some((c.clone(), c, e));
    }
    for i in 0..n {
        for i2 in 0..n {
            if i == i2 {
                continue;
            }
            let m = DeterministicStrategy::merge(n, i, i2);
            let e = expected_score_det(delta, s, &m, &identity).ok()?;
            if (e - truthful).abs() <= tol {
                return Some((m, identity, e));
            }
            let e = expected_score_det(delta, s, &identity, &m).ok()?;
            if (e - truthful).abs() <= tol {
                return Some((identity, m, e));
            }
        }
    }
    for p in (0..n).permutations(n) {
        let fp = DeterministicStrategy::new(p).expect("permutation");
        let c = column_table(delta, s, &fp);
        for q in (0..n).permutations(n) {
            let gq = DeterministicStrategy::new(q).expect("permutation");
            if fp == gq {
                continue;
            }
            let e = score_from_table(&c, &gq);
            if (e - truthful).abs() <= tol {
                return Some((fp, gq, e));
            }
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityResult {
    pub feasible: bool,
    /// A certified strictly separating score matrix, when one exists.
    pub score_matrix: Option<ScoreMatrix>,
    /// Optimal separation margin over non-exempt profiles with score
    /// entries bounded in [−1, 1].
    pub margin: f64,
}

/// Does *any* real-valued score matrix make this world strongly truthful?
///
/// Maximizes the margin m subject to `E(I,I) − E(F,G) ≥ m` for every
/// deterministic profile except symmetric permutations, which instead get
/// the weak inequality `E(I,I) − E(P,P) ≥ 0` (strong truthfulness allows
/// them to tie, never to win). Entries are bounded in [−1, 1]: the
/// inequalities are scale-invariant, so this loses no generality. The
/// world is feasible iff the optimum exceeds [`DEFAULT_FEAS_TOL`], and a
/// feasible matrix is re-checked with [`verify`] before being returned.
pub fn strong_truthful_score_exists(delta: &DeltaMatrix) -> Result<FeasibilityResult> {
    let n = delta.n();
    if n > FEASIBILITY_CAP {
        return Err(Error::CapExceeded { n, cap: FEASIBILITY_CAP });
    }
    let strategies = enumerate_strategies(n)?;
    let identity = DeterministicStrategy::identity(n);

    use minilp::{ComparisonOp, OptimizationDirection, Problem};
    let mut problem = Problem::new(OptimizationDirection::Maximize);
    let svars: Vec<_> = (0..n * n).map(|_| problem.add_var(0.0, (-1.0, 1.0))).collect();
    let margin_var = problem.add_var(1.0, (f64::NEG_INFINITY, f64::INFINITY));

    // Constraint coefficients: A_uv = Σ_ij Δ_ij (1[i=u, j=v] − 1[F_i=u, G_j=v]).
    let mut seen: HashSet<(Vec<u64>, bool)> = HashSet::new();
    for f in &strategies {
        for g in &strategies {
            let exempt = is_exempt(f, g);
            if exempt && f == &identity {
                continue;
            }
            let mut coeffs = SquareMatrix::zeros(n);
            for i in 0..n {
                for j in 0..n {
                    let d = delta.get(i, j);
                    coeffs.add_to(i, j, d);
                    coeffs.add_to(f.report(i), g.report(j), -d);
                }
            }
            let key: Vec<u64> = coeffs.entries().iter().map(|v| v.to_bits()).collect();
            if !seen.insert((key, exempt)) {
                continue;
            }
            let mut terms: Vec<(minilp::Variable, f64)> = coeffs
                .entries()
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(k, &v)| (svars[k], v))
                .collect();
            if !exempt {
                terms.push((margin_var, -1.0));
            }
            problem.add_constraint(&terms, ComparisonOp::Ge, 0.0);
        }
    }

    // S = 0, m = 0 always satisfies the constraints, so failure here is a
    // numeric breakdown rather than an infeasible world.
    let solution = problem
        .solve()
        .map_err(|e| Error::Solver(format!("margin LP did not solve: {e}")))?;
    let margin = solution[margin_var];
    let feasible = margin > DEFAULT_FEAS_TOL;
    let score_matrix = if feasible {
        let mut s = SquareMatrix::zeros(n);
        for u in 0..n {
            for v in 0..n {
                s.set(u, v, solution[svars[u * n + v]]);
            }
        }
        let s = ScoreMatrix::new(s);
        let verdict = verify(delta, &s)?;
        if !verdict.strongly_truthful {
            return Err(Error::Solver(
                "LP returned a positive margin but the certificate failed verification".into(),
            ));
        }
        Some(s)
    } else {
        None
    };
    Ok(FeasibilityResult { feasible, score_matrix, margin })
}

/// Compare the truthful score of the intended signal against the payoff
/// ceiling of an alternative task-evaluation strategy: both are the sums
/// of positive Delta entries. Ties count as safe (no strict incentive to
/// deviate).
pub fn unintended_signal_bound(
    intended: &DeltaMatrix,
    alternative: &DeltaMatrix,
) -> (f64, f64, bool) {
    let truthful = intended.positive_entry_sum();
    let bound = alternative.positive_entry_sum();
    (truthful, bound, truthful >= bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::{ca_score, msdg_score};
    use crate::signal_model::{delta_of, sign_of, JointSignalModel};

    fn paper_model() -> JointSignalModel {
        let joint =
            SquareMatrix::from_rows(&[vec![0.4, 0.15], vec![0.15, 0.3]]).unwrap();
        JointSignalModel::new(joint).unwrap()
    }

    #[test]
    fn enumeration_counts() {
        let s2 = enumerate_strategies(2).unwrap();
        assert_eq!(s2.len(), 4);
        assert_eq!(s2.iter().filter(|s| s.is_uninformed()).count(), 2);
        assert_eq!(s2.iter().filter(|s| s.is_permutation()).count(), 2);

        let s3 = enumerate_strategies(3).unwrap();
        assert_eq!(s3.len(), 27);
        assert_eq!(s3.iter().filter(|s| s.is_permutation()).count(), 6);
        assert_eq!(s3.iter().filter(|s| s.is_uninformed()).count(), 3);

        assert_eq!(enumerate_profiles(2).unwrap().count(), 16);
        assert!(matches!(
            enumerate_strategies(7),
            Err(Error::CapExceeded { n: 7, cap: STRATEGY_ENUM_CAP })
        ));
    }

    #[test]
    fn paper_world_msdg_strongly_truthful() {
        let delta = delta_of(&paper_model());
        let verdict = verify(&delta, &msdg_score(2)).unwrap();
        assert!(verdict.strongly_truthful);
        assert!(verdict.informed_truthful);
        assert!(verdict.strictly_proper);
        assert!((verdict.truthful_score - 0.195).abs() < 1e-12);
        assert!(verdict.witness_violation.is_none());
        // exactly the two symmetric permutation profiles tie
        assert_eq!(verdict.best_profiles.len(), 2);
        for (f, g, _) in &verdict.best_profiles {
            assert!(is_exempt(f, g));
        }
    }

    #[test]
    fn best_response_matches_enumeration() {
        let delta = delta_of(&paper_model());
        for s in [msdg_score(2), ca_score(&sign_of(&delta))] {
            for f in enumerate_strategies(2).unwrap() {
                let (g_star, v_star) = best_response(&delta, &s, &f).unwrap();
                let mut best = f64::NEG_INFINITY;
                let mut best_g = None;
                for g in enumerate_strategies(2).unwrap() {
                    let e = expected_score_det(&delta, &s, &f, &g).unwrap();
                    if e > best {
                        best = e;
                        best_g = Some(g);
                    }
                }
                assert!((v_star - best).abs() < 1e-12);
                // same score; the argmax itself may differ only on ties
                let e = expected_score_det(&delta, &s, &f, &g_star).unwrap();
                assert!((e - best).abs() < 1e-12, "{:?} vs {:?}", g_star, best_g);
            }
        }
    }

    #[test]
    fn best_response_tie_breaks_to_lowest_report() {
        let delta = delta_of(&paper_model());
        let zero = ScoreMatrix::new(SquareMatrix::zeros(2));
        let (g, v) = best_response(&delta, &zero, &DeterministicStrategy::identity(2)).unwrap();
        assert_eq!(g.reports(), &[0, 0]);
        assert_eq!(v, 0.0);

        let uninformed = DeterministicStrategy::constant(2, 1);
        let (g, v) = best_response(&delta, &msdg_score(2), &uninformed).unwrap();
        assert_eq!(g.reports(), &[0, 0]);
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn feasibility_on_paper_world() {
        let delta = delta_of(&paper_model());
        let r = strong_truthful_score_exists(&delta).unwrap();
        assert!(r.feasible, "margin {}", r.margin);
        assert!(r.margin > 0.1);
        assert!(r.score_matrix.is_some());
    }

    #[test]
    fn unintended_bound_cases() {
        let delta = delta_of(&paper_model());
        let (t, b, safe) = unintended_signal_bound(&delta, &delta);
        assert_eq!(t, b);
        assert!(safe);

        let zeros = DeltaMatrix::from_matrix(SquareMatrix::zeros(3), 1e-12).unwrap();
        let (t, b, safe) = unintended_signal_bound(&delta, &zeros);
        assert!((t - 0.195).abs() < 1e-12);
        assert_eq!(b, 0.0);
        assert!(safe);
    }
}
