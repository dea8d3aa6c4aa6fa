//! The detail-free correlated-agreement mechanism.
//!
//! When the designer does not know the sign structure, it is estimated
//! from the reports themselves: tasks are split into two halves, each
//! half's empirical Delta estimate Γ scores the *other* half. A half's
//! score matrix therefore never depends on that half's own reports, which
//! is what keeps the mechanism (ε, δ)-informed-truthful for large m.

use std::collections::BTreeSet;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::SquareMatrix;
use crate::scoring::{
    pay_batch, ca_score, MixedStrategy, PaymentRecord, PenaltyMode, ScoreMatrix, TaskBatch,
    TaskId,
};
use crate::seed::rng_for;
use crate::signal_model::{
    delta_of, sign_of, sign_of_matrix, JointSignalModel, DEFAULT_SIGN_TOL,
};
use crate::simulation::{sample_joint_signal, sample_marginal};

/// Split-sample estimate: empirical joint and marginal report frequencies
/// per half, and the derived Γ = T − T_M·T_Mᵀ estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEstimate {
    pub set_a: BTreeSet<TaskId>,
    pub set_b: BTreeSet<TaskId>,
    pub joint_a: SquareMatrix,
    pub joint_b: SquareMatrix,
    pub marg_a: Vec<f64>,
    pub marg_b: Vec<f64>,
    pub gamma_a: SquareMatrix,
    pub gamma_b: SquareMatrix,
    /// Tasks dropped (uniformly at random) to make each group even.
    pub dropped: Vec<TaskId>,
    /// Signals never reported in half A / half B; their Γ rows and
    /// columns are zero and are left unsmoothed.
    pub unobserved_a: Vec<usize>,
    pub unobserved_b: Vec<usize>,
}

fn split_ids<T: Copy>(items: &[T], rng: &mut impl RngExt) -> (Vec<T>, Vec<T>, Option<T>) {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let half = items.len() / 2;
    let a = idx[..half].iter().map(|&i| items[i]).collect();
    let b = idx[half..2 * half].iter().map(|&i| items[i]).collect();
    let dropped = (items.len() % 2 == 1).then(|| items[idx[2 * half]]);
    (a, b, dropped)
}

/// Split the batch into halves A and B and compute each half's empirical
/// Delta estimate.
///
/// Joint frequencies come from that half's bonus tasks; marginal
/// frequencies come from its penalty tasks, one sample per task so the
/// samples stay independent. Odd-sized groups drop one task at random
/// (recorded in `dropped`).
pub fn estimate_split(
    batch: &TaskBatch,
    n: usize,
    rng: &mut impl RngExt,
) -> Result<SplitEstimate> {
    if batch.bonus().len() < 2 || batch.penalty1().len() < 2 || batch.penalty2().len() < 2 {
        return Err(Error::validation(format!(
            "splitting needs at least 2 bonus and 2 penalty tasks per agent, got bonus {}, penalty1 {}, penalty2 {}",
            batch.bonus().len(),
            batch.penalty1().len(),
            batch.penalty2().len()
        )));
    }
    let max = batch
        .bonus()
        .iter()
        .flat_map(|&(_, r1, r2)| [r1, r2])
        .chain(batch.penalty1().iter().map(|&(_, r)| r))
        .chain(batch.penalty2().iter().map(|&(_, r)| r))
        .max()
        .unwrap_or(0);
    if max >= n {
        return Err(Error::validation(format!("report {} outside 1..={n}", max + 1)));
    }

    let (bonus_a, bonus_b, drop_b) = split_ids(batch.bonus(), rng);
    let (pen1_a, pen1_b, drop_p1) = split_ids(batch.penalty1(), rng);
    let (pen2_a, pen2_b, drop_p2) = split_ids(batch.penalty2(), rng);
    let dropped: Vec<TaskId> = [
        drop_b.map(|(id, _, _)| id),
        drop_p1.map(|(id, _)| id),
        drop_p2.map(|(id, _)| id),
    ]
    .into_iter()
    .flatten()
    .collect();

    let half = |bonus: &[(TaskId, usize, usize)],
                pen1: &[(TaskId, usize)],
                pen2: &[(TaskId, usize)]|
     -> (BTreeSet<TaskId>, SquareMatrix, Vec<f64>, SquareMatrix, Vec<usize>) {
        let mut set: BTreeSet<TaskId> = bonus.iter().map(|&(id, _, _)| id).collect();
        set.extend(pen1.iter().map(|&(id, _)| id));
        set.extend(pen2.iter().map(|&(id, _)| id));

        // integer counts divided once, so degenerate frequencies are exact
        let mut joint_counts = vec![0u64; n * n];
        for &(_, r1, r2) in bonus {
            joint_counts[r1 * n + r2] += 1;
        }
        let mut joint = SquareMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                joint.set(i, j, joint_counts[i * n + j] as f64 / bonus.len() as f64);
            }
        }
        let mut marg_counts = vec![0u64; n];
        for &(_, r) in pen1.iter().chain(pen2.iter()) {
            marg_counts[r] += 1;
        }
        let samples = (pen1.len() + pen2.len()) as f64;
        let marg: Vec<f64> = marg_counts.iter().map(|&c| c as f64 / samples).collect();
        let gamma = joint.sub(&SquareMatrix::outer(&marg, &marg));
        let unobserved = (0..n)
            .filter(|&r| {
                marg[r] == 0.0
                    && (0..n).all(|k| joint.get(r, k) == 0.0 && joint.get(k, r) == 0.0)
            })
            .collect();
        (set, joint, marg, gamma, unobserved)
    };

    let (set_a, joint_a, marg_a, gamma_a, unobserved_a) = half(&bonus_a, &pen1_a, &pen2_a);
    let (set_b, joint_b, marg_b, gamma_b, unobserved_b) = half(&bonus_b, &pen1_b, &pen2_b);
    Ok(SplitEstimate {
        set_a,
        set_b,
        joint_a,
        joint_b,
        marg_a,
        marg_b,
        gamma_a,
        gamma_b,
        dropped,
        unobserved_a,
        unobserved_b,
    })
}

/// Score matrices with the task sets swapped: half A is scored by the
/// sign of half B's estimate and vice versa.
pub fn ca_df_scores(estimate: &SplitEstimate) -> (ScoreMatrix, ScoreMatrix) {
    let s_a = ca_score(&sign_of_matrix(&estimate.gamma_b, DEFAULT_SIGN_TOL));
    let s_b = ca_score(&sign_of_matrix(&estimate.gamma_a, DEFAULT_SIGN_TOL));
    (s_a, s_b)
}

fn filter_batch(batch: &TaskBatch, keep: &BTreeSet<TaskId>) -> Result<TaskBatch> {
    TaskBatch::new(
        batch.bonus().iter().filter(|(id, _, _)| keep.contains(id)).copied().collect(),
        batch.penalty1().iter().filter(|(id, _)| keep.contains(id)).copied().collect(),
        batch.penalty2().iter().filter(|(id, _)| keep.contains(id)).copied().collect(),
    )
}

/// Sample the task structure the detail-free mechanism consumes: `m`
/// shared bonus tasks plus `m` penalty singles per agent (signals drawn
/// from the marginals, since a penalty task is completed alone).
pub fn sample_ca_df_batch(
    model: &JointSignalModel,
    f: &MixedStrategy,
    g: &MixedStrategy,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TaskBatch> {
    let n = model.n();
    if f.n() != n || g.n() != n {
        return Err(Error::dimension("strategy size differs from model"));
    }
    let marg1 = model.marginal1();
    let marg2 = model.marginal2();
    let base: u64 = rng.random();
    let mut bonus = Vec::with_capacity(m);
    let mut penalty1 = Vec::with_capacity(m);
    let mut penalty2 = Vec::with_capacity(m);
    for t in 0..m {
        let mut task_rng = rng_for(base, "cadf-task", t as u64);
        let (s1, s2) = sample_joint_signal(model, &mut task_rng);
        bonus.push((t as TaskId, f.sample_report(s1, &mut task_rng), g.sample_report(s2, &mut task_rng)));
        let mut p1_rng = rng_for(base, "cadf-pen1", t as u64);
        let s = sample_marginal(&marg1, &mut p1_rng);
        penalty1.push(((m + t) as TaskId, f.sample_report(s, &mut p1_rng)));
        let mut p2_rng = rng_for(base, "cadf-pen2", t as u64);
        let s = sample_marginal(&marg2, &mut p2_rng);
        penalty2.push(((2 * m + t) as TaskId, g.sample_report(s, &mut p2_rng)));
    }
    TaskBatch::new(bonus, penalty1, penalty2)
}

/// Run the full detail-free mechanism on `m` simulated bonus tasks:
/// sample reports, split, estimate, and pay each half with the swapped
/// score matrix.
pub fn run_ca_df(
    model: &JointSignalModel,
    f: &MixedStrategy,
    g: &MixedStrategy,
    m: usize,
    mode: PenaltyMode,
    rng: &mut ChaCha8Rng,
) -> Result<(PaymentRecord, PaymentRecord, SplitEstimate)> {
    if m < 4 {
        return Err(Error::validation(format!("detail-free run needs m >= 4, got {m}")));
    }
    let batch = sample_ca_df_batch(model, f, g, m, rng)?;
    let estimate = estimate_split(&batch, model.n(), rng)?;
    let (s_a, s_b) = ca_df_scores(&estimate);
    let pay_a = pay_batch(&filter_batch(&batch, &estimate.set_a)?, &s_a, mode, rng)?;
    let pay_b = pay_batch(&filter_batch(&batch, &estimate.set_b)?, &s_b, mode, rng)?;
    Ok((pay_a, pay_b, estimate))
}

/// One convergence trial: did the estimated sign structure match, and how
/// far below the ideal truthful score did the estimated matrix land.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub sign_correct: bool,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub n: usize,
    pub m: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub trials: usize,
    /// Fraction of trials where Sign(Γ^B) equals Sign(Δ) exactly.
    pub empirical_prob_sign_correct: f64,
    /// Worst analytic gap E(S*, I, I) − E(S^A, I, I) over trials.
    pub empirical_gap: f64,
    /// Whether at least 1 − δ of trials had gap ≤ ε.
    pub pass: bool,
    pub rows: Vec<TrialRow>,
}

/// Estimate, for each m in the schedule, how often CA-DF with truthful
/// agents recovers a score matrix within ε of the ideal one.
///
/// The gap is computed analytically against the true Delta: trials only
/// randomize the reports feeding the estimate. Trials derive independent
/// seeds from `master_seed`, so the report is identical however they are
/// scheduled.
pub fn convergence_experiment(
    model: &JointSignalModel,
    epsilon: f64,
    delta: f64,
    m_schedule: &[usize],
    trials: usize,
    master_seed: u64,
) -> Result<Vec<ConvergenceReport>> {
    if trials == 0 {
        return Err(Error::validation("trials must be >= 1"));
    }
    if epsilon <= 0.0 || !(0.0..1.0).contains(&delta) {
        return Err(Error::validation(format!(
            "need epsilon > 0 and 0 <= delta < 1, got epsilon = {epsilon}, delta = {delta}"
        )));
    }
    let n = model.n();
    let true_delta = delta_of(model);
    let true_sign = sign_of(&true_delta);
    let ideal = true_delta.positive_entry_sum();
    let truthful = MixedStrategy::identity(n);

    let mut reports = Vec::with_capacity(m_schedule.len());
    for &m in m_schedule {
        if m < 4 {
            return Err(Error::validation(format!("m schedule entry {m} below minimum 4")));
        }
        let mut rows = Vec::with_capacity(trials);
        for trial in 0..trials {
            let mut rng =
                rng_for(master_seed, "converge", ((m as u64) << 32) | trial as u64);
            let batch = sample_ca_df_batch(model, &truthful, &truthful, m, &mut rng)?;
            let estimate = estimate_split(&batch, n, &mut rng)?;
            let sign_b = sign_of_matrix(&estimate.gamma_b, DEFAULT_SIGN_TOL);
            let s_a = ca_score(&sign_b);
            let achieved: f64 = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .map(|(i, j)| true_delta.get(i, j) * s_a.get(i, j))
                .sum();
            rows.push(TrialRow { trial, sign_correct: sign_b == true_sign, gap: ideal - achieved });
        }
        let ok = rows.iter().filter(|r| r.gap <= epsilon).count();
        let correct = rows.iter().filter(|r| r.sign_correct).count();
        reports.push(ConvergenceReport {
            n,
            m,
            epsilon,
            delta,
            trials,
            empirical_prob_sign_correct: correct as f64 / trials as f64,
            empirical_gap: rows.iter().map(|r| r.gap).fold(0.0, f64::max),
            pass: ok as f64 / trials as f64 >= 1.0 - delta,
            rows,
        });
    }
    Ok(reports)
}

/// CSV export of the per-trial rows: `m,trial,sign_correct,gap`.
pub fn write_convergence_csv<W: std::io::Write>(
    reports: &[ConvergenceReport],
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["m", "trial", "sign_correct", "gap"])?;
    for report in reports {
        for row in &report.rows {
            w.write_record([
                report.m.to_string(),
                row.trial.to_string(),
                row.sign_correct.to_string(),
                format!("{}", row.gap),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use crate::signal_model::JointSignalModel;

    fn paper_model() -> JointSignalModel {
        JointSignalModel::new(
            SquareMatrix::from_rows(&[vec![0.4, 0.15], vec![0.15, 0.3]]).unwrap(),
        )
        .unwrap()
    }

    fn constant_batch(m: usize) -> TaskBatch {
        // both agents always report signal 1
        TaskBatch::new(
            (0..m).map(|t| (t as TaskId, 0, 0)).collect(),
            (0..m).map(|t| ((m + t) as TaskId, 0)).collect(),
            (0..m).map(|t| ((2 * m + t) as TaskId, 0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_reports_make_gamma_vanish() {
        let batch = constant_batch(10);
        let mut rng = rng_for(1, "df", 0);
        let est = estimate_split(&batch, 2, &mut rng).unwrap();
        assert_eq!(est.joint_a.get(0, 0), 1.0);
        assert_eq!(est.marg_a[0], 1.0);
        for v in est.gamma_a.entries().iter().chain(est.gamma_b.entries()) {
            assert_eq!(*v, 0.0);
        }
        assert_eq!(est.unobserved_a, vec![1]);
        let (s_a, s_b) = ca_df_scores(&est);
        assert!(s_a.is_zero() && s_b.is_zero());
    }

    #[test]
    fn split_sets_are_disjoint_equal_and_logged() {
        let batch = constant_batch(5); // odd: one task dropped per group
        let mut rng = rng_for(2, "df", 0);
        let est = estimate_split(&batch, 2, &mut rng).unwrap();
        assert_eq!(est.set_a.len(), est.set_b.len());
        assert!(est.set_a.is_disjoint(&est.set_b));
        assert_eq!(est.dropped.len(), 3);

        let too_small = TaskBatch::new(vec![(0, 0, 0)], vec![(1, 0)], vec![(2, 0)]).unwrap();
        let err = estimate_split(&too_small, 2, &mut rng).unwrap_err();
        assert!(err.to_string().contains("at least 2"), "{err}");
    }

    #[test]
    fn boundary_split_with_two_tasks_per_group() {
        let batch = constant_batch(2);
        let mut rng = rng_for(3, "df", 0);
        let est = estimate_split(&batch, 2, &mut rng).unwrap();
        assert_eq!(est.set_a.len(), 3);
        assert!(est.dropped.is_empty());
    }

    #[test]
    fn estimate_concentrates_near_true_delta() {
        // Monte-Carlo oracle over a fixed seed bank: at m = 10^4 the
        // estimate should be entrywise within 0.05 of Δ in ≥ 95% of runs.
        let model = paper_model();
        let truthful = MixedStrategy::identity(2);
        let true_delta = delta_of(&model);
        let mut hits = 0;
        let runs = 40;
        for seed in 0..runs {
            let mut rng = rng_for(seed, "df-concentration", 0);
            let batch = sample_ca_df_batch(&model, &truthful, &truthful, 10_000, &mut rng)
                .unwrap();
            let est = estimate_split(&batch, 2, &mut rng).unwrap();
            let close = (0..2).all(|i| {
                (0..2).all(|j| {
                    (est.gamma_a.get(i, j) - true_delta.get(i, j)).abs() <= 0.05
                        && (est.gamma_b.get(i, j) - true_delta.get(i, j)).abs() <= 0.05
                })
            });
            if close {
                hits += 1;
            }
        }
        assert!(hits as f64 / runs as f64 >= 0.95, "hits {hits}/{runs}");
    }

    #[test]
    fn swapped_scores_ignore_own_half() {
        // Rewriting every report inside half A must not change S^A.
        let model = paper_model();
        let truthful = MixedStrategy::identity(2);
        let mut rng = rng_for(9, "df-swap", 0);
        let batch = sample_ca_df_batch(&model, &truthful, &truthful, 50, &mut rng).unwrap();

        let mut split_rng1 = rng_for(10, "df-swap-split", 0);
        let est1 = estimate_split(&batch, 2, &mut split_rng1).unwrap();

        let mangled = TaskBatch::new(
            batch
                .bonus()
                .iter()
                .map(|&(id, r1, r2)| {
                    if est1.set_a.contains(&id) {
                        (id, 1 - r1, 1 - r2)
                    } else {
                        (id, r1, r2)
                    }
                })
                .collect(),
            batch
                .penalty1()
                .iter()
                .map(|&(id, r)| if est1.set_a.contains(&id) { (id, 1 - r) } else { (id, r) })
                .collect(),
            batch
                .penalty2()
                .iter()
                .map(|&(id, r)| if est1.set_a.contains(&id) { (id, 1 - r) } else { (id, r) })
                .collect(),
        )
        .unwrap();
        let mut split_rng2 = rng_for(10, "df-swap-split", 0);
        let est2 = estimate_split(&mangled, 2, &mut split_rng2).unwrap();
        assert_eq!(est1.set_a, est2.set_a, "same split under the same seed");
        let (s_a1, _) = ca_df_scores(&est1);
        let (s_a2, _) = ca_df_scores(&est2);
        assert_eq!(s_a1, s_a2);
    }

    #[test]
    fn run_rejects_tiny_m() {
        let model = paper_model();
        let t = MixedStrategy::identity(2);
        let mut rng = rng_for(4, "df", 0);
        assert!(run_ca_df(&model, &t, &t, 3, PenaltyMode::AllPairs, &mut rng).is_err());
    }

    #[test]
    fn convergence_trivial_epsilon_always_passes() {
        let model = paper_model();
        let true_delta = delta_of(&model);
        let total_mass: f64 =
            true_delta.matrix().entries().iter().map(|v| v.abs()).sum();
        // gap can never exceed the total |Δ| mass
        let reports =
            convergence_experiment(&model, total_mass + 0.01, 0.05, &[4, 16], 30, 77)
                .unwrap();
        for r in &reports {
            assert!(r.pass, "m = {}", r.m);
            assert!(r.empirical_gap <= total_mass + 1e-12);
        }
    }

    #[test]
    fn convergence_rejects_zero_trials() {
        let model = paper_model();
        assert!(convergence_experiment(&model, 0.05, 0.05, &[10], 0, 1).is_err());
    }

    #[test]
    fn convergence_is_seed_deterministic() {
        let model = paper_model();
        let a = convergence_experiment(&model, 0.05, 0.05, &[8, 32], 5, 123).unwrap();
        let b = convergence_experiment(&model, 0.05, 0.05, &[8, 32], 5, 123).unwrap();
        assert_eq!(a, b);
    }
}
