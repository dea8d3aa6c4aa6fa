//! Synthetic worlds, task assignment, signal sampling, and Monte-Carlo
//! estimation of expected scores.
//!
//! Tasks are a priori identical: the two agents never learn which tasks
//! are bonus or penalty, and agent 2 sees the task list reshuffled by a
//! uniformly random permutation, so per-task strategy schedules cannot
//! coordinate. All randomness flows from explicit seeds; per-task and
//! per-trial streams are derived with [`crate::seed`], so results do not
//! depend on evaluation order.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::matrix::SquareMatrix;
use crate::scoring::{
    pay_batch, MixedStrategy, PenaltyMode, ScoreMatrix, TaskBatch, TaskId,
};
use crate::seed::rng_for;
use crate::signal_model::JointSignalModel;

/// Families of synthetic worlds.
///
/// `NoisyObservation` is the classification-style model: each agent sees
/// the task's true signal with probability q and otherwise errs uniformly.
/// The Dirichlet and banded kinds exist to exercise property tests across
/// world classes.
#[derive(Debug, Clone)]
pub enum WorldKind {
    NoisyObservation { q: f64, prior: Vec<f64> },
    RandomDirichlet { concentration: f64, symmetrize: bool },
    OrdinalBanded { band_strength: f64 },
    Explicit(JointSignalModel),
}

#[derive(Debug, Clone)]
pub struct WorldGenerator {
    pub kind: WorldKind,
    pub n: usize,
    pub seed: u64,
}

pub fn generate_world(generator: &WorldGenerator) -> Result<JointSignalModel> {
    let n = generator.n;
    if n < 2 {
        return Err(Error::validation(format!("world generator needs n >= 2, got {n}")));
    }
    match &generator.kind {
        WorldKind::NoisyObservation { q, prior } => noisy_observation(n, *q, prior),
        WorldKind::RandomDirichlet { concentration, symmetrize } => {
            let mut rng = rng_for(generator.seed, "world-dirichlet", 0);
            random_dirichlet(n, *concentration, *symmetrize, &mut rng)
        }
        WorldKind::OrdinalBanded { band_strength } => ordinal_banded(n, *band_strength),
        WorldKind::Explicit(model) => {
            if model.n() != n {
                return Err(Error::dimension(format!(
                    "explicit model has n = {}, generator expects {n}",
                    model.n()
                )));
            }
            Ok(model.clone())
        }
    }
}

/// P(i, j) = Σ_t prior(t)·obs(i|t)·obs(j|t) with obs(i|t) = q if i = t,
/// (1−q)/(n−1) otherwise. Requires q > 1/n so the observation carries
/// information; the resulting world is categorical for every full-support
/// prior.
pub fn noisy_observation(n: usize, q: f64, prior: &[f64]) -> Result<JointSignalModel> {
    if prior.len() != n {
        return Err(Error::dimension(format!("prior has {} entries for n = {n}", prior.len())));
    }
    if q <= 1.0 / n as f64 || q > 1.0 {
        return Err(Error::validation(format!(
            "noisy observation needs 1/n < q <= 1, got q = {q} with n = {n}"
        )));
    }
    let total: f64 = prior.iter().sum();
    if (total - 1.0).abs() > crate::signal_model::DEFAULT_PROB_TOL
        || prior.iter().any(|&p| p < 0.0)
    {
        return Err(Error::validation("prior must be a probability vector"));
    }
    let err = (1.0 - q) / (n - 1) as f64;
    let obs = |i: usize, t: usize| if i == t { q } else { err };
    let mut joint = SquareMatrix::zeros(n);
    for t in 0..n {
        for i in 0..n {
            for j in 0..n {
                joint.add_to(i, j, prior[t] * obs(i, t) * obs(j, t));
            }
        }
    }
    JointSignalModel::new(joint)
}

fn random_dirichlet(
    n: usize,
    concentration: f64,
    symmetrize: bool,
    rng: &mut ChaCha8Rng,
) -> Result<JointSignalModel> {
    if concentration <= 0.0 {
        return Err(Error::validation("dirichlet concentration must be positive"));
    }
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::validation(format!("bad dirichlet parameter: {e}")))?;
    let mut joint = SquareMatrix::zeros(n);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let w: f64 = gamma.sample(rng);
            joint.set(i, j, w);
            total += w;
        }
    }
    for i in 0..n {
        for j in 0..n {
            joint.set(i, j, joint.get(i, j) / total);
        }
    }
    if symmetrize {
        let t = joint.transpose();
        for i in 0..n {
            for j in 0..n {
                joint.set(i, j, 0.5 * (joint.get(i, j) + t.get(i, j)));
            }
        }
    }
    JointSignalModel::new(joint)
}

/// Ordinal world: the observation distribution decays geometrically with
/// distance from the true signal, obs(i|t) ∝ ρ^|i−t| under a uniform
/// prior. Moderate ρ yields the banded positive-correlation structure
/// typical of grading scales.
pub fn ordinal_banded(n: usize, band_strength: f64) -> Result<JointSignalModel> {
    if !(0.0..1.0).contains(&band_strength) {
        return Err(Error::validation(format!(
            "band strength must be in [0, 1), got {band_strength}"
        )));
    }
    let mut joint = SquareMatrix::zeros(n);
    for t in 0..n {
        let weights: Vec<f64> =
            (0..n).map(|i| band_strength.powi((i as i32 - t as i32).abs())).collect();
        let z: f64 = weights.iter().sum();
        for i in 0..n {
            for j in 0..n {
                joint.add_to(i, j, weights[i] * weights[j] / (z * z * n as f64));
            }
        }
    }
    JointSignalModel::new(joint)
}

/// Which tasks are bonus vs penalty, and the random order in which agent 2
/// sees the task list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentPlan {
    pub m: usize,
    pub bonus_ids: Vec<TaskId>,
    pub penalty1_ids: Vec<TaskId>,
    pub penalty2_ids: Vec<TaskId>,
    /// π: agent 2's k-th completed task is task `agent2_task_order[k]`.
    pub agent2_task_order: Vec<usize>,
}

impl AssignmentPlan {
    /// Random designation with the default split: one bonus task per
    /// three, remainder to the bonus set, penalties split evenly.
    pub fn random(m: usize, rng: &mut impl RngExt) -> Result<Self> {
        let per_penalty = m / 3;
        let bonus = m.saturating_sub(2 * per_penalty);
        Self::with_counts(m, bonus, per_penalty, per_penalty, rng)
    }

    pub fn with_counts(
        m: usize,
        bonus: usize,
        penalty1: usize,
        penalty2: usize,
        rng: &mut impl RngExt,
    ) -> Result<Self> {
        if bonus == 0 || penalty1 == 0 || penalty2 == 0 {
            return Err(Error::validation(format!(
                "every task set must be non-empty (bonus {bonus}, penalty1 {penalty1}, penalty2 {penalty2})"
            )));
        }
        if bonus + penalty1 + penalty2 != m {
            return Err(Error::validation(format!(
                "task sets sum to {}, expected m = {m}",
                bonus + penalty1 + penalty2
            )));
        }
        let mut ids: Vec<TaskId> = (0..m as TaskId).collect();
        shuffle(&mut ids, rng);
        let bonus_ids = ids[..bonus].to_vec();
        let penalty1_ids = ids[bonus..bonus + penalty1].to_vec();
        let penalty2_ids = ids[bonus + penalty1..].to_vec();
        let mut agent2_task_order: Vec<usize> = (0..m).collect();
        shuffle(&mut agent2_task_order, rng);
        Ok(AssignmentPlan { m, bonus_ids, penalty1_ids, penalty2_ids, agent2_task_order })
    }
}

fn shuffle<T>(items: &mut [T], rng: &mut impl RngExt) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Draw one (s1, s2) signal pair from the joint distribution.
pub fn sample_joint_signal(model: &JointSignalModel, rng: &mut impl RngExt) -> (usize, usize) {
    let n = model.n();
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += model.joint().get(i, j);
            if u < acc {
                return (i, j);
            }
        }
    }
    (n - 1, n - 1)
}

/// Draw one index from a marginal distribution.
pub fn sample_marginal(marginal: &[f64], rng: &mut impl RngExt) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in marginal.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    marginal.len() - 1
}

/// Sample a batch with one strategy per agent across all tasks.
pub fn simulate(
    model: &JointSignalModel,
    f: &MixedStrategy,
    g: &MixedStrategy,
    plan: &AssignmentPlan,
    rng: &mut ChaCha8Rng,
) -> Result<TaskBatch> {
    let fs = vec![f.clone(); plan.m];
    let gs = vec![g.clone(); plan.m];
    simulate_scheduled(model, &fs, &gs, plan, rng)
}

/// Sample a batch with per-position strategy schedules: `f_schedule[k]`
/// applies to agent 1's k-th task, `g_schedule[k]` to agent 2's k-th task
/// in their own (π-shuffled) order.
pub fn simulate_scheduled(
    model: &JointSignalModel,
    f_schedule: &[MixedStrategy],
    g_schedule: &[MixedStrategy],
    plan: &AssignmentPlan,
    rng: &mut ChaCha8Rng,
) -> Result<TaskBatch> {
    let m = plan.m;
    if f_schedule.len() != m || g_schedule.len() != m {
        return Err(Error::dimension(format!(
            "schedules of length {}/{} for m = {m}",
            f_schedule.len(),
            g_schedule.len()
        )));
    }
    let n = model.n();
    if f_schedule.iter().chain(g_schedule).any(|s| s.n() != n) {
        return Err(Error::dimension("strategy size differs from model"));
    }
    // position of each task in agent 2's order
    let mut position2 = vec![0usize; m];
    for (pos, &task) in plan.agent2_task_order.iter().enumerate() {
        position2[task] = pos;
    }
    let base: u64 = rng.random();
    let mut reports = Vec::with_capacity(m);
    for task in 0..m {
        let mut task_rng = rng_for(base, "task", task as u64);
        let (s1, s2) = sample_joint_signal(model, &mut task_rng);
        let r1 = f_schedule[task].sample_report(s1, &mut task_rng);
        let r2 = g_schedule[position2[task]].sample_report(s2, &mut task_rng);
        reports.push((r1, r2));
    }
    let bonus = plan
        .bonus_ids
        .iter()
        .map(|&id| (id, reports[id as usize].0, reports[id as usize].1))
        .collect();
    let penalty1 = plan.penalty1_ids.iter().map(|&id| (id, reports[id as usize].0)).collect();
    let penalty2 = plan.penalty2_ids.iter().map(|&id| (id, reports[id as usize].1)).collect();
    TaskBatch::new(bonus, penalty1, penalty2)
}

/// Monte-Carlo estimate of the expected per-bonus-task payment: mean and
/// standard error over `trials` independent simulated batches of `m`
/// tasks each.
pub fn monte_carlo_expected_score(
    model: &JointSignalModel,
    s: &ScoreMatrix,
    f: &MixedStrategy,
    g: &MixedStrategy,
    m: usize,
    trials: usize,
    mode: PenaltyMode,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    if m < 3 || trials < 1 {
        return Err(Error::validation(format!(
            "need m >= 3 and trials >= 1, got m = {m}, trials = {trials}"
        )));
    }
    let base: u64 = rng.random();
    let mut trial_means = Vec::with_capacity(trials);
    let mut all_nets: Vec<f64> = Vec::new();
    for t in 0..trials {
        let mut trial_rng = rng_for(base, "mc-trial", t as u64);
        let plan = AssignmentPlan::random(m, &mut trial_rng)?;
        let batch = simulate(model, f, g, &plan, &mut trial_rng)?;
        let record = pay_batch(&batch, s, mode, &mut trial_rng)?;
        let nets: Vec<f64> = record.per_bonus_task.iter().map(|b| b.net).collect();
        trial_means.push(nets.iter().sum::<f64>() / nets.len() as f64);
        all_nets.extend(nets);
    }
    let mean = trial_means.iter().sum::<f64>() / trials as f64;
    let std_error = if trials >= 2 {
        standard_error(&trial_means)
    } else {
        standard_error(&all_nets)
    };
    Ok((mean, std_error))
}

fn standard_error(samples: &[f64]) -> f64 {
    let k = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / k;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0).max(1.0);
    (var / k).sqrt()
}

/// Dump a batch in the peer-assessment CSV format: bonus tasks become
/// submissions with two graders, penalty tasks submissions with one.
/// Reports are written 1-based.
pub fn write_assessment_csv<W: std::io::Write>(
    batch: &TaskBatch,
    question_id: &str,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["question_id", "submission_id", "grader_id", "report"])?;
    for &(id, r1, r2) in batch.bonus() {
        w.write_record([question_id, &id.to_string(), "agent1", &(r1 + 1).to_string()])?;
        w.write_record([question_id, &id.to_string(), "agent2", &(r2 + 1).to_string()])?;
    }
    for &(id, r) in batch.penalty1() {
        w.write_record([question_id, &id.to_string(), "agent1", &(r + 1).to_string()])?;
    }
    for &(id, r) in batch.penalty2() {
        w.write_record([question_id, &id.to_string(), "agent2", &(r + 1).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::msdg_score;
    use crate::seed::rng_for;
    use crate::signal_model::{classify, delta_of, sign_of};

    #[test]
    fn noisy_observation_is_categorical() {
        let model = noisy_observation(3, 0.8, &[1.0 / 3.0; 3]).unwrap();
        let c = classify(&model).unwrap();
        assert!(c.categorical);
        assert!(c.exchangeable);
    }

    #[test]
    fn perfect_observation_is_diagonal() {
        let prior = [0.2, 0.3, 0.5];
        let model = noisy_observation(3, 1.0, &prior).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { prior[i] } else { 0.0 };
                assert!((model.joint().get(i, j) - expect).abs() < 1e-15);
            }
        }
        assert!(sign_of(&delta_of(&model)).is_identity());
    }

    #[test]
    fn noisy_observation_rejects_uninformative_q() {
        assert!(noisy_observation(4, 0.25, &[0.25; 4]).is_err());
        assert!(noisy_observation(4, 0.26, &[0.25; 4]).is_ok());
    }

    #[test]
    fn dirichlet_worlds_are_valid_and_seeded() {
        for seed in 0..20 {
            let generator = WorldGenerator {
                kind: WorldKind::RandomDirichlet { concentration: 1.0, symmetrize: true },
                n: 3,
                seed,
            };
            let a = generate_world(&generator).unwrap();
            let b = generate_world(&generator).unwrap();
            assert_eq!(a, b);
            assert!(a.is_exchangeable());
        }
    }

    #[test]
    fn banded_world_reproduces_the_five_signal_band() {
        let model = ordinal_banded(5, 0.4).unwrap();
        let sign = sign_of(&delta_of(&model));
        let expect = [
            [1, 1, 0, 0, 0],
            [1, 1, 1, 0, 0],
            [0, 1, 1, 1, 0],
            [0, 0, 1, 1, 1],
            [0, 0, 0, 1, 1],
        ];
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(sign.get(i, j), expect[i][j], "at ({i},{j})");
            }
        }
    }

    #[test]
    fn plan_counts_and_determinism() {
        let mut rng = rng_for(5, "plan", 0);
        let plan = AssignmentPlan::random(10, &mut rng).unwrap();
        assert_eq!(plan.bonus_ids.len(), 4);
        assert_eq!(plan.penalty1_ids.len(), 3);
        assert_eq!(plan.penalty2_ids.len(), 3);
        let mut rng2 = rng_for(5, "plan", 0);
        assert_eq!(plan, AssignmentPlan::random(10, &mut rng2).unwrap());
        assert!(AssignmentPlan::with_counts(3, 3, 0, 0, &mut rng).is_err());
    }

    #[test]
    fn identical_seeds_give_identical_batches_and_payments() {
        let model = noisy_observation(3, 0.7, &[1.0 / 3.0; 3]).unwrap();
        let f = MixedStrategy::identity(3);
        let run = |seed: u64| {
            let mut rng = rng_for(seed, "sim", 0);
            let plan = AssignmentPlan::random(9, &mut rng).unwrap();
            let batch = simulate(&model, &f, &f, &plan, &mut rng).unwrap();
            let pay = pay_batch(&batch, &msdg_score(3), PenaltyMode::SampledPair, &mut rng)
                .unwrap();
            (batch, pay)
        };
        assert_eq!(run(11), run(11));
        assert_ne!(run(11).0, run(12).0);
    }

    #[test]
    fn perfectly_correlated_truthful_reports_agree() {
        let model = noisy_observation(3, 1.0, &[0.2, 0.3, 0.5]).unwrap();
        let f = MixedStrategy::identity(3);
        let mut rng = rng_for(3, "sim", 1);
        let plan = AssignmentPlan::random(30, &mut rng).unwrap();
        let batch = simulate(&model, &f, &f, &plan, &mut rng).unwrap();
        for &(_, r1, r2) in batch.bonus() {
            assert_eq!(r1, r2);
        }
    }

    #[test]
    fn mixed_strategy_marginal_converges() {
        // 50/50 mixing over two reports gives report marginal ≈ (.5, .5).
        let model = noisy_observation(2, 0.9, &[0.5, 0.5]).unwrap();
        let half = MixedStrategy::new(
            SquareMatrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap(),
        )
        .unwrap();
        let mut rng = rng_for(7, "sim", 2);
        let plan = AssignmentPlan::random(9999, &mut rng).unwrap();
        let batch = simulate(&model, &half, &MixedStrategy::identity(2), &plan, &mut rng)
            .unwrap();
        let ones = batch.bonus().iter().filter(|&&(_, r1, _)| r1 == 0).count();
        let frac = ones as f64 / batch.bonus().len() as f64;
        assert!((frac - 0.5).abs() < 0.03, "frac {frac}");
    }

    #[test]
    fn monte_carlo_matches_analytic_trace() {
        let model = JointSignalModel::new(
            SquareMatrix::from_rows(&[vec![0.4, 0.15], vec![0.15, 0.3]]).unwrap(),
        )
        .unwrap();
        let id = MixedStrategy::identity(2);
        let mut rng = rng_for(13, "mc", 0);
        let (mean, se) = monte_carlo_expected_score(
            &model,
            &msdg_score(2),
            &id,
            &id,
            300,
            120,
            PenaltyMode::AllPairs,
            &mut rng,
        )
        .unwrap();
        assert!((mean - 0.195).abs() < 3.0 * se, "mean {mean} se {se}");
        assert!(se < 0.02);
    }

    #[test]
    fn all_zero_score_matrix_gives_exact_zero_mean() {
        let model = noisy_observation(2, 0.9, &[0.5, 0.5]).unwrap();
        let id = MixedStrategy::identity(2);
        let zero = ScoreMatrix::new(SquareMatrix::zeros(2));
        let mut rng = rng_for(17, "mc", 1);
        let (mean, se) =
            monte_carlo_expected_score(&model, &zero, &id, &id, 30, 10, PenaltyMode::SampledPair, &mut rng)
                .unwrap();
        assert_eq!(mean, 0.0);
        assert_eq!(se, 0.0);
    }
}
