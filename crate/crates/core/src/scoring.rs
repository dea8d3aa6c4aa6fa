//! Score matrices, the multi-task payment rule, and analytic expected
//! scores.
//!
//! A multi-task mechanism is parametrized by a score matrix S. Each bonus
//! task pays `S(r1, r2)` for the two agents' reports on it, minus
//! `S(r1', r2'')` for reports drawn from each agent's disjoint penalty
//! tasks; the penalty term cancels base-rate agreement, so uninformed
//! reporting earns exactly zero in expectation.

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::SquareMatrix;
use crate::signal_model::{DeltaMatrix, SignStructure, DEFAULT_PROB_TOL};

pub type TaskId = u64;

/// Payment kernel over report pairs. MSDG and CA use 0/1 entries; the
/// feasibility search produces real-valued ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    s: SquareMatrix,
}

impl ScoreMatrix {
    pub fn new(s: SquareMatrix) -> Self {
        ScoreMatrix { s }
    }

    pub fn n(&self) -> usize {
        self.s.n()
    }

    #[inline]
    pub fn get(&self, r1: usize, r2: usize) -> f64 {
        self.s.get(r1, r2)
    }

    pub fn matrix(&self) -> &SquareMatrix {
        &self.s
    }

    /// Degenerate all-zero kernel (every payment is zero).
    pub fn is_zero(&self) -> bool {
        self.s.entries().iter().all(|&v| v == 0.0)
    }
}

/// Multi-signal Dasgupta-Ghosh score matrix: the identity ('1' for
/// agreement, '0' otherwise).
pub fn msdg_score(n: usize) -> ScoreMatrix {
    ScoreMatrix::new(SquareMatrix::identity(n))
}

/// Correlated-agreement score matrix: S = Sign(Delta).
pub fn ca_score(sign: &SignStructure) -> ScoreMatrix {
    let n = sign.n();
    let mut s = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            s.set(i, j, f64::from(sign.get(i, j)));
        }
    }
    ScoreMatrix::new(s)
}

/// Deterministic strategy: a total map from signal to report (0-based).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DeterministicStrategy {
    report_for: Vec<usize>,
}

impl DeterministicStrategy {
    pub fn new(report_for: Vec<usize>) -> Result<Self> {
        let n = report_for.len();
        if n == 0 {
            return Err(Error::validation("empty strategy"));
        }
        for (i, &r) in report_for.iter().enumerate() {
            if r >= n {
                return Err(Error::validation(format!(
                    "strategy reports signal {} for signal {} but n = {n}",
                    r + 1,
                    i + 1
                )));
            }
        }
        Ok(DeterministicStrategy { report_for })
    }

    pub fn identity(n: usize) -> Self {
        DeterministicStrategy { report_for: (0..n).collect() }
    }

    pub fn constant(n: usize, report: usize) -> Self {
        assert!(report < n);
        DeterministicStrategy { report_for: vec![report; n] }
    }

    /// Truthful except that signal `from` reports `into`: the "merging"
    /// (row-replacement) deviation.
    pub fn merge(n: usize, from: usize, into: usize) -> Self {
        let mut report_for: Vec<usize> = (0..n).collect();
        report_for[from] = into;
        DeterministicStrategy { report_for }
    }

    pub fn n(&self) -> usize {
        self.report_for.len()
    }

    #[inline]
    pub fn report(&self, signal: usize) -> usize {
        self.report_for[signal]
    }

    pub fn reports(&self) -> &[usize] {
        &self.report_for
    }

    pub fn is_permutation(&self) -> bool {
        let n = self.n();
        let mut seen = vec![false; n];
        for &r in &self.report_for {
            if seen[r] {
                return false;
            }
            seen[r] = true;
        }
        true
    }

    pub fn is_identity(&self) -> bool {
        self.report_for.iter().enumerate().all(|(i, &r)| i == r)
    }

    /// Deterministic uninformed strategies are exactly the constant maps.
    pub fn is_uninformed(&self) -> bool {
        self.report_for.iter().all(|&r| r == self.report_for[0])
    }

    pub fn is_informed(&self) -> bool {
        !self.is_uninformed()
    }

    pub fn to_mixed(&self) -> MixedStrategy {
        let n = self.n();
        let mut m = SquareMatrix::zeros(n);
        for (i, &r) in self.report_for.iter().enumerate() {
            m.set(i, r, 1.0);
        }
        MixedStrategy { matrix: m }
    }
}

/// Mixed strategy: row-stochastic matrix, entry (i, r) = P(report r | signal i).
#[derive(Debug, Clone, PartialEq)]
pub struct MixedStrategy {
    matrix: SquareMatrix,
}

impl MixedStrategy {
    pub fn new(matrix: SquareMatrix) -> Result<Self> {
        let n = matrix.n();
        for i in 0..n {
            let mut sum = 0.0;
            for j in 0..n {
                let p = matrix.get(i, j);
                if p < 0.0 || !p.is_finite() {
                    return Err(Error::validation(format!(
                        "strategy row {i} has negative entry {p}"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > DEFAULT_PROB_TOL {
                return Err(Error::validation(format!(
                    "strategy row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(MixedStrategy { matrix })
    }

    pub fn identity(n: usize) -> Self {
        MixedStrategy { matrix: SquareMatrix::identity(n) }
    }

    /// Uninformed: the same report distribution for every signal.
    pub fn uniform(n: usize) -> Self {
        let mut m = SquareMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.set(i, j, 1.0 / n as f64);
            }
        }
        MixedStrategy { matrix: m }
    }

    pub fn constant(n: usize, report: usize) -> Self {
        DeterministicStrategy::constant(n, report).to_mixed()
    }

    pub fn n(&self) -> usize {
        self.matrix.n()
    }

    pub fn matrix(&self) -> &SquareMatrix {
        &self.matrix
    }

    pub fn row(&self, signal: usize) -> &[f64] {
        self.matrix.row(signal)
    }

    pub fn is_uninformed(&self, tol: f64) -> bool {
        let n = self.n();
        (1..n).all(|i| {
            self.row(0)
                .iter()
                .zip(self.row(i))
                .all(|(a, b)| (a - b).abs() <= tol)
        })
    }

    /// Pointwise mean of a list of strategies (the per-task uniformity
    /// lemma compares a schedule against its mean).
    pub fn mean_of(strategies: &[MixedStrategy]) -> Result<MixedStrategy> {
        let Some(first) = strategies.first() else {
            return Err(Error::validation("mean of empty strategy list"));
        };
        let n = first.n();
        let mut m = SquareMatrix::zeros(n);
        for s in strategies {
            if s.n() != n {
                return Err(Error::dimension("strategies of different sizes"));
            }
            for i in 0..n {
                for j in 0..n {
                    m.add_to(i, j, s.matrix.get(i, j));
                }
            }
        }
        let k = strategies.len() as f64;
        for i in 0..n {
            for j in 0..n {
                m.set(i, j, m.get(i, j) / k);
            }
        }
        Ok(MixedStrategy { matrix: m })
    }

    pub fn sample_report(&self, signal: usize, rng: &mut impl RngExt) -> usize {
        let row = self.row(signal);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (r, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return r;
            }
        }
        row.len() - 1
    }
}

/// Realized reports: shared bonus tasks (one report per agent) plus each
/// agent's disjoint penalty tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    bonus: Vec<(TaskId, usize, usize)>,
    penalty1: Vec<(TaskId, usize)>,
    penalty2: Vec<(TaskId, usize)>,
}

impl TaskBatch {
    pub fn new(
        bonus: Vec<(TaskId, usize, usize)>,
        penalty1: Vec<(TaskId, usize)>,
        penalty2: Vec<(TaskId, usize)>,
    ) -> Result<Self> {
        if bonus.is_empty() || penalty1.is_empty() || penalty2.is_empty() {
            return Err(Error::validation(format!(
                "batch needs at least one task of each kind (bonus {}, penalty1 {}, penalty2 {})",
                bonus.len(),
                penalty1.len(),
                penalty2.len()
            )));
        }
        let mut ids: Vec<TaskId> = bonus
            .iter()
            .map(|(id, _, _)| *id)
            .chain(penalty1.iter().map(|(id, _)| *id))
            .chain(penalty2.iter().map(|(id, _)| *id))
            .collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::validation("task ids are not disjoint across sets"));
        }
        Ok(TaskBatch { bonus, penalty1, penalty2 })
    }

    pub fn bonus(&self) -> &[(TaskId, usize, usize)] {
        &self.bonus
    }

    pub fn penalty1(&self) -> &[(TaskId, usize)] {
        &self.penalty1
    }

    pub fn penalty2(&self) -> &[(TaskId, usize)] {
        &self.penalty2
    }

    fn max_report(&self) -> usize {
        let b = self.bonus.iter().map(|&(_, r1, r2)| r1.max(r2)).max().unwrap_or(0);
        let p1 = self.penalty1.iter().map(|&(_, r)| r).max().unwrap_or(0);
        let p2 = self.penalty2.iter().map(|&(_, r)| r).max().unwrap_or(0);
        b.max(p1).max(p2)
    }
}

/// Per-bonus-task payment breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonusPayment {
    pub task_id: TaskId,
    pub score_on_bonus: f64,
    pub penalty_term: f64,
    pub net: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaymentRecord {
    pub per_bonus_task: Vec<BonusPayment>,
    pub total: f64,
}

/// How the penalty term is formed for each bonus task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    /// Draw one penalty task per agent, independently per bonus task.
    SampledPair,
    /// Average the score over all penalty-task pairs: identical
    /// expectation, lower variance.
    AllPairs,
}

/// Pay every bonus task: `S(r1, r2)` minus the penalty term.
pub fn pay_batch(
    batch: &TaskBatch,
    s: &ScoreMatrix,
    mode: PenaltyMode,
    rng: &mut impl RngExt,
) -> Result<PaymentRecord> {
    let n = s.n();
    let max = batch.max_report();
    if max >= n {
        return Err(Error::validation(format!(
            "report {} outside 1..={n}",
            max + 1
        )));
    }
    let all_pairs_penalty = match mode {
        PenaltyMode::AllPairs => {
            let mut sum = 0.0;
            for &(_, r1) in &batch.penalty1 {
                for &(_, r2) in &batch.penalty2 {
                    sum += s.get(r1, r2);
                }
            }
            Some(sum / (batch.penalty1.len() * batch.penalty2.len()) as f64)
        }
        PenaltyMode::SampledPair => None,
    };

    let mut per_bonus_task = Vec::with_capacity(batch.bonus.len());
    let mut total = 0.0;
    for &(task_id, r1, r2) in &batch.bonus {
        let score_on_bonus = s.get(r1, r2);
        let penalty_term = match all_pairs_penalty {
            Some(p) => p,
            None => {
                let l = rng.random_range(0..batch.penalty1.len());
                let l2 = rng.random_range(0..batch.penalty2.len());
                s.get(batch.penalty1[l].1, batch.penalty2[l2].1)
            }
        };
        let net = score_on_bonus - penalty_term;
        total += net;
        per_bonus_task.push(BonusPayment { task_id, score_on_bonus, penalty_term, net });
    }
    Ok(PaymentRecord { per_bonus_task, total })
}

fn check_dims(delta: &DeltaMatrix, s: &ScoreMatrix, nf: usize, ng: usize) -> Result<()> {
    let n = delta.n();
    if s.n() != n || nf != n || ng != n {
        return Err(Error::dimension(format!(
            "delta {n}×{n}, score {}×{}, strategies {nf}/{ng}",
            s.n(),
            s.n()
        )));
    }
    Ok(())
}

/// Expected bonus-task payment for mixed strategies:
/// Σ_ij Δ_ij Σ_{r1,r2} S(r1,r2) F_{i,r1} G_{j,r2}.
pub fn expected_score(
    delta: &DeltaMatrix,
    s: &ScoreMatrix,
    f: &MixedStrategy,
    g: &MixedStrategy,
) -> Result<f64> {
    check_dims(delta, s, f.n(), g.n())?;
    let n = delta.n();
    let mut e = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = delta.get(i, j);
            if d == 0.0 {
                continue;
            }
            let mut inner = 0.0;
            for r1 in 0..n {
                let fp = f.matrix().get(i, r1);
                if fp == 0.0 {
                    continue;
                }
                for r2 in 0..n {
                    inner += s.get(r1, r2) * fp * g.matrix().get(j, r2);
                }
            }
            e += d * inner;
        }
    }
    Ok(e)
}

/// The same expectation in closed matrix form, tr(Fᵀ·Δ·G·Sᵀ). Kept as an
/// independent route and cross-checked against [`expected_score`].
pub fn expected_score_trace(
    delta: &DeltaMatrix,
    s: &ScoreMatrix,
    f: &MixedStrategy,
    g: &MixedStrategy,
) -> Result<f64> {
    check_dims(delta, s, f.n(), g.n())?;
    let ft = f.matrix().transpose();
    let st = s.matrix().transpose();
    Ok(ft.matmul(delta.matrix()).matmul(g.matrix()).matmul(&st).trace())
}

/// Expected bonus-task payment for deterministic strategies:
/// Σ_ij Δ_ij S(F_i, G_j).
pub fn expected_score_det(
    delta: &DeltaMatrix,
    s: &ScoreMatrix,
    f: &DeterministicStrategy,
    g: &DeterministicStrategy,
) -> Result<f64> {
    check_dims(delta, s, f.n(), g.n())?;
    let n = delta.n();
    let mut e = 0.0;
    for i in 0..n {
        let fi = f.report(i);
        for j in 0..n {
            e += delta.get(i, j) * s.get(fi, g.report(j));
        }
    }
    Ok(e)
}

// --- reports CSV ------------------------------------------------------

/// One `task_id,agent,report` row; reports are 1-based in the file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportRow {
    pub task_id: TaskId,
    pub agent: u8,
    /// 0-based in memory.
    pub report: usize,
}

pub fn write_reports_csv<W: std::io::Write>(batch: &TaskBatch, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["task_id", "agent", "report"])?;
    for &(id, r1, r2) in &batch.bonus {
        w.write_record([id.to_string(), "1".into(), (r1 + 1).to_string()])?;
        w.write_record([id.to_string(), "2".into(), (r2 + 1).to_string()])?;
    }
    for &(id, r) in &batch.penalty1 {
        w.write_record([id.to_string(), "1".into(), (r + 1).to_string()])?;
    }
    for &(id, r) in &batch.penalty2 {
        w.write_record([id.to_string(), "2".into(), (r + 1).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports_csv<R: std::io::Read>(reader: R) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(reader);
    {
        let headers = r.headers()?;
        let expect = ["task_id", "agent", "report"];
        if headers.iter().ne(expect) {
            return Err(Error::validation(format!(
                "reports csv header must be task_id,agent,report, got {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
    }
    let mut rows = Vec::new();
    for (idx, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = idx + 2;
        let task_id: TaskId = rec[0]
            .parse()
            .map_err(|_| Error::validation(format!("line {line}: bad task_id {:?}", &rec[0])))?;
        let agent: u8 = rec[1]
            .parse()
            .map_err(|_| Error::validation(format!("line {line}: bad agent {:?}", &rec[1])))?;
        if agent != 1 && agent != 2 {
            return Err(Error::validation(format!("line {line}: agent must be 1 or 2")));
        }
        let report: usize = rec[2]
            .parse()
            .map_err(|_| Error::validation(format!("line {line}: bad report {:?}", &rec[2])))?;
        if report == 0 {
            return Err(Error::validation(format!("line {line}: reports are 1-based")));
        }
        rows.push(ReportRow { task_id, agent, report: report - 1 });
    }
    Ok(rows)
}

/// Assemble a batch from report rows plus explicit task-set membership.
pub fn assemble_batch(
    rows: &[ReportRow],
    bonus_ids: &[TaskId],
    penalty1_ids: &[TaskId],
    penalty2_ids: &[TaskId],
) -> Result<TaskBatch> {
    let find = |task: TaskId, agent: u8| -> Result<usize> {
        rows.iter()
            .find(|r| r.task_id == task && r.agent == agent)
            .map(|r| r.report)
            .ok_or_else(|| {
                Error::validation(format!("no report from agent {agent} on task {task}"))
            })
    };
    let bonus = bonus_ids
        .iter()
        .map(|&id| Ok((id, find(id, 1)?, find(id, 2)?)))
        .collect::<Result<Vec<_>>>()?;
    let penalty1 = penalty1_ids
        .iter()
        .map(|&id| Ok((id, find(id, 1)?)))
        .collect::<Result<Vec<_>>>()?;
    let penalty2 = penalty2_ids
        .iter()
        .map(|&id| Ok((id, find(id, 2)?)))
        .collect::<Result<Vec<_>>>()?;
    TaskBatch::new(bonus, penalty1, penalty2)
}
