//! Peer-assessment data ingestion: load grader reports from CSV and
//! estimate a per-question Delta matrix.
//!
//! Real grading data has no bonus/penalty split, so marginals are read off
//! the empirical joint table itself; the resulting Δ therefore keeps the
//! exact zero row/column sums by construction. Outputs are report-based
//! estimates: reports stand in for signals.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::SquareMatrix;
use crate::signal_model::{classify, delta_of, sign_of, DeltaMatrix, JointSignalModel, WorldClassification};

/// All reports for one question, keyed by submission. Reports are stored
/// 0-based; the CSV wire format is 1-based.
#[derive(Debug, Clone, Default)]
pub struct QuestionData {
    /// Signal count: declared, or inferred as the largest report seen.
    pub n: usize,
    pub submissions: BTreeMap<String, Vec<(String, usize)>>,
}

#[derive(Debug, Clone, Default)]
pub struct AssessmentDataset {
    pub questions: BTreeMap<String, QuestionData>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    pub line: usize,
    pub message: String,
}

/// Load result: the valid rows, plus every malformed row (collected, not
/// silently dropped) and duplicate-overwrite warnings.
#[derive(Debug)]
pub struct LoadReport {
    pub dataset: AssessmentDataset,
    pub row_errors: Vec<RowError>,
    pub warnings: Vec<String>,
}

pub fn load_csv_path(path: impl AsRef<Path>, declared_n: Option<usize>) -> Result<LoadReport> {
    let file = std::fs::File::open(path.as_ref())?;
    load_csv(file, declared_n)
}

/// Parse `question_id,submission_id,grader_id,report` rows.
///
/// Reports must be integers in 1..=n (declared n, or inferred per
/// question when absent). A duplicate (question, submission, grader)
/// triple keeps the last value and records a warning.
pub fn load_csv<R: Read>(reader: R, declared_n: Option<usize>) -> Result<LoadReport> {
    let mut r = csv::Reader::from_reader(reader);
    {
        let headers = r.headers()?;
        let expect = ["question_id", "submission_id", "grader_id", "report"];
        if headers.iter().ne(expect) {
            return Err(Error::validation(format!(
                "assessment csv header must be question_id,submission_id,grader_id,report, got {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
    }
    let mut dataset = AssessmentDataset::default();
    let mut row_errors = Vec::new();
    let mut warnings = Vec::new();
    for (idx, record) in r.records().enumerate() {
        let line = idx + 2;
        let record = match record {
            Ok(rec) => rec,
            Err(e) => {
                row_errors.push(RowError { line, message: e.to_string() });
                continue;
            }
        };
        if record.len() != 4 {
            row_errors.push(RowError { line, message: format!("{} fields, expected 4", record.len()) });
            continue;
        }
        let report: usize = match record[3].trim().parse() {
            Ok(v) => v,
            Err(_) => {
                row_errors
                    .push(RowError { line, message: format!("report {:?} is not an integer", &record[3]) });
                continue;
            }
        };
        if report == 0 {
            row_errors.push(RowError {
                line,
                message: format!("report 0 outside 1..={}", declared_n.unwrap_or(0).max(1)),
            });
            continue;
        }
        if let Some(n) = declared_n {
            if report > n {
                row_errors
                    .push(RowError { line, message: format!("report {report} outside 1..={n}") });
                continue;
            }
        }
        let question = dataset.questions.entry(record[0].to_string()).or_default();
        question.n = declared_n.unwrap_or(0).max(question.n).max(report);
        let graders = question.submissions.entry(record[1].to_string()).or_default();
        let grader_id = record[2].to_string();
        if let Some(existing) = graders.iter_mut().find(|(g, _)| *g == grader_id) {
            warnings.push(format!(
                "line {line}: duplicate report by grader {grader_id} on submission {}; keeping the last",
                &record[1]
            ));
            existing.1 = report - 1;
        } else {
            graders.push((grader_id, report - 1));
        }
    }
    Ok(LoadReport { dataset, row_errors, warnings })
}

/// Empirical joint report distribution for one question, from all
/// unordered grader pairs of every submission, counted in both
/// orientations so the table is exactly symmetric.
pub fn empirical_model(dataset: &AssessmentDataset, question_id: &str) -> Result<JointSignalModel> {
    let question = dataset
        .questions
        .get(question_id)
        .ok_or_else(|| Error::validation(format!("unknown question {question_id:?}")))?;
    let n = question.n.max(2);
    let mut counts = vec![0u64; n * n];
    let mut pairs = 0u64;
    for graders in question.submissions.values() {
        for a in 0..graders.len() {
            for b in (a + 1)..graders.len() {
                let (r1, r2) = (graders[a].1, graders[b].1);
                counts[r1 * n + r2] += 1;
                counts[r2 * n + r1] += 1;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::validation(format!(
            "question {question_id:?} has no submission with at least 2 graders"
        )));
    }
    let mut joint = SquareMatrix::zeros(n);
    let total = (2 * pairs) as f64;
    for i in 0..n {
        for j in 0..n {
            joint.set(i, j, counts[i * n + j] as f64 / total);
        }
    }
    JointSignalModel::new(joint)
}

/// Per-question empirical Delta estimate.
pub fn empirical_delta(dataset: &AssessmentDataset, question_id: &str) -> Result<DeltaMatrix> {
    Ok(delta_of(&empirical_model(dataset, question_id)?))
}

/// Machine-readable per-question analysis: the estimated model with its
/// Delta, sign structure, and classification.
#[derive(Debug, Clone, Serialize)]
pub struct QuestionAnalysis {
    pub question_id: String,
    pub n: usize,
    pub submissions: usize,
    pub report_pairs: usize,
    pub joint: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
    pub sign: Vec<Vec<u8>>,
    pub categorical: bool,
    pub clustered_signals: bool,
    pub paired_permutations: bool,
    pub stochastically_relevant: bool,
    pub exchangeable: bool,
    pub has_zero_delta_entries: bool,
}

pub fn analyze_question(dataset: &AssessmentDataset, question_id: &str) -> Result<QuestionAnalysis> {
    let model = empirical_model(dataset, question_id)?;
    let delta = delta_of(&model);
    let sign = sign_of(&delta);
    let WorldClassification {
        categorical,
        clustered_signals,
        paired_permutations,
        stochastically_relevant,
        has_zero_delta_entries,
        exchangeable,
        ..
    } = classify(&model)?;
    let question = &dataset.questions[question_id];
    let report_pairs = question
        .submissions
        .values()
        .map(|g| g.len() * g.len().saturating_sub(1) / 2)
        .sum();
    Ok(QuestionAnalysis {
        question_id: question_id.to_string(),
        n: model.n(),
        submissions: question.submissions.len(),
        report_pairs,
        joint: model.joint().to_rows(),
        delta: delta.matrix().to_rows(),
        sign: sign.to_rows(),
        categorical,
        clustered_signals,
        paired_permutations,
        stochastically_relevant,
        exchangeable,
        has_zero_delta_entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "question_id,submission_id,grader_id,report\n";

    #[test]
    fn small_valid_file() {
        let csv = format!("{HEADER}q1,s1,g1,1\nq1,s1,g2,2\nq1,s2,g1,2\n");
        let loaded = load_csv(csv.as_bytes(), Some(2)).unwrap();
        assert!(loaded.row_errors.is_empty());
        assert_eq!(loaded.dataset.questions["q1"].submissions.len(), 2);
    }

    #[test]
    fn out_of_range_report_collected_not_dropped() {
        let csv = format!("{HEADER}q1,s1,g1,0\nq1,s1,g2,4\nq1,s1,g3,2\n");
        let loaded = load_csv(csv.as_bytes(), Some(3)).unwrap();
        assert_eq!(loaded.row_errors.len(), 2);
        assert!(loaded.row_errors[0].message.contains("outside 1..=3")
            || loaded.row_errors[0].message.contains("report 0"));
        assert_eq!(
            loaded.dataset.questions["q1"].submissions["s1"],
            vec![("g3".to_string(), 1)]
        );
    }

    #[test]
    fn duplicate_grader_last_wins_with_warning() {
        let csv = format!("{HEADER}q1,s1,g1,1\nq1,s1,g1,3\nq1,s1,g2,2\n");
        let loaded = load_csv(csv.as_bytes(), Some(3)).unwrap();
        assert_eq!(loaded.warnings.len(), 1);
        assert_eq!(
            loaded.dataset.questions["q1"].submissions["s1"],
            vec![("g1".to_string(), 2), ("g2".to_string(), 1)]
        );
    }

    #[test]
    fn single_pair_spreads_mass_symmetrically() {
        let csv = format!("{HEADER}q1,s1,g1,1\nq1,s1,g2,2\n");
        let loaded = load_csv(csv.as_bytes(), Some(2)).unwrap();
        let model = empirical_model(&loaded.dataset, "q1").unwrap();
        assert_eq!(model.joint().get(0, 1), 0.5);
        assert_eq!(model.joint().get(1, 0), 0.5);
        assert_eq!(model.joint().get(0, 0), 0.0);
    }

    #[test]
    fn identical_reports_give_zero_delta() {
        let csv = format!("{HEADER}q1,s1,g1,2\nq1,s1,g2,2\nq1,s2,g1,2\nq1,s2,g2,2\n");
        let loaded = load_csv(csv.as_bytes(), Some(3)).unwrap();
        let delta = empirical_delta(&loaded.dataset, "q1").unwrap();
        for v in delta.matrix().entries() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn empirical_delta_is_bitwise_symmetric_with_zero_sums() {
        let csv = format!(
            "{HEADER}q1,s1,g1,1\nq1,s1,g2,2\nq1,s1,g3,1\nq1,s2,g1,3\nq1,s2,g2,3\nq1,s3,g1,2\nq1,s3,g2,3\n"
        );
        let loaded = load_csv(csv.as_bytes(), Some(3)).unwrap();
        let delta = empirical_delta(&loaded.dataset, "q1").unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(delta.get(i, j).to_bits(), delta.get(j, i).to_bits());
            }
        }
        for s in delta.matrix().row_sums().iter().chain(delta.matrix().col_sums().iter()) {
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn pairless_question_is_an_error() {
        let csv = format!("{HEADER}q1,s1,g1,1\nq1,s2,g1,2\n");
        let loaded = load_csv(csv.as_bytes(), Some(2)).unwrap();
        let err = empirical_model(&loaded.dataset, "q1").unwrap_err();
        assert!(err.to_string().contains("2 graders"), "{err}");
    }

    #[test]
    fn missing_header_rejected() {
        let csv = "task,who,what\n1,2,3\n";
        assert!(load_csv(csv.as_bytes(), None).is_err());
    }
}
