//! Accuracy matrices, average accuracy, forward and backward transfer, and
//! the cross-dataset protocol.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::Selection;
use crate::autodiff::cosine_similarity;
use crate::data::{TaskSource, TaskStream};
use crate::encoders::{ClassId, FrozenEncoders, ImageSample};
use crate::trainer::{Learner, Mode, TrainConfig, TrainError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("task index {t} outside 1..={rows}")]
    OutOfRange { t: usize, rows: usize },
    #[error("row {row} has {got} entries, expected {expected}")]
    BadRow { row: usize, expected: usize, got: usize },
    #[error("accuracy {0} outside [0, 100]")]
    BadAccuracy(f64),
}

/// `a[t][s]`: accuracy in percent on task `s` after training task `t`,
/// defined for `s ≤ t` (0-based storage).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub a: Vec<Vec<f64>>,
    pub task_labels: Vec<String>,
}

impl AccuracyMatrix {
    pub fn new(task_labels: Vec<String>) -> Self {
        Self { a: vec![], task_labels }
    }

    /// Build and validate from complete lower-triangular rows.
    pub fn from_rows(task_labels: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self, MetricError> {
        let mut m = Self::new(task_labels);
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.a.len()
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<(), MetricError> {
        let expected = self.a.len() + 1;
        if row.len() != expected {
            return Err(MetricError::BadRow {
                row: self.a.len(),
                expected,
                got: row.len(),
            });
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(MetricError::BadAccuracy(*v));
        }
        self.a.push(row);
        Ok(())
    }

    pub fn get(&self, t: usize, s: usize) -> Option<f64> {
        self.a.get(t).and_then(|r| r.get(s)).copied()
    }

    /// Average accuracy after each task.
    pub fn averages(&self) -> Vec<f64> {
        (1..=self.rows())
            .map(|t| average_accuracy(self, t).expect("in range"))
            .collect()
    }

    pub fn final_average(&self) -> Option<f64> {
        self.averages().last().copied()
    }

    /// Full matrix as CSV; undefined cells are empty.
    pub fn to_csv(&self) -> String {
        let t = self.rows();
        let mut out = String::from("after_task");
        for s in 0..t {
            out.push(',');
            out.push_str(self.task_labels.get(s).map_or("", String::as_str));
        }
        out.push('\n');
        for (i, row) in self.a.iter().enumerate() {
            out.push_str(self.task_labels.get(i).map_or("", String::as_str));
            for s in 0..t {
                out.push(',');
                if let Some(v) = row.get(s) {
                    out.push_str(&format!("{v:.4}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

impl From<MetricError> for TrainError {
    fn from(e: MetricError) -> Self {
        TrainError::Config(e.to_string())
    }
}

/// Mean of `a[t][1..t]`, with `t` 1-based.
pub fn average_accuracy(matrix: &AccuracyMatrix, t: usize) -> Result<f64, MetricError> {
    if t == 0 || t > matrix.rows() {
        return Err(MetricError::OutOfRange { t, rows: matrix.rows() });
    }
    let row = &matrix.a[t - 1][..t];
    Ok(row.iter().sum::<f64>() / t as f64)
}

/// Table-1-style CSV: one row per run, one column per task.
pub fn averages_csv(rows: &[(String, Vec<f64>)]) -> String {
    let width = rows.iter().map(|r| r.1.len()).max().unwrap_or(0);
    let mut out = String::from("method");
    for t in 1..=width {
        out.push_str(&format!(",Task {t}"));
    }
    out.push('\n');
    for (label, vals) in rows {
        out.push_str(label);
        for t in 0..width {
            out.push(',');
            if let Some(v) = vals.get(t) {
                out.push_str(&format!("{v:.4}"));
            }
        }
        out.push('\n');
    }
    out
}

/// Cross-dataset results for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdclReport {
    pub mode: String,
    pub acc_scratch_a: f64,
    pub acc_scratch_b: f64,
    pub acc_a2b_on_a: f64,
    pub acc_a2b_on_b: f64,
    pub acc_joint: f64,
    pub ft: f64,
    pub bt: f64,
    /// Stored training samples; always zero.
    pub memory: usize,
}

impl CdclReport {
    pub fn from_accuracies(
        mode: &str,
        acc_scratch_a: f64,
        acc_scratch_b: f64,
        acc_a2b_on_a: f64,
        acc_a2b_on_b: f64,
        acc_joint: f64,
    ) -> Self {
        let mut r = Self {
            mode: mode.to_string(),
            acc_scratch_a,
            acc_scratch_b,
            acc_a2b_on_a,
            acc_a2b_on_b,
            acc_joint,
            ft: 0.0,
            bt: 0.0,
            memory: 0,
        };
        r.ft = forward_transfer(&r);
        r.bt = backward_transfer(&r);
        r
    }
}

/// Accuracy on B after training on A then B, minus accuracy on B from scratch.
pub fn forward_transfer(report: &CdclReport) -> f64 {
    report.acc_a2b_on_b - report.acc_scratch_b
}

/// Accuracy on A after training on A then B, minus accuracy right after A.
pub fn backward_transfer(report: &CdclReport) -> f64 {
    report.acc_a2b_on_a - report.acc_scratch_a
}

fn eval_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("ATTRIBANK_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("evaluation thread pool")
    })
}

/// Index of the best-scoring candidate; candidates are sorted by id, so a
/// strict comparison breaks ties towards the smallest id.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Task-agnostic accuracy in percent over `test` with `candidates` as the
/// label set.
pub fn evaluate(learner: &Learner, test: &[ImageSample], candidates: &[ClassId]) -> Result<f64, TrainError> {
    if test.is_empty() {
        return Err(TrainError::Config("empty test set".into()));
    }
    if candidates.is_empty() {
        return Err(TrainError::Config("no candidate classes".into()));
    }
    let mut cands = candidates.to_vec();
    cands.sort();
    cands.dedup();
    for c in &cands {
        if !learner.state.class_tokens.contains_key(c) {
            return Err(TrainError::UnknownClass(*c));
        }
    }
    eval_pool().install(|| {
        let encoded = test
            .par_iter()
            .map(|s| {
                let z = learner.encoders.encode_image(s)?;
                let sel = learner.select(&z)?;
                Ok((z, sel))
            })
            .collect::<Result<Vec<(Vec<f64>, Option<Selection>)>, TrainError>>()?;
        let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
        for (i, (_, sel)) in encoded.iter().enumerate() {
            let key = sel.as_ref().map_or_else(Vec::new, |s| s.indices.clone());
            groups.entry(key).or_default().push(i);
        }
        let groups: Vec<_> = groups.into_values().collect();
        let correct = groups
            .par_iter()
            .map(|members| {
                let sel = encoded[members[0]].1.as_ref();
                let texts = cands
                    .iter()
                    .map(|c| learner.text_embedding(*c, sel))
                    .collect::<Result<Vec<_>, _>>()?;
                let mut hits = 0usize;
                for &i in members {
                    let z = &encoded[i].0;
                    let scores: Vec<f64> = texts.iter().map(|w| cosine_similarity(z, w)).collect();
                    if cands[argmax(&scores)] == test[i].label {
                        hits += 1;
                    }
                }
                Ok(hits)
            })
            .collect::<Result<Vec<usize>, TrainError>>()?;
        let hits: usize = correct.iter().sum();
        Ok(100.0 * hits as f64 / test.len() as f64)
    })
}

/// Train `learner` on every task of `source` without evaluating.
pub fn train_stream(learner: &mut Learner, source: &dyn TaskSource) -> Result<(), TrainError> {
    // A second stream continues the decay from the current step.
    let before = learner.state.step_counter;
    learner.plan_schedule(source, before);
    for t in 0..source.num_tasks() {
        learner.train_task(source, t)?;
    }
    Ok(())
}

/// Scratch-A, scratch-B and A-then-B legs for one mode, plus joint
/// evaluation of the A-then-B model over the union label space.
///
/// Per-dataset accuracies use that dataset's classes as candidates.
pub fn run_cdcl(
    a: &TaskStream,
    b: &TaskStream,
    encoders: Arc<FrozenEncoders>,
    config: &TrainConfig,
    mode: Mode,
) -> Result<CdclReport, TrainError> {
    a.validate()?;
    b.validate()?;
    let classes_a = a.classes();
    let classes_b = b.classes();
    if let Some(c) = classes_b.iter().find(|c| classes_a.contains(c)) {
        return Err(TrainError::OverlappingClasses(*c));
    }
    let test_a = a.test_samples();
    let test_b = b.test_samples();

    let mut scratch_a = Learner::new(encoders.clone(), config.clone(), mode)?;
    train_stream(&mut scratch_a, a)?;
    let acc_scratch_a = evaluate(&scratch_a, &test_a, &classes_a)?;

    let mut a2b = scratch_a;
    train_stream(&mut a2b, b)?;
    let acc_a2b_on_a = evaluate(&a2b, &test_a, &classes_a)?;
    let acc_a2b_on_b = evaluate(&a2b, &test_b, &classes_b)?;
    let union: Vec<ClassId> = classes_a.iter().chain(&classes_b).copied().collect();
    let joint: Vec<ImageSample> = test_a.iter().chain(&test_b).cloned().collect();
    let acc_joint = evaluate(&a2b, &joint, &union)?;

    let mut scratch_b = Learner::new(encoders, config.clone(), mode)?;
    train_stream(&mut scratch_b, b)?;
    let acc_scratch_b = evaluate(&scratch_b, &test_b, &classes_b)?;

    Ok(CdclReport::from_accuracies(
        mode.name(),
        acc_scratch_a,
        acc_scratch_b,
        acc_a2b_on_a,
        acc_a2b_on_b,
        acc_joint,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::encoders::{EncoderSpec, ImageBackendSpec};

    fn matrix(rows: Vec<Vec<f64>>) -> AccuracyMatrix {
        let labels = (1..=rows.len()).map(|t| format!("task-{t}")).collect();
        AccuracyMatrix::from_rows(labels, rows).unwrap()
    }

    #[test]
    fn average_accuracy_examples() {
        let m = matrix(vec![vec![90.0], vec![80.0, 60.0]]);
        assert_eq!(average_accuracy(&m, 1).unwrap(), 90.0);
        assert_eq!(average_accuracy(&m, 2).unwrap(), 70.0);
        assert!(average_accuracy(&m, 0).is_err());
        assert!(average_accuracy(&m, 3).is_err());
    }

    #[test]
    fn rows_must_be_lower_triangular_and_bounded() {
        let mut m = AccuracyMatrix::new(vec![]);
        assert!(m.push_row(vec![1.0, 2.0]).is_err());
        assert!(m.push_row(vec![101.0]).is_err());
        m.push_row(vec![50.0]).unwrap();
    }

    #[test]
    fn transfer_signs() {
        let r = CdclReport::from_accuracies("x", 83.3, 81.4, 90.3, 82.3, 78.3);
        assert!((r.ft - 0.9).abs() < 1e-9);
        assert!((r.bt - 7.0).abs() < 1e-9);
        assert_eq!(r.memory, 0);
        let eq = CdclReport::from_accuracies("x", 50.0, 50.0, 50.0, 50.0, 50.0);
        assert_eq!((eq.ft, eq.bt), (0.0, 0.0));
    }

    #[test]
    fn csv_layout() {
        let m = matrix(vec![vec![90.0], vec![80.0, 60.0]]);
        let csv = m.to_csv();
        assert_eq!(csv.lines().next().unwrap(), "after_task,task-1,task-2");
        assert_eq!(csv.lines().nth(1).unwrap(), "task-1,90.0000,");
        let t = averages_csv(&[("run".into(), m.averages())]);
        assert_eq!(t, "method,Task 1,Task 2\nrun,90.0000,70.0000\n");
    }

    fn setup(mode: Mode) -> (Learner, TaskStream) {
        let spec = SyntheticSpec {
            num_latent_attributes: 6,
            attributes_per_class: 2,
            num_tasks: 2,
            classes_per_task: 2,
            samples_per_class: 4,
            test_samples_per_class: 3,
            feature_dim: 8,
            token_dim: 8,
            noise_sigma: 0.05,
            seed: 2,
        };
        let s = generate_synthetic(&spec).unwrap();
        let enc = Arc::new(
            FrozenEncoders::from_spec(&EncoderSpec {
                seed: 1,
                dim: 8,
                max_len: 32,
                image: ImageBackendSpec::Precomputed,
            })
            .unwrap(),
        );
        let cfg = TrainConfig {
            n: 4,
            m: 2,
            c: 2,
            epochs_per_task: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut l = Learner::new(enc, cfg, mode).unwrap();
        for (c, tok) in &s.class_tokens {
            l.register_class(*c, tok.clone()).unwrap();
        }
        (l, s)
    }

    #[test]
    fn single_candidate_is_always_right() {
        let (l, s) = setup(Mode::Attriclip);
        let c = s.tasks[0].classes[0];
        let test: Vec<_> = s.tasks[0].test.iter().filter(|x| x.label == c).cloned().collect();
        assert_eq!(evaluate(&l, &test, &[c]).unwrap(), 100.0);
    }

    #[test]
    fn candidate_order_does_not_matter() {
        let (l, s) = setup(Mode::Attriclip);
        let test = s.test_samples();
        let mut cands = s.classes();
        let a = evaluate(&l, &test, &cands).unwrap();
        cands.reverse();
        assert_eq!(a, evaluate(&l, &test, &cands).unwrap());
    }

    #[test]
    fn unknown_candidate_rejected() {
        let (l, s) = setup(Mode::ZeroShot);
        assert!(matches!(
            evaluate(&l, &s.test_samples(), &[ClassId(99)]),
            Err(TrainError::UnknownClass(ClassId(99)))
        ));
    }

    #[test]
    fn cdcl_rejects_overlap() {
        let (l, s) = setup(Mode::ZeroShot);
        let err = run_cdcl(&s, &s, l.encoders.clone(), &l.config, Mode::ZeroShot).unwrap_err();
        assert!(matches!(err, TrainError::OverlappingClasses(_)));
    }

    #[test]
    fn cdcl_identical_streams_zero_shot_has_no_transfer() {
        let (l, s) = setup(Mode::ZeroShot);
        let b = s.relabeled("copy", 100, 10_000);
        let r = run_cdcl(&s, &b, l.encoders.clone(), &l.config, Mode::ZeroShot).unwrap();
        assert_eq!(r.ft, 0.0);
        assert_eq!(r.bt, 0.0);
    }
}
