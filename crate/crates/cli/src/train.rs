//! `train`: one continual run over a task stream.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use attribank::data::{read_checkpoint, write_checkpoint, Checkpoint, TaskStream};
use attribank::encoders::{EncoderSpec, FrozenEncoders};
use attribank::eval::AccuracyMatrix;
use attribank::trainer::{Learner, Mode, TrainConfig, TrainError};

use crate::config::{config_dir, load_config, resolve_encoder, RunConfig};
use crate::error::{io_error, CliError};
use crate::manifest::{InputLog, RunDir};
use crate::{emit, Format, TrainArgs};

pub const METRICS_FILE: &str = "metrics.json";

/// Deterministic summary of one sequence run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mode: Mode,
    pub seed: u64,
    pub tasks: Vec<String>,
    /// `accuracy[t][s]`: percent on task `s` after training task `t`.
    pub accuracy: Vec<Vec<f64>>,
    pub average_accuracy: Vec<f64>,
    pub final_average_accuracy: Option<f64>,
    /// Mean pairwise |cos| of the bank's prompt embeddings (attriclip only).
    pub prompt_coherence: Option<f64>,
    pub encoder_checksum: String,
    pub optimizer_steps: u64,
}

impl Metrics {
    pub fn new(learner: &Learner, matrix: &AccuracyMatrix) -> Result<Self, CliError> {
        Ok(Self {
            mode: learner.mode(),
            seed: learner.config.seed,
            tasks: matrix.task_labels.clone(),
            accuracy: matrix.a.clone(),
            average_accuracy: matrix.averages(),
            final_average_accuracy: matrix.final_average(),
            prompt_coherence: learner.prompt_coherence()?,
            encoder_checksum: format!("{:016x}", learner.encoders.checksum()),
            optimizer_steps: learner.state.step_counter,
        })
    }
}

pub fn checkpoint_name(t: usize) -> String {
    format!("checkpoints/task-{t:02}.ckpt")
}

pub fn report_name(t: usize) -> String {
    format!("reports/task-{t:02}.json")
}

/// Train the remaining tasks of `stream`, writing per-task reports and
/// (optionally) checkpoints into `dir`, then the matrix and metrics.
/// On failure the partial matrix is still written.
pub(crate) fn run_sequence_into(
    dir: &mut RunDir,
    learner: &mut Learner,
    encoder: &EncoderSpec,
    stream: &TaskStream,
    partial: Option<AccuracyMatrix>,
    checkpoints: bool,
) -> Result<AccuracyMatrix, CliError> {
    let labels: Vec<String> = stream.tasks.iter().map(|t| t.name.clone()).collect();
    let partial = partial.unwrap_or_else(|| AccuracyMatrix::new(labels));
    if checkpoints {
        let ck_dir = dir.root.join("checkpoints");
        std::fs::create_dir_all(&ck_dir).map_err(|e| io_error(&ck_dir, e))?;
    }
    let mut hook = |l: &Learner, report: &attribank::trainer::TaskReport, m: &AccuracyMatrix| {
        let t = report.task + 1;
        dir.write_json(&report_name(t), report).map_err(|e| e.to_string())?;
        if checkpoints {
            let ck = Checkpoint {
                config: l.config.clone(),
                encoder: encoder.clone(),
                state: l.state.clone(),
                matrix: Some(m.clone()),
            };
            let rel = checkpoint_name(t);
            write_checkpoint(&ck, &dir.root.join(&rel)).map_err(|e| format!("{rel}: {e}"))?;
            dir.note(&rel);
        }
        Ok(())
    };
    let result = learner.resume_sequence(stream, partial, &mut hook);
    let (matrix, failure) = match result {
        Ok(m) => (m, None),
        Err(e) => (e.partial, Some(e.source)),
    };
    dir.write("matrix.csv", matrix.to_csv().as_bytes())?;
    dir.write_json("matrix.json", &matrix)?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    dir.write_json(METRICS_FILE, &Metrics::new(learner, &matrix)?)?;
    Ok(matrix)
}

fn seeds_of(config: &TrainConfig, encoder: &EncoderSpec, data_seed: Option<u64>) -> BTreeMap<String, u64> {
    let mut s = BTreeMap::from([("train".to_string(), config.seed), ("encoder".to_string(), encoder.seed)]);
    if let Some(d) = data_seed {
        s.insert("data".into(), d);
    }
    s
}

pub(crate) fn data_seed(cfg: &RunConfig) -> Option<u64> {
    match &cfg.data {
        crate::config::DataSource::Synthetic(s) => Some(s.seed),
        _ => None,
    }
}

#[derive(Serialize)]
struct Snapshot<'a> {
    train: &'a TrainConfig,
    encoder: &'a EncoderSpec,
    mode: Mode,
    data: &'a crate::config::DataSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    resumed_from: Option<String>,
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut inputs = InputLog::default();
    let mut cfg: RunConfig = load_config(&args.config, &mut inputs)?;
    if let Some(seed) = args.seed {
        cfg.apply_seed(seed);
    }
    let mode = args.mode.or(cfg.mode).unwrap_or_default();
    cfg.train.validate()?;
    let stream = cfg.data.build("stream", &config_dir(&args.config), &mut inputs)?;

    let (mut learner, encoder, partial) = match &args.resume {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            inputs.record(path, &bytes);
            let ck = read_checkpoint(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            if ck.state.mode != mode && args.mode.is_some() {
                return Err(CliError::Config(format!(
                    "checkpoint was written in mode {}, not {mode}",
                    ck.state.mode
                )));
            }
            let enc = Arc::new(FrozenEncoders::from_spec(&ck.encoder).map_err(TrainError::from)?);
            let learner = Learner::from_state(enc, ck.config, ck.state)?;
            (learner, ck.encoder, ck.matrix)
        }
        None => {
            let encoder = resolve_encoder(cfg.encoder.as_ref(), &cfg.train, &stream)?;
            let enc = FrozenEncoders::from_spec(&encoder).map_err(|e| CliError::Config(e.to_string()))?;
            let learner = Learner::new(Arc::new(enc), cfg.train.clone(), mode)?;
            (learner, encoder, None)
        }
    };

    let mut dir = RunDir::create(&args.out)?;
    let result = run_sequence_into(&mut dir, &mut learner, &encoder, &stream, partial, true);
    let snapshot = Snapshot {
        train: &learner.config,
        encoder: &encoder,
        mode: learner.mode(),
        data: &cfg.data,
        resumed_from: args.resume.as_ref().map(|p| p.display().to_string()),
    };
    let seeds = seeds_of(&learner.config, &encoder, data_seed(&cfg));
    let status = match &result {
        Ok(_) => "ok".to_string(),
        Err(e) => format!("failed: {e}"),
    };
    dir.finish("train", &snapshot, seeds, inputs, &status)?;
    let matrix = result?;

    let metrics = Metrics::new(&learner, &matrix)?;
    let text = match args.format {
        Some(Format::Json) => serde_json::to_string_pretty(&metrics).expect("metrics serialize") + "\n",
        Some(Format::Csv) => matrix.to_csv(),
        None => format!(
            "{} tasks, mode {}: final average accuracy {:.2}\n",
            matrix.rows(),
            learner.mode(),
            metrics.final_average_accuracy.unwrap_or(f64::NAN)
        ),
    };
    emit(out, &text)
}
