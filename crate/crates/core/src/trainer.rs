//! Task-sequential training: plain SGD with a cosine-decayed learning rate,
//! per-image key selection and sparse bank updates, plus the zero-shot and
//! shared-prompt baselines.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Gradients, Tape, Tensor, Var};
use crate::bank::{
    compose_text_input, select_top_c, AttributeBank, BankError, BankVars, Selection,
    PROMPT_INIT_STD,
};
use crate::data::{DataError, TaskSource};
use crate::encoders::{ClassId, EncoderError, FrozenEncoders, ImageSample, TokenSequence};
use crate::eval::{evaluate, AccuracyMatrix};
use crate::objective::{
    classification_term, key_matching_loss, prompt_orthogonality_loss, total_loss,
    DistanceVariant, LossBreakdown, ObjectiveError, DEFAULT_TAU,
};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Attriclip,
    SharedPrompt,
    ZeroShot,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Attriclip, Mode::SharedPrompt, Mode::ZeroShot];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Attriclip => "attriclip",
            Mode::SharedPrompt => "shared_prompt",
            Mode::ZeroShot => "zero_shot",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected attriclip, shared_prompt or zero_shot)"))
    }
}

/// Span of the cosine schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleScope {
    /// Restart at `lr0` for every task and decay to 0 over its steps.
    #[default]
    PerTask,
    /// One decay over every step of the sequence.
    Sequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub lambda_k: f64,
    pub lambda_p: f64,
    pub c: usize,
    pub n: usize,
    pub m: usize,
    pub tau: f64,
    pub distance: DistanceVariant,
    pub seed: u64,
    pub schedule: ScheduleScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_task: 10,
            batch_size: 32,
            lr0: 0.001,
            weight_decay: 0.0,
            lambda_k: 0.7,
            lambda_p: 0.3,
            c: 3,
            n: 10,
            m: 12,
            tau: DEFAULT_TAU,
            distance: DistanceVariant::Cosine,
            seed: 0,
            schedule: ScheduleScope::PerTask,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs_per_task == 0 || self.batch_size == 0 {
            return bad("epochs_per_task and batch_size must be at least 1".into());
        }
        if self.n == 0 || self.m == 0 {
            return bad("n and m must be at least 1".into());
        }
        if self.c == 0 || self.c > self.n {
            return bad(format!("c must lie in 1..={} (n), got {}", self.n, self.c));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be finite and non-negative, got {}", self.lr0));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be finite and non-negative, got {}", self.weight_decay));
        }
        for (name, v) in [("lambda_k", self.lambda_k), ("lambda_p", self.lambda_p)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        self.distance
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        if matches!(self.distance, DistanceVariant::Triplet { .. }) && self.c == self.n {
            return bad("triplet matching needs c < n".into());
        }
        Ok(())
    }

    /// Optimizer steps for a task of `samples` training samples.
    pub fn steps_for(&self, samples: usize) -> u64 {
        (self.epochs_per_task * samples.div_ceil(self.batch_size)) as u64
    }
}

/// `lr0 · ½ · (1 + cos(π · step / total))`
pub fn lr_at(step: u64, total_steps: u64, lr0: f64) -> f64 {
    let total = total_steps.max(1);
    let frac = step.min(total) as f64 / total as f64;
    lr0 * 0.5 * (1.0 + (PI * frac).cos())
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("task {0} has no training samples")]
    EmptyTask(usize),
    #[error("class {0} was already registered by an earlier task")]
    OverlappingClasses(ClassId),
    #[error("no class token for class {0}")]
    MissingClassToken(ClassId),
    #[error("class {0} is not registered with the learner")]
    UnknownClass(ClassId),
    #[error("sample labelled {label} does not belong to task {task}")]
    ForeignLabel { task: usize, label: ClassId },
    #[error("non-finite {what} at step {step}\n{dump}")]
    NonFinite {
        step: u64,
        what: String,
        dump: String,
    },
    #[error("operation requires mode {expected}, learner is {actual}")]
    WrongMode { expected: Mode, actual: Mode },
    #[error("hook failed: {0}")]
    Hook(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl TrainError {
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFinite { .. }
                | TrainError::Bank(BankError::DegenerateKey { .. })
                | TrainError::Bank(BankError::NonFinite(_))
                | TrainError::Objective(ObjectiveError::NonFinite(_))
        )
    }
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerState {
    pub mode: Mode,
    /// Present in attriclip mode only.
    pub bank: Option<AttributeBank>,
    /// `[m, d]` row-major; present in shared_prompt mode only.
    pub shared_prompt: Option<Vec<f64>>,
    /// Registration order of classes; never reordered.
    pub class_order: Vec<ClassId>,
    pub class_tokens: BTreeMap<ClassId, TokenSequence>,
    pub step_counter: u64,
    pub tasks_completed: usize,
}

impl LearnerState {
    pub fn init(mode: Mode, config: &TrainConfig, dim: usize) -> Result<Self, TrainError> {
        let bank = match mode {
            Mode::Attriclip => Some(AttributeBank::init(config.n, config.m, dim, config.seed)?),
            _ => None,
        };
        let shared_prompt = match mode {
            Mode::SharedPrompt => {
                let mut rng = SplitMix64::derive(config.seed, "shared_prompt");
                Some(rng.normal_vec(config.m * dim, PROMPT_INIT_STD))
            }
            _ => None,
        };
        Ok(Self {
            mode,
            bank,
            shared_prompt,
            class_order: vec![],
            class_tokens: BTreeMap::new(),
            step_counter: 0,
            tasks_completed: 0,
        })
    }

    pub fn num_trainable(&self) -> usize {
        let bank = self
            .bank
            .as_ref()
            .map_or(0, |b| b.n() * b.d() * (1 + b.m()));
        bank + self.shared_prompt.as_ref().map_or(0, Vec::len)
    }
}

/// Gradients of one loss with respect to every trainable parameter.
///
/// `None` marks a parameter that was not registered on the tape at all;
/// registered parameters the loss does not reach get zeros.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamGrads {
    pub keys: Vec<Option<Vec<f64>>>,
    pub prompts: Vec<Option<Vec<f64>>>,
    pub shared: Option<Vec<f64>>,
}

impl ParamGrads {
    pub fn is_finite(&self) -> bool {
        self.keys
            .iter()
            .chain(&self.prompts)
            .flatten()
            .chain(&self.shared)
            .all(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Dense key gradients, zeros for unregistered keys.
    pub fn dense_keys(&self, d: usize) -> Vec<Vec<f64>> {
        self.keys
            .iter()
            .map(|g| g.clone().unwrap_or_else(|| vec![0.0; d]))
            .collect()
    }

    pub fn dense_prompts(&self, len: usize) -> Vec<Vec<f64>> {
        self.prompts
            .iter()
            .map(|g| g.clone().unwrap_or_else(|| vec![0.0; len]))
            .collect()
    }
}

/// One forward pass kept alive for inspection and backward passes.
pub struct ForwardGraph {
    pub tape: Tape,
    pub l_m: Var,
    pub l_k: Var,
    pub l_p: Var,
    pub total: Var,
    pub bank_vars: Option<BankVars>,
    pub shared_prompt: Option<Var>,
    pub selections: Vec<Option<Selection>>,
    pub breakdown: LossBreakdown,
}

impl ForwardGraph {
    pub fn grads_of(&self, loss: Var) -> Result<ParamGrads, TrainError> {
        let g = self.tape.backward(loss)?;
        Ok(self.collect(&g))
    }

    fn collect(&self, g: &Gradients) -> ParamGrads {
        let mut out = ParamGrads::default();
        if let Some(vars) = &self.bank_vars {
            let n = vars.len();
            out.keys = (0..n)
                .map(|i| vars.registered_key(i).map(|v| g.wrt(v).into_data()))
                .collect();
            out.prompts = (0..n)
                .map(|i| vars.registered_prompt(i).map(|v| g.wrt(v).into_data()))
                .collect();
        }
        out.shared = self.shared_prompt.map(|v| g.wrt(v).into_data());
        out
    }

    /// Scalar node `a·L_m + b·L_k + c·L_p` on this graph's tape.
    pub fn combine(&mut self, a: f64, b: f64, c: f64) -> Result<Var, TrainError> {
        let t = &mut self.tape;
        let x = t.scale(self.l_m, a)?;
        let y = t.scale(self.l_k, b)?;
        let z = t.scale(self.l_p, c)?;
        let s = t.add(x, y)?;
        Ok(t.add(s, z)?)
    }
}

/// Per-epoch mean losses, learning rates and selection counts for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: usize,
    pub task_name: String,
    pub mode: Mode,
    pub classes: Vec<ClassId>,
    pub train_samples: usize,
    pub steps: u64,
    pub epoch_losses: Vec<LossBreakdown>,
    pub lr_trace: Vec<f64>,
    /// Times each bank entry was selected during this task's training.
    pub selection_histogram: Vec<u64>,
}

/// Called after each task with the learner, that task's report and the
/// accuracy matrix so far.
pub type SequenceHook<'h> =
    dyn FnMut(&Learner, &TaskReport, &AccuracyMatrix) -> Result<(), String> + 'h;

/// A failed sequence keeps the rows of every completed task.
#[derive(Debug, Error)]
#[error("{source} (after {} completed tasks)", partial.rows())]
pub struct SequenceError {
    pub partial: AccuracyMatrix,
    #[source]
    pub source: TrainError,
}

#[derive(Debug, Clone)]
pub struct Learner {
    pub encoders: Arc<FrozenEncoders>,
    pub config: TrainConfig,
    pub state: LearnerState,
    /// Total steps for a sequence-wide schedule, set by `run_sequence`.
    sequence_steps: Option<u64>,
}

fn format_dump(name: &str, values: &[f64]) -> String {
    let bad: Vec<String> = values
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_finite())
        .take(8)
        .map(|(i, v)| format!("[{i}]={v}"))
        .collect();
    format!("  {name} (len {}): {}", values.len(), bad.join(" "))
}

impl Learner {
    pub fn new(encoders: Arc<FrozenEncoders>, config: TrainConfig, mode: Mode) -> Result<Self, TrainError> {
        config.validate()?;
        let state = LearnerState::init(mode, &config, encoders.dim())?;
        Self::from_state(encoders, config, state)
    }

    pub fn from_state(
        encoders: Arc<FrozenEncoders>,
        config: TrainConfig,
        state: LearnerState,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let longest = match state.mode {
            Mode::Attriclip => config.c * config.m + 1,
            Mode::SharedPrompt => config.m + 1,
            Mode::ZeroShot => 1,
        };
        if longest > encoders.text.max_len() {
            return Err(TrainError::Config(format!(
                "composed text length {longest} exceeds the encoder's max_len {}",
                encoders.text.max_len()
            )));
        }
        if let Some(b) = &state.bank {
            if b.d() != encoders.dim() || b.n() != config.n || b.m() != config.m {
                return Err(TrainError::Config("bank shape does not match config".into()));
            }
        }
        Ok(Self {
            encoders,
            config,
            state,
            sequence_steps: None,
        })
    }

    pub fn mode(&self) -> Mode {
        self.state.mode
    }

    /// Registered classes in registration order.
    pub fn classes(&self) -> &[ClassId] {
        &self.state.class_order
    }

    /// Register a class token; ids may not repeat.
    pub fn register_class(&mut self, class: ClassId, token: TokenSequence) -> Result<(), TrainError> {
        if self.state.class_tokens.contains_key(&class) {
            return Err(TrainError::OverlappingClasses(class));
        }
        if token.dim() != self.encoders.dim() {
            return Err(EncoderError::DimensionMismatch {
                expected: self.encoders.dim(),
                got: token.dim(),
            }
            .into());
        }
        self.state.class_tokens.insert(class, token);
        self.state.class_order.push(class);
        Ok(())
    }

    /// Top-C selection for an image embedding, in attriclip mode.
    pub fn select(&self, z: &[f64]) -> Result<Option<Selection>, TrainError> {
        match &self.state.bank {
            Some(bank) => Ok(Some(select_top_c(z, bank, self.config.c)?)),
            None => Ok(None),
        }
    }

    /// Text embedding for `class` given a selection (attriclip) or the
    /// mode's fixed prefix (baselines); no gradients.
    pub fn text_embedding(&self, class: ClassId, sel: Option<&Selection>) -> Result<Vec<f64>, TrainError> {
        let token = self
            .state
            .class_tokens
            .get(&class)
            .ok_or(TrainError::UnknownClass(class))?;
        let mut tape = Tape::new();
        let mut text = self.encoders.text.bind(&mut tape);
        let cls = tape.constant(token.tensor().clone());
        let input = match (self.state.mode, sel) {
            (Mode::Attriclip, Some(sel)) => {
                let bank = self.state.bank.as_ref().expect("attriclip has a bank");
                let mut vars = BankVars::frozen(bank.n());
                compose_text_input(&mut tape, &mut vars, bank, sel, cls)?
            }
            (Mode::SharedPrompt, _) => {
                let p = self.shared_prompt_tensor();
                let pv = tape.constant(p);
                tape.concat(&[pv, cls])?
            }
            _ => cls,
        };
        let w = text.encode(&mut tape, input)?;
        Ok(tape.value(w).data().to_vec())
    }

    fn shared_prompt_tensor(&self) -> Tensor {
        let d = self.encoders.dim();
        let p = self.state.shared_prompt.as_ref().expect("shared_prompt mode");
        Tensor::matrix(p.len() / d, d, p.clone()).expect("m·d values")
    }

    fn label_index(&self, label: ClassId) -> Result<usize, TrainError> {
        self.state
            .class_order
            .iter()
            .position(|c| *c == label)
            .ok_or(TrainError::UnknownClass(label))
    }

    /// Build the loss graph for one batch with every registered class as a
    /// candidate. Parameters become trainable leaves.
    pub fn forward(&self, batch: &[&ImageSample]) -> Result<ForwardGraph, TrainError> {
        if batch.is_empty() {
            return Err(ObjectiveError::EmptyBatch.into());
        }
        let cfg = &self.config;
        let mode = self.state.mode;
        let mut tape = Tape::new();
        let mut text = self.encoders.text.bind(&mut tape);
        let classes = self.state.class_order.clone();
        let mut cls_vars: HashMap<ClassId, Var> = HashMap::new();
        for c in &classes {
            let v = tape.constant(self.state.class_tokens[c].tensor().clone());
            cls_vars.insert(*c, v);
        }
        let bank = self.state.bank.as_ref();
        let mut bank_vars = bank.map(|b| BankVars::trainable(b.n()));
        let shared = match mode {
            Mode::SharedPrompt => Some(tape.leaf(self.shared_prompt_tensor())),
            _ => None,
        };
        let mut cache: HashMap<Vec<usize>, Vec<Var>> = HashMap::new();
        let mut ce_terms = Vec::with_capacity(batch.len());
        let mut km_terms = Vec::with_capacity(batch.len());
        let mut selections = Vec::with_capacity(batch.len());
        for sample in batch {
            let label = self.label_index(sample.label)?;
            let z = self.encoders.encode_image(sample)?;
            let sel = self.select(&z)?;
            let key: Vec<usize> = sel.as_ref().map_or_else(Vec::new, |s| s.indices.clone());
            if !cache.contains_key(&key) {
                let mut ws = Vec::with_capacity(classes.len());
                for c in &classes {
                    let cls = cls_vars[c];
                    let input = match (mode, &sel) {
                        (Mode::Attriclip, Some(s)) => compose_text_input(
                            &mut tape,
                            bank_vars.as_mut().expect("bank vars"),
                            bank.expect("bank"),
                            s,
                            cls,
                        )?,
                        (Mode::SharedPrompt, _) => tape.concat(&[shared.expect("shared"), cls])?,
                        _ => cls,
                    };
                    ws.push(text.encode(&mut tape, input)?);
                }
                cache.insert(key.clone(), ws);
            }
            let zv = tape.constant(Tensor::vector(z.clone()));
            ce_terms.push(classification_term(&mut tape, zv, &cache[&key], label, cfg.tau)?);
            if let (Some(s), Some(b)) = (&sel, bank) {
                km_terms.push(key_matching_loss(
                    &mut tape,
                    bank_vars.as_mut().expect("bank vars"),
                    b,
                    &z,
                    s,
                    cfg.distance,
                )?);
            }
            selections.push(sel);
        }
        let stacked = tape.stack(&ce_terms)?;
        let l_m = tape.mean(stacked)?;
        let l_k = if km_terms.is_empty() {
            tape.constant(Tensor::scalar(0.0))
        } else {
            let s = tape.stack(&km_terms)?;
            tape.mean(s)?
        };
        let l_p = match (bank, bank_vars.as_mut()) {
            (Some(b), Some(vars)) => prompt_orthogonality_loss(&mut tape, vars, b, &mut text)?,
            _ => tape.constant(Tensor::scalar(0.0)),
        };
        let (lk_w, lp_w) = match mode {
            Mode::Attriclip => (cfg.lambda_k, cfg.lambda_p),
            _ => (0.0, 0.0),
        };
        let total = total_loss(&mut tape, l_m, l_k, l_p, lk_w, lp_w)?;
        let breakdown = LossBreakdown {
            l_m: tape.value(l_m).item(),
            l_k: tape.value(l_k).item(),
            l_p: tape.value(l_p).item(),
            total: tape.value(total).item(),
            lambda_k: lk_w,
            lambda_p: lp_w,
            tau: cfg.tau,
        };
        Ok(ForwardGraph {
            tape,
            l_m,
            l_k,
            l_p,
            total,
            bank_vars,
            shared_prompt: shared,
            selections,
            breakdown,
        })
    }

    /// Losses and gradients of the total objective, without stepping.
    pub fn loss_and_grads(&self, batch: &[&ImageSample]) -> Result<(LossBreakdown, ParamGrads), TrainError> {
        let g = self.forward(batch)?;
        let grads = g.grads_of(g.total)?;
        Ok((g.breakdown, grads))
    }

    /// One forward, one sparse SGD step at `lr`; returns pre-step losses.
    pub fn train_step(&mut self, batch: &[&ImageSample], lr: f64) -> Result<LossBreakdown, TrainError> {
        if self.state.mode == Mode::ZeroShot {
            let g = self.forward(batch)?;
            return Ok(g.breakdown);
        }
        let (loss, grads) = self.loss_and_grads(batch)?;
        let step = self.state.step_counter;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                what: "loss".into(),
                dump: format!("  {loss:?}"),
            });
        }
        if !grads.is_finite() {
            let mut dump = vec![];
            for (i, g) in grads.keys.iter().enumerate() {
                if let Some(g) = g.as_ref().filter(|g| g.iter().any(|v| !v.is_finite())) {
                    dump.push(format_dump(&format!("grad key {i}"), g));
                }
            }
            for (i, g) in grads.prompts.iter().enumerate() {
                if let Some(g) = g.as_ref().filter(|g| g.iter().any(|v| !v.is_finite())) {
                    dump.push(format_dump(&format!("grad prompt {i}"), g));
                }
            }
            if let Some(g) = &grads.shared {
                dump.push(format_dump("grad shared prompt", g));
            }
            return Err(TrainError::NonFinite {
                step,
                what: "gradient".into(),
                dump: dump.join("\n"),
            });
        }
        self.apply_sgd(&grads, lr)?;
        self.state.step_counter += 1;
        Ok(loss)
    }

    /// Alias of [`train_step`](Self::train_step) restricted to the
    /// shared-prompt baseline.
    pub fn shared_prompt_baseline_step(
        &mut self,
        batch: &[&ImageSample],
        lr: f64,
    ) -> Result<LossBreakdown, TrainError> {
        if self.state.mode != Mode::SharedPrompt {
            return Err(TrainError::WrongMode {
                expected: Mode::SharedPrompt,
                actual: self.state.mode,
            });
        }
        self.train_step(batch, lr)
    }

    fn apply_sgd(&mut self, grads: &ParamGrads, lr: f64) -> Result<(), TrainError> {
        let wd = self.config.weight_decay;
        let update = |param: &mut [f64], g: &[f64]| {
            if g.iter().all(|v| *v == 0.0) {
                return;
            }
            for (p, gi) in param.iter_mut().zip(g) {
                *p -= lr * (gi + wd * *p);
            }
        };
        if let Some(bank) = self.state.bank.as_mut() {
            for (i, g) in grads.keys.iter().enumerate() {
                if let Some(g) = g {
                    update(bank.key_mut(i), g);
                }
            }
            for (i, g) in grads.prompts.iter().enumerate() {
                if let Some(g) = g {
                    update(bank.prompt_mut(i), g);
                }
            }
            bank.check_key_norms()?;
        }
        if let (Some(p), Some(g)) = (self.state.shared_prompt.as_mut(), &grads.shared) {
            update(p, g);
        }
        Ok(())
    }

    /// Train on task `t` of `source` for `epochs_per_task` epochs.
    ///
    /// Validation happens before any state change: an empty training set,
    /// a class already registered, a missing class token or a sample whose
    /// label is outside the task all leave the learner untouched.
    pub fn train_task(&mut self, source: &dyn TaskSource, t: usize) -> Result<TaskReport, TrainError> {
        let data = source.train_set(t);
        let classes = source.task_classes(t).to_vec();
        if data.is_empty() {
            return Err(TrainError::EmptyTask(t));
        }
        for c in &classes {
            if self.state.class_tokens.contains_key(c) {
                return Err(TrainError::OverlappingClasses(*c));
            }
            let tok = source.class_token(*c).ok_or(TrainError::MissingClassToken(*c))?;
            if tok.dim() != self.encoders.dim() {
                return Err(EncoderError::DimensionMismatch {
                    expected: self.encoders.dim(),
                    got: tok.dim(),
                }
                .into());
            }
        }
        for i in 0..data.len() {
            let label = data.get(i).label;
            if !classes.contains(&label) {
                return Err(TrainError::ForeignLabel { task: t, label });
            }
        }
        for c in &classes {
            let tok = source.class_token(*c).expect("checked").clone();
            self.register_class(*c, tok)?;
        }

        let cfg = self.config.clone();
        let n = data.len();
        let steps = cfg.steps_for(n);
        let (per_task, sched_total) = match (cfg.schedule, self.sequence_steps) {
            (ScheduleScope::Sequence, Some(total)) => (false, total),
            _ => (true, steps),
        };
        let mut report = TaskReport {
            task: t,
            task_name: source.task_name(t),
            mode: self.state.mode,
            classes: classes.clone(),
            train_samples: n,
            steps: 0,
            epoch_losses: vec![],
            lr_trace: vec![],
            selection_histogram: vec![0; self.state.bank.as_ref().map_or(0, |b| b.n())],
        };
        if self.state.mode != Mode::ZeroShot {
            let mut local = 0u64;
            for epoch in 0..cfg.epochs_per_task {
                let mut order: Vec<usize> = (0..n).collect();
                let idx = ((self.state.tasks_completed as u64) << 32) | epoch as u64;
                SplitMix64::derive_indexed(cfg.seed, "shuffle", idx).shuffle(&mut order);
                let mut sums = [0.0f64; 4];
                let mut batches = 0usize;
                for chunk in order.chunks(cfg.batch_size) {
                    let batch: Vec<&ImageSample> = chunk.iter().map(|&i| data.get(i)).collect();
                    let sched_step = if per_task { local } else { self.state.step_counter };
                    let lr = lr_at(sched_step, sched_total, cfg.lr0);
                    if let Some(bank) = &self.state.bank {
                        for s in &batch {
                            let z = self.encoders.encode_image(s)?;
                            for i in select_top_c(&z, bank, cfg.c)?.indices {
                                report.selection_histogram[i] += 1;
                            }
                        }
                    }
                    let loss = self.train_step(&batch, lr)?;
                    report.lr_trace.push(lr);
                    sums[0] += loss.l_m;
                    sums[1] += loss.l_k;
                    sums[2] += loss.l_p;
                    sums[3] += loss.total;
                    batches += 1;
                    local += 1;
                }
                let b = batches as f64;
                report.epoch_losses.push(LossBreakdown {
                    l_m: sums[0] / b,
                    l_k: sums[1] / b,
                    l_p: sums[2] / b,
                    total: sums[3] / b,
                    lambda_k: if self.state.mode == Mode::Attriclip { cfg.lambda_k } else { 0.0 },
                    lambda_p: if self.state.mode == Mode::Attriclip { cfg.lambda_p } else { 0.0 },
                    tau: cfg.tau,
                });
            }
            report.steps = local;
        }
        self.state.tasks_completed += 1;
        Ok(report)
    }

    /// Train every task in order, evaluating on all seen tasks after each.
    pub fn run_sequence(
        &mut self,
        source: &dyn TaskSource,
        hook: &mut SequenceHook<'_>,
    ) -> Result<AccuracyMatrix, SequenceError> {
        let labels = (0..source.num_tasks()).map(|t| source.task_name(t)).collect();
        self.resume_sequence(source, AccuracyMatrix::new(labels), hook)
    }

    /// Continue a sequence from `self.state.tasks_completed`, appending rows
    /// to `partial`.
    pub fn resume_sequence(
        &mut self,
        source: &dyn TaskSource,
        partial: AccuracyMatrix,
        hook: &mut SequenceHook<'_>,
    ) -> Result<AccuracyMatrix, SequenceError> {
        let mut matrix = partial;
        let start = self.state.tasks_completed;
        if source.num_tasks() == 0 {
            return Err(SequenceError {
                partial: matrix,
                source: TrainError::Config("task stream is empty".into()),
            });
        }
        if matrix.rows() != start {
            let msg = format!(
                "accuracy matrix has {} rows but {start} tasks are complete",
                matrix.rows()
            );
            return Err(SequenceError {
                partial: matrix,
                source: TrainError::Config(msg),
            });
        }
        self.plan_schedule(source, 0);
        for t in start..source.num_tasks() {
            let result = self.train_task(source, t).and_then(|report| {
                let candidates = self.state.class_order.clone();
                let row = (0..=t)
                    .map(|s| evaluate(self, source.test_set(s), &candidates))
                    .collect::<Result<Vec<_>, _>>()?;
                matrix.push_row(row)?;
                hook(self, &report, &matrix).map_err(TrainError::Hook)
            });
            if let Err(source) = result {
                return Err(SequenceError {
                    partial: matrix,
                    source,
                });
            }
        }
        Ok(matrix)
    }

    /// Size a sequence-wide schedule: `before` steps already taken plus
    /// every task of `source`. A no-op for the per-task schedule.
    pub fn plan_schedule(&mut self, source: &dyn TaskSource, before: u64) {
        self.sequence_steps = match self.config.schedule {
            ScheduleScope::Sequence => Some(
                before
                    + (0..source.num_tasks())
                        .map(|t| self.config.steps_for(source.train_set(t).len()))
                        .sum::<u64>(),
            ),
            ScheduleScope::PerTask => None,
        };
    }

    /// Mean pairwise |cos| between the standalone text embeddings of the
    /// bank's prompts.
    pub fn prompt_coherence(&self) -> Result<Option<f64>, TrainError> {
        let Some(bank) = &self.state.bank else {
            return Ok(None);
        };
        let n = bank.n();
        if n < 2 {
            return Ok(Some(0.0));
        }
        let embeds = (0..n)
            .map(|i| {
                let seq = TokenSequence::from_tensor(bank.prompt_tensor(i))?;
                self.encoders.encode_text(&seq)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut acc = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                acc += crate::autodiff::cosine_similarity(&embeds[i], &embeds[j]).abs();
            }
        }
        Ok(Some(acc / (n * (n - 1) / 2) as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec, TaskStream};
    use crate::encoders::{EncoderSpec, ImageBackendSpec};

    fn tiny_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            num_latent_attributes: 6,
            attributes_per_class: 2,
            num_tasks: 2,
            classes_per_task: 2,
            samples_per_class: 5,
            test_samples_per_class: 3,
            feature_dim: 8,
            token_dim: 8,
            noise_sigma: 0.05,
            seed,
        }
    }

    fn encoders(d: usize) -> Arc<FrozenEncoders> {
        Arc::new(
            FrozenEncoders::from_spec(&EncoderSpec {
                seed: 7,
                dim: d,
                max_len: 32,
                image: ImageBackendSpec::Precomputed,
            })
            .unwrap(),
        )
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs_per_task: 2,
            batch_size: 4,
            lr0: 0.05,
            n: 4,
            m: 2,
            c: 2,
            tau: 0.1,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn stream() -> TaskStream {
        generate_synthetic(&tiny_spec(1)).unwrap()
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs_per_task, c.batch_size, c.c, c.n, c.m), (10, 32, 3, 10, 12));
        assert_eq!((c.lr0, c.weight_decay, c.lambda_k, c.lambda_p, c.tau), (0.001, 0.0, 0.7, 0.3, 0.01));
        assert_eq!(c.distance, DistanceVariant::Cosine);
        assert_eq!(c.schedule, ScheduleScope::PerTask);
    }

    #[test]
    fn lr_schedule_points() {
        assert_eq!(lr_at(0, 40, 0.001), 0.001);
        assert!(lr_at(40, 40, 0.001).abs() < 1e-18);
        assert!((lr_at(20, 40, 0.001) - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn step_count() {
        assert_eq!(TrainConfig::default().steps_for(100), 40);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.c = 11;
        assert!(c.validate().is_err());
        c = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        c = TrainConfig {
            c: 10,
            distance: DistanceVariant::Triplet { margin: 0.2 },
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn mode_parsing() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("coop".parse::<Mode>().is_err());
    }

    #[test]
    fn empty_task_leaves_state_untouched() {
        let mut s = stream();
        s.tasks[0].train.clear();
        let mut l = Learner::new(encoders(8), small_config(), Mode::Attriclip).unwrap();
        let before = l.state.clone();
        assert!(matches!(l.train_task(&s, 0), Err(TrainError::EmptyTask(0))));
        assert_eq!(l.state, before);
    }

    #[test]
    fn overlapping_classes_rejected() {
        let s = stream();
        let mut l = Learner::new(encoders(8), small_config(), Mode::Attriclip).unwrap();
        l.train_task(&s, 0).unwrap();
        let before = l.state.clone();
        assert!(matches!(l.train_task(&s, 0), Err(TrainError::OverlappingClasses(_))));
        assert_eq!(l.state, before);
    }

    #[test]
    fn steps_per_task_and_lr_trace() {
        let s = stream();
        let mut l = Learner::new(encoders(8), small_config(), Mode::Attriclip).unwrap();
        let r = l.train_task(&s, 0).unwrap();
        assert_eq!(r.steps, 2 * 10usize.div_ceil(4) as u64);
        assert_eq!(r.lr_trace.len() as u64, r.steps);
        assert_eq!(r.lr_trace[0], 0.05);
        assert_eq!(l.state.step_counter, r.steps);
        let total: u64 = r.selection_histogram.iter().sum();
        assert_eq!(total, 2 * 10 * 2);
    }

    #[test]
    fn identical_seeds_give_identical_banks() {
        let s = stream();
        let run = || {
            let mut l = Learner::new(encoders(8), small_config(), Mode::Attriclip).unwrap();
            l.train_task(&s, 0).unwrap();
            l.train_task(&s, 1).unwrap();
            l.state.bank.unwrap().fingerprint()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_shot_moves_nothing() {
        let s = stream();
        let mut l = Learner::new(encoders(8), small_config(), Mode::ZeroShot).unwrap();
        assert_eq!(l.state.num_trainable(), 0);
        let r = l.train_task(&s, 0).unwrap();
        assert_eq!(r.steps, 0);
        assert_eq!(l.state.step_counter, 0);
        assert_eq!(l.classes().len(), 2);
    }

    #[test]
    fn single_class_shared_prompt_has_zero_loss_and_step() {
        let s = stream();
        let mut l = Learner::new(encoders(8), small_config(), Mode::SharedPrompt).unwrap();
        let c = s.tasks[0].classes[0];
        l.register_class(c, s.class_tokens[&c].clone()).unwrap();
        let batch: Vec<&ImageSample> = s.tasks[0].train.iter().filter(|x| x.label == c).collect();
        let before = l.state.shared_prompt.clone();
        let loss = l.shared_prompt_baseline_step(&batch, 0.1).unwrap();
        assert_eq!(loss.total, 0.0);
        assert_eq!(l.state.shared_prompt, before);
    }

    #[test]
    fn shared_prompt_step_rejects_other_modes() {
        let mut l = Learner::new(encoders(8), small_config(), Mode::Attriclip).unwrap();
        assert!(matches!(
            l.shared_prompt_baseline_step(&[], 0.1),
            Err(TrainError::WrongMode { .. })
        ));
    }

    #[test]
    fn run_sequence_fills_lower_triangle() {
        let s = stream();
        let mut l = Learner::new(encoders(8), small_config(), Mode::Attriclip).unwrap();
        let mut calls = 0;
        let m = l
            .run_sequence(&s, &mut |_, _, _| {
                calls += 1;
                Ok(())
            })
            .unwrap();
        assert_eq!(calls, 2);
        assert_eq!(m.rows(), 2);
        assert_eq!(m.a[0].len(), 1);
        assert_eq!(m.a[1].len(), 2);
    }

    #[test]
    fn failed_hook_keeps_partial_matrix() {
        let s = stream();
        let mut l = Learner::new(encoders(8), small_config(), Mode::ZeroShot).unwrap();
        let err = l
            .run_sequence(&s, &mut |_, r, _| if r.task == 1 { Err("disk full".into()) } else { Ok(()) })
            .unwrap_err();
        assert_eq!(err.partial.rows(), 2);
        assert!(matches!(err.source, TrainError::Hook(_)));
    }

    #[test]
    fn non_finite_sample_reports_numeric_failure() {
        let s = stream();
        let mut l = Learner::new(encoders(8), small_config(), Mode::Attriclip).unwrap();
        let c = s.tasks[0].classes[0];
        l.register_class(c, s.class_tokens[&c].clone()).unwrap();
        let mut bad = s.tasks[0].train[0].clone();
        bad.features[0] = f64::NAN;
        let err = l.train_step(&[&bad], 0.1).unwrap_err();
        assert!(err.is_numeric(), "{err}");
    }
}
