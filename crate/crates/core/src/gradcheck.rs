//! End-to-end finite-difference check of the training objective.
//!
//! Builds a tiny learner with random embeddings and class tokens, then
//! compares the tape gradient of the total loss against central differences
//! for the bank keys, the bank prompts and the shared-prompt baseline.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::encoders::{ClassId, EncoderSpec, FrozenEncoders, ImageBackendSpec, ImageSample, TokenSequence};
use crate::rng::SplitMix64;
use crate::trainer::{Learner, Mode, ParamGrads, TrainConfig, TrainError};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-6;

/// Problem sizes; finite differences limit these to small values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradcheckSizes {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub k: usize,
    pub batch: usize,
}

impl Default for GradcheckSizes {
    fn default() -> Self {
        Self {
            n: 4,
            m: 3,
            d: 16,
            k: 3,
            batch: 2,
        }
    }
}

impl GradcheckSizes {
    pub const MAX_N: usize = 6;
    pub const MAX_M: usize = 4;
    pub const MAX_D: usize = 16;
    pub const MAX_K: usize = 4;

    pub fn validate(&self) -> Result<(), TrainError> {
        let limits = [
            ("n", self.n, 2, Self::MAX_N),
            ("m", self.m, 1, Self::MAX_M),
            ("d", self.d, 2, Self::MAX_D),
            ("k", self.k, 2, Self::MAX_K),
            ("batch", self.batch, 1, 64),
        ];
        for (name, v, lo, hi) in limits {
            if v < lo || v > hi {
                return Err(TrainError::Config(format!("{name} must lie in {lo}..={hi}, got {v}")));
            }
        }
        Ok(())
    }
}

/// Result for one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Human-readable location of the worst coordinate.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl GroupCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRADCHECK_TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub sizes: GradcheckSizes,
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(GroupCheck::passed)
    }
}

/// Deliberate damage to the analytic gradient, for negative controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Corruption {
    #[default]
    None,
    /// Adds 1 to the first coordinate of the first selected key's gradient.
    KeyGradient,
}

struct Fixture {
    samples: Vec<ImageSample>,
}

fn build_learner(seed: u64, sizes: &GradcheckSizes, mode: Mode) -> Result<(Learner, Fixture), TrainError> {
    let enc = FrozenEncoders::from_spec(&EncoderSpec {
        seed,
        dim: sizes.d,
        max_len: 128,
        image: ImageBackendSpec::Precomputed,
    })?;
    let config = TrainConfig {
        n: sizes.n,
        m: sizes.m,
        c: sizes.n.min(3).min(sizes.n - 1).max(1),
        seed,
        ..TrainConfig::default()
    };
    let mut learner = Learner::new(Arc::new(enc), config, mode)?;
    let mut rng = SplitMix64::derive(seed, "gradcheck.data");
    for k in 0..sizes.k {
        let tok = TokenSequence::single(rng.normal_vec(sizes.d, 1.0))?;
        learner.register_class(ClassId(k as u32), tok)?;
    }
    if let Some(bank) = learner.state.bank.as_mut() {
        // Larger prompts than the training init so every term is well away from zero.
        for i in 0..sizes.n {
            let p = rng.normal_vec(sizes.m * sizes.d, 0.5);
            bank.prompt_mut(i).copy_from_slice(&p);
        }
    }
    if let Some(p) = learner.state.shared_prompt.as_mut() {
        let fresh = rng.normal_vec(p.len(), 0.5);
        p.copy_from_slice(&fresh);
    }
    let samples = (0..sizes.batch)
        .map(|i| ImageSample {
            id: i as u64,
            features: rng.normal_vec(sizes.d, 1.0),
            label: ClassId(rng.below(sizes.k as u64) as u32),
            task_id: 0,
        })
        .collect();
    Ok((learner, Fixture { samples }))
}

fn total_at(learner: &Learner, batch: &[&ImageSample]) -> Result<f64, TrainError> {
    Ok(learner.forward(batch)?.breakdown.total)
}

#[derive(Clone, Copy)]
enum Param {
    Key(usize),
    Prompt(usize),
    Shared,
}

fn param_mut(learner: &mut Learner, p: Param) -> &mut [f64] {
    match p {
        Param::Key(i) => learner.state.bank.as_mut().expect("bank").key_mut(i),
        Param::Prompt(i) => learner.state.bank.as_mut().expect("bank").prompt_mut(i),
        Param::Shared => learner.state.shared_prompt.as_mut().expect("shared prompt"),
    }
}

fn check_group(
    learner: &mut Learner,
    batch: &[&ImageSample],
    group: &str,
    params: &[(Param, String, Vec<f64>)],
) -> Result<GroupCheck, TrainError> {
    let h = GRADCHECK_STEP;
    let mut out = GroupCheck {
        group: group.to_string(),
        coordinates: 0,
        max_rel_error: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
    };
    for (p, label, analytic) in params {
        for (j, a) in analytic.iter().enumerate() {
            let orig = param_mut(learner, *p)[j];
            param_mut(learner, *p)[j] = orig + h;
            let fp = total_at(learner, batch)?;
            param_mut(learner, *p)[j] = orig - h;
            let fm = total_at(learner, batch)?;
            param_mut(learner, *p)[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            out.coordinates += 1;
            if err > out.max_rel_error || out.worst.is_empty() {
                out.max_rel_error = err;
                out.worst = format!("{label}[{j}]");
                out.analytic = *a;
                out.numeric = numeric;
            }
        }
    }
    Ok(out)
}

/// Compare analytic and central-difference gradients of the total loss.
pub fn run_gradcheck(seed: u64, sizes: GradcheckSizes, corruption: Corruption) -> Result<GradcheckReport, TrainError> {
    sizes.validate()?;
    let mut groups = vec![];

    let (mut learner, fx) = build_learner(seed, &sizes, Mode::Attriclip)?;
    let batch: Vec<&ImageSample> = fx.samples.iter().collect();
    let (_, mut grads) = learner.loss_and_grads(&batch)?;
    if corruption == Corruption::KeyGradient {
        corrupt(&mut grads);
    }
    let d = sizes.d;
    let keys: Vec<_> = grads
        .dense_keys(d)
        .into_iter()
        .enumerate()
        .map(|(i, g)| (Param::Key(i), format!("key {i}"), g))
        .collect();
    groups.push(check_group(&mut learner, &batch, "keys", &keys)?);
    let prompts: Vec<_> = grads
        .dense_prompts(sizes.m * d)
        .into_iter()
        .enumerate()
        .map(|(i, g)| (Param::Prompt(i), format!("prompt {i}"), g))
        .collect();
    groups.push(check_group(&mut learner, &batch, "prompts", &prompts)?);

    let (mut shared, fx) = build_learner(seed, &sizes, Mode::SharedPrompt)?;
    let batch: Vec<&ImageSample> = fx.samples.iter().collect();
    let (_, grads) = shared.loss_and_grads(&batch)?;
    let g = grads.shared.unwrap_or_default();
    groups.push(check_group(
        &mut shared,
        &batch,
        "shared_prompt",
        &[(Param::Shared, "shared prompt".into(), g)],
    )?);

    Ok(GradcheckReport {
        seed,
        sizes,
        tolerance: GRADCHECK_TOLERANCE,
        groups,
    })
}

fn corrupt(grads: &mut ParamGrads) {
    if let Some(g) = grads.keys.iter_mut().flatten().next() {
        g[0] += 1.0;
    }
}
