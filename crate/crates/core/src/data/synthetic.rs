//! Attribute-structured synthetic streams.
//!
//! A pool of latent attributes is drawn twice: once as unit directions in
//! feature space and once as unit directions in token space. Each class owns a
//! random subset of attributes; its feature mean and its class token are the
//! normalised sums of its attributes' directions in the respective spaces, so
//! classes that share attributes overlap in both.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{DataError, Task, TaskStream};
use crate::autodiff::cosine_similarity;
use crate::encoders::{ClassId, ImageSample, TokenSequence};
use crate::rng::SplitMix64;

/// Rejection threshold on pairwise cosine between attribute directions.
const MAX_ATTRIBUTE_COSINE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_latent_attributes: usize,
    pub attributes_per_class: usize,
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    #[serde(default = "default_test_samples")]
    pub test_samples_per_class: usize,
    pub feature_dim: usize,
    /// Width of class tokens; must equal the text encoder dimension.
    pub token_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

fn default_test_samples() -> usize {
    20
}

impl SyntheticSpec {
    /// 5 tasks × 4 classes, 12 latent attributes, 3 per class, width 32.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            num_latent_attributes: 12,
            attributes_per_class: 3,
            num_tasks: 5,
            classes_per_task: 4,
            samples_per_class: 50,
            test_samples_per_class: 20,
            feature_dim: 32,
            token_dim: 32,
            noise_sigma: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.num_latent_attributes == 0 || self.attributes_per_class == 0 {
            return bad("attribute counts must be positive");
        }
        if self.attributes_per_class > self.num_latent_attributes {
            return bad("attributes_per_class exceeds num_latent_attributes");
        }
        if self.num_tasks == 0 || self.classes_per_task == 0 || self.samples_per_class == 0 {
            return bad("num_tasks, classes_per_task and samples_per_class must be positive");
        }
        if self.feature_dim == 0 || self.token_dim == 0 {
            return bad("feature_dim and token_dim must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        if self.num_classes() > subset_count(self.num_latent_attributes, self.attributes_per_class) {
            return bad("more classes than distinct attribute subsets");
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_tasks * self.classes_per_task
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// `count` unit vectors with pairwise cosine below the threshold; at most
/// `10 · count` candidate draws.
fn draw_directions(rng: &mut SplitMix64, count: usize, dim: usize) -> Result<Vec<Vec<f64>>, DataError> {
    let budget = 10 * count;
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut draws = 0;
    while accepted.len() < count {
        if draws == budget {
            return Err(DataError::RejectionExhausted {
                wanted: count,
                draws,
            });
        }
        draws += 1;
        let cand = unit(rng.normal_vec(dim, 1.0));
        if accepted
            .iter()
            .all(|a| cosine_similarity(a, &cand) < MAX_ATTRIBUTE_COSINE)
        {
            accepted.push(cand);
        }
    }
    Ok(accepted)
}

struct AttributePool {
    features: Vec<Vec<f64>>,
    tokens: Vec<Vec<f64>>,
}

impl AttributePool {
    fn draw(seed: u64, count: usize, feature_dim: usize, token_dim: usize) -> Result<Self, DataError> {
        let mut frng = SplitMix64::derive(seed, "synthetic.attributes.features");
        let mut trng = SplitMix64::derive(seed, "synthetic.attributes.tokens");
        Ok(Self {
            features: draw_directions(&mut frng, count, feature_dim)?,
            tokens: draw_directions(&mut trng, count, token_dim)?,
        })
    }
}

/// `n choose k`, saturating.
fn subset_count(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > usize::MAX as u128 {
            return usize::MAX;
        }
    }
    acc as usize
}

/// Redraws per class before giving up on finding an unused subset.
const SUBSET_DRAWS_PER_CLASS: usize = 1000;

/// Normalised sum of the chosen directions.
pub(crate) fn class_mean(directions: &[Vec<f64>], subset: &[usize]) -> Vec<f64> {
    let dim = directions[0].len();
    let mut acc = vec![0.0; dim];
    for &a in subset {
        for (x, y) in acc.iter_mut().zip(&directions[a]) {
            *x += y;
        }
    }
    unit(acc)
}

fn build_stream(
    name: &str,
    spec: &SyntheticSpec,
    pool: &AttributePool,
    attribute_ids: &[usize],
    class_offset: u32,
    id_offset: u64,
    taken: &mut BTreeSet<Vec<usize>>,
) -> Result<TaskStream, DataError> {
    let mut subset_rng = SplitMix64::derive(spec.seed, "synthetic.class_subsets");
    let mut noise_rng = SplitMix64::derive(spec.seed, "synthetic.noise");
    let mut tasks = Vec::with_capacity(spec.num_tasks);
    let mut class_tokens = BTreeMap::new();
    let mut next_id = id_offset;
    for t in 0..spec.num_tasks {
        let mut task = Task {
            name: format!("task-{}", t + 1),
            classes: vec![],
            train: vec![],
            test: vec![],
        };
        for j in 0..spec.classes_per_task {
            let class = ClassId(class_offset + (t * spec.classes_per_task + j) as u32);
            // Distinct subsets keep every class mean distinct.
            let mut draws = 0;
            let subset = loop {
                if draws == SUBSET_DRAWS_PER_CLASS {
                    return Err(DataError::RejectionExhausted {
                        wanted: spec.num_classes(),
                        draws,
                    });
                }
                draws += 1;
                let mut subset: Vec<usize> = subset_rng
                    .sample_without_replacement(attribute_ids.len(), spec.attributes_per_class)
                    .into_iter()
                    .map(|i| attribute_ids[i])
                    .collect();
                subset.sort_unstable();
                if taken.insert(subset.clone()) {
                    break subset;
                }
            };
            let mean = class_mean(&pool.features, &subset);
            class_tokens.insert(
                class,
                TokenSequence::single(class_mean(&pool.tokens, &subset))?,
            );
            task.classes.push(class);
            for k in 0..spec.samples_per_class + spec.test_samples_per_class {
                let features: Vec<f64> = mean
                    .iter()
                    .map(|m| m + spec.noise_sigma * noise_rng.normal())
                    .collect();
                let sample = ImageSample {
                    id: next_id,
                    features,
                    label: class,
                    task_id: t as u32,
                };
                next_id += 1;
                if k < spec.samples_per_class {
                    task.train.push(sample);
                } else {
                    task.test.push(sample);
                }
            }
        }
        tasks.push(task);
    }
    let stream = TaskStream {
        name: name.to_string(),
        tasks,
        class_tokens,
    };
    stream.validate()?;
    Ok(stream)
}

/// Deterministic stream for `spec`; class ids run `0..num_classes`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<TaskStream, DataError> {
    spec.validate()?;
    let pool = AttributePool::draw(
        spec.seed,
        spec.num_latent_attributes,
        spec.feature_dim,
        spec.token_dim,
    )?;
    let ids: Vec<usize> = (0..spec.num_latent_attributes).collect();
    build_stream("synthetic", spec, &pool, &ids, 0, 0, &mut BTreeSet::new())
}

/// Two streams over one attribute pool that share `shared` attributes.
///
/// The pool is drawn from `a`'s seed. Stream A uses pool entries
/// `0..n_a`; stream B uses the last `shared` of those plus `n_b - shared`
/// fresh ones. B's class ids start after A's, and no class of B reuses an
/// attribute subset of A.
pub fn generate_synthetic_pair(
    a: &SyntheticSpec,
    b: &SyntheticSpec,
    shared: usize,
) -> Result<(TaskStream, TaskStream), DataError> {
    a.validate()?;
    b.validate()?;
    if a.feature_dim != b.feature_dim || a.token_dim != b.token_dim {
        return Err(DataError::InvalidSpec(
            "paired streams need equal feature_dim and token_dim".into(),
        ));
    }
    if shared > a.num_latent_attributes || shared > b.num_latent_attributes {
        return Err(DataError::InvalidSpec(
            "shared attributes exceed a stream's attribute count".into(),
        ));
    }
    let n_a = a.num_latent_attributes;
    let total = n_a + b.num_latent_attributes - shared;
    let pool = AttributePool::draw(a.seed, total, a.feature_dim, a.token_dim)?;
    let ids_a: Vec<usize> = (0..n_a).collect();
    let ids_b: Vec<usize> = (n_a - shared..total).collect();
    let mut taken = BTreeSet::new();
    let sa = build_stream("stream-a", a, &pool, &ids_a, 0, 0, &mut taken)?;
    let samples_a = (a.num_classes() * (a.samples_per_class + a.test_samples_per_class)) as u64;
    let sb = build_stream(
        "stream-b",
        b,
        &pool,
        &ids_b,
        a.num_classes() as u32,
        samples_a,
        &mut taken,
    )?;
    Ok((sa, sb))
}
