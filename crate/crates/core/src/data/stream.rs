use std::collections::{BTreeMap, BTreeSet};

use super::DataError;
use crate::encoders::{ClassId, ImageSample, TokenSequence};

/// Indexed access to training samples.
pub trait Dataset {
    fn len(&self) -> usize;
    fn get(&self, i: usize) -> &ImageSample;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Dataset for [ImageSample] {
    fn len(&self) -> usize {
        <[ImageSample]>::len(self)
    }

    fn get(&self, i: usize) -> &ImageSample {
        &self[i]
    }
}

impl Dataset for Vec<ImageSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, i: usize) -> &ImageSample {
        &self[i]
    }
}

/// Ordered tasks as seen by the trainer and evaluator.
pub trait TaskSource {
    fn num_tasks(&self) -> usize;
    fn task_name(&self, t: usize) -> String;
    fn task_classes(&self, t: usize) -> &[ClassId];
    fn train_set(&self, t: usize) -> &dyn Dataset;
    fn test_set(&self, t: usize) -> &[ImageSample];
    fn class_token(&self, class: ClassId) -> Option<&TokenSequence>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub name: String,
    pub classes: Vec<ClassId>,
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

/// `T` labelled datasets with disjoint class sets, plus one class-token
/// sequence per class.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub name: String,
    pub tasks: Vec<Task>,
    pub class_tokens: BTreeMap<ClassId, TokenSequence>,
}

impl TaskStream {
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = BTreeSet::new();
        for (t, task) in self.tasks.iter().enumerate() {
            for c in &task.classes {
                if !seen.insert(*c) {
                    return Err(DataError::OverlappingClasses(*c));
                }
                if !self.class_tokens.contains_key(c) {
                    return Err(DataError::MissingClassToken(*c));
                }
            }
            for s in task.train.iter().chain(&task.test) {
                if !task.classes.contains(&s.label) {
                    return Err(DataError::ForeignLabel { task: t, label: s.label });
                }
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.tasks.iter().flat_map(|t| t.classes.iter().copied()).collect()
    }

    pub fn test_samples(&self) -> Vec<ImageSample> {
        self.tasks.iter().flat_map(|t| t.test.iter().cloned()).collect()
    }

    /// Copy with every class id shifted by `offset` and sample ids by
    /// `id_offset`, so two copies of the same data have disjoint label
    /// spaces.
    pub fn relabeled(&self, name: &str, offset: u32, id_offset: u64) -> Self {
        let shift = |s: &ImageSample| ImageSample {
            id: s.id + id_offset,
            label: ClassId(s.label.0 + offset),
            ..s.clone()
        };
        Self {
            name: name.to_string(),
            tasks: self
                .tasks
                .iter()
                .map(|t| Task {
                    name: t.name.clone(),
                    classes: t.classes.iter().map(|c| ClassId(c.0 + offset)).collect(),
                    train: t.train.iter().map(shift).collect(),
                    test: t.test.iter().map(shift).collect(),
                })
                .collect(),
            class_tokens: self
                .class_tokens
                .iter()
                .map(|(c, tok)| (ClassId(c.0 + offset), tok.clone()))
                .collect(),
        }
    }

    /// Group flat samples into tasks by `task_id`, pairing train and test
    /// records. Task classes are the union of labels seen in either split.
    pub fn from_samples(
        name: &str,
        train: Vec<ImageSample>,
        test: Vec<ImageSample>,
        class_tokens: BTreeMap<ClassId, TokenSequence>,
    ) -> Result<Self, DataError> {
        fn place(by_task: &mut BTreeMap<u32, Task>, s: ImageSample, is_train: bool) {
            let t = by_task.entry(s.task_id).or_insert_with(|| Task {
                name: format!("task-{}", s.task_id + 1),
                classes: vec![],
                train: vec![],
                test: vec![],
            });
            if !t.classes.contains(&s.label) {
                t.classes.push(s.label);
            }
            if is_train {
                t.train.push(s);
            } else {
                t.test.push(s);
            }
        }
        let mut by_task: BTreeMap<u32, Task> = BTreeMap::new();
        for s in train {
            place(&mut by_task, s, true);
        }
        for s in test {
            place(&mut by_task, s, false);
        }
        let mut tasks: Vec<Task> = by_task.into_values().collect();
        for t in &mut tasks {
            t.classes.sort();
        }
        let stream = Self {
            name: name.to_string(),
            tasks,
            class_tokens,
        };
        stream.validate()?;
        Ok(stream)
    }
}

impl TaskSource for TaskStream {
    fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    fn task_name(&self, t: usize) -> String {
        self.tasks[t].name.clone()
    }

    fn task_classes(&self, t: usize) -> &[ClassId] {
        &self.tasks[t].classes
    }

    fn train_set(&self, t: usize) -> &dyn Dataset {
        &self.tasks[t].train
    }

    fn test_set(&self, t: usize) -> &[ImageSample] {
        &self.tasks[t].test
    }

    fn class_token(&self, class: ClassId) -> Option<&TokenSequence> {
        self.class_tokens.get(&class)
    }
}
