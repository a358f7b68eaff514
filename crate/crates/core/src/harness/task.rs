use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Separator token between content and target.
pub const SEP: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
}

impl TaskKind {
    pub fn target(&self, content: &[usize]) -> Vec<usize> {
        match self {
            TaskKind::Copy => content.to_vec(),
            TaskKind::Reverse => content.iter().rev().copied().collect(),
            TaskKind::Sort => {
                let mut t = content.to_vec();
                t.sort_unstable();
                t
            }
        }
    }
}

/// Synthetic sequence task. Content symbols are `1..vocab`, `0` is [`SEP`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab: usize,
    pub content_len: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_valid: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.content_len < 1 {
            return Err(Error::config("content_len must be at least 1"));
        }
        if self.vocab < 3 {
            return Err(Error::config(
                "task vocab must hold the separator and at least two symbols",
            ));
        }
        if self.n_train == 0 || self.n_valid == 0 {
            return Err(Error::config("n_train and n_valid must be positive"));
        }
        let alphabet = (self.vocab - 1) as f64;
        let distinct = alphabet.powi(self.content_len.min(64) as i32);
        if ((self.n_train + self.n_valid) as f64) > distinct {
            return Err(Error::config(format!(
                "only {distinct} distinct contents exist; cannot draw {} disjoint examples",
                self.n_train + self.n_valid
            )));
        }
        Ok(())
    }

    /// Model input length: content, separator and all but the last target token.
    pub fn input_len(&self) -> usize {
        2 * self.content_len
    }
}

/// `[content][SEP][target]`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub content_len: usize,
}

impl Example {
    pub fn new(kind: TaskKind, content: Vec<usize>) -> Self {
        let target = kind.target(&content);
        let content_len = content.len();
        let mut tokens = content;
        tokens.push(SEP);
        tokens.extend(target);
        Self {
            tokens,
            content_len,
        }
    }

    pub fn content(&self) -> &[usize] {
        &self.tokens[..self.content_len]
    }

    pub fn target(&self) -> &[usize] {
        &self.tokens[self.content_len + 1..]
    }

    /// Teacher-forced model input.
    pub fn inputs(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }

    /// Next-token labels aligned with [`Self::inputs`]; only target positions are scored.
    pub fn labels(&self) -> Vec<Option<usize>> {
        (0..self.tokens.len() - 1)
            .map(|p| (p >= self.content_len).then(|| self.tokens[p + 1]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
}

/// Seeded train/valid split with no content shared between the two.
pub fn make_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut draw = |rng: &mut ChaCha8Rng| loop {
        let content: Vec<usize> = (0..spec.content_len)
            .map(|_| rng.gen_range(1..spec.vocab))
            .collect();
        if seen.insert(content.clone()) {
            return Example::new(spec.kind, content);
        }
    };
    let valid = (0..spec.n_valid).map(|_| draw(&mut rng)).collect();
    let train = (0..spec.n_train).map(|_| draw(&mut rng)).collect();
    Ok(Dataset { train, valid })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            vocab: 16,
            content_len: 3,
            seed: 4,
            n_train: 200,
            n_valid: 50,
        }
    }

    #[test]
    fn targets() {
        assert_eq!(TaskKind::Copy.target(&[3, 1, 2]), vec![3, 1, 2]);
        assert_eq!(TaskKind::Reverse.target(&[3, 1, 2]), vec![2, 1, 3]);
        assert_eq!(TaskKind::Sort.target(&[3, 1, 2]), vec![1, 2, 3]);
    }

    #[test]
    fn example_layout() {
        let e = Example::new(TaskKind::Reverse, vec![3, 1, 2]);
        assert_eq!(e.tokens, vec![3, 1, 2, SEP, 2, 1, 3]);
        assert_eq!(e.inputs(), &[3, 1, 2, SEP, 2, 1]);
        assert_eq!(
            e.labels(),
            vec![None, None, None, Some(2), Some(1), Some(3)]
        );
        assert_eq!(e.target(), &[2, 1, 3]);
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let d = make_task(&spec(TaskKind::Copy)).unwrap();
        assert_eq!(d.train.len(), 200);
        assert_eq!(d.valid.len(), 50);
        let valid: HashSet<_> = d.valid.iter().map(|e| e.content().to_vec()).collect();
        assert!(d.train.iter().all(|e| !valid.contains(e.content())));
        assert_eq!(d, make_task(&spec(TaskKind::Copy)).unwrap());
        assert!(d
            .train
            .iter()
            .flat_map(|e| e.content())
            .all(|&t| t != SEP && t < 16));
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec(TaskKind::Sort);
        s.content_len = 0;
        assert!(make_task(&s).is_err());
        let mut s = spec(TaskKind::Sort);
        s.vocab = 3;
        s.content_len = 2;
        // only 4 distinct contents
        assert!(make_task(&s).is_err());
    }
}
