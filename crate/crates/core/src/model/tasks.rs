//! Synthetic tasks with known ground-truth evidence.
//!
//! Datasets are regenerated from `(task, seed)`; nothing is shipped on disk.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelInput};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Decoder: a key marker is followed by a value token; the answer is the value's paired token.
    PlantedAnswer,
    /// Encoder classifier: the label is the strict-majority symbol.
    MajorityClass,
    /// ViT: the label is the quadrant holding a bright square.
    PatchShape,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "planted_answer" => Ok(TaskKind::PlantedAnswer),
            "majority_class" => Ok(TaskKind::MajorityClass),
            "patch_shape" => Ok(TaskKind::PatchShape),
            other => Err(Error::InvalidArgument(format!("unknown task {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::PlantedAnswer => "planted_answer",
            TaskKind::MajorityClass => "majority_class",
            TaskKind::PatchShape => "patch_shape",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub kind: TaskKind,
    /// Sequence length for token tasks.
    pub seq_len: usize,
    /// Planted answer: number of value (and answer) tokens. Majority class: number of symbols.
    pub n_symbols: usize,
    /// Planted answer: number of filler tokens.
    pub n_fillers: usize,
    /// Planted answer: value tokens placed away from the key.
    pub distractors: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub square: usize,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub input: ModelInput,
    pub label: usize,
    /// Ground-truth evidence, one flag per position or patch.
    pub mask: Vec<bool>,
}

impl Sample {
    pub fn tokens(&self) -> Option<&[usize]> {
        self.input.tokens()
    }
}

const TEST_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

impl Task {
    pub fn planted_answer() -> Self {
        Self {
            kind: TaskKind::PlantedAnswer,
            seq_len: 10,
            n_symbols: 8,
            n_fillers: 8,
            distractors: 1,
            image_size: 0,
            patch_size: 0,
            square: 0,
            noise: 0.0,
        }
    }

    pub fn majority_class() -> Self {
        Self {
            kind: TaskKind::MajorityClass,
            seq_len: 9,
            n_symbols: 3,
            n_fillers: 0,
            distractors: 0,
            ..Self::planted_answer()
        }
    }

    pub fn patch_shape() -> Self {
        Self {
            kind: TaskKind::PatchShape,
            seq_len: 0,
            n_symbols: 4,
            n_fillers: 0,
            distractors: 0,
            image_size: 16,
            patch_size: 4,
            square: 4,
            noise: 0.1,
        }
    }

    pub fn from_kind(kind: TaskKind) -> Self {
        match kind {
            TaskKind::PlantedAnswer => Self::planted_answer(),
            TaskKind::MajorityClass => Self::majority_class(),
            TaskKind::PatchShape => Self::patch_shape(),
        }
    }

    pub fn key_token(&self) -> usize {
        2 * self.n_symbols
    }

    pub fn query_token(&self) -> usize {
        2 * self.n_symbols + 1
    }

    /// Answer token paired with value token `v`.
    pub fn answer_for(&self, value: usize) -> usize {
        self.n_symbols + (3 * value + 1) % self.n_symbols
    }

    pub fn is_value(&self, token: usize) -> bool {
        token < self.n_symbols
    }

    pub fn vocab_size(&self) -> usize {
        match self.kind {
            TaskKind::PlantedAnswer => 2 * self.n_symbols + 2 + self.n_fillers,
            TaskKind::MajorityClass => self.n_symbols,
            TaskKind::PatchShape => 0,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self.kind {
            TaskKind::PlantedAnswer => self.vocab_size(),
            TaskKind::MajorityClass => self.n_symbols,
            TaskKind::PatchShape => 4,
        }
    }

    /// Shipped default model size for this task.
    pub fn default_model(&self) -> ModelConfig {
        match self.kind {
            TaskKind::PlantedAnswer => ModelConfig::decoder(self.vocab_size(), self.seq_len),
            TaskKind::MajorityClass => ModelConfig::encoder_classifier(self.vocab_size(), self.seq_len, self.n_symbols),
            TaskKind::PatchShape => ModelConfig::vit(self.image_size, self.patch_size, 4),
        }
    }

    pub fn token_name(&self, t: usize) -> String {
        match self.kind {
            TaskKind::PlantedAnswer => {
                let n = self.n_symbols;
                if t < n {
                    format!("v{t}")
                } else if t < 2 * n {
                    format!("a{}", t - n)
                } else if t == self.key_token() {
                    "KEY".into()
                } else if t == self.query_token() {
                    "QUERY".into()
                } else {
                    format!("f{}", t - 2 * n - 2)
                }
            }
            _ => format!("s{t}"),
        }
    }

    /// Parses whitespace-separated token names or raw ids.
    pub fn parse_tokens(&self, text: &str) -> Result<Vec<usize>> {
        let vocab = self.vocab_size();
        text.split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|word| {
                if let Ok(id) = word.parse::<usize>() {
                    return Ok(id);
                }
                (0..vocab)
                    .find(|&t| self.token_name(t) == word)
                    .ok_or_else(|| Error::Input(format!("unknown token {word:?}")))
            })
            .collect()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng, id: usize) -> Sample {
        match self.kind {
            TaskKind::PlantedAnswer => self.planted(rng, id),
            TaskKind::MajorityClass => self.majority(rng, id),
            TaskKind::PatchShape => self.patch(rng, id),
        }
    }

    fn planted(&self, rng: &mut ChaCha8Rng, id: usize) -> Sample {
        let s = self.seq_len;
        let n = self.n_symbols;
        let filler0 = 2 * n + 2;
        let mut tokens: Vec<usize> = (0..s).map(|_| filler0 + rng.random_range(0..self.n_fillers)).collect();
        tokens[s - 1] = self.query_token();
        let key = rng.random_range(0..s - 2);
        let value = rng.random_range(0..n);
        tokens[key] = self.key_token();
        tokens[key + 1] = value;
        let mut free: Vec<usize> = (0..s - 1).filter(|&p| p != key && p != key + 1 && p != key + 2).collect();
        free.shuffle(rng);
        for &p in free.iter().take(self.distractors) {
            tokens[p] = loop {
                let v = rng.random_range(0..n);
                if v != value {
                    break v;
                }
            };
        }
        let mut mask = vec![false; s];
        mask[key + 1] = true;
        Sample {
            id,
            input: ModelInput::Tokens(tokens),
            label: self.answer_for(value),
            mask,
        }
    }

    fn majority(&self, rng: &mut ChaCha8Rng, id: usize) -> Sample {
        let c = self.n_symbols;
        loop {
            let label = rng.random_range(0..c);
            let tokens: Vec<usize> = (0..self.seq_len)
                .map(|_| if rng.random_bool(0.5) { label } else { rng.random_range(0..c) })
                .collect();
            let count = |s: usize| tokens.iter().filter(|&&t| t == s).count();
            if (0..c).all(|s| s == label || count(s) < count(label)) {
                let mask = tokens.iter().map(|&t| t == label).collect();
                return Sample {
                    id,
                    input: ModelInput::Tokens(tokens),
                    label,
                    mask,
                };
            }
        }
    }

    fn patch(&self, rng: &mut ChaCha8Rng, id: usize) -> Sample {
        let n = self.image_size;
        let half = n / 2;
        let noise = Normal::new(0.0, self.noise).expect("finite noise");
        let mut img = Tensor::new(vec![n, n], (0..n * n).map(|_| noise.sample(rng)).collect()).expect("shape");
        let quadrant = rng.random_range(0..4);
        let top = (quadrant / 2) * half + rng.random_range(0..=half - self.square);
        let left = (quadrant % 2) * half + rng.random_range(0..=half - self.square);
        for r in top..top + self.square {
            for c in left..left + self.square {
                img.set(&[r, c], 1.0 + noise.sample(rng));
            }
        }
        let per_row = n / self.patch_size;
        let p = self.patch_size;
        let mask = (0..per_row * per_row)
            .map(|k| {
                let (pr, pc) = (k / per_row * p, k % per_row * p);
                pr < top + self.square && top < pr + p && pc < left + self.square && left < pc + p
            })
            .collect();
        Sample {
            id,
            input: ModelInput::Image(img),
            label: quadrant,
            mask,
        }
    }

    pub fn dataset(&self, seed: u64, n: usize) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|i| self.sample(&mut rng, i)).collect()
    }

    /// Held-out split, disjoint stream from the training data of the same seed.
    pub fn test_set(&self, seed: u64, n: usize) -> Vec<Sample> {
        self.dataset(seed ^ TEST_STREAM, n)
    }
}
