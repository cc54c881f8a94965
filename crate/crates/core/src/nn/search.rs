//! Seeded random search over hyperparameter bounds.

use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{Architecture, ModelConfig};
use crate::encoding::EncodingKind;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    pub gru_hidden: RangeInclusive<usize>,
    pub layers: RangeInclusive<usize>,
    pub cnn_kernel: RangeInclusive<usize>,
    pub cnn_channels: RangeInclusive<usize>,
    pub dropout: RangeInclusive<f64>,
    /// Sampled log-uniformly.
    pub learning_rate: RangeInclusive<f64>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            gru_hidden: 20..=450,
            layers: 1..=8,
            cnn_kernel: 2..=9,
            cnn_channels: 10..=500,
            dropout: 0.0..=0.6,
            learning_rate: 1e-4..=1e-2,
        }
    }
}

impl SearchSpace {
    pub fn sample<R: Rng>(&self, arch: Architecture, encoding: EncodingKind, classes: usize, rng: &mut R) -> ModelConfig {
        let dropout = rng.random_range(self.dropout.clone());
        let (lo, hi) = (self.learning_rate.start().ln(), self.learning_rate.end().ln());
        let lr = rng.random_range(lo..=hi).exp().clamp(*self.learning_rate.start(), *self.learning_rate.end());
        let layers = rng.random_range(self.layers.clone());
        match arch {
            Architecture::Gru => {
                let hidden = rng.random_range(self.gru_hidden.clone());
                ModelConfig::gru(encoding, classes, hidden, layers, dropout, lr)
            }
            Architecture::Cnn => {
                let kernel = rng.random_range(self.cnn_kernel.clone());
                let channels = (0..layers).map(|_| rng.random_range(self.cnn_channels.clone())).collect();
                ModelConfig::cnn(encoding, classes, kernel, channels, dropout, lr)
            }
        }
    }

    pub fn contains(&self, c: &ModelConfig) -> bool {
        let common = self.dropout.contains(&c.dropout) && self.learning_rate.contains(&c.learning_rate);
        common
            && match c.architecture {
                Architecture::Gru => self.gru_hidden.contains(&c.hidden_size) && self.layers.contains(&c.num_layers),
                Architecture::Cnn => {
                    self.cnn_kernel.contains(&c.kernel_size)
                        && self.layers.contains(&c.channels.len())
                        && c.channels.iter().all(|ch| self.cnn_channels.contains(ch))
                }
            }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchRun {
    pub index: usize,
    pub config: ModelConfig,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub runs: Vec<SearchRun>,
    pub best: usize,
}

impl SearchOutcome {
    pub fn best_run(&self) -> &SearchRun {
        &self.runs[self.best]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("run,architecture,hidden_size,num_layers,kernel_size,channels,dropout,learning_rate,score\n");
        for r in &self.runs {
            let c = &r.config;
            let channels: Vec<String> = c.channels.iter().map(|v| v.to_string()).collect();
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.index,
                c.architecture,
                c.hidden_size,
                c.num_layers,
                c.kernel_size,
                channels.join("/"),
                c.dropout,
                c.learning_rate,
                r.score
            ));
        }
        s
    }
}

/// Index of the highest score; ties go to the earliest entry. NaN scores
/// never win.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            continue;
        }
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best.or(if scores.is_empty() { None } else { Some(0) })
}

/// Sample `budget` configurations and score each with `evaluate`
/// (validation minimum accuracy). `evaluate` receives the run index.
pub fn random_search<F>(
    space: &SearchSpace,
    arch: Architecture,
    encoding: EncodingKind,
    classes: usize,
    budget: usize,
    seed: u64,
    mut evaluate: F,
) -> Result<SearchOutcome>
where
    F: FnMut(&ModelConfig, usize) -> Result<f64>,
{
    if budget == 0 {
        return Err(Error::Parameter("search budget must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut runs = Vec::with_capacity(budget);
    for index in 0..budget {
        let config = space.sample(arch, encoding, classes, &mut rng);
        let score = evaluate(&config, index)?;
        log::info!("search run {index}: score {score:.4}");
        runs.push(SearchRun { index, config, score });
    }
    let scores: Vec<f64> = runs.iter().map(|r| r.score).collect();
    let best = select_best(&scores).expect("non-empty");
    Ok(SearchOutcome { runs, best })
}
