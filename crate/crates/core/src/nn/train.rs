//! Training loop with validation-based early stopping, and batched
//! window inference.

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::adam::Adam;
use super::checkpoint::{Checkpoint, TrainMeta};
use super::graph::softmax_row;
use super::model::{Model, ModelConfig};
use super::tensor::{Real, Tensor};
use crate::encoding::{FeatureFrame, FeatureSequence, FEATURES};
use crate::error::{Error, Result};
use crate::sampling::{fit_norm_stats_windowed, NormStats, Splits, WindowSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs_min: usize,
    pub max_epochs: usize,
    /// Epochs without improvement tolerated once `epochs_min` is reached.
    pub patience: usize,
    /// Smallest gain in validation minimum accuracy that counts as progress.
    pub min_delta: f64,
    pub batch_size: usize,
    /// Window length; `stride_frames` is ignored in favor of the fields below.
    pub window: WindowSpec,
    pub train_stride: usize,
    pub val_stride: usize,
    pub normalize: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_min: 30,
            max_epochs: 200,
            patience: 10,
            min_delta: 0.001,
            batch_size: 256,
            window: WindowSpec::default(),
            train_stride: 15,
            val_stride: 15,
            normalize: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        if self.batch_size == 0 || self.train_stride == 0 || self.val_stride == 0 {
            return Err(Error::Parameter("batch size and strides must be positive".into()));
        }
        if self.max_epochs < self.epochs_min.max(1) {
            return Err(Error::Parameter("max_epochs must be at least epochs_min".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Keeps the best validation score and decides when to stop.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    epochs_min: usize,
    max_epochs: usize,
    patience: usize,
    min_delta: f64,
    best: Option<(usize, f64)>,
    since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(epochs_min: usize, max_epochs: usize, patience: usize, min_delta: f64) -> Self {
        EarlyStopping { epochs_min, max_epochs, patience, min_delta, best: None, since_improvement: 0 }
    }

    /// Record the score of 1-based `epoch`.
    pub fn observe(&mut self, epoch: usize, score: f64) -> EpochDecision {
        let improved = match self.best {
            None => true,
            Some((_, best)) => score > best + self.min_delta,
        };
        if improved {
            self.best = Some((epoch, score));
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        let stop = epoch >= self.max_epochs
            || (epoch >= self.epochs_min && self.since_improvement >= self.patience);
        EpochDecision { improved, stop }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_min_accuracy: f64,
    pub val_macro_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Real> {
    pub checkpoint: Checkpoint<T>,
    pub history: Vec<EpochRecord>,
    pub train_windows: usize,
    pub val_windows: usize,
    /// Training sequences too short for a single window.
    pub short_sequences: Vec<String>,
}

/// Normalized sequences stored in the model's precision.
struct WindowBank<T> {
    seqs: Vec<Vec<T>>,
    /// `(sequence, start frame, label)`
    refs: Vec<(usize, usize, usize)>,
    length: usize,
}

impl<T: Real> WindowBank<T> {
    fn new(seqs: &[(&FeatureSequence, usize)], norm: &NormStats, length: usize, stride: usize) -> Self {
        let spec = WindowSpec { length_frames: length, stride_frames: stride, ..Default::default() };
        let mut bank = WindowBank { seqs: Vec::new(), refs: Vec::new(), length };
        for (i, (seq, label)) in seqs.iter().enumerate() {
            bank.seqs.push(normalize_frames(&seq.frames, norm));
            for k in 0..spec.count(seq.len()) {
                bank.refs.push((i, k * stride, *label));
            }
        }
        bank
    }

    fn batch(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let row = self.length * FEATURES;
        let mut data = Vec::with_capacity(idx.len() * row);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let (s, start, label) = self.refs[i];
            data.extend_from_slice(&self.seqs[s][start * FEATURES..start * FEATURES + row]);
            labels.push(label);
        }
        (Tensor::new(vec![idx.len(), self.length, FEATURES], data), labels)
    }
}

pub fn normalize_frames<T: Real>(frames: &[FeatureFrame], norm: &NormStats) -> Vec<T> {
    frames
        .iter()
        .flat_map(|f| (0..FEATURES).map(move |j| T::from_f64(norm.apply_value(j, f[j]))))
        .collect()
}

/// Softmax outputs for every window of `frames` under `spec`, in window
/// order. Windows are evaluated in inference mode, `batch_size` at a time.
pub fn predict_windows<T: Real>(
    model: &Model<T>,
    norm: &NormStats,
    frames: &[FeatureFrame],
    spec: &WindowSpec,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let count = spec.count(frames.len());
    let data: Vec<T> = normalize_frames(frames, norm);
    let starts: Vec<usize> = (0..count).map(|k| k * spec.stride_frames).collect();
    let row = spec.length_frames * FEATURES;
    let chunks: Vec<Result<Vec<Vec<f64>>>> = starts
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let mut buf = Vec::with_capacity(chunk.len() * row);
            for &s in chunk {
                buf.extend_from_slice(&data[s * FEATURES..s * FEATURES + row]);
            }
            let batch = Tensor::new(vec![chunk.len(), spec.length_frames, FEATURES], buf);
            let logits = model.logits(&batch)?;
            let c = model.config.class_count;
            Ok(logits.data.chunks_exact(c).map(|r| softmax_row(r).0.into_iter().map(T::as_f64).collect()).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(count);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-window predictions for a labeled set of sequences, as
/// `(true label, predicted label)` pairs.
pub fn window_predictions<T: Real>(
    model: &Model<T>,
    norm: &NormStats,
    seqs: &[(&FeatureSequence, usize)],
    spec: &WindowSpec,
    batch_size: usize,
) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (seq, label) in seqs {
        for p in predict_windows(model, norm, &seq.frames, spec, batch_size)? {
            out.push((*label, argmax(&p)));
        }
    }
    Ok(out)
}

/// Window predictions on a labeled set plus their mean cross-entropy.
pub fn validation_scores<T: Real>(
    model: &Model<T>,
    norm: &NormStats,
    seqs: &[(&FeatureSequence, usize)],
    spec: &WindowSpec,
    batch_size: usize,
) -> Result<(Vec<(usize, usize)>, f64)> {
    let mut pairs = Vec::new();
    let mut nll = 0.0;
    for (seq, label) in seqs {
        for p in predict_windows(model, norm, &seq.frames, spec, batch_size)? {
            nll -= p[*label].max(f64::MIN_POSITIVE).ln();
            pairs.push((*label, argmax(&p)));
        }
    }
    let n = pairs.len().max(1) as f64;
    Ok((pairs, nll / n))
}

/// Per-class accuracies of `(truth, prediction)` pairs; `None` for classes
/// without samples.
pub fn per_class_accuracy(pairs: &[(usize, usize)], classes: usize) -> Vec<Option<f64>> {
    let mut correct = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for &(t, p) in pairs {
        total[t] += 1;
        if t == p {
            correct[t] += 1;
        }
    }
    (0..classes).map(|c| (total[c] > 0).then(|| correct[c] as f64 / total[c] as f64)).collect()
}

fn min_and_macro(acc: &[Option<f64>]) -> (f64, f64) {
    let present: Vec<f64> = acc.iter().flatten().copied().collect();
    if present.is_empty() {
        return (0.0, 0.0);
    }
    let min = present.iter().copied().fold(f64::INFINITY, f64::min);
    (min, present.iter().sum::<f64>() / present.len() as f64)
}

pub fn train<T: Real>(config: &ModelConfig, tc: &TrainConfig, splits: &Splits) -> Result<Checkpoint<T>> {
    train_with_history(config, tc, splits).map(|o| o.checkpoint)
}

/// Train on `splits.train`, monitor minimum per-class window accuracy on
/// `splits.validation`, and keep the parameters of the best epoch.
pub fn train_with_history<T: Real>(
    config: &ModelConfig,
    tc: &TrainConfig,
    splits: &Splits,
) -> Result<TrainOutcome<T>> {
    tc.validate()?;
    let config = config.clone();
    if config.class_count != splits.users.len() {
        return Err(Error::Parameter(format!(
            "model has {} classes but the dataset has {} users",
            config.class_count,
            splits.users.len()
        )));
    }
    config.validate()?;
    let length = tc.window.length_frames;
    let train_spec = WindowSpec { length_frames: length, stride_frames: tc.train_stride, rate_hz: tc.window.rate_hz };
    let val_spec = WindowSpec { length_frames: length, stride_frames: tc.val_stride, rate_hz: tc.window.rate_hz };

    let train_set: Vec<(&FeatureSequence, usize)> = splits.train.iter().map(|s| (s, splits.label_of(s))).collect();
    let val_set: Vec<(&FeatureSequence, usize)> = splits.validation.iter().map(|s| (s, splits.label_of(s))).collect();
    let short_sequences: Vec<String> = train_set
        .iter()
        .filter(|(s, _)| s.len() < length)
        .map(|(s, _)| s.user_id.clone())
        .collect();

    let norm = if tc.normalize {
        fit_norm_stats_windowed(&splits.train, &train_spec)?
    } else {
        NormStats::identity()
    };
    let bank = WindowBank::<T>::new(&train_set, &norm, length, tc.train_stride);
    if bank.refs.is_empty() {
        return Err(Error::Parameter("no training windows: every training sequence is shorter than a window".into()));
    }
    let val_windows: usize = val_set.iter().map(|(s, _)| val_spec.count(s.len())).sum();
    if val_windows == 0 {
        return Err(Error::Parameter("no validation windows".into()));
    }

    // Model initialization, shuffling and dropout draw from separate streams.
    let mut model = Model::<T>::new(config.clone(), tc.seed)?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5EED_D80F);
    let mut optimizer = Adam::new(model.params.tensors());
    let mut stopper = EarlyStopping::new(tc.epochs_min, tc.max_epochs, tc.patience, tc.min_delta);
    let mut best = model.params.clone();
    let mut kept: Option<(usize, f64, f64)> = None;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..bank.refs.len()).collect();

    for epoch in 1..=tc.max_epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(epoch as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for (step, idx) in order.chunks(tc.batch_size).enumerate() {
            let (batch, labels) = bank.batch(idx);
            let rng = (config.dropout > 0.0).then_some(&mut dropout_rng);
            let (loss, grads) = model.loss_and_grads(&batch, &labels, rng)?;
            if !loss.is_finite() || grads.iter().any(|g| g.data.iter().any(|v| !v.is_finite())) {
                return Err(Error::Training { epoch, step, message: format!("non-finite loss {loss}") });
            }
            optimizer.step(model.params.tensors_mut(), &grads, config.learning_rate);
            loss_sum += loss;
            steps += 1;
        }
        let (pairs, val_loss) = validation_scores(&model, &norm, &val_set, &val_spec, 128)?;
        let (val_min, val_macro) = min_and_macro(&per_class_accuracy(&pairs, config.class_count));
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            val_loss,
            val_min_accuracy: val_min,
            val_macro_accuracy: val_macro,
        };
        info!(
            "epoch {epoch}: loss {:.5} val loss {:.5} val min {:.4} macro {:.4}",
            record.train_loss, val_loss, val_min, val_macro
        );
        history.push(record);
        // Equal minimum accuracy is common once validation saturates; the
        // lower validation loss then decides which epoch is kept.
        let better = match kept {
            None => true,
            Some((_, score, loss)) => val_min > score || (val_min == score && val_loss < loss),
        };
        if better {
            kept = Some((epoch, val_min, val_loss));
            best = model.params.clone();
        }
        if stopper.observe(epoch, val_min).stop {
            break;
        }
    }
    let (best_epoch, best_score, _) = kept.expect("at least one epoch");
    let checkpoint = Checkpoint {
        model: Model { config, params: best },
        norm,
        meta: TrainMeta {
            epoch: best_epoch,
            val_min_accuracy: best_score,
            seed: tc.seed,
            epochs_run: history.len(),
            users: splits.users.users().to_vec(),
            window_frames: length,
            rate_hz: tc.window.rate_hz,
        },
    };
    Ok(TrainOutcome { checkpoint, history, train_windows: bank.refs.len(), val_windows, short_sequences })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stops_after_patience_and_keeps_best() {
        let mut s = EarlyStopping::new(30, 200, 6, 0.001);
        let mut stopped_at = None;
        for epoch in 1..=100 {
            let score = if epoch <= 31 { 0.5 + 0.01 * epoch as f64 } else { 0.5 };
            if s.observe(epoch, score).stop {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(37));
        assert_eq!(s.best().unwrap().0, 31);
    }

    #[test]
    fn never_stops_before_minimum() {
        let mut s = EarlyStopping::new(30, 200, 2, 0.001);
        for epoch in 1..30 {
            assert!(!s.observe(epoch, 0.4).stop);
        }
        assert!(s.observe(30, 0.4).stop);
        assert_eq!(s.best().unwrap().0, 1);
    }

    #[test]
    fn stagnation_below_min_delta_counts_as_no_progress() {
        let mut s = EarlyStopping::new(1, 200, 3, 0.001);
        s.observe(1, 0.5);
        assert!(!s.observe(2, 0.5005).improved);
        assert!(s.observe(3, 0.52).improved);
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5]), 0);
    }
}
