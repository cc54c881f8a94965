//! Majority-vote identification over sliding windows, accuracy metrics and
//! the enrollment-time by use-time accuracy grid.

use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};

use crate::encoding::FeatureSequence;
use crate::error::{Error, Result};
use crate::nn::train::{argmax, predict_windows, train_with_history};
use crate::nn::{Checkpoint, ModelConfig, Real, TrainConfig};
use crate::sampling::{split_sessions, Span, SplitSpec, Splits, WindowSpec};

/// Outcome of voting over the windows of one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct VoteResult {
    pub predicted: usize,
    pub vote_counts: Vec<usize>,
    pub cumulative_prob: Vec<f64>,
    pub window_count: usize,
}

/// Each probability row votes for its argmax. The winner has the most votes;
/// ties go to the larger cumulative probability, then the lower index.
pub fn vote<R: AsRef<[f64]>>(probs: &[R], classes: usize) -> VoteResult {
    let mut vote_counts = vec![0usize; classes];
    let mut cumulative_prob = vec![0.0; classes];
    for row in probs {
        let row = row.as_ref();
        vote_counts[argmax(row)] += 1;
        for (c, p) in cumulative_prob.iter_mut().zip(row) {
            *c += p;
        }
    }
    let mut predicted = 0;
    for c in 1..classes {
        let better = vote_counts[c] > vote_counts[predicted]
            || (vote_counts[c] == vote_counts[predicted] && cumulative_prob[c] > cumulative_prob[predicted]);
        if better {
            predicted = c;
        }
    }
    VoteResult { predicted, vote_counts, cumulative_prob, window_count: probs.len() }
}

/// Identify the user of a segment from every window of `spec` inside it.
pub fn identify_segment<T: Real>(ckpt: &Checkpoint<T>, seq: &FeatureSequence, spec: &WindowSpec) -> Result<VoteResult> {
    if seq.len() < spec.length_frames {
        return Err(Error::TooShort { needed: spec.length_frames, available: seq.len() });
    }
    let probs = predict_windows(&ckpt.model, &ckpt.norm, &seq.frames, spec, 256)?;
    Ok(vote(&probs, ckpt.model.config.class_count))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricSet {
    pub macro_accuracy: f64,
    pub min_accuracy: f64,
    /// Indexed by class; `None` for classes without results.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

/// Macro and minimum accuracy of `(true class, predicted class)` pairs.
/// Classes without any pair are excluded.
pub fn metrics(pairs: &[(usize, usize)], classes: usize) -> Result<MetricSet> {
    let mut correct = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for &(t, p) in pairs {
        if t >= classes {
            return Err(Error::Label { label: t, classes });
        }
        total[t] += 1;
        correct[t] += usize::from(t == p);
    }
    let per_class: Vec<Option<f64>> =
        (0..classes).map(|c| (total[c] > 0).then(|| correct[c] as f64 / total[c] as f64)).collect();
    let excluded: Vec<usize> = (0..classes).filter(|&c| total[c] == 0).collect();
    if !excluded.is_empty() {
        warn!("{} class(es) without results excluded from metrics", excluded.len());
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Parameter("no results to score".into()));
    }
    Ok(MetricSet {
        macro_accuracy: present.iter().sum::<f64>() / present.len() as f64,
        min_accuracy: present.iter().copied().fold(f64::INFINITY, f64::min),
        per_class_accuracy: per_class,
        excluded,
    })
}

pub fn vote_metrics(results: &[(usize, VoteResult)], classes: usize) -> Result<MetricSet> {
    let pairs: Vec<(usize, usize)> = results.iter().map(|(t, v)| (*t, v.predicted)).collect();
    metrics(&pairs, classes)
}

/// Window probabilities of one labeled test recording.
pub struct ScoredSequence {
    pub label: usize,
    pub rate: f64,
    pub frames: usize,
    pub probs: Vec<Vec<f64>>,
}

/// Evaluate every window of `spec` (typically stride 1) on each test
/// sequence. Sequences shorter than a window are skipped with a warning.
pub fn score_sequences<T: Real>(
    ckpt: &Checkpoint<T>,
    test: &[(&FeatureSequence, usize)],
    spec: &WindowSpec,
) -> Result<Vec<ScoredSequence>> {
    let mut out = Vec::new();
    for (seq, label) in test {
        if seq.len() < spec.length_frames {
            warn!("test sequence of {} has {} frames, shorter than a window", seq.user_id, seq.len());
            continue;
        }
        let probs = predict_windows(&ckpt.model, &ckpt.norm, &seq.frames, spec, 256)?;
        out.push(ScoredSequence { label: *label, rate: seq.rate, frames: seq.len(), probs });
    }
    Ok(out)
}

/// Per-window accuracy: every window is its own identification trial.
pub fn window_metrics(scored: &[ScoredSequence], classes: usize) -> Result<MetricSet> {
    let pairs: Vec<(usize, usize)> =
        scored.iter().flat_map(|s| s.probs.iter().map(move |p| (s.label, argmax(p)))).collect();
    metrics(&pairs, classes)
}

/// Vote over consecutive disjoint segments of `t_use`. Empty when no
/// sequence holds a full segment of at least one window.
pub fn segment_results(
    scored: &[ScoredSequence],
    t_use: Span,
    spec: &WindowSpec,
    classes: usize,
) -> Vec<(usize, VoteResult)> {
    let mut out = Vec::new();
    for s in scored {
        let seg = t_use.frames(s.rate).unwrap_or(s.frames);
        if seg < spec.length_frames || seg == 0 {
            continue;
        }
        for k in 0..s.frames / seg {
            // Windows starting at frames [k*seg, (k+1)*seg - length] lie inside the segment.
            let first = (k * seg).div_ceil(spec.stride_frames);
            let last = ((k + 1) * seg - spec.length_frames) / spec.stride_frames;
            if first > last || last >= s.probs.len() {
                continue;
            }
            out.push((s.label, vote(&s.probs[first..=last], classes)));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    pub t_enr: Vec<Span>,
    pub t_use: Vec<Span>,
    pub repeats: usize,
    pub seed: u64,
    pub validation_tail_min: f64,
    /// Window geometry for identification; stride 1 follows the protocol.
    pub eval_window: WindowSpec,
}

impl Default for GridConfig {
    fn default() -> Self {
        let mut t_use: Vec<Span> = (1..=25).map(|m| Span::Minutes(m as f64)).collect();
        t_use.push(Span::All);
        GridConfig {
            t_enr: [1.0, 5.0, 10.0, 15.0, 20.0, 25.0].into_iter().map(Span::Minutes).chain([Span::All]).collect(),
            t_use,
            repeats: 5,
            seed: 0,
            validation_tail_min: 5.0,
            eval_window: WindowSpec::default(),
        }
    }
}

/// One grid cell: `A(t_enr, t_use)` for every repeat, `None` where the
/// footage cannot support the cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub t_enr: Span,
    pub t_use: Span,
    pub values: Vec<Option<f64>>,
    pub segments: Vec<usize>,
}

impl GridCell {
    pub fn mean(&self) -> Option<f64> {
        let v: Vec<f64> = self.values.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn available_repeats(&self) -> usize {
        self.values.iter().flatten().count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerClassRow {
    pub t_enr: Span,
    pub t_use: Span,
    pub repeat: usize,
    pub user: String,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub cells: Vec<GridCell>,
    pub repeats: usize,
    pub per_class: Vec<PerClassRow>,
    /// Per-window macro accuracy for each `(t_enr, repeat)` that trained.
    pub window_accuracy: Vec<(Span, usize, f64)>,
    pub metadata: Vec<(String, String)>,
}

fn span_key(s: Span) -> String {
    s.to_string()
}

impl EvalReport {
    pub fn cell(&self, t_enr: Span, t_use: Span) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.t_enr == t_enr && c.t_use == t_use)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t_enr,t_use,repeat,accuracy\n");
        for c in &self.cells {
            for (r, v) in c.values.iter().enumerate() {
                let v = v.map_or_else(|| "unavailable".to_string(), |v| v.to_string());
                let _ = writeln!(s, "{},{},{},{}", span_key(c.t_enr), span_key(c.t_use), r, v);
            }
        }
        s
    }

    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("t_enr,t_use,repeat,user,accuracy\n");
        for p in &self.per_class {
            let v = p.accuracy.map_or_else(|| "excluded".to_string(), |v| v.to_string());
            let _ = writeln!(s, "{},{},{},{},{}", span_key(p.t_enr), span_key(p.t_use), p.repeat, p.user, v);
        }
        s
    }

    /// Mean accuracy table with enrollment time as rows and use time as
    /// columns; `-` marks unavailable cells.
    pub fn summary_table(&self) -> String {
        let mut enr: Vec<Span> = Vec::new();
        let mut uses: Vec<Span> = Vec::new();
        for c in &self.cells {
            if !enr.contains(&c.t_enr) {
                enr.push(c.t_enr);
            }
            if !uses.contains(&c.t_use) {
                uses.push(c.t_use);
            }
        }
        let mut s = String::new();
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "# {k}: {v}");
        }
        let _ = write!(s, "{:>7}", "enr\\use");
        for u in &uses {
            let _ = write!(s, " {:>6}", span_key(*u));
        }
        s.push('\n');
        for e in &enr {
            let _ = write!(s, "{:>7}", span_key(*e));
            for u in &uses {
                match self.cell(*e, *u).and_then(GridCell::mean) {
                    Some(m) => {
                        let _ = write!(s, " {:>6.3}", m);
                    }
                    None => {
                        let _ = write!(s, " {:>6}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("grid.csv"), self.to_csv())?;
        std::fs::write(dir.join("per_class.csv"), self.per_class_csv())?;
        std::fs::write(dir.join("summary.txt"), self.summary_table())?;
        Ok(())
    }
}

pub fn repeat_seed(base: u64, repeat: usize) -> u64 {
    base.wrapping_add(1_000_003u64.wrapping_mul(repeat as u64 + 1))
}

/// Retrain for every enrollment length and repeat, then score disjoint
/// use-time segments of the test session with majority voting.
pub fn eval_grid<T: Real>(
    dataset: &[FeatureSequence],
    model: &ModelConfig,
    train: &TrainConfig,
    grid: &GridConfig,
) -> Result<EvalReport> {
    if grid.repeats == 0 {
        return Err(Error::Parameter("repeats must be at least 1".into()));
    }
    let mut cells: Vec<GridCell> = Vec::new();
    for &e in &grid.t_enr {
        for &u in &grid.t_use {
            cells.push(GridCell { t_enr: e, t_use: u, values: vec![None; grid.repeats], segments: vec![0; grid.repeats] });
        }
    }
    let mut per_class = Vec::new();
    let mut window_accuracy = Vec::new();
    for &t_enr in &grid.t_enr {
        for repeat in 0..grid.repeats {
            let seed = repeat_seed(grid.seed, repeat);
            let spec = SplitSpec { validation_tail_min: grid.validation_tail_min, enrollment: t_enr, enrollment_seed: seed };
            let splits = match split_sessions(dataset, &spec) {
                Ok(s) => s,
                Err(Error::Enrollment { requested_min, available_min }) => {
                    warn!("t_enr {t_enr} unavailable: requested {requested_min} min, {available_min:.2} min available");
                    continue;
                }
                Err(e) => return Err(e),
            };
            let mut config = model.clone();
            config.class_count = splits.users.len();
            let tc = TrainConfig { seed, ..train.clone() };
            let outcome = train_with_history::<T>(&config, &tc, &splits)?;
            info!("t_enr {t_enr} repeat {repeat}: best epoch {}", outcome.checkpoint.meta.epoch);
            let test = labeled(&splits, &splits.test);
            let scored = score_sequences(&outcome.checkpoint, &test, &grid.eval_window)?;
            if scored.is_empty() {
                continue;
            }
            window_accuracy.push((t_enr, repeat, window_metrics(&scored, config.class_count)?.macro_accuracy));
            for cell in cells.iter_mut().filter(|c| c.t_enr == t_enr) {
                let results = segment_results(&scored, cell.t_use, &grid.eval_window, config.class_count);
                if results.is_empty() {
                    continue;
                }
                let m = vote_metrics(&results, config.class_count)?;
                cell.values[repeat] = Some(m.macro_accuracy);
                cell.segments[repeat] = results.len();
                for (label, acc) in m.per_class_accuracy.iter().enumerate() {
                    per_class.push(PerClassRow {
                        t_enr,
                        t_use: cell.t_use,
                        repeat,
                        user: splits.users.user(label).to_string(),
                        accuracy: *acc,
                    });
                }
            }
        }
    }
    let metadata = vec![
        ("architecture".into(), model.architecture.to_string()),
        ("encoding".into(), model.encoding.to_string()),
        ("repeats".into(), grid.repeats.to_string()),
        ("seed".into(), grid.seed.to_string()),
        ("window".into(), format!("{}x{}", grid.eval_window.length_frames, grid.eval_window.stride_frames)),
    ];
    Ok(EvalReport { cells, repeats: grid.repeats, per_class, window_accuracy, metadata })
}

pub fn labeled<'a>(splits: &Splits, seqs: &'a [FeatureSequence]) -> Vec<(&'a FeatureSequence, usize)> {
    seqs.iter().map(|s| (s, splits.label_of(s))).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedSpread {
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub min: f64,
    pub max: f64,
    pub range: f64,
}

/// Retrain once per seed and report the spread of per-window test accuracy.
pub fn seed_robustness<T: Real>(
    model: &ModelConfig,
    train: &TrainConfig,
    splits: &Splits,
    seeds: &[u64],
    eval_window: &WindowSpec,
) -> Result<SeedSpread> {
    if seeds.len() < 2 {
        return Err(Error::Parameter("seed robustness needs at least two seeds".into()));
    }
    let test = labeled(splits, &splits.test);
    let mut accuracies = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let tc = TrainConfig { seed, ..train.clone() };
        let outcome = train_with_history::<T>(model, &tc, splits)?;
        let scored = score_sequences(&outcome.checkpoint, &test, eval_window)?;
        let acc = window_metrics(&scored, model.class_count)?.macro_accuracy;
        info!("seed {seed}: per-window accuracy {acc:.4}");
        accuracies.push(acc);
    }
    Ok(spread(seeds.to_vec(), accuracies))
}

pub fn spread(seeds: Vec<u64>, accuracies: Vec<f64>) -> SeedSpread {
    let min = accuracies.iter().copied().fold(f64::INFINITY, f64::min);
    let max = accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    SeedSpread { seeds, accuracies, min, max, range: max - min }
}
