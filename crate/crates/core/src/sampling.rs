//! Dataset splits, enrollment slicing, standardization and windowing.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoding::{FeatureFrame, FeatureSequence, FEATURES};
use crate::error::{Error, Result};

/// Floor applied to per-feature standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowSpec {
    pub length_frames: usize,
    pub stride_frames: usize,
    pub rate_hz: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { length_frames: 300, stride_frames: 1, rate_hz: 15.0 }
    }
}

impl WindowSpec {
    pub fn new(length_frames: usize, stride_frames: usize) -> Result<Self> {
        let spec = WindowSpec { length_frames, stride_frames, ..Default::default() };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.length_frames < 2 {
            return Err(Error::Parameter("window length must be at least 2 frames".into()));
        }
        if self.stride_frames < 1 {
            return Err(Error::Parameter("window stride must be at least 1 frame".into()));
        }
        Ok(())
    }

    pub fn with_stride(self, stride_frames: usize) -> Self {
        WindowSpec { stride_frames, ..self }
    }

    pub fn duration_s(&self) -> f64 {
        self.length_frames as f64 / self.rate_hz
    }

    /// Number of windows over a sequence of `n` frames.
    pub fn count(&self, n: usize) -> usize {
        if n < self.length_frames {
            0
        } else {
            (n - self.length_frames) / self.stride_frames + 1
        }
    }
}

/// A duration in minutes, or everything that is available.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Span {
    Minutes(f64),
    All,
}

impl Span {
    pub fn frames(self, rate: f64) -> Option<usize> {
        match self {
            Span::Minutes(m) => Some((m * 60.0 * rate).round() as usize),
            Span::All => None,
        }
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Span::Minutes(m) => write!(f, "{m}"),
            Span::All => f.write_str("all"),
        }
    }
}

impl FromStr for Span {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Span::All);
        }
        match s.parse::<f64>() {
            Ok(m) if m > 0.0 && m.is_finite() => Ok(Span::Minutes(m)),
            _ => Err(Error::Parameter(format!("expected minutes > 0 or `all`, got `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub validation_tail_min: f64,
    pub enrollment: Span,
    pub enrollment_seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { validation_tail_min: 5.0, enrollment: Span::All, enrollment_seed: 0 }
    }
}

/// Sorted user ids; the position of an id is its class label.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UserIndex {
    users: Vec<String>,
}

impl UserIndex {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(ids: I) -> Self {
        let mut users: Vec<String> = ids.into_iter().map(Into::into).collect();
        users.sort();
        users.dedup();
        UserIndex { users }
    }

    pub fn label(&self, user: &str) -> Option<usize> {
        self.users.binary_search_by(|u| u.as_str().cmp(user)).ok()
    }

    pub fn user(&self, label: usize) -> &str {
        &self.users[label]
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }
}

/// Where one user's enrollment slice came from.
#[derive(Clone, Debug, PartialEq)]
pub struct EnrollmentRecord {
    pub user: String,
    pub seed: u64,
    pub offset: usize,
    pub frames: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub users: UserIndex,
    pub train: Vec<FeatureSequence>,
    pub validation: Vec<FeatureSequence>,
    pub test: Vec<FeatureSequence>,
    /// Users that have no second session and are missing from `test`.
    pub missing_test: Vec<String>,
    pub enrollment: Vec<EnrollmentRecord>,
}

impl Splits {
    pub fn label_of(&self, seq: &FeatureSequence) -> usize {
        self.users.label(&seq.user_id).expect("sequence of an indexed user")
    }

    /// Plain-text audit of every frame range assigned to a split.
    pub fn manifest(&self, spec: &SplitSpec) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# validation_tail_min={} enrollment={} enrollment_seed={}\n",
            spec.validation_tail_min, spec.enrollment, spec.enrollment_seed
        ));
        out.push_str("user,label,split,session,start_frame,end_frame\n");
        for (name, set) in [("train", &self.train), ("validation", &self.validation), ("test", &self.test)] {
            for s in set {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    s.user_id,
                    self.label_of(s),
                    name,
                    s.session_id,
                    s.offset,
                    s.offset + s.len()
                ));
            }
        }
        for e in &self.enrollment {
            out.push_str(&format!(
                "# enrollment user={} seed={} offset={} frames={}\n",
                e.user, e.seed, e.offset, e.frames
            ));
        }
        for u in &self.missing_test {
            out.push_str(&format!("# no_test_session user={u}\n"));
        }
        out
    }

    pub fn write_manifest(&self, spec: &SplitSpec, path: impl AsRef<Path>) -> Result<()> {
        std::fs::File::create(path)?.write_all(self.manifest(spec).as_bytes())?;
        Ok(())
    }
}

/// Per-user seed derived from the enrollment seed and the user's label.
pub fn user_seed(base: u64, label: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(label as u64).rotate_left(17) ^ 0xA5A5_5A5A
}

/// Session 1 minus its final `validation_tail_min` minutes trains, the tail
/// validates, session 2 tests. Enrollment slicing is applied to train.
pub fn split_sessions(dataset: &[FeatureSequence], spec: &SplitSpec) -> Result<Splits> {
    if !(spec.validation_tail_min > 0.0) {
        return Err(Error::Parameter("validation tail must be positive".into()));
    }
    let mut by_user: BTreeMap<&str, [Option<&FeatureSequence>; 2]> = BTreeMap::new();
    for seq in dataset {
        let slot = by_user.entry(&seq.user_id).or_default();
        let idx = usize::from(seq.session_id == 2);
        if slot[idx].is_some() {
            return Err(Error::Split {
                user: seq.user_id.clone(),
                message: format!("duplicate session {}", seq.session_id),
            });
        }
        slot[idx] = Some(seq);
    }
    let users = UserIndex::new(by_user.keys().copied());
    let mut splits = Splits { users, ..Default::default() };
    for (label, (user, sessions)) in by_user.iter().enumerate() {
        let s1 = sessions[0].ok_or_else(|| Error::Split {
            user: user.to_string(),
            message: "missing session 1".into(),
        })?;
        let tail = (spec.validation_tail_min * 60.0 * s1.rate).round() as usize;
        if s1.len() <= tail {
            return Err(Error::Split {
                user: user.to_string(),
                message: format!(
                    "session 1 lasts {:.3} min, not longer than the {} min validation tail",
                    s1.duration_min(),
                    spec.validation_tail_min
                ),
            });
        }
        let cut = s1.len() - tail;
        let train_full = s1.slice(0..cut);
        let seed = user_seed(spec.enrollment_seed, label);
        let train = select_enrollment(&train_full, spec.enrollment, seed)?;
        splits.enrollment.push(EnrollmentRecord {
            user: user.to_string(),
            seed,
            offset: train.offset,
            frames: train.len(),
        });
        splits.train.push(train);
        splits.validation.push(s1.slice(cut..s1.len()));
        match sessions[1] {
            Some(s2) => splits.test.push(s2.clone()),
            None => {
                warn!("user {user} has no second session; excluded from the test split");
                splits.missing_test.push(user.to_string());
            }
        }
    }
    Ok(splits)
}

/// Contiguous `t_enr` slice starting at a seeded uniform offset.
pub fn select_enrollment(seq: &FeatureSequence, t_enr: Span, seed: u64) -> Result<FeatureSequence> {
    let Some(frames) = t_enr.frames(seq.rate) else {
        return Ok(seq.clone());
    };
    if frames > seq.len() || frames == 0 {
        return Err(Error::Enrollment {
            requested_min: match t_enr {
                Span::Minutes(m) => m,
                Span::All => f64::INFINITY,
            },
            available_min: seq.duration_min(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.random_range(0..=seq.len() - frames);
    Ok(seq.slice(start..start + frames))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: [f64; FEATURES],
    pub std: [f64; FEATURES],
}

impl NormStats {
    /// Statistics that leave features unchanged.
    pub fn identity() -> Self {
        NormStats { mean: [0.0; FEATURES], std: [1.0; FEATURES] }
    }

    #[inline]
    pub fn apply_value(&self, j: usize, v: f64) -> f64 {
        if self.std[j] <= STD_FLOOR {
            0.0
        } else {
            (v - self.mean[j]) / self.std[j]
        }
    }

    pub fn apply_frame(&self, f: &FeatureFrame) -> FeatureFrame {
        std::array::from_fn(|j| self.apply_value(j, f[j]))
    }
}

/// Population mean and standard deviation of every frame of every window.
pub fn fit_norm_stats<'a, I>(train_windows: I) -> Result<NormStats>
where
    I: IntoIterator<Item = &'a WindowSample>,
{
    let mut count = 0usize;
    let mut mean = [0.0; FEATURES];
    let mut m2 = [0.0; FEATURES];
    for w in train_windows {
        for row in w.rows() {
            count += 1;
            for j in 0..FEATURES {
                let d = row[j] - mean[j];
                mean[j] += d / count as f64;
                m2[j] += d * (row[j] - mean[j]);
            }
        }
    }
    if count == 0 {
        return Err(Error::Parameter("normalization needs at least one training window".into()));
    }
    let std = std::array::from_fn(|j| (m2[j] / count as f64).sqrt().max(STD_FLOOR));
    Ok(NormStats { mean, std })
}

/// Fit directly on sequences, weighting each frame by the number of
/// windows of `spec` that contain it. Equivalent to [`fit_norm_stats`] over
/// the materialized windows.
pub fn fit_norm_stats_windowed(seqs: &[FeatureSequence], spec: &WindowSpec) -> Result<NormStats> {
    let mut weight_sum = 0.0;
    let mut mean = [0.0; FEATURES];
    let mut m2 = [0.0; FEATURES];
    for seq in seqs {
        let count = spec.count(seq.len());
        if count == 0 {
            continue;
        }
        let mut cover = vec![0u32; seq.len()];
        for k in 0..count {
            let s = k * spec.stride_frames;
            for c in &mut cover[s..s + spec.length_frames] {
                *c += 1;
            }
        }
        for (row, &c) in seq.frames.iter().zip(&cover) {
            if c == 0 {
                continue;
            }
            let w = c as f64;
            weight_sum += w;
            for j in 0..FEATURES {
                let d = row[j] - mean[j];
                mean[j] += d * w / weight_sum;
                m2[j] += w * d * (row[j] - mean[j]);
            }
        }
    }
    if weight_sum == 0.0 {
        return Err(Error::Parameter("normalization needs at least one training window".into()));
    }
    let std = std::array::from_fn(|j| (m2[j] / weight_sum).sqrt().max(STD_FLOOR));
    Ok(NormStats { mean, std })
}

pub fn apply_norm(sample: &WindowSample, stats: &NormStats) -> WindowSample {
    let mut out = sample.clone();
    for (k, v) in out.matrix.iter_mut().enumerate() {
        *v = stats.apply_value(k % FEATURES, *v);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowOrigin {
    pub user_id: String,
    pub session_id: u8,
    pub start_frame: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// Row-major `length_frames x 18`.
    pub matrix: Vec<f64>,
    pub label: usize,
    pub origin: WindowOrigin,
}

impl WindowSample {
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.matrix.chunks_exact(FEATURES)
    }

    pub fn length_frames(&self) -> usize {
        self.matrix.len() / FEATURES
    }
}

/// Windows of `seq` in order; empty when the sequence is shorter than one
/// window.
pub fn windows<'a>(
    seq: &'a FeatureSequence,
    spec: &WindowSpec,
    label: usize,
) -> impl ExactSizeIterator<Item = WindowSample> + 'a {
    let spec = *spec;
    (0..spec.count(seq.len())).map(move |k| {
        let start = k * spec.stride_frames;
        let matrix = seq.frames[start..start + spec.length_frames]
            .iter()
            .flat_map(|f| f.iter().copied())
            .collect();
        WindowSample {
            matrix,
            label,
            origin: WindowOrigin {
                user_id: seq.user_id.clone(),
                session_id: seq.session_id,
                start_frame: seq.offset + start,
            },
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::EncodingKind;

    fn seq(user: &str, session: u8, n: usize) -> FeatureSequence {
        FeatureSequence {
            user_id: user.into(),
            session_id: session,
            rate: 15.0,
            kind: EncodingKind::Br,
            offset: 0,
            frames: (0..n).map(|i| [i as f64; FEATURES]).collect(),
        }
    }

    #[test]
    fn window_counts() {
        let w = WindowSpec::default();
        assert_eq!(windows(&seq("a", 1, 300), &w, 0).count(), 1);
        assert_eq!(windows(&seq("a", 1, 310), &w, 0).count(), 11);
        assert_eq!(windows(&seq("a", 1, 900), &w, 0).count(), 601);
        assert_eq!(windows(&seq("a", 1, 299), &w, 0).count(), 0);
    }

    #[test]
    fn window_origin_tracks_offset() {
        let s = seq("a", 1, 400).slice(50..400);
        let spec = WindowSpec::new(300, 25).unwrap();
        let ws: Vec<_> = windows(&s, &spec, 3).collect();
        assert_eq!(ws.len(), 3);
        assert_eq!(ws[1].origin.start_frame, 75);
        assert_eq!(ws[1].matrix[0], 75.0);
        assert_eq!(ws[1].label, 3);
    }

    #[test]
    fn split_44_minutes() {
        let data = vec![seq("a", 1, 44 * 60 * 15), seq("a", 2, 1000)];
        let s = split_sessions(&data, &SplitSpec::default()).unwrap();
        assert_eq!(s.train[0].len(), 39 * 60 * 15);
        assert_eq!(s.validation[0].len(), 5 * 60 * 15);
        assert_eq!(s.validation[0].offset, 39 * 60 * 15);
        assert_eq!(s.test[0].len(), 1000);
    }

    #[test]
    fn split_user_without_second_session() {
        let data = vec![seq("a", 1, 9000), seq("a", 2, 100), seq("b", 1, 9000)];
        let s = split_sessions(&data, &SplitSpec::default()).unwrap();
        assert_eq!(s.train.len(), 2);
        assert_eq!(s.validation.len(), 2);
        assert_eq!(s.test.len(), 1);
        assert_eq!(s.missing_test, vec!["b".to_string()]);
    }

    #[test]
    fn split_tail_covering_session_fails() {
        let data = vec![seq("a", 1, 5 * 60 * 15)];
        match split_sessions(&data, &SplitSpec::default()) {
            Err(Error::Split { user, .. }) => assert_eq!(user, "a"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn enrollment_selection() {
        let s = seq("a", 1, 39 * 60 * 15);
        assert_eq!(select_enrollment(&s, Span::All, 1).unwrap(), s);
        let a = select_enrollment(&s, Span::Minutes(10.0), 7).unwrap();
        let b = select_enrollment(&s, Span::Minutes(10.0), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 9000);
        let offsets: std::collections::BTreeSet<usize> = (0..10)
            .map(|seed| select_enrollment(&s, Span::Minutes(10.0), seed).unwrap().offset)
            .collect();
        assert!(offsets.len() > 1);
        assert!(matches!(
            select_enrollment(&s, Span::Minutes(40.0), 0),
            Err(Error::Enrollment { .. })
        ));
        for m in [1.0, 5.0, 10.0, 15.0, 20.0, 25.0] {
            assert!(select_enrollment(&s, Span::Minutes(m), 3).is_ok());
        }
    }

    #[test]
    fn norm_stats_standardize() {
        let mut s = seq("a", 1, 700);
        for (i, f) in s.frames.iter_mut().enumerate() {
            f[5] = 3.0;
            f[7] = (i as f64 * 0.37).sin() * 4.0 + 2.0;
        }
        let spec = WindowSpec::new(300, 40).unwrap();
        let ws: Vec<_> = windows(&s, &spec, 0).collect();
        let stats = fit_norm_stats(&ws).unwrap();
        let streamed = fit_norm_stats_windowed(std::slice::from_ref(&s), &spec).unwrap();
        for j in 0..FEATURES {
            assert!((stats.mean[j] - streamed.mean[j]).abs() < 1e-9);
            assert!((stats.std[j] - streamed.std[j]).abs() < 1e-9);
        }
        let normed: Vec<_> = ws.iter().map(|w| apply_norm(w, &stats)).collect();
        let n = (normed.len() * 300) as f64;
        for j in 0..FEATURES {
            let mean: f64 = normed.iter().flat_map(|w| w.rows().map(move |r| r[j])).sum::<f64>() / n;
            let var: f64 = normed
                .iter()
                .flat_map(|w| w.rows().map(move |r| (r[j] - mean).powi(2)))
                .sum::<f64>()
                / n;
            assert!(mean.abs() < 1e-6);
            if j == 5 {
                assert!(normed.iter().all(|w| w.rows().all(|r| r[5] == 0.0)));
            } else {
                assert!((var.sqrt() - 1.0).abs() < 1e-6, "feature {j}: {}", var.sqrt());
            }
        }
        let id = apply_norm(&ws[0], &NormStats::identity());
        assert_eq!(id, ws[0]);
    }

    #[test]
    fn span_parsing() {
        assert_eq!("all".parse::<Span>().unwrap(), Span::All);
        assert_eq!("2.5".parse::<Span>().unwrap(), Span::Minutes(2.5));
        assert!("0".parse::<Span>().is_err());
    }
}
