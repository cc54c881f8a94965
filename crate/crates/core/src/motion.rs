//! Scene-relative tracking recordings: ingestion, resampling, trimming and
//! travel statistics.
//!
//! The canonical file layout is a comma separated table with a header row and
//! 22 columns: `timestamp_s` followed by position (cm) and rotation
//! quaternion components for the HMD, the left and the right controller.
//! Positions use a y-up coordinate system.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;

use crate::error::{Error, Result};
use crate::quat::{canonicalize, Quaternion, Vec3};

pub const DEVICES: [&str; 3] = ["hmd", "left", "right"];
const POSE_FIELDS: [&str; 7] = ["pos_x", "pos_y", "pos_z", "rot_x", "rot_y", "rot_z", "rot_w"];

/// Canonical column names in file order.
pub fn canonical_columns() -> Vec<String> {
    let mut cols = vec!["timestamp_s".to_string()];
    for d in DEVICES {
        for f in POSE_FIELDS {
            cols.push(format!("{d}_{f}"));
        }
    }
    cols
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    pub rotation: Quaternion,
}

impl Default for Pose {
    fn default() -> Self {
        Pose { position: Vec3::ZERO, rotation: Quaternion::IDENTITY }
    }
}

impl Pose {
    pub fn new(position: Vec3, rotation: Quaternion) -> Self {
        Pose { position, rotation }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct PoseFrame {
    pub timestamp: f64,
    pub hmd: Pose,
    pub controller_left: Pose,
    pub controller_right: Pose,
}

impl PoseFrame {
    pub fn poses(&self) -> [&Pose; 3] {
        [&self.hmd, &self.controller_left, &self.controller_right]
    }

    fn poses_mut(&mut self) -> [&mut Pose; 3] {
        [&mut self.hmd, &mut self.controller_left, &mut self.controller_right]
    }
}

/// One user-session of tracking data. Immutable once built; the up axis is +y.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    user_id: String,
    session_id: u8,
    nominal_rate: f64,
    frames: Vec<PoseFrame>,
}

impl Recording {
    /// Validates the frame invariants and estimates the nominal rate from the
    /// timestamps.
    pub fn new(user_id: impl Into<String>, session_id: u8, frames: Vec<PoseFrame>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::EmptyRecording { frames: frames.len() });
        }
        let rate = (frames.len() - 1) as f64 / (frames[frames.len() - 1].timestamp - frames[0].timestamp);
        Self::with_rate(user_id, session_id, rate, frames)
    }

    pub fn with_rate(
        user_id: impl Into<String>,
        session_id: u8,
        nominal_rate: f64,
        frames: Vec<PoseFrame>,
    ) -> Result<Self> {
        if !(session_id == 1 || session_id == 2) {
            return Err(Error::Parameter(format!("session id must be 1 or 2, got {session_id}")));
        }
        if frames.len() < 2 {
            return Err(Error::EmptyRecording { frames: frames.len() });
        }
        for (i, w) in frames.windows(2).enumerate() {
            if !(w[1].timestamp > w[0].timestamp) {
                return Err(Error::Format {
                    row: i + 1,
                    message: "timestamps must be strictly increasing".into(),
                });
            }
        }
        if !(nominal_rate > 0.0 && nominal_rate.is_finite()) {
            return Err(Error::Parameter(format!("nominal rate must be positive, got {nominal_rate}")));
        }
        Ok(Recording { user_id: user_id.into(), session_id, nominal_rate, frames })
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn session_id(&self) -> u8 {
        self.session_id
    }

    pub fn nominal_rate(&self) -> f64 {
        self.nominal_rate
    }

    pub fn frames(&self) -> &[PoseFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.frames[self.frames.len() - 1].timestamp - self.frames[0].timestamp
    }

    /// Apply `f` to every pose of every frame, keeping timestamps.
    pub fn map_poses(&self, mut f: impl FnMut(&Pose) -> Pose) -> Recording {
        let frames = self
            .frames
            .iter()
            .map(|fr| PoseFrame {
                timestamp: fr.timestamp,
                hmd: f(&fr.hmd),
                controller_left: f(&fr.controller_left),
                controller_right: f(&fr.controller_right),
            })
            .collect();
        Recording { frames, ..self.clone() }
    }
}

/// Maps canonical column names to the headers of a source file.
///
/// Parsed from `key=value` lines; `timestamp_scale` multiplies the raw
/// timestamp column into seconds (e.g. `0.001` for milliseconds).
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnMap {
    names: BTreeMap<String, String>,
    pub timestamp_scale: f64,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap { names: BTreeMap::new(), timestamp_scale: 1.0 }
    }
}

impl ColumnMap {
    pub fn parse(text: &str) -> Result<Self> {
        let canonical = canonical_columns();
        let mut map = ColumnMap::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("column map line {}: expected key=value", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k == "timestamp_scale" {
                map.timestamp_scale = v
                    .parse()
                    .map_err(|_| Error::Config(format!("timestamp_scale: not a number: {v}")))?;
                if !(map.timestamp_scale > 0.0) {
                    return Err(Error::Config("timestamp_scale must be positive".into()));
                }
            } else if canonical.iter().any(|c| c == k) {
                map.names.insert(k.to_string(), v.to_string());
            } else {
                return Err(Error::Config(format!("column map: unknown canonical column `{k}`")));
            }
        }
        Ok(map)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn insert(&mut self, canonical: &str, source: &str) {
        self.names.insert(canonical.to_string(), source.to_string());
    }

    /// Source header for a canonical column (identity when unmapped).
    pub fn source<'a>(&'a self, canonical: &'a str) -> &'a str {
        self.names.get(canonical).map(String::as_str).unwrap_or(canonical)
    }
}

/// Counters collected while loading a file.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub rows: usize,
    pub rejected_rows: usize,
    pub duplicate_timestamps: usize,
}

/// Derive `(user_id, session_id)` from a file stem of the form
/// `<user>_<session>` (session `1`/`2`, optionally prefixed with `s`).
/// Other stems map to session 1 with the whole stem as user id.
pub fn identity_from_path(path: &Path) -> (String, u8) {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("unknown");
    if let Some((user, session)) = stem.rsplit_once('_') {
        let session = session.trim_start_matches(['s', 'S']);
        if let Ok(s @ (1 | 2)) = session.parse::<u8>() {
            return (user.to_string(), s);
        }
    }
    (stem.to_string(), 1)
}

pub fn load_recording(path: impl AsRef<Path>, columns: &ColumnMap) -> Result<Recording> {
    load_recording_with_report(path, columns).map(|(r, _)| r)
}

pub fn load_recording_with_report(
    path: impl AsRef<Path>,
    columns: &ColumnMap,
) -> Result<(Recording, LoadReport)> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();

    let mut index = Vec::with_capacity(22);
    for canonical in canonical_columns() {
        let source = columns.source(&canonical);
        let pos = headers
            .iter()
            .position(|h| h == source)
            .ok_or_else(|| Error::Schema { column: source.to_string() })?;
        index.push(pos);
    }

    let mut report = LoadReport::default();
    let mut frames: Vec<PoseFrame> = Vec::new();
    let mut values = [0.0f64; 22];
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        report.rows += 1;
        // Header is line 1; data rows are reported 1-based after it.
        let row = row + 1;
        let mut ok = true;
        for (slot, &col) in values.iter_mut().zip(&index) {
            match record.get(col).and_then(|v| v.parse::<f64>().ok()) {
                Some(v) if v.is_finite() => *slot = v,
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            report.rejected_rows += 1;
            continue;
        }
        let mut frame = PoseFrame { timestamp: values[0] * columns.timestamp_scale, ..Default::default() };
        for (d, pose) in frame.poses_mut().into_iter().enumerate() {
            let v = &values[1 + 7 * d..8 + 7 * d];
            pose.position = Vec3::new(v[0], v[1], v[2]);
            match canonicalize(Quaternion::from_slice(&v[3..7]), None) {
                Ok(q) => pose.rotation = q,
                Err(_) => ok = false,
            }
        }
        if !ok {
            report.rejected_rows += 1;
            continue;
        }
        if let Some(last) = frames.last() {
            if frame.timestamp == last.timestamp {
                report.duplicate_timestamps += 1;
                continue;
            }
            if frame.timestamp < last.timestamp {
                return Err(Error::Format {
                    row,
                    message: format!(
                        "timestamp {} precedes previous timestamp {}",
                        frame.timestamp, last.timestamp
                    ),
                });
            }
        }
        frames.push(frame);
    }
    if report.rejected_rows > 0 {
        warn!("{}: rejected {} row(s) with invalid values", path.display(), report.rejected_rows);
    }
    if report.duplicate_timestamps > 0 {
        warn!("{}: dropped {} duplicate timestamp(s)", path.display(), report.duplicate_timestamps);
    }
    let (user, session) = identity_from_path(path);
    Ok((Recording::new(user, session, frames)?, report))
}

/// Write `rec` in the canonical layout. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn save_recording(rec: &Recording, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::with_capacity(rec.len() * 200);
    out.push_str(&canonical_columns().join(","));
    out.push('\n');
    for f in rec.frames() {
        out.push_str(&f.timestamp.to_string());
        for p in f.poses() {
            for v in p.position.to_array().into_iter().chain(p.rotation.to_array()) {
                out.push(',');
                out.push_str(&v.to_string());
            }
        }
        out.push('\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Canonical file name for a recording inside a dataset directory.
pub fn recording_file_name(user_id: &str, session_id: u8) -> String {
    format!("{user_id}_{session_id}.csv")
}

/// All `*.csv` files of a directory, sorted by name.
pub fn dataset_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

/// Resample onto the uniform grid `t_first + k / target_hz` (up to `t_last`).
/// Positions are interpolated linearly, rotations by shortest-arc slerp.
pub fn resample(rec: &Recording, target_hz: f64) -> Result<Recording> {
    if !(target_hz > 0.0 && target_hz.is_finite()) {
        return Err(Error::Parameter(format!("target rate must be positive, got {target_hz}")));
    }
    let src = rec.frames();
    let t0 = src[0].timestamp;
    let t_last = src[src.len() - 1].timestamp;
    // Tolerate rounding so a grid point that lands on t_last is kept.
    let count = ((t_last - t0) * target_hz + 1e-9).floor() as usize + 1;
    let mut out = Vec::with_capacity(count);
    let mut j = 0;
    for k in 0..count {
        let t = (t0 + k as f64 / target_hz).min(t_last);
        while j + 2 < src.len() && src[j + 1].timestamp <= t {
            j += 1;
        }
        let (a, b) = (&src[j], &src[j + 1]);
        let alpha = ((t - a.timestamp) / (b.timestamp - a.timestamp)).clamp(0.0, 1.0);
        let lerp = |pa: &Pose, pb: &Pose| Pose {
            position: pa.position.lerp(pb.position, alpha),
            rotation: pa.rotation.slerp(pb.rotation, alpha),
        };
        let frame = PoseFrame {
            timestamp: t0 + k as f64 / target_hz,
            hmd: lerp(&a.hmd, &b.hmd),
            controller_left: lerp(&a.controller_left, &b.controller_left),
            controller_right: lerp(&a.controller_right, &b.controller_right),
        };
        out.push(frame);
    }
    if let Some(last) = out.last_mut() {
        last.timestamp = last.timestamp.min(t_last);
    }
    Recording::with_rate(rec.user_id.clone(), rec.session_id, target_hz, out)
}

/// Drop the first `head_s` and last `tail_s` seconds and re-base timestamps
/// to start at zero.
pub fn trim(rec: &Recording, head_s: f64, tail_s: f64) -> Result<Recording> {
    if head_s < 0.0 || tail_s < 0.0 {
        return Err(Error::Parameter("trim bounds must be non-negative".into()));
    }
    let duration_s = rec.duration_s();
    if duration_s <= head_s + tail_s {
        return Err(Error::Trim { duration_s, head_s, tail_s });
    }
    let lo = rec.frames[0].timestamp + head_s;
    let hi = rec.frames[rec.len() - 1].timestamp - tail_s;
    let kept: Vec<PoseFrame> = rec
        .frames
        .iter()
        .filter(|f| f.timestamp >= lo && f.timestamp <= hi)
        .map(|f| PoseFrame { timestamp: f.timestamp - lo, ..*f })
        .collect();
    if kept.len() < 2 {
        return Err(Error::Trim { duration_s, head_s, tail_s });
    }
    Recording::with_rate(rec.user_id.clone(), rec.session_id, rec.nominal_rate, kept)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TravelStats {
    pub total_horizontal_path_m: f64,
    pub meters_per_minute: f64,
    pub duration_min: f64,
}

/// Horizontal (x/z plane) path length of the HMD.
pub fn travel_stats(rec: &Recording) -> TravelStats {
    let total_cm: f64 = rec
        .frames
        .windows(2)
        .map(|w| {
            let d = w[1].hmd.position - w[0].hmd.position;
            d.x.hypot(d.z)
        })
        .sum();
    let total = total_cm / 100.0;
    let duration_min = rec.duration_s() / 60.0;
    TravelStats {
        total_horizontal_path_m: total,
        meters_per_minute: if duration_min > 0.0 { total / duration_min } else { 0.0 },
        duration_min,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn uniform_recording(n: usize, rate: f64, f: impl Fn(usize) -> PoseFrame) -> Recording {
        let frames = (0..n)
            .map(|i| PoseFrame { timestamp: i as f64 / rate, ..f(i) })
            .collect();
        Recording::with_rate("u", 1, rate, frames).unwrap()
    }

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn identity_row(t: f64, x: f64) -> String {
        let pose = |px: f64| format!("{px},0,0,0,0,0,1");
        format!("{t},{},{},{}", pose(x), pose(0.0), pose(0.0))
    }

    #[test]
    fn loads_minimal_file() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            "{}\n{}\n{}\n",
            canonical_columns().join(","),
            identity_row(0.0, 0.0),
            identity_row(1.0 / 15.0, 1.0)
        );
        let p = write(dir.path(), "alice_2.csv", &text);
        let rec = load_recording(&p, &ColumnMap::default()).unwrap();
        assert_eq!(rec.len(), 2);
        assert_eq!(rec.user_id(), "alice");
        assert_eq!(rec.session_id(), 2);
        assert!((rec.nominal_rate() - 15.0).abs() < 1e-9);
    }

    #[test]
    fn renormalizes_quaternions() {
        let dir = tempfile::tempdir().unwrap();
        let s = 0.9997f64;
        let row = |t: f64| {
            format!("{t},0,0,0,0,0,0,{s},0,0,0,0,0,0,1,0,0,0,0,0,0,1")
        };
        let text = format!("{}\n{}\n{}\n", canonical_columns().join(","), row(0.0), row(0.1));
        let p = write(dir.path(), "u_1.csv", &text);
        let rec = load_recording(&p, &ColumnMap::default()).unwrap();
        assert!((rec.frames()[0].hmd.rotation.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn missing_column_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cols = canonical_columns();
        cols.retain(|c| c != "right_rot_w");
        let p = write(dir.path(), "u_1.csv", &(cols.join(",") + "\n"));
        match load_recording(&p, &ColumnMap::default()) {
            Err(Error::Schema { column }) => assert_eq!(column, "right_rot_w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_monotonic_is_format_error_with_row() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            "{}\n{}\n{}\n{}\n",
            canonical_columns().join(","),
            identity_row(0.0, 0.0),
            identity_row(1.0, 0.0),
            identity_row(0.5, 0.0)
        );
        let p = write(dir.path(), "u_1.csv", &text);
        assert!(matches!(load_recording(&p, &ColumnMap::default()), Err(Error::Format { row: 3, .. })));
    }

    #[test]
    fn rejects_bad_rows_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            "{}\n{}\n{}\n{}\n{}\n",
            canonical_columns().join(","),
            identity_row(0.0, 0.0),
            identity_row(0.0, 5.0),
            identity_row(0.5, f64::NAN),
            identity_row(1.0, 2.0)
        );
        let p = write(dir.path(), "u_1.csv", &text);
        let (rec, report) = load_recording_with_report(&p, &ColumnMap::default()).unwrap();
        assert_eq!(rec.len(), 2);
        assert_eq!(report.duplicate_timestamps, 1);
        assert_eq!(report.rejected_rows, 1);
        assert_eq!(rec.frames()[0].hmd.position.x, 0.0);
    }

    #[test]
    fn single_valid_row_is_empty_recording() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!("{}\n{}\n", canonical_columns().join(","), identity_row(0.0, 0.0));
        let p = write(dir.path(), "u_1.csv", &text);
        assert!(matches!(
            load_recording(&p, &ColumnMap::default()),
            Err(Error::EmptyRecording { frames: 1 })
        ));
    }

    #[test]
    fn column_map_renames_and_scales() {
        let dir = tempfile::tempdir().unwrap();
        let mut cols = canonical_columns();
        cols[0] = "time_ms".into();
        cols[1] = "HeadPosX".into();
        let text = format!(
            "{}\n{}\n{}\n",
            cols.join(","),
            identity_row(0.0, 0.0),
            identity_row(100.0, 3.0)
        );
        let p = write(dir.path(), "u_1.csv", &text);
        let map = ColumnMap::parse("timestamp_s = time_ms\nhmd_pos_x=HeadPosX\ntimestamp_scale=0.001\n").unwrap();
        let rec = load_recording(&p, &map).unwrap();
        assert!((rec.frames()[1].timestamp - 0.1).abs() < 1e-12);
        assert_eq!(rec.frames()[1].hmd.position.x, 3.0);
    }

    #[test]
    fn column_map_rejects_unknown_key() {
        assert!(ColumnMap::parse("head_x=foo").is_err());
    }

    #[test]
    fn resample_90hz_to_15hz_count() {
        let rec = uniform_recording(90 * 90 + 1, 90.0, |_| PoseFrame::default());
        let out = resample(&rec, 15.0).unwrap();
        assert_eq!(out.len(), 1351);
        assert_eq!(out.nominal_rate(), 15.0);
    }

    #[test]
    fn resample_rejects_bad_rate() {
        let rec = uniform_recording(3, 15.0, |_| PoseFrame::default());
        assert!(matches!(resample(&rec, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn resample_slerps_rotation() {
        let q = Quaternion::from_axis_angle(Vec3::Y, FRAC_PI_2);
        let rec = uniform_recording(2, 1.0, |i| {
            let mut f = PoseFrame::default();
            f.hmd.rotation = if i == 0 { Quaternion::IDENTITY } else { q };
            f
        });
        let out = resample(&rec, 2.0).unwrap();
        assert_eq!(out.len(), 3);
        let mid = out.frames()[1].hmd.rotation;
        assert!((mid.angle() - FRAC_PI_2 / 2.0).abs() < 1e-12);
        assert!(mid.x.abs() < 1e-15 && mid.z.abs() < 1e-15);
    }

    #[test]
    fn trim_bounds() {
        let rec = uniform_recording(46 * 60 + 1, 1.0, |_| PoseFrame::default());
        let t = trim(&rec, 60.0, 60.0).unwrap();
        assert!((t.duration_s() - 44.0 * 60.0).abs() < 1e-9);
        assert_eq!(t.frames()[0].timestamp, 0.0);

        assert_eq!(trim(&rec, 0.0, 0.0).unwrap(), rec);

        let short = uniform_recording(91, 1.0, |_| PoseFrame::default());
        assert!(matches!(trim(&short, 60.0, 60.0), Err(Error::Trim { .. })));
    }

    #[test]
    fn travel_stats_cases() {
        let rec = uniform_recording(10, 15.0, |_| PoseFrame::default());
        assert_eq!(travel_stats(&rec).total_horizontal_path_m, 0.0);

        let rec = uniform_recording(3, 2.0 / 60.0, |i| {
            let mut f = PoseFrame::default();
            f.hmd.position = match i {
                0 => Vec3::new(0.0, 170.0, 0.0),
                1 => Vec3::new(100.0, 160.0, 0.0),
                _ => Vec3::new(100.0, 170.0, 100.0),
            };
            f
        });
        let s = travel_stats(&rec);
        assert!((s.total_horizontal_path_m - 2.0).abs() < 1e-12);
        assert!((s.meters_per_minute - 2.0).abs() < 1e-12);
    }

    #[test]
    fn identity_from_stem() {
        assert_eq!(identity_from_path(Path::new("a/user_07_2.csv")), ("user_07".into(), 2));
        assert_eq!(identity_from_path(Path::new("u12_s1.csv")), ("u12".into(), 1));
        assert_eq!(identity_from_path(Path::new("plain.csv")), ("plain".into(), 1));
    }
}
