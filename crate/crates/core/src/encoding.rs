//! Body-relative feature encodings.
//!
//! Every encoded frame holds 18 values: the left controller's position and
//! rotation, the right controller's position and rotation, and the HMD's
//! residual tilt, all expressed relative to the head:
//!
//! ```text
//! [ l.px l.py l.pz l.qx l.qy l.qz l.qw | r.px r.py r.pz r.qx r.qy r.qz r.qw | h.qx h.qy h.qz h.qw ]
//! ```
//!
//! BRV and BRA are first and second per-frame differences of BR, with
//! quaternion features differenced multiplicatively.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::motion::Recording;
use crate::quat::{canonicalize, quat_delta_with, swing_twist, DeltaOrder, Quaternion, Vec3};

pub const FEATURES: usize = 18;

/// Offsets of the three position triplets and three quaternions in a frame.
pub const POSITION_OFFSETS: [usize; 2] = [0, 7];
pub const ROTATION_OFFSETS: [usize; 3] = [3, 10, 14];

pub const FEATURE_NAMES: [&str; FEATURES] = [
    "left_pos_x", "left_pos_y", "left_pos_z", "left_rot_x", "left_rot_y", "left_rot_z", "left_rot_w",
    "right_pos_x", "right_pos_y", "right_pos_z", "right_rot_x", "right_rot_y", "right_rot_z", "right_rot_w",
    "hmd_rot_x", "hmd_rot_y", "hmd_rot_z", "hmd_rot_w",
];

pub type FeatureFrame = [f64; FEATURES];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EncodingKind {
    /// Scene-relative raw data. Never used as model input.
    Sr,
    Br,
    Brv,
    Bra,
}

impl EncodingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncodingKind::Sr => "sr",
            EncodingKind::Br => "br",
            EncodingKind::Brv => "brv",
            EncodingKind::Bra => "bra",
        }
    }

    /// Frames lost relative to the source recording.
    pub fn frames_lost(self) -> usize {
        match self {
            EncodingKind::Sr | EncodingKind::Br => 0,
            EncodingKind::Brv => 1,
            EncodingKind::Bra => 2,
        }
    }
}

impl fmt::Display for EncodingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncodingKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sr" => Ok(EncodingKind::Sr),
            "br" => Ok(EncodingKind::Br),
            "brv" => Ok(EncodingKind::Brv),
            "bra" => Ok(EncodingKind::Bra),
            _ => Err(Error::UnsupportedEncoding(s.to_string())),
        }
    }
}

/// Which head rotation the controllers are re-expressed in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HeadFrame {
    /// The full HMD orientation.
    #[default]
    Full,
    /// Only the HMD's rotation about the up axis.
    YawOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EncodeOptions {
    pub delta_order: DeltaOrder,
    pub head_frame: HeadFrame,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub user_id: String,
    pub session_id: u8,
    pub rate: f64,
    pub kind: EncodingKind,
    /// Index of `frames[0]` within the full encoded stream this was cut from.
    pub offset: usize,
    pub frames: Vec<FeatureFrame>,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn duration_min(&self) -> f64 {
        self.frames.len() as f64 / self.rate / 60.0
    }

    /// Sub-sequence of frames `range`, keeping track of the absolute offset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> FeatureSequence {
        FeatureSequence {
            user_id: self.user_id.clone(),
            session_id: self.session_id,
            rate: self.rate,
            kind: self.kind,
            offset: self.offset + range.start,
            frames: self.frames[range].to_vec(),
        }
    }
}

fn write_quat(dst: &mut [f64], q: Quaternion) {
    dst.copy_from_slice(&q.to_array());
}

/// Body-relative encoding with the HMD as frame of reference.
pub fn encode_br(rec: &Recording) -> Result<FeatureSequence> {
    encode_br_with(rec, EncodeOptions::default())
}

pub fn encode_br_with(rec: &Recording, opts: EncodeOptions) -> Result<FeatureSequence> {
    let mut frames = Vec::with_capacity(rec.len());
    let mut prev: Option<[Quaternion; 3]> = None;
    for (i, f) in rec.frames().iter().enumerate() {
        let degenerate = |_| Error::DegenerateRotation { frame: Some(i) };
        let q_hmd = f.hmd.rotation.normalized().map_err(degenerate)?;
        let (twist, swing) = swing_twist(q_hmd, Vec3::Y);
        let reference = match opts.head_frame {
            HeadFrame::Full => q_hmd,
            HeadFrame::YawOnly => twist,
        };
        let inv = reference.conjugate();
        let mut out = [0.0; FEATURES];
        let mut quats = [Quaternion::IDENTITY; 3];
        for (c, ctrl) in [&f.controller_left, &f.controller_right].into_iter().enumerate() {
            let p = inv.rotate(ctrl.position - f.hmd.position);
            out[POSITION_OFFSETS[c]..POSITION_OFFSETS[c] + 3].copy_from_slice(&p.to_array());
            quats[c] = inv * ctrl.rotation.normalized().map_err(degenerate)?;
        }
        quats[2] = swing;
        for (k, q) in quats.iter_mut().enumerate() {
            *q = canonicalize(*q, prev.map(|p| p[k])).map_err(degenerate)?;
            let o = ROTATION_OFFSETS[k];
            write_quat(&mut out[o..o + 4], *q);
        }
        prev = Some(quats);
        frames.push(out);
    }
    Ok(FeatureSequence {
        user_id: rec.user_id().to_string(),
        session_id: rec.session_id(),
        rate: rec.nominal_rate(),
        kind: EncodingKind::Br,
        offset: 0,
        frames,
    })
}

/// Per-frame differences: arithmetic for positions, relative rotation for
/// quaternions. Advances BR to BRV and BRV to BRA.
pub fn differentiate(seq: &FeatureSequence) -> Result<FeatureSequence> {
    differentiate_with(seq, DeltaOrder::default())
}

pub fn differentiate_with(seq: &FeatureSequence, order: DeltaOrder) -> Result<FeatureSequence> {
    let kind = match seq.kind {
        EncodingKind::Br => EncodingKind::Brv,
        EncodingKind::Brv => EncodingKind::Bra,
        k => return Err(Error::UnsupportedEncoding(format!("cannot differentiate {k}"))),
    };
    if seq.len() < 2 {
        return Err(Error::TooShort { needed: 2, available: seq.len() });
    }
    let frames = seq
        .frames
        .windows(2)
        .map(|w| {
            let (a, b) = (&w[0], &w[1]);
            let mut out = [0.0; FEATURES];
            for &o in &POSITION_OFFSETS {
                for j in o..o + 3 {
                    out[j] = b[j] - a[j];
                }
            }
            for &o in &ROTATION_OFFSETS {
                let d = quat_delta_with(
                    Quaternion::from_slice(&a[o..o + 4]),
                    Quaternion::from_slice(&b[o..o + 4]),
                    order,
                );
                write_quat(&mut out[o..o + 4], d);
            }
            out
        })
        .collect();
    Ok(FeatureSequence {
        user_id: seq.user_id.clone(),
        session_id: seq.session_id,
        rate: seq.rate,
        kind,
        offset: seq.offset,
        frames,
    })
}

pub fn encode(rec: &Recording, kind: EncodingKind) -> Result<FeatureSequence> {
    encode_with(rec, kind, EncodeOptions::default())
}

pub fn encode_with(rec: &Recording, kind: EncodingKind, opts: EncodeOptions) -> Result<FeatureSequence> {
    match kind {
        EncodingKind::Sr => Err(Error::UnsupportedEncoding(
            "scene-relative data is not a model input".into(),
        )),
        EncodingKind::Br => encode_br_with(rec, opts),
        EncodingKind::Brv => differentiate_with(&encode_br_with(rec, opts)?, opts.delta_order),
        EncodingKind::Bra => {
            let brv = differentiate_with(&encode_br_with(rec, opts)?, opts.delta_order)?;
            differentiate_with(&brv, opts.delta_order)
        }
    }
}

/// Dump a sequence as CSV: `timestamp_s` plus the 18 named features.
/// Timestamps are `frame_index / rate`.
pub fn write_feature_csv(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::with_capacity(seq.len() * 256);
    out.push_str("timestamp_s,");
    out.push_str(&FEATURE_NAMES.join(","));
    out.push('\n');
    for (i, f) in seq.frames.iter().enumerate() {
        out.push_str(&((seq.offset + i) as f64 / seq.rate).to_string());
        for v in f {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}
