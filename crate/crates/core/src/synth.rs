//! Deterministic synthetic motion: each user has a fixed movement style
//! (oscillation frequencies, amplitudes, posture), each session a fresh
//! trajectory drawn from that style.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::motion::{recording_file_name, save_recording, Pose, PoseFrame, Recording};
use crate::quat::{Quaternion, Vec3};

pub const FREQ_MIN_HZ: f64 = 0.3;
pub const FREQ_MAX_HZ: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct HandParams {
    /// Rest position in the head's yaw frame, cm.
    pub rest: [f64; 3],
    pub swing_amplitude: [f64; 3],
    pub swing_frequency: [f64; 3],
    pub swing_phase: [f64; 3],
    /// Resting grip orientation relative to the body.
    pub grip: [f64; 4],
    pub rotation_axis: [f64; 3],
    /// Radians.
    pub rotation_amplitude: f64,
    pub rotation_frequency: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticUserParams {
    pub seed: u64,
    pub head_height: f64,
    pub bob_amplitude: f64,
    pub bob_frequency: f64,
    /// Radians.
    pub pitch_amplitude: f64,
    pub pitch_frequency: f64,
    pub hands: [HandParams; 2],
    /// Standard deviation of the horizontal velocity drift, cm/s.
    pub walk_scale: f64,
    /// Standard deviation of the yaw-rate drift, rad/s.
    pub yaw_scale: f64,
    /// Positional noise, cm; rotations get a proportional angular noise.
    pub noise_std: f64,
}

impl SyntheticUserParams {
    /// Every oscillation frequency, in a fixed order.
    pub fn frequencies(&self) -> Vec<f64> {
        let mut f = vec![self.bob_frequency, self.pitch_frequency];
        for h in &self.hands {
            f.extend(h.swing_frequency);
            f.push(h.rotation_frequency);
        }
        f
    }

    /// A style with no motion at all: the recording is a still pose.
    pub fn still(seed: u64) -> Self {
        let mut p = gen_user_params(seed);
        p.bob_amplitude = 0.0;
        p.pitch_amplitude = 0.0;
        p.walk_scale = 0.0;
        p.yaw_scale = 0.0;
        p.noise_std = 0.0;
        for h in &mut p.hands {
            h.swing_amplitude = [0.0; 3];
            h.rotation_amplitude = 0.0;
        }
        p
    }
}

fn unit3<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v.scale(1.0 / n).to_array();
        }
    }
}

fn freq<R: Rng>(rng: &mut R) -> f64 {
    rng.random_range(FREQ_MIN_HZ..FREQ_MAX_HZ)
}

fn hand<R: Rng>(rng: &mut R, side: f64) -> HandParams {
    let grip = Quaternion::from_axis_angle(Vec3::from(unit3(rng)), rng.random_range(0.0..1.2));
    HandParams {
        rest: [side * rng.random_range(15.0..35.0), rng.random_range(-55.0..-25.0), rng.random_range(20.0..45.0)],
        swing_amplitude: [rng.random_range(1.0..10.0), rng.random_range(1.0..10.0), rng.random_range(1.0..10.0)],
        swing_frequency: [freq(rng), freq(rng), freq(rng)],
        swing_phase: [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)],
        grip: grip.to_array(),
        rotation_axis: unit3(rng),
        rotation_amplitude: rng.random_range(0.05..0.5),
        rotation_frequency: freq(rng),
    }
}

pub fn gen_user_params(user_seed: u64) -> SyntheticUserParams {
    let mut rng = ChaCha8Rng::seed_from_u64(user_seed);
    SyntheticUserParams {
        seed: user_seed,
        head_height: rng.random_range(150.0..190.0),
        bob_amplitude: rng.random_range(0.5..3.0),
        bob_frequency: freq(&mut rng),
        pitch_amplitude: rng.random_range(0.02..0.2),
        pitch_frequency: freq(&mut rng),
        hands: [hand(&mut rng, -1.0), hand(&mut rng, 1.0)],
        walk_scale: rng.random_range(0.0..15.0),
        yaw_scale: rng.random_range(0.0..0.3),
        noise_std: rng.random_range(0.2..1.5),
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn noise_rotation<R: Rng>(rng: &mut R, angle_std: f64) -> Quaternion {
    if angle_std == 0.0 {
        return Quaternion::IDENTITY;
    }
    let v = Vec3::new(normal(rng), normal(rng), normal(rng)).scale(angle_std * 0.5);
    Quaternion::new(v.x, v.y, v.z, 1.0).normalized().expect("non-degenerate")
}

/// `duration_min` minutes of motion sampled at `rate_hz`, starting at t = 0.
pub fn gen_recording(
    params: &SyntheticUserParams,
    user_id: &str,
    session_id: u8,
    duration_min: f64,
    rate_hz: f64,
    session_seed: u64,
) -> Result<Recording> {
    if !(duration_min > 0.0 && rate_hz > 0.0) {
        return Err(Error::Parameter("duration and rate must be positive".into()));
    }
    let n = (duration_min * 60.0 * rate_hz).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(session_seed);
    let dt = 1.0 / rate_hz;
    // Session-level variation: phases and a small amplitude jitter.
    let phase: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..TAU)).collect();
    let jitter: Vec<f64> = (0..8).map(|_| rng.random_range(0.95..1.05)).collect();
    let mut yaw = rng.random_range(0.0..TAU);
    let mut position = Vec3::new(rng.random_range(-100.0..100.0), 0.0, rng.random_range(-100.0..100.0));
    let (mut vx, mut vz, mut yaw_rate) = (0.0, 0.0, 0.0);
    let relax = (-dt / 2.0f64).exp();
    let drive = (1.0 - relax * relax).sqrt();
    let angle_noise = params.noise_std * 0.01;

    let mut frames = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 * dt;
        if k > 0 {
            vx = relax * vx + drive * params.walk_scale * normal(&mut rng);
            vz = relax * vz + drive * params.walk_scale * normal(&mut rng);
            yaw_rate = relax * yaw_rate + drive * params.yaw_scale * normal(&mut rng);
            position = position + Vec3::new(vx * dt, 0.0, vz * dt);
            yaw += yaw_rate * dt;
        }
        let body = Quaternion::from_axis_angle(Vec3::Y, yaw);
        let pitch = params.pitch_amplitude * jitter[0] * (TAU * params.pitch_frequency * t + phase[0]).sin();
        let head_rot = body * Quaternion::from_axis_angle(Vec3::X, pitch);
        let bob = params.bob_amplitude * jitter[1] * (TAU * params.bob_frequency * t + phase[1]).sin();
        let head_pos = Vec3::new(position.x, params.head_height + bob, position.z);
        let noisy = |v: Vec3, rng: &mut ChaCha8Rng| {
            if params.noise_std == 0.0 {
                v
            } else {
                v + Vec3::new(normal(rng), normal(rng), normal(rng)).scale(params.noise_std)
            }
        };
        let hmd = Pose::new(noisy(head_pos, &mut rng), (head_rot * noise_rotation(&mut rng, angle_noise)).normalized()?);

        let mut controllers = [Pose::default(); 2];
        for (h, (hp, out)) in params.hands.iter().zip(controllers.iter_mut()).enumerate() {
            let mut offset = [0.0; 3];
            for a in 0..3 {
                let p = phase[2 + h * 4 + a] + hp.swing_phase[a];
                offset[a] = hp.rest[a] + hp.swing_amplitude[a] * jitter[2 + h * 3 + a] * (TAU * hp.swing_frequency[a] * t + p).sin();
            }
            let twist = hp.rotation_amplitude * (TAU * hp.rotation_frequency * t + phase[5 + h * 4]).sin();
            let rot = body
                * Quaternion::from_slice(&hp.grip)
                * Quaternion::from_axis_angle(Vec3::from(hp.rotation_axis), twist)
                * noise_rotation(&mut rng, angle_noise);
            let pos = head_pos + body.rotate(Vec3::from(offset));
            *out = Pose::new(noisy(pos, &mut rng), rot.normalized()?);
        }
        frames.push(PoseFrame { timestamp: t, hmd, controller_left: controllers[0], controller_right: controllers[1] });
    }
    Recording::with_rate(user_id, session_id, rate_hz, frames)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub users: usize,
    pub sessions: u8,
    pub duration_min: f64,
    pub rate_hz: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { users: 10, sessions: 2, duration_min: 6.0, rate_hz: 15.0, seed: 0 }
    }
}

pub fn user_name(i: usize) -> String {
    format!("u{i:03}")
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a.wrapping_add(b.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn dataset_user_seed(spec: &DatasetSpec, user: usize) -> u64 {
    mix(spec.seed, user as u64 + 1)
}

pub fn dataset_session_seed(spec: &DatasetSpec, user: usize, session: u8) -> u64 {
    mix(dataset_user_seed(spec, user), 1000 + session as u64)
}

/// Every user and session of a synthetic dataset, ordered by user then
/// session.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Vec<Recording>> {
    if !(1..=2).contains(&spec.sessions) {
        return Err(Error::Parameter("sessions must be 1 or 2".into()));
    }
    let mut out = Vec::new();
    for u in 0..spec.users {
        let params = gen_user_params(dataset_user_seed(spec, u));
        for s in 1..=spec.sessions {
            out.push(gen_recording(&params, &user_name(u), s, spec.duration_min, spec.rate_hz, dataset_session_seed(spec, u, s))?);
        }
    }
    Ok(out)
}

/// Generate and write a dataset as canonical CSV files.
pub fn write_dataset(spec: &DatasetSpec, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for rec in gen_dataset(spec)? {
        let path = dir.join(recording_file_name(rec.user_id(), rec.session_id()));
        save_recording(&rec, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{encode, EncodingKind};

    #[test]
    fn same_seed_same_params() {
        assert_eq!(gen_user_params(5), gen_user_params(5));
    }

    #[test]
    fn distinct_seeds_distinct_params() {
        let ps: Vec<_> = (0..10).map(gen_user_params).collect();
        for i in 0..10 {
            for j in i + 1..10 {
                assert_ne!(ps[i].frequencies(), ps[j].frequencies());
            }
        }
    }

    #[test]
    fn frequencies_below_nyquist() {
        for s in 0..50 {
            assert!(gen_user_params(s).frequencies().iter().all(|&f| f > 0.0 && f < 7.5));
        }
    }

    #[test]
    fn still_style_encodes_to_rest() {
        let rec = gen_recording(&SyntheticUserParams::still(3), "a", 1, 0.2, 15.0, 9).unwrap();
        for kind in [EncodingKind::Brv, EncodingKind::Bra] {
            let seq = encode(&rec, kind).unwrap();
            for f in &seq.frames {
                for off in [0, 7] {
                    assert_eq!(&f[off..off + 3], &[0.0, 0.0, 0.0]);
                }
                for off in [3, 10, 14] {
                    assert_eq!(&f[off..off + 4], &[0.0, 0.0, 0.0, 1.0]);
                }
            }
        }
    }

    #[test]
    fn uniform_timestamps_and_unit_quaternions() {
        let rec = gen_recording(&gen_user_params(1), "a", 1, 0.5, 15.0, 2).unwrap();
        assert_eq!(rec.len(), 450);
        for (k, f) in rec.frames().iter().enumerate() {
            assert_eq!(f.timestamp, k as f64 * (1.0 / 15.0));
            for p in f.poses() {
                assert!((p.rotation.norm() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sessions_differ() {
        let p = gen_user_params(4);
        let a = gen_recording(&p, "a", 1, 0.2, 15.0, 1).unwrap();
        let b = gen_recording(&p, "a", 2, 0.2, 15.0, 2).unwrap();
        assert_ne!(a.frames()[10].hmd, b.frames()[10].hmd);
        assert_eq!(a, gen_recording(&p, "a", 1, 0.2, 15.0, 1).unwrap());
    }
}
