//! Property tests for the pipeline invariants.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xrid::encoding::{differentiate, encode, EncodingKind, FeatureSequence, FEATURES, POSITION_OFFSETS};
use xrid::identify::{metrics, vote};
use xrid::motion::{load_recording, resample, save_recording, travel_stats, trim, ColumnMap, Pose, Recording};
use xrid::nn::{softmax_row, Checkpoint, Model, ModelConfig, Tensor, TrainMeta};
use xrid::quat::{quat_delta, swing_twist, Quaternion, Vec3};
use xrid::sampling::{
    apply_norm, fit_norm_stats, select_enrollment, split_sessions, windows, NormStats, Span, SplitSpec, WindowSpec,
};
use xrid::synth::{gen_recording, gen_user_params};

fn recording(seed: u64, minutes: f64) -> Recording {
    gen_recording(&gen_user_params(seed), "p", 1, minutes, 15.0, seed ^ 0xABCD).unwrap()
}

fn max_pose_diff(a: &Recording, b: &Recording) -> f64 {
    let mut worst: f64 = 0.0;
    for (fa, fb) in a.frames().iter().zip(b.frames()) {
        for (pa, pb) in fa.poses().iter().zip(fb.poses()) {
            let d = pa.position - pb.position;
            worst = worst.max(d.x.abs()).max(d.y.abs()).max(d.z.abs());
            // Sign-insensitive rotation distance.
            let dot = pa.rotation.dot(pb.rotation).abs();
            worst = worst.max((1.0 - dot.min(1.0)).abs());
        }
    }
    worst
}

fn unit(v: [f64; 4]) -> Option<Quaternion> {
    Quaternion::new(v[0], v[1], v[2], v[3]).normalized().ok().filter(|q| q.is_finite())
}

fn arb_quat() -> impl Strategy<Value = Quaternion> {
    prop::array::uniform4(-1.0f64..1.0).prop_filter_map("non-degenerate", |v| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.05 {
            unit(v)
        } else {
            None
        }
    })
}

fn close_up_to_sign(a: Quaternion, b: Quaternion, tol: f64) -> bool {
    let d = |s: f64| {
        (a.x - s * b.x).abs().max((a.y - s * b.y).abs()).max((a.z - s * b.z).abs()).max((a.w - s * b.w).abs())
    };
    d(1.0).min(d(-1.0)) < tol
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn delta_recomposes(p in arb_quat(), q in arb_quat()) {
        prop_assert!(close_up_to_sign(p * quat_delta(p, q), q, 1e-9));
    }

    #[test]
    fn swing_twist_recomposes(q in arb_quat()) {
        let (twist, swing) = swing_twist(q, Vec3::Y);
        prop_assert!(close_up_to_sign(twist * swing, q, 1e-9));
        prop_assert!(twist.x.abs() < 1e-12 && twist.z.abs() < 1e-12);
        prop_assert!(swing.y.abs() < 1e-9);
    }

    #[test]
    fn resample_is_idempotent_on_uniform_input(seed in 0u64..1000) {
        let rec = recording(seed, 0.2);
        let again = resample(&rec, 15.0).unwrap();
        prop_assert_eq!(again.len(), rec.len());
        prop_assert!(max_pose_diff(&rec, &again) < 1e-9);
    }

    #[test]
    fn trim_zero_is_identity(seed in 0u64..1000) {
        let rec = recording(seed, 0.1);
        prop_assert_eq!(trim(&rec, 0.0, 0.0).unwrap(), rec);
    }

    #[test]
    fn travel_stats_ignore_yaw_and_translation(seed in 0u64..1000, yaw in -3.1f64..3.1, dx in -300.0f64..300.0, dz in -300.0f64..300.0) {
        let rec = recording(seed, 0.2);
        let r = Quaternion::from_axis_angle(Vec3::Y, yaw);
        let moved = rec.map_poses(|p| Pose::new(r.rotate(p.position) + Vec3::new(dx, 5.0, dz), r * p.rotation));
        let (a, b) = (travel_stats(&rec), travel_stats(&moved));
        prop_assert!((a.total_horizontal_path_m - b.total_horizontal_path_m).abs() < 1e-9);
    }

    #[test]
    fn csv_round_trip_is_lossless(seed in 0u64..1000) {
        let dir = tempfile::tempdir().unwrap();
        let rec = recording(seed, 0.05);
        let path = dir.path().join("p_1.csv");
        save_recording(&rec, &path).unwrap();
        let back = load_recording(&path, &ColumnMap::default()).unwrap();
        prop_assert!(max_pose_diff(&rec, &back) < 1e-9);
        prop_assert_eq!(back.len(), rec.len());
    }

    #[test]
    fn position_differences_are_linear(seed in 0u64..1000, a in -5.0f64..5.0) {
        let br = encode(&recording(seed, 0.05), EncodingKind::Br).unwrap();
        let mut scaled = br.clone();
        for f in &mut scaled.frames {
            for &o in &POSITION_OFFSETS {
                for v in &mut f[o..o + 3] {
                    *v *= a;
                }
            }
        }
        let (d, ds) = (differentiate(&br).unwrap(), differentiate(&scaled).unwrap());
        for (f, g) in d.frames.iter().zip(&ds.frames) {
            for &o in &POSITION_OFFSETS {
                for k in o..o + 3 {
                    prop_assert!((a * f[k] - g[k]).abs() < 1e-9 * (1.0 + g[k].abs()));
                }
            }
        }
    }

    #[test]
    fn encodings_lose_the_declared_frames(seed in 0u64..1000) {
        let rec = recording(seed, 0.05);
        for kind in [EncodingKind::Br, EncodingKind::Brv, EncodingKind::Bra] {
            let seq = encode(&rec, kind).unwrap();
            prop_assert_eq!(seq.len(), rec.len() - kind.frames_lost());
            prop_assert!(seq.frames.iter().all(|f| f.len() == FEATURES && f.iter().all(|v| v.is_finite())));
        }
    }

    #[test]
    fn window_count_formula(n in 0usize..2000, len in 1usize..400, stride in 1usize..50) {
        let seq = FeatureSequence {
            user_id: "w".into(),
            session_id: 1,
            rate: 15.0,
            kind: EncodingKind::Br,
            offset: 7,
            frames: (0..n).map(|i| [i as f64; FEATURES]).collect(),
        };
        let spec = WindowSpec { length_frames: len, stride_frames: stride, rate_hz: 15.0 };
        let expected = if n < len { 0 } else { (n - len) / stride + 1 };
        let ws: Vec<_> = windows(&seq, &spec, 0).collect();
        prop_assert_eq!(ws.len(), expected);
        for (k, w) in ws.iter().enumerate() {
            prop_assert_eq!(w.origin.start_frame, 7 + k * stride);
            prop_assert_eq!(w.matrix[0], (k * stride) as f64);
            prop_assert_eq!(w.length_frames(), len);
        }
    }

    #[test]
    fn splits_are_disjoint_and_cover_session_one(frames in 1500usize..3000, tail in 0.1f64..0.5, t_enr in 0.05f64..0.5, seed in 0u64..100) {
        let seq = |user: &str, session: u8| FeatureSequence {
            user_id: user.into(),
            session_id: session,
            rate: 15.0,
            kind: EncodingKind::Bra,
            offset: 0,
            frames: vec![[0.0; FEATURES]; frames],
        };
        let data = vec![seq("a", 1), seq("a", 2), seq("b", 1), seq("b", 2)];
        let s = split_sessions(&data, &SplitSpec { validation_tail_min: tail, enrollment: Span::All, enrollment_seed: seed }).unwrap();
        for (t, v) in s.train.iter().zip(&s.validation) {
            prop_assert_eq!(t.offset + t.len(), v.offset);
            prop_assert_eq!(v.offset + v.len(), frames);
        }
        let e = select_enrollment(&s.train[0], Span::Minutes(t_enr), seed).unwrap();
        prop_assert!((e.duration_min() - t_enr).abs() <= 1.0 / (15.0 * 60.0));
        prop_assert!(e.offset + e.len() <= s.train[0].offset + s.train[0].len());
    }

    #[test]
    fn standardized_training_windows_have_zero_mean(seed in 0u64..1000) {
        let seq = encode(&recording(seed, 0.2), EncodingKind::Bra).unwrap();
        let spec = WindowSpec { length_frames: 20, stride_frames: 20, rate_hz: 15.0 };
        let ws: Vec<_> = windows(&seq, &spec, 0).collect();
        let stats = fit_norm_stats(ws.iter()).unwrap();
        let mut sum = [0.0; FEATURES];
        let mut count = 0.0;
        for w in &ws {
            for row in apply_norm(w, &stats).rows() {
                for j in 0..FEATURES {
                    sum[j] += row[j];
                }
                count += 1.0;
            }
        }
        prop_assert!(sum.iter().all(|s| (s / count).abs() < 1e-9));
        prop_assert!(stats.std.iter().all(|&s| s >= 1e-8));
    }

    #[test]
    fn softmax_sums_to_one(row in prop::collection::vec(-50.0f64..50.0, 1..80)) {
        let (p, _) = softmax_row(&row);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn votes_conserve_and_ignore_order(rows in prop::collection::vec(prop::collection::vec(0u8..9, 4), 1..30), seed in 0u64..1000) {
        // Multiples of 1/8 keep cumulative sums exact under any order.
        let probs: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&v| v as f64 / 8.0).collect()).collect();
        let a = vote(&probs, 4);
        prop_assert_eq!(a.vote_counts.iter().sum::<usize>(), probs.len());
        let mut shuffled = probs.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(vote(&shuffled, 4), a);
    }

    #[test]
    fn perfect_predictions_score_one(labels in prop::collection::vec(0usize..6, 1..100)) {
        let pairs: Vec<(usize, usize)> = labels.iter().map(|&l| (l, l)).collect();
        let m = metrics(&pairs, 6).unwrap();
        prop_assert_eq!(m.macro_accuracy, 1.0);
        prop_assert_eq!(m.min_accuracy, 1.0);
    }

    #[test]
    fn synthetic_recordings_are_well_formed(seed in 0u64..10_000) {
        let rec = recording(seed, 0.1);
        for (k, f) in rec.frames().iter().enumerate() {
            prop_assert_eq!(f.timestamp, k as f64 * (1.0 / 15.0));
            for p in f.poses() {
                prop_assert!((p.rotation.norm() - 1.0).abs() < 1e-9);
            }
        }
    }
}

fn random_batch(seed: u64, b: usize, t: usize) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![b, t, FEATURES], (0..b * t * FEATURES).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn small_config(gru: bool, classes: usize) -> ModelConfig {
    if gru {
        ModelConfig::gru(EncodingKind::Bra, classes, 6, 2, 0.3, 1e-3)
    } else {
        ModelConfig::cnn(EncodingKind::Bra, classes, 3, vec![5, 7], 0.3, 1e-3)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn permuting_head_rows_permutes_logits(gru in any::<bool>(), seed in 0u64..1000) {
        let classes = 5;
        let model = Model::<f64>::new(small_config(gru, classes), seed).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let mut permuted = model.clone();
        let w = permuted.params.get_mut("head.weight").unwrap();
        let inputs = w.shape[0];
        let orig = model.params.get("head.weight").unwrap();
        for i in 0..inputs {
            for (new, &old) in perm.iter().enumerate() {
                w.data[i * classes + new] = orig.data[i * classes + old];
            }
        }
        let b = permuted.params.get_mut("head.bias").unwrap();
        let ob = model.params.get("head.bias").unwrap();
        for (new, &old) in perm.iter().enumerate() {
            b.data[new] = ob.data[old];
        }
        let x = random_batch(seed, 3, 9);
        let (l, lp) = (model.logits(&x).unwrap(), permuted.logits(&x).unwrap());
        for r in 0..3 {
            for (new, &old) in perm.iter().enumerate() {
                prop_assert!((lp.data[r * classes + new] - l.data[r * classes + old]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inference_is_a_pure_function(gru in any::<bool>(), seed in 0u64..1000) {
        let model = Model::<f64>::new(small_config(gru, 4), seed).unwrap();
        let x = random_batch(seed + 1, 2, 7);
        prop_assert_eq!(model.logits(&x).unwrap(), model.logits(&x).unwrap());
    }

    #[test]
    fn checkpoints_round_trip(gru in any::<bool>(), seed in 0u64..1000, layer_norm in any::<bool>()) {
        let mut config = small_config(gru, 3);
        config.layer_norm = layer_norm;
        let model = Model::<f64>::new(config, seed).unwrap();
        let mut norm = NormStats::identity();
        norm.mean[3] = 0.125 + seed as f64;
        norm.std[17] = 1.0 / 3.0;
        let meta = TrainMeta { epoch: 3, val_min_accuracy: 0.5, seed, epochs_run: 9, users: vec!["x".into(), "y".into(), "z".into()], window_frames: 7, rate_hz: 15.0 };
        let ckpt = Checkpoint { model, norm, meta };
        prop_assert_eq!(Checkpoint::<f64>::from_bytes(&ckpt.to_bytes()).unwrap(), ckpt);
    }
}
