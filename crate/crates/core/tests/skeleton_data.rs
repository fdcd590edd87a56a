use action_capsules::skeleton::*;
use action_capsules::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_sample(rng: &mut impl Rng, frames: usize, bodies: usize, joints: usize) -> RawSkeletonSample {
    let frames = (0..frames)
        .map(|_| {
            (0..bodies)
                .map(|_| Body {
                    joints: (0..joints)
                        .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(1.0..5.0)])
                        .collect(),
                })
                .collect()
        })
        .collect();
    RawSkeletonSample {
        frames,
        joints_per_body: joints,
        label: 3,
        meta: SampleMeta::default(),
    }
}

fn padded_mass(t: &SkeletonTensor, sample: &RawSkeletonSample, cfg: &PreprocessConfig) -> f64 {
    // Absolute mass in every (frame, body) slot that had no recorded data.
    let sampled = uniform_sample(cfg.max_frames, cfg.sample_frames);
    let (start, end) = center_crop(sampled.len(), cfg.crop_frames).unwrap();
    let mut mass = 0.0;
    for (to, &src) in sampled[start..end].iter().enumerate() {
        for b in 0..cfg.bodies {
            let recorded = src < sample.frames.len().min(cfg.max_frames) && b < sample.frames[src].len();
            if recorded {
                continue;
            }
            for c in 0..3 {
                for j in 0..t.joints() {
                    mass += t.data.at(&[c, to, j, b]).abs();
                }
            }
        }
    }
    mass
}

#[test]
fn ntu_write_parse_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut sample = random_sample(&mut rng, 3, 2, NTU_JOINTS);
    sample.frames[1].pop();
    let text = write_ntu_skeleton(&sample);
    let parsed = parse_ntu_skeleton(&text).unwrap();
    assert_eq!(parsed.frames, sample.frames);
    assert_eq!(parsed.joints_per_body, NTU_JOINTS);
    let again = parse_ntu_skeleton(&write_ntu_skeleton(&parsed)).unwrap();
    assert_eq!(again, parsed);
}

#[test]
fn full_length_two_body_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sample = random_sample(&mut rng, 300, 2, NTU_JOINTS);
    let t = preprocess(&sample, &PreprocessConfig::default()).unwrap();
    assert_eq!(t.data.shape(), &[3, 128, 25, 2]);
    assert_eq!(t.label, 3);
}

#[test]
fn short_single_body_sample_is_zero_padded() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sample = random_sample(&mut rng, 40, 1, NTU_JOINTS);
    let cfg = PreprocessConfig::default();
    let t = preprocess(&sample, &cfg).unwrap();
    // Sampled frames are 0,2,..,298 and the crop keeps 22..276, so only
    // output frames mapping to raw frames < 40 (raw 22..38) hold data.
    for to in 0..128 {
        let src = 2 * (to + 11);
        let mass: f64 = (0..3)
            .flat_map(|c| (0..25).map(move |j| (c, j)))
            .map(|(c, j)| t.data.at(&[c, to, j, 0]).abs())
            .sum();
        assert_eq!(mass > 0.0, src < 40, "frame {to}");
        for c in 0..3 {
            for j in 0..25 {
                assert_eq!(t.data.at(&[c, to, j, 1]), 0.0);
            }
        }
    }
    assert_eq!(padded_mass(&t, &sample, &cfg), 0.0);
}

#[test]
fn preprocessing_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sample = random_sample(&mut rng, 97, 2, NTU_JOINTS);
    let cfg = PreprocessConfig::default();
    assert_eq!(preprocess(&sample, &cfg).unwrap(), preprocess(&sample, &cfg).unwrap());
}

#[test]
fn origin_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sample = random_sample(&mut rng, 10, 2, NTU_JOINTS);
    let once = normalize_origin(&sample, 1).unwrap();
    assert_eq!(once.frames[0][0].joints[1], [0.0; 3]);
    assert_eq!(normalize_origin(&once, 1).unwrap(), once);

    let mut shifted = sample.clone();
    for body in shifted.frames.iter_mut().flatten() {
        for j in body.joints.iter_mut() {
            j[0] += 1.0;
            j[1] += 2.0;
            j[2] += 3.0;
        }
    }
    let a = normalize_origin(&shifted, 1).unwrap();
    for (fa, fb) in a.frames.iter().flatten().zip(once.frames.iter().flatten()) {
        for (ja, jb) in fa.joints.iter().zip(&fb.joints) {
            for k in 0..3 {
                assert!((ja[k] - jb[k]).abs() < 1e-12);
            }
        }
    }

    let empty = RawSkeletonSample {
        frames: vec![vec![]; 3],
        joints_per_body: NTU_JOINTS,
        label: 0,
        meta: SampleMeta::default(),
    };
    assert!(matches!(normalize_origin(&empty, 1), Err(Error::Contract(_))));
    assert!(normalize_origin(&sample, 25).is_err());
}

#[test]
fn origin_reference_skips_leading_empty_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sample = random_sample(&mut rng, 6, 1, NUCLA_JOINTS);
    sample.frames[0].clear();
    sample.frames[1].clear();
    let out = normalize_origin(&sample, 1).unwrap();
    assert_eq!(out.frames[2][0].joints[1], [0.0; 3]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn preprocess_shape_and_exact_padding(frames in 1usize..400, bodies in 1usize..=2, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sample = random_sample(&mut rng, frames, 2, NTU_JOINTS);
        for f in sample.frames.iter_mut() {
            f.truncate(bodies);
        }
        let cfg = PreprocessConfig::default();
        let t = preprocess(&sample, &cfg).unwrap();
        prop_assert_eq!(t.data.shape(), &[3, 128, 25, 2]);
        prop_assert_eq!(padded_mass(&t, &sample, &cfg), 0.0);
        prop_assert!(t.data.all_finite());
    }

    #[test]
    fn normalize_origin_idempotent(frames in 1usize..30, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample = random_sample(&mut rng, frames, 2, NTU_JOINTS);
        let once = normalize_origin(&sample, 1).unwrap();
        prop_assert_eq!(normalize_origin(&once, 1).unwrap(), once);
    }

    #[test]
    fn ntu_round_trip(frames in 1usize..5, bodies in 0usize..=2, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample = random_sample(&mut rng, frames, bodies, NTU_JOINTS);
        let parsed = parse_ntu_skeleton(&write_ntu_skeleton(&sample)).unwrap();
        prop_assert_eq!(parsed.frames, sample.frames);
    }

    #[test]
    fn uniform_sample_properties(t_in in 1usize..500, t_target in 1usize..300) {
        let idx = uniform_sample(t_in, t_target);
        prop_assert_eq!(idx.len(), t_target);
        prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(idx.iter().all(|&i| i < t_in));
    }
}

#[test]
fn nucla_json_sample() {
    let frame: Vec<[f64; 3]> = (0..20).map(|j| [j as f64, 0.5, 2.0]).collect();
    let text = serde_json::json!({"label": 4, "camera": 3, "subject": 7, "frames": [frame, frame]}).to_string();
    let sample = parse_nucla_json(&text).unwrap();
    assert_eq!(sample.label, 4);
    assert_eq!(sample.meta.camera, Some(3));
    assert_eq!(sample.frames.len(), 2);
    let cfg = PreprocessConfig {
        bodies: 1,
        ..PreprocessConfig::default()
    };
    assert_eq!(preprocess(&sample, &cfg).unwrap().data.shape(), &[3, 128, 20, 1]);
    assert!(parse_nucla_json("{\"label\": 1}").is_err());
}

fn tagged(subject: Option<u32>, camera: Option<u32>) -> SkeletonTensor {
    SkeletonTensor {
        data: action_capsules::tensor::Tensor::zeros(&[3, 4, 25, 2]),
        label: 0,
        meta: SampleMeta {
            subject,
            camera,
            ..SampleMeta::default()
        },
    }
}

#[test]
fn protocol_splits() {
    let (train, test) = split_protocol(vec![tagged(Some(1), Some(1))], Protocol::Xview).unwrap();
    assert!(train.is_empty() && test.len() == 1);
    let (train, test) = split_protocol(vec![tagged(Some(1), Some(3))], Protocol::NuclaCam).unwrap();
    assert!(train.is_empty() && test.len() == 1);
    let (train, test) = split_protocol(vec![tagged(Some(3), Some(2))], Protocol::Xsub).unwrap();
    assert!(train.is_empty() && test.len() == 1);
    assert!(matches!(
        split_protocol(vec![tagged(None, Some(2))], Protocol::Xsub),
        Err(Error::Contract(_))
    ));
    assert!(split_protocol(vec![tagged(Some(1), None)], Protocol::Xview).is_err());
}

#[test]
fn protocol_split_is_a_partition() {
    let samples: Vec<_> = (0..120)
        .map(|k| {
            let mut s = tagged(Some(1 + k % 40), Some(1 + k % 3));
            s.label = k as usize;
            s
        })
        .collect();
    for protocol in [Protocol::Xsub, Protocol::Xview, Protocol::NuclaCam] {
        let (train, test) = split_protocol(samples.clone(), protocol).unwrap();
        let mut labels: Vec<usize> = train.iter().chain(&test).map(|s| s.label).collect();
        labels.sort();
        assert_eq!(labels, (0..120).collect::<Vec<_>>());
        assert!(!train.is_empty() && !test.is_empty());
    }
    let (train, _) = split_protocol(samples, Protocol::Xsub).unwrap();
    assert_eq!(train.len(), 3 * 20);
}

#[test]
fn cached_tensor_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        samples_per_class: 2,
        ..SynthSpec::default()
    };
    let data = synth_dataset(&spec, 5).unwrap();
    save_dataset(dir.path(), &data).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded, data);

    let one = dir.path().join("x.actc");
    write_cached(&one, &data[1]).unwrap();
    let bytes = std::fs::read(&one).unwrap();
    assert_eq!(&bytes[..5], b"ACTC1");
    assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 3);
    assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 128);
    assert_eq!(i32::from_le_bytes(bytes[21..25].try_into().unwrap()), 1);
    assert_eq!(bytes.len(), 25 + 8 * 3 * 128 * 25 * 2);
    std::fs::write(&one, &bytes[..100]).unwrap();
    assert!(matches!(read_cached(&one), Err(Error::Format { .. })));
}

#[test]
fn synthetic_dataset_is_reproducible_and_balanced() {
    let spec = SynthSpec {
        classes: vec!["arm-wave".into(), "translate".into()],
        samples_per_class: 8,
        ..SynthSpec::default()
    };
    let a = synth_dataset(&spec, 7).unwrap();
    let b = synth_dataset(&spec, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 16);
    assert_eq!(a.iter().filter(|s| s.label == 0).count(), 8);
    assert!(a.iter().all(|s| s.data.shape() == [3, 128, 25, 2]));
    assert_ne!(synth_dataset(&spec, 8).unwrap(), a);
}

#[test]
fn second_body_presence_by_class() {
    let spec = SynthSpec {
        classes: vec!["arm-wave".into(), "translate".into(), "approach".into()],
        samples_per_class: 3,
        ..SynthSpec::default()
    };
    for s in synth_dataset(&spec, 9).unwrap() {
        let mass: f64 = (0..3)
            .flat_map(|c| (0..128).flat_map(move |t| (0..25).map(move |j| [c, t, j, 1])))
            .map(|i| s.data.at(&i).abs())
            .sum();
        assert_eq!(mass > 0.0, s.label == 2, "label {}", s.label);
    }
}

fn exact_spec() -> SynthSpec {
    SynthSpec {
        noise: 0.0,
        variation: 0.0,
        cycles: 3.0,
        amplitude: 0.3,
        speed: 0.005,
        ..SynthSpec::default()
    }
}

#[test]
fn oscillation_statistics_match_parameters() {
    let spec = exact_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (generator, joints, axis) in [
        (Generator::ArmWave, vec![9, 10, 11, 23, 24], 1),
        (Generator::LegSwing, vec![17, 18, 19], 2),
    ] {
        for frames in [60, 150, 301] {
            let raw = generate_raw(generator, &spec, frames, &mut rng).unwrap();
            for &j in &joints {
                let xs: Vec<f64> = raw.frames.iter().map(|f| f[0].joints[j][axis]).collect();
                let mean = xs.iter().sum::<f64>() / frames as f64;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / frames as f64;
                let amplitude = (2.0 * var).sqrt();
                assert!((amplitude - spec.amplitude).abs() < 1e-9, "{generator:?} joint {j}: {amplitude}");
                // Joint 0 never moves, so it locates the rest pose.
                let rest = raw.frames[0][0].joints[0][axis] + REST_POSE[j][axis] - REST_POSE[0][axis];
                assert!((mean - rest).abs() < 1e-9, "{generator:?} joint {j}: mean {mean} rest {rest}");
            }
            // Joints outside the moving group stay still.
            let still: Vec<f64> = raw.frames.iter().map(|f| f[0].joints[3][axis]).collect();
            assert!(still.iter().all(|&y| y == still[0]));
        }
    }
}

#[test]
fn translation_speed_matches_parameters() {
    let spec = exact_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let raw = generate_raw(Generator::Translate, &spec, 200, &mut rng).unwrap();
    for t in 1..200 {
        let a = raw.frames[t - 1][0].joints[5];
        let b = raw.frames[t][0].joints[5];
        let step = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
        assert!((step - spec.speed).abs() < 1e-9, "frame {t}: {step}");
    }
    let approach = generate_raw(Generator::Approach, &spec, 100, &mut rng).unwrap();
    let gap = |t: usize| approach.frames[t][1].joints[0][0] - approach.frames[t][0].joints[0][0];
    assert!((gap(0) - spec.approach_distance).abs() < 1e-9);
    assert!((gap(0) - gap(99) - 99.0 * spec.speed).abs() < 1e-9);
}
