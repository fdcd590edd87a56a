use action_capsules::params::{ParamSet, ParamVars};
use action_capsules::restcn::*;
use action_capsules::tensor::{finite_difference_check_many, Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn config(k: usize, channels: &[usize]) -> ResTcnConfig {
    ResTcnConfig {
        k,
        channels: channels.to_vec(),
        ..ResTcnConfig::default()
    }
}

fn init(cfg: &ResTcnConfig, c_in: usize, seed: u64) -> ParamSet {
    let mut params = ParamSet::new();
    init_res_tcn(&mut params, cfg, c_in, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    params
}

fn run(params: &ParamSet, cfg: &ResTcnConfig, x: &Tensor) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let blocks = BlockVars::bind_all(&vars, cfg).unwrap();
    let xv = tape.leaf(x.clone());
    let out = stage_features(&mut tape, xv, &blocks, cfg).unwrap();
    out.into_iter().map(|v| tape.value(v).clone()).collect()
}

// Scalar reference implementations, independent of the tape.

fn ref_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let [nb, ci, t, v] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k as isize - 1) / 2;
    let mut y = Tensor::zeros(&[nb, co, t, v]);
    for n in 0..nb {
        for o in 0..co {
            for tt in 0..t {
                for j in 0..v {
                    let mut acc = b.at(&[o]);
                    for i in 0..ci {
                        for q in 0..k {
                            let src = tt as isize + q as isize - pad;
                            if src >= 0 && (src as usize) < t {
                                acc += w.at(&[o, i, q, 0]) * x.at(&[n, i, src as usize, j]);
                            }
                        }
                    }
                    y.set(&[n, o, tt, j], acc);
                }
            }
        }
    }
    y
}

fn ref_relu(x: &Tensor) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|a| a.max(0.0)).collect()).unwrap()
}

fn ref_add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
}

fn ref_pool(x: &Tensor, window: usize) -> Tensor {
    let [nb, c, t, v] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let mut y = Tensor::zeros(&[nb, c, t / window, v]);
    for n in 0..nb {
        for ch in 0..c {
            for to in 0..t / window {
                for j in 0..v {
                    let m = (0..window).map(|q| x.at(&[n, ch, to * window + q, j])).fold(f64::NEG_INFINITY, f64::max);
                    y.set(&[n, ch, to, j], m);
                }
            }
        }
    }
    y
}

#[test]
fn zero_weights_pass_the_residual_through() {
    let cfg = config(3, &[2]);
    let mut params = init(&cfg, 2, 1);
    for t in params.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    let x = Tensor::full(&[1, 2, 8, 3], 1.0);
    let y = &run(&params, &cfg, &x)[0];
    assert_eq!(y.shape(), &[1, 2, 4, 3]);
    assert!(y.data().iter().all(|&a| a == 1.0));
}

#[test]
fn block_matches_reference_composition() {
    let cfg = config(3, &[4]);
    let params = init(&cfg, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 2, 8, 3], &mut rng);
    let y = &run(&params, &cfg, &x)[0];

    let p = |n: &str| params.get(n).unwrap();
    let h = ref_relu(&ref_conv(&x, p("tcn0.conv0.weight"), p("tcn0.conv0.bias")));
    let h = ref_relu(&ref_conv(&h, p("tcn0.conv1.weight"), p("tcn0.conv1.bias")));
    let h = ref_conv(&h, p("tcn0.conv2.weight"), p("tcn0.conv2.bias"));
    let shortcut = ref_conv(&x, p("tcn0.proj.weight"), p("tcn0.proj.bias"));
    let expected = ref_pool(&ref_relu(&ref_add(&h, &shortcut)), 2);
    assert_eq!(y.shape(), &[2, 4, 4, 3]);
    assert!(y.max_abs_diff(&expected) < 1e-12);
}

#[test]
fn identity_shortcut_when_widths_match() {
    let cfg = config(3, &[3, 3]);
    let params = init(&cfg, 3, 4);
    assert!(params.get("tcn0.proj.weight").is_err());
    assert!(params.get("tcn1.proj.weight").is_err());
    let cfg = config(3, &[3, 5]);
    let params = init(&cfg, 3, 4);
    assert_eq!(params.get("tcn1.proj.weight").unwrap().shape(), &[5, 3, 1, 1]);
}

#[test]
fn default_stage_extents() {
    let cfg = ResTcnConfig::default();
    let params = init(&cfg, 3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[1, 3, 128, 50], &mut rng);
    let stages = run(&params, &cfg, &x);
    let extents: Vec<usize> = stages.iter().map(|s| s.shape()[2]).collect();
    assert_eq!(extents, vec![64, 32, 16, 8]);
    assert_eq!(cfg.stage_frames(128), extents);
    let widths: Vec<usize> = stages.iter().map(|s| s.shape()[1]).collect();
    assert_eq!(widths, vec![64, 64, 128, 256]);
    assert!(stages.iter().all(|s| s.shape()[3] == 50));
}

#[test]
fn zero_input_gives_zero_features() {
    let cfg = config(5, &[3, 4, 4, 6]);
    let params = init(&cfg, 3, 7);
    let x = Tensor::zeros(&[2, 3, 32, 5]);
    for s in run(&params, &cfg, &x) {
        assert!(s.data().iter().all(|&a| a == 0.0));
    }
}

#[test]
fn batch_norm_switch_adds_parameters() {
    let cfg = ResTcnConfig {
        batch_norm: true,
        ..config(3, &[2, 4])
    };
    let params = init(&cfg, 3, 8);
    assert_eq!(params.get("tcn1.bn2.gamma").unwrap().data(), &[1.0; 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[3, 3, 8, 2], &mut rng);
    let out = run(&params, &cfg, &x);
    assert_eq!(out[1].shape(), &[3, 4, 2, 2]);
    assert!(out.iter().all(Tensor::all_finite));
}

#[test]
fn rejects_even_kernel() {
    assert!(config(4, &[2]).validate().is_err());
    assert!(config(3, &[]).validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn joint_permutation_equivariance(seed in 0u64..10_000) {
        let cfg = config(3, &[3, 4, 4, 5]);
        let params = init(&cfg, 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let v = 6;
        let x = random(&[2, 3, 16, v], &mut rng);
        let mut perm: Vec<usize> = (0..v).collect();
        perm.shuffle(&mut rng);
        let permute = |t: &Tensor| {
            let s = t.shape().to_vec();
            let mut out = Tensor::zeros(&s);
            for n in 0..s[0] {
                for c in 0..s[1] {
                    for tt in 0..s[2] {
                        for j in 0..v {
                            out.set(&[n, c, tt, j], t.at(&[n, c, tt, perm[j]]));
                        }
                    }
                }
            }
            out
        };
        let base = run(&params, &cfg, &x);
        let moved = run(&params, &cfg, &permute(&x));
        for (a, b) in base.iter().zip(&moved) {
            prop_assert_eq!(&permute(a), b);
        }
    }
}

fn gradient_error(cfg: &ResTcnConfig, seed: u64) -> f64 {
    // Zero biases put dead units exactly on the relu kink, where central
    // differences are meaningless; evaluate at a generic point instead.
    let mut params = init(cfg, 2, 100 + seed);
    let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
    for t in params.tensors_mut() {
        if t.rank() == 1 {
            *t = random(t.shape(), &mut rng);
        }
    }
    let x = random(&[1, 2, 16, 2], &mut rng);
    let last = *cfg.channels.last().unwrap();
    let t_out = cfg.stage_frames(16)[cfg.channels.len() - 1];
    let weights = random(&[1, last, t_out, 2], &mut rng);
    let mut inputs = vec![x, weights];
    inputs.extend(params.tensors().iter().cloned());
    finite_difference_check_many(
        |tape, vars| {
            let bound = ParamVars::from_vars(&params, vars[2..].to_vec())?;
            let blocks = BlockVars::bind_all(&bound, cfg)?;
            let out = stage_features(tape, vars[0], &blocks, cfg)?;
            let y = tape.mul(*out.last().unwrap(), vars[1])?;
            Ok(tape.sum(y))
        },
        &inputs,
        1e-5,
    )
    .unwrap()
}

#[test]
fn gradient_through_four_blocks() {
    let cfg = config(3, &[2, 3, 3, 4]);
    for seed in 0..3 {
        let err = gradient_error(&cfg, seed);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

