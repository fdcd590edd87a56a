use action_capsules::capsule::*;
use action_capsules::tensor::{finite_difference_check_many, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut impl Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn cfg(n: usize, d: usize, r: usize, alpha: f64) -> CapsuleConfig {
    CapsuleConfig {
        primary_dim: 3,
        capsule_dim: d,
        classes: n,
        routing_iters: r,
        alpha,
    }
}

fn route(u_hat: &Tensor, b_init: &Tensor, cfg: &CapsuleConfig) -> (RoutingState, Tensor) {
    let mut tape = Tape::new();
    let u = tape.leaf(u_hat.clone());
    let b = tape.leaf(b_init.clone());
    let state = dynamic_routing(&mut tape, u, b, cfg).unwrap();
    let v = tape.value(state.v).clone();
    (state, v)
}

// Scalar reference of the routing recurrence for one sample.
fn squash_vec(s: &[f64]) -> Vec<f64> {
    let n2: f64 = s.iter().map(|a| a * a).sum();
    if n2 == 0.0 {
        return vec![0.0; s.len()];
    }
    s.iter().map(|a| a * n2.sqrt() / (1.0 + n2)).collect()
}

fn reference_routing(u_hat: &[Vec<Vec<f64>>], b_init: &[Vec<f64>], r: usize, alpha: f64) -> Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let nv = u_hat.len();
    let n = b_init[0].len();
    let d = u_hat[0][0].len();
    let mut b = b_init.to_vec();
    let mut out = Vec::new();
    for it in 0..r {
        let c: Vec<Vec<f64>> = b
            .iter()
            .map(|row| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.iter().map(|x| x / z).collect()
            })
            .collect();
        let v: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let s: Vec<f64> = (0..d).map(|k| (0..nv).map(|i| c[i][j] * u_hat[i][j][k]).sum()).collect();
                squash_vec(&s)
            })
            .collect();
        if it + 1 < r {
            for i in 0..nv {
                for j in 0..n {
                    b[i][j] += alpha * (0..d).map(|k| u_hat[i][j][k] * v[j][k]).sum::<f64>();
                }
            }
        }
        out.push((c, v));
    }
    out
}

fn nested(u_hat: &Tensor, b: usize) -> Vec<Vec<Vec<f64>>> {
    let [_, nv, n, d] = [u_hat.shape()[0], u_hat.shape()[1], u_hat.shape()[2], u_hat.shape()[3]];
    (0..nv)
        .map(|i| (0..n).map(|j| (0..d).map(|k| u_hat.at(&[b, i, j, k])).collect()).collect())
        .collect()
}

fn rows(b_init: &Tensor) -> Vec<Vec<f64>> {
    let (nv, n) = (b_init.shape()[0], b_init.shape()[1]);
    (0..nv).map(|i| (0..n).map(|j| b_init.at(&[i, j])).collect()).collect()
}

#[test]
fn primary_capsules_of_zero_features_are_zero() {
    let mut tape = Tape::new();
    let f = tape.leaf(Tensor::zeros(&[2, 3, 4, 5]));
    let w = tape.leaf(Tensor::full(&[12, 6], 0.3));
    let b = tape.leaf(Tensor::zeros(&[6]));
    let u = form_primary_capsules(&mut tape, f, w, b).unwrap();
    assert_eq!(tape.shape(u), &[2, 5, 6]);
    assert!(tape.value(u).data().iter().all(|&a| a == 0.0));
}

#[test]
fn primary_capsules_match_flatten_project_squash() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (nb, c, t, v, p) = (2, 3, 4, 5, 6);
    let features = random(&[nb, c, t, v], &mut rng, 1.0);
    let w = random(&[c * t, p], &mut rng, 0.5);
    let bias = random(&[p], &mut rng, 0.5);
    let mut tape = Tape::new();
    let (fv, wv, bv) = (tape.leaf(features.clone()), tape.leaf(w.clone()), tape.leaf(bias.clone()));
    let u = form_primary_capsules(&mut tape, fv, wv, bv).unwrap();
    let got = tape.value(u);
    for b in 0..nb {
        for j in 0..v {
            let column: Vec<f64> = (0..c).flat_map(|ch| (0..t).map(move |tt| (ch, tt))).map(|(ch, tt)| features.at(&[b, ch, tt, j])).collect();
            let proj: Vec<f64> = (0..p).map(|q| bias.at(&[q]) + (0..c * t).map(|k| column[k] * w.at(&[k, q])).sum::<f64>()).collect();
            let expected = squash_vec(&proj);
            let norm: f64 = expected.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(norm < 1.0);
            for q in 0..p {
                assert!((got.at(&[b, j, q]) - expected[q]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn vote_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let u = random(&[2, 3, 4], &mut rng, 1.0);
    let mut tape = Tape::new();
    let uv = tape.leaf(u.clone());
    let zero = tape.leaf(Tensor::zeros(&[3, 2, 4, 5]));
    let votes = compute_votes(&mut tape, uv, zero).unwrap();
    assert!(tape.value(votes).data().iter().all(|&a| a == 0.0));

    let eye = Tensor::from_fn(&[3, 2, 4, 4], |idx| if (idx / 4) % 4 == idx % 4 { 1.0 } else { 0.0 });
    let ev = tape.leaf(eye);
    let votes = compute_votes(&mut tape, uv, ev).unwrap();
    let got = tape.value(votes);
    for b in 0..2 {
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    assert_eq!(got.at(&[b, i, j, k]), u.at(&[b, i, k]));
                }
            }
        }
    }
    let bad = tape.leaf(Tensor::zeros(&[2, 2, 4, 4]));
    assert!(compute_votes(&mut tape, uv, bad).is_err());
}

#[test]
fn single_iteration_is_weighted_vote_squash() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let u_hat = random(&[2, 4, 3, 2], &mut rng, 1.0);
    let b_init = random(&[4, 3], &mut rng, 1.0);
    let (state, v) = route(&u_hat, &b_init, &cfg(3, 2, 1, 0.5));
    assert_eq!(state.trace.len(), 1);
    for b in 0..2 {
        let expected = reference_routing(&nested(&u_hat, b), &rows(&b_init), 1, 0.5);
        let (c, vr) = &expected[0];
        for i in 0..4 {
            for j in 0..3 {
                assert!((state.trace[0].c.at(&[b, i, j]) - c[i][j]).abs() < 1e-12);
            }
        }
        for j in 0..3 {
            for k in 0..2 {
                assert!((v.at(&[b, j, k]) - vr[j][k]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn degenerate_single_capsule_single_class() {
    let u_hat = Tensor::new(vec![1, 1, 1, 3], vec![0.5, -1.0, 2.0]).unwrap();
    let b_init = Tensor::new(vec![1, 1], vec![0.7]).unwrap();
    let (state, v) = route(&u_hat, &b_init, &cfg(1, 3, 3, 0.5));
    for snap in &state.trace {
        assert_eq!(snap.c.data(), &[1.0]);
    }
    let expected = squash_vec(&[0.5, -1.0, 2.0]);
    for k in 0..3 {
        assert!((v.data()[k] - expected[k]).abs() < 1e-15);
    }
}

#[test]
fn two_iterations_match_hand_unrolled_recurrence() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let u_hat = random(&[1, 3, 2, 2], &mut rng, 1.0);
    let b_init = random(&[3, 2], &mut rng, 0.5);
    let (state, _) = route(&u_hat, &b_init, &cfg(2, 2, 2, 0.5));
    let expected = reference_routing(&nested(&u_hat, 0), &rows(&b_init), 2, 0.5);
    for (snap, (c, v)) in state.trace.iter().zip(&expected) {
        for i in 0..3 {
            for j in 0..2 {
                assert!((snap.c.at(&[0, i, j]) - c[i][j]).abs() < 1e-12);
            }
        }
        for j in 0..2 {
            for k in 0..2 {
                assert!((snap.v.at(&[0, j, k]) - v[j][k]).abs() < 1e-12);
            }
        }
    }
    // The second iteration actually moved the couplings.
    assert!(state.trace[0].c.max_abs_diff(&state.trace[1].c) > 1e-6);
}

#[test]
fn routing_invariants_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let (nb, nv, n, d) = (2, rng.random_range(1..7), rng.random_range(1..5), rng.random_range(1..5));
        let r = rng.random_range(1..5);
        let u_hat = random(&[nb, nv, n, d], &mut rng, 2.0);
        let b_init = random(&[nv, n], &mut rng, 2.0);
        let (state, v) = route(&u_hat, &b_init, &cfg(n, d, r, 0.5));
        assert_eq!(state.trace.len(), r);
        for snap in &state.trace {
            for row in snap.c.data().chunks(n) {
                let total: f64 = row.iter().sum();
                assert!((total - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&x| x > 0.0 && x <= 1.0));
            }
        }
        for cap in v.data().chunks(d) {
            assert!(cap.iter().map(|a| a * a).sum::<f64>().sqrt() < 1.0);
        }
    }
}

#[test]
fn zero_step_freezes_the_couplings() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let u_hat = random(&[2, 5, 3, 4], &mut rng, 1.0);
    let b_init = random(&[5, 3], &mut rng, 1.0);
    let (state, _) = route(&u_hat, &b_init, &cfg(3, 4, 4, 0.0));
    for snap in &state.trace[1..] {
        assert_eq!(snap, &state.trace[0]);
    }
}

#[test]
fn gradient_through_unrolled_routing() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let u_hat = random(&[2, 4, 3, 2], &mut rng, 1.0);
        let b_init = random(&[4, 3], &mut rng, 1.0);
        let weights = random(&[2, 3], &mut rng, 1.0);
        let c = cfg(3, 2, 2, 0.5);
        let err = finite_difference_check_many(
            |tape, vars| {
                let state = dynamic_routing(tape, vars[0], vars[1], &c)?;
                let len = capsule_lengths(tape, state.v)?;
                let y = tape.mul(len, vars[2])?;
                Ok(tape.sum(y))
            },
            &[u_hat, b_init, weights],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn capsule_length_examples() {
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::new(vec![1, 2, 2], vec![0.0, 0.0, 0.6, 0.8]).unwrap());
    let len = capsule_lengths(&mut tape, v).unwrap();
    assert_eq!(tape.value(len).data(), &[0.0, 1.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[3, 4, 5], &mut rng, 1.0);
    let v = tape.leaf(x.clone());
    let len = capsule_lengths(&mut tape, v).unwrap();
    for (got, row) in tape.value(len).data().iter().zip(x.data().chunks(5)) {
        assert!((got - row.iter().map(|a| a * a).sum::<f64>().sqrt()).abs() < 1e-15);
    }
}

#[test]
fn config_validation() {
    assert!(cfg(2, 2, 0, 0.5).validate().is_err());
    assert!(cfg(2, 2, 1, 1.5).validate().is_err());
    assert!(cfg(0, 2, 1, 0.5).validate().is_err());
    assert!(cfg(2, 2, 1, 1.0).validate().is_ok());
}

/// Statistical regression: the second iteration usually sharpens couplings.
#[test]
fn agreement_sharpens_couplings_in_most_trials() {
    let mut sharper = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u_hat = random(&[1, 8, 4, 4], &mut rng, 1.0);
        let b_init = random(&[8, 4], &mut rng, 0.1);
        let (state, _) = route(&u_hat, &b_init, &cfg(4, 4, 2, 0.5));
        let focus = |c: &Tensor| c.data().chunks(4).map(|r| r.iter().cloned().fold(0.0, f64::max)).sum::<f64>() / 8.0;
        if focus(&state.trace[1].c) >= focus(&state.trace[0].c) {
            sharper += 1;
        }
    }
    assert!(sharper >= 90, "{sharper}/100");
}
