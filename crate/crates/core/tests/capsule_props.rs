use capsdense::capsule::{self, MarginLossConfig};
use capsdense::{rng, Tensor};
use proptest::prelude::*;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Reference routing written out with plain loops over `[I][J][D]`.
fn loop_routing(u: &[Vec<Vec<f64>>], iters: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (ni, nj, d) = (u.len(), u[0].len(), u[0][0].len());
    let mut b = vec![vec![0.0; nj]; ni];
    let mut c = vec![vec![0.0; nj]; ni];
    let mut v = vec![vec![0.0; d]; nj];
    for it in 0..iters {
        for i in 0..ni {
            let m = b[i].iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = b[i].iter().map(|x| (x - m).exp()).sum();
            for j in 0..nj {
                c[i][j] = (b[i][j] - m).exp() / z;
            }
        }
        for j in 0..nj {
            let s: Vec<f64> = (0..d).map(|k| (0..ni).map(|i| c[i][j] * u[i][j][k]).sum()).collect();
            let n2: f64 = s.iter().map(|x| x * x).sum();
            let f = n2 / (1.0 + n2) / (n2.sqrt() + 1e-9);
            v[j] = s.iter().map(|x| x * f).collect();
        }
        if it + 1 < iters {
            for i in 0..ni {
                for j in 0..nj {
                    b[i][j] += (0..d).map(|k| u[i][j][k] * v[j][k]).sum::<f64>();
                }
            }
        }
    }
    (v, c)
}

fn to_nested(t: &Tensor<f64>) -> Vec<Vec<Vec<f64>>> {
    let s = t.shape();
    (0..s[1])
        .map(|i| (0..s[2]).map(|j| (0..s[3]).map(|k| t.at(&[0, i, j, k])).collect()).collect())
        .collect()
}

#[test]
fn squash_norm_below_one_on_10k_vectors() {
    let s: Tensor<f64> = rng::normal(&mut rng::stream(1, "sq"), &[10_000, 8], 3.0);
    let v = capsule::squash(&s);
    for row in v.data().chunks(8) {
        assert!(norm(row) < 1.0);
    }
}

#[test]
fn squash_unit_norm_gives_half() {
    let s = Tensor::new(&[1, 4], vec![0.5f64, 0.5, 0.5, 0.5]).unwrap();
    assert!((norm(capsule::squash(&s).data()) - 0.5).abs() < 1e-6);
}

#[test]
fn squash_of_zero_is_zero() {
    let v = capsule::squash(&Tensor::<f64>::zeros(&[2, 3]));
    assert!(v.data().iter().all(|&x| x == 0.0));
}

#[test]
fn routing_single_iteration_is_squash_of_mean() {
    let u: Tensor<f64> = rng::normal(&mut rng::stream(2, "u"), &[1, 2, 2, 3], 1.0);
    let (v, state) = capsule::route(&u, 1).unwrap();
    for &c in state.couplings.data() {
        assert!((c - 0.5).abs() < 1e-12);
    }
    for j in 0..2 {
        let s: Vec<f64> = (0..3).map(|k| 0.5 * (u.at(&[0, 0, j, k]) + u.at(&[0, 1, j, k]))).collect();
        let want = capsule::squash(&Tensor::new(&[1, 3], s).unwrap());
        for k in 0..3 {
            assert!((v.at(&[0, j, k]) - want.data()[k]).abs() < 1e-6);
        }
    }
}

#[test]
fn routing_matches_loop_reference() {
    let u: Tensor<f64> = rng::normal(&mut rng::stream(3, "u"), &[1, 6, 3, 4], 0.7);
    let (v, state) = capsule::route(&u, 3).unwrap();
    let (vr, cr) = loop_routing(&to_nested(&u), 3);
    for j in 0..3 {
        for k in 0..4 {
            assert!((v.at(&[0, j, k]) - vr[j][k]).abs() < 1e-8);
        }
    }
    for (i, row) in cr.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            assert!((state.couplings.at(&[0, i, j]) - c).abs() < 1e-8);
        }
    }
}

#[test]
fn agreement_growth_favors_consistent_parent() {
    let (ni, d) = (8, 4);
    let dir = [0.5, 0.5, -0.5, 0.5];
    let noise: Tensor<f64> = rng::normal(&mut rng::stream(4, "noise"), &[ni, d], 0.3);
    let mut u = Tensor::<f64>::zeros(&[1, ni, 2, d]);
    for i in 0..ni {
        for k in 0..d {
            u.data_mut()[(i * 2) * d + k] = dir[k];
            u.data_mut()[(i * 2 + 1) * d + k] = noise.at(&[i, k]);
        }
    }
    let (_, state) = capsule::route(&u, 3).unwrap();
    let (_, cr) = loop_routing(&to_nested(&u), 3);
    for i in 0..ni {
        assert!(state.couplings.at(&[0, i, 0]) > state.couplings.at(&[0, i, 1]));
        assert!(cr[i][0] > cr[i][1]);
    }
}

#[test]
fn margin_loss_hand_cases() {
    let cfg = MarginLossConfig::default();
    let t = Tensor::new(&[1, 3], vec![1.0f64, 0.0, 0.0]).unwrap();
    let zero = capsule::margin_loss(&Tensor::new(&[1, 3], vec![0.9, 0.1, 0.1]).unwrap(), &t, &cfg).unwrap();
    assert!(zero.abs() < 1e-6);
    let t2 = Tensor::new(&[1, 2], vec![1.0f64, 0.0]).unwrap();
    let l = capsule::margin_loss(&Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap(), &t2, &cfg).unwrap();
    assert!((l - 0.81).abs() < 1e-6);
    let l = capsule::margin_loss(&Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap(), &t2, &cfg).unwrap();
    assert!((l - 0.24).abs() < 1e-6);
}

#[test]
fn margin_loss_rejects_non_one_hot() {
    let cfg = MarginLossConfig::default();
    let t = Tensor::new(&[1, 2], vec![1.0f64, 1.0]).unwrap();
    assert!(capsule::margin_loss(&Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap(), &t, &cfg).is_err());
}

fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn squash_is_monotone_in_norm(v in vec_strategy(6), a in 0.01f64..3.0, b in 0.01f64..3.0) {
        prop_assume!(norm(&v) > 1e-3);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > 1e-6);
        let sq = |f: f64| {
            let s = Tensor::new(&[1, 6], v.iter().map(|x| x * f).collect()).unwrap();
            norm(capsule::squash(&s).data())
        };
        prop_assert!(sq(lo) < sq(hi));
    }

    #[test]
    fn squash_is_rotation_equivariant(v in vec_strategy(4), seed in 0u64..10_000) {
        // Random orthonormal matrix from Gram-Schmidt.
        let raw: Tensor<f64> = rng::normal(&mut rng::stream(seed, "rot"), &[4, 4], 1.0);
        let mut q: Vec<Vec<f64>> = Vec::new();
        for r in raw.data().chunks(4) {
            let mut r = r.to_vec();
            for e in &q {
                let p: f64 = r.iter().zip(e).map(|(a, b)| a * b).sum();
                for (x, y) in r.iter_mut().zip(e) {
                    *x -= p * y;
                }
            }
            let n = norm(&r);
            q.push(r.iter().map(|x| x / n).collect());
        }
        let rot = |x: &[f64]| -> Vec<f64> { q.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect() };
        let sq = |x: Vec<f64>| capsule::squash(&Tensor::new(&[1, 4], x).unwrap()).into_data();
        let lhs = sq(rot(&v));
        let rhs = rot(&sq(v.clone()));
        for (a, b) in lhs.iter().zip(&rhs) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn coupling_rows_sum_to_one(seed in 0u64..10_000, iters in 1usize..5) {
        let u: Tensor<f64> = rng::normal(&mut rng::stream(seed, "u"), &[2, 5, 3, 4], 1.0);
        let (_, state) = capsule::route(&u, iters).unwrap();
        for row in state.couplings.data().chunks(3) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn routing_is_permutation_equivariant_over_parents(seed in 0u64..10_000) {
        let u: Tensor<f64> = rng::normal(&mut rng::stream(seed, "u"), &[1, 4, 3, 2], 1.0);
        let perm = [2usize, 0, 1];
        let mut up = Tensor::<f64>::zeros(&[1, 4, 3, 2]);
        for i in 0..4 {
            for (j, &pj) in perm.iter().enumerate() {
                for k in 0..2 {
                    up.data_mut()[(i * 3 + j) * 2 + k] = u.at(&[0, i, pj, k]);
                }
            }
        }
        let (v, s) = capsule::route(&u, 3).unwrap();
        let (vp, sp) = capsule::route(&up, 3).unwrap();
        for (j, &pj) in perm.iter().enumerate() {
            for k in 0..2 {
                prop_assert!((vp.at(&[0, j, k]) - v.at(&[0, pj, k])).abs() < 1e-12);
            }
            for i in 0..4 {
                prop_assert!((sp.couplings.at(&[0, i, j]) - s.couplings.at(&[0, i, pj])).abs() < 1e-12);
            }
        }
    }
}
