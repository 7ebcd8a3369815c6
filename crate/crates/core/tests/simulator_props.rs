mod common;

use common::mechanism;
use mcsbp::harness::{map_paths, simulate_ensemble, Estimate};
use mcsbp::mechanism::{BranchingMechanism, LevyMeasure};
use mcsbp::nalgebra::{DMatrix, DVector};
use mcsbp::rng::path_rng;
use mcsbp::simulator::{simulate_path, SimConfig};
use mcsbp::spectral::perron;
use proptest::prelude::*;

fn feller(b: f64, c: f64) -> BranchingMechanism {
    BranchingMechanism::from_b(DVector::from_element(1, c), DMatrix::from_element(1, 1, b), vec![LevyMeasure::zero()]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn paths_stay_in_the_orthant(mech in mechanism(), seed in any::<u64>()) {
        let s = perron(mech.b()).unwrap();
        let cfg = SimConfig { horizon: 0.5, seed, grid_stride: 10, ..Default::default() };
        let x0 = DVector::from_element(mech.dim(), 1.0);
        let p = simulate_path(&mech, &s, &x0, &cfg, &mut path_rng(seed, 0)).unwrap();
        prop_assert_eq!(p.t_grid.len(), 51);
        prop_assert_eq!(*p.t_grid.last().unwrap(), 0.5);
        prop_assert!(p.x.iter().all(|x| x.iter().all(|&v| v >= 0.0 && v.is_finite())));
        if let Some(te) = p.extinction_time {
            for (t, x) in p.t_grid.iter().zip(&p.x) {
                if *t >= te {
                    prop_assert!(x.iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn same_stream_same_path(mech in mechanism(), seed in any::<u64>(), stream in 0u64..1000) {
        let s = perron(mech.b()).unwrap();
        let cfg = SimConfig { horizon: 0.3, seed, ..Default::default() };
        let x0 = DVector::from_element(mech.dim(), 1.0);
        let a = simulate_path(&mech, &s, &x0, &cfg, &mut path_rng(seed, stream)).unwrap();
        let b = simulate_path(&mech, &s, &x0, &cfg, &mut path_rng(seed, stream)).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn feller_second_moment() {
    // psi(u) = -b u + c u^2: Var X_t = 2 x c e^{bt} (e^{bt} - 1) / b.
    let (b, c, x, t) = (0.3, 0.5, 1.0, 1.0);
    let mech = feller(b, c);
    let cfg = SimConfig { seed: 17, ..Default::default() };
    let ens = simulate_ensemble(&mech, &DVector::from_element(1, x), &cfg, 20_000, &[t]).unwrap();
    let e = (b * t).exp();
    let second = e * e + 2.0 * x * c * e * (e - 1.0) / b;
    let est = ens.estimate(0, |y| y[0] * y[0]);
    assert!(est.z_score(second) <= 3.0, "{est:?} vs {second}");
    let mean = ens.estimate(0, |y| y[0]);
    assert!(mean.z_score(e) <= 3.0);
}

#[test]
fn critical_feller_extinction_probability() {
    // b = 0: v(t, inf) = 1 / (c t), so P(X_t = 0) = exp(-x / (c t)).
    let (c, x, t) = (0.5, 0.5, 1.0);
    let cfg = SimConfig { seed: 23, ..Default::default() };
    let ens = simulate_ensemble(&feller(0.0, c), &DVector::from_element(1, x), &cfg, 20_000, &[t]).unwrap();
    let dead = ens.estimate(0, |y| f64::from(u8::from(y[0] == 0.0)));
    let exact = (-x / (c * t)).exp();
    // Discrete steps can only detect extinction late; the deficit is O(sqrt(dt)).
    assert!(dead.mean <= exact + 3.0 * dead.se, "{dead:?} vs {exact}");
    assert!(dead.mean >= exact - 0.05, "{dead:?} vs {exact}");
}

#[test]
fn paths_are_independent_of_scheduling() {
    let mech = feller(0.2, 0.3);
    let s = perron(mech.b()).unwrap();
    let cfg = SimConfig::default();
    let x0 = DVector::from_element(1, 1.0);
    let all = map_paths(64, 9, |_, rng| simulate_path(&mech, &s, &x0, &cfg, rng)).unwrap();
    for k in [0u64, 17, 63] {
        let single = simulate_path(&mech, &s, &x0, &cfg, &mut path_rng(9, k)).unwrap();
        assert_eq!(all[k as usize], single);
    }
    let means: Vec<f64> = all.iter().map(|p| p.x.last().unwrap()[0]).collect();
    assert!(Estimate::from_samples(&means).se > 0.0);
}
