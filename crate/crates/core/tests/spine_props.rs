mod common;

use common::supercritical;
use mcsbp::harness::{map_paths, Estimate};
use mcsbp::laplace_flow::tilted_laplace;
use mcsbp::mechanism::{BranchingMechanism, LevyMeasure};
use mcsbp::nalgebra::{DMatrix, DVector};
use mcsbp::simulator::SimConfig;
use mcsbp::spectral::perron;
use mcsbp::spine::{nu_measure, spine_generator, weighted_tilt_estimate, GammaSampler, SpineConfig};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generator_is_conservative(mech in supercritical()) {
        let s = perron(mech.b()).unwrap();
        let chain = spine_generator(mech.b(), &s);
        let d = mech.dim();
        for i in 0..d {
            let row: f64 = chain.l.row(i).sum();
            prop_assert!(row.abs() <= 1e-12 * (1.0 + chain.l.amax()));
            for j in 0..d {
                if i != j {
                    prop_assert!(chain.l[(i, j)] >= 0.0);
                }
            }
        }
    }

    #[test]
    fn stationary_law_is_phi_times_phi_hat(mech in supercritical()) {
        let s = perron(mech.b()).unwrap();
        let pi = spine_generator(mech.b(), &s).stationary_law().unwrap();
        let target = s.phi.component_mul(&s.phi_hat);
        let target = &target / target.sum();
        prop_assert!((pi - target).amax() <= 1e-10);
    }

    #[test]
    fn nu_is_a_probability(mech in supercritical()) {
        let d = mech.dim();
        for i in 0..d {
            for j in 0..d {
                let nu = nu_measure(&mech, i, j).unwrap();
                let mass = nu.weight + nu.zero_weight();
                prop_assert_eq!(mass, 1.0);
                prop_assert!((0.0..=1.0).contains(&nu.weight));
                let expected = if i == j { 0.0 } else { mech.measure(i).first_moment(j).unwrap() / mech.b()[(j, i)] };
                prop_assert!((nu.weight - expected).abs() <= 1e-12);
            }
        }
    }
}

fn reference() -> BranchingMechanism {
    BranchingMechanism::from_b_tilde(
        DVector::from_vec(vec![0.5, 0.5]),
        DMatrix::from_row_slice(2, 2, &[0.4, 0.5, 0.5, 0.4]),
        vec![
            LevyMeasure::atomic(vec![(vec![1.0, 0.5], 0.2)]),
            LevyMeasure::atomic(vec![(vec![0.5, 1.0], 0.2)]),
        ],
    )
    .unwrap()
}

#[test]
fn gamma_and_weighting_match_tilted_laplace() {
    // Small f and an uneven start, away from the acceptance setting.
    let mech = reference();
    let s = perron(mech.b()).unwrap();
    let x0 = DVector::from_vec(vec![0.5, 1.0]);
    let f = DVector::from_element(2, 0.2);
    let t = 0.5;
    let cfg = SimConfig { horizon: t, seed: 31, grid_stride: 500, ..Default::default() };
    let analytic = tilted_laplace(&mech, &s, &x0, &f, t, 1e-3).unwrap();
    let sampler = GammaSampler::new(&mech, &s, &cfg, &SpineConfig::default()).unwrap();
    let vals = map_paths(20_000, cfg.seed, |_, rng| {
        let g = sampler.simulate(&x0, &cfg, rng)?;
        Ok((-f.dot(g.gamma.last().unwrap())).exp())
    })
    .unwrap();
    let e = Estimate::from_samples(&vals);
    assert!(e.z_score(analytic) <= 3.0, "{e:?} vs {analytic}");
    let w = weighted_tilt_estimate(&mech, &s, &x0, &f, t, 20_000, &SimConfig { seed: 32, ..cfg }).unwrap();
    assert!(w.z_score(analytic) <= 3.0, "{w:?} vs {analytic}");
}

#[test]
fn immigration_cap_is_enforced() {
    let mech = reference();
    let s = perron(mech.b()).unwrap();
    let cfg = SimConfig { horizon: 1.0, ..Default::default() };
    let sampler = GammaSampler::new(&mech, &s, &cfg, &SpineConfig { delta: 1e-4, max_immigrants: 10 }).unwrap();
    let r = sampler.simulate(&DVector::from_element(2, 1.0), &cfg, &mut mcsbp::rng::path_rng(1, 0));
    assert!(matches!(r, Err(mcsbp::Error::ImmigrationCap { .. })));
}

#[test]
fn subcritical_mechanism_has_no_spine() {
    let mech = BranchingMechanism::from_b(DVector::from_element(1, 0.5), DMatrix::from_element(1, 1, -0.5), vec![LevyMeasure::zero()]).unwrap();
    let s = perron(mech.b()).unwrap();
    assert!(GammaSampler::new(&mech, &s, &SimConfig::default(), &SpineConfig::default()).is_err());
}
