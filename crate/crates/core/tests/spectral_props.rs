mod common;

use mcsbp::nalgebra::DMatrix;
use mcsbp::spectral::{check_decay, default_decay_grid, is_irreducible, mean_matrix, perron, spectral_gap, Criticality};
use mcsbp::Error;
use proptest::prelude::*;

fn irreducible(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (prop::collection::vec(0.05f64..2.0, d * d), prop::collection::vec(-2.0f64..2.0, d)).prop_map(move |(mut m, diag)| {
        for i in 0..d {
            m[i * d + i] = diag[i];
        }
        DMatrix::from_row_slice(d, d, &m)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perron_identities(b in (2usize..5).prop_flat_map(irreducible)) {
        let s = perron(&b).unwrap();
        let bt = b.transpose();
        let scale = 1.0 + b.amax();
        prop_assert!((&bt * &s.phi - &s.phi * s.lambda1).amax() <= 1e-10 * scale);
        prop_assert!((s.phi_hat.transpose() * &bt - s.phi_hat.transpose() * s.lambda1).amax() <= 1e-10 * scale);
        prop_assert!((s.phi.sum() - 1.0).abs() <= 1e-12);
        prop_assert!((s.phi.dot(&s.phi_hat) - 1.0).abs() <= 1e-12);
        prop_assert!(s.phi.iter().chain(s.phi_hat.iter()).all(|&x| x > 0.0));
        // lambda1 dominates the real parts of the spectrum.
        for z in b.complex_eigenvalues().iter() {
            prop_assert!(z.re <= s.lambda1 + 1e-9 * scale);
        }
        prop_assert!(spectral_gap(&s, &b) > 0.0);
        let expected = if s.lambda1 > 0.0 { Criticality::Supercritical } else if s.lambda1 < 0.0 { Criticality::Subcritical } else { Criticality::Critical };
        if s.lambda1.abs() > 1e-9 {
            prop_assert_eq!(s.class, expected);
        }
    }

    #[test]
    fn mean_semigroup(b in (2usize..4).prop_flat_map(irreducible), s in 0.0f64..1.0, t in 0.0f64..1.0) {
        let ms = mean_matrix(&b, s).m;
        let mt = mean_matrix(&b, t).m;
        let mst = mean_matrix(&b, s + t).m;
        prop_assert!((&ms * &mt - &mst).amax() <= 1e-10 * (1.0 + mst.amax()));
        // Quasi-positive B gives a nonnegative semigroup.
        prop_assert!(mst.iter().all(|&x| x >= 0.0));
        let sp = perron(&b).unwrap();
        let lhs = &mt * &sp.phi;
        prop_assert!((lhs - &sp.phi * (sp.lambda1 * t).exp()).amax() <= 1e-9 * (1.0 + mt.amax()));
    }

    #[test]
    fn perron_is_shift_covariant(b in irreducible(3), shift in -3.0f64..3.0) {
        let s = perron(&b).unwrap();
        let shifted = perron(&(&b + DMatrix::identity(3, 3) * shift)).unwrap();
        prop_assert!((shifted.lambda1 - s.lambda1 - shift).abs() <= 1e-9);
        prop_assert!((shifted.phi - s.phi).amax() <= 1e-9);
    }
}

#[test]
fn reducible_matrix_is_rejected() {
    let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]);
    assert!(!is_irreducible(&b));
    assert!(matches!(perron(&b), Err(Error::NotIrreducible)));
}

#[test]
fn swap_decay_rate_is_two() {
    let b = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
    let s = perron(&b).unwrap();
    let fit = check_decay(&s, &b, &default_decay_grid());
    assert!((fit.c2 - 2.0).abs() <= 0.02, "{}", fit.c2);
    assert!((spectral_gap(&s, &b) - 2.0).abs() < 1e-12);
}

#[test]
fn reference_mechanism_spectrum() {
    // B = [[0.4, 0.6], [0.6, 0.4]]: eigenvalues 1 and -0.2.
    let b = DMatrix::from_row_slice(2, 2, &[0.4, 0.6, 0.6, 0.4]);
    let s = perron(&b).unwrap();
    assert!((s.lambda1 - 1.0).abs() < 1e-12);
    assert!((s.phi[0] - 0.5).abs() < 1e-12 && (s.phi_hat[1] - 1.0).abs() < 1e-12);
    assert!((spectral_gap(&s, &b) - 1.2).abs() < 1e-12);
}
