#![allow(dead_code)]

use mcsbp::mechanism::{BranchingMechanism, LevyMeasure};
use mcsbp::nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Raw parameters of a random atomic mechanism with B~ off-diagonals > 0.
#[derive(Clone, Debug)]
pub struct Raw {
    pub d: usize,
    pub c: Vec<f64>,
    pub b_tilde: Vec<f64>,
    pub atoms: Vec<Vec<(Vec<f64>, f64)>>,
}

impl Raw {
    pub fn build(&self) -> BranchingMechanism {
        BranchingMechanism::from_b_tilde(
            DVector::from_vec(self.c.clone()),
            DMatrix::from_row_slice(self.d, self.d, &self.b_tilde),
            self.atoms.iter().map(|a| LevyMeasure::atomic(a.clone())).collect(),
        )
        .expect("valid random mechanism")
    }
}

fn atoms(d: usize) -> impl Strategy<Value = Vec<(Vec<f64>, f64)>> {
    prop::collection::vec((prop::collection::vec(0.0f64..2.0, d), 0.01f64..0.5), 0..3)
}

pub fn raw_mechanism() -> impl Strategy<Value = Raw> {
    (2usize..4).prop_flat_map(|d| {
        (
            prop::collection::vec(0.0f64..1.0, d),
            prop::collection::vec(0.05f64..1.0, d * d),
            prop::collection::vec(-1.0f64..1.0, d),
            prop::collection::vec(atoms(d), d),
        )
            .prop_map(move |(c, mut bt, diag, atoms)| {
                for i in 0..d {
                    bt[i * d + i] = diag[i];
                }
                Raw { d, c, b_tilde: bt, atoms }
            })
    })
}

pub fn mechanism() -> impl Strategy<Value = BranchingMechanism> {
    raw_mechanism().prop_map(|r| r.build())
}

/// Random mechanisms shifted so that `lambda1 >= 0.2`.
pub fn supercritical() -> impl Strategy<Value = BranchingMechanism> {
    raw_mechanism().prop_map(|mut r| {
        let lam = mcsbp::spectral::perron(r.build().b()).unwrap().lambda1;
        if lam < 0.2 {
            for i in 0..r.d {
                r.b_tilde[i * r.d + i] += 0.2 - lam;
            }
        }
        r.build()
    })
}

pub fn vec_in(d: usize, lo: f64, hi: f64) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(lo..hi, d).prop_map(DVector::from_vec)
}
