//! Named built-in specs used by the CLI and the acceptance suite.

use toruslab_core::algebra::{rat, IntMatrix, Rat, TorusPoint};
use toruslab_core::fp::{FpMatrix, FpWalkSpec};
use toruslab_core::walk::WalkSpec;

/// Elementary generator pair of SL_2(Z), uniform weights, no translation.
pub fn std_sl2() -> WalkSpec {
    WalkSpec::new(
        vec!["a".into(), "b".into()],
        vec![rat(1, 2), rat(1, 2)],
        vec![
            IntMatrix::from_rows(&[vec![1, 1], vec![0, 1]]),
            IntMatrix::from_rows(&[vec![1, 0], vec![1, 1]]),
        ],
        vec![TorusPoint::zero(2), TorusPoint::zero(2)],
    )
    .expect("valid built-in")
}

/// [[2,1],[1,1]] and its transpose. The matrix is symmetric, so the two
/// letters coincide and the linear marginal is a Dirac at the matrix —
/// the deterministic hyperbolic walk used as the Lyapunov oracle.
pub fn hyperbolic_pair() -> WalkSpec {
    let m = IntMatrix::from_rows(&[vec![2, 1], vec![1, 1]]);
    WalkSpec::new(
        vec!["h".into(), "ht".into()],
        vec![rat(1, 2), rat(1, 2)],
        vec![m.transpose(), m],
        vec![TorusPoint::zero(2), TorusPoint::zero(2)],
    )
    .expect("valid built-in")
}

/// std-sl2 with the canonical height-3 trapped starting point.
pub fn trapped_q3() -> (WalkSpec, TorusPoint) {
    (std_sl2(), TorusPoint::exact(vec![rat(1, 3), rat(2, 3)]))
}

/// Constructed fixed point mod 5: u(ω) = (I - γ(ω))x0 with x0 = (2,3).
pub fn fp_fixedpoint() -> (FpWalkSpec, Vec<u64>) {
    let p = 5u64;
    let x0 = vec![2u64, 3u64];
    let a = FpMatrix::new(p, 2, vec![1, 1, 0, 1]);
    let b = FpMatrix::new(p, 2, vec![1, 0, 1, 1]);
    let trans: Vec<Vec<u64>> = [&a, &b]
        .iter()
        .map(|g| {
            g.mul_vec(&x0)
                .iter()
                .zip(&x0)
                .map(|(gx, &x)| (x + p - gx) % p)
                .collect()
        })
        .collect();
    let spec = FpWalkSpec::new(
        p,
        vec!["a".into(), "b".into()],
        vec![rat(1, 2), rat(1, 2)],
        vec![a, b],
        trans,
    )
    .expect("valid built-in");
    (spec, x0)
}

/// A named torus spec, possibly with a distinguished starting point.
pub enum NamedSpec {
    Torus(WalkSpec, Option<TorusPoint>),
    Fp(FpWalkSpec, Option<Vec<u64>>),
}

pub fn by_name(name: &str) -> Option<NamedSpec> {
    match name {
        "std-sl2" => Some(NamedSpec::Torus(std_sl2(), None)),
        "hyperbolic-pair" => Some(NamedSpec::Torus(hyperbolic_pair(), None)),
        "trapped-q3" => {
            let (spec, x) = trapped_q3();
            Some(NamedSpec::Torus(spec, Some(x)))
        }
        "fp-fixedpoint" => {
            let (spec, x0) = fp_fixedpoint();
            Some(NamedSpec::Fp(spec, Some(x0)))
        }
        _ => None,
    }
}

/// Symmetrized linear marginal mod p: every generator together with its
/// inverse, uniform weights, no translation. Used for the
/// regular-representation gap experiments.
pub fn symmetrize_linear(spec: &WalkSpec, p: u64) -> FpWalkSpec {
    let reduced = toruslab_core::fp::reduce_spec_mod_p(spec, p).expect("reducible spec");
    let mut labels = Vec::new();
    let mut mats: Vec<FpMatrix> = Vec::new();
    for (i, m) in reduced.matrices().iter().enumerate() {
        labels.push(format!("g{i}"));
        mats.push(m.clone());
        labels.push(format!("g{i}inv"));
        mats.push(m.inverse());
    }
    let n = mats.len();
    let w = Rat::new(1.into(), (n as i64).into());
    let trans = vec![vec![0u64; spec.dim()]; n];
    FpWalkSpec::new(p, labels, vec![w; n], mats, trans).expect("symmetrized spec valid")
}
