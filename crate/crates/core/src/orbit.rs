//! Exact finite-orbit detection, heights, membership and distance
//! estimation for the trapped set P_Q, the integer-linear approximation
//! solver, fixed-point solving and exact concentration probabilities.
//!
//! All verdicts here are exact: inputs must carry rational coordinates.
//! Floating data is refused rather than guessed at, because every float
//! is rational and an "infinite orbit" verdict would be meaningless.

use std::collections::{HashSet, VecDeque};

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebra::{
    frac_mod1, rat_from_str, rat_to_f64, rat_to_string, torus_distance_f64, Rat, TorusPoint,
};
use crate::walk::{exact_pushforward, FiniteMeasure, WalkError, WalkSpec};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OrbitError {
    #[error("operation requires exact rational data")]
    ExactnessRequired,
    #[error("orbit is not finite")]
    NotFinite,
    #[error("enumeration cap {0} exceeded")]
    CapExceeded(usize),
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
}

/// Result of an orbit closure computation. Exact rational data always
/// has rational generator displacements, so finiteness is certified by
/// the lcm of displacement denominators even when the orbit is too
/// large to enumerate; `orbit_points` is populated only when the BFS
/// closed within the cap.
#[derive(Clone, Debug, PartialEq)]
pub struct OrbitReport {
    pub finite: bool,
    /// Minimal q with every generator displacement in (1/q)Z^d / Z^d.
    pub height_q: BigInt,
    pub orbit_size: Option<usize>,
    pub orbit_points: Option<Vec<Vec<Rat>>>,
    /// True when the BFS hit the cap and the point list was dropped.
    pub enumeration_capped: bool,
}

/// Generator displacement γ(ω)x + u(ω) - x as a torus element in [0,1)^d.
pub fn displacement(spec: &WalkSpec, omega: usize, x: &[Rat]) -> Result<Vec<Rat>, OrbitError> {
    let u = spec
        .translation(omega)
        .exact_coords()
        .ok_or(OrbitError::ExactnessRequired)?;
    let gx = spec.generator(omega).mul_rat_vec(x);
    Ok(gx
        .iter()
        .zip(u)
        .zip(x)
        .map(|((g, u), x)| frac_mod1(&(g + u - x)))
        .collect())
}

fn exact_coords(x: &TorusPoint) -> Result<Vec<Rat>, OrbitError> {
    x.exact_coords()
        .map(|c| c.to_vec())
        .ok_or(OrbitError::ExactnessRequired)
}

/// Minimal q such that every generator displacement lies in
/// (1/q)Z^d / Z^d: the lcm of the reduced displacement denominators.
/// This certifies finiteness of the orbit and is its height.
pub fn orbit_height(spec: &WalkSpec, x: &TorusPoint) -> Result<BigInt, OrbitError> {
    let xs = exact_coords(x)?;
    let mut q = BigInt::one();
    for omega in 0..spec.n_letters() {
        for c in displacement(spec, omega, &xs)? {
            q = q.lcm(c.denom());
        }
    }
    Ok(q)
}

/// BFS closure of the orbit H_u·x plus the lcm height certificate.
pub fn orbit_closure(
    spec: &WalkSpec,
    x: &TorusPoint,
    cap: usize,
) -> Result<OrbitReport, OrbitError> {
    let xs = exact_coords(x)?;
    let height_q = orbit_height(spec, x)?;

    let maps: Vec<_> = (0..spec.n_letters()).map(|i| spec.affine_map(i)).collect();
    let mut seen: HashSet<Vec<Rat>> = HashSet::new();
    let mut queue = VecDeque::new();
    seen.insert(xs.clone());
    queue.push_back(xs);
    let mut capped = false;
    'bfs: while let Some(p) = queue.pop_front() {
        let point = TorusPoint::Exact(p);
        for m in &maps {
            let img = match m.apply(&point).expect("validated dims") {
                TorusPoint::Exact(c) => c,
                TorusPoint::Approx(_) => unreachable!("exact data"),
            };
            if !seen.contains(&img) {
                if seen.len() >= cap {
                    capped = true;
                    break 'bfs;
                }
                seen.insert(img.clone());
                queue.push_back(img);
            }
        }
    }

    if capped {
        return Ok(OrbitReport {
            finite: true,
            height_q,
            orbit_size: None,
            orbit_points: None,
            enumeration_capped: true,
        });
    }

    // post-hoc consistency: the enumerated set is closed under every generator
    for p in &seen {
        let point = TorusPoint::Exact(p.clone());
        for m in &maps {
            let img = match m.apply(&point).unwrap() {
                TorusPoint::Exact(c) => c,
                TorusPoint::Approx(_) => unreachable!(),
            };
            assert!(seen.contains(&img), "BFS closure not closed under generators");
        }
    }

    let mut points: Vec<Vec<Rat>> = seen.into_iter().collect();
    points.sort();
    Ok(OrbitReport {
        finite: true,
        height_q,
        orbit_size: Some(points.len()),
        orbit_points: Some(points),
        enumeration_capped: false,
    })
}

/// Membership in P_Q: Ok(Some(minimal q)) iff the height is ≤ Q.
pub fn is_in_pq(
    spec: &WalkSpec,
    x: &TorusPoint,
    q_max: u64,
) -> Result<Option<BigInt>, OrbitError> {
    let q = orbit_height(spec, x)?;
    if q <= BigInt::from(q_max) {
        Ok(Some(q))
    } else {
        Ok(None)
    }
}

/// A pair (u', x') of exact data together with a height witness q:
/// γ(ω)x' + u'(ω) - x' lies in (1/q)Z^d / Z^d for every ω.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicDatum {
    pub translations: Vec<Vec<Rat>>,
    pub x: Vec<Rat>,
    pub q: BigInt,
}

impl PeriodicDatum {
    /// Exact invariant check against the generators of `spec`.
    pub fn validate(&self, spec: &WalkSpec) -> bool {
        if self.q < BigInt::one() || self.translations.len() != spec.n_letters() {
            return false;
        }
        let qr = Rat::from(self.q.clone());
        for omega in 0..spec.n_letters() {
            let gx = spec.generator(omega).mul_rat_vec(&self.x);
            for ((g, u), x) in gx.iter().zip(&self.translations[omega]).zip(&self.x) {
                let disp = frac_mod1(&(g + u - x));
                if !(disp * &qr).is_integer() {
                    return false;
                }
            }
        }
        true
    }
}

/// Certified upper bound on the distance from (u, x) to P_Q, with the
/// periodic witness realizing it.
#[derive(Clone, Debug)]
pub struct PqDistanceBound {
    pub bound: f64,
    pub witness: PeriodicDatum,
}

/// Upper bound on d((u,x), P_Q) in the product max-metric, where u is
/// the translation part of `spec` and the linear parts stay fixed.
///
/// For each q ≤ Q the candidate x' ranges over a rational grid of step
/// 1/(4q), refined ×4 around the best candidate until the step drops
/// below `resolution` or `refine_depth` levels are spent. For fixed
/// (q, x') the optimal u'(ω) is the closed-form snap of u(ω) onto the
/// coset x' - γ(ω)x' + (1/q)Z^d. The result is an upper bound by
/// construction; per-q candidate grids do not depend on Q, so the bound
/// is monotone nonincreasing in Q and in refine_depth.
pub fn distance_to_pq_upper(
    spec: &WalkSpec,
    x: &TorusPoint,
    q_max: u64,
    resolution: f64,
    refine_depth: u32,
) -> PqDistanceBound {
    assert!(q_max >= 1);
    let d = spec.dim();
    let xf = x.to_f64();
    let uf: Vec<Vec<f64>> = (0..spec.n_letters())
        .map(|i| spec.translation(i).to_f64())
        .collect();

    let mut best: Option<(f64, u64, PeriodicDatum)> = None;
    for q in 1..=q_max {
        let step0 = Rat::new(BigInt::one(), BigInt::from(4 * q));
        // level-0 anchor: the global lattice point nearest to x
        let mut center: Vec<Rat> = xf
            .iter()
            .map(|c| {
                let idx = (c * 4.0 * q as f64).round() as i64;
                frac_mod1(&(Rat::from(BigInt::from(idx)) * &step0))
            })
            .collect();
        let mut step = step0;
        let mut half_window: i64 = 2 * q as i64; // level 0 covers the whole torus
        for _level in 0..=refine_depth {
            let (obj, cand) = scan_grid(spec, &xf, &uf, &center, &step, half_window, q, d);
            let witness = snap_witness(spec, &cand, q);
            let improves = match &best {
                None => true,
                Some((b, bq, _)) => obj < *b || (obj == *b && q < *bq),
            };
            if improves {
                best = Some((obj, q, witness));
            }
            center = cand;
            step /= Rat::from(BigInt::from(4));
            half_window = 4; // ±(previous step) window at 4x resolution
            if rat_to_f64(&step) <= resolution {
                break;
            }
        }
    }
    let (bound, _, witness) = best.expect("q loop ran");
    debug_assert!(witness.validate(spec));
    PqDistanceBound { bound, witness }
}

/// Evaluate the snap objective over the box center + [-w, w]^d · step,
/// returning the best (objective, candidate); ties break to the
/// lexicographically smallest candidate for determinism.
#[allow(clippy::too_many_arguments)]
fn scan_grid(
    spec: &WalkSpec,
    xf: &[f64],
    uf: &[Vec<f64>],
    center: &[Rat],
    step: &Rat,
    half_window: i64,
    q: u64,
    d: usize,
) -> (f64, Vec<Rat>) {
    let mut best: Option<(f64, Vec<Rat>)> = None;
    let mut offsets = vec![-half_window; d];
    loop {
        let cand: Vec<Rat> = center
            .iter()
            .zip(&offsets)
            .map(|(c, &o)| frac_mod1(&(c + Rat::from(BigInt::from(o)) * step)))
            .collect();
        let obj = pq_objective(spec, xf, uf, &cand, q);
        let better = match &best {
            None => true,
            Some((b, bc)) => obj < *b || (obj == *b && &cand < bc),
        };
        if better {
            best = Some((obj, cand));
        }
        let mut i = 0;
        while i < d {
            offsets[i] += 1;
            if offsets[i] > half_window {
                offsets[i] = -half_window;
                i += 1;
            } else {
                break;
            }
        }
        if i == d {
            break;
        }
    }
    best.expect("grid nonempty")
}

/// max( d(x,x'), max_ω d(u(ω), snapped u'(ω)) ) for the candidate (q, x').
fn pq_objective(spec: &WalkSpec, xf: &[f64], uf: &[Vec<f64>], cand: &[Rat], q: u64) -> f64 {
    let cand_f: Vec<f64> = cand.iter().map(rat_to_f64).collect();
    let mut obj = torus_distance_f64(xf, &cand_f);
    for (omega, u) in uf.iter().enumerate() {
        let coset = coset_base(spec, omega, cand);
        let mut dist_sq = 0.0;
        for (c, u) in coset.iter().zip(u) {
            // distance from u to the nearest point of c + (1/q)Z on the circle
            let delta = u - rat_to_f64(c);
            let r = delta - (delta * q as f64).round() / q as f64;
            dist_sq += r * r;
        }
        obj = obj.max(dist_sq.sqrt());
    }
    obj
}

/// x' - γ(ω)x' reduced mod 1: base point of the admissible coset for u'(ω).
fn coset_base(spec: &WalkSpec, omega: usize, x: &[Rat]) -> Vec<Rat> {
    let gx = spec.generator(omega).mul_rat_vec(x);
    x.iter().zip(&gx).map(|(x, g)| frac_mod1(&(x - g))).collect()
}

/// Exact periodic witness for the candidate (q, x'): u'(ω) snaps each
/// coordinate of u(ω) onto the coset base plus (1/q)Z. The invariant
/// holds by construction since u'(ω) - (x' - γ(ω)x') ∈ (1/q)Z^d.
fn snap_witness(spec: &WalkSpec, cand: &[Rat], q: u64) -> PeriodicDatum {
    let mut translations = Vec::with_capacity(spec.n_letters());
    for omega in 0..spec.n_letters() {
        let coset = coset_base(spec, omega, cand);
        let uf = spec.translation(omega).to_f64();
        let u_prime: Vec<Rat> = coset
            .iter()
            .zip(&uf)
            .map(|(c, u)| {
                let k = ((u - rat_to_f64(c)) * q as f64).round() as i64;
                frac_mod1(&(c + Rat::new(BigInt::from(k), BigInt::from(q))))
            })
            .collect();
        translations.push(u_prime);
    }
    PeriodicDatum {
        translations,
        x: cand.to_vec(),
        q: BigInt::from(q),
    }
}

/// A finite collection of integer linear forms on R^D.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearFormSystem {
    dim: usize,
    forms: Vec<Vec<BigInt>>,
}

impl LinearFormSystem {
    /// Zero forms are dropped: always satisfied, no kernel contribution.
    pub fn new(dim: usize, forms: Vec<Vec<BigInt>>) -> Self {
        let forms = forms
            .into_iter()
            .inspect(|f| assert_eq!(f.len(), dim, "form arity must match dim"))
            .filter(|f| f.iter().any(|c| !c.is_zero()))
            .collect();
        LinearFormSystem { dim, forms }
    }

    pub fn from_rows(dim: usize, rows: &[Vec<i64>]) -> Self {
        Self::new(
            dim,
            rows.iter()
                .map(|r| r.iter().map(|&v| BigInt::from(v)).collect())
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn forms(&self) -> &[Vec<BigInt>] {
        &self.forms
    }

    /// M² = max over forms of the squared Euclidean norm (an integer).
    pub fn max_norm_sq(&self) -> BigInt {
        self.forms
            .iter()
            .map(|f| f.iter().map(|c| c * c).sum::<BigInt>())
            .max()
            .unwrap_or_else(BigInt::zero)
    }

    /// M = max Euclidean norm of the coefficient rows.
    pub fn max_norm(&self) -> f64 {
        self.max_norm_sq().to_f64().unwrap_or(f64::INFINITY).sqrt()
    }
}

/// Exact decomposition point = kernel_part + lattice_part + remainder
/// with lattice_part in (1/q)Z^D and a certified remainder bound.
#[derive(Clone, Debug)]
pub struct ZLinApprox {
    pub q: BigInt,
    pub kernel_part: Vec<Rat>,
    pub lattice_part: Vec<Rat>,
    pub remainder: Vec<Rat>,
    /// Integer basis of the exact kernel of the form system.
    pub kernel_basis: Vec<Vec<BigInt>>,
    /// Squared bound D^D · M^{2(D-1)} · r² satisfied by the remainder.
    pub remainder_bound_sq: Rat,
}

impl ZLinApprox {
    pub fn remainder_norm_sq(&self) -> Rat {
        self.remainder.iter().map(|c| c * c).sum()
    }
}

fn rat_round(x: &Rat) -> BigInt {
    (x + Rat::new(BigInt::one(), BigInt::from(2))).floor().to_integer()
}

/// Integer-linear approximation: given forms Φ with every φ(point)
/// within r of Z, produce 1 ≤ q ≤ M^D and an exact decomposition of the
/// point into kernel + (1/q)-lattice + small remainder. Every part is
/// verified by substitution before returning.
pub fn solve_integer_linear_approx(
    sys: &LinearFormSystem,
    point: &[Rat],
    r: &Rat,
) -> Result<ZLinApprox, OrbitError> {
    let dim = sys.dim();
    assert_eq!(point.len(), dim);
    assert!(!r.is_negative());

    for (i, f) in sys.forms().iter().enumerate() {
        let v: Rat = f.iter().zip(point).map(|(c, p)| Rat::from(c.clone()) * p).sum();
        let frac = (&v - Rat::from(rat_round(&v))).abs();
        if frac > *r {
            return Err(OrbitError::PreconditionViolated(format!(
                "form {i} evaluates {frac} away from Z, beyond r = {r}"
            )));
        }
    }

    let m_sq = sys.max_norm_sq();
    let bound_sq = Rat::from(BigInt::from(dim as i64).pow(dim as u32))
        * Rat::from(m_sq.pow((dim - 1) as u32))
        * r
        * r;

    // exact kernel of the stacked form matrix
    let mut mat: Vec<Vec<Rat>> = sys
        .forms()
        .iter()
        .map(|f| f.iter().map(|c| Rat::from(c.clone())).collect())
        .collect();
    let pivots = rref(&mut mat);
    let free: Vec<usize> = (0..dim).filter(|j| !pivots.contains(j)).collect();

    // one basis vector per free column; identity block on the free coords
    let mut kernel_rat: Vec<Vec<Rat>> = Vec::new();
    for &f in &free {
        let mut v = vec![Rat::zero(); dim];
        v[f] = Rat::one();
        for (row, &p) in pivots.iter().enumerate() {
            v[p] = -mat[row][f].clone();
        }
        kernel_rat.push(v);
    }
    let kernel_basis: Vec<Vec<BigInt>> = kernel_rat
        .iter()
        .map(|v| {
            let scale = v.iter().fold(BigInt::one(), |acc, c| acc.lcm(c.denom()));
            v.iter().map(|c| (c * Rat::from(scale.clone())).to_integer()).collect()
        })
        .collect();

    // the free coordinates of the point are the kernel coefficients
    let mut kernel_part = vec![Rat::zero(); dim];
    for (v, &f) in kernel_rat.iter().zip(&free) {
        let coef = point[f].clone();
        for (kp, vc) in kernel_part.iter_mut().zip(v) {
            *kp += &coef * vc;
        }
    }
    let complement: Vec<Rat> = point.iter().zip(&kernel_part).map(|(p, k)| p - k).collect();

    if pivots.is_empty() {
        let out = ZLinApprox {
            q: BigInt::one(),
            kernel_part,
            lattice_part: vec![Rat::zero(); dim],
            remainder: vec![Rat::zero(); dim],
            kernel_basis,
            remainder_bound_sq: bound_sq,
        };
        verify_decomposition(sys, point, &out);
        return Ok(out);
    }

    // select |pivots| forms whose restriction to the pivot coordinates is
    // invertible, greedily maximizing the absolute subdeterminant
    let restricted: Vec<Vec<BigInt>> = sys
        .forms()
        .iter()
        .map(|f| pivots.iter().map(|&p| f[p].clone()).collect())
        .collect();
    let selected = select_minor_rows(&restricted, pivots.len());
    let a_rows: Vec<Vec<BigInt>> = selected.iter().map(|&i| restricted[i].clone()).collect();
    let q = det_int(&a_rows).abs();
    assert!(q >= BigInt::one(), "selected minor must be invertible");

    // z = nearest integers of A · complement|pivots, then solve A l = z
    let comp_restr: Vec<Rat> = pivots.iter().map(|&p| complement[p].clone()).collect();
    let z: Vec<Rat> = a_rows
        .iter()
        .map(|row| {
            let v: Rat = row.iter().zip(&comp_restr).map(|(c, p)| Rat::from(c.clone()) * p).sum();
            Rat::from(rat_round(&v))
        })
        .collect();
    let a_rat: Vec<Vec<Rat>> = a_rows
        .iter()
        .map(|r| r.iter().map(|c| Rat::from(c.clone())).collect())
        .collect();
    let l = solve_rat(&a_rat, &z).expect("invertible minor");

    let mut lattice_part = vec![Rat::zero(); dim];
    for (slot, &p) in pivots.iter().enumerate() {
        lattice_part[p] = l[slot].clone();
    }
    let remainder: Vec<Rat> = complement
        .iter()
        .zip(&lattice_part)
        .map(|(c, l)| c - l)
        .collect();

    let out = ZLinApprox {
        q,
        kernel_part,
        lattice_part,
        remainder,
        kernel_basis,
        remainder_bound_sq: bound_sq,
    };
    verify_decomposition(sys, point, &out);
    Ok(out)
}

/// Substitution checks, all exact: parts sum to the point, the kernel
/// part is annihilated by every form, q·lattice is integral, q ≤ M^D,
/// and the remainder meets its bound.
fn verify_decomposition(sys: &LinearFormSystem, point: &[Rat], out: &ZLinApprox) {
    for i in 0..point.len() {
        let sum = &out.kernel_part[i] + &out.lattice_part[i] + &out.remainder[i];
        assert_eq!(sum, point[i], "decomposition must sum to the input point");
    }
    for f in sys.forms() {
        let v: Rat = f
            .iter()
            .zip(&out.kernel_part)
            .map(|(c, p)| Rat::from(c.clone()) * p)
            .sum();
        assert!(v.is_zero(), "kernel part must lie in the kernel");
    }
    let qr = Rat::from(out.q.clone());
    for l in &out.lattice_part {
        assert!((l * &qr).is_integer(), "lattice part must lie in (1/q)Z^D");
    }
    let q_bound = sys.max_norm_sq().pow(sys.dim() as u32);
    assert!(&out.q * &out.q <= q_bound, "q must satisfy q ≤ M^D");
    assert!(
        out.remainder_norm_sq() <= out.remainder_bound_sq,
        "remainder exceeds the certified bound"
    );
}

/// Row-reduce in place over Q; returns the pivot columns.
fn rref(mat: &mut [Vec<Rat>]) -> Vec<usize> {
    let rows = mat.len();
    if rows == 0 {
        return vec![];
    }
    let cols = mat[0].len();
    let mut pivots = Vec::new();
    let mut r = 0usize;
    for c in 0..cols {
        let Some(pr) = (r..rows).find(|&i| !mat[i][c].is_zero()) else {
            continue;
        };
        mat.swap(r, pr);
        let inv = mat[r][c].recip();
        for j in c..cols {
            mat[r][j] = &mat[r][j] * &inv;
        }
        for i in 0..rows {
            if i != r && !mat[i][c].is_zero() {
                let f = mat[i][c].clone();
                for j in c..cols {
                    let sub = &f * &mat[r][j];
                    mat[i][j] = &mat[i][j] - sub;
                }
            }
        }
        pivots.push(c);
        r += 1;
        if r == rows {
            break;
        }
    }
    pivots
}

/// Greedy selection of k rows forming an invertible k×k matrix: at
/// every stage pick the row with the largest absolute pivot after
/// elimination (proportional to the absolute subdeterminant grown by
/// that row); ties break to the lowest index.
fn select_minor_rows(rows: &[Vec<BigInt>], k: usize) -> Vec<usize> {
    let m = rows.len();
    let mut work: Vec<Vec<Rat>> = rows
        .iter()
        .map(|r| r.iter().map(|c| Rat::from(c.clone())).collect())
        .collect();
    let mut avail: Vec<usize> = (0..m).collect();
    let mut selected = Vec::with_capacity(k);
    for col in 0..k {
        let mut best: Option<(Rat, usize)> = None;
        for (slot, &ri) in avail.iter().enumerate() {
            let v = work[ri][col].abs();
            if v.is_zero() {
                continue;
            }
            if best.as_ref().map_or(true, |(b, _)| v > *b) {
                best = Some((v, slot));
            }
        }
        let (_, slot) = best.expect("restricted forms have full rank");
        let ri = avail.remove(slot);
        selected.push(ri);
        let pivot = work[ri][col].clone();
        let pivot_row = work[ri].clone();
        for &rj in &avail {
            if !work[rj][col].is_zero() {
                let f = &work[rj][col] / &pivot;
                for c in col..k {
                    let sub = &f * &pivot_row[c];
                    work[rj][c] = &work[rj][c] - sub;
                }
            }
        }
    }
    selected
}

/// Determinant of a square BigInt matrix given as rows.
fn det_int(rows: &[Vec<BigInt>]) -> BigInt {
    let n = rows.len();
    let flat: Vec<BigInt> = rows.iter().flat_map(|r| r.iter().cloned()).collect();
    crate::algebra::IntMatrix::new(n, flat).det()
}

/// Solve A x = b over Q for square invertible A.
fn solve_rat(a: &[Vec<Rat>], b: &[Rat]) -> Option<Vec<Rat>> {
    let n = a.len();
    let mut m: Vec<Vec<Rat>> = a
        .iter()
        .zip(b)
        .map(|(row, rhs)| {
            let mut r = row.clone();
            r.push(rhs.clone());
            r
        })
        .collect();
    for c in 0..n {
        let pr = (c..n).find(|&i| !m[i][c].is_zero())?;
        m.swap(c, pr);
        let inv = m[c][c].recip();
        for j in c..=n {
            m[c][j] = &m[c][j] * &inv;
        }
        for i in 0..n {
            if i != c && !m[i][c].is_zero() {
                let f = m[i][c].clone();
                for j in c..=n {
                    let sub = &f * &m[c][j];
                    m[i][j] = &m[i][j] - sub;
                }
            }
        }
    }
    Some(m.into_iter().map(|row| row[n].clone()).collect())
}

/// Integer diagonalization P·M·Q = S with P, Q unimodular and S
/// diagonal (divisibility order is not needed for congruence solving).
pub(crate) fn diagonalize_z(
    m0: &[Vec<BigInt>],
) -> (Vec<Vec<BigInt>>, Vec<Vec<BigInt>>, Vec<Vec<BigInt>>) {
    let m = m0.len();
    let n = if m == 0 { 0 } else { m0[0].len() };
    let mut s: Vec<Vec<BigInt>> = m0.to_vec();
    let ident = |k: usize| -> Vec<Vec<BigInt>> {
        (0..k)
            .map(|i| (0..k).map(|j| if i == j { BigInt::one() } else { BigInt::zero() }).collect())
            .collect()
    };
    let mut p = ident(m);
    let mut q = ident(n);

    for t in 0..m.min(n) {
        // move the smallest nonzero entry of the trailing block to (t,t)
        let mut pivot: Option<(usize, usize)> = None;
        for i in t..m {
            for j in t..n {
                if !s[i][j].is_zero()
                    && pivot.map_or(true, |(pi, pj)| s[i][j].abs() < s[pi][pj].abs())
                {
                    pivot = Some((i, j));
                }
            }
        }
        let Some((pi, pj)) = pivot else { break };
        s.swap(t, pi);
        p.swap(t, pi);
        if pj != t {
            for row in s.iter_mut() {
                row.swap(t, pj);
            }
            for row in q.iter_mut() {
                row.swap(t, pj);
            }
        }

        loop {
            let mut swapped = false;
            for r in t + 1..m {
                if s[r][t].is_zero() {
                    continue;
                }
                let k = &s[r][t] / &s[t][t];
                row_sub(&mut s, r, t, &k);
                row_sub(&mut p, r, t, &k);
                if !s[r][t].is_zero() {
                    s.swap(t, r);
                    p.swap(t, r);
                    swapped = true;
                }
            }
            if swapped {
                continue;
            }
            for c in t + 1..n {
                if s[t][c].is_zero() {
                    continue;
                }
                let k = &s[t][c] / &s[t][t];
                col_sub(&mut s, c, t, &k);
                col_sub(&mut q, c, t, &k);
                if !s[t][c].is_zero() {
                    for row in s.iter_mut() {
                        row.swap(t, c);
                    }
                    for row in q.iter_mut() {
                        row.swap(t, c);
                    }
                    swapped = true;
                }
            }
            if !swapped {
                break;
            }
        }
    }
    (p, s, q)
}

fn row_sub(m: &mut [Vec<BigInt>], r: usize, t: usize, k: &BigInt) {
    if k.is_zero() {
        return;
    }
    let src = m[t].clone();
    for (a, b) in m[r].iter_mut().zip(src) {
        *a -= k * b;
    }
}

fn col_sub(m: &mut [Vec<BigInt>], c: usize, t: usize, k: &BigInt) {
    if k.is_zero() {
        return;
    }
    for row in m.iter_mut() {
        let sub = k * &row[t];
        row[c] -= sub;
    }
}

/// Finds one common fixed point of the generated affine group, if any:
/// solves (γ(ω) - I)x ≡ -u(ω) mod Z^d simultaneously by integer
/// diagonalization of the stacked system. Absence is a normal result,
/// not an error.
pub fn fixed_point_solve(spec: &WalkSpec) -> Result<Option<TorusPoint>, OrbitError> {
    if !spec.is_exact() {
        return Err(OrbitError::ExactnessRequired);
    }
    let d = spec.dim();
    let n_maps = spec.n_letters();
    let mut mat: Vec<Vec<BigInt>> = Vec::with_capacity(n_maps * d);
    let mut rhs: Vec<Rat> = Vec::with_capacity(n_maps * d);
    for omega in 0..n_maps {
        let g = spec.generator(omega);
        let u = spec.translation(omega).exact_coords().unwrap();
        for i in 0..d {
            let mut row = Vec::with_capacity(d);
            for j in 0..d {
                let mut e = g.entry(i, j).clone();
                if i == j {
                    e -= BigInt::one();
                }
                row.push(e);
            }
            mat.push(row);
            rhs.push(-u[i].clone());
        }
    }

    let (p, s, q) = diagonalize_z(&mat);
    let m = mat.len();
    let c: Vec<Rat> = (0..m)
        .map(|i| {
            let mut acc = Rat::zero();
            for j in 0..m {
                if !p[i][j].is_zero() {
                    acc += Rat::from(p[i][j].clone()) * &rhs[j];
                }
            }
            acc
        })
        .collect();

    let mut y = vec![Rat::zero(); d];
    for (i, ci) in c.iter().enumerate() {
        let s_i = if i < d { s[i][i].clone() } else { BigInt::zero() };
        if s_i.is_zero() {
            if !ci.is_integer() {
                return Ok(None);
            }
            // free or trivially consistent coordinate: keep y_i = 0
        } else {
            y[i] = ci / Rat::from(s_i);
        }
    }
    let x: Vec<Rat> = (0..d)
        .map(|i| {
            let mut acc = Rat::zero();
            for j in 0..d {
                if !q[i][j].is_zero() {
                    acc += Rat::from(q[i][j].clone()) * &y[j];
                }
            }
            frac_mod1(&acc)
        })
        .collect();
    let point = TorusPoint::Exact(x);
    // exactness makes this a proof of fixedness, not a spot check
    for omega in 0..n_maps {
        let img = spec.affine_map(omega).apply(&point).unwrap();
        assert_eq!(img, point, "solver returned a non-fixed point");
    }
    Ok(Some(point))
}

/// P^{⊗n}({ω̄ : (γ,u)(ω̄)x = y}) as an exact rational: the mass of the
/// atom y after n exact pushforward steps of δ_x.
pub fn concentration_probability(
    spec: &WalkSpec,
    x: &TorusPoint,
    y: &TorusPoint,
    n: usize,
    support_cap: usize,
) -> Result<Rat, WalkError> {
    let ys = y.exact_coords().ok_or(WalkError::ExactnessRequired)?;
    let evolved = exact_pushforward(spec, &FiniteMeasure::dirac(x), n, support_cap)?;
    Ok(evolved.atom_mass_exact(ys).expect("exact measure"))
}

// ---------------------------------------------------------------------
// JSON encodings: rationals as "num/den" strings, bit-exact round trip.
// ---------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PeriodicDatumDto {
    q: String,
    x: Vec<String>,
    translations: Vec<Vec<String>>,
}

impl PeriodicDatum {
    pub fn to_json(&self) -> String {
        let dto = PeriodicDatumDto {
            q: self.q.to_string(),
            x: self.x.iter().map(rat_to_string).collect(),
            translations: self
                .translations
                .iter()
                .map(|u| u.iter().map(rat_to_string).collect())
                .collect(),
        };
        serde_json::to_string(&dto).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self, String> {
        let dto: PeriodicDatumDto = serde_json::from_str(s).map_err(|e| e.to_string())?;
        Ok(PeriodicDatum {
            q: dto.q.parse().map_err(|e| format!("bad q: {e}"))?,
            x: dto.x.iter().map(|s| rat_from_str(s)).collect::<Result<_, _>>()?,
            translations: dto
                .translations
                .iter()
                .map(|u| u.iter().map(|s| rat_from_str(s)).collect())
                .collect::<Result<_, _>>()?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct OrbitReportDto {
    finite: bool,
    height_q: String,
    orbit_size: Option<usize>,
    orbit_points: Option<Vec<Vec<String>>>,
    enumeration_capped: bool,
}

impl OrbitReport {
    pub fn to_json(&self) -> String {
        let dto = OrbitReportDto {
            finite: self.finite,
            height_q: self.height_q.to_string(),
            orbit_size: self.orbit_size,
            orbit_points: self.orbit_points.as_ref().map(|ps| {
                ps.iter().map(|p| p.iter().map(rat_to_string).collect()).collect()
            }),
            enumeration_capped: self.enumeration_capped,
        };
        serde_json::to_string(&dto).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self, String> {
        let dto: OrbitReportDto = serde_json::from_str(s).map_err(|e| e.to_string())?;
        Ok(OrbitReport {
            finite: dto.finite,
            height_q: dto.height_q.parse().map_err(|e| format!("bad q: {e}"))?,
            orbit_size: dto.orbit_size,
            orbit_points: dto
                .orbit_points
                .map(|ps| {
                    ps.iter()
                        .map(|p| p.iter().map(|s| rat_from_str(s)).collect::<Result<Vec<_>, _>>())
                        .collect::<Result<Vec<_>, _>>()
                })
                .transpose()?,
            enumeration_capped: dto.enumeration_capped,
        })
    }
}
