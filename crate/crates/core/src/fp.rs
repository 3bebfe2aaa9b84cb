//! Exact affine random walks on F_p^d: dense distribution evolution,
//! the discrete Fourier transform with unnormalized primal and
//! p^{-d}-normalized dual norms, orbit census, fixed points, the
//! regular-representation spectral gap, and the decay dichotomy.
//!
//! Everything is dense: desk scale is p ≤ 13, d ≤ 3, where exactness
//! and simplicity beat scalability.

use std::collections::HashMap;

use num_bigint::BigInt;
use num_complex::Complex64;
use num_integer::Integer;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::algebra::{rat_to_f64, Rat};
use crate::walk::WalkSpec;

#[derive(Debug, Error, PartialEq)]
pub enum FpError {
    #[error("{0} is not prime")]
    NotPrime(u64),
    #[error("generator {0} has determinant {1} mod p, expected 1")]
    DeterminantNotOne(String, u64),
    #[error("translation denominator divisible by p = {0}")]
    DenominatorDividesP(u64),
    #[error("state space p^d = {0} exceeds the dense budget {1}")]
    StateSpaceTooLarge(u64, u64),
    #[error("group size exceeds budget {0}")]
    GroupTooLarge(usize),
    #[error("epsilon must lie in (0,1), got {0}")]
    InvalidEpsilon(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("weights invalid: {0}")]
    WeightsInvalid(String),
}

/// Deterministic Miller-Rabin, valid for all p < 3_215_031_751 with the
/// witness set {2, 3, 5, 7}; the constructor restricts p < 2^31.
pub fn is_prime_u64(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for small in [2u64, 3, 5, 7] {
        if n == small {
            return true;
        }
        if n % small == 0 {
            return false;
        }
    }
    let mut d = n - 1;
    let mut s = 0u32;
    while d % 2 == 0 {
        d /= 2;
        s += 1;
    }
    'witness: for a in [2u64, 3, 5, 7] {
        let mut x = mod_pow(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 0..s - 1 {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

fn mul_mod(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

fn mod_pow(mut b: u64, mut e: u64, m: u64) -> u64 {
    let mut acc = 1u64;
    b %= m;
    while e > 0 {
        if e & 1 == 1 {
            acc = mul_mod(acc, b, m);
        }
        b = mul_mod(b, b, m);
        e >>= 1;
    }
    acc
}

fn mod_inv(a: u64, p: u64) -> u64 {
    mod_pow(a % p, p - 2, p)
}

fn bigint_mod_p(x: &BigInt, p: u64) -> u64 {
    let m = x.mod_floor(&BigInt::from(p));
    m.to_u64().expect("reduced residue fits u64")
}

/// Dense square matrix over F_p, row-major, entries in [0, p).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FpMatrix {
    p: u64,
    dim: usize,
    entries: Vec<u64>,
}

impl FpMatrix {
    pub fn new(p: u64, dim: usize, entries: Vec<u64>) -> Self {
        assert_eq!(entries.len(), dim * dim);
        let entries = entries.into_iter().map(|e| e % p).collect();
        FpMatrix { p, dim, entries }
    }

    pub fn identity(p: u64, dim: usize) -> Self {
        let mut entries = vec![0; dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = 1;
        }
        FpMatrix { p, dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, i: usize, j: usize) -> u64 {
        self.entries[i * self.dim + j]
    }

    pub fn entries(&self) -> &[u64] {
        &self.entries
    }

    pub fn mul(&self, other: &FpMatrix) -> FpMatrix {
        assert_eq!(self.p, other.p);
        assert_eq!(self.dim, other.dim);
        let d = self.dim;
        let p = self.p;
        let mut out = vec![0u64; d * d];
        for i in 0..d {
            for k in 0..d {
                let a = self.entries[i * d + k];
                if a == 0 {
                    continue;
                }
                for j in 0..d {
                    out[i * d + j] = (out[i * d + j] + mul_mod(a, other.entries[k * d + j], p)) % p;
                }
            }
        }
        FpMatrix { p, dim: d, entries: out }
    }

    pub fn transpose(&self) -> FpMatrix {
        let d = self.dim;
        let mut out = vec![0u64; d * d];
        for i in 0..d {
            for j in 0..d {
                out[j * d + i] = self.entries[i * d + j];
            }
        }
        FpMatrix { p: self.p, dim: d, entries: out }
    }

    pub fn mul_vec(&self, v: &[u64]) -> Vec<u64> {
        let d = self.dim;
        (0..d)
            .map(|i| {
                let mut s = 0u64;
                for j in 0..d {
                    s = (s + mul_mod(self.entries[i * d + j], v[j] % self.p, self.p)) % self.p;
                }
                s
            })
            .collect()
    }

    /// Determinant by Gaussian elimination mod p.
    pub fn det(&self) -> u64 {
        let d = self.dim;
        let p = self.p;
        let mut m = self.entries.clone();
        let mut det = 1u64;
        for c in 0..d {
            let Some(pr) = (c..d).find(|&r| m[r * d + c] != 0) else {
                return 0;
            };
            if pr != c {
                for j in 0..d {
                    m.swap(c * d + j, pr * d + j);
                }
                det = (p - det) % p;
            }
            let piv = m[c * d + c];
            det = mul_mod(det, piv, p);
            let inv = mod_inv(piv, p);
            for r in c + 1..d {
                let f = mul_mod(m[r * d + c], inv, p);
                if f == 0 {
                    continue;
                }
                for j in c..d {
                    let sub = mul_mod(f, m[c * d + j], p);
                    m[r * d + j] = (m[r * d + j] + p - sub) % p;
                }
            }
        }
        det
    }

    /// Inverse via Gauss-Jordan; panics on singular input.
    pub fn inverse(&self) -> FpMatrix {
        let d = self.dim;
        let p = self.p;
        let mut m = self.entries.clone();
        let mut inv = FpMatrix::identity(p, d).entries;
        for c in 0..d {
            let pr = (c..d).find(|&r| m[r * d + c] != 0).expect("singular matrix");
            if pr != c {
                for j in 0..d {
                    m.swap(c * d + j, pr * d + j);
                    inv.swap(c * d + j, pr * d + j);
                }
            }
            let f = mod_inv(m[c * d + c], p);
            for j in 0..d {
                m[c * d + j] = mul_mod(m[c * d + j], f, p);
                inv[c * d + j] = mul_mod(inv[c * d + j], f, p);
            }
            for r in 0..d {
                if r != c && m[r * d + c] != 0 {
                    let f = m[r * d + c];
                    for j in 0..d {
                        let sub = mul_mod(f, m[c * d + j], p);
                        m[r * d + j] = (m[r * d + j] + p - sub) % p;
                        let sub = mul_mod(f, inv[c * d + j], p);
                        inv[r * d + j] = (inv[r * d + j] + p - sub) % p;
                    }
                }
            }
        }
        FpMatrix { p, dim: d, entries: inv }
    }
}

/// Memory budget for dense p^d state vectors.
const STATE_BUDGET: u64 = 1 << 22;

/// Mod-p reduction of a walk: SL_d(F_p) generators, F_p^d translations,
/// positive rational weights summing to one.
#[derive(Clone, Debug)]
pub struct FpWalkSpec {
    p: u64,
    dim: usize,
    labels: Vec<String>,
    weights: Vec<Rat>,
    mats: Vec<FpMatrix>,
    trans: Vec<Vec<u64>>,
}

impl FpWalkSpec {
    pub fn new(
        p: u64,
        labels: Vec<String>,
        weights: Vec<Rat>,
        mats: Vec<FpMatrix>,
        trans: Vec<Vec<u64>>,
    ) -> Result<Self, FpError> {
        if p >= 1 << 31 || !is_prime_u64(p) {
            return Err(FpError::NotPrime(p));
        }
        if labels.is_empty() || weights.len() != labels.len() || mats.len() != labels.len()
            || trans.len() != labels.len()
        {
            return Err(FpError::DimensionMismatch("alphabet arity".into()));
        }
        let dim = mats[0].dim();
        let mut states: u64 = 1;
        for _ in 0..dim {
            states = states.saturating_mul(p);
            if states > STATE_BUDGET {
                return Err(FpError::StateSpaceTooLarge(states, STATE_BUDGET));
            }
        }
        let mut sum = Rat::zero();
        for (label, w) in labels.iter().zip(&weights) {
            if !w.is_positive() {
                return Err(FpError::WeightsInvalid(format!("P({label}) must be positive")));
            }
            sum += w;
        }
        if !sum.is_one() {
            return Err(FpError::WeightsInvalid(format!("weights sum to {sum}")));
        }
        for (label, m) in labels.iter().zip(&mats) {
            if m.dim() != dim || m.p != p {
                return Err(FpError::DimensionMismatch(format!("generator {label}")));
            }
            let det = m.det();
            if det != 1 {
                return Err(FpError::DeterminantNotOne(label.clone(), det));
            }
        }
        for (label, u) in labels.iter().zip(&trans) {
            if u.len() != dim || u.iter().any(|&c| c >= p) {
                return Err(FpError::DimensionMismatch(format!("translation {label}")));
            }
        }
        Ok(FpWalkSpec { p, dim, labels, weights, mats, trans })
    }

    pub fn p(&self) -> u64 {
        self.p
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_letters(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn weight(&self, i: usize) -> &Rat {
        &self.weights[i]
    }

    pub fn weights_f64(&self) -> Vec<f64> {
        self.weights.iter().map(rat_to_f64).collect()
    }

    pub fn matrix(&self, i: usize) -> &FpMatrix {
        &self.mats[i]
    }

    pub fn matrices(&self) -> &[FpMatrix] {
        &self.mats
    }

    pub fn translation(&self, i: usize) -> &[u64] {
        &self.trans[i]
    }

    pub fn state_count(&self) -> usize {
        (self.p as usize).pow(self.dim as u32)
    }

    /// Stable content hash, used to key experiment outputs.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(format!("p={};d={};", self.p, self.dim));
        for i in 0..self.labels.len() {
            h.update(format!("L{}={};w={};", self.labels[i], i, self.weights[i]));
            for e in self.mats[i].entries() {
                h.update(format!("{e},"));
            }
            for u in &self.trans[i] {
                h.update(format!("u{u},"));
            }
        }
        let digest = h.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Row-major index of a point: x_1 p^{d-1} + ... + x_d.
    pub fn index(&self, x: &[u64]) -> usize {
        x.iter().fold(0usize, |acc, &c| acc * self.p as usize + (c % self.p) as usize)
    }

    pub fn point(&self, mut idx: usize) -> Vec<u64> {
        let mut out = vec![0u64; self.dim];
        for i in (0..self.dim).rev() {
            out[i] = (idx % self.p as usize) as u64;
            idx /= self.p as usize;
        }
        out
    }

    pub fn map_point(&self, omega: usize, x: &[u64]) -> Vec<u64> {
        let mut y = self.mats[omega].mul_vec(x);
        for (yi, &ui) in y.iter_mut().zip(&self.trans[omega]) {
            *yi = (*yi + ui) % self.p;
        }
        y
    }

    /// Permutation of state indices induced by (γ(ω), u(ω)).
    pub fn permutation(&self, omega: usize) -> Vec<usize> {
        (0..self.state_count())
            .map(|i| self.index(&self.map_point(omega, &self.point(i))))
            .collect()
    }
}

/// Reduce an exact torus walk mod p: integer entries reduce directly,
/// a rational translation coordinate a/b becomes a·b^{-1} mod p.
pub fn reduce_spec_mod_p(spec: &WalkSpec, p: u64) -> Result<FpWalkSpec, FpError> {
    let mats: Vec<FpMatrix> = spec
        .generators()
        .iter()
        .map(|g| {
            FpMatrix::new(
                p,
                g.dim(),
                g.entries().iter().map(|e| bigint_mod_p(e, p)).collect(),
            )
        })
        .collect();
    let mut trans = Vec::with_capacity(spec.n_letters());
    for i in 0..spec.n_letters() {
        let u = spec
            .translation(i)
            .exact_coords()
            .ok_or(FpError::DimensionMismatch("translations must be exact".into()))?;
        let mut v = Vec::with_capacity(u.len());
        for c in u {
            let den = bigint_mod_p(c.denom(), p);
            if den == 0 {
                return Err(FpError::DenominatorDividesP(p));
            }
            let num = bigint_mod_p(c.numer(), p);
            v.push(mul_mod(num, mod_inv(den, p), p));
        }
        trans.push(v);
    }
    FpWalkSpec::new(p, spec.labels().to_vec(), spec.weights().to_vec(), mats, trans)
}

/// Dense probability vector on F_p^d, exact rational or float.
#[derive(Clone, Debug, PartialEq)]
pub struct FpDistribution {
    pub p: u64,
    pub dim: usize,
    pub values: FpValues,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FpValues {
    Exact(Vec<Rat>),
    Float(Vec<f64>),
}

impl FpDistribution {
    pub fn delta(spec: &FpWalkSpec, x: &[u64]) -> Self {
        let mut v = vec![Rat::zero(); spec.state_count()];
        v[spec.index(x)] = Rat::one();
        FpDistribution { p: spec.p(), dim: spec.dim(), values: FpValues::Exact(v) }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match &self.values {
            FpValues::Exact(v) => v.iter().map(rat_to_f64).collect(),
            FpValues::Float(v) => v.clone(),
        }
    }

    pub fn total_mass_exact(&self) -> Option<Rat> {
        match &self.values {
            FpValues::Exact(v) => {
                let mut s = Rat::zero();
                for x in v {
                    s += x;
                }
                Some(s)
            }
            FpValues::Float(_) => None,
        }
    }
}

/// ν ← Σ_ω P(ω) · (γ,u)(ω)_* ν iterated n times, exact rational path.
/// Mass is preserved exactly.
pub fn fp_evolve(spec: &FpWalkSpec, x0: &[u64], n: usize) -> FpDistribution {
    fp_evolve_from(spec, &FpDistribution::delta(spec, x0), n)
}

pub fn fp_evolve_from(spec: &FpWalkSpec, nu: &FpDistribution, n: usize) -> FpDistribution {
    let perms: Vec<Vec<usize>> = (0..spec.n_letters()).map(|i| spec.permutation(i)).collect();
    match &nu.values {
        FpValues::Exact(v) => {
            let mut cur = v.clone();
            for _ in 0..n {
                let mut next = vec![Rat::zero(); cur.len()];
                for (omega, perm) in perms.iter().enumerate() {
                    let w = spec.weight(omega);
                    for (src, &dst) in perm.iter().enumerate() {
                        if !cur[src].is_zero() {
                            next[dst] += w * &cur[src];
                        }
                    }
                }
                cur = next;
            }
            FpDistribution { p: nu.p, dim: nu.dim, values: FpValues::Exact(cur) }
        }
        FpValues::Float(v) => {
            let w = spec.weights_f64();
            let mut cur = v.clone();
            for _ in 0..n {
                let mut next = vec![0.0; cur.len()];
                for (omega, perm) in perms.iter().enumerate() {
                    for (src, &dst) in perm.iter().enumerate() {
                        next[dst] += w[omega] * cur[src];
                    }
                }
                cur = next;
            }
            FpDistribution { p: nu.p, dim: nu.dim, values: FpValues::Float(cur) }
        }
    }
}

/// Unnormalized primal L^q norm: (Σ_x |f(x)|^q)^{1/q}, sup for q = ∞.
pub fn fp_norm(values: &[f64], q: FpNormExponent) -> f64 {
    match q {
        FpNormExponent::L1 => values.iter().map(|v| v.abs()).sum(),
        FpNormExponent::L2 => values.iter().map(|v| v * v).sum::<f64>().sqrt(),
        FpNormExponent::L4 => values.iter().map(|v| v.powi(4)).sum::<f64>().powf(0.25),
        FpNormExponent::LInf => values.iter().fold(0.0f64, |a, v| a.max(v.abs())),
    }
}

/// Dual L̂^q norm: (p^{-d} Σ_a |φ(a)|^q)^{1/q}, sup for q = ∞. The
/// normalization makes the DFT an isometry L² → L̂².
pub fn fp_dual_norm(values: &[Complex64], states: usize, q: FpNormExponent) -> f64 {
    let nf = states as f64;
    match q {
        FpNormExponent::L1 => values.iter().map(|v| v.norm()).sum::<f64>() / nf,
        FpNormExponent::L2 => (values.iter().map(|v| v.norm_sqr()).sum::<f64>() / nf).sqrt(),
        FpNormExponent::L4 => {
            (values.iter().map(|v| v.norm_sqr() * v.norm_sqr()).sum::<f64>() / nf).powf(0.25)
        }
        FpNormExponent::LInf => values.iter().fold(0.0f64, |a, v| a.max(v.norm())),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpNormExponent {
    L1,
    L2,
    L4,
    LInf,
}

/// Dense complex function on the dual group F̂_p^d, carrying its own
/// normalization conventions.
#[derive(Clone, Debug)]
pub struct DualFunction {
    pub p: u64,
    pub dim: usize,
    pub values: Vec<Complex64>,
}

impl DualFunction {
    pub fn norm(&self, q: FpNormExponent) -> f64 {
        fp_dual_norm(&self.values, self.values.len(), q)
    }

    pub fn abs_values(&self) -> Vec<f64> {
        self.values.iter().map(|c| c.norm()).collect()
    }
}

/// Transform of a distribution, packaged with its dual conventions.
pub fn fp_dft_of(dist: &FpDistribution) -> DualFunction {
    let values: Vec<Complex64> = dist.to_f64().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    DualFunction { p: dist.p, dim: dist.dim, values: fp_dft(&values, dist.p, dist.dim) }
}

/// f̂(a) = Σ_x e(⟨a,x⟩) f(x) with e(t) = exp(2πi t / p), direct O(p^{2d}).
pub fn fp_dft(values: &[Complex64], p: u64, dim: usize) -> Vec<Complex64> {
    let states = (p as usize).pow(dim as u32);
    assert_eq!(values.len(), states);
    let chars = character_table(p);
    let coords: Vec<Vec<u64>> = (0..states).map(|i| index_to_point(i, p, dim)).collect();
    (0..states)
        .map(|ai| {
            let a = &coords[ai];
            let mut acc = Complex64::new(0.0, 0.0);
            for (xi, v) in values.iter().enumerate() {
                if v.norm_sqr() == 0.0 {
                    continue;
                }
                let x = &coords[xi];
                let mut dot = 0u64;
                for (ac, xc) in a.iter().zip(x) {
                    dot = (dot + mul_mod(*ac, *xc, p)) % p;
                }
                acc += chars[dot as usize] * v;
            }
            acc
        })
        .collect()
}

/// Inverse transform: f(x) = p^{-d} Σ_a e(-⟨a,x⟩) f̂(a).
pub fn fp_dft_inverse(phi: &[Complex64], p: u64, dim: usize) -> Vec<Complex64> {
    let states = (p as usize).pow(dim as u32);
    assert_eq!(phi.len(), states);
    let chars = character_table(p);
    let coords: Vec<Vec<u64>> = (0..states).map(|i| index_to_point(i, p, dim)).collect();
    let scale = 1.0 / states as f64;
    (0..states)
        .map(|xi| {
            let x = &coords[xi];
            let mut acc = Complex64::new(0.0, 0.0);
            for (ai, v) in phi.iter().enumerate() {
                let a = &coords[ai];
                let mut dot = 0u64;
                for (ac, xc) in a.iter().zip(x) {
                    dot = (dot + mul_mod(*ac, *xc, p)) % p;
                }
                acc += chars[((p - dot) % p) as usize] * v;
            }
            acc * scale
        })
        .collect()
}

fn character_table(p: u64) -> Vec<Complex64> {
    (0..p)
        .map(|t| {
            let theta = std::f64::consts::TAU * t as f64 / p as f64;
            Complex64::new(theta.cos(), theta.sin())
        })
        .collect()
}

fn index_to_point(mut idx: usize, p: u64, dim: usize) -> Vec<u64> {
    let mut out = vec![0u64; dim];
    for i in (0..dim).rev() {
        out[i] = (idx % p as usize) as u64;
        idx /= p as usize;
    }
    out
}

fn point_to_index(x: &[u64], p: u64) -> usize {
    x.iter().fold(0usize, |acc, &c| acc * p as usize + (c % p) as usize)
}

/// Permutation a ↦ γᵀ a of dual indices.
pub fn dual_transpose_perm(mat: &FpMatrix, p: u64, dim: usize) -> Vec<usize> {
    let t = mat.transpose();
    (0..(p as usize).pow(dim as u32))
        .map(|i| point_to_index(&t.mul_vec(&index_to_point(i, p, dim)), p))
        .collect()
}

/// Max pointwise deviation between the dual-action formula
/// (Â(γ,u)φ)(a) = e(⟨a,u⟩) φ(γᵀ a) and the conjugation
/// DFT ∘ A(γ,u) ∘ DFT^{-1} applied to φ.
pub fn fp_dual_action_check(spec: &FpWalkSpec, phi: &[Complex64], omega: usize) -> f64 {
    let p = spec.p();
    let dim = spec.dim();
    let states = spec.state_count();
    assert_eq!(phi.len(), states);

    // formula path
    let chars = character_table(p);
    let perm = dual_transpose_perm(spec.matrix(omega), p, dim);
    let u = spec.translation(omega);
    let formula: Vec<Complex64> = (0..states)
        .map(|ai| {
            let a = index_to_point(ai, p, dim);
            let mut dot = 0u64;
            for (ac, uc) in a.iter().zip(u) {
                dot = (dot + mul_mod(*ac, *uc, p)) % p;
            }
            chars[dot as usize] * phi[perm[ai]]
        })
        .collect();

    // conjugation path: A(g) f = f ∘ g^{-1}
    let f = fp_dft_inverse(phi, p, dim);
    let ginv_mat = spec.matrix(omega).inverse();
    let mut moved = vec![Complex64::new(0.0, 0.0); states];
    for (xi, slot) in moved.iter_mut().enumerate() {
        let x = index_to_point(xi, p, dim);
        // g^{-1} x = γ^{-1}(x - u)
        let shifted: Vec<u64> = x.iter().zip(u).map(|(&xc, &uc)| (xc + p - uc) % p).collect();
        let pre = ginv_mat.mul_vec(&shifted);
        *slot = f[point_to_index(&pre, p)];
    }
    let conjugated = fp_dft(&moved, p, dim);

    formula
        .iter()
        .zip(&conjugated)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0f64, f64::max)
}

/// Max pointwise violation of |Â(μ)φ| ≤ Â^θ(μ₀)|φ|.
pub fn fp_pointwise_domination_gap(spec: &FpWalkSpec, phi: &[Complex64]) -> f64 {
    let p = spec.p();
    let dim = spec.dim();
    let states = spec.state_count();
    let chars = character_table(p);
    let w = spec.weights_f64();
    let mut worst = 0.0f64;
    for ai in 0..states {
        let a = index_to_point(ai, p, dim);
        let mut lhs = Complex64::new(0.0, 0.0);
        let mut rhs = 0.0;
        for omega in 0..spec.n_letters() {
            let perm = dual_transpose_perm(spec.matrix(omega), p, dim);
            let mut dot = 0u64;
            for (ac, uc) in a.iter().zip(spec.translation(omega)) {
                dot = (dot + mul_mod(*ac, *uc, p)) % p;
            }
            lhs += chars[dot as usize] * phi[perm[ai]] * w[omega];
            rhs += w[omega] * phi[perm[ai]].norm();
        }
        worst = worst.max(lhs.norm() - rhs);
    }
    worst
}

/// Partition of F_p^d into orbits of the group generated by the linear
/// parts.
#[derive(Clone, Debug)]
pub struct OrbitCensus {
    pub orbit_of: Vec<usize>,
    pub orbit_sizes: Vec<usize>,
    pub zero_is_singleton: bool,
    /// The small-orbit hypothesis: every orbit except {0} has size ≥ p.
    /// A failure is reported here, never hidden.
    pub nonzero_orbits_large: bool,
}

pub fn fp_orbit_census(spec: &FpWalkSpec) -> OrbitCensus {
    let states = spec.state_count();
    let perms: Vec<Vec<usize>> = (0..spec.n_letters())
        .map(|omega| {
            (0..states)
                .map(|i| point_to_index(&spec.matrix(omega).mul_vec(&spec.point(i)), spec.p()))
                .collect()
        })
        .collect();
    let mut orbit_of = vec![usize::MAX; states];
    let mut sizes = Vec::new();
    for start in 0..states {
        if orbit_of[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut stack = vec![start];
        orbit_of[start] = id;
        let mut count = 0usize;
        while let Some(x) = stack.pop() {
            count += 1;
            for perm in &perms {
                let y = perm[x];
                if orbit_of[y] == usize::MAX {
                    orbit_of[y] = id;
                    stack.push(y);
                }
            }
        }
        sizes.push(count);
    }
    let zero_idx = 0usize; // index of the origin in row-major order
    let zero_is_singleton = sizes[orbit_of[zero_idx]] == 1;
    let nonzero_orbits_large = sizes
        .iter()
        .enumerate()
        .all(|(id, &s)| id == orbit_of[zero_idx] || s >= spec.p() as usize);
    OrbitCensus { orbit_of, orbit_sizes: sizes, zero_is_singleton, nonzero_orbits_large }
}

/// Elements of Γ = ⟨generators⟩ ⊆ SL_d(F_p) enumerated by BFS, with
/// left-multiplication permutations per generator.
#[derive(Clone, Debug)]
pub struct GroupTable {
    pub p: u64,
    pub dim: usize,
    pub elements: Vec<FpMatrix>,
    pub index: HashMap<Vec<u64>, usize>,
    /// left_mul[g][e] = index of generator_g · element_e
    pub left_mul: Vec<Vec<usize>>,
    /// inverse permutations: inv_left_mul[g][e] = index of generator_g^{-1} · element_e
    pub inv_left_mul: Vec<Vec<usize>>,
}

impl GroupTable {
    pub fn order(&self) -> usize {
        self.elements.len()
    }
}

pub fn build_group_table(mats: &[FpMatrix], budget: usize) -> Result<GroupTable, FpError> {
    assert!(!mats.is_empty());
    let p = mats[0].p;
    let dim = mats[0].dim();
    let id = FpMatrix::identity(p, dim);
    let mut elements = vec![id.clone()];
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    index.insert(id.entries().to_vec(), 0);
    let mut frontier = vec![0usize];
    while let Some(ei) = frontier.pop() {
        let e = elements[ei].clone();
        for g in mats {
            let prod = g.mul(&e);
            let key = prod.entries().to_vec();
            if !index.contains_key(&key) {
                if elements.len() >= budget {
                    return Err(FpError::GroupTooLarge(budget));
                }
                index.insert(key, elements.len());
                frontier.push(elements.len());
                elements.push(prod);
            }
        }
    }
    let left_mul: Vec<Vec<usize>> = mats
        .iter()
        .map(|g| {
            elements
                .iter()
                .map(|e| index[g.mul(e).entries()])
                .collect()
        })
        .collect();
    let inv_left_mul: Vec<Vec<usize>> = left_mul
        .iter()
        .map(|perm| {
            let mut inv = vec![0usize; perm.len()];
            for (src, &dst) in perm.iter().enumerate() {
                inv[dst] = src;
            }
            inv
        })
        .collect();
    Ok(GroupTable { p, dim, elements, index, left_mul, inv_left_mul })
}

/// Operator norm of the left convolution by μ₀^{*k} restricted to the
/// mean-zero subspace of L²(Γ): the largest singular value, found by
/// power iteration on BᵀB with seeded restarts. Matrix-free: one apply
/// costs |Γ|·|Ω| per convolution step.
pub fn regular_rep_gap(table: &GroupTable, weights: &[f64], k: u32) -> f64 {
    assert_eq!(weights.len(), table.left_mul.len());
    assert!(k >= 1);
    let n = table.order();
    let apply_m = |v: &[f64]| -> Vec<f64> {
        // (L(μ0) v)(g) = Σ_i w_i v(γ_i^{-1} g)
        let mut out = vec![0.0; n];
        for (i, w) in weights.iter().enumerate() {
            let inv = &table.inv_left_mul[i];
            for (g, o) in out.iter_mut().enumerate() {
                *o += w * v[inv[g]];
            }
        }
        out
    };
    let apply_mt = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (i, w) in weights.iter().enumerate() {
            let fwd = &table.left_mul[i];
            for (g, o) in out.iter_mut().enumerate() {
                *o += w * v[fwd[g]];
            }
        }
        out
    };
    let project = |v: &mut Vec<f64>| {
        let mean: f64 = v.iter().sum::<f64>() / n as f64;
        for x in v.iter_mut() {
            *x -= mean;
        }
    };

    let mut best = 0.0f64;
    for restart in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ restart);
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
        project(&mut v);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = norm(&v);
        if nv == 0.0 {
            continue;
        }
        for x in v.iter_mut() {
            *x /= nv;
        }
        let mut sigma_sq = 0.0f64;
        for _ in 0..10_000 {
            let mut w = v.clone();
            for _ in 0..k {
                w = apply_m(&w);
            }
            for _ in 0..k {
                w = apply_mt(&w);
            }
            project(&mut w);
            let new_sigma_sq: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
            let nw = norm(&w);
            if nw == 0.0 {
                sigma_sq = 0.0;
                break;
            }
            for (vi, wi) in v.iter_mut().zip(&w) {
                *vi = wi / nw;
            }
            if (new_sigma_sq - sigma_sq).abs() <= 1e-12 * new_sigma_sq.abs() + 1e-300 {
                sigma_sq = new_sigma_sq;
                break;
            }
            sigma_sq = new_sigma_sq;
        }
        best = best.max(sigma_sq.max(0.0).sqrt());
    }
    best
}

/// μ₀^{*k} as a dense vector on the group table.
pub fn convolution_power(table: &GroupTable, weights: &[f64], k: u32) -> Vec<f64> {
    let n = table.order();
    let mut m = vec![0.0; n];
    m[0] = 1.0; // δ_identity; identity has index 0 by construction
    for _ in 0..k {
        let mut next = vec![0.0; n];
        for (i, w) in weights.iter().enumerate() {
            let fwd = &table.left_mul[i];
            for (g, &mass) in m.iter().enumerate() {
                if mass != 0.0 {
                    next[fwd[g]] += w * mass;
                }
            }
        }
        m = next;
    }
    m
}

/// Â^θ(m)|φ|(a) = Σ_γ m(γ) |φ|(γᵀ a) for a measure m on the group table.
pub fn apply_dual_theta_measure(
    table: &GroupTable,
    measure: &[f64],
    phi_abs: &[f64],
    p: u64,
    dim: usize,
) -> Vec<f64> {
    let states = (p as usize).pow(dim as u32);
    let mut out = vec![0.0; states];
    for (gi, &mass) in measure.iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        let perm = dual_transpose_perm(&table.elements[gi], p, dim);
        for (a, o) in out.iter_mut().enumerate() {
            *o += mass * phi_abs[perm[a]];
        }
    }
    out
}

/// max over h ∈ Γ of ‖ |φ| - Â^θ(h)|φ| ‖_{L̂⁴}.
pub fn gap_in_l4_quantity(table: &GroupTable, phi_abs: &[f64], p: u64, dim: usize) -> f64 {
    let states = (p as usize).pow(dim as u32);
    let mut best = 0.0f64;
    for h in &table.elements {
        let perm = dual_transpose_perm(h, p, dim);
        let mut sum = 0.0;
        for a in 0..states {
            let d = phi_abs[a] - phi_abs[perm[a]];
            sum += d * d * d * d;
        }
        best = best.max((sum / states as f64).powf(0.25));
    }
    best
}

/// One row of an L² / L^∞ / L̂⁴ decay run.
#[derive(Clone, Debug)]
pub struct LvDecayRow {
    pub l: usize,
    pub l2: f64,
    pub linf: f64,
    pub l4_hat: f64,
    /// max_h ‖|η̂| - Â^θ(h)|η̂|‖_{L̂⁴}: how far |η̂| is from Γᵀ-invariance
    pub gap_in_l4: f64,
    pub hyp_mass_ok: bool,
    pub hyp_l4_ok: bool,
    /// ‖Â^θ(μ₀^{*k})|η̂|‖_{L̂⁴} / ‖η̂‖_{L̂⁴} when the gap is certified.
    pub l4_ratio: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct LvDecayReport {
    pub rows: Vec<LvDecayRow>,
    /// first l with ‖·‖_{L²} ≤ 19 p^{-1/4} (trivial at desk scale: L² ≤ 1)
    pub first_passage_19p: Option<usize>,
    /// first l with ‖·‖_{L²} ≤ 2/sqrt(orbit size): the meaningful branch
    pub first_passage_orbit: Option<usize>,
    pub orbit_l2_bound: f64,
    pub fixed_point_branch: bool,
    /// rows where all L̂⁴-decay hypotheses held (the 19 p^{-1/4} bar is
    /// unreachable for p < 19^4, so expect zero at desk scale)
    pub hypothesis_coverage: usize,
}

/// Exact decay run of A(μ)^l δ_{x0} with per-l norms and the L̂⁴ gap
/// quantities. `gap_certified` carries (k, ‖L₀(μ₀^{*k})‖) when the
/// regular-representation gap has been measured.
pub fn lv_decay_run(
    spec: &FpWalkSpec,
    x0: &[u64],
    l_max: usize,
    table: Option<&GroupTable>,
    gap_certified: Option<(u32, f64)>,
) -> LvDecayReport {
    let p = spec.p();
    let dim = spec.dim();
    let states = spec.state_count();
    let census = fp_orbit_census(spec);
    let orbit_size = census.orbit_sizes[census.orbit_of[spec.index(x0)]];
    let orbit_l2_bound = 2.0 / (orbit_size as f64).sqrt();
    let bound_19p = 19.0 * (p as f64).powf(-0.25);

    let fixed = fp_fixed_point(spec);
    let fixed_point_branch = fixed.point.as_deref() == Some(x0);

    let conv_k = gap_certified.and_then(|(k, gap)| {
        table.map(|t| (convolution_power(t, &spec.weights_f64(), k), gap))
    });

    let perms: Vec<Vec<usize>> = (0..spec.n_letters()).map(|i| spec.permutation(i)).collect();
    let w = spec.weights_f64();
    let mut cur = vec![0.0f64; states];
    cur[spec.index(x0)] = 1.0;

    let mut rows = Vec::with_capacity(l_max + 1);
    let mut first_passage_19p = None;
    let mut first_passage_orbit = None;
    let mut hypothesis_coverage = 0usize;
    for l in 0..=l_max {
        let l2 = fp_norm(&cur, FpNormExponent::L2);
        let linf = fp_norm(&cur, FpNormExponent::LInf);
        let complex: Vec<Complex64> = cur.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let hat = fp_dft(&complex, p, dim);
        let hat_abs: Vec<f64> = hat.iter().map(|c| c.norm()).collect();
        let l4_hat = fp_dual_norm(&hat, states, FpNormExponent::L4);

        let hyp_mass_ok = linf <= (40.0 / 41.0) * l2;
        let hyp_l4_ok = l4_hat >= bound_19p;
        let gap_in_l4 = table.map_or(0.0, |t| gap_in_l4_quantity(t, &hat_abs, p, dim));

        // qualifying rows must show genuine Γᵀ-anisotropy of |η̂|
        if census.nonzero_orbits_large && hyp_mass_ok && hyp_l4_ok {
            if let Some(t) = table {
                let q = gap_in_l4_quantity(t, &hat_abs, p, dim);
                assert!(
                    q >= 0.07 * l4_hat - 1e-9,
                    "gap-in-L4 conclusion failed at l = {l}"
                );
            }
        }

        let l4_ratio = match &conv_k {
            Some((m, gap)) if *gap <= 2f64.powi(-5) && hyp_mass_ok && hyp_l4_ok
                && census.nonzero_orbits_large =>
            {
                let t = table.unwrap();
                let image = apply_dual_theta_measure(t, m, &hat_abs, p, dim);
                let image_c: Vec<Complex64> =
                    image.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                let ratio = fp_dual_norm(&image_c, states, FpNormExponent::L4) / l4_hat;
                let bound = 2f64.powf(-(2f64.powi(-34))) + 1e-9;
                assert!(ratio <= bound, "L4 decay ratio {ratio} above {bound} at l = {l}");
                hypothesis_coverage += 1;
                Some(ratio)
            }
            _ => None,
        };

        if first_passage_19p.is_none() && l2 <= bound_19p {
            first_passage_19p = Some(l);
        }
        if first_passage_orbit.is_none() && l2 <= orbit_l2_bound {
            first_passage_orbit = Some(l);
        }
        rows.push(LvDecayRow { l, l2, linf, l4_hat, gap_in_l4, hyp_mass_ok, hyp_l4_ok, l4_ratio });

        if l < l_max {
            let mut next = vec![0.0; states];
            for (omega, perm) in perms.iter().enumerate() {
                for (src, &dst) in perm.iter().enumerate() {
                    next[dst] += w[omega] * cur[src];
                }
            }
            cur = next;
        }
    }
    LvDecayReport {
        rows,
        first_passage_19p,
        first_passage_orbit,
        orbit_l2_bound,
        fixed_point_branch,
        hypothesis_coverage,
    }
}

/// Diagnostics mirroring the product-chain argument: whether all
/// length-k words send x₀ to a single point, for k = 1..=d+1.
#[derive(Clone, Debug)]
pub struct ProductCheck {
    pub chain_singletons: Vec<bool>,
    pub consistent: bool,
}

#[derive(Clone, Debug)]
pub struct FpFixedPointReport {
    pub point: Option<Vec<u64>>,
    /// True when the solution space is a single point.
    pub unique: bool,
    pub product_check: ProductCheck,
}

/// Solves (γ(ω) - I)x = -u(ω) over F_p simultaneously for all ω by
/// Gaussian elimination of the stacked system.
pub fn fp_fixed_point(spec: &FpWalkSpec) -> FpFixedPointReport {
    let p = spec.p();
    let d = spec.dim();
    let mut rows: Vec<Vec<u64>> = Vec::new();
    let mut rhs: Vec<u64> = Vec::new();
    for omega in 0..spec.n_letters() {
        let g = spec.matrix(omega);
        let u = spec.translation(omega);
        for i in 0..d {
            let mut row = Vec::with_capacity(d);
            for j in 0..d {
                let mut e = g.entry(i, j);
                if i == j {
                    e = (e + p - 1) % p;
                }
                row.push(e);
            }
            rows.push(row);
            rhs.push((p - u[i] % p) % p);
        }
    }
    let solved = solve_mod_p(&rows, &rhs, p, d);
    let (point, unique) = match solved {
        Some((x, free)) => (Some(x), free == 0),
        None => (None, false),
    };

    // product-chain diagnostics around the candidate (or the origin)
    let x0 = point.clone().unwrap_or_else(|| vec![0; d]);
    let mut chain_singletons = Vec::new();
    let mut images = vec![x0.clone()];
    for _ in 1..=d + 1 {
        let mut next: Vec<Vec<u64>> = Vec::new();
        for x in &images {
            for omega in 0..spec.n_letters() {
                let y = spec.map_point(omega, x);
                if !next.contains(&y) {
                    next.push(y);
                }
            }
        }
        chain_singletons.push(next.len() == 1);
        images = next;
    }
    let consistent = point.is_none() || chain_singletons.iter().all(|&b| b);
    FpFixedPointReport { point, unique, product_check: ProductCheck { chain_singletons, consistent } }
}

/// Gaussian elimination mod p for an m×d system; returns a particular
/// solution and the number of free columns, or None when inconsistent.
fn solve_mod_p(rows: &[Vec<u64>], rhs: &[u64], p: u64, d: usize) -> Option<(Vec<u64>, usize)> {
    let m = rows.len();
    let mut a: Vec<Vec<u64>> = rows
        .iter()
        .zip(rhs)
        .map(|(r, &b)| {
            let mut row = r.clone();
            row.push(b);
            row
        })
        .collect();
    let mut pivot_cols = Vec::new();
    let mut r = 0usize;
    for c in 0..d {
        let Some(pr) = (r..m).find(|&i| a[i][c] != 0) else { continue };
        a.swap(r, pr);
        let inv = mod_inv(a[r][c], p);
        for j in c..=d {
            a[r][j] = mul_mod(a[r][j], inv, p);
        }
        for i in 0..m {
            if i != r && a[i][c] != 0 {
                let f = a[i][c];
                for j in c..=d {
                    let sub = mul_mod(f, a[r][j], p);
                    a[i][j] = (a[i][j] + p - sub) % p;
                }
            }
        }
        pivot_cols.push(c);
        r += 1;
        if r == m {
            break;
        }
    }
    // inconsistency: zero row with nonzero rhs
    for i in r..m {
        if a[i][..d].iter().all(|&v| v == 0) && a[i][d] != 0 {
            return None;
        }
    }
    let mut x = vec![0u64; d];
    for (row, &c) in pivot_cols.iter().enumerate() {
        x[c] = a[row][d];
    }
    Some((x, d - pivot_cols.len()))
}

/// One-step concentration scan: max over pairs (x, y), with x ranging
/// outside `exclude`, of μ({g : gx = y}).
pub fn one_step_concentration(
    spec: &FpWalkSpec,
    exclude: Option<&[u64]>,
) -> (f64, Vec<u64>, Vec<u64>) {
    let states = spec.state_count();
    let w = spec.weights_f64();
    let mut best = (0.0f64, vec![0u64; spec.dim()], vec![0u64; spec.dim()]);
    for xi in 0..states {
        let x = spec.point(xi);
        if exclude == Some(x.as_slice()) {
            continue;
        }
        let mut by_image: HashMap<Vec<u64>, f64> = HashMap::new();
        for omega in 0..spec.n_letters() {
            *by_image.entry(spec.map_point(omega, &x)).or_insert(0.0) += w[omega];
        }
        for (y, mass) in by_image {
            if mass > best.0 {
                best = (mass, x.clone(), y);
            }
        }
    }
    best
}

/// Verdict of the trapped-or-decay dichotomy.
#[derive(Clone, Debug)]
pub enum GapDichotomyVerdict {
    Trapped {
        x: Vec<u64>,
        y: Vec<u64>,
        mass: f64,
        /// Set when the trapping configuration is the exactly solved
        /// fixed point of the generated group.
        fixed_point: Option<Vec<u64>>,
        fixed_point_unique: bool,
    },
    Decay {
        worst_start: Vec<u64>,
        report: LvDecayReport,
        fitted_c: f64,
    },
}

/// Trapped-or-decay verdict for a walk, optionally relative to a
/// starting point.
///
/// The walk's fixed point (if any) always absorbs one-step mass 1, so
/// its self-pair says nothing about other starts; the concentration
/// scan therefore excludes it. TRAPPED is reported when the declared
/// start is the fixed point itself, or when some other pair absorbs
/// one-step mass ≥ 1-ε. Otherwise the walk decays: the exact scan runs
/// from the worst late-time L^∞ start and fits the smallest C ≥ 1 with
/// L^∞(n) ≤ C·max(p^{-1/4}, e^{-n/C}) over the whole run.
pub fn gap_dichotomy_verdict(
    spec: &FpWalkSpec,
    start: Option<&[u64]>,
    n_max: usize,
    epsilon: f64,
) -> Result<GapDichotomyVerdict, FpError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(FpError::InvalidEpsilon(epsilon));
    }
    let fixed = fp_fixed_point(spec);
    if let (Some(s), Some(f0)) = (start, fixed.point.as_ref()) {
        if s == f0.as_slice() {
            return Ok(GapDichotomyVerdict::Trapped {
                x: f0.clone(),
                y: f0.clone(),
                mass: 1.0,
                fixed_point: Some(f0.clone()),
                fixed_point_unique: fixed.unique,
            });
        }
    }
    let (mass, x, y) = one_step_concentration(spec, fixed.point.as_deref());
    if mass >= 1.0 - epsilon {
        let is_fixed = fixed.point.as_deref() == Some(x.as_slice());
        return Ok(GapDichotomyVerdict::Trapped {
            x,
            y,
            mass,
            fixed_point: if is_fixed { fixed.point.clone() } else { None },
            fixed_point_unique: is_fixed && fixed.unique,
        });
    }

    // worst-case start: argmax of late-time L^∞ over all starting
    // points other than the fixed point
    let states = spec.state_count();
    let perms: Vec<Vec<usize>> = (0..spec.n_letters()).map(|i| spec.permutation(i)).collect();
    let w = spec.weights_f64();
    let mut worst = (f64::NEG_INFINITY, 0usize);
    for start_idx in 0..states {
        if fixed.point.as_deref() == Some(spec.point(start_idx).as_slice()) {
            continue;
        }
        let mut cur = vec![0.0f64; states];
        cur[start_idx] = 1.0;
        for _ in 0..n_max {
            let mut next = vec![0.0; states];
            for (omega, perm) in perms.iter().enumerate() {
                for (src, &dst) in perm.iter().enumerate() {
                    next[dst] += w[omega] * cur[src];
                }
            }
            cur = next;
        }
        let linf = fp_norm(&cur, FpNormExponent::LInf);
        if linf > worst.0 {
            worst = (linf, start_idx);
        }
    }
    let x0 = spec.point(worst.1);
    let report = lv_decay_run(spec, &x0, n_max, None, None);

    // smallest C ≥ 1 (0.01 grid) dominating the L^∞ profile
    let p_branch = (spec.p() as f64).powf(-0.25);
    let mut fitted_c = 1.0f64;
    'fit: loop {
        let ok = report
            .rows
            .iter()
            .all(|row| row.linf <= fitted_c * p_branch.max((-(row.l as f64) / fitted_c).exp()) + 1e-12);
        if ok {
            break 'fit;
        }
        fitted_c += 0.01;
        if fitted_c > 1e4 {
            break 'fit; // profile cannot be dominated in this family
        }
    }
    Ok(GapDichotomyVerdict::Decay { worst_start: x0, report, fitted_c })
}

/// Initial-decay propagation: with ε = 1 - max one-step concentration,
/// the k-step L^∞ from any start is at most 1/2 + (1-ε)^k.
#[derive(Clone, Debug)]
pub struct InitDecayReport {
    pub epsilon: f64,
    /// (k, max over starts of ‖A(μ)^k δ_x‖_∞, bound 1/2 + (1-ε)^k)
    pub rows: Vec<(usize, f64, f64)>,
    pub holds: bool,
}

pub fn init_decay_check(spec: &FpWalkSpec, k_max: usize) -> InitDecayReport {
    let (mass, _, _) = one_step_concentration(spec, None);
    let epsilon = 1.0 - mass;
    let states = spec.state_count();
    let perms: Vec<Vec<usize>> = (0..spec.n_letters()).map(|i| spec.permutation(i)).collect();
    let w = spec.weights_f64();

    let mut per_start: Vec<Vec<f64>> = Vec::with_capacity(states);
    for start in 0..states {
        let mut cur = vec![0.0f64; states];
        cur[start] = 1.0;
        let mut linfs = Vec::with_capacity(k_max + 1);
        for _ in 0..k_max {
            let mut next = vec![0.0; states];
            for (omega, perm) in perms.iter().enumerate() {
                for (src, &dst) in perm.iter().enumerate() {
                    next[dst] += w[omega] * cur[src];
                }
            }
            cur = next;
            linfs.push(fp_norm(&cur, FpNormExponent::LInf));
        }
        per_start.push(linfs);
    }
    let mut rows = Vec::with_capacity(k_max);
    let mut holds = true;
    for k in 1..=k_max {
        let max_linf = per_start.iter().map(|v| v[k - 1]).fold(0.0f64, f64::max);
        let bound = 0.5 + (1.0 - epsilon).powi(k as i32);
        if max_linf > bound + 1e-12 {
            holds = false;
        }
        rows.push((k, max_linf, bound));
    }
    InitDecayReport { epsilon, rows, holds }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{rat, IntMatrix, TorusPoint};

    fn std_sl2_mod(p: u64) -> FpWalkSpec {
        FpWalkSpec::new(
            p,
            vec!["a".into(), "b".into()],
            vec![rat(1, 2), rat(1, 2)],
            vec![
                FpMatrix::new(p, 2, vec![1, 1, 0, 1]),
                FpMatrix::new(p, 2, vec![1, 0, 1, 1]),
            ],
            vec![vec![0, 0], vec![0, 0]],
        )
        .unwrap()
    }

    fn symmetric_sl2_mod(p: u64) -> FpWalkSpec {
        let a = FpMatrix::new(p, 2, vec![1, 1, 0, 1]);
        let b = FpMatrix::new(p, 2, vec![1, 0, 1, 1]);
        FpWalkSpec::new(
            p,
            vec!["a".into(), "ai".into(), "b".into(), "bi".into()],
            vec![rat(1, 4), rat(1, 4), rat(1, 4), rat(1, 4)],
            vec![a.clone(), a.inverse(), b.clone(), b.inverse()],
            vec![vec![0, 0]; 4],
        )
        .unwrap()
    }

    #[test]
    fn primality_checks() {
        for p in [2u64, 3, 5, 7, 11, 13, 101, 2147483647] {
            assert!(is_prime_u64(p), "{p} is prime");
        }
        for n in [1u64, 4, 9, 15, 121, 1000000] {
            assert!(!is_prime_u64(n), "{n} is not prime");
        }
    }

    #[test]
    fn spec_validation() {
        std_sl2_mod(5);
        let err = FpWalkSpec::new(
            4,
            vec!["a".into()],
            vec![rat(1, 1)],
            vec![FpMatrix::identity(4, 2)],
            vec![vec![0, 0]],
        )
        .unwrap_err();
        assert_eq!(err, FpError::NotPrime(4));

        let err = FpWalkSpec::new(
            5,
            vec!["a".into()],
            vec![rat(1, 1)],
            vec![FpMatrix::new(5, 2, vec![2, 0, 0, 1])],
            vec![vec![0, 0]],
        )
        .unwrap_err();
        assert!(matches!(err, FpError::DeterminantNotOne(..)));
    }

    #[test]
    fn reduce_mod_p_examples() {
        let base = crate::walk::WalkSpec::new(
            vec!["a".into(), "b".into()],
            vec![rat(1, 2), rat(1, 2)],
            vec![
                IntMatrix::from_rows(&[vec![1, 1], vec![0, 1]]),
                IntMatrix::from_rows(&[vec![1, 0], vec![1, 1]]),
            ],
            vec![
                TorusPoint::exact(vec![rat(1, 3), rat(0, 1)]),
                TorusPoint::zero(2),
            ],
        )
        .unwrap();
        let reduced = reduce_spec_mod_p(&base, 5).unwrap();
        // 1/3 mod 5 = 1 · 3^{-1} = 2 since 3·2 = 6 ≡ 1
        assert_eq!(reduced.translation(0), &[2, 0]);

        let base_bad = base
            .with_translations(vec![
                TorusPoint::exact(vec![rat(1, 5), rat(0, 1)]),
                TorusPoint::zero(2),
            ])
            .unwrap();
        assert_eq!(reduce_spec_mod_p(&base_bad, 5).unwrap_err(), FpError::DenominatorDividesP(5));
    }

    #[test]
    fn census_std_sl2_mod5_and_mod11() {
        let census = fp_orbit_census(&std_sl2_mod(5));
        let mut sizes = census.orbit_sizes.clone();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![1, 24]);
        assert!(census.zero_is_singleton);
        assert!(census.nonzero_orbits_large);

        let census = fp_orbit_census(&std_sl2_mod(11));
        let mut sizes = census.orbit_sizes.clone();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![1, 120]);
        assert!(census.nonzero_orbits_large);
    }

    #[test]
    fn census_sizes_partition_the_state_space() {
        for p in [3u64, 5, 7] {
            let spec = std_sl2_mod(p);
            let census = fp_orbit_census(&spec);
            let total: usize = census.orbit_sizes.iter().sum();
            assert_eq!(total, spec.state_count());
            // every point's orbit id is within range
            assert!(census.orbit_of.iter().all(|&id| id < census.orbit_sizes.len()));
        }
    }

    #[test]
    fn census_identity_generator_is_degenerate() {
        let spec = FpWalkSpec::new(
            5,
            vec!["a".into()],
            vec![rat(1, 1)],
            vec![FpMatrix::identity(5, 2)],
            vec![vec![0, 0]],
        )
        .unwrap();
        let census = fp_orbit_census(&spec);
        assert_eq!(census.orbit_sizes.len(), 25);
        assert!(!census.nonzero_orbits_large);
    }

    #[test]
    fn evolve_preserves_mass_and_finds_equilibrium() {
        let spec = std_sl2_mod(5);
        let dist = fp_evolve(&spec, &[1, 0], 30);
        assert!(dist.total_mass_exact().unwrap().is_one());
        let v = dist.to_f64();
        let linf = fp_norm(&v, FpNormExponent::LInf);
        assert!((linf - 1.0 / 24.0).abs() <= 0.1 / 24.0, "L∞ {} vs 1/24", linf);
        // mass at the origin stays zero: the orbit never visits it
        assert_eq!(v[0], 0.0);
    }

    #[test]
    fn evolve_n0_is_delta_and_fixed_point_stays() {
        let spec = std_sl2_mod(5);
        let d0 = fp_evolve(&spec, &[2, 3], 0);
        let v = d0.to_f64();
        assert_eq!(v[spec.index(&[2, 3])], 1.0);
        // 0 is fixed for the linear walk
        let dn = fp_evolve(&spec, &[0, 0], 17);
        assert_eq!(dn.to_f64()[0], 1.0);
    }

    #[test]
    fn linf_nonincreasing_for_symmetric_walks() {
        let spec = symmetric_sl2_mod(7);
        let mut prev = f64::INFINITY;
        for n in 0..12 {
            let linf = fp_norm(&fp_evolve(&spec, &[1, 2], n).to_f64(), FpNormExponent::LInf);
            assert!(linf <= prev + 1e-12);
            prev = linf;
        }
    }

    #[test]
    fn norms_closed_forms() {
        let spec = std_sl2_mod(5);
        let delta = fp_evolve(&spec, &[1, 0], 0).to_f64();
        assert!((fp_norm(&delta, FpNormExponent::L2) - 1.0).abs() < 1e-15);
        assert!((fp_norm(&delta, FpNormExponent::LInf) - 1.0).abs() < 1e-15);

        let states = spec.state_count();
        let uniform = vec![1.0 / states as f64; states];
        let expected = (states as f64).powf(-0.5);
        assert!((fp_norm(&uniform, FpNormExponent::L2) - expected).abs() < 1e-15);

        // f̂ of δ_0 is constantly 1 on the dual: normalized norms are 1
        let hat = fp_dft(
            &delta.iter().map(|&v| Complex64::new(v, 0.0)).collect::<Vec<_>>(),
            5,
            2,
        );
        let dirac0 = fp_evolve(&spec, &[0, 0], 0).to_f64();
        let hat0 = fp_dft(
            &dirac0.iter().map(|&v| Complex64::new(v, 0.0)).collect::<Vec<_>>(),
            5,
            2,
        );
        assert!(hat0.iter().all(|c| (c.norm() - 1.0).abs() < 1e-12));
        assert!((fp_dual_norm(&hat0, states, FpNormExponent::L2) - 1.0).abs() < 1e-12);
        assert!((fp_dual_norm(&hat0, states, FpNormExponent::L4) - 1.0).abs() < 1e-12);
        // Parseval for the shifted delta too
        assert!((fp_dual_norm(&hat, states, FpNormExponent::L2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dual_function_wrapper_matches_kernels() {
        let spec = std_sl2_mod(5);
        let dist = fp_evolve(&spec, &[1, 0], 6);
        let hat = fp_dft_of(&dist);
        let raw: Vec<Complex64> =
            dist.to_f64().iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let expect = fp_dft(&raw, 5, 2);
        assert_eq!(hat.values.len(), expect.len());
        for (a, b) in hat.values.iter().zip(&expect) {
            assert!((a - b).norm() < 1e-15);
        }
        assert!((hat.norm(FpNormExponent::L2)
            - fp_dual_norm(&expect, 25, FpNormExponent::L2))
            .abs()
            < 1e-15);
    }

    #[test]
    fn dft_uniform_is_dual_indicator() {
        let p = 5u64;
        let states = 25usize;
        let uniform = vec![Complex64::new(1.0 / states as f64, 0.0); states];
        let hat = fp_dft(&uniform, p, 2);
        assert!((hat[0].norm() - 1.0).abs() < 1e-12);
        for a in 1..states {
            assert!(hat[a].norm() < 1e-12);
        }
    }

    #[test]
    fn dft_round_trip_and_parseval_random() {
        use rand::Rng;
        for p in [3u64, 5, 7, 11] {
            let states = (p * p) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(p);
            let f: Vec<Complex64> = (0..states)
                .map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
                .collect();
            let hat = fp_dft(&f, p, 2);
            let back = fp_dft_inverse(&hat, p, 2);
            let max_err = f
                .iter()
                .zip(&back)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0f64, f64::max);
            assert!(max_err < 1e-12, "p = {p}: round trip error {max_err}");

            let l2 = (f.iter().map(|c| c.norm_sqr()).sum::<f64>()).sqrt();
            let l2_hat = fp_dual_norm(&hat, states, FpNormExponent::L2);
            assert!((l2 - l2_hat).abs() < 1e-10, "p = {p}: Parseval");
        }
    }

    #[test]
    fn dft_matches_naive_double_loop() {
        use rand::Rng;
        let p = 5u64;
        let states = 25usize;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let f: Vec<Complex64> =
            (0..states).map(|_| Complex64::new(rng.gen(), rng.gen())).collect();
        let hat = fp_dft(&f, p, 2);
        // independent oracle: explicit double loop over coordinates
        for a1 in 0..p {
            for a2 in 0..p {
                let mut acc = Complex64::new(0.0, 0.0);
                for x1 in 0..p {
                    for x2 in 0..p {
                        let dot = (a1 * x1 + a2 * x2) % p;
                        let th = std::f64::consts::TAU * dot as f64 / p as f64;
                        acc += Complex64::new(th.cos(), th.sin())
                            * f[(x1 * p + x2) as usize];
                    }
                }
                let idx = (a1 * p + a2) as usize;
                assert!((acc - hat[idx]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn dual_action_formula_matches_conjugation() {
        use rand::Rng;
        let p = 5u64;
        let states = 25usize;
        // identity map: trivially equal
        let id_spec = FpWalkSpec::new(
            p,
            vec!["a".into()],
            vec![rat(1, 1)],
            vec![FpMatrix::identity(p, 2)],
            vec![vec![0, 0]],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let phi: Vec<Complex64> =
            (0..states).map(|_| Complex64::new(rng.gen(), rng.gen())).collect();
        assert!(fp_dual_action_check(&id_spec, &phi, 0) < 1e-12);

        // pure translation: phase factor only
        let trans_spec = FpWalkSpec::new(
            p,
            vec!["a".into()],
            vec![rat(1, 1)],
            vec![FpMatrix::identity(p, 2)],
            vec![vec![2, 3]],
        )
        .unwrap();
        assert!(fp_dual_action_check(&trans_spec, &phi, 0) < 1e-10);

        // random affine maps
        let spec = FpWalkSpec::new(
            p,
            vec!["a".into(), "b".into()],
            vec![rat(1, 2), rat(1, 2)],
            vec![
                FpMatrix::new(p, 2, vec![1, 1, 0, 1]),
                FpMatrix::new(p, 2, vec![1, 0, 1, 1]),
            ],
            vec![vec![1, 4], vec![3, 2]],
        )
        .unwrap();
        for omega in 0..2 {
            assert!(fp_dual_action_check(&spec, &phi, omega) < 1e-10);
        }
    }

    #[test]
    fn pointwise_domination_holds() {
        use rand::Rng;
        let spec = FpWalkSpec::new(
            7,
            vec!["a".into(), "b".into()],
            vec![rat(1, 3), rat(2, 3)],
            vec![
                FpMatrix::new(7, 2, vec![1, 1, 0, 1]),
                FpMatrix::new(7, 2, vec![1, 0, 1, 1]),
            ],
            vec![vec![1, 2], vec![5, 0]],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let phi: Vec<Complex64> = (0..spec.state_count())
                .map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
                .collect();
            assert!(fp_pointwise_domination_gap(&spec, &phi) <= 1e-12);
        }
    }

    #[test]
    fn fixed_point_constructed_mod5() {
        let p = 5u64;
        let x0 = [2u64, 3u64];
        let a = FpMatrix::new(p, 2, vec![1, 1, 0, 1]);
        let b = FpMatrix::new(p, 2, vec![1, 0, 1, 1]);
        // u(ω) = x0 - γ(ω)x0
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
        .unwrap();
        let report = fp_fixed_point(&spec);
        assert_eq!(report.point, Some(vec![2, 3]));
        assert!(report.unique);
        assert!(report.product_check.consistent);
        for omega in 0..2 {
            assert_eq!(spec.map_point(omega, &[2, 3]), vec![2, 3]);
        }
    }

    #[test]
    fn fixed_point_zero_for_linear_and_none_for_generic() {
        let spec = std_sl2_mod(5);
        let report = fp_fixed_point(&spec);
        assert_eq!(report.point, Some(vec![0, 0]));

        // generic translations mod 7: oracle is the exhaustive scan
        let spec = FpWalkSpec::new(
            7,
            vec!["a".into(), "b".into()],
            vec![rat(1, 2), rat(1, 2)],
            vec![
                FpMatrix::new(7, 2, vec![1, 1, 0, 1]),
                FpMatrix::new(7, 2, vec![1, 0, 1, 1]),
            ],
            vec![vec![1, 2], vec![3, 4]],
        )
        .unwrap();
        let report = fp_fixed_point(&spec);
        let scan: Vec<Vec<u64>> = (0..spec.state_count())
            .map(|i| spec.point(i))
            .filter(|x| (0..2).all(|omega| &spec.map_point(omega, x) == x))
            .collect();
        match report.point {
            Some(x) => assert!(scan.contains(&x)),
            None => assert!(scan.is_empty()),
        }
    }

    #[test]
    fn group_table_orders() {
        // SL_2(F_5) has order 120
        let mats = vec![
            FpMatrix::new(5, 2, vec![1, 1, 0, 1]),
            FpMatrix::new(5, 2, vec![1, 0, 1, 1]),
        ];
        let table = build_group_table(&mats, 10_000).unwrap();
        assert_eq!(table.order(), 120);

        // {±I} is a group of order 2
        let mats = vec![FpMatrix::new(5, 2, vec![4, 0, 0, 4])];
        let table = build_group_table(&mats, 100).unwrap();
        assert_eq!(table.order(), 2);

        let err = build_group_table(
            &[
                FpMatrix::new(11, 2, vec![1, 1, 0, 1]),
                FpMatrix::new(11, 2, vec![1, 0, 1, 1]),
            ],
            100,
        )
        .unwrap_err();
        assert_eq!(err, FpError::GroupTooLarge(100));
    }

    #[test]
    fn regular_rep_gap_sign_group_is_zero() {
        // Γ = {±I}: averaging the two elements kills the sign function
        let mats = vec![FpMatrix::new(5, 2, vec![4, 0, 0, 4]), FpMatrix::identity(5, 2)];
        let table = build_group_table(&mats, 100).unwrap();
        let gap = regular_rep_gap(&table, &[0.5, 0.5], 1);
        assert!(gap < 1e-9, "gap {gap}");
    }

    #[test]
    fn regular_rep_gap_submultiplicative_mod5() {
        let spec = symmetric_sl2_mod(5);
        let table = build_group_table(spec.matrices(), 10_000).unwrap();
        let w = spec.weights_f64();
        let g1 = regular_rep_gap(&table, &w, 1);
        assert!(g1 < 1.0, "spectral gap expected, got {g1}");
        assert!(g1 > 0.0);
        for k in 2..=6u32 {
            let gk = regular_rep_gap(&table, &w, k);
            assert!(gk <= g1.powi(k as i32) + 1e-9, "k = {k}: {gk} vs {}", g1.powi(k as i32));
        }
        // general submultiplicativity across split powers
        for (j, k) in [(2u32, 3u32), (1, 4), (3, 3)] {
            let gj = regular_rep_gap(&table, &w, j);
            let gk = regular_rep_gap(&table, &w, k);
            let gjk = regular_rep_gap(&table, &w, j + k);
            assert!(gjk <= gj * gk + 1e-9, "({j},{k}): {gjk} vs {}", gj * gk);
        }
    }

    #[test]
    fn lv_decay_run_reaches_equilibrium_scale() {
        let spec = std_sl2_mod(11);
        let report = lv_decay_run(&spec, &[1, 0], 40, None, None);
        // L² ≤ 19 p^{-1/4} is vacuous (bound > 1); recorded at l = 0
        assert_eq!(report.first_passage_19p, Some(0));
        // the meaningful crossing: below 2/sqrt(orbit size)
        assert!(report.first_passage_orbit.is_some());
        assert!(!report.fixed_point_branch);
        let last = report.rows.last().unwrap();
        assert!(last.linf <= 2.0 / 120.0);
    }

    #[test]
    fn lv_decay_run_fixed_point_branch() {
        let p = 5u64;
        let x0 = [2u64, 3u64];
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
        .unwrap();
        let report = lv_decay_run(&spec, &[2, 3], 10, None, None);
        assert!(report.fixed_point_branch);
        for row in &report.rows {
            assert!((row.l2 - 1.0).abs() < 1e-12);
            assert!((row.linf - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gap_dichotomy_trapped_and_decay() {
        // dominant atom fixing the line x2 = 3: TRAPPED away from any
        // whole-walk fixed point
        let p = 5u64;
        let spec = FpWalkSpec::new(
            p,
            vec!["a".into(), "b".into()],
            vec![rat(99, 100), rat(1, 100)],
            vec![
                FpMatrix::new(p, 2, vec![1, 1, 0, 1]),
                FpMatrix::new(p, 2, vec![1, 0, 1, 1]),
            ],
            vec![vec![2, 0], vec![1, 1]],
        )
        .unwrap();
        match gap_dichotomy_verdict(&spec, None, 10, 0.05).unwrap() {
            GapDichotomyVerdict::Trapped { mass, .. } => assert!(mass >= 0.95),
            GapDichotomyVerdict::Decay { .. } => panic!("expected TRAPPED"),
        }

        // fixed-point spec, started at the fixed point: TRAPPED with the
        // exactly solved fixed point
        let x0 = [2u64, 3u64];
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
        let fp_spec = FpWalkSpec::new(
            p,
            vec!["a".into(), "b".into()],
            vec![rat(1, 2), rat(1, 2)],
            vec![a, b],
            trans,
        )
        .unwrap();
        match gap_dichotomy_verdict(&fp_spec, Some(&x0), 10, 0.3).unwrap() {
            GapDichotomyVerdict::Trapped { fixed_point, fixed_point_unique, .. } => {
                assert_eq!(fixed_point, Some(vec![2, 3]));
                assert!(fixed_point_unique);
            }
            GapDichotomyVerdict::Decay { .. } => panic!("expected TRAPPED"),
        }

        // std-sl2 mod 7: DECAY with a recorded profile (the self-pair of
        // the fixed point 0 is excluded from the scan)
        let spec = std_sl2_mod(7);
        match gap_dichotomy_verdict(&spec, None, 30, 0.3).unwrap() {
            GapDichotomyVerdict::Decay { report, fitted_c, .. } => {
                assert!(fitted_c < 100.0);
                assert!(report.first_passage_orbit.is_some());
            }
            GapDichotomyVerdict::Trapped { .. } => panic!("expected DECAY"),
        }

        // degenerate epsilon rejected
        assert_eq!(
            gap_dichotomy_verdict(&std_sl2_mod(5), None, 5, 1.0).unwrap_err(),
            FpError::InvalidEpsilon(1.0)
        );
    }

    #[test]
    fn init_decay_bound_dominates() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut tested = 0;
        while tested < 20 {
            let p = *[5u64, 7].iter().nth(rng.gen_range(0..2)).unwrap();
            let n_letters = 3;
            let mut mats = Vec::new();
            let mut trans = Vec::new();
            for _ in 0..n_letters {
                // random wort of elementary generators keeps det = 1
                let mut m = FpMatrix::identity(p, 2);
                for _ in 0..rng.gen_range(1..5) {
                    let k = rng.gen_range(0..p);
                    let e = if rng.gen_bool(0.5) {
                        FpMatrix::new(p, 2, vec![1, k, 0, 1])
                    } else {
                        FpMatrix::new(p, 2, vec![1, 0, k, 1])
                    };
                    m = m.mul(&e);
                }
                mats.push(m);
                trans.push(vec![rng.gen_range(0..p), rng.gen_range(0..p)]);
            }
            let weights = vec![rat(1, 3); 3];
            let labels = vec!["a".into(), "b".into(), "c".into()];
            let spec = FpWalkSpec::new(p, labels, weights, mats, trans).unwrap();
            let report = init_decay_check(&spec, 30);
            assert!(report.holds, "initial decay bound violated: {:?}", report.rows);
            tested += 1;
        }
    }
}
