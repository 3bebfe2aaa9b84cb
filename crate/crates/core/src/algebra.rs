//! Exact and floating arithmetic for torus points, integer matrices,
//! affine maps, and operator norms.
//!
//! Every geometric routine has an exact-rational path and a floating
//! path. The exact path is the oracle: finite orbits and heights demand
//! exact arithmetic, Monte Carlo demands speed. Matrix entries are
//! arbitrary-precision integers because walk products grow like
//! `e^{λ₁ n}` and overflow `i64` within a few dozen steps.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use thiserror::Error;

/// Exact rational scalar: reduced fraction, positive denominator.
pub type Rat = BigRational;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AlgebraError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("letter index {index} out of range for alphabet of size {size}")]
    UnknownLabel { index: usize, size: usize },
    #[error("empty word")]
    EmptyWord,
}

/// Shorthand for small rational constants in tests and builders.
pub fn rat(num: i64, den: i64) -> Rat {
    Rat::new(BigInt::from(num), BigInt::from(den))
}

pub fn int(n: i64) -> BigInt {
    BigInt::from(n)
}

/// Canonical representative of x in R/Z: x - floor(x), in [0,1).
pub fn frac_mod1(x: &Rat) -> Rat {
    x - x.floor()
}

/// Float representative in [0,1). Guards against the rounding case
/// where `rem_euclid` returns exactly 1.0.
pub fn f64_mod1(x: f64) -> f64 {
    let mut r = x.rem_euclid(1.0);
    if r >= 1.0 {
        r -= 1.0;
    }
    r
}

/// "num/den" encoding used by every JSON surface of the crate.
pub fn rat_to_string(x: &Rat) -> String {
    format!("{}/{}", x.numer(), x.denom())
}

/// Parses "num/den" or a bare integer.
pub fn rat_from_str(s: &str) -> Result<Rat, String> {
    let s = s.trim();
    let (n, d) = match s.split_once('/') {
        Some((n, d)) => (n.trim(), d.trim()),
        None => (s, "1"),
    };
    let n: BigInt = n.parse().map_err(|e| format!("bad numerator {n:?}: {e}"))?;
    let d: BigInt = d.parse().map_err(|e| format!("bad denominator {d:?}: {e}"))?;
    if d.is_zero() {
        return Err("zero denominator".into());
    }
    Ok(Rat::new(n, d))
}

pub fn rat_to_f64(x: &Rat) -> f64 {
    x.to_f64().unwrap_or_else(|| {
        // Extremely large numerator/denominator: fall back to a scaled quotient.
        let bits = x.numer().bits().max(x.denom().bits()) as i64;
        let shift = (bits - 900).max(0) as u64;
        let n = (x.numer() >> shift).to_f64().unwrap_or(0.0);
        let d = (x.denom() >> shift).to_f64().unwrap_or(1.0);
        n / d
    })
}

/// A point of T^d = R^d/Z^d with either exact rational or double
/// precision coordinates, each in [0,1).
#[derive(Clone, Debug, PartialEq)]
pub enum TorusPoint {
    Exact(Vec<Rat>),
    Approx(Vec<f64>),
}

impl TorusPoint {
    /// Exact point; coordinates are reduced mod 1.
    pub fn exact(coords: Vec<Rat>) -> Self {
        TorusPoint::Exact(coords.iter().map(frac_mod1).collect())
    }

    /// Floating point; coordinates are reduced mod 1.
    pub fn approx(coords: Vec<f64>) -> Self {
        TorusPoint::Approx(coords.iter().copied().map(f64_mod1).collect())
    }

    pub fn zero(dim: usize) -> Self {
        TorusPoint::Exact(vec![Rat::zero(); dim])
    }

    pub fn dim(&self) -> usize {
        match self {
            TorusPoint::Exact(c) => c.len(),
            TorusPoint::Approx(c) => c.len(),
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, TorusPoint::Exact(_))
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TorusPoint::Exact(c) => c.iter().map(rat_to_f64).collect(),
            TorusPoint::Approx(c) => c.clone(),
        }
    }

    pub fn exact_coords(&self) -> Option<&[Rat]> {
        match self {
            TorusPoint::Exact(c) => Some(c),
            TorusPoint::Approx(_) => None,
        }
    }

    /// Demote to the floating representation.
    pub fn to_approx(&self) -> TorusPoint {
        TorusPoint::Approx(self.to_f64())
    }
}

/// Canonical representative of a rational vector in R^d/Z^d.
pub fn reduce_mod1(v: &[Rat]) -> TorusPoint {
    TorusPoint::exact(v.to_vec())
}

/// Euclidean quotient metric on T^d: per coordinate min(|Δ|, 1-|Δ|),
/// then the l2 norm. Mixed exact/approx arguments are compared in f64.
pub fn torus_distance(x: &TorusPoint, y: &TorusPoint) -> f64 {
    let (a, b) = (x.to_f64(), y.to_f64());
    assert_eq!(a.len(), b.len(), "torus_distance: dimension mismatch");
    torus_distance_f64(&a, &b)
}

/// Same metric on raw coordinate slices already reduced to [0,1).
pub fn torus_distance_f64(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (p, q) in a.iter().zip(b) {
        let d = (p - q).abs();
        let d = d.min(1.0 - d);
        s += d * d;
    }
    s.sqrt()
}

/// Exact squared quotient distance between exact points.
pub fn torus_distance_sq_exact(a: &[Rat], b: &[Rat]) -> Rat {
    assert_eq!(a.len(), b.len());
    let mut s = Rat::zero();
    let one = Rat::one();
    for (p, q) in a.iter().zip(b) {
        let d = (p - q).abs();
        let d = if d > &one - &d { &one - &d } else { d };
        s += &d * &d;
    }
    s
}

/// Square integer matrix with arbitrary-precision entries, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IntMatrix {
    dim: usize,
    entries: Vec<BigInt>,
}

impl IntMatrix {
    pub fn new(dim: usize, entries: Vec<BigInt>) -> Self {
        assert_eq!(entries.len(), dim * dim, "entry count must be dim^2");
        IntMatrix { dim, entries }
    }

    pub fn from_rows(rows: &[Vec<i64>]) -> Self {
        let dim = rows.len();
        let mut entries = Vec::with_capacity(dim * dim);
        for r in rows {
            assert_eq!(r.len(), dim, "matrix must be square");
            entries.extend(r.iter().map(|&v| BigInt::from(v)));
        }
        IntMatrix { dim, entries }
    }

    pub fn identity(dim: usize) -> Self {
        let mut entries = vec![BigInt::zero(); dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = BigInt::one();
        }
        IntMatrix { dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, i: usize, j: usize) -> &BigInt {
        &self.entries[i * self.dim + j]
    }

    pub fn entries(&self) -> &[BigInt] {
        &self.entries
    }

    pub fn mul(&self, other: &IntMatrix) -> IntMatrix {
        assert_eq!(self.dim, other.dim);
        let d = self.dim;
        let mut out = vec![BigInt::zero(); d * d];
        for i in 0..d {
            for k in 0..d {
                let a = &self.entries[i * d + k];
                if a.is_zero() {
                    continue;
                }
                for j in 0..d {
                    out[i * d + j] += a * &other.entries[k * d + j];
                }
            }
        }
        IntMatrix { dim: d, entries: out }
    }

    pub fn add(&self, other: &IntMatrix) -> IntMatrix {
        assert_eq!(self.dim, other.dim);
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a + b)
            .collect();
        IntMatrix { dim: self.dim, entries }
    }

    pub fn sub(&self, other: &IntMatrix) -> IntMatrix {
        assert_eq!(self.dim, other.dim);
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a - b)
            .collect();
        IntMatrix { dim: self.dim, entries }
    }

    pub fn transpose(&self) -> IntMatrix {
        let d = self.dim;
        let mut out = vec![BigInt::zero(); d * d];
        for i in 0..d {
            for j in 0..d {
                out[j * d + i] = self.entries[i * d + j].clone();
            }
        }
        IntMatrix { dim: d, entries: out }
    }

    /// Determinant by fraction-free (Bareiss) elimination.
    pub fn det(&self) -> BigInt {
        let d = self.dim;
        if d == 0 {
            return BigInt::one();
        }
        let mut m = self.entries.clone();
        let mut sign = 1i64;
        let mut prev = BigInt::one();
        for k in 0..d - 1 {
            if m[k * d + k].is_zero() {
                match (k + 1..d).find(|&r| !m[r * d + k].is_zero()) {
                    Some(r) => {
                        for j in 0..d {
                            m.swap(k * d + j, r * d + j);
                        }
                        sign = -sign;
                    }
                    None => return BigInt::zero(),
                }
            }
            for i in k + 1..d {
                for j in k + 1..d {
                    let num = &m[i * d + j] * &m[k * d + k] - &m[i * d + k] * &m[k * d + j];
                    m[i * d + j] = num / &prev;
                }
                m[i * d + k] = BigInt::zero();
            }
            prev = m[k * d + k].clone();
        }
        let det = m[(d - 1) * d + (d - 1)].clone();
        if sign < 0 {
            -det
        } else {
            det
        }
    }

    pub fn mul_rat_vec(&self, v: &[Rat]) -> Vec<Rat> {
        assert_eq!(v.len(), self.dim);
        let d = self.dim;
        (0..d)
            .map(|i| {
                let mut s = Rat::zero();
                for j in 0..d {
                    if !self.entries[i * d + j].is_zero() {
                        s += Rat::from(self.entries[i * d + j].clone()) * &v[j];
                    }
                }
                s
            })
            .collect()
    }

    pub fn mul_f64_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dim);
        let d = self.dim;
        (0..d)
            .map(|i| {
                let mut s = 0.0;
                for j in 0..d {
                    s += self.entries[i * d + j].to_f64().unwrap_or(f64::INFINITY) * v[j];
                }
                s
            })
            .collect()
    }

    /// Maximum bit length over entries; 0 for the zero matrix.
    pub fn max_entry_bits(&self) -> u64 {
        self.entries.iter().map(|e| e.bits()).max().unwrap_or(0)
    }

    /// f64 image of the matrix scaled by 2^{-shift} so that entries and
    /// their squares fit comfortably in double range. Returns (scaled
    /// entries, shift).
    pub fn to_f64_scaled(&self) -> (Vec<f64>, i64) {
        let bits = self.max_entry_bits() as i64;
        let shift = (bits - 400).max(0);
        let entries = self
            .entries
            .iter()
            .map(|e| (e >> (shift as u64)).to_f64().unwrap_or(0.0))
            .collect();
        (entries, shift)
    }
}

/// Affine transformation x -> γx + u of T^d, with γ an integer matrix
/// (so the action on the torus is well defined).
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMap {
    pub linear: IntMatrix,
    pub translation: TorusPoint,
}

impl AffineMap {
    pub fn new(linear: IntMatrix, translation: TorusPoint) -> Self {
        assert_eq!(linear.dim(), translation.dim(), "translation dim must equal linear dim");
        AffineMap { linear, translation }
    }

    pub fn identity(dim: usize) -> Self {
        AffineMap {
            linear: IntMatrix::identity(dim),
            translation: TorusPoint::zero(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.linear.dim()
    }

    /// γx + u reduced mod 1. Exact map applied to an exact point stays
    /// exact; any floating ingredient demotes the result to floating.
    pub fn apply(&self, x: &TorusPoint) -> Result<TorusPoint, AlgebraError> {
        if x.dim() != self.dim() {
            return Err(AlgebraError::DimensionMismatch {
                expected: self.dim(),
                got: x.dim(),
            });
        }
        match (&self.translation, x) {
            (TorusPoint::Exact(u), TorusPoint::Exact(xs)) => {
                let mut v = self.linear.mul_rat_vec(xs);
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi += ui;
                }
                Ok(TorusPoint::exact(v))
            }
            _ => {
                let xf = x.to_f64();
                let uf = self.translation.to_f64();
                let mut v = self.linear.mul_f64_vec(&xf);
                for (vi, ui) in v.iter_mut().zip(uf) {
                    *vi += ui;
                }
                Ok(TorusPoint::approx(v))
            }
        }
    }

    /// Composition self ∘ inner: (γ₂,u₂)(γ₁,u₁) = (γ₂γ₁, γ₂u₁ + u₂).
    pub fn compose(&self, inner: &AffineMap) -> AffineMap {
        assert_eq!(self.dim(), inner.dim());
        let linear = self.linear.mul(&inner.linear);
        let translation = match (&self.translation, &inner.translation) {
            (TorusPoint::Exact(u2), TorusPoint::Exact(u1)) => {
                let mut v = self.linear.mul_rat_vec(u1);
                for (vi, ui) in v.iter_mut().zip(u2) {
                    *vi += ui;
                }
                TorusPoint::exact(v)
            }
            _ => {
                let u1 = inner.translation.to_f64();
                let u2 = self.translation.to_f64();
                let mut v = self.linear.mul_f64_vec(&u1);
                for (vi, ui) in v.iter_mut().zip(u2) {
                    *vi += ui;
                }
                TorusPoint::approx(v)
            }
        };
        AffineMap { linear, translation }
    }
}

/// A finite word over the walk alphabet. Letters are indices into the
/// alphabet and are applied in storage order: `letters[0]` acts first,
/// so the composed map is m(last) ∘ ... ∘ m(first).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Word(pub Vec<usize>);

impl Word {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Concatenation: first walk self, then walk `next`.
    pub fn concat(&self, next: &Word) -> Word {
        let mut letters = self.0.clone();
        letters.extend_from_slice(&next.0);
        Word(letters)
    }
}

/// Certified bracket for the l2 operator norm of an integer matrix,
/// plus a power-iteration estimate clamped into the bracket.
#[derive(Clone, Copy, Debug)]
pub struct NormBracket {
    /// Max column l2 norm: a lower bound for the operator norm.
    pub lower: f64,
    /// Frobenius norm: an upper bound.
    pub upper: f64,
    /// Power-iteration estimate of the largest singular value.
    pub estimate: f64,
}

/// Certified operator norm bracket. Accepts any integer matrix (the
/// bracket is norm arithmetic, not an SL_d utility).
pub fn operator_norm_bounds(m: &IntMatrix) -> NormBracket {
    let d = m.dim();
    let (a, shift) = m.to_f64_scaled();
    let scale = 2f64.powi(shift as i32);

    let mut frob = 0.0;
    let mut max_col = 0.0f64;
    for j in 0..d {
        let mut col = 0.0;
        for i in 0..d {
            let v = a[i * d + j];
            col += v * v;
        }
        frob += col;
        max_col = max_col.max(col);
    }
    let lower = max_col.sqrt() * scale;
    let upper = frob.sqrt() * scale;

    let estimate = (sigma_max(&a, d) * scale).clamp(lower, upper);
    NormBracket { lower, upper, estimate }
}

/// Largest singular value of a dense row-major d x d f64 matrix by
/// power iteration on AᵀA with a fixed deterministic start.
pub(crate) fn sigma_max(a: &[f64], d: usize) -> f64 {
    if d == 0 {
        return 0.0;
    }
    // Start vector with incommensurate components so it is practically
    // never orthogonal to the dominant singular direction.
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + (i as f64 + 1.0).sqrt()).collect();
    normalize(&mut v);
    let mut sigma_sq = 0.0f64;
    let mut w = vec![0.0; d];
    let mut z = vec![0.0; d];
    for _ in 0..20_000 {
        // w = A v ; z = Aᵀ w
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                s += a[i * d + j] * v[j];
            }
            w[i] = s;
        }
        for j in 0..d {
            let mut s = 0.0;
            for i in 0..d {
                s += a[i * d + j] * w[i];
            }
            z[j] = s;
        }
        let new_sigma_sq: f64 = v.iter().zip(&z).map(|(x, y)| x * y).sum();
        let nz = norm(&z);
        if nz == 0.0 {
            return 0.0;
        }
        for (vi, zi) in v.iter_mut().zip(&z) {
            *vi = zi / nz;
        }
        if (new_sigma_sq - sigma_sq).abs() <= 1e-15 * new_sigma_sq.abs() {
            sigma_sq = new_sigma_sq;
            break;
        }
        sigma_sq = new_sigma_sq;
    }
    sigma_sq.max(0.0).sqrt()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}
