//! The walk specification (Ω, P, γ, u): validation, seeded Monte Carlo
//! sampling, exact evolution of finitely supported measures, and
//! Lyapunov exponent estimation.
//!
//! Sampling is embarrassingly parallel across chains: every chain is a
//! pure function of (seed, chain index), realized as a dedicated ChaCha
//! stream, so identical seeds give bitwise-identical samples no matter
//! how work is scheduled.

use std::collections::HashMap;

use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::algebra::{self, rat_to_f64, AffineMap, AlgebraError, IntMatrix, Rat, TorusPoint, Word};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SpecError {
    #[error("generator {label} has determinant {det}, expected 1")]
    DeterminantNotOne { label: String, det: String },
    #[error("weights invalid: {0}")]
    WeightsInvalid(String),
    #[error("dimension mismatch in spec component {0}")]
    DimensionMismatch(String),
    #[error("alphabet is empty")]
    EmptyAlphabet,
    #[error("duplicate label {0}")]
    DuplicateLabel(String),
    #[error("translations mix exact and floating coordinates")]
    MixedExactness,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WalkError {
    #[error("support cap {cap} exceeded (reached {reached} atoms)")]
    SupportCapExceeded { cap: usize, reached: usize },
    #[error("operation requires exact spec and measure")]
    ExactnessRequired,
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
}

/// A validated walk specification: finite alphabet Ω, positive rational
/// weights summing to 1 exactly, SL_d(Z) generators, torus translations.
#[derive(Clone, Debug, PartialEq)]
pub struct WalkSpec {
    dim: usize,
    labels: Vec<String>,
    weights: Vec<Rat>,
    generators: Vec<IntMatrix>,
    translations: Vec<TorusPoint>,
}

impl WalkSpec {
    /// Validates all invariants: det γ(ω) = 1, P(ω) > 0, Σ P(ω) = 1.
    pub fn new(
        labels: Vec<String>,
        weights: Vec<Rat>,
        generators: Vec<IntMatrix>,
        translations: Vec<TorusPoint>,
    ) -> Result<Self, SpecError> {
        if labels.is_empty() {
            return Err(SpecError::EmptyAlphabet);
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(SpecError::DuplicateLabel(l.clone()));
            }
        }
        if weights.len() != labels.len()
            || generators.len() != labels.len()
            || translations.len() != labels.len()
        {
            return Err(SpecError::DimensionMismatch("alphabet arity".into()));
        }
        let dim = generators[0].dim();
        for (label, g) in labels.iter().zip(&generators) {
            if g.dim() != dim {
                return Err(SpecError::DimensionMismatch(format!("generator {label}")));
            }
            let det = g.det();
            if !det.is_one() {
                return Err(SpecError::DeterminantNotOne {
                    label: label.clone(),
                    det: det.to_string(),
                });
            }
        }
        for (label, u) in labels.iter().zip(&translations) {
            if u.dim() != dim {
                return Err(SpecError::DimensionMismatch(format!("translation {label}")));
            }
        }
        let all_exact = translations.iter().all(|u| u.is_exact());
        let all_float = translations.iter().all(|u| !u.is_exact());
        if !all_exact && !all_float {
            return Err(SpecError::MixedExactness);
        }
        let mut sum = Rat::zero();
        for (label, w) in labels.iter().zip(&weights) {
            if !w.is_positive() {
                return Err(SpecError::WeightsInvalid(format!("P({label}) must be positive")));
            }
            sum += w;
        }
        if !sum.is_one() {
            return Err(SpecError::WeightsInvalid(format!("weights sum to {sum}, expected 1")));
        }
        Ok(WalkSpec { dim, labels, weights, generators, translations })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Alphabet size |Ω|.
    pub fn n_letters(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }

    pub fn weight(&self, i: usize) -> &Rat {
        &self.weights[i]
    }

    pub fn weights(&self) -> &[Rat] {
        &self.weights
    }

    pub fn generator(&self, i: usize) -> &IntMatrix {
        &self.generators[i]
    }

    pub fn generators(&self) -> &[IntMatrix] {
        &self.generators
    }

    pub fn translation(&self, i: usize) -> &TorusPoint {
        &self.translations[i]
    }

    pub fn translations(&self) -> &[TorusPoint] {
        &self.translations
    }

    pub fn affine_map(&self, i: usize) -> AffineMap {
        AffineMap::new(self.generators[i].clone(), self.translations[i].clone())
    }

    /// True when all translation data is exact rational.
    pub fn is_exact(&self) -> bool {
        self.translations.iter().all(|u| u.is_exact())
    }

    /// Same generators and weights, different translation part.
    pub fn with_translations(&self, translations: Vec<TorusPoint>) -> Result<Self, SpecError> {
        WalkSpec::new(
            self.labels.clone(),
            self.weights.clone(),
            self.generators.clone(),
            translations,
        )
    }

    /// Cumulative sampling thresholds in f64; the last entry is forced
    /// to 1 so a draw always lands in a bucket.
    pub fn cumulative_weights(&self) -> Vec<f64> {
        let mut acc = Rat::zero();
        let mut out: Vec<f64> = self
            .weights
            .iter()
            .map(|w| {
                acc += w;
                rat_to_f64(&acc)
            })
            .collect();
        if let Some(last) = out.last_mut() {
            *last = 1.0;
        }
        out
    }

    /// Stable content hash of the spec, used to key run outputs.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("d={};", self.dim));
        for i in 0..self.labels.len() {
            h.update(format!("L{}={};w={};", self.labels[i], i, self.weights[i]));
            for e in self.generators[i].entries() {
                h.update(format!("{e},"));
            }
            match &self.translations[i] {
                TorusPoint::Exact(c) => {
                    for r in c {
                        h.update(format!("x{r},"));
                    }
                }
                TorusPoint::Approx(c) => {
                    for f in c {
                        h.update(format!("f{:016x},", f.to_bits()));
                    }
                }
            }
        }
        let digest = h.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Left-to-right composition of the letter maps: with letters applied
/// in storage order, the result is m(last) ∘ ... ∘ m(first), so the
/// push-forward of P^{⊗n} by it is μ^{*n}.
pub fn compose_word(spec: &WalkSpec, word: &Word) -> Result<AffineMap, AlgebraError> {
    if word.is_empty() {
        return Err(AlgebraError::EmptyWord);
    }
    let n = spec.n_letters();
    let mut acc: Option<AffineMap> = None;
    for &letter in &word.0 {
        if letter >= n {
            return Err(AlgebraError::UnknownLabel { index: letter, size: n });
        }
        let m = spec.affine_map(letter);
        acc = Some(match acc {
            None => m,
            Some(prev) => m.compose(&prev),
        });
    }
    Ok(acc.unwrap())
}

/// Dedicated RNG for one chain of one experiment: ChaCha stream keyed
/// by the chain index on top of the experiment seed.
pub fn chain_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    rng
}

/// Draw one letter index from P.
pub fn draw_letter(cumulative: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let r: f64 = rng.gen();
    cumulative.iter().position(|&c| r < c).unwrap_or(cumulative.len() - 1)
}

/// Draw a word of length n (letters in application order).
pub fn sample_word(spec: &WalkSpec, n: usize, rng: &mut ChaCha8Rng) -> Word {
    let cum = spec.cumulative_weights();
    Word((0..n).map(|_| draw_letter(&cum, rng)).collect())
}

/// Endpoint of one seeded chain: (γ,u)(ω̄)x for ω̄ ~ P^{⊗n}.
/// Exact spec and exact start give an exact endpoint.
pub fn sample_endpoint(spec: &WalkSpec, x: &TorusPoint, n: usize, seed: u64) -> TorusPoint {
    endpoint_for_chain(spec, x, n, seed, 0)
}

fn endpoint_for_chain(spec: &WalkSpec, x: &TorusPoint, n: usize, seed: u64, chain: u64) -> TorusPoint {
    let mut rng = chain_rng(seed, chain);
    let cum = spec.cumulative_weights();
    let mut pos = x.clone();
    for _ in 0..n {
        let w = draw_letter(&cum, &mut rng);
        pos = spec.affine_map(w).apply(&pos).expect("validated dims");
    }
    pos
}

/// N independent seeded endpoints of the n-step walk, stored in float
/// coordinates. Chain c of the same (spec, x, n, seed) is identical to
/// `sample_endpoint` run on stream c.
pub fn monte_carlo_measure(
    spec: &WalkSpec,
    x: &TorusPoint,
    n: usize,
    n_samples: usize,
    seed: u64,
) -> EmpiricalSample {
    assert!(n_samples >= 1);
    let points: Vec<Vec<f64>> = (0..n_samples)
        .into_par_iter()
        .map(|c| float_chain_endpoint(spec, &x.to_f64(), n, seed, c as u64))
        .collect();
    EmpiricalSample {
        dim: spec.dim(),
        points,
        n_steps: n,
        seed,
        spec_fingerprint: spec.fingerprint(),
    }
}

/// Fast float path for a single chain; same letter stream as the exact
/// path so exact and float runs see the same words.
pub(crate) fn float_chain_endpoint(
    spec: &WalkSpec,
    x: &[f64],
    n: usize,
    seed: u64,
    chain: u64,
) -> Vec<f64> {
    let mut rng = chain_rng(seed, chain);
    let cum = spec.cumulative_weights();
    let d = spec.dim();
    let mats: Vec<Vec<f64>> = spec
        .generators
        .iter()
        .map(|g| g.entries().iter().map(|e| e.to_f64().unwrap()).collect())
        .collect();
    let trans: Vec<Vec<f64>> = spec.translations.iter().map(|u| u.to_f64()).collect();
    let mut pos = x.to_vec();
    let mut next = vec![0.0; d];
    for _ in 0..n {
        let w = draw_letter(&cum, &mut rng);
        let m = &mats[w];
        let u = &trans[w];
        for i in 0..d {
            let mut s = u[i];
            for j in 0..d {
                s += m[i * d + j] * pos[j];
            }
            next[i] = algebra::f64_mod1(s);
        }
        std::mem::swap(&mut pos, &mut next);
    }
    pos
}

/// Positions of one chain recorded after every step, float path.
pub(crate) fn float_chain_trajectory(
    spec: &WalkSpec,
    x: &[f64],
    n: usize,
    seed: u64,
    chain: u64,
) -> Vec<Vec<f64>> {
    let mut rng = chain_rng(seed, chain);
    let cum = spec.cumulative_weights();
    let d = spec.dim();
    let mats: Vec<Vec<f64>> = spec
        .generators
        .iter()
        .map(|g| g.entries().iter().map(|e| e.to_f64().unwrap()).collect())
        .collect();
    let trans: Vec<Vec<f64>> = spec.translations.iter().map(|u| u.to_f64()).collect();
    let mut pos = x.to_vec();
    let mut out = Vec::with_capacity(n + 1);
    out.push(pos.clone());
    for _ in 0..n {
        let w = draw_letter(&cum, &mut rng);
        let m = &mats[w];
        let u = &trans[w];
        let mut next = vec![0.0; d];
        for i in 0..d {
            let mut s = u[i];
            for j in 0..d {
                s += m[i * d + j] * pos[j];
            }
            next[i] = algebra::f64_mod1(s);
        }
        pos = next;
        out.push(pos.clone());
    }
    out
}

/// An N-sample Monte Carlo surrogate for μ^{*n} * δ_x.
#[derive(Clone, Debug)]
pub struct EmpiricalSample {
    pub dim: usize,
    pub points: Vec<Vec<f64>>,
    pub n_steps: usize,
    pub seed: u64,
    pub spec_fingerprint: String,
}

impl EmpiricalSample {
    pub fn n_samples(&self) -> usize {
        self.points.len()
    }

    pub fn to_cloud(&self) -> AtomCloud {
        let w = 1.0 / self.points.len() as f64;
        AtomCloud {
            dim: self.dim,
            coords: self.points.clone(),
            weights: vec![w; self.points.len()],
        }
    }
}

/// Uniform float view of an atomic measure: what the Fourier, energy
/// and ball-mass kernels consume.
#[derive(Clone, Debug)]
pub struct AtomCloud {
    pub dim: usize,
    pub coords: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl AtomCloud {
    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Finitely supported measure on T^d with positive weights and merged
/// atoms. Exact mode merges on exact equality; float mode snaps
/// coordinates to a 1e-12 grid so rounding dust cannot inflate the
/// support.
#[derive(Clone, Debug, PartialEq)]
pub enum FiniteMeasure {
    Exact(Vec<(Vec<Rat>, Rat)>),
    Float(Vec<(Vec<f64>, f64)>),
}

pub const FLOAT_MERGE_TOL: f64 = 1e-12;

impl FiniteMeasure {
    pub fn dirac(x: &TorusPoint) -> Self {
        match x {
            TorusPoint::Exact(c) => FiniteMeasure::Exact(vec![(c.clone(), Rat::one())]),
            TorusPoint::Approx(c) => FiniteMeasure::Float(vec![(c.clone(), 1.0)]),
        }
    }

    /// Build an exact measure; atoms at equal points are merged, weights
    /// must be positive.
    pub fn from_exact_atoms(atoms: Vec<(Vec<Rat>, Rat)>) -> Self {
        let mut map: HashMap<Vec<Rat>, Rat> = HashMap::new();
        for (coords, w) in atoms {
            assert!(w.is_positive(), "atom weights must be positive");
            let key: Vec<Rat> = coords.iter().map(algebra::frac_mod1).collect();
            *map.entry(key).or_insert_with(Rat::zero) += w;
        }
        let mut atoms: Vec<(Vec<Rat>, Rat)> = map.into_iter().collect();
        atoms.sort_by(|a, b| a.0.cmp(&b.0));
        FiniteMeasure::Exact(atoms)
    }

    /// Build a float measure; points within 1e-12 land in the same snap
    /// cell and are merged.
    pub fn from_float_atoms(atoms: Vec<(Vec<f64>, f64)>) -> Self {
        let mut map: HashMap<Vec<i64>, (Vec<f64>, f64)> = HashMap::new();
        for (coords, w) in atoms {
            assert!(w > 0.0, "atom weights must be positive");
            let coords: Vec<f64> = coords.iter().copied().map(algebra::f64_mod1).collect();
            let key: Vec<i64> = coords.iter().map(|c| (c / FLOAT_MERGE_TOL).round() as i64).collect();
            match map.get_mut(&key) {
                Some((_, wt)) => *wt += w,
                None => {
                    map.insert(key, (coords, w));
                }
            }
        }
        let mut atoms: Vec<(Vec<f64>, f64)> = map.into_values().collect();
        atoms.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        FiniteMeasure::Float(atoms)
    }

    /// Uniform probability measure on the given exact points.
    pub fn uniform_exact(points: Vec<Vec<Rat>>) -> Self {
        let n = points.len();
        assert!(n > 0);
        let w = Rat::new(1.into(), (n as i64).into());
        FiniteMeasure::from_exact_atoms(points.into_iter().map(|p| (p, w.clone())).collect())
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, FiniteMeasure::Exact(_))
    }

    pub fn support_size(&self) -> usize {
        match self {
            FiniteMeasure::Exact(a) => a.len(),
            FiniteMeasure::Float(a) => a.len(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            FiniteMeasure::Exact(a) => a.first().map_or(0, |(c, _)| c.len()),
            FiniteMeasure::Float(a) => a.first().map_or(0, |(c, _)| c.len()),
        }
    }

    pub fn total_mass_exact(&self) -> Option<Rat> {
        match self {
            FiniteMeasure::Exact(a) => {
                let mut s = Rat::zero();
                for (_, w) in a {
                    s += w;
                }
                Some(s)
            }
            FiniteMeasure::Float(_) => None,
        }
    }

    pub fn total_mass_f64(&self) -> f64 {
        match self {
            FiniteMeasure::Exact(a) => a.iter().map(|(_, w)| rat_to_f64(w)).sum(),
            FiniteMeasure::Float(a) => a.iter().map(|(_, w)| w).sum(),
        }
    }

    pub fn atoms_exact(&self) -> Option<&[(Vec<Rat>, Rat)]> {
        match self {
            FiniteMeasure::Exact(a) => Some(a),
            FiniteMeasure::Float(_) => None,
        }
    }

    /// Exact mass of the atom at y (zero when absent).
    pub fn atom_mass_exact(&self, y: &[Rat]) -> Option<Rat> {
        let atoms = self.atoms_exact()?;
        let key: Vec<Rat> = y.iter().map(algebra::frac_mod1).collect();
        Some(
            atoms
                .iter()
                .find(|(c, _)| c == &key)
                .map(|(_, w)| w.clone())
                .unwrap_or_else(Rat::zero),
        )
    }

    pub fn to_cloud(&self) -> AtomCloud {
        match self {
            FiniteMeasure::Exact(a) => AtomCloud {
                dim: self.dim(),
                coords: a.iter().map(|(c, _)| c.iter().map(rat_to_f64).collect()).collect(),
                weights: a.iter().map(|(_, w)| rat_to_f64(w)).collect(),
            },
            FiniteMeasure::Float(a) => AtomCloud {
                dim: self.dim(),
                coords: a.iter().map(|(c, _)| c.clone()).collect(),
                weights: a.iter().map(|(_, w)| *w).collect(),
            },
        }
    }
}

/// Exact evolution ν ← Σ_ω P(ω) (γ,u)(ω)_* ν, iterated `steps` times.
/// Total mass is preserved exactly; equal atoms merge with exact weight
/// addition. Fails with `SupportCapExceeded` when the support outgrows
/// `support_cap` (the caller should fall back to Monte Carlo).
pub fn exact_pushforward(
    spec: &WalkSpec,
    nu: &FiniteMeasure,
    steps: usize,
    support_cap: usize,
) -> Result<FiniteMeasure, WalkError> {
    if !spec.is_exact() {
        return Err(WalkError::ExactnessRequired);
    }
    let atoms = nu.atoms_exact().ok_or(WalkError::ExactnessRequired)?;
    if atoms.len() > support_cap {
        return Err(WalkError::SupportCapExceeded { cap: support_cap, reached: atoms.len() });
    }
    let maps: Vec<AffineMap> = (0..spec.n_letters()).map(|i| spec.affine_map(i)).collect();
    let mut current: Vec<(Vec<Rat>, Rat)> = atoms.to_vec();
    for _ in 0..steps {
        let mut next: HashMap<Vec<Rat>, Rat> = HashMap::with_capacity(current.len() * maps.len());
        for (coords, w) in &current {
            let x = TorusPoint::Exact(coords.clone());
            for (i, m) in maps.iter().enumerate() {
                let y = m.apply(&x)?;
                let yc = match y {
                    TorusPoint::Exact(c) => c,
                    TorusPoint::Approx(_) => unreachable!("exact spec and point"),
                };
                let contrib = spec.weight(i) * w;
                *next.entry(yc).or_insert_with(Rat::zero) += contrib;
            }
            if next.len() > support_cap {
                return Err(WalkError::SupportCapExceeded { cap: support_cap, reached: next.len() });
            }
        }
        current = next.into_iter().collect();
        current.sort_by(|a, b| a.0.cmp(&b.0));
    }
    Ok(FiniteMeasure::Exact(current))
}

/// Top Lyapunov exponent estimate for the linear part μ₀.
#[derive(Clone, Copy, Debug)]
pub struct LyapunovEstimate {
    /// Mean of (1/n) log ||γ(ω_n)...γ(ω_1)|| over chains, nats/step.
    pub lambda1_hat: f64,
    pub standard_error: f64,
    pub n_steps: usize,
    pub n_chains: usize,
}

/// Renormalization cadence for the running matrix product: frequent
/// enough to keep f64 entries in range for any desk-scale generator set.
const RENORM_EVERY: usize = 32;

/// Monte Carlo estimate of λ₁ = lim (1/n) E log ||γ(ω̄)||: N seeded
/// chains of n steps with periodic renormalization of the product.
pub fn estimate_lyapunov(spec: &WalkSpec, n: usize, n_chains: usize, seed: u64) -> LyapunovEstimate {
    assert!(n >= 1 && n_chains >= 1);
    let d = spec.dim();
    let mats: Vec<Vec<f64>> = spec
        .generators
        .iter()
        .map(|g| g.entries().iter().map(|e| e.to_f64().unwrap()).collect())
        .collect();
    let cum = spec.cumulative_weights();
    let lambdas: Vec<f64> = (0..n_chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = chain_rng(seed, c as u64);
            let mut prod = identity_f64(d);
            let mut acc = 0.0f64;
            let mut tmp = vec![0.0; d * d];
            for step in 0..n {
                let w = draw_letter(&cum, &mut rng);
                matmul_f64(&mats[w], &prod, &mut tmp, d);
                std::mem::swap(&mut prod, &mut tmp);
                if (step + 1) % RENORM_EVERY == 0 {
                    let f = frobenius(&prod);
                    if f > 0.0 {
                        for e in prod.iter_mut() {
                            *e /= f;
                        }
                        acc += f.ln();
                    }
                }
            }
            let sigma = algebra::sigma_max(&prod, d);
            (acc + sigma.ln()) / n as f64
        })
        .collect();
    let mean = lambdas.iter().sum::<f64>() / n_chains as f64;
    let standard_error = if n_chains > 1 {
        let var = lambdas.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>()
            / (n_chains as f64 - 1.0);
        (var / n_chains as f64).sqrt()
    } else {
        0.0
    };
    LyapunovEstimate { lambda1_hat: mean, standard_error, n_steps: n, n_chains }
}

fn identity_f64(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

fn matmul_f64(a: &[f64], b: &[f64], out: &mut [f64], d: usize) {
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += a[i * d + k] * b[k * d + j];
            }
            out[i * d + j] = s;
        }
    }
}

fn frobenius(m: &[f64]) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::rat;

    pub(crate) fn std_sl2() -> WalkSpec {
        WalkSpec::new(
            vec!["a".into(), "b".into()],
            vec![rat(1, 2), rat(1, 2)],
            vec![
                IntMatrix::from_rows(&[vec![1, 1], vec![0, 1]]),
                IntMatrix::from_rows(&[vec![1, 0], vec![1, 1]]),
            ],
            vec![TorusPoint::zero(2), TorusPoint::zero(2)],
        )
        .unwrap()
    }

    fn pt(coords: &[(i64, i64)]) -> TorusPoint {
        TorusPoint::exact(coords.iter().map(|&(n, d)| rat(n, d)).collect())
    }

    #[test]
    fn validate_accepts_std_sl2() {
        std_sl2();
    }

    #[test]
    fn validate_rejects_bad_determinant() {
        let err = WalkSpec::new(
            vec!["a".into()],
            vec![rat(1, 1)],
            vec![IntMatrix::from_rows(&[vec![2, 0], vec![0, 1]])],
            vec![TorusPoint::zero(2)],
        )
        .unwrap_err();
        assert!(matches!(err, SpecError::DeterminantNotOne { .. }));
    }

    #[test]
    fn validate_rejects_bad_weights() {
        let err = WalkSpec::new(
            vec!["a".into(), "b".into()],
            vec![rat(1, 2), rat(1, 3)],
            vec![IntMatrix::identity(2), IntMatrix::identity(2)],
            vec![TorusPoint::zero(2), TorusPoint::zero(2)],
        )
        .unwrap_err();
        assert!(matches!(err, SpecError::WeightsInvalid(_)));
    }

    #[test]
    fn compose_word_examples() {
        let spec = std_sl2();
        let single = compose_word(&spec, &Word(vec![0])).unwrap();
        assert_eq!(single, spec.affine_map(0));

        // translation doubling with an identity linear part
        let trans = WalkSpec::new(
            vec!["a".into()],
            vec![rat(1, 1)],
            vec![IntMatrix::identity(2)],
            vec![pt(&[(1, 4), (0, 1)])],
        )
        .unwrap();
        let m = compose_word(&trans, &Word(vec![0, 0])).unwrap();
        assert_eq!(m.translation, pt(&[(1, 2), (0, 1)]));

        // letters are applied in storage order: index 0 acts first
        let m = compose_word(&spec, &Word(vec![1, 0])).unwrap();
        assert_eq!(m.linear, IntMatrix::from_rows(&[vec![2, 1], vec![1, 1]]));
    }

    #[test]
    fn compose_word_concatenation_property() {
        use rand::{Rng, SeedableRng};
        let spec = std_sl2();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let w1 = Word((0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..2)).collect());
            let w2 = Word((0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..2)).collect());
            let whole = compose_word(&spec, &w1.concat(&w2)).unwrap();
            let composed = compose_word(&spec, &w2).unwrap().compose(&compose_word(&spec, &w1).unwrap());
            assert_eq!(whole, composed);
        }
    }

    #[test]
    fn compose_word_rejects_unknown_letter() {
        let spec = std_sl2();
        assert_eq!(
            compose_word(&spec, &Word(vec![0, 7])),
            Err(AlgebraError::UnknownLabel { index: 7, size: 2 })
        );
    }

    #[test]
    fn sample_endpoint_basics() {
        let spec = std_sl2();
        let x = pt(&[(1, 3), (2, 3)]);
        assert_eq!(sample_endpoint(&spec, &x, 0, 99), x);

        let trans = WalkSpec::new(
            vec!["a".into()],
            vec![rat(1, 1)],
            vec![IntMatrix::identity(2)],
            vec![pt(&[(1, 4), (0, 1)])],
        )
        .unwrap();
        let end = sample_endpoint(&trans, &TorusPoint::zero(2), 2, 5);
        assert_eq!(end, pt(&[(1, 2), (0, 1)]));
    }

    #[test]
    fn sample_endpoint_stays_on_finite_orbit() {
        let spec = std_sl2();
        let x = pt(&[(1, 3), (2, 3)]);
        for seed in 0..10 {
            let end = sample_endpoint(&spec, &x, 5, seed);
            let coords = end.exact_coords().expect("exact walk stays exact");
            for c in coords {
                assert!(c.denom() == &num_bigint::BigInt::from(1) || c.denom() == &num_bigint::BigInt::from(3));
            }
        }
    }

    #[test]
    fn endpoint_reproducibility_is_bitwise() {
        let spec = std_sl2();
        let x = TorusPoint::approx(vec![0.123, 0.789]);
        let a = monte_carlo_measure(&spec, &x, 25, 64, 4242);
        let b = monte_carlo_measure(&spec, &x, 25, 64, 4242);
        assert_eq!(a.points, b.points);
        let c = monte_carlo_measure(&spec, &x, 25, 64, 4243);
        assert_ne!(a.points, c.points);
    }

    #[test]
    fn monte_carlo_n1_matches_sample_endpoint() {
        let spec = std_sl2();
        let x = pt(&[(1, 3), (2, 3)]);
        let mc = monte_carlo_measure(&spec, &x, 7, 1, 11);
        let end = sample_endpoint(&spec, &x, 7, 11);
        let ef = end.to_f64();
        for (a, b) in mc.points[0].iter().zip(&ef) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn monte_carlo_translation_only_is_deterministic() {
        let trans = WalkSpec::new(
            vec!["a".into()],
            vec![rat(1, 1)],
            vec![IntMatrix::identity(2)],
            vec![pt(&[(1, 8), (0, 1)])],
        )
        .unwrap();
        let mc = monte_carlo_measure(&trans, &TorusPoint::zero(2), 4, 32, 0);
        for p in &mc.points {
            assert!((p[0] - 0.5).abs() < 1e-12 && p[1].abs() < 1e-12);
        }
    }

    #[test]
    fn monte_carlo_points_stay_on_lattice() {
        let spec = std_sl2();
        let x = pt(&[(1, 3), (2, 3)]);
        let mc = monte_carlo_measure(&spec, &x, 12, 200, 7);
        for p in &mc.points {
            for c in p {
                let snapped = (c * 3.0).round() / 3.0;
                assert!((c - snapped).abs() < 1e-9, "point {c} not near (1/3)Z");
            }
        }
    }

    #[test]
    fn exact_pushforward_basics() {
        let spec = std_sl2();
        let nu = FiniteMeasure::dirac(&pt(&[(1, 3), (2, 3)]));
        assert_eq!(exact_pushforward(&spec, &nu, 0, 100).unwrap(), nu);

        // Dirac transport under a deterministic walk
        let det_spec = WalkSpec::new(
            vec!["a".into()],
            vec![rat(1, 1)],
            vec![IntMatrix::from_rows(&[vec![1, 1], vec![0, 1]])],
            vec![pt(&[(1, 8), (0, 1)])],
        )
        .unwrap();
        let x = pt(&[(1, 4), (1, 2)]);
        let evolved = exact_pushforward(&det_spec, &FiniteMeasure::dirac(&x), 3, 100).unwrap();
        let mut y = x;
        for _ in 0..3 {
            y = det_spec.affine_map(0).apply(&y).unwrap();
        }
        assert_eq!(evolved, FiniteMeasure::dirac(&y));
    }

    #[test]
    fn exact_pushforward_preserves_mass_and_splits_steps() {
        let spec = std_sl2();
        let nu = FiniteMeasure::dirac(&pt(&[(1, 3), (2, 3)]));
        let whole = exact_pushforward(&spec, &nu, 5, 1000).unwrap();
        let split = exact_pushforward(
            &spec,
            &exact_pushforward(&spec, &nu, 2, 1000).unwrap(),
            3,
            1000,
        )
        .unwrap();
        assert_eq!(whole, split);
        assert!(whole.total_mass_exact().unwrap().is_one());
    }

    #[test]
    fn exact_pushforward_stays_on_finite_orbit() {
        let spec = std_sl2();
        let nu = FiniteMeasure::dirac(&pt(&[(1, 3), (2, 3)]));
        let evolved = exact_pushforward(&spec, &nu, 20, 10).unwrap();
        assert!(evolved.support_size() <= 9);
        assert!(evolved.total_mass_exact().unwrap().is_one());
    }

    #[test]
    fn exact_pushforward_reports_cap() {
        // irrational-free but support-doubling walk: two distinct translations
        let spec = WalkSpec::new(
            vec!["a".into(), "b".into()],
            vec![rat(1, 2), rat(1, 2)],
            vec![IntMatrix::identity(1), IntMatrix::identity(1)],
            vec![
                TorusPoint::exact(vec![rat(1, 257)]),
                TorusPoint::exact(vec![rat(3, 514)]),
            ],
        )
        .unwrap();
        let nu = FiniteMeasure::dirac(&TorusPoint::zero(1));
        // support after k steps has k+1 atoms, so it crosses 50 around k = 50
        let err = exact_pushforward(&spec, &nu, 200, 50).unwrap_err();
        assert!(matches!(err, WalkError::SupportCapExceeded { .. }));
    }

    #[test]
    fn empirical_frequencies_match_exact_weights() {
        let spec = std_sl2();
        let x = pt(&[(1, 3), (2, 3)]);
        let n = 10;
        let exact = exact_pushforward(&spec, &FiniteMeasure::dirac(&x), n, 100).unwrap();
        let atoms = exact.atoms_exact().unwrap();
        let n_samples = 2000usize;
        for seed in 0..20u64 {
            let mc = monte_carlo_measure(&spec, &x, n, n_samples, seed);
            // count samples at each exact atom (nearest lattice point)
            let mut counts = vec![0usize; atoms.len()];
            for p in &mc.points {
                let mut best = (f64::INFINITY, 0usize);
                for (i, (c, _)) in atoms.iter().enumerate() {
                    let cf: Vec<f64> = c.iter().map(rat_to_f64).collect();
                    let d = crate::algebra::torus_distance_f64(p, &cf);
                    if d < best.0 {
                        best = (d, i);
                    }
                }
                assert!(best.0 < 1e-6, "sample off the finite orbit");
                counts[best.1] += 1;
            }
            let tv: f64 = atoms
                .iter()
                .zip(&counts)
                .map(|((_, w), &c)| (rat_to_f64(w) - c as f64 / n_samples as f64).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv <= 4.0 / (n_samples as f64).sqrt(), "TV {tv} too large at seed {seed}");
        }
    }

    #[test]
    fn lyapunov_identity_walk_is_zero() {
        let spec = WalkSpec::new(
            vec!["a".into()],
            vec![rat(1, 1)],
            vec![IntMatrix::identity(2)],
            vec![TorusPoint::zero(2)],
        )
        .unwrap();
        let est = estimate_lyapunov(&spec, 500, 4, 1);
        assert!(est.lambda1_hat.abs() < 1e-12);
        assert!(est.standard_error >= 0.0);
    }

    #[test]
    fn lyapunov_matches_spectral_radius_for_deterministic_walks() {
        // Three hyperbolic matrices with known spectral radii.
        let cases = vec![
            (vec![vec![2, 1], vec![1, 1]], (3.0 + 5f64.sqrt()) / 2.0),
            (vec![vec![1, 1], vec![1, 2]], (3.0 + 5f64.sqrt()) / 2.0),
            (vec![vec![5, 2], vec![2, 1]], 3.0 + 8f64.sqrt()),
        ];
        for (rows, rho) in cases {
            let spec = WalkSpec::new(
                vec!["a".into()],
                vec![rat(1, 1)],
                vec![IntMatrix::from_rows(&rows)],
                vec![TorusPoint::zero(2)],
            )
            .unwrap();
            let est = estimate_lyapunov(&spec, 10_000, 2, 3);
            assert!(
                (est.lambda1_hat - rho.ln()).abs() < 1e-3,
                "lambda {} vs log rho {}",
                est.lambda1_hat,
                rho.ln()
            );
        }
    }

    #[test]
    fn lyapunov_std_sl2_positive_and_seed_stable() {
        let spec = std_sl2();
        let a = estimate_lyapunov(&spec, 2000, 16, 10);
        let b = estimate_lyapunov(&spec, 2000, 16, 77);
        assert!(a.lambda1_hat > 0.1);
        let tol = 3.0 * (a.standard_error + b.standard_error);
        assert!((a.lambda1_hat - b.lambda1_hat).abs() <= tol);
    }

    #[test]
    fn float_measure_merges_rounding_dust() {
        let m = FiniteMeasure::from_float_atoms(vec![
            (vec![0.5, 0.5], 0.5),
            (vec![0.5 + 1e-14, 0.5 - 1e-14], 0.5),
        ]);
        assert_eq!(m.support_size(), 1);
        assert!((m.total_mass_f64() - 1.0).abs() < 1e-15);
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // merging never changes total mass and never duplicates atoms
            #[test]
            fn prop_exact_measure_merge_mass(
                atoms in prop::collection::vec(((0i64..12, 1i64..6), (0i64..12, 1i64..6), 1i64..9), 1..20)
            ) {
                let raw: Vec<(Vec<Rat>, Rat)> = atoms
                    .iter()
                    .map(|&((n1, d1), (n2, d2), w)| (vec![rat(n1, d1), rat(n2, d2)], rat(w, 1)))
                    .collect();
                let mut expected = Rat::zero();
                for (_, w) in &raw {
                    expected += w;
                }
                let m = FiniteMeasure::from_exact_atoms(raw);
                prop_assert_eq!(m.total_mass_exact().unwrap(), expected);
                let a = m.atoms_exact().unwrap();
                for i in 0..a.len() {
                    for j in 0..i {
                        prop_assert!(a[i].0 != a[j].0, "duplicate atom after merge");
                    }
                }
            }

            // the empirical characteristic function is bounded by the mass
            #[test]
            fn prop_fourier_bounded(
                pts in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 1..30),
                a1 in -4i64..4, a2 in -4i64..4,
            ) {
                let n = pts.len();
                let cloud = AtomCloud {
                    dim: 2,
                    coords: pts.iter().map(|&(x, y)| vec![x, y]).collect(),
                    weights: vec![1.0 / n as f64; n],
                };
                let c = crate::spectral::fourier_coefficient(
                    &cloud,
                    &crate::spectral::Frequency(vec![a1, a2]),
                );
                prop_assert!(c.norm() <= 1.0 + 1e-12);
            }
        }
    }
}
