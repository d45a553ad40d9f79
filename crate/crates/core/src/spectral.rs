//! Truncated Fourier fields on the unit cell and the quasiperiodic differential operators.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray_linalg::{Eigh, UPLO};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{interval_moment, sub, MomentTable, PeriodicMeasure};
use crate::C64;

/// Frequencies `{−L..L}³` in lexicographic order (first axis slowest).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyCube {
    cutoff: usize,
    modes: Arc<Vec<[i64; 3]>>,
}

impl FrequencyCube {
    pub fn new(cutoff: usize) -> Self {
        let l = cutoff as i64;
        let mut modes = Vec::with_capacity((2 * cutoff + 1).pow(3));
        for a in -l..=l {
            for b in -l..=l {
                for c in -l..=l {
                    modes.push([a, b, c]);
                }
            }
        }
        FrequencyCube { cutoff, modes: Arc::new(modes) }
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn modes(&self) -> &[[i64; 3]] {
        &self.modes
    }

    #[inline]
    pub fn mode(&self, i: usize) -> [i64; 3] {
        self.modes[i]
    }

    pub fn index(&self, l: [i64; 3]) -> Option<usize> {
        let c = self.cutoff as i64;
        if l.iter().any(|x| x.abs() > c) {
            return None;
        }
        let s = (2 * c + 1) as usize;
        Some(((l[0] + c) as usize * s + (l[1] + c) as usize) * s + (l[2] + c) as usize)
    }

    pub fn zero_index(&self) -> usize {
        self.len() / 2
    }
}

/// Quasimomentum data `(ε, θ, κ = εθ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quasimomentum {
    pub epsilon: f64,
    pub theta: [f64; 3],
    pub kappa: [f64; 3],
}

impl Quasimomentum {
    /// Fails unless ε > 0 and κ = εθ lies in the closed cell [−π, π]³.
    pub fn new(epsilon: f64, theta: [f64; 3]) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidInput(format!("epsilon {epsilon} must be positive")));
        }
        let kappa = [epsilon * theta[0], epsilon * theta[1], epsilon * theta[2]];
        if kappa.iter().any(|k| !k.is_finite() || k.abs() > PI * (1.0 + 1e-12)) {
            return Err(Error::InvalidInput(format!("quasimomentum {kappa:?} outside [-π, π]³")));
        }
        Ok(Quasimomentum { epsilon, theta, kappa })
    }

    /// Unit scale, θ = κ.
    pub fn from_kappa(kappa: [f64; 3]) -> Result<Self> {
        Self::new(1.0, kappa)
    }

    pub fn zero() -> Self {
        Quasimomentum { epsilon: 1.0, theta: [0.0; 3], kappa: [0.0; 3] }
    }

    /// `κ + 2πl`.
    #[inline]
    pub fn wavevector(&self, l: [i64; 3]) -> [f64; 3] {
        wavevector(self.kappa, l)
    }
}

#[inline]
pub fn wavevector(kappa: [f64; 3], l: [i64; 3]) -> [f64; 3] {
    [kappa[0] + 2.0 * PI * l[0] as f64, kappa[1] + 2.0 * PI * l[1] as f64, kappa[2] + 2.0 * PI * l[2] as f64]
}

#[inline]
pub(crate) fn cross<T>(a: [T; 3], b: [T; 3]) -> [T; 3]
where
    T: Copy + std::ops::Mul<Output = T> + std::ops::Sub<Output = T>,
{
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
pub(crate) fn cross_rc(a: [f64; 3], b: [C64; 3]) -> [C64; 3] {
    [b[2] * a[1] - b[1] * a[2], b[0] * a[2] - b[2] * a[0], b[1] * a[0] - b[0] * a[1]]
}

/// Truncated Fourier series `Σ_l û_l e^{2πi l·y}` with one or three components.
///
/// Coefficients are stored mode-major: entry `i * ncomp + a` is component `a` at mode `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralField {
    cube: FrequencyCube,
    ncomp: usize,
    coeffs: Vec<C64>,
}

impl SpectralField {
    pub fn zeros(cube: &FrequencyCube, ncomp: usize) -> Self {
        assert!(ncomp == 1 || ncomp == 3, "fields are scalar or 3-vector");
        SpectralField { cube: cube.clone(), ncomp, coeffs: vec![C64::new(0.0, 0.0); cube.len() * ncomp] }
    }

    pub fn from_coeffs(cube: &FrequencyCube, ncomp: usize, coeffs: Vec<C64>) -> Self {
        assert!(ncomp == 1 || ncomp == 3, "fields are scalar or 3-vector");
        assert_eq!(coeffs.len(), cube.len() * ncomp, "coefficient length mismatch");
        SpectralField { cube: cube.clone(), ncomp, coeffs }
    }

    /// Constant vector field.
    pub fn constant(cube: &FrequencyCube, c: [C64; 3]) -> Self {
        let mut f = Self::zeros(cube, 3);
        f.set_vec(cube.zero_index(), c);
        f
    }

    pub fn constant_scalar(cube: &FrequencyCube, c: C64) -> Self {
        let mut f = Self::zeros(cube, 1);
        let z = cube.zero_index();
        f.coeffs[z] = c;
        f
    }

    /// Single exponential `v e^{2πi l·y}`.
    pub fn plane_wave(cube: &FrequencyCube, l: [i64; 3], v: [C64; 3]) -> Self {
        let mut f = Self::zeros(cube, 3);
        let i = cube.index(l).expect("mode outside cube");
        f.set_vec(i, v);
        f
    }

    pub fn cube(&self) -> &FrequencyCube {
        &self.cube
    }

    pub fn ncomp(&self) -> usize {
        self.ncomp
    }

    pub fn coeffs(&self) -> &[C64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [C64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<C64> {
        self.coeffs
    }

    /// Coefficient of component `a` at mode index `i`.
    pub fn coeff(&self, a: usize, i: usize) -> C64 {
        self.coeffs[i * self.ncomp + a]
    }

    pub fn vec_at(&self, i: usize) -> [C64; 3] {
        debug_assert_eq!(self.ncomp, 3);
        [self.coeffs[3 * i], self.coeffs[3 * i + 1], self.coeffs[3 * i + 2]]
    }

    pub fn set_vec(&mut self, i: usize, v: [C64; 3]) {
        self.coeffs[3 * i..3 * i + 3].copy_from_slice(&v);
    }

    pub fn scale(&self, s: C64) -> Self {
        let mut out = self.clone();
        out.coeffs.iter_mut().for_each(|c| *c *= s);
        out
    }

    pub fn axpy(&mut self, s: C64, other: &SpectralField) {
        assert_eq!(self.coeffs.len(), other.coeffs.len());
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += s * b;
        }
    }

    pub fn add(&self, other: &SpectralField) -> Self {
        let mut out = self.clone();
        out.axpy(C64::new(1.0, 0.0), other);
        out
    }

    pub fn sub(&self, other: &SpectralField) -> Self {
        let mut out = self.clone();
        out.axpy(C64::new(-1.0, 0.0), other);
        out
    }

    /// Euclidean norm of the coefficient vector.
    pub fn coeff_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Re-expresses the field on another cube, dropping modes that do not fit.
    pub fn resize(&self, cube: &FrequencyCube) -> Self {
        let mut out = Self::zeros(cube, self.ncomp);
        for (i, l) in self.cube.modes().iter().enumerate() {
            if let Some(j) = cube.index(*l) {
                for a in 0..self.ncomp {
                    out.coeffs[j * self.ncomp + a] = self.coeffs[i * self.ncomp + a];
                }
            }
        }
        out
    }

    /// Value at a point of the cell, `Σ_l û_l e^{2πi l·y}`.
    pub fn eval(&self, y: [f64; 3]) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); self.ncomp];
        for (i, l) in self.cube.modes().iter().enumerate() {
            let ph = C64::from_polar(1.0, 2.0 * PI * (l[0] as f64 * y[0] + l[1] as f64 * y[1] + l[2] as f64 * y[2]));
            for a in 0..self.ncomp {
                out[a] += self.coeffs[i * self.ncomp + a] * ph;
            }
        }
        out
    }
}

/// `ē_κ curl(e_κ u)`: per mode `i(κ + 2πl) × û_l`.
pub fn curl_quasi(u: &SpectralField, q: &Quasimomentum) -> SpectralField {
    assert_eq!(u.ncomp, 3, "curl needs a vector field");
    let mut out = SpectralField::zeros(&u.cube, 3);
    for (i, l) in u.cube.modes().iter().enumerate() {
        let k = q.wavevector(*l);
        let c = cross_rc(k, u.vec_at(i));
        out.set_vec(i, [c[0] * C64::i(), c[1] * C64::i(), c[2] * C64::i()]);
    }
    out
}

/// `ē_κ ∇(e_κ φ)`: per mode `i(κ + 2πl) φ̂_l`.
pub fn grad_quasi(phi: &SpectralField, q: &Quasimomentum) -> SpectralField {
    assert_eq!(phi.ncomp, 1, "gradient needs a scalar field");
    let mut out = SpectralField::zeros(&phi.cube, 3);
    for (i, l) in phi.cube.modes().iter().enumerate() {
        let k = q.wavevector(*l);
        let p = phi.coeffs[i] * C64::i();
        out.set_vec(i, [p * k[0], p * k[1], p * k[2]]);
    }
    out
}

/// `∫_Q u · conj(v) dμ`.
pub fn inner_product_mu(u: &SpectralField, v: &SpectralField, mu: &PeriodicMeasure) -> C64 {
    assert_eq!(u.cube, v.cube);
    assert_eq!(u.ncomp, v.ncomp);
    mu.inner(&u.cube, &u.coeffs, &v.coeffs, u.ncomp)
}

pub fn norm_mu(u: &SpectralField, mu: &PeriodicMeasure) -> f64 {
    mu.norm_sq(&u.cube, &u.coeffs, u.ncomp).sqrt()
}

/// `∫_Q u dμ`, one entry per component.
pub fn mean_mu(u: &SpectralField, mu: &PeriodicMeasure) -> Vec<C64> {
    mu.mean(&u.cube, &u.coeffs, u.ncomp)
}

/// Relative size of the quasi-gradient component of `u`.
///
/// Returns `‖Π u‖_μ / ‖u‖_μ` where Π is the μ-orthogonal projection onto the span of
/// `ē_κ∇(e_κ e_l)` over every basis frequency (the Riesz representer of the pairing vector).
pub fn weak_div_residual(u: &SpectralField, q: &Quasimomentum, mu: &PeriodicMeasure) -> f64 {
    let nu = norm_mu(u, mu);
    if nu == 0.0 {
        return 0.0;
    }
    let g = crate::helmholtz::gradient_projection(u, q, mu);
    norm_mu(&g, mu) / nu
}

/// How the coefficient matrix A is specified.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CoefficientKind {
    /// Entries `(row, col, k, Â_row,col(k))`, 0-based rows/cols; both triangles are listed.
    Fourier { terms: Vec<FourierTerm> },
    /// Constant symmetric matrices on a dyadic partition; `values` are ordered like the
    /// frequency cube (first axis slowest), half-open cells `[j/n, (j+1)/n)`.
    Piecewise { divisions: [usize; 3], values: Vec<[[f64; 3]; 3]> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierTerm {
    pub row: usize,
    pub col: usize,
    pub k: [i64; 3],
    pub value: C64,
}

/// The periodic symmetric matrix A, with user-declared ellipticity bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientField {
    pub kind: CoefficientKind,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl CoefficientField {
    pub fn identity() -> Self {
        Self::constant([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Constant matrix; the bounds are its extreme eigenvalues.
    pub fn constant(m: [[f64; 3]; 3]) -> Self {
        let ev = sym_eigenvalues(&m);
        let mut terms = Vec::new();
        for (r, row) in m.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    terms.push(FourierTerm { row: r, col: c, k: [0, 0, 0], value: C64::new(v, 0.0) });
                }
            }
        }
        CoefficientField { kind: CoefficientKind::Fourier { terms }, lambda_min: ev[0], lambda_max: ev[2] }
    }

    /// `(1 + amp·cos 2πy_axis) I`.
    pub fn scalar_cosine(amp: f64, axis: usize) -> Self {
        let mut terms = Vec::new();
        let mut k = [0i64; 3];
        k[axis] = 1;
        let km = [-k[0], -k[1], -k[2]];
        for d in 0..3 {
            terms.push(FourierTerm { row: d, col: d, k: [0, 0, 0], value: C64::new(1.0, 0.0) });
            terms.push(FourierTerm { row: d, col: d, k, value: C64::new(0.5 * amp, 0.0) });
            terms.push(FourierTerm { row: d, col: d, k: km, value: C64::new(0.5 * amp, 0.0) });
        }
        CoefficientField {
            kind: CoefficientKind::Fourier { terms },
            lambda_min: 1.0 - amp.abs(),
            lambda_max: 1.0 + amp.abs(),
        }
    }

    /// `a(y) I` with `a(y) = mean + Σ_k (c_k e^{2πik·y} + conj(c_k) e^{−2πik·y})`.
    ///
    /// The bounds are `mean ∓ 2Σ|c_k|`, which are sharp only for aligned phases.
    pub fn scalar_series(mean: f64, modes: &[([i64; 3], C64)]) -> Self {
        let mut terms = Vec::new();
        let mut spread = 0.0;
        for d in 0..3 {
            terms.push(FourierTerm { row: d, col: d, k: [0, 0, 0], value: C64::new(mean, 0.0) });
            for &(k, c) in modes {
                terms.push(FourierTerm { row: d, col: d, k, value: c });
                terms.push(FourierTerm { row: d, col: d, k: [-k[0], -k[1], -k[2]], value: c.conj() });
            }
        }
        for (_, c) in modes {
            spread += 2.0 * c.norm();
        }
        CoefficientField { kind: CoefficientKind::Fourier { terms }, lambda_min: mean - spread, lambda_max: mean + spread }
    }

    /// Two-phase laminate `a(y_axis) I` with `a = a0` on `[0, ½)` and `a1` on `[½, 1)`.
    pub fn laminate(axis: usize, a0: f64, a1: f64) -> Self {
        let mut divisions = [1, 1, 1];
        divisions[axis] = 2;
        let diag = |a: f64| [[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]];
        CoefficientField {
            kind: CoefficientKind::Piecewise { divisions, values: vec![diag(a0), diag(a1)] },
            lambda_min: a0.min(a1),
            lambda_max: a0.max(a1),
        }
    }

    /// Checks shape, symmetry and real-valuedness; ellipticity is spot-checked separately.
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_min > 0.0 && self.lambda_max >= self.lambda_min) {
            return Err(Error::InvalidCoefficient(format!(
                "bounds lambda_min={} lambda_max={} must satisfy 0 < min <= max",
                self.lambda_min, self.lambda_max
            )));
        }
        match &self.kind {
            CoefficientKind::Fourier { terms } => {
                for t in terms {
                    if t.row > 2 || t.col > 2 {
                        return Err(Error::InvalidCoefficient(format!("entry ({}, {}) out of range", t.row, t.col)));
                    }
                    let find = |r: usize, c: usize, k: [i64; 3]| -> C64 {
                        terms.iter().filter(|s| s.row == r && s.col == c && s.k == k).map(|s| s.value).sum()
                    };
                    let v = find(t.row, t.col, t.k);
                    if (find(t.col, t.row, t.k) - v).norm() > 1e-14 * (1.0 + v.norm()) {
                        return Err(Error::InvalidCoefficient(format!("A not symmetric at ({}, {}) k={:?}", t.row, t.col, t.k)));
                    }
                    let mk = [-t.k[0], -t.k[1], -t.k[2]];
                    if (find(t.row, t.col, mk) - v.conj()).norm() > 1e-14 * (1.0 + v.norm()) {
                        return Err(Error::InvalidCoefficient(format!("A not real-valued at ({}, {}) k={:?}", t.row, t.col, t.k)));
                    }
                }
            }
            CoefficientKind::Piecewise { divisions, values } => {
                let n: usize = divisions.iter().product();
                if divisions.iter().any(|&d| d == 0 || !d.is_power_of_two()) {
                    return Err(Error::InvalidCoefficient(format!("divisions {divisions:?} must be powers of two")));
                }
                if values.len() != n {
                    return Err(Error::InvalidCoefficient(format!("expected {n} cell values, got {}", values.len())));
                }
                for m in values {
                    for r in 0..3 {
                        for c in 0..3 {
                            if (m[r][c] - m[c][r]).abs() > 1e-14 * (1.0 + m[r][c].abs()) {
                                return Err(Error::InvalidCoefficient("cell value not symmetric".into()));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Pointwise value `A(y)`.
    pub fn eval(&self, y: [f64; 3]) -> [[f64; 3]; 3] {
        match &self.kind {
            CoefficientKind::Fourier { terms } => {
                let mut m = [[0.0; 3]; 3];
                for t in terms {
                    let ph = C64::from_polar(1.0, 2.0 * PI * (t.k[0] as f64 * y[0] + t.k[1] as f64 * y[1] + t.k[2] as f64 * y[2]));
                    m[t.row][t.col] += (t.value * ph).re;
                }
                m
            }
            CoefficientKind::Piecewise { divisions, values } => {
                let mut idx = 0;
                for a in 0..3 {
                    let t = y[a] - y[a].floor();
                    let j = ((t * divisions[a] as f64).floor() as usize).min(divisions[a] - 1);
                    idx = idx * divisions[a] + j;
                }
                values[idx]
            }
        }
    }

    /// Samples A on a grid over supp μ and checks the declared bounds.
    pub fn spot_check_ellipticity(&self, mu: &PeriodicMeasure) -> Result<()> {
        self.validate()?;
        let s = 7;
        let pts: Vec<f64> = (0..s).map(|j| (j as f64 + 0.37) / s as f64).collect();
        let mut samples: Vec<[f64; 3]> = Vec::new();
        if mu.lebesgue_weight > 0.0 {
            for &a in &pts {
                for &b in &pts {
                    for &c in &pts {
                        samples.push([a, b, c]);
                    }
                }
            }
        }
        for f in &mu.flats {
            let axes: Vec<Vec<f64>> =
                (0..3).map(|a| if f.free[a] { pts.clone() } else { vec![f.offsets[a].unwrap().value()] }).collect();
            for &a in &axes[0] {
                for &b in &axes[1] {
                    for &c in &axes[2] {
                        samples.push([a, b, c]);
                    }
                }
            }
        }
        let tol = 1e-9 * self.lambda_max.max(1.0);
        for y in samples {
            let ev = sym_eigenvalues(&self.eval(y));
            if ev[0] < self.lambda_min - tol || ev[2] > self.lambda_max + tol {
                return Err(Error::InvalidCoefficient(format!(
                    "eigenvalues {ev:?} of A at {y:?} outside declared bounds [{}, {}]",
                    self.lambda_min, self.lambda_max
                )));
            }
        }
        Ok(())
    }

    /// Fourier coefficient `Â_ab(k) = ∫_Q A_ab e^{-2πik·y} dy`.
    pub fn fourier_coefficient(&self, a: usize, b: usize, k: [i64; 3]) -> C64 {
        match &self.kind {
            CoefficientKind::Fourier { terms } => {
                terms.iter().filter(|t| t.row == a && t.col == b && t.k == k).map(|t| t.value).sum()
            }
            CoefficientKind::Piecewise { divisions, values } => {
                let mut z = C64::new(0.0, 0.0);
                for (idx, m) in values.iter().enumerate() {
                    if m[a][b] == 0.0 {
                        continue;
                    }
                    let cell = cell_index(idx, divisions);
                    let mut w = C64::new(m[a][b], 0.0);
                    for ax in 0..3 {
                        let h = 1.0 / divisions[ax] as f64;
                        w *= interval_moment(k[ax] as f64, cell[ax] as f64 * h, (cell[ax] + 1) as f64 * h);
                    }
                    z += w;
                }
                z
            }
        }
    }

    /// Largest `|k|∞` among Fourier terms; `None` for piecewise coefficients.
    pub fn band(&self) -> Option<usize> {
        match &self.kind {
            CoefficientKind::Fourier { terms } => {
                Some(terms.iter().map(|t| t.k.iter().map(|x| x.unsigned_abs() as usize).max().unwrap()).max().unwrap_or(0))
            }
            CoefficientKind::Piecewise { .. } => None,
        }
    }

    /// True when A does not depend on y.
    pub fn is_constant(&self) -> bool {
        match &self.kind {
            CoefficientKind::Fourier { terms } => terms.iter().all(|t| t.k == [0, 0, 0] || t.value == C64::new(0.0, 0.0)),
            CoefficientKind::Piecewise { values, .. } => values.windows(2).all(|w| w[0] == w[1]),
        }
    }

    /// Weighted moments `m_ab(d) = ∫_Q A_ab e^{-2πid·y} dμ` for `|d|∞ ≤ cutoff`.
    pub fn moment_tables(&self, mu: &PeriodicMeasure, cutoff: usize) -> [MomentTable; 6] {
        let mu_tab = match &self.kind {
            CoefficientKind::Fourier { .. } => {
                let extra = self.band().unwrap_or(0);
                Some(mu.moment_table(cutoff + extra))
            }
            CoefficientKind::Piecewise { .. } => None,
        };
        std::array::from_fn(|p| {
            let (a, b) = PAIRS[p];
            match &self.kind {
                CoefficientKind::Fourier { terms } => {
                    let tab = mu_tab.as_ref().unwrap();
                    let mine: Vec<&FourierTerm> = terms.iter().filter(|t| t.row == a && t.col == b).collect();
                    MomentTable::from_fn(cutoff, |d| mine.iter().map(|t| t.value * tab.get(sub(d, t.k))).sum())
                }
                CoefficientKind::Piecewise { divisions, values } => piecewise_moments(mu, divisions, values, a, b, cutoff),
            }
        })
    }

    /// `A·A` with the same kind of representation.
    pub fn squared(&self) -> CoefficientField {
        let kind = match &self.kind {
            CoefficientKind::Fourier { terms } => {
                let mut acc: Vec<FourierTerm> = Vec::new();
                for s in terms {
                    for t in terms {
                        if s.col != t.row {
                            continue;
                        }
                        let k = [s.k[0] + t.k[0], s.k[1] + t.k[1], s.k[2] + t.k[2]];
                        let v = s.value * t.value;
                        match acc.iter_mut().find(|x| x.row == s.row && x.col == t.col && x.k == k) {
                            Some(x) => x.value += v,
                            None => acc.push(FourierTerm { row: s.row, col: t.col, k, value: v }),
                        }
                    }
                }
                CoefficientKind::Fourier { terms: acc }
            }
            CoefficientKind::Piecewise { divisions, values } => {
                CoefficientKind::Piecewise { divisions: *divisions, values: values.iter().map(|m| mat_mul(m, m)).collect() }
            }
        };
        CoefficientField { kind, lambda_min: self.lambda_min.powi(2), lambda_max: self.lambda_max.powi(2) }
    }
}

/// Upper-triangle entry pairs in storage order of [`CoefficientField::moment_tables`].
pub const PAIRS: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

/// Index into the six symmetric moment tables for entry `(a, b)`.
#[inline]
pub fn pair_index(a: usize, b: usize) -> usize {
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    match (a, b) {
        (0, 0) => 0,
        (0, 1) => 1,
        (0, 2) => 2,
        (1, 1) => 3,
        (1, 2) => 4,
        _ => 5,
    }
}

fn cell_index(mut idx: usize, divisions: &[usize; 3]) -> [usize; 3] {
    let mut c = [0; 3];
    for a in (0..3).rev() {
        c[a] = idx % divisions[a];
        idx /= divisions[a];
    }
    c
}

fn piecewise_moments(
    mu: &PeriodicMeasure,
    divisions: &[usize; 3],
    values: &[[[f64; 3]; 3]],
    a: usize,
    b: usize,
    cutoff: usize,
) -> MomentTable {
    let d = cutoff as i64;
    // 1-D interval moments per axis and cell
    let intervals: Vec<Vec<Vec<C64>>> = (0..3)
        .map(|ax| {
            let n = divisions[ax];
            let h = 1.0 / n as f64;
            (0..n).map(|j| (-d..=d).map(|x| interval_moment(x as f64, j as f64 * h, (j + 1) as f64 * h)).collect()).collect()
        })
        .collect();
    let mut table = MomentTable::zeros(cutoff);
    let side = (2 * d + 1) as usize;
    for (idx, m) in values.iter().enumerate() {
        let v = m[a][b];
        if v == 0.0 {
            continue;
        }
        let cell = cell_index(idx, divisions);
        let vals = table.values_mut();
        if mu.lebesgue_weight > 0.0 {
            let (i0, i1, i2) = (&intervals[0][cell[0]], &intervals[1][cell[1]], &intervals[2][cell[2]]);
            let w = v * mu.lebesgue_weight;
            for x in 0..side {
                for y in 0..side {
                    let xy = i0[x] * i1[y] * w;
                    for z in 0..side {
                        vals[(x * side + y) * side + z] += xy * i2[z];
                    }
                }
            }
        }
        for f in &mu.flats {
            // the flat meets this (half-open) cell iff every fixed coordinate falls inside it
            let inside = (0..3).all(|ax| {
                f.free[ax] || {
                    let c = f.offsets[ax].unwrap().value();
                    let n = divisions[ax] as f64;
                    ((c * n).floor() as usize).min(divisions[ax] - 1) == cell[ax]
                }
            });
            if !inside {
                continue;
            }
            let factor = |ax: usize, x: usize| -> C64 {
                if f.free[ax] {
                    intervals[ax][cell[ax]][x]
                } else {
                    let l = x as f64 - d as f64;
                    C64::from_polar(1.0, -2.0 * PI * l * f.offsets[ax].unwrap().value())
                }
            };
            let w = v * f.weight;
            for x in 0..side {
                let fx = factor(0, x) * w;
                for y in 0..side {
                    let fxy = fx * factor(1, y);
                    for z in 0..side {
                        vals[(x * side + y) * side + z] += fxy * factor(2, z);
                    }
                }
            }
        }
    }
    table
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// Ascending eigenvalues of a symmetric 3×3 matrix.
pub fn sym_eigenvalues(m: &[[f64; 3]; 3]) -> [f64; 3] {
    let a = ndarray::Array2::from_shape_fn((3, 3), |(i, j)| 0.5 * (m[i][j] + m[j][i]));
    let (ev, _) = a.eigh(UPLO::Lower).expect("3x3 symmetric eigenproblem");
    [ev[0], ev[1], ev[2]]
}

/// Pointwise product `A·u` computed exactly on the padded cube of cutoff `L + band`, where
/// `band` is the coefficient bandwidth (`2L` for piecewise coefficients).
pub fn multiply_coeff_padded(a: &CoefficientField, u: &SpectralField) -> SpectralField {
    assert_eq!(u.ncomp, 3);
    let l = u.cube.cutoff();
    let band = a.band().unwrap_or(2 * l);
    let big = FrequencyCube::new(l + band);
    let mut out = SpectralField::zeros(&big, 3);
    // Â_ab(k) for |k|∞ ≤ band, from the Lebesgue moment table
    let leb = PeriodicMeasure::lebesgue();
    let tabs = a.moment_tables(&leb, band);
    for (j, m) in u.cube.modes().iter().enumerate() {
        let v = u.vec_at(j);
        if v.iter().all(|c| *c == C64::new(0.0, 0.0)) {
            continue;
        }
        for (i, n) in big.modes().iter().enumerate() {
            let k = sub(*n, *m);
            if k.iter().any(|x| x.unsigned_abs() as usize > band) {
                continue;
            }
            let mut acc = [C64::new(0.0, 0.0); 3];
            for r in 0..3 {
                for c in 0..3 {
                    acc[r] += tabs[pair_index(r, c)].get(k) * v[c];
                }
            }
            for r in 0..3 {
                out.coeffs[3 * i + r] += acc[r];
            }
        }
    }
    out
}

/// Pointwise product `A·u`, computed on the padded cube and truncated back to the cube of `u`.
pub fn multiply_coeff(a: &CoefficientField, u: &SpectralField) -> SpectralField {
    multiply_coeff_padded(a, u).resize(&u.cube)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::Offset;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(cube: &FrequencyCube, ncomp: usize, seed: u64) -> SpectralField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs = (0..cube.len() * ncomp).map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect();
        SpectralField::from_coeffs(cube, ncomp, coeffs)
    }

    #[test]
    fn cube_enumeration_is_lexicographic() {
        let cube = FrequencyCube::new(1);
        assert_eq!(cube.len(), 27);
        assert_eq!(cube.mode(0), [-1, -1, -1]);
        assert_eq!(cube.mode(1), [-1, -1, 0]);
        assert_eq!(cube.mode(cube.zero_index()), [0, 0, 0]);
        for (i, l) in cube.modes().iter().enumerate() {
            assert_eq!(cube.index(*l), Some(i));
        }
    }

    #[test]
    fn curl_of_constant() {
        let cube = FrequencyCube::new(2);
        let one = C64::new(1.0, 0.0);
        let zero = C64::new(0.0, 0.0);
        let c = SpectralField::constant(&cube, [one, zero, zero]);
        assert!(curl_quasi(&c, &Quasimomentum::zero()).coeff_norm() == 0.0);
        let q = Quasimomentum::from_kappa([0.0, 0.0, PI]).unwrap();
        let r = curl_quasi(&c, &q);
        let z = cube.zero_index();
        // iπ (e3 × e1) = iπ e2
        assert!((r.coeff(1, z) - C64::new(0.0, PI)).norm() < 1e-15);
        assert!(r.coeff(0, z).norm() == 0.0 && r.coeff(2, z).norm() == 0.0);
    }

    #[test]
    fn gradient_examples() {
        let cube = FrequencyCube::new(1);
        let one = SpectralField::constant_scalar(&cube, C64::new(1.0, 0.0));
        assert_eq!(grad_quasi(&one, &Quasimomentum::zero()).coeff_norm(), 0.0);
        let q = Quasimomentum::from_kappa([0.5, -1.0, 2.0]).unwrap();
        let g = grad_quasi(&one, &q);
        let z = cube.zero_index();
        assert_eq!(g.vec_at(z), [C64::new(0.0, 0.5), C64::new(0.0, -1.0), C64::new(0.0, 2.0)]);
        let mut e1 = SpectralField::zeros(&cube, 1);
        e1.coeffs_mut()[cube.index([1, 0, 0]).unwrap()] = C64::new(1.0, 0.0);
        let g = grad_quasi(&e1, &Quasimomentum::zero());
        assert!((g.coeff(0, cube.index([1, 0, 0]).unwrap()) - C64::new(0.0, 2.0 * PI)).norm() < 1e-15);
    }

    proptest! {
        #[test]
        fn curl_of_gradient_vanishes(seed in 0u64..1000, k0 in -3.1f64..3.1, k1 in -3.1f64..3.1, k2 in -3.1f64..3.1) {
            let cube = FrequencyCube::new(2);
            let phi = random_field(&cube, 1, seed);
            let q = Quasimomentum::from_kappa([k0, k1, k2]).unwrap();
            let c = curl_quasi(&grad_quasi(&phi, &q), &q);
            prop_assert!(c.coeff_norm() <= 1e-12 * phi.coeff_norm() * 100.0);
        }

        #[test]
        fn curl_is_symmetric_on_lebesgue(seed in 0u64..1000, k0 in -3.1f64..3.1) {
            let cube = FrequencyCube::new(1);
            let mu = PeriodicMeasure::lebesgue();
            let u = random_field(&cube, 3, seed);
            let v = random_field(&cube, 3, seed + 1);
            let q = Quasimomentum::from_kappa([k0, 0.3, -0.7]).unwrap();
            let lhs = inner_product_mu(&curl_quasi(&u, &q), &v, &mu);
            let rhs = inner_product_mu(&u, &curl_quasi(&v, &q), &mu);
            prop_assert!((lhs - rhs).norm() <= 1e-10 * (1.0 + lhs.norm()));
        }

        #[test]
        fn inner_product_is_hermitian_and_positive(seed in 0u64..1000) {
            let cube = FrequencyCube::new(2);
            let mu = PeriodicMeasure::grid_planes();
            let u = random_field(&cube, 3, seed);
            let v = random_field(&cube, 3, seed + 7);
            let a = inner_product_mu(&u, &v, &mu);
            let b = inner_product_mu(&v, &u, &mu);
            prop_assert!((a - b.conj()).norm() <= 1e-12 * (1.0 + a.norm()));
            prop_assert!(inner_product_mu(&u, &u, &mu).re >= 0.0);
        }
    }

    #[test]
    fn inner_product_examples() {
        let cube = FrequencyCube::new(2);
        let one = SpectralField::constant_scalar(&cube, C64::new(1.0, 0.0));
        for mu in [PeriodicMeasure::lebesgue(), PeriodicMeasure::grid_planes()] {
            assert!((inner_product_mu(&one, &one, &mu) - C64::new(1.0, 0.0)).norm() < 1e-14);
        }
        let plane = PeriodicMeasure::plane(2, Offset::zero()).unwrap();
        let mut e3 = SpectralField::zeros(&cube, 1);
        e3.coeffs_mut()[cube.index([0, 0, 1]).unwrap()] = C64::new(1.0, 0.0);
        assert!((inner_product_mu(&e3, &one, &plane) - C64::new(1.0, 0.0)).norm() < 1e-14);
        assert!((mean_mu(&e3, &plane)[0] - C64::new(1.0, 0.0)).norm() < 1e-14);
        assert!(mean_mu(&e3, &PeriodicMeasure::lebesgue())[0].norm() < 1e-14);
    }

    #[test]
    fn grid_inner_product_matches_monte_carlo() {
        let cube = FrequencyCube::new(1);
        let mu = PeriodicMeasure::grid_planes();
        let u = random_field(&cube, 3, 11);
        let v = random_field(&cube, 3, 12);
        let exact = inner_product_mu(&u, &v, &mu);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut acc = C64::new(0.0, 0.0);
        let mut acc2 = 0.0;
        for _ in 0..n {
            let plane = rng.random_range(0..3usize);
            let mut y = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            y[plane] = 0.0;
            let (a, b) = (u.eval(y), v.eval(y));
            let s = (0..3).map(|c| a[c] * b[c].conj()).sum::<C64>();
            acc += s;
            acc2 += s.norm_sqr();
        }
        let mc = acc / n as f64;
        let stderr = ((acc2 / n as f64 - mc.norm_sqr()) / n as f64).sqrt();
        assert!((mc - exact).norm() < 5.0 * stderr, "mc={mc} exact={exact} stderr={stderr}");
    }

    #[test]
    fn multiply_by_identity_and_constants() {
        let cube = FrequencyCube::new(2);
        let u = random_field(&cube, 3, 1);
        assert_eq!(multiply_coeff(&CoefficientField::identity(), &u), u);
        let d = multiply_coeff(&CoefficientField::constant([[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]), &u);
        for i in 0..cube.len() {
            assert_eq!(d.coeff(0, i), u.coeff(0, i) * 2.0);
            assert_eq!(d.coeff(1, i), u.coeff(1, i));
        }
    }

    #[test]
    fn multiply_matches_grid_product() {
        // oracle: evaluate on a physical grid, multiply pointwise, transform back
        let cube = FrequencyCube::new(2);
        let a = CoefficientField::scalar_cosine(0.5, 0);
        let u = random_field(&cube, 3, 9);
        let prod = multiply_coeff_padded(&a, &u);
        let n = 16usize;
        let big = prod.cube().clone();
        for l in [[0, 0, 0], [3, 1, -2], [-1, 2, 2], [1, 0, 0]] {
            let mut acc = [C64::new(0.0, 0.0); 3];
            for x in 0..n {
                for y in 0..n {
                    for z in 0..n {
                        let p = [x as f64 / n as f64, y as f64 / n as f64, z as f64 / n as f64];
                        let m = a.eval(p);
                        let v = u.eval(p);
                        let ph = C64::from_polar(1.0, -2.0 * PI * (l[0] as f64 * p[0] + l[1] as f64 * p[1] + l[2] as f64 * p[2]));
                        for r in 0..3 {
                            acc[r] += (m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2]) * ph;
                        }
                    }
                }
            }
            let i = big.index(l).unwrap();
            for r in 0..3 {
                let g = acc[r] / (n * n * n) as f64;
                assert!((g - prod.coeff(r, i)).norm() < 1e-12, "l={l:?} r={r}");
            }
        }
    }

    #[test]
    fn piecewise_fourier_coefficients() {
        let a = CoefficientField::laminate(0, 1.0, 4.0);
        assert!((a.fourier_coefficient(0, 0, [0, 0, 0]) - C64::new(2.5, 0.0)).norm() < 1e-14);
        // ∫_0^{1/2} e^{-2πit} + 4∫_{1/2}^1 e^{-2πit} = (1 - 4)·(1/(πi)) = 3i/π
        let c = a.fourier_coefficient(1, 1, [1, 0, 0]);
        assert!((c - C64::new(0.0, 3.0 / PI)).norm() < 1e-14, "{c}");
        assert_eq!(a.fourier_coefficient(0, 1, [1, 0, 0]), C64::new(0.0, 0.0));
    }

    #[test]
    fn piecewise_moments_on_a_plane_use_half_open_cells() {
        let a = CoefficientField::laminate(0, 1.0, 4.0);
        // plane {y1 = 1/2} lies in the second cell, where a = 4
        let mu = PeriodicMeasure::plane(0, Offset::Rational { p: 1, q: 2 }).unwrap();
        let t = a.moment_tables(&mu, 2);
        assert!((t[0].get([0, 0, 0]) - C64::new(4.0, 0.0)).norm() < 1e-14);
        assert!((t[0].get([1, 0, 0]) - C64::new(-4.0, 0.0)).norm() < 1e-14);
        assert!(t[0].get([0, 1, 0]).norm() < 1e-14);
    }

    #[test]
    fn fourier_moments_combine_with_measure() {
        let a = CoefficientField::scalar_cosine(0.5, 2);
        let mu = PeriodicMeasure::plane(2, Offset::Rational { p: 1, q: 4 }).unwrap();
        let t = a.moment_tables(&mu, 2);
        // on {y3 = 1/4}, a = 1 + ½cos(π/2) = 1; moments at d = (0,0,m) pick the phase e^{-iπm/2}
        assert!((t[0].get([0, 0, 0]) - C64::new(1.0, 0.0)).norm() < 1e-14);
        assert!((t[3].get([0, 0, 1]) - C64::from_polar(1.0, -PI / 2.0)).norm() < 1e-14);
        assert_eq!(t[1].get([0, 0, 0]), C64::new(0.0, 0.0));
    }

    #[test]
    fn ellipticity_spot_check() {
        let mu = PeriodicMeasure::lebesgue();
        assert!(CoefficientField::scalar_cosine(0.5, 0).spot_check_ellipticity(&mu).is_ok());
        let mut bad = CoefficientField::scalar_cosine(0.5, 0);
        bad.lambda_min = 0.9;
        assert!(bad.spot_check_ellipticity(&mu).is_err());
        let mut asym = CoefficientField::identity();
        if let CoefficientKind::Fourier { terms } = &mut asym.kind {
            terms.push(FourierTerm { row: 0, col: 1, k: [0, 0, 0], value: C64::new(0.1, 0.0) });
        }
        assert!(asym.validate().is_err());
    }

    #[test]
    fn squared_coefficient_matches_pointwise_square() {
        let a = CoefficientField::scalar_cosine(0.5, 1);
        let a2 = a.squared();
        for y in [[0.1, 0.2, 0.3], [0.7, 0.55, 0.0]] {
            let m = a.eval(y);
            let s = a2.eval(y);
            assert!((s[0][0] - m[0][0] * m[0][0]).abs() < 1e-14);
        }
    }
}
