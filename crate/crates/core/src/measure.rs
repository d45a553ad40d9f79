//! Periodic Borel measures built from a Lebesgue part and axis-parallel flats.
//!
//! Every component has closed-form Fourier moments, so Gram matrices and
//! measure-weighted pairings of truncated Fourier series are exact.

use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::FrequencyCube;
use crate::C64;

/// Constant coordinate of a flat along one fixed axis.
///
/// Rational offsets keep the phase factors `exp(-2πi l c)` reproducible bit for bit,
/// because `l·p mod q` is computed in integers before the angle is formed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Offset {
    Rational { p: i64, q: i64 },
    Real(f64),
}

impl Offset {
    pub fn zero() -> Self {
        Offset::Rational { p: 0, q: 1 }
    }

    pub fn value(&self) -> f64 {
        match *self {
            Offset::Rational { p, q } => p as f64 / q as f64,
            Offset::Real(c) => c,
        }
    }

    /// Fractional part of `l·c`, in [0, 1).
    fn turns(&self, l: i64) -> f64 {
        match *self {
            Offset::Rational { p, q } => (l * p).rem_euclid(q) as f64 / q as f64,
            Offset::Real(c) => {
                let t = l as f64 * c;
                t - t.floor()
            }
        }
    }

    /// `exp(-2πi ξ c)` for a real frequency.
    fn phase_real(&self, xi: f64) -> C64 {
        C64::from_polar(1.0, -2.0 * PI * xi * self.value())
    }

    /// `exp(-2πi l c)` for an integer frequency.
    fn phase(&self, l: i64) -> C64 {
        if l == 0 {
            return C64::new(1.0, 0.0);
        }
        C64::from_polar(1.0, -2.0 * PI * self.turns(l))
    }
}

/// One flat piece `{y : y_a = c_a for every fixed axis a}` carrying Lebesgue measure
/// on its free axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatComponent {
    /// `free[a]` is true when axis `a` (0-based) spans the flat.
    pub free: [bool; 3],
    /// Offsets on the fixed axes; `None` on free axes.
    pub offsets: [Option<Offset>; 3],
    pub weight: f64,
}

impl FlatComponent {
    /// `free_axes` are 0-based; every other axis must receive an offset.
    pub fn new(free_axes: &[usize], offsets: &[(usize, Offset)], weight: f64) -> Result<Self> {
        let mut free = [false; 3];
        for &a in free_axes {
            if a > 2 || free[a] {
                return Err(Error::InvalidMeasure(format!("bad free axis list {free_axes:?}")));
            }
            free[a] = true;
        }
        let mut offs = [None; 3];
        for &(a, c) in offsets {
            if a > 2 || free[a] || offs[a].is_some() {
                return Err(Error::InvalidMeasure(format!("offset given for axis {} that is free or repeated", a + 1)));
            }
            if let Offset::Rational { q, .. } = c {
                if q <= 0 {
                    return Err(Error::InvalidMeasure("rational offset needs a positive denominator".into()));
                }
            }
            let v = c.value();
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidMeasure(format!("offset {v} outside [0,1)")));
            }
            offs[a] = Some(c);
        }
        for a in 0..3 {
            if !free[a] && offs[a].is_none() {
                offs[a] = Some(Offset::zero());
            }
        }
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(Error::InvalidMeasure(format!("flat weight {weight} must be a nonnegative number")));
        }
        Ok(FlatComponent { free, offsets: offs, weight })
    }

    pub fn dimension(&self) -> usize {
        self.free.iter().filter(|&&f| f).count()
    }

    fn same_support(&self, other: &FlatComponent) -> bool {
        self.free == other.free
            && (0..3).all(|a| match (self.offsets[a], other.offsets[a]) {
                (Some(x), Some(y)) => (x.value() - y.value()).abs() < 1e-15,
                (None, None) => true,
                _ => false,
            })
    }

    /// Unnormalised moment `∫ exp(-2πi l·y)` over the flat.
    fn moment(&self, l: [i64; 3]) -> C64 {
        let mut z = C64::new(1.0, 0.0);
        for a in 0..3 {
            if self.free[a] {
                if l[a] != 0 {
                    return C64::new(0.0, 0.0);
                }
            } else {
                z *= self.offsets[a].unwrap().phase(l[a]);
            }
        }
        z
    }

    fn moment_real(&self, xi: [f64; 3]) -> C64 {
        let mut z = C64::new(1.0, 0.0);
        for a in 0..3 {
            if self.free[a] {
                z *= unit_interval_moment(xi[a]);
            } else {
                z *= self.offsets[a].unwrap().phase_real(xi[a]);
            }
        }
        z
    }
}

/// `∫_0^1 exp(-2πi x t) dt`.
pub(crate) fn unit_interval_moment(x: f64) -> C64 {
    interval_moment(x, 0.0, 1.0)
}

/// `∫_a^b exp(-2πi x t) dt`.
pub(crate) fn interval_moment(x: f64, a: f64, b: f64) -> C64 {
    if x == 0.0 {
        return C64::new(b - a, 0.0);
    }
    let w = 2.0 * PI * x;
    if (w * (b - a)).abs() < 1e-6 {
        // series form avoids cancellation for tiny real frequencies
        let mid = 0.5 * (a + b);
        let h = b - a;
        let s = h * (1.0 - (w * h).powi(2) / 24.0);
        return C64::from_polar(s, -w * mid);
    }
    (C64::from_polar(1.0, -w * a) - C64::from_polar(1.0, -w * b)) / C64::new(0.0, w)
}

/// Normalised periodic measure on Q = [0,1)³.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicMeasure {
    pub lebesgue_weight: f64,
    pub flats: Vec<FlatComponent>,
    /// Total mass before normalisation.
    pub normalization: f64,
}

impl PeriodicMeasure {
    /// Validates the components and rescales all weights so that μ(Q) = 1.
    pub fn new(lebesgue_weight: f64, flats: Vec<FlatComponent>) -> Result<Self> {
        if !(lebesgue_weight.is_finite() && lebesgue_weight >= 0.0) {
            return Err(Error::InvalidMeasure(format!("lebesgue_weight {lebesgue_weight} must be nonnegative")));
        }
        for (i, f) in flats.iter().enumerate() {
            if !(f.weight.is_finite() && f.weight >= 0.0) {
                return Err(Error::InvalidMeasure(format!("flat {i}: negative weight {}", f.weight)));
            }
            for (j, g) in flats.iter().enumerate().take(i) {
                if f.same_support(g) {
                    return Err(Error::InvalidMeasure(format!("flats {j} and {i} coincide")));
                }
            }
        }
        let total = lebesgue_weight + flats.iter().map(|f| f.weight).sum::<f64>();
        if !(total > 0.0) {
            return Err(Error::InvalidMeasure("all weights vanish".into()));
        }
        let flats = flats
            .into_iter()
            .filter(|f| f.weight > 0.0)
            .map(|mut f| {
                f.weight /= total;
                f
            })
            .collect();
        Ok(PeriodicMeasure { lebesgue_weight: lebesgue_weight / total, flats, normalization: total })
    }

    pub fn lebesgue() -> Self {
        PeriodicMeasure { lebesgue_weight: 1.0, flats: Vec::new(), normalization: 1.0 }
    }

    /// Plane `{y_axis = c}` (axis 0-based).
    pub fn plane(axis: usize, offset: Offset) -> Result<Self> {
        let free: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        Self::new(0.0, vec![FlatComponent::new(&free, &[(axis, offset)], 1.0)?])
    }

    /// Equal-weight union of the three coordinate planes through the origin.
    pub fn grid_planes() -> Self {
        let flats = (0..3)
            .map(|axis| {
                let free: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
                FlatComponent::new(&free, &[(axis, Offset::zero())], 1.0).unwrap()
            })
            .collect();
        Self::new(0.0, flats).unwrap()
    }

    /// Line through the origin along `axis`.
    pub fn line(axis: usize) -> Self {
        Self::new(0.0, vec![FlatComponent::new(&[axis], &[], 1.0).unwrap()]).unwrap()
    }

    pub fn point_mass(at: [Offset; 3]) -> Result<Self> {
        Self::new(0.0, vec![FlatComponent::new(&[], &[(0, at[0]), (1, at[1]), (2, at[2])], 1.0)?])
    }

    pub fn is_lebesgue(&self) -> bool {
        self.flats.is_empty()
    }

    /// μ̂(l) = ∫_Q exp(-2πi l·y) dμ(y).
    pub fn fourier_moment(&self, l: [i64; 3]) -> C64 {
        let mut z = if l == [0, 0, 0] { C64::new(self.lebesgue_weight, 0.0) } else { C64::new(0.0, 0.0) };
        for f in &self.flats {
            z += f.moment(l) * f.weight;
        }
        z
    }

    /// Moment at a real frequency, `∫_Q exp(-2πi ξ·y) dμ(y)` with Q = [0,1)³.
    pub fn moment_real(&self, xi: [f64; 3]) -> C64 {
        let mut z = C64::new(self.lebesgue_weight, 0.0);
        if self.lebesgue_weight > 0.0 {
            for &x in &xi {
                z *= unit_interval_moment(x);
            }
        }
        for f in &self.flats {
            z += f.moment_real(xi) * f.weight;
        }
        z
    }

    /// Moments on all differences of a cube of cutoff `cutoff`.
    pub fn moment_table(&self, cutoff: usize) -> MomentTable {
        MomentTable::from_fn(cutoff, |d| self.fourier_moment(d))
    }

    /// Gram matrix `G[i,j] = μ̂(l_i − l_j)`, so that `⟨u,v⟩_μ = vᴴ G u`.
    pub fn gram_matrix(&self, cube: &FrequencyCube) -> Array2<C64> {
        let n = cube.len();
        let table = self.moment_table(2 * cube.cutoff());
        Array2::from_shape_fn((n, n), |(i, j)| table.get(sub(cube.mode(i), cube.mode(j))))
    }

    /// Largest `|2πi l_j μ̂(−l)|` over the cube; zero when `∫ ∂_j φ dμ = 0` for every basis function.
    pub fn check_gradient_mean_zero(&self, cube: &FrequencyCube) -> f64 {
        let mut worst: f64 = 0.0;
        for l in cube.modes() {
            let m = self.fourier_moment(neg(*l)).norm();
            if m == 0.0 {
                continue;
            }
            for &lj in l {
                worst = worst.max(2.0 * PI * (lj as f64).abs() * m);
            }
        }
        worst
    }

    /// Squared μ-norm of a (scalar or vector) coefficient array on `cube`.
    ///
    /// Uses the trace structure of each flat, so the cost is linear in the number of modes.
    pub fn norm_sq(&self, cube: &FrequencyCube, x: &[C64], ncomp: usize) -> f64 {
        self.inner(cube, x, x, ncomp).re.max(0.0)
    }

    /// `⟨u, v⟩_μ = ∫ u · conj(v) dμ` for coefficient arrays laid out mode-major.
    pub fn inner(&self, cube: &FrequencyCube, u: &[C64], v: &[C64], ncomp: usize) -> C64 {
        debug_assert_eq!(u.len(), cube.len() * ncomp);
        debug_assert_eq!(v.len(), cube.len() * ncomp);
        let mut acc = C64::new(0.0, 0.0);
        if self.lebesgue_weight > 0.0 {
            let s: C64 = u.iter().zip(v).map(|(a, b)| a * b.conj()).sum();
            acc += s * self.lebesgue_weight;
        }
        let l = cube.cutoff() as i64;
        let side = (2 * l + 1) as usize;
        for f in &self.flats {
            let dim = f.dimension();
            let bins = side.pow(dim as u32);
            let mut tu = vec![C64::new(0.0, 0.0); bins * ncomp];
            let mut tv = vec![C64::new(0.0, 0.0); bins * ncomp];
            for (i, mode) in cube.modes().iter().enumerate() {
                let mut key = 0usize;
                let mut ph = C64::new(1.0, 0.0);
                for a in 0..3 {
                    if f.free[a] {
                        key = key * side + (mode[a] + l) as usize;
                    } else {
                        ph *= f.offsets[a].unwrap().phase(mode[a]).conj();
                    }
                }
                for c in 0..ncomp {
                    tu[key * ncomp + c] += u[i * ncomp + c] * ph;
                    tv[key * ncomp + c] += v[i * ncomp + c] * ph;
                }
            }
            let s: C64 = tu.iter().zip(&tv).map(|(a, b)| a * b.conj()).sum();
            acc += s * f.weight;
        }
        acc
    }

    /// Per-component μ-mean `Σ_l x_l μ̂(−l)`.
    pub fn mean(&self, cube: &FrequencyCube, x: &[C64], ncomp: usize) -> Vec<C64> {
        let mut m = vec![C64::new(0.0, 0.0); ncomp];
        for (i, mode) in cube.modes().iter().enumerate() {
            let w = self.fourier_moment(neg(*mode));
            if w == C64::new(0.0, 0.0) {
                continue;
            }
            for c in 0..ncomp {
                m[c] += x[i * ncomp + c] * w;
            }
        }
        m
    }
}

/// Values of a function of the frequency difference on the cube `{−D..D}³`.
#[derive(Clone, Debug)]
pub struct MomentTable {
    cutoff: i64,
    side: usize,
    vals: Vec<C64>,
}

impl MomentTable {
    pub fn from_fn(cutoff: usize, mut f: impl FnMut([i64; 3]) -> C64) -> Self {
        let d = cutoff as i64;
        let side = (2 * d + 1) as usize;
        let mut vals = Vec::with_capacity(side.pow(3));
        for a in -d..=d {
            for b in -d..=d {
                for c in -d..=d {
                    vals.push(f([a, b, c]));
                }
            }
        }
        MomentTable { cutoff: d, side, vals }
    }

    pub fn zeros(cutoff: usize) -> Self {
        Self::from_fn(cutoff, |_| C64::new(0.0, 0.0))
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff as usize
    }

    #[inline]
    pub fn get(&self, d: [i64; 3]) -> C64 {
        let c = self.cutoff;
        if d.iter().any(|x| x.abs() > c) {
            return C64::new(0.0, 0.0);
        }
        let s = self.side;
        self.vals[((d[0] + c) as usize * s + (d[1] + c) as usize) * s + (d[2] + c) as usize]
    }

    /// Differences whose value exceeds `tol` in modulus.
    pub fn support(&self, tol: f64) -> Vec<[i64; 3]> {
        let c = self.cutoff;
        let mut out = Vec::new();
        let mut k = 0;
        for a in -c..=c {
            for b in -c..=c {
                for e in -c..=c {
                    if self.vals[k].norm() > tol {
                        out.push([a, b, e]);
                    }
                    k += 1;
                }
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.vals.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub(crate) fn values_mut(&mut self) -> &mut [C64] {
        &mut self.vals
    }
}

#[inline]
pub(crate) fn sub(a: [i64; 3], b: [i64; 3]) -> [i64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn neg(a: [i64; 3]) -> [i64; 3] {
    [-a[0], -a[1], -a[2]]
}
