//! Discrete Poincaré constants for the quasiperiodic curl.
//!
//! `C̃_P(κ)^{-2}` is the smallest eigenvalue of `‖curl(e_κu)‖²_μ / ‖u‖²_μ` over fields with zero
//! μ-mean that are μ-orthogonal to every quasi-gradient. The largest eigenvalue of the
//! constrained inverse `T G` is found by Lanczos in the μ-inner product, where `T` is the
//! solution operator of `[[S, Cᴴ], [C, 0]]` and `C` stacks the constraint rows.

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::galerkin::Discretisation;
use crate::helmholtz::saddle_matrix;
use crate::linalg::{dot_h, hermitian_eigh, Factorization, Mat, Vector};
use crate::measure::PeriodicMeasure;
use crate::pool::map_indexed;
use crate::spectral::{FrequencyCube, Quasimomentum};
use crate::C64;

const LANCZOS_TOL: f64 = 1e-11;
const LANCZOS_MAX: usize = 300;
const START_TOL: f64 = 1e-10;
const START_SEED: u64 = 0x5eed_0001;

#[derive(Clone, Debug, Serialize)]
pub struct PoincareReport {
    pub kappa_grid: Vec<[f64; 3]>,
    pub c_tilde: Vec<f64>,
    pub c_sup: f64,
    pub cutoff: usize,
}

/// `(G ⊗ I₃) x` from the scalar Gram block.
pub(crate) fn mass_apply(g: &Mat, x: &Vector) -> Vector {
    let n = g.nrows();
    let xs = x.view().into_shape_with_order((n, 3)).expect("three entries per mode");
    let y = g.dot(&xs);
    Array1::from_iter(y.iter().cloned())
}

/// Largest eigenvalue of the G-self-adjoint operator `apply`, or `None` if the Krylov start
/// vector has no μ-mass.
fn lanczos_largest(apply: impl Fn(&Vector) -> Vector, gmul: impl Fn(&Vector) -> Vector, start: Vector) -> Option<f64> {
    let g_norm = |v: &Vector, gv: &Vector| dot_h(v, gv).re.max(0.0).sqrt();
    let reference = g_norm(&start, &gmul(&start));
    let v0 = apply(&start);
    let gv0 = gmul(&v0);
    let n0 = g_norm(&v0, &gv0);
    if reference == 0.0 || n0 <= START_TOL * reference {
        return None;
    }
    let mut vs = vec![v0.mapv(|z| z / n0)];
    let mut gvs = vec![gv0.mapv(|z| z / n0)];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut ritz = 0.0;
    for j in 0..LANCZOS_MAX {
        let mut w = apply(&vs[j]);
        let alpha = dot_h(&gvs[j], &w).re;
        // two passes of full reorthogonalisation in the G-inner product
        for _ in 0..2 {
            for (v, gv) in vs.iter().zip(&gvs) {
                let c = dot_h(gv, &w);
                w.scaled_add(-c, v);
            }
        }
        alphas.push(alpha);
        let gw = gmul(&w);
        let beta = g_norm(&w, &gw);
        let k = alphas.len();
        let mut t = Array2::<C64>::zeros((k, k));
        for i in 0..k {
            t[[i, i]] = C64::new(alphas[i], 0.0);
            if i + 1 < k {
                t[[i, i + 1]] = C64::new(betas[i], 0.0);
                t[[i + 1, i]] = C64::new(betas[i], 0.0);
            }
        }
        let (ev, vecs) = hermitian_eigh(&t).expect("tridiagonal eigensolve");
        ritz = ev[k - 1];
        let tail = (beta * vecs[[k - 1, k - 1]].norm()).abs();
        if tail <= LANCZOS_TOL * ritz.abs() || beta <= LANCZOS_TOL * ritz.abs() {
            break;
        }
        betas.push(beta);
        vs.push(w.mapv(|z| z / beta));
        gvs.push(gw.mapv(|z| z / beta));
    }
    Some(ritz)
}

fn estimate_with(disc: &Discretisation, q: &Quasimomentum) -> Result<f64> {
    let kappa = q.kappa;
    let mut best: Option<f64> = None;
    for (ci, comp) in disc.components().iter().enumerate() {
        let n3 = 3 * comp.len();
        let g = disc.gram(comp);
        let c = disc.solenoidal_constraints(comp, kappa, ci == disc.zero_component());
        let sys = Factorization::saddle(saddle_matrix(&disc.stiffness_identity(comp, kappa), &c), n3)?;
        let m = sys.dim();
        let apply = |v: &Vector| {
            let mut rhs = Array1::zeros(m);
            rhs.slice_mut(s![..n3]).assign(&mass_apply(&g, v));
            sys.solve(&rhs).slice(s![..n3]).to_owned()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(START_SEED ^ comp[0] as u64);
        let start: Vector = (0..n3).map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect();
        if let Some(top) = lanczos_largest(apply, |v| mass_apply(&g, v), start) {
            if top > 0.0 {
                best = Some(best.map_or(top, |b: f64| b.max(top)));
            }
        }
    }
    best.map(f64::sqrt).ok_or_else(|| {
        Error::DegenerateSubspace(format!("no zero-mean solenoidal field with μ-mass at κ = {:?}", kappa))
    })
}

/// `C̃_P(κ)` at the given cutoff.
pub fn estimate_poincare(q: &Quasimomentum, mu: &PeriodicMeasure, cube: &FrequencyCube) -> Result<f64> {
    let disc = Discretisation::new(cube, mu, None);
    estimate_with(&disc, q)
}

/// Uniform κ-grid `−π + 2πj/(r−1)` per axis, faces included.
pub fn kappa_grid(resolution: usize) -> Vec<[f64; 3]> {
    let pi = std::f64::consts::PI;
    let r = resolution;
    let x = |j: usize| -pi + 2.0 * pi * j as f64 / (r - 1) as f64;
    let mut out = Vec::with_capacity(r * r * r);
    for i in 0..r {
        for j in 0..r {
            for k in 0..r {
                out.push([x(i), x(j), x(k)]);
            }
        }
    }
    out
}

pub fn poincare_sweep(mu: &PeriodicMeasure, cube: &FrequencyCube, resolution: usize, workers: usize) -> Result<PoincareReport> {
    if resolution < 2 {
        return Err(Error::InvalidInput(format!("κ-grid resolution {resolution} < 2")));
    }
    poincare_on_grid(mu, cube, kappa_grid(resolution), workers)
}

/// `C̃_P` on an explicit list of κ.
pub fn poincare_on_grid(mu: &PeriodicMeasure, cube: &FrequencyCube, grid: Vec<[f64; 3]>, workers: usize) -> Result<PoincareReport> {
    let disc = Discretisation::new(cube, mu, None);
    let values = map_indexed(&grid, workers, |_, k| {
        let q = Quasimomentum::from_kappa(*k)?;
        estimate_with(&disc, &q)
    });
    let c_tilde = values.into_iter().collect::<Result<Vec<f64>>>()?;
    let c_sup = c_tilde.iter().cloned().fold(0.0, f64::max);
    Ok(PoincareReport { kappa_grid: grid, c_tilde, c_sup, cutoff: cube.cutoff() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::helmholtz::HelmholtzSolver;
    use crate::linalg::{adjoint, hermitian_eigenvalues};
    use crate::measure::Offset;
    use crate::spectral::{curl_quasi, norm_mu, wavevector, SpectralField};
    use std::f64::consts::PI;

    /// Explicit-subspace oracle: null space of the constraints, then the Schur complement over
    /// the Gram kernel, then a dense generalised eigensolve.
    fn dense_lambda_min(mu: &PeriodicMeasure, cube: &FrequencyCube, kappa: [f64; 3]) -> Option<f64> {
        let disc = Discretisation::new(cube, mu, None);
        let mut best: Option<f64> = None;
        for (ci, comp) in disc.components().iter().enumerate() {
            let c = disc.solenoidal_constraints(comp, kappa, ci == disc.zero_component());
            let (ev, vecs) = hermitian_eigh(&adjoint(&c).dot(&c)).unwrap();
            let top = ev.last().cloned().unwrap_or(0.0).max(1e-300);
            let keep: Vec<usize> = (0..ev.len()).filter(|&i| ev[i] <= 1e-11 * top).collect();
            if keep.is_empty() {
                continue;
            }
            let nb = Array2::from_shape_fn((vecs.nrows(), keep.len()), |(r, k)| vecs[[r, keep[k]]]);
            let s = adjoint(&nb).dot(&disc.stiffness_identity(comp, kappa)).dot(&nb);
            let g = adjoint(&nb).dot(&disc.mass(comp)).dot(&nb);
            let (gev, gv) = hermitian_eigh(&g).unwrap();
            let gtop = gev.last().cloned().unwrap();
            if gtop <= 1e-12 {
                continue;
            }
            let range: Vec<usize> = (0..gev.len()).filter(|&i| gev[i] > 1e-10 * gtop).collect();
            let kern: Vec<usize> = (0..gev.len()).filter(|&i| gev[i] <= 1e-10 * gtop).collect();
            let pick = |idx: &[usize]| Array2::from_shape_fn((gv.nrows(), idx.len()), |(r, k)| gv[[r, idx[k]]]);
            let (r, k) = (pick(&range), pick(&kern));
            let srr = adjoint(&r).dot(&s).dot(&r);
            let schur = if kern.is_empty() {
                srr
            } else {
                let skk = adjoint(&k).dot(&s).dot(&k);
                let skr = adjoint(&k).dot(&s).dot(&r);
                let (kev, kv) = hermitian_eigh(&skk).unwrap();
                let ktop = kev.last().cloned().unwrap().max(1e-300);
                let mut pinv = Array2::<C64>::zeros(skk.raw_dim());
                for (i, &e) in kev.iter().enumerate() {
                    if e > 1e-12 * ktop {
                        let col = kv.column(i).to_owned();
                        for a in 0..col.len() {
                            for b in 0..col.len() {
                                pinv[[a, b]] += col[a] * col[b].conj() / e;
                            }
                        }
                    }
                }
                &srr - &adjoint(&skr).dot(&pinv).dot(&skr)
            };
            // whiten with the Gram restricted to its range
            let d: Vec<f64> = range.iter().map(|&i| gev[i]).collect();
            let w = Array2::from_shape_fn(schur.raw_dim(), |(a, b)| schur[[a, b]] / (d[a] * d[b]).sqrt());
            let lam = hermitian_eigenvalues(&w).unwrap()[0];
            best = Some(best.map_or(lam, |b: f64| b.min(lam)));
        }
        best
    }

    fn lebesgue_oracle(kappa: [f64; 3], cutoff: i64) -> f64 {
        let mut best = f64::INFINITY;
        for a in -cutoff..=cutoff {
            for b in -cutoff..=cutoff {
                for c in -cutoff..=cutoff {
                    if [a, b, c] == [0, 0, 0] {
                        continue;
                    }
                    let k = wavevector(kappa, [a, b, c]);
                    best = best.min(k.iter().map(|x| x * x).sum::<f64>());
                }
            }
        }
        best.powf(-0.5)
    }

    #[test]
    fn lebesgue_at_zero_is_one_over_two_pi() {
        let c = estimate_poincare(&Quasimomentum::zero(), &PeriodicMeasure::lebesgue(), &FrequencyCube::new(3)).unwrap();
        assert!((c - 1.0 / (2.0 * PI)).abs() < 1e-10);
    }

    #[test]
    fn lebesgue_matches_mode_enumeration() {
        let cube = FrequencyCube::new(2);
        for kappa in [[PI, 0.0, 0.0], [0.3, -1.7, 2.2], [-PI, PI, -PI], [1.0, 0.0, 0.0]] {
            let c = estimate_poincare(&Quasimomentum::from_kappa(kappa).unwrap(), &PeriodicMeasure::lebesgue(), &cube).unwrap();
            assert!((c - lebesgue_oracle(kappa, 2)).abs() < 1e-10, "{kappa:?}: {c}");
        }
    }

    #[test]
    fn lebesgue_sweep_gives_one_over_pi() {
        let r = poincare_sweep(&PeriodicMeasure::lebesgue(), &FrequencyCube::new(2), 3, 2).unwrap();
        assert_eq!(r.c_tilde.len(), 27);
        assert!((r.c_sup - 1.0 / PI).abs() < 1e-6);
        assert!(r.c_tilde.iter().all(|c| c.is_finite() && *c > 0.0));
    }

    #[test]
    fn lanczos_agrees_with_dense_oracle() {
        let measures = [
            PeriodicMeasure::plane(2, Offset::zero()).unwrap(),
            PeriodicMeasure::grid_planes(),
            PeriodicMeasure::plane(0, Offset::Rational { p: 1, q: 3 }).unwrap(),
        ];
        let cube = FrequencyCube::new(2);
        for mu in &measures {
            for kappa in [[0.0; 3], [PI, 0.0, 0.0], [0.4, -2.1, 1.3]] {
                let q = Quasimomentum::from_kappa(kappa).unwrap();
                let c = estimate_poincare(&q, mu, &cube).unwrap();
                let lam = dense_lambda_min(mu, &cube, kappa).unwrap();
                assert!((c - lam.powf(-0.5)).abs() < 1e-7 * c, "{kappa:?}: {c} vs {}", lam.powf(-0.5));
            }
        }
    }

    #[test]
    fn point_mass_is_degenerate() {
        let mu = PeriodicMeasure::point_mass([Offset::zero(), Offset::zero(), Offset::zero()]).unwrap();
        let err = estimate_poincare(&Quasimomentum::zero(), &mu, &FrequencyCube::new(2)).unwrap_err();
        assert!(matches!(err, Error::DegenerateSubspace(_)));
        assert!(poincare_sweep(&mu, &FrequencyCube::new(1), 2, 1).is_err());
    }

    #[test]
    fn line_measure_is_degenerate() {
        // the trace on the line is forced to vanish by zero mean and orthogonality to gradients
        let mu = PeriodicMeasure::line(0);
        for kappa in [[0.0; 3], [1.0, 0.5, 0.0]] {
            let q = Quasimomentum::from_kappa(kappa).unwrap();
            assert!(matches!(estimate_poincare(&q, &mu, &FrequencyCube::new(2)), Err(Error::DegenerateSubspace(_))));
            assert!(dense_lambda_min(&mu, &FrequencyCube::new(2), kappa).is_none());
        }
    }

    #[test]
    fn single_plane_sweep_is_finite() {
        let r = poincare_sweep(&PeriodicMeasure::plane(1, Offset::zero()).unwrap(), &FrequencyCube::new(2), 2, 1).unwrap();
        assert!(r.c_sup.is_finite() && r.c_sup > 0.0);
    }

    #[test]
    fn constant_grows_with_the_cutoff() {
        let measures = [
            PeriodicMeasure::lebesgue(),
            PeriodicMeasure::plane(2, Offset::zero()).unwrap(),
            PeriodicMeasure::grid_planes(),
        ];
        for mu in &measures {
            for kappa in [[0.0; 3], [PI, 0.5, 0.0]] {
                let q = Quasimomentum::from_kappa(kappa).unwrap();
                let c1 = estimate_poincare(&q, mu, &FrequencyCube::new(1)).unwrap();
                let c3 = estimate_poincare(&q, mu, &FrequencyCube::new(3)).unwrap();
                assert!(c3 >= c1 - 1e-8, "{kappa:?}: {c1} > {c3}");
            }
        }
    }

    #[test]
    fn helmholtz_remainder_obeys_the_inequality_on_lebesgue() {
        let cube = FrequencyCube::new(2);
        let mu = PeriodicMeasure::lebesgue();
        let c_sup = poincare_sweep(&mu, &cube, 3, 1).unwrap().c_sup;
        let disc = Discretisation::new(&cube, &mu, None);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kappa in [[0.0; 3], [PI, 0.0, 0.0], [0.7, -0.2, 2.9]] {
            let q = Quasimomentum::from_kappa(kappa).unwrap();
            let h = HelmholtzSolver::new(&disc, &q).unwrap();
            for _ in 0..10 {
                let coeffs = (0..3 * cube.len()).map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect();
                let u = SpectralField::from_coeffs(&cube, 3, coeffs);
                let split = h.decompose(&u);
                let lhs = norm_mu(&split.solenoidal, &mu);
                let rhs = norm_mu(&curl_quasi(&u, &q), &mu);
                assert!(lhs <= 1.1 * c_sup * rhs, "{lhs} > {}", c_sup * rhs);
            }
        }
    }
}
