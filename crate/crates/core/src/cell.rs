//! Periodic cell corrector `Ñ`, the constant matrix `a_θ` and the effective tensor `A^hom`.
//!
//! Column `j` of `Ñ` minimises `∫ A(curl Ñ_j + e_j)·conj(curl Ñ_j + e_j) dμ` over zero-mean
//! fields that are μ-orthogonal to all periodic gradients. The constraints enter through
//! Lagrange multipliers, giving one Hermitian saddle system per coupled group of modes.

use ndarray::{s, Array1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::galerkin::{scatter, Discretisation};
use crate::helmholtz::saddle_matrix;
use crate::linalg::{adjoint, dot_h, norm, Factorization, Vector};
use crate::measure::PeriodicMeasure;
use crate::spectral::{cross, cross_rc, sym_eigenvalues, CoefficientField, FrequencyCube, SpectralField};
use crate::C64;

/// Relative saddle residual above which the discretisation is reported as ill-posed.
const ILL_POSED_RESIDUAL: f64 = 1e-6;

type Cmat = [[C64; 3]; 3];

const ZERO: C64 = C64::new(0.0, 0.0);

/// Columns of `Ñ` and their curls, with the μ-moments needed downstream.
#[derive(Clone, Debug)]
pub struct CellCorrector {
    pub n_tilde: [SpectralField; 3],
    pub curl_n_tilde: [SpectralField; 3],
    pub residual_norms: [f64; 3],
    /// `∫ A dμ`.
    a_bar: [[f64; 3]; 3],
    /// `[a][b][d][j] = ∫ A_ab (Ñ_j)_d dμ`.
    weighted: [[[[C64; 3]; 3]; 3]; 3],
    /// `[a][j] = ∫ (A curl Ñ_j)_a dμ`.
    a_curl_mean: Cmat,
    /// `[a][j] = ∫ (curl Ñ_j)_a dμ`.
    curl_mean: Cmat,
    /// `[i][j] = ∫ A(curl Ñ_j + e_j)·conj(curl Ñ_i + e_i) dμ`.
    energy: Cmat,
    lambda: (f64, f64),
}

/// Plain-data image of a [`CellCorrector`] for on-disk caching.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellCorrectorData {
    pub cutoff: usize,
    pub n_tilde: Vec<Vec<C64>>,
    pub residual_norms: [f64; 3],
    pub a_bar: [[f64; 3]; 3],
    pub weighted: Vec<C64>,
    pub a_curl_mean: Cmat,
    pub curl_mean: Cmat,
    pub energy: Cmat,
    pub lambda: (f64, f64),
}

#[derive(Clone, Debug, Serialize)]
pub struct ThetaCorrector {
    pub theta: [f64; 3],
    pub a_theta: Cmat,
    /// Orthonormal frame `(θ/|θ|, e₁, e₂)`; zero for θ = 0.
    pub frame: [[f64; 3]; 3],
    /// Relative defect of the defining identity over a basis of `c`.
    pub identity_defect: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct HomogenisedTensor {
    pub a_hom: [[f64; 3]; 3],
    pub symmetry_defect: f64,
    pub eigenvalues: [f64; 3],
    /// Largest imaginary part of the assembled entries.
    pub imaginary_defect: f64,
    /// `max_ij |A^hom_ij − E_ij| / ‖A^hom‖` against the corrector energy form.
    pub energy_defect: f64,
}

impl HomogenisedTensor {
    pub fn symmetric(&self) -> bool {
        self.symmetry_defect <= 1e-8 * frob(&self.a_hom)
    }
}

fn frob(m: &[[f64; 3]; 3]) -> f64 {
    m.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn solve_cell_corrector(a: &CoefficientField, mu: &PeriodicMeasure, cube: &FrequencyCube) -> Result<CellCorrector> {
    a.spot_check_ellipticity(mu)?;
    let disc = Discretisation::new(cube, mu, Some(a));
    solve_cell_corrector_with(&disc, a)
}

/// Cell solve reusing an assembled discretisation (built with the same coefficient).
pub fn solve_cell_corrector_with(disc: &Discretisation, a: &CoefficientField) -> Result<CellCorrector> {
    if !disc.has_coefficient() {
        return Err(Error::InvalidInput("discretisation carries no coefficient".into()));
    }
    let cube = disc.cube().clone();
    let kappa = [0.0; 3];
    let zero3 = [0i64; 3];
    let mut n_cols: [Vec<C64>; 3] = std::array::from_fn(|_| vec![ZERO; 3 * cube.len()]);
    let mut curl_cols: [Vec<C64>; 3] = std::array::from_fn(|_| vec![ZERO; 3 * cube.len()]);
    let mut rhs_norm2 = [0.0f64; 3];
    let mut res_norm2 = [0.0f64; 3];
    let mut a_curl_mean = [[ZERO; 3]; 3];
    let mut curl_mean = [[ZERO; 3]; 3];
    let mut cross_energy = [[ZERO; 3]; 3];
    let a_bar: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| disc.a_moment(i, j, zero3).re));

    for (ci, comp) in disc.components().iter().enumerate() {
        let n3 = 3 * comp.len();
        let k = disc.curl(comp, kappa);
        let kh = adjoint(&k);
        // b_j[(m,b)] = m_bj(l_m); the load is −Kᴴ b_j
        let loads: Vec<Vector> = (0..3)
            .map(|j| {
                let mut b = Array1::zeros(n3);
                for (p, &i) in comp.iter().enumerate() {
                    let l = cube.mode(i);
                    for r in 0..3 {
                        b[3 * p + r] = disc.a_moment(r, j, l);
                    }
                }
                kh.dot(&b).mapv(|z| -z)
            })
            .collect();
        if loads.iter().all(|v| v.iter().all(|z| *z == ZERO)) {
            continue;
        }
        let c = disc.solenoidal_constraints(comp, kappa, ci == disc.zero_component());
        let sys = Factorization::saddle(saddle_matrix(&disc.stiffness(comp, kappa), &c), n3)?;
        let ga = disc.coeff_mass(comp);
        let amean = disc.coeff_mean_rows(comp);
        let vmean = disc.vector_mean_rows(comp);
        let mut curls: Vec<Vector> = Vec::with_capacity(3);
        for j in 0..3 {
            let mut rhs = Array1::zeros(sys.dim());
            rhs.slice_mut(s![..n3]).assign(&loads[j]);
            let y = sys.solve(&rhs);
            let r = &rhs - &sys.matrix().dot(&y);
            rhs_norm2[j] += norm(&rhs).powi(2);
            res_norm2[j] += norm(&r).powi(2);
            let x = y.slice(s![..n3]).to_owned();
            let v = k.dot(&x);
            scatter(&mut n_cols[j], comp, 3, &x);
            scatter(&mut curl_cols[j], comp, 3, &v);
            let am = amean.dot(&v);
            let vm = vmean.dot(&v);
            for a in 0..3 {
                a_curl_mean[a][j] += am[a];
                curl_mean[a][j] += vm[a];
            }
            curls.push(v);
        }
        let gv: Vec<Vector> = curls.iter().map(|v| ga.dot(v)).collect();
        for i in 0..3 {
            for j in 0..3 {
                cross_energy[i][j] += dot_h(&curls[i], &gv[j]);
            }
        }
    }

    let mut residual_norms = [0.0; 3];
    for j in 0..3 {
        if rhs_norm2[j] > 0.0 {
            residual_norms[j] = (res_norm2[j] / rhs_norm2[j]).sqrt();
        }
        if residual_norms[j] > ILL_POSED_RESIDUAL {
            return Err(Error::IllPosed { what: format!("cell saddle residual, column {j}"), value: residual_norms[j] });
        }
    }
    let mut energy = [[ZERO; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            energy[i][j] = cross_energy[i][j] + a_curl_mean[i][j] + a_curl_mean[j][i].conj() + a_bar[i][j];
        }
    }
    let mut weighted = [[[[ZERO; 3]; 3]; 3]; 3];
    for (p, l) in cube.modes().iter().enumerate() {
        let d = [-l[0], -l[1], -l[2]];
        for (j, col) in n_cols.iter().enumerate() {
            let v = &col[3 * p..3 * p + 3];
            if v.iter().all(|z| *z == ZERO) {
                continue;
            }
            for a in 0..3 {
                for b in 0..3 {
                    let m = disc.a_moment(a, b, d);
                    if m == ZERO {
                        continue;
                    }
                    for dd in 0..3 {
                        weighted[a][b][dd][j] += m * v[dd];
                    }
                }
            }
        }
    }
    let n_tilde = n_cols.map(|c| SpectralField::from_coeffs(&cube, 3, c));
    let curl_n_tilde = curl_cols.map(|c| SpectralField::from_coeffs(&cube, 3, c));
    Ok(CellCorrector {
        n_tilde,
        curl_n_tilde,
        residual_norms,
        a_bar,
        weighted,
        a_curl_mean,
        curl_mean,
        energy,
        lambda: (a.lambda_min, a.lambda_max),
    })
}

impl CellCorrector {
    pub fn cube(&self) -> &FrequencyCube {
        self.n_tilde[0].cube()
    }

    /// `∫ A dμ`.
    pub fn a_bar(&self) -> [[f64; 3]; 3] {
        self.a_bar
    }

    /// `∫ curl Ñ dμ` (column j is `∫ curl Ñ_j`).
    pub fn curl_mean(&self) -> Cmat {
        self.curl_mean
    }

    /// `∫ A(curl Ñ + I) dμ` as assembled, before symmetrisation.
    pub fn a_curl_plus_identity_mean(&self) -> Cmat {
        std::array::from_fn(|a| std::array::from_fn(|j| self.a_curl_mean[a][j] + self.a_bar[a][j]))
    }

    /// `Ñ v = Σ_j v_j Ñ_j`.
    pub fn apply(&self, v: [C64; 3]) -> SpectralField {
        combine(&self.n_tilde, v)
    }

    /// `(curl Ñ) v`.
    pub fn apply_curl(&self, v: [C64; 3]) -> SpectralField {
        combine(&self.curl_n_tilde, v)
    }

    /// `∫ A(y)(M Ñ(y) v) dμ` for a constant matrix `M`.
    pub fn weighted_mean(&self, m: &[[f64; 3]; 3], v: [C64; 3]) -> [C64; 3] {
        let mut out = [ZERO; 3];
        for a in 0..3 {
            for b in 0..3 {
                for d in 0..3 {
                    if m[b][d] == 0.0 {
                        continue;
                    }
                    for j in 0..3 {
                        out[a] += self.weighted[a][b][d][j] * v[j] * m[b][d];
                    }
                }
            }
        }
        out
    }

    pub fn to_data(&self) -> CellCorrectorData {
        CellCorrectorData {
            cutoff: self.cube().cutoff(),
            n_tilde: self.n_tilde.iter().map(|f| f.coeffs().to_vec()).collect(),
            residual_norms: self.residual_norms,
            a_bar: self.a_bar,
            weighted: self.weighted.iter().flatten().flatten().flatten().cloned().collect(),
            a_curl_mean: self.a_curl_mean,
            curl_mean: self.curl_mean,
            energy: self.energy,
            lambda: self.lambda,
        }
    }

    pub fn from_data(d: &CellCorrectorData) -> Result<Self> {
        let cube = FrequencyCube::new(d.cutoff);
        if d.n_tilde.len() != 3 || d.n_tilde.iter().any(|c| c.len() != 3 * cube.len()) || d.weighted.len() != 81 {
            return Err(Error::InvalidInput("corrector data has the wrong shape".into()));
        }
        let n_tilde: [SpectralField; 3] = std::array::from_fn(|j| SpectralField::from_coeffs(&cube, 3, d.n_tilde[j].clone()));
        let q = crate::spectral::Quasimomentum::zero();
        let curl_n_tilde = n_tilde.clone().map(|f| crate::spectral::curl_quasi(&f, &q));
        let mut weighted = [[[[ZERO; 3]; 3]; 3]; 3];
        for (i, v) in d.weighted.iter().enumerate() {
            weighted[i / 27][(i / 9) % 3][(i / 3) % 3][i % 3] = *v;
        }
        Ok(CellCorrector {
            n_tilde,
            curl_n_tilde,
            residual_norms: d.residual_norms,
            a_bar: d.a_bar,
            weighted,
            a_curl_mean: d.a_curl_mean,
            curl_mean: d.curl_mean,
            energy: d.energy,
            lambda: d.lambda,
        })
    }
}

fn combine(cols: &[SpectralField; 3], v: [C64; 3]) -> SpectralField {
    let mut out = SpectralField::zeros(cols[0].cube(), 3);
    for j in 0..3 {
        if v[j] != ZERO {
            out.axpy(v[j], &cols[j]);
        }
    }
    out
}

/// `A^hom = ∫ A(curl Ñ + I) dμ`, with symmetry and energy diagnostics.
pub fn assemble_ahom(corrector: &CellCorrector) -> HomogenisedTensor {
    let raw = corrector.a_curl_plus_identity_mean();
    let a_hom: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| raw[i][j].re));
    let imaginary_defect = raw.iter().flatten().map(|z| z.im.abs()).fold(0.0, f64::max);
    let mut asym = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            asym += (a_hom[i][j] - a_hom[j][i]).powi(2);
        }
    }
    let scale = frob(&a_hom).max(f64::MIN_POSITIVE);
    let energy_defect = (0..9)
        .map(|k| (raw[k / 3][k % 3] - corrector.energy[k / 3][k % 3]).norm())
        .fold(0.0, f64::max)
        / scale;
    HomogenisedTensor {
        a_hom,
        symmetry_defect: asym.sqrt(),
        eigenvalues: sym_eigenvalues(&a_hom),
        imaginary_defect,
        energy_defect,
    }
}

/// `(θ/|θ|, e₁, e₂)` from the Householder reflection taking `e_k` to `θ/|θ|`, where `k` is the
/// axis of the smallest `|θ_k|` (first one on ties).
pub fn transverse_frame(theta: [f64; 3]) -> Option<[[f64; 3]; 3]> {
    let n = theta.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return None;
    }
    let t = theta.map(|x| x / n);
    let mut k = 0;
    for a in 1..3 {
        if t[a].abs() < t[k].abs() {
            k = a;
        }
    }
    let mut w = [-t[0], -t[1], -t[2]];
    w[k] += 1.0;
    let wn2: f64 = w.iter().map(|x| x * x).sum();
    // columns of H = I − 2wwᵀ/|w|² other than k span θ⊥
    let col = |c: usize| -> [f64; 3] {
        std::array::from_fn(|r| (if r == c { 1.0 } else { 0.0 }) - 2.0 * w[r] * w[c] / wn2)
    };
    let others: Vec<usize> = (0..3).filter(|&a| a != k).collect();
    Some([t, col(others[0]), col(others[1])])
}

fn skew(t: [f64; 3]) -> [[f64; 3]; 3] {
    [[0.0, -t[2], t[1]], [t[2], 0.0, -t[0]], [-t[1], t[0], 0.0]]
}

fn mat_vec(m: &[[f64; 3]; 3], v: [C64; 3]) -> [C64; 3] {
    std::array::from_fn(|i| v[0] * m[i][0] + v[1] * m[i][1] + v[2] * m[i][2])
}

fn cmat_vec(m: &Cmat, v: [C64; 3]) -> [C64; 3] {
    std::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn vnorm(v: [C64; 3]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn real_c(v: [f64; 3]) -> [C64; 3] {
    v.map(|x| C64::new(x, 0.0))
}

/// `a_θ`: the unique matrix with `a_θθ = 0`, range in `θ⊥` and
/// `∫ θ×A(θ×a_θη) dμ = −∫ θ×A(θ×Ñη) dμ` for all `η ⊥ θ`.
pub fn solve_a_theta(theta: [f64; 3], corrector: &CellCorrector) -> Result<ThetaCorrector> {
    let Some(frame) = transverse_frame(theta) else {
        return Ok(ThetaCorrector { theta, a_theta: [[ZERO; 3]; 3], frame: [[0.0; 3]; 3], identity_defect: 0.0 });
    };
    let ab = corrector.a_bar;
    let tx = skew(theta);
    let es = [frame[1], frame[2]];
    let te: [[f64; 3]; 2] = es.map(|e| cross(theta, e));
    let mut m = [[0.0f64; 2]; 2];
    for r in 0..2 {
        for p in 0..2 {
            let av: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| ab[i][j] * te[p][j]).sum());
            m[r][p] = (0..3).map(|i| te[r][i] * av[i]).sum();
        }
    }
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let cond = {
        let tr = m[0][0] + m[1][1];
        let disc = ((m[0][0] - m[1][1]).powi(2) + 4.0 * m[0][1] * m[1][0]).max(0.0).sqrt();
        (tr + disc) / (tr - disc).max(f64::MIN_POSITIVE)
    };
    if !(det.abs() > 1e-14 * (m[0][0].abs() + m[1][1].abs()).powi(2)) {
        return Err(Error::IllPosed { what: "a_θ transverse system".into(), value: cond });
    }
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    // right-hand side: −(θ×e_r)·∫A(θ×Ñe_q) dμ
    let mut alpha = [[ZERO; 2]; 2];
    let mut rhs = [[ZERO; 2]; 2];
    for q in 0..2 {
        let pq = corrector.weighted_mean(&tx, real_c(es[q]));
        for r in 0..2 {
            rhs[r][q] = -(0..3).map(|i| pq[i] * te[r][i]).sum::<C64>();
        }
    }
    for r in 0..2 {
        for q in 0..2 {
            alpha[r][q] = rhs[0][q] * inv[r][0] + rhs[1][q] * inv[r][1];
        }
    }
    let mut a_theta = [[ZERO; 3]; 3];
    for r in 0..2 {
        for q in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    a_theta[i][j] += alpha[r][q] * es[r][i] * es[q][j];
                }
            }
        }
    }
    // defining identity over c ∈ {e₁, e₂, e₃}
    let mut defect = 0.0f64;
    for c in 0..3 {
        let mut cv = [0.0; 3];
        cv[c] = 1.0;
        let v = real_c(cross(theta, cv));
        let lhs = cross_rc(theta, mat_vec(&ab, real_c_cross(theta, cmat_vec(&a_theta, v))));
        let rhs = cross_rc(theta, corrector.weighted_mean(&tx, v));
        let sum: [C64; 3] = std::array::from_fn(|i| lhs[i] + rhs[i]);
        let scale = vnorm(lhs).max(vnorm(rhs));
        if scale > 0.0 {
            defect = defect.max(vnorm(sum) / scale);
        }
    }
    Ok(ThetaCorrector { theta, a_theta, frame, identity_defect: defect })
}

fn real_c_cross(t: [f64; 3], v: [C64; 3]) -> [C64; 3] {
    cross_rc(t, v)
}

/// Columns of `N = Ñ + a_θ`.
pub fn build_full_corrector(corrector: &CellCorrector, theta: &ThetaCorrector) -> [SpectralField; 3] {
    let cube = corrector.cube();
    std::array::from_fn(|j| {
        let c = [theta.a_theta[0][j], theta.a_theta[1][j], theta.a_theta[2][j]];
        corrector.n_tilde[j].add(&SpectralField::constant(cube, c))
    })
}

/// `N v` with `N = Ñ + a_θ`.
pub fn apply_full_corrector(corrector: &CellCorrector, theta: &ThetaCorrector, v: [C64; 3]) -> SpectralField {
    let mut out = corrector.apply(v);
    let z = corrector.cube().zero_index();
    let c = cmat_vec(&theta.a_theta, v);
    for a in 0..3 {
        out.coeffs_mut()[3 * z + a] += c[a];
    }
    out
}

/// Both sides of the `a_θ` bound for one `c`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct AThetaBound {
    /// `‖a_θ(θ×c)‖_μ`.
    pub a_norm: f64,
    /// `‖Ñ(θ×c)‖_μ`.
    pub n_norm: f64,
    /// `‖A^{1/2}θ×a_θ(θ×c)‖_μ`.
    pub a_weighted: f64,
    /// `‖A^{1/2}θ×Ñ(θ×c)‖_μ`.
    pub n_weighted: f64,
}

pub fn a_theta_bound(
    theta: &ThetaCorrector,
    corrector: &CellCorrector,
    a: &CoefficientField,
    mu: &PeriodicMeasure,
    c: [C64; 3],
) -> AThetaBound {
    use crate::spectral::{inner_product_mu, multiply_coeff_padded, norm_mu};
    let t = theta.theta;
    let v = cross_rc(t, c);
    let av = cmat_vec(&theta.a_theta, v);
    let cube = corrector.cube();
    let mass = norm_mu(&SpectralField::constant(cube, [C64::new(1.0, 0.0), ZERO, ZERO]), mu);
    let nv = corrector.apply(v);
    let tav = cross_rc(t, av);
    let a_weighted = {
        let atav = mat_vec(&corrector.a_bar, tav);
        tav.iter().zip(atav.iter()).map(|(x, y)| (x.conj() * y).re).sum::<f64>().max(0.0).sqrt()
    };
    let tnv = {
        let mut f = SpectralField::zeros(cube, 3);
        for i in 0..cube.len() {
            f.set_vec(i, cross_rc(t, nv.vec_at(i)));
        }
        f
    };
    let atnv = multiply_coeff_padded(a, &tnv);
    let n_weighted = inner_product_mu(&atnv, &tnv.resize(atnv.cube()), mu).re.max(0.0).sqrt();
    AThetaBound { a_norm: vnorm(av) * mass, n_norm: norm_mu(&nv, mu), a_weighted, n_weighted }
}

/// `a_θ` across a list of θ on up to `workers` threads.
pub fn solve_a_theta_batch(thetas: &[[f64; 3]], corrector: &CellCorrector, workers: usize) -> Result<Vec<ThetaCorrector>> {
    crate::pool::map_indexed(thetas, workers, |_, t| solve_a_theta(*t, corrector)).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::helmholtz::HelmholtzSolver;
    use crate::linalg::hermitian_eigh;
    use crate::measure::Offset;
    use crate::spectral::{mean_mu, norm_mu, Quasimomentum};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ahom_of(a: &CoefficientField, mu: &PeriodicMeasure, l: usize) -> HomogenisedTensor {
        assemble_ahom(&solve_cell_corrector(a, mu, &FrequencyCube::new(l)).unwrap())
    }

    fn max_diff(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> f64 {
        (0..9).map(|k| (a[k / 3][k % 3] - b[k / 3][k % 3]).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn identity_coefficient_needs_no_corrector() {
        let corr = solve_cell_corrector(&CoefficientField::identity(), &PeriodicMeasure::lebesgue(), &FrequencyCube::new(3)).unwrap();
        assert!(corr.n_tilde.iter().all(|f| f.coeff_norm() == 0.0));
        assert_eq!(corr.residual_norms, [0.0; 3]);
        let h = assemble_ahom(&corr);
        assert!(max_diff(&h.a_hom, &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]) < 1e-14);
    }

    #[test]
    fn constant_coefficient_is_its_own_homogenisation() {
        let m = [[2.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 4.0]];
        let h = ahom_of(&CoefficientField::constant(m), &PeriodicMeasure::lebesgue(), 2);
        assert!(max_diff(&h.a_hom, &m) < 1e-12);
    }

    #[test]
    fn constant_coefficient_is_corrected_on_singular_measures() {
        // ∫ curl φ dμ ≠ 0 on planes, so even A = I has a nonzero cell load
        let h = ahom_of(&CoefficientField::identity(), &PeriodicMeasure::grid_planes(), 2);
        assert!(h.eigenvalues[0] > 0.0 && h.eigenvalues[2] < 1.0 - 1e-3);
        // a single plane lets the corrector cancel the tangential directions entirely
        let h = ahom_of(&CoefficientField::identity(), &PeriodicMeasure::plane(0, Offset::zero()).unwrap(), 2);
        assert!(max_diff(&h.a_hom, &[[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]) < 1e-12);
    }

    #[test]
    fn cosine_layer_matches_arithmetic_and_harmonic_means() {
        // A = a(y₁)I: the normal entry is ⟨a⟩ = 1, tangential entries are 1/⟨1/a⟩ = √3/2
        let a = CoefficientField::scalar_cosine(0.5, 0);
        let h = ahom_of(&a, &PeriodicMeasure::lebesgue(), 8);
        let r = 3f64.sqrt() / 2.0;
        assert!(max_diff(&h.a_hom, &[[1.0, 0.0, 0.0], [0.0, r, 0.0], [0.0, 0.0, r]]) < 1e-9, "{:?}", h.a_hom);
    }

    #[test]
    fn cosine_layer_refinement_is_stable() {
        let a = CoefficientField::scalar_cosine(0.5, 0);
        let h1 = ahom_of(&a, &PeriodicMeasure::lebesgue(), 3);
        let h2 = ahom_of(&a, &PeriodicMeasure::lebesgue(), 6);
        for i in 0..3 {
            for j in 0..3 {
                assert!((h1.a_hom[i][j] - h2.a_hom[i][j]).abs() <= 5e-3 * h2.a_hom[i][j].abs().max(1e-12));
            }
        }
    }

    #[test]
    fn laminate_tends_to_the_layered_means() {
        // phases 1 and 4: arithmetic mean 2.5, harmonic mean 1.6; the jump slows convergence
        let a = CoefficientField::laminate(0, 1.0, 4.0);
        let h = ahom_of(&a, &PeriodicMeasure::lebesgue(), 8);
        assert!((h.a_hom[0][0] - 2.5).abs() < 1e-9);
        assert!(h.a_hom[1][1] > 1.6 && h.a_hom[1][1] < 1.6 * 1.02);
        assert!((h.a_hom[1][1] - h.a_hom[2][2]).abs() < 1e-10);
    }

    #[test]
    fn corrector_is_solenoidal_with_zero_mean() {
        let a = CoefficientField::scalar_cosine(0.4, 1);
        let cube = FrequencyCube::new(2);
        for mu in [PeriodicMeasure::lebesgue(), PeriodicMeasure::grid_planes(), PeriodicMeasure::plane(0, Offset::zero()).unwrap()] {
            let corr = solve_cell_corrector(&a, &mu, &cube).unwrap();
            let disc = Discretisation::new(&cube, &mu, None);
            let h = HelmholtzSolver::new(&disc, &Quasimomentum::zero()).unwrap();
            for j in 0..3 {
                assert!(corr.residual_norms[j] <= 1e-8);
                let n = &corr.n_tilde[j];
                assert!(mean_mu(n, &mu).iter().all(|z| z.norm() < 1e-12));
                let nn = norm_mu(n, &mu);
                assert!(h.weak_div_residual(n) * nn <= 1e-8 * nn.max(1e-10));
            }
        }
    }

    #[test]
    fn ahom_is_symmetric_and_matches_the_energy_form() {
        let a = CoefficientField::scalar_cosine(0.6, 2);
        for mu in [PeriodicMeasure::lebesgue(), PeriodicMeasure::grid_planes()] {
            let h = ahom_of(&a, &mu, 2);
            assert!(h.symmetric(), "{}", h.symmetry_defect);
            assert!(h.energy_defect < 1e-6);
            assert!(h.imaginary_defect < 1e-10);
            // A^hom η·η ≤ ∫Aη·η always; the lower bound λ_min(A)|η|² needs ∫curl Ñ = 0
            let abar = solve_cell_corrector(&a, &mu, &FrequencyCube::new(2)).unwrap().a_bar();
            if mu.is_lebesgue() {
                assert!(h.eigenvalues[0] >= a.lambda_min - 1e-6);
            }
            for e in 0..3 {
                assert!(h.a_hom[e][e] <= abar[e][e] + 1e-6);
            }
        }
    }

    #[test]
    fn galerkin_residual_is_orthogonal_to_admissible_fields() {
        let cube = FrequencyCube::new(1);
        let mu = PeriodicMeasure::grid_planes();
        let a = CoefficientField::scalar_cosine(0.5, 0);
        let disc = Discretisation::new(&cube, &mu, Some(&a));
        let corr = solve_cell_corrector_with(&disc, &a).unwrap();
        let comp = &disc.components()[disc.zero_component()];
        let c = disc.solenoidal_constraints(comp, [0.0; 3], true);
        let (ev, vecs) = hermitian_eigh(&adjoint(&c).dot(&c)).unwrap();
        let top = ev.last().cloned().unwrap();
        let s = disc.stiffness(comp, [0.0; 3]);
        let k = disc.curl(comp, [0.0; 3]);
        for j in 0..3 {
            let x = crate::galerkin::gather(corr.n_tilde[j].coeffs(), comp, 3);
            let mut b = Array1::zeros(x.len());
            for (p, &i) in comp.iter().enumerate() {
                for r in 0..3 {
                    b[3 * p + r] = disc.a_moment(r, j, cube.mode(i));
                }
            }
            let r = s.dot(&x) + adjoint(&k).dot(&b);
            let scale = norm(&adjoint(&k).dot(&b)).max(1e-300);
            for (i, &e) in ev.iter().enumerate() {
                if e <= 1e-11 * top {
                    assert!(dot_h(&vecs.column(i).to_owned(), &r).norm() <= 1e-8 * scale);
                }
            }
        }
    }

    #[test]
    fn frame_is_orthonormal_and_deterministic() {
        for t in [[0.0, 0.0, 1.0], [1.0, 1.0, 1.0], [-0.3, 2.0, 0.1], [1.0, 0.0, 0.0]] {
            let f = transverse_frame(t).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let d: f64 = (0..3).map(|k| f[i][k] * f[j][k]).sum();
                    assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-14);
                }
            }
            assert_eq!(transverse_frame(t), transverse_frame(t));
        }
        assert!(transverse_frame([0.0; 3]).is_none());
    }

    #[test]
    fn a_theta_vanishes_for_constant_coefficients_and_zero_theta() {
        let corr = solve_cell_corrector(&CoefficientField::constant([[2.0, 0.3, 0.0], [0.3, 1.0, 0.0], [0.0, 0.0, 1.5]]), &PeriodicMeasure::lebesgue(), &FrequencyCube::new(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let t = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5].map(|x| 6.0 * x);
            let th = solve_a_theta(t, &corr).unwrap();
            assert!(th.a_theta.iter().flatten().all(|z| z.norm() == 0.0));
        }
        let lam = solve_cell_corrector(&CoefficientField::laminate(0, 1.0, 4.0), &PeriodicMeasure::lebesgue(), &FrequencyCube::new(2)).unwrap();
        assert!(solve_a_theta([0.0; 3], &lam).unwrap().a_theta.iter().flatten().all(|z| z.norm() == 0.0));
    }

    fn check_conditions(th: &ThetaCorrector) {
        let t = th.theta;
        let tn = t.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = th.a_theta.iter().flatten().map(|z| z.norm()).fold(0.0, f64::max).max(1e-300);
        // a_θθ = 0
        let at = cmat_vec(&th.a_theta, real_c(t));
        assert!(vnorm(at) <= 1e-12 * scale * tn);
        // θ·(a_θη) = 0 for every η
        for c in 0..3 {
            let col = [th.a_theta[0][c], th.a_theta[1][c], th.a_theta[2][c]];
            let d: C64 = (0..3).map(|i| col[i] * t[i]).sum();
            assert!(d.norm() <= 1e-12 * scale * tn);
        }
        assert!(th.identity_defect <= 1e-8, "{}", th.identity_defect);
    }

    #[test]
    fn laminate_a_theta_satisfies_its_identity() {
        let corr = solve_cell_corrector(&CoefficientField::laminate(0, 1.0, 4.0), &PeriodicMeasure::lebesgue(), &FrequencyCube::new(3)).unwrap();
        // θ along a layer direction: θ×Ñη vanishes, so a_θ = 0
        let th = solve_a_theta([0.0, 0.0, 1.0], &corr).unwrap();
        check_conditions(&th);
        // even layers give ∫AÑ = 0 by parity; three unequal phases break the symmetry
        let diag = |a: f64| [[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]];
        let three = CoefficientField {
            kind: crate::spectral::CoefficientKind::Piecewise { divisions: [4, 1, 1], values: vec![diag(1.0), diag(4.0), diag(2.0), diag(2.0)] },
            lambda_min: 1.0,
            lambda_max: 4.0,
        };
        let corr = solve_cell_corrector(&three, &PeriodicMeasure::lebesgue(), &FrequencyCube::new(3)).unwrap();
        let th = solve_a_theta([1.0, 0.3, 0.0], &corr).unwrap();
        check_conditions(&th);
        assert!(th.a_theta.iter().flatten().any(|z| z.norm() > 1e-6));
    }

    #[test]
    fn a_theta_is_zero_homogeneous_and_bounded_in_energy() {
        let a = CoefficientField::scalar_cosine(0.5, 1);
        let mu = PeriodicMeasure::grid_planes();
        let corr = solve_cell_corrector(&a, &mu, &FrequencyCube::new(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let t: [f64; 3] = std::array::from_fn(|_| 4.0 * (rng.random::<f64>() - 0.5));
            let th = solve_a_theta(t, &corr).unwrap();
            check_conditions(&th);
            let th2 = solve_a_theta(t.map(|x| 2.5 * x), &corr).unwrap();
            for k in 0..9 {
                assert!((th.a_theta[k / 3][k % 3] - th2.a_theta[k / 3][k % 3]).norm() < 1e-10);
            }
            let c: [C64; 3] = std::array::from_fn(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
            let b = a_theta_bound(&th, &corr, &a, &mu, c);
            assert!(b.a_weighted <= b.n_weighted * (1.0 + 1e-8) + 1e-12);
        }
    }

    #[test]
    fn full_corrector_adds_constants() {
        let a = CoefficientField::laminate(1, 1.0, 3.0);
        let mu = PeriodicMeasure::lebesgue();
        let corr = solve_cell_corrector(&a, &mu, &FrequencyCube::new(2)).unwrap();
        let th = solve_a_theta([0.3, 0.0, 1.0], &corr).unwrap();
        let n = build_full_corrector(&corr, &th);
        let q = Quasimomentum::zero();
        for j in 0..3 {
            let m = mean_mu(&n[j], &mu);
            for a in 0..3 {
                assert!((m[a] - th.a_theta[a][j]).norm() < 1e-12);
            }
            let d = crate::spectral::curl_quasi(&n[j], &q).sub(&corr.curl_n_tilde[j]);
            assert!(norm_mu(&d, &mu) < 1e-12);
        }
        let zero = ThetaCorrector { theta: [0.0; 3], a_theta: [[ZERO; 3]; 3], frame: [[0.0; 3]; 3], identity_defect: 0.0 };
        let n0 = build_full_corrector(&corr, &zero);
        assert!((0..3).all(|j| n0[j] == corr.n_tilde[j]));
    }

    #[test]
    fn corrector_round_trips_through_plain_data() {
        let a = CoefficientField::scalar_cosine(0.3, 0);
        let corr = solve_cell_corrector(&a, &PeriodicMeasure::grid_planes(), &FrequencyCube::new(2)).unwrap();
        let back = CellCorrector::from_data(&corr.to_data()).unwrap();
        assert_eq!(assemble_ahom(&back).a_hom, assemble_ahom(&corr).a_hom);
        let th = solve_a_theta([0.2, -1.0, 0.5], &corr).unwrap();
        assert_eq!(solve_a_theta([0.2, -1.0, 0.5], &back).unwrap().a_theta, th.a_theta);
        for j in 0..3 {
            let d = back.curl_n_tilde[j].sub(&corr.curl_n_tilde[j]);
            assert!(d.coeff_norm() < 1e-12);
        }
    }

    #[test]
    fn ellipticity_failure_is_reported() {
        let mut a = CoefficientField::scalar_cosine(0.5, 0);
        a.lambda_min = 0.9;
        assert!(matches!(
            solve_cell_corrector(&a, &PeriodicMeasure::lebesgue(), &FrequencyCube::new(1)),
            Err(Error::InvalidCoefficient(_))
        ));
    }

    #[test]
    fn repeated_solves_are_bit_identical() {
        let a = CoefficientField::scalar_cosine(0.5, 2);
        let mu = PeriodicMeasure::grid_planes();
        assert_eq!(ahom_of(&a, &mu, 2).a_hom, ahom_of(&a, &mu, 2).a_hom);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn random_constant_spd_is_reproduced(d in proptest::array::uniform3(0.5f64..3.0), o in proptest::array::uniform3(-0.3f64..0.3)) {
            let m = [[d[0], o[0], o[1]], [o[0], d[1], o[2]], [o[1], o[2], d[2]]];
            let h = ahom_of(&CoefficientField::constant(m), &PeriodicMeasure::lebesgue(), 1);
            prop_assert!(max_diff(&h.a_hom, &m) < 1e-12);
        }
    }
}
