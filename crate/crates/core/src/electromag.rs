//! Electric displacement `D = ε⁻¹ curl_κ H` and field `E = A D` recovered from fibre solutions,
//! with their two-scale approximations `(curl Ñ + I)(iθ×c_θ)` and `A(curl Ñ + I)(iθ×c_θ)`.

use serde::{Deserialize, Serialize};

use crate::cell::CellCorrector;
use crate::error::{Error, Result};
use crate::floquet::{fibre_nodes, homogenised_discretisation, WholeSpaceSource};
use crate::galerkin::{gather, Discretisation};
use crate::linalg::norm;
use crate::measure::PeriodicMeasure;
use crate::resolvent::{ExpansionReport, FibreContext, FibreRhs};
use crate::spectral::{
    cross_rc, curl_quasi, mean_mu, multiply_coeff_padded, norm_mu, CoefficientField, Quasimomentum, SpectralField,
};
use crate::C64;

const ZERO: C64 = C64::new(0.0, 0.0);

#[derive(Clone, Debug)]
pub struct EMFibreFields {
    pub h: SpectralField,
    pub d: SpectralField,
    /// `A·D` on the padded cube, so the product is exact.
    pub e: SpectralField,
    pub approx_d: SpectralField,
    pub approx_e: SpectralField,
}

/// `(curl Ñ + I) v`.
pub fn corrected(corrector: &CellCorrector, v: [C64; 3]) -> SpectralField {
    let mut out = corrector.apply_curl(v);
    let z = out.cube().zero_index();
    let w = out.vec_at(z);
    out.set_vec(z, [w[0] + v[0], w[1] + v[1], w[2] + v[2]]);
    out
}

pub fn em_fields(ctx: FibreContext, report: &ExpansionReport) -> EMFibreFields {
    let q = report.q;
    let h = report.u.clone();
    let d = curl_quasi(&h, &q).scale(C64::new(1.0 / q.epsilon, 0.0));
    let e = multiply_coeff_padded(ctx.a, &d);
    let d0 = cross_rc(q.theta, report.c_theta).map(|z| z * C64::new(0.0, 1.0));
    let approx_d = corrected(ctx.corrector, d0);
    let approx_e = multiply_coeff_padded(ctx.a, &approx_d);
    EMFibreFields { h, d, e, approx_d, approx_e }
}

/// `(‖D − D̃‖/(ε‖F‖), ‖E − Ẽ‖/(ε‖F‖))`.
pub fn em_estimates(fields: &EMFibreFields, eps: f64, f_norm: f64, mu: &PeriodicMeasure) -> Result<(f64, f64)> {
    if !(f_norm > 0.0) || !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("need ε > 0 and ‖F‖ > 0, got {eps} and {f_norm}")));
    }
    let s = eps * f_norm;
    let dd = norm_mu(&fields.d.sub(&fields.approx_d), mu) / s;
    let de = norm_mu(&fields.e.sub(&fields.approx_e), mu) / s;
    Ok((dd, de))
}

/// Relative residuals of `ε⁻¹curl_κ(A D) + H = F` (tested against the basis) and of
/// `ε⁻¹curl_κ H = D`, the second through the Galerkin curl matrix.
pub fn maxwell_residual(disc: &Discretisation, q: &Quasimomentum, rhs: &FibreRhs, fields: &EMFibreFields) -> (f64, f64) {
    let eps = q.epsilon;
    let (mut r1, mut p1, mut r2, mut p2) = (0.0, 0.0, 0.0, 0.0);
    for comp in disc.components() {
        let k = disc.curl(comp, q.kappa);
        let hv = gather(fields.h.coeffs(), comp, 3);
        let dv = gather(fields.d.coeffs(), comp, 3);
        let pv = gather(&rhs.pairing, comp, 3);
        let line1 = crate::linalg::adjoint(&k).dot(&disc.coeff_mass(comp).dot(&dv)) * C64::new(1.0 / eps, 0.0)
            + disc.mass(comp).dot(&hv)
            - &pv;
        r1 += norm(&line1).powi(2);
        p1 += norm(&pv).powi(2);
        r2 += norm(&(k.dot(&hv) * C64::new(1.0 / eps, 0.0) - &dv)).powi(2);
        p2 += norm(&dv).powi(2);
    }
    let rel = |r: f64, p: f64| if p > 0.0 { (r / p).sqrt() } else { r.sqrt() };
    (rel(r1, p1), rel(r2, p2))
}

/// `(‖∫ curl Ñ dμ‖, ‖∫ A(curl Ñ + I) dμ (A^hom)⁻¹ − I‖)` in the Frobenius norm, each integral
/// taken directly from the corrector fields.
pub fn corrector_mean_check(
    corrector: &CellCorrector,
    a: &CoefficientField,
    ahom: &crate::cell::HomogenisedTensor,
    mu: &PeriodicMeasure,
) -> Result<(f64, f64)> {
    let mut curl_mean = [[ZERO; 3]; 3];
    let mut flux = [[ZERO; 3]; 3];
    for j in 0..3 {
        let mut e = [ZERO; 3];
        e[j] = C64::new(1.0, 0.0);
        let m = mean_mu(&corrector.curl_n_tilde[j], mu);
        let f = mean_mu(&multiply_coeff_padded(a, &corrected(corrector, e)), mu);
        for i in 0..3 {
            curl_mean[i][j] = m[i];
            flux[i][j] = f[i];
        }
    }
    let inv = inverse3(&ahom.a_hom)
        .ok_or_else(|| Error::IllPosed { what: "homogenised tensor is singular".into(), value: 0.0 })?;
    let mut defect = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let v: C64 = (0..3).map(|k| flux[i][k] * inv[k][j]).sum::<C64>() - if i == j { 1.0 } else { 0.0 };
            defect += v.norm_sqr();
        }
    }
    let first = curl_mean.iter().flatten().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    Ok((first, defect.sqrt()))
}

fn inverse3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let c = |i: usize, j: usize| {
        let (r0, r1) = ((i + 1) % 3, (i + 2) % 3);
        let (c0, c1) = ((j + 1) % 3, (j + 2) % 3);
        m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
    };
    let det: f64 = (0..3).map(|j| m[0][j] * c(0, j)).sum();
    if det.abs() < 1e-300 {
        return None;
    }
    Some(std::array::from_fn(|i| std::array::from_fn(|j| c(j, i) / det)))
}

/// Per-ε whole-space ratios for `D` and `E`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EMWholeSpaceRow {
    pub epsilon: f64,
    /// `‖D_ε − (curl Ñ + I)D₀‖ / (ε‖f‖)`.
    pub ratio_d: f64,
    /// `‖E_ε − A(curl Ñ + I)(A^hom)⁻¹E₀‖ / (ε‖f‖)`.
    pub ratio_e: f64,
    /// `‖D_ε − D₀‖ / ‖f‖`.
    pub ratio_d_nocorr: f64,
    /// `‖E_ε − E₀‖ / ‖f‖`.
    pub ratio_e_nocorr: f64,
}

/// Whole-space `D`/`E` comparison. `D₀ = ε⁻¹curl_κ v` with `v` the homogenised fibre solution;
/// the oscillating factor `curl Ñ` acts on its dual-cell (zero-mode) part, which is the whole of
/// `D₀` up to `O(ε)`.
pub fn em_wholespace(
    ctx: FibreContext,
    source: &WholeSpaceSource,
    epsilons: &[f64],
    workers: usize,
) -> Result<Vec<EMWholeSpaceRow>> {
    let hom = homogenised_discretisation(ctx.disc, ctx.ahom);
    let hom_a = CoefficientField::constant(ctx.ahom.a_hom);
    let mu = ctx.disc.measure();
    epsilons
        .iter()
        .map(|&eps| {
            let nodes = fibre_nodes(ctx, &hom, source, eps, workers, |nf| {
                let q = nf.ws.quasimomentum();
                let s = C64::new(1.0 / eps, 0.0);
                let d = curl_quasi(nf.u, q).scale(s);
                let d0 = curl_quasi(nf.v, q).scale(s);
                let low = d0.vec_at(d0.cube().zero_index());
                let approx = d0.add(&corrected(ctx.corrector, low)).sub(&SpectralField::constant(d0.cube(), low));
                let e = multiply_coeff_padded(ctx.a, &d);
                let e0 = multiply_coeff_padded(&hom_a, &d0).resize(e.cube());
                [
                    norm_mu(&d.sub(&approx), mu).powi(2),
                    norm_mu(&e.sub(&multiply_coeff_padded(ctx.a, &approx)), mu).powi(2),
                    norm_mu(&d.sub(&d0), mu).powi(2),
                    norm_mu(&e.sub(&e0), mu).powi(2),
                ]
            })?;
            let f_sq: f64 = nodes.iter().map(|n| n.node.weight * n.f_sq).sum();
            let f = f_sq.sqrt().max(f64::MIN_POSITIVE);
            let tot = |k: usize| nodes.iter().map(|n| n.node.weight * n.extra[k]).sum::<f64>().sqrt() / f;
            Ok(EMWholeSpaceRow {
                epsilon: eps,
                ratio_d: tot(0) / eps,
                ratio_e: tot(1) / eps,
                ratio_d_nocorr: tot(2),
                ratio_e_nocorr: tot(3),
            })
        })
        .collect()
}
