//! Fibre resolvent problems and the two-scale expansion `u = c_θ + iεu⁽¹⁾ + ε²R + z`.
//!
//! Every solve runs per coupled group of modes. The remainder problem carries the term
//! `ε²⟨∇Φ_u, ∇Φ_v⟩` through an auxiliary potential unknown, which keeps the system sparse in
//! structure and Hermitian:
//!
//! ```text
//! [ S + ε²MᴴM   ε GD    0  ] [x]   [h]
//! [ ε DᴴG       −L      Bᴴ ] [φ] = [0]
//! [ 0           B       0  ] [λ]   [0]
//! ```
//!
//! where `B` pins the gradient mean (zero-mode group only). Eliminating `(φ, λ)` returns
//! `S x + ε²MᴴM x + ε² G P x = h` with `P` the projection onto zero-mean quasi-gradients.

use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cell::{apply_full_corrector, solve_a_theta, CellCorrector, HomogenisedTensor, ThetaCorrector};
use crate::error::{Error, Result};
use crate::galerkin::{gather, scatter, Discretisation};
use crate::linalg::{adjoint, dot_h, form, norm, Factorization, Mat};
use crate::spectral::{cross_rc, norm_mu, CoefficientField, Quasimomentum, SpectralField};
use crate::C64;

/// Condition estimate above which a fibre system is rejected.
pub const MAX_CONDITION: f64 = 1e14;
/// Orthogonality defect of ℋ above which the corrector data are reported as inconsistent.
pub const H_DEFECT_FLAG: f64 = 1e-6;
/// Relative tolerance for `θ·∫F dμ = 0`.
pub const TRANSVERSE_TOL: f64 = 1e-10;

const ZERO: C64 = C64::new(0.0, 0.0);

/// Shared immutable inputs for fibre solves.
#[derive(Clone, Copy)]
pub struct FibreContext<'a> {
    /// Built with the coefficient, so that the coupling groups include the A-moments.
    pub disc: &'a Discretisation,
    pub a: &'a CoefficientField,
    pub corrector: &'a CellCorrector,
    pub ahom: &'a HomogenisedTensor,
}

/// Right-hand side of a fibre problem, held through its pairings with the basis.
#[derive(Clone, Debug)]
pub struct FibreRhs {
    /// `⟨F, e_l e_a⟩_μ`, mode-major over the cube.
    pub pairing: Vec<C64>,
    pub mean: [C64; 3],
    pub norm_sq: f64,
}

impl FibreRhs {
    /// Pairings of a field on the discretisation cube.
    pub fn from_field(disc: &Discretisation, f: &SpectralField) -> Result<Self> {
        if f.cube() != disc.cube() || f.ncomp() != 3 {
            return Err(Error::InvalidInput("right-hand side must be a vector field on the fibre cube".into()));
        }
        let mut pairing = vec![ZERO; f.coeffs().len()];
        for comp in disc.components() {
            let x = gather(f.coeffs(), comp, 3);
            scatter(&mut pairing, comp, 3, &disc.mass(comp).dot(&x));
        }
        let mu = disc.measure();
        let m = mu.mean(f.cube(), f.coeffs(), 3);
        Ok(FibreRhs { pairing, mean: [m[0], m[1], m[2]], norm_sq: mu.norm_sq(f.cube(), f.coeffs(), 3) })
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq.max(0.0).sqrt()
    }
}

/// Quasimomentum plus right-hand side.
#[derive(Clone, Debug)]
pub struct FibreProblem {
    pub q: Quasimomentum,
    pub rhs: FibreRhs,
}

#[derive(Clone, Debug)]
pub struct FibreSolution {
    pub u: SpectralField,
    /// Largest Cholesky condition estimate over the coupling groups.
    pub cond_estimate: f64,
    /// `|ε⁻²⟨A curl, curl⟩ + ‖u‖² − ⟨F, u⟩|` relative to the left side.
    pub energy_defect: f64,
    /// Relative residual of the Galerkin system.
    pub residual: f64,
}

/// `(𝔄 + I)c = f` with `𝔄c = (θ×)ᴴA^hom(θ×c)`.
pub fn solve_homogenised_c(theta: [f64; 3], f_mean: [C64; 3], ahom: &HomogenisedTensor) -> Result<[C64; 3]> {
    let tn = vnorm_r(theta);
    let fnorm = vnorm(f_mean);
    let tf: C64 = (0..3).map(|i| f_mean[i] * theta[i]).sum();
    if tf.norm() > TRANSVERSE_TOL * (tn * fnorm).max(f64::MIN_POSITIVE) && tf.norm() > 0.0 {
        return Err(Error::InvalidInput(format!("θ·∫F = {:e} is not zero", tf.norm())));
    }
    // m = [θ]×ᵀ A [θ]× + I
    let t = skew(theta);
    let a = ahom.a_hom;
    let mut m = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut v = if i == j { 1.0 } else { 0.0 };
            for p in 0..3 {
                for q in 0..3 {
                    v += t[p][i] * a[p][q] * t[q][j];
                }
            }
            m[i][j] = v;
        }
    }
    Ok(solve3(&m, f_mean))
}

fn solve3(m: &[[f64; 3]; 3], b: [C64; 3]) -> [C64; 3] {
    // Cramer's rule on the real matrix, applied to real and imaginary parts together
    let det = det3(m);
    std::array::from_fn(|k| {
        let (mut re, mut im) = (*m, *m);
        for r in 0..3 {
            re[r][k] = b[r].re;
            im[r][k] = b[r].im;
        }
        C64::new(det3(&re) / det, det3(&im) / det)
    })
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn skew(k: [f64; 3]) -> [[f64; 3]; 3] {
    [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]]
}

fn vnorm(v: [C64; 3]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn vnorm_r(v: [f64; 3]) -> f64 {
    v.iter().map(|z| z * z).sum::<f64>().sqrt()
}

struct Block {
    s: Mat,
    g: Mat,
    curl: Mat,
    grad: Mat,
    /// `DᴴG`, n × 3n.
    grad_pairing: Mat,
    lap: Factorization,
    /// zero-mode group only: vector mean rows `M` and gradient mean rows `B`
    means: Option<(Mat, Mat)>,
}

/// Per-quasimomentum blocks shared by every solve at that quasimomentum.
pub struct FibreWorkspace<'a> {
    ctx: FibreContext<'a>,
    q: Quasimomentum,
    blocks: Vec<Block>,
}

/// Output of the remainder-type solves.
#[derive(Clone, Debug)]
pub struct RemainderSolution {
    pub field: SpectralField,
    /// `∇Φ` of the solution, recovered from the auxiliary potential.
    pub gradient: SpectralField,
    pub mean: [C64; 3],
    /// `(Kx)` assembled as a field.
    pub curl: SpectralField,
    pub residual: f64,
    /// Size of the right-hand side on the kernel of the form, relative to the supplied scale.
    pub kernel_defect: f64,
}

/// ℋ as pairings, with its orthogonality defects relative to `‖F‖_μ`.
#[derive(Clone, Debug)]
pub struct HFunctional {
    pub pairing: Vec<C64>,
    pub const_defect: f64,
    pub grad_defect: f64,
}

impl<'a> FibreWorkspace<'a> {
    pub fn new(ctx: FibreContext<'a>, q: Quasimomentum) -> Result<Self> {
        if !ctx.disc.has_coefficient() {
            return Err(Error::InvalidInput("fibre discretisation must carry the coefficient".into()));
        }
        let disc = ctx.disc;
        let kappa = q.kappa;
        let mut blocks = Vec::with_capacity(disc.components().len());
        for (ci, comp) in disc.components().iter().enumerate() {
            let means = (ci == disc.zero_component())
                .then(|| (disc.vector_mean_rows(comp), disc.gradient_mean_rows(comp, kappa)));
            blocks.push(Block {
                s: disc.stiffness(comp, kappa),
                g: disc.mass(comp),
                curl: disc.curl(comp, kappa),
                grad: disc.grad(comp, kappa),
                grad_pairing: disc.grad_pairing(comp, kappa),
                lap: Factorization::positive(disc.laplace(comp, kappa))?,
                means,
            });
        }
        Ok(FibreWorkspace { ctx, q, blocks })
    }

    pub fn quasimomentum(&self) -> &Quasimomentum {
        &self.q
    }

    pub fn context(&self) -> FibreContext<'a> {
        self.ctx
    }

    pub fn cube(&self) -> &crate::FrequencyCube {
        self.ctx.disc.cube()
    }

    fn comps(&self) -> &[Vec<usize>] {
        self.ctx.disc.components()
    }

    /// `F − Π F`, with Π the μ-orthogonal projection onto all quasi-gradients.
    pub fn project_solenoidal(&self, f: &SpectralField) -> SpectralField {
        let mut out = f.clone();
        for (comp, blk) in self.comps().iter().zip(&self.blocks) {
            let x = gather(f.coeffs(), comp, 3);
            let y = blk.lap.solve(&blk.grad_pairing.dot(&x));
            scatter(out.coeffs_mut(), comp, 3, &(&x - &blk.grad.dot(&y)));
        }
        out
    }

    /// `sup_φ |⟨h, ∇φ⟩| / ‖∇φ‖_μ` for a functional given by pairings.
    fn gradient_dual_norm(&self, h: &[C64]) -> f64 {
        let mut sq = 0.0;
        for (comp, blk) in self.comps().iter().zip(&self.blocks) {
            let hv = gather(h, comp, 3);
            let r = adjoint(&blk.grad).dot(&hv);
            let y = blk.lap.solve(&r);
            sq += dot_h(&y, &r).re.max(0.0);
        }
        sq.sqrt()
    }

    /// `ε⁻²S_A x + G x = p`.
    pub fn solve_fibre(&self, rhs: &FibreRhs) -> Result<FibreSolution> {
        let groups = self.comps().iter().zip(&self.blocks).map(|(comp, blk)| (comp.as_slice(), &blk.s, &blk.g));
        solve_groups(self.cube(), self.q.epsilon, rhs, groups)
    }

    /// Removes the quasi-gradient part of a right-hand side known only through its pairings.
    pub fn project_pairings(&self, rhs: &FibreRhs) -> FibreRhs {
        let mut pairing = rhs.pairing.clone();
        let mut mean = rhs.mean;
        let mut removed = 0.0;
        for (comp, blk) in self.comps().iter().zip(&self.blocks) {
            let pv = gather(&rhs.pairing, comp, 3);
            let r = adjoint(&blk.grad).dot(&pv);
            if r.iter().all(|z| *z == ZERO) {
                continue;
            }
            let y = blk.lap.solve(&r);
            let dy = blk.grad.dot(&y);
            scatter(&mut pairing, comp, 3, &(&pv - &blk.g.dot(&dy)));
            removed += dot_h(&y, &r).re.max(0.0);
            if let Some((mrows, _)) = &blk.means {
                let mv = mrows.dot(&dy);
                for a in 0..3 {
                    mean[a] -= mv[a];
                }
            }
        }
        FibreRhs { pairing, mean, norm_sq: (rhs.norm_sq - removed).max(0.0) }
    }

    /// `ℋ = F − ε⁻²curl A curl c − iε⁻¹ curl A curl u⁽¹⁾ − c`, tested against the basis.
    pub fn assemble_h(&self, rhs: &FibreRhs, c: [C64; 3], u1: &SpectralField) -> HFunctional {
        let eps = self.q.epsilon;
        let z = self.cube().zero_index();
        let mut cfield = SpectralField::zeros(self.cube(), 3);
        cfield.set_vec(z, c);
        let mut h = rhs.pairing.clone();
        for (comp, blk) in self.comps().iter().zip(&self.blocks) {
            let xc = gather(cfield.coeffs(), comp, 3);
            let x1 = gather(u1.coeffs(), comp, 3);
            let mut hv = gather(&h, comp, 3);
            if xc.iter().any(|v| *v != ZERO) {
                hv = hv - blk.s.dot(&xc) * C64::new(1.0 / (eps * eps), 0.0) - blk.g.dot(&xc);
            }
            if x1.iter().any(|v| *v != ZERO) {
                hv = hv - blk.s.dot(&x1) * C64::new(0.0, 1.0 / eps);
            }
            scatter(&mut h, comp, 3, &hv);
        }
        let fnorm = rhs.norm().max(f64::MIN_POSITIVE);
        let const_defect = (0..3).map(|a| h[3 * z + a].norm_sqr()).sum::<f64>().sqrt() / fnorm;
        let grad_defect = self.gradient_dual_norm(&h) / fnorm;
        HFunctional { pairing: h, const_defect, grad_defect }
    }

    /// Remainder-form solve `b(x, φ) = ⟨h, φ⟩`.
    ///
    /// At κ = 0, when some periodic gradient has nonzero mean, the form has a kernel spanned by
    /// `Π_V e_a − ∫Π_V e_a`. The right-hand side is then projected off that kernel (the removed
    /// part is reported as `kernel_defect`, relative to `scale`) and the solution is taken
    /// μ-orthogonal to it.
    pub fn solve_remainder(&self, h: &[C64], scale: f64) -> Result<RemainderSolution> {
        let eps = self.q.epsilon;
        let eps2 = eps * eps;
        let cube = self.cube().clone();
        let mut field = SpectralField::zeros(&cube, 3);
        let mut gradient = SpectralField::zeros(&cube, 3);
        let mut curl = SpectralField::zeros(&cube, 3);
        let mut mean = [ZERO; 3];
        let (mut res_sq, mut h_sq) = (0.0, 0.0);
        let mut kernel_defect = 0.0;
        for (ci, (comp, blk)) in self.comps().iter().zip(&self.blocks).enumerate() {
            let mut hv = gather(h, comp, 3);
            let kernel =
                if ci == self.ctx.disc.zero_component() && self.q.kappa == [0.0; 3] { self.kernel_basis(blk) } else { None };
            if let Some(x) = &kernel {
                let coef = adjoint(x).dot(&hv);
                kernel_defect = norm(&coef) / scale.max(f64::MIN_POSITIVE);
                hv = hv - blk.g.dot(&x.dot(&coef));
            }
            if hv.iter().all(|z| *z == ZERO) {
                continue;
            }
            let n3 = blk.s.nrows();
            let n = blk.grad_pairing.nrows();
            let nm = if blk.means.is_some() { 3 } else { 0 };
            let dim = n3 + n + nm;
            let mut m = Array2::<C64>::zeros((dim, dim));
            let mut tl = blk.s.clone();
            if let Some((mrows, brows)) = &blk.means {
                tl = tl + adjoint(mrows).dot(mrows) * C64::new(eps2, 0.0);
                m.slice_mut(s![n3 + n.., n3..n3 + n]).assign(brows);
                m.slice_mut(s![n3..n3 + n, n3 + n..]).assign(&adjoint(brows));
            }
            m.slice_mut(s![..n3, ..n3]).assign(&tl);
            let gp = &blk.grad_pairing * C64::new(eps, 0.0);
            m.slice_mut(s![..n3, n3..n3 + n]).assign(&adjoint(&gp));
            m.slice_mut(s![n3..n3 + n, ..n3]).assign(&gp);
            // −L, with L = DᴴGD recovered from the Cholesky block's matrix
            m.slice_mut(s![n3..n3 + n, n3..n3 + n]).assign(&(blk.lap.matrix() * C64::new(-1.0, 0.0)));
            let mut rhs = Array1::zeros(dim);
            rhs.slice_mut(s![..n3]).assign(&hv);
            let f = Factorization::saddle(m, n3)?;
            let y = f.solve(&rhs);
            res_sq += norm(&(f.matrix().dot(&y) - &rhs)).powi(2);
            h_sq += norm(&hv).powi(2);
            let mut x = y.slice(s![..n3]).to_owned();
            if let Some(k) = &kernel {
                let coef = adjoint(k).dot(&blk.g.dot(&x));
                x = x - k.dot(&coef);
            }
            let phi = y.slice(s![n3..n3 + n]).to_owned() * C64::new(1.0 / eps, 0.0);
            scatter(field.coeffs_mut(), comp, 3, &x);
            scatter(gradient.coeffs_mut(), comp, 3, &blk.grad.dot(&phi));
            scatter(curl.coeffs_mut(), comp, 3, &blk.curl.dot(&x));
            if let Some((mrows, _)) = &blk.means {
                let mv = mrows.dot(&x);
                mean = [mv[0], mv[1], mv[2]];
            }
        }
        let residual = if h_sq > 0.0 { (res_sq / h_sq).sqrt() } else { 0.0 };
        Ok(RemainderSolution { field, gradient, mean, curl, residual, kernel_defect })
    }

    /// μ-orthonormal columns spanning `{Π_V c − ∫Π_V c}`, or `None` if that span is trivial.
    fn kernel_basis(&self, blk: &Block) -> Option<Mat> {
        let (mrows, _) = blk.means.as_ref()?;
        let pos = self.ctx.disc.zero_position();
        let n3 = blk.s.nrows();
        let mut x = Array2::<C64>::zeros((n3, 3));
        for a in 0..3 {
            let col = blk.grad_pairing.column(3 * pos + a).to_owned();
            if col.iter().all(|z| *z == ZERO) {
                continue;
            }
            let mut v = blk.grad.dot(&blk.lap.solve(&col));
            let m = mrows.dot(&v);
            for b in 0..3 {
                v[3 * pos + b] -= m[b];
            }
            x.column_mut(a).assign(&v);
        }
        let gram = adjoint(&x).dot(&blk.g.dot(&x));
        let (ev, vecs) = crate::linalg::hermitian_eigh(&gram).ok()?;
        let keep: Vec<usize> = (0..3).filter(|&k| ev[k] > 1e-10).collect();
        if keep.is_empty() {
            return None;
        }
        let mut out = Array2::<C64>::zeros((n3, keep.len()));
        for (j, &k) in keep.iter().enumerate() {
            let col = x.dot(&vecs.column(k)) * C64::new(1.0 / ev[k].sqrt(), 0.0);
            out.column_mut(j).assign(&col);
        }
        Some(out)
    }

    /// Right-hand side `curl(e_κ A(θ×u⁽¹⁾))` of the auxiliary problem, as pairings.
    pub fn xi_rhs(&self, u1: &SpectralField) -> Vec<C64> {
        let theta = self.q.theta;
        let mut w = SpectralField::zeros(self.cube(), 3);
        for i in 0..self.cube().len() {
            w.set_vec(i, cross_rc(theta, u1.vec_at(i)));
        }
        let mut out = vec![ZERO; w.coeffs().len()];
        for (comp, blk) in self.comps().iter().zip(&self.blocks) {
            let wv = gather(w.coeffs(), comp, 3);
            if wv.iter().all(|z| *z == ZERO) {
                continue;
            }
            let ga = self.ctx.disc.coeff_mass(comp);
            scatter(&mut out, comp, 3, &adjoint(&blk.curl).dot(&ga.dot(&wv)));
        }
        out
    }
}

/// One fibre solve with its full expansion.
pub fn solve_fibre(ctx: FibreContext, p: &FibreProblem) -> Result<FibreSolution> {
    FibreWorkspace::new(ctx, p.q)?.solve_fibre(&p.rhs)
}

pub fn assemble_h(ctx: FibreContext, p: &FibreProblem, c: [C64; 3], u1: &SpectralField) -> Result<HFunctional> {
    Ok(FibreWorkspace::new(ctx, p.q)?.assemble_h(&p.rhs, c, u1))
}

pub fn solve_r(ctx: FibreContext, p: &FibreProblem, h: &HFunctional) -> Result<RemainderSolution> {
    FibreWorkspace::new(ctx, p.q)?.solve_remainder(&h.pairing, p.rhs.norm())
}

pub fn solve_xi(ctx: FibreContext, p: &FibreProblem, u1: &SpectralField) -> Result<RemainderSolution> {
    let ws = FibreWorkspace::new(ctx, p.q)?;
    let rhs = ws.xi_rhs(u1);
    ws.solve_remainder(&rhs, p.rhs.norm())
}

/// `ε⁻²S x + G x = p` for the coefficient carried by `disc`, which need not have a cell corrector.
pub fn solve_fibre_plain(disc: &Discretisation, q: &Quasimomentum, rhs: &FibreRhs) -> Result<FibreSolution> {
    if !disc.has_coefficient() {
        return Err(Error::InvalidInput("fibre discretisation must carry the coefficient".into()));
    }
    let mats: Vec<(Mat, Mat)> =
        disc.components().iter().map(|comp| (disc.stiffness(comp, q.kappa), disc.mass(comp))).collect();
    let groups = disc.components().iter().zip(&mats).map(|(comp, (s, g))| (comp.as_slice(), s, g));
    solve_groups(disc.cube(), q.epsilon, rhs, groups)
}

fn solve_groups<'m>(
    cube: &crate::FrequencyCube,
    eps: f64,
    rhs: &FibreRhs,
    groups: impl Iterator<Item = (&'m [usize], &'m Mat, &'m Mat)>,
) -> Result<FibreSolution> {
    let eps2 = eps * eps;
    let mut u = SpectralField::zeros(cube, 3);
    let mut cond = 1.0f64;
    let (mut lhs_energy, mut rhs_energy) = (0.0f64, ZERO);
    let (mut res_sq, mut p_sq) = (0.0, 0.0);
    for (comp, s, g) in groups {
        let p = gather(&rhs.pairing, comp, 3);
        if p.iter().all(|z| *z == ZERO) {
            continue;
        }
        let f = Factorization::positive(s + &(g * C64::new(eps2, 0.0)))?;
        let c = f.cond_estimate().unwrap_or(1.0);
        if c > MAX_CONDITION {
            return Err(Error::IllPosed { what: "fibre system condition estimate".into(), value: c });
        }
        cond = cond.max(c);
        let x = f.solve(&(&p * C64::new(eps2, 0.0)));
        let r = f.matrix().dot(&x) - &p * C64::new(eps2, 0.0);
        res_sq += norm(&r).powi(2);
        p_sq += (eps2 * norm(&p)).powi(2);
        lhs_energy += form(s, &x, &x).re / eps2 + form(g, &x, &x).re;
        rhs_energy += dot_h(&x, &p);
        scatter(u.coeffs_mut(), comp, 3, &x);
    }
    let energy_defect =
        if lhs_energy > 0.0 { (C64::new(lhs_energy, 0.0) - rhs_energy).norm() / lhs_energy } else { 0.0 };
    let residual = if p_sq > 0.0 { (res_sq / p_sq).sqrt() } else { 0.0 };
    Ok(FibreSolution { u, cond_estimate: cond, energy_defect, residual })
}

/// Norms of one fibre expansion; ratios are divided by `‖F‖_μ` and the stated powers of ε.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct ExpansionRatios {
    /// `‖u − c_θ‖/‖F‖`.
    pub err_main: f64,
    /// `‖z‖/(ε‖F‖)`.
    pub err_z: f64,
    /// `‖R̃‖/‖F‖`.
    pub ratio_r1: f64,
    /// `ε‖∫R + ∇Φ_R‖/‖F‖`.
    pub ratio_r2: f64,
    /// `‖curl(e_κR)‖/‖F‖`.
    pub ratio_curl_r: f64,
    /// `‖curl(e_κξ)‖/‖F‖`.
    pub ratio_xi: f64,
    pub cond_estimate: f64,
    pub h_const_defect: f64,
    pub h_grad_defect: f64,
    pub kernel_defect: f64,
    pub energy_defect: f64,
    pub fibre_residual: f64,
    pub remainder_residual: f64,
    /// `|θ·c_θ| / (|θ||c_θ|)`.
    pub transversality: f64,
}

#[derive(Clone, Debug)]
pub struct ExpansionReport {
    pub q: Quasimomentum,
    pub c_theta: [C64; 3],
    pub theta_corrector: ThetaCorrector,
    pub u1: SpectralField,
    pub r: RemainderSolution,
    pub xi: RemainderSolution,
    pub z: SpectralField,
    pub u: SpectralField,
    pub f_norm: f64,
    pub ratios: ExpansionRatios,
}

impl ExpansionReport {
    /// `‖u − c‖`, `‖z‖`, `‖R̃‖`, `‖∫R + ∇Φ_R‖`, `‖curl R‖`, `‖curl ξ‖`, `‖F‖`, all in `L²(μ)`.
    pub fn norms(&self, ctx: FibreContext) -> Vec<(&'static str, f64)> {
        let mu = ctx.disc.measure();
        let cube = self.u.cube();
        let mut c = SpectralField::zeros(cube, 3);
        c.set_vec(cube.zero_index(), self.c_theta);
        let mut mg = self.r.gradient.clone();
        let z = cube.zero_index();
        for a in 0..3 {
            mg.coeffs_mut()[3 * z + a] += self.r.mean[a];
        }
        vec![
            ("u_minus_c", norm_mu(&self.u.sub(&c), mu)),
            ("z", norm_mu(&self.z, mu)),
            ("r_tilde", norm_mu(&self.r.field.sub(&mg), mu)),
            ("r_mean_plus_grad", norm_mu(&mg, mu)),
            ("curl_r", norm_mu(&self.r.curl, mu)),
            ("curl_xi", norm_mu(&self.xi.curl, mu)),
            ("f", self.f_norm),
        ]
    }
}

/// Full expansion for one fibre problem on a prepared workspace.
pub fn expansion_on(ws: &FibreWorkspace, rhs: &FibreRhs) -> Result<ExpansionReport> {
    let ctx = ws.ctx;
    let q = ws.q;
    let mu = ctx.disc.measure();
    let cube = ctx.disc.cube();
    let eps = q.epsilon;
    let c = solve_homogenised_c(q.theta, rhs.mean, ctx.ahom)?;
    let th = solve_a_theta(q.theta, ctx.corrector)?;
    let u1 = apply_full_corrector(ctx.corrector, &th, cross_rc(q.theta, c));
    let sol = ws.solve_fibre(rhs)?;
    let h = ws.assemble_h(rhs, c, &u1);
    let fnorm = rhs.norm();
    let r = ws.solve_remainder(&h.pairing, fnorm)?;
    let xi = ws.solve_remainder(&ws.xi_rhs(&u1), fnorm)?;

    let z0 = cube.zero_index();
    let mut expansion = r.field.scale(C64::new(eps * eps, 0.0));
    expansion.axpy(C64::new(0.0, eps), &u1);
    let mut c_field = SpectralField::zeros(cube, 3);
    c_field.set_vec(z0, c);
    let expansion = expansion.add(&c_field);
    let z = sol.u.sub(&expansion);

    let f = fnorm.max(f64::MIN_POSITIVE);
    let mut mg = r.gradient.clone();
    for a in 0..3 {
        mg.coeffs_mut()[3 * z0 + a] += r.mean[a];
    }
    let tn = vnorm_r(q.theta) * vnorm(c);
    let tc: C64 = (0..3).map(|i| c[i] * q.theta[i]).sum();
    let ratios = ExpansionRatios {
        err_main: norm_mu(&sol.u.sub(&c_field), mu) / f,
        err_z: norm_mu(&z, mu) / (eps * f),
        ratio_r1: norm_mu(&r.field.sub(&mg), mu) / f,
        ratio_r2: eps * norm_mu(&mg, mu) / f,
        ratio_curl_r: norm_mu(&r.curl, mu) / f,
        ratio_xi: norm_mu(&xi.curl, mu) / f,
        cond_estimate: sol.cond_estimate,
        h_const_defect: h.const_defect,
        h_grad_defect: h.grad_defect,
        kernel_defect: r.kernel_defect,
        energy_defect: sol.energy_defect,
        fibre_residual: sol.residual,
        remainder_residual: r.residual.max(xi.residual),
        transversality: if tn > 0.0 { tc.norm() / tn } else { 0.0 },
    };
    Ok(ExpansionReport { q, c_theta: c, theta_corrector: th, u1, r, xi, z, u: sol.u, f_norm: fnorm, ratios })
}

pub fn build_expansion(ctx: FibreContext, p: &FibreProblem) -> Result<ExpansionReport> {
    expansion_on(&FibreWorkspace::new(ctx, p.q)?, &p.rhs)
}

/// θ-points used per ε.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThetaGrid {
    /// `{−π + 2πj/(r−1)}³`, the same for every ε (contained in `ε⁻¹Q′` for ε ≤ 1).
    Fixed { resolution: usize },
    /// `ε⁻¹{−π + 2πj/(r−1)}³`, reaching the boundary of `ε⁻¹Q′`.
    Scaled { resolution: usize },
    Explicit { points: Vec<[f64; 3]> },
}

impl ThetaGrid {
    pub fn points(&self, epsilon: f64) -> Result<Vec<[f64; 3]>> {
        let cube = |r: usize, scale: f64| -> Result<Vec<[f64; 3]>> {
            if r < 2 {
                return Err(Error::InvalidInput(format!("θ-grid resolution {r} must be at least 2")));
            }
            Ok(crate::poincare::kappa_grid(r).into_iter().map(|k| k.map(|x| x * scale)).collect())
        };
        match self {
            ThetaGrid::Fixed { resolution } => cube(*resolution, 1.0),
            ThetaGrid::Scaled { resolution } => cube(*resolution, 1.0 / epsilon),
            ThetaGrid::Explicit { points } => Ok(points.clone()),
        }
    }
}

/// Seeded band-limited right-hand sides, projected off every quasi-gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FGenerator {
    pub seed: u64,
    /// Largest `|l|_∞` carrying a nonzero coefficient.
    pub bandwidth: usize,
}

impl FGenerator {
    /// Raw coefficients for θ-index `index`, Gaussian with decay `1/(1+|l|²)`.
    pub fn raw(&self, cube: &crate::FrequencyCube, index: u64) -> SpectralField {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut f = SpectralField::zeros(cube, 3);
        for i in 0..cube.len() {
            let l = cube.mode(i);
            let inside = l.iter().all(|x| x.unsigned_abs() as usize <= self.bandwidth);
            let w = 1.0 / (1.0 + (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]) as f64);
            let v: [C64; 3] = std::array::from_fn(|_| {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                C64::new(re, im) * w
            });
            if inside {
                f.set_vec(i, v);
            }
        }
        f
    }

    /// Solenoidal right-hand side at the workspace quasimomentum.
    pub fn generate(&self, ws: &FibreWorkspace, index: u64) -> Result<FibreRhs> {
        let f = ws.project_solenoidal(&self.raw(ws.cube(), index));
        FibreRhs::from_field(ws.ctx.disc, &f)
    }
}

/// One row of a sweep.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct SweepRow {
    pub epsilon: f64,
    pub theta: [f64; 3],
    pub ratios: ExpansionRatios,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpsilonSummary {
    pub epsilon: f64,
    pub sup_err_main: f64,
    pub max_err_z: f64,
    pub max_ratio_r1: f64,
    pub max_ratio_r2: f64,
    pub max_ratio_curl_r: f64,
    pub max_ratio_xi: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub rows: Vec<SweepRow>,
    pub per_epsilon: Vec<EpsilonSummary>,
    /// Least-squares slope of `log sup err_main` against `log ε`; `None` when the errors vanish.
    pub slope: Option<f64>,
    pub exact: bool,
    pub max_h_defect: f64,
    pub failures: Vec<String>,
}

/// Sup-error magnitude below which a sweep is reported as exact.
pub const EXACT_TOL: f64 = 1e-12;

/// Lattice points `(ε, θ-index, θ)` in ε-major order.
pub fn lattice(epsilons: &[f64], grid: &ThetaGrid) -> Result<Vec<(f64, usize, [f64; 3])>> {
    let mut out = Vec::new();
    for &e in epsilons {
        for (j, t) in grid.points(e)?.into_iter().enumerate() {
            out.push((e, j, t));
        }
    }
    Ok(out)
}

/// Runs `visit` on the expansion at every lattice point; results keep lattice order.
pub fn sweep_with<T, V>(
    ctx: FibreContext,
    epsilons: &[f64],
    grid: &ThetaGrid,
    fgen: &FGenerator,
    workers: usize,
    visit: V,
) -> Result<Vec<std::result::Result<(SweepRow, T), String>>>
where
    T: Send,
    V: Fn(&FibreWorkspace, &FibreRhs, &ExpansionReport) -> T + Sync,
{
    let points = lattice(epsilons, grid)?;
    Ok(crate::pool::map_indexed(&points, workers, |_, &(e, j, theta)| {
        let run = || -> Result<(SweepRow, T)> {
            let q = Quasimomentum::new(e, theta)?;
            let ws = FibreWorkspace::new(ctx, q)?;
            let rhs = fgen.generate(&ws, j as u64)?;
            let rep = expansion_on(&ws, &rhs)?;
            let extra = visit(&ws, &rhs, &rep);
            Ok((SweepRow { epsilon: e, theta, ratios: rep.ratios }, extra))
        };
        run().map_err(|err| format!("epsilon={e} theta={theta:?}: {err}"))
    }))
}

pub fn sweep(
    ctx: FibreContext,
    epsilons: &[f64],
    grid: &ThetaGrid,
    fgen: &FGenerator,
    workers: usize,
) -> Result<ConvergenceReport> {
    let results = sweep_with(ctx, epsilons, grid, fgen, workers, |_, _, _| ())?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok((row, ())) => rows.push(row),
            Err(e) => failures.push(e),
        }
    }
    Ok(summarise(epsilons, rows, failures))
}

/// Per-ε maxima and the fitted slope.
pub fn summarise(epsilons: &[f64], rows: Vec<SweepRow>, failures: Vec<String>) -> ConvergenceReport {
    let per_epsilon: Vec<EpsilonSummary> = epsilons
        .iter()
        .map(|&e| {
            let max = |f: fn(&ExpansionRatios) -> f64| {
                rows.iter().filter(|r| r.epsilon == e).map(|r| f(&r.ratios)).fold(0.0, f64::max)
            };
            EpsilonSummary {
                epsilon: e,
                sup_err_main: max(|r| r.err_main),
                max_err_z: max(|r| r.err_z),
                max_ratio_r1: max(|r| r.ratio_r1),
                max_ratio_r2: max(|r| r.ratio_r2),
                max_ratio_curl_r: max(|r| r.ratio_curl_r),
                max_ratio_xi: max(|r| r.ratio_xi),
            }
        })
        .collect();
    let exact = per_epsilon.iter().all(|s| s.sup_err_main <= EXACT_TOL);
    let slope = if exact {
        None
    } else {
        let pts: Vec<(f64, f64)> = per_epsilon
            .iter()
            .filter(|s| s.sup_err_main > 0.0)
            .map(|s| (s.epsilon.ln(), s.sup_err_main.ln()))
            .collect();
        fit_slope(&pts)
    };
    let max_h_defect =
        rows.iter().map(|r| r.ratios.h_const_defect.max(r.ratios.h_grad_defect)).fold(0.0, f64::max);
    ConvergenceReport { rows, per_epsilon, slope, exact, max_h_defect, failures }
}

/// Least-squares slope through `(x, y)` pairs; `None` for fewer than two distinct abscissae.
pub fn fit_slope(pts: &[(f64, f64)]) -> Option<f64> {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// `θ·∫F dμ` relative to `|θ|‖F‖`; zero at θ = 0.
pub fn transverse_defect(theta: [f64; 3], rhs: &FibreRhs) -> f64 {
    let t: C64 = (0..3).map(|i| rhs.mean[i] * theta[i]).sum();
    let s = vnorm_r(theta) * rhs.norm();
    if s > 0.0 {
        t.norm() / s
    } else {
        0.0
    }
}
