//! Discrete ε-Floquet transform on finite lattices of cell profiles, and the whole-space
//! comparison assembled from fibre solves.
//!
//! A physical field on `εℝ³` is held through its cell profiles `s_n(y) = u(ε(n + y))`,
//! `y ∈ Q = [0,1)³`. The transform at `κ = εθ` is
//!
//! ```text
//! b_θ(y) = ε³ (2π)^{−3/2} Σ_n s_n(y) e^{−iκ·n}
//! ```
//!
//! and the periodic amplitude is `e^{−iκ·y} b_θ(y)`. On the dual grid `θ_j = 2πj/(εM)` with
//! `M ≥ 2N + 1` the inverse is an exact discrete Fourier sum, so round trips and Parseval hold to
//! rounding.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cell::HomogenisedTensor;
use crate::error::{Error, Result};
use crate::galerkin::Discretisation;
use crate::measure::{MomentTable, PeriodicMeasure};
use crate::resolvent::{
    solve_fibre_plain, solve_homogenised_c, FGenerator, FibreContext, FibreRhs, FibreWorkspace,
};
use crate::spectral::{norm_mu, CoefficientField, FrequencyCube, Quasimomentum, SpectralField};
use crate::C64;

const ZERO: C64 = C64::new(0.0, 0.0);

/// Cell profiles of a field supported in the cells `n ∈ {−N..N}³`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeSample {
    pub epsilon: f64,
    pub n_range: usize,
    /// One vector field per cell, ordered with the last axis fastest.
    pub cells: Vec<SpectralField>,
}

impl LatticeSample {
    pub fn new(epsilon: f64, n_range: usize, cells: Vec<SpectralField>) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidInput(format!("epsilon {epsilon} must be positive")));
        }
        let side = 2 * n_range + 1;
        if cells.len() != side.pow(3) {
            return Err(Error::InvalidInput(format!("expected {} cell profiles, got {}", side.pow(3), cells.len())));
        }
        let cube = cells[0].cube().clone();
        if cells.iter().any(|c| c.ncomp() != 3 || *c.cube() != cube) {
            return Err(Error::InvalidInput("cell profiles must be vector fields on one cube".into()));
        }
        Ok(LatticeSample { epsilon, n_range, cells })
    }

    pub fn zeros(epsilon: f64, n_range: usize, cube: &FrequencyCube) -> Self {
        let side = 2 * n_range + 1;
        LatticeSample { epsilon, n_range, cells: vec![SpectralField::zeros(cube, 3); side.pow(3)] }
    }

    /// Gaussian coefficients in every cell.
    pub fn random(epsilon: f64, n_range: usize, cube: &FrequencyCube, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = Self::zeros(epsilon, n_range, cube);
        for cell in &mut s.cells {
            for z in cell.coeffs_mut() {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                *z = C64::new(re, im);
            }
        }
        s
    }

    pub fn cube(&self) -> &FrequencyCube {
        self.cells[0].cube()
    }

    pub fn cell_offsets(&self) -> Vec<[i64; 3]> {
        let n = self.n_range as i64;
        let mut out = Vec::with_capacity(self.cells.len());
        for a in -n..=n {
            for b in -n..=n {
                for c in -n..=n {
                    out.push([a, b, c]);
                }
            }
        }
        out
    }

    pub fn cell_index(&self, n: [i64; 3]) -> Option<usize> {
        let r = self.n_range as i64;
        if n.iter().any(|x| x.abs() > r) {
            return None;
        }
        let side = 2 * r + 1;
        Some((((n[0] + r) * side + n[1] + r) * side + n[2] + r) as usize)
    }

    pub fn cell(&self, n: [i64; 3]) -> Option<&SpectralField> {
        self.cell_index(n).map(|i| &self.cells[i])
    }

    pub fn cell_mut(&mut self, n: [i64; 3]) -> Option<&mut SpectralField> {
        self.cell_index(n).map(move |i| &mut self.cells[i])
    }

    /// `‖u‖²` in `L²(μ^ε)`, i.e. `ε³ Σ_n ‖s_n‖²_μ`.
    pub fn norm_sq(&self, mu: &PeriodicMeasure) -> f64 {
        let e3 = self.epsilon.powi(3);
        e3 * self.cells.iter().map(|c| norm_mu(c, mu).powi(2)).sum::<f64>()
    }

    /// Coefficient-space analogue of [`Self::norm_sq`].
    pub fn coeff_norm_sq(&self) -> f64 {
        self.epsilon.powi(3) * self.cells.iter().map(|c| c.coeff_norm().powi(2)).sum::<f64>()
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        Self::new(epsilon, self.n_range, self.cells.clone())
    }
}

/// One quadrature node in `ε⁻¹Q′`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FibreNode {
    pub theta: [f64; 3],
    pub weight: f64,
}

/// `θ_j = 2πj/(εM)` for `j ∈ {−⌊M/2⌋..⌈M/2⌉−1}³`; weights sum to `(2π/ε)³`.
pub fn dual_grid(epsilon: f64, resolution: usize) -> Vec<FibreNode> {
    let m = resolution as i64;
    let h = 2.0 * PI / (epsilon * resolution as f64);
    let js: Vec<f64> = (-(m / 2)..(m - m / 2)).map(|j| j as f64 * h).collect();
    let mut out = Vec::with_capacity(js.len().pow(3));
    for &a in &js {
        for &b in &js {
            for &c in &js {
                out.push(FibreNode { theta: [a, b, c], weight: h.powi(3) });
            }
        }
    }
    out
}

/// Transformed sample: per-node Bloch profiles `b_θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct FibreBundle {
    pub epsilon: f64,
    /// Cell range the inverse transform reconstructs.
    pub n_range: usize,
    pub resolution: usize,
    pub nodes: Vec<FibreNode>,
    pub bloch: Vec<SpectralField>,
}

impl FibreBundle {
    /// `Σ_j w_j ‖b_j‖²_μ`; equal to `‖e^{−iκ·y} b_j‖²` node by node.
    pub fn norm_sq(&self, mu: &PeriodicMeasure) -> f64 {
        self.nodes.iter().zip(&self.bloch).map(|(n, b)| n.weight * norm_mu(b, mu).powi(2)).sum()
    }

    pub fn coeff_norm_sq(&self) -> f64 {
        self.nodes.iter().zip(&self.bloch).map(|(n, b)| n.weight * b.coeff_norm().powi(2)).sum()
    }

    pub fn quasimomentum(&self, j: usize) -> Result<Quasimomentum> {
        Quasimomentum::new(self.epsilon, self.nodes[j].theta)
    }

    /// Pairings of the periodic amplitude at node `j` with the basis of `disc`.
    pub fn amplitude_rhs(&self, j: usize, disc: &Discretisation) -> Result<FibreRhs> {
        amplitude_rhs(&self.bloch[j], self.quasimomentum(j)?.kappa, disc)
    }
}

/// `⟨e^{−iκ·y} b, e_m e_a⟩_μ` over the cube of `disc`, using moments at real frequencies.
pub fn amplitude_rhs(b: &SpectralField, kappa: [f64; 3], disc: &Discretisation) -> Result<FibreRhs> {
    if b.ncomp() != 3 {
        return Err(Error::InvalidInput("amplitude must be a vector field".into()));
    }
    let mu = disc.measure();
    let cube = disc.cube();
    let shift = kappa.map(|k| k / (2.0 * PI));
    let table = MomentTable::from_fn(cube.cutoff() + b.cube().cutoff(), |d| {
        mu.moment_real([d[0] as f64 + shift[0], d[1] as f64 + shift[1], d[2] as f64 + shift[2]])
    });
    let mut pairing = vec![ZERO; 3 * cube.len()];
    for (i, m) in cube.modes().iter().enumerate() {
        for (k, l) in b.cube().modes().iter().enumerate() {
            let v = b.vec_at(k);
            if v == [ZERO; 3] {
                continue;
            }
            let w = table.get([m[0] - l[0], m[1] - l[1], m[2] - l[2]]);
            for a in 0..3 {
                pairing[3 * i + a] += v[a] * w;
            }
        }
    }
    let z = cube.zero_index();
    let mean = [pairing[3 * z], pairing[3 * z + 1], pairing[3 * z + 2]];
    Ok(FibreRhs { pairing, mean, norm_sq: norm_mu(b, mu).powi(2) })
}

/// Forward transform onto the dual grid of resolution `M` per axis.
pub fn floquet_forward(s: &LatticeSample, resolution: usize) -> Result<FibreBundle> {
    if resolution == 0 {
        return Err(Error::InvalidInput("dual grid resolution must be positive".into()));
    }
    let nodes = dual_grid(s.epsilon, resolution);
    let scale = s.epsilon.powi(3) / (2.0 * PI).powf(1.5);
    let offsets = s.cell_offsets();
    let bloch = nodes
        .iter()
        .map(|node| {
            let kappa = node.theta.map(|t| t * s.epsilon);
            let mut b = SpectralField::zeros(s.cube(), 3);
            for (n, cell) in offsets.iter().zip(&s.cells) {
                let ph = C64::from_polar(scale, -dot(kappa, *n));
                b.axpy(ph, cell);
            }
            b
        })
        .collect();
    Ok(FibreBundle { epsilon: s.epsilon, n_range: s.n_range, resolution, nodes, bloch })
}

/// `s_n = (2π)^{−3/2} Σ_j w_j b_j e^{iκ_j·n}` on the bundle's cell range.
pub fn floquet_inverse(b: &FibreBundle) -> LatticeSample {
    let cube = b.bloch.first().map(|f| f.cube().clone()).unwrap_or_else(|| FrequencyCube::new(0));
    let mut s = LatticeSample::zeros(b.epsilon, b.n_range, &cube);
    let scale = (2.0 * PI).powf(-1.5);
    for (i, n) in s.cell_offsets().into_iter().enumerate() {
        let cell = &mut s.cells[i];
        for (node, f) in b.nodes.iter().zip(&b.bloch) {
            let kappa = node.theta.map(|t| t * b.epsilon);
            cell.axpy(C64::from_polar(scale * node.weight, dot(kappa, n)), f);
        }
    }
    s
}

fn dot(a: [f64; 3], n: [i64; 3]) -> f64 {
    a[0] * n[0] as f64 + a[1] * n[1] as f64 + a[2] * n[2] as f64
}

/// Fibre right-hand sides `F_θ = ψ(θ) Π_κ X` with a fixed band-limited `X` and
/// `ψ(θ) = Π_a cos²(πθ_a / (2θ_max))` on `[−θ_max, θ_max]³`, sampled by the midpoint rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeSource {
    pub theta_max: f64,
    /// Midpoint nodes per axis.
    pub resolution: usize,
    pub generator: FGenerator,
}

impl EnvelopeSource {
    pub fn nodes(&self) -> Vec<FibreNode> {
        let r = self.resolution;
        let h = 2.0 * self.theta_max / r as f64;
        let xs: Vec<f64> = (0..r).map(|j| -self.theta_max + (j as f64 + 0.5) * h).collect();
        let mut out = Vec::with_capacity(r.pow(3));
        for &a in &xs {
            for &b in &xs {
                for &c in &xs {
                    out.push(FibreNode { theta: [a, b, c], weight: h.powi(3) });
                }
            }
        }
        out
    }

    pub fn envelope(&self, theta: [f64; 3]) -> f64 {
        theta
            .iter()
            .map(|t| if t.abs() <= self.theta_max { (PI * t / (2.0 * self.theta_max)).cos().powi(2) } else { 0.0 })
            .product()
    }

    pub fn rhs(&self, ws: &FibreWorkspace) -> Result<FibreRhs> {
        let x = self.generator.raw(ws.cube(), 0);
        let f = ws.project_solenoidal(&x).scale(C64::new(self.envelope(ws.quasimomentum().theta), 0.0));
        FibreRhs::from_field(ws.context().disc, &f)
    }
}

/// Right-hand side of a whole-space comparison.
#[derive(Clone, Debug)]
pub enum WholeSpaceSource {
    Envelope(EnvelopeSource),
    /// Fixed cell profiles, re-scaled to each ε and transformed on the dual grid of the given
    /// resolution; each fibre is projected off the quasi-gradients.
    Lattice { profiles: LatticeSample, resolution: usize },
}

impl WholeSpaceSource {
    fn refined(&self) -> Option<WholeSpaceSource> {
        match self {
            WholeSpaceSource::Envelope(e) => {
                Some(WholeSpaceSource::Envelope(EnvelopeSource { resolution: e.resolution + 1, ..e.clone() }))
            }
            WholeSpaceSource::Lattice { .. } => None,
        }
    }
}

/// Everything known at one node after the two fibre solves.
pub struct NodeFields<'w, 'a> {
    pub ws: &'w FibreWorkspace<'a>,
    pub node: FibreNode,
    pub rhs: &'w FibreRhs,
    /// Fibre solution for the oscillating coefficient.
    pub u: &'w SpectralField,
    /// Fibre solution for the constant coefficient `A^hom` on the same measure.
    pub v: &'w SpectralField,
    pub c: [C64; 3],
}

/// Weighted squared norms at one node.
#[derive(Clone, Debug)]
pub struct NodeResult<T> {
    pub node: FibreNode,
    pub f_sq: f64,
    pub diff_sq: f64,
    pub main_sq: f64,
    pub cond_estimate: f64,
    pub extra: T,
}

/// Discretisation of the homogenised operator on the same cube and measure.
pub fn homogenised_discretisation(disc: &Discretisation, ahom: &HomogenisedTensor) -> Discretisation {
    let a = ahom.a_hom;
    let sym: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| 0.5 * (a[i][j] + a[j][i])));
    Discretisation::new(disc.cube(), disc.measure(), Some(&CoefficientField::constant(sym)))
}

/// Solves both fibre problems at every node of `source` for one ε and applies `visit`.
pub fn fibre_nodes<T, V>(
    ctx: FibreContext,
    hom: &Discretisation,
    source: &WholeSpaceSource,
    epsilon: f64,
    workers: usize,
    visit: V,
) -> Result<Vec<NodeResult<T>>>
where
    T: Send,
    V: Fn(&NodeFields) -> T + Sync,
{
    let (nodes, bundle) = match source {
        // nodes outside ε⁻¹Q′ are dropped; their weight is reported as truncated
        WholeSpaceSource::Envelope(e) => {
            (e.nodes().into_iter().filter(|n| n.theta.iter().all(|t| (t * epsilon).abs() <= PI)).collect(), None)
        }
        WholeSpaceSource::Lattice { profiles, resolution } => {
            let b = floquet_forward(&profiles.with_epsilon(epsilon)?, *resolution)?;
            (b.nodes.clone(), Some(b))
        }
    };
    let mu = ctx.disc.measure();
    let results = crate::pool::map_indexed(&nodes, workers, |j, &node| -> Result<NodeResult<T>> {
        let q = Quasimomentum::new(epsilon, node.theta)?;
        let ws = FibreWorkspace::new(ctx, q)?;
        let rhs = match (source, &bundle) {
            (WholeSpaceSource::Envelope(e), _) => e.rhs(&ws)?,
            (_, Some(b)) => ws.project_pairings(&b.amplitude_rhs(j, ctx.disc)?),
            _ => unreachable!(),
        };
        let sol = ws.solve_fibre(&rhs)?;
        let hsol = solve_fibre_plain(hom, &q, &rhs)?;
        let c = solve_homogenised_c(q.theta, rhs.mean, ctx.ahom)?;
        let mut cf = SpectralField::zeros(ctx.disc.cube(), 3);
        cf.set_vec(ctx.disc.cube().zero_index(), c);
        let fields = NodeFields { ws: &ws, node, rhs: &rhs, u: &sol.u, v: &hsol.u, c };
        let extra = visit(&fields);
        Ok(NodeResult {
            node,
            f_sq: rhs.norm_sq,
            diff_sq: norm_mu(&sol.u.sub(&hsol.u), mu).powi(2),
            main_sq: norm_mu(&sol.u.sub(&cf), mu).powi(2),
            cond_estimate: sol.cond_estimate.max(hsol.cond_estimate),
            extra,
        })
    });
    results
        .into_iter()
        .zip(&nodes)
        .map(|(r, n)| r.map_err(|e| Error::InvalidInput(format!("epsilon={epsilon} theta={:?}: {e}", n.theta))))
        .collect()
}

/// Per-ε whole-space errors, all norms assembled fibrewise by Parseval.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct WholeSpaceRow {
    pub epsilon: f64,
    pub nodes: usize,
    /// `‖u^ε − u^ε_hom‖ / ‖f‖`.
    pub error: f64,
    /// `error / ε`.
    pub ratio: f64,
    /// `‖u^ε − c‖ / ‖f‖` with `c` the fibrewise homogenised constant.
    pub main_error: f64,
    pub f_norm: f64,
    /// Bound on the contribution of quasimomenta outside the dual cell.
    pub tail_bound: f64,
    /// Quadrature mass of the source outside `ε⁻¹Q′`; zero when the source fits inside.
    pub truncated_weight: f64,
    /// `|error(r) − error(r+1)|` between two θ-resolutions, where the rule is not exact.
    pub quadrature_estimate: Option<f64>,
    pub max_cond: f64,
}

pub fn whole_space_compare(
    ctx: FibreContext,
    source: &WholeSpaceSource,
    epsilons: &[f64],
    workers: usize,
    richardson: bool,
) -> Result<Vec<WholeSpaceRow>> {
    let hom = homogenised_discretisation(ctx.disc, ctx.ahom);
    let lambda = ctx.ahom.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let refined = if richardson { source.refined() } else { None };
    epsilons
        .iter()
        .map(|&eps| {
            let row = reduce(eps, &fibre_nodes(ctx, &hom, source, eps, workers, |_| ())?);
            let quadrature_estimate = match &refined {
                Some(src) => Some((reduce(eps, &fibre_nodes(ctx, &hom, src, eps, workers, |_| ())?).error - row.error).abs()),
                None => None,
            };
            let truncated_weight = match source {
                WholeSpaceSource::Envelope(e) if e.theta_max * eps > PI => {
                    e.nodes().iter().filter(|n| n.theta.iter().any(|t| (t * eps).abs() > PI)).map(|n| n.weight).sum()
                }
                _ => 0.0,
            };
            Ok(WholeSpaceRow {
                tail_bound: eps * eps / (lambda * PI * PI + eps * eps),
                truncated_weight,
                quadrature_estimate,
                ..row
            })
        })
        .collect()
}

fn reduce<T>(eps: f64, nodes: &[NodeResult<T>]) -> WholeSpaceRow {
    let sum = |f: fn(&NodeResult<T>) -> f64| nodes.iter().map(|n| n.node.weight * f(n)).sum::<f64>();
    let f_sq = sum(|n| n.f_sq);
    let f = f_sq.sqrt().max(f64::MIN_POSITIVE);
    let error = sum(|n| n.diff_sq).sqrt() / f;
    WholeSpaceRow {
        epsilon: eps,
        nodes: nodes.len(),
        error,
        ratio: error / eps,
        main_error: sum(|n| n.main_sq).sqrt() / f,
        f_norm: f_sq.sqrt(),
        tail_bound: 0.0,
        truncated_weight: 0.0,
        quadrature_estimate: None,
        max_cond: nodes.iter().map(|n| n.cond_estimate).fold(0.0, f64::max),
    }
}
