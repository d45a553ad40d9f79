//! Dense Galerkin blocks over groups of coupled Fourier modes.
//!
//! Two modes are coupled when their difference lies in the support of μ̂ or of one of the
//! A-weighted moments. Uncoupled groups give independent dense systems, so Lebesgue problems
//! with constant coefficients split into one 3×3 block per mode.

use ndarray::{s, Array1, Array2};

use crate::linalg::{components, Mat, Vector};
use crate::measure::{sub, MomentTable, PeriodicMeasure};
use crate::spectral::{pair_index, wavevector, CoefficientField, FrequencyCube};
use crate::C64;

const SUPPORT_TOL: f64 = 1e-14;

/// Moment tables, coupling components and block assembly for one `(cube, μ, A)`.
#[derive(Clone, Debug)]
pub struct Discretisation {
    cube: FrequencyCube,
    mu: PeriodicMeasure,
    gram: MomentTable,
    coeff: Option<[MomentTable; 6]>,
    components: Vec<Vec<usize>>,
    zero_component: usize,
}

fn clean(t: &mut MomentTable) {
    let cut = SUPPORT_TOL * t.max_abs();
    for v in t.values_mut() {
        if v.norm() <= cut {
            *v = C64::new(0.0, 0.0);
        }
    }
}

impl Discretisation {
    pub fn new(cube: &FrequencyCube, mu: &PeriodicMeasure, a: Option<&CoefficientField>) -> Self {
        let d = 2 * cube.cutoff();
        let mut gram = mu.moment_table(d);
        clean(&mut gram);
        let coeff = a.map(|a| {
            let mut t = a.moment_tables(mu, d);
            t.iter_mut().for_each(clean);
            t
        });
        let mut support = gram.support(0.0);
        if let Some(t) = &coeff {
            for tab in t {
                support.extend(tab.support(0.0));
            }
        }
        support.sort_unstable();
        support.dedup();
        let comps = components(cube.len(), |i, out| {
            let l = cube.mode(i);
            for s in &support {
                if let Some(j) = cube.index(sub(l, *s)) {
                    out.push(j);
                }
            }
        });
        let z = cube.zero_index();
        let zero_component = comps.iter().position(|c| c.binary_search(&z).is_ok()).unwrap();
        Discretisation { cube: cube.clone(), mu: mu.clone(), gram, coeff, components: comps, zero_component }
    }

    pub fn cube(&self) -> &FrequencyCube {
        &self.cube
    }

    pub fn measure(&self) -> &PeriodicMeasure {
        &self.mu
    }

    pub fn components(&self) -> &[Vec<usize>] {
        &self.components
    }

    pub fn zero_component(&self) -> usize {
        self.zero_component
    }

    pub fn has_coefficient(&self) -> bool {
        self.coeff.is_some()
    }

    /// `μ̂(d)`.
    #[inline]
    pub fn mu_hat(&self, d: [i64; 3]) -> C64 {
        self.gram.get(d)
    }

    /// `∫ A_ab e^{-2πid·y} dμ`.
    #[inline]
    pub fn a_moment(&self, a: usize, b: usize, d: [i64; 3]) -> C64 {
        self.coeff.as_ref().expect("discretisation built without a coefficient")[pair_index(a, b)].get(d)
    }

    /// Scalar Gram block `G[p,q] = μ̂(l_p − l_q)`.
    pub fn gram(&self, comp: &[usize]) -> Mat {
        let modes: Vec<[i64; 3]> = comp.iter().map(|&i| self.cube.mode(i)).collect();
        Array2::from_shape_fn((comp.len(), comp.len()), |(p, q)| self.mu_hat(sub(modes[p], modes[q])))
    }

    /// Vector mass block `G ⊗ I₃`.
    pub fn mass(&self, comp: &[usize]) -> Mat {
        let g = self.gram(comp);
        let n = comp.len();
        let mut m = Array2::zeros((3 * n, 3 * n));
        for p in 0..n {
            for q in 0..n {
                let v = g[[p, q]];
                if v != C64::new(0.0, 0.0) {
                    for a in 0..3 {
                        m[[3 * p + a, 3 * q + a]] = v;
                    }
                }
            }
        }
        m
    }

    /// A-weighted mass block `G_A[(p,a),(q,b)] = m_ab(l_p − l_q)`.
    pub fn coeff_mass(&self, comp: &[usize]) -> Mat {
        let n = comp.len();
        let mut m = Array2::zeros((3 * n, 3 * n));
        for (p, &i) in comp.iter().enumerate() {
            for (q, &j) in comp.iter().enumerate() {
                let d = sub(self.cube.mode(i), self.cube.mode(j));
                for a in 0..3 {
                    for b in 0..3 {
                        m[[3 * p + a, 3 * q + b]] = self.a_moment(a, b, d);
                    }
                }
            }
        }
        m
    }

    /// Curl stiffness `KᴴG_AK` at quasimomentum κ; with `identity` the weight is A = I.
    fn stiffness_impl(&self, comp: &[usize], kappa: [f64; 3], identity: bool) -> Mat {
        let n = comp.len();
        let ks: Vec<[[f64; 3]; 3]> = comp.iter().map(|&i| skew(wavevector(kappa, self.cube.mode(i)))).collect();
        let mut s = Array2::zeros((3 * n, 3 * n));
        for (p, &i) in comp.iter().enumerate() {
            for (q, &j) in comp.iter().enumerate() {
                let d = sub(self.cube.mode(i), self.cube.mode(j));
                let mut m = [[C64::new(0.0, 0.0); 3]; 3];
                let mut any = false;
                for a in 0..3 {
                    for b in 0..3 {
                        m[a][b] = if identity {
                            if a == b {
                                self.mu_hat(d)
                            } else {
                                C64::new(0.0, 0.0)
                            }
                        } else {
                            self.a_moment(a, b, d)
                        };
                        any |= m[a][b] != C64::new(0.0, 0.0);
                    }
                }
                if !any {
                    continue;
                }
                // (i[k_p]×)(M)(i[k_q]×) = −[k_p]× M [k_q]×
                let (kp, kq) = (&ks[p], &ks[q]);
                for a in 0..3 {
                    for b in 0..3 {
                        let mut acc = C64::new(0.0, 0.0);
                        for c in 0..3 {
                            if kp[a][c] == 0.0 {
                                continue;
                            }
                            for e in 0..3 {
                                acc += m[c][e] * (kp[a][c] * kq[e][b]);
                            }
                        }
                        s[[3 * p + a, 3 * q + b]] = -acc;
                    }
                }
            }
        }
        s
    }

    pub fn stiffness(&self, comp: &[usize], kappa: [f64; 3]) -> Mat {
        self.stiffness_impl(comp, kappa, false)
    }

    pub fn stiffness_identity(&self, comp: &[usize], kappa: [f64; 3]) -> Mat {
        self.stiffness_impl(comp, kappa, true)
    }

    /// Block-diagonal curl `K`, `(Kx)_p = i k_p × x_p`.
    pub fn curl(&self, comp: &[usize], kappa: [f64; 3]) -> Mat {
        let n = comp.len();
        let mut k = Array2::zeros((3 * n, 3 * n));
        for (p, &i) in comp.iter().enumerate() {
            let s = skew(wavevector(kappa, self.cube.mode(i)));
            for a in 0..3 {
                for b in 0..3 {
                    k[[3 * p + a, 3 * p + b]] = C64::new(0.0, s[a][b]);
                }
            }
        }
        k
    }

    /// Gradient `D[(p,a), q] = δ_pq i k_p^a`.
    pub fn grad(&self, comp: &[usize], kappa: [f64; 3]) -> Mat {
        let n = comp.len();
        let mut d = Array2::zeros((3 * n, n));
        for (p, &i) in comp.iter().enumerate() {
            let k = wavevector(kappa, self.cube.mode(i));
            for a in 0..3 {
                d[[3 * p + a, p]] = C64::new(0.0, k[a]);
            }
        }
        d
    }

    /// `DᴴG_vec`, shape n × 3n: `[q,(p,b)] = −i k_q^b μ̂(l_q − l_p)`.
    pub fn grad_pairing(&self, comp: &[usize], kappa: [f64; 3]) -> Mat {
        let ks: Vec<[f64; 3]> = comp.iter().map(|&i| wavevector(kappa, self.cube.mode(i))).collect();
        let g = self.gram(comp);
        let n = comp.len();
        let mut out = Array2::zeros((n, 3 * n));
        for q in 0..n {
            for p in 0..n {
                let v = g[[q, p]];
                if v != C64::new(0.0, 0.0) {
                    for b in 0..3 {
                        out[[q, 3 * p + b]] = C64::new(0.0, -ks[q][b]) * v;
                    }
                }
            }
        }
        out
    }

    /// Rows of `x ↦ (⟨x, ē_κ∇(e_κe_q)⟩_μ)_q`, followed by the three mean rows when `with_mean`.
    pub fn solenoidal_constraints(&self, comp: &[usize], kappa: [f64; 3], with_mean: bool) -> Mat {
        let gp = self.grad_pairing(comp, kappa);
        if !with_mean {
            return gp;
        }
        let n = gp.nrows();
        let mut c = Array2::zeros((n + 3, gp.ncols()));
        c.slice_mut(s![..n, ..]).assign(&gp);
        c.slice_mut(s![n.., ..]).assign(&self.vector_mean_rows(comp));
        c
    }

    /// Scalar stiffness `L = DᴴG_vecD`, `L[p,q] = (k_p·k_q) μ̂(l_p − l_q)`.
    pub fn laplace(&self, comp: &[usize], kappa: [f64; 3]) -> Mat {
        let ks: Vec<[f64; 3]> = comp.iter().map(|&i| wavevector(kappa, self.cube.mode(i))).collect();
        let g = self.gram(comp);
        Array2::from_shape_fn((comp.len(), comp.len()), |(p, q)| {
            g[[p, q]] * (ks[p][0] * ks[q][0] + ks[p][1] * ks[q][1] + ks[p][2] * ks[q][2])
        })
    }

    /// Row functional of the μ-mean of a scalar: `φ ↦ Σ_q μ̂(−l_q) φ_q`.
    pub fn scalar_mean_row(&self, comp: &[usize]) -> Vector {
        comp.iter().map(|&i| self.mu_hat(neg(self.cube.mode(i)))).collect()
    }

    /// Rows of `φ ↦ ∫ ē_κ∇(e_κφ) dμ`, shape 3 × n.
    pub fn gradient_mean_rows(&self, comp: &[usize], kappa: [f64; 3]) -> Mat {
        let mut r = Array2::zeros((3, comp.len()));
        for (q, &i) in comp.iter().enumerate() {
            let l = self.cube.mode(i);
            let k = wavevector(kappa, l);
            let m = self.mu_hat(neg(l));
            for a in 0..3 {
                r[[a, q]] = C64::new(0.0, k[a]) * m;
            }
        }
        r
    }

    /// Rows of the vector mean `x ↦ ∫ x dμ`, shape 3 × 3n.
    pub fn vector_mean_rows(&self, comp: &[usize]) -> Mat {
        let mut r = Array2::zeros((3, 3 * comp.len()));
        for (p, &i) in comp.iter().enumerate() {
            let m = self.mu_hat(neg(self.cube.mode(i)));
            for a in 0..3 {
                r[[a, 3 * p + a]] = m;
            }
        }
        r
    }

    /// Rows of `x ↦ ∫ A_{a·} x dμ`, shape 3 × 3n.
    pub fn coeff_mean_rows(&self, comp: &[usize]) -> Mat {
        let mut r = Array2::zeros((3, 3 * comp.len()));
        for (p, &i) in comp.iter().enumerate() {
            let d = neg(self.cube.mode(i));
            for a in 0..3 {
                for b in 0..3 {
                    r[[a, 3 * p + b]] = self.a_moment(a, b, d);
                }
            }
        }
        r
    }

    /// Position of mode 0 inside its component.
    pub fn zero_position(&self) -> usize {
        let z = self.cube.zero_index();
        self.components[self.zero_component].binary_search(&z).unwrap()
    }
}

#[inline]
fn neg(a: [i64; 3]) -> [i64; 3] {
    [-a[0], -a[1], -a[2]]
}

/// `[k]×` with `[k]× v = k × v`.
#[inline]
pub(crate) fn skew(k: [f64; 3]) -> [[f64; 3]; 3] {
    [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]]
}

/// Coefficients of `x` restricted to a component (`ncomp` entries per mode).
pub fn gather(x: &[C64], comp: &[usize], ncomp: usize) -> Vector {
    let mut out = Array1::zeros(comp.len() * ncomp);
    for (p, &i) in comp.iter().enumerate() {
        for a in 0..ncomp {
            out[ncomp * p + a] = x[ncomp * i + a];
        }
    }
    out
}

pub fn scatter(x: &mut [C64], comp: &[usize], ncomp: usize, v: &Vector) {
    for (p, &i) in comp.iter().enumerate() {
        for a in 0..ncomp {
            x[ncomp * i + a] = v[ncomp * p + a];
        }
    }
}
