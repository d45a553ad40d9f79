//! Dense Hermitian solves with tiny diagonal regularisation and iterative refinement.

use std::collections::VecDeque;

use ndarray::{Array1, Array2, ShapeBuilder};
use ndarray_linalg::cholesky::CholeskyFactorized;
use ndarray_linalg::solveh::BKFactorized;
use ndarray_linalg::{Eigh, FactorizeCInto, FactorizeHInto, SolveC, SolveH, UPLO};

use crate::error::{Error, Result};
use crate::C64;

pub type Mat = Array2<C64>;
pub type Vector = Array1<C64>;

/// Kernel threshold relative to the largest eigenvalue.
pub const TAU_NULL: f64 = 1e-10;
/// Numerical-noise threshold relative to the largest eigenvalue.
pub const TAU_NUM: f64 = 1e-12;

const REGULARISATION: f64 = 1e-10;
const REFINE_TOL: f64 = 1e-13;
const REFINE_MAX: usize = 20;

enum Kind {
    Cholesky(CholeskyFactorized<ndarray::OwnedRepr<C64>>),
    BunchKaufman(BKFactorized<ndarray::OwnedRepr<C64>>),
}

/// Factorisation of `M + δE` used as a preconditioner for refinement against `M`.
///
/// `E = I` for semidefinite systems; for saddle systems `E = diag(I, −I)` over
/// (primal, multiplier) blocks.
pub struct Factorization {
    kind: Kind,
    matrix: Mat,
    delta: f64,
}

impl Factorization {
    /// Hermitian positive semidefinite `M`.
    pub fn positive(matrix: Mat) -> Result<Self> {
        let delta = REGULARISATION * nonzero_scale(&matrix);
        let mut reg = matrix.clone();
        for i in 0..reg.nrows() {
            reg[[i, i]] += delta;
        }
        let f = reg.factorizec_into(UPLO::Lower)?;
        Ok(Factorization { kind: Kind::Cholesky(f), matrix, delta })
    }

    /// Hermitian saddle matrix whose first `n_primal` unknowns are primal.
    pub fn saddle(matrix: Mat, n_primal: usize) -> Result<Self> {
        let delta = REGULARISATION * nonzero_scale(&matrix);
        let mut reg = matrix.clone();
        for i in 0..reg.nrows() {
            reg[[i, i]] += if i < n_primal { delta } else { -delta };
        }
        // the Bunch-Kaufman solve of ndarray-linalg 0.18 applies the inverse of the entrywise
        // conjugate of the factorised matrix, so factorise conj(M + δE)
        reg.mapv_inplace(|z| z.conj());
        let f = reg.factorizeh_into()?;
        Ok(Factorization { kind: Kind::BunchKaufman(f), matrix, delta })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Mat {
        &self.matrix
    }

    pub fn regularisation(&self) -> f64 {
        self.delta
    }

    fn apply_inverse(&self, b: &Vector) -> Vector {
        let x = match &self.kind {
            Kind::Cholesky(f) => f.solvec(b),
            Kind::BunchKaufman(f) => f.solveh(b),
        };
        x.expect("triangular solve with a nonsingular factor")
    }

    /// Solves `M x = b`, refining until the relative residual stops improving.
    pub fn solve(&self, b: &Vector) -> Vector {
        let bn = norm(b);
        if bn == 0.0 {
            return Array1::zeros(b.len());
        }
        let mut x = self.apply_inverse(b);
        let mut r = b - &self.matrix.dot(&x);
        let mut rn = norm(&r);
        for _ in 0..REFINE_MAX {
            if rn <= REFINE_TOL * bn {
                break;
            }
            let x_new = &x + &self.apply_inverse(&r);
            let r_new = b - &self.matrix.dot(&x_new);
            let rn_new = norm(&r_new);
            if rn_new >= 0.5 * rn {
                if rn_new < rn {
                    x = x_new;
                }
                break;
            }
            x = x_new;
            r = r_new;
            rn = rn_new;
        }
        x
    }

    /// `(max L_ii / min L_ii)²` from the Cholesky factor; `None` for indefinite factorisations.
    pub fn cond_estimate(&self) -> Option<f64> {
        match &self.kind {
            Kind::Cholesky(f) => {
                let d: Vec<f64> = f.factor.diag().iter().map(|z| z.re.abs()).collect();
                let max = d.iter().cloned().fold(0.0, f64::max);
                let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
                Some((max / min).powi(2))
            }
            Kind::BunchKaufman(_) => None,
        }
    }
}

fn nonzero_scale(m: &Mat) -> f64 {
    let s = m.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if s > 0.0 {
        s
    } else {
        1.0
    }
}

pub fn norm(x: &Vector) -> f64 {
    x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// `xᴴ M y`.
pub fn form(m: &Mat, x: &Vector, y: &Vector) -> C64 {
    x.iter().zip(m.dot(y).iter()).map(|(a, b)| a.conj() * b).sum()
}

pub fn dot_h(x: &Vector, y: &Vector) -> C64 {
    x.iter().zip(y.iter()).map(|(a, b)| a.conj() * b).sum()
}

/// `Aᴴ`.
pub fn adjoint(m: &Mat) -> Mat {
    m.t().mapv(|z| z.conj())
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(m: &Mat) -> Result<Vec<f64>> {
    Ok(hermitian_eigh(m)?.0)
}

/// Eigenpairs of a Hermitian matrix, ascending; eigenvectors are the columns.
pub fn hermitian_eigh(m: &Mat) -> Result<(Vec<f64>, Mat)> {
    // row-major input comes back with conjugated eigenvectors, so hand LAPACK column-major data
    let mut f = Array2::zeros(m.raw_dim().f());
    f.assign(m);
    let (ev, vecs) = f.eigh(UPLO::Lower).map_err(Error::from)?;
    let mut v = Array2::zeros(vecs.raw_dim());
    v.assign(&vecs);
    Ok((ev.to_vec(), v))
}

/// Connected components of the graph on `n` nodes with edges supplied by `neighbours`.
///
/// Components are returned with ascending node lists, ordered by smallest node.
pub fn components(n: usize, mut neighbours: impl FnMut(usize, &mut Vec<usize>)) -> Vec<Vec<usize>> {
    let mut label = vec![usize::MAX; n];
    let mut out = Vec::new();
    let mut buf = Vec::new();
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut comp = vec![start];
        label[start] = id;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            buf.clear();
            neighbours(i, &mut buf);
            for &j in &buf {
                if label[j] == usize::MAX {
                    label[j] = id;
                    comp.push(j);
                    queue.push_back(j);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, m: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, m), |_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
    }

    #[test]
    fn positive_solve_is_accurate() {
        let b = random_matrix(40, 40, 1);
        let m = adjoint(&b).dot(&b) + Array2::<C64>::eye(40);
        let rhs = random_matrix(40, 1, 2).column(0).to_owned();
        let f = Factorization::positive(m.clone()).unwrap();
        let x = f.solve(&rhs);
        assert!(norm(&(&rhs - &m.dot(&x))) < 1e-12 * norm(&rhs));
        assert!(f.cond_estimate().unwrap() >= 1.0);
    }

    #[test]
    fn singular_consistent_system_is_solved() {
        // rank-deficient PSD matrix with a right-hand side in its range
        let b = random_matrix(10, 30, 3);
        let m = adjoint(&b).dot(&b);
        let x0 = random_matrix(30, 1, 4).column(0).to_owned();
        let rhs = m.dot(&x0);
        let x = Factorization::positive(m.clone()).unwrap().solve(&rhs);
        assert!(norm(&(&rhs - &m.dot(&x))) < 1e-9 * norm(&rhs));
    }

    #[test]
    fn saddle_solve_enforces_constraints() {
        let n = 20;
        let k = 3;
        let b = random_matrix(n, n, 5);
        let s = adjoint(&b).dot(&b) + Array2::<C64>::eye(n);
        let c = random_matrix(k, n, 6);
        let mut m = Array2::zeros((n + k, n + k));
        m.slice_mut(ndarray::s![..n, ..n]).assign(&s);
        m.slice_mut(ndarray::s![n.., ..n]).assign(&c);
        m.slice_mut(ndarray::s![..n, n..]).assign(&adjoint(&c));
        let mut rhs = Array1::zeros(n + k);
        rhs.slice_mut(ndarray::s![..n]).assign(&random_matrix(n, 1, 7).column(0));
        let x = Factorization::saddle(m.clone(), n).unwrap().solve(&rhs);
        assert!(norm(&c.dot(&x.slice(ndarray::s![..n]).to_owned())) < 1e-11);
        assert!(norm(&(&rhs - &m.dot(&x))) < 1e-11 * norm(&rhs));
    }

    #[test]
    fn eigenpairs_satisfy_the_eigen_equation() {
        let b = random_matrix(12, 12, 9);
        let m = adjoint(&b).dot(&b);
        let (ev, v) = hermitian_eigh(&m).unwrap();
        for k in 0..12 {
            let col = v.column(k).to_owned();
            let r = m.dot(&col) - &col * C64::new(ev[k], 0.0);
            assert!(norm(&r) < 1e-12 * ev[11]);
        }
    }

    #[test]
    fn components_of_a_path_and_isolated_nodes() {
        // edges 0-2, 2-4; nodes 1, 3 isolated
        let comps = components(5, |i, out| match i {
            0 => out.push(2),
            2 => out.extend([0, 4]),
            4 => out.push(2),
            _ => {}
        });
        assert_eq!(comps, vec![vec![0, 2, 4], vec![1], vec![3]]);
    }
}
