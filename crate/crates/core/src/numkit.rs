//! Dense linear algebra and probability helpers shared by every other module.
//!
//! Everything here is double precision. Vectors are plain `&[f64]` slices;
//! [`Matrix`] is a row-major dense matrix and [`Basis`] an orthonormal frame
//! `V ∈ R^{H×k}` stored column by column.

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when validating orthonormality of a [`Basis`].
pub const ORTHONORMAL_TOL: f64 = 1e-10;

/// Floor applied to `q` inside [`kl_div`].
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {bad}")));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                found: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            &self.data,
            false,
            &other.data,
            false,
            &mut out.data,
            false,
        );
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `c (+)= op(a) · op(b)` for row-major buffers where `op(a)` is `m×k` and
/// `op(b)` is `k×n`. A transposed operand is read through swapped strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices have exactly the lengths implied by (m, k, n) and the
    // strides above never address outside them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn check_dims(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

/// An orthonormal set of `rank` column vectors in `R^dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    dim: usize,
    columns: Vec<Vec<f64>>,
}

impl Basis {
    /// Validates orthonormality of `columns` within [`ORTHONORMAL_TOL`].
    pub fn new(dim: usize, columns: Vec<Vec<f64>>) -> Result<Self> {
        if columns.len() > dim {
            return Err(Error::invalid(format!(
                "basis rank {} exceeds dimension {dim}",
                columns.len()
            )));
        }
        for c in &columns {
            check_dims(dim, c.len())?;
        }
        for i in 0..columns.len() {
            for j in i..columns.len() {
                let g = dot(&columns[i], &columns[j]);
                let target = if i == j { 1.0 } else { 0.0 };
                if (g - target).abs() > ORTHONORMAL_TOL {
                    return Err(Error::invalid(format!(
                        "basis columns {i},{j} have inner product {g}"
                    )));
                }
            }
        }
        Ok(Basis { dim, columns })
    }

    /// A uniformly random orthonormal frame (Gaussian columns, Gram-Schmidt twice).
    pub fn random<R: Rng + ?Sized>(dim: usize, rank: usize, rng: &mut R) -> Result<Self> {
        if rank > dim {
            return Err(Error::invalid(format!("rank {rank} > dim {dim}")));
        }
        let mut columns: Vec<Vec<f64>> = Vec::with_capacity(rank);
        while columns.len() < rank {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            for _ in 0..2 {
                for c in &columns {
                    let p = dot(c, &v);
                    axpy(-p, c, &mut v);
                }
            }
            let n = norm(&v);
            if n > 1e-8 {
                v.iter_mut().for_each(|x| *x /= n);
                columns.push(v);
            }
        }
        Basis::new(dim, columns)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    /// `P v = V Vᵀ v`.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dims(self.dim, v.len())?;
        let mut out = vec![0.0; self.dim];
        for c in &self.columns {
            axpy(dot(c, v), c, &mut out);
        }
        Ok(out)
    }

    /// Explicit `H×H` projector `V Vᵀ`.
    pub fn projector(&self) -> Matrix {
        let mut p = Matrix::zeros(self.dim, self.dim);
        for c in &self.columns {
            for i in 0..self.dim {
                let ci = c[i];
                let row = p.row_mut(i);
                for j in 0..row.len() {
                    row[j] += ci * c[j];
                }
            }
        }
        p
    }

    /// Explicit reflection `2P − I`.
    pub fn reflector(&self) -> Matrix {
        let mut r = self.projector();
        for (idx, x) in r.data_mut().iter_mut().enumerate() {
            *x *= 2.0;
            if idx / self.dim == idx % self.dim {
                *x -= 1.0;
            }
        }
        r
    }
}

/// Splits `v` into its component inside `span(basis)` and the orthogonal residual.
pub fn decompose(v: &[f64], basis: &Basis) -> Result<(Vec<f64>, Vec<f64>)> {
    let in_part = basis.project(v)?;
    let out_part = v.iter().zip(&in_part).map(|(a, b)| a - b).collect();
    Ok((in_part, out_part))
}

/// Reflection across `span(basis)`: keeps the in-subspace part, flips the residual.
pub fn reflect(v: &[f64], basis: &Basis) -> Result<Vec<f64>> {
    let in_part = basis.project(v)?;
    Ok(v.iter().zip(&in_part).map(|(x, p)| 2.0 * p - x).collect())
}

/// `⟨a,b⟩ / ((‖a‖+ε)(‖b‖+ε))`.
pub fn stabilized_cosine(a: &[f64], b: &[f64], eps: f64) -> Result<f64> {
    check_dims(a.len(), b.len())?;
    if !(eps > 0.0) {
        return Err(Error::invalid("eps must be positive"));
    }
    Ok(dot(a, b) / ((norm(a) + eps) * (norm(b) + eps)))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    out
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

/// `KL(p ‖ q)` with `0·log 0 = 0` and `q` floored at [`KL_FLOOR`].
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64> {
    check_dims(p.len(), q.len())?;
    Ok(p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.max(KL_FLOOR).ln()))
        .sum())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues and the matching eigenvectors (as columns of the
/// returned matrix), unsorted.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows();
    check_dims(n, a.cols())?;
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let scale: f64 = m.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        return Ok((vec![0.0; n], v));
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = m.get(r, p);
                    let arq = m.get(r, q);
                    let new_rp = c * arp - s * arq;
                    let new_rq = s * arp + c * arq;
                    m.set(r, p, new_rp);
                    m.set(p, r, new_rp);
                    m.set(r, q, new_rq);
                    m.set(q, r, new_rq);
                }
                m.set(p, p, app - t * apq);
                m.set(q, q, aqq + t * apq);
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);
                for r in 0..n {
                    let vrp = v.get(r, p);
                    let vrq = v.get(r, q);
                    v.set(r, p, c * vrp - s * vrq);
                    v.set(r, q, s * vrp + c * vrq);
                }
            }
        }
    }
    Ok(((0..n).map(|i| m.get(i, i)).collect(), v))
}

/// Result of [`pca_basis`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    pub basis: Basis,
    /// Fraction of total variance captured by each component of `basis`.
    pub explained_variance: Vec<f64>,
    /// Set when the centered data has rank below the requested `k`; trailing
    /// columns are then arbitrary orthonormal complements.
    pub rank_deficient: bool,
}

/// Top-`rank` principal directions of the rows of `samples`.
///
/// Sign convention: the largest-magnitude entry of every column is positive.
pub fn pca_basis(samples: &Matrix, rank: usize) -> Result<Pca> {
    let (n, h) = (samples.rows(), samples.cols());
    if n < 2 {
        return Err(Error::invalid(format!("pca needs at least 2 samples, got {n}")));
    }
    if rank == 0 || rank > h {
        return Err(Error::invalid(format!("pca rank {rank} outside 1..={h}")));
    }
    let mut mean = vec![0.0; h];
    for i in 0..n {
        axpy(1.0, samples.row(i), &mut mean);
    }
    mean.iter_mut().for_each(|x| *x /= n as f64);
    let mut centered = samples.clone();
    for i in 0..n {
        for (x, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    let mut cov = Matrix::zeros(h, h);
    gemm(h, n, h, centered.data(), true, centered.data(), false, cov.data_mut(), false);
    cov.data_mut().iter_mut().for_each(|x| *x /= (n - 1) as f64);
    // exact symmetry keeps the Jacobi rotations consistent
    for i in 0..h {
        for j in (i + 1)..h {
            let s = 0.5 * (cov.get(i, j) + cov.get(j, i));
            cov.set(i, j, s);
            cov.set(j, i, s);
        }
    }

    let (values, vectors) = symmetric_eigen(&cov)?;
    let mut order: Vec<usize> = (0..h).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));

    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    let top = values[order[0]].max(0.0);
    let numerical_rank = values
        .iter()
        .filter(|&&v| v > top * 1e-12 * h as f64 && v > 0.0)
        .count();
    let rank_deficient = numerical_rank < rank;
    if rank_deficient {
        warn!(
            "pca: centered data has numerical rank {numerical_rank} < requested {rank}; \
             padding with orthonormal complement directions"
        );
    }

    let mut columns = Vec::with_capacity(rank);
    let mut explained = Vec::with_capacity(rank);
    for &idx in order.iter().take(rank) {
        let mut col: Vec<f64> = (0..h).map(|r| vectors.get(r, idx)).collect();
        let lead = col
            .iter()
            .enumerate()
            .fold((0usize, 0.0f64), |best, (i, x)| {
                if x.abs() > best.1.abs() + 1e-14 {
                    (i, *x)
                } else {
                    best
                }
            })
            .1;
        if lead < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        columns.push(col);
        explained.push(if total > 0.0 {
            values[idx].max(0.0) / total
        } else {
            0.0
        });
    }
    let basis = Basis::new(h, columns)?;
    Ok(Pca {
        mean,
        basis,
        explained_variance: explained,
        rank_deficient,
    })
}

/// Max relative error between `analytic` and central differences of `loss_fn`
/// around `theta`, over every coordinate.
pub fn grad_check<F>(loss_fn: F, analytic: &[f64], theta: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let coords: Vec<usize> = (0..theta.len()).collect();
    grad_check_coords(loss_fn, analytic, theta, step, &coords).map(|r| r.max_rel_error)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// [`grad_check`] restricted to `coords`. Relative error per coordinate is
/// `|analytic − fd| / max(|analytic|, |fd|, 1e-8)`.
pub fn grad_check_coords<F>(
    mut loss_fn: F,
    analytic: &[f64],
    theta: &[f64],
    step: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    check_dims(theta.len(), analytic.len())?;
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut probe = theta.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = loss_fn(&probe);
        probe[i] = orig - step;
        let minus = loss_fn(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss at probe of coordinate {i}")));
        }
        let fd = (plus - minus) / ((orig + step) - (orig - step));
        let a = analytic[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report = GradCheckReport {
                max_rel_error: rel,
                worst_coord: i,
                analytic: a,
                numeric: fd,
            };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn pca_two_axis_points() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let pca = pca_basis(&x, 1).unwrap();
        assert_eq!(pca.mean, vec![0.0, 0.0]);
        let c = &pca.basis.columns()[0];
        assert!(close(c[0].abs(), 1.0, 1e-12) && close(c[1], 0.0, 1e-12));
        assert!(close(pca.explained_variance[0], 1.0, 1e-12));
        assert!(!pca.rank_deficient);
    }

    #[test]
    fn pca_diagonal_direction() {
        // covariance oracle: all points on the line y = x, so the 2x2
        // covariance is c·[[1,1],[1,1]] with top eigenvector (1,1)/√2
        let x = Matrix::from_rows(&[vec![1.0, 1.0], vec![-1.0, -1.0], vec![2.0, 2.0]]).unwrap();
        let pca = pca_basis(&x, 1).unwrap();
        let c = &pca.basis.columns()[0];
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!(close(c[0], r, 1e-12) && close(c[1], r, 1e-12), "{c:?}");
    }

    #[test]
    fn pca_full_rank_captures_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..5).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let pca = pca_basis(&Matrix::from_rows(&rows).unwrap(), 5).unwrap();
        let total: f64 = pca.explained_variance.iter().sum();
        assert!(close(total, 1.0, 1e-10));
        assert!(pca.explained_variance.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn pca_rank_deficient_pads_and_flags() {
        let x = Matrix::from_rows(&[vec![0.5, 1.0, 2.0], vec![0.5, 1.0, 2.0]]).unwrap();
        let pca = pca_basis(&x, 2).unwrap();
        assert!(pca.rank_deficient);
        assert_eq!(pca.basis.rank(), 2);
        assert_eq!(pca.explained_variance, vec![0.0, 0.0]);
    }

    #[test]
    fn pca_preconditions() {
        let one = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(pca_basis(&one, 1).is_err());
        let two = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(pca_basis(&two, 0).is_err());
        assert!(pca_basis(&two, 3).is_err());
    }

    #[test]
    fn pca_sign_convention() {
        let x = Matrix::from_rows(&[vec![0.0, -3.0], vec![0.0, 3.0], vec![0.1, 0.0]]).unwrap();
        let pca = pca_basis(&x, 2).unwrap();
        for c in pca.basis.columns() {
            let lead = c.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn decompose_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let basis = Basis::random(5, 2, &mut rng).unwrap();
        let v0 = basis.columns()[0].clone();
        let (i, o) = decompose(&v0, &basis).unwrap();
        assert!(i.iter().zip(&v0).all(|(a, b)| close(*a, *b, 1e-12)));
        assert!(o.iter().all(|x| x.abs() < 1e-12));

        // complement vector: project a random vector out of the subspace
        let r: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
        let (_, comp) = decompose(&r, &basis).unwrap();
        let (i2, o2) = decompose(&comp, &basis).unwrap();
        assert!(i2.iter().all(|x| x.abs() < 1e-12));
        assert!(o2.iter().zip(&comp).all(|(a, b)| close(*a, *b, 1e-12)));

        // explicit P = V Vᵀ oracle
        let p = basis.projector();
        let v: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
        let pv: Vec<f64> = (0..5).map(|r| dot(p.row(r), &v)).collect();
        let (inp, out) = decompose(&v, &basis).unwrap();
        for k in 0..5 {
            assert!(close(inp[k], pv[k], 1e-12));
            assert!(close(inp[k] + out[k], v[k], 1e-14));
        }
        assert!(close(dot(&v, &v), dot(&inp, &inp) + dot(&out, &out), 1e-10));
        assert!(dot(&inp, &out).abs() < 1e-9);

        assert!(matches!(
            decompose(&[1.0, 2.0], &basis),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn reflect_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let basis = Basis::random(6, 3, &mut rng).unwrap();
        let v_in = basis.columns()[1].clone();
        let r = reflect(&v_in, &basis).unwrap();
        assert!(r.iter().zip(&v_in).all(|(a, b)| close(*a, *b, 1e-12)));

        let x: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
        let (inp, out) = decompose(&x, &basis).unwrap();
        let r = reflect(&out, &basis).unwrap();
        assert!(r.iter().zip(&out).all(|(a, b)| close(*a, -*b, 1e-12)));

        // equal-norm parts: ⟨v, Rv⟩ = ‖in‖² − ‖out‖² = 0
        let scale = norm(&out) / norm(&inp);
        let mixed: Vec<f64> = inp.iter().zip(&out).map(|(a, b)| a * scale + b).collect();
        let rm = reflect(&mixed, &basis).unwrap();
        assert!(dot(&mixed, &rm).abs() < 1e-10);
        assert!(close(norm(&rm), norm(&mixed), 1e-10));
    }

    #[test]
    fn cosine_cases() {
        let v = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!(close(stabilized_cosine(&v, &v, 1e-12).unwrap(), 1.0, 1e-9));
        assert!(close(stabilized_cosine(&v, &neg, 1e-12).unwrap(), -1.0, 1e-9));
        assert_eq!(stabilized_cosine(&[0.0; 3], &[0.0; 3], 1e-8).unwrap(), 0.0);
        assert!(stabilized_cosine(&v, &v, 0.0).is_err());
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let thirds = softmax(&[4.2, 4.2, 4.2]);
        assert!(thirds.iter().all(|x| close(*x, 1.0 / 3.0, 1e-15)));
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]);
        for (a, b) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!(close(*a, b, 1e-12));
        }
        let shifted = softmax(&[1f64.ln() + 50.0, 2f64.ln() + 50.0, 3f64.ln() + 50.0]);
        for (a, b) in p.iter().zip(&shifted) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn kl_cases() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_div(&p, &p).unwrap(), 0.0);
        assert!(close(kl_div(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 2f64.ln(), 1e-12));
        let big = kl_div(&[0.5, 0.5], &[1.0 - 1e-12, 1e-12]).unwrap();
        assert!(big.is_finite() && big > 10.0);
        let floored = kl_div(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(floored.is_finite());
        assert!(kl_div(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn grad_check_quadratic_and_linear() {
        let theta = vec![0.7, -1.3, 2.1, 0.9];
        let analytic: Vec<f64> = theta.iter().map(|x| 2.0 * x).collect();
        let err = grad_check(|t| dot(t, t), &analytic, &theta, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");

        let w = [0.5, -2.0, 3.0, 1.0];
        // central differences are exact on a linear loss, so a coarse step
        // keeps rounding out of the picture
        let err = grad_check(|t| dot(&w, t), &w, &theta, 0.25).unwrap();
        assert!(err < 1e-12, "{err}");

        let nan = grad_check(|_| f64::NAN, &w, &theta, 1e-5);
        assert!(matches!(nan, Err(Error::NonFinite(_))));
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let (mut vals, _) = symmetric_eigen(&a).unwrap();
        vals.sort_by(f64::total_cmp);
        assert!(close(vals[0], 1.0, 1e-14) && close(vals[1], 3.0, 1e-14));
    }

    #[test]
    fn gemm_transposes() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let at = a.transpose();
        let mut c = vec![0.0; 4];
        gemm(2, 3, 2, a.data(), false, a.data(), true, &mut c, false);
        assert_eq!(c, vec![14.0, 32.0, 32.0, 77.0]);
        let mut c2 = vec![0.0; 9];
        gemm(3, 2, 3, a.data(), true, at.data(), true, &mut c2, false);
        assert_eq!(c2, at.matmul(&a).unwrap().into_data());
    }
}
