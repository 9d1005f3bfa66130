//! Exact inverse of `K^T K + lambda` for the separable zero-padded blur,
//! used as a preconditioner. The blur is a Kronecker product of symmetric
//! per-axis matrices, so it diagonalizes axis by axis.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::phantom::NoiseOperator;

struct AxisBasis {
    n: usize,
    // eigenvectors as rows (U^T), row-major
    ut: Vec<f64>,
    // U, row-major
    u: Vec<f64>,
    values: Vec<f64>,
}

impl AxisBasis {
    fn new(op: &NoiseOperator, n: usize) -> Self {
        let m = DMatrix::from_row_slice(n, n, &op.axis_matrix(n));
        let eig = SymmetricEigen::new(m);
        let mut ut = vec![0.0; n * n];
        let mut u = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let v = eig.eigenvectors[(i, k)];
                u[i * n + k] = v;
                ut[k * n + i] = v;
            }
        }
        AxisBasis {
            n,
            ut,
            u,
            values: eig.eigenvalues.iter().copied().collect(),
        }
    }
}

/// `(K^T K + lambda)^-1` on a fixed grid.
pub struct SpectralInverse {
    dims: [usize; 3],
    axes: [AxisBasis; 3],
    inv: Vec<f64>,
}

/// `dst = (I (x) M (x) I) src` along `axis` for a row-major `n x n` matrix.
fn along_axis(m: &[f64], src: &[f64], dst: &mut [f64], dims: [usize; 3], axis: usize) {
    let n = dims[axis];
    let block: usize = dims[..axis].iter().product();
    let outer: usize = dims[axis + 1..].iter().product();
    dst.iter_mut().for_each(|v| *v = 0.0);
    for o in 0..outer {
        let base = o * n * block;
        for t in 0..n {
            let (head, _) = dst.split_at_mut(base + (t + 1) * block);
            let out = &mut head[base + t * block..];
            for s in 0..n {
                let k = m[t * n + s];
                if k == 0.0 {
                    continue;
                }
                let row = &src[base + s * block..base + (s + 1) * block];
                for (d, v) in out.iter_mut().zip(row) {
                    *d += k * v;
                }
            }
        }
    }
}

impl SpectralInverse {
    pub fn new(op: &NoiseOperator, dims: [usize; 3], lambda: f64) -> Self {
        let axes = dims.map(|n| AxisBasis::new(op, n));
        let [nx, ny, nz] = dims;
        let mut inv = vec![0.0; nx * ny * nz];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let mu = axes[0].values[x] * axes[1].values[y] * axes[2].values[z];
                    inv[(z * ny + y) * nx + x] = 1.0 / (mu * mu + lambda);
                }
            }
        }
        SpectralInverse { dims, axes, inv }
    }

    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        let mut a = v.to_vec();
        let mut b = vec![0.0; v.len()];
        for (axis, basis) in self.axes.iter().enumerate() {
            debug_assert_eq!(basis.n, self.dims[axis]);
            along_axis(&basis.ut, &a, &mut b, self.dims, axis);
            std::mem::swap(&mut a, &mut b);
        }
        for (x, s) in a.iter_mut().zip(&self.inv) {
            *x *= s;
        }
        for (axis, basis) in self.axes.iter().enumerate() {
            along_axis(&basis.u, &a, &mut b, self.dims, axis);
            std::mem::swap(&mut a, &mut b);
        }
        out.copy_from_slice(&a);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::NoiseField;

    #[test]
    fn inverts_the_normal_operator() {
        let dims = [9, 7, 11];
        let op = NoiseOperator::default();
        let lambda = 1e-3;
        let pre = SpectralInverse::new(&op, dims, lambda);
        let v = NoiseField::from_seed(dims, 3).values;
        let mut x = vec![0.0; v.len()];
        pre.apply(&v, &mut x);
        let mut back = op.blur(&op.blur(&x, dims), dims);
        for (b, xi) in back.iter_mut().zip(&x) {
            *b += lambda * xi;
        }
        let err = back.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }
}
