//! Dense `f32` tensors and the small linear-algebra kernel used by the
//! feature transfers.

use crate::error::{Error, Result};

/// Dense row-major tensor of rank 1 to 4.
///
/// Feature maps are channels-first: `(C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        check_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// `(C, H, W)` of a rank-3 feature map.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(Error::dim(format!("expected (C,H,W) feature map, got {s:?}"))),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn get2(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.shape[1] + c]
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::dim(format!("rank must be 1..=4, got {}", shape.len())));
    }
    if shape.contains(&0) {
        return Err(Error::dim(format!("zero-sized dimension in {shape:?}")));
    }
    Ok(())
}

/// Matrix product of two rank-2 tensors.
///
/// The loop order is fixed (i, k, j) so results are reproducible bit for bit
/// on a given platform.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::dim(format!(
            "matmul needs matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    };
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions differ: {m}x{k} by {k2}x{n}"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aik = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let &[m, n] = a.shape() else {
        return Err(Error::dim(format!("transpose needs a matrix, got {:?}", a.shape())));
    };
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(&[n, m], out)
}

pub const DEFAULT_MAX_SWEEPS: usize = 64;

/// Eigendecomposition of a symmetric matrix, `A = E diag(D) Eᵀ`.
#[derive(Clone, Debug)]
pub struct SymEig {
    /// Descending.
    pub eigenvalues: Vec<f32>,
    /// Column `j` is the eigenvector of `eigenvalues[j]`.
    pub eigenvectors: Tensor,
    pub converged: bool,
    pub sweeps: usize,
}

impl SymEig {
    pub fn reconstruct(&self) -> Tensor {
        let n = self.eigenvalues.len();
        let e = self.eigenvectors.data();
        Tensor::from_fn(&[n, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            let s: f64 = (0..n)
                .map(|k| e[i * n + k] as f64 * self.eigenvalues[k] as f64 * e[j * n + k] as f64)
                .sum();
            s as f32
        })
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations, computed in
/// 64-bit and rounded to 32-bit.
///
/// Exhausting `max_sweeps` is reported through `converged`, not as an error.
pub fn sym_eig(a: &Tensor, max_sweeps: usize) -> Result<SymEig> {
    let &[n, n2] = a.shape() else {
        return Err(Error::dim(format!("sym_eig needs a square matrix, got {:?}", a.shape())));
    };
    if n != n2 {
        return Err(Error::dim(format!("sym_eig needs a square matrix, got {n}x{n2}")));
    }
    if max_sweeps == 0 {
        return Err(Error::Precondition("max_sweeps must be at least 1".into()));
    }
    let scale = a.data().iter().fold(1.0f32, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (a.get2(i, j) - a.get2(j, i)).abs();
            if d > 1e-6 * scale {
                return Err(Error::Precondition(format!(
                    "matrix not symmetric at ({i},{j}): |a_ij - a_ji| = {d:e}"
                )));
            }
        }
    }
    let data: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let eig = jacobi_eigen(&data, n, max_sweeps);
    Ok(SymEig {
        eigenvalues: eig.values.iter().map(|&v| v as f32).collect(),
        eigenvectors: Tensor::new(&[n, n], eig.vectors.iter().map(|&v| v as f32).collect())?,
        converged: eig.converged,
        sweeps: eig.sweeps,
    })
}

/// 64-bit eigendecomposition result; `vectors` is row-major `n × n` with
/// eigenvectors in columns.
#[derive(Clone, Debug)]
pub(crate) struct SymEig64 {
    pub values: Vec<f64>,
    pub vectors: Vec<f64>,
    pub converged: bool,
    pub sweeps: usize,
}

pub(crate) fn jacobi_eigen(a: &[f64], n: usize, max_sweeps: usize) -> SymEig64 {
    let mut m = a.to_vec();
    // Symmetrize so round-off in the caller cannot bias the rotations.
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = s;
            m[j * n + i] = s;
        }
    }
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-10 * norm;

    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = off(&m) <= tol;
    let mut sweeps = 0;
    while !converged && sweeps < max_sweeps {
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        converged = off(&m) <= tol;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let values: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0f64; n * n];
    for (col, &src) in order.iter().enumerate() {
        // Sign convention: largest-magnitude component positive.
        let mut best = 0;
        for r in 0..n {
            if v[r * n + src].abs() > v[best * n + src].abs() {
                best = r;
            }
        }
        let sign = if v[best * n + src] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            vectors[r * n + col] = sign * v[r * n + src];
        }
    }
    SymEig64 {
        values,
        vectors,
        converged,
        sweeps,
    }
}
