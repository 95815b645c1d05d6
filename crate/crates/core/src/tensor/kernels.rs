use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Epsilon added to the mean square in [`rmsnorm`].
pub const RMSNORM_EPS: f64 = 1e-6;

/// `a[m×k] · b[k×n]`. Each output element accumulates its products with the
/// inner index ascending, matching the textbook triple loop bit for bit.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![T::zero(); m * n];
    gemm(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b` for two row-major matrices with the same row count.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rows() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    matmul(&a.transpose(), &b.as_matrix())
}

/// `a · bᵀ`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    matmul(&a.as_matrix(), &b.transpose())
}

/// `x[..×k] · w[k×n]`, keeping the leading axes of `x`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    if w.ndim() != 2 || x.cols() != w.rows() {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (m, k, n) = (x.rows(), x.cols(), w.cols());
    let mut out = vec![T::zero(); m * n];
    gemm(x.data(), w.data(), &mut out, m, k, n);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::new(shape, out)
}

const MR: usize = 4;
const NR: usize = 8;

// Every c[i][j] starts at zero and accumulates its k products in ascending
// order, exactly like the textbook triple loop. Full 4×8 tiles keep their
// accumulators in registers; the ragged edges fall back to i-k-j.
fn gemm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let m_full = m - m % MR;
    let n_full = n - n % NR;
    for i0 in (0..m_full).step_by(MR) {
        for j0 in (0..n_full).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            for kk in 0..k {
                let b_tile: &[T; NR] = b[kk * n + j0..kk * n + j0 + NR]
                    .try_into()
                    .expect("tile width");
                for (r, acc_row) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + r) * k + kk];
                    for (cv, &bv) in acc_row.iter_mut().zip(b_tile) {
                        *cv += av * bv;
                    }
                }
            }
            for (r, acc_row) in acc.iter().enumerate() {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(acc_row);
            }
        }
        if n_full < n {
            for i in i0..i0 + MR {
                gemm_row(
                    &a[i * k..(i + 1) * k],
                    b,
                    &mut c[i * n..(i + 1) * n],
                    n,
                    n_full,
                );
            }
        }
    }
    for i in m_full..m {
        gemm_row(&a[i * k..(i + 1) * k], b, &mut c[i * n..(i + 1) * n], n, 0);
    }
}

/// Columns `[from, n)` of one output row, in i-k-j order.
fn gemm_row<T: Scalar>(a_row: &[T], b: &[T], c_row: &mut [T], n: usize, from: usize) {
    for (kk, &aik) in a_row.iter().enumerate() {
        let b_row = &b[kk * n + from..(kk + 1) * n];
        for (cv, &bv) in c_row[from..].iter_mut().zip(b_row) {
            *cv += aik * bv;
        }
    }
}

/// Exact GeLU, `x·Φ(x)`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, upstream: &Tensor<T>) -> Tensor<T> {
    x.zip_map(upstream, |v, g| gelu_derivative(v) * g)
}

#[inline]
fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::cst(0.5);
    half * x * (T::one() + (x * T::cst(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_derivative<T: Scalar>(x: T) -> T {
    let half = T::cst(0.5);
    let cdf = half * (T::one() + (x * T::cst(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::cst(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Row-wise RMS normalization scaled by `gamma`.
pub fn rmsnorm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>) -> Result<Tensor<T>> {
    check_gamma(x, gamma)?;
    let h = x.cols();
    let mut out = x.clone();
    for i in 0..x.rows() {
        let inv = inv_rms(x.row(i));
        for ((o, &v), &g) in out.row_mut(i).iter_mut().zip(x.row(i)).zip(gamma.data()) {
            *o = v * inv * g;
        }
    }
    debug_assert_eq!(out.cols(), h);
    Ok(out)
}

/// Returns `(dx, dgamma)`.
pub fn rmsnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_gamma(x, gamma)?;
    if x.shape() != upstream.shape() {
        return Err(Error::ShapeMismatch {
            op: "rmsnorm_backward",
            lhs: x.shape().to_vec(),
            rhs: upstream.shape().to_vec(),
        });
    }
    let h = x.cols();
    let hs = T::cst(h as f64);
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![T::zero(); h];
    let mut xhat = vec![T::zero(); h];
    let mut dxhat = vec![T::zero(); h];
    for i in 0..x.rows() {
        let row = x.row(i);
        let up = upstream.row(i);
        let inv = inv_rms(row);
        let mut proj = T::zero();
        for j in 0..h {
            xhat[j] = row[j] * inv;
            dxhat[j] = up[j] * gamma.data()[j];
            dgamma[j] += up[j] * xhat[j];
            proj += dxhat[j] * xhat[j];
        }
        let proj = proj / hs;
        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
            *d = inv * (dxhat[j] - xhat[j] * proj);
        }
    }
    Ok((dx, Tensor::new(vec![h], dgamma)?))
}

#[inline]
fn inv_rms<T: Scalar>(row: &[T]) -> T {
    let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / T::cst(row.len() as f64);
    T::one() / (ms + T::cst(RMSNORM_EPS)).sqrt()
}

fn check_gamma<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>) -> Result<()> {
    if gamma.ndim() != 1 || gamma.len() != x.cols() {
        return Err(Error::ShapeMismatch {
            op: "rmsnorm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean cross-entropy over the rows of `logits` and its exact gradient.
pub fn softmax_ce_loss<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<(T, Tensor<T>)> {
    let (t, v) = (logits.rows(), logits.cols());
    if targets.len() != t {
        return Err(Error::ShapeMismatch {
            op: "softmax_ce_loss",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    if let Some((position, &target)) = targets.iter().enumerate().find(|(_, &tg)| tg >= v) {
        return Err(Error::TargetOutOfRange {
            position,
            target,
            vocab: v,
        });
    }
    let inv_t = T::one() / T::cst(t as f64);
    let mut dlogits = Tensor::zeros(&[t, v]);
    let mut total = T::zero();
    for (i, &target) in targets.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let denom = row.iter().fold(T::zero(), |acc, &x| acc + (x - max).exp());
        let log_denom = denom.ln();
        total += log_denom - (row[target] - max);
        for (j, d) in dlogits.row_mut(i).iter_mut().enumerate() {
            let prob = (row[j] - max).exp() / denom;
            let onehot = if j == target { T::one() } else { T::zero() };
            *d = (prob - onehot) * inv_t;
        }
    }
    Ok((total * inv_t, dlogits))
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn finite_difference_grad<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    step: T,
) -> Tensor<T> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    let two_step = step + step;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / two_step;
    }
    grad
}
