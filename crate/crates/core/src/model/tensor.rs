//! Dense row-major tensors and the handful of kernels the encoder needs.
//!
//! Every output element is reduced in a fixed order, so results are
//! bit-identical whatever the rayon pool size.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rayon::prelude::*;

/// Floating-point element type: `f32` for training, `f64` for gradient checks.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Send + Sync + Debug + Default + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|&x| x.as_f64() * x.as_f64()).sum()
    }
}

const PAR_WORK: usize = 1 << 15;

/// `c[n,m] = a[n,k] * b[k,m]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    let mut c = vec![T::zero(); n * m];
    if m == 0 {
        return c;
    }
    let row = |(i, crow): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if n * k * m >= PAR_WORK {
        c.par_chunks_mut(m).enumerate().for_each(row);
    } else {
        c.chunks_mut(m).enumerate().for_each(row);
    }
    c
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// `c[k,m] = a[n,k]^T * b[n,m]`.
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    matmul(&transpose(a, n, k), b, k, n, m)
}

/// `c[n,m] = a[n,k] * b[m,k]^T`.
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    matmul(a, &transpose(b, m, k), n, k, m)
}

pub fn add_row_bias<T: Real>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Sum over rows of an `[n, cols]` matrix, accumulated into `out`.
pub fn accumulate_column_sums<T: Real>(x: &[T], cols: usize, out: &mut [T]) {
    for row in x.chunks(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

pub fn add_assign<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `y = x W + b` for `x: [n, in]`, `W: [in, out]`.
pub fn linear<T: Real>(x: &[T], w: &[T], b: &[T], n: usize, d_in: usize, d_out: usize) -> Vec<T> {
    let mut y = matmul(x, w, n, d_in, d_out);
    add_row_bias(&mut y, b);
    y
}

/// Backward of [`linear`]: accumulates `dW`, `db` and returns `dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    n: usize,
    d_in: usize,
    d_out: usize,
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    add_assign(dw, &matmul_tn(x, dy, n, d_in, d_out));
    accumulate_column_sums(dy, d_out, db);
    matmul_nt(dy, w, n, d_out, d_in)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let three = T::lit(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Per-row statistics kept for the layer-norm backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Real>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    eps: f64,
) -> (Vec<T>, LayerNormCache<T>) {
    let h = gain.len();
    let rows = x.len() / h;
    let hn = T::lit(h as f64);
    let eps = T::lit(eps);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * h..(r + 1) * h];
        let mean = xr.iter().copied().sum::<T>() / hn;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hn;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..h {
            let xh = (xr[j] - mean) * rs;
            xhat[r * h + j] = xh;
            y[r * h + j] = xh * gain[j] + bias[j];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward<T: Real>(
    dy: &[T],
    cache: &LayerNormCache<T>,
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let h = gain.len();
    let rows = dy.len() / h;
    let hn = T::lit(h as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dxhat = vec![T::zero(); h];
    for r in 0..rows {
        let dyr = &dy[r * h..(r + 1) * h];
        let xh = &cache.xhat[r * h..(r + 1) * h];
        for j in 0..h {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
        }
        let mean_d = dxhat.iter().copied().sum::<T>() / hn;
        let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / hn;
        let rs = cache.rstd[r];
        for j in 0..h {
            dx[r * h + j] = rs * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}
