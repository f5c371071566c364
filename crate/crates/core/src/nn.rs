//! Minimal dense and convolutional layers over flat parameter vectors.
//!
//! Every network keeps all of its weights in one `Vec<F>` with a fixed
//! layout, so optimizers, target-network syncs, checkpoints and gradient
//! checks all work on plain slices. Matrix products go through
//! `matrixmultiply`; everything is row-major.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;

/// Floating-point element type of a network.
pub trait Scalar: Float + Default + Debug + Send + Sync + AddAssign + SubAssign + MulAssign + 'static {
    /// `c ← α·op(a)·op(b) + β·c` with `op` an optional transpose.
    ///
    /// `a` is `m×k` (or `k×m` when `ta`), `b` is `k×n` (or `n×k` when `tb`),
    /// `c` is `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(ta: bool, tb: bool, m: usize, n: usize, k: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);

    fn of(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("f64 conversion")
    }

    fn f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).expect("f64 conversion")
    }
}

fn strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    // logical (rows × cols) view of a row-major buffer
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(ta: bool, tb: bool, m: usize, n: usize, k: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(ta, m, k);
                let (rsb, csb) = strides(tb, k, n);
                // SAFETY: the length checks above cover every index addressed by the strides.
                unsafe {
                    $f(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Shape of a fully connected layer inside a flat parameter vector:
/// `out × in` weights followed by `out` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    pub offset: usize,
}

impl Dense {
    pub fn n_params(&self) -> usize {
        self.output * (self.input + 1)
    }

    pub fn weights<'a, F>(&self, p: &'a [F]) -> &'a [F] {
        &p[self.offset..self.offset + self.input * self.output]
    }

    pub fn bias<'a, F>(&self, p: &'a [F]) -> &'a [F] {
        let s = self.offset + self.input * self.output;
        &p[s..s + self.output]
    }

    /// `y = x·Wᵀ + b` for a batch of rows.
    pub fn forward<F: Scalar>(&self, p: &[F], x: &[F], batch: usize) -> Vec<F> {
        let mut y = Vec::with_capacity(batch * self.output);
        for _ in 0..batch {
            y.extend_from_slice(self.bias(p));
        }
        F::gemm(false, true, batch, self.output, self.input, F::one(), x, self.weights(p), F::one(), &mut y);
        y
    }

    /// Accumulates parameter gradients into `g`; returns `dL/dx` if asked.
    pub fn backward<F: Scalar>(&self, p: &[F], x: &[F], dy: &[F], batch: usize, g: &mut [F], want_dx: bool) -> Option<Vec<F>> {
        let (gw, gb) = g[self.offset..self.offset + self.n_params()].split_at_mut(self.input * self.output);
        F::gemm(true, false, self.output, self.input, batch, F::one(), dy, x, F::one(), gw);
        for row in dy.chunks_exact(self.output) {
            for (b, d) in gb.iter_mut().zip(row) {
                *b += *d;
            }
        }
        want_dx.then(|| {
            let mut dx = vec![F::zero(); batch * self.input];
            F::gemm(false, false, batch, self.input, self.output, F::one(), dy, self.weights(p), F::zero(), &mut dx);
            dx
        })
    }

    /// Uniform `±1/√fan_in` initialization of weights and biases.
    pub fn init<F: Scalar, R: Rng>(&self, p: &mut [F], rng: &mut R) {
        let bound = 1.0 / (self.input as f64).sqrt();
        for v in &mut p[self.offset..self.offset + self.n_params()] {
            *v = F::of(rng.random_range(-bound..=bound));
        }
    }
}

/// 3×3 convolution, stride 2, zero padding 1; `out_c × (in_c·9)` weights then biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3x3s2 {
    pub in_c: usize,
    pub out_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub offset: usize,
}

impl Conv3x3s2 {
    pub fn out_h(&self) -> usize {
        (self.in_h + 1) / 2
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 1) / 2
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_h() * self.out_w()
    }

    fn patch(&self) -> usize {
        self.in_c * 9
    }

    pub fn n_params(&self) -> usize {
        self.out_c * (self.patch() + 1)
    }

    fn as_dense(&self) -> Dense {
        Dense {
            input: self.patch(),
            output: self.out_c,
            offset: self.offset,
        }
    }

    /// Unrolls one `[c][h][w]` sample into a `(in_c·9) × (out_h·out_w)` matrix.
    pub fn im2col<F: Scalar>(&self, x: &[F], cols: &mut [F]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let hw = oh * ow;
        for c in 0..self.in_c {
            let plane = &x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[(c * 9 + ky * 3 + kx) * hw..(c * 9 + ky * 3 + kx + 1) * hw];
                    for oy in 0..oh {
                        let iy = (2 * oy + ky) as isize - 1;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= self.in_h as isize {
                            dst.fill(F::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (2 * ox + kx) as isize - 1;
                            *d = if ix < 0 || ix >= self.in_w as isize { F::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im<F: Scalar>(&self, cols: &[F], dx: &mut [F]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let hw = oh * ow;
        for c in 0..self.in_c {
            let plane = &mut dx[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &cols[(c * 9 + ky * 3 + kx) * hw..(c * 9 + ky * 3 + kx + 1) * hw];
                    for oy in 0..oh {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix >= 0 && ix < self.in_w as isize {
                                plane[iy as usize * self.in_w + ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Forward pass for a batch; returns outputs and the unrolled inputs.
    pub fn forward<F: Scalar>(&self, p: &[F], x: &[F], batch: usize) -> (Vec<F>, Vec<F>) {
        let hw = self.out_h() * self.out_w();
        let ncol = self.patch() * hw;
        let mut cols = vec![F::zero(); batch * ncol];
        let mut y = vec![F::zero(); batch * self.out_len()];
        let d = self.as_dense();
        let (w, b) = (d.weights(p), d.bias(p));
        for s in 0..batch {
            let col = &mut cols[s * ncol..(s + 1) * ncol];
            self.im2col(&x[s * self.in_len()..(s + 1) * self.in_len()], col);
            let out = &mut y[s * self.out_len()..(s + 1) * self.out_len()];
            for (o, row) in out.chunks_exact_mut(hw).enumerate() {
                row.fill(b[o]);
            }
            F::gemm(false, false, self.out_c, hw, self.patch(), F::one(), w, col, F::one(), out);
        }
        (y, cols)
    }

    pub fn backward<F: Scalar>(&self, p: &[F], cols: &[F], dy: &[F], batch: usize, g: &mut [F], want_dx: bool) -> Option<Vec<F>> {
        let hw = self.out_h() * self.out_w();
        let ncol = self.patch() * hw;
        let d = self.as_dense();
        let w = d.weights(p);
        let mut dx = want_dx.then(|| vec![F::zero(); batch * self.in_len()]);
        let mut dcols = vec![F::zero(); if want_dx { ncol } else { 0 }];
        let (gw, gb) = g[self.offset..self.offset + self.n_params()].split_at_mut(self.out_c * self.patch());
        for s in 0..batch {
            let col = &cols[s * ncol..(s + 1) * ncol];
            let dys = &dy[s * self.out_len()..(s + 1) * self.out_len()];
            F::gemm(false, true, self.out_c, self.patch(), hw, F::one(), dys, col, F::one(), gw);
            for (o, row) in dys.chunks_exact(hw).enumerate() {
                gb[o] += row.iter().fold(F::zero(), |a, &v| a + v);
            }
            if let Some(dx) = dx.as_mut() {
                F::gemm(true, false, self.patch(), hw, self.out_c, F::one(), w, dys, F::zero(), &mut dcols);
                self.col2im(&dcols, &mut dx[s * self.in_len()..(s + 1) * self.in_len()]);
            }
        }
        dx
    }

    pub fn init<F: Scalar, R: Rng>(&self, p: &mut [F], rng: &mut R) {
        self.as_dense().init(p, rng)
    }
}

pub fn relu_inplace<F: Scalar>(x: &mut [F]) {
    for v in x {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

/// Masks `dy` where the ReLU output was not positive.
pub fn relu_backward<F: Scalar>(activated: &[F], dy: &mut [F]) {
    for (a, d) in activated.iter().zip(dy) {
        if *a <= F::zero() {
            *d = F::zero();
        }
    }
}

pub fn tanh_inplace<F: Scalar>(x: &mut [F]) {
    for v in x {
        *v = v.tanh();
    }
}

pub fn tanh_backward<F: Scalar>(activated: &[F], dy: &mut [F]) {
    for (a, d) in activated.iter().zip(dy) {
        *d *= F::one() - *a * *a;
    }
}

/// Classical momentum SGD: `v ← μv + g`, `θ ← θ − lr·v`.
pub fn sgd_momentum<F: Scalar>(params: &mut [F], velocity: &mut [F], grads: &[F], lr: f64, momentum: f64) {
    let (lr, mu) = (F::of(lr), F::of(momentum));
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        *v = mu * *v + *g;
        *p -= lr * *v;
    }
}
