//! A small neural-network substrate with hand-written backward passes:
//! 2-D convolution, ReLU, frequency max-pooling, GRU, dense, sigmoid,
//! class-weighted binary cross-entropy and Adam.
//!
//! Layers are generic over [`Real`] so gradient checks run in `f64` while
//! training runs in `f32`. A layer's gradient container is the layer type
//! itself, zero-initialized by [`Module::zeros_like`].

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};

pub trait Real: Float + Default + Debug + Send + Sync + AddAssign + SubAssign + MulAssign + Sum + 'static {
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }

    fn expect_shape(&self, what: &str, rank: usize) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::ShapeMismatch(format!("{what}: expected rank {rank}, got {:?}", self.shape)));
        }
        Ok(())
    }
}

/// Something that owns parameter tensors.
pub trait Module<T: Real> {
    fn params(&self) -> Vec<&Tensor<T>>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;
    /// Same structure with every parameter zeroed; used as the gradient buffer.
    fn zeros_like(&self) -> Self;

    fn zero(&mut self) {
        for p in self.params_mut() {
            p.fill(T::zero());
        }
    }

    /// Element-wise accumulate another module of the same structure.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            a.add_assign(b);
        }
    }

    fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

// ---------------------------------------------------------------- conv2d

/// Stride-1 "same" 2-D cross-correlation over `B x C x T x F` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    /// `C_out x C_in x KH x KW`
    pub weight: Tensor<T>,
    /// `C_out`
    pub bias: Tensor<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng>(c_in: usize, c_out: usize, kh: usize, kw: usize, rng: &mut R) -> Self {
        let fan_in = (c_in * kh * kw) as f64;
        Self {
            weight: Tensor::uniform(&[c_out, c_in, kh, kw], (6.0 / fan_in).sqrt(), rng),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        let s = &self.weight.shape;
        (s[0], s[1], s[2], s[3])
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        x.expect_shape("conv2d input", 4)?;
        let (_, ci, kh, kw) = self.dims();
        if x.shape[1] != ci {
            return Err(Error::ShapeMismatch(format!("conv2d expects {ci} channels, got {}", x.shape[1])));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::ShapeMismatch("same padding needs odd kernels".into()));
        }
        Ok((x.shape[0], x.shape[2], x.shape[3]))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, t_len, f_len) = self.check(x)?;
        let (co_n, ci_n, kh_n, kw_n) = self.dims();
        let (ph, pw) = ((kh_n / 2) as isize, (kw_n / 2) as isize);
        let plane = t_len * f_len;
        let mut y = Tensor::zeros(&[b, co_n, t_len, f_len]);
        for bi in 0..b {
            for co in 0..co_n {
                let out = &mut y.data[(bi * co_n + co) * plane..][..plane];
                out.iter_mut().for_each(|v| *v = self.bias.data[co]);
                for ci in 0..ci_n {
                    let xin = &x.data[(bi * ci_n + ci) * plane..][..plane];
                    for kh in 0..kh_n {
                        let dt = kh as isize - ph;
                        let (t_lo, t_hi) = ((-dt).max(0) as usize, (t_len as isize - dt).min(t_len as isize) as usize);
                        for kw in 0..kw_n {
                            let df = kw as isize - pw;
                            let (f_lo, f_hi) = ((-df).max(0) as usize, (f_len as isize - df).min(f_len as isize) as usize);
                            if f_lo >= f_hi {
                                continue;
                            }
                            let w = self.weight.data[((co * ci_n + ci) * kh_n + kh) * kw_n + kw];
                            for t in t_lo..t_hi {
                                let ts = (t as isize + dt) as usize;
                                let o = &mut out[t * f_len + f_lo..t * f_len + f_hi];
                                let src = (ts * f_len) as isize + f_lo as isize + df;
                                let i = &xin[src as usize..src as usize + (f_hi - f_lo)];
                                for (a, &v) in o.iter_mut().zip(i) {
                                    *a += w * v;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients into `grads`; returns the input gradient.
    pub fn backward(&self, x: &Tensor<T>, gy: &Tensor<T>, grads: &mut Conv2d<T>) -> Result<Tensor<T>> {
        let (b, t_len, f_len) = self.check(x)?;
        let (co_n, ci_n, kh_n, kw_n) = self.dims();
        if gy.shape != [b, co_n, t_len, f_len] {
            return Err(Error::ShapeMismatch(format!("conv2d output gradient {:?}", gy.shape)));
        }
        let (ph, pw) = ((kh_n / 2) as isize, (kw_n / 2) as isize);
        let plane = t_len * f_len;
        let mut gx = Tensor::zeros(&x.shape);
        for bi in 0..b {
            for co in 0..co_n {
                let g = &gy.data[(bi * co_n + co) * plane..][..plane];
                grads.bias.data[co] += g.iter().copied().sum::<T>();
                for ci in 0..ci_n {
                    let xoff = (bi * ci_n + ci) * plane;
                    for kh in 0..kh_n {
                        let dt = kh as isize - ph;
                        let (t_lo, t_hi) = ((-dt).max(0) as usize, (t_len as isize - dt).min(t_len as isize) as usize);
                        for kw in 0..kw_n {
                            let df = kw as isize - pw;
                            let (f_lo, f_hi) = ((-df).max(0) as usize, (f_len as isize - df).min(f_len as isize) as usize);
                            if f_lo >= f_hi {
                                continue;
                            }
                            let widx = ((co * ci_n + ci) * kh_n + kh) * kw_n + kw;
                            let w = self.weight.data[widx];
                            let mut gw = T::zero();
                            for t in t_lo..t_hi {
                                let ts = (t as isize + dt) as usize;
                                let go = &g[t * f_len + f_lo..t * f_len + f_hi];
                                let src = xoff + ((ts * f_len) as isize + f_lo as isize + df) as usize;
                                let xi = &x.data[src..src + (f_hi - f_lo)];
                                let gi = &mut gx.data[src..src + (f_hi - f_lo)];
                                for ((a, &gv), &xv) in gi.iter_mut().zip(go).zip(xi) {
                                    *a += w * gv;
                                    gw += gv * xv;
                                }
                            }
                            grads.weight.data[widx] += gw;
                        }
                    }
                }
            }
        }
        Ok(gx)
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
    fn zeros_like(&self) -> Self {
        Self { weight: Tensor::zeros(&self.weight.shape), bias: Tensor::zeros(&self.bias.shape) }
    }
}

// ---------------------------------------------------------------- elementwise

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| v.max(T::zero())).collect() }
}

/// Gradient of ReLU given the layer's input.
pub fn relu_backward<T: Real>(x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let data = x.data.iter().zip(&gy.data).map(|(&v, &g)| if v > T::zero() { g } else { T::zero() }).collect();
    Tensor { shape: x.shape.clone(), data }
}

pub fn sigmoid_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| sigmoid_scalar(v)).collect() }
}

/// Gradient of the sigmoid given its output `y`.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let data = y.data.iter().zip(&gy.data).map(|(&s, &g)| g * s * (T::one() - s)).collect();
    Tensor { shape: y.shape.clone(), data }
}

// ---------------------------------------------------------------- pooling

/// Max-pool `B x C x T x F` along the last (frequency) axis with window and
/// stride `pool`; trailing bins that do not fill a window are dropped.
pub fn maxpool_freq_forward<T: Real>(x: &Tensor<T>, pool: usize) -> Result<Tensor<T>> {
    x.expect_shape("maxpool input", 4)?;
    let (b, c, t, f) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let fo = f / pool;
    if pool == 0 || fo == 0 {
        return Err(Error::ShapeMismatch(format!("cannot pool {f} bins by {pool}")));
    }
    let mut y = Tensor::zeros(&[b, c, t, fo]);
    for row in 0..b * c * t {
        let src = &x.data[row * f..row * f + f];
        let dst = &mut y.data[row * fo..row * fo + fo];
        for (j, d) in dst.iter_mut().enumerate() {
            *d = src[j * pool..j * pool + pool].iter().copied().fold(T::neg_infinity(), T::max);
        }
    }
    Ok(y)
}

/// Routes each output gradient to the first maximal input of its window.
pub fn maxpool_freq_backward<T: Real>(x: &Tensor<T>, gy: &Tensor<T>, pool: usize) -> Result<Tensor<T>> {
    x.expect_shape("maxpool input", 4)?;
    let f = x.shape[3];
    let fo = f / pool;
    if gy.shape != [x.shape[0], x.shape[1], x.shape[2], fo] {
        return Err(Error::ShapeMismatch(format!("maxpool output gradient {:?}", gy.shape)));
    }
    let mut gx = Tensor::zeros(&x.shape);
    for row in 0..x.shape[0] * x.shape[1] * x.shape[2] {
        let src = &x.data[row * f..row * f + f];
        for j in 0..fo {
            let win = &src[j * pool..j * pool + pool];
            let mut arg = 0;
            for (k, &v) in win.iter().enumerate() {
                if v > win[arg] {
                    arg = k;
                }
            }
            gx.data[row * f + j * pool + arg] += gy.data[row * fo + j];
        }
    }
    Ok(gx)
}

/// `B x C x T x F` to `B x T x (C*F)`, channel-major within a step.
pub fn to_sequence<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_shape("sequence input", 4)?;
    let (b, c, t, f) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let mut y = Tensor::zeros(&[b, t, c * f]);
    for bi in 0..b {
        for ci in 0..c {
            for ti in 0..t {
                let src = &x.data[((bi * c + ci) * t + ti) * f..][..f];
                y.data[(bi * t + ti) * c * f + ci * f..][..f].copy_from_slice(src);
            }
        }
    }
    Ok(y)
}

/// Inverse of [`to_sequence`] for gradients.
pub fn from_sequence<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let (b, c, t, f) = (shape[0], shape[1], shape[2], shape[3]);
    if g.shape != [b, t, c * f] {
        return Err(Error::ShapeMismatch(format!("sequence gradient {:?} vs {shape:?}", g.shape)));
    }
    let mut x = Tensor::zeros(shape);
    for bi in 0..b {
        for ci in 0..c {
            for ti in 0..t {
                let src = &g.data[(bi * t + ti) * c * f + ci * f..][..f];
                x.data[((bi * c + ci) * t + ti) * f..][..f].copy_from_slice(src);
            }
        }
    }
    Ok(x)
}

// ---------------------------------------------------------------- dense

/// `y = x W^T + b` over `B x I` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// `O x I`
    pub weight: Tensor<T>,
    /// `O`
    pub bias: Tensor<T>,
}

impl<T: Real> Dense<T> {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        Self { weight: Tensor::uniform(&[outputs, inputs], bound, rng), bias: Tensor::zeros(&[outputs]) }
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        x.expect_shape("dense input", 2)?;
        let (o, i) = (self.weight.shape[0], self.weight.shape[1]);
        if x.shape[1] != i {
            return Err(Error::ShapeMismatch(format!("dense expects {i} inputs, got {}", x.shape[1])));
        }
        Ok((x.shape[0], i, o))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, i, o) = self.check(x)?;
        let mut y = Tensor::zeros(&[b, o]);
        for bi in 0..b {
            let xr = &x.data[bi * i..][..i];
            for oi in 0..o {
                let w = &self.weight.data[oi * i..][..i];
                y.data[bi * o + oi] = self.bias.data[oi] + w.iter().zip(xr).map(|(&a, &v)| a * v).sum::<T>();
            }
        }
        Ok(y)
    }

    pub fn backward(&self, x: &Tensor<T>, gy: &Tensor<T>, grads: &mut Dense<T>) -> Result<Tensor<T>> {
        let (b, i, o) = self.check(x)?;
        if gy.shape != [b, o] {
            return Err(Error::ShapeMismatch(format!("dense output gradient {:?}", gy.shape)));
        }
        let mut gx = Tensor::zeros(&x.shape);
        for bi in 0..b {
            let xr = &x.data[bi * i..][..i];
            for oi in 0..o {
                let g = gy.data[bi * o + oi];
                grads.bias.data[oi] += g;
                let w = &self.weight.data[oi * i..][..i];
                let gw = &mut grads.weight.data[oi * i..][..i];
                let gxr = &mut gx.data[bi * i..][..i];
                for k in 0..i {
                    gw[k] += g * xr[k];
                    gxr[k] += g * w[k];
                }
            }
        }
        Ok(gx)
    }
}

impl<T: Real> Module<T> for Dense<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
    fn zeros_like(&self) -> Self {
        Self { weight: Tensor::zeros(&self.weight.shape), bias: Tensor::zeros(&self.bias.shape) }
    }
}

// ---------------------------------------------------------------- GRU

/// Single-layer GRU with gate order (reset, update, candidate):
///
/// ```text
/// r = s(Wir x + bir + Whr h + bhr)
/// z = s(Wiz x + biz + Whz h + bhz)
/// n = tanh(Win x + bin + r * (Whn h + bhn))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Gru<T> {
    /// `3H x D`
    pub w_ih: Tensor<T>,
    /// `3H x H`
    pub w_hh: Tensor<T>,
    pub b_ih: Tensor<T>,
    pub b_hh: Tensor<T>,
}

/// Saved activations from [`Gru::forward`].
#[derive(Debug, Clone)]
pub struct GruCache<T> {
    /// `B x T x H` hidden states.
    pub hidden: Tensor<T>,
    r: Vec<T>,
    z: Vec<T>,
    n: Vec<T>,
    hn: Vec<T>,
}

impl<T: Real> Gru<T> {
    pub fn new<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: Tensor::uniform(&[3 * hidden, input], bound, rng),
            w_hh: Tensor::uniform(&[3 * hidden, hidden], bound, rng),
            b_ih: Tensor::zeros(&[3 * hidden]),
            b_hh: Tensor::zeros(&[3 * hidden]),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hh.shape[1]
    }

    pub fn input_size(&self) -> usize {
        self.w_ih.shape[1]
    }

    fn matvec(w: &[T], b: &[T], x: &[T], out: &mut [T]) {
        let cols = x.len();
        for (r, o) in out.iter_mut().enumerate() {
            *o = b[r] + w[r * cols..][..cols].iter().zip(x).map(|(&a, &v)| a * v).sum::<T>();
        }
    }

    /// Runs from a zero initial state over a `B x T x D` sequence.
    pub fn forward(&self, x: &Tensor<T>) -> Result<GruCache<T>> {
        x.expect_shape("gru input", 3)?;
        let (b, t_len, d) = (x.shape[0], x.shape[1], x.shape[2]);
        let h = self.hidden_size();
        if d != self.input_size() {
            return Err(Error::ShapeMismatch(format!("gru expects {} inputs, got {d}", self.input_size())));
        }
        let steps = b * t_len;
        let mut cache = GruCache {
            hidden: Tensor::zeros(&[b, t_len, h]),
            r: vec![T::zero(); steps * h],
            z: vec![T::zero(); steps * h],
            n: vec![T::zero(); steps * h],
            hn: vec![T::zero(); steps * h],
        };
        let mut gi = vec![T::zero(); 3 * h];
        let mut gh = vec![T::zero(); 3 * h];
        let zeros = vec![T::zero(); h];
        for bi in 0..b {
            for t in 0..t_len {
                let s = bi * t_len + t;
                let xt = &x.data[s * d..][..d];
                let prev: Vec<T> = if t == 0 { zeros.clone() } else { cache.hidden.data[(s - 1) * h..][..h].to_vec() };
                Self::matvec(&self.w_ih.data, &self.b_ih.data, xt, &mut gi);
                Self::matvec(&self.w_hh.data, &self.b_hh.data, &prev, &mut gh);
                for j in 0..h {
                    let r = sigmoid_scalar(gi[j] + gh[j]);
                    let z = sigmoid_scalar(gi[h + j] + gh[h + j]);
                    let hn = gh[2 * h + j];
                    let n = (gi[2 * h + j] + r * hn).tanh();
                    cache.r[s * h + j] = r;
                    cache.z[s * h + j] = z;
                    cache.n[s * h + j] = n;
                    cache.hn[s * h + j] = hn;
                    cache.hidden.data[s * h + j] = (T::one() - z) * n + z * prev[j];
                }
            }
        }
        Ok(cache)
    }

    /// Backpropagation through time. `g_hidden` is the loss gradient w.r.t.
    /// every hidden state (`B x T x H`).
    pub fn backward(&self, x: &Tensor<T>, cache: &GruCache<T>, g_hidden: &Tensor<T>, grads: &mut Gru<T>) -> Result<Tensor<T>> {
        let (b, t_len, d) = (x.shape[0], x.shape[1], x.shape[2]);
        let h = self.hidden_size();
        if g_hidden.shape != [b, t_len, h] {
            return Err(Error::ShapeMismatch(format!("gru hidden gradient {:?}", g_hidden.shape)));
        }
        let mut gx = Tensor::zeros(&x.shape);
        let mut dgi = vec![T::zero(); 3 * h];
        let mut dgh = vec![T::zero(); 3 * h];
        for bi in 0..b {
            let mut dh_next = vec![T::zero(); h];
            for t in (0..t_len).rev() {
                let s = bi * t_len + t;
                let prev: Vec<T> = if t == 0 { vec![T::zero(); h] } else { cache.hidden.data[(s - 1) * h..][..h].to_vec() };
                let mut dh_prev = vec![T::zero(); h];
                for j in 0..h {
                    let dh = g_hidden.data[s * h + j] + dh_next[j];
                    let (r, z, n, hn) = (cache.r[s * h + j], cache.z[s * h + j], cache.n[s * h + j], cache.hn[s * h + j]);
                    let dn = dh * (T::one() - z);
                    let dz = dh * (prev[j] - n);
                    dh_prev[j] = dh * z;
                    let dn_pre = dn * (T::one() - n * n);
                    let dr_pre = dn_pre * hn * r * (T::one() - r);
                    let dz_pre = dz * z * (T::one() - z);
                    dgi[j] = dr_pre;
                    dgi[h + j] = dz_pre;
                    dgi[2 * h + j] = dn_pre;
                    dgh[j] = dr_pre;
                    dgh[h + j] = dz_pre;
                    dgh[2 * h + j] = dn_pre * r;
                }
                let xt = &x.data[s * d..][..d];
                let gxt = &mut gx.data[s * d..][..d];
                for row in 0..3 * h {
                    let g = dgi[row];
                    grads.b_ih.data[row] += g;
                    let w = &self.w_ih.data[row * d..][..d];
                    let gw = &mut grads.w_ih.data[row * d..][..d];
                    for k in 0..d {
                        gw[k] += g * xt[k];
                        gxt[k] += g * w[k];
                    }
                    let g = dgh[row];
                    grads.b_hh.data[row] += g;
                    let w = &self.w_hh.data[row * h..][..h];
                    let gw = &mut grads.w_hh.data[row * h..][..h];
                    for k in 0..h {
                        gw[k] += g * prev[k];
                        dh_prev[k] += g * w[k];
                    }
                }
                dh_next = dh_prev;
            }
        }
        Ok(gx)
    }
}

impl<T: Real> Module<T> for Gru<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.w_ih, &self.w_hh, &self.b_ih, &self.b_hh]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.b_ih, &mut self.b_hh]
    }
    fn zeros_like(&self) -> Self {
        Self {
            w_ih: Tensor::zeros(&self.w_ih.shape),
            w_hh: Tensor::zeros(&self.w_hh.shape),
            b_ih: Tensor::zeros(&self.b_ih.shape),
            b_hh: Tensor::zeros(&self.b_hh.shape),
        }
    }
}

/// Last time step of a `B x T x H` sequence.
pub fn last_step<T: Real>(seq: &Tensor<T>) -> Tensor<T> {
    let (b, t, h) = (seq.shape[0], seq.shape[1], seq.shape[2]);
    let mut out = Tensor::zeros(&[b, h]);
    for bi in 0..b {
        out.data[bi * h..][..h].copy_from_slice(&seq.data[(bi * t + t - 1) * h..][..h]);
    }
    out
}

/// Scatter a `B x H` gradient back onto the last step of `B x T x H`.
pub fn last_step_backward<T: Real>(g: &Tensor<T>, seq_shape: &[usize]) -> Tensor<T> {
    let (b, t, h) = (seq_shape[0], seq_shape[1], seq_shape[2]);
    let mut out = Tensor::zeros(seq_shape);
    for bi in 0..b {
        out.data[(bi * t + t - 1) * h..][..h].copy_from_slice(&g.data[bi * h..][..h]);
    }
    out
}

// ---------------------------------------------------------------- loss

/// Posterior clamp applied by [`weighted_bce`].
pub const PROB_CLAMP: f64 = 1e-7;

/// Per-category weights `[w(theta, y=0), w(theta, y=1)]`.
pub type ClassWeights = Vec<[f64; 2]>;

/// Balanced weights `N / (2 * count(theta, y))`. A category with an empty
/// class gets both weights zeroed.
pub fn balanced_class_weights(labels: &[Vec<u8>]) -> ClassWeights {
    let n = labels.len();
    let theta = labels.first().map_or(0, Vec::len);
    (0..theta)
        .map(|t| {
            let pos = labels.iter().filter(|y| y[t] > 0).count();
            let neg = n - pos;
            if pos == 0 || neg == 0 {
                log::warn!("category {t} has a single class in the training split; its loss weight is zeroed");
                [0.0, 0.0]
            } else {
                [n as f64 / (2.0 * neg as f64), n as f64 / (2.0 * pos as f64)]
            }
        })
        .collect()
}

/// Mean over the batch of `sum_theta w(theta, y) * BCE(p, y)`, with
/// posteriors clamped to `[1e-7, 1 - 1e-7]`. Returns the loss and its
/// gradient w.r.t. the (unclamped) posteriors.
pub fn weighted_bce<T: Real>(p: &Tensor<T>, y: &Tensor<T>, weights: &[[f64; 2]]) -> Result<(f64, Tensor<T>)> {
    p.expect_shape("bce posteriors", 2)?;
    if p.shape != y.shape || weights.len() != p.shape[1] {
        return Err(Error::ShapeMismatch(format!(
            "bce: posteriors {:?}, labels {:?}, {} weight pairs",
            p.shape,
            y.shape,
            weights.len()
        )));
    }
    let (b, th) = (p.shape[0], p.shape[1]);
    let mut loss = 0.0;
    let mut g = Tensor::zeros(&p.shape);
    for i in 0..b * th {
        let raw = p.data[i].f64();
        let pc = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let label = y.data[i].f64();
        let w = weights[i % th][usize::from(label > 0.5)];
        loss += w * (-label * pc.ln() - (1.0 - label) * (1.0 - pc).ln());
        let inside = raw > PROB_CLAMP && raw < 1.0 - PROB_CLAMP;
        let d = if inside { w * (-label / pc + (1.0 - label) / (1.0 - pc)) } else { 0.0 };
        g.data[i] = T::of(d / b as f64);
    }
    Ok((loss / b as f64, g))
}

// ---------------------------------------------------------------- Adam

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[&Tensor<T>], lr: f64) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(&p.shape)).collect(),
            v: params.iter().map(|p| Tensor::zeros(&p.shape)).collect(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: Vec<&Tensor<T>>) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch("adam: parameter count changed".into()));
        }
        for ((p, g), m) in params.iter().zip(&grads).zip(&self.m) {
            if p.shape != g.shape || p.shape != m.shape {
                return Err(Error::ShapeMismatch(format!("adam: {:?} vs {:?}", p.shape, g.shape)));
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.m[i].data;
            let v = &mut self.v[i].data;
            for k in 0..p.data.len() {
                let gk = g.data[k].f64();
                let mk = b1 * m[k].f64() + (1.0 - b1) * gk;
                let vk = b2 * v[k].f64() + (1.0 - b2) * gk * gk;
                m[k] = T::of(mk);
                v[k] = T::of(vk);
                let update = self.lr * (mk / c1) / ((vk / c2).sqrt() + self.eps);
                p.data[k] = T::of(p.data[k].f64() - update);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- gradient checks

/// Central finite-difference gradient checking, independent of the
/// hand-written backward passes.
pub mod gradcheck {
    /// `||a - b|| / max(||a||, ||b||)`, 0 when both are zero.
    pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
        let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
        let scale = na.max(nb);
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }

    /// Numeric gradient of `f` at `x` with step `h`.
    pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|i| {
                probe[i] = x[i] + h;
                let up = f(&probe);
                probe[i] = x[i] - h;
                let down = f(&probe);
                probe[i] = x[i];
                (up - down) / (2.0 * h)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{numeric_gradient, relative_error};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-6;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::uniform(shape, 1.0, r)
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_identity_and_zero() {
        let mut r = rng(0);
        let x = random(&[2, 1, 5, 4], &mut r);
        let mut conv = Conv2d::<f64>::new(1, 1, 1, 1, &mut r);
        conv.weight.data[0] = 1.0;
        assert_eq!(conv.forward(&x).unwrap().data, x.data);
        let mut zero = Conv2d::<f64>::new(1, 2, 3, 3, &mut r);
        zero.weight.fill(0.0);
        let y = zero.forward(&x).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0));
        let mut g = zero.zeros_like();
        let gx = zero.backward(&x, &random(&y.shape, &mut r), &mut g).unwrap();
        assert!(gx.data.iter().all(|&v| v == 0.0));
        let bad = random(&[1, 3, 5, 4], &mut r);
        assert!(matches!(zero.forward(&bad), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn conv_gradients() {
        let mut r = rng(1);
        let conv = Conv2d::<f64>::new(2, 3, 3, 3, &mut r);
        let mut conv = conv;
        conv.bias = random(&[3], &mut r);
        let x = random(&[2, 2, 5, 4], &mut r);
        let proj = random(&[2, 3, 5, 4], &mut r);
        let mut g = conv.zeros_like();
        let gx = conv.backward(&x, &proj, &mut g).unwrap();
        let num = numeric_gradient(&x.data, H, |v| dot(&conv.forward(&Tensor::new(x.shape.clone(), v.to_vec()).unwrap()).unwrap(), &proj));
        assert!(relative_error(&gx.data, &num) < TOL);
        let num_w = numeric_gradient(&conv.weight.data, H, |v| {
            let mut c = conv.clone();
            c.weight.data = v.to_vec();
            dot(&c.forward(&x).unwrap(), &proj)
        });
        assert!(relative_error(&g.weight.data, &num_w) < TOL);
        let num_b = numeric_gradient(&conv.bias.data, H, |v| {
            let mut c = conv.clone();
            c.bias.data = v.to_vec();
            dot(&c.forward(&x).unwrap(), &proj)
        });
        assert!(relative_error(&g.bias.data, &num_b) < TOL);
    }

    #[test]
    fn pool_relu_sigmoid_gradients() {
        let mut r = rng(2);
        let x = random(&[2, 3, 4, 7], &mut r);
        let y = maxpool_freq_forward(&x, 2).unwrap();
        assert_eq!(y.shape, vec![2, 3, 4, 3]);
        let proj = random(&y.shape, &mut r);
        let gx = maxpool_freq_backward(&x, &proj, 2).unwrap();
        let num = numeric_gradient(&x.data, H, |v| dot(&maxpool_freq_forward(&Tensor::new(x.shape.clone(), v.to_vec()).unwrap(), 2).unwrap(), &proj));
        assert!(relative_error(&gx.data, &num) < TOL);

        let proj = random(&x.shape, &mut r);
        let gx = relu_backward(&x, &proj);
        let num = numeric_gradient(&x.data, H, |v| dot(&relu_forward(&Tensor::new(x.shape.clone(), v.to_vec()).unwrap()), &proj));
        assert!(relative_error(&gx.data, &num) < TOL);

        let s = sigmoid_forward(&x);
        let gx = sigmoid_backward(&s, &proj);
        let num = numeric_gradient(&x.data, H, |v| dot(&sigmoid_forward(&Tensor::new(x.shape.clone(), v.to_vec()).unwrap()), &proj));
        assert!(relative_error(&gx.data, &num) < TOL);
    }

    #[test]
    fn sequence_reshape_round_trip() {
        let mut r = rng(3);
        let x = random(&[2, 3, 4, 5], &mut r);
        let s = to_sequence(&x).unwrap();
        assert_eq!(s.shape, vec![2, 4, 15]);
        assert_eq!(from_sequence(&s, &x.shape).unwrap(), x);
    }

    #[test]
    fn dense_gradients() {
        let mut r = rng(4);
        let mut d = Dense::<f64>::new(5, 3, &mut r);
        d.bias = random(&[3], &mut r);
        let x = random(&[4, 5], &mut r);
        let proj = random(&[4, 3], &mut r);
        let mut g = d.zeros_like();
        let gx = d.backward(&x, &proj, &mut g).unwrap();
        let num = numeric_gradient(&x.data, H, |v| dot(&d.forward(&Tensor::new(x.shape.clone(), v.to_vec()).unwrap()).unwrap(), &proj));
        assert!(relative_error(&gx.data, &num) < TOL);
        let num_w = numeric_gradient(&d.weight.data, H, |v| {
            let mut c = d.clone();
            c.weight.data = v.to_vec();
            dot(&c.forward(&x).unwrap(), &proj)
        });
        assert!(relative_error(&g.weight.data, &num_w) < TOL);
    }

    #[test]
    fn gru_zero_fixed_point() {
        let mut r = rng(5);
        let mut gru = Gru::<f64>::new(3, 4, &mut r);
        gru.b_ih.fill(0.0);
        gru.b_hh.fill(0.0);
        let x = Tensor::zeros(&[2, 6, 3]);
        let c = gru.forward(&x).unwrap();
        assert!(c.hidden.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_single_step_by_hand() {
        // Two hidden units, one input, zero initial state.
        let w_ih = vec![0.5, -0.3, 0.8, 0.1, -0.6, 0.4];
        let b_ih = vec![0.05, -0.02, 0.1, 0.0, 0.2, -0.1];
        let b_hh = vec![0.01, 0.03, -0.05, 0.02, 0.07, -0.04];
        let gru = Gru {
            w_ih: Tensor::new(vec![6, 1], w_ih.clone()).unwrap(),
            w_hh: Tensor::new(vec![6, 2], vec![0.3; 12]).unwrap(),
            b_ih: Tensor::new(vec![6], b_ih.clone()).unwrap(),
            b_hh: Tensor::new(vec![6], b_hh.clone()).unwrap(),
        };
        let x = 0.7;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let c = gru.forward(&Tensor::new(vec![1, 1, 1], vec![x]).unwrap()).unwrap();
        for j in 0..2 {
            let r = sig(w_ih[j] * x + b_ih[j] + b_hh[j]);
            let z = sig(w_ih[2 + j] * x + b_ih[2 + j] + b_hh[2 + j]);
            let n = (w_ih[4 + j] * x + b_ih[4 + j] + r * b_hh[4 + j]).tanh();
            let h = (1.0 - z) * n;
            assert!((c.hidden.data[j] - h).abs() < 1e-15);
        }
    }

    #[test]
    fn gru_gradients() {
        let mut r = rng(6);
        let mut gru = Gru::<f64>::new(3, 4, &mut r);
        gru.b_ih = random(&[12], &mut r);
        gru.b_hh = random(&[12], &mut r);
        let x = random(&[2, 5, 3], &mut r);
        let proj = random(&[2, 5, 4], &mut r);
        let loss = |g: &Gru<f64>, x: &Tensor<f64>| dot(&g.forward(x).unwrap().hidden, &proj);
        let cache = gru.forward(&x).unwrap();
        assert!(cache.hidden.data.iter().all(|v| v.abs() < 1.0));
        let mut g = gru.zeros_like();
        let gx = gru.backward(&x, &cache, &proj, &mut g).unwrap();
        let num = numeric_gradient(&x.data, H, |v| loss(&gru, &Tensor::new(x.shape.clone(), v.to_vec()).unwrap()));
        assert!(relative_error(&gx.data, &num) < TOL);
        for (pi, analytic) in g.params().iter().enumerate() {
            let base = gru.params()[pi].data.clone();
            let num = numeric_gradient(&base, H, |v| {
                let mut c = gru.clone();
                c.params_mut()[pi].data = v.to_vec();
                loss(&c, &x)
            });
            assert!(relative_error(&analytic.data, &num) < TOL, "param {pi}");
        }
    }

    #[test]
    fn bce_cases() {
        let y = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (loss, _) = weighted_bce(&y, &y, &[[1.0, 1.0]; 2]).unwrap();
        assert!(loss <= 1e-6);
        let half = Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap();
        let (loss, _) = weighted_bce(&half, &y, &[[1.0, 1.0]; 2]).unwrap();
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-12);
        let pos_only = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let p = Tensor::new(vec![1, 2], vec![0.3, 0.8]).unwrap();
        let (l1, _) = weighted_bce(&p, &pos_only, &[[1.0, 1.0]; 2]).unwrap();
        let (l2, _) = weighted_bce(&p, &pos_only, &[[1.0, 2.0]; 2]).unwrap();
        assert_eq!(l2, 2.0 * l1);
    }

    #[test]
    fn bce_gradient() {
        let mut r = rng(7);
        let p = Tensor::<f64>::new(vec![3, 4], (0..12).map(|_| r.gen_range(0.05..0.95)).collect()).unwrap();
        let y = Tensor::<f64>::new(vec![3, 4], (0..12).map(|_| r.gen_range(0..2) as f64).collect()).unwrap();
        let w = vec![[0.7, 1.9], [1.2, 0.4], [1.0, 1.0], [2.5, 0.6]];
        let (_, g) = weighted_bce(&p, &y, &w).unwrap();
        let num = numeric_gradient(&p.data, H, |v| weighted_bce(&Tensor::new(p.shape.clone(), v.to_vec()).unwrap(), &y, &w).unwrap().0);
        assert!(relative_error(&g.data, &num) < TOL);
    }

    #[test]
    fn balanced_weights_equalize_classes() {
        let labels = vec![vec![1, 0], vec![1, 0], vec![1, 1], vec![0, 0]];
        let w = balanced_class_weights(&labels);
        assert_eq!(w[0], [2.0, 4.0 / 6.0]);
        assert_eq!(balanced_class_weights(&[vec![1], vec![1]])[0], [0.0, 0.0]);
    }

    #[test]
    fn adam_steps() {
        let mut p = Tensor::<f64>::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut adam = AdamState::new(&[&p], 1e-3);
        let zero = Tensor::zeros(&[3]);
        adam.step(vec![&mut p], vec![&zero]).unwrap();
        assert_eq!(p.data, vec![1.0, -2.0, 0.5]);
        assert_eq!(adam.step, 1);
        let mut q = Tensor::<f64>::new(vec![2], vec![0.0, 0.0]).unwrap();
        let mut adam = AdamState::new(&[&q], 1e-3);
        let g = Tensor::new(vec![2], vec![3.0, -0.2]).unwrap();
        adam.step(vec![&mut q], vec![&g]).unwrap();
        assert!((q.data[0] + 1e-3).abs() < 1e-9);
        assert!((q.data[1] - 1e-3).abs() < 1e-7);
        let wrong = Tensor::zeros(&[5]);
        assert!(adam.step(vec![&mut q], vec![&wrong]).is_err());
    }
}
