//! Layer implementations. Each layer caches what its backward pass needs
//! during a train-mode forward and accumulates parameter gradients into
//! its [`Param`]s.

use std::hash::{Hash, Hasher};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

use super::scalar::{gemm, Mat, Scalar};
use super::spec::{pool_extent, LayerSpec};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// A trainable tensor with its gradient.
#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Set for a bias feeding straight into batch normalization, whose
    /// train-mode loss does not depend on it.
    pub shadowed: bool,
}

impl<T: Scalar> Param<T> {
    fn new(name: String, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name,
            value,
            grad,
            shadowed: false,
        }
    }

    fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            value: self.value.cast(),
            grad: self.grad.cast(),
            shadowed: self.shadowed,
        }
    }
}

fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

const LANES: usize = 8;

/// `(sum x, sum x^2)` in double precision over independent lanes.
fn moments<T: Scalar>(xs: &[T]) -> (f64, f64) {
    let mut s = [0.0f64; LANES];
    let mut q = [0.0f64; LANES];
    let mut chunks = xs.chunks_exact(LANES);
    for c in &mut chunks {
        for l in 0..LANES {
            let v = c[l].as_f64();
            s[l] += v;
            q[l] += v * v;
        }
    }
    let (mut st, mut qt) = (s.iter().sum::<f64>(), q.iter().sum::<f64>());
    for v in chunks.remainder() {
        let v = v.as_f64();
        st += v;
        qt += v * v;
    }
    (st, qt)
}

/// `(sum g, sum g x)` in double precision over independent lanes.
fn dot_moments<T: Scalar>(gs: &[T], xs: &[T]) -> (f64, f64) {
    let mut s = [0.0f64; LANES];
    let mut d = [0.0f64; LANES];
    let mut gc = gs.chunks_exact(LANES);
    let mut xc = xs.chunks_exact(LANES);
    for (g, x) in (&mut gc).zip(&mut xc) {
        for l in 0..LANES {
            let gv = g[l].as_f64();
            s[l] += gv;
            d[l] += gv * x[l].as_f64();
        }
    }
    let (mut st, mut dt) = (s.iter().sum::<f64>(), d.iter().sum::<f64>());
    for (g, x) in gc.remainder().iter().zip(xc.remainder()) {
        st += g.as_f64();
        dt += g.as_f64() * x.as_f64();
    }
    (st, dt)
}

fn take_cache<T>(cache: &mut Option<T>) -> Result<T> {
    cache.take().ok_or(Error::StaleCache)
}

pub struct FixedHpf<T: Scalar> {
    kernel: [T; 2],
    in_shape: Option<Vec<usize>>,
}

impl<T: Scalar> FixedHpf<T> {
    pub fn kernel(&self) -> [T; 2] {
        self.kernel
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4();
        let ow = w - 1;
        let mut out = Tensor::zeros(&[n, c, h, ow]);
        let [k0, k1] = self.kernel;
        for (orow, irow) in out.data_mut().chunks_mut(ow).zip(x.data().chunks(w)) {
            for (i, o) in orow.iter_mut().enumerate() {
                *o = k0 * irow[i] + k1 * irow[i + 1];
            }
        }
        self.in_shape = (mode == Mode::Train).then(|| x.shape().to_vec());
        Ok(out)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = take_cache(&mut self.in_shape)?;
        let w = shape[3];
        let mut dx = Tensor::zeros(&shape);
        let [k0, k1] = self.kernel;
        for (drow, grow) in dx.data_mut().chunks_mut(w).zip(g.data().chunks(w - 1)) {
            for (i, &gv) in grow.iter().enumerate() {
                drow[i] += k0 * gv;
                drow[i + 1] += k1 * gv;
            }
        }
        Ok(dx)
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn cols(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns `ox` whose input column `ox * stride + kx - pw` lies
    /// inside the image.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kx >= self.pw { 0 } else { (self.pw - kx).div_ceil(s) };
        // largest ox with ox*s + kx - pw <= w - 1
        let lim = self.w + self.pw;
        let hi = if lim > kx { ((lim - kx - 1) / s + 1).min(self.ow) } else { 0 };
        (lo.min(hi), hi)
    }
}

fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.positions();
    for ci in 0..g.c {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_ox(kx);
                for oy in 0..g.oh {
                    let seg = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy * g.stride + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    seg[..lo].fill(T::zero());
                    seg[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = lo + kx - g.pw;
                        seg[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (ox, v) in seg.iter_mut().enumerate().take(hi).skip(lo) {
                            *v = src[ox * g.stride + kx - g.pw];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let p = g.positions();
    for ci in 0..g.c {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_ox(kx);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let seg = &src[oy * g.ow..(oy + 1) * g.ow];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in seg.iter().enumerate().take(hi).skip(lo) {
                        dst[ox * g.stride + kx - g.pw] += v;
                    }
                }
            }
        }
    }
}

pub struct Conv<T: Scalar> {
    out_channels: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv<T> {
    fn geom(&self, x: &Tensor<T>) -> Result<ConvGeom> {
        let (_, c, h, w) = x.dims4();
        let expected_c = self.weight.value.shape()[1];
        if c != expected_c {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {expected_c} channels, got {c}"
            )));
        }
        if h + 2 * self.ph < self.kh || w + 2 * self.pw < self.kw {
            return Err(Error::ShapeMismatch(format!("conv input {h}x{w} smaller than kernel")));
        }
        Ok(ConvGeom {
            c,
            h,
            w,
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            ph: self.ph,
            pw: self.pw,
            oh: (h + 2 * self.ph - self.kh) / self.stride + 1,
            ow: (w + 2 * self.pw - self.kw) / self.stride + 1,
        })
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let g = self.geom(x)?;
        let n = x.batch();
        let (k, p, oc) = (g.cols(), g.positions(), self.out_channels);
        let mut out = Tensor::zeros(&[n, oc, g.oh, g.ow]);
        let mut cols = vec![T::zero(); k * p];
        let in_len = g.c * g.h * g.w;
        for i in 0..n {
            im2col(&x.data()[i * in_len..(i + 1) * in_len], &g, &mut cols);
            let o = &mut out.data_mut()[i * oc * p..(i + 1) * oc * p];
            for (row, &b) in o.chunks_mut(p).zip(self.bias.value.data()) {
                row.fill(b);
            }
            gemm(Mat::new(self.weight.value.data(), oc, k), Mat::new(&cols, k, p), o, true);
        }
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(out)
    }

    fn backward(&mut self, gout: &Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let x = take_cache(&mut self.input)?;
        let g = self.geom(&x)?;
        let n = x.batch();
        let (k, p, oc) = (g.cols(), g.positions(), self.out_channels);
        let in_len = g.c * g.h * g.w;
        let mut cols = vec![T::zero(); k * p];
        let mut dcols = vec![T::zero(); k * p];
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
        for i in 0..n {
            let go = &gout.data()[i * oc * p..(i + 1) * oc * p];
            for (db, row) in self.bias.grad.data_mut().iter_mut().zip(go.chunks(p)) {
                *db += row.iter().copied().sum::<T>();
            }
            im2col(&x.data()[i * in_len..(i + 1) * in_len], &g, &mut cols);
            gemm(Mat::new(go, oc, p), Mat::t(&cols, p, k), self.weight.grad.data_mut(), true);
            if let Some(dx) = dx.as_mut() {
                gemm(Mat::t(self.weight.value.data(), k, oc), Mat::new(go, oc, p), &mut dcols, false);
                col2im(&dcols, &g, &mut dx.data_mut()[i * in_len..(i + 1) * in_len]);
            }
        }
        Ok(dx)
    }
}

pub struct BatchNorm<T: Scalar> {
    eps: f64,
    momentum: f64,
    pub scale: Param<T>,
    pub shift: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    cache: Option<BnCache<T>>,
}

struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<f64>,
}

impl<T: Scalar> BatchNorm<T> {
    fn channels(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = x.dims4();
        if c != self.running_mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm expects {} channels, got {c}",
                self.running_mean.len()
            )));
        }
        Ok((n, c, h * w))
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (n, c, hw) = self.channels(x)?;
        let mut out = Tensor::zeros(x.shape());
        let xs = x.data();
        let gamma = self.scale.value.data();
        let beta = self.shift.value.data();
        match mode {
            Mode::Infer => {
                for ch in 0..c {
                    let inv = 1.0 / (self.running_var[ch].as_f64() + self.eps).sqrt();
                    let a = T::from_f64(gamma[ch].as_f64() * inv);
                    let b = T::from_f64(beta[ch].as_f64() - self.running_mean[ch].as_f64() * gamma[ch].as_f64() * inv);
                    for i in 0..n {
                        let off = (i * c + ch) * hw;
                        for (o, &v) in out.data_mut()[off..off + hw].iter_mut().zip(&xs[off..off + hw]) {
                            *o = a * v + b;
                        }
                    }
                }
                self.cache = None;
            }
            Mode::Train => {
                let m = (n * hw) as f64;
                let mut xhat = Tensor::zeros(x.shape());
                let mut inv_std = Vec::with_capacity(c);
                for ch in 0..c {
                    let plane = |i: usize| {
                        let off = (i * c + ch) * hw;
                        off..off + hw
                    };
                    let (mut sum, mut sq) = (0.0, 0.0);
                    for i in 0..n {
                        let (a, b) = moments(&xs[plane(i)]);
                        sum += a;
                        sq += b;
                    }
                    let mean = sum / m;
                    let var = (sq / m - mean * mean).max(0.0);
                    let inv = 1.0 / (var + self.eps).sqrt();
                    inv_std.push(inv);
                    let (gm, bt) = (gamma[ch], beta[ch]);
                    for i in 0..n {
                        let r = plane(i);
                        let mean_t = T::from_f64(mean);
                        let inv_t = T::from_f64(inv);
                        for ((xh, o), &v) in xhat.data_mut()[r.clone()]
                            .iter_mut()
                            .zip(out.data_mut()[r.clone()].iter_mut())
                            .zip(&xs[r])
                        {
                            *xh = (v - mean_t) * inv_t;
                            *o = gm * *xh + bt;
                        }
                    }
                    let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                    let mo = self.momentum;
                    self.running_mean[ch] = T::from_f64(mo * self.running_mean[ch].as_f64() + (1.0 - mo) * mean);
                    self.running_var[ch] = T::from_f64(mo * self.running_var[ch].as_f64() + (1.0 - mo) * unbiased);
                }
                self.cache = Some(BnCache { xhat, inv_std });
            }
        }
        Ok(out)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let BnCache { xhat, inv_std } = take_cache(&mut self.cache)?;
        let (n, c, hw) = self.channels(g)?;
        let m = (n * hw) as f64;
        let gs = g.data();
        let xh = xhat.data();
        let mut dx = Tensor::zeros(g.shape());
        for (ch, &inv) in inv_std.iter().enumerate() {
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for i in 0..n {
                let off = (i * c + ch) * hw;
                let (a, b) = dot_moments(&gs[off..off + hw], &xh[off..off + hw]);
                sum_g += a;
                sum_gx += b;
            }
            self.shift.grad.data_mut()[ch] += T::from_f64(sum_g);
            self.scale.grad.data_mut()[ch] += T::from_f64(sum_gx);
            let gamma = self.scale.value.data()[ch].as_f64();
            let k = T::from_f64(gamma * inv / m);
            let mt = T::from_f64(m);
            let sg = T::from_f64(sum_g);
            let sgx = T::from_f64(sum_gx);
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for ((d, &gv), &xv) in dx.data_mut()[off..off + hw]
                    .iter_mut()
                    .zip(&gs[off..off + hw])
                    .zip(&xh[off..off + hw])
                {
                    *d = k * (mt * gv - sg - xv * sgx);
                }
            }
        }
        Ok(dx)
    }
}

pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    fn forward<T: Scalar>(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut out = x.clone();
        out.data_mut().iter_mut().for_each(|v| {
            if !(*v > T::zero()) {
                *v = T::zero()
            }
        });
        self.mask = (mode == Mode::Train).then(|| x.data().iter().map(|&v| v > T::zero()).collect());
        Ok(out)
    }

    fn backward<T: Scalar>(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = take_cache(&mut self.mask)?;
        let mut dx = g.clone();
        for (d, &m) in dx.data_mut().iter_mut().zip(&mask) {
            if !m {
                *d = T::zero();
            }
        }
        Ok(dx)
    }
}

pub struct AvgPool {
    kernel: usize,
    stride: usize,
    in_shape: Option<Vec<usize>>,
}

impl AvgPool {
    fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h < self.kernel || w < self.kernel {
            return Err(Error::ShapeMismatch(format!(
                "avgpool input {h}x{w} smaller than {k}x{k}",
                k = self.kernel
            )));
        }
        Ok((
            pool_extent(h, self.kernel, self.stride),
            pool_extent(w, self.kernel, self.stride),
        ))
    }

    /// Window bounds `[start, end)` clipped to the input.
    fn window(&self, o: usize, len: usize) -> (usize, usize) {
        let s = o * self.stride;
        (s, (s + self.kernel).min(len))
    }

    /// Number of windows along an axis of `len` that cover offset `k`
    /// within the window, i.e. outputs `o` with `o * stride + k < len`.
    fn covering(&self, k: usize, len: usize, outs: usize) -> usize {
        if k >= len {
            0
        } else {
            ((len - k - 1) / self.stride + 1).min(outs)
        }
    }

    fn inv_areas<T: Scalar>(&self, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
        let mut a = Vec::with_capacity(oh * ow);
        for oy in 0..oh {
            let (y0, y1) = self.window(oy, h);
            for ox in 0..ow {
                let (x0, x1) = self.window(ox, w);
                a.push(T::from_f64(1.0 / ((y1 - y0) * (x1 - x0)) as f64));
            }
        }
        a
    }

    fn forward<T: Scalar>(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4();
        let (oh, ow) = self.out_dims(h, w)?;
        let (k, s) = (self.kernel, self.stride);
        let inv = self.inv_areas::<T>(h, w, oh, ow);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut rows = vec![T::zero(); h * ow];
        for (plane, oplane) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
            // horizontal window sums, then vertical
            rows.fill(T::zero());
            for y in 0..h {
                let src = &plane[y * w..(y + 1) * w];
                let dst = &mut rows[y * ow..(y + 1) * ow];
                for kx in 0..k {
                    let m = self.covering(kx, w, ow);
                    for (ox, d) in dst[..m].iter_mut().enumerate() {
                        *d += src[ox * s + kx];
                    }
                }
            }
            for oy in 0..oh {
                let dst = &mut oplane[oy * ow..(oy + 1) * ow];
                for ky in 0..k {
                    let y = oy * s + ky;
                    if y >= h {
                        break;
                    }
                    for (d, &v) in dst.iter_mut().zip(&rows[y * ow..(y + 1) * ow]) {
                        *d += v;
                    }
                }
                for (d, &a) in dst.iter_mut().zip(&inv[oy * ow..(oy + 1) * ow]) {
                    *d *= a;
                }
            }
        }
        self.in_shape = (mode == Mode::Train).then(|| x.shape().to_vec());
        Ok(out)
    }

    fn backward<T: Scalar>(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = take_cache(&mut self.in_shape)?;
        let (h, w) = (shape[2], shape[3]);
        let (oh, ow) = self.out_dims(h, w)?;
        let (k, s) = (self.kernel, self.stride);
        let inv = self.inv_areas::<T>(h, w, oh, ow);
        let mut dx = Tensor::zeros(&shape);
        let mut share = vec![T::zero(); oh * ow];
        let mut rows = vec![T::zero(); h * ow];
        for (dplane, gplane) in dx.data_mut().chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
            for ((d, &gv), &a) in share.iter_mut().zip(gplane).zip(&inv) {
                *d = gv * a;
            }
            rows.fill(T::zero());
            for oy in 0..oh {
                let src = &share[oy * ow..(oy + 1) * ow];
                for ky in 0..k {
                    let y = oy * s + ky;
                    if y >= h {
                        break;
                    }
                    for (d, &v) in rows[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
            for y in 0..h {
                let src = &rows[y * ow..(y + 1) * ow];
                let dst = &mut dplane[y * w..(y + 1) * w];
                for kx in 0..k {
                    let m = self.covering(kx, w, ow);
                    for (ox, &v) in src[..m].iter().enumerate() {
                        dst[ox * s + kx] += v;
                    }
                }
            }
        }
        Ok(dx)
    }
}

pub struct Spp {
    scales: Vec<usize>,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl Spp {
    /// Bin `i` of `n` over length `len`: `[floor(i len / n), ceil((i+1) len / n))`.
    fn bin(i: usize, n: usize, len: usize) -> (usize, usize) {
        (i * len / n, ((i + 1) * len).div_ceil(n))
    }

    fn forward<T: Scalar>(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4();
        let per_item: usize = c * self.scales.iter().map(|s| s * s).sum::<usize>();
        let mut out = Tensor::zeros(&[n, per_item, 1, 1]);
        let mut argmax = vec![0usize; n * per_item];
        let xs = x.data();
        for i in 0..n {
            let mut o = i * per_item;
            for &s in &self.scales {
                for ch in 0..c {
                    let base = (i * c + ch) * h * w;
                    for by in 0..s {
                        let (y0, y1) = Self::bin(by, s, h);
                        for bx in 0..s {
                            let (x0, x1) = Self::bin(bx, s, w);
                            let mut best = base + y0 * w + x0;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    let idx = base + y * w + xx;
                                    if xs[idx] > xs[best] {
                                        best = idx;
                                    }
                                }
                            }
                            out.data_mut()[o] = xs[best];
                            argmax[o] = best;
                            o += 1;
                        }
                    }
                }
            }
        }
        self.cache = (mode == Mode::Train).then(|| (x.shape().to_vec(), argmax));
        Ok(out)
    }

    fn backward<T: Scalar>(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, argmax) = take_cache(&mut self.cache)?;
        let mut dx = Tensor::zeros(&shape);
        for (&idx, &gv) in argmax.iter().zip(g.data()) {
            dx.data_mut()[idx] += gv;
        }
        Ok(dx)
    }
}

pub struct Fc<T: Scalar> {
    out: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Fc<T> {
    fn fan_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let n = x.batch();
        let k = x.item_len();
        if k != self.fan_in() {
            return Err(Error::ShapeMismatch(format!(
                "fc expects {} inputs, got {k}",
                self.fan_in()
            )));
        }
        let mut out = Tensor::zeros(&[n, self.out, 1, 1]);
        for row in out.data_mut().chunks_mut(self.out) {
            row.copy_from_slice(self.bias.value.data());
        }
        gemm(
            Mat::new(x.data(), n, k),
            Mat::t(self.weight.value.data(), k, self.out),
            out.data_mut(),
            true,
        );
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(out)
    }

    fn backward(&mut self, g: &Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let x = take_cache(&mut self.input)?;
        let n = x.batch();
        let k = x.item_len();
        let gs = g.data();
        for row in gs.chunks(self.out) {
            for (db, &gv) in self.bias.grad.data_mut().iter_mut().zip(row) {
                *db += gv;
            }
        }
        gemm(Mat::t(gs, self.out, n), Mat::new(x.data(), n, k), self.weight.grad.data_mut(), true);
        Ok(need_dx.then(|| {
            let mut dx = Tensor::zeros(x.shape());
            gemm(Mat::new(gs, n, self.out), Mat::new(self.weight.value.data(), self.out, k), dx.data_mut(), false);
            dx
        }))
    }
}

/// A layer instance.
pub enum Layer<T: Scalar> {
    FixedHpf(FixedHpf<T>),
    Conv(Conv<T>),
    BatchNorm(BatchNorm<T>),
    Relu(Relu),
    AvgPool(AvgPool),
    Spp(Spp),
    Fc(Fc<T>),
    SoftmaxLoss,
}

impl<T: Scalar> Layer<T> {
    /// Instantiates `spec` for per-sample input shape `input`, drawing
    /// weights from `rng`. Parameter names are prefixed with `prefix`.
    pub fn build(spec: &LayerSpec, input: [usize; 3], prefix: &str, rng: &mut impl Rng) -> Self {
        let [c, h, w] = input;
        match *spec {
            LayerSpec::FixedHpf => Layer::FixedHpf(FixedHpf {
                kernel: [T::one(), -T::one()],
                in_shape: None,
            }),
            LayerSpec::Conv {
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                pad_h,
                pad_w,
            } => {
                let fan_in = c * kernel_h * kernel_w;
                Layer::Conv(Conv {
                    out_channels,
                    kh: kernel_h,
                    kw: kernel_w,
                    stride,
                    ph: pad_h,
                    pw: pad_w,
                    weight: Param::new(
                        format!("{prefix}.weight"),
                        he_normal(&[out_channels, c, kernel_h, kernel_w], fan_in, rng),
                    ),
                    bias: Param::new(format!("{prefix}.bias"), Tensor::zeros(&[out_channels])),
                    input: None,
                })
            }
            LayerSpec::BatchNorm { eps, momentum } => {
                let mut scale = Tensor::zeros(&[c]);
                scale.fill(T::one());
                Layer::BatchNorm(BatchNorm {
                    eps: eps as f64,
                    momentum: momentum as f64,
                    scale: Param::new(format!("{prefix}.scale"), scale),
                    shift: Param::new(format!("{prefix}.shift"), Tensor::zeros(&[c])),
                    running_mean: vec![T::zero(); c],
                    running_var: vec![T::one(); c],
                    cache: None,
                })
            }
            LayerSpec::Relu => Layer::Relu(Relu { mask: None }),
            LayerSpec::AvgPool { kernel, stride } => Layer::AvgPool(AvgPool {
                kernel,
                stride,
                in_shape: None,
            }),
            LayerSpec::Spp { ref scales } => Layer::Spp(Spp {
                scales: scales.clone(),
                cache: None,
            }),
            LayerSpec::Fc { out } => {
                let fan_in = c * h * w;
                Layer::Fc(Fc {
                    out,
                    weight: Param::new(format!("{prefix}.weight"), he_normal(&[out, fan_in], fan_in, rng)),
                    bias: Param::new(format!("{prefix}.bias"), Tensor::zeros(&[out])),
                    input: None,
                })
            }
            LayerSpec::SoftmaxLoss { .. } => Layer::SoftmaxLoss,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Layer::FixedHpf(l) => {
                if x.dims4().3 < 2 {
                    return Err(Error::ShapeMismatch("fixed_hpf needs width >= 2".into()));
                }
                l.forward(x, mode)
            }
            Layer::Conv(l) => l.forward(x, mode),
            Layer::BatchNorm(l) => l.forward(x, mode),
            Layer::Relu(l) => l.forward(x, mode),
            Layer::AvgPool(l) => l.forward(x, mode),
            Layer::Spp(l) => l.forward(x, mode),
            Layer::Fc(l) => l.forward(x, mode),
            Layer::SoftmaxLoss => Ok(x.clone()),
        }
    }

    /// Returns the input gradient, or `None` when `need_dx` is false and
    /// the layer could skip computing it.
    pub fn backward(&mut self, g: &Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        Ok(Some(match self {
            Layer::FixedHpf(l) => l.backward(g)?,
            Layer::Conv(l) => return l.backward(g, need_dx),
            Layer::BatchNorm(l) => l.backward(g)?,
            Layer::Relu(l) => l.backward(g)?,
            Layer::AvgPool(l) => l.backward(g)?,
            Layer::Spp(l) => l.backward(g)?,
            Layer::Fc(l) => return l.backward(g, need_dx),
            Layer::SoftmaxLoss => g.clone(),
        }))
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Conv(l) => vec![&l.weight, &l.bias],
            Layer::Fc(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(l) => vec![&l.scale, &l.shift],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Fc(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.scale, &mut l.shift],
            _ => Vec::new(),
        }
    }

    /// Hashes the discrete branch decisions of the last forward pass (ReLU
    /// masks, max-pool winners).
    pub fn hash_branches(&self, state: &mut impl Hasher) {
        match self {
            Layer::Relu(l) => l.mask.hash(state),
            Layer::Spp(l) => l.cache.as_ref().map(|c| &c.1).hash(state),
            _ => {}
        }
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        match self {
            Layer::FixedHpf(_) => Layer::FixedHpf(FixedHpf {
                kernel: [U::one(), -U::one()],
                in_shape: None,
            }),
            Layer::Conv(l) => Layer::Conv(Conv {
                out_channels: l.out_channels,
                kh: l.kh,
                kw: l.kw,
                stride: l.stride,
                ph: l.ph,
                pw: l.pw,
                weight: l.weight.cast(),
                bias: l.bias.cast(),
                input: None,
            }),
            Layer::BatchNorm(l) => Layer::BatchNorm(BatchNorm {
                eps: l.eps,
                momentum: l.momentum,
                scale: l.scale.cast(),
                shift: l.shift.cast(),
                running_mean: l.running_mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                running_var: l.running_var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                cache: None,
            }),
            Layer::Relu(_) => Layer::Relu(Relu { mask: None }),
            Layer::AvgPool(l) => Layer::AvgPool(AvgPool {
                kernel: l.kernel,
                stride: l.stride,
                in_shape: None,
            }),
            Layer::Spp(l) => Layer::Spp(Spp {
                scales: l.scales.clone(),
                cache: None,
            }),
            Layer::Fc(l) => Layer::Fc(Fc {
                out: l.out,
                weight: l.weight.cast(),
                bias: l.bias.cast(),
                input: None,
            }),
            Layer::SoftmaxLoss => Layer::SoftmaxLoss,
        }
    }
}
