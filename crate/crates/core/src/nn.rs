//! Minimal layer toolkit with hand-written backward passes.
//!
//! All parameters of a network live in one flat `f64` buffer described by a
//! [`ParamLayout`]; layers hold [`ParamId`]s into it. Gradients use the same
//! layout, so the optimizer and the checkpoint code only deal with flat
//! slices and names.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// Normal with standard deviation `gain * sqrt(2 / fan_in)`.
    He {
        fan_in: usize,
        gain: f64,
    },
    Constant(f64),
    Values(&'static [f64]),
}

#[derive(Debug, Clone, Default)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
    inits: Vec<Init>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let len = shape.iter().product();
        let name = name.into();
        debug_assert!(self.specs.iter().all(|s| s.name != name), "duplicate parameter {name}");
        self.specs.push(ParamSpec { name, shape: shape.to_vec(), offset: self.total, len });
        self.inits.push(init);
        self.total += len;
        ParamId(self.specs.len() - 1)
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn find(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    /// Fills a fresh parameter buffer. Each tensor draws from its own stream
    /// keyed by `(seed, name)`, so adding or removing modules never changes the
    /// initial values of the others.
    pub fn initialize(&self, seed: u64) -> Vec<f64> {
        let mut params = vec![0.0; self.total];
        for (spec, init) in self.specs.iter().zip(&self.inits) {
            let dst = &mut params[spec.offset..spec.offset + spec.len];
            match *init {
                Init::Zeros => {}
                Init::Constant(c) => dst.fill(c),
                Init::Values(v) => dst.copy_from_slice(v),
                Init::He { fan_in, gain } => {
                    let mut rng = ChaCha8Rng::from_seed(name_seed(seed, &spec.name));
                    let normal = Normal::new(0.0, gain * (2.0 / fan_in as f64).sqrt()).expect("finite std");
                    dst.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
                }
            }
        }
        params
    }

    /// Digest of names and shapes, used to tie checkpoints to an architecture.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.specs {
            h.update(s.name.as_bytes());
            for d in &s.shape {
                h.update((*d as u64).to_le_bytes());
            }
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn name_seed(seed: u64, name: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    h.finalize().into()
}

/// Channel-major feature map `[c, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fmap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Fmap {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w);
        Self { c, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Stacks channels of `self` followed by those of `other`.
    pub fn concat(&self, other: &Fmap) -> Fmap {
        assert_eq!((self.h, self.w), (other.h, other.w));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Fmap { c: self.c + other.c, h: self.h, w: self.w, data }
    }

    /// Inverse of [`Fmap::concat`] for gradients.
    pub fn split(self, first: usize) -> (Fmap, Fmap) {
        let n = first * self.plane();
        let mut data = self.data;
        let rest = data.split_off(n);
        (Fmap { c: first, h: self.h, w: self.w, data }, Fmap { c: self.c - first, h: self.h, w: self.w, data: rest })
    }

    pub fn add_assign(&mut self, other: &Fmap) {
        assert_eq!(self.data.len(), other.data.len());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

fn gemm(alpha: f64, a: ArrayView2<f64>, b: ArrayView2<f64>, beta: f64, c: ArrayViewMut2<f64>) {
    let mut c = c;
    general_mat_mul(alpha, &a, &b, beta, &mut c);
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self::with_init(layout, name, in_c, out_c, k, stride, pad, 1.0)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        layout: &mut ParamLayout,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        gain: f64,
    ) -> Self {
        let fan_in = in_c * k * k;
        let init = if gain == 0.0 { Init::Zeros } else { Init::He { fan_in, gain } };
        let weight = layout.add(format!("{name}.weight"), &[out_c, in_c, k, k], init);
        let bias = layout.add(format!("{name}.bias"), &[out_c], Init::Zeros);
        Self { in_c, out_c, k, stride, pad, weight, bias }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * self.pad - self.k) / self.stride + 1, (w + 2 * self.pad - self.k) / self.stride + 1)
    }

    fn im2col(&self, x: &Fmap, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.k;
        let rows = self.in_c * k * k;
        let cols = oh * ow;
        let mut out = vec![0.0; rows * cols];
        for ci in 0..self.in_c {
            let plane = &x.data[ci * x.plane()..(ci + 1) * x.plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < x.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Fmap {
        let k = self.k;
        let n = oh * ow;
        let mut dx = Fmap::zeros(self.in_c, h, w);
        for ci in 0..self.in_c {
            let plane = &mut dx.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, layout: &ParamLayout, params: &[f64], x: &Fmap) -> Fmap {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (oh, ow) = self.out_size(x.h, x.w);
        let kk = self.in_c * self.k * self.k;
        let n = oh * ow;
        let w = slice(layout, params, self.weight);
        let b = slice(layout, params, self.bias);
        let mut out = Fmap::zeros(self.out_c, oh, ow);
        for (co, chunk) in out.data.chunks_exact_mut(n).enumerate() {
            chunk.fill(b[co]);
        }
        let wv = ArrayView2::from_shape((self.out_c, kk), w).unwrap();
        let ov = ArrayViewMut2::from_shape((self.out_c, n), &mut out.data).unwrap();
        if self.k == 1 && self.stride == 1 && self.pad == 0 {
            let xv = ArrayView2::from_shape((kk, n), &x.data).unwrap();
            gemm(1.0, wv, xv, 1.0, ov);
        } else {
            let cols = self.im2col(x, oh, ow);
            let cv = ArrayView2::from_shape((kk, n), &cols).unwrap();
            gemm(1.0, wv, cv, 1.0, ov);
        }
        out
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when `need_dx` is set.
    pub fn backward(
        &self,
        layout: &ParamLayout,
        params: &[f64],
        x: &Fmap,
        dy: &Fmap,
        grads: &mut [f64],
        need_dx: bool,
    ) -> Option<Fmap> {
        let (oh, ow) = (dy.h, dy.w);
        let kk = self.in_c * self.k * self.k;
        let n = oh * ow;
        let direct = self.k == 1 && self.stride == 1 && self.pad == 0;
        let cols_owned;
        let cols: &[f64] = if direct {
            &x.data
        } else {
            cols_owned = self.im2col(x, oh, ow);
            &cols_owned
        };
        let dyv = ArrayView2::from_shape((self.out_c, n), &dy.data).unwrap();
        {
            let gb = slice_mut(layout, grads, self.bias);
            for (co, g) in gb.iter_mut().enumerate() {
                *g += dy.data[co * n..(co + 1) * n].iter().sum::<f64>();
            }
        }
        {
            let gw = slice_mut(layout, grads, self.weight);
            let cv = ArrayView2::from_shape((kk, n), cols).unwrap();
            let gwv = ArrayViewMut2::from_shape((self.out_c, kk), gw).unwrap();
            gemm(1.0, dyv, cv.t(), 1.0, gwv);
        }
        if !need_dx {
            return None;
        }
        let w = slice(layout, params, self.weight);
        let wv = ArrayView2::from_shape((self.out_c, kk), w).unwrap();
        let mut dcols = vec![0.0; kk * n];
        gemm(1.0, wv.t(), dyv, 0.0, ArrayViewMut2::from_shape((kk, n), &mut dcols).unwrap());
        if direct {
            Some(Fmap::from_vec(self.in_c, x.h, x.w, dcols))
        } else {
            Some(self.col2im(&dcols, x.h, x.w, oh, ow))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, name: &str, inputs: usize, outputs: usize) -> Self {
        Self::with_init(layout, name, inputs, outputs, 1.0, Init::Zeros)
    }

    pub fn with_init(
        layout: &mut ParamLayout,
        name: &str,
        inputs: usize,
        outputs: usize,
        gain: f64,
        bias_init: Init,
    ) -> Self {
        let init = if gain == 0.0 { Init::Zeros } else { Init::He { fan_in: inputs, gain } };
        let weight = layout.add(format!("{name}.weight"), &[outputs, inputs], init);
        let bias = layout.add(format!("{name}.bias"), &[outputs], bias_init);
        Self { inputs, outputs, weight, bias }
    }

    pub fn forward(&self, layout: &ParamLayout, params: &[f64], x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.inputs, "linear input size");
        let w = slice(layout, params, self.weight);
        let mut y = slice(layout, params, self.bias).to_vec();
        for (o, row) in y.iter_mut().zip(w.chunks_exact(self.inputs)) {
            *o += dot(row, x);
        }
        y
    }

    pub fn backward(
        &self,
        layout: &ParamLayout,
        params: &[f64],
        x: &[f64],
        dy: &[f64],
        grads: &mut [f64],
        need_dx: bool,
    ) -> Option<Vec<f64>> {
        slice_mut(layout, grads, self.bias).iter_mut().zip(dy).for_each(|(g, d)| *g += d);
        {
            let gw = slice_mut(layout, grads, self.weight);
            for (row, &d) in gw.chunks_exact_mut(self.inputs).zip(dy) {
                if d != 0.0 {
                    row.iter_mut().zip(x).for_each(|(g, xi)| *g += d * xi);
                }
            }
        }
        if !need_dx {
            return None;
        }
        let w = slice(layout, params, self.weight);
        let mut dx = vec![0.0; self.inputs];
        for (row, &d) in w.chunks_exact(self.inputs).zip(dy) {
            if d != 0.0 {
                dx.iter_mut().zip(row).for_each(|(g, wi)| *g += d * wi);
            }
        }
        Some(dx)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn slice<'a>(layout: &ParamLayout, params: &'a [f64], id: ParamId) -> &'a [f64] {
    let s = layout.spec(id);
    &params[s.offset..s.offset + s.len]
}

pub fn slice_mut<'a>(layout: &ParamLayout, params: &'a mut [f64], id: ParamId) -> &'a mut [f64] {
    let s = layout.spec(id);
    &mut params[s.offset..s.offset + s.len]
}

pub fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

/// Gradient through ReLU given its output: zero where the output is zero.
pub fn relu_backward(out: &[f64], dy: &mut [f64]) {
    dy.iter_mut().zip(out).for_each(|(d, &o)| {
        if o <= 0.0 {
            *d = 0.0
        }
    });
}

/// 2x2 max pooling with stride 2; returns the pooled map and the flat input
/// index of each selected element.
pub fn maxpool2(x: &Fmap) -> (Fmap, Vec<u32>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Fmap::zeros(x.c, oh, ow);
    let mut idx = vec![0u32; x.c * oh * ow];
    for c in 0..x.c {
        let base = c * x.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * x.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * x.w + 2 * ox + dx;
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                out.data[o] = x.data[best];
                idx[o] = best as u32;
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward(input_shape: (usize, usize, usize), idx: &[u32], dy: &Fmap) -> Fmap {
    let (c, h, w) = input_shape;
    let mut dx = Fmap::zeros(c, h, w);
    for (&i, &d) in idx.iter().zip(&dy.data) {
        dx.data[i as usize] += d;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: &mut dyn FnMut(&[f64]) -> f64, p: &[f64], i: usize) -> f64 {
        let h = 1e-6;
        let mut q = p.to_vec();
        q[i] += h;
        let a = f(&q);
        q[i] -= 2.0 * h;
        let b = f(&q);
        (a - b) / (2.0 * h)
    }

    fn naive_conv(conv: &Conv2d, layout: &ParamLayout, p: &[f64], x: &Fmap) -> Fmap {
        let (oh, ow) = conv.out_size(x.h, x.w);
        let w = slice(layout, p, conv.weight);
        let b = slice(layout, p, conv.bias);
        let mut out = Fmap::zeros(conv.out_c, oh, ow);
        for co in 0..conv.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..conv.in_c {
                        for ky in 0..conv.k {
                            for kx in 0..conv.k {
                                let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                let wi = ((co * conv.in_c + ci) * conv.k + ky) * conv.k + kx;
                                acc += w[wi] * x.data[(ci * x.h + iy as usize) * x.w + ix as usize];
                            }
                        }
                    }
                    out.data[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn ramp(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * 0.7 + seed).sin() * 1.3).collect()
    }

    #[test]
    fn conv_matches_naive_loop() {
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (4, 4, 0), (1, 1, 0)] {
            let mut layout = ParamLayout::new();
            let conv = Conv2d::new(&mut layout, "c", 3, 4, k, stride, pad);
            let mut p = layout.initialize(1);
            slice_mut(&layout, &mut p, conv.bias).copy_from_slice(&[0.1, -0.2, 0.3, 0.0]);
            let x = Fmap::from_vec(3, 8, 8, ramp(192, 0.3));
            let fast = conv.forward(&layout, &p, &x);
            let slow = naive_conv(&conv, &layout, &p, &x);
            assert_eq!((fast.c, fast.h, fast.w), (slow.c, slow.h, slow.w));
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (4, 4, 0), (1, 1, 0)] {
            let mut layout = ParamLayout::new();
            let conv = Conv2d::new(&mut layout, "c", 2, 3, k, stride, pad);
            let p = layout.initialize(5);
            let x = Fmap::from_vec(2, 8, 8, ramp(128, 1.1));
            let out = conv.forward(&layout, &p, &x);
            let coef = ramp(out.data.len(), 2.0);
            let dy = Fmap::from_vec(out.c, out.h, out.w, coef.clone());
            let mut g = vec![0.0; layout.total()];
            let dx = conv.backward(&layout, &p, &x, &dy, &mut g, true).unwrap();

            let mut loss_p = |q: &[f64]| -> f64 {
                let o = conv.forward(&layout, q, &x);
                o.data.iter().zip(&coef).map(|(a, b)| a * b).sum()
            };
            for i in (0..layout.total()).step_by(3) {
                let n = numeric_grad(&mut loss_p, &p, i);
                assert!((n - g[i]).abs() < 1e-6, "param {i}: {n} vs {}", g[i]);
            }
            let mut loss_x = |q: &[f64]| -> f64 {
                let o = conv.forward(&layout, &p, &Fmap::from_vec(2, 8, 8, q.to_vec()));
                o.data.iter().zip(&coef).map(|(a, b)| a * b).sum()
            };
            for i in (0..128).step_by(5) {
                let n = numeric_grad(&mut loss_x, &x.data, i);
                assert!((n - dx.data[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut layout = ParamLayout::new();
        let lin = Linear::new(&mut layout, "fc", 5, 3);
        let p = layout.initialize(2);
        let x = ramp(5, 0.5);
        let coef = [0.3, -1.0, 2.0];
        let mut g = vec![0.0; layout.total()];
        let dx = lin.backward(&layout, &p, &x, &coef, &mut g, true).unwrap();
        let mut loss = |q: &[f64]| -> f64 { lin.forward(&layout, q, &x).iter().zip(&coef).map(|(a, b)| a * b).sum() };
        for i in 0..layout.total() {
            assert!((numeric_grad(&mut loss, &p, i) - g[i]).abs() < 1e-7);
        }
        let mut loss_x = |q: &[f64]| -> f64 { lin.forward(&layout, &p, q).iter().zip(&coef).map(|(a, b)| a * b).sum() };
        for i in 0..5 {
            assert!((numeric_grad(&mut loss_x, &x, i) - dx[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_max() {
        let x = Fmap::from_vec(1, 2, 4, vec![1.0, 5.0, 0.0, 0.0, 2.0, 3.0, 0.0, 7.0]);
        let (y, idx) = maxpool2(&x);
        assert_eq!(y.data, vec![5.0, 7.0]);
        let dx = maxpool2_backward((1, 2, 4), &idx, &Fmap::from_vec(1, 1, 2, vec![1.0, 2.0]));
        assert_eq!(dx.data, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn init_is_independent_of_other_tensors() {
        let mut a = ParamLayout::new();
        a.add("x", &[4], Init::He { fan_in: 4, gain: 1.0 });
        let mut b = ParamLayout::new();
        b.add("other", &[7], Init::He { fan_in: 7, gain: 1.0 });
        b.add("x", &[4], Init::He { fan_in: 4, gain: 1.0 });
        let pa = a.initialize(9);
        let pb = b.initialize(9);
        assert_eq!(&pa[..], &pb[7..]);
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Fmap::from_vec(1, 1, 2, vec![1.0, 2.0]);
        let b = Fmap::from_vec(2, 1, 2, vec![3.0, 4.0, 5.0, 6.0]);
        let (x, y) = a.concat(&b).split(1);
        assert_eq!((x, y), (a, b));
    }
}
