//! Minimal f64 neural-network kernels with hand-written backward passes:
//! strided 2D convolution, dense layers, ReLU, softmax, smooth-L1 and Adam.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Switch point between the quadratic and linear branches of smooth-L1.
pub const SMOOTH_L1_SWITCH: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn randn<R: Rng>(dims: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            dims: dims.to_vec(),
            data: (0..dims.iter().product()).map(|_| normal.sample(rng)).collect(),
        }
    }
}

/// Channel-major `C x H x W` activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.c, self.h, self.w]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.h + y) * self.w + x]
    }

    pub fn check_shape(&self, expected: [usize; 3]) -> Result<()> {
        if self.shape() == expected {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: format!("{expected:?}"),
                got: format!("{:?}", self.shape()),
            })
        }
    }
}

/// Anything holding trainable tensors in a fixed order.
pub trait Params {
    fn tensors(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data.len()).sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, t)| t.data.iter().copied())
            .collect()
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.data.fill(0.0);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.zero();
        z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    /// `[out, in, k, k]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let fan_in = (in_c * k * k) as f64;
        Self {
            weight: Tensor::randn(&[out_c, in_c, k, k], (2.0 / fan_in).sqrt(), rng),
            bias: Tensor::zeros(&[out_c]),
            stride,
            pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims[2]
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel()) / self.stride + 1
    }

    /// Input patches, one row of `in * k * k` values per output pixel, zero
    /// outside the image.
    fn im2col(&self, x: &FeatureMap) -> (Vec<f64>, usize, usize) {
        let (ic_n, k, s, p) = (self.in_channels(), self.kernel(), self.stride, self.pad);
        let (oh, ow) = (self.out_size(x.h), self.out_size(x.w));
        let row = ic_n * k * k;
        let mut cols = vec![0.0; oh * ow * row];
        for oy in 0..oh {
            for ox in 0..ow {
                let patch = &mut cols[(oy * ow + ox) * row..(oy * ow + ox + 1) * row];
                for ic in 0..ic_n {
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let base = (ic * x.h + iy as usize) * x.w;
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < x.w as isize {
                                patch[(ic * k + ky) * k + kx] = x.data[base + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        (cols, oh, ow)
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        debug_assert_eq!(x.c, self.in_channels());
        let oc_n = self.out_channels();
        let (cols, oh, ow) = self.im2col(x);
        let row = cols.len() / (oh * ow).max(1);
        let mut out = FeatureMap::zeros(oc_n, oh, ow);
        for (oc, wrow) in self.weight.data.chunks_exact(row).enumerate() {
            let b = self.bias.data[oc];
            let plane = &mut out.data[oc * oh * ow..(oc + 1) * oh * ow];
            for (o, patch) in plane.iter_mut().zip(cols.chunks_exact(row)) {
                *o = b + dot(wrow, patch);
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient
    /// when `want_input` is set.
    pub fn backward(&self, x: &FeatureMap, gout: &FeatureMap, grad: &mut Conv2d, want_input: bool) -> Option<FeatureMap> {
        let (ic_n, oc_n, k, s, p) = (self.in_channels(), self.out_channels(), self.kernel(), self.stride, self.pad);
        let (cols, oh, ow) = self.im2col(x);
        let npix = oh * ow;
        let row = ic_n * k * k;
        let mut gcols = want_input.then(|| vec![0.0; cols.len()]);
        for oc in 0..oc_n {
            let gplane = &gout.data[oc * npix..(oc + 1) * npix];
            grad.bias.data[oc] += gplane.iter().sum::<f64>();
            let gw = &mut grad.weight.data[oc * row..(oc + 1) * row];
            let wrow = &self.weight.data[oc * row..(oc + 1) * row];
            for (pix, &g) in gplane.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                axpy(g, &cols[pix * row..(pix + 1) * row], gw);
                if let Some(gc) = gcols.as_mut() {
                    axpy(g, wrow, &mut gc[pix * row..(pix + 1) * row]);
                }
            }
        }
        let gcols = gcols?;
        let mut gin = FeatureMap::zeros(x.c, x.h, x.w);
        for oy in 0..oh {
            for ox in 0..ow {
                let patch = &gcols[(oy * ow + ox) * row..(oy * ow + ox + 1) * row];
                for ic in 0..ic_n {
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let base = (ic * x.h + iy as usize) * x.w;
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < x.w as isize {
                                gin.data[base + ix as usize] += patch[(ic * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
        Some(gin)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the compiler vectorize without reassociating
    let mut acc = [0.0; 4];
    let (ca, ra) = a.split_at(a.len() / 4 * 4);
    let (cb, rb) = b.split_at(ca.len());
    for (x, y) in ca.chunks_exact(4).zip(cb.chunks_exact(4)) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `[out, in]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[output, input], (1.0 / input as f64).sqrt(), rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.dims[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.dims[0]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let n = self.input_dim();
        debug_assert_eq!(x.len(), n);
        self.weight
            .data
            .chunks_exact(n)
            .zip(&self.bias.data)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn backward(&self, x: &[f64], gout: &[f64], grad: &mut Linear) -> Vec<f64> {
        let n = self.input_dim();
        let mut gin = vec![0.0; n];
        for (o, &g) in gout.iter().enumerate() {
            grad.bias.data[o] += g;
            let row = &self.weight.data[o * n..(o + 1) * n];
            let grow = &mut grad.weight.data[o * n..(o + 1) * n];
            for i in 0..n {
                grow[i] += g * x[i];
                gin[i] += g * row[i];
            }
        }
        gin
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `grad` by the sign of the ReLU output `y`.
pub fn relu_backward(y: &[f64], grad: &mut [f64]) {
    for (g, &v) in grad.iter_mut().zip(y) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Gradient w.r.t. softmax logits given the softmax output `p` and upstream `g`.
pub fn softmax_backward(p: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)).collect()
}

/// Smooth-L1 with switch point 1: `0.5 x²` inside, `|x| - 0.5` outside.
#[inline]
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < SMOOTH_L1_SWITCH {
        0.5 * x * x / SMOOTH_L1_SWITCH
    } else {
        a - 0.5 * SMOOTH_L1_SWITCH
    }
}

#[inline]
pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < SMOOTH_L1_SWITCH {
        x / SMOOTH_L1_SWITCH
    } else {
        x.signum()
    }
}

/// Global average pool to a `C`-vector.
fn pool_bins(n: usize, g: usize) -> Vec<(usize, usize)> {
    (0..g).map(|i| (i * n / g, ((i + 1) * n).div_ceil(g))).collect()
}

/// Averages each channel over a `g x g` grid of (possibly overlapping) bins.
pub fn adaptive_avg_pool(x: &FeatureMap, g: usize) -> FeatureMap {
    let (ys, xs) = (pool_bins(x.h, g), pool_bins(x.w, g));
    let mut out = FeatureMap::zeros(x.c, g, g);
    for c in 0..x.c {
        for (by, &(y0, y1)) in ys.iter().enumerate() {
            for (bx, &(x0, x1)) in xs.iter().enumerate() {
                let mut sum = 0.0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        sum += x.at(c, y, xx);
                    }
                }
                *out.at_mut(c, by, bx) = sum / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward(gout: &FeatureMap, h: usize, w: usize) -> FeatureMap {
    let g = gout.h;
    let (ys, xs) = (pool_bins(h, g), pool_bins(w, g));
    let mut gin = FeatureMap::zeros(gout.c, h, w);
    for c in 0..gout.c {
        for (by, &(y0, y1)) in ys.iter().enumerate() {
            for (bx, &(x0, x1)) in xs.iter().enumerate() {
                let v = gout.at(c, by, bx) / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        *gin.at_mut(c, y, xx) += v;
                    }
                }
            }
        }
    }
    gin
}

pub fn global_avg_pool(x: &FeatureMap) -> Vec<f64> {
    let n = (x.h * x.w) as f64;
    x.data.chunks_exact(x.h * x.w).map(|c| c.iter().sum::<f64>() / n).collect()
}

pub fn global_avg_pool_backward(g: &[f64], h: usize, w: usize) -> FeatureMap {
    let n = (h * w) as f64;
    let mut out = FeatureMap::zeros(g.len(), h, w);
    for (c, &gc) in g.iter().enumerate() {
        out.data[c * h * w..(c + 1) * h * w].fill(gc / n);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }

    /// Applies one step to a parameter set using a gradient set of the same layout.
    pub fn step_params<P: Params>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let mut flat = params.to_flat();
        self.step(&mut flat, &grads.to_flat(), lr);
        params.set_flat(&flat);
    }
}

/// Step-decayed learning rate `lr0 * decay^epoch`.
pub fn decayed_lr(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}
