//! Layers with explicit forward caches and hand-written backward passes.
//!
//! Convolutions lower to im2col + GEMM. A transposed convolution is the
//! adjoint of the convolution with the same geometry, so both share the
//! same pair of lowering kernels.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{gemm, MatRef, Real, Tensor};

/// Learnable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    shape: Vec<usize>,
}

impl<T: Real> Param<T> {
    pub fn new(shape: Vec<usize>, value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self { value, grad, shape }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![T::zero(); n])
    }

    pub fn uniform(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let value = (0..n)
            .map(|_| T::of(rng.random_range(-bound..=bound)))
            .collect();
        Self::new(shape, value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Anything owning named parameters and non-learned buffers.
pub trait Parameters<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn visit_buffers(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Vec<T>)) {}
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Geometry of a convolution over a `channels × height × width` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds receptive fields into the columns of a `(C·k·k) × (Ho·Wo)` matrix.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    debug_assert_eq!(x.len(), g.channels * g.height * g.width);
    debug_assert_eq!(cols.len(), g.col_rows() * oh * ow);
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, x: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(y: &mut Tensor<T>, bias: &[T]) {
    let plane = y.plane();
    for b in 0..y.batch() {
        for (c, chunk) in y.sample_mut(b).chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bias[c]);
        }
    }
}

fn accumulate_bias_grad<T: Real>(dy: &Tensor<T>, grad: &mut [T]) {
    let plane = dy.plane();
    for b in 0..dy.batch() {
        for (c, chunk) in dy.sample(b).chunks(plane).enumerate() {
            grad[c] += chunk.iter().copied().sum::<T>();
        }
    }
}

/// Convolution with square kernel, weight stored as `cout × (cin·k·k)`.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl<T: Real> Conv2d<T> {
    /// He-uniform init scaled by `gain` (2 for rectified layers, 1 for linear).
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let bound = (3.0 * gain / fan_in).sqrt();
        Self {
            weight: Param::uniform(vec![cout, cin, kernel, kernel], bound, rng),
            bias: Param::zeros(vec![cout]),
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    fn geometry(&self, x: &Tensor<T>) -> ConvGeometry {
        assert_eq!(x.channels(), self.cin, "conv input channels");
        ConvGeometry {
            channels: self.cin,
            height: x.height(),
            width: x.width(),
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let g = self.geometry(x);
        let (oh, ow) = (g.out_height(), g.out_width());
        let mut y = Tensor::zeros([x.batch(), self.cout, oh, ow]);
        let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
        let w = MatRef::row_major(&self.weight.value, self.cout, g.col_rows());
        for b in 0..x.batch() {
            im2col(x.sample(b), &g, &mut cols);
            let c = MatRef::row_major(&cols, g.col_rows(), g.col_cols());
            gemm(T::one(), w, c, T::zero(), y.sample_mut(b));
        }
        add_bias(&mut y, &self.bias.value);
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let g = self.geometry(x);
        let (rows, ncols) = (g.col_rows(), g.col_cols());
        let mut dx = Tensor::zeros(x.shape());
        let mut cols = vec![T::zero(); rows * ncols];
        let mut dcols = vec![T::zero(); rows * ncols];
        for b in 0..x.batch() {
            im2col(x.sample(b), &g, &mut cols);
            let dyb = MatRef::row_major(dy.sample(b), self.cout, ncols);
            gemm(
                T::one(),
                dyb,
                MatRef::row_major(&cols, rows, ncols).t(),
                T::one(),
                &mut self.weight.grad,
            );
            let w = MatRef::row_major(&self.weight.value, self.cout, rows);
            gemm(T::one(), w.t(), dyb, T::zero(), &mut dcols);
            col2im(&dcols, &g, dx.sample_mut(b));
        }
        accumulate_bias_grad(dy, &mut self.bias.grad);
        dx
    }
}

impl<T: Real> Parameters<T> for Conv2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Transposed convolution, weight stored as `cin × (cout·k·k)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        // Each output pixel sees about cin·(k/stride)² inputs.
        let fan_in = (cin * kernel * kernel) as f64 / (stride * stride) as f64;
        let bound = (3.0 * gain / fan_in).sqrt();
        Self {
            weight: Param::uniform(vec![cin, cout, kernel, kernel], bound, rng),
            bias: Param::zeros(vec![cout]),
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    /// Geometry of the adjoint convolution, which maps output back to input.
    fn geometry(&self, x: &Tensor<T>) -> ConvGeometry {
        assert_eq!(x.channels(), self.cin, "deconv input channels");
        let g = ConvGeometry {
            channels: self.cout,
            height: (x.height() - 1) * self.stride + self.kernel - 2 * self.pad,
            width: (x.width() - 1) * self.stride + self.kernel - 2 * self.pad,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        };
        debug_assert_eq!((g.out_height(), g.out_width()), (x.height(), x.width()));
        g
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let g = self.geometry(x);
        let (rows, ncols) = (g.col_rows(), g.col_cols());
        let mut y = Tensor::zeros([x.batch(), self.cout, g.height, g.width]);
        let mut cols = vec![T::zero(); rows * ncols];
        let w = MatRef::row_major(&self.weight.value, self.cin, rows);
        for b in 0..x.batch() {
            let xb = MatRef::row_major(x.sample(b), self.cin, ncols);
            gemm(T::one(), w.t(), xb, T::zero(), &mut cols);
            col2im(&cols, &g, y.sample_mut(b));
        }
        add_bias(&mut y, &self.bias.value);
        y
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let g = self.geometry(x);
        let (rows, ncols) = (g.col_rows(), g.col_cols());
        let mut dx = Tensor::zeros(x.shape());
        let mut dcols = vec![T::zero(); rows * ncols];
        for b in 0..x.batch() {
            im2col(dy.sample(b), &g, &mut dcols);
            let dc = MatRef::row_major(&dcols, rows, ncols);
            let w = MatRef::row_major(&self.weight.value, self.cin, rows);
            gemm(T::one(), w, dc, T::zero(), dx.sample_mut(b));
            let xb = MatRef::row_major(x.sample(b), self.cin, ncols);
            gemm(T::one(), xb, dc.t(), T::one(), &mut self.weight.grad);
        }
        accumulate_bias_grad(dy, &mut self.bias.grad);
        dx
    }
}

impl<T: Real> Parameters<T> for ConvTranspose2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    momentum: f64,
    eps: f64,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    mean: Vec<T>,
    unbiased_var: Vec<T>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(vec![channels], vec![T::one(); channels]),
            beta: Param::zeros(vec![channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> (Tensor<T>, BatchNormCache<T>) {
        let c = x.channels();
        let plane = x.plane();
        let count = (x.batch() * plane) as f64;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for b in 0..x.batch() {
            for (ch, chunk) in x.sample(b).chunks(plane).enumerate() {
                mean[ch] += chunk.iter().map(|v| v.f64()).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for b in 0..x.batch() {
            for (ch, chunk) in x.sample(b).chunks(plane).enumerate() {
                var[ch] += chunk.iter().map(|v| (v.f64() - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v / count + self.eps).sqrt())
            .collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for b in 0..x.batch() {
            let src = x.sample(b);
            let xh = xhat.sample_mut(b);
            for ch in 0..c {
                let (m, s) = (T::of(mean[ch]), T::of(inv_std[ch]));
                for i in ch * plane..(ch + 1) * plane {
                    xh[i] = (src[i] - m) * s;
                }
            }
            let yb = y.sample_mut(b);
            for ch in 0..c {
                let (gm, bt) = (self.gamma.value[ch], self.beta.value[ch]);
                for i in ch * plane..(ch + 1) * plane {
                    yb[i] = gm * xh[i] + bt;
                }
            }
        }
        let denom = (count - 1.0).max(1.0);
        let cache = BatchNormCache {
            xhat,
            inv_std: inv_std.into_iter().map(T::of).collect(),
            mean: mean.into_iter().map(T::of).collect(),
            unbiased_var: var.into_iter().map(|v| T::of(v / denom)).collect(),
        };
        (y, cache)
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let plane = x.plane();
        let eps = T::of(self.eps);
        let mut y = x.clone();
        for b in 0..x.batch() {
            for (ch, chunk) in y.sample_mut(b).chunks_mut(plane).enumerate() {
                let scale = self.gamma.value[ch] / (self.running_var[ch] + eps).sqrt();
                let shift = self.beta.value[ch] - self.running_mean[ch] * scale;
                chunk.iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
        y
    }

    pub fn backward(&mut self, cache: &BatchNormCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let c = dy.channels();
        let plane = dy.plane();
        let count = (dy.batch() * plane) as f64;
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for b in 0..dy.batch() {
            let (g, xh) = (dy.sample(b), cache.xhat.sample(b));
            for ch in 0..c {
                for i in ch * plane..(ch + 1) * plane {
                    sum_dy[ch] += g[i].f64();
                    sum_dy_xhat[ch] += (g[i] * xh[i]).f64();
                }
            }
        }
        for ch in 0..c {
            self.beta.grad[ch] += T::of(sum_dy[ch]);
            self.gamma.grad[ch] += T::of(sum_dy_xhat[ch]);
        }
        let mut dx = Tensor::zeros(dy.shape());
        for b in 0..dy.batch() {
            let (g, xh) = (dy.sample(b), cache.xhat.sample(b));
            let out = dx.sample_mut(b);
            for ch in 0..c {
                let k = self.gamma.value[ch] * cache.inv_std[ch];
                let mdy = T::of(sum_dy[ch] / count);
                let mdyx = T::of(sum_dy_xhat[ch] / count);
                for i in ch * plane..(ch + 1) * plane {
                    out[i] = k * (g[i] - mdy - xh[i] * mdyx);
                }
            }
        }
        dx
    }

    /// Folds the batch statistics of a training forward pass into the running estimates.
    pub fn absorb(&mut self, cache: &BatchNormCache<T>) {
        let m = T::of(self.momentum);
        let keep = T::one() - m;
        for ch in 0..self.running_mean.len() {
            self.running_mean[ch] = keep * self.running_mean[ch] + m * cache.mean[ch];
            self.running_var[ch] = keep * self.running_var[ch] + m * cache.unbiased_var[ch];
        }
    }
}

impl<T: Real> Parameters<T> for BatchNorm2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

#[derive(Clone, Debug)]
pub enum Linear<T> {
    Conv(Conv2d<T>),
    Deconv(ConvTranspose2d<T>),
}

impl<T: Real> Linear<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Linear::Conv(c) => c.forward(x),
            Linear::Deconv(d) => d.forward(x),
        }
    }

    fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        match self {
            Linear::Conv(c) => c.backward(x, dy),
            Linear::Deconv(d) => d.backward(x, dy),
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            Linear::Conv(c) => c.in_channels(),
            Linear::Deconv(d) => d.in_channels(),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Linear::Conv(c) => c.out_channels(),
            Linear::Deconv(d) => d.out_channels(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Batch statistics, caches kept for backward.
    Train,
    /// Running statistics, no caches.
    Eval,
}

/// Convolution followed by optional batch normalization and rectifier.
#[derive(Clone, Debug)]
pub struct Unit<T> {
    pub linear: Linear<T>,
    pub norm: Option<BatchNorm2d<T>>,
    pub relu: bool,
}

#[derive(Clone, Debug)]
pub struct UnitCache<T> {
    pub input: Tensor<T>,
    pub norm: Option<BatchNormCache<T>>,
    pub output: Tensor<T>,
}

impl<T: Real> Unit<T> {
    pub fn conv_bn_relu(cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let pad = if stride == 1 { kernel / 2 } else { (kernel - stride) / 2 };
        Self {
            linear: Linear::Conv(Conv2d::new(cin, cout, kernel, stride, pad, 2.0, rng)),
            norm: Some(BatchNorm2d::new(cout)),
            relu: true,
        }
    }

    pub fn deconv_bn_relu(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            linear: Linear::Deconv(ConvTranspose2d::new(cin, cout, 4, 2, 1, 2.0, rng)),
            norm: Some(BatchNorm2d::new(cout)),
            relu: true,
        }
    }

    /// Plain convolution: no normalization, no rectifier.
    pub fn conv(cin: usize, cout: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        Self {
            linear: Linear::Conv(Conv2d::new(cin, cout, kernel, 1, kernel / 2, 1.0, rng)),
            norm: None,
            relu: false,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = self.linear.forward(x);
        if let Some(bn) = &self.norm {
            y = bn.forward_eval(&y);
        }
        if self.relu {
            y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
        }
        y
    }

    pub fn forward(&self, x: Tensor<T>, phase: Phase) -> UnitCache<T> {
        let mut y = self.linear.forward(&x);
        let mut norm = None;
        if let Some(bn) = &self.norm {
            match phase {
                Phase::Train => {
                    let (out, cache) = bn.forward_train(&y);
                    y = out;
                    norm = Some(cache);
                }
                Phase::Eval => y = bn.forward_eval(&y),
            }
        }
        if self.relu {
            y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
        }
        UnitCache {
            input: x,
            norm,
            output: y,
        }
    }

    pub fn backward(&mut self, cache: &UnitCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let mut g = dy.clone();
        if self.relu {
            for (gv, &out) in g.data_mut().iter_mut().zip(cache.output.data()) {
                if out <= T::zero() {
                    *gv = T::zero();
                }
            }
        }
        if let (Some(bn), Some(nc)) = (self.norm.as_mut(), cache.norm.as_ref()) {
            g = bn.backward(nc, &g);
        }
        self.linear.backward(&cache.input, &g)
    }

    pub fn absorb(&mut self, cache: &UnitCache<T>) {
        if let (Some(bn), Some(nc)) = (self.norm.as_mut(), cache.norm.as_ref()) {
            bn.absorb(nc);
        }
    }

    pub fn out_channels(&self) -> usize {
        self.linear.out_channels()
    }
}

impl<T: Real> Parameters<T> for Unit<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match &mut self.linear {
            Linear::Conv(c) => c.visit_params(&join(prefix, "conv"), f),
            Linear::Deconv(d) => d.visit_params(&join(prefix, "deconv"), f),
        }
        if let Some(bn) = &mut self.norm {
            bn.visit_params(&join(prefix, "bn"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        if let Some(bn) = &mut self.norm {
            bn.visit_buffers(&join(prefix, "bn"), f);
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adaptive moment estimation with the usual defaults (0.9, 0.999, 1e-8).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn step<T: Real>(&mut self, model: &mut impl Parameters<T>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let state = &mut self.state;
        model.visit_params("", &mut |name, p| {
            let mo = state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
            });
            for i in 0..p.len() {
                let g = p.grad[i].f64();
                mo.m[i] = b1 * mo.m[i] + (1.0 - b1) * g;
                mo.v[i] = b2 * mo.v[i] + (1.0 - b2) * g * g;
                let update = lr * (mo.m[i] / c1) / ((mo.v[i] / c2).sqrt() + eps);
                p.value[i] -= T::of(update);
            }
        });
    }
}

pub fn zero_grads<T: Real>(model: &mut impl Parameters<T>) {
    model.visit_params("", &mut |_, p| p.zero_grad());
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(model: &mut impl Parameters<T>, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    model.visit_params("", &mut |_, p| {
        sq += p.grad.iter().map(|g| g.f64().powi(2)).sum::<f64>();
    });
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::of(max_norm / norm);
        model.visit_params("", &mut |_, p| p.grad.iter_mut().for_each(|g| *g *= scale));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    /// Direct-loop convolution used as an oracle.
    fn naive_conv(x: &Tensor<f64>, conv: &Conv2d<f64>, k: usize, s: usize, p: usize) -> Tensor<f64> {
        let (cin, cout) = (conv.in_channels(), conv.out_channels());
        let oh = (x.height() + 2 * p - k) / s + 1;
        let ow = (x.width() + 2 * p - k) / s + 1;
        let mut y = Tensor::zeros([x.batch(), cout, oh, ow]);
        for b in 0..x.batch() {
            for o in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.value[o];
                        for c in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * s + ki) as isize - p as isize;
                                    let ix = (ox * s + kj) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= x.height() as isize || ix >= x.width() as isize {
                                        continue;
                                    }
                                    let xv = x.sample(b)[(c * x.height() + iy as usize) * x.width() + ix as usize];
                                    acc += conv.weight.value[((o * cin + c) * k + ki) * k + kj] * xv;
                                }
                            }
                        }
                        y.sample_mut(b)[(o * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, p) in &[(3, 1, 1), (4, 2, 1), (1, 1, 0)] {
            let mut conv = Conv2d::<f64>::new(3, 4, k, s, p, 2.0, &mut rng);
            conv.bias.value.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
            let x = rand_tensor([2, 3, 8, 6], &mut rng);
            let fast = conv.forward(&x);
            let slow = naive_conv(&x, &conv, k, s, p);
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn deconv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, deconv(y)> when both share weights and have zero bias.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv2d::<f64>::new(3, 5, 4, 2, 1, 2.0, &mut rng);
        let mut deconv = ConvTranspose2d::<f64>::new(5, 3, 4, 2, 1, 2.0, &mut rng);
        // conv weight is cout×cin×k×k = 5×3×4×4, deconv weight is cin×cout×k×k = 5×3×4×4.
        deconv.weight.value = conv.weight.value.clone();
        let x = rand_tensor([1, 3, 8, 8], &mut rng);
        let y = rand_tensor([1, 5, 4, 4], &mut rng);
        let lhs = dot(&conv.forward(&x), &y);
        let rhs = dot(&x, &deconv.forward(&y));
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        assert_eq!(deconv.forward(&y).shape(), [1, 3, 8, 8]);
    }

    /// Central finite differences of `L = <unit(x), probe>` against backward.
    fn check_unit(mut unit: Unit<f64>, x: Tensor<f64>, rng: &mut ChaCha8Rng) {
        let probe_shape = unit.forward(x.clone(), Phase::Train).output.shape();
        let probe = rand_tensor(probe_shape, rng);
        let cache = unit.forward(x.clone(), Phase::Train);
        zero_grads(&mut unit);
        let dx = unit.backward(&cache, &probe);
        let eps = 1e-6;
        let loss = |u: &Unit<f64>, x: &Tensor<f64>| dot(&u.forward(x.clone(), Phase::Train).output, &probe);
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (loss(&unit, &xp) - loss(&unit, &xm)) / (2.0 * eps);
            assert!((fd - dx.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()), "dx[{i}] {fd} vs {}", dx.data()[i]);
        }
        let mut grads = Vec::new();
        unit.visit_params("", &mut |name, p| grads.push((name.to_string(), p.grad.clone())));
        for (name, grad) in grads {
            for i in (0..grad.len()).step_by(5) {
                let bump = |u: &mut Unit<f64>, d: f64| {
                    u.visit_params("", &mut |n, p| {
                        if n == name {
                            p.value[i] += d;
                        }
                    })
                };
                let mut up = unit.clone();
                bump(&mut up, eps);
                let mut um = unit.clone();
                bump(&mut um, -eps);
                let fd = (loss(&up, &x) - loss(&um, &x)) / (2.0 * eps);
                assert!((fd - grad[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{name}[{i}] {fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn conv_bn_relu_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let unit = Unit::<f64>::conv_bn_relu(2, 3, 3, 1, &mut rng);
        let x = rand_tensor([2, 2, 5, 5], &mut rng);
        check_unit(unit, x, &mut rng);
    }

    #[test]
    fn strided_and_transposed_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let down = Unit::<f64>::conv_bn_relu(2, 3, 4, 2, &mut rng);
        check_unit(down, rand_tensor([2, 2, 6, 6], &mut rng), &mut rng);
        let up = Unit::<f64>::deconv_bn_relu(3, 2, &mut rng);
        check_unit(up, rand_tensor([2, 3, 3, 3], &mut rng), &mut rng);
        let plain = Unit::<f64>::conv(3, 2, 1, &mut rng);
        check_unit(plain, rand_tensor([1, 3, 4, 4], &mut rng), &mut rng);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        bn.running_mean = vec![2.0];
        bn.running_var = vec![4.0 - 1e-5];
        let x = Tensor::from_vec([1, 1, 1, 2], vec![2.0, 6.0]).unwrap();
        let y = bn.forward_eval(&x);
        assert!((y.data()[0]).abs() < 1e-12);
        assert!((y.data()[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::<f64>::new(1, 1, 1, 1, 0, 1.0, &mut rng);
        let before = conv.weight.value[0];
        conv.weight.grad[0] = 3.0;
        let mut opt = Adam::new(0.1);
        opt.step(&mut conv);
        // First step moves by exactly lr·sign(g) up to eps.
        assert!((conv.weight.value[0] - (before - 0.1)).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::<f64>::new(1, 2, 1, 1, 0, 1.0, &mut rng);
        conv.weight.grad = vec![3.0, 4.0];
        let before = clip_grad_norm(&mut conv, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((conv.weight.grad[0] - 0.6).abs() < 1e-12);
    }
}
