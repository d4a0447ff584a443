//! Layer kernels with explicit backward passes. All activations are NCHW.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{matmul, Float, MatRef, Tensor};

/// Trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Float> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::default());
    }
}

/// Non-trainable state (batch-norm running statistics).
#[derive(Debug, Clone)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

fn uniform_init<T: Float, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

// ---------------------------------------------------------------------------
// convolution (odd square kernels, stride 1, "same" zero padding)

fn im2col<T: Float>(input: &[T], channels: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        out_row.fill(T::default());
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out_row[..x0].fill(T::default());
                    let sx0 = (x0 as isize + dx) as usize;
                    out_row[x0..x1].copy_from_slice(&src_row[sx0..sx0 + (x1 - x0)]);
                    out_row[x1..].fill(T::default());
                }
            }
        }
    }
}

fn col2im_add<T: Float>(col: &[T], channels: usize, h: usize, w: usize, k: usize, out: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sx0 = (x0 as isize + dx) as usize;
                    let dst_row = &mut plane[sy as usize * w + sx0..sy as usize * w + sx0 + (x1 - x0)];
                    for (d, s) in dst_row.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

fn conv_dims<T: Float>(input: &Tensor<T>, kernel: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if input.shape().len() != 4 || kernel.shape().len() != 4 {
        return Err(Error::Shape(format!(
            "conv expects 4-d input and kernel, got {:?} and {:?}",
            input.shape(),
            kernel.shape()
        )));
    }
    let (n, c, h, w) = input.dims4();
    let (oc, ic, kh, kw) = kernel.dims4();
    if ic != c {
        return Err(Error::Shape(format!("conv channel mismatch: input has {c}, kernel expects {ic}")));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::Shape(format!("conv kernel must be odd and square, got {kh}x{kw}")));
    }
    Ok((n, c, h, w, oc, kh))
}

/// Stride-1 convolution with zero "same" padding.
pub fn conv2d<T: Float>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w, oc, k) = conv_dims(input, kernel)?;
    if bias.len() != oc {
        return Err(Error::Shape(format!("bias has {} entries for {oc} output channels", bias.len())));
    }
    let hw = h * w;
    let kk = c * k * k;
    let mut out = Tensor::zeros(&[n, oc, h, w]);
    let mut col = if k == 1 { Vec::new() } else { vec![T::default(); kk * hw] };
    let wmat = MatRef::new(kernel.data(), oc, kk);
    for s in 0..n {
        let x = &input.data()[s * c * hw..(s + 1) * c * hw];
        let y = &mut out.data_mut()[s * oc * hw..(s + 1) * oc * hw];
        for (o, row) in y.chunks_mut(hw).enumerate() {
            row.fill(bias[o]);
        }
        let cols: &[T] = if k == 1 {
            x
        } else {
            im2col(x, c, h, w, k, &mut col);
            &col
        };
        matmul(wmat, MatRef::new(cols, kk, hw), y, true);
    }
    debug_assert!(out.all_finite(), "non-finite conv output");
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Float>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w, oc, k) = conv_dims(input, kernel)?;
    if grad_out.shape() != [n, oc, h, w] {
        return Err(Error::Shape(format!(
            "conv backward: grad {:?} does not match output {:?}",
            grad_out.shape(),
            [n, oc, h, w]
        )));
    }
    let hw = h * w;
    let kk = c * k * k;
    let mut gin = Tensor::zeros(input.shape());
    let mut gk = Tensor::zeros(kernel.shape());
    let mut gb = Tensor::zeros(&[oc]);
    let mut col = vec![T::default(); kk * hw];
    let mut gcol = vec![T::default(); kk * hw];
    let wmat = MatRef::new(kernel.data(), oc, kk);
    for s in 0..n {
        let x = &input.data()[s * c * hw..(s + 1) * c * hw];
        let g = &grad_out.data()[s * oc * hw..(s + 1) * oc * hw];
        for (o, row) in g.chunks(hw).enumerate() {
            let mut acc = T::default();
            for &v in row {
                acc += v;
            }
            gb[o] += acc;
        }
        let gmat = MatRef::new(g, oc, hw);
        let gx = &mut gin.data_mut()[s * c * hw..(s + 1) * c * hw];
        if k == 1 {
            matmul(gmat, MatRef::new(x, kk, hw).t(), gk.data_mut(), true);
            matmul(wmat.t(), gmat, gx, false);
        } else {
            im2col(x, c, h, w, k, &mut col);
            matmul(gmat, MatRef::new(&col, kk, hw).t(), gk.data_mut(), true);
            matmul(wmat.t(), gmat, &mut gcol, false);
            col2im_add(&gcol, c, h, w, k, gx);
        }
    }
    Ok((gin, gk, gb))
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Float> Conv2d<T> {
    pub fn new<R: Rng>(name: &str, in_ch: usize, out_ch: usize, k: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), uniform_init(&[out_ch, in_ch, k, k], in_ch * k * k, rng)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_ch])),
            input: None,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight.value, &self.bias.value)
    }

    pub fn forward_train(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        let y = self.forward(&x)?;
        self.input = Some(x);
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or(Error::NoForwardCache)?;
        let (gin, gk, gb) = conv2d_backward(grad, &x, &self.weight.value)?;
        add_into(&mut self.weight.grad, &gk);
        add_into(&mut self.bias.grad, &gb);
        Ok(gin)
    }

    pub(crate) fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub(crate) fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }
}

fn add_into<T: Float>(dst: &mut Tensor<T>, src: &Tensor<T>) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += *s;
    }
}

// ---------------------------------------------------------------------------
// batch normalization

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    Evaluation,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache<T>>,
}

/// Per-channel normalization; training mode also returns the normalized
/// activations and inverse std for backward and updates running statistics.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm<T: Float>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    mode: Mode,
    momentum: f64,
    eps: f64,
) -> Result<(Tensor<T>, Option<(Tensor<T>, Vec<f64>)>)> {
    let (n, c, h, w) = input.dims4();
    if gamma.len() != c || beta.len() != c || running_mean.len() != c || running_var.len() != c {
        return Err(Error::Shape(format!("batchnorm channel mismatch: input has {c}")));
    }
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut out = Tensor::zeros(input.shape());
    match mode {
        Mode::Evaluation => {
            for ch in 0..c {
                let inv = 1.0 / (running_var[ch].to_f64() + eps).sqrt();
                let scale = T::from_f64(gamma[ch].to_f64() * inv);
                let shift = T::from_f64(beta[ch].to_f64() - running_mean[ch].to_f64() * gamma[ch].to_f64() * inv);
                for s in 0..n {
                    let off = (s * c + ch) * hw;
                    let src = &input.data()[off..off + hw];
                    let dst = &mut out.data_mut()[off..off + hw];
                    for (d, &x) in dst.iter_mut().zip(src) {
                        *d = x * scale + shift;
                    }
                }
            }
            Ok((out, None))
        }
        Mode::Training => {
            let mut xhat = Tensor::zeros(input.shape());
            let mut inv_std = Vec::with_capacity(c);
            for ch in 0..c {
                let mut sum = 0.0;
                for s in 0..n {
                    let off = (s * c + ch) * hw;
                    sum += input.data()[off..off + hw].iter().map(|v| v.to_f64()).sum::<f64>();
                }
                let mean = sum / count;
                let mut sq = 0.0;
                for s in 0..n {
                    let off = (s * c + ch) * hw;
                    sq += input.data()[off..off + hw]
                        .iter()
                        .map(|v| {
                            let d = v.to_f64() - mean;
                            d * d
                        })
                        .sum::<f64>();
                }
                let var = sq / count;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std.push(inv);
                let (g, b) = (gamma[ch], beta[ch]);
                let (mean_t, inv_t) = (T::from_f64(mean), T::from_f64(inv));
                for s in 0..n {
                    let off = (s * c + ch) * hw;
                    for i in off..off + hw {
                        let xh = (input[i] - mean_t) * inv_t;
                        xhat[i] = xh;
                        out[i] = g * xh + b;
                    }
                }
                let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
                running_mean[ch] = T::from_f64((1.0 - momentum) * running_mean[ch].to_f64() + momentum * mean);
                running_var[ch] = T::from_f64((1.0 - momentum) * running_var[ch].to_f64() + momentum * unbiased);
            }
            Ok((out, Some((xhat, inv_std))))
        }
    }
}

impl<T: Float> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[channels], T::from_f64(1.0))),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: Tensor::zeros(&[channels]),
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: Tensor::full(&[channels], T::from_f64(1.0)),
            },
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            cache: None,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut rm = self.running_mean.value.clone();
        let mut rv = self.running_var.value.clone();
        let (y, _) = batchnorm(x, &self.gamma.value, &self.beta.value, &mut rm, &mut rv, Mode::Evaluation, self.momentum, self.eps)?;
        Ok(y)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, cache) = batchnorm(
            x,
            &self.gamma.value,
            &self.beta.value,
            &mut self.running_mean.value,
            &mut self.running_var.value,
            Mode::Training,
            self.momentum,
            self.eps,
        )?;
        let (xhat, inv_std) = cache.expect("training mode caches");
        self.cache = Some(BnCache { xhat, inv_std });
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let BnCache { xhat, inv_std } = self.cache.take().ok_or(Error::NoForwardCache)?;
        let (n, c, h, w) = grad.dims4();
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut gin = Tensor::zeros(grad.shape());
        for ch in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for s in 0..n {
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    let g = grad[i].to_f64();
                    sum_g += g;
                    sum_gx += g * xhat[i].to_f64();
                }
            }
            self.beta.grad[ch] += T::from_f64(sum_g);
            self.gamma.grad[ch] += T::from_f64(sum_gx);
            let gamma = self.gamma.value[ch].to_f64();
            let k = gamma * inv_std[ch] / m;
            for s in 0..n {
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    let v = k * (m * grad[i].to_f64() - sum_g - xhat[i].to_f64() * sum_gx);
                    gin[i] = T::from_f64(v);
                }
            }
        }
        Ok(gin)
    }
}

// ---------------------------------------------------------------------------
// activations, pooling, up-convolution, skip concatenation

pub fn relu<T: Float>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::default() { v } else { T::default() })
}

/// Routes gradient through cells whose forward output was positive.
pub fn relu_backward<T: Float>(grad: &Tensor<T>, output: &Tensor<T>) -> Tensor<T> {
    let data = grad
        .data()
        .iter()
        .zip(output.data())
        .map(|(&g, &y)| if y > T::default() { g } else { T::default() })
        .collect();
    Tensor::from_vec(grad.shape(), data).expect("same shape")
}

/// Argmax position (0..4, row-major within the window) per pooled cell.
#[derive(Debug, Clone)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    argmax: Vec<u8>,
}

pub fn maxpool2<T: Float>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let (n, c, h, w) = input.dims4();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("maxpool needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0u8; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &input.data()[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let base = 2 * y * w + 2 * x;
                let cand = [src[base], src[base + 1], src[base + w], src[base + w + 1]];
                let mut best = 0;
                for i in 1..4 {
                    if cand[i] > cand[best] {
                        best = i;
                    }
                }
                let o = plane * oh * ow + y * ow + x;
                out[o] = cand[best];
                argmax[o] = best as u8;
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2_backward<T: Float>(grad: &Tensor<T>, idx: &PoolIndices) -> Result<Tensor<T>> {
    if grad.len() != idx.argmax.len() {
        return Err(Error::Shape("maxpool backward: gradient does not match pooled shape".into()));
    }
    let (_, _, h, w) = (idx.input_shape[0], idx.input_shape[1], idx.input_shape[2], idx.input_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut gin = Tensor::zeros(&idx.input_shape);
    for (o, (&g, &a)) in grad.data().iter().zip(&idx.argmax).enumerate() {
        let plane = o / (oh * ow);
        let r = o % (oh * ow);
        let (y, x) = (r / ow, r % ow);
        let (dy, dx) = ((a / 2) as usize, (a % 2) as usize);
        gin[plane * h * w + (2 * y + dy) * w + 2 * x + dx] = g;
    }
    Ok(gin)
}

/// Stride-2 transposed convolution with a 2x2 kernel shaped `InC x OutC x 2 x 2`.
pub fn transposed_conv2<T: Float>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4();
    let (ic, oc, kh, kw) = kernel.dims4();
    if ic != c || kh != 2 || kw != 2 || bias.len() != oc {
        return Err(Error::Shape(format!(
            "transposed conv: input {:?}, kernel {:?}, bias {:?}",
            input.shape(),
            kernel.shape(),
            bias.shape()
        )));
    }
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, oc, oh, ow]);
    let mut tmp = vec![T::default(); oc * 4 * hw];
    let kmat = MatRef::new(kernel.data(), ic, oc * 4).t();
    for s in 0..n {
        let x = &input.data()[s * c * hw..(s + 1) * c * hw];
        matmul(kmat, MatRef::new(x, c, hw), &mut tmp, false);
        let y = &mut out.data_mut()[s * oc * oh * ow..(s + 1) * oc * oh * ow];
        for o in 0..oc {
            let b = bias[o];
            for k in 0..4 {
                let (dy, dx) = (k / 2, k % 2);
                let src = &tmp[(o * 4 + k) * hw..(o * 4 + k + 1) * hw];
                for yy in 0..h {
                    let row = &mut y[o * oh * ow + (2 * yy + dy) * ow..];
                    for xx in 0..w {
                        row[2 * xx + dx] = src[yy * w + xx] + b;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn transposed_conv2_backward<T: Float>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = input.dims4();
    let (_, oc, _, _) = kernel.dims4();
    let (oh, ow) = (2 * h, 2 * w);
    if grad_out.shape() != [n, oc, oh, ow] {
        return Err(Error::Shape(format!("transposed conv backward: grad {:?}", grad_out.shape())));
    }
    let hw = h * w;
    let mut gin = Tensor::zeros(input.shape());
    let mut gk = Tensor::zeros(kernel.shape());
    let mut gb = Tensor::zeros(&[oc]);
    let mut gtmp = vec![T::default(); oc * 4 * hw];
    let kmat = MatRef::new(kernel.data(), c, oc * 4);
    for s in 0..n {
        let g = &grad_out.data()[s * oc * oh * ow..(s + 1) * oc * oh * ow];
        for o in 0..oc {
            let mut acc = T::default();
            for k in 0..4 {
                let (dy, dx) = (k / 2, k % 2);
                let dst = &mut gtmp[(o * 4 + k) * hw..(o * 4 + k + 1) * hw];
                for yy in 0..h {
                    let row = &g[o * oh * ow + (2 * yy + dy) * ow..];
                    for xx in 0..w {
                        let v = row[2 * xx + dx];
                        dst[yy * w + xx] = v;
                        acc += v;
                    }
                }
            }
            gb[o] += acc;
        }
        let x = &input.data()[s * c * hw..(s + 1) * c * hw];
        let gt = MatRef::new(&gtmp, oc * 4, hw);
        matmul(MatRef::new(x, c, hw), gt.t(), gk.data_mut(), true);
        matmul(kmat, gt, &mut gin.data_mut()[s * c * hw..(s + 1) * c * hw], false);
    }
    Ok((gin, gk, gb))
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Float> ConvTranspose2<T> {
    pub fn new<R: Rng>(name: &str, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), uniform_init(&[in_ch, out_ch, 2, 2], in_ch, rng)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_ch])),
            input: None,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        transposed_conv2(x, &self.weight.value, &self.bias.value)
    }

    pub fn forward_train(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        let y = self.forward(&x)?;
        self.input = Some(x);
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or(Error::NoForwardCache)?;
        let (gin, gk, gb) = transposed_conv2_backward(grad, &x, &self.weight.value)?;
        add_into(&mut self.weight.grad, &gk);
        add_into(&mut self.bias.grad, &gb);
        Ok(gin)
    }
}

/// Concatenates along channels with the encoder features first:
/// output channels `0..C_enc` are `encoder_feat`, the rest `decoder_feat`.
pub fn concat_skip<T: Float>(decoder_feat: &Tensor<T>, encoder_feat: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, cd, h, w) = decoder_feat.dims4();
    let (n2, ce, h2, w2) = encoder_feat.dims4();
    if (n, h, w) != (n2, h2, w2) {
        return Err(Error::Shape(format!(
            "skip concat: decoder {:?} vs encoder {:?}",
            decoder_feat.shape(),
            encoder_feat.shape()
        )));
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * (cd + ce) * hw);
    for s in 0..n {
        data.extend_from_slice(&encoder_feat.data()[s * ce * hw..(s + 1) * ce * hw]);
        data.extend_from_slice(&decoder_feat.data()[s * cd * hw..(s + 1) * cd * hw]);
    }
    Tensor::from_vec(&[n, cd + ce, h, w], data)
}

/// Splits a concat gradient back into `(decoder_grad, encoder_grad)`.
pub fn split_skip<T: Float>(grad: &Tensor<T>, encoder_channels: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = grad.dims4();
    if encoder_channels > c {
        return Err(Error::Shape(format!("cannot split {encoder_channels} of {c} channels")));
    }
    let cd = c - encoder_channels;
    let hw = h * w;
    let mut enc = Vec::with_capacity(n * encoder_channels * hw);
    let mut dec = Vec::with_capacity(n * cd * hw);
    for s in 0..n {
        let sample = &grad.data()[s * c * hw..(s + 1) * c * hw];
        enc.extend_from_slice(&sample[..encoder_channels * hw]);
        dec.extend_from_slice(&sample[encoder_channels * hw..]);
    }
    Ok((
        Tensor::from_vec(&[n, cd, h, w], dec)?,
        Tensor::from_vec(&[n, encoder_channels, h, w], enc)?,
    ))
}

// ---------------------------------------------------------------------------
// conv -> batch-norm -> relu

#[derive(Debug, Clone)]
pub struct ConvBnRelu<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    output: Option<Tensor<T>>,
}

impl<T: Float> ConvBnRelu<T> {
    pub fn new<R: Rng>(name: &str, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), in_ch, out_ch, 3, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), out_ch),
            output: None,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(relu(&self.bn.forward(&self.conv.forward(x)?)?))
    }

    pub fn forward_train(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        let z = self.conv.forward_train(x)?;
        let y = relu(&self.bn.forward_train(&z)?);
        self.output = Some(y.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.output.take().ok_or(Error::NoForwardCache)?;
        let g = relu_backward(grad, &y);
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn conv_all_ones_counts_neighbors() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_identity_and_bias() {
        let x = t(&[1, 1, 2, 3], vec![1.0, -2.0, 3.0, 4.0, 5.0, -6.0]);
        let mut k = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        k[4] = 1.0;
        assert_eq!(conv2d(&x, &k, &Tensor::zeros(&[1])).unwrap().data(), x.data());
        let y = conv2d(&x, &Tensor::zeros(&[1, 1, 3, 3]), &Tensor::full(&[1], 2.5)).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn conv_backward_sum_loss_identity_kernel() {
        let x = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let mut k = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        k[4] = 1.0;
        let g = Tensor::full(&[1, 1, 2, 2], 1.0);
        let (gin, _, gb) = conv2d_backward(&g, &x, &k).unwrap();
        assert_eq!(gin.data(), &[1.0; 4]);
        assert_eq!(gb.data(), &[4.0]);
    }

    #[test]
    fn batchnorm_training_normalizes() {
        let x = t(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 6.0]);
        let mut rm = Tensor::zeros(&[1]);
        let mut rv = Tensor::full(&[1], 1.0);
        let (y, _) = batchnorm(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1]), &mut rm, &mut rv, Mode::Training, 0.1, 1e-5).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
        // running stats: mean 3, unbiased var 14/3
        assert!((rm[0] - 0.3).abs() < 1e-12);
        assert!((rv[0] - (0.9 + 0.1 * 14.0 / 3.0)).abs() < 1e-12);

        let (y, _) = batchnorm(&x, &Tensor::full(&[1], 2.0), &Tensor::full(&[1], 3.0), &mut rm, &mut rv, Mode::Training, 0.1, 1e-5).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let std = (y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!((mean - 3.0).abs() < 1e-12);
        assert!((std - 2.0).abs() < 1e-4);
    }

    #[test]
    fn batchnorm_eval_with_unit_stats_is_near_identity() {
        let x = t(&[1, 2, 1, 2], vec![1.0, -2.0, 0.5, 7.0]);
        let mut rm = Tensor::zeros(&[2]);
        let mut rv = Tensor::full(&[2], 1.0);
        let (y, cache) = batchnorm(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), &mut rm, &mut rv, Mode::Evaluation, 0.1, 1e-5).unwrap();
        assert!(cache.is_none());
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
        }
        assert_eq!(rm.data(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_and_pool() {
        let x = t(&[1, 1, 1, 2], vec![-1.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        let x = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let (y, idx) = maxpool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = maxpool2_backward(&Tensor::full(&[1, 1, 1, 1], 1.0), &idx).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.0]);
        assert!(maxpool2(&Tensor::<f64>::zeros(&[1, 1, 3, 2])).is_err());
    }

    #[test]
    fn transposed_conv_expands_cells() {
        let x = t(&[1, 1, 1, 1], vec![3.5]);
        let y = transposed_conv2(&x, &Tensor::full(&[1, 1, 2, 2], 1.0), &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[3.5; 4]);
        let y = transposed_conv2(&Tensor::zeros(&[1, 1, 2, 3]), &Tensor::full(&[1, 1, 2, 2], 1.0), &Tensor::full(&[1], -1.0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 6]);
        assert!(y.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn transposed_conv_block_placement() {
        // kernel k[ky][kx] = 1 + 2*ky + kx, input [[1,2],[3,4]]: block (y,x) is v * k
        let x = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = transposed_conv2(&x, &k, &Tensor::zeros(&[1])).unwrap();
        let mut want = vec![0.0; 16];
        for iy in 0..2 {
            for ix in 0..2 {
                for ky in 0..2 {
                    for kx in 0..2 {
                        want[(2 * iy + ky) * 4 + 2 * ix + kx] += x[iy * 2 + ix] * k[ky * 2 + kx];
                    }
                }
            }
        }
        assert_eq!(y.data(), &want[..]);
    }

    #[test]
    fn concat_order_and_split() {
        let dec = Tensor::<f64>::full(&[1, 2, 1, 1], 1.0);
        let enc = Tensor::<f64>::full(&[1, 3, 1, 1], 2.0);
        let cat = concat_skip(&dec, &enc).unwrap();
        assert_eq!(cat.shape(), &[1, 5, 1, 1]);
        assert_eq!(cat.data(), &[2.0, 2.0, 2.0, 1.0, 1.0]);
        let (d, e) = split_skip(&cat, 3).unwrap();
        assert_eq!((d, e), (dec.clone(), enc));
        let (gd, ge) = split_skip(&Tensor::<f64>::full(&[1, 5, 1, 1], 1.0), 3).unwrap();
        assert!(gd.data().iter().chain(ge.data()).all(|&v| v == 1.0));
        assert!(concat_skip(&dec, &Tensor::zeros(&[1, 3, 2, 1])).is_err());
    }
}
