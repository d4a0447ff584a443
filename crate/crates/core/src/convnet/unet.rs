use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    concat_skip, maxpool2, maxpool2_backward, split_skip, Buffer, Conv2d, ConvBnRelu, ConvTranspose2, Mode, Param,
    PoolIndices,
};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    /// Number of encoder (and decoder) stages.
    pub depth: usize,
    /// Filters in the first encoder block.
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 16,
            in_channels: 3,
            out_channels: 1,
        }
    }
}

impl UNetConfig {
    pub fn new(depth: usize, width: usize) -> Self {
        Self {
            depth,
            width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.depth > 16 {
            return Err(Error::Config(format!("depth {} is unreasonably large", self.depth)));
        }
        if self.width < 1 || self.in_channels < 1 || self.out_channels < 1 {
            return Err(Error::Config("width and channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Patch sides must be multiples of this.
    pub fn side_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Channels produced by encoder stage `k` (the bottleneck is `k = depth`).
    pub fn stage_channels(&self, k: usize) -> usize {
        self.width << k
    }
}

#[derive(Debug, Clone)]
pub struct DoubleConv<T> {
    pub first: ConvBnRelu<T>,
    pub second: ConvBnRelu<T>,
}

impl<T: Float> DoubleConv<T> {
    fn new<R: rand::Rng>(name: &str, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self {
            first: ConvBnRelu::new(&format!("{name}.0"), in_ch, out_ch, rng),
            second: ConvBnRelu::new(&format!("{name}.1"), out_ch, out_ch, rng),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.second.forward(&self.first.forward(x)?)
    }

    fn forward_train(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        let y = self.first.forward_train(x)?;
        self.second.forward_train(y)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.second.backward(g)?;
        self.first.backward(&g)
    }

    fn blocks(&self) -> [&ConvBnRelu<T>; 2] {
        [&self.first, &self.second]
    }

    fn blocks_mut(&mut self) -> [&mut ConvBnRelu<T>; 2] {
        [&mut self.first, &mut self.second]
    }
}

/// Encoder-decoder network. Stage `k` of the encoder has `width * 2^k`
/// filters; each decoder stage upsamples, concatenates the matching encoder
/// output (encoder channels first) and applies a double conv. A 1x1 head
/// maps to the output channels.
#[derive(Debug, Clone)]
pub struct UNet<T = f32> {
    config: UNetConfig,
    mode: Mode,
    pub encoders: Vec<DoubleConv<T>>,
    pub bottleneck: DoubleConv<T>,
    /// `ups[k]` maps stage `k+1` channels down to stage `k` channels.
    pub ups: Vec<ConvTranspose2<T>>,
    pub decoders: Vec<DoubleConv<T>>,
    pub head: Conv2d<T>,
    pool_cache: Vec<PoolIndices>,
}

pub fn build_unet<T: Float>(config: UNetConfig, seed: u64) -> Result<UNet<T>> {
    UNet::new(config, seed)
}

impl<T: Float> UNet<T> {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut encoders = Vec::with_capacity(config.depth);
        let mut in_ch = config.in_channels;
        for k in 0..config.depth {
            let out = config.stage_channels(k);
            encoders.push(DoubleConv::new(&format!("enc{k}"), in_ch, out, rng));
            in_ch = out;
        }
        let bottleneck = DoubleConv::new("bottleneck", in_ch, config.stage_channels(config.depth), rng);
        let mut ups = Vec::with_capacity(config.depth);
        let mut decoders = Vec::with_capacity(config.depth);
        for k in 0..config.depth {
            let c = config.stage_channels(k);
            ups.push(ConvTranspose2::new(&format!("up{k}"), 2 * c, c, rng));
            decoders.push(DoubleConv::new(&format!("dec{k}"), 2 * c, c, rng));
        }
        let head = Conv2d::new("head", config.width, config.out_channels, 1, rng);
        Ok(Self {
            config,
            mode: Mode::Training,
            encoders,
            bottleneck,
            ups,
            decoders,
            head,
            pool_cache: Vec::new(),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != 4 {
            return Err(Error::Shape(format!("expected NCHW input, got {:?}", x.shape())));
        }
        let (_, c, h, w) = x.dims4();
        if c != self.config.in_channels {
            return Err(Error::Shape(format!("expected {} input channels, got {c}", self.config.in_channels)));
        }
        let m = self.config.side_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("patch {h}x{w} is not divisible by 2^depth = {m}")));
        }
        Ok(())
    }

    /// Evaluation-mode forward pass; uses running statistics and mutates nothing.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x.clone();
        for enc in &self.encoders {
            let s = enc.forward(&h)?;
            h = maxpool2(&s)?.0;
            skips.push(s);
        }
        h = self.bottleneck.forward(&h)?;
        for k in (0..self.config.depth).rev() {
            let u = self.ups[k].forward(&h)?;
            let cat = concat_skip(&u, &skips[k])?;
            h = self.decoders[k].forward(&cat)?;
        }
        let out = self.head.forward(&h)?;
        debug_assert!(out.all_finite(), "non-finite network output");
        Ok(out)
    }

    /// Forward in the current mode; training mode caches activations for [`UNet::backward`].
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.mode == Mode::Evaluation {
            return self.predict(x);
        }
        self.check_input(x)?;
        self.pool_cache.clear();
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x.clone();
        for enc in &mut self.encoders {
            let s = enc.forward_train(h)?;
            let (pooled, idx) = maxpool2(&s)?;
            self.pool_cache.push(idx);
            skips.push(s);
            h = pooled;
        }
        h = self.bottleneck.forward_train(h)?;
        for k in (0..self.config.depth).rev() {
            let u = self.ups[k].forward_train(h)?;
            let cat = concat_skip(&u, &skips[k])?;
            h = self.decoders[k].forward_train(cat)?;
        }
        let out = self.head.forward_train(h)?;
        debug_assert!(out.all_finite(), "non-finite network output");
        Ok(out)
    }

    /// Accumulates parameter gradients for the last training-mode forward
    /// and returns the gradient with respect to the input.
    pub fn backward(&mut self, loss_grad: &Tensor<T>) -> Result<Tensor<T>> {
        if self.pool_cache.len() != self.config.depth {
            return Err(Error::NoForwardCache);
        }
        let mut g = self.head.backward(loss_grad)?;
        let mut skip_grads = Vec::with_capacity(self.config.depth);
        for k in 0..self.config.depth {
            g = self.decoders[k].backward(&g)?;
            let (g_up, g_skip) = split_skip(&g, self.config.stage_channels(k))?;
            skip_grads.push(g_skip);
            g = self.ups[k].backward(&g_up)?;
        }
        g = self.bottleneck.backward(&g)?;
        let pools = std::mem::take(&mut self.pool_cache);
        for k in (0..self.config.depth).rev() {
            let mut gs = maxpool2_backward(&g, &pools[k])?;
            for (a, b) in gs.data_mut().iter_mut().zip(skip_grads[k].data()) {
                *a += *b;
            }
            g = self.encoders[k].backward(&gs)?;
        }
        debug_assert!(self.params().iter().all(|p| p.grad.all_finite()), "non-finite gradient");
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Trainable parameters in a fixed order (encoder, bottleneck, decoder, head).
    pub fn params(&self) -> Vec<&Param<T>> {
        fn push_dc<'a, T: Float>(dc: &'a DoubleConv<T>, out: &mut Vec<&'a Param<T>>) {
            for b in dc.blocks() {
                out.extend(b.conv.params());
                out.push(&b.bn.gamma);
                out.push(&b.bn.beta);
            }
        }
        let mut out = Vec::new();
        for e in &self.encoders {
            push_dc(e, &mut out);
        }
        push_dc(&self.bottleneck, &mut out);
        for (u, d) in self.ups.iter().zip(&self.decoders) {
            out.push(&u.weight);
            out.push(&u.bias);
            push_dc(d, &mut out);
        }
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        fn push_dc<'a, T: Float>(dc: &'a mut DoubleConv<T>, out: &mut Vec<&'a mut Param<T>>) {
            for b in dc.blocks_mut() {
                out.extend(b.conv.params_mut());
                out.push(&mut b.bn.gamma);
                out.push(&mut b.bn.beta);
            }
        }
        let mut out = Vec::new();
        for e in &mut self.encoders {
            push_dc(e, &mut out);
        }
        push_dc(&mut self.bottleneck, &mut out);
        for (u, d) in self.ups.iter_mut().zip(&mut self.decoders) {
            out.push(&mut u.weight);
            out.push(&mut u.bias);
            push_dc(d, &mut out);
        }
        out.extend(self.head.params_mut());
        out
    }

    /// Batch-norm running statistics, in the same block order as [`UNet::params`].
    pub fn buffers(&self) -> Vec<&Buffer<T>> {
        self.all_blocks().into_iter().flat_map(|b| [&b.bn.running_mean, &b.bn.running_var]).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        let mut out = Vec::new();
        let dcs = self
            .encoders
            .iter_mut()
            .chain(std::iter::once(&mut self.bottleneck))
            .chain(self.decoders.iter_mut());
        for dc in dcs {
            for b in dc.blocks_mut() {
                out.push(&mut b.bn.running_mean);
                out.push(&mut b.bn.running_var);
            }
        }
        out
    }

    fn all_blocks(&self) -> Vec<&ConvBnRelu<T>> {
        self.encoders
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .chain(self.decoders.iter())
            .flat_map(|dc| dc.blocks())
            .collect()
    }

    /// Snapshot of every parameter followed by every running statistic.
    pub fn state(&self) -> Vec<Tensor<T>> {
        self.params()
            .into_iter()
            .map(|p| p.value.clone())
            .chain(self.buffers().into_iter().map(|b| b.value.clone()))
            .collect()
    }

    pub fn load_state(&mut self, state: &[Tensor<T>]) -> Result<()> {
        let n_params = self.params().len();
        if state.len() != n_params + self.buffers().len() {
            return Err(Error::Shape(format!("state has {} tensors, model needs {}", state.len(), n_params + self.buffers().len())));
        }
        let (ps, bs) = state.split_at(n_params);
        for (p, v) in self.params_mut().into_iter().zip(ps) {
            if p.value.shape() != v.shape() {
                return Err(Error::Shape(format!("{}: {:?} vs {:?}", p.name, p.value.shape(), v.shape())));
            }
            p.value = v.clone();
        }
        for (b, v) in self.buffers_mut().into_iter().zip(bs) {
            if b.value.shape() != v.shape() {
                return Err(Error::Shape(format!("{}: {:?} vs {:?}", b.name, b.value.shape(), v.shape())));
            }
            b.value = v.clone();
        }
        Ok(())
    }

    /// Same network in another precision.
    pub fn cast<U: Float>(&self) -> UNet<U> {
        let mut other = UNet::<U>::new(self.config, 0).expect("config already validated");
        let state: Vec<Tensor<U>> = self.state().iter().map(|t| t.cast()).collect();
        other.load_state(&state).expect("identical topology");
        other.mode = self.mode;
        other
    }
}

/// Conv kernels, conv biases and batch-norm scale/shift; running statistics
/// are buffers and are not counted.
pub fn count_parameters<T: Float>(model: &UNet<T>) -> usize {
    model.params().iter().map(|p| p.value.len()).sum()
}

/// Closed-form parameter count for a configuration, without building the model.
pub fn count_parameters_for(config: &UNetConfig) -> usize {
    let double = |i: usize, o: usize| i * 9 * o + o + 2 * o + o * 9 * o + o + 2 * o;
    let mut total = 0;
    let mut c = config.in_channels;
    for k in 0..=config.depth {
        let o = config.stage_channels(k);
        total += double(c, o);
        c = o;
    }
    for k in 0..config.depth {
        let o = config.stage_channels(k);
        total += 2 * o * o * 4 + o + double(2 * o, o);
    }
    total + config.width * config.out_channels + config.out_channels
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_topology_channels() {
        let m: UNet<f32> = UNet::new(UNetConfig::default(), 1).unwrap();
        let enc: Vec<usize> = m.encoders.iter().map(|e| e.second.conv.bias.value.len()).collect();
        assert_eq!(enc, vec![16, 32, 64, 128]);
        assert_eq!(m.bottleneck.second.conv.bias.value.len(), 256);
        assert_eq!(m.head.weight.value.shape(), &[1, 16, 1, 1]);
    }

    #[test]
    fn closed_form_count_agrees_with_built_model() {
        for (d, w) in [(2, 1), (2, 2), (3, 8), (4, 16)] {
            let cfg = UNetConfig::new(d, w);
            let m: UNet<f32> = UNet::new(cfg, 0).unwrap();
            assert_eq!(count_parameters(&m), count_parameters_for(&cfg), "depth {d} width {w}");
        }
    }

    #[test]
    fn shape_contract_and_divisibility() {
        let mut m: UNet<f32> = UNet::new(UNetConfig::new(2, 2), 3).unwrap();
        let x = Tensor::full(&[2, 3, 16, 12], 0.5);
        assert_eq!(m.forward(&x).unwrap().shape(), &[2, 1, 16, 12]);
        assert!(m.forward(&Tensor::zeros(&[1, 3, 10, 12])).is_err());
        assert!(m.forward(&Tensor::zeros(&[1, 2, 16, 16])).is_err());
    }

    #[test]
    fn backward_without_forward_fails() {
        let mut m: UNet<f64> = UNet::new(UNetConfig::new(2, 1), 3).unwrap();
        assert!(matches!(m.backward(&Tensor::zeros(&[1, 1, 4, 4])), Err(Error::NoForwardCache)));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(UNet::<f32>::new(UNetConfig::new(1, 4), 0).is_err());
        assert!(UNet::<f32>::new(UNetConfig::new(3, 0), 0).is_err());
    }

    #[test]
    fn zero_head_gives_zero_output() {
        let mut m: UNet<f32> = UNet::new(UNetConfig::new(2, 2), 5).unwrap();
        m.head.weight.value.fill(0.0);
        let x = Tensor::from_vec(&[1, 3, 8, 8], (0..192).map(|i| (i as f32).sin()).collect()).unwrap();
        assert!(m.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_forward_is_pure_and_deterministic() {
        let mut m: UNet<f32> = UNet::new(UNetConfig::new(2, 2), 5).unwrap();
        let x = Tensor::from_vec(&[2, 3, 8, 8], (0..384).map(|i| (i as f32 * 0.37).cos()).collect()).unwrap();
        m.forward(&x).unwrap(); // move running stats off their defaults
        m.set_mode(Mode::Evaluation);
        let before = m.state();
        let a = m.forward(&x).unwrap();
        let b = m.predict(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(before, m.state());
    }

    #[test]
    fn state_round_trip_and_cast() {
        let m: UNet<f32> = UNet::new(UNetConfig::new(2, 2), 9).unwrap();
        let mut other: UNet<f32> = UNet::new(UNetConfig::new(2, 2), 10).unwrap();
        assert_ne!(m.state(), other.state());
        other.load_state(&m.state()).unwrap();
        assert_eq!(m.state(), other.state());
        let wide: UNet<f64> = m.cast();
        let back: UNet<f32> = wide.cast();
        assert_eq!(back.state(), m.state());
    }
}
