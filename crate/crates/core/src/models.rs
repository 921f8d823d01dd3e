//! U-Net generator and PatchGAN discriminator.

use std::slice;

use crate::error::{Error, Result};
use crate::kernels::{axis_geometry, Padding};
use crate::nn::{init_normal, next_var, DownsampleBlock, InstanceNorm, Module, UpsampleBlock, KERNEL_SIZE};
use crate::rng::Rng;
use crate::tape::{Activation, Tape, Var};
use crate::tensor::{Element, Tensor};

pub const IMAGE_CHANNELS: usize = 3;

/// Network sizing. `full_scale()` is the full 256×256 layout; the knobs let
/// tests and desk-scale runs shrink it.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub image_size: usize,
    pub base_channels: usize,
    /// Generator down blocks.
    pub depth: usize,
    pub channel_cap: usize,
    /// Discriminator down blocks before the two stride-1 convs.
    pub disc_downsamples: usize,
    pub leaky_alpha: f64,
    pub dropout_rate: f64,
    /// How many leading up blocks use dropout.
    pub dropout_blocks: usize,
    pub norm_eps: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl NetConfig {
    pub fn full_scale() -> Self {
        Self {
            image_size: 256,
            base_channels: 64,
            depth: 8,
            channel_cap: 512,
            disc_downsamples: 3,
            leaky_alpha: 0.2,
            dropout_rate: 0.5,
            dropout_blocks: 3,
            norm_eps: 1e-5,
        }
    }

    /// Same layout rules at a smaller scale; the cap stays at 8× base.
    pub fn scaled(image_size: usize, base_channels: usize, depth: usize) -> Self {
        Self {
            image_size,
            base_channels,
            depth,
            channel_cap: 8 * base_channels,
            ..Self::full_scale()
        }
    }

    /// `min(base·2ⁱ, cap)`
    pub fn channels(&self, level: usize) -> usize {
        let scaled = self.base_channels.saturating_mul(1usize.checked_shl(level as u32).unwrap_or(usize::MAX));
        scaled.min(self.channel_cap)
    }

    fn validate_common(&self) -> Result<()> {
        if self.image_size < 2 || !self.image_size.is_power_of_two() {
            return Err(Error::Config(format!("image size {} is not a power of two ≥ 2", self.image_size)));
        }
        if self.base_channels == 0 || self.channel_cap < self.base_channels {
            return Err(Error::Config(format!(
                "base channels {} / cap {} invalid",
                self.base_channels, self.channel_cap
            )));
        }
        if !(self.leaky_alpha > 0.0 && self.leaky_alpha < 1.0) {
            return Err(Error::Config(format!("leaky slope {} outside (0, 1)", self.leaky_alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.norm_eps.is_nan() || self.norm_eps <= 0.0 {
            return Err(Error::Config("instance-norm eps must be positive".into()));
        }
        Ok(())
    }

    pub fn validate_generator(&self) -> Result<()> {
        self.validate_common()?;
        if self.depth == 0 || self.depth >= usize::BITS as usize || self.image_size < (1 << self.depth) {
            return Err(Error::Config(format!(
                "image size {} cannot be halved {} times down to 1×1",
                self.image_size, self.depth
            )));
        }
        Ok(())
    }

    /// Spatial size of the discriminator's logit grid.
    pub fn disc_output_size(&self) -> Option<usize> {
        let mut s = self.image_size;
        for _ in 0..self.disc_downsamples {
            s = axis_geometry(s, KERNEL_SIZE, 2, Padding::Same)?.0;
        }
        let s = axis_geometry(s + 2, KERNEL_SIZE, 1, Padding::Valid)?.0;
        axis_geometry(s + 2, KERNEL_SIZE, 1, Padding::Valid).map(|(s, _)| s)
    }

    pub fn validate_discriminator(&self) -> Result<()> {
        self.validate_common()?;
        if self.disc_output_size().is_none() {
            return Err(Error::Config(format!(
                "image size {} is too small for a discriminator with {} down blocks",
                self.image_size, self.disc_downsamples
            )));
        }
        Ok(())
    }

    /// Render as `key=value` lines.
    pub fn to_lines(&self) -> Vec<(String, String)> {
        vec![
            ("image_size".into(), self.image_size.to_string()),
            ("base_channels".into(), self.base_channels.to_string()),
            ("depth".into(), self.depth.to_string()),
            ("channel_cap".into(), self.channel_cap.to_string()),
            ("disc_downsamples".into(), self.disc_downsamples.to_string()),
            ("leaky_alpha".into(), format!("{:?}", self.leaky_alpha)),
            ("dropout_rate".into(), format!("{:?}", self.dropout_rate)),
            ("dropout_blocks".into(), self.dropout_blocks.to_string()),
            ("norm_eps".into(), format!("{:?}", self.norm_eps)),
        ]
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        fn parse<V: std::str::FromStr>(get: &impl Fn(&str) -> Option<String>, key: &str) -> Result<V> {
            let raw = get(key).ok_or_else(|| Error::Config(format!("missing `{key}`")))?;
            raw.parse().map_err(|_| Error::Config(format!("bad value `{raw}` for `{key}`")))
        }
        Ok(Self {
            image_size: parse(&get, "image_size")?,
            base_channels: parse(&get, "base_channels")?,
            depth: parse(&get, "depth")?,
            channel_cap: parse(&get, "channel_cap")?,
            disc_downsamples: parse(&get, "disc_downsamples")?,
            leaky_alpha: parse(&get, "leaky_alpha")?,
            dropout_rate: parse(&get, "dropout_rate")?,
            dropout_blocks: parse(&get, "dropout_blocks")?,
            norm_eps: parse(&get, "norm_eps")?,
        })
    }
}

fn check_image<T: Element>(tape: &Tape<T>, x: Var, size: usize, op: &'static str) -> Result<()> {
    let [_, h, w, c] = tape.value(x).nhwc()?;
    if (h, w, c) != (size, size, IMAGE_CHANNELS) {
        return Err(Error::shape(
            op,
            format!("expected batch×{size}×{size}×3 input, got {:?}", tape.value(x).dims()),
        ));
    }
    Ok(())
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub stages: Vec<(String, Var)>,
}

impl Trace {
    fn record(&mut self, name: impl Into<String>, var: Var) {
        self.stages.push((name.into(), var));
    }

    pub fn dims<T: Element>(&self, tape: &Tape<T>) -> Vec<(String, Vec<usize>)> {
        self.stages
            .iter()
            .map(|(n, v)| (n.clone(), tape.value(*v).dims().to_vec()))
            .collect()
    }
}

/// U-Net: `depth` down blocks, `depth − 1` up blocks with skip
/// concatenation, then a transposed conv to RGB with tanh.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T> {
    pub config: NetConfig,
    pub down: Vec<DownsampleBlock<T>>,
    pub up: Vec<UpsampleBlock<T>>,
    /// `[4, 4, 3, cin]`
    pub final_kernel: Tensor<T>,
    pub final_bias: Tensor<T>,
}

impl<T: Element> Generator<T> {
    pub fn new(config: &NetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate_generator()?;
        let c = config;
        let mut down = Vec::with_capacity(c.depth);
        let mut cin = IMAGE_CHANNELS;
        for level in 0..c.depth {
            let cout = c.channels(level);
            down.push(DownsampleBlock::new(cin, cout, level > 0, c.leaky_alpha, c.norm_eps, rng));
            cin = cout;
        }
        let mut up = Vec::with_capacity(c.depth - 1);
        for j in 0..c.depth - 1 {
            let cout = c.channels(c.depth - 2 - j);
            let dropout = (j < c.dropout_blocks).then_some(c.dropout_rate);
            up.push(UpsampleBlock::new(cin, cout, dropout, c.norm_eps, rng));
            // skip concat doubles the channels
            cin = 2 * cout;
        }
        let final_kernel = init_normal([KERNEL_SIZE, KERNEL_SIZE, IMAGE_CHANNELS, cin], rng);
        Ok(Self {
            config: c.clone(),
            down,
            up,
            final_kernel,
            final_bias: Tensor::zeros([IMAGE_CHANNELS]),
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, bound: &[Var], x: Var, rng: &mut Rng, training: bool) -> Result<Var> {
        self.forward_impl(tape, bound, x, rng, training, None, None)
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape<T>,
        bound: &[Var],
        x: Var,
        rng: &mut Rng,
        training: bool,
    ) -> Result<(Var, Trace)> {
        let mut trace = Trace::default();
        let y = self.forward_impl(tape, bound, x, rng, training, None, Some(&mut trace))?;
        Ok((y, trace))
    }

    /// `skips[i] == false` replaces skip `i` by zeros of the same shape.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward_impl(
        &self,
        tape: &mut Tape<T>,
        bound: &[Var],
        x: Var,
        rng: &mut Rng,
        training: bool,
        skips: Option<&[bool]>,
        mut trace: Option<&mut Trace>,
    ) -> Result<Var> {
        check_image(tape, x, self.config.image_size, "generator")?;
        let mut params = bound.iter();
        let mut h = x;
        let mut levels = Vec::with_capacity(self.down.len());
        for (i, block) in self.down.iter().enumerate() {
            h = block.forward(tape, &mut params, h)?;
            if let Some(t) = trace.as_deref_mut() {
                t.record(format!("down{i}"), h);
            }
            levels.push(h);
        }
        for (j, block) in self.up.iter().enumerate() {
            h = block.forward(tape, &mut params, h, rng, training)?;
            let level = self.down.len() - 2 - j;
            let skip = if skips.is_some_and(|s| !s[level]) {
                let zeros = Tensor::zeros(tape.value(levels[level]).dims());
                tape.constant(zeros)
            } else {
                levels[level]
            };
            h = tape.concat_channels(h, skip)?;
            if let Some(t) = trace.as_deref_mut() {
                t.record(format!("up{j}"), h);
            }
        }
        let kernel = next_var(&mut params);
        let bias = next_var(&mut params);
        h = tape.conv2d_transpose(h, kernel, Some(bias), 2)?;
        let out = tape.activation(h, Activation::Tanh)?;
        if let Some(t) = trace {
            t.record("output", out);
        }
        debug_assert!(params.next().is_none());
        Ok(out)
    }
}

impl<T: Element> Module<T> for Generator<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.down.iter().enumerate() {
            out.extend(b.params().into_iter().map(|(n, t)| (format!("down{i}/{n}"), t)));
        }
        for (i, b) in self.up.iter().enumerate() {
            out.extend(b.params().into_iter().map(|(n, t)| (format!("up{i}/{n}"), t)));
        }
        out.push(("final/kernel".into(), &self.final_kernel));
        out.push(("final/bias".into(), &self.final_bias));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for b in &mut self.down {
            out.extend(b.params_mut());
        }
        for b in &mut self.up {
            out.extend(b.params_mut());
        }
        out.push(&mut self.final_kernel);
        out.push(&mut self.final_bias);
        out
    }
}

/// PatchGAN: down blocks, pad → conv(s1, valid, no bias) → norm → leaky →
/// pad → conv to one logit channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    pub config: NetConfig,
    pub down: Vec<DownsampleBlock<T>>,
    /// `[4, 4, c_last, c_mid]`
    pub mid_kernel: Tensor<T>,
    pub mid_norm: InstanceNorm<T>,
    /// `[4, 4, c_mid, 1]`
    pub final_kernel: Tensor<T>,
    pub final_bias: Tensor<T>,
}

impl<T: Element> Discriminator<T> {
    pub fn new(config: &NetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate_discriminator()?;
        let c = config;
        let mut down = Vec::with_capacity(c.disc_downsamples);
        let mut cin = IMAGE_CHANNELS;
        for level in 0..c.disc_downsamples {
            let cout = c.channels(level);
            down.push(DownsampleBlock::new(cin, cout, level > 0, c.leaky_alpha, c.norm_eps, rng));
            cin = cout;
        }
        let mid = c.channels(c.disc_downsamples);
        let mid_kernel = init_normal([KERNEL_SIZE, KERNEL_SIZE, cin, mid], rng);
        let mid_norm = InstanceNorm::new(mid, c.norm_eps, rng);
        let final_kernel = init_normal([KERNEL_SIZE, KERNEL_SIZE, mid, 1], rng);
        Ok(Self {
            config: c.clone(),
            down,
            mid_kernel,
            mid_norm,
            final_kernel,
            final_bias: Tensor::zeros([1]),
        })
    }

    /// Raw patch logits, `batch × s × s × 1`.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &[Var], x: Var) -> Result<Var> {
        self.forward_impl(tape, bound, x, None)
    }

    pub fn forward_traced(&self, tape: &mut Tape<T>, bound: &[Var], x: Var) -> Result<(Var, Trace)> {
        let mut trace = Trace::default();
        let y = self.forward_impl(tape, bound, x, Some(&mut trace))?;
        Ok((y, trace))
    }

    fn forward_impl(&self, tape: &mut Tape<T>, bound: &[Var], x: Var, mut trace: Option<&mut Trace>) -> Result<Var> {
        check_image(tape, x, self.config.image_size, "discriminator")?;
        let mut params: slice::Iter<'_, Var> = bound.iter();
        let mut rec = |name: &str, v: Var| {
            if let Some(t) = trace.as_deref_mut() {
                t.record(name, v);
            }
        };
        let mut h = x;
        for (i, block) in self.down.iter().enumerate() {
            h = block.forward(tape, &mut params, h)?;
            rec(&format!("down{i}"), h);
        }
        h = tape.pad_spatial(h, 1)?;
        rec("pad1", h);
        let kernel = next_var(&mut params);
        h = tape.conv2d(h, kernel, None, 1, Padding::Valid)?;
        rec("conv", h);
        let (gamma, beta) = (next_var(&mut params), next_var(&mut params));
        h = tape.instance_norm(h, gamma, beta, self.mid_norm.eps)?;
        h = tape.activation(h, Activation::LeakyRelu(self.config.leaky_alpha))?;
        h = tape.pad_spatial(h, 1)?;
        rec("pad2", h);
        let (kernel, bias) = (next_var(&mut params), next_var(&mut params));
        let logits = tape.conv2d(h, kernel, Some(bias), 1, Padding::Valid)?;
        rec("logits", logits);
        Ok(logits)
    }
}

impl<T: Element> Module<T> for Discriminator<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.down.iter().enumerate() {
            out.extend(b.params().into_iter().map(|(n, t)| (format!("down{i}/{n}"), t)));
        }
        out.push(("mid/kernel".into(), &self.mid_kernel));
        out.push(("mid/gamma".into(), &self.mid_norm.gamma));
        out.push(("mid/beta".into(), &self.mid_norm.beta));
        out.push(("final/kernel".into(), &self.final_kernel));
        out.push(("final/bias".into(), &self.final_bias));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for b in &mut self.down {
            out.extend(b.params_mut());
        }
        out.push(&mut self.mid_kernel);
        out.push(&mut self.mid_norm.gamma);
        out.push(&mut self.mid_norm.beta);
        out.push(&mut self.final_kernel);
        out.push(&mut self.final_bias);
        out
    }
}

/// Evaluation-mode generator forward on a plain tensor.
pub fn generate<T: Element>(net: &Generator<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = net.forward(&mut tape, &bound, xv, &mut Rng::new(0), false)?;
    Ok(tape.value(y).clone())
}

pub fn discriminate<T: Element>(net: &Discriminator<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = net.forward(&mut tape, &bound, xv)?;
    Ok(tape.value(y).clone())
}
