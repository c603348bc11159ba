//! Layer building blocks over the tape: dense layers, MLPs, 1-D conv stacks and the GRU cell.

use rand::Rng;

use crate::error::Result;
use crate::kernels::conv_out_len;
use crate::params::{ParamId, ParamSet};
use crate::tape::{Tape, Var};

/// Bias initialization constant.
pub const BIAS_INIT: f32 = 0.0;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let w = ps.add_he(&format!("{name}.w"), &[input, output], input, rng);
        let b = ps.add_const(&format!("{name}.b"), &[output], BIAS_INIT);
        Self { w, b, input, output }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(ps, self.w);
        let b = tape.param(ps, self.b);
        tape.affine(x, w, b)
    }
}

/// Dense layers with ELU between them and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, sizes: &[usize], rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, ps, x)?;
            if i != last {
                x = tape.elu(x);
            }
        }
        Ok(x)
    }

    pub fn output(&self) -> usize {
        self.layers.last().map(|l| l.output).unwrap_or(0)
    }
}

/// One strided convolution layer with per-channel bias.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_len: usize,
    pub out_len: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        in_len: usize,
        rng: &mut R,
    ) -> Self {
        let k = ps.add_he(
            &format!("{name}.k"),
            &[out_channels, in_channels, kernel],
            in_channels * kernel,
            rng,
        );
        let b = ps.add_const(&format!("{name}.b"), &[out_channels], BIAS_INIT);
        Self {
            kernel: k,
            bias: b,
            stride,
            in_channels,
            out_channels,
            in_len,
            out_len: conv_out_len(in_len, stride),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, x: Var) -> Result<Var> {
        let k = tape.param(ps, self.kernel);
        let b = tape.param(ps, self.bias);
        let y = tape.conv1d(x, k, self.stride)?;
        tape.channel_bias(y, b)
    }
}

/// Transposed counterpart of a [`ConvLayer`]: maps `[B, in_channels, in_len]`
/// up to `[B, out_channels, out_len]`.
#[derive(Clone, Debug)]
pub struct ConvTransposeLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub out_len: usize,
}

impl ConvTransposeLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        out_len: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel.div_ceil(stride);
        let k = ps.add_he(&format!("{name}.k"), &[in_channels, out_channels, kernel], fan_in, rng);
        let b = ps.add_const(&format!("{name}.b"), &[out_channels], BIAS_INIT);
        Self {
            kernel: k,
            bias: b,
            stride,
            in_channels,
            out_channels,
            out_len,
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, x: Var) -> Result<Var> {
        let k = tape.param(ps, self.kernel);
        let b = tape.param(ps, self.bias);
        let y = tape.conv1d_transpose(x, k, self.stride, self.out_len)?;
        tape.channel_bias(y, b)
    }
}

/// Gated recurrent unit:
///
/// ```text
/// r  = σ(x·Wxr + h·Whr + br)
/// u  = σ(x·Wxu + h·Whu + bu)
/// n  = tanh(x·Wxn + bxn + r ⊙ (h·Whn + bhn))
/// h' = (1 − u) ⊙ n + u ⊙ h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub wx: ParamId,
    pub bx: ParamId,
    pub wh: ParamId,
    pub bh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        // Glorot-scale weights keep the gates away from saturation at start.
        let wx = ps.add_he(&format!("{name}.wx"), &[input, 3 * hidden], 2 * (input + hidden), rng);
        let bx = ps.add_const(&format!("{name}.bx"), &[3 * hidden], BIAS_INIT);
        let wh = ps.add_he(&format!("{name}.wh"), &[hidden, 3 * hidden], 2 * (input + hidden), rng);
        let bh = ps.add_const(&format!("{name}.bh"), &[3 * hidden], BIAS_INIT);
        Self {
            wx,
            bx,
            wh,
            bh,
            input,
            hidden,
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, h: Var, x: Var) -> Result<Var> {
        let hd = self.hidden;
        let wx = tape.param(ps, self.wx);
        let bx = tape.param(ps, self.bx);
        let wh = tape.param(ps, self.wh);
        let bh = tape.param(ps, self.bh);
        let gx = tape.affine(x, wx, bx)?;
        let gh = tape.affine(h, wh, bh)?;
        let gx_ru = tape.slice_cols(gx, 0, 2 * hd)?;
        let gh_ru = tape.slice_cols(gh, 0, 2 * hd)?;
        let ru_pre = tape.add(gx_ru, gh_ru)?;
        let ru = tape.sigmoid(ru_pre);
        let r = tape.slice_cols(ru, 0, hd)?;
        let u = tape.slice_cols(ru, hd, hd)?;
        let gx_n = tape.slice_cols(gx, 2 * hd, hd)?;
        let gh_n = tape.slice_cols(gh, 2 * hd, hd)?;
        let gated = tape.mul(r, gh_n)?;
        let n_pre = tape.add(gx_n, gated)?;
        let n = tape.tanh(n_pre);
        let keep = tape.mul(u, h)?;
        let one_minus_u = tape.one_minus(u);
        let write = tape.mul(one_minus_u, n)?;
        tape.add(write, keep)
    }
}
