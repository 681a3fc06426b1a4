use std::io::{Read, Write};

use super::{Arm, CallCounter, Forward, HiddenGrid, LogitsGrid};
use crate::codec::{write_f64s, write_u32, Reader};
use crate::error::{shape_err, Error, Result};
use crate::numeric::{axpy, dot, Matrix, Rng};

const MODEL_MAGIC: &[u8; 4] = b"PSAM";
const MODEL_VERSION: u32 = 1;

/// Shape of the reference network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmConfig {
    pub seq_len: usize,
    pub categories: usize,
    /// Embedding width E.
    pub embed: usize,
    /// Hidden width H.
    pub hidden: usize,
    /// Number of dilated convolution layers L; layer `l` has dilation `2^l`.
    pub layers: usize,
    /// Half-width of the uniform init for the output projection. Zero gives
    /// a model that starts out uniform over categories.
    pub output_init_scale: f64,
}

impl ArmConfig {
    pub fn new(seq_len: usize, categories: usize) -> Self {
        Self {
            seq_len,
            categories,
            embed: 16,
            hidden: 64,
            layers: 4,
            output_init_scale: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.categories == 0 || self.embed == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::InvalidArgument(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        if self.layers > 31 {
            return Err(Error::InvalidArgument("at most 31 layers".into()));
        }
        Ok(())
    }

    fn layer_input(&self, l: usize) -> usize {
        if l == 0 {
            self.embed
        } else {
            self.hidden
        }
    }
}

/// One kernel-width-2 causal convolution:
/// `out_i = relu(b + W_cur z_i + W_prev z_{i - dilation})`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub dilation: usize,
    pub w_cur: Matrix,
    pub w_prev: Matrix,
    pub bias: Matrix,
}

/// All trainable parameters. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmParams {
    /// Token embeddings, `K × E`.
    pub embed: Matrix,
    /// Start-of-sequence embedding fed to position 0, `1 × E`.
    pub start: Matrix,
    pub layers: Vec<ConvLayer>,
    /// Output projection, `K × H`.
    pub out_w: Matrix,
    pub out_b: Matrix,
}

pub type ArmGrads = ArmParams;

impl ArmParams {
    /// Parameter blocks in checkpoint order.
    pub fn matrices(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.embed, &self.start];
        for layer in &self.layers {
            out.extend([&layer.w_cur, &layer.w_prev, &layer.bias]);
        }
        out.extend([&self.out_w, &self.out_b]);
        out
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embed, &mut self.start];
        for layer in &mut self.layers {
            out.extend([&mut layer.w_cur, &mut layer.w_prev, &mut layer.bias]);
        }
        out.extend([&mut self.out_w, &mut self.out_b]);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            embed: z(&self.embed),
            start: z(&self.start),
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    dilation: l.dilation,
                    w_cur: z(&l.w_cur),
                    w_prev: z(&l.w_prev),
                    bias: z(&l.bias),
                })
                .collect(),
            out_w: z(&self.out_w),
            out_b: z(&self.out_b),
        }
    }

    pub fn num_params(&self) -> usize {
        self.matrices().iter().map(|m| m.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.matrices()
            .into_iter()
            .flat_map(|m| m.as_slice().iter().copied())
            .collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(shape_err("ArmParams::unflatten", self.num_params(), flat.len()));
        }
        let mut offset = 0;
        for m in self.matrices_mut() {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &ArmParams, alpha: f64) {
        for (a, b) in self.matrices_mut().into_iter().zip(other.matrices()) {
            axpy(alpha, b.as_slice(), a.as_mut_slice());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.is_finite())
    }
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    tokens: Vec<usize>,
    /// Input to each layer, `d × in_l`.
    inputs: Vec<Matrix>,
    /// Pre-activation of each layer, `d × H`.
    pre: Vec<Matrix>,
    /// Final hidden rows, `d × H`.
    hidden: Matrix,
    /// Softmax probabilities of the output, `d × K`.
    probs: Matrix,
}

impl ForwardCache {
    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }
}

/// Reference ARM: shifted token embeddings through a stack of strictly
/// causal dilated convolutions with ReLU and residual connections.
///
/// Position 0 sees a learned start embedding and position `i > 0` sees the
/// embedding of token `i - 1`, so row `i` of every output depends only on
/// tokens before `i`.
#[derive(Debug, Clone)]
pub struct ArmModel {
    config: ArmConfig,
    params: ArmParams,
    counter: CallCounter,
}

impl ArmModel {
    /// Fresh model: fan-in scaled uniform init for inner layers, output
    /// projection per `config.output_init_scale`.
    pub fn new(config: ArmConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (k, e, h) = (config.categories, config.embed, config.hidden);
        let embed = Matrix::uniform(k, e, 1.0, rng);
        let start = Matrix::uniform(1, e, 1.0, rng);
        let layers = (0..config.layers)
            .map(|l| {
                let fan_in = config.layer_input(l);
                let scale = 1.0 / ((2 * fan_in) as f64).sqrt();
                ConvLayer {
                    dilation: 1 << l,
                    w_cur: Matrix::uniform(h, fan_in, scale, rng),
                    w_prev: Matrix::uniform(h, fan_in, scale, rng),
                    bias: Matrix::zeros(1, h),
                }
            })
            .collect();
        let (out_w, out_b) = if config.output_init_scale > 0.0 {
            (
                Matrix::uniform(k, h, config.output_init_scale, rng),
                Matrix::uniform(1, k, config.output_init_scale, rng),
            )
        } else {
            (Matrix::zeros(k, h), Matrix::zeros(1, k))
        };
        Ok(Self {
            config,
            params: ArmParams {
                embed,
                start,
                layers,
                out_w,
                out_b,
            },
            counter: CallCounter::default(),
        })
    }

    pub fn from_params(config: ArmConfig, params: ArmParams) -> Result<Self> {
        config.validate()?;
        let template = ArmModel::new(config, &mut Rng::new(0))?;
        let expected: Vec<_> = template.params.matrices().iter().map(|m| m.shape()).collect();
        let got: Vec<_> = params.matrices().iter().map(|m| m.shape()).collect();
        if expected != got {
            return Err(shape_err("ArmModel::from_params", format!("{expected:?}"), format!("{got:?}")));
        }
        for (l, layer) in params.layers.iter().enumerate() {
            if layer.dilation != 1 << l {
                return Err(shape_err("layer dilation", 1usize << l, layer.dilation));
            }
        }
        Ok(Self {
            config,
            params,
            counter: CallCounter::default(),
        })
    }

    pub fn config(&self) -> &ArmConfig {
        &self.config
    }

    pub fn params(&self) -> &ArmParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ArmParams {
        &mut self.params
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() != self.config.seq_len {
            return Err(shape_err("ArmModel input length", self.config.seq_len, tokens.len()));
        }
        if let Some((position, &token)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t >= self.config.categories)
        {
            return Err(Error::TokenOutOfRange {
                position,
                token,
                categories: self.config.categories,
            });
        }
        Ok(())
    }

    /// Forward pass keeping activations for [`ArmModel::backward`].
    pub fn forward_cached(&self, tokens: &[usize]) -> Result<(Forward, ForwardCache)> {
        self.run(tokens, true)
    }

    pub(crate) fn run(&self, tokens: &[usize], shift_input: bool) -> Result<(Forward, ForwardCache)> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let (d, k, h) = (cfg.seq_len, cfg.categories, cfg.hidden);
        let p = &self.params;

        let mut z = Matrix::zeros(d, cfg.embed);
        for i in 0..d {
            let src = if !shift_input {
                p.embed.row(tokens[i])
            } else if i == 0 {
                p.start.row(0)
            } else {
                p.embed.row(tokens[i - 1])
            };
            z.row_mut(i).copy_from_slice(src);
        }

        let mut inputs = Vec::with_capacity(cfg.layers);
        let mut pre_acts = Vec::with_capacity(cfg.layers);
        for (l, layer) in p.layers.iter().enumerate() {
            let mut pre = Matrix::zeros(d, h);
            for i in 0..d {
                let zi = z.row(i);
                let prev = i.checked_sub(layer.dilation).map(|j| z.row(j));
                let out = pre.row_mut(i);
                out.copy_from_slice(layer.bias.row(0));
                for (c, o) in out.iter_mut().enumerate() {
                    *o += dot(layer.w_cur.row(c), zi);
                    if let Some(zp) = prev {
                        *o += dot(layer.w_prev.row(c), zp);
                    }
                }
            }
            let mut next = Matrix::zeros(d, h);
            for i in 0..d {
                let out = next.row_mut(i);
                for (o, &v) in out.iter_mut().zip(pre.row(i)) {
                    *o = v.max(0.0);
                }
                if l > 0 {
                    axpy(1.0, z.row(i), out);
                }
            }
            inputs.push(std::mem::replace(&mut z, next));
            pre_acts.push(pre);
        }
        let hidden = z;

        let mut scores = Matrix::zeros(d, k);
        for i in 0..d {
            let hi = hidden.row(i);
            let out = scores.row_mut(i);
            for (c, o) in out.iter_mut().enumerate() {
                *o = p.out_b.get(0, c) + dot(p.out_w.row(c), hi);
            }
        }
        let logits = LogitsGrid::from_scores(scores)?;
        let mut probs = logits.matrix().clone();
        probs.as_mut_slice().iter_mut().for_each(|v| *v = v.exp());

        let cache = ForwardCache {
            tokens: tokens.to_vec(),
            inputs,
            pre: pre_acts,
            hidden: hidden.clone(),
            probs,
        };
        Ok((
            Forward {
                logits,
                hidden: HiddenGrid::new(hidden),
            },
            cache,
        ))
    }

    /// Backpropagates gradients on the pre-softmax output scores (`d × K`)
    /// and, optionally, extra gradients on the hidden rows (`d × H`).
    pub fn backward(&self, cache: &ForwardCache, d_scores: &Matrix, d_hidden: Option<&Matrix>) -> Result<ArmGrads> {
        let cfg = &self.config;
        let (d, k, h) = (cfg.seq_len, cfg.categories, cfg.hidden);
        if d_scores.shape() != (d, k) {
            return Err(shape_err("backward d_scores", format!("({d}, {k})"), format!("{:?}", d_scores.shape())));
        }
        if let Some(dh) = d_hidden {
            if dh.shape() != (d, h) {
                return Err(shape_err("backward d_hidden", format!("({d}, {h})"), format!("{:?}", dh.shape())));
            }
        }
        let p = &self.params;
        let mut g = p.zeros_like();

        let mut dz = match d_hidden {
            Some(dh) => dh.clone(),
            None => Matrix::zeros(d, h),
        };
        for i in 0..d {
            let ds = d_scores.row(i);
            let hi = cache.hidden.row(i);
            let dzi = dz.row_mut(i);
            for (c, &s) in ds.iter().enumerate() {
                if s != 0.0 {
                    axpy(s, p.out_w.row(c), dzi);
                    axpy(s, hi, g.out_w.row_mut(c));
                }
            }
            axpy(1.0, ds, g.out_b.row_mut(0));
        }

        for l in (0..cfg.layers).rev() {
            let layer = &p.layers[l];
            let gl = &mut g.layers[l];
            let z_in = &cache.inputs[l];
            let pre = &cache.pre[l];
            let mut dz_in = Matrix::zeros(d, z_in.cols());
            if l > 0 {
                dz_in.as_mut_slice().copy_from_slice(dz.as_slice());
            }
            let mut dpre = vec![0.0; h];
            for i in 0..d {
                for ((dp, &gz), &a) in dpre.iter_mut().zip(dz.row(i)).zip(pre.row(i)) {
                    *dp = if a > 0.0 { gz } else { 0.0 };
                }
                axpy(1.0, &dpre, gl.bias.row_mut(0));
                let prev = i.checked_sub(layer.dilation);
                for (c, &dp) in dpre.iter().enumerate() {
                    if dp == 0.0 {
                        continue;
                    }
                    axpy(dp, z_in.row(i), gl.w_cur.row_mut(c));
                    axpy(dp, layer.w_cur.row(c), dz_in.row_mut(i));
                    if let Some(j) = prev {
                        axpy(dp, z_in.row(j), gl.w_prev.row_mut(c));
                        axpy(dp, layer.w_prev.row(c), dz_in.row_mut(j));
                    }
                }
            }
            dz = dz_in;
        }

        for i in 0..d {
            if i == 0 {
                axpy(1.0, dz.row(0), g.start.row_mut(0));
            } else {
                axpy(1.0, dz.row(i), g.embed.row_mut(cache.tokens[i - 1]));
            }
        }
        Ok(g)
    }

    /// Mean NLL in nats per dimension and its parameter gradient.
    pub fn nll_and_grad(&self, tokens: &[usize]) -> Result<(f64, ArmGrads)> {
        let (fwd, cache) = self.forward_cached(tokens)?;
        let d = tokens.len() as f64;
        let mut nll = 0.0;
        let mut d_scores = cache.probs.clone();
        for (i, &t) in tokens.iter().enumerate() {
            nll -= fwd.logits.row(i)[t];
            d_scores.set(i, t, d_scores.get(i, t) - 1.0);
        }
        d_scores.scale(1.0 / d);
        let grads = self.backward(&cache, &d_scores, None)?;
        Ok((nll / d, grads))
    }

    /// Writes the `PSAM` checkpoint.
    ///
    /// Layout after the header (`magic, version, d, K, H, E, L` as u32): the
    /// embedding table, the start embedding, then per layer `W_cur`,
    /// `W_prev`, bias, then the output projection and its bias. All blocks
    /// are row-major little-endian f64.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let c = &self.config;
        w.write_all(MODEL_MAGIC)?;
        write_u32(w, MODEL_VERSION)?;
        for v in [c.seq_len, c.categories, c.hidden, c.embed, c.layers] {
            write_u32(w, v as u32)?;
        }
        for m in self.params.matrices() {
            write_f64s(w, m.as_slice())?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut reader = Reader::new(r);
        Self::read_with(&mut reader)
    }

    pub(crate) fn read_with<R: Read>(r: &mut Reader<R>) -> Result<Self> {
        r.magic("model checkpoint", MODEL_MAGIC)?;
        r.version("model checkpoint", MODEL_VERSION)?;
        let seq_len = r.u32()? as usize;
        let categories = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let embed = r.u32()? as usize;
        let layers = r.u32()? as usize;
        let config = ArmConfig {
            seq_len,
            categories,
            embed,
            hidden,
            layers,
            output_init_scale: 0.0,
        };
        config.validate()?;
        let mut model = ArmModel::new(config, &mut Rng::new(0))?;
        for m in model.params.matrices_mut() {
            let data = r.f64s(m.len())?;
            m.as_mut_slice().copy_from_slice(&data);
        }
        if !model.params.is_finite() {
            return Err(Error::NonFinite("model checkpoint"));
        }
        Ok(model)
    }
}

impl Arm for ArmModel {
    fn seq_len(&self) -> usize {
        self.config.seq_len
    }

    fn categories(&self) -> usize {
        self.config.categories
    }

    fn hidden_width(&self) -> usize {
        self.config.hidden
    }

    fn evaluate(&self, tokens: &[usize]) -> Result<Forward> {
        self.run(tokens, true).map(|(f, _)| f)
    }

    fn counter(&self) -> &CallCounter {
        &self.counter
    }
}
