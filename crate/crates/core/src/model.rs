//! The ECG-NAT network: conv tokenizer, hierarchical neighborhood-attention
//! encoder with strided-conv downsamplers, transposed-conv decoder and a
//! linear classifier over the flattened latent code.
//!
//! Public activations use the `[channels×length]` layout. Inside a stage the
//! blocks run on `[length×channels]` rows so every projection is one GEMM.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{neighborhood_attention, Var};
use crate::error::{Error, Result};
use crate::natten::check_window;
use crate::params::{Binder, Init, ParamId, ParamStore};
use crate::tensor::Real;

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_leads: usize,
    pub input_len: usize,
    pub embed_dim: usize,
    pub stage_heads: Vec<usize>,
    pub mlp_ratio: f64,
    pub window_k: usize,
    pub blocks_per_stage: usize,
    pub n_classes: usize,
    pub noise_std: f64,
    pub mask_ratio: f64,
    /// Length in tokens of each contiguous masked segment.
    pub mask_span: usize,
    pub tau: f64,
    pub alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_leads: 12,
            input_len: 2500,
            embed_dim: 96,
            stage_heads: vec![2, 4, 8, 16],
            mlp_ratio: 4.0,
            window_k: 7,
            blocks_per_stage: 3,
            n_classes: 5,
            noise_std: 0.2,
            mask_ratio: 0.5,
            mask_span: 1,
            tau: 0.07,
            alpha: 0.5,
        }
    }
}

/// Output length of a 1D convolution.
pub fn conv_len(len: usize, kernel: usize, stride: usize, pad_left: usize, pad_right: usize) -> usize {
    (len + pad_left + pad_right).saturating_sub(kernel) / stride + 1
}

/// Downsampler padding: one zero on the left only, so odd lengths halve by floor.
const DOWN_PAD: (usize, usize) = (1, 0);
const TOKEN_PAD: usize = 1;

impl ModelConfig {
    /// Every violated constraint, one message each.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.n_leads == 0 {
            out.push("n_leads must be positive".into());
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            out.push(format!("embed_dim must be even and >= 2, got {}", self.embed_dim));
        }
        if self.stage_heads.is_empty() {
            out.push("stage_heads must list at least one stage".into());
        }
        for &h in &self.stage_heads {
            if h == 0 || self.embed_dim % h != 0 {
                out.push(format!("embed_dim {} is not divisible by head count {h}", self.embed_dim));
            }
        }
        if check_window(self.window_k).is_err() {
            out.push(format!("window_k must be odd and positive, got {}", self.window_k));
        }
        if self.blocks_per_stage == 0 {
            out.push("blocks_per_stage must be positive".into());
        }
        if !(self.mlp_ratio > 0.0) {
            out.push(format!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        if self.n_classes < 2 {
            out.push(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if !(self.noise_std >= 0.0) {
            out.push(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        if !(self.mask_ratio >= 0.0 && self.mask_ratio <= 1.0) {
            out.push(format!("mask_ratio must lie in [0, 1], got {}", self.mask_ratio));
        }
        if self.mask_span == 0 {
            out.push("mask_span must be at least 1".into());
        }
        if !(self.tau > 0.0) {
            out.push(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            out.push(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if out.is_empty() {
            let lens = self.token_lens();
            if lens.iter().any(|&l| l == 0) || self.input_len < 2 {
                out.push(format!("input_len {} is too short for the tokenizer", self.input_len));
            } else {
                let mut n = lens[1];
                for s in 1..self.stage_heads.len() {
                    if n < 2 {
                        out.push(format!(
                            "input_len {} leaves stage {} with {n} token(s); downsampling needs >= 2",
                            self.input_len,
                            s - 1
                        ));
                        break;
                    }
                    n = conv_len(n, 3, 2, DOWN_PAD.0, DOWN_PAD.1);
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    pub fn n_stages(&self) -> usize {
        self.stage_heads.len()
    }

    /// Lengths after the first and second tokenizer convolutions.
    pub fn token_lens(&self) -> [usize; 2] {
        if self.input_len + 2 * TOKEN_PAD < 3 {
            return [0, 0];
        }
        let l1 = conv_len(self.input_len, 3, 2, TOKEN_PAD, TOKEN_PAD);
        [l1, conv_len(l1, 3, 2, TOKEN_PAD, TOKEN_PAD)]
    }

    /// Total stride of the tokenizer, in input samples per token.
    pub fn token_stride(&self) -> usize {
        4
    }

    /// `(channels, length)` of each stage's output.
    pub fn stage_shapes(&self) -> Vec<(usize, usize)> {
        let mut n = self.token_lens()[1];
        let mut out = Vec::with_capacity(self.n_stages());
        for s in 0..self.n_stages() {
            if s > 0 {
                n = conv_len(n, 3, 2, DOWN_PAD.0, DOWN_PAD.1);
            }
            out.push((self.embed_dim << s, n));
        }
        out
    }

    /// `(channels, length)` of the latent code.
    pub fn latent_shape(&self) -> (usize, usize) {
        *self.stage_shapes().last().expect("at least one stage")
    }

    pub fn mlp_hidden(&self, width: usize) -> usize {
        (self.mlp_ratio * width as f64).round().max(1.0) as usize
    }

    /// `(channels, length)` after each decoder layer, ending at `(n_leads, input_len)`.
    pub fn decoder_shapes(&self) -> Vec<(usize, usize)> {
        let stages = self.stage_shapes();
        let [l1, _] = self.token_lens();
        let mut out: Vec<(usize, usize)> = stages.iter().rev().skip(1).copied().collect();
        out.push((self.embed_dim / 2, l1));
        out.push((self.n_leads, self.input_len));
        out
    }
}

/// Learnable-scalar counts by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub tokenizer: usize,
    pub blocks: usize,
    pub downsamplers: usize,
    pub decoder: usize,
    pub classifier: usize,
}

impl ParamCount {
    pub fn encoder(&self) -> usize {
        self.tokenizer + self.blocks + self.downsamplers
    }

    /// Everything used at fine-tuning time (encoder and classifier).
    pub fn finetune(&self) -> usize {
        self.encoder() + self.classifier
    }

    pub fn total(&self) -> usize {
        self.encoder() + self.decoder + self.classifier
    }
}

/// Closed-form parameter count; agrees with the allocated [`EcgNat`] exactly.
pub fn count_params(cfg: &ModelConfig) -> ParamCount {
    let c0 = cfg.embed_dim;
    let half = c0 / 2;
    let tokenizer = cfg.n_leads * half * 3 + half + half * c0 * 3 + c0;
    let mut blocks = 0;
    let mut downsamplers = 0;
    for (s, &heads) in cfg.stage_heads.iter().enumerate() {
        let c = c0 << s;
        let h = cfg.mlp_hidden(c);
        let block = 2 * c + 4 * (c * c + c) + heads * (2 * cfg.window_k - 1) + 2 * c + (c * h + h) + (h * c + c);
        blocks += cfg.blocks_per_stage * block;
        if s + 1 < cfg.n_stages() {
            downsamplers += c * 2 * c * 3 + 2 * c;
        }
    }
    let mut decoder = 0;
    let mut prev = cfg.latent_shape();
    for (c, l) in cfg.decoder_shapes() {
        let k = l - 2 * (prev.1 - 1);
        decoder += prev.0 * c * k + c;
        prev = (c, l);
    }
    let (cz, nz) = cfg.latent_shape();
    let classifier = cz * nz * cfg.n_classes + cfg.n_classes;
    ParamCount {
        tokenizer,
        blocks,
        downsamplers,
        decoder,
        classifier,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), &[fan_in, fan_out], Init::TruncNormal(INIT_STD), rng),
            b: store.add(format!("{name}.b"), &[fan_out], Init::Zeros, rng),
        }
    }

    /// `x [rows×in] → [rows×out]`.
    pub fn forward<'g, T: Real>(&self, p: &Binder<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.matmul(p.param(self.w))?.add(p.param(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.g"), &[width], Init::Ones, rng),
            beta: store.add(format!("{name}.b"), &[width], Init::Zeros, rng),
        }
    }

    pub fn forward<'g, T: Real>(&self, p: &Binder<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.layer_norm(p.param(self.gamma), p.param(self.beta), T::from_f(LN_EPS))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: (usize, usize),
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: (usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        Conv {
            w: store.add(format!("{name}.w"), &[c_out, c_in, kernel], Init::FanInUniform(c_in * kernel), rng),
            b: store.add(format!("{name}.b"), &[c_out], Init::Zeros, rng),
            stride,
            pad,
        }
    }

    pub fn forward<'g, T: Real>(&self, p: &Binder<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.conv1d_asym(p.param(self.w), Some(p.param(self.b)), self.stride, self.pad.0, self.pad.1)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvT {
    pub w: ParamId,
    pub b: ParamId,
}

impl ConvT {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        ConvT {
            w: store.add(format!("{name}.w"), &[c_in, c_out, kernel], Init::FanInUniform(c_out * kernel), rng),
            b: store.add(format!("{name}.b"), &[c_out], Init::Zeros, rng),
        }
    }

    pub fn forward<'g, T: Real>(&self, p: &Binder<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.conv_transpose1d(p.param(self.w), Some(p.param(self.b)), 2, 0)
    }
}

/// Pre-norm transformer block with neighborhood attention.
#[derive(Debug, Clone)]
pub struct NatBlock {
    pub width: usize,
    pub heads: usize,
    pub window: usize,
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub rpb: ParamId,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl NatBlock {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        window: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        NatBlock {
            width,
            heads,
            window,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width, rng),
            q: Linear::new(store, &format!("{name}.q"), width, width, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, rng),
            rpb: store.add(format!("{name}.rpb"), &[heads, 2 * window - 1], Init::Zeros, rng),
            proj: Linear::new(store, &format!("{name}.proj"), width, width, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width, rng),
            fc1: Linear::new(store, &format!("{name}.fc1"), width, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, width, rng),
        }
    }

    /// `x [n×C] → [n×C]`.
    pub fn forward_rows<'g, T: Real>(&self, p: &Binder<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.width {
            return Err(Error::shape(
                "nat_block",
                format!("expected [n×{}], got {shape:?}", self.width),
            ));
        }
        let n = shape[0];
        let d = self.width / self.heads;
        let split = |t: Var<'g, T>| t.reshape(&[n, self.heads, d])?.permute(&[1, 0, 2]);
        let h = self.ln1.forward(p, x)?;
        let q = split(self.q.forward(p, h)?)?;
        let k = split(self.k.forward(p, h)?)?;
        let v = split(self.v.forward(p, h)?)?;
        let a = neighborhood_attention(q, k, v, p.param(self.rpb), self.window)?;
        let merged = a.permute(&[1, 0, 2])?.reshape(&[n, self.width])?;
        let x = x.add(self.proj.forward(p, merged)?)?;
        let h = self.ln2.forward(p, x)?;
        let m = self.fc2.forward(p, self.fc1.forward(p, h)?.gelu())?;
        x.add(m)
    }

    /// `u [C×n] → [C×n]`.
    pub fn forward<'g, T: Real>(&self, p: &Binder<'g, '_, T>, u: Var<'g, T>) -> Result<Var<'g, T>> {
        self.forward_rows(p, u.t()?)?.t()
    }
}

#[derive(Debug, Clone)]
pub struct Arch {
    pub tokenizer: [Conv; 2],
    pub stages: Vec<Vec<NatBlock>>,
    pub downsamplers: Vec<Conv>,
    pub decoder: Vec<ConvT>,
    pub head: Linear,
}

/// Parameters plus the layer map that reads them.
#[derive(Debug, Clone)]
pub struct EcgNat<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub arch: Arch,
}

impl<T: Real> EcgNat<T> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let c0 = config.embed_dim;
        let tokenizer = [
            Conv::new(&mut store, "tok.0", config.n_leads, c0 / 2, 3, 2, (TOKEN_PAD, TOKEN_PAD), rng),
            Conv::new(&mut store, "tok.1", c0 / 2, c0, 3, 2, (TOKEN_PAD, TOKEN_PAD), rng),
        ];
        let mut stages = Vec::new();
        let mut downsamplers = Vec::new();
        for (s, &heads) in config.stage_heads.iter().enumerate() {
            let c = c0 << s;
            let blocks = (0..config.blocks_per_stage)
                .map(|b| {
                    NatBlock::new(
                        &mut store,
                        &format!("stage{s}.block{b}"),
                        c,
                        heads,
                        config.window_k,
                        config.mlp_hidden(c),
                        rng,
                    )
                })
                .collect();
            stages.push(blocks);
            if s + 1 < config.n_stages() {
                downsamplers.push(Conv::new(&mut store, &format!("down{s}"), c, 2 * c, 3, 2, DOWN_PAD, rng));
            }
        }
        let mut decoder = Vec::new();
        let mut prev = config.latent_shape();
        for (i, (c, l)) in config.decoder_shapes().into_iter().enumerate() {
            let k = l - 2 * (prev.1 - 1);
            decoder.push(ConvT::new(&mut store, &format!("dec{i}"), prev.0, c, k, rng));
            prev = (c, l);
        }
        let (cz, nz) = config.latent_shape();
        let head = Linear::new(&mut store, "head", cz * nz, config.n_classes, rng);
        Ok(EcgNat {
            config,
            params: store,
            arch: Arch {
                tokenizer,
                stages,
                downsamplers,
                decoder,
                head,
            },
        })
    }

    pub fn count(&self) -> ParamCount {
        count_params(&self.config)
    }

    /// Parameter ids of the tokenizer, blocks and downsamplers.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| {
                let n = self.params.name(id);
                n.starts_with("tok.") || n.starts_with("stage") || n.starts_with("down")
            })
            .collect()
    }

    pub fn set_encoder_frozen(&mut self, frozen: bool) {
        for id in self.encoder_params() {
            self.params.set_frozen(id, frozen);
        }
    }

    /// Freezes the decoder during fine-tuning and the classifier head during
    /// pretraining, so the optimizer never decays weights a phase leaves unused.
    pub fn set_phase_frozen(&mut self, pretraining: bool) {
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            let name = self.params.name(id);
            let unused = if pretraining { name.starts_with("head.") } else { name.starts_with("dec") };
            self.params.set_frozen(id, unused);
        }
    }

    fn check_input(&self, x: &[usize]) -> Result<()> {
        let want = [self.config.n_leads, self.config.input_len];
        if x != want {
            return Err(Error::shape("tokenize", format!("expected {want:?}, got {x:?}")));
        }
        Ok(())
    }

    /// `x [L×D] → [embed_dim × D/4]`.
    pub fn tokenize<'g>(&self, p: &Binder<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_input(&x.shape())?;
        let [a, b] = &self.arch.tokenizer;
        b.forward(p, a.forward(p, x)?)
    }

    /// Strided conv plus ReLU: `[C×n] → [2C × n/2]`.
    pub fn downsample<'g>(&self, p: &Binder<'g, '_, T>, stage: usize, u: Var<'g, T>) -> Result<Var<'g, T>> {
        let n = u.shape().get(1).copied().unwrap_or(0);
        if n < 2 {
            return Err(Error::shape("downsample", format!("needs length >= 2, got {n}")));
        }
        let conv = self.arch.downsamplers.get(stage).ok_or_else(|| {
            Error::Contract(format!("no downsampler after stage {stage}"))
        })?;
        Ok(conv.forward(p, u)?.relu())
    }

    /// Runs the encoder from tokens, returning each stage's output `[C_s×n_s]`.
    pub fn encode_stages<'g>(&self, p: &Binder<'g, '_, T>, tokens: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        let mut outs = Vec::with_capacity(self.arch.stages.len());
        let mut u = tokens;
        for (s, blocks) in self.arch.stages.iter().enumerate() {
            if s > 0 {
                u = self.downsample(p, s - 1, u)?;
            }
            let mut rows = u.t()?;
            for block in blocks {
                rows = block.forward_rows(p, rows)?;
            }
            u = rows.t()?;
            outs.push(u);
        }
        Ok(outs)
    }

    /// Encoder from (possibly corrupted) tokens to the latent code.
    pub fn encode_tokens<'g>(&self, p: &Binder<'g, '_, T>, tokens: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(*self.encode_stages(p, tokens)?.last().expect("at least one stage"))
    }

    /// `x [L×D] → Z [C_last×n_last]`.
    pub fn encode<'g>(&self, p: &Binder<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let tokens = self.tokenize(p, x)?;
        self.encode_tokens(p, tokens)
    }

    /// `Z → X̂ [L×D]`.
    pub fn decode<'g>(&self, p: &Binder<'g, '_, T>, z: Var<'g, T>) -> Result<Var<'g, T>> {
        let last = self.arch.decoder.len() - 1;
        let mut h = z;
        for (i, layer) in self.arch.decoder.iter().enumerate() {
            h = layer.forward(p, h)?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Pooled embedding: mean of `Z` over length, `[C_last]`.
    pub fn embed<'g>(&self, z: Var<'g, T>) -> Result<Var<'g, T>> {
        z.mean_axis(1)
    }

    /// Logits `[B×n_classes]` for a batch of latent codes.
    pub fn classify_batch<'g>(&self, p: &Binder<'g, '_, T>, zs: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let (cz, nz) = self.config.latent_shape();
        let rows = zs
            .iter()
            .map(|z| z.reshape(&[1, cz * nz]))
            .collect::<Result<Vec<_>>>()?;
        let flat = crate::autodiff::concat(&rows, 0)?;
        self.arch.head.forward(p, flat)
    }

    /// Logits `[n_classes]` for one latent code.
    pub fn classify<'g>(&self, p: &Binder<'g, '_, T>, z: Var<'g, T>) -> Result<Var<'g, T>> {
        self.classify_batch(p, &[z])?.reshape(&[self.config.n_classes])
    }
}
