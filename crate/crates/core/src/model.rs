//! The encoder-decoder Transformer and its LayerNorm wiring options.
//!
//! Parameters live in a flat `Vec<Tensor>` with parallel names; the layer
//! structs only hold indices into it. A forward pass binds every parameter
//! onto a [`Graph`] first (as gradient leaves when training, as constants
//! otherwise) and then threads [`Var`]s through the stack.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use zeronorm_tensor::{AttentionSpec, Graph, Tensor, Var, LAYER_NORM_EPS};

use crate::corpus::TagScheme;
use crate::{Error, Result};

/// Where LayerNorm sits relative to each residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormPlacement {
    /// `LN(x + S(x))`, no stack-final norm.
    PostNorm,
    /// `x + S(LN(x))` with a stack-final norm on both sides.
    PreNorm,
    /// `x + LN(S(x))`.
    SwapPreNorm,
    /// PreNorm without the encoder's final norm.
    PreNormWoEncLast,
}

impl NormPlacement {
    pub fn label(self) -> &'static str {
        match self {
            NormPlacement::PostNorm => "PostNorm",
            NormPlacement::PreNorm => "PreNorm",
            NormPlacement::SwapPreNorm => "SwapPreNorm",
            NormPlacement::PreNormWoEncLast => "PreNorm-w/o-Enc-Last",
        }
    }
}

impl fmt::Display for NormPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormParams {
    Trainable,
    /// No gain or bias.
    Simple,
}

/// Default encoder layer whose self-attention loses its residual connection.
pub fn default_ablation_layer(encoder_layers: usize) -> usize {
    encoder_layers / 2 + 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ffn: usize,
    pub norm_placement: NormPlacement,
    pub norm_params: NormParams,
    pub tag_scheme: TagScheme,
    /// 1-based encoder layer whose self-attention block has no residual.
    pub ablate_sa_residual_at: Option<usize>,
    /// Whether SwapPreNorm keeps the stack-final norms.
    pub swap_final_norm: bool,
    pub dropout: f64,
    pub seed: u64,
    /// Filled in from the corpus vocabulary.
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_layers: 6,
            decoder_layers: 6,
            d_model: 64,
            heads: 4,
            d_ffn: 128,
            norm_placement: NormPlacement::PreNorm,
            norm_params: NormParams::Trainable,
            tag_scheme: TagScheme::SEncTDec,
            ablate_sa_residual_at: None,
            swap_final_norm: true,
            dropout: 0.1,
            seed: 1,
            vocab_size: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return fail("need at least one encoder and one decoder layer".into());
        }
        if self.d_model == 0 || self.d_ffn == 0 || self.heads == 0 {
            return fail("dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if let Some(l) = self.ablate_sa_residual_at {
            if l == 0 || l > self.encoder_layers {
                return fail(format!(
                    "ablation layer {l} outside 1..={}",
                    self.encoder_layers
                ));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size == 0 {
            return fail("vocab_size is not set".into());
        }
        Ok(())
    }

    pub fn has_encoder_final_norm(&self) -> bool {
        match self.norm_placement {
            NormPlacement::PostNorm | NormPlacement::PreNormWoEncLast => false,
            NormPlacement::PreNorm => true,
            NormPlacement::SwapPreNorm => self.swap_final_norm,
        }
    }

    pub fn has_decoder_final_norm(&self) -> bool {
        match self.norm_placement {
            NormPlacement::PostNorm => false,
            NormPlacement::PreNorm | NormPlacement::PreNormWoEncLast => true,
            NormPlacement::SwapPreNorm => self.swap_final_norm,
        }
    }

    /// Number of LayerNorm instances in the whole model.
    pub fn norm_count(&self) -> usize {
        2 * self.encoder_layers
            + 3 * self.decoder_layers
            + self.has_encoder_final_norm() as usize
            + self.has_decoder_final_norm() as usize
    }

    pub fn total_layers(&self) -> usize {
        self.encoder_layers + self.decoder_layers
    }
}

/// Wires one residual block.
///
/// `norm` applies this block's LayerNorm and `sublayer` is the attention or
/// feed-forward function. Dropout hits the residual branch just before the
/// addition (for SwapPreNorm that is after the norm).
pub fn sublayer_block(
    g: &mut Graph,
    x: Var,
    placement: NormPlacement,
    has_residual: bool,
    dropout: f64,
    norm: &mut dyn FnMut(&mut Graph, Var) -> Result<Var>,
    sublayer: &mut dyn FnMut(&mut Graph, Var) -> Result<Var>,
) -> Result<Var> {
    match placement {
        NormPlacement::PostNorm => {
            let s = sublayer(g, x)?;
            let s = g.dropout(s, dropout)?;
            let sum = if has_residual { g.add(x, s)? } else { s };
            norm(g, sum)
        }
        NormPlacement::PreNorm | NormPlacement::PreNormWoEncLast => {
            let n = norm(g, x)?;
            let s = sublayer(g, n)?;
            let s = g.dropout(s, dropout)?;
            if has_residual {
                Ok(g.add(x, s)?)
            } else {
                Ok(s)
            }
        }
        NormPlacement::SwapPreNorm => {
            let s = sublayer(g, x)?;
            let n = norm(g, s)?;
            let n = g.dropout(n, dropout)?;
            if has_residual {
                Ok(g.add(x, n)?)
            } else {
                Ok(n)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    affine: Option<(usize, usize)>,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    sa: Attention,
    sa_norm: Norm,
    ffn: FeedForward,
    ffn_norm: Norm,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    sa: Attention,
    sa_norm: Norm,
    cross: Attention,
    cross_norm: Norm,
    ffn: FeedForward,
    ffn_norm: Norm,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: usize,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Option<Norm>,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Option<Norm>,
    output: Linear,
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    params: Vec<Tensor>,
    names: Vec<String>,
    simple: bool,
}

impl Builder<'_> {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.params.push(t);
        self.names.push(name);
        self.params.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Tensor::uniform(&[fan_in, fan_out], bound, self.rng);
        Linear {
            w: self.push(format!("{name}.weight"), w),
            b: self.push(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        if self.simple {
            return Norm { affine: None };
        }
        let g = self.push(format!("{name}.gain"), Tensor::ones(&[d]));
        let b = self.push(format!("{name}.bias"), Tensor::zeros(&[d]));
        Norm {
            affine: Some((g, b)),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, h: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{name}.up"), d, h),
            down: self.linear(&format!("{name}.down"), h, d),
        }
    }
}

/// Padded token ids, row-major `[batch, len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    pub lens: Vec<usize>,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, batch: usize, len: usize, lens: Vec<usize>) -> Result<Self> {
        if batch == 0 || len == 0 || ids.len() != batch * len || lens.len() != batch {
            return Err(Error::Input(format!(
                "token batch {batch}x{len} with {} ids and {} lengths",
                ids.len(),
                lens.len()
            )));
        }
        if lens.iter().any(|&l| l == 0 || l > len) {
            return Err(Error::Input("sequence lengths must be in 1..=len".into()));
        }
        Ok(TokenBatch {
            ids,
            batch,
            len,
            lens,
        })
    }

    /// Pads a list of sequences with `pad`.
    pub fn from_sequences(seqs: &[Vec<usize>], pad: usize) -> Result<Self> {
        if seqs.iter().any(Vec::is_empty) {
            return Err(Error::Input("zero-length sequence".into()));
        }
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = vec![pad; seqs.len() * len];
        for (r, s) in seqs.iter().enumerate() {
            ids[r * len..r * len + s.len()].copy_from_slice(s);
        }
        Self::new(ids, seqs.len(), len, seqs.iter().map(Vec::len).collect())
    }
}

/// Parameters bound onto one graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub struct EncoderOutput {
    /// Output of each layer's full wiring.
    pub layers: Vec<Var>,
    /// Input to cross-attention: the last layer passed through the stack-final
    /// norm when one exists.
    pub output: Var,
    pub batch: usize,
    pub len: usize,
    pub lens: Vec<usize>,
}

impl EncoderOutput {
    /// Per-layer states for probing; the top layer is the stack output.
    pub fn probe_states(&self) -> Vec<Var> {
        let mut s = self.layers.clone();
        *s.last_mut().expect("at least one layer") = self.output;
        s
    }
}

/// Cross-attention keys and values for every decoder layer.
pub struct Memory {
    kv: Vec<(Var, Var)>,
    batch: usize,
    len: usize,
    lens: Vec<usize>,
}

/// [`Memory`] detached from its graph so it can be reused across decoding steps.
#[derive(Clone, Debug)]
pub struct MemoryValues {
    kv: Vec<(Tensor, Tensor)>,
    len: usize,
    lens: Vec<usize>,
}

impl MemoryValues {
    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    /// Memory whose row `i` is sentence `rows[i]` of `self`.
    pub fn select(&self, rows: &[usize]) -> MemoryValues {
        let pick = |t: &Tensor| {
            let d = t.cols();
            let mut out = Vec::with_capacity(rows.len() * self.len * d);
            for &r in rows {
                out.extend_from_slice(&t.data()[r * self.len * d..(r + 1) * self.len * d]);
            }
            Tensor::from_vec(vec![rows.len() * self.len, d], out).expect("rows are non-empty")
        };
        MemoryValues {
            kv: self.kv.iter().map(|(k, v)| (pick(k), pick(v))).collect(),
            len: self.len,
            lens: rows.iter().map(|&r| self.lens[r]).collect(),
        }
    }

    fn bind(&self, g: &mut Graph) -> Memory {
        Memory {
            kv: self
                .kv
                .iter()
                .map(|(k, v)| (g.constant(k.clone()), g.constant(v.clone())))
                .collect(),
            batch: self.lens.len(),
            len: self.len,
            lens: self.lens.clone(),
        }
    }
}

pub struct DecoderOutput {
    pub layers: Vec<Var>,
    pub output: Var,
    /// `[batch * len, vocab]`.
    pub logits: Var,
}

impl DecoderOutput {
    pub fn probe_states(&self) -> Vec<Var> {
        let mut s = self.layers.clone();
        *s.last_mut().expect("at least one layer") = self.output;
        s
    }
}

/// Greedy generation plus the decoder state behind every emitted token.
#[derive(Clone, Debug, PartialEq)]
pub struct FreeRun {
    /// Generated ids, ending in `<eos>` when it was produced.
    pub tokens: Vec<usize>,
    /// One `[tokens.len(), d_model]` matrix per decoder layer.
    pub states: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Transformer {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Tensor>,
    names: Vec<String>,
    positions: Tensor,
}

impl Transformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let mut b = Builder {
            rng: &mut rng,
            params: Vec::new(),
            names: Vec::new(),
            simple: config.norm_params == NormParams::Simple,
        };
        let embed_std = (d as f64).powf(-0.5);
        let table = Tensor::randn(&[config.vocab_size, d], embed_std, b.rng);
        let embed = b.push("embed".into(), table);
        let encoder = (0..config.encoder_layers)
            .map(|l| EncoderLayer {
                sa: b.attention(&format!("enc{l}.sa"), d),
                sa_norm: b.norm(&format!("enc{l}.sa_norm"), d),
                ffn: b.ffn(&format!("enc{l}.ffn"), d, config.d_ffn),
                ffn_norm: b.norm(&format!("enc{l}.ffn_norm"), d),
            })
            .collect();
        let encoder_norm = config
            .has_encoder_final_norm()
            .then(|| b.norm("enc.final_norm", d));
        let decoder = (0..config.decoder_layers)
            .map(|l| DecoderLayer {
                sa: b.attention(&format!("dec{l}.sa"), d),
                sa_norm: b.norm(&format!("dec{l}.sa_norm"), d),
                cross: b.attention(&format!("dec{l}.cross"), d),
                cross_norm: b.norm(&format!("dec{l}.cross_norm"), d),
                ffn: b.ffn(&format!("dec{l}.ffn"), d, config.d_ffn),
                ffn_norm: b.norm(&format!("dec{l}.ffn_norm"), d),
            })
            .collect();
        let decoder_norm = config
            .has_decoder_final_norm()
            .then(|| b.norm("dec.final_norm", d));
        let output = b.linear("output", d, config.vocab_size);
        let (params, names) = (b.params, b.names);
        Ok(Transformer {
            positions: sinusoidal_positions(crate::corpus::MAX_SENTENCE_LEN + 1, d),
            config,
            layout: Layout {
                embed,
                encoder,
                encoder_norm,
                decoder,
                decoder_norm,
                output,
            },
            params,
            names,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    fn linear(&self, g: &mut Graph, b: &Bound, l: Linear, x: Var) -> Result<Var> {
        let y = g.matmul(x, b.vars[l.w])?;
        Ok(g.add_row(y, b.vars[l.b])?)
    }

    fn norm(&self, g: &mut Graph, b: &Bound, n: Norm, x: Var) -> Result<Var> {
        Ok(match n.affine {
            Some((gain, bias)) => g.layer_norm(x, b.vars[gain], b.vars[bias], LAYER_NORM_EPS)?,
            None => g.layer_norm_simple(x, LAYER_NORM_EPS)?,
        })
    }

    fn ffn(&self, g: &mut Graph, b: &Bound, f: FeedForward, x: Var) -> Result<Var> {
        let h = self.linear(g, b, f.up, x)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.config.dropout)?;
        self.linear(g, b, f.down, h)
    }

    fn embed(&self, g: &mut Graph, b: &Bound, tokens: &TokenBatch, offset: usize) -> Result<Var> {
        let vocab = self.config.vocab_size;
        if let Some(bad) = tokens.ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {vocab}"
            )));
        }
        let d = self.config.d_model;
        let e = g.embedding(b.vars[self.layout.embed], &tokens.ids)?;
        let e = g.scale(e, (d as f64).sqrt());
        let mut pe = Vec::with_capacity(tokens.ids.len() * d);
        for _ in 0..tokens.batch {
            pe.extend_from_slice(&self.positions.data()[offset * d..(offset + tokens.len) * d]);
        }
        let pe = g.constant(Tensor::from_vec(vec![tokens.ids.len(), d], pe)?);
        let x = g.add(e, pe)?;
        Ok(g.dropout(x, self.config.dropout)?)
    }

    pub fn encode(&self, g: &mut Graph, b: &Bound, src: &TokenBatch) -> Result<EncoderOutput> {
        if src.len > crate::corpus::MAX_SENTENCE_LEN + 1 {
            return Err(Error::Input(format!("source length {} too long", src.len)));
        }
        let cfg = &self.config;
        let spec = AttentionSpec {
            batch: src.batch,
            query_len: src.len,
            key_len: src.len,
            heads: cfg.heads,
            key_lens: src.lens.clone(),
            causal: false,
        };
        let mut x = self.embed(g, b, src, 0)?;
        let mut layers = Vec::with_capacity(cfg.encoder_layers);
        for (l, layer) in self.layout.encoder.iter().enumerate() {
            let residual = cfg.ablate_sa_residual_at != Some(l + 1);
            x = sublayer_block(
                g,
                x,
                cfg.norm_placement,
                residual,
                cfg.dropout,
                &mut |g, h| self.norm(g, b, layer.sa_norm, h),
                &mut |g, h| self.self_attention(g, b, layer.sa, h, &spec),
            )?;
            x = sublayer_block(
                g,
                x,
                cfg.norm_placement,
                true,
                cfg.dropout,
                &mut |g, h| self.norm(g, b, layer.ffn_norm, h),
                &mut |g, h| self.ffn(g, b, layer.ffn, h),
            )?;
            layers.push(x);
        }
        let output = match self.layout.encoder_norm {
            Some(n) => self.norm(g, b, n, x)?,
            None => x,
        };
        Ok(EncoderOutput {
            layers,
            output,
            batch: src.batch,
            len: src.len,
            lens: src.lens.clone(),
        })
    }

    fn self_attention(
        &self,
        g: &mut Graph,
        b: &Bound,
        a: Attention,
        x: Var,
        spec: &AttentionSpec,
    ) -> Result<Var> {
        let q = self.linear(g, b, a.q, x)?;
        let k = self.linear(g, b, a.k, x)?;
        let v = self.linear(g, b, a.v, x)?;
        let h = g.attention(q, k, v, spec.clone())?;
        self.linear(g, b, a.o, h)
    }

    /// Projects the encoder output into per-layer cross-attention keys/values.
    pub fn memory(&self, g: &mut Graph, b: &Bound, enc: &EncoderOutput) -> Result<Memory> {
        let kv = self
            .layout
            .decoder
            .iter()
            .map(|layer| {
                let k = self.linear(g, b, layer.cross.k, enc.output)?;
                let v = self.linear(g, b, layer.cross.v, enc.output)?;
                Ok((k, v))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Memory {
            kv,
            batch: enc.batch,
            len: enc.len,
            lens: enc.lens.clone(),
        })
    }

    pub fn memory_values(g: &Graph, m: &Memory) -> MemoryValues {
        MemoryValues {
            kv: m
                .kv
                .iter()
                .map(|&(k, v)| (g.value(k).clone(), g.value(v).clone()))
                .collect(),
            len: m.len,
            lens: m.lens.clone(),
        }
    }

    /// Causal decoder pass over `tgt` (which starts with the decoder start token).
    pub fn decode(
        &self,
        g: &mut Graph,
        b: &Bound,
        memory: &Memory,
        tgt: &TokenBatch,
    ) -> Result<DecoderOutput> {
        let (layers, output) = self.decoder_stack(g, b, memory, tgt)?;
        let logits = self.linear(g, b, self.layout.output, output)?;
        Ok(DecoderOutput {
            layers,
            output,
            logits,
        })
    }

    fn decoder_stack(
        &self,
        g: &mut Graph,
        b: &Bound,
        memory: &Memory,
        tgt: &TokenBatch,
    ) -> Result<(Vec<Var>, Var)> {
        if tgt.batch != memory.batch {
            return Err(Error::Input(format!(
                "{} target rows for {} source rows",
                tgt.batch, memory.batch
            )));
        }
        let cfg = &self.config;
        let self_spec = AttentionSpec {
            batch: tgt.batch,
            query_len: tgt.len,
            key_len: tgt.len,
            heads: cfg.heads,
            key_lens: tgt.lens.clone(),
            causal: true,
        };
        let cross_spec = AttentionSpec {
            batch: tgt.batch,
            query_len: tgt.len,
            key_len: memory.len,
            heads: cfg.heads,
            key_lens: memory.lens.clone(),
            causal: false,
        };
        let mut x = self.embed(g, b, tgt, 0)?;
        let mut layers = Vec::with_capacity(cfg.decoder_layers);
        for (layer, &(mk, mv)) in self.layout.decoder.iter().zip(&memory.kv) {
            x = sublayer_block(
                g,
                x,
                cfg.norm_placement,
                true,
                cfg.dropout,
                &mut |g, h| self.norm(g, b, layer.sa_norm, h),
                &mut |g, h| self.self_attention(g, b, layer.sa, h, &self_spec),
            )?;
            x = sublayer_block(
                g,
                x,
                cfg.norm_placement,
                true,
                cfg.dropout,
                &mut |g, h| self.norm(g, b, layer.cross_norm, h),
                &mut |g, h| {
                    let q = self.linear(g, b, layer.cross.q, h)?;
                    let a = g.attention(q, mk, mv, cross_spec.clone())?;
                    self.linear(g, b, layer.cross.o, a)
                },
            )?;
            x = sublayer_block(
                g,
                x,
                cfg.norm_placement,
                true,
                cfg.dropout,
                &mut |g, h| self.norm(g, b, layer.ffn_norm, h),
                &mut |g, h| self.ffn(g, b, layer.ffn, h),
            )?;
            layers.push(x);
        }
        let output = match self.layout.decoder_norm {
            Some(n) => self.norm(g, b, n, x)?,
            None => x,
        };
        Ok((layers, output))
    }

    /// Encoder plus teacher-forced decoder; returns the logits var.
    pub fn decode_teacher_forced(
        &self,
        g: &mut Graph,
        b: &Bound,
        src: &TokenBatch,
        tgt_in: &TokenBatch,
    ) -> Result<Var> {
        let enc = self.encode(g, b, src)?;
        let mem = self.memory(g, b, &enc)?;
        Ok(self.decode(g, b, &mem, tgt_in)?.logits)
    }

    /// Runs the encoder in evaluation mode and returns detached memory.
    pub fn encode_memory(&self, sources: &[Vec<usize>]) -> Result<MemoryValues> {
        let src = TokenBatch::from_sequences(sources, crate::corpus::Vocabulary::PAD_ID)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let enc = self.encode(&mut g, &b, &src)?;
        let mem = self.memory(&mut g, &b, &enc)?;
        Ok(Self::memory_values(&g, &mem))
    }

    /// Starts incremental decoding; row `i` of the decoder attends to
    /// sentence `rows[i]` of `memory`.
    pub fn incremental<'m>(
        &'m self,
        memory: MemoryValues,
        rows: Vec<usize>,
    ) -> IncrementalDecoder<'m> {
        IncrementalDecoder {
            model: self,
            cache: vec![LayerCache::default(); self.config.decoder_layers],
            selected: None,
            memory,
            rows,
            steps: 0,
        }
    }

    /// Greedy decoding with the lowest id winning ties. Stops after `<eos>`
    /// or `max_len` tokens; `starts[i]` is the decoder start token of
    /// sentence `i`.
    pub fn greedy(
        &self,
        sources: &[Vec<usize>],
        starts: &[usize],
        max_len: usize,
    ) -> Result<Vec<Vec<usize>>> {
        if max_len == 0 {
            return Err(Error::Input("max_len must be at least 1".into()));
        }
        if starts.len() != sources.len() {
            return Err(Error::Input("one start token per source required".into()));
        }
        let memory = self.encode_memory(sources)?;
        let mut dec = self.incremental(memory, (0..sources.len()).collect());
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); sources.len()];
        let mut live: Vec<usize> = (0..sources.len()).collect();
        let mut next: Vec<usize> = starts.to_vec();
        for _ in 0..max_len {
            let lp = dec.step(&next)?;
            let mut keep = Vec::new();
            next.clear();
            for (row, (&i, probs)) in live.iter().zip(&lp).enumerate() {
                let t = argmax(probs);
                out[i].push(t);
                if t != crate::corpus::Vocabulary::EOS_ID {
                    keep.push(row);
                    next.push(t);
                }
            }
            if keep.is_empty() {
                break;
            }
            if keep.len() != live.len() {
                live = keep.iter().map(|&r| live[r]).collect();
                dec.reorder(&keep);
            }
        }
        Ok(out)
    }

    /// Greedy generation for one sentence, recording each decoder layer's
    /// state at every generated position. The states come from a single
    /// causal pass over the generated prefix, which by causality equals the
    /// states seen step by step.
    pub fn decode_free_running(
        &self,
        src: &[usize],
        start: usize,
        max_len: usize,
    ) -> Result<FreeRun> {
        let tokens = self.greedy(&[src.to_vec()], &[start], max_len)?.remove(0);
        let mut input = vec![start];
        input.extend_from_slice(&tokens[..tokens.len() - 1]);
        let states = self.decoder_probe_states(src, &input)?;
        Ok(FreeRun { tokens, states })
    }

    /// Per-layer decoder states (top layer after the final norm) for a given
    /// decoder input.
    pub fn decoder_probe_states(&self, src: &[usize], tgt_in: &[usize]) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let s = TokenBatch::from_sequences(&[src.to_vec()], crate::corpus::Vocabulary::PAD_ID)?;
        let t = TokenBatch::from_sequences(&[tgt_in.to_vec()], crate::corpus::Vocabulary::PAD_ID)?;
        let enc = self.encode(&mut g, &b, &s)?;
        let mem = self.memory(&mut g, &b, &enc)?;
        let dec = self.decode(&mut g, &b, &mem, &t)?;
        Ok(dec
            .probe_states()
            .iter()
            .map(|&v| g.value(v).clone())
            .collect())
    }

    /// Per-layer encoder states (top layer after the final norm, if any).
    pub fn encoder_probe_states(&self, src: &[usize]) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let s = TokenBatch::from_sequences(&[src.to_vec()], crate::corpus::Vocabulary::PAD_ID)?;
        let enc = self.encode(&mut g, &b, &s)?;
        Ok(enc
            .probe_states()
            .iter()
            .map(|&v| g.value(v).clone())
            .collect())
    }

    /// Log-probability of `tokens` given the source, as scored by the decoder.
    pub fn sequence_log_prob(&self, src: &[usize], start: usize, tokens: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let s = TokenBatch::from_sequences(&[src.to_vec()], crate::corpus::Vocabulary::PAD_ID)?;
        let mut input = vec![start];
        input.extend_from_slice(&tokens[..tokens.len().saturating_sub(1)]);
        let t = TokenBatch::from_sequences(&[input], crate::corpus::Vocabulary::PAD_ID)?;
        let logits = self.decode_teacher_forced(&mut g, &b, &s, &t)?;
        let v = g.value(logits);
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(i, &tok)| log_softmax(v.row(i))[tok])
            .sum())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    /// Binary container: magic, version, config JSON, then named tensors with
    /// little-endian dims and `f64` values.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.config)?;
        w.write_all(&(cfg.len() as u64).to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for (name, t) in self.names.iter().zip(&self.params) {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a model checkpoint".into()));
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v)?;
        let version = u32::from_le_bytes(v);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let cfg_len = read_u64(r)? as usize;
        let mut cfg = vec![0u8; cfg_len];
        r.read_exact(&mut cfg)?;
        let config: ModelConfig = serde_json::from_slice(&cfg)?;
        let mut model = Transformer::new(config)?;
        let count = read_u64(r)? as usize;
        if count != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "{count} tensors, model expects {}",
                model.params.len()
            )));
        }
        for i in 0..count {
            let name_len = read_u64(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            if name != model.names[i] {
                return Err(Error::Checkpoint(format!(
                    "tensor {i} is {name:?}, expected {:?}",
                    model.names[i]
                )));
            }
            let ndim = read_u64(r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if shape != model.params[i].shape() {
                return Err(Error::Checkpoint(format!("{name} has shape {shape:?}")));
            }
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            model.params[i] = Tensor::from_vec(shape, data)?;
        }
        Ok(model)
    }
}

#[derive(Clone, Debug, Default)]
struct LayerCache {
    /// Per decoder row, the self-attention keys and values of every position
    /// decoded so far, flattened `[steps, d]`.
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

/// Token-at-a-time decoding with cached self-attention keys and values.
pub struct IncrementalDecoder<'m> {
    model: &'m Transformer,
    memory: MemoryValues,
    selected: Option<MemoryValues>,
    rows: Vec<usize>,
    cache: Vec<LayerCache>,
    steps: usize,
}

impl IncrementalDecoder<'_> {
    pub fn rows(&self) -> usize {
        self.rows.len()
    }

    /// Keeps only the listed rows (in the given order, duplicates allowed),
    /// e.g. the parents of the surviving beam hypotheses.
    pub fn reorder(&mut self, parents: &[usize]) {
        self.rows = parents.iter().map(|&p| self.rows[p]).collect();
        for layer in &mut self.cache {
            layer.keys = parents.iter().map(|&p| layer.keys[p].clone()).collect();
            layer.values = parents.iter().map(|&p| layer.values[p].clone()).collect();
        }
        self.selected = None;
    }

    /// Feeds one token per row and returns next-token log-probabilities.
    pub fn step(&mut self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let model = self.model;
        let cfg = &model.config;
        let n = self.rows.len();
        if tokens.len() != n || n == 0 {
            return Err(Error::Input(format!(
                "{} tokens for {n} rows",
                tokens.len()
            )));
        }
        if self.steps > crate::corpus::MAX_SENTENCE_LEN {
            return Err(Error::Input(
                "decoding past the maximum sentence length".into(),
            ));
        }
        let d = cfg.d_model;
        let t = self.steps + 1;
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        if self.selected.is_none() {
            self.selected = Some(self.memory.select(&self.rows));
        }
        let mem = self.selected.as_ref().expect("just selected").bind(&mut g);
        let input = TokenBatch::new(tokens.to_vec(), n, 1, vec![1; n])?;
        let mut x = model.embed(&mut g, &b, &input, self.steps)?;
        let self_spec = AttentionSpec {
            batch: n,
            query_len: 1,
            key_len: t,
            heads: cfg.heads,
            key_lens: vec![t; n],
            causal: false,
        };
        let cross_spec = AttentionSpec {
            batch: n,
            query_len: 1,
            key_len: mem.len,
            heads: cfg.heads,
            key_lens: mem.lens.clone(),
            causal: false,
        };
        for ((layer, &(mk, mv)), cache) in model
            .layout
            .decoder
            .iter()
            .zip(&mem.kv)
            .zip(self.cache.iter_mut())
        {
            x = sublayer_block(
                &mut g,
                x,
                cfg.norm_placement,
                true,
                cfg.dropout,
                &mut |g, h| model.norm(g, &b, layer.sa_norm, h),
                &mut |g, h| {
                    let q = model.linear(g, &b, layer.sa.q, h)?;
                    let k = model.linear(g, &b, layer.sa.k, h)?;
                    let v = model.linear(g, &b, layer.sa.v, h)?;
                    let k = append_rows(&mut cache.keys, g.value(k), n, d);
                    let v = append_rows(&mut cache.values, g.value(v), n, d);
                    let k = g.constant(Tensor::from_vec(vec![n * t, d], k)?);
                    let v = g.constant(Tensor::from_vec(vec![n * t, d], v)?);
                    let a = g.attention(q, k, v, self_spec.clone())?;
                    model.linear(g, &b, layer.sa.o, a)
                },
            )?;
            x = sublayer_block(
                &mut g,
                x,
                cfg.norm_placement,
                true,
                cfg.dropout,
                &mut |g, h| model.norm(g, &b, layer.cross_norm, h),
                &mut |g, h| {
                    let q = model.linear(g, &b, layer.cross.q, h)?;
                    let a = g.attention(q, mk, mv, cross_spec.clone())?;
                    model.linear(g, &b, layer.cross.o, a)
                },
            )?;
            x = sublayer_block(
                &mut g,
                x,
                cfg.norm_placement,
                true,
                cfg.dropout,
                &mut |g, h| model.norm(g, &b, layer.ffn_norm, h),
                &mut |g, h| model.ffn(g, &b, layer.ffn, h),
            )?;
        }
        if let Some(norm) = model.layout.decoder_norm {
            x = model.norm(&mut g, &b, norm, x)?;
        }
        let logits = model.linear(&mut g, &b, model.layout.output, x)?;
        self.steps = t;
        let v = g.value(logits);
        Ok((0..n).map(|r| log_softmax(v.row(r))).collect())
    }
}

/// Appends one new row per batch entry to the cache and returns the full
/// `[n * steps, d]` matrix.
fn append_rows(cache: &mut Vec<Vec<f64>>, new: &Tensor, n: usize, d: usize) -> Vec<f64> {
    if cache.is_empty() {
        cache.resize(n, Vec::new());
    }
    let mut out = Vec::with_capacity(n * (cache[0].len() + d));
    for (r, rows) in cache.iter_mut().enumerate() {
        rows.extend_from_slice(new.row(r));
        out.extend_from_slice(rows);
    }
    out
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"ZNMT";
const CHECKPOINT_VERSION: u32 = 1;

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn sinusoidal_positions(max_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_vec(vec![max_len, d], data).expect("positive dims")
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocabulary;

    fn config(placement: NormPlacement) -> ModelConfig {
        ModelConfig {
            encoder_layers: 2,
            decoder_layers: 2,
            d_model: 16,
            heads: 2,
            d_ffn: 24,
            norm_placement: placement,
            vocab_size: 20,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    fn batch(seqs: &[Vec<usize>]) -> TokenBatch {
        TokenBatch::from_sequences(seqs, Vocabulary::PAD_ID).unwrap()
    }

    fn encoder_values(model: &Transformer, src: &[usize]) -> (Vec<Tensor>, Tensor) {
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let enc = model.encode(&mut g, &b, &batch(&[src.to_vec()])).unwrap();
        (
            enc.layers.iter().map(|&v| g.value(v).clone()).collect(),
            g.value(enc.output).clone(),
        )
    }

    fn block(placement: NormPlacement, x: &[f64], zero: bool) -> Vec<f64> {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::from_vec(vec![1, x.len()], x.to_vec()).unwrap());
        let gain = g.constant(Tensor::ones(&[x.len()]));
        let bias = g.constant(Tensor::full(&[x.len()], 0.5));
        let y = sublayer_block(
            &mut g,
            xv,
            placement,
            true,
            0.0,
            &mut |g, h| Ok(g.layer_norm(h, gain, bias, LAYER_NORM_EPS)?),
            &mut |g, h| Ok(if zero { g.scale(h, 0.0) } else { h }),
        )
        .unwrap();
        g.value(y).data().to_vec()
    }

    fn ln(x: &[f64], bias: f64) -> Vec<f64> {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
        x.iter()
            .map(|a| (a - m) / (v + LAYER_NORM_EPS).sqrt() + bias)
            .collect()
    }

    #[test]
    fn block_wiring_examples() {
        let x = [1.0, -2.0, 0.5, 3.0];
        let pre = block(NormPlacement::PreNorm, &x, false);
        let expect: Vec<f64> = x.iter().zip(ln(&x, 0.5)).map(|(a, b)| a + b).collect();
        assert!(pre.iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-12));

        let post = block(NormPlacement::PostNorm, &x, true);
        assert!(post
            .iter()
            .zip(ln(&x, 0.5))
            .all(|(a, b)| (a - b).abs() < 1e-12));

        let swap = block(NormPlacement::SwapPreNorm, &x, true);
        assert!(swap.iter().zip(&x).all(|(a, b)| *a == b + 0.5));
    }

    #[test]
    fn encoder_shapes_and_errors() {
        let model = Transformer::new(config(NormPlacement::PreNorm)).unwrap();
        let (layers, out) = encoder_values(&model, &[3, 4, 5]);
        assert_eq!(layers.len(), 2);
        assert!(layers.iter().all(|t| t.shape() == [3, 16]));
        assert_eq!(out.shape(), &[3, 16]);
        assert!(matches!(
            TokenBatch::from_sequences(&[vec![]], 0),
            Err(Error::Input(_))
        ));
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        assert!(matches!(
            model.encode(&mut g, &b, &batch(&[vec![3, 99]])),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn missing_encoder_final_norm_only_changes_the_output() {
        let a = Transformer::new(config(NormPlacement::PreNorm)).unwrap();
        let mut b = Transformer::new(config(NormPlacement::PreNormWoEncLast)).unwrap();
        // Copy shared weights by name; only the encoder final norm differs.
        for (i, name) in b.names.clone().iter().enumerate() {
            let j = a.param_index(name).unwrap();
            b.params[i] = a.params[j].clone();
        }
        let src = [3, 7, 9, 4];
        let (la, oa) = encoder_values(&a, &src);
        let (lb, ob) = encoder_values(&b, &src);
        assert_eq!(la, lb);
        assert_ne!(oa, ob);
        assert_eq!(ob, lb[1]);
    }

    #[test]
    fn placements_give_distinct_encoder_outputs() {
        let placements = [
            NormPlacement::PostNorm,
            NormPlacement::PreNorm,
            NormPlacement::SwapPreNorm,
            NormPlacement::PreNormWoEncLast,
        ];
        let outs: Vec<Tensor> = placements
            .iter()
            .map(|&p| encoder_values(&Transformer::new(config(p)).unwrap(), &[5, 6, 7]).1)
            .collect();
        for i in 0..outs.len() {
            for j in i + 1..outs.len() {
                assert!(outs[i].max_abs_diff(&outs[j]) > 1e-6, "{i} vs {j}");
            }
        }
    }

    #[test]
    fn ablation_only_touches_later_layers() {
        let mut cfg = config(NormPlacement::PreNorm);
        cfg.encoder_layers = 4;
        let plain = Transformer::new(cfg.clone()).unwrap();
        cfg.ablate_sa_residual_at = Some(3);
        let ablated = Transformer::new(cfg).unwrap();
        let (a, _) = encoder_values(&plain, &[3, 4, 5, 6]);
        let (b, _) = encoder_values(&ablated, &[3, 4, 5, 6]);
        assert_eq!(a[..2], b[..2]);
        assert!(a[2].max_abs_diff(&b[2]) > 1e-6);
        assert!(a[3].max_abs_diff(&b[3]) > 1e-6);
    }

    #[test]
    fn simple_norm_parameter_count() {
        for p in [
            NormPlacement::PostNorm,
            NormPlacement::PreNorm,
            NormPlacement::PreNormWoEncLast,
        ] {
            let cfg = config(p);
            let trainable = Transformer::new(cfg.clone()).unwrap().parameter_count();
            let simple = Transformer::new(ModelConfig {
                norm_params: NormParams::Simple,
                ..cfg.clone()
            })
            .unwrap()
            .parameter_count();
            assert_eq!(simple, trainable - 2 * cfg.d_model * cfg.norm_count());
        }
    }

    #[test]
    fn invalid_configs() {
        let bad = |f: &dyn Fn(&mut ModelConfig)| {
            let mut c = config(NormPlacement::PreNorm);
            f(&mut c);
            matches!(Transformer::new(c), Err(Error::Config(_)))
        };
        assert!(bad(&|c| c.heads = 3));
        assert!(bad(&|c| c.ablate_sa_residual_at = Some(0)));
        assert!(bad(&|c| c.ablate_sa_residual_at = Some(3)));
        assert!(bad(&|c| c.vocab_size = 0));
        assert_eq!(default_ablation_layer(6), 4);
        assert_eq!(default_ablation_layer(3), 2);
    }

    #[test]
    fn decoder_is_causal() {
        let model = Transformer::new(config(NormPlacement::PostNorm)).unwrap();
        let run = |tgt: Vec<usize>| {
            let mut g = Graph::new();
            let b = model.bind(&mut g, false);
            let l = model
                .decode_teacher_forced(&mut g, &b, &batch(&[vec![3, 4, 5]]), &batch(&[tgt]))
                .unwrap();
            g.value(l).clone()
        };
        let a = run(vec![2, 6, 7, 8]);
        let b = run(vec![2, 6, 7, 11]);
        assert_eq!(a.shape(), &[4, 20]);
        assert_eq!(a.data()[..3 * 20], b.data()[..3 * 20]);
        assert_ne!(a.data()[3 * 20..], b.data()[3 * 20..]);
    }

    #[test]
    fn initial_loss_is_near_uniform() {
        let mut cfg = config(NormPlacement::PreNorm);
        cfg.vocab_size = 128;
        let model = Transformer::new(cfg).unwrap();
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let tgt: Vec<usize> = (0..8).map(|i| 5 + i * 9).collect();
        let logits = model
            .decode_teacher_forced(
                &mut g,
                &b,
                &batch(&[vec![3, 9, 27, 81]]),
                &batch(std::slice::from_ref(&tgt)),
            )
            .unwrap();
        let targets: Vec<Option<usize>> = tgt.iter().map(|&t| Some((t * 7) % 128)).collect();
        let loss = g.cross_entropy(logits, &targets).unwrap();
        let v = g.value(loss).item();
        let uniform = (128f64).ln();
        assert!((v - uniform).abs() < 0.1 * uniform, "{v}");
    }

    #[test]
    fn forced_token_model_repeats_it() {
        let mut model = Transformer::new(config(NormPlacement::PreNorm)).unwrap();
        let w = model.param_index("output.weight").unwrap();
        let bias = model.param_index("output.bias").unwrap();
        model.params[w] = Tensor::zeros(&[16, 20]);
        let mut b = vec![0.0; 20];
        b[7] = 10.0;
        model.params[bias] = Tensor::from_vec(vec![20], b).unwrap();
        let run = model.decode_free_running(&[3, 4], 2, 5).unwrap();
        assert_eq!(run.tokens, vec![7; 5]);
        assert_eq!(run.states.len(), 2);
        assert!(run.states.iter().all(|s| s.shape() == [5, 16]));
        assert_eq!(run, model.decode_free_running(&[3, 4], 2, 5).unwrap());
    }

    #[test]
    fn batched_greedy_matches_single_sentence_greedy() {
        let model = Transformer::new(config(NormPlacement::SwapPreNorm)).unwrap();
        let srcs = vec![vec![3, 4, 5], vec![6, 7], vec![8, 9, 10, 11]];
        let batched = model.greedy(&srcs, &[2, 2, 2], 6).unwrap();
        for (s, out) in srcs.iter().zip(&batched) {
            let single = model.greedy(std::slice::from_ref(s), &[2], 6).unwrap();
            assert_eq!(&single[0], out);
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let mut cfg = config(NormPlacement::PreNorm);
        cfg.dropout = 0.0;
        let model = Transformer::new(cfg).unwrap();
        let mut g = Graph::training(0);
        let b = model.bind(&mut g, true);
        let src = batch(&[vec![3, 4, 5], vec![6, 7, 8]]);
        let tgt = batch(&[vec![2, 9, 10], vec![2, 11, 12]]);
        let logits = model.decode_teacher_forced(&mut g, &b, &src, &tgt).unwrap();
        let targets: Vec<Option<usize>> = [9, 10, 1, 11, 12, 1].iter().map(|&t| Some(t)).collect();
        let loss = g.cross_entropy(logits, &targets).unwrap();
        let grads = g.backward(loss).unwrap();
        for (name, &v) in model.names().iter().zip(b.vars()) {
            let gr = grads.get(v).unwrap_or(&[]);
            assert!(gr.iter().any(|&x| x != 0.0), "{name} has no gradient");
        }
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let model = Transformer::new(config(NormPlacement::SwapPreNorm)).unwrap();
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        let back = Transformer::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.params(), model.params());
        assert!(matches!(
            Transformer::read_from(&mut &b"nope"[..]),
            Err(Error::Checkpoint(_))
        ));
    }
}
