//! Pre-norm decoder-only transformer with per-layer KV cache extraction and
//! external KV injection.
//!
//! The same [`Decoder`] layout drives both towers: in [`KvSource::Own`] mode a
//! decoder projects its own keys/values and returns them as a [`KvCache`]; in
//! [`KvSource::Inject`] mode it skips its K/V projections entirely and attends
//! over the supplied cache at every layer, keeping its own queries, norms,
//! MLPs and output head.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::Tensor;

/// Additive value used for hidden attention cells.
pub const MASK_NEG: f64 = -1e9;
pub const RMS_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionScheme {
    Rotary,
    LearnedAbsolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub d_ff: usize,
    pub position: PositionScheme,
    pub rope_base: f64,
}

impl TransformerConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::Config(format!("transformer: {r}")));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.vocab_size == 0 || self.d_ff == 0 {
            return bad("dimensions must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.position == PositionScheme::Rotary && self.d_head() % 2 != 0 {
            return bad("rotary positions need an even head dimension");
        }
        if self.max_seq == 0 {
            return bad("max_seq must be positive");
        }
        Ok(())
    }

    /// Desk-scale default around a given vocabulary.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            vocab_size,
            max_seq: 128,
            d_ff: 512,
            position: PositionScheme::Rotary,
            rope_base: 10_000.0,
        }
    }
}

/// Causal + padding mask for a batch, stored additively as `[batch, seq, seq]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    batch: usize,
    seq_len: usize,
    additive: Arc<Vec<f64>>,
    padding: Vec<Vec<bool>>,
}

impl AttentionMask {
    /// One sequence; `padding[i]` marks position `i` as padding.
    pub fn causal(seq_len: usize, padding: &[bool]) -> Result<Self> {
        Self::causal_batch(&[padding.to_vec()]).and_then(|m| {
            if m.seq_len != seq_len {
                Err(Error::invalid("build_causal_mask", format!("padding length {} != seq_len {seq_len}", m.seq_len)))
            } else {
                Ok(m)
            }
        })
    }

    /// Query `i` sees key `j` iff `j <= i` and `j` is not padding.
    pub fn causal_batch(padding: &[Vec<bool>]) -> Result<Self> {
        let seq_len = padding.first().map_or(0, Vec::len);
        if seq_len == 0 || padding.iter().any(|p| p.len() != seq_len) {
            return Err(Error::invalid("build_causal_mask", "padding rows must share a positive length"));
        }
        let mut additive = vec![MASK_NEG; padding.len() * seq_len * seq_len];
        for (b, pad) in padding.iter().enumerate() {
            for i in 0..seq_len {
                for j in 0..=i {
                    if !pad[j] {
                        additive[(b * seq_len + i) * seq_len + j] = 0.0;
                    }
                }
            }
        }
        Ok(Self {
            batch: padding.len(),
            seq_len,
            additive: Arc::new(additive),
            padding: padding.to_vec(),
        })
    }

    /// Bidirectional, no padding.
    pub fn full(batch: usize, seq_len: usize) -> Self {
        Self {
            batch,
            seq_len,
            additive: Arc::new(vec![0.0; batch * seq_len * seq_len]),
            padding: vec![vec![false; seq_len]; batch],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn padding(&self) -> &[Vec<bool>] {
        &self.padding
    }

    pub fn value(&self, b: usize, i: usize, j: usize) -> f64 {
        self.additive[(b * self.seq_len + i) * self.seq_len + j]
    }

    pub fn is_visible(&self, b: usize, i: usize, j: usize) -> bool {
        self.value(b, i, j) == 0.0
    }

    pub fn additive(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.additive)
    }
}

/// `build_causal_mask(seq_len, padding)` for a single sequence.
pub fn build_causal_mask(seq_len: usize, padding: &[bool]) -> Result<AttentionMask> {
    AttentionMask::causal(seq_len, padding)
}

/// `Softmax(Q Kᵀ / sqrt(d_h) + M) V`, per head, for `[batch, seq, heads, d_h]` inputs.
pub fn causal_attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: &AttentionMask) -> Result<Var> {
    let s = g.shape(q);
    if s.len() != 4 || s[0] != mask.batch() || s[1] != mask.seq_len() {
        return Err(Error::shape("causal_attention", s, &[mask.batch(), mask.seq_len()]));
    }
    g.attention(q, k, v, mask.additive())
}

/// Keys and values of every layer, each `[batch, seq, heads, d_head]`, with
/// rotary positions already applied to the keys.
#[derive(Clone, Debug)]
pub struct KvCache {
    layers: Vec<(Var, Var)>,
    batch: usize,
    seq_len: usize,
}

impl KvCache {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn layer(&self, l: usize) -> (Var, Var) {
        self.layers[l]
    }

    /// Copies the cache into `dst` as constants: the values are shared, the
    /// differentiation path is not.
    pub fn transfer(&self, src: &Graph, dst: &mut Graph) -> KvCache {
        let layers = self
            .layers
            .iter()
            .map(|&(k, v)| (dst.constant(src.detach(k)), dst.constant(src.detach(v))))
            .collect();
        KvCache {
            layers,
            batch: self.batch,
            seq_len: self.seq_len,
        }
    }

    /// Checks layer count and per-layer shapes against `config`.
    pub fn validate(&self, g: &Graph, config: &TransformerConfig) -> Result<()> {
        if self.layers.len() != config.n_layers {
            return Err(Error::CacheMismatch(format!(
                "cache has {} layers, decoder has {}",
                self.layers.len(),
                config.n_layers
            )));
        }
        let want = [self.batch, self.seq_len, config.n_heads, config.d_head()];
        for (l, &(k, v)) in self.layers.iter().enumerate() {
            if g.shape(k) != want || g.shape(v) != want {
                return Err(Error::CacheMismatch(format!(
                    "layer {l}: expected {want:?}, got k {:?} v {:?}",
                    g.shape(k),
                    g.shape(v)
                )));
            }
        }
        Ok(())
    }
}

pub enum KvSource<'a> {
    Own,
    Inject(&'a KvCache),
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub mlp_norm: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
}

/// Parameter layout of one decoder inside a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Decoder {
    config: TransformerConfig,
    prefix: String,
    tok_emb: ParamId,
    pos_emb: Option<ParamId>,
    layers: Vec<LayerParams>,
    final_norm: ParamId,
    head: ParamId,
}

pub struct DecoderOutput {
    pub logits: Var,
    pub cache: KvCache,
}

impl Decoder {
    /// Allocates and initialises a decoder's parameters under `prefix`.
    pub fn init(config: &TransformerConfig, params: &mut ParamSet, prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let std_in = 1.0 / (d as f64).sqrt();
        let std_ff = 1.0 / (f as f64).sqrt();
        let residual = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let mut add = |name: String, t: Tensor| params.insert(name, t);
        add(format!("{prefix}.tok_emb"), Tensor::randn([v, d], std_in, rng))?;
        if config.position == PositionScheme::LearnedAbsolute {
            add(format!("{prefix}.pos_emb"), Tensor::randn([config.max_seq, d], std_in, rng))?;
        }
        for l in 0..config.n_layers {
            let p = format!("{prefix}.layers.{l}");
            add(format!("{p}.attn_norm"), Tensor::full([d], 1.0))?;
            add(format!("{p}.wq"), Tensor::randn([d, d], std_in, rng))?;
            add(format!("{p}.wk"), Tensor::randn([d, d], std_in, rng))?;
            add(format!("{p}.wv"), Tensor::randn([d, d], std_in, rng))?;
            add(format!("{p}.wo"), Tensor::randn([d, d], std_in * residual, rng))?;
            add(format!("{p}.mlp_norm"), Tensor::full([d], 1.0))?;
            add(format!("{p}.w_up"), Tensor::randn([d, f], std_in, rng))?;
            add(format!("{p}.w_down"), Tensor::randn([f, d], std_ff * residual, rng))?;
        }
        add(format!("{prefix}.final_norm"), Tensor::full([d], 1.0))?;
        add(format!("{prefix}.head"), Tensor::randn([d, v], std_in, rng))?;
        Self::locate(config, params, prefix)
    }

    /// Finds an existing decoder layout by name, checking every shape.
    pub fn locate(config: &TransformerConfig, params: &ParamSet, prefix: &str) -> Result<Self> {
        config.validate()?;
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let get = |name: String, shape: &[usize]| -> Result<ParamId> {
            let id = params.require(&name)?;
            if params.get(id).shape() != shape {
                return Err(Error::shape("decoder_layout", params.get(id).shape(), shape));
            }
            Ok(id)
        };
        let tok_emb = get(format!("{prefix}.tok_emb"), &[v, d])?;
        let pos_emb = match config.position {
            PositionScheme::LearnedAbsolute => Some(get(format!("{prefix}.pos_emb"), &[config.max_seq, d])?),
            PositionScheme::Rotary => None,
        };
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = format!("{prefix}.layers.{l}");
                Ok(LayerParams {
                    attn_norm: get(format!("{p}.attn_norm"), &[d])?,
                    wq: get(format!("{p}.wq"), &[d, d])?,
                    wk: get(format!("{p}.wk"), &[d, d])?,
                    wv: get(format!("{p}.wv"), &[d, d])?,
                    wo: get(format!("{p}.wo"), &[d, d])?,
                    mlp_norm: get(format!("{p}.mlp_norm"), &[d])?,
                    w_up: get(format!("{p}.w_up"), &[d, f])?,
                    w_down: get(format!("{p}.w_down"), &[f, d])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            prefix: prefix.to_string(),
            tok_emb,
            pos_emb,
            layers,
            final_norm: get(format!("{prefix}.final_norm"), &[d])?,
            head: get(format!("{prefix}.head"), &[d, v])?,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn token_table(&self) -> ParamId {
        self.tok_emb
    }

    /// Token embeddings for a rectangular batch of ids, `[batch, seq, d_model]`,
    /// without positional terms.
    pub fn token_embeddings(&self, g: &mut Graph, bound: &Bound, ids: &[Vec<usize>]) -> Result<Var> {
        let seq = ids.first().map_or(0, Vec::len);
        if seq == 0 || ids.iter().any(|r| r.len() != seq) {
            return Err(Error::invalid("embed_tokens", "ids must be a non-empty rectangle"));
        }
        let flat: Vec<usize> = ids.concat();
        let e = g.embedding(bound.var(self.tok_emb), &flat)?;
        g.reshape(e, [ids.len(), seq, self.config.d_model])
    }

    /// Adds learned absolute positions `0..seq` to `[batch, seq, d_model]`
    /// embeddings. The rotary scheme applies positions inside attention, so
    /// this is the identity there.
    pub fn add_positions(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let Some(pos) = self.pos_emb else { return Ok(x) };
        let shape = g.shape(x).to_vec();
        let (b, seq) = (shape[0], shape[1]);
        if seq > self.config.max_seq {
            return Err(Error::invalid("add_positions", format!("sequence {seq} exceeds max_seq {}", self.config.max_seq)));
        }
        let rows: Vec<usize> = (0..b).flat_map(|_| 0..seq).collect();
        let p = g.embedding(bound.var(pos), &rows)?;
        let p = g.reshape(p, shape)?;
        g.add(x, p)
    }

    /// Embeds one sequence, `[seq, d_model]`, including learned positions
    /// when that scheme is active.
    pub fn embed_tokens(&self, g: &mut Graph, bound: &Bound, ids: &[usize]) -> Result<Var> {
        let e = self.token_embeddings(g, bound, &[ids.to_vec()])?;
        let e = self.add_positions(g, bound, e)?;
        g.reshape(e, [ids.len(), self.config.d_model])
    }

    /// Full-sequence forward over `[batch, seq, d_model]` embeddings.
    /// Returns logits `[batch, seq, vocab]` and the cache attention used.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        input_embeds: Var,
        mask: &AttentionMask,
        kv: KvSource<'_>,
    ) -> Result<DecoderOutput> {
        let cfg = &self.config;
        let shape = g.shape(input_embeds).to_vec();
        if shape.len() != 3 || shape[2] != cfg.d_model {
            return Err(Error::shape("decoder_forward", &shape, &[0, 0, cfg.d_model]));
        }
        let (b, seq) = (shape[0], shape[1]);
        if seq > cfg.max_seq {
            return Err(Error::invalid("decoder_forward", format!("sequence {seq} exceeds max_seq {}", cfg.max_seq)));
        }
        if mask.batch() != b || mask.seq_len() != seq {
            return Err(Error::shape("decoder_forward", &[b, seq], &[mask.batch(), mask.seq_len()]));
        }
        if let KvSource::Inject(cache) = &kv {
            if cache.n_layers() != cfg.n_layers {
                return Err(Error::CacheMismatch(format!(
                    "injected cache has {} layers, decoder has {}",
                    cache.n_layers(),
                    cfg.n_layers
                )));
            }
            if cache.batch() != b || cache.seq_len() != seq {
                return Err(Error::CacheMismatch(format!(
                    "injected cache is [{}, {}], input is [{b}, {seq}]",
                    cache.batch(),
                    cache.seq_len()
                )));
            }
        }
        let heads = [b, seq, cfg.n_heads, cfg.d_head()];
        let rotary = cfg.position == PositionScheme::Rotary;
        let mut own_cache = Vec::with_capacity(cfg.n_layers);
        let mut h = input_embeds;
        for (l, lp) in self.layers.iter().enumerate() {
            let x = g.rms_norm(h, bound.var(lp.attn_norm), RMS_EPS)?;
            let q = g.matmul(x, bound.var(lp.wq))?;
            let mut q = g.reshape(q, heads)?;
            if rotary {
                q = g.rotary(q, cfg.rope_base)?;
            }
            let (k, v) = match &kv {
                KvSource::Inject(cache) => cache.layer(l),
                KvSource::Own => {
                    let k = g.matmul(x, bound.var(lp.wk))?;
                    let mut k = g.reshape(k, heads)?;
                    if rotary {
                        k = g.rotary(k, cfg.rope_base)?;
                    }
                    let v = g.matmul(x, bound.var(lp.wv))?;
                    let v = g.reshape(v, heads)?;
                    own_cache.push((k, v));
                    (k, v)
                }
            };
            let a = causal_attention(g, q, k, v, mask)?;
            let a = g.reshape(a, [b, seq, cfg.d_model])?;
            let a = g.matmul(a, bound.var(lp.wo))?;
            h = g.add(h, a)?;

            let x = g.rms_norm(h, bound.var(lp.mlp_norm), RMS_EPS)?;
            let u = g.matmul(x, bound.var(lp.w_up))?;
            let u = g.gelu(u);
            let m = g.matmul(u, bound.var(lp.w_down))?;
            h = g.add(h, m)?;
        }
        let x = g.rms_norm(h, bound.var(self.final_norm), RMS_EPS)?;
        let logits = g.matmul(x, bound.var(self.head))?;
        let cache = match kv {
            KvSource::Inject(cache) => cache.clone(),
            KvSource::Own => KvCache {
                layers: own_cache,
                batch: b,
                seq_len: seq,
            },
        };
        Ok(DecoderOutput { logits, cache })
    }
}
