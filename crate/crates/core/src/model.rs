//! Vision encoder, projector, and the student/teacher tower wiring.
//!
//! A [`Tower`] owns one [`ParamSet`]. A language-only tower holds a decoder
//! under `decoder.*`; a multimodal tower additionally holds `vision.*` and
//! `projector.*`. Decoder parameters are always allocated first, so a
//! multimodal tower grown from a language tower keeps identical names and ids
//! for the shared part.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var, IGNORE_INDEX};
use crate::data::{render_image, Batch, Image};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::Tensor;
use crate::transformer::{AttentionMask, Decoder, DecoderOutput, KvCache, KvSource, TransformerConfig, RMS_EPS};

pub const DECODER_PREFIX: &str = "decoder";
pub const VISION_PREFIX: &str = "vision";
pub const PROJECTOR_PREFIX: &str = "projector";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_vis: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            image_size: 24,
            patch_size: 6,
            d_vis: 32,
            depth: 2,
            n_heads: 2,
            d_ff: 64,
        }
    }
}

impl VisionConfig {
    pub fn n_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::Config(format!("vision: {r}")));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad("image_size must be a positive multiple of patch_size");
        }
        if self.d_vis == 0 || self.n_heads == 0 || self.d_vis % self.n_heads != 0 || self.d_ff == 0 {
            return bad("d_vis must be positive and divisible by n_heads");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherEmbeds {
    /// The teacher consumes the exact embedded sequence the student consumes.
    Shared,
    /// Text positions use the teacher's own table; image positions still use
    /// the student's projector output.
    Own,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub decoder: TransformerConfig,
    pub vision: VisionConfig,
    pub teacher_embeds: TeacherEmbeds,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        self.vision.validate()
    }
}

/// Splits images into flattened non-overlapping patches, `[B·n_patches, p²]`,
/// patches in row-major order.
pub fn patchify(images: &[&Image], cfg: &VisionConfig) -> Result<Tensor> {
    let (p, side) = (cfg.patch_size, cfg.image_size / cfg.patch_size);
    let mut data = Vec::with_capacity(images.len() * cfg.n_patches() * cfg.patch_dim());
    for img in images {
        if img.size != cfg.image_size || img.pixels.len() != img.size * img.size {
            return Err(Error::shape("encode_image", &[img.size, img.size], &[cfg.image_size, cfg.image_size]));
        }
        for py in 0..side {
            for px in 0..side {
                for y in 0..p {
                    for x in 0..p {
                        data.push(img.at(py * p + y, px * p + x));
                    }
                }
            }
        }
    }
    Tensor::new([images.len() * cfg.n_patches(), cfg.patch_dim()], data)
}

#[derive(Clone, Debug)]
struct Block {
    attn_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    mlp_norm: ParamId,
    w_up: ParamId,
    w_down: ParamId,
}

/// Patch projection, learned patch positions and a few bidirectional blocks.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    config: VisionConfig,
    patch_proj: ParamId,
    patch_bias: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    final_norm: ParamId,
}

impl VisionEncoder {
    pub fn init(cfg: &VisionConfig, params: &mut ParamSet, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, f, pd) = (cfg.d_vis, cfg.d_ff, cfg.patch_dim());
        let std_d = 1.0 / (d as f64).sqrt();
        let residual = 1.0 / (2.0 * cfg.depth.max(1) as f64).sqrt();
        let pre = VISION_PREFIX;
        params.insert(format!("{pre}.patch_proj"), Tensor::randn([pd, d], 1.0 / (pd as f64).sqrt(), rng))?;
        params.insert(format!("{pre}.patch_bias"), Tensor::zeros([d]))?;
        params.insert(format!("{pre}.pos"), Tensor::randn([cfg.n_patches(), d], std_d, rng))?;
        for l in 0..cfg.depth {
            let p = format!("{pre}.blocks.{l}");
            params.insert(format!("{p}.attn_norm"), Tensor::full([d], 1.0))?;
            params.insert(format!("{p}.wq"), Tensor::randn([d, d], std_d, rng))?;
            params.insert(format!("{p}.wk"), Tensor::randn([d, d], std_d, rng))?;
            params.insert(format!("{p}.wv"), Tensor::randn([d, d], std_d, rng))?;
            params.insert(format!("{p}.wo"), Tensor::randn([d, d], std_d * residual, rng))?;
            params.insert(format!("{p}.mlp_norm"), Tensor::full([d], 1.0))?;
            params.insert(format!("{p}.w_up"), Tensor::randn([d, f], std_d, rng))?;
            params.insert(format!("{p}.w_down"), Tensor::randn([f, d], residual / (f as f64).sqrt(), rng))?;
        }
        params.insert(format!("{pre}.final_norm"), Tensor::full([d], 1.0))?;
        Self::locate(cfg, params)
    }

    pub fn locate(cfg: &VisionConfig, params: &ParamSet) -> Result<Self> {
        cfg.validate()?;
        let (d, f, pd) = (cfg.d_vis, cfg.d_ff, cfg.patch_dim());
        let get = |name: String, shape: &[usize]| -> Result<ParamId> {
            let id = params.require(&name)?;
            if params.get(id).shape() != shape {
                return Err(Error::shape("vision_layout", params.get(id).shape(), shape));
            }
            Ok(id)
        };
        let pre = VISION_PREFIX;
        let blocks = (0..cfg.depth)
            .map(|l| {
                let p = format!("{pre}.blocks.{l}");
                Ok(Block {
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
            config: cfg.clone(),
            patch_proj: get(format!("{pre}.patch_proj"), &[pd, d])?,
            patch_bias: get(format!("{pre}.patch_bias"), &[d])?,
            pos: get(format!("{pre}.pos"), &[cfg.n_patches(), d])?,
            blocks,
            final_norm: get(format!("{pre}.final_norm"), &[d])?,
        })
    }

    pub fn config(&self) -> &VisionConfig {
        &self.config
    }

    /// Linear patch embeddings before positions and blocks, `[B·n, d_vis]`.
    pub fn patch_embeddings(&self, g: &mut Graph, bound: &Bound, images: &[&Image]) -> Result<Var> {
        let patches = g.constant(patchify(images, &self.config)?);
        let x = g.matmul(patches, bound.var(self.patch_proj))?;
        g.add_row(x, bound.var(self.patch_bias))
    }

    /// `E_img`: one feature row per patch, `[B, n_patches, d_vis]`.
    pub fn encode(&self, g: &mut Graph, bound: &Bound, images: &[&Image]) -> Result<Var> {
        let cfg = &self.config;
        let (b, n, d) = (images.len(), cfg.n_patches(), cfg.d_vis);
        let x = self.patch_embeddings(g, bound, images)?;
        let rows: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
        let pos = g.embedding(bound.var(self.pos), &rows)?;
        let x = g.add(x, pos)?;
        let mut h = g.reshape(x, [b, n, d])?;
        let mask = AttentionMask::full(b, n);
        let heads = [b, n, cfg.n_heads, d / cfg.n_heads];
        for blk in &self.blocks {
            let x = g.rms_norm(h, bound.var(blk.attn_norm), RMS_EPS)?;
            let q = g.matmul(x, bound.var(blk.wq))?;
            let q = g.reshape(q, heads)?;
            let k = g.matmul(x, bound.var(blk.wk))?;
            let k = g.reshape(k, heads)?;
            let v = g.matmul(x, bound.var(blk.wv))?;
            let v = g.reshape(v, heads)?;
            let a = g.attention(q, k, v, mask.additive())?;
            let a = g.reshape(a, [b, n, d])?;
            let a = g.matmul(a, bound.var(blk.wo))?;
            h = g.add(h, a)?;
            let x = g.rms_norm(h, bound.var(blk.mlp_norm), RMS_EPS)?;
            let u = g.matmul(x, bound.var(blk.w_up))?;
            let u = g.gelu(u);
            let m = g.matmul(u, bound.var(blk.w_down))?;
            h = g.add(h, m)?;
        }
        g.rms_norm(h, bound.var(self.final_norm), RMS_EPS)
    }
}

/// `P`: affine map from vision features to the decoder embedding space.
#[derive(Clone, Debug)]
pub struct Projector {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Projector {
    pub fn init(d_vis: usize, d_model: usize, params: &mut ParamSet, rng: &mut impl Rng) -> Result<Self> {
        params.insert(
            format!("{PROJECTOR_PREFIX}.w"),
            Tensor::randn([d_vis, d_model], 1.0 / (d_vis as f64).sqrt(), rng),
        )?;
        params.insert(format!("{PROJECTOR_PREFIX}.b"), Tensor::zeros([d_model]))?;
        Self::locate(d_vis, d_model, params)
    }

    pub fn locate(d_vis: usize, d_model: usize, params: &ParamSet) -> Result<Self> {
        let weight = params.require(&format!("{PROJECTOR_PREFIX}.w"))?;
        let bias = params.require(&format!("{PROJECTOR_PREFIX}.b"))?;
        if params.get(weight).shape() != [d_vis, d_model] || params.get(bias).shape() != [d_model] {
            return Err(Error::shape("projector_layout", params.get(weight).shape(), &[d_vis, d_model]));
        }
        Ok(Self { weight, bias })
    }

    /// Maps `[.., d_vis]` features to `[.., d_model]`.
    pub fn project(&self, g: &mut Graph, bound: &Bound, feats: Var) -> Result<Var> {
        let x = g.matmul(feats, bound.var(self.weight))?;
        g.add_row(x, bound.var(self.bias))
    }
}

/// Which positions of a built sequence are image tokens, plus the padding
/// mask, labels and attention mask in sequence coordinates.
#[derive(Clone, Debug)]
pub struct SequenceLayout {
    pub seq_len: usize,
    pub is_image: Vec<Vec<bool>>,
    /// `true` on real positions (image or text), `false` on padding.
    pub mask: Vec<Vec<bool>>,
    pub labels: Vec<Vec<i64>>,
    /// For text positions, the index into the batch's text columns.
    pub text_index: Vec<Vec<Option<usize>>>,
    pub attention: AttentionMask,
}

impl SequenceLayout {
    pub fn flat_labels(&self) -> Vec<i64> {
        self.labels.concat()
    }

    pub fn flat_mask(&self) -> Vec<bool> {
        self.mask.concat()
    }
}

pub struct BuiltSequence {
    /// Student input embeddings `[B, S, d_model]`.
    pub embeds: Var,
    /// Projector output rows `[images·n_patches, d_model]`, when any image is present.
    pub image_tokens: Option<Var>,
    pub layout: SequenceLayout,
}

#[derive(Clone, Debug)]
pub struct Tower {
    config: ModelConfig,
    pub params: ParamSet,
    decoder: Decoder,
    vision: Option<(VisionEncoder, Projector)>,
}

impl Tower {
    /// Fresh language-only tower.
    pub fn new_language(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let decoder = Decoder::init(&config.decoder, &mut params, DECODER_PREFIX, rng)?;
        Ok(Self {
            config: config.clone(),
            params,
            decoder,
            vision: None,
        })
    }

    /// Fresh multimodal tower.
    pub fn new_multimodal(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut t = Self::new_language(config, rng)?;
        t.attach_vision(rng)?;
        Ok(t)
    }

    /// Adds a freshly initialised vision encoder and projector.
    pub fn attach_vision(&mut self, rng: &mut impl Rng) -> Result<()> {
        if self.vision.is_some() {
            return Err(Error::Config("tower already has a vision encoder".into()));
        }
        let enc = VisionEncoder::init(&self.config.vision, &mut self.params, rng)?;
        let proj = Projector::init(self.config.vision.d_vis, self.config.decoder.d_model, &mut self.params, rng)?;
        self.vision = Some((enc, proj));
        Ok(())
    }

    /// Rebuilds a tower around stored parameters. Vision parts are located
    /// when present.
    pub fn from_params(config: &ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let decoder = Decoder::locate(&config.decoder, &params, DECODER_PREFIX)?;
        let vision = if params.find(&format!("{VISION_PREFIX}.patch_proj")).is_some() {
            Some((
                VisionEncoder::locate(&config.vision, &params)?,
                Projector::locate(config.vision.d_vis, config.decoder.d_model, &params)?,
            ))
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            params,
            decoder,
            vision,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn vision(&self) -> Option<&VisionEncoder> {
        self.vision.as_ref().map(|(v, _)| v)
    }

    pub fn projector(&self) -> Option<&Projector> {
        self.vision.as_ref().map(|(_, p)| p)
    }

    pub fn has_vision(&self) -> bool {
        self.vision.is_some()
    }

    /// Checksum of the `decoder.*` parameters only.
    pub fn decoder_checksum(&self) -> String {
        let mut sub = ParamSet::new();
        for (_, name, t) in self.params.iter().filter(|(_, n, _)| n.starts_with(DECODER_PREFIX)) {
            sub.insert(name, t.clone()).expect("names are unique");
        }
        sub.checksum()
    }

    /// Image-token block for the given images, `[images·n_patches, d_model]`.
    pub fn image_tokens(&self, g: &mut Graph, bound: &Bound, images: &[&Image]) -> Result<Var> {
        let (enc, proj) = self
            .vision
            .as_ref()
            .ok_or_else(|| Error::MissingPrerequisite("this tower has no vision encoder".into()))?;
        let feats = enc.encode(g, bound, images)?;
        let u = proj.project(g, bound, feats)?;
        g.reshape(u, [images.len() * enc.config().n_patches(), self.config.decoder.d_model])
    }

    /// `x̃ = [X_v; X_t]` per example, right-padded to a common length.
    pub fn build_sequence(&self, g: &mut Graph, bound: &Bound, batch: &Batch) -> Result<BuiltSequence> {
        let cfg = &self.config;
        let (b, width, d) = (batch.len(), batch.seq_len(), cfg.decoder.d_model);
        let n_img = cfg.vision.n_patches();
        let has_img: Vec<bool> = batch.scenes.iter().map(Option::is_some).collect();
        let seq_len = (0..b).map(|i| width + if has_img[i] { n_img } else { 0 }).max().unwrap_or(0);
        for i in 0..b {
            let real = batch.mask[i].iter().filter(|&&m| m).count() + if has_img[i] { n_img } else { 0 };
            if real > cfg.decoder.max_seq {
                return Err(Error::Sample {
                    index: i,
                    reason: format!("sequence of {real} positions exceeds max_seq {}", cfg.decoder.max_seq),
                });
            }
        }
        if seq_len > cfg.decoder.max_seq {
            return Err(Error::invalid(
                "build_multimodal_sequence",
                format!("padded length {seq_len} exceeds max_seq {}", cfg.decoder.max_seq),
            ));
        }

        let flat_ids: Vec<usize> = batch.tokens.concat();
        let text = g.embedding(bound.var(self.decoder.token_table()), &flat_ids)?;
        let images: Vec<Image> = batch
            .scenes
            .iter()
            .flatten()
            .map(|s| render_image(s, cfg.vision.image_size))
            .collect::<Result<_>>()?;
        let image_tokens = if images.is_empty() {
            None
        } else {
            let refs: Vec<&Image> = images.iter().collect();
            Some(self.image_tokens(g, bound, &refs)?)
        };

        let mut gather = Vec::with_capacity(b * seq_len);
        let mut layout = SequenceLayout {
            seq_len,
            is_image: Vec::with_capacity(b),
            mask: Vec::with_capacity(b),
            labels: Vec::with_capacity(b),
            text_index: Vec::with_capacity(b),
            attention: AttentionMask::full(1, 1),
        };
        let mut img_slot = 0;
        for i in 0..b {
            let offset = if has_img[i] { n_img } else { 0 };
            let (mut is_img, mut m, mut lab, mut tix) = (vec![], vec![], vec![], vec![]);
            for p in 0..seq_len {
                if p < offset {
                    gather.push(b * width + img_slot * n_img + p);
                    is_img.push(true);
                    m.push(true);
                    lab.push(IGNORE_INDEX);
                    tix.push(None);
                } else if p - offset < width {
                    let t = p - offset;
                    gather.push(i * width + t);
                    is_img.push(false);
                    m.push(batch.mask[i][t]);
                    lab.push(if batch.mask[i][t] { batch.labels[i][t] } else { IGNORE_INDEX });
                    tix.push(Some(t));
                } else {
                    gather.push(i * width + width - 1);
                    is_img.push(false);
                    m.push(false);
                    lab.push(IGNORE_INDEX);
                    tix.push(None);
                }
            }
            if has_img[i] {
                img_slot += 1;
            }
            layout.is_image.push(is_img);
            layout.mask.push(m);
            layout.labels.push(lab);
            layout.text_index.push(tix);
        }
        let padding: Vec<Vec<bool>> = layout.mask.iter().map(|r| r.iter().map(|&m| !m).collect()).collect();
        layout.attention = AttentionMask::causal_batch(&padding)?;

        let source = match image_tokens {
            Some(img) => g.concat(&[text, img], 0)?,
            None => text,
        };
        let rows = g.gather_rows(source, &gather)?;
        let embeds = g.reshape(rows, [b, seq_len, d])?;
        let embeds = self.decoder.add_positions(g, bound, embeds)?;
        Ok(BuiltSequence {
            embeds,
            image_tokens,
            layout,
        })
    }

    /// Self-mode decoder pass.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, embeds: Var, mask: &AttentionMask) -> Result<DecoderOutput> {
        self.decoder.forward(g, bound, embeds, mask, KvSource::Own)
    }

    /// Inference-only logits `[B, S, V]` with the layout used to produce them.
    pub fn logits(&self, batch: &Batch) -> Result<(Tensor, SequenceLayout)> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let seq = self.build_sequence(&mut g, &bound, batch)?;
        let out = self.forward(&mut g, &bound, seq.embeds, &seq.layout.attention)?;
        Ok((g.detach(out.logits), seq.layout))
    }

    /// Teacher input embeddings for a student-built sequence.
    pub fn teacher_embeddings(
        &self,
        student: &Graph,
        seq: &BuiltSequence,
        batch: &Batch,
        mode: TeacherEmbeds,
    ) -> Result<Tensor> {
        match mode {
            TeacherEmbeds::Shared => Ok(student.detach(seq.embeds)),
            TeacherEmbeds::Own => {
                let d = self.config.decoder.d_model;
                let table = self.params.get(self.decoder.token_table());
                let img = seq.image_tokens.map(|v| student.detach(v));
                let n_img = self.config.vision.n_patches();
                let (b, s) = (batch.len(), seq.layout.seq_len);
                let mut data = Vec::with_capacity(b * s * d);
                let mut img_slot = 0;
                for i in 0..b {
                    let has = seq.layout.is_image[i].first().copied().unwrap_or(false);
                    for p in 0..s {
                        if seq.layout.is_image[i][p] {
                            let img = img.as_ref().expect("image positions imply image tokens");
                            data.extend_from_slice(img.row(img_slot * n_img + p));
                        } else {
                            let t = seq.layout.text_index[i][p].unwrap_or(batch.seq_len() - 1);
                            data.extend_from_slice(table.row(batch.tokens[i][t]));
                        }
                    }
                    if has {
                        img_slot += 1;
                    }
                }
                let x = Tensor::new([b, s, d], data)?;
                let mut g = Graph::new();
                let bound = self.params.bind_frozen(&mut g);
                let x = g.constant(x);
                let x = self.decoder.add_positions(&mut g, &bound, x)?;
                Ok(g.detach(x))
            }
        }
    }

    /// Teacher pass over the student's cache. Runs on a separate graph whose
    /// parameters are all frozen and whose cache entries are constants, so the
    /// returned logits carry no link to anything trainable. The second value is
    /// the number of teacher-graph nodes that would receive a gradient (always 0).
    pub fn forward_shared_kv(
        &self,
        teacher_embeds: &Tensor,
        mask: &AttentionMask,
        student_graph: &Graph,
        cache: &KvCache,
    ) -> Result<(Tensor, usize)> {
        let mut tg = Graph::new();
        let bound = self.params.bind_frozen(&mut tg);
        let cache = cache.transfer(student_graph, &mut tg);
        cache.validate(&tg, &self.config.decoder)?;
        let x = tg.constant(teacher_embeds.clone());
        let out = self.decoder.forward(&mut tg, &bound, x, mask, KvSource::Inject(&cache))?;
        Ok((tg.detach(out.logits), tg.trainable_nodes()))
    }
}
