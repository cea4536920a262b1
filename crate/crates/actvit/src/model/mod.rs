//! The activation-tensor detector: per-LLM linear adapters into a shared
//! feature space, patchification with a shared per-patch positional
//! encoding, a transformer backbone over activation patches, and a scalar
//! classification head.
//!
//! Pipeline per pooled tensor: adapt -> add per-patch PE -> patchify ->
//! linear patch embedding -> add global PE -> encoder blocks -> mean (or
//! cls) readout -> logit. Forward is deterministic in eval mode and
//! bit-identical between batched and per-element calls.

mod io;
mod mlp;

pub use io::{load_actvit, save_actvit, Provenance};
pub use mlp::{ActMlpConfig, ActMlpModel, MlpCache};

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::{LlmDescriptor, LlmRegistry};
use crate::nn::encoder::{accumulate_colsum, add_row_bias, apply_dropout, BlockCache, EncoderBlock};
use crate::nn::optim::ParamSource;
use crate::nn::{trunc_normal, Mat, Param, Real};
use crate::rng::stream;
use crate::tensor::{PoolConfig, PoolMode, PooledTensor};

/// Any pixel whose channels all sit at or below this is pooled padding.
const PAD_THRESHOLD: f32 = -1.0e37;

/// Non-overlapping patch shape over the pooled (layers, tokens) grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub rows: usize,
    pub cols: usize,
}

impl PatchConfig {
    pub fn validate(&self, pooled_layers: usize, pooled_tokens: usize) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::validation("patch dims must be >= 1"));
        }
        if !pooled_layers.is_multiple_of(self.rows) || !pooled_tokens.is_multiple_of(self.cols) {
            return Err(Error::validation(format!(
                "pooled shape ({pooled_layers}, {pooled_tokens}) is not divisible by patch ({}, {})",
                self.rows, self.cols
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    Mean,
    Cls,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActVitConfig {
    pub pool: PoolConfig,
    pub patch: PatchConfig,
    /// Shared adapter output dimensionality D'.
    pub shared_dim: usize,
    /// Transformer embedding dim.
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub dropout: f64,
    pub readout: Readout,
}

impl ActVitConfig {
    /// Desk-scale default used by synthetic protocols and benchmarks.
    pub fn toy_default() -> Self {
        ActVitConfig {
            pool: PoolConfig::two_d(4, 8),
            patch: PatchConfig { rows: 1, cols: 1 },
            shared_dim: 16,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            dropout: 0.3,
            readout: Readout::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pool.validate()?;
        if self.pool.mode != PoolMode::TwoD {
            return Err(Error::validation(
                "the patch backbone needs a fixed spatial grid; use a two_d pool config",
            ));
        }
        self.patch
            .validate(self.pool.target_layers, self.pool.target_tokens)?;
        if self.shared_dim == 0 || self.embed_dim == 0 || self.depth == 0 {
            return Err(Error::validation("model dims must be >= 1"));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::validation(format!(
                "embed dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation("dropout must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        (
            self.pool.target_layers / self.patch.rows,
            self.pool.target_tokens / self.patch.cols,
        )
    }

    pub fn patch_count(&self) -> usize {
        let (h, w) = self.patch_grid();
        h * w
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch.rows * self.patch.cols
    }
}

/// Parameter groups for freezing. `Adapter(id)` freezes one LLM's adapter.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    Backbone,
    Positional,
    Head,
    Adapter(String),
}

impl ParamGroup {
    /// Parse the CLI spelling: backbone | positional | head | adapters:<llm_id>.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "backbone" => Ok(ParamGroup::Backbone),
            "positional" => Ok(ParamGroup::Positional),
            "head" => Ok(ParamGroup::Head),
            _ => match s.strip_prefix("adapters:") {
                Some(id) if !id.is_empty() => Ok(ParamGroup::Adapter(id.to_string())),
                _ => Err(Error::validation(format!("unknown freeze group '{s}'"))),
            },
        }
    }
}

/// The set of per-LLM linear maps into the shared space. No bias term:
/// adapt(x)[l, n, :] = x[l, n, :] W.
#[derive(Debug, Clone)]
pub struct AdapterRegistry<R: Real> {
    pub shared_dim: usize,
    adapters: BTreeMap<String, (LlmDescriptor, Param<R>)>,
}

impl<R: Real> AdapterRegistry<R> {
    pub fn new(shared_dim: usize) -> Self {
        AdapterRegistry {
            shared_dim,
            adapters: BTreeMap::new(),
        }
    }

    /// Identity-padded init when D_M <= D' (top-left identity block, zeros
    /// elsewhere), truncated normal otherwise.
    fn init_weight(&self, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Mat<R> {
        if hidden_dim <= self.shared_dim {
            Mat::from_fn(hidden_dim, self.shared_dim, |i, j| {
                if i == j {
                    R::ONE
                } else {
                    R::ZERO
                }
            })
        } else {
            trunc_normal(hidden_dim, self.shared_dim, 0.02, rng)
        }
    }

    pub fn register(&mut self, desc: &LlmDescriptor, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.adapters.contains_key(&desc.llm_id) {
            return Err(Error::validation(format!(
                "adapter for '{}' already registered",
                desc.llm_id
            )));
        }
        let w = self.init_weight(desc.hidden_dim, rng);
        self.adapters
            .insert(desc.llm_id.clone(), (desc.clone(), Param::new(w)));
        Ok(())
    }

    /// Drop and re-draw one adapter (used when adapting to a new LLM from
    /// scratch).
    pub fn reinit(&mut self, llm_id: &str, rng: &mut ChaCha8Rng) -> Result<()> {
        let (desc, _) = self
            .adapters
            .get(llm_id)
            .ok_or_else(|| Error::validation(format!("no adapter for llm '{llm_id}'")))?
            .clone();
        let w = self.init_weight(desc.hidden_dim, rng);
        self.adapters
            .insert(llm_id.to_string(), (desc, Param::new(w)));
        Ok(())
    }

    pub fn contains(&self, llm_id: &str) -> bool {
        self.adapters.contains_key(llm_id)
    }

    pub fn descriptor(&self, llm_id: &str) -> Option<&LlmDescriptor> {
        self.adapters.get(llm_id).map(|(d, _)| d)
    }

    pub fn weight(&self, llm_id: &str) -> Option<&Mat<R>> {
        self.adapters.get(llm_id).map(|(_, p)| &p.value)
    }

    pub fn weight_mut(&mut self, llm_id: &str) -> Option<&mut Mat<R>> {
        self.adapters.get_mut(llm_id).map(|(_, p)| &mut p.value)
    }

    pub fn llm_ids(&self) -> impl Iterator<Item = &str> {
        self.adapters.keys().map(String::as_str)
    }

    fn require(&self, llm_id: &str) -> Result<&(LlmDescriptor, Param<R>)> {
        self.adapters.get(llm_id).ok_or_else(|| {
            Error::validation(format!("llm '{llm_id}' has no registered adapter"))
        })
    }

    /// Project one pooled tensor into the shared space: a (L_p*N_p, D')
    /// matrix of adapted activation pixels. Pad-only pixels are zeroed.
    pub fn adapt(&self, p: &PooledTensor) -> Result<Mat<R>> {
        let (_, param) = self.require(&p.llm_id)?;
        let pixels = pooled_to_rows::<R>(p);
        Ok(pixels.matmul(&param.value))
    }

    fn visit(&mut self, f: &mut dyn FnMut(String, &mut Param<R>, ParamGroup)) {
        for (id, (_, p)) in self.adapters.iter_mut() {
            f(
                format!("adapter:{id}"),
                p,
                ParamGroup::Adapter(id.clone()),
            );
        }
    }
}

/// Flatten a pooled tensor into pixel rows, zeroing pad-only pixels (their
/// sentinel value would otherwise overflow f32 arithmetic downstream).
fn pooled_to_rows<R: Real>(p: &PooledTensor) -> Mat<R> {
    let (l_p, n_p, d) = p.data.shape();
    let mut out = Mat::zeros(l_p * n_p, d);
    for l in 0..l_p {
        for n in 0..n_p {
            let px = p.data.pixel(l, n);
            let row = out.row_mut(l * n_p + n);
            if px.iter().all(|&v| v <= PAD_THRESHOLD) {
                continue; // leave zeros
            }
            for (o, &v) in row.iter_mut().zip(px) {
                *o = R::from_f32(v);
            }
        }
    }
    out
}

pub struct ForwardCache<R: Real> {
    llm_id: String,
    batch: usize,
    pixels: Mat<R>,
    patch_tokens: Mat<R>,
    embed_mask: Option<Vec<R>>,
    block_caches: Vec<BlockCache<R>>,
    readout_mat: Mat<R>,
}

#[derive(Debug, Clone)]
pub struct ActVitModel<R: Real> {
    pub config: ActVitConfig,
    pub adapters: AdapterRegistry<R>,
    pe_patch: Param<R>,
    w_embed: Param<R>,
    b_embed: Param<R>,
    pe_global: Param<R>,
    cls: Option<Param<R>>,
    blocks: Vec<EncoderBlock<R>>,
    w_head: Param<R>,
    b_head: Param<R>,
    frozen: BTreeSet<ParamGroup>,
}

impl<R: Real> ActVitModel<R> {
    /// Build a model with adapters for every LLM in `registry`.
    pub fn new(config: ActVitConfig, registry: &LlmRegistry, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed).with_str("actvit-init").rng();
        let mut adapters = AdapterRegistry::new(config.shared_dim);
        for desc in registry.iter() {
            adapters.register(desc, &mut rng)?;
        }
        let pixels = config.patch_pixels();
        let patches = config.patch_count();
        let e = config.embed_dim;
        let blocks = (0..config.depth)
            .map(|_| EncoderBlock::new(e, config.heads, &mut rng))
            .collect();
        Ok(ActVitModel {
            pe_patch: Param::new(trunc_normal(pixels, config.shared_dim, 0.02, &mut rng)),
            w_embed: Param::new(trunc_normal(pixels * config.shared_dim, e, 0.02, &mut rng)),
            b_embed: Param::zeros(1, e),
            pe_global: Param::new(trunc_normal(patches, e, 0.02, &mut rng)),
            cls: match config.readout {
                Readout::Cls => Some(Param::new(trunc_normal(1, e, 0.02, &mut rng))),
                Readout::Mean => None,
            },
            blocks,
            w_head: Param::new(trunc_normal(e, 1, 0.02, &mut rng)),
            b_head: Param::zeros(1, 1),
            adapters,
            config,
            frozen: BTreeSet::new(),
        })
    }

    /// Register an adapter for an LLM unseen at construction time.
    pub fn ensure_adapter(&mut self, desc: &LlmDescriptor, seed: u64) -> Result<()> {
        if self.adapters.contains(&desc.llm_id) {
            return Ok(());
        }
        let mut rng = stream(seed).with_str("adapter").with_str(&desc.llm_id).rng();
        self.adapters.register(desc, &mut rng)
    }

    pub fn reinit_adapter(&mut self, llm_id: &str, seed: u64) -> Result<()> {
        let mut rng = stream(seed).with_str("adapter-reinit").with_str(llm_id).rng();
        self.adapters.reinit(llm_id, &mut rng)
    }

    /// Freeze parameter groups; frozen groups get zero gradients and are
    /// skipped by the optimizer.
    pub fn freeze(&mut self, groups: &[ParamGroup]) -> Result<()> {
        for g in groups {
            if let ParamGroup::Adapter(id) = g {
                if !self.adapters.contains(id) {
                    return Err(Error::validation(format!(
                        "cannot freeze unknown adapter '{id}'"
                    )));
                }
            }
            self.frozen.insert(g.clone());
        }
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn frozen_groups(&self) -> &BTreeSet<ParamGroup> {
        &self.frozen
    }


    /// Tokens per sample in the encoder (patches plus optional cls slot).
    fn seq_len(&self) -> usize {
        self.config.patch_count() + usize::from(self.cls.is_some())
    }

    fn validate_batch(&self, batch: &[&PooledTensor]) -> Result<(String, usize)> {
        if batch.is_empty() {
            return Err(Error::validation("forward on an empty batch"));
        }
        let llm_id = batch[0].llm_id.clone();
        let desc = self
            .adapters
            .descriptor(&llm_id)
            .ok_or_else(|| Error::validation(format!("llm '{llm_id}' has no registered adapter")))?
            .clone();
        let want = (
            self.config.pool.target_layers,
            self.config.pool.target_tokens,
            desc.hidden_dim,
        );
        for p in batch {
            if p.llm_id != llm_id {
                return Err(Error::validation(
                    "batch mixes llm ids; batches must be homogeneous",
                ));
            }
            if p.data.shape() != want {
                return Err(Error::validation(format!(
                    "pooled tensor '{}' has shape {:?}, model expects {:?}",
                    p.sample_id,
                    p.data.shape(),
                    want
                )));
            }
        }
        Ok((llm_id, batch.len()))
    }

    /// Forward pass; pass a dropout RNG for training mode, `None` for eval.
    pub fn forward(
        &self,
        batch: &[&PooledTensor],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<R>, ForwardCache<R>)> {
        let (llm_id, b) = self.validate_batch(batch)?;
        let cfg = &self.config;
        let (l_p, n_p) = (cfg.pool.target_layers, cfg.pool.target_tokens);
        let spatial = l_p * n_p;
        let d_m = self
            .adapters
            .descriptor(&llm_id)
            .expect("validated")
            .hidden_dim;
        let d_shared = cfg.shared_dim;
        let (p_h, p_w) = (cfg.patch.rows, cfg.patch.cols);
        let (_, grid_w) = cfg.patch_grid();
        let patches = cfg.patch_count();
        let pix = cfg.patch_pixels();
        let e = cfg.embed_dim;
        let seq = self.seq_len();
        let cls_offset = usize::from(self.cls.is_some());

        // Pixel rows for the whole batch.
        let mut pixels = Mat::zeros(b * spatial, d_m);
        for (i, p) in batch.iter().enumerate() {
            let rows = pooled_to_rows::<R>(p);
            pixels.data[i * spatial * d_m..(i + 1) * spatial * d_m].copy_from_slice(&rows.data);
        }

        // Shared space + per-patch positional encoding.
        let adapter = &self.adapters.require(&llm_id).expect("validated").1.value;
        let mut adapted = pixels.matmul(adapter);
        for row in 0..b * spatial {
            let l = (row % spatial) / n_p;
            let n = row % n_p;
            let q = (l % p_h) * p_w + (n % p_w);
            let pe = self.pe_patch.value.row(q);
            let r = adapted.row_mut(row);
            for j in 0..d_shared {
                r[j] += pe[j];
            }
        }

        // Patchify: one row per patch, pixels concatenated in layer-major
        // order inside the patch.
        let mut patch_tokens = Mat::zeros(b * patches, pix * d_shared);
        for i in 0..b {
            for l in 0..l_p {
                for n in 0..n_p {
                    let p_idx = (l / p_h) * grid_w + (n / p_w);
                    let q = (l % p_h) * p_w + (n % p_w);
                    let src = adapted.row(i * spatial + l * n_p + n);
                    let dst = patch_tokens.row_mut(i * patches + p_idx);
                    dst[q * d_shared..(q + 1) * d_shared].copy_from_slice(src);
                }
            }
        }

        // Patch embedding + global PE (+ optional cls token).
        let mut emb_patches = patch_tokens.matmul(&self.w_embed.value);
        add_row_bias(&mut emb_patches, &self.b_embed.value);
        for row in 0..b * patches {
            let p_idx = row % patches;
            let pe = self.pe_global.value.row(p_idx);
            let r = emb_patches.row_mut(row);
            for j in 0..e {
                r[j] += pe[j];
            }
        }
        let mut x = if let Some(cls) = &self.cls {
            let mut with_cls = Mat::zeros(b * seq, e);
            for i in 0..b {
                with_cls.row_mut(i * seq).copy_from_slice(cls.value.row(0));
                for p_idx in 0..patches {
                    with_cls
                        .row_mut(i * seq + 1 + p_idx)
                        .copy_from_slice(emb_patches.row(i * patches + p_idx));
                }
            }
            with_cls
        } else {
            emb_patches
        };

        let embed_mask = apply_dropout(&mut x, cfg.dropout, dropout_rng.as_deref_mut());

        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&x, b, seq, cfg.dropout, dropout_rng.as_deref_mut());
            block_caches.push(cache);
            x = next;
        }

        // Readout.
        let mut readout_mat = Mat::zeros(b, e);
        match cfg.readout {
            Readout::Mean => {
                let inv = R::from_f64(1.0 / seq as f64);
                for i in 0..b {
                    let dst = readout_mat.row_mut(i);
                    for t in 0..seq {
                        let src = x.row(i * seq + t);
                        for j in 0..e {
                            dst[j] += src[j] * inv;
                        }
                    }
                }
            }
            Readout::Cls => {
                for i in 0..b {
                    readout_mat
                        .row_mut(i)
                        .copy_from_slice(x.row(i * seq + cls_offset - 1));
                }
            }
        }

        let mut logits_mat = readout_mat.matmul(&self.w_head.value);
        add_row_bias(&mut logits_mat, &self.b_head.value);
        let logits: Vec<R> = logits_mat.data.clone();
        for (i, z) in logits.iter().enumerate() {
            if !z.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite logit for sample '{}'",
                    batch[i].sample_id
                )));
            }
        }

        Ok((
            logits,
            ForwardCache {
                llm_id,
                batch: b,
                pixels,
                patch_tokens,
                embed_mask,
                block_caches,
                readout_mat,
            },
        ))
    }

    /// Eval-mode logits (dropout off).
    pub fn forward_eval(&self, batch: &[&PooledTensor]) -> Result<Vec<R>> {
        Ok(self.forward(batch, None)?.0)
    }

    /// Accumulate parameter gradients from d(loss)/d(logit). Input gradients
    /// are not produced (inputs are data).
    pub fn backward(&mut self, cache: &ForwardCache<R>, d_logits: &[R]) {
        assert_eq!(d_logits.len(), cache.batch);
        let cfg = self.config.clone();
        let (l_p, n_p) = (cfg.pool.target_layers, cfg.pool.target_tokens);
        let spatial = l_p * n_p;
        let d_shared = cfg.shared_dim;
        let (p_h, p_w) = (cfg.patch.rows, cfg.patch.cols);
        let (_, grid_w) = cfg.patch_grid();
        let patches = cfg.patch_count();
        let e = cfg.embed_dim;
        let seq = self.seq_len();
        let b = cache.batch;
        let cls_offset = usize::from(self.cls.is_some());

        // Head.
        let d_logits_mat = Mat::from_vec(b, 1, d_logits.to_vec());
        self.w_head
            .grad
            .add_assign(&cache.readout_mat.matmul_tn(&d_logits_mat));
        accumulate_colsum(&d_logits_mat, &mut self.b_head.grad);
        let d_readout = d_logits_mat.matmul_nt(&self.w_head.value);

        // Readout -> encoder output.
        let mut d_x = Mat::zeros(b * seq, e);
        match cfg.readout {
            Readout::Mean => {
                let inv = R::from_f64(1.0 / seq as f64);
                for i in 0..b {
                    let src = d_readout.row(i);
                    for t in 0..seq {
                        let dst = d_x.row_mut(i * seq + t);
                        for j in 0..e {
                            dst[j] = src[j] * inv;
                        }
                    }
                }
            }
            Readout::Cls => {
                for i in 0..b {
                    d_x.row_mut(i * seq + cls_offset - 1)
                        .copy_from_slice(d_readout.row(i));
                }
            }
        }

        for (block, bc) in self.blocks.iter_mut().zip(&cache.block_caches).rev() {
            d_x = block.backward(bc, &d_x);
        }

        if let Some(mask) = &cache.embed_mask {
            for (v, m) in d_x.data.iter_mut().zip(mask) {
                *v *= *m;
            }
        }

        // Split off cls gradient, collapse to patch rows.
        let d_emb_patches = if let Some(cls) = &mut self.cls {
            let mut d_patches = Mat::zeros(b * patches, e);
            for i in 0..b {
                let cls_grad = d_x.row(i * seq);
                for (g, v) in cls.grad.row_mut(0).iter_mut().zip(cls_grad) {
                    *g += *v;
                }
                for p_idx in 0..patches {
                    d_patches
                        .row_mut(i * patches + p_idx)
                        .copy_from_slice(d_x.row(i * seq + 1 + p_idx));
                }
            }
            d_patches
        } else {
            d_x
        };

        // Global PE.
        for row in 0..b * patches {
            let p_idx = row % patches;
            let src = d_emb_patches.row(row);
            let dst = self.pe_global.grad.row_mut(p_idx);
            for j in 0..e {
                dst[j] += src[j];
            }
        }

        // Patch embedding linear.
        self.w_embed
            .grad
            .add_assign(&cache.patch_tokens.matmul_tn(&d_emb_patches));
        accumulate_colsum(&d_emb_patches, &mut self.b_embed.grad);
        let d_patch_tokens = d_emb_patches.matmul_nt(&self.w_embed.value);

        // Un-patchify back to pixel rows.
        let mut d_adapted = Mat::zeros(b * spatial, d_shared);
        for i in 0..b {
            for l in 0..l_p {
                for n in 0..n_p {
                    let p_idx = (l / p_h) * grid_w + (n / p_w);
                    let q = (l % p_h) * p_w + (n % p_w);
                    let src = &d_patch_tokens.row(i * patches + p_idx)
                        [q * d_shared..(q + 1) * d_shared];
                    d_adapted.row_mut(i * spatial + l * n_p + n).copy_from_slice(src);
                }
            }
        }

        // Per-patch PE.
        for row in 0..b * spatial {
            let l = (row % spatial) / n_p;
            let n = row % n_p;
            let q = (l % p_h) * p_w + (n % p_w);
            let src = d_adapted.row(row);
            let dst = self.pe_patch.grad.row_mut(q);
            for j in 0..d_shared {
                dst[j] += src[j];
            }
        }

        // Adapter.
        let (_, adapter) = self
            .adapters
            .adapters
            .get_mut(&cache.llm_id)
            .expect("cache llm registered");
        adapter.grad.add_assign(&cache.pixels.matmul_tn(&d_adapted));
    }
}

impl<R: Real> ParamSource<R> for ActVitModel<R> {
    fn visit_params(&mut self, f: &mut dyn FnMut(String, &mut Param<R>, bool)) {
        let frozen = self.frozen.clone();
        let trainable = |g: &ParamGroup| -> bool { !frozen.contains(g) };
        self.adapters.visit(&mut |name, p, group| {
            f(name, p, trainable(&group));
        });
        f(
            "pe_patch".into(),
            &mut self.pe_patch,
            trainable(&ParamGroup::Positional),
        );
        f(
            "embed.w".into(),
            &mut self.w_embed,
            trainable(&ParamGroup::Backbone),
        );
        f(
            "embed.b".into(),
            &mut self.b_embed,
            trainable(&ParamGroup::Backbone),
        );
        f(
            "pe_global".into(),
            &mut self.pe_global,
            trainable(&ParamGroup::Positional),
        );
        if let Some(cls) = &mut self.cls {
            f("cls".into(), cls, trainable(&ParamGroup::Backbone));
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let t = trainable(&ParamGroup::Backbone);
            block.visit(&format!("block{i}"), &mut |name, p| f(name, p, t));
        }
        f(
            "head.w".into(),
            &mut self.w_head,
            trainable(&ParamGroup::Head),
        );
        f(
            "head.b".into(),
            &mut self.b_head,
            trainable(&ParamGroup::Head),
        );
    }
}

/// Gradient accessor used by tests and the trainer's freeze assertions.
pub fn param_snapshot<R: Real, M: ParamSource<R>>(model: &mut M) -> Vec<(String, Vec<R>)> {
    let mut out = Vec::new();
    model.visit_params(&mut |name, p, _| out.push((name, p.value.data.clone())));
    out
}
