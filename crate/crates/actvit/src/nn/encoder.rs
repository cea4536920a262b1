//! Pre-norm transformer encoder blocks with explicit forward caches and
//! hand-derived backward passes.
//!
//! Inputs are (batch * tokens, embed) matrices; attention is bidirectional
//! within each batch element. Every op touches rows independently or loops
//! batch elements in order, so batched and per-element forwards are
//! bit-identical.

use rand_chacha::ChaCha8Rng;

use super::{
    dropout_mask, gelu, gelu_grad, softmax_backward_rows, softmax_rows, trunc_normal, Mat, Param,
    Real,
};

pub const INIT_STD: f64 = 0.02;

pub(crate) fn add_row_bias<R: Real>(x: &mut Mat<R>, bias: &Mat<R>) {
    debug_assert_eq!(bias.rows, 1);
    debug_assert_eq!(bias.cols, x.cols);
    for i in 0..x.rows {
        let row = x.row_mut(i);
        for (v, b) in row.iter_mut().zip(&bias.data) {
            *v += *b;
        }
    }
}

pub(crate) fn accumulate_colsum<R: Real>(d: &Mat<R>, into: &mut Mat<R>) {
    debug_assert_eq!(into.rows, 1);
    debug_assert_eq!(into.cols, d.cols);
    for i in 0..d.rows {
        let row = d.row(i);
        for (acc, v) in into.data.iter_mut().zip(row) {
            *acc += *v;
        }
    }
}

/// Applies inverted dropout in place when a generator is supplied, returning
/// the mask needed for backward. `None` generator means eval mode.
pub(crate) fn apply_dropout<R: Real>(
    x: &mut Mat<R>,
    p: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Option<Vec<R>> {
    match rng {
        Some(rng) if p > 0.0 => {
            let mask = dropout_mask::<R>(x.data.len(), p, rng);
            for (v, m) in x.data.iter_mut().zip(&mask) {
                *v *= *m;
            }
            Some(mask)
        }
        _ => None,
    }
}

fn mul_mask<R: Real>(d: &Mat<R>, mask: &Option<Vec<R>>) -> Mat<R> {
    match mask {
        None => d.clone(),
        Some(m) => {
            let mut out = d.clone();
            for (v, mk) in out.data.iter_mut().zip(m) {
                *v *= *mk;
            }
            out
        }
    }
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerNorm<R: Real> {
    pub gamma: Param<R>,
    pub beta: Param<R>,
    eps: R,
}

pub struct LnCache<R: Real> {
    normed: Mat<R>,
    inv_std: Vec<R>,
}

impl<R: Real> LayerNorm<R> {
    pub fn new(dim: usize) -> Self {
        let mut gamma = Mat::zeros(1, dim);
        gamma.fill(R::ONE);
        LayerNorm {
            gamma: Param::new(gamma),
            beta: Param::zeros(1, dim),
            eps: R::from_f64(1e-5),
        }
    }

    pub fn forward(&self, x: &Mat<R>) -> (Mat<R>, LnCache<R>) {
        let dim = x.cols;
        let dim_r = R::from_f64(dim as f64);
        let mut out = Mat::zeros(x.rows, x.cols);
        let mut normed = Mat::zeros(x.rows, x.cols);
        let mut inv_std = Vec::with_capacity(x.rows);
        for i in 0..x.rows {
            let row = x.row(i);
            let mut mean = R::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean / dim_r;
            let mut var = R::ZERO;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var = var / dim_r;
            let istd = R::ONE / (var + self.eps).sqrt();
            inv_std.push(istd);
            for j in 0..dim {
                let xh = (row[j] - mean) * istd;
                normed.set(i, j, xh);
                out.set(i, j, xh * self.gamma.value.data[j] + self.beta.value.data[j]);
            }
        }
        (out, LnCache { normed, inv_std })
    }

    pub fn backward(&mut self, cache: &LnCache<R>, dy: &Mat<R>) -> Mat<R> {
        let dim = dy.cols;
        let dim_r = R::from_f64(dim as f64);
        let mut dx = Mat::zeros(dy.rows, dy.cols);
        for i in 0..dy.rows {
            let dyr = dy.row(i);
            let xh = cache.normed.row(i);
            let istd = cache.inv_std[i];
            let mut mean_g = R::ZERO;
            let mut mean_gx = R::ZERO;
            for j in 0..dim {
                let g = dyr[j] * self.gamma.value.data[j];
                mean_g += g;
                mean_gx += g * xh[j];
            }
            mean_g = mean_g / dim_r;
            mean_gx = mean_gx / dim_r;
            let dxr = dx.row_mut(i);
            for j in 0..dim {
                let g = dyr[j] * self.gamma.value.data[j];
                dxr[j] = istd * (g - mean_g - xh[j] * mean_gx);
                self.gamma.grad.data[j] += dyr[j] * xh[j];
                self.beta.grad.data[j] += dyr[j];
            }
        }
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<R>)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MultiHeadAttention<R: Real> {
    pub wq: Param<R>,
    pub bq: Param<R>,
    pub wk: Param<R>,
    pub bk: Param<R>,
    pub wv: Param<R>,
    pub bv: Param<R>,
    pub wo: Param<R>,
    pub bo: Param<R>,
    heads: usize,
}

pub struct MhaCache<R: Real> {
    x: Mat<R>,
    q_heads: Vec<R>,
    k_heads: Vec<R>,
    v_heads: Vec<R>,
    probs: Vec<R>,
    ctx: Mat<R>,
    batch: usize,
    tokens: usize,
}

/// (batch*tokens, embed) -> per-(batch, head) contiguous (tokens, head_dim)
/// blocks, laid out as batch-major then head-major.
fn pack_heads<R: Real>(x: &Mat<R>, batch: usize, tokens: usize, heads: usize) -> Vec<R> {
    let embed = x.cols;
    let dh = embed / heads;
    let mut out = vec![R::ZERO; batch * heads * tokens * dh];
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..tokens {
                let src = &x.row(b * tokens + t)[h * dh..(h + 1) * dh];
                let base = ((b * heads + h) * tokens + t) * dh;
                out[base..base + dh].copy_from_slice(src);
            }
        }
    }
    out
}

fn unpack_heads<R: Real>(
    packed: &[R],
    batch: usize,
    tokens: usize,
    heads: usize,
    dh: usize,
) -> Mat<R> {
    let mut out = Mat::zeros(batch * tokens, heads * dh);
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..tokens {
                let base = ((b * heads + h) * tokens + t) * dh;
                out.row_mut(b * tokens + t)[h * dh..(h + 1) * dh]
                    .copy_from_slice(&packed[base..base + dh]);
            }
        }
    }
    out
}

impl<R: Real> MultiHeadAttention<R> {
    pub fn new(embed: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(
            embed.is_multiple_of(heads),
            "embed dim {embed} must be divisible by heads {heads}"
        );
        let w = |rng: &mut ChaCha8Rng| Param::new(trunc_normal(embed, embed, INIT_STD, rng));
        MultiHeadAttention {
            wq: w(rng),
            bq: Param::zeros(1, embed),
            wk: w(rng),
            bk: Param::zeros(1, embed),
            wv: w(rng),
            bv: Param::zeros(1, embed),
            wo: w(rng),
            bo: Param::zeros(1, embed),
            heads,
        }
    }

    pub fn forward(&self, x: &Mat<R>, batch: usize, tokens: usize) -> (Mat<R>, MhaCache<R>) {
        let embed = x.cols;
        let heads = self.heads;
        let dh = embed / heads;
        let scale = R::from_f64(1.0 / (dh as f64).sqrt());

        let mut q = x.matmul(&self.wq.value);
        add_row_bias(&mut q, &self.bq.value);
        let mut k = x.matmul(&self.wk.value);
        add_row_bias(&mut k, &self.bk.value);
        let mut v = x.matmul(&self.wv.value);
        add_row_bias(&mut v, &self.bv.value);

        let q_heads = pack_heads(&q, batch, tokens, heads);
        let k_heads = pack_heads(&k, batch, tokens, heads);
        let v_heads = pack_heads(&v, batch, tokens, heads);

        let block = tokens * dh;
        let mut probs = vec![R::ZERO; batch * heads * tokens * tokens];
        let mut ctx_heads = vec![R::ZERO; batch * heads * block];
        for bh in 0..batch * heads {
            let qb = &q_heads[bh * block..(bh + 1) * block];
            let kb = &k_heads[bh * block..(bh + 1) * block];
            let vb = &v_heads[bh * block..(bh + 1) * block];
            let pb = &mut probs[bh * tokens * tokens..(bh + 1) * tokens * tokens];
            super::matmul_nt(qb, tokens, dh, kb, tokens, pb);
            for s in pb.iter_mut() {
                *s *= scale;
            }
            softmax_rows(pb, tokens, tokens);
            let cb = &mut ctx_heads[bh * block..(bh + 1) * block];
            super::matmul_nn(pb, tokens, tokens, vb, dh, cb);
        }

        let ctx = unpack_heads(&ctx_heads, batch, tokens, heads, dh);
        let mut out = ctx.matmul(&self.wo.value);
        add_row_bias(&mut out, &self.bo.value);

        (
            out,
            MhaCache {
                x: x.clone(),
                q_heads,
                k_heads,
                v_heads,
                probs,
                ctx,
                batch,
                tokens,
            },
        )
    }

    pub fn backward(&mut self, cache: &MhaCache<R>, d_out: &Mat<R>) -> Mat<R> {
        let embed = d_out.cols;
        let heads = self.heads;
        let dh = embed / heads;
        let (batch, tokens) = (cache.batch, cache.tokens);
        let scale = R::from_f64(1.0 / (dh as f64).sqrt());
        let block = tokens * dh;

        // Output projection.
        self.wo.grad.add_assign(&cache.ctx.matmul_tn(d_out));
        accumulate_colsum(d_out, &mut self.bo.grad);
        let d_ctx = d_out.matmul_nt(&self.wo.value);

        let d_ctx_heads = pack_heads(&d_ctx, batch, tokens, heads);
        let mut dq_heads = vec![R::ZERO; batch * heads * block];
        let mut dk_heads = vec![R::ZERO; batch * heads * block];
        let mut dv_heads = vec![R::ZERO; batch * heads * block];

        let mut d_probs = vec![R::ZERO; tokens * tokens];
        let mut d_scores = vec![R::ZERO; tokens * tokens];
        for bh in 0..batch * heads {
            let dcb = &d_ctx_heads[bh * block..(bh + 1) * block];
            let pb = &cache.probs[bh * tokens * tokens..(bh + 1) * tokens * tokens];
            let qb = &cache.q_heads[bh * block..(bh + 1) * block];
            let kb = &cache.k_heads[bh * block..(bh + 1) * block];
            let vb = &cache.v_heads[bh * block..(bh + 1) * block];

            d_probs.iter_mut().for_each(|v| *v = R::ZERO);
            super::matmul_nt(dcb, tokens, dh, vb, tokens, &mut d_probs);
            super::matmul_tn(
                pb,
                tokens,
                tokens,
                dcb,
                dh,
                &mut dv_heads[bh * block..(bh + 1) * block],
            );

            softmax_backward_rows(pb, &d_probs, tokens, tokens, &mut d_scores);
            for v in d_scores.iter_mut() {
                *v *= scale;
            }
            super::matmul_nn(
                &d_scores,
                tokens,
                tokens,
                kb,
                dh,
                &mut dq_heads[bh * block..(bh + 1) * block],
            );
            super::matmul_tn(
                &d_scores,
                tokens,
                tokens,
                qb,
                dh,
                &mut dk_heads[bh * block..(bh + 1) * block],
            );
        }

        let dq = unpack_heads(&dq_heads, batch, tokens, heads, dh);
        let dk = unpack_heads(&dk_heads, batch, tokens, heads, dh);
        let dv = unpack_heads(&dv_heads, batch, tokens, heads, dh);

        self.wq.grad.add_assign(&cache.x.matmul_tn(&dq));
        accumulate_colsum(&dq, &mut self.bq.grad);
        self.wk.grad.add_assign(&cache.x.matmul_tn(&dk));
        accumulate_colsum(&dk, &mut self.bk.grad);
        self.wv.grad.add_assign(&cache.x.matmul_tn(&dv));
        accumulate_colsum(&dv, &mut self.bv.grad);

        let mut dx = dq.matmul_nt(&self.wq.value);
        dx.add_assign(&dk.matmul_nt(&self.wk.value));
        dx.add_assign(&dv.matmul_nt(&self.wv.value));
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<R>)) {
        f(format!("{prefix}.wq"), &mut self.wq);
        f(format!("{prefix}.bq"), &mut self.bq);
        f(format!("{prefix}.wk"), &mut self.wk);
        f(format!("{prefix}.bk"), &mut self.bk);
        f(format!("{prefix}.wv"), &mut self.wv);
        f(format!("{prefix}.bv"), &mut self.bv);
        f(format!("{prefix}.wo"), &mut self.wo);
        f(format!("{prefix}.bo"), &mut self.bo);
    }
}

// ---------------------------------------------------------------------------
// Feed-forward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FeedForward<R: Real> {
    pub w1: Param<R>,
    pub b1: Param<R>,
    pub w2: Param<R>,
    pub b2: Param<R>,
}

pub struct FfCache<R: Real> {
    x: Mat<R>,
    pre_act: Mat<R>,
    act: Mat<R>,
}

impl<R: Real> FeedForward<R> {
    pub fn new(embed: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            w1: Param::new(trunc_normal(embed, hidden, INIT_STD, rng)),
            b1: Param::zeros(1, hidden),
            w2: Param::new(trunc_normal(hidden, embed, INIT_STD, rng)),
            b2: Param::zeros(1, embed),
        }
    }

    pub fn forward(&self, x: &Mat<R>) -> (Mat<R>, FfCache<R>) {
        let mut pre = x.matmul(&self.w1.value);
        add_row_bias(&mut pre, &self.b1.value);
        let mut act = pre.clone();
        act.data.iter_mut().for_each(|v| *v = gelu(*v));
        let mut out = act.matmul(&self.w2.value);
        add_row_bias(&mut out, &self.b2.value);
        (
            out,
            FfCache {
                x: x.clone(),
                pre_act: pre,
                act,
            },
        )
    }

    pub fn backward(&mut self, cache: &FfCache<R>, dy: &Mat<R>) -> Mat<R> {
        self.w2.grad.add_assign(&cache.act.matmul_tn(dy));
        accumulate_colsum(dy, &mut self.b2.grad);
        let mut d_act = dy.matmul_nt(&self.w2.value);
        for (d, &p) in d_act.data.iter_mut().zip(&cache.pre_act.data) {
            *d *= gelu_grad(p);
        }
        self.w1.grad.add_assign(&cache.x.matmul_tn(&d_act));
        accumulate_colsum(&d_act, &mut self.b1.grad);
        d_act.matmul_nt(&self.w1.value)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<R>)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
    }
}

// ---------------------------------------------------------------------------
// Encoder block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EncoderBlock<R: Real> {
    pub ln1: LayerNorm<R>,
    pub attn: MultiHeadAttention<R>,
    pub ln2: LayerNorm<R>,
    pub ff: FeedForward<R>,
}

pub struct BlockCache<R: Real> {
    ln1: LnCache<R>,
    attn: MhaCache<R>,
    mask_attn: Option<Vec<R>>,
    ln2: LnCache<R>,
    ff: FfCache<R>,
    mask_ff: Option<Vec<R>>,
}

impl<R: Real> EncoderBlock<R> {
    pub fn new(embed: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        EncoderBlock {
            ln1: LayerNorm::new(embed),
            attn: MultiHeadAttention::new(embed, heads, rng),
            ln2: LayerNorm::new(embed),
            ff: FeedForward::new(embed, 4 * embed, rng),
        }
    }

    pub fn forward(
        &self,
        x: &Mat<R>,
        batch: usize,
        tokens: usize,
        dropout: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Mat<R>, BlockCache<R>) {
        let (ln1_out, ln1_cache) = self.ln1.forward(x);
        let (mut attn_out, attn_cache) = self.attn.forward(&ln1_out, batch, tokens);
        let mask_attn = apply_dropout(&mut attn_out, dropout, rng.as_deref_mut());
        let mut x1 = x.clone();
        x1.add_assign(&attn_out);

        let (ln2_out, ln2_cache) = self.ln2.forward(&x1);
        let (mut ff_out, ff_cache) = self.ff.forward(&ln2_out);
        let mask_ff = apply_dropout(&mut ff_out, dropout, rng);
        let mut out = x1;
        out.add_assign(&ff_out);

        (
            out,
            BlockCache {
                ln1: ln1_cache,
                attn: attn_cache,
                mask_attn,
                ln2: ln2_cache,
                ff: ff_cache,
                mask_ff,
            },
        )
    }

    pub fn backward(&mut self, cache: &BlockCache<R>, dy: &Mat<R>) -> Mat<R> {
        // out = x1 + dropout(ff(ln2(x1)))
        let d_ff = mul_mask(dy, &cache.mask_ff);
        let d_ln2_out = self.ff.backward(&cache.ff, &d_ff);
        let mut d_x1 = self.ln2.backward(&cache.ln2, &d_ln2_out);
        d_x1.add_assign(dy);

        // x1 = x + dropout(attn(ln1(x)))
        let d_attn = mul_mask(&d_x1, &cache.mask_attn);
        let d_ln1_out = self.attn.backward(&cache.attn, &d_attn);
        let mut dx = self.ln1.backward(&cache.ln1, &d_ln1_out);
        dx.add_assign(&d_x1);
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<R>)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.ff.visit(&format!("{prefix}.ff"), f);
    }
}
