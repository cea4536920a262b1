//! Deterministic toy transformers that emit activation tensors.
//!
//! Each layer computes `X_l = X_{l-1} + ReLU(Attn(X_{l-1}) W1 + b1) W2 + b2`
//! where `Attn` is causal multi-head attention over a pre-normalized input
//! (layer norm without affine parameters, so it is exactly
//! permutation-equivariant in the feature axis). The activation tensor
//! stacks X_1..X_L, i.e. the post-FFN post-residual hidden states.
//!
//! [`ToyTransformer::permute_clone`] builds a second model computing the
//! same token-level function whose activations are the original's with the
//! feature axis permuted; this is the ground-truth alignment oracle used by
//! the adapter-transfer tests.

mod task;

pub use task::{generate_dataset, LabelRule, LabeledDataset, LabeledSample, PlantedTask};

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::llm::{LlmDescriptor, LlmRegistry};
use crate::nn::{matmul_nn, matmul_nt, softmax_rows, Mat};
use crate::rng::{standard_normal, stream};
use crate::tensor::{ActivationTensor, Tensor3};

#[derive(Debug, Clone)]
pub struct ToyTransformerConfig {
    pub llm_id: String,
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
struct ToyLayer {
    wq: Mat<f32>,
    wk: Mat<f32>,
    wv: Mat<f32>,
    w1: Mat<f32>,
    b1: Vec<f32>,
    w2: Mat<f32>,
    b2: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct ToyTransformer {
    pub cfg: ToyTransformerConfig,
    embed: Mat<f32>,
    pos: Mat<f32>,
    layers: Vec<ToyLayer>,
    w_out: Mat<f32>,
}

/// A bijection over feature indices, stored as `sigma` with
/// `clone_activation[l, n, j] == activation[l, n, sigma[j]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationSpec {
    sigma: Vec<usize>,
}

impl PermutationSpec {
    pub fn new(sigma: Vec<usize>) -> Result<Self> {
        let d = sigma.len();
        let mut seen = vec![false; d];
        for &s in &sigma {
            if s >= d || seen[s] {
                return Err(Error::validation("sigma is not a bijection"));
            }
            seen[s] = true;
        }
        Ok(PermutationSpec { sigma })
    }

    pub fn identity(dim: usize) -> Self {
        PermutationSpec {
            sigma: (0..dim).collect(),
        }
    }

    pub fn random(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut sigma: Vec<usize> = (0..dim).collect();
        crate::rng::shuffle(rng, &mut sigma);
        PermutationSpec { sigma }
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    #[inline]
    pub fn apply(&self, j: usize) -> usize {
        self.sigma[j]
    }

    /// Gather a feature vector: out[j] = v[sigma[j]].
    pub fn gather(&self, v: &[f32]) -> Vec<f32> {
        self.sigma.iter().map(|&s| v[s]).collect()
    }
}

fn init_weight(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Mat<f32> {
    Mat::from_fn(rows, cols, |_, _| (standard_normal(rng) * std) as f32)
}

/// Row-wise layer norm without affine parameters.
fn pre_norm(x: &Mat<f32>) -> Mat<f32> {
    let dim = x.cols as f32;
    let mut out = Mat::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean: f32 = row.iter().sum::<f32>() / dim;
        let var: f32 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / dim;
        let inv = 1.0 / (var + 1e-5).sqrt();
        let out_row = out.row_mut(i);
        for j in 0..row.len() {
            out_row[j] = (row[j] - mean) * inv;
        }
    }
    out
}

impl ToyTransformer {
    pub fn new(cfg: ToyTransformerConfig) -> Result<Self> {
        if !cfg.hidden_dim.is_multiple_of(cfg.heads) {
            return Err(Error::validation(format!(
                "hidden dim {} must be divisible by heads {}",
                cfg.hidden_dim, cfg.heads
            )));
        }
        let d = cfg.hidden_dim;
        let mut rng = stream(cfg.seed).with_str("toy-weights").rng();
        let scale = 1.0 / (d as f64).sqrt();
        let embed = init_weight(cfg.vocab_size, d, 1.0, &mut rng);
        let pos = init_weight(cfg.max_len, d, 0.5, &mut rng);
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            layers.push(ToyLayer {
                wq: init_weight(d, d, scale, &mut rng),
                wk: init_weight(d, d, scale, &mut rng),
                wv: init_weight(d, d, scale, &mut rng),
                w1: init_weight(d, d, 1.4 * scale, &mut rng),
                b1: (0..d)
                    .map(|_| (standard_normal(&mut rng) * 0.05) as f32)
                    .collect(),
                w2: init_weight(d, d, 1.4 * scale, &mut rng),
                b2: (0..d)
                    .map(|_| (standard_normal(&mut rng) * 0.02) as f32)
                    .collect(),
            });
        }
        let w_out = init_weight(d, cfg.vocab_size, scale, &mut rng);
        Ok(ToyTransformer {
            cfg,
            embed,
            pos,
            layers,
            w_out,
        })
    }

    pub fn descriptor(&self) -> LlmDescriptor {
        LlmDescriptor {
            llm_id: self.cfg.llm_id.clone(),
            layers: self.cfg.layers,
            hidden_dim: self.cfg.hidden_dim,
        }
    }

    /// Causal multi-head attention over the pre-normalized input.
    fn attention(&self, layer: &ToyLayer, x: &Mat<f32>) -> Mat<f32> {
        let n = x.rows;
        let d = self.cfg.hidden_dim;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();

        let h = pre_norm(x);
        let q = h.matmul(&layer.wq);
        let k = h.matmul(&layer.wk);
        let v = h.matmul(&layer.wv);

        let mut out = Mat::zeros(n, d);
        let mut scores = vec![0.0f32; n];
        for head in 0..heads {
            let lo = head * dh;
            for t in 0..n {
                let q_row = &q.row(t)[lo..lo + dh];
                // Causal: attend to positions 0..=t only.
                for s in 0..=t {
                    let k_row = &k.row(s)[lo..lo + dh];
                    let mut acc = 0.0f32;
                    for j in 0..dh {
                        acc += q_row[j] * k_row[j];
                    }
                    scores[s] = acc * scale;
                }
                softmax_rows(&mut scores[..t + 1], 1, t + 1);
                let out_row = &mut out.row_mut(t)[lo..lo + dh];
                for s in 0..=t {
                    let w = scores[s];
                    let v_row = &v.row(s)[lo..lo + dh];
                    for j in 0..dh {
                        out_row[j] += w * v_row[j];
                    }
                }
            }
        }
        out
    }

    /// Hidden states after FFN + residual at every layer and position.
    pub fn forward_collect(&self, tokens: &[u32]) -> Result<ActivationTensor> {
        let states = self.forward_states(tokens)?;
        let n = tokens.len();
        let d = self.cfg.hidden_dim;
        let mut at = Tensor3::zeros(self.cfg.layers, n, d);
        for (l, x) in states.iter().enumerate() {
            for t in 0..n {
                at.pixel_mut(l, t).copy_from_slice(x.row(t));
            }
        }
        Ok(ActivationTensor {
            data: at,
            llm_id: self.cfg.llm_id.clone(),
            sample_id: String::new(),
            label: None,
        })
    }

    fn forward_states(&self, tokens: &[u32]) -> Result<Vec<Mat<f32>>> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::validation("token sequence must be non-empty"));
        }
        if n > self.cfg.max_len {
            return Err(Error::validation(format!(
                "sequence length {n} exceeds max_len {}",
                self.cfg.max_len
            )));
        }
        let d = self.cfg.hidden_dim;
        let mut x = Mat::zeros(n, d);
        for (t, &tok) in tokens.iter().enumerate() {
            if tok as usize >= self.cfg.vocab_size {
                return Err(Error::validation(format!(
                    "token {tok} out of vocab range {}",
                    self.cfg.vocab_size
                )));
            }
            let row = x.row_mut(t);
            let e = self.embed.row(tok as usize);
            let p = self.pos.row(t);
            for j in 0..d {
                row[j] = e[j] + p[j];
            }
        }

        let mut states = Vec::with_capacity(self.cfg.layers);
        for layer in &self.layers {
            let attn = self.attention(layer, &x);
            // ReLU(attn W1 + b1) W2 + b2, added to the residual stream.
            let mut hidden = attn.matmul(&layer.w1);
            for i in 0..n {
                let row = hidden.row_mut(i);
                for j in 0..d {
                    row[j] = (row[j] + layer.b1[j]).max(0.0);
                }
            }
            let mut update = Mat::zeros(n, d);
            matmul_nn(&hidden.data, n, d, &layer.w2.data, d, &mut update.data);
            for i in 0..n {
                let xr = x.row_mut(i);
                let ur = update.row(i);
                for j in 0..d {
                    xr[j] += ur[j] + layer.b2[j];
                }
            }
            states.push(x.clone());
        }
        Ok(states)
    }

    /// Next-token logits per position, from the final layer.
    pub fn logits(&self, tokens: &[u32]) -> Result<Mat<f32>> {
        let states = self.forward_states(tokens)?;
        let last = states.last().expect("at least one layer");
        let mut out = Mat::zeros(last.rows, self.cfg.vocab_size);
        matmul_nt(
            &last.data,
            last.rows,
            self.cfg.hidden_dim,
            &self.w_out.transpose().data,
            self.cfg.vocab_size,
            &mut out.data,
        );
        Ok(out)
    }

    /// Teacher-forced confidence scores: for each position i >= 1, the logit
    /// and probability the model assigned to the token that actually follows.
    /// These feed the logit/probability aggregation detectors.
    pub fn token_scores(&self, tokens: &[u32]) -> Result<(Vec<f32>, Vec<f32>)> {
        if tokens.len() < 2 {
            return Err(Error::validation("token_scores needs at least two tokens"));
        }
        let logits = self.logits(tokens)?;
        let vocab = self.cfg.vocab_size;
        let mut chosen_logits = Vec::with_capacity(tokens.len() - 1);
        let mut chosen_probas = Vec::with_capacity(tokens.len() - 1);
        for i in 1..tokens.len() {
            let row = logits.row(i - 1);
            let target = tokens[i] as usize;
            let mut probs = row.to_vec();
            softmax_rows(&mut probs, 1, vocab);
            chosen_logits.push(row[target]);
            chosen_probas.push(probs[target]);
        }
        Ok((chosen_logits, chosen_probas))
    }

    /// A functionally identical model whose activations are feature-permuted.
    ///
    /// Per-layer: W2 and b2 are column-gathered (output side), the attention
    /// projections row-gathered (input side); the embedding and positional
    /// tables are column-gathered so layer 0 already sees permuted features,
    /// and the readout is row-gathered so logits are unchanged.
    pub fn permute_clone(&self, perm: &PermutationSpec, clone_id: &str) -> Result<ToyTransformer> {
        let d = self.cfg.hidden_dim;
        if perm.len() != d {
            return Err(Error::validation(format!(
                "permutation length {} != hidden dim {d}",
                perm.len()
            )));
        }
        let gather_cols =
            |m: &Mat<f32>| -> Mat<f32> { Mat::from_fn(m.rows, m.cols, |i, j| m.get(i, perm.apply(j))) };
        let gather_rows =
            |m: &Mat<f32>| -> Mat<f32> { Mat::from_fn(m.rows, m.cols, |i, j| m.get(perm.apply(i), j)) };

        let mut cfg = self.cfg.clone();
        cfg.llm_id = clone_id.to_string();
        Ok(ToyTransformer {
            cfg,
            embed: gather_cols(&self.embed),
            pos: gather_cols(&self.pos),
            layers: self
                .layers
                .iter()
                .map(|l| ToyLayer {
                    wq: gather_rows(&l.wq),
                    wk: gather_rows(&l.wk),
                    wv: gather_rows(&l.wv),
                    w1: l.w1.clone(),
                    b1: l.b1.clone(),
                    w2: gather_cols(&l.w2),
                    b2: perm.gather(&l.b2),
                })
                .collect(),
            w_out: gather_rows(&self.w_out),
        })
    }
}

/// The stock desk-scale model zoo: three toy LLMs with genuinely different
/// shapes, plus the registry describing them.
pub fn toy_zoo() -> (LlmRegistry, Vec<ToyTransformer>) {
    let specs = [
        ("toy-s", 4usize, 16usize, 2usize, 101u64),
        ("toy-m", 6, 32, 4, 202),
        ("toy-l", 8, 48, 4, 303),
    ];
    let mut registry = LlmRegistry::new();
    let mut models = Vec::new();
    for (id, layers, dim, heads, seed) in specs {
        let model = ToyTransformer::new(ToyTransformerConfig {
            llm_id: id.to_string(),
            layers,
            hidden_dim: dim,
            heads,
            vocab_size: 64,
            max_len: 512,
            seed,
        })
        .expect("stock config is valid");
        registry.register(model.descriptor()).expect("unique ids");
        models.push(model);
    }
    (registry, models)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_model() -> ToyTransformer {
        ToyTransformer::new(ToyTransformerConfig {
            llm_id: "toy-test".into(),
            layers: 6,
            hidden_dim: 32,
            heads: 4,
            vocab_size: 64,
            max_len: 512,
            seed: 42,
        })
        .unwrap()
    }

    fn random_tokens(rng: &mut rand_chacha::ChaCha8Rng, len: usize, vocab: u32) -> Vec<u32> {
        (0..len).map(|_| rng.random_range(0..vocab)).collect()
    }

    #[test]
    fn activation_tensor_shape_contract() {
        let m = small_model();
        let at = m.forward_collect(&[1, 2, 3, 4, 5, 6, 7]).unwrap();
        assert_eq!(at.data.shape(), (6, 7, 32));
        assert!(at.data.all_finite());
    }

    #[test]
    fn forward_is_deterministic() {
        let m1 = small_model();
        let m2 = small_model();
        let tokens = [3u32, 9, 0, 63, 17];
        let a = m1.forward_collect(&tokens).unwrap();
        let b = m2.forward_collect(&tokens).unwrap();
        assert_eq!(a.data.as_slice(), b.data.as_slice());
    }

    #[test]
    fn empty_sequence_rejected() {
        let m = small_model();
        assert!(m.forward_collect(&[]).is_err());
    }

    #[test]
    fn long_sequences_stay_finite() {
        let m = small_model();
        let mut rng = stream(5).rng();
        let tokens = random_tokens(&mut rng, 512, 64);
        let at = m.forward_collect(&tokens).unwrap();
        assert!(at.data.all_finite());
    }

    /// With zero FFN weights each layer adds only its output bias, so the
    /// recurrence collapses to X_l = X_0 + sum of b2 (hand evaluation).
    #[test]
    fn zero_ffn_reduces_to_bias_accumulation() {
        let mut m = ToyTransformer::new(ToyTransformerConfig {
            llm_id: "toy-zero".into(),
            layers: 2,
            hidden_dim: 8,
            heads: 2,
            vocab_size: 16,
            max_len: 32,
            seed: 7,
        })
        .unwrap();
        for layer in &mut m.layers {
            layer.w1.fill(0.0);
            layer.w2.fill(0.0);
            layer.b1.iter_mut().for_each(|v| *v = 0.0);
        }
        let b2_0 = m.layers[0].b2.clone();
        let b2_1 = m.layers[1].b2.clone();

        let tokens = [1u32, 5, 9];
        let at = m.forward_collect(&tokens).unwrap();
        for (t, &tok) in tokens.iter().enumerate() {
            for j in 0..8 {
                let x0 = m.embed.get(tok as usize, j) + m.pos.get(t, j);
                let want_l0 = x0 + b2_0[j];
                let want_l1 = want_l0 + b2_1[j];
                assert!((at.data.get(0, t, j) - want_l0).abs() < 1e-6);
                assert!((at.data.get(1, t, j) - want_l1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identity_permutation_clone_is_bitwise_equal() {
        let m = small_model();
        let clone = m
            .permute_clone(&PermutationSpec::identity(32), "toy-test-id")
            .unwrap();
        let tokens = [4u32, 8, 15, 16, 23, 42];
        let a = m.forward_collect(&tokens).unwrap();
        let b = clone.forward_collect(&tokens).unwrap();
        assert_eq!(a.data.as_slice(), b.data.as_slice());
    }

    #[test]
    fn permuted_clone_preserves_function_and_permutes_activations() {
        let m = small_model();
        let mut rng = stream(9).rng();
        let perm = PermutationSpec::random(32, &mut rng);
        let clone = m.permute_clone(&perm, "toy-test-p").unwrap();

        for trial in 0..10 {
            let tokens = random_tokens(&mut rng, 5 + trial, 64);
            let a = m.forward_collect(&tokens).unwrap();
            let b = clone.forward_collect(&tokens).unwrap();
            let (layers, n, d) = a.data.shape();
            for l in 0..layers {
                for t in 0..n {
                    for j in 0..d {
                        let diff = (b.data.get(l, t, j) - a.data.get(l, t, perm.apply(j))).abs();
                        assert!(diff < 1e-5, "l={l} t={t} j={j} diff={diff}");
                    }
                }
            }
            let la = m.logits(&tokens).unwrap();
            let lb = clone.logits(&tokens).unwrap();
            for (x, y) in la.data.iter().zip(&lb.data) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn bad_permutation_rejected() {
        let m = small_model();
        assert!(m
            .permute_clone(&PermutationSpec::identity(16), "x")
            .is_err());
        assert!(PermutationSpec::new(vec![0, 0, 1]).is_err());
    }

    #[test]
    fn token_scores_are_probabilities() {
        let m = small_model();
        let tokens = [1u32, 2, 3, 4];
        let (logits, probas) = m.token_scores(&tokens).unwrap();
        assert_eq!(logits.len(), 3);
        assert_eq!(probas.len(), 3);
        assert!(probas.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!(m.token_scores(&[1]).is_err());
    }

    #[test]
    fn toy_zoo_has_three_distinct_shapes() {
        let (registry, models) = toy_zoo();
        assert_eq!(registry.len(), 3);
        assert_eq!(models.len(), 3);
        let shapes: std::collections::BTreeSet<(usize, usize)> = models
            .iter()
            .map(|m| (m.cfg.layers, m.cfg.hidden_dim))
            .collect();
        assert_eq!(shapes.len(), 3);
    }
}
