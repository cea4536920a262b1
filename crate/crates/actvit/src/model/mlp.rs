//! Flattened-MLP ablation detector: pooled tensors, zero-padded along the
//! feature axis to the largest hidden dim among registered LLMs, flattened,
//! then two ReLU hidden layers and a scalar head. No adapters, no patches.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::LlmRegistry;
use crate::nn::encoder::{accumulate_colsum, add_row_bias, apply_dropout};
use crate::nn::optim::ParamSource;
use crate::nn::{trunc_normal, Mat, Param, Real};
use crate::rng::stream;
use crate::tensor::{PoolConfig, PoolMode, PooledTensor};

const PAD_THRESHOLD: f32 = -1.0e37;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActMlpConfig {
    pub pool: PoolConfig,
    /// Largest hidden dim across the LLMs this model accepts (D_max).
    pub max_feature_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
}

impl ActMlpConfig {
    pub fn for_registry(pool: PoolConfig, hidden_dim: usize, registry: &LlmRegistry) -> Self {
        ActMlpConfig {
            pool,
            max_feature_dim: registry.max_hidden_dim(),
            hidden_dim,
            dropout: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pool.validate()?;
        if self.pool.mode != PoolMode::TwoD {
            return Err(Error::validation(
                "the flattened MLP needs a fixed spatial grid; use a two_d pool config",
            ));
        }
        if self.max_feature_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::validation("mlp dims must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation("dropout must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.pool.target_layers * self.pool.target_tokens * self.max_feature_dim
    }
}

pub struct MlpCache<R: Real> {
    x: Mat<R>,
    pre1: Mat<R>,
    act1: Mat<R>,
    mask1: Option<Vec<R>>,
    pre2: Mat<R>,
    act2: Mat<R>,
    mask2: Option<Vec<R>>,
}

#[derive(Debug, Clone)]
pub struct ActMlpModel<R: Real> {
    pub config: ActMlpConfig,
    w1: Param<R>,
    b1: Param<R>,
    w2: Param<R>,
    b2: Param<R>,
    w_head: Param<R>,
    b_head: Param<R>,
}

impl<R: Real> ActMlpModel<R> {
    pub fn new(config: ActMlpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed).with_str("actmlp-init").rng();
        let input = config.input_dim();
        let h = config.hidden_dim;
        Ok(ActMlpModel {
            w1: Param::new(trunc_normal(input, h, 0.02, &mut rng)),
            b1: Param::zeros(1, h),
            w2: Param::new(trunc_normal(h, h, 0.02, &mut rng)),
            b2: Param::zeros(1, h),
            w_head: Param::new(trunc_normal(h, 1, 0.02, &mut rng)),
            b_head: Param::zeros(1, 1),
            config,
        })
    }

    fn flatten_batch(&self, batch: &[&PooledTensor]) -> Result<Mat<R>> {
        let cfg = &self.config;
        let (l_p, n_p, d_max) = (
            cfg.pool.target_layers,
            cfg.pool.target_tokens,
            cfg.max_feature_dim,
        );
        let mut out = Mat::zeros(batch.len(), cfg.input_dim());
        for (i, p) in batch.iter().enumerate() {
            let (l, n, d) = p.data.shape();
            if l != l_p || n != n_p {
                return Err(Error::validation(format!(
                    "pooled tensor '{}' has spatial shape ({l}, {n}), expected ({l_p}, {n_p})",
                    p.sample_id
                )));
            }
            if d > d_max {
                return Err(Error::validation(format!(
                    "pooled tensor '{}' has {d} features, more than D_max = {d_max}",
                    p.sample_id
                )));
            }
            let row = out.row_mut(i);
            for li in 0..l_p {
                for ni in 0..n_p {
                    let px = p.data.pixel(li, ni);
                    if px.iter().all(|&v| v <= PAD_THRESHOLD) {
                        continue;
                    }
                    let base = (li * n_p + ni) * d_max;
                    for (c, &v) in px.iter().enumerate() {
                        row[base + c] = R::from_f32(v);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn forward(
        &self,
        batch: &[&PooledTensor],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<R>, MlpCache<R>)> {
        if batch.is_empty() {
            return Err(Error::validation("forward on an empty batch"));
        }
        let x = self.flatten_batch(batch)?;

        let mut pre1 = x.matmul(&self.w1.value);
        add_row_bias(&mut pre1, &self.b1.value);
        let mut act1 = pre1.clone();
        act1.data.iter_mut().for_each(|v| *v = v.maximum(R::ZERO));
        let mask1 = apply_dropout(&mut act1, self.config.dropout, dropout_rng.as_deref_mut());

        let mut pre2 = act1.matmul(&self.w2.value);
        add_row_bias(&mut pre2, &self.b2.value);
        let mut act2 = pre2.clone();
        act2.data.iter_mut().for_each(|v| *v = v.maximum(R::ZERO));
        let mask2 = apply_dropout(&mut act2, self.config.dropout, dropout_rng);

        let mut z = act2.matmul(&self.w_head.value);
        add_row_bias(&mut z, &self.b_head.value);
        let logits = z.data.clone();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite logit in mlp forward"));
        }
        Ok((
            logits,
            MlpCache {
                x,
                pre1,
                act1,
                mask1,
                pre2,
                act2,
                mask2,
            },
        ))
    }

    pub fn forward_eval(&self, batch: &[&PooledTensor]) -> Result<Vec<R>> {
        Ok(self.forward(batch, None)?.0)
    }

    pub fn backward(&mut self, cache: &MlpCache<R>, d_logits: &[R]) {
        let b = d_logits.len();
        let dz = Mat::from_vec(b, 1, d_logits.to_vec());
        self.w_head.grad.add_assign(&cache.act2.matmul_tn(&dz));
        accumulate_colsum(&dz, &mut self.b_head.grad);

        let mut d_act2 = dz.matmul_nt(&self.w_head.value);
        if let Some(m) = &cache.mask2 {
            for (v, mk) in d_act2.data.iter_mut().zip(m) {
                *v *= *mk;
            }
        }
        for (v, &p) in d_act2.data.iter_mut().zip(&cache.pre2.data) {
            if p <= R::ZERO {
                *v = R::ZERO;
            }
        }
        self.w2.grad.add_assign(&cache.act1.matmul_tn(&d_act2));
        accumulate_colsum(&d_act2, &mut self.b2.grad);

        let mut d_act1 = d_act2.matmul_nt(&self.w2.value);
        if let Some(m) = &cache.mask1 {
            for (v, mk) in d_act1.data.iter_mut().zip(m) {
                *v *= *mk;
            }
        }
        for (v, &p) in d_act1.data.iter_mut().zip(&cache.pre1.data) {
            if p <= R::ZERO {
                *v = R::ZERO;
            }
        }
        self.w1.grad.add_assign(&cache.x.matmul_tn(&d_act1));
        accumulate_colsum(&d_act1, &mut self.b1.grad);
    }
}

impl<R: Real> ParamSource<R> for ActMlpModel<R> {
    fn visit_params(&mut self, f: &mut dyn FnMut(String, &mut Param<R>, bool)) {
        f("mlp.w1".into(), &mut self.w1, true);
        f("mlp.b1".into(), &mut self.b1, true);
        f("mlp.w2".into(), &mut self.w2, true);
        f("mlp.b2".into(), &mut self.b2, true);
        f("mlp.head.w".into(), &mut self.w_head, true);
        f("mlp.head.b".into(), &mut self.b_head, true);
    }
}
