//! Expectation backbone with attached Gaussian distribution modules.
//!
//! The backbone is `embed → blocks → head`, each block a residual MLP
//! `h ↦ ReLU(h + W₂·ReLU(W₁·h))`. Each block has one attachment, a
//! [`BayesLinear`] of the block input whose output is added to the block
//! output. Attachment means start at zero, so an untrained attachment adds
//! nothing but noise.

use serde::{Deserialize, Serialize};

use crate::datasets::Standardizer;
use crate::error::{shape_err, AbnnError, Result};
use crate::layers::{relu_backward, relu_forward, BayesLinear, DenseLinear, Param, SampledWeights};
use crate::numerics::{gaussian_matrix, softmax, Matrix, Rng};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub classes: usize,
    /// Initial σ of every attachment weight.
    pub init_sigma: f64,
    /// When false the attachments are inert and the model is a plain network.
    pub bayesian: bool,
}

impl ModelConfig {
    pub fn new(input_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            width: 32,
            blocks: 3,
            classes,
            init_sigma: 0.25,
            bayesian: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.width == 0 {
            return Err(AbnnError::Config("input_dim and width must be positive".into()));
        }
        if self.classes < 2 {
            return Err(AbnnError::Config("classes: K ≥ 2 required".into()));
        }
        if !(self.init_sigma > 0.0) || !self.init_sigma.is_finite() {
            return Err(AbnnError::Config("init_sigma must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneBlock {
    pub linear1: DenseLinear,
    pub linear2: DenseLinear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttachmentModule {
    pub bayes: BayesLinear,
}

/// Which half of the parameters a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// ω1: embed, backbone blocks, head.
    Expectation,
    /// ω2: attachment means and pre-scales.
    Distribution,
}

/// How attachments pick their noise for a forward pass.
pub enum Noise<'a> {
    /// Fresh ε from the generator.
    Sample(&'a mut Rng),
    /// ε ≡ 0, the mean network.
    Mean,
    /// Reuse whatever ε is currently cached.
    Keep,
}

#[derive(Clone, Debug)]
struct BlockCache {
    input: Matrix,
    pre1: Matrix,
    act1: Matrix,
    pre_out: Matrix,
}

#[derive(Clone, Debug)]
struct ForwardCache {
    x: Matrix,
    blocks: Vec<BlockCache>,
    last_hidden: Matrix,
}

#[derive(Clone, Debug)]
pub struct AbnnModel {
    pub config: ModelConfig,
    pub embed: DenseLinear,
    pub blocks: Vec<BackboneBlock>,
    pub attachments: Vec<AttachmentModule>,
    pub head: DenseLinear,
    pub freeze_expectation: bool,
    pub freeze_distribution: bool,
    cache: Option<ForwardCache>,
}

impl PartialEq for AbnnModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.embed == other.embed
            && self.blocks == other.blocks
            && self.attachments == other.attachments
            && self.head == other.head
    }
}

impl AbnnModel {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let embed = DenseLinear::random(config.input_dim, w, rng);
        let blocks = (0..config.blocks)
            .map(|_| BackboneBlock {
                linear1: DenseLinear::random(w, w, rng),
                linear2: DenseLinear::random(w, w, rng),
            })
            .collect();
        let attachments = (0..config.blocks)
            .map(|_| AttachmentModule {
                bayes: BayesLinear::new(w, w, config.init_sigma),
            })
            .collect();
        let head = DenseLinear::random(w, config.classes, rng);
        Ok(Self {
            config,
            embed,
            blocks,
            attachments,
            head,
            freeze_expectation: false,
            freeze_distribution: false,
            cache: None,
        })
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Draws a full set of attachment noise without touching the model.
    pub fn draw_noise(&self, rng: &mut Rng) -> Vec<SampledWeights> {
        self.attachments
            .iter()
            .map(|a| SampledWeights {
                eps_w: gaussian_matrix(rng, a.bayes.inputs(), a.bayes.outputs()),
                eps_b: gaussian_matrix(rng, 1, a.bayes.outputs()),
            })
            .collect()
    }

    pub fn set_noise(&mut self, noise: &[SampledWeights]) -> Result<()> {
        if noise.len() != self.attachments.len() {
            return Err(shape_err("set_noise", self.attachments.len(), noise.len()));
        }
        for (a, n) in self.attachments.iter_mut().zip(noise) {
            a.bayes.set_sample(n.clone())?;
        }
        Ok(())
    }

    /// Logits for `x`. `stochastic` draws fresh attachment noise; otherwise
    /// the mean network (ε ≡ 0) is used.
    pub fn forward(&mut self, x: &Matrix, rng: &mut Rng, stochastic: bool) -> Result<Matrix> {
        if stochastic {
            self.forward_with(x, Noise::Sample(rng))
        } else {
            self.forward_with(x, Noise::Mean)
        }
    }

    pub fn forward_with(&mut self, x: &Matrix, noise: Noise<'_>) -> Result<Matrix> {
        if x.cols() != self.config.input_dim {
            return Err(shape_err("AbnnModel::forward", self.config.input_dim, x.cols()));
        }
        let bayesian = self.config.bayesian;
        if bayesian {
            match noise {
                Noise::Sample(rng) => {
                    for a in &mut self.attachments {
                        a.bayes.sample(rng);
                    }
                }
                Noise::Mean => {
                    for a in &mut self.attachments {
                        a.bayes.sample_mean();
                    }
                }
                Noise::Keep => {}
            }
        }
        let mut h = self.embed.forward(x)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (block, att) in self.blocks.iter().zip(&self.attachments) {
            let pre1 = block.linear1.forward(&h)?;
            let act1 = relu_forward(&pre1);
            let pre_out = h.add(&block.linear2.forward(&act1)?)?;
            let mut out = relu_forward(&pre_out);
            if bayesian {
                out.add_assign(&att.bayes.forward(&h)?)?;
            }
            caches.push(BlockCache {
                input: h,
                pre1,
                act1,
                pre_out,
            });
            h = out;
        }
        let logits = self.head.forward(&h)?;
        self.cache = Some(ForwardCache {
            x: x.clone(),
            blocks: caches,
            last_hidden: h,
        });
        Ok(logits)
    }

    /// Backbone-only logits: attachments skipped entirely.
    pub fn backbone_forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = self.embed.forward(x)?;
        for block in &self.blocks {
            let act1 = relu_forward(&block.linear1.forward(&h)?);
            h = relu_forward(&h.add(&block.linear2.forward(&act1)?)?);
        }
        self.head.forward(&h)
    }

    /// Accumulates gradients of every parameter from `∂L/∂logits` using the
    /// most recent forward pass.
    pub fn backward(&mut self, dlogits: &Matrix) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| AbnnError::Domain("backward before forward".into()))?;
        let bayesian = self.config.bayesian;
        let mut g = self.head.backward(&cache.last_hidden, dlogits)?;
        for i in (0..self.blocks.len()).rev() {
            let c = &cache.blocks[i];
            let block = &mut self.blocks[i];
            let g_pre_out = relu_backward(&c.pre_out, &g)?;
            let g_act1 = block.linear2.backward(&c.act1, &g_pre_out)?;
            let g_pre1 = relu_backward(&c.pre1, &g_act1)?;
            let mut g_in = block.linear1.backward(&c.input, &g_pre1)?;
            g_in.add_assign(&g_pre_out)?;
            if bayesian {
                g_in.add_assign(&self.attachments[i].bayes.backward(&c.input, &g)?)?;
            }
            g = g_in;
        }
        self.embed.backward(&cache.x, &g)?;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.2.zero_grad();
        }
    }

    /// Every parameter in canonical order: embed, blocks, attachments, head.
    pub fn params(&self) -> Vec<(String, ParamGroup, &Param)> {
        use ParamGroup::*;
        let mut out = vec![
            ("embed.w".to_string(), Expectation, &self.embed.w),
            ("embed.b".to_string(), Expectation, &self.embed.b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.linear1.w"), Expectation, &b.linear1.w));
            out.push((format!("blocks.{i}.linear1.b"), Expectation, &b.linear1.b));
            out.push((format!("blocks.{i}.linear2.w"), Expectation, &b.linear2.w));
            out.push((format!("blocks.{i}.linear2.b"), Expectation, &b.linear2.b));
        }
        for (i, a) in self.attachments.iter().enumerate() {
            out.push((format!("attachments.{i}.mu_W"), Distribution, &a.bayes.mu_w));
            out.push((format!("attachments.{i}.rho_W"), Distribution, &a.bayes.rho_w));
            out.push((format!("attachments.{i}.mu_b"), Distribution, &a.bayes.mu_b));
            out.push((format!("attachments.{i}.rho_b"), Distribution, &a.bayes.rho_b));
        }
        out.push(("head.w".to_string(), Expectation, &self.head.w));
        out.push(("head.b".to_string(), Expectation, &self.head.b));
        out
    }

    /// Mutable view in the same canonical order as [`AbnnModel::params`].
    pub fn params_mut(&mut self) -> Vec<(String, ParamGroup, &mut Param)> {
        use ParamGroup::*;
        let mut out = vec![
            ("embed.w".to_string(), Expectation, &mut self.embed.w),
            ("embed.b".to_string(), Expectation, &mut self.embed.b),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.linear1.w"), Expectation, &mut b.linear1.w));
            out.push((format!("blocks.{i}.linear1.b"), Expectation, &mut b.linear1.b));
            out.push((format!("blocks.{i}.linear2.w"), Expectation, &mut b.linear2.w));
            out.push((format!("blocks.{i}.linear2.b"), Expectation, &mut b.linear2.b));
        }
        for (i, a) in self.attachments.iter_mut().enumerate() {
            let bayes = &mut a.bayes;
            out.push((format!("attachments.{i}.mu_W"), Distribution, &mut bayes.mu_w));
            out.push((format!("attachments.{i}.rho_W"), Distribution, &mut bayes.rho_w));
            out.push((format!("attachments.{i}.mu_b"), Distribution, &mut bayes.mu_b));
            out.push((format!("attachments.{i}.rho_b"), Distribution, &mut bayes.rho_b));
        }
        out.push(("head.w".to_string(), Expectation, &mut self.head.w));
        out.push(("head.b".to_string(), Expectation, &mut self.head.b));
        out
    }

    /// Names of (ω1, ω2).
    pub fn partition_params(&self) -> (Vec<String>, Vec<String>) {
        let mut omega1 = Vec::new();
        let mut omega2 = Vec::new();
        for (name, group, _) in self.params() {
            match group {
                ParamGroup::Expectation => omega1.push(name),
                ParamGroup::Distribution => omega2.push(name),
            }
        }
        (omega1, omega2)
    }

    /// Flattened copy of one parameter group, for bitwise freeze checks.
    pub fn snapshot(&self, group: ParamGroup) -> Vec<f64> {
        self.params()
            .into_iter()
            .filter(|(_, g, _)| *g == group)
            .flat_map(|(_, _, p)| p.value.data().to_vec())
            .collect()
    }

    pub fn attachment_kl(&self) -> f64 {
        self.attachments.iter().map(|a| a.bayes.kl()).sum()
    }

    pub fn accumulate_kl_grad(&mut self, scale: f64) {
        for a in &mut self.attachments {
            a.bayes.accumulate_kl_grad(scale);
        }
    }

    pub fn clamp_sigmas(&mut self) {
        for a in &mut self.attachments {
            a.bayes.clamp_rho();
        }
    }

    pub fn mean_sigma(&self) -> f64 {
        let (sum, n) = self
            .attachments
            .iter()
            .flat_map(|a| a.bayes.sigmas())
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Multiplies every attachment σ by `factor` (within the clamp).
    pub fn scale_sigmas(&mut self, factor: f64) {
        use crate::layers::{SIGMA_MAX, SIGMA_MIN};
        use crate::numerics::{softplus, softplus_inv};
        for a in &mut self.attachments {
            for rho in [&mut a.bayes.rho_w, &mut a.bayes.rho_b] {
                for r in rho.value.data_mut() {
                    *r = softplus_inv((softplus(*r) * factor).clamp(SIGMA_MIN, SIGMA_MAX));
                }
            }
        }
    }

    /// Mean of the softmax over `n_samples` stochastic forward passes. Sample
    /// `s` uses the substream `rng.derive(s)`, so results do not depend on
    /// how many draws other samples consumed.
    pub fn predict_mc(&mut self, x: &Matrix, n_samples: usize, rng: &Rng) -> Result<Matrix> {
        if n_samples == 0 {
            return Err(AbnnError::Config("n_samples must be ≥ 1".into()));
        }
        let mut acc = Matrix::zeros(x.rows(), self.config.classes);
        for s in 0..n_samples {
            let mut sub = rng.derive(s as u64);
            let logits = self.forward_with(x, Noise::Sample(&mut sub))?;
            acc.add_assign(&softmax(&logits))?;
        }
        self.cache = None;
        Ok(acc.scale(1.0 / n_samples as f64))
    }

    /// Softmax of the mean network.
    pub fn predict_mean(&mut self, x: &Matrix) -> Result<Matrix> {
        let logits = self.forward_with(x, Noise::Mean)?;
        self.cache = None;
        Ok(softmax(&logits))
    }

    pub fn to_checkpoint(&self, standardizer: Option<&Standardizer>) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: CheckpointConfig {
                model: self.config.clone(),
                standardizer: standardizer.cloned(),
            },
            params: self
                .params()
                .into_iter()
                .map(|(name, _, p)| ParamRecord {
                    name,
                    shape: [p.value.rows(), p.value.cols()],
                    data: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(AbnnError::Checkpoint(format!("unsupported version {}", ckpt.version)));
        }
        let mut model = AbnnModel::new(ckpt.config.model.clone(), &mut Rng::new(0))?;
        let mut slots = model.params_mut();
        if slots.len() != ckpt.params.len() {
            return Err(AbnnError::Checkpoint(format!(
                "expected {} parameters, found {}",
                slots.len(),
                ckpt.params.len()
            )));
        }
        for ((name, _, slot), rec) in slots.iter_mut().zip(&ckpt.params) {
            if *name != rec.name || [slot.value.rows(), slot.value.cols()] != rec.shape {
                return Err(AbnnError::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    rec.name,
                    rec.shape,
                    name,
                    slot.value.shape()
                )));
            }
            **slot = Param::new(Matrix::from_vec(rec.shape[0], rec.shape[1], rec.data.clone())?);
        }
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub standardizer: Option<Standardizer>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// On-disk model: `{"version":1,"config":{..},"params":[..]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: CheckpointConfig,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
