//! Three-phase adversarial training of the attachment network, plus the
//! Bayes-by-backprop, outlier-exposure and plain baselines.
//!
//! Per minibatch in `abnn` mode:
//! 1. attachments frozen, `N` Adam steps on ω1 against one-hot CE, each with a
//!    fresh attachment draw;
//! 2. backbone frozen, one Adam step on ω2 minimizing
//!    `kl_scale·KL(q‖N(0,1)) + mean CE(ID)` over `N` draws;
//! 3. backbone frozen, one Adam step on ω2 maximizing
//!    `α·[kl_scale·KL(q‖N(0,1)) + mean CE(OOD, uniform)]`.
//!
//! Phases 1, 2 and 3 each own a separate Adam state.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datasets::DatasetBundle;
use crate::error::{AbnnError, Result};
use crate::layers::{softmax_ce_head, SampledWeights};
use crate::model::{AbnnModel, ModelConfig, Noise, ParamGroup};
use crate::numerics::{cross_entropy, softmax, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// All three phases.
    Abnn,
    /// Phases 1 and 2 only: no OOD data.
    Bbp,
    /// Deterministic network, CE(ID one-hot) + CE(OOD uniform).
    Oe,
    /// Deterministic network, CE(ID) only.
    Plain,
}

impl TrainMode {
    pub fn is_bayesian(self) -> bool {
        matches!(self, TrainMode::Abnn | TrainMode::Bbp)
    }

    pub fn needs_ood(self) -> bool {
        matches!(self, TrainMode::Abnn | TrainMode::Oe)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Abnn => "abnn",
            TrainMode::Bbp => "bbp",
            TrainMode::Oe => "oe",
            TrainMode::Plain => "plain",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub alpha: f64,
    pub n_samples: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the KL term per minibatch; `None` means
    /// `1 / (minibatches per epoch)`.
    pub kl_scale: Option<f64>,
    pub mode: TrainMode,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            n_samples: 5,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            epochs: 3,
            kl_scale: None,
            mode: TrainMode::Abnn,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(AbnnError::Config(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if self.n_samples == 0 {
            return Err(AbnnError::Config("n_samples must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(AbnnError::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(AbnnError::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(AbnnError::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(AbnnError::Config("adam_eps must be positive".into()));
        }
        if let Some(k) = self.kl_scale {
            if !(k > 0.0) {
                return Err(AbnnError::Config("kl_scale must be positive".into()));
            }
        }
        Ok(())
    }

    /// Minibatch KL weight for a training set of `n_train` points.
    pub fn effective_kl_scale(&self, n_train: usize) -> f64 {
        self.kl_scale
            .unwrap_or_else(|| 1.0 / n_train.div_ceil(self.batch_size).max(1) as f64)
    }
}

/// Adam moments for one parameter group.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    /// One update of `group` along `sign · grad` (sign −1 ascends).
    pub fn step(&mut self, model: &mut AbnnModel, group: ParamGroup, sign: f64, cfg: &TrainerConfig) {
        let mut params: Vec<_> = model
            .params_mut()
            .into_iter()
            .filter(|(_, g, _)| *g == group)
            .map(|(_, _, p)| p)
            .collect();
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - cfg.adam_beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.adam_beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let values = p.value.data_mut();
            let grads = p.grad.data();
            for (((w, &g), mi), vi) in values.iter_mut().zip(grads).zip(m.data_mut()).zip(v.data_mut()) {
                let g = sign * g;
                *mi = cfg.adam_beta1 * *mi + (1.0 - cfg.adam_beta1) * g;
                *vi = cfg.adam_beta2 * *vi + (1.0 - cfg.adam_beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// `batch × K` matrix whose rows are all `1/K`.
pub fn pseudo_label(classes: usize, batch: usize) -> Matrix {
    assert!(classes >= 2, "pseudo_label needs K ≥ 2");
    Matrix::filled(batch, classes, 1.0 / classes as f64)
}

pub fn one_hot(labels: &[usize], classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (r, &l) in labels.iter().enumerate() {
        m.set(r, l, 1.0);
    }
    m
}

/// Which parameter group a phase may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Expectation,
    Distribution,
}

impl AbnnModel {
    /// Sets exactly one freeze flag for the given phase.
    pub fn set_phase(&mut self, phase: Phase) {
        self.freeze_distribution = phase == Phase::Expectation;
        self.freeze_expectation = phase == Phase::Distribution;
    }
}

fn require_phase(model: &AbnnModel, phase: Phase) -> Result<()> {
    let ok = match phase {
        Phase::Expectation => model.freeze_distribution && !model.freeze_expectation,
        Phase::Distribution => model.freeze_expectation && !model.freeze_distribution,
    };
    if ok {
        Ok(())
    } else {
        Err(AbnnError::Freeze(match phase {
            Phase::Expectation => "freeze_distribution set (and only it)",
            Phase::Distribution => "freeze_expectation set (and only it)",
        }))
    }
}

/// Value of `weight·[kl_scale·KL + mean_i CE(f_{ω_i}(x), target)]` with its
/// gradient left in every parameter's accumulator. The noise draws are given
/// so that callers (and finite-difference checks) can hold ε fixed.
pub fn variational_objective(
    model: &mut AbnnModel,
    x: &Matrix,
    target: &Matrix,
    noises: &[Vec<SampledWeights>],
    kl_scale: f64,
    weight: f64,
) -> Result<f64> {
    model.zero_grad();
    let kl = model.attachment_kl();
    model.accumulate_kl_grad(weight * kl_scale);
    let n = noises.len() as f64;
    let mut ce_sum = 0.0;
    for noise in noises {
        model.set_noise(noise)?;
        let logits = model.forward_with(x, Noise::Keep)?;
        let (loss, dlogits) = softmax_ce_head(&logits, target)?;
        ce_sum += loss;
        model.backward(&dlogits.scale(weight / n))?;
    }
    Ok(weight * (kl_scale * kl + ce_sum / n))
}

/// CE of one forward pass under fixed noise, gradient left in the
/// accumulators. This is what each inner phase-1 iteration minimizes.
pub fn task_objective(model: &mut AbnnModel, x: &Matrix, target: &Matrix, noise: &[SampledWeights]) -> Result<f64> {
    model.zero_grad();
    model.set_noise(noise)?;
    let logits = model.forward_with(x, Noise::Keep)?;
    let (loss, dlogits) = softmax_ce_head(&logits, target)?;
    model.backward(&dlogits)?;
    Ok(loss)
}

/// Per-phase optimizer states and the active configuration.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainerConfig,
    pub kl_scale: f64,
    adam_expectation: AdamState,
    adam_id: AdamState,
    adam_ood: AdamState,
}

impl Trainer {
    pub fn new(cfg: TrainerConfig, kl_scale: f64) -> Self {
        Self {
            cfg,
            kl_scale,
            adam_expectation: AdamState::default(),
            adam_id: AdamState::default(),
            adam_ood: AdamState::default(),
        }
    }

    /// `N` inner updates of ω1, each under a fresh attachment draw.
    pub fn phase1_step(&mut self, model: &mut AbnnModel, x: &Matrix, labels: &[usize], rng: &mut Rng) -> Result<f64> {
        require_phase(model, Phase::Expectation)?;
        let target = one_hot(labels, model.classes());
        let inner = if model.config.bayesian { self.cfg.n_samples } else { 1 };
        let mut total = 0.0;
        for _ in 0..inner {
            let noise = model.draw_noise(rng);
            total += task_objective(model, x, &target, &noise)?;
            self.adam_expectation
                .step(model, ParamGroup::Expectation, 1.0, &self.cfg);
        }
        Ok(total / inner as f64)
    }

    /// One descent step of ω2 on the ID variational objective.
    pub fn phase2_step(&mut self, model: &mut AbnnModel, x: &Matrix, labels: &[usize], rng: &mut Rng) -> Result<f64> {
        require_phase(model, Phase::Distribution)?;
        let target = one_hot(labels, model.classes());
        let noises: Vec<_> = (0..self.cfg.n_samples).map(|_| model.draw_noise(rng)).collect();
        let loss = variational_objective(model, x, &target, &noises, self.kl_scale, 1.0)?;
        self.adam_id.step(model, ParamGroup::Distribution, 1.0, &self.cfg);
        model.clamp_sigmas();
        Ok(loss)
    }

    /// One ascent step of ω2 on `α·[kl_scale·KL + mean CE(OOD, uniform)]`.
    pub fn phase3_step(&mut self, model: &mut AbnnModel, x_ood: &Matrix, rng: &mut Rng) -> Result<f64> {
        require_phase(model, Phase::Distribution)?;
        let alpha = self.cfg.alpha;
        let noises: Vec<_> = (0..self.cfg.n_samples).map(|_| model.draw_noise(rng)).collect();
        if alpha == 0.0 {
            return Ok(0.0);
        }
        let target = pseudo_label(model.classes(), x_ood.rows());
        let objective = variational_objective(model, x_ood, &target, &noises, self.kl_scale, alpha)?;
        self.adam_ood.step(model, ParamGroup::Distribution, -1.0, &self.cfg);
        model.clamp_sigmas();
        Ok(objective)
    }

    /// Outlier-exposure update: CE on ID one-hot plus CE on OOD uniform.
    fn oe_step(&mut self, model: &mut AbnnModel, x: &Matrix, labels: &[usize], x_ood: &Matrix) -> Result<f64> {
        require_phase(model, Phase::Expectation)?;
        model.zero_grad();
        let logits = model.forward_with(x, Noise::Mean)?;
        let (l_id, d_id) = softmax_ce_head(&logits, &one_hot(labels, model.classes()))?;
        model.backward(&d_id)?;
        let logits = model.forward_with(x_ood, Noise::Mean)?;
        let (l_ood, d_ood) = softmax_ce_head(&logits, &pseudo_label(model.classes(), x_ood.rows()))?;
        model.backward(&d_ood)?;
        self.adam_expectation
            .step(model, ParamGroup::Expectation, 1.0, &self.cfg);
        Ok(l_id + l_ood)
    }
}

/// Builds the network the given mode trains: Bayesian attachments for
/// `abnn`/`bbp`, inert ones otherwise. Initialization draws from stream 0 of
/// the trainer seed.
pub fn build_model(mut model_cfg: ModelConfig, cfg: &TrainerConfig) -> Result<AbnnModel> {
    model_cfg.bayesian = cfg.mode.is_bayesian();
    AbnnModel::new(model_cfg, &mut Rng::with_stream(cfg.seed, 0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase1_loss: f64,
    pub phase2_loss: Option<f64>,
    pub phase3_loss: Option<f64>,
    pub id_acc: f64,
    pub mean_sigma: f64,
}

pub fn log_to_csv(log: &[EpochLog]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("epoch,phase1_loss,phase2_loss,phase3_loss,id_acc,mean_sigma\n");
    for e in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            e.epoch,
            e.phase1_loss,
            opt(e.phase2_loss),
            opt(e.phase3_loss),
            e.id_acc,
            e.mean_sigma
        );
    }
    out
}

pub fn accuracy(model: &mut AbnnModel, x: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let pred = model.predict_mean(x)?.argmax_rows();
    let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Trains `model` on an already standardized bundle.
pub fn train(model: &mut AbnnModel, bundle: &DatasetBundle, cfg: &TrainerConfig) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if model.config.bayesian != cfg.mode.is_bayesian() {
        return Err(AbnnError::Config(format!(
            "mode {} needs a {} model",
            cfg.mode.as_str(),
            if cfg.mode.is_bayesian() {
                "Bayesian"
            } else {
                "deterministic"
            }
        )));
    }
    let (x_train, y_train) = (&bundle.id_train.features, &bundle.id_train.labels);
    let n = x_train.rows();
    if n == 0 {
        return Err(AbnnError::Config("empty ID training split".into()));
    }
    let ood = &bundle.ood_train;
    if cfg.mode.needs_ood() && ood.rows() == 0 {
        return Err(AbnnError::Config(format!(
            "mode {} requires a non-empty OOD training pool",
            cfg.mode.as_str()
        )));
    }

    let mut trainer = Trainer::new(cfg.clone(), cfg.effective_kl_scale(n));
    let mut rng = Rng::with_stream(cfg.seed, 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut ood_order: Vec<usize> = (0..ood.rows()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        rng.shuffle(&mut ood_order);
        let mut sums = [0.0; 3];
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = x_train.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| y_train[i]).collect();
            let ood_batch = || {
                let idx: Vec<usize> = (0..chunk.len())
                    .map(|k| ood_order[(b * cfg.batch_size + k) % ood_order.len()])
                    .collect();
                ood.select_rows(&idx)
            };
            match cfg.mode {
                TrainMode::Abnn | TrainMode::Bbp => {
                    model.set_phase(Phase::Expectation);
                    sums[0] += trainer.phase1_step(model, &x, &y, &mut rng)?;
                    model.set_phase(Phase::Distribution);
                    sums[1] += trainer.phase2_step(model, &x, &y, &mut rng)?;
                    if cfg.mode == TrainMode::Abnn {
                        sums[2] += trainer.phase3_step(model, &ood_batch(), &mut rng)?;
                    }
                }
                TrainMode::Oe => {
                    model.set_phase(Phase::Expectation);
                    sums[0] += trainer.oe_step(model, &x, &y, &ood_batch())?;
                }
                TrainMode::Plain => {
                    model.set_phase(Phase::Expectation);
                    sums[0] += trainer.phase1_step(model, &x, &y, &mut rng)?;
                }
            }
            batches += 1;
        }
        model.freeze_expectation = false;
        model.freeze_distribution = false;
        let nb = batches as f64;
        log.push(EpochLog {
            epoch: epoch + 1,
            phase1_loss: sums[0] / nb,
            phase2_loss: cfg.mode.is_bayesian().then(|| sums[1] / nb),
            phase3_loss: (cfg.mode == TrainMode::Abnn).then(|| sums[2] / nb),
            id_acc: accuracy(model, x_train, y_train)?,
            mean_sigma: model.mean_sigma(),
        });
    }
    Ok(log)
}

/// The phase-2/phase-3 pair evaluated two ways on shared weight samples:
/// `two_term = L_ID − α·L_OOD` and the merged single-KL form
/// `(1−α)·kl_scale·KL − mean_i[ln p(ID|ω_i) − α·ln p(OOD|ω_i)]`.
pub fn merged_objective(
    model: &mut AbnnModel,
    x_id: &Matrix,
    labels: &[usize],
    x_ood: &Matrix,
    cfg: &TrainerConfig,
    kl_scale: f64,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    let alpha = cfg.alpha;
    let id_target = one_hot(labels, model.classes());
    let ood_target = pseudo_label(model.classes(), x_ood.rows());
    let kl = model.attachment_kl();
    let mut ce_id = Vec::with_capacity(cfg.n_samples);
    let mut ce_ood = Vec::with_capacity(cfg.n_samples);
    for _ in 0..cfg.n_samples {
        let noise = model.draw_noise(rng);
        model.set_noise(&noise)?;
        let p_id = softmax(&model.forward_with(x_id, Noise::Keep)?);
        let p_ood = softmax(&model.forward_with(x_ood, Noise::Keep)?);
        ce_id.push(cross_entropy(&p_id, &id_target)?);
        ce_ood.push(cross_entropy(&p_ood, &ood_target)?);
    }
    let n = cfg.n_samples as f64;
    let l_id = kl_scale * kl + ce_id.iter().sum::<f64>() / n;
    let l_ood = kl_scale * kl + ce_ood.iter().sum::<f64>() / n;
    let two_term = l_id - alpha * l_ood;

    let log_lik_gap: f64 = ce_id
        .iter()
        .zip(&ce_ood)
        .map(|(&a, &b)| (-a) - alpha * (-b))
        .sum::<f64>()
        / n;
    let merged = (1.0 - alpha) * kl_scale * kl - log_lik_gap;
    Ok((two_term, merged))
}
