//! Numerical checks of the label-variance ordering, the softmax flip
//! probability under Gaussian logit noise, the KL σ-gradient, OOD ascent
//! drift and the merged-objective identity.

use serde::{Deserialize, Serialize};

use crate::error::{AbnnError, Result};
use crate::model::{AbnnModel, ModelConfig, ParamGroup};
use crate::numerics::{gaussian_matrix, kl_gauss_std, softmax, std_normal_cdf, Matrix, Rng};
use crate::training::{merged_objective, Phase, TrainMode, Trainer, TrainerConfig};

/// Per-class density values `f(X, θ_i)` at one point, with the margin `δ`
/// and floor `ε` that classify it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityProfile {
    pub f: Vec<f64>,
    pub delta: f64,
    pub epsilon: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Id,
    Full,
}

impl DensityProfile {
    pub fn new(f: Vec<f64>, delta: f64, epsilon: f64) -> Result<Self> {
        if f.len() < 2 {
            return Err(AbnnError::Domain(format!(
                "profile needs K ≥ 2 classes, got {}",
                f.len()
            )));
        }
        if f.iter().any(|&v| !(v >= 0.0)) {
            return Err(AbnnError::Domain("densities must be non-negative".into()));
        }
        Ok(Self { f, delta, epsilon })
    }

    fn top_two(&self) -> (usize, f64, f64) {
        let mut best = 0;
        for i in 1..self.f.len() {
            if self.f[i] > self.f[best] {
                best = i;
            }
        }
        let runner = self
            .f
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != best)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        (best, self.f[best], runner)
    }

    pub fn argmax(&self) -> usize {
        self.top_two().0
    }

    pub fn is_id(&self) -> bool {
        let (_, max, runner) = self.top_two();
        max > runner + self.delta && max > self.epsilon
    }

    pub fn is_full_ood(&self) -> bool {
        self.f.iter().all(|&v| v <= self.epsilon)
    }

    /// Random profile inside the ID region: the other classes are uniform on
    /// `[0, 1)` and the winner clears the runner-up by `δ` plus a uniform slack.
    pub fn random_id(classes: usize, delta: f64, epsilon: f64, rng: &mut Rng) -> Result<Self> {
        let mut f: Vec<f64> = (0..classes).map(|_| rng.uniform()).collect();
        let winner = rng.below(classes);
        let runner = f
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != winner)
            .map(|(_, &v)| v)
            .fold(0.0, f64::max);
        f[winner] = (runner + delta).max(epsilon) + rng.uniform_open0();
        Self::new(f, delta, epsilon)
    }
}

/// Bernoulli variances `p_i(1 − p_i)` of each one-hot label coordinate.
pub fn label_bernoulli_variance(profile: &DensityProfile, regime: Regime) -> Result<Vec<f64>> {
    let k = profile.f.len();
    match regime {
        Regime::Full => Ok(vec![(1.0 / k as f64) * (1.0 - 1.0 / k as f64); k]),
        Regime::Id => {
            if !profile.is_id() {
                return Err(AbnnError::Domain("profile is not in the ID region".into()));
            }
            let total: f64 = profile.f.iter().sum();
            if total <= 0.0 {
                return Err(AbnnError::Domain("densities sum to zero".into()));
            }
            Ok(profile
                .f
                .iter()
                .map(|&v| {
                    let p = v / total;
                    p * (1.0 - p)
                })
                .collect())
        }
    }
}

/// Outcome of the randomized variance-ordering suite for one `K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceSuite {
    pub classes: usize,
    pub profiles: usize,
    /// Profiles where some class has ID variance ≥ the full-OOD value.
    pub any_class_violations: usize,
    /// Profiles where the argmax class has ID variance ≥ the full-OOD value.
    pub argmax_violations: usize,
    /// Profiles where a non-argmax class has ID variance ≥ the full-OOD value.
    pub other_class_violations: usize,
    /// Profiles with `p_max ≤ (1+δ)/(K+δ)`.
    pub margin_bound_violations: usize,
    /// Profiles with `p_max ≤ 1/K`.
    pub uniform_bound_violations: usize,
}

pub fn variance_ordering_suite(
    classes: usize,
    profiles: usize,
    delta: f64,
    epsilon: f64,
    rng: &mut Rng,
) -> Result<VarianceSuite> {
    let full = (1.0 / classes as f64) * (1.0 - 1.0 / classes as f64);
    let kf = classes as f64;
    let mut out = VarianceSuite {
        classes,
        profiles,
        any_class_violations: 0,
        argmax_violations: 0,
        other_class_violations: 0,
        margin_bound_violations: 0,
        uniform_bound_violations: 0,
    };
    for _ in 0..profiles {
        let profile = DensityProfile::random_id(classes, delta, epsilon, rng)?;
        let vars = label_bernoulli_variance(&profile, Regime::Id)?;
        let top = profile.argmax();
        let p_max = profile.f[top] / profile.f.iter().sum::<f64>();
        let argmax_bad = vars[top] >= full;
        let other_bad = vars.iter().enumerate().any(|(i, &v)| i != top && v >= full);
        out.argmax_violations += argmax_bad as usize;
        out.other_class_violations += other_bad as usize;
        out.any_class_violations += (argmax_bad || other_bad) as usize;
        out.margin_bound_violations += (p_max <= (1.0 + delta) / (kf + delta)) as usize;
        out.uniform_bound_violations += (p_max <= 1.0 / kf) as usize;
    }
    Ok(out)
}

/// MC frequency and closed form `Φ((x1−x2)/(σ√2))` of
/// `softmax(x1 + σε1, x2 + σε2)[0] > ½`.
pub fn softmax_flip_probability(x1: f64, x2: f64, sigma: f64, n_mc: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    softmax_flip_probability_with(x1, x2, sigma, n_mc, rng, &std_normal_cdf)
}

/// As [`softmax_flip_probability`] with an injected normal CDF.
pub fn softmax_flip_probability_with(
    x1: f64,
    x2: f64,
    sigma: f64,
    n_mc: usize,
    rng: &mut Rng,
    cdf: &dyn Fn(f64) -> f64,
) -> Result<(f64, f64)> {
    if !(sigma >= 0.0) {
        return Err(AbnnError::Domain(format!("sigma must be ≥ 0, got {sigma}")));
    }
    if n_mc == 0 {
        return Err(AbnnError::Domain("n_mc must be ≥ 1".into()));
    }
    let p_closed = if sigma == 0.0 {
        if x1 > x2 {
            1.0
        } else {
            0.0
        }
    } else {
        cdf((x1 - x2) / (sigma * std::f64::consts::SQRT_2))
    };
    let mut hits = 0usize;
    let mut logits = Matrix::zeros(1, 2);
    for _ in 0..n_mc {
        logits.set(0, 0, x1 + sigma * rng.normal());
        logits.set(0, 1, x2 + sigma * rng.normal());
        if softmax(&logits).get(0, 0) > 0.5 {
            hits += 1;
        }
    }
    Ok((hits as f64 / n_mc as f64, p_closed))
}

/// Pathwise MC estimate of `∂/∂σ E_q[ln q(w) − ln p(w)]` at `μ = 0` with
/// `w = σε`; each sample contributes `−1/σ + σε²`. Returns
/// `(mc_grad, σ − 1/σ, standard error)`.
pub fn kl_sigma_gradient_check(sigma: f64, n_mc: usize, rng: &mut Rng) -> Result<(f64, f64, f64)> {
    if !(sigma > 0.0) {
        return Err(AbnnError::Domain(format!("sigma must be positive, got {sigma}")));
    }
    if n_mc == 0 {
        return Err(AbnnError::Domain("n_mc must be ≥ 1".into()));
    }
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_mc {
        let e = rng.normal();
        let g = -1.0 / sigma + sigma * e * e;
        sum += g;
        sum_sq += g * g;
    }
    let n = n_mc as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    Ok((mean, sigma - 1.0 / sigma, (var / n).sqrt()))
}

/// Knobs of the isolated OOD-ascent toy run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftConfig {
    pub alpha: f64,
    pub lr: f64,
    pub kl_scale: f64,
    pub batch: usize,
    pub n_samples: usize,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            lr: 0.05,
            kl_scale: 1.0,
            batch: 32,
            n_samples: 5,
        }
    }
}

/// Runs phase-3 ascent alone on a one-block, width-2 toy model fed Gaussian
/// inputs and returns the mean attachment σ before and after every step.
pub fn ood_ascent_drift(init_sigma: f64, steps: usize, cfg: &DriftConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(init_sigma > 0.0) {
        return Err(AbnnError::Domain(format!(
            "init_sigma must be positive, got {init_sigma}"
        )));
    }
    let model_cfg = ModelConfig {
        input_dim: 2,
        width: 2,
        blocks: 1,
        classes: 2,
        init_sigma,
        bayesian: true,
    };
    let mut model = AbnnModel::new(model_cfg, &mut rng.derive(0))?;
    let x_ood = gaussian_matrix(&mut rng.derive(1), cfg.batch, 2);
    let mut noise_rng = rng.derive(2);
    model.set_phase(Phase::Distribution);
    // α = 0 is outside the training contract but is a valid no-op here.
    let tcfg = TrainerConfig {
        alpha: cfg.alpha,
        lr: cfg.lr,
        n_samples: cfg.n_samples,
        mode: TrainMode::Abnn,
        ..TrainerConfig::default()
    };
    let mut trainer = Trainer::new(tcfg, cfg.kl_scale);
    let mut traj = Vec::with_capacity(steps + 1);
    traj.push(model.mean_sigma());
    for _ in 0..steps {
        trainer.phase3_step(&mut model, &x_ood, &mut noise_rng)?;
        traj.push(model.mean_sigma());
    }
    Ok(traj)
}

/// Fraction of steps on which the trajectory does not decrease, counting only
/// steps before it first reaches `ceiling`.
pub fn nondecreasing_fraction(traj: &[f64], ceiling: f64) -> f64 {
    let mut ok = 0usize;
    let mut total = 0usize;
    for w in traj.windows(2) {
        if w[0] >= ceiling {
            break;
        }
        total += 1;
        ok += (w[1] >= w[0]) as usize;
    }
    if total == 0 {
        1.0
    } else {
        ok as f64 / total as f64
    }
}

/// Max `|two_term − merged|` over random small models with randomized
/// attachment means and σ.
pub fn merge_identity_check(trials: usize, alpha: f64, rng: &mut Rng) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(AbnnError::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let mut worst: f64 = 0.0;
    for t in 0..trials as u64 {
        let mut r = rng.derive(t);
        let input_dim = 1 + r.below(4);
        let classes = 2 + r.below(3);
        let model_cfg = ModelConfig {
            input_dim,
            width: 1 + r.below(6),
            blocks: 1 + r.below(3),
            classes,
            init_sigma: 0.05 + r.uniform(),
            bayesian: true,
        };
        let mut model = AbnnModel::new(model_cfg, &mut r)?;
        for (_, group, p) in model.params_mut() {
            if group == ParamGroup::Distribution {
                for v in p.value.data_mut() {
                    *v += 0.5 * r.normal();
                }
            }
        }
        let n_id = 1 + r.below(8);
        let n_ood = 1 + r.below(8);
        let x_id = gaussian_matrix(&mut r, n_id, input_dim);
        let labels: Vec<usize> = (0..n_id).map(|_| r.below(classes)).collect();
        let x_ood = gaussian_matrix(&mut r, n_ood, input_dim).scale(3.0);
        let cfg = TrainerConfig {
            alpha,
            n_samples: 1 + r.below(5),
            ..TrainerConfig::default()
        };
        let kl_scale = 0.01 + r.uniform();
        let (two, merged) = merged_objective(&mut model, &x_id, &labels, &x_ood, &cfg, kl_scale, &mut r)?;
        worst = worst.max((two - merged).abs());
    }
    Ok(worst)
}

/// One line of the verification report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckResult {
    pub check_name: String,
    pub statistic: f64,
    pub bound: f64,
    pub pass: bool,
}

impl CheckResult {
    fn below(name: impl Into<String>, statistic: f64, bound: f64) -> Self {
        Self {
            check_name: name.into(),
            statistic,
            bound,
            pass: statistic < bound,
        }
    }

    fn at_least(name: impl Into<String>, statistic: f64, bound: f64) -> Self {
        Self {
            check_name: name.into(),
            statistic,
            bound,
            pass: statistic >= bound,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub seed: u64,
    pub n_mc: usize,
    pub profiles: usize,
    pub delta: f64,
    pub epsilon: f64,
    pub drift_steps: usize,
    pub merge_trials: usize,
    /// Added to every normal-CDF evaluation of the flip check. Nonzero only
    /// as a negative control.
    pub cdf_offset: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_mc: 1_000_000,
            profiles: 10_000,
            delta: 0.05,
            epsilon: 0.01,
            drift_steps: 500,
            merge_trials: 100,
            cdf_offset: 0.0,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mc == 0 || self.profiles == 0 || self.merge_trials == 0 {
            return Err(AbnnError::Config("n_mc, profiles and merge_trials must be ≥ 1".into()));
        }
        if !(self.delta > 0.0 && self.epsilon > 0.0) {
            return Err(AbnnError::Config("delta and epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Runs every check. The process-level pass/fail is `all(pass)`.
pub fn verify_all(cfg: &VerifyConfig) -> Result<Vec<CheckResult>> {
    cfg.validate()?;
    let root = Rng::with_stream(cfg.seed, 11);
    let mut out = Vec::new();

    for (i, &k) in [2usize, 10].iter().enumerate() {
        let s = variance_ordering_suite(k, cfg.profiles, cfg.delta, cfg.epsilon, &mut root.derive(i as u64))?;
        out.push(CheckResult::below(
            format!("variance_ordering_all_classes_k{k}"),
            s.any_class_violations as f64,
            1.0,
        ));
        out.push(CheckResult::below(
            format!("variance_ordering_argmax_k{k}"),
            s.argmax_violations as f64,
            1.0,
        ));
        out.push(CheckResult::below(
            format!("variance_ordering_other_classes_k{k}"),
            s.other_class_violations as f64,
            1.0,
        ));
        out.push(CheckResult::below(
            format!("margin_bound_k{k}"),
            s.margin_bound_violations as f64,
            1.0,
        ));
        out.push(CheckResult::below(
            format!("argmax_above_uniform_k{k}"),
            s.uniform_bound_violations as f64,
            1.0,
        ));
    }

    let corrupted = |x: f64| std_normal_cdf(x) + cfg.cdf_offset;
    let mut closed = Vec::new();
    for (i, &sigma) in [1.0, 10.0, 100.0].iter().enumerate() {
        let (p_hat, p_closed) =
            softmax_flip_probability_with(1.0, 0.0, sigma, cfg.n_mc, &mut root.derive(10 + i as u64), &corrupted)?;
        out.push(CheckResult::below(
            format!("flip_probability_sigma{sigma}"),
            (p_hat - p_closed).abs(),
            0.005,
        ));
        closed.push(p_closed);
    }
    let ladder: Vec<f64> = [0.1, 1.0, 10.0, 100.0]
        .iter()
        .map(|&s| corrupted(1.0 / (s * std::f64::consts::SQRT_2)))
        .collect();
    let monotone = ladder.windows(2).all(|w| w[1] < w[0]) && ladder.iter().all(|&p| p > 0.5);
    out.push(CheckResult {
        check_name: "flip_probability_monotone_to_half".into(),
        statistic: ladder[ladder.len() - 1] - 0.5,
        bound: 0.0,
        pass: monotone,
    });

    for (i, &sigma) in [0.5, 1.0, 2.0].iter().enumerate() {
        let (mc, exact, _) = kl_sigma_gradient_check(sigma, cfg.n_mc, &mut root.derive(20 + i as u64))?;
        let tol = f64::max(0.02, 0.02 * exact.abs());
        out.push(CheckResult::below(
            format!("kl_sigma_gradient_sigma{sigma}"),
            (mc - exact).abs(),
            tol,
        ));
    }

    let traj = ood_ascent_drift(1.5, cfg.drift_steps, &DriftConfig::default(), &mut root.derive(30))?;
    out.push(CheckResult::at_least(
        "ood_ascent_final_sigma",
        *traj.last().unwrap(),
        10.0,
    ));
    out.push(CheckResult::at_least(
        "ood_ascent_nondecreasing_fraction",
        nondecreasing_fraction(&traj, crate::layers::SIGMA_MAX * 0.999),
        0.95,
    ));

    for (i, &alpha) in [0.5, 0.95].iter().enumerate() {
        let gap = merge_identity_check(cfg.merge_trials, alpha, &mut root.derive(40 + i as u64))?;
        out.push(CheckResult::below(format!("merge_identity_alpha{alpha}"), gap, 1e-9));
    }

    let mut r = root.derive(50);
    let mut worst_z: f64 = 0.0;
    for _ in 0..20 {
        let mu = 2.0 * r.normal();
        let sigma = 0.2 + 2.0 * r.uniform();
        let (mc, se) = kl_monte_carlo(mu, sigma, cfg.n_mc / 10, &mut r);
        worst_z = worst_z.max((mc - kl_gauss_std(mu, sigma)?).abs() / se);
    }
    out.push(CheckResult::below("kl_closed_form_mc_zscore", worst_z, 3.0));
    Ok(out)
}

/// MC estimate of `KL(N(μ,σ²)‖N(0,1))` from `ln q(w) − ln p(w)` at `w = μ + σε`,
/// with its standard error.
pub fn kl_monte_carlo(mu: f64, sigma: f64, n: usize, rng: &mut Rng) -> (f64, f64) {
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let e = rng.normal();
        let w = mu + sigma * e;
        let v = -sigma.ln() - 0.5 * e * e + 0.5 * w * w;
        s += v;
        s2 += v * v;
    }
    let m = s / n as f64;
    let var = (s2 / n as f64 - m * m).max(0.0);
    (m, (var / n as f64).sqrt())
}
