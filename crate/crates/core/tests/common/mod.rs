#![allow(dead_code)]

use abnn::model::{AbnnModel, ModelConfig, ParamGroup};
use abnn::numerics::{gaussian_matrix, Matrix, Rng};
use abnn::training::{one_hot, pseudo_label, task_objective, variational_objective};

pub struct GradReport {
    pub worst_rel: f64,
    pub checked: usize,
    pub kinks_skipped: usize,
    /// Entries whose disagreement is within the f64 resolution of the
    /// difference quotient, so rel-err is not measurable there.
    pub below_resolution: usize,
}

fn loss_of(which: usize, model: &mut AbnnModel, ctx: &Ctx) -> f64 {
    match which {
        0 => task_objective(model, &ctx.x, &ctx.id_target, &ctx.noises[0]).unwrap(),
        1 => variational_objective(model, &ctx.x, &ctx.id_target, &ctx.noises, ctx.kl_scale, 1.0).unwrap(),
        _ => variational_objective(model, &ctx.x_ood, &ctx.ood_target, &ctx.noises, ctx.kl_scale, ctx.alpha).unwrap(),
    }
}

struct Ctx {
    x: Matrix,
    x_ood: Matrix,
    id_target: Matrix,
    ood_target: Matrix,
    noises: Vec<Vec<abnn::layers::SampledWeights>>,
    kl_scale: f64,
    alpha: f64,
}

/// Random model with at most 3 blocks and width at most 8, non-trivial
/// attachment means and biases.
pub fn random_model(rng: &mut Rng) -> AbnnModel {
    let cfg = ModelConfig {
        input_dim: 1 + rng.below(4),
        width: 1 + rng.below(8),
        blocks: 1 + rng.below(3),
        classes: 2 + rng.below(3),
        init_sigma: 0.1 + 1.4 * rng.uniform(),
        bayesian: true,
    };
    let mut model = AbnnModel::new(cfg, rng).unwrap();
    for (name, group, p) in model.params_mut() {
        let perturb = group == ParamGroup::Distribution || name.ends_with(".b");
        if perturb {
            for v in p.value.data_mut() {
                *v += 0.3 * rng.normal();
            }
        }
    }
    model
}

/// Central differences (h = 1e-5) of the three phase losses against the
/// analytic gradients, with the noise held fixed. Elements whose one-sided
/// differences disagree sit on a ReLU kink and are skipped.
pub fn phase_gradient_check(seed: u64) -> GradReport {
    let mut rng = Rng::new(seed);
    let mut model = random_model(&mut rng);
    let (d, k) = (model.config.input_dim, model.config.classes);
    let n = 2 + rng.below(4);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
    let ctx = Ctx {
        x: gaussian_matrix(&mut rng, n, d),
        x_ood: gaussian_matrix(&mut rng, n, d).scale(3.0),
        id_target: one_hot(&labels, k),
        ood_target: pseudo_label(k, n),
        noises: (0..2).map(|_| model.draw_noise(&mut rng)).collect(),
        kl_scale: 0.05 + rng.uniform(),
        alpha: 0.95,
    };
    let h = 1e-5;
    let mut report = GradReport {
        worst_rel: 0.0,
        checked: 0,
        kinks_skipped: 0,
        below_resolution: 0,
    };
    for which in 0..3 {
        loss_of(which, &mut model, &ctx);
        let analytic: Vec<Vec<f64>> = model.params().iter().map(|(_, _, p)| p.grad.data().to_vec()).collect();
        for (pi, grads) in analytic.iter().enumerate() {
            for (ei, &a) in grads.iter().enumerate() {
                let orig = model.params()[pi].2.value.data()[ei];
                let eval_at = |v: f64, m: &mut AbnnModel| {
                    m.params_mut()[pi].2.value.data_mut()[ei] = v;
                    loss_of(which, m, &ctx)
                };
                let f0 = eval_at(orig, &mut model);
                let fp = eval_at(orig + h, &mut model);
                let fm = eval_at(orig - h, &mut model);
                eval_at(orig, &mut model);
                let fwd = (fp - f0) / h;
                let bwd = (f0 - fm) / h;
                if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(1e-2) {
                    report.kinks_skipped += 1;
                    continue;
                }
                let num = (fp - fm) / (2.0 * h);
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-4);
                // Rounding bound of the difference quotient, one ulp per loss.
                let resolution = f64::EPSILON * (fp.abs() + fm.abs()) / (2.0 * h);
                if rel >= 1e-6 && (a - num).abs() <= resolution {
                    report.below_resolution += 1;
                    continue;
                }
                report.worst_rel = report.worst_rel.max(rel);
                report.checked += 1;
            }
        }
    }
    report
}

/// Pairwise count, ties ½.
pub fn brute_auroc(neg: &[f64], pos: &[f64]) -> f64 {
    let mut s = 0.0;
    for &p in pos {
        for &q in neg {
            s += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (neg.len() * pos.len()) as f64
}

/// Every distinct score as a `≥ t` threshold, precision/recall by counting,
/// summed as steps over increasing recall.
pub fn brute_average_precision(positives: &[f64], negatives: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = positives.iter().chain(negatives).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let tp = positives.iter().filter(|&&s| s >= t).count();
        let fp = negatives.iter().filter(|&&s| s >= t).count();
        let recall = tp as f64 / positives.len() as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Exhaustive `½(TPR + TNR)` over every cut between consecutive distinct
/// pooled scores plus both outer cuts, positive above the cut. Cuts are
/// placed by partition rather than by a computed midpoint, which can round
/// onto a neighbour one ulp away.
pub fn brute_detection_accuracy(neg: &[f64], pos: &[f64]) -> f64 {
    let mut all: Vec<f64> = neg.iter().chain(pos).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let rate = |tp: usize, tn: usize| 0.5 * (tp as f64 / pos.len() as f64 + tn as f64 / neg.len() as f64);
    let mut best = rate(pos.len(), 0);
    for &v in &all {
        let tp = pos.iter().filter(|&&s| s > v).count();
        let tn = neg.iter().filter(|&&s| s <= v).count();
        best = best.max(rate(tp, tn));
    }
    best
}

/// Sweeps every positive score as threshold and keeps the largest one whose
/// TPR is at least 95%.
pub fn brute_tnr_at_tpr95(neg: &[f64], pos: &[f64]) -> f64 {
    let mut best_t = f64::NEG_INFINITY;
    for &t in pos {
        let tpr = pos.iter().filter(|&&s| s >= t).count() as f64 / pos.len() as f64;
        if tpr >= 0.95 - 1e-12 && t > best_t {
            best_t = t;
        }
    }
    neg.iter().filter(|&&s| s < best_t).count() as f64 / neg.len() as f64
}

/// Random score sets with deliberate ties.
pub fn random_scores(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| (rng.uniform() * 20.0).floor() / 20.0 + if rng.uniform() < 0.5 { rng.uniform() * 0.01 } else { 0.0 })
        .collect()
}
