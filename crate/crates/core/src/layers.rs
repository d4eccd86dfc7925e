//! Dense and Gaussian variational linear layers with exact backward passes.
//!
//! Layers do not cache activations: callers keep the forward input and hand it
//! back to `backward`, which accumulates parameter gradients and returns the
//! gradient with respect to the input.

use crate::error::{shape_err, AbnnError, Result};
use crate::numerics::{gaussian_matrix, kl_gauss_std, sigmoid, softmax_in_place, softplus, softplus_inv, Matrix, Rng};

/// Lower bound on the posterior standard deviation of any variational weight.
pub const SIGMA_MIN: f64 = 1e-4;
/// Upper bound on the posterior standard deviation of any variational weight.
pub const SIGMA_MAX: f64 = 1e2;

pub fn rho_min() -> f64 {
    softplus_inv(SIGMA_MIN)
}

pub fn rho_max() -> f64 {
    softplus_inv(SIGMA_MAX)
}

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLinear {
    pub w: Param,
    pub b: Param,
}

impl DenseLinear {
    pub fn new(w: Matrix, b: Matrix) -> Result<Self> {
        if b.rows() != 1 || b.cols() != w.cols() {
            return Err(shape_err(
                "DenseLinear::new",
                format!("(1, {})", w.cols()),
                format!("{:?}", b.shape()),
            ));
        }
        Ok(Self {
            w: Param::new(w),
            b: Param::new(b),
        })
    }

    /// He-normal weights, zero bias.
    pub fn random(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let scale = (2.0 / inputs as f64).sqrt();
        let w = gaussian_matrix(rng, inputs, outputs).scale(scale);
        Self {
            w: Param::new(w),
            b: Param::new(Matrix::zeros(1, outputs)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.value.rows()
    }

    pub fn outputs(&self) -> usize {
        self.w.value.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul(&self.w.value)?.add_row(&self.b.value)
    }

    /// Accumulates `∂L/∂W`, `∂L/∂b` and returns `∂L/∂x`.
    pub fn backward(&mut self, x: &Matrix, upstream: &Matrix) -> Result<Matrix> {
        self.w.grad.add_assign(&x.t_matmul(upstream)?)?;
        self.b.grad.add_assign(&upstream.sum_rows())?;
        upstream.matmul_t(&self.w.value)
    }

    pub fn zero_grad(&mut self) {
        self.w.zero_grad();
        self.b.zero_grad();
    }
}

/// Standard-normal noise drawn for one forward pass of a [`BayesLinear`].
#[derive(Clone, Debug, PartialEq)]
pub struct SampledWeights {
    pub eps_w: Matrix,
    pub eps_b: Matrix,
}

/// Mean-field Gaussian linear layer, `σ = softplus(ρ)` for weights and biases.
#[derive(Clone, Debug, PartialEq)]
pub struct BayesLinear {
    pub mu_w: Param,
    pub rho_w: Param,
    pub mu_b: Param,
    pub rho_b: Param,
    sample: Option<SampledWeights>,
}

impl BayesLinear {
    /// Zero means and a common initial σ for every weight and bias.
    pub fn new(inputs: usize, outputs: usize, init_sigma: f64) -> Self {
        let rho = softplus_inv(init_sigma.clamp(SIGMA_MIN, SIGMA_MAX));
        Self {
            mu_w: Param::new(Matrix::zeros(inputs, outputs)),
            rho_w: Param::new(Matrix::filled(inputs, outputs, rho)),
            mu_b: Param::new(Matrix::zeros(1, outputs)),
            rho_b: Param::new(Matrix::filled(1, outputs, rho)),
            sample: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.mu_w.value.rows()
    }

    pub fn outputs(&self) -> usize {
        self.mu_w.value.cols()
    }

    /// Draws fresh ε for every weight and bias and caches it.
    pub fn sample(&mut self, rng: &mut Rng) -> &SampledWeights {
        let eps_w = gaussian_matrix(rng, self.inputs(), self.outputs());
        let eps_b = gaussian_matrix(rng, 1, self.outputs());
        self.sample.insert(SampledWeights { eps_w, eps_b })
    }

    /// Caches ε ≡ 0 so the layer acts with its mean weights.
    pub fn sample_mean(&mut self) {
        self.sample = Some(SampledWeights {
            eps_w: Matrix::zeros(self.inputs(), self.outputs()),
            eps_b: Matrix::zeros(1, self.outputs()),
        });
    }

    pub fn set_sample(&mut self, sample: SampledWeights) -> Result<()> {
        if sample.eps_w.shape() != self.mu_w.value.shape() || sample.eps_b.shape() != self.mu_b.value.shape() {
            return Err(shape_err(
                "BayesLinear::set_sample",
                format!("{:?}", self.mu_w.value.shape()),
                format!("{:?}", sample.eps_w.shape()),
            ));
        }
        self.sample = Some(sample);
        Ok(())
    }

    pub fn current_sample(&self) -> Option<&SampledWeights> {
        self.sample.as_ref()
    }

    pub fn clear_sample(&mut self) {
        self.sample = None;
    }

    /// `μ + softplus(ρ)·ε` for weights and biases under the cached ε.
    pub fn effective_weights(&self) -> Result<(Matrix, Matrix)> {
        let s = self.sample.as_ref().ok_or(AbnnError::NoSample)?;
        let w = perturb(&self.mu_w.value, &self.rho_w.value, &s.eps_w);
        let b = perturb(&self.mu_b.value, &self.rho_b.value, &s.eps_b);
        Ok((w, b))
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let (w, b) = self.effective_weights()?;
        x.matmul(&w)?.add_row(&b)
    }

    /// Accumulates gradients for μ and ρ (ε held at the cached draw) and
    /// returns `∂L/∂x`.
    pub fn backward(&mut self, x: &Matrix, upstream: &Matrix) -> Result<Matrix> {
        let (w, _) = self.effective_weights()?;
        let s = self.sample.as_ref().ok_or(AbnnError::NoSample)?;
        let g_w = x.t_matmul(upstream)?;
        let g_b = upstream.sum_rows();
        accumulate_reparam(&mut self.mu_w, &mut self.rho_w, &g_w, &s.eps_w);
        accumulate_reparam(&mut self.mu_b, &mut self.rho_b, &g_b, &s.eps_b);
        upstream.matmul_t(&w)
    }

    /// `Σ KL(N(μ, σ²) ‖ N(0, 1))` over all weights and biases.
    pub fn kl(&self) -> f64 {
        kl_block(&self.mu_w.value, &self.rho_w.value) + kl_block(&self.mu_b.value, &self.rho_b.value)
    }

    /// Adds `scale · ∂KL/∂(μ, ρ)` to the gradient accumulators.
    pub fn accumulate_kl_grad(&mut self, scale: f64) {
        kl_grad_block(&mut self.mu_w, &mut self.rho_w, scale);
        kl_grad_block(&mut self.mu_b, &mut self.rho_b, scale);
    }

    /// Keeps every σ inside `[SIGMA_MIN, SIGMA_MAX]`.
    pub fn clamp_rho(&mut self) {
        let (lo, hi) = (rho_min(), rho_max());
        for v in self
            .rho_w
            .value
            .data_mut()
            .iter_mut()
            .chain(self.rho_b.value.data_mut().iter_mut())
        {
            *v = v.clamp(lo, hi);
        }
    }

    /// All σ values (weights first, then biases).
    pub fn sigmas(&self) -> impl Iterator<Item = f64> + '_ {
        self.rho_w
            .value
            .data()
            .iter()
            .chain(self.rho_b.value.data())
            .map(|&r| softplus(r))
    }

    pub fn zero_grad(&mut self) {
        self.mu_w.zero_grad();
        self.rho_w.zero_grad();
        self.mu_b.zero_grad();
        self.rho_b.zero_grad();
    }
}

fn perturb(mu: &Matrix, rho: &Matrix, eps: &Matrix) -> Matrix {
    let mut out = mu.clone();
    for ((o, &r), &e) in out.data_mut().iter_mut().zip(rho.data()).zip(eps.data()) {
        if e != 0.0 {
            *o += softplus(r) * e;
        }
    }
    out
}

fn accumulate_reparam(mu: &mut Param, rho: &mut Param, g: &Matrix, eps: &Matrix) {
    for (gm, &gv) in mu.grad.data_mut().iter_mut().zip(g.data()) {
        *gm += gv;
    }
    let iter = rho
        .grad
        .data_mut()
        .iter_mut()
        .zip(rho.value.data())
        .zip(g.data())
        .zip(eps.data());
    for (((gr, &r), &gv), &e) in iter {
        *gr += gv * e * sigmoid(r);
    }
}

fn kl_block(mu: &Matrix, rho: &Matrix) -> f64 {
    mu.data()
        .iter()
        .zip(rho.data())
        .map(|(&m, &r)| kl_gauss_std(m, softplus(r)).expect("softplus is positive"))
        .sum()
}

fn kl_grad_block(mu: &mut Param, rho: &mut Param, scale: f64) {
    for (g, &m) in mu.grad.data_mut().iter_mut().zip(mu.value.data()) {
        *g += scale * m;
    }
    for (g, &r) in rho.grad.data_mut().iter_mut().zip(rho.value.data()) {
        let s = softplus(r);
        *g += scale * (s - 1.0 / s) * sigmoid(r);
    }
}

pub fn relu_forward(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// Passes `upstream` where `x > 0`; the derivative at exactly 0 is 0.
pub fn relu_backward(x: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    x.zip_map(upstream, |xv, g| if xv > 0.0 { g } else { 0.0 })
}

/// Fused softmax + cross-entropy, averaged over the batch.
///
/// Returns the loss and `(softmax(logits) − target) / batch`.
pub fn softmax_ce_head(logits: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if logits.shape() != target.shape() {
        return Err(shape_err(
            "softmax_ce_head",
            format!("{:?}", logits.shape()),
            format!("{:?}", target.shape()),
        ));
    }
    let batch = logits.rows() as f64;
    let mut probs = logits.clone();
    let mut loss = 0.0;
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss -= row
            .iter()
            .zip(target.row(r))
            .map(|(&z, &t)| if t == 0.0 { 0.0 } else { t * (z - lse) })
            .sum::<f64>();
        softmax_in_place(probs.row_mut(r));
    }
    let dlogits = probs.zip_map(target, |p, t| (p - t) / batch)?;
    Ok((loss / batch, dlogits))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Central difference of `f` with respect to entry `i` of `m`.
    fn central<F: FnMut(&Matrix) -> f64>(m: &Matrix, i: usize, mut f: F) -> f64 {
        let h = 1e-5;
        let mut plus = m.clone();
        plus.data_mut()[i] += h;
        let mut minus = m.clone();
        minus.data_mut()[i] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    fn weighted_sum(out: &Matrix, weights: &Matrix) -> f64 {
        out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn dense_identity_and_scalar() {
        let layer = DenseLinear::new(Matrix::identity(3), Matrix::zeros(1, 3)).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.5]]).unwrap();
        assert_eq!(layer.forward(&x).unwrap(), x);
        let layer = DenseLinear::new(Matrix::filled(1, 1, 2.0), Matrix::filled(1, 1, 1.0)).unwrap();
        let out = layer.forward(&Matrix::filled(1, 1, 3.0)).unwrap();
        assert_eq!(out.data(), &[7.0]);
        let wrong = Matrix::zeros(1, 2);
        assert!(matches!(layer.forward(&wrong), Err(AbnnError::Shape { .. })));
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = Rng::new(1);
        let mut layer = DenseLinear::random(5, 4, &mut rng);
        layer.b.value = gaussian_matrix(&mut rng, 1, 4);
        let x = gaussian_matrix(&mut rng, 3, 5);
        let up = gaussian_matrix(&mut rng, 3, 4);
        let dx = layer.backward(&x, &up).unwrap();
        for i in 0..20 {
            let fd = central(&layer.w.value, i, |w| {
                let l = DenseLinear::new(w.clone(), layer.b.value.clone()).unwrap();
                weighted_sum(&l.forward(&x).unwrap(), &up)
            });
            assert!(rel_err(fd, layer.w.grad.data()[i]) < 1e-6);
        }
        for i in 0..4 {
            let fd = central(&layer.b.value, i, |b| {
                let l = DenseLinear::new(layer.w.value.clone(), b.clone()).unwrap();
                weighted_sum(&l.forward(&x).unwrap(), &up)
            });
            assert!(rel_err(fd, layer.b.grad.data()[i]) < 1e-6);
        }
        for i in 0..15 {
            let fd = central(&x, i, |xx| weighted_sum(&layer.forward(xx).unwrap(), &up));
            assert!(rel_err(fd, dx.data()[i]) < 1e-6);
        }
    }

    #[test]
    fn bayes_sample_contracts() {
        let mut layer = BayesLinear::new(2, 2, 1.0);
        layer.mu_w.value = Matrix::from_rows(&[vec![0.3, -0.1], vec![2.0, 0.7]]).unwrap();
        layer.sample_mean();
        let (w, b) = layer.effective_weights().unwrap();
        assert_eq!(w, layer.mu_w.value);
        assert_eq!(b, layer.mu_b.value);

        layer.rho_w.value.fill(0.0);
        assert!(layer.sigmas().take(4).all(|s| (s - 2f64.ln()).abs() < 1e-15));

        let a = layer.sample(&mut Rng::with_stream(5, 2)).clone();
        let b = layer.sample(&mut Rng::with_stream(5, 2)).clone();
        assert_eq!(a, b);
    }

    #[test]
    fn bayes_forward_requires_sample() {
        let layer = BayesLinear::new(2, 3, 0.5);
        let x = Matrix::zeros(1, 2);
        assert!(matches!(layer.forward(&x), Err(AbnnError::NoSample)));
    }

    #[test]
    fn bayes_vanishing_noise_is_identity() {
        let mut layer = BayesLinear::new(3, 3, SIGMA_MIN);
        layer.mu_w.value = Matrix::identity(3);
        layer.sample(&mut Rng::new(9));
        let mut rng = Rng::new(10);
        let x = gaussian_matrix(&mut rng, 4, 3);
        let y = layer.forward(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn bayes_with_zero_noise_equals_dense() {
        let mut rng = Rng::new(4);
        let mut layer = BayesLinear::new(4, 3, 0.7);
        layer.mu_w.value = gaussian_matrix(&mut rng, 4, 3);
        layer.mu_b.value = gaussian_matrix(&mut rng, 1, 3);
        layer.sample_mean();
        let dense = DenseLinear::new(layer.mu_w.value.clone(), layer.mu_b.value.clone()).unwrap();
        let x = gaussian_matrix(&mut rng, 5, 4);
        let a = layer.forward(&x).unwrap();
        let b = dense.forward(&x).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn bayes_backward_matches_finite_differences() {
        let mut rng = Rng::new(2);
        let mut layer = BayesLinear::new(4, 3, 0.8);
        layer.mu_w.value = gaussian_matrix(&mut rng, 4, 3);
        layer.rho_w.value = gaussian_matrix(&mut rng, 4, 3);
        layer.mu_b.value = gaussian_matrix(&mut rng, 1, 3);
        layer.rho_b.value = gaussian_matrix(&mut rng, 1, 3);
        layer.sample(&mut rng);
        let x = gaussian_matrix(&mut rng, 5, 4);
        let up = gaussian_matrix(&mut rng, 5, 3);
        let dx = layer.backward(&x, &up).unwrap();

        let base = layer.clone();
        let loss = |l: &BayesLinear| weighted_sum(&l.forward(&x).unwrap(), &up);
        for i in 0..12 {
            let fd = central(&base.mu_w.value, i, |m| {
                let mut l = base.clone();
                l.mu_w.value = m.clone();
                loss(&l)
            });
            assert!(rel_err(fd, base.mu_w.grad.data()[i]) < 1e-6);
            let fd = central(&base.rho_w.value, i, |m| {
                let mut l = base.clone();
                l.rho_w.value = m.clone();
                loss(&l)
            });
            assert!(rel_err(fd, base.rho_w.grad.data()[i]) < 1e-6, "rho_w[{i}]");
        }
        for i in 0..3 {
            let fd = central(&base.rho_b.value, i, |m| {
                let mut l = base.clone();
                l.rho_b.value = m.clone();
                loss(&l)
            });
            assert!(rel_err(fd, base.rho_b.grad.data()[i]) < 1e-6);
        }
        for i in 0..20 {
            let fd = central(&x, i, |xx| weighted_sum(&base.forward(xx).unwrap(), &up));
            assert!(rel_err(fd, dx.data()[i]) < 1e-6);
        }
        // dσ/dρ at ρ = 0
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn bayes_kl_values_and_gradient() {
        let mut layer = BayesLinear::new(3, 2, 1.0);
        assert!((softplus_inv(1.0) - 0.5413248546129181).abs() < 1e-12);
        assert!(layer.kl().abs() < 1e-12);

        let mut single = BayesLinear::new(1, 1, 1.0);
        single.mu_w.value.fill(1.0);
        assert!((single.kl() - 0.5).abs() < 1e-12);

        let mut rng = Rng::new(3);
        layer.mu_w.value = gaussian_matrix(&mut rng, 3, 2);
        layer.rho_w.value = gaussian_matrix(&mut rng, 3, 2);
        layer.mu_b.value = gaussian_matrix(&mut rng, 1, 2);
        layer.rho_b.value = gaussian_matrix(&mut rng, 1, 2);
        layer.zero_grad();
        layer.accumulate_kl_grad(1.0);
        for i in 0..6 {
            let fd = central(&layer.mu_w.value, i, |m| {
                let mut l = layer.clone();
                l.mu_w.value = m.clone();
                l.kl()
            });
            assert!(rel_err(fd, layer.mu_w.grad.data()[i]) < 1e-6);
            let fd = central(&layer.rho_w.value, i, |m| {
                let mut l = layer.clone();
                l.rho_w.value = m.clone();
                l.kl()
            });
            assert!(rel_err(fd, layer.rho_w.grad.data()[i]) < 1e-6);
        }
    }

    #[test]
    fn kl_ignores_batch_contents() {
        let mut layer = BayesLinear::new(2, 2, 1.7);
        let before = layer.kl();
        layer.sample(&mut Rng::new(1));
        let _ = layer.forward(&Matrix::filled(8, 2, 3.0)).unwrap();
        assert_eq!(layer.kl(), before);
    }

    #[test]
    fn clamp_bounds_sigma() {
        let mut layer = BayesLinear::new(2, 2, 1.0);
        layer.rho_w.value = Matrix::from_rows(&[vec![-50.0, 500.0], vec![0.0, 1.0]]).unwrap();
        layer.clamp_rho();
        for s in layer.sigmas() {
            assert!(
                (SIGMA_MIN * (1.0 - 1e-9)..=SIGMA_MAX * (1.0 + 1e-9)).contains(&s),
                "{s}"
            );
        }
    }

    #[test]
    fn relu_cases() {
        let x = Matrix::row_vector(vec![-1.0, 2.0]);
        assert_eq!(relu_forward(&x).data(), &[0.0, 2.0]);
        let g = relu_backward(&x, &Matrix::row_vector(vec![1.0, 1.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0]);
        let zero = Matrix::row_vector(vec![0.0]);
        assert_eq!(
            relu_backward(&zero, &Matrix::row_vector(vec![1.0])).unwrap().data(),
            &[0.0]
        );

        let mut rng = Rng::new(6);
        let x = gaussian_matrix(&mut rng, 4, 4);
        let up = gaussian_matrix(&mut rng, 4, 4);
        let dx = relu_backward(&x, &up).unwrap();
        for i in 0..16 {
            if x.data()[i].abs() < 1e-3 {
                continue;
            }
            let fd = central(&x, i, |xx| weighted_sum(&relu_forward(xx), &up));
            assert!(rel_err(fd, dx.data()[i]) < 1e-6);
        }
    }

    #[test]
    fn softmax_ce_head_cases() {
        let logits = Matrix::row_vector(vec![0.0, 0.0]);
        let (loss, d) = softmax_ce_head(&logits, &Matrix::row_vector(vec![1.0, 0.0])).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(d.data(), &[-0.5, 0.5]);
        let (_, d) = softmax_ce_head(&logits, &Matrix::row_vector(vec![0.5, 0.5])).unwrap();
        assert_eq!(d.data(), &[0.0, 0.0]);
        assert!(softmax_ce_head(&logits, &Matrix::zeros(1, 3)).is_err());

        let mut rng = Rng::new(8);
        let z = gaussian_matrix(&mut rng, 3, 4);
        let t = crate::numerics::softmax(&gaussian_matrix(&mut rng, 3, 4));
        let (_, d) = softmax_ce_head(&z, &t).unwrap();
        for i in 0..12 {
            let fd = central(&z, i, |zz| softmax_ce_head(zz, &t).unwrap().0);
            assert!(rel_err(fd, d.data()[i]) < 1e-6);
        }
    }
}
