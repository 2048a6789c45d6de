//! Prototype and score mathematics for class-contextualized mixed prompts.
//!
//! Clients summarize each class by the mean of the `cls` token entering every
//! CCMP layer. The server averages those summaries over an update period,
//! skipping clients that never saw the class, and blends the result into the
//! global bank with momentum. At inference a sample's incoming `cls` token is
//! compared with the global prototypes by cosine similarity; the similarities,
//! sharpened by a temperature and weighted by the client's label frequencies,
//! give a distribution over classes that mixes the class prompts.

use fedprompt_tensor::{masked_softmax_in_place, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Empirical label distribution of one client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPriors(Vec<f64>);

impl ClassPriors {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(CoreError::Data("priors must be finite and nonnegative".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(CoreError::Data(format!("priors sum to {sum}, expected 1")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0 / num_classes as f64; num_classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// Log-prior bias per class; `None` where the prior is zero.
    pub fn log_bias(&self) -> Vec<Option<f64>> {
        self.0
            .iter()
            .map(|&p| if p > 0.0 { Some(p.ln()) } else { None })
            .collect()
    }
}

/// `δ_c = n_c / N` for each class.
pub fn compute_class_priors(labels: &[usize], num_classes: usize) -> Result<ClassPriors> {
    if labels.is_empty() {
        return Err(CoreError::Data("cannot compute priors of an empty label list".into()));
    }
    let counts = label_histogram(labels, num_classes)?;
    let n = labels.len() as f64;
    Ok(ClassPriors(counts.iter().map(|&c| c as f64 / n).collect()))
}

pub fn label_histogram(labels: &[usize], num_classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        *counts
            .get_mut(y)
            .ok_or_else(|| CoreError::Data(format!("label {y} out of range for {num_classes} classes")))? += 1;
    }
    Ok(counts)
}

/// Mixing weights for one sample at one CCMP layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    /// Wraps an externally computed probability vector. Panics if it is not
    /// one (entries ≥ 0, sum within 1e-12 of 1).
    pub fn from_probs(probs: Vec<f64>) -> Self {
        assert!(probs.iter().all(|&p| p >= 0.0), "negative score");
        assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12, "scores do not sum to 1");
        Self(probs)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity, defined as 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// `s_c ∝ exp(sim(cls, μ_c)/τ) · δ_c`, evaluated in log space.
pub fn soft_scores(
    cls: &[f64],
    prototypes: &[Vec<f64>],
    priors: &ClassPriors,
    tau: f64,
) -> Result<ScoreVector> {
    if !(tau > 0.0) {
        return Err(CoreError::config("tau", "temperature must be positive"));
    }
    if prototypes.len() != priors.num_classes() {
        return Err(CoreError::Data(format!(
            "{} prototypes for {} classes",
            prototypes.len(),
            priors.num_classes()
        )));
    }
    let bias = priors.log_bias();
    if bias.iter().all(Option::is_none) {
        return Err(CoreError::Data("all class priors are zero".into()));
    }
    let mut logits: Vec<f64> = prototypes.iter().map(|mu| cosine(cls, mu) / tau).collect();
    masked_softmax_in_place(&mut logits, &bias);
    Ok(ScoreVector(logits))
}

/// `m = P_C · s`, with `class_prompts` laid out `d × |C|`.
pub fn mix_prompt(class_prompts: &Tensor, scores: &ScoreVector) -> Result<Vec<f64>> {
    let (d, c) = class_prompts.matrix_dims();
    if c != scores.0.len() {
        return Err(CoreError::Data(format!(
            "class prompts have {c} columns but scores have {}",
            scores.0.len()
        )));
    }
    Ok((0..d)
        .map(|i| (0..c).map(|j| class_prompts.at(i, j) * scores.0[j]).sum())
        .collect())
}

/// Per-class mean of `tokens`; classes without samples get the zero vector.
pub fn class_means(tokens: &[&[f64]], labels: &[usize], num_classes: usize) -> Result<Vec<Vec<f64>>> {
    if tokens.is_empty() {
        return Err(CoreError::Data("no samples to build prototypes from".into()));
    }
    if tokens.len() != labels.len() {
        return Err(CoreError::Data("tokens and labels differ in length".into()));
    }
    let dim = tokens[0].len();
    let mut sums = vec![vec![0.0; dim]; num_classes];
    let counts = label_histogram(labels, num_classes)?;
    for (tok, &y) in tokens.iter().zip(labels) {
        for (s, v) in sums[y].iter_mut().zip(tok.iter()) {
            *s += v;
        }
    }
    for (sum, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            sum.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    Ok(sums)
}

fn is_zero(v: &[f64]) -> bool {
    v.iter().all(|x| *x == 0.0)
}

/// Mean over the nonzero submissions for one class, with the contribution
/// count `D_c`. Returns the zero vector when nothing was contributed.
pub fn server_aggregate(submissions: &[&[f64]], dim: usize) -> (Vec<f64>, usize) {
    let mut sum = vec![0.0; dim];
    let mut count = 0usize;
    for s in submissions.iter().filter(|s| !is_zero(s)) {
        for (acc, v) in sum.iter_mut().zip(s.iter()) {
            *acc += v;
        }
        count += 1;
    }
    if count > 0 {
        sum.iter_mut().for_each(|v| *v /= count as f64);
    }
    (sum, count)
}

/// `ρ·prev + (1−ρ)·aggregate`, or `prev` untouched when `D_c = 0`.
pub fn momentum_update(prev: &[f64], aggregate: &[f64], contributions: usize, rho: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(CoreError::config("rho", format!("momentum {rho} outside [0, 1]")));
    }
    if prev.len() != aggregate.len() {
        return Err(CoreError::Data("prototype dimension mismatch".into()));
    }
    if contributions == 0 {
        return Ok(prev.to_vec());
    }
    Ok(prev
        .iter()
        .zip(aggregate)
        .map(|(p, a)| rho * p + (1.0 - rho) * a)
        .collect())
}

/// `2 · maxᵢ ‖clsᵢ − μ‖₁ / N`. `None` when the class has no samples.
pub fn dp_sensitivity(tokens: &[&[f64]], prototype: &[f64], count: usize) -> Option<f64> {
    if count == 0 || tokens.is_empty() {
        return None;
    }
    let max_dev = tokens
        .iter()
        .map(|t| t.iter().zip(prototype).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .fold(0.0, f64::max);
    Some(2.0 * max_dev / count as f64)
}

/// One draw from Laplace(0, scale) by inverse CDF.
pub fn laplace<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    if scale == 0.0 {
        return 0.0;
    }
    // u in [-0.5, 0.5); u = -0.5 maps to ln(0) and is redrawn.
    loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        let t = 1.0 - 2.0 * u.abs();
        if t > 0.0 {
            return -scale * u.signum() * t.ln();
        }
    }
}

/// Adds independent Laplace(0, S_c/ε) noise to every coordinate.
pub fn dp_apply<R: Rng + ?Sized>(
    prototype: &[f64],
    sensitivity: f64,
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        return Err(CoreError::config("dp_epsilon", "privacy budget must be positive"));
    }
    if sensitivity == 0.0 {
        return Ok(prototype.to_vec());
    }
    let scale = sensitivity / epsilon;
    Ok(prototype.iter().map(|v| v + laplace(rng, scale)).collect())
}

/// One client's prototypes for every CCMP layer of the bank, in bank order,
/// with the per-class DP sensitivities computed at submission time.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSubmission {
    pub client: usize,
    pub prototypes: Vec<Vec<Vec<f64>>>,
    pub sensitivities: Vec<Vec<f64>>,
}

/// Global class prototypes for each CCMP layer plus the buffer of client
/// submissions collected during the current update period.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    layers: Vec<usize>,
    num_classes: usize,
    dim: usize,
    rho: f64,
    period: usize,
    mu: Vec<Vec<Vec<f64>>>,
    pending: Vec<PrototypeSubmission>,
}

impl PrototypeBank {
    pub fn new(layers: &[usize], num_classes: usize, dim: usize, rho: f64, period: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(CoreError::config("rho", format!("momentum {rho} outside [0, 1]")));
        }
        if period == 0 {
            return Err(CoreError::config("update_period", "must be at least 1"));
        }
        Ok(Self {
            layers: layers.to_vec(),
            num_classes,
            dim,
            rho,
            period,
            mu: vec![vec![vec![0.0; dim]; num_classes]; layers.len()],
            pending: Vec::new(),
        })
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    fn slot(&self, layer: usize) -> Result<usize> {
        self.layers
            .iter()
            .position(|&l| l == layer)
            .ok_or_else(|| CoreError::config("ccmp_layers", format!("no prototypes for layer {layer}")))
    }

    /// Prototypes of the `cls` token entering `layer`, one per class.
    pub fn layer(&self, layer: usize) -> Result<&[Vec<f64>]> {
        Ok(&self.mu[self.slot(layer)?])
    }

    pub fn set_layer(&mut self, layer: usize, prototypes: Vec<Vec<f64>>) -> Result<()> {
        let slot = self.slot(layer)?;
        if prototypes.len() != self.num_classes || prototypes.iter().any(|p| p.len() != self.dim) {
            return Err(CoreError::Data("prototype layer has the wrong shape".into()));
        }
        self.mu[slot] = prototypes;
        Ok(())
    }

    pub fn pending(&self) -> &[PrototypeSubmission] {
        &self.pending
    }

    /// Buffers a client submission for the current period.
    pub fn submit(&mut self, submission: PrototypeSubmission) -> Result<()> {
        if submission.prototypes.len() != self.layers.len() {
            return Err(CoreError::Protocol(format!(
                "client {} submitted {} layers, bank has {}",
                submission.client,
                submission.prototypes.len(),
                self.layers.len()
            )));
        }
        self.pending.push(submission);
        Ok(())
    }

    /// Closes the period: aggregates the buffer per layer and class, applies
    /// the momentum update, then optional Laplace noise scaled by the largest
    /// sensitivity submitted for the class. Returns `D_c` per layer and class.
    pub fn end_period<R: Rng + ?Sized>(
        &mut self,
        privacy: Option<(f64, &mut R)>,
    ) -> Result<Vec<Vec<usize>>> {
        let pending = std::mem::take(&mut self.pending);
        let mut counts = vec![vec![0; self.num_classes]; self.layers.len()];
        let mut privacy = privacy;
        for slot in 0..self.layers.len() {
            for c in 0..self.num_classes {
                let subs: Vec<&[f64]> = pending.iter().map(|s| s.prototypes[slot][c].as_slice()).collect();
                let (agg, d_c) = server_aggregate(&subs, self.dim);
                let mut updated = momentum_update(&self.mu[slot][c], &agg, d_c, self.rho)?;
                if let Some((eps, rng)) = privacy.as_mut() {
                    let s_c = pending
                        .iter()
                        .filter_map(|s| s.sensitivities.get(slot).and_then(|v| v.get(c)))
                        .cloned()
                        .fold(0.0, f64::max);
                    updated = dp_apply(&updated, s_c, *eps, &mut **rng)?;
                }
                self.mu[slot][c] = updated;
                counts[slot][c] = d_c;
            }
        }
        Ok(counts)
    }
}

/// Closed-form quantities behind the mixing rule, used by the property
/// suites.
pub mod theory {
    /// Posterior mean-squared error `Σ_c s_c ‖p_c − estimate‖²`.
    pub fn posterior_mse(estimate: &[f64], prompts: &[Vec<f64>], posterior: &[f64]) -> f64 {
        prompts
            .iter()
            .zip(posterior)
            .map(|(p, w)| w * p.iter().zip(estimate).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum()
    }

    /// `Σ_c δ_c (ℓ_c + β/2 ‖m − p_c‖²)`.
    pub fn quadratic_surrogate(m: &[f64], prompts: &[Vec<f64>], priors: &[f64], losses: &[f64], beta: f64) -> f64 {
        prompts
            .iter()
            .zip(priors)
            .zip(losses)
            .map(|((p, d), l)| {
                let sq: f64 = p.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                d * (l + 0.5 * beta * sq)
            })
            .sum()
    }

    /// Gradient of [`quadratic_surrogate`] in `m`: `β Σ_c δ_c (m − p_c)`.
    pub fn quadratic_surrogate_grad(m: &[f64], prompts: &[Vec<f64>], priors: &[f64], beta: f64) -> Vec<f64> {
        let mut g = vec![0.0; m.len()];
        for (p, d) in prompts.iter().zip(priors) {
            for ((gi, mi), pi) in g.iter_mut().zip(m).zip(p) {
                *gi += beta * d * (mi - pi);
            }
        }
        g
    }
}
