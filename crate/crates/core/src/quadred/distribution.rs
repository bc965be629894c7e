//! Quantile representations of return distributions and the losses and
//! metrics defined on them.

use super::QuadredError;

/// Quantile midpoints `(2i + 1) / (2 n)` for `i = 0..n`.
pub fn quantile_midpoints(n: usize) -> Vec<f64> {
    (0..n).map(|i| (2 * i + 1) as f64 / (2 * n) as f64).collect()
}

/// Uniform mixture of Diracs at the stored quantiles, kept sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileDistribution {
    quantiles: Vec<f64>,
}

impl QuantileDistribution {
    pub fn new(mut values: Vec<f64>) -> Result<Self, QuadredError> {
        if values.is_empty() {
            return Err(QuadredError::Empty("quantile distribution"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(QuadredError::NonFinite("quantile"));
        }
        values.sort_by(f64::total_cmp);
        Ok(Self { quantiles: values })
    }

    pub fn dirac(value: f64, n: usize) -> Result<Self, QuadredError> {
        Self::new(vec![value; n])
    }

    pub fn quantiles(&self) -> &[f64] {
        &self.quantiles
    }

    pub fn len(&self) -> usize {
        self.quantiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quantiles.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.quantiles.iter().sum::<f64>() / self.len() as f64
    }

    pub fn midpoints(&self) -> Vec<f64> {
        quantile_midpoints(self.len())
    }

    pub fn to_discrete(&self) -> DiscreteDistribution {
        let w = 1.0 / self.len() as f64;
        DiscreteDistribution {
            atoms: self.quantiles.iter().map(|&q| (q, w)).collect(),
        }
    }
}

/// Finitely supported distribution given as `(value, probability)` atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    pub atoms: Vec<(f64, f64)>,
}

impl DiscreteDistribution {
    pub fn new(atoms: Vec<(f64, f64)>) -> Result<Self, QuadredError> {
        let d = Self { atoms };
        d.validate()?;
        Ok(d)
    }

    pub fn uniform(values: &[f64]) -> Result<Self, QuadredError> {
        let w = 1.0 / values.len().max(1) as f64;
        Self::new(values.iter().map(|&v| (v, w)).collect())
    }

    pub fn validate(&self) -> Result<(), QuadredError> {
        if self.atoms.is_empty() {
            return Err(QuadredError::Empty("distribution"));
        }
        if self
            .atoms
            .iter()
            .any(|&(v, w)| !v.is_finite() || !w.is_finite() || w < 0.0)
        {
            return Err(QuadredError::NonFinite("atom"));
        }
        let total: f64 = self.atoms.iter().map(|a| a.1).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(QuadredError::Unnormalized(total));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|(v, w)| v * w).sum()
    }

    fn sorted(&self) -> Vec<(f64, f64)> {
        let mut atoms: Vec<(f64, f64)> = self.atoms.iter().copied().filter(|a| a.1 > 0.0).collect();
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        atoms
    }

    /// Generalized inverse CDF `inf { x : F(x) >= tau }`.
    pub fn inverse_cdf(&self, tau: f64) -> f64 {
        let atoms = self.sorted();
        let mut cdf = 0.0;
        for &(v, w) in &atoms {
            cdf += w;
            if cdf >= tau - 1e-12 {
                return v;
            }
        }
        atoms.last().map(|a| a.0).unwrap_or(f64::NAN)
    }
}

/// W1-optimal projection onto `n_q` equally weighted atoms: the inverse CDF
/// evaluated at the quantile midpoints.
pub fn project_w1(dist: &DiscreteDistribution, n_q: usize) -> Result<QuantileDistribution, QuadredError> {
    dist.validate()?;
    if n_q == 0 {
        return Err(QuadredError::Empty("quantile count"));
    }
    let atoms = dist.sorted();
    let taus = quantile_midpoints(n_q);
    let mut out = Vec::with_capacity(n_q);
    let mut idx = 0;
    let mut cdf = atoms[0].1;
    for tau in taus {
        while cdf < tau - 1e-12 && idx + 1 < atoms.len() {
            idx += 1;
            cdf += atoms[idx].1;
        }
        out.push(atoms[idx].0);
    }
    QuantileDistribution::new(out)
}

/// `p`-Wasserstein distance between two discrete distributions on the real
/// line, computed exactly from their inverse CDFs. `p = f64::INFINITY` gives
/// the sup-distance.
pub fn wasserstein_distance(
    a: &DiscreteDistribution,
    b: &DiscreteDistribution,
    p: f64,
) -> Result<f64, QuadredError> {
    a.validate()?;
    b.validate()?;
    if !(p >= 1.0) {
        return Err(QuadredError::Invalid("p must be at least 1"));
    }
    let (sa, sb) = (a.sorted(), b.sorted());
    let (mut i, mut j) = (0, 0);
    let (mut ca, mut cb) = (sa[0].1, sb[0].1);
    let mut level = 0.0;
    let mut acc = 0.0f64;
    loop {
        let next = ca.min(cb).min(1.0);
        let width = next - level;
        if width > 0.0 {
            let diff = (sa[i].0 - sb[j].0).abs();
            if p.is_infinite() {
                acc = acc.max(diff);
            } else {
                acc += diff.powf(p) * width;
            }
            level = next;
        }
        let a_done = i + 1 >= sa.len();
        let b_done = j + 1 >= sb.len();
        if level >= 1.0 - 1e-15 || (a_done && b_done) {
            break;
        }
        if ca <= cb && !a_done {
            i += 1;
            ca += sa[i].1;
        } else if !b_done {
            j += 1;
            cb += sb[j].1;
        } else {
            i += 1;
            ca += sa[i].1;
        }
    }
    Ok(if p.is_infinite() { acc } else { acc.powf(1.0 / p) })
}

fn huber(delta: f64, kappa: f64) -> (f64, f64) {
    if delta.abs() <= kappa {
        (0.5 * delta * delta, delta)
    } else {
        (kappa * (delta.abs() - 0.5 * kappa), kappa * delta.signum())
    }
}

/// Quantile Huber loss `(1/N) sum_i sum_j rho^kappa_{tau_i}(y_j - q_i)` where
/// `rho^kappa_tau(d) = |tau - 1{d < 0}| Huber_kappa(d) / kappa` and `tau_i` is
/// the midpoint of predicted quantile `i`. Returns the loss and its gradient
/// with respect to `predicted`.
pub fn quantile_huber_loss(
    predicted: &[f64],
    targets: &[f64],
    kappa: f64,
) -> Result<(f64, Vec<f64>), QuadredError> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(QuadredError::Invalid("kappa must be positive"));
    }
    if predicted.is_empty() || targets.is_empty() {
        return Err(QuadredError::Empty("quantile loss input"));
    }
    let n = predicted.len() as f64;
    let taus = quantile_midpoints(predicted.len());
    let mut loss = 0.0;
    let mut grad = vec![0.0; predicted.len()];
    for (i, (&q, &tau)) in predicted.iter().zip(&taus).enumerate() {
        for &y in targets {
            let d = y - q;
            let weight = (tau - if d < 0.0 { 1.0 } else { 0.0 }).abs();
            let (h, dh) = huber(d, kappa);
            loss += weight * h / kappa;
            grad[i] -= weight * dh / kappa;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}
