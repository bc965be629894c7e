//! Exact distributional dynamic programming on small finite MDPs.

use rand::Rng;

use super::distribution::{project_w1, DiscreteDistribution, QuantileDistribution};
use super::QuadredError;

/// Finite MDP with deterministic rewards `r(s, a)` and transition kernel
/// `p(s' | s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// Row-major `[s][a][s']`.
    pub transitions: Vec<f64>,
    /// Row-major `[s][a]`.
    pub rewards: Vec<f64>,
    pub gamma: f64,
}

impl Mdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        gamma: f64,
    ) -> Result<Self, QuadredError> {
        let mdp = Self {
            n_states,
            n_actions,
            transitions,
            rewards,
            gamma,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    /// Dense random kernel with a few zeroed entries and rewards in `[-1, 1]`.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut R) -> Self {
        let mut transitions = vec![0.0; n_states * n_actions * n_states];
        for row in transitions.chunks_mut(n_states) {
            for p in row.iter_mut() {
                *p = if rng.random_bool(0.3) { 0.0 } else { rng.random::<f64>() };
            }
            let total: f64 = row.iter().sum();
            if total == 0.0 {
                row[rng.random_range(0..n_states)] = 1.0;
            } else {
                row.iter_mut().for_each(|p| *p /= total);
            }
        }
        let rewards = (0..n_states * n_actions).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self {
            n_states,
            n_actions,
            transitions,
            rewards,
            gamma,
        }
    }

    pub fn validate(&self) -> Result<(), QuadredError> {
        let (s, a) = (self.n_states, self.n_actions);
        if s == 0 || a == 0 {
            return Err(QuadredError::Empty("MDP"));
        }
        if self.transitions.len() != s * a * s || self.rewards.len() != s * a {
            return Err(QuadredError::Invalid("MDP table sizes"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(QuadredError::Invalid("gamma must lie in [0, 1)"));
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(QuadredError::NonFinite("reward"));
        }
        for row in self.transitions.chunks(s) {
            if row.iter().any(|&p| !(p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(QuadredError::Invalid("transition rows must be distributions"));
            }
        }
        Ok(())
    }

    pub fn p(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transitions[(s * self.n_actions + a) * self.n_states + next]
    }

    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    fn check_policy(&self, policy: &[usize]) -> Result<(), QuadredError> {
        if policy.len() != self.n_states || policy.iter().any(|&a| a >= self.n_actions) {
            return Err(QuadredError::Invalid("policy must map every state to a valid action"));
        }
        Ok(())
    }
}

/// Result of projected distributional policy evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularEvaluation {
    /// Indexed by `s * n_actions + a`.
    pub distributions: Vec<QuantileDistribution>,
    /// `sup_{s,a} W_inf(Z_{k+1}(s,a), Z_k(s,a))` for every iteration run.
    pub distances: Vec<f64>,
}

impl TabularEvaluation {
    pub fn q_values(&self) -> Vec<f64> {
        self.distributions.iter().map(QuantileDistribution::mean).collect()
    }
}

fn sup_distance(a: &[QuantileDistribution], b: &[QuantileDistribution]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.quantiles().iter().zip(y.quantiles()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

fn backup(
    mdp: &Mdp,
    policy: &[usize],
    z: &[QuantileDistribution],
    n_q: usize,
) -> Result<Vec<QuantileDistribution>, QuadredError> {
    let w = 1.0 / n_q as f64;
    let mut out = Vec::with_capacity(z.len());
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let mut atoms = Vec::new();
            for next in 0..mdp.n_states {
                let p = mdp.p(s, a, next);
                if p == 0.0 {
                    continue;
                }
                let zn = &z[next * mdp.n_actions + policy[next]];
                atoms.extend(zn.quantiles().iter().map(|q| (mdp.r(s, a) + mdp.gamma * q, p * w)));
            }
            let total: f64 = atoms.iter().map(|a| a.1).sum();
            atoms.iter_mut().for_each(|a| a.1 /= total);
            out.push(project_w1(&DiscreteDistribution { atoms }, n_q)?);
        }
    }
    Ok(out)
}

/// Iterate `Z <- Pi_W1 T^pi Z` from `Z = 0` for at most `iterations` steps,
/// stopping once successive iterates are within `tol` in sup-W_inf.
pub fn tabular_distributional_iteration(
    mdp: &Mdp,
    policy: &[usize],
    n_q: usize,
    iterations: usize,
    tol: f64,
) -> Result<TabularEvaluation, QuadredError> {
    mdp.validate()?;
    mdp.check_policy(policy)?;
    if n_q == 0 {
        return Err(QuadredError::Empty("quantile count"));
    }
    let mut z = vec![QuantileDistribution::dirac(0.0, n_q)?; mdp.n_states * mdp.n_actions];
    let mut distances = Vec::new();
    for _ in 0..iterations {
        let next = backup(mdp, policy, &z, n_q)?;
        let d = sup_distance(&next, &z);
        z = next;
        distances.push(d);
        if d <= tol {
            break;
        }
    }
    Ok(TabularEvaluation {
        distributions: z,
        distances,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyIterate {
    pub policy: Vec<usize>,
    /// Mean of the evaluated return distribution, indexed `s * n_actions + a`.
    pub q: Vec<f64>,
}

/// Greedy action per state; the incumbent action wins ties, then the lowest
/// index.
pub fn greedy_policy(mdp: &Mdp, q: &[f64], incumbent: &[usize]) -> Vec<usize> {
    (0..mdp.n_states)
        .map(|s| {
            let row = &q[s * mdp.n_actions..(s + 1) * mdp.n_actions];
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if row[incumbent[s]] >= best - 1e-12 {
                incumbent[s]
            } else {
                row.iter().position(|&v| v >= best - 1e-12).unwrap_or(0)
            }
        })
        .collect()
}

/// Alternate distributional evaluation with greedy improvement on the
/// quantile means until the policy is stable. Returns every evaluated iterate.
pub fn tabular_policy_improvement(
    mdp: &Mdp,
    n_q: usize,
    initial: &[usize],
    max_rounds: usize,
) -> Result<Vec<PolicyIterate>, QuadredError> {
    mdp.check_policy(initial)?;
    let mut policy = initial.to_vec();
    let mut history = Vec::new();
    for _ in 0..max_rounds {
        let eval = tabular_distributional_iteration(mdp, &policy, n_q, 20_000, 1e-13)?;
        let q = eval.q_values();
        let next = greedy_policy(mdp, &q, &policy);
        let stable = next == policy;
        history.push(PolicyIterate {
            policy: policy.clone(),
            q,
        });
        if stable {
            break;
        }
        policy = next;
    }
    Ok(history)
}
