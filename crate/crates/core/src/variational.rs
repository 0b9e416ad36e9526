//! Posterior/prior divergences and the Gaussian-attention objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::corpus::Batch;
use crate::error::{DvamError, Result};
use crate::model::{decode_teacher_forced, encode, reconstruction_loss, ModelConfig, ModelVars};
use crate::prior::{PriorConfig, PriorVars, SIGMA_FLOOR};

/// KL between a one-hot posterior (`indices`) and a categorical prior given as
/// `T x K` rows. The posterior has zero entropy, so this is the negative
/// log-probability of the selected codes.
pub fn discrete_kl(indices: &[usize], prior_probs: &[f64], k: usize) -> Result<f64> {
    if prior_probs.len() != indices.len() * k {
        return Err(DvamError::Dimension(format!(
            "{} prior values for {} positions of K={k}",
            prior_probs.len(),
            indices.len()
        )));
    }
    let mut kl = 0.0;
    for (t, (&j, row)) in indices.iter().zip(prior_probs.chunks(k)).enumerate() {
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DvamError::contract(format!("prior row {t} sums to {total}")));
        }
        if j >= k {
            return Err(DvamError::contract(format!("code {j} >= K={k}")));
        }
        if row[j] <= 0.0 {
            return Err(DvamError::InfiniteDivergence { position: t, index: j });
        }
        kl -= row[j].ln();
    }
    Ok(kl)
}

/// Closed-form KL between diagonal Gaussians, summed over positions and
/// dimensions:
/// `1/2 (log(s_hat^2 / s^2) - 1 + (s^2 + (m_hat - m)^2) / s_hat^2)`.
pub fn gaussian_kl(mu: &[f64], sigma: &[f64], mu_hat: &[f64], sigma_hat: &[f64]) -> Result<f64> {
    let n = mu.len();
    if sigma.len() != n || mu_hat.len() != n || sigma_hat.len() != n {
        return Err(DvamError::Dimension("Gaussian parameter lengths differ".into()));
    }
    if sigma.iter().chain(sigma_hat).any(|&s| !(s > 0.0)) {
        return Err(DvamError::contract("Gaussian scales must be positive"));
    }
    Ok((0..n)
        .map(|i| {
            let (s2, sh2) = (sigma[i] * sigma[i], sigma_hat[i] * sigma_hat[i]);
            let dm = mu_hat[i] - mu[i];
            0.5 * ((sh2 / s2).ln() - 1.0 + (s2 + dm * dm) / sh2)
        })
        .sum())
}

/// Differentiable version of [`gaussian_kl`] for `[B, T, D]` tensors, with an
/// optional `[B, T]` position mask.
pub fn gaussian_kl_graph(g: &Graph, mu: Var, sigma: Var, mu_hat: Var, sigma_hat: Var, mask: Option<Var>) -> Var {
    let log_ratio = g.scale(g.sub(g.log(sigma_hat), g.log(sigma)), 2.0);
    let dm = g.sub(mu_hat, mu);
    let num = g.add(g.square(sigma), g.square(dm));
    let frac = g.div(num, g.square(sigma_hat));
    let one = g.scalar(1.0);
    let per = g.scale(g.add(g.sub(log_ratio, one), frac), 0.5);
    let rank = g.shape(per).len();
    let per_pos = g.sum_axis(per, rank - 1);
    match mask {
        Some(m) => g.sum(g.mul(per_pos, m)),
        None => g.sum(per_pos),
    }
}

/// Standard-normal noise of length `n` from `seed`.
pub fn standard_normal(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `z = mu + sigma * eps` with seeded noise; gradients reach `mu` and `sigma`.
pub fn reparameterize(g: &Graph, mu: Var, sigma: Var, seed: u64) -> Var {
    let shape = g.shape(mu);
    let eps = g.constant(&shape, standard_normal(shape.iter().product(), seed));
    g.add(mu, g.mul(sigma, eps))
}

/// Posterior scale `[B, T, D]` from the encoder LSTM states; the posterior
/// mean is the projected state itself.
pub fn gaussian_head(g: &Graph, vars: &ModelVars, states: Var) -> Var {
    let (w, b) = vars
        .sigma
        .expect("Gaussian head requested from a model without sigma parameters");
    g.add(g.softplus(g.linear(states, w, Some(b))), g.scalar(SIGMA_FLOOR))
}

pub struct GvamForward {
    pub total: Var,
    pub rec: Var,
    pub kl: Var,
    pub mu: Var,
    pub sigma: Var,
    pub z: Var,
    pub mu_hat: Var,
    pub sigma_hat: Var,
}

pub const GVAM_PRIOR_PREFIX: &str = "prior.";

/// Reconstruction plus the Gaussian KL against the jointly trained
/// autoregressive prior. `store` holds the seq2seq parameters and the prior
/// under [`GVAM_PRIOR_PREFIX`].
pub fn gvam_loss(
    g: &Graph,
    store: &ParamStore,
    config: &ModelConfig,
    prior: &PriorConfig,
    batch: &Batch,
    seed: u64,
) -> GvamForward {
    let vars = ModelVars::load(g, store);
    let enc = encode(g, &vars, batch);
    let mu = enc.projected;
    let sigma = gaussian_head(g, &vars, enc.states);
    let z = reparameterize(g, mu, sigma, seed);

    let pvars = PriorVars::load(g, store, GVAM_PRIOR_PREFIX, prior);
    let (mu_hat, sigma_hat) = pvars.gaussian_params(g, z);
    let mask = g.constant(&[batch.size(), batch.t_max], batch.mask());
    let kl = gaussian_kl_graph(g, mu, sigma, mu_hat, sigma_hat, Some(mask));

    let logits = decode_teacher_forced(g, &vars, config, z, batch);
    let rec = reconstruction_loss(g, logits, batch);
    GvamForward {
        total: g.add(rec, kl),
        rec,
        kl,
        mu,
        sigma,
        z,
        mu_hat,
        sigma_hat,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_prior_kl() {
        let k = 512;
        let probs = vec![1.0 / k as f64; 10 * k];
        let idx: Vec<usize> = (0..10).map(|i| i * 37 % k).collect();
        let kl = discrete_kl(&idx, &probs, k).unwrap();
        assert!((kl - 10.0 * (512f64).ln()).abs() < 1e-9);
        assert!((kl - 62.383).abs() < 1e-3);
    }

    #[test]
    fn point_mass_prior_kl_is_zero() {
        let probs = [0.0, 1.0, 0.0, 1.0, 0.0, 0.0];
        assert_eq!(discrete_kl(&[1, 0], &probs, 3).unwrap(), 0.0);
    }

    #[test]
    fn zero_probability_is_explicit_error() {
        let probs = [0.5, 0.5, 0.0];
        assert!(matches!(
            discrete_kl(&[2], &probs, 3),
            Err(DvamError::InfiniteDivergence { position: 0, index: 2 })
        ));
        assert!(discrete_kl(&[0], &[0.5, 0.6, 0.0], 3).is_err());
    }

    #[test]
    fn gaussian_kl_examples() {
        assert_eq!(gaussian_kl(&[0.3], &[0.7], &[0.3], &[0.7]).unwrap(), 0.0);
        assert_eq!(gaussian_kl(&[1.0], &[1.0], &[0.0], &[1.0]).unwrap(), 0.5);
        assert!(gaussian_kl(&[1.0], &[0.0], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn gaussian_kl_is_linear_in_length() {
        let mu = [0.2, -0.4, 1.0];
        let s = [0.5, 1.3, 0.9];
        let mh = [0.0, 0.1, 0.7];
        let sh = [1.0, 0.8, 1.1];
        let once = gaussian_kl(&mu, &s, &mh, &sh).unwrap();
        let twice = gaussian_kl(
            &[mu, mu].concat(),
            &[s, s].concat(),
            &[mh, mh].concat(),
            &[sh, sh].concat(),
        )
        .unwrap();
        assert!((twice - 2.0 * once).abs() < 1e-14);
    }

    #[test]
    fn graph_kl_matches_value_kl() {
        let g = Graph::new();
        let mu = [0.2, -0.4, 1.0, 0.0];
        let s = [0.5, 1.3, 0.9, 2.0];
        let mh = [0.0, 0.1, 0.7, -1.0];
        let sh = [1.0, 0.8, 1.1, 0.3];
        let v = |x: &[f64]| g.constant(&[1, 2, 2], x.to_vec());
        let kl = gaussian_kl_graph(&g, v(&mu), v(&s), v(&mh), v(&sh), None);
        let direct = gaussian_kl(&mu, &s, &mh, &sh).unwrap();
        assert!((g.scalar_value(kl) - direct).abs() < 1e-13);
    }

    #[test]
    fn reparameterize_limits_and_seed() {
        let g = Graph::new();
        let mu = g.constant(&[3], vec![1.0, -2.0, 0.5]);
        let tiny = g.constant(&[3], vec![1e-300; 3]);
        assert_eq!(g.value(reparameterize(&g, mu, tiny, 1)), g.value(mu));
        let s = g.constant(&[3], vec![1.0; 3]);
        assert_eq!(
            g.value(reparameterize(&g, mu, s, 7)),
            g.value(reparameterize(&g, mu, s, 7))
        );
    }

    #[test]
    fn reparameterized_mean() {
        let n = 100_000;
        let eps = standard_normal(n, 11);
        let (mu, sigma) = (0.7, 1.9);
        let mean = eps.iter().map(|e| mu + sigma * e).sum::<f64>() / n as f64;
        assert!((mean - mu).abs() < 4.0 * sigma / (n as f64).sqrt());
    }
}
