//! Prior sampling followed by free-running decoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::corpus::{BOS, EOS};
use crate::error::{DvamError, Result};
use crate::exec::{item_seed, Exec};
use crate::model::{DecoderContext, ModelVars};
use crate::prior::sample_codes;

use super::checkpoint::{ArtifactKind, Checkpoint};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedSentence {
    pub codes: Vec<usize>,
    /// Emitted token ids, including the final EOS when `terminated`.
    pub tokens: Vec<usize>,
    pub text: String,
    /// False when the length cap was hit before EOS.
    pub terminated: bool,
}

/// Draws from `softmax(logits / temperature)`.
pub fn sample_logits<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| ((l - m) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, x) in w.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    w.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

/// `n` sentences from a DVAM checkpoint and its stage-2 prior. Sample `i`
/// depends only on `seed` and `i`, so the result is the same for every
/// execution mode.
pub fn generate(
    ck: &Checkpoint,
    prior: &Checkpoint,
    n: usize,
    temperature: f64,
    seed: u64,
    exec: Exec,
) -> Result<Vec<GeneratedSentence>> {
    if ck.kind != ArtifactKind::Dvam {
        return Err(DvamError::Config(format!(
            "generation needs a dvam checkpoint, got {}",
            ck.kind.name()
        )));
    }
    ck.check_prior(prior)?;
    if !(temperature > 0.0) {
        return Err(DvamError::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let book = ck.codebook.as_ref().expect("validated dvam checkpoint has a codebook");
    let pcfg = prior.config.prior();
    let t_max = prior.config.prior_t_max;
    let cap = ck.config.gen_max_len.max(1);
    let d = book.dim();

    let out = exec.map_range(n, |i| -> Result<GeneratedSentence> {
        let sample = sample_codes(&prior.params, "", &pcfg, t_max, temperature, item_seed(seed, 2 * i as u64))?;
        let codes = sample.codes;
        let mut rows = Vec::with_capacity(codes.len() * d);
        for &z in &codes {
            rows.extend_from_slice(book.vector(z));
        }
        let g = Graph::new();
        let vars = ModelVars::load(&g, &ck.params);
        let e = g.constant(&[1, codes.len(), d], rows);
        let mut ctx = DecoderContext::new(&g, &vars, e, &[codes.len()]);
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, 2 * i as u64 + 1));
        let mut prev = BOS;
        let mut tokens = Vec::new();
        let mut terminated = false;
        while tokens.len() < cap {
            let logits = g.value(ctx.step(&g, &vars, &ck.config.model, &[prev]));
            let tok = sample_logits(&logits, temperature, &mut rng);
            tokens.push(tok);
            if tok == EOS {
                terminated = true;
                break;
            }
            prev = tok;
        }
        Ok(GeneratedSentence {
            text: ck.vocab.decode(&tokens),
            codes,
            tokens,
            terminated,
        })
    });
    out.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_follows_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = [0.0, (3.0f64).ln()];
        let n = 20_000;
        let ones = (0..n).filter(|_| sample_logits(&logits, 1.0, &mut rng) == 1).count();
        let p = ones as f64 / n as f64;
        assert!((p - 0.75).abs() < 4.0 * (0.75 * 0.25 / n as f64).sqrt());
    }

    #[test]
    fn low_temperature_is_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(sample_logits(&[0.1, 0.3, 0.2], 1e-4, &mut rng), 1);
        }
    }
}
