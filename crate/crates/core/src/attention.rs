//! Additive attention of the decoder state over a code sequence.
//!
//! Scores are `v . tanh(W_e e_i + W_d h_prev + b)`, padding positions are
//! pushed to [`NEG_INF`] before the softmax, and the context vector is the
//! attention-weighted sum of the code rows.

use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Tensor, Var, NEG_INF};
use crate::error::{DvamError, Result};

/// Parameter shapes: `w_e [D, Da]`, `w_d [H, Da]`, `b [Da]`, `v [Da, 1]`.
pub fn init_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    code_dim: usize,
    dec_hidden: usize,
    width: usize,
    scale: f64,
    rng: &mut R,
) -> Result<()> {
    store.insert(format!("{prefix}w_e"), Tensor::uniform(&[code_dim, width], scale, rng).trainable())?;
    store.insert(format!("{prefix}w_d"), Tensor::uniform(&[dec_hidden, width], scale, rng).trainable())?;
    store.insert(format!("{prefix}b"), Tensor::zeros(&[width]).trainable())?;
    store.insert(format!("{prefix}v"), Tensor::uniform(&[width, 1], scale, rng).trainable())?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_e: Var,
    pub w_d: Var,
    pub b: Var,
    pub v: Var,
}

impl AttentionVars {
    pub fn load(g: &Graph, store: &ParamStore, prefix: &str) -> Self {
        AttentionVars {
            w_e: g.param(store, &format!("{prefix}w_e")),
            w_d: g.param(store, &format!("{prefix}w_d")),
            b: g.param(store, &format!("{prefix}b")),
            v: g.param(store, &format!("{prefix}v")),
        }
    }

    /// `W_e e_i` for every code row; `[B, T, D] -> [B, T, Da]`. Computed once
    /// per sequence and reused at every decoder step.
    pub fn project_codes(&self, g: &Graph, codes: Var) -> Var {
        g.linear(codes, self.w_e, None)
    }

    /// Attention weights `[B, T]` given projected codes `[B, T, Da]`, the
    /// previous decoder state `[B, H]` and an additive mask `[B, T]`.
    pub fn weights(&self, g: &Graph, codes_proj: Var, dec_prev: Var, mask_bias: Var) -> Var {
        let cs = g.shape(codes_proj);
        let (b, t, da) = (cs[0], cs[1], cs[2]);
        let q = g.linear(dec_prev, self.w_d, Some(self.b));
        let q = g.reshape(q, &[b, 1, da]);
        let hidden = g.tanh(g.add(codes_proj, q));
        let scores = g.reshape(g.linear(hidden, self.v, None), &[b, t]);
        g.softmax(g.add(scores, mask_bias))
    }
}

/// `c = sum_i alpha_i e_i`; `[B, T] x [B, T, D] -> [B, D]`.
pub fn context_vector(g: &Graph, alpha: Var, codes: Var) -> Var {
    let s = g.shape(codes);
    let a = g.reshape(alpha, &[s[0], s[1], 1]);
    g.sum_axis(g.mul(a, codes), 1)
}

/// `0` on attendable positions, [`NEG_INF`] beyond each row's length.
pub fn mask_bias(lengths: &[usize], t_max: usize) -> Vec<f64> {
    let mut m = vec![NEG_INF; lengths.len() * t_max];
    for (r, &len) in lengths.iter().enumerate() {
        m[r * t_max..r * t_max + len.min(t_max)].fill(0.0);
    }
    m
}

/// Attention weights for a single decoder step over `codes` (`T x D`,
/// row-major), attending to the first `valid_len` rows only.
pub fn attention_weights(
    params: &ParamStore,
    prefix: &str,
    codes: &[f64],
    code_dim: usize,
    dec_prev: &[f64],
    valid_len: usize,
) -> Result<Vec<f64>> {
    if code_dim == 0 || codes.len() % code_dim != 0 || codes.is_empty() {
        return Err(DvamError::Dimension(format!(
            "{} code values do not form rows of D={code_dim}",
            codes.len()
        )));
    }
    let t = codes.len() / code_dim;
    if valid_len == 0 {
        return Err(DvamError::contract("attention needs at least one attendable position"));
    }
    if valid_len > t {
        return Err(DvamError::contract(format!("valid_len {valid_len} exceeds T={t}")));
    }
    let g = Graph::new();
    let vars = AttentionVars::load(&g, params, prefix);
    let c = g.constant(&[1, t, code_dim], codes.to_vec());
    let h = g.constant(&[1, dec_prev.len()], dec_prev.to_vec());
    let m = g.constant(&[1, t], mask_bias(&[valid_len], t));
    let a = vars.weights(&g, vars.project_codes(&g, c), h, m);
    Ok(g.value(a))
}

/// Context vector for one step: `alpha` over `T` rows of `codes`.
pub fn context(alpha: &[f64], codes: &[f64], code_dim: usize) -> Result<Vec<f64>> {
    if codes.len() != alpha.len() * code_dim {
        return Err(DvamError::Dimension(format!(
            "{} weights against {} code values of D={code_dim}",
            alpha.len(),
            codes.len()
        )));
    }
    let total: f64 = alpha.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DvamError::contract(format!("attention weights sum to {total}")));
    }
    let mut c = vec![0.0; code_dim];
    for (a, row) in alpha.iter().zip(codes.chunks(code_dim)) {
        for (ci, x) in c.iter_mut().zip(row) {
            *ci += a * x;
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(d: usize, h: usize, da: usize, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_params(&mut s, "attn.", d, h, da, 0.8, &mut rng).unwrap();
        s.get_mut("attn.b").unwrap().data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
        s
    }

    #[test]
    fn identical_rows_give_uniform_weights() {
        let p = params(2, 3, 4, 1);
        let codes = [0.3, -0.2, 0.3, -0.2, 0.3, -0.2, 9.0, 9.0];
        let a = attention_weights(&p, "attn.", &codes, 2, &[0.1, 0.2, 0.3], 3).unwrap();
        for &x in &a[..3] {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(a[3], 0.0);
    }

    #[test]
    fn zero_v_gives_uniform_weights() {
        let mut p = params(2, 3, 4, 2);
        p.get_mut("attn.v").unwrap().data_mut().fill(0.0);
        let codes = [0.3, -0.2, 1.0, 2.0];
        let a = attention_weights(&p, "attn.", &codes, 2, &[0.1, 0.2, 0.3], 2).unwrap();
        assert_eq!(a, vec![0.5, 0.5]);
    }

    #[test]
    fn zero_valid_len_is_rejected() {
        let p = params(2, 3, 4, 3);
        let r = attention_weights(&p, "attn.", &[0.0, 0.0], 2, &[0.0; 3], 0);
        assert!(matches!(r, Err(DvamError::Contract(_))));
    }

    #[test]
    fn context_examples() {
        assert_eq!(context(&[0.0, 1.0], &[5.0, 6.0, 7.0, 8.0], 2).unwrap(), vec![7.0, 8.0]);
        assert_eq!(context(&[0.5, 0.5], &[0.0, 0.0, 2.0, 2.0], 2).unwrap(), vec![1.0, 1.0]);
        assert!(context(&[0.5, 0.6], &[0.0, 0.0, 2.0, 2.0], 2).is_err());
    }
}
