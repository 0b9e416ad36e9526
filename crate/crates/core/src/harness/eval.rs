//! Reconstruction, perplexity and KL on a corpus split.

use std::collections::BTreeSet;

use crate::autodiff::{Graph, ParamStore};
use crate::corpus::{make_batches, TokenSeq};
use crate::error::{DvamError, Result};
use crate::exec::{item_seed, Exec};
use crate::model::{dvam_loss, ModelConfig, QuantMode};
use crate::prior::{predictive_probs, CodeGrids, PriorConfig};
use crate::quantizer::CodeBook;
use crate::variational::{gaussian_kl, gvam_loss};

use super::checkpoint::{ArtifactKind, Checkpoint};

/// One evaluation line. `rec`, `kl` and `commit` are per-sentence means; the
/// KL of each sentence is first divided by its length.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub rec: f64,
    pub ppl: f64,
    pub kl: Option<f64>,
    pub commit: f64,
    pub codes_used: usize,
    pub rec_total: f64,
    pub tokens: usize,
    pub sentences: usize,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "epoch,rec,ppl,kl,commit,codes_used,rec_total,tokens,sentences";

    pub fn to_csv(&self) -> String {
        let kl = self.kl.map(|k| format!("{k:.6}")).unwrap_or_else(|| "nan".into());
        format!(
            "{},{:.6},{:.6},{kl},{:.6},{},{:.6},{},{}",
            self.epoch, self.rec, self.ppl, self.commit, self.codes_used, self.rec_total, self.tokens, self.sentences
        )
    }
}

/// `exp(rec_total / tokens)`.
pub fn perplexity(rec_total: f64, tokens: usize) -> f64 {
    (rec_total / tokens as f64).exp()
}

/// Teacher-forced DVAM pass over `seqs` with no parameter updates.
pub(crate) struct DvamPass {
    pub rec_total: f64,
    pub commit_total: f64,
    pub tokens: usize,
    /// Code indices of every sentence, in the order of `seqs`.
    pub codes: Vec<Vec<usize>>,
}

pub(crate) fn dvam_pass(
    params: &ParamStore,
    config: &ModelConfig,
    book: &CodeBook,
    seqs: &[TokenSeq],
    batch_size: usize,
    exec: Exec,
) -> Result<DvamPass> {
    let batches = make_batches(seqs, batch_size, None);
    let parts = exec.map(&batches, |b| -> Result<_> {
        let g = Graph::new();
        let f = dvam_loss(&g, params, config, QuantMode::Live(book), b, 0.0)?;
        let rows: Vec<(usize, Vec<usize>)> = (0..b.size())
            .map(|r| {
                let s = r * b.t_max;
                (b.members[r], f.indices[s..s + b.lengths[r]].to_vec())
            })
            .collect();
        Ok((g.scalar_value(f.rec), g.scalar_value(f.commit), b.num_tokens(), rows))
    });
    let mut out = DvamPass {
        rec_total: 0.0,
        commit_total: 0.0,
        tokens: 0,
        codes: vec![Vec::new(); seqs.len()],
    };
    for p in parts {
        let (rec, commit, tokens, rows) = p?;
        out.rec_total += rec;
        out.commit_total += commit;
        out.tokens += tokens;
        for (i, c) in rows {
            out.codes[i] = c;
        }
    }
    Ok(out)
}

/// Negative log-probability the prior assigns to each grid row (codes plus
/// terminator when it fits), and the number of scored positions per row.
pub fn prior_row_nll(
    store: &ParamStore,
    prefix: &str,
    cfg: &PriorConfig,
    grids: &CodeGrids,
    batch_size: usize,
    exec: Exec,
) -> Vec<(f64, usize)> {
    let starts: Vec<usize> = (0..grids.len()).step_by(batch_size.max(1)).collect();
    let k1 = cfg.code_count + 1;
    let parts = exec.map(&starts, |&s| {
        let e = (s + batch_size).min(grids.len());
        let gb = grids.batch(s, e);
        let probs = predictive_probs(store, prefix, cfg, &gb);
        (0..gb.b)
            .map(|r| {
                let mut nll = 0.0;
                let mut n = 0;
                for t in 0..gb.t {
                    let p = r * gb.t + t;
                    if gb.mask[p] > 0.0 {
                        nll -= probs[p * k1 + gb.targets[p]].ln();
                        n += 1;
                    }
                }
                (nll, n)
            })
            .collect::<Vec<_>>()
    });
    parts.into_iter().flatten().collect()
}

/// Truncates per-sentence codes to grid rows of at most `t_max` codes.
pub fn to_grids(k: usize, t_max: usize, codes: &[Vec<usize>]) -> Result<CodeGrids> {
    let rows = codes.iter().map(|c| c[..c.len().min(t_max)].to_vec()).collect();
    CodeGrids::new(k, t_max, rows)
}

/// KL of each sentence against the smoothed EMA code frequencies, divided
/// by its length. Diagnostic only; nothing here feeds back into training.
pub(crate) fn unigram_kl(book: &CodeBook, codes: &[Vec<usize>]) -> f64 {
    let counts = book.ema_counts();
    let total: f64 = counts.iter().sum::<f64>() + counts.len() as f64;
    let logp: Vec<f64> = counts.iter().map(|c| ((c + 1.0) / total).ln()).collect();
    let per: f64 = codes
        .iter()
        .map(|c| -c.iter().map(|&z| logp[z]).sum::<f64>() / c.len().max(1) as f64)
        .sum();
    per / codes.len().max(1) as f64
}

pub(crate) fn evaluate_dvam_parts(
    params: &ParamStore,
    config: &ModelConfig,
    book: &CodeBook,
    prior: Option<(&ParamStore, &PriorConfig, usize)>,
    seqs: &[TokenSeq],
    batch_size: usize,
    exec: Exec,
    unigram: bool,
) -> Result<MetricsRecord> {
    if seqs.is_empty() {
        return Err(DvamError::Ingestion("cannot evaluate an empty split".into()));
    }
    let pass = dvam_pass(params, config, book, seqs, batch_size, exec)?;
    let n = seqs.len() as f64;
    let used: BTreeSet<usize> = pass.codes.iter().flatten().copied().collect();
    let kl = match prior {
        Some((store, cfg, t_max)) => {
            let grids = to_grids(cfg.code_count, t_max, &pass.codes)?;
            let rows = prior_row_nll(store, "", cfg, &grids, batch_size, exec);
            Some(rows.iter().map(|&(nll, m)| nll / m as f64).sum::<f64>() / n)
        }
        None if unigram => Some(unigram_kl(book, &pass.codes)),
        None => None,
    };
    Ok(MetricsRecord {
        epoch: 0,
        rec: pass.rec_total / n,
        ppl: perplexity(pass.rec_total, pass.tokens),
        kl,
        commit: pass.commit_total / n,
        codes_used: used.len(),
        rec_total: pass.rec_total,
        tokens: pass.tokens,
        sentences: seqs.len(),
    })
}

pub(crate) fn evaluate_gvam_parts(
    params: &ParamStore,
    config: &ModelConfig,
    prior: &PriorConfig,
    seqs: &[TokenSeq],
    batch_size: usize,
    seed: u64,
    exec: Exec,
) -> Result<MetricsRecord> {
    if seqs.is_empty() {
        return Err(DvamError::Ingestion("cannot evaluate an empty split".into()));
    }
    let batches = make_batches(seqs, batch_size, None);
    let idx: Vec<usize> = (0..batches.len()).collect();
    let d = config.code_dim;
    let parts = exec.map(&idx, |&i| -> Result<(f64, usize, f64)> {
        let b = &batches[i];
        let g = Graph::new();
        let f = gvam_loss(&g, params, config, prior, b, item_seed(seed, i as u64));
        let (mu, sigma) = (g.value(f.mu), g.value(f.sigma));
        let (mh, sh) = (g.value(f.mu_hat), g.value(f.sigma_hat));
        let mut kl_sum = 0.0;
        for r in 0..b.size() {
            let (s, e) = (r * b.t_max * d, (r * b.t_max + b.lengths[r]) * d);
            let kl = gaussian_kl(&mu[s..e], &sigma[s..e], &mh[s..e], &sh[s..e])?;
            kl_sum += kl / b.lengths[r] as f64;
        }
        Ok((g.scalar_value(f.rec), b.num_tokens(), kl_sum))
    });
    let (mut rec_total, mut tokens, mut kl_total) = (0.0, 0, 0.0);
    for p in parts {
        let (r, t, k) = p?;
        rec_total += r;
        tokens += t;
        kl_total += k;
    }
    let n = seqs.len() as f64;
    Ok(MetricsRecord {
        epoch: 0,
        rec: rec_total / n,
        ppl: perplexity(rec_total, tokens),
        kl: Some(kl_total / n),
        commit: 0.0,
        codes_used: 0,
        rec_total,
        tokens,
        sentences: seqs.len(),
    })
}

/// Seed of the reparameterization noise used by GVAM evaluation.
pub(crate) fn gvam_eval_seed(seed: u64) -> u64 {
    item_seed(seed, 0xE7A1)
}

/// Metrics of `ck` on `lines`. A DVAM checkpoint reports KL only when a
/// stage-2 `prior` is given; GVAM carries its own prior.
pub fn evaluate(ck: &Checkpoint, prior: Option<&Checkpoint>, lines: &[String], exec: Exec) -> Result<MetricsRecord> {
    let seqs = crate::corpus::encode_lines(&ck.vocab, lines);
    let cfg = &ck.config;
    match ck.kind {
        ArtifactKind::Dvam => {
            let book = ck.codebook.as_ref().expect("validated dvam checkpoint has a codebook");
            let pc = prior
                .map(|p| -> Result<_> {
                    ck.check_prior(p)?;
                    Ok((&p.params, p.config.prior(), p.config.prior_t_max))
                })
                .transpose()?;
            evaluate_dvam_parts(
                &ck.params,
                &cfg.model,
                book,
                pc.as_ref().map(|(s, c, t)| (*s, c, *t)),
                &seqs,
                cfg.batch_size,
                exec,
                false,
            )
        }
        ArtifactKind::Gvam => evaluate_gvam_parts(
            &ck.params,
            &cfg.model,
            &cfg.prior(),
            &seqs,
            cfg.batch_size,
            gvam_eval_seed(cfg.seed),
            exec,
        ),
        ArtifactKind::Prior => Err(DvamError::Config(
            "evaluate needs a dvam or gvam checkpoint, got a prior".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppl_of_zero_rec_is_one() {
        assert_eq!(perplexity(0.0, 17), 1.0);
    }

    #[test]
    fn ppl_formula() {
        let p = perplexity(259.68, 80);
        assert_eq!(p, (259.68f64 / 80.0).exp());
    }

    #[test]
    fn csv_has_header_arity() {
        let m = MetricsRecord {
            epoch: 3,
            rec: 1.0,
            ppl: 2.0,
            kl: None,
            commit: 0.5,
            codes_used: 4,
            rec_total: 10.0,
            tokens: 5,
            sentences: 10,
        };
        assert_eq!(
            m.to_csv().split(',').count(),
            MetricsRecord::CSV_HEADER.split(',').count()
        );
    }
}
