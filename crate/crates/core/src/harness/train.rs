//! Stage-1 DVAM training, stage-2 prior training and joint GVAM training.

use std::collections::VecDeque;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{clip_grad_norm, sgd_step, Gradients, Graph, ParamStore};
use crate::corpus::{build_vocab, encode_lines, make_batches, Batch, Corpus, TokenSeq};
use crate::error::{DvamError, Result};
use crate::exec::{item_seed, Exec};
use crate::model::{self, dvam_loss, encode, valid_rows, LatentKind, ModelVars, QuantMode};
use crate::prior::{self, prior_nll, CodeGrids, PriorOutput, PriorVars};
use crate::quantizer::CodeBook;
use crate::variational::{gvam_loss, GVAM_PRIOR_PREFIX};

use super::checkpoint::{ArtifactKind, Checkpoint, RngState};
use super::config::TrainConfig;
use super::eval::{dvam_pass, evaluate_dvam_parts, evaluate_gvam_parts, gvam_eval_seed, prior_row_nll, to_grids, MetricsRecord};

/// Encoder rows kept for dead-code revival.
const REVIVAL_POOL_ROWS: usize = 4096;

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub exec: Exec,
    /// Log a KL column during stage 1 (DVAM only). Pure diagnostics.
    pub log_kl: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            exec: Exec::default(),
            log_kl: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub beta: f64,
    pub lr: f64,
    /// Training reconstruction per token over the epoch.
    pub train_rec: f64,
    pub revived: usize,
    pub val: MetricsRecord,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation state.
    pub checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
    /// Parameter digest after every epoch.
    pub trajectory: Vec<[u8; 32]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Debug, Clone)]
pub struct PriorOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<PriorEpoch>,
    pub train_grids: CodeGrids,
    pub val_grids: CodeGrids,
    /// Per-position negative log-likelihood of the validation grids under
    /// the retained prior.
    pub val_nll_per_token: f64,
}

#[derive(Debug, PartialEq, Eq)]
enum Plateau {
    Improved,
    Waiting,
    Decayed,
    Stop,
}

/// Learning-rate decay on a stalled validation loss.
struct LrSchedule {
    lr: f64,
    factor: f64,
    patience: usize,
    max_decays: usize,
    best: f64,
    stalled: usize,
    decays: usize,
}

impl LrSchedule {
    fn new(cfg: &TrainConfig) -> Self {
        LrSchedule {
            lr: cfg.lr,
            factor: cfg.lr_decay_factor,
            patience: cfg.patience_epochs,
            max_decays: cfg.max_decays,
            best: f64::INFINITY,
            stalled: 0,
            decays: 0,
        }
    }

    fn observe(&mut self, val: f64) -> Plateau {
        if val < self.best {
            self.best = val;
            self.stalled = 0;
            return Plateau::Improved;
        }
        self.stalled += 1;
        if self.stalled < self.patience {
            return Plateau::Waiting;
        }
        if self.decays == self.max_decays {
            return Plateau::Stop;
        }
        self.stalled = 0;
        self.decays += 1;
        self.lr *= self.factor;
        Plateau::Decayed
    }
}

fn check_finite(v: f64, epoch: usize, batch: usize, term: &'static str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(DvamError::NonFinite { epoch, batch, term })
    }
}

/// Sums shard gradients in order, clips, then takes one SGD step.
fn apply(params: &mut ParamStore, grads: &[Gradients], lr: f64, clip: f64, epoch: usize, batch: usize) -> Result<()> {
    params.zero_grad();
    for g in grads {
        g.accumulate_into(params)?;
    }
    for (_, t) in params.iter() {
        if let Some(g) = t.grad() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(DvamError::NonFinite { epoch, batch, term: "gradient" });
            }
        }
    }
    clip_grad_norm(params, clip);
    sgd_step(params, lr)
}

fn prepare(config: &TrainConfig, corpus: &Corpus, kind: LatentKind) -> Result<(TrainConfig, crate::corpus::Vocabulary, Vec<TokenSeq>, Vec<TokenSeq>)> {
    if corpus.train.is_empty() {
        return Err(DvamError::Ingestion("training split is empty".into()));
    }
    let vocab = build_vocab(&corpus.train, config.max_vocab, config.min_freq)?;
    let mut cfg = config.clone();
    cfg.kind = kind;
    cfg.model.vocab_size = vocab.len();
    let train = encode_lines(&vocab, &corpus.train);
    let val_lines = if corpus.val.is_empty() {
        log::warn!("no validation split, monitoring the training split");
        &corpus.train
    } else {
        &corpus.val
    };
    let val = encode_lines(&vocab, val_lines);
    if cfg.gen_max_len == 0 {
        cfg.gen_max_len = 2 * train.iter().map(|s| s.len()).max().unwrap_or(1);
    }
    cfg.validate()?;
    Ok((cfg, vocab, train, val))
}

/// Seeds the codebook from encoder states of the leading batches.
fn init_codebook(params: &ParamStore, cfg: &TrainConfig, batches: &[Batch], seed: u64) -> Result<CodeBook> {
    let (k, d) = (cfg.model.code_count, cfg.model.code_dim);
    let mut rows = Vec::new();
    for b in batches {
        let g = Graph::new();
        let vars = ModelVars::load(&g, params);
        let hidden = g.value(encode(&g, &vars, b).projected);
        rows.extend(valid_rows(b, &hidden, &[], d).0);
        if rows.len() >= k * d {
            break;
        }
    }
    let mut book = CodeBook::from_rows(k, d, &rows, cfg.ema_decay, seed)?;
    book.dead_threshold = cfg.dead_threshold;
    Ok(book)
}

struct ShardStep {
    grads: Gradients,
    rec: f64,
    commit: f64,
    rows: Vec<f64>,
    indices: Vec<usize>,
}

/// Stage 1: reconstruction plus commitment with the straight-through
/// estimator, and EMA codebook updates after every SGD step.
pub fn train_dvam(config: &TrainConfig, corpus: &Corpus, opts: &TrainOptions) -> Result<TrainOutcome> {
    let (cfg, vocab, train, val) = prepare(config, corpus, LatentKind::Discrete)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model::init_params(&cfg.model, LatentKind::Discrete, &mut rng)?;
    let d = cfg.model.code_dim;
    let mut sched = LrSchedule::new(&cfg);
    let mut book: Option<CodeBook> = None;
    let mut pool: VecDeque<f64> = VecDeque::new();
    let mut history = Vec::new();
    let mut trajectory = Vec::new();
    let mut best: Option<(Checkpoint, usize)> = None;

    for epoch in 0..cfg.max_epochs {
        let beta = cfg.beta(epoch);
        let lr = sched.lr;
        let batches = make_batches(&train, cfg.batch_size, Some(rng.random()));
        if book.is_none() {
            book = Some(init_codebook(&params, &cfg, &batches, rng.random())?);
        }
        let (mut rec_sum, mut tokens) = (0.0, 0usize);
        let mut idle = vec![true; cfg.model.code_count];
        for (bi, batch) in batches.iter().enumerate() {
            let cb = book.as_mut().unwrap();
            let shards = batch.shards(cfg.shard_size);
            let inv_b = 1.0 / batch.size() as f64;
            let p = &params;
            let cbr: &CodeBook = cb;
            let steps = opts.exec.map(&shards, |s| -> Result<ShardStep> {
                let g = Graph::new();
                let f = dvam_loss(&g, p, &cfg.model, QuantMode::Live(cbr), s, beta)?;
                let grads = g.backward(g.scale(f.total, inv_b))?;
                let (rows, indices) = valid_rows(s, &f.hidden, &f.indices, d);
                Ok(ShardStep {
                    grads,
                    rec: g.scalar_value(f.rec),
                    commit: g.scalar_value(f.commit),
                    rows,
                    indices,
                })
            });
            let steps = steps.into_iter().collect::<Result<Vec<_>>>()?;
            let (mut rows, mut indices, mut grads) = (Vec::new(), Vec::new(), Vec::new());
            for s in steps {
                check_finite(s.rec, epoch, bi, "reconstruction")?;
                check_finite(s.commit, epoch, bi, "commitment")?;
                rec_sum += s.rec;
                rows.extend(s.rows);
                indices.extend(s.indices);
                grads.push(s.grads);
            }
            tokens += batch.num_tokens();
            apply(&mut params, &grads, lr, cfg.grad_clip, epoch, bi)?;
            cb.ema_update(&rows, &indices)?;
            indices.iter().for_each(|&k| idle[k] = false);
            pool.extend(rows);
            while pool.len() > REVIVAL_POOL_ROWS * d {
                pool.drain(..d);
            }
        }
        let cb = book.as_mut().unwrap();
        cb.decay_idle(&idle, batches.len());
        let revived = cb.revive_dead_codes(pool.make_contiguous(), rng.random())?;

        let mut val_rec = evaluate_dvam_parts(&params, &cfg.model, cb, None, &val, cfg.batch_size, opts.exec, opts.log_kl)?;
        val_rec.epoch = epoch;
        trajectory.push(params.digest());
        info!(
            "dvam epoch {epoch}: beta {beta:.3} lr {lr:.4} train rec/tok {:.4} val rec {:.4} ppl {:.3} codes {} revived {revived}",
            rec_sum / tokens as f64,
            val_rec.rec,
            val_rec.ppl,
            val_rec.codes_used
        );
        let verdict = sched.observe(val_rec.rec);
        history.push(EpochLog {
            epoch,
            beta,
            lr,
            train_rec: rec_sum / tokens as f64,
            revived,
            val: val_rec,
        });
        if verdict == Plateau::Improved {
            let ck = Checkpoint {
                kind: ArtifactKind::Dvam,
                config: cfg.clone(),
                vocab: vocab.clone(),
                params: params.clone(),
                codebook: Some(cb.clone()),
                rng: RngState::capture(&rng),
            };
            best = Some((ck, epoch));
        }
        if verdict == Plateau::Stop {
            info!("dvam: stopping after {} learning-rate decays", sched.decays);
            break;
        }
    }
    let (mut checkpoint, best_epoch) = best.ok_or_else(|| DvamError::Config("max_epochs is 0".into()))?;
    checkpoint.params.clear_grads();
    Ok(TrainOutcome {
        checkpoint,
        best_epoch,
        history,
        trajectory,
    })
}

/// Stage 2: the DVAM checkpoint is only read. Its code assignments are
/// computed once, then the categorical prior is fitted to them.
pub fn train_prior(stage1: &Checkpoint, corpus: &Corpus, opts: &TrainOptions) -> Result<PriorOutcome> {
    if stage1.kind != ArtifactKind::Dvam {
        return Err(DvamError::Config(format!(
            "train-prior needs a dvam checkpoint, got {}",
            stage1.kind.name()
        )));
    }
    let mut cfg = stage1.config.clone();
    let book = stage1.codebook.as_ref().expect("validated dvam checkpoint has a codebook");
    let train = encode_lines(&stage1.vocab, &corpus.train);
    let val_lines = if corpus.val.is_empty() { &corpus.train } else { &corpus.val };
    let val = encode_lines(&stage1.vocab, val_lines);
    if train.is_empty() {
        return Err(DvamError::Ingestion("training split is empty".into()));
    }
    if cfg.prior_t_max == 0 {
        cfg.prior_t_max = train.iter().map(|s| s.len()).max().unwrap() + 1;
    }
    let pcfg = cfg.prior();
    let k = pcfg.code_count;

    let train_codes = dvam_pass(&stage1.params, &cfg.model, book, &train, cfg.batch_size, opts.exec)?.codes;
    let val_codes = dvam_pass(&stage1.params, &cfg.model, book, &val, cfg.batch_size, opts.exec)?.codes;
    let train_grids = to_grids(k, cfg.prior_t_max, &train_codes)?;
    let val_grids = to_grids(k, cfg.prior_t_max, &val_codes)?;

    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, 2));
    let mut params = prior::init_params(&pcfg, PriorOutput::Categorical, &mut rng)?;
    let mut sched = LrSchedule::new(&cfg);
    let mut history = Vec::new();
    let mut best: Option<(ParamStore, RngState, f64)> = None;
    let val_positions = val_grids.scored_positions() as f64;
    let train_positions = train_grids.scored_positions() as f64;

    for epoch in 0..cfg.prior_max_epochs {
        let lr = sched.lr;
        let mut order: Vec<usize> = (0..train_grids.len()).collect();
        order.shuffle(&mut rng);
        let mut nll_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let inv_b = 1.0 / chunk.len() as f64;
            let shards: Vec<CodeGrids> = chunk
                .chunks(cfg.shard_size)
                .map(|c| CodeGrids {
                    k,
                    t_max: cfg.prior_t_max,
                    rows: c.iter().map(|&i| train_grids.rows[i].clone()).collect(),
                })
                .collect();
            let p = &params;
            let steps = opts.exec.map(&shards, |s| -> Result<(Gradients, f64)> {
                let g = Graph::new();
                let vars = PriorVars::load(&g, p, "", &pcfg);
                let nll = prior_nll(&g, &vars, &s.batch(0, s.len()));
                let grads = g.backward(g.scale(nll, inv_b))?;
                Ok((grads, g.scalar_value(nll)))
            });
            let mut grads = Vec::new();
            for s in steps {
                let (gr, nll) = s?;
                check_finite(nll, epoch, bi, "prior nll")?;
                nll_sum += nll;
                grads.push(gr);
            }
            apply(&mut params, &grads, lr, cfg.grad_clip, epoch, bi)?;
        }
        let val_nll: f64 = prior_row_nll(&params, "", &pcfg, &val_grids, cfg.batch_size, opts.exec)
            .iter()
            .map(|r| r.0)
            .sum::<f64>()
            / val_positions;
        info!(
            "prior epoch {epoch}: lr {lr:.4} train nll/pos {:.4} val nll/pos {val_nll:.4}",
            nll_sum / train_positions
        );
        history.push(PriorEpoch {
            epoch,
            lr,
            train_nll: nll_sum / train_positions,
            val_nll,
        });
        match sched.observe(val_nll) {
            Plateau::Improved => best = Some((params.clone(), RngState::capture(&rng), val_nll)),
            Plateau::Stop => break,
            _ => {}
        }
    }
    let (mut best_params, rng_state, val_nll_per_token) =
        best.ok_or_else(|| DvamError::Config("prior_max_epochs is 0".into()))?;
    best_params.clear_grads();
    Ok(PriorOutcome {
        checkpoint: Checkpoint {
            kind: ArtifactKind::Prior,
            config: cfg,
            vocab: stage1.vocab.clone(),
            params: best_params,
            codebook: None,
            rng: rng_state,
        },
        history,
        train_grids,
        val_grids,
        val_nll_per_token,
    })
}

/// Single-stage joint training of the Gaussian posterior, decoder and
/// autoregressive Gaussian prior.
pub fn train_gvam(config: &TrainConfig, corpus: &Corpus, opts: &TrainOptions) -> Result<TrainOutcome> {
    let (cfg, vocab, train, val) = prepare(config, corpus, LatentKind::Gaussian)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model::init_params(&cfg.model, LatentKind::Gaussian, &mut rng)?;
    let pcfg = cfg.prior();
    let prior_params = prior::init_params(&pcfg, PriorOutput::Gaussian(cfg.model.code_dim), &mut rng)?;
    params.extend_prefixed(GVAM_PRIOR_PREFIX, prior_params)?;
    let mut sched = LrSchedule::new(&cfg);
    let mut history = Vec::new();
    let mut trajectory = Vec::new();
    let mut best: Option<(Checkpoint, usize)> = None;
    let eval_seed = gvam_eval_seed(cfg.seed);

    for epoch in 0..cfg.max_epochs {
        let lr = sched.lr;
        let batches = make_batches(&train, cfg.batch_size, Some(rng.random()));
        let (mut rec_sum, mut tokens) = (0.0, 0usize);
        for (bi, batch) in batches.iter().enumerate() {
            let noise: u64 = rng.random();
            let shards = batch.shards(cfg.shard_size);
            let idx: Vec<usize> = (0..shards.len()).collect();
            let inv_b = 1.0 / batch.size() as f64;
            let p = &params;
            let steps = opts.exec.map(&idx, |&i| -> Result<(Gradients, f64, f64)> {
                let g = Graph::new();
                let f = gvam_loss(&g, p, &cfg.model, &pcfg, &shards[i], item_seed(noise, i as u64));
                let grads = g.backward(g.scale(f.total, inv_b))?;
                Ok((grads, g.scalar_value(f.rec), g.scalar_value(f.kl)))
            });
            let mut grads = Vec::new();
            for s in steps {
                let (gr, rec, kl) = s?;
                check_finite(rec, epoch, bi, "reconstruction")?;
                check_finite(kl, epoch, bi, "kl")?;
                rec_sum += rec;
                grads.push(gr);
            }
            tokens += batch.num_tokens();
            apply(&mut params, &grads, lr, cfg.grad_clip, epoch, bi)?;
        }
        let mut val_rec = evaluate_gvam_parts(&params, &cfg.model, &pcfg, &val, cfg.batch_size, eval_seed, opts.exec)?;
        val_rec.epoch = epoch;
        trajectory.push(params.digest());
        info!(
            "gvam epoch {epoch}: lr {lr:.4} train rec/tok {:.4} val rec {:.4} ppl {:.3} kl/pos {:.5}",
            rec_sum / tokens as f64,
            val_rec.rec,
            val_rec.ppl,
            val_rec.kl.unwrap_or(f64::NAN)
        );
        let verdict = sched.observe(val_rec.rec);
        history.push(EpochLog {
            epoch,
            beta: 0.0,
            lr,
            train_rec: rec_sum / tokens as f64,
            revived: 0,
            val: val_rec,
        });
        if verdict == Plateau::Improved {
            let ck = Checkpoint {
                kind: ArtifactKind::Gvam,
                config: cfg.clone(),
                vocab: vocab.clone(),
                params: params.clone(),
                codebook: None,
                rng: RngState::capture(&rng),
            };
            best = Some((ck, epoch));
        }
        if verdict == Plateau::Stop {
            break;
        }
    }
    let (mut checkpoint, best_epoch) = best.ok_or_else(|| DvamError::Config("max_epochs is 0".into()))?;
    checkpoint.params.clear_grads();
    Ok(TrainOutcome {
        checkpoint,
        best_epoch,
        history,
        trajectory,
    })
}
