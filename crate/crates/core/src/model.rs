//! LSTM encoder/decoder with attention over the latent code sequence.

use rand::Rng;

use crate::attention::{self, context_vector, mask_bias, AttentionVars};
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::corpus::{Batch, BOS};
use crate::error::{DvamError, Result};
use crate::quantizer::{commit_loss, CodeBook};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentKind {
    /// Encoder states snapped to a codebook.
    Discrete,
    /// Reparameterized Gaussian latents.
    Gaussian,
}

impl LatentKind {
    pub fn name(self) -> &'static str {
        match self {
            LatentKind::Discrete => "dvam",
            LatentKind::Gaussian => "gvam",
        }
    }
}

impl std::str::FromStr for LatentKind {
    type Err = DvamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dvam" => Ok(LatentKind::Discrete),
            "gvam" => Ok(LatentKind::Gaussian),
            _ => Err(DvamError::Config(format!("unknown model kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub code_dim: usize,
    pub code_count: usize,
    /// Attention width; 0 means "same as `dec_hidden`".
    pub attn_width: usize,
    pub context_to_input: bool,
    pub context_to_head: bool,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 4,
            embed_dim: 256,
            enc_hidden: 512,
            dec_hidden: 512,
            code_dim: 64,
            code_count: 512,
            attn_width: 0,
            context_to_input: true,
            context_to_head: true,
            init_scale: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn attn_width(&self) -> usize {
        if self.attn_width == 0 {
            self.dec_hidden
        } else {
            self.attn_width
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("enc_hidden", self.enc_hidden),
            ("dec_hidden", self.dec_hidden),
            ("code_dim", self.code_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(DvamError::Config(format!("{name} must be positive")));
            }
        }
        if self.code_count < 2 {
            return Err(DvamError::Config("code_count must be at least 2".into()));
        }
        if !(self.init_scale > 0.0) {
            return Err(DvamError::Config("init_scale must be positive".into()));
        }
        Ok(())
    }

    fn dec_input_width(&self) -> usize {
        self.embed_dim + if self.context_to_input { self.code_dim } else { 0 }
    }

    fn head_width(&self) -> usize {
        self.dec_hidden + if self.context_to_head { self.code_dim } else { 0 }
    }

    /// Expected name/shape of every seq2seq parameter for `kind`.
    pub fn param_shapes(&self, kind: LatentKind) -> Vec<(String, Vec<usize>)> {
        let (v, e, he, h, d, da) = (
            self.vocab_size,
            self.embed_dim,
            self.enc_hidden,
            self.dec_hidden,
            self.code_dim,
            self.attn_width(),
        );
        let mut s = vec![
            ("enc.embed", vec![v, e]),
            ("enc.w", vec![e + he, 4 * he]),
            ("enc.b", vec![4 * he]),
            ("enc.proj.w", vec![he, d]),
            ("enc.proj.b", vec![d]),
        ];
        if kind == LatentKind::Gaussian {
            s.push(("enc.sigma.w", vec![he, d]));
            s.push(("enc.sigma.b", vec![d]));
        }
        s.extend([
            ("dec.embed", vec![v, e]),
            ("dec.w", vec![self.dec_input_width() + h, 4 * h]),
            ("dec.b", vec![4 * h]),
            ("attn.w_e", vec![d, da]),
            ("attn.w_d", vec![h, da]),
            ("attn.b", vec![da]),
            ("attn.v", vec![da, 1]),
            ("out.w", vec![self.head_width(), v]),
            ("out.b", vec![v]),
        ]);
        s.into_iter().map(|(n, sh)| (n.to_string(), sh)).collect()
    }
}

/// Fresh seq2seq parameters, uniform in `[-init_scale, init_scale)` with zero
/// biases.
pub fn init_params<R: Rng + ?Sized>(config: &ModelConfig, kind: LatentKind, rng: &mut R) -> Result<ParamStore> {
    config.validate()?;
    let mut store = ParamStore::new();
    let scale = config.init_scale;
    for (name, shape) in config.param_shapes(kind) {
        if name.starts_with("attn.") {
            continue;
        }
        let t = if name.ends_with(".b") {
            Tensor::zeros(&shape)
        } else {
            Tensor::uniform(&shape, scale, rng)
        };
        store.insert(name, t.trainable())?;
    }
    attention::init_params(
        &mut store,
        "attn.",
        config.code_dim,
        config.dec_hidden,
        config.attn_width(),
        scale,
        rng,
    )?;
    Ok(store)
}

/// Checks that `store` holds exactly the parameters `config` expects.
pub fn check_params(config: &ModelConfig, kind: LatentKind, store: &ParamStore) -> Result<()> {
    for (name, shape) in config.param_shapes(kind) {
        let t = store
            .get(&name)
            .ok_or_else(|| DvamError::Dimension(format!("missing parameter {name}")))?;
        if t.shape() != shape.as_slice() {
            return Err(DvamError::Dimension(format!(
                "parameter {name} has shape {:?}, config expects {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Standard LSTM cell with fused weights `w [In + H, 4H]` and bias `[4H]`,
/// gate order input, forget, candidate, output.
pub fn lstm_cell(g: &Graph, w: Var, b: Var, x: Var, h: Var, c: Var) -> (Var, Var) {
    let hidden = g.shape(h)[1];
    let gates = g.linear(g.concat(&[x, h], 1), w, Some(b));
    let i = g.sigmoid(g.slice(gates, 1, 0, hidden));
    let f = g.sigmoid(g.slice(gates, 1, hidden, 2 * hidden));
    let cand = g.tanh(g.slice(gates, 1, 2 * hidden, 3 * hidden));
    let o = g.sigmoid(g.slice(gates, 1, 3 * hidden, 4 * hidden));
    let c_next = g.add(g.mul(f, c), g.mul(i, cand));
    let h_next = g.mul(o, g.tanh(c_next));
    (h_next, c_next)
}

/// Graph handles for every seq2seq parameter.
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub enc_embed: Var,
    pub enc_w: Var,
    pub enc_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub sigma: Option<(Var, Var)>,
    pub dec_embed: Var,
    pub dec_w: Var,
    pub dec_b: Var,
    pub attn: AttentionVars,
    pub out_w: Var,
    pub out_b: Var,
}

impl ModelVars {
    pub fn load(g: &Graph, store: &ParamStore) -> Self {
        let p = |n: &str| g.param(store, n);
        let sigma = store
            .contains("enc.sigma.w")
            .then(|| (p("enc.sigma.w"), p("enc.sigma.b")));
        ModelVars {
            enc_embed: p("enc.embed"),
            enc_w: p("enc.w"),
            enc_b: p("enc.b"),
            proj_w: p("enc.proj.w"),
            proj_b: p("enc.proj.b"),
            sigma,
            dec_embed: p("dec.embed"),
            dec_w: p("dec.w"),
            dec_b: p("dec.b"),
            attn: AttentionVars::load(g, store, "attn."),
            out_w: p("out.w"),
            out_b: p("out.b"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// LSTM states `[B, T, H_e]`.
    pub states: Var,
    /// States mapped into code space, `[B, T, D]`.
    pub projected: Var,
}

/// Left-to-right LSTM from a zero state, then a linear map to code space.
pub fn encode(g: &Graph, vars: &ModelVars, batch: &Batch) -> EncoderOutput {
    let b = batch.size();
    let t_max = batch.t_max;
    let he = g.shape(vars.enc_b)[0] / 4;
    let mut h = g.constant(&[b, he], vec![0.0; b * he]);
    let mut c = g.constant(&[b, he], vec![0.0; b * he]);
    let mut outs = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let ids: Vec<usize> = (0..b).map(|r| batch.ids[r * t_max + t]).collect();
        let x = g.gather_rows(vars.enc_embed, &ids);
        (h, c) = lstm_cell(g, vars.enc_w, vars.enc_b, x, h, c);
        outs.push(g.reshape(h, &[b, 1, he]));
    }
    let states = g.concat(&outs, 1);
    let projected = g.linear(states, vars.proj_w, Some(vars.proj_b));
    EncoderOutput { states, projected }
}

/// Decoder state plus the per-sequence attention inputs.
pub struct DecoderContext {
    codes: Var,
    codes_proj: Var,
    mask: Var,
    pub h: Var,
    pub c: Var,
}

impl DecoderContext {
    /// `codes` is `[B, L, D]`; `code_lengths` gives the attendable prefix of each row.
    pub fn new(g: &Graph, vars: &ModelVars, codes: Var, code_lengths: &[usize]) -> Self {
        let s = g.shape(codes);
        let (b, l) = (s[0], s[1]);
        let h = g.shape(vars.dec_b)[0] / 4;
        DecoderContext {
            codes,
            codes_proj: vars.attn.project_codes(g, codes),
            mask: g.constant(&[b, l], mask_bias(code_lengths, l)),
            h: g.constant(&[b, h], vec![0.0; b * h]),
            c: g.constant(&[b, h], vec![0.0; b * h]),
        }
    }

    /// One decoder step fed with `prev` tokens; returns logits `[B, V]`.
    pub fn step(&mut self, g: &Graph, vars: &ModelVars, config: &ModelConfig, prev: &[usize]) -> Var {
        let alpha = vars.attn.weights(g, self.codes_proj, self.h, self.mask);
        let ctx = context_vector(g, alpha, self.codes);
        let emb = g.gather_rows(vars.dec_embed, prev);
        let input = if config.context_to_input {
            g.concat(&[emb, ctx], 1)
        } else {
            emb
        };
        (self.h, self.c) = lstm_cell(g, vars.dec_w, vars.dec_b, input, self.h, self.c);
        let head_in = if config.context_to_head {
            g.concat(&[self.h, ctx], 1)
        } else {
            self.h
        };
        g.linear(head_in, vars.out_w, Some(vars.out_b))
    }
}

/// Teacher-forced decoding over `codes` (`[B, T_max, D]`, aligned with
/// `batch`); returns logits `[B, T_max, V]`.
pub fn decode_teacher_forced(g: &Graph, vars: &ModelVars, config: &ModelConfig, codes: Var, batch: &Batch) -> Var {
    let b = batch.size();
    let t_max = batch.t_max;
    let inputs = batch.decoder_inputs();
    let mut dec = DecoderContext::new(g, vars, codes, &batch.lengths);
    let mut steps = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let prev: Vec<usize> = (0..b).map(|r| inputs[r * t_max + t]).collect();
        debug_assert!(t > 0 || prev.iter().all(|&p| p == BOS));
        let logits = dec.step(g, vars, config, &prev);
        let v = g.shape(logits)[1];
        steps.push(g.reshape(logits, &[b, 1, v]));
    }
    g.concat(&steps, 1)
}

/// Summed negative log-likelihood of the non-PAD targets (EOS included).
pub fn reconstruction_loss(g: &Graph, logits: Var, batch: &Batch) -> Var {
    let logp = g.log_softmax(logits);
    let picked = g.pick(logp, &batch.ids);
    let mask = g.constant(&[batch.size(), batch.t_max], batch.mask());
    g.neg(g.sum(g.mul(picked, mask)))
}

/// How the quantization step enters the graph.
#[derive(Debug, Clone)]
pub enum QuantMode<'a> {
    /// Nearest-code lookup in `book` with a straight-through gradient.
    Live(&'a CodeBook),
    /// The code assignment and straight-through offset `q - h` are frozen at
    /// an earlier evaluation; the forward pass is `h + offset`. This is the
    /// function whose exact gradient the straight-through estimator returns,
    /// so finite differences can check it.
    Frozen {
        book: &'a CodeBook,
        indices: &'a [usize],
        offsets: &'a [f64],
    },
    /// No quantization: the decoder attends over the projected states.
    Identity,
}

pub struct DvamForward {
    pub total: Var,
    pub rec: Var,
    pub commit: Var,
    /// Code index of every `B x T_max` position (padding included).
    pub indices: Vec<usize>,
    /// Projected encoder states `[B, T_max, D]` as computed in this pass.
    pub hidden: Vec<f64>,
    /// Codebook leaf; it must never receive a gradient.
    pub codebook: Option<Var>,
}

pub const CODEBOOK_LEAF: &str = "codebook.vectors";

/// Reconstruction plus `beta` times the commitment term.
pub fn dvam_loss(
    g: &Graph,
    store: &ParamStore,
    config: &ModelConfig,
    quant: QuantMode<'_>,
    batch: &Batch,
    beta: f64,
) -> Result<DvamForward> {
    if !(beta >= 0.0) {
        return Err(DvamError::contract(format!("beta must be >= 0, got {beta}")));
    }
    let vars = ModelVars::load(g, store);
    let enc = encode(g, &vars, batch);
    let hidden = enc.projected;
    let hidden_vals = g.value(hidden);
    let (b, t_max, d) = (batch.size(), batch.t_max, config.code_dim);
    let mask = g.constant(&[b, t_max], batch.mask());

    let (codes, commit, indices, leaf) = match quant {
        QuantMode::Identity => (hidden, g.scalar(0.0), Vec::new(), None),
        QuantMode::Live(book) | QuantMode::Frozen { book, .. } => {
            if book.dim() != d {
                return Err(DvamError::Dimension(format!(
                    "codebook D={} but model code_dim={d}",
                    book.dim()
                )));
            }
            let table = Tensor::new(&[book.k(), d], book.vectors().to_vec())?;
            let leaf = g.leaf(CODEBOOK_LEAF, &table, true);
            let (indices, codes) = match quant {
                QuantMode::Frozen { indices, offsets, .. } => {
                    let off = g.constant(&[b, t_max, d], offsets.to_vec());
                    (indices.to_vec(), g.add(hidden, off))
                }
                _ => {
                    let qr = book.quantize(&hidden_vals)?;
                    let q = g.reshape(g.gather_rows(leaf, &qr.indices), &[b, t_max, d]);
                    (qr.indices, g.straight_through(hidden, q))
                }
            };
            let q = g.reshape(g.gather_rows(leaf, &indices), &[b, t_max, d]);
            let commit = commit_loss(g, hidden, q, Some(mask));
            (codes, commit, indices, Some(leaf))
        }
    };

    let logits = decode_teacher_forced(g, &vars, config, codes, batch);
    let rec = reconstruction_loss(g, logits, batch);
    let total = if beta == 0.0 {
        rec
    } else {
        g.add(rec, g.scale(commit, beta))
    };
    Ok(DvamForward {
        total,
        rec,
        commit,
        indices,
        hidden: hidden_vals,
        codebook: leaf,
    })
}

/// Valid (non-PAD) rows of a `[B, T_max, D]` buffer, flattened in order,
/// together with their code indices.
pub fn valid_rows(batch: &Batch, hidden: &[f64], indices: &[usize], d: usize) -> (Vec<f64>, Vec<usize>) {
    let mut rows = Vec::with_capacity(batch.num_tokens() * d);
    let mut idx = Vec::with_capacity(batch.num_tokens());
    for (r, &len) in batch.lengths.iter().enumerate() {
        for t in 0..len {
            let p = r * batch.t_max + t;
            rows.extend_from_slice(&hidden[p * d..(p + 1) * d]);
            if !indices.is_empty() {
                idx.push(indices[p]);
            }
        }
    }
    (rows, idx)
}
