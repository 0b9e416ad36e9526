//! Autoregressive prior over latent code sequences: a stack of residual causal
//! 1-D convolutions. The input is shifted right by one start symbol, so the
//! output at position `t` only sees `z_1 .. z_{t-1}`.
//!
//! Categorical variant: input symbols are the `K` codes, a terminator
//! (`K`, the PAD-code) and a start symbol (`K + 1`); the head predicts `K + 1`
//! classes (codes plus terminator).
//!
//! Gaussian variant: the input is the continuous latent `z_t` (zero vector at
//! the start) and the head emits a mean and a softplus scale per dimension.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Tensor, Var, NEG_INF};
use crate::error::{DvamError, Result};

pub const DEFAULT_LAYERS: usize = 16;
pub const DEFAULT_KERNEL: usize = 3;
pub const DEFAULT_CHANNELS: usize = 256;
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PriorConfig {
    pub code_count: usize,
    pub channels: usize,
    pub layers: usize,
    pub kernel: usize,
    /// `tanh(a) * sigmoid(b)` blocks instead of plain `tanh`.
    pub gated: bool,
}

impl PriorConfig {
    pub fn new(code_count: usize) -> Self {
        PriorConfig {
            code_count,
            channels: DEFAULT_CHANNELS,
            layers: DEFAULT_LAYERS,
            kernel: DEFAULT_KERNEL,
            gated: true,
        }
    }

    /// Input positions visible to one output position, start symbol included.
    pub fn receptive_field(&self) -> usize {
        1 + self.layers * (self.kernel - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.code_count < 2 || self.channels == 0 || self.layers == 0 || self.kernel == 0 {
            return Err(DvamError::Config(format!("invalid prior config {self:?}")));
        }
        Ok(())
    }

    pub fn end_code(&self) -> usize {
        self.code_count
    }

    pub fn start_symbol(&self) -> usize {
        self.code_count + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorOutput {
    Categorical,
    /// Mean and scale for latents of this dimension.
    Gaussian(usize),
}

pub fn param_shapes(cfg: &PriorConfig, out: PriorOutput) -> Vec<(String, Vec<usize>)> {
    let c = cfg.channels;
    let mut s = Vec::new();
    match out {
        PriorOutput::Categorical => s.push(("embed".to_string(), vec![cfg.code_count + 2, c])),
        PriorOutput::Gaussian(d) => {
            s.push(("in.w".to_string(), vec![d, c]));
            s.push(("in.b".to_string(), vec![c]));
        }
    }
    let width = if cfg.gated { 2 * c } else { c };
    for i in 0..cfg.layers {
        s.push((format!("block{i}.w"), vec![cfg.kernel * c, width]));
        s.push((format!("block{i}.b"), vec![width]));
    }
    let head = match out {
        PriorOutput::Categorical => cfg.code_count + 1,
        PriorOutput::Gaussian(d) => 2 * d,
    };
    s.push(("out.w".to_string(), vec![c, head]));
    s.push(("out.b".to_string(), vec![head]));
    s
}

pub fn init_params<R: Rng + ?Sized>(cfg: &PriorConfig, out: PriorOutput, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for (name, shape) in param_shapes(cfg, out) {
        let t = if name.ends_with(".b") {
            Tensor::zeros(&shape)
        } else if name == "embed" {
            Tensor::uniform(&shape, 1.0, rng)
        } else {
            let fan_in = shape[0] as f64;
            Tensor::uniform(&shape, 1.0 / fan_in.sqrt(), rng)
        };
        store.insert(name, t.trainable())?;
    }
    Ok(store)
}

pub fn check_params(cfg: &PriorConfig, out: PriorOutput, store: &ParamStore) -> Result<()> {
    for (name, shape) in param_shapes(cfg, out) {
        let t = store
            .get(&name)
            .ok_or_else(|| DvamError::Dimension(format!("missing prior parameter {name}")))?;
        if t.shape() != shape.as_slice() {
            return Err(DvamError::Dimension(format!(
                "prior parameter {name} has shape {:?}, config expects {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Graph handles for a prior net whose parameters live under `prefix`.
#[derive(Debug, Clone)]
pub struct PriorVars {
    input: PriorInput,
    blocks: Vec<(Var, Var)>,
    out_w: Var,
    out_b: Var,
    kernel: usize,
    gated: bool,
}

#[derive(Debug, Clone, Copy)]
enum PriorInput {
    Embed(Var),
    Linear(Var, Var),
}

impl PriorVars {
    pub fn load(g: &Graph, store: &ParamStore, prefix: &str, cfg: &PriorConfig) -> Self {
        let p = |n: &str| g.param(store, &format!("{prefix}{n}"));
        let input = if store.contains(&format!("{prefix}embed")) {
            PriorInput::Embed(p("embed"))
        } else {
            PriorInput::Linear(p("in.w"), p("in.b"))
        };
        PriorVars {
            input,
            blocks: (0..cfg.layers)
                .map(|i| (p(&format!("block{i}.w")), p(&format!("block{i}.b"))))
                .collect(),
            out_w: p("out.w"),
            out_b: p("out.b"),
            kernel: cfg.kernel,
            gated: cfg.gated,
        }
    }

    /// Delays `x` (`[B, T, C]`) by `s` positions, zero-filling the front.
    fn delay(g: &Graph, x: Var, s: usize) -> Var {
        if s == 0 {
            return x;
        }
        let sh = g.shape(x);
        let (b, t, c) = (sh[0], sh[1], sh[2]);
        if s >= t {
            return g.constant(&[b, t, c], vec![0.0; b * t * c]);
        }
        let zeros = g.constant(&[b, s, c], vec![0.0; b * s * c]);
        g.concat(&[zeros, g.slice(x, 1, 0, t - s)], 1)
    }

    /// Residual causal convolution stack over `[B, T, C]` features.
    fn trunk(&self, g: &Graph, mut h: Var) -> Var {
        let c = g.shape(h)[2];
        for &(w, b) in &self.blocks {
            let taps: Vec<Var> = (0..self.kernel)
                .map(|j| Self::delay(g, h, self.kernel - 1 - j))
                .collect();
            let stacked = if taps.len() == 1 { taps[0] } else { g.concat(&taps, 2) };
            let pre = g.linear(stacked, w, Some(b));
            let act = if self.gated {
                let a = g.tanh(g.slice(pre, 2, 0, c));
                let s = g.sigmoid(g.slice(pre, 2, c, 2 * c));
                g.mul(a, s)
            } else {
                g.tanh(pre)
            };
            h = g.add(h, act);
        }
        g.linear(h, self.out_w, Some(self.out_b))
    }

    /// Logits `[B, T, K + 1]`; `inputs` is the right-shifted grid
    /// (`[start, z_1, ..., z_{T-1}]` per row), flattened `B x T`.
    pub fn logits(&self, g: &Graph, inputs: &[usize], b: usize, t: usize) -> Var {
        let PriorInput::Embed(embed) = self.input else {
            panic!("categorical logits requested from a Gaussian prior");
        };
        let x = g.gather_rows(embed, inputs);
        let c = g.shape(x)[1];
        self.trunk(g, g.reshape(x, &[b, t, c]))
    }

    /// Per-position `(mu_hat, sigma_hat)`, each `[B, T, D]`, given the latent
    /// sequence `z` (`[B, T, D]`).
    pub fn gaussian_params(&self, g: &Graph, z: Var) -> (Var, Var) {
        let PriorInput::Linear(w, bias) = self.input else {
            panic!("Gaussian parameters requested from a categorical prior");
        };
        let d = g.shape(z)[2];
        let shifted = Self::delay(g, z, 1);
        let x = g.linear(shifted, w, Some(bias));
        let out = self.trunk(g, x);
        let mu = g.slice(out, 2, 0, d);
        let raw = g.slice(out, 2, d, 2 * d);
        let floor = g.scalar(SIGMA_FLOOR);
        let sigma = g.add(g.softplus(raw), floor);
        (mu, sigma)
    }
}

/// Code sequences, one per sentence, each at most `t_max` long.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeGrids {
    pub k: usize,
    pub t_max: usize,
    pub rows: Vec<Vec<usize>>,
}

const GRID_MAGIC: &[u8; 4] = b"DVMC";
const GRID_VERSION: u32 = 1;

impl CodeGrids {
    pub fn new(k: usize, t_max: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        if k + 1 > u16::MAX as usize {
            return Err(DvamError::contract("code count too large for u16 grids"));
        }
        for r in &rows {
            if r.len() > t_max || r.iter().any(|&z| z >= k) {
                return Err(DvamError::contract(format!(
                    "grid row {r:?} violates K={k}, T_max={t_max}"
                )));
            }
        }
        Ok(CodeGrids { k, t_max, rows })
    }

    /// Rows `[start, end)` as padded network input and targets, both
    /// `B x T_max`, plus the per-position loss mask. The terminator is
    /// scored once when it fits.
    pub fn batch(&self, start: usize, end: usize) -> GridBatch {
        let (k, t) = (self.k, self.t_max);
        let n = end - start;
        let mut inputs = vec![k; n * t];
        let mut targets = vec![k; n * t];
        let mut mask = vec![0.0; n * t];
        for (r, row) in self.rows[start..end].iter().enumerate() {
            inputs[r * t] = k + 1;
            for (j, &z) in row.iter().enumerate() {
                targets[r * t + j] = z;
                if j + 1 < t {
                    inputs[r * t + j + 1] = z;
                }
            }
            let scored = (row.len() + 1).min(t);
            mask[r * t..r * t + scored].fill(1.0);
        }
        GridBatch {
            inputs,
            targets,
            mask,
            b: n,
            t,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Number of scored positions (codes plus terminators that fit).
    pub fn scored_positions(&self) -> usize {
        self.rows.iter().map(|r| (r.len() + 1).min(self.t_max)).sum()
    }

    /// `DVMC`, u32 version, u32 K, u32 T_max, u32 count, then per row a u16
    /// length followed by `T_max` u16 codes padded with the terminator `K`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(GRID_MAGIC);
        for v in [GRID_VERSION, self.k as u32, self.t_max as u32, self.rows.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for r in &self.rows {
            out.extend_from_slice(&(r.len() as u16).to_le_bytes());
            for j in 0..self.t_max {
                let z = r.get(j).copied().unwrap_or(self.k) as u16;
                out.extend_from_slice(&z.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let u32_at = |off: usize| -> Result<u32> {
            bytes
                .get(off..off + 4)
                .map(|s| u32::from_le_bytes(s.try_into().unwrap()))
                .ok_or_else(|| DvamError::format(off as u64, "truncated grid header"))
        };
        if bytes.get(..4) != Some(GRID_MAGIC.as_slice()) {
            return Err(DvamError::format(0, "bad code grid magic"));
        }
        let version = u32_at(4)?;
        if version != GRID_VERSION {
            return Err(DvamError::format(4, format!("unsupported grid version {version}")));
        }
        let k = u32_at(8)? as usize;
        let t_max = u32_at(12)? as usize;
        let count = u32_at(16)? as usize;
        let row_bytes = 2 + 2 * t_max;
        let expected = 20 + count * row_bytes;
        if bytes.len() != expected {
            return Err(DvamError::format(
                bytes.len().min(expected) as u64,
                format!("grid file is {} bytes, header implies {expected}", bytes.len()),
            ));
        }
        let mut rows = Vec::with_capacity(count);
        for i in 0..count {
            let off = 20 + i * row_bytes;
            let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
            let len = u16_at(off);
            if len > t_max {
                return Err(DvamError::format(off as u64, format!("row length {len} > T_max {t_max}")));
            }
            let row: Vec<usize> = (0..len).map(|j| u16_at(off + 2 + 2 * j)).collect();
            if let Some(p) = row.iter().position(|&z| z >= k) {
                return Err(DvamError::format((off + 2 + 2 * p) as u64, "code index out of range"));
            }
            rows.push(row);
        }
        Ok(CodeGrids { k, t_max, rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        CodeGrids::from_bytes(&fs::read(path)?)
    }
}

#[derive(Debug, Clone)]
pub struct GridBatch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<f64>,
    pub b: usize,
    pub t: usize,
}

/// Summed cross entropy of the scored grid positions.
pub fn prior_nll(g: &Graph, vars: &PriorVars, batch: &GridBatch) -> Var {
    let logits = vars.logits(g, &batch.inputs, batch.b, batch.t);
    let logp = g.log_softmax(logits);
    let picked = g.pick(logp, &batch.targets);
    let mask = g.constant(&[batch.b, batch.t], batch.mask.clone());
    g.neg(g.sum(g.mul(picked, mask)))
}

/// Per-position predictive distributions `[B, T, K + 1]` as plain values.
pub fn predictive_probs(store: &ParamStore, prefix: &str, cfg: &PriorConfig, batch: &GridBatch) -> Vec<f64> {
    let g = Graph::new();
    let vars = PriorVars::load(&g, store, prefix, cfg);
    let logits = vars.logits(&g, &batch.inputs, batch.b, batch.t);
    g.value(g.softmax(logits))
}

#[derive(Debug, Clone)]
pub struct CodeSample {
    pub codes: Vec<usize>,
    /// Sampling distribution used at each step (over `K + 1` classes).
    pub step_probs: Vec<Vec<f64>>,
}

/// Ancestral sampling from the start symbol. Stops at the first terminator or
/// after `t_max` codes. The terminator is disallowed at the first step so every
/// sample has at least one code.
pub fn sample_codes(
    store: &ParamStore,
    prefix: &str,
    cfg: &PriorConfig,
    t_max: usize,
    temperature: f64,
    seed: u64,
) -> Result<CodeSample> {
    if !(temperature > 0.0) {
        return Err(DvamError::contract(format!("temperature must be > 0, got {temperature}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.code_count;
    let mut codes = Vec::new();
    let mut step_probs = Vec::new();
    for t in 0..t_max {
        let g = Graph::new();
        let vars = PriorVars::load(&g, store, prefix, cfg);
        let mut inputs = vec![cfg.start_symbol()];
        inputs.extend_from_slice(&codes);
        let logits = g.value(vars.logits(&g, &inputs, 1, t + 1));
        let mut row: Vec<f64> = logits[t * (k + 1)..].iter().map(|l| l / temperature).collect();
        if t == 0 {
            row[k] = NEG_INF;
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = row.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= s);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        step_probs.push(probs);
        if pick == k {
            break;
        }
        codes.push(pick);
    }
    Ok(CodeSample { codes, step_probs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(k: usize) -> PriorConfig {
        PriorConfig {
            code_count: k,
            channels: 6,
            layers: 3,
            kernel: 3,
            gated: true,
        }
    }

    #[test]
    fn receptive_field_default() {
        assert_eq!(PriorConfig::new(512).receptive_field(), 33);
    }

    #[test]
    fn grid_batch_layout() {
        let grids = CodeGrids::new(4, 4, vec![vec![1, 2], vec![3, 0, 1, 2]]).unwrap();
        let b = grids.batch(0, 2);
        assert_eq!(b.inputs, vec![5, 1, 2, 4, 5, 3, 0, 1]);
        assert_eq!(b.targets, vec![1, 2, 4, 4, 3, 0, 1, 2]);
        assert_eq!(b.mask, vec![1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(grids.scored_positions(), 7);
    }

    #[test]
    fn zero_head_is_uniform() {
        let cfg = small(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = init_params(&cfg, PriorOutput::Categorical, &mut rng).unwrap();
        store.get_mut("out.w").unwrap().data_mut().fill(0.0);
        let grids = CodeGrids::new(5, 6, vec![vec![1, 2, 3], vec![4]]).unwrap();
        let g = Graph::new();
        let vars = PriorVars::load(&g, &store, "", &cfg);
        let nll = g.scalar_value(prior_nll(&g, &vars, &grids.batch(0, 2)));
        assert!((nll - 6.0 * 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_head_gaussian() {
        let cfg = small(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = init_params(&cfg, PriorOutput::Gaussian(3), &mut rng).unwrap();
        store.get_mut("out.w").unwrap().data_mut().fill(0.0);
        let g = Graph::new();
        let vars = PriorVars::load(&g, &store, "", &cfg);
        let z = g.constant(&[1, 2, 3], vec![0.3, -1.0, 2.0, 0.5, 0.1, -0.2]);
        let (mu, sigma) = vars.gaussian_params(&g, z);
        assert!(g.value(mu).iter().all(|&m| m == 0.0));
        for s in g.value(sigma) {
            assert!((s - (2f64.ln() + SIGMA_FLOOR)).abs() < 1e-15);
        }
    }

    #[test]
    fn grid_file_roundtrip_and_corruption() {
        let grids = CodeGrids::new(16, 5, vec![vec![1, 15, 3], vec![], vec![0, 0, 0, 0, 0]]).unwrap();
        let bytes = grids.to_bytes();
        assert_eq!(&bytes[..4], b"DVMC");
        assert_eq!(CodeGrids::from_bytes(&bytes).unwrap(), grids);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(CodeGrids::from_bytes(&bad).is_err());
        assert!(CodeGrids::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(CodeGrids::new(4, 2, vec![vec![4]]).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let cfg = small(6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = init_params(&cfg, PriorOutput::Categorical, &mut rng).unwrap();
        let a = sample_codes(&store, "", &cfg, 10, 1.0, 99).unwrap();
        let b = sample_codes(&store, "", &cfg, 10, 1.0, 99).unwrap();
        assert_eq!(a.codes, b.codes);
        assert!(!a.codes.is_empty() && a.codes.len() <= 10);
        assert!(sample_codes(&store, "", &cfg, 10, 0.0, 1).is_err());
    }
}
