//! Codebook, nearest-code quantization and the EMA codebook update.
//!
//! Code indices are 0-based throughout the crate.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{DvamError, Result};
use crate::exec::Exec;

pub const DEFAULT_EMA_DECAY: f64 = 0.99;
pub const DEFAULT_DEAD_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CodeBook {
    k: usize,
    d: usize,
    /// `K x D`, row-major.
    vectors: Vec<f64>,
    pub ema_decay: f64,
    ema_counts: Vec<f64>,
    pub dead_threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult {
    pub indices: Vec<usize>,
    /// `T x D`; row `t` is a copy of `vectors[indices[t]]`.
    pub quantized: Vec<f64>,
    /// `sum_t |h_t - e_{z_t}|^2`.
    pub commit_term: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodeStats {
    pub id: usize,
    pub ema_count: f64,
    pub norm: f64,
    pub nearest: usize,
    pub nearest_dist: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl CodeBook {
    pub fn new(k: usize, d: usize, vectors: Vec<f64>, ema_decay: f64) -> Result<Self> {
        if k < 2 || d == 0 {
            return Err(DvamError::contract(format!("codebook needs K >= 2 and D >= 1, got K={k} D={d}")));
        }
        if vectors.len() != k * d {
            return Err(DvamError::Dimension(format!(
                "codebook K={k} D={d} needs {} values, got {}",
                k * d,
                vectors.len()
            )));
        }
        if !vectors.iter().all(|x| x.is_finite()) {
            return Err(DvamError::contract("codebook vectors must be finite"));
        }
        if !(0.0..=1.0).contains(&ema_decay) {
            return Err(DvamError::contract(format!("ema decay {ema_decay} outside [0, 1]")));
        }
        Ok(CodeBook {
            k,
            d,
            vectors,
            ema_decay,
            ema_counts: vec![0.0; k],
            dead_threshold: DEFAULT_DEAD_THRESHOLD,
        })
    }

    /// Seeds the book with `k` distinct rows of `rows` (with replacement when
    /// there are fewer than `k`); every initial EMA count is `1.0`.
    pub fn from_rows(k: usize, d: usize, rows: &[f64], ema_decay: f64, seed: u64) -> Result<Self> {
        if d == 0 || rows.len() % d != 0 || rows.is_empty() {
            return Err(DvamError::Dimension(format!(
                "cannot seed a D={d} codebook from {} values",
                rows.len()
            )));
        }
        let n = rows.len() / d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks: Vec<usize> = if n >= k {
            sample(&mut rng, n, k).into_vec()
        } else {
            (0..k).map(|_| rng.random_range(0..n)).collect()
        };
        let mut vectors = Vec::with_capacity(k * d);
        for p in picks {
            vectors.extend_from_slice(&rows[p * d..(p + 1) * d]);
        }
        let mut book = CodeBook::new(k, d, vectors, ema_decay)?;
        book.ema_counts.fill(1.0);
        Ok(book)
    }

    pub(crate) fn restore(
        k: usize,
        d: usize,
        vectors: Vec<f64>,
        ema_decay: f64,
        ema_counts: Vec<f64>,
        dead_threshold: f64,
    ) -> Result<Self> {
        let mut b = CodeBook::new(k, d, vectors, ema_decay)?;
        if ema_counts.len() != k || ema_counts.iter().any(|c| !(*c >= 0.0)) {
            return Err(DvamError::contract("EMA counts must be K non-negative values"));
        }
        b.ema_counts = ema_counts;
        b.dead_threshold = dead_threshold;
        Ok(b)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        &self.vectors[k * self.d..(k + 1) * self.d]
    }

    pub fn ema_counts(&self) -> &[f64] {
        &self.ema_counts
    }

    pub fn set_ema_counts(&mut self, counts: Vec<f64>) {
        assert_eq!(counts.len(), self.k);
        self.ema_counts = counts;
    }

    /// Index of the nearest code; ties go to the smallest index.
    pub fn nearest(&self, h: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (k, e) in self.vectors.chunks(self.d).enumerate() {
            let dist = sq_dist(h, e);
            if dist < best.1 {
                best = (k, dist);
            }
        }
        best
    }

    /// Snaps each `D`-row of `hidden` to its nearest code.
    pub fn quantize(&self, hidden: &[f64]) -> Result<QuantizeResult> {
        self.quantize_with(hidden, Exec::Sequential)
    }

    pub fn quantize_with(&self, hidden: &[f64], exec: Exec) -> Result<QuantizeResult> {
        if hidden.len() % self.d != 0 {
            return Err(DvamError::Dimension(format!(
                "{} hidden values do not form rows of D={}",
                hidden.len(),
                self.d
            )));
        }
        if !hidden.iter().all(|x| x.is_finite()) {
            return Err(DvamError::NumericOverflow("non-finite hidden state".into()));
        }
        let rows: Vec<&[f64]> = hidden.chunks(self.d).collect();
        let hits = exec.map(&rows, |h| self.nearest(h));
        let mut quantized = Vec::with_capacity(hidden.len());
        let mut commit_term = 0.0;
        let mut indices = Vec::with_capacity(hits.len());
        for (k, dist) in hits {
            indices.push(k);
            quantized.extend_from_slice(self.vector(k));
            commit_term += dist;
        }
        Ok(QuantizeResult {
            indices,
            quantized,
            commit_term,
        })
    }

    /// One assignment-average step followed by an exponential moving average
    /// toward each code's cluster mean. Codes with no rows are untouched.
    pub fn ema_update(&mut self, hidden: &[f64], indices: &[usize]) -> Result<()> {
        if hidden.len() != indices.len() * self.d {
            return Err(DvamError::Dimension(format!(
                "{} rows of D={} against {} indices",
                hidden.len() / self.d.max(1),
                self.d,
                indices.len()
            )));
        }
        let d = self.d;
        let mut sums = vec![0.0; self.k * d];
        let mut counts = vec![0usize; self.k];
        for (h, &k) in hidden.chunks(d).zip(indices) {
            if k >= self.k {
                return Err(DvamError::contract(format!("code index {k} >= K={}", self.k)));
            }
            counts[k] += 1;
            for (s, x) in sums[k * d..(k + 1) * d].iter_mut().zip(h) {
                *s += x;
            }
        }
        let g = self.ema_decay;
        for k in 0..self.k {
            let n = counts[k];
            if n == 0 {
                continue;
            }
            for j in 0..d {
                let mean = sums[k * d + j] / n as f64;
                let e = &mut self.vectors[k * d + j];
                *e = g * *e + (1.0 - g) * mean;
            }
            self.ema_counts[k] = g * self.ema_counts[k] + (1.0 - g) * n as f64;
        }
        Ok(())
    }

    /// Scales the EMA count of every `idle` code by `ema_decay^steps`, the
    /// mass it would have lost over `steps` updates with no assigned rows.
    pub fn decay_idle(&mut self, idle: &[bool], steps: usize) {
        let f = self.ema_decay.powi(steps.min(i32::MAX as usize) as i32);
        for (c, &i) in self.ema_counts.iter_mut().zip(idle) {
            if i {
                *c *= f;
            }
        }
    }

    /// Moves every code whose EMA count fell below `dead_threshold` onto a
    /// uniformly drawn row of `pool`.
    pub fn revive_dead_codes(&mut self, pool: &[f64], seed: u64) -> Result<usize> {
        if pool.is_empty() || pool.len() % self.d != 0 {
            return Err(DvamError::contract("revival pool must be a non-empty set of D-rows"));
        }
        let n = pool.len() / self.d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut revived = 0;
        for k in 0..self.k {
            if self.ema_counts[k] < self.dead_threshold {
                let r = rng.random_range(0..n);
                let d = self.d;
                self.vectors[k * d..(k + 1) * d].copy_from_slice(&pool[r * d..(r + 1) * d]);
                self.ema_counts[k] = 1.0;
                revived += 1;
            }
        }
        Ok(revived)
    }

    pub fn inspect(&self) -> Vec<CodeStats> {
        (0..self.k)
            .map(|k| {
                let e = self.vector(k);
                let (nearest, nearest_dist) = (0..self.k)
                    .filter(|&j| j != k)
                    .map(|j| (j, sq_dist(e, self.vector(j)).sqrt()))
                    .fold((usize::MAX, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b });
                CodeStats {
                    id: k,
                    ema_count: self.ema_counts[k],
                    norm: e.iter().map(|x| x * x).sum::<f64>().sqrt(),
                    nearest,
                    nearest_dist,
                }
            })
            .collect()
    }

    /// Comma-separated dump with a header line.
    pub fn inspection_csv(&self) -> String {
        let mut s = String::from("code,ema_count,l2_norm,nearest_code,nearest_distance\n");
        for c in self.inspect() {
            s.push_str(&format!(
                "{},{:.6},{:.6},{},{:.6}\n",
                c.id, c.ema_count, c.norm, c.nearest, c.nearest_dist
            ));
        }
        s
    }
}

/// Straight-through output: forward is `quantized`, backward is the identity
/// into `hidden`.
pub fn straight_through(g: &Graph, hidden: Var, quantized: Var) -> Var {
    g.straight_through(hidden, quantized)
}

/// Differentiable `sum_t mask_t |h_t - sg(q_t)|^2` for `[.., D]` tensors with a
/// mask over the leading positions.
pub fn commit_loss(g: &Graph, hidden: Var, quantized: Var, mask: Option<Var>) -> Var {
    let diff = g.sub(hidden, g.stop_gradient(quantized));
    let sq = g.square(diff);
    let rank = g.shape(sq).len();
    let per_pos = g.sum_axis(sq, rank - 1);
    match mask {
        Some(m) => g.sum(g.mul(per_pos, m)),
        None => g.sum(per_pos),
    }
}
