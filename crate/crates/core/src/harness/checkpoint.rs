//! Binary artifact format.
//!
//! ```text
//! "DVAM" | u32 version | u32 section count
//! section: u32 tag | u64 payload length | payload | 32-byte SHA-256 of payload
//! ```
//!
//! All integers and reals are little-endian. Parameter tensors are stored as
//! name, rank, u64 dims and f64 values, so a load/save cycle is bit-exact.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamStore, Tensor};
use crate::corpus::Vocabulary;
use crate::error::{DvamError, Result};
use crate::model::{self, LatentKind};
use crate::prior::{self, PriorOutput};
use crate::quantizer::CodeBook;
use crate::variational::GVAM_PRIOR_PREFIX;

use super::config::TrainConfig;

pub const MAGIC: &[u8; 4] = b"DVAM";
pub const VERSION: u32 = 1;

const TAG_KIND: u32 = 1;
const TAG_CONFIG: u32 = 2;
const TAG_VOCAB: u32 = 3;
const TAG_PARAMS: u32 = 4;
const TAG_CODEBOOK: u32 = 5;
const TAG_RNG: u32 = 6;

/// What a checkpoint file holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactKind {
    Dvam,
    Gvam,
    /// Stage-2 categorical prior over a DVAM codebook.
    Prior,
}

impl ArtifactKind {
    pub fn name(self) -> &'static str {
        match self {
            ArtifactKind::Dvam => "dvam",
            ArtifactKind::Gvam => "gvam",
            ArtifactKind::Prior => "prior",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "dvam" => Some(ArtifactKind::Dvam),
            "gvam" => Some(ArtifactKind::Gvam),
            "prior" => Some(ArtifactKind::Prior),
            _ => None,
        }
    }
}

/// ChaCha8 position: seed, stream and word position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ArtifactKind,
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub codebook: Option<CodeBook>,
    pub rng: RngState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

/// Cursor that reports absolute file offsets in its errors.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], base: u64) -> Self {
        Reader { bytes, pos: 0, base }
    }

    fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(DvamError::format(
                self.offset(),
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let at = self.offset();
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| DvamError::format(at, format!("{what} is not UTF-8")))
    }
    fn done(&self, what: &str) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(DvamError::format(self.offset(), format!("trailing bytes in {what}")));
        }
        Ok(())
    }
}

fn encode_params(store: &ParamStore) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u32(store.len() as u32);
    for (name, t) in store.iter() {
        w.str(name);
        w.0.push(t.requires_grad as u8);
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u64(d as u64);
        }
        for &v in t.data() {
            w.f64(v);
        }
    }
    w.0
}

fn decode_params(r: &mut Reader<'_>) -> Result<ParamStore> {
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = r.offset();
        let name = r.str("tensor name")?;
        let trainable = r.take(1, "trainable flag")?[0] != 0;
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("tensor dim")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some())
            .ok_or_else(|| DvamError::format(at, format!("tensor {name} is too large")))?;
        let raw = r.take(n * 8, "tensor values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut t = Tensor::new(&shape, data).map_err(|e| DvamError::format(at, e.to_string()))?;
        t.requires_grad = trainable;
        store
            .insert(name, t)
            .map_err(|e| DvamError::format(at, e.to_string()))?;
    }
    Ok(store)
}

fn encode_codebook(b: &CodeBook) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u32(b.k() as u32);
    w.u32(b.dim() as u32);
    w.f64(b.ema_decay);
    w.f64(b.dead_threshold);
    b.vectors().iter().for_each(|&v| w.f64(v));
    b.ema_counts().iter().for_each(|&v| w.f64(v));
    w.0
}

fn decode_codebook(r: &mut Reader<'_>) -> Result<CodeBook> {
    let at = r.offset();
    let k = r.u32("codebook K")? as usize;
    let d = r.u32("codebook D")? as usize;
    let decay = r.f64("EMA decay")?;
    let dead = r.f64("dead threshold")?;
    let mut vectors = Vec::with_capacity(k * d);
    for _ in 0..k * d {
        vectors.push(r.f64("code vector")?);
    }
    let mut counts = Vec::with_capacity(k);
    for _ in 0..k {
        counts.push(r.f64("EMA count")?);
    }
    CodeBook::restore(k, d, vectors, decay, counts, dead).map_err(|e| DvamError::format(at, e.to_string()))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut sections: Vec<(u32, Vec<u8>)> = vec![
            (TAG_KIND, self.kind.name().as_bytes().to_vec()),
            (TAG_CONFIG, self.config.to_text().into_bytes()),
            (TAG_VOCAB, self.vocab.to_text().into_bytes()),
            (TAG_PARAMS, encode_params(&self.params)),
        ];
        if let Some(b) = &self.codebook {
            sections.push((TAG_CODEBOOK, encode_codebook(b)));
        }
        let mut rng = Writer(self.rng.seed.to_vec());
        rng.u64(self.rng.stream);
        rng.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        sections.push((TAG_RNG, rng.0));

        let mut w = Writer(MAGIC.to_vec());
        w.u32(VERSION);
        w.u32(sections.len() as u32);
        for (tag, payload) in sections {
            w.u32(tag);
            w.u64(payload.len() as u64);
            w.0.extend_from_slice(&payload);
            w.0.extend_from_slice(&Sha256::digest(&payload));
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, 0);
        if r.take(4, "magic")? != MAGIC {
            return Err(DvamError::format(0, "bad magic, not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(DvamError::format(
                4,
                format!("unsupported checkpoint version {version}, expected {VERSION}"),
            ));
        }
        let count = r.u32("section count")?;
        let (mut kind, mut config, mut vocab, mut params, mut codebook, mut rng) =
            (None, None, None, None, None, None);
        for _ in 0..count {
            let header = r.offset();
            let tag = r.u32("section tag")?;
            let len = r.u64("section length")?;
            let len = usize::try_from(len)
                .ok()
                .filter(|&l| l <= bytes.len())
                .ok_or_else(|| DvamError::format(header + 4, format!("section length {len} exceeds file")))?;
            let start = r.offset();
            let payload = r.take(len, "section payload")?;
            let stored = r.take(32, "section checksum")?;
            if Sha256::digest(payload).as_slice() != stored {
                return Err(DvamError::format(
                    start,
                    format!("checksum mismatch in section {tag} ({len} bytes)"),
                ));
            }
            let mut p = Reader::new(payload, start);
            let text = |p: &mut Reader<'_>, what: &str| -> Result<String> {
                let raw = p.take(len, what)?;
                String::from_utf8(raw.to_vec()).map_err(|_| DvamError::format(start, format!("{what} is not UTF-8")))
            };
            match tag {
                TAG_KIND => {
                    let s = text(&mut p, "kind")?;
                    kind = Some(
                        ArtifactKind::parse(&s)
                            .ok_or_else(|| DvamError::format(start, format!("unknown artifact kind {s:?}")))?,
                    );
                }
                TAG_CONFIG => {
                    let s = text(&mut p, "config")?;
                    config = Some(TrainConfig::parse(&s).map_err(|e| DvamError::format(start, e.to_string()))?);
                }
                TAG_VOCAB => {
                    let s = text(&mut p, "vocabulary")?;
                    vocab = Some(Vocabulary::from_text(&s).map_err(|e| DvamError::format(start, e.to_string()))?);
                }
                TAG_PARAMS => params = Some(decode_params(&mut p)?),
                TAG_CODEBOOK => codebook = Some(decode_codebook(&mut p)?),
                TAG_RNG => {
                    let seed: [u8; 32] = p.take(32, "rng seed")?.try_into().unwrap();
                    let stream = p.u64("rng stream")?;
                    let word_pos = u128::from_le_bytes(p.take(16, "rng position")?.try_into().unwrap());
                    rng = Some(RngState { seed, stream, word_pos });
                }
                _ => return Err(DvamError::format(header, format!("unknown section tag {tag}"))),
            }
            p.done("section")?;
        }
        r.done("file")?;
        let missing = |what: &str| DvamError::format(bytes.len() as u64, format!("missing {what} section"));
        let ck = Checkpoint {
            kind: kind.ok_or_else(|| missing("kind"))?,
            config: config.ok_or_else(|| missing("config"))?,
            vocab: vocab.ok_or_else(|| missing("vocabulary"))?,
            params: params.ok_or_else(|| missing("params"))?,
            codebook,
            rng: rng.ok_or_else(|| missing("rng"))?,
        };
        ck.validate()?;
        Ok(ck)
    }

    /// Cross-checks tensors, codebook and vocabulary against the config.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.vocab.len() != cfg.model.vocab_size {
            return Err(DvamError::Dimension(format!(
                "vocabulary has {} entries, config says {}",
                self.vocab.len(),
                cfg.model.vocab_size
            )));
        }
        match self.kind {
            ArtifactKind::Dvam => {
                model::check_params(&cfg.model, LatentKind::Discrete, &self.params)?;
                let b = self
                    .codebook
                    .as_ref()
                    .ok_or_else(|| DvamError::Dimension("dvam checkpoint without codebook".into()))?;
                if b.k() != cfg.model.code_count || b.dim() != cfg.model.code_dim {
                    return Err(DvamError::Dimension(format!(
                        "codebook is {}x{}, config expects K={} D={}",
                        b.k(),
                        b.dim(),
                        cfg.model.code_count,
                        cfg.model.code_dim
                    )));
                }
            }
            ArtifactKind::Gvam => {
                model::check_params(&cfg.model, LatentKind::Gaussian, &self.params)?;
                let p = self.params.strip_prefix(GVAM_PRIOR_PREFIX);
                prior::check_params(&cfg.prior(), PriorOutput::Gaussian(cfg.model.code_dim), &p)?;
            }
            ArtifactKind::Prior => {
                prior::check_params(&cfg.prior(), PriorOutput::Categorical, &self.params)?;
                if cfg.prior_t_max == 0 {
                    return Err(DvamError::Dimension("prior checkpoint without grid length".into()));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    /// Checks that a stage-2 prior belongs to this DVAM checkpoint.
    pub fn check_prior(&self, prior: &Checkpoint) -> Result<()> {
        if self.kind != ArtifactKind::Dvam || prior.kind != ArtifactKind::Prior {
            return Err(DvamError::Config(format!(
                "expected a dvam checkpoint and a prior, got {} and {}",
                self.kind.name(),
                prior.kind.name()
            )));
        }
        if prior.config.model.code_count != self.config.model.code_count {
            return Err(DvamError::Dimension(format!(
                "prior covers K={} codes, model has K={}",
                prior.config.model.code_count, self.config.model.code_count
            )));
        }
        Ok(())
    }
}
