//! Whitespace-tokenized corpora, vocabularies and padded batches.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DvamError, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

pub const DEFAULT_MAX_VOCAB: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    fn with_tokens(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        for w in words {
            if index.contains_key(&w) {
                return Err(DvamError::Ingestion(format!("duplicate vocabulary entry {w:?}")));
            }
            index.insert(w.clone(), tokens.len());
            tokens.push(w);
        }
        Ok(Vocabulary { index, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps whitespace tokens to ids and appends EOS.
    pub fn encode_line(&self, line: &str) -> TokenSeq {
        let mut ids: Vec<usize> = line.split_whitespace().map(|t| self.id(t)).collect();
        ids.push(EOS);
        TokenSeq { ids }
    }

    /// Tokens up to (not including) the first EOS, PAD and BOS skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Four reserved lines, then one token per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() {
            return Err(DvamError::Ingestion("vocabulary file shorter than its header".into()));
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if lines[i] != *r {
                return Err(DvamError::Ingestion(format!(
                    "vocabulary header line {} is {:?}, expected {:?}",
                    i + 1,
                    lines[i],
                    r
                )));
            }
        }
        Vocabulary::with_tokens(lines[RESERVED.len()..].iter().map(|s| s.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Vocabulary::from_text(&fs::read_to_string(path)?)
    }
}

/// Most frequent whitespace tokens first, ties in lexicographic order.
pub fn build_vocab<S: AsRef<str>>(lines: &[S], max_size: usize, min_freq: usize) -> Result<Vocabulary> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut any = false;
    for l in lines {
        for t in l.as_ref().split_whitespace() {
            any = true;
            *counts.entry(t).or_default() += 1;
        }
    }
    if !any {
        return Err(DvamError::Ingestion("corpus has no tokens".into()));
    }
    let mut entries: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED.contains(t))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    entries.truncate(max_size.saturating_sub(RESERVED.len()));
    Vocabulary::with_tokens(entries.into_iter().map(|(t, _)| t.to_string()))
}

/// Token ids of one sentence, EOS-terminated, no BOS and no padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `B x T_max` ids, PAD-filled to the right.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub t_max: usize,
    /// Index of each row in the sequence list the batch was cut from.
    pub members: Vec<usize>,
}

impl Batch {
    pub fn from_seqs(seqs: &[&TokenSeq]) -> Self {
        let members = (0..seqs.len()).collect();
        Self::build(seqs, members, None)
    }

    /// Like [`Batch::from_seqs`] with at least `t_max` columns.
    pub fn padded_to(seqs: &[&TokenSeq], t_max: usize) -> Self {
        let members = (0..seqs.len()).collect();
        Self::build(seqs, members, Some(t_max))
    }

    fn build(seqs: &[&TokenSeq], members: Vec<usize>, min_t: Option<usize>) -> Self {
        let t_max = seqs
            .iter()
            .map(|s| s.len())
            .max()
            .unwrap_or(1)
            .max(min_t.unwrap_or(1));
        let mut ids = vec![PAD; seqs.len() * t_max];
        for (r, s) in seqs.iter().enumerate() {
            ids[r * t_max..r * t_max + s.len()].copy_from_slice(&s.ids);
        }
        Batch {
            ids,
            lengths: seqs.iter().map(|s| s.len()).collect(),
            t_max,
            members,
        }
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.t_max..(r + 1) * self.t_max]
    }

    /// Non-PAD token count.
    pub fn num_tokens(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// 1.0 on real positions, 0.0 on padding; `B x T_max`.
    pub fn mask(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.ids.len()];
        for (r, &len) in self.lengths.iter().enumerate() {
            m[r * self.t_max..r * self.t_max + len].fill(1.0);
        }
        m
    }

    /// Teacher-forcing inputs: BOS followed by the targets shifted right.
    pub fn decoder_inputs(&self) -> Vec<usize> {
        let mut out = vec![PAD; self.ids.len()];
        for r in 0..self.size() {
            out[r * self.t_max] = BOS;
            for t in 1..self.t_max {
                out[r * self.t_max + t] = self.ids[r * self.t_max + t - 1];
            }
        }
        out
    }

    /// Rows `[start, end)` trimmed to their own longest length.
    pub fn rows(&self, start: usize, end: usize) -> Batch {
        let t_max = self.lengths[start..end].iter().copied().max().unwrap_or(1).max(1);
        let mut ids = Vec::with_capacity((end - start) * t_max);
        for r in start..end {
            ids.extend_from_slice(&self.row(r)[..t_max]);
        }
        Batch {
            ids,
            lengths: self.lengths[start..end].to_vec(),
            t_max,
            members: self.members[start..end].to_vec(),
        }
    }

    /// Splits into consecutive groups of at most `shard` rows.
    pub fn shards(&self, shard: usize) -> Vec<Batch> {
        let shard = shard.max(1);
        (0..self.size())
            .step_by(shard)
            .map(|s| self.rows(s, (s + shard).min(self.size())))
            .collect()
    }
}

/// Sorts by length, cuts consecutive groups of `batch_size`, and optionally
/// shuffles the group order with `shuffle_seed`.
pub fn make_batches(seqs: &[TokenSeq], batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Batch> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.sort_by_key(|&i| (seqs[i].len(), i));
    let mut batches: Vec<Batch> = order
        .chunks(batch_size)
        .map(|chunk| {
            let rows: Vec<&TokenSeq> = chunk.iter().map(|&i| &seqs[i]).collect();
            Batch::build(&rows, chunk.to_vec(), None)
        })
        .collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        batches.shuffle(&mut rng);
    }
    batches
}

/// Mean whitespace-token count per line.
pub fn average_length<S: AsRef<str>>(lines: &[S]) -> f64 {
    if lines.is_empty() {
        return 0.0;
    }
    let total: usize = lines.iter().map(|l| l.as_ref().split_whitespace().count()).sum();
    total as f64 / lines.len() as f64
}

/// Train/validation/test splits, one sentence per line.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = DvamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(DvamError::Config(format!("unknown split {s:?}"))),
        }
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| DvamError::Ingestion(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

impl Corpus {
    /// Reads `train.txt`, `val.txt` (or `valid.txt`) and `test.txt` from `dir`.
    /// A missing test split is left empty.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let train = read_lines(&dir.join("train.txt"))?;
        if train.is_empty() {
            return Err(DvamError::Ingestion(format!(
                "{} has no sentences",
                dir.join("train.txt").display()
            )));
        }
        let val_path = ["val.txt", "valid.txt"]
            .iter()
            .map(|f| dir.join(f))
            .find(|p| p.exists())
            .ok_or_else(|| DvamError::Ingestion(format!("no val.txt in {}", dir.display())))?;
        let val = read_lines(&val_path)?;
        let test_path = dir.join("test.txt");
        let test = if test_path.exists() {
            read_lines(&test_path)?
        } else {
            Vec::new()
        };
        Ok(Corpus { train, val, test })
    }

    pub fn split(&self, s: Split) -> &[String] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, lines) in [("train.txt", &self.train), ("val.txt", &self.val), ("test.txt", &self.test)] {
            let mut s = lines.join("\n");
            s.push('\n');
            fs::write(dir.join(name), s)?;
        }
        Ok(())
    }
}

pub fn encode_lines<S: AsRef<str>>(vocab: &Vocabulary, lines: &[S]) -> Vec<TokenSeq> {
    lines.iter().map(|l| vocab.encode_line(l.as_ref())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_vocab_orders_by_frequency() {
        let v = build_vocab(&["a b", "a"], 10, 1).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        assert_eq!(&v.tokens()[..4], &RESERVED.map(String::from));
    }

    #[test]
    fn min_freq_filters() {
        let v = build_vocab(&["a b", "a"], 10, 2).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn ties_break_lexicographically_and_cap_applies() {
        let v = build_vocab(&["c b a", "d"], 6, 1).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.token(4), "a");
        assert_eq!(v.token(5), "b");
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(build_vocab(&["", "  "], 10, 1), Err(DvamError::Ingestion(_))));
    }

    #[test]
    fn encode_examples() {
        let v = build_vocab(&["a b", "a"], 10, 1).unwrap();
        assert_eq!(v.encode_line("a b").ids, vec![4, 5, EOS]);
        assert_eq!(v.encode_line("a zzz").ids, vec![4, UNK, EOS]);
        assert_eq!(v.encode_line("").ids, vec![EOS]);
        assert_eq!(v.decode(&v.encode_line("b a b").ids), "b a b");
    }

    #[test]
    fn batches_cover_every_sequence_once() {
        let seqs: Vec<TokenSeq> = (0..5).map(|i| TokenSeq { ids: vec![4; i + 1] }).collect();
        let b = make_batches(&seqs, 2, None);
        assert_eq!(b.iter().map(Batch::size).collect::<Vec<_>>(), vec![2, 2, 1]);
        let mut seen: Vec<usize> = b.iter().flat_map(|x| x.members.clone()).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        let total: usize = b.iter().map(Batch::num_tokens).sum();
        assert_eq!(total, 15);
    }

    #[test]
    fn equal_lengths_need_no_padding() {
        let seqs: Vec<TokenSeq> = (0..7).map(|i| TokenSeq { ids: vec![4 + i, 5, EOS] }).collect();
        for b in make_batches(&seqs, 3, Some(9)) {
            assert!(!b.ids.contains(&PAD));
        }
    }

    #[test]
    fn shuffle_is_deterministic() {
        let seqs: Vec<TokenSeq> = (0..40).map(|i| TokenSeq { ids: vec![4; i % 7 + 1] }).collect();
        let a = make_batches(&seqs, 4, Some(3));
        let b = make_batches(&seqs, 4, Some(3));
        assert_eq!(a, b);
        assert_ne!(a, make_batches(&seqs, 4, None));
    }

    #[test]
    fn decoder_inputs_shift_right() {
        let s1 = TokenSeq { ids: vec![4, 5, EOS] };
        let s2 = TokenSeq { ids: vec![6, EOS] };
        let b = Batch::from_seqs(&[&s1, &s2]);
        assert_eq!(b.decoder_inputs(), vec![BOS, 4, 5, BOS, 6, EOS]);
        assert_eq!(b.mask(), vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
        let shard = b.rows(1, 2);
        assert_eq!(shard.t_max, 2);
        assert_eq!(shard.ids, vec![6, EOS]);
    }

    #[test]
    fn vocab_text_roundtrip() {
        let v = build_vocab(&["x y z y"], 100, 1).unwrap();
        let w = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(v, w);
        assert!(Vocabulary::from_text("<pad>\n<unk>\nfoo\n</s>\n").is_err());
    }

    #[test]
    fn average_length_is_direct_mean() {
        let lines = ["a b c", "d", "e f"];
        assert_eq!(average_length(&lines), 2.0);
    }
}
