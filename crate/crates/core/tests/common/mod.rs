#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dvam::autodiff::{ParamStore, Tensor};
use dvam::corpus::{Batch, Corpus, TokenSeq, BOS, EOS, PAD};
use dvam::harness::TrainConfig;
use dvam::model::ModelConfig;

pub const TEMPLATES: [&str; 8] = [
    "the cat sat on the mat",
    "a dog ran in the park",
    "the bird sang in the tree",
    "a cat ran to the tree",
    "my dog sat in the sun",
    "the sun rose over the park",
    "a bird flew over the mat",
    "my old friend sat on a wooden chair",
];

/// 512 training sentences cycling through the templates, 64 for validation.
pub fn toy_corpus() -> Corpus {
    let cycle = |n: usize| (0..n).map(|i| TEMPLATES[i % 8].to_string()).collect();
    Corpus {
        train: cycle(512),
        val: cycle(64),
        test: cycle(64),
    }
}

pub fn toy_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    let m = &mut c.model;
    m.embed_dim = 32;
    m.enc_hidden = 64;
    m.dec_hidden = 64;
    m.code_dim = 16;
    m.code_count = 16;
    m.init_scale = 0.1;
    c.prior_channels = 32;
    c.prior_layers = 4;
    c.max_epochs = 50;
    c.prior_max_epochs = 50;
    c.seed = 7;
    c
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn store_of(entries: &[(&str, &[usize], Vec<f64>)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, shape, data) in entries {
        s.insert(*name, Tensor::new(shape, data.clone()).unwrap().trainable())
            .unwrap();
    }
    s
}

pub fn small_model(vocab: usize, k: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        embed_dim: 4,
        enc_hidden: 5,
        dec_hidden: 6,
        code_dim: 3,
        code_count: k,
        attn_width: 4,
        context_to_input: true,
        context_to_head: true,
        init_scale: 0.5,
    }
}

/// Random token sequences over ids `4..vocab`, each ending in EOS.
pub fn random_seqs(rng: &mut ChaCha8Rng, n: usize, vocab: usize, max_len: usize) -> Vec<TokenSeq> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..max_len);
            let mut ids: Vec<usize> = (0..len).map(|_| rng.random_range(4..vocab)).collect();
            ids.push(EOS);
            TokenSeq { ids }
        })
        .collect()
}

pub fn batch_of(seqs: &[TokenSeq]) -> Batch {
    let refs: Vec<&TokenSeq> = seqs.iter().collect();
    Batch::from_seqs(&refs)
}

pub fn is_reserved(id: usize) -> bool {
    id == PAD || id == BOS
}
