//! Property tests for the invariants of each module.

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dvam::autodiff::{Graph, ParamStore, Tensor};
use dvam::corpus::{average_length, build_vocab, make_batches, Batch, TokenSeq, EOS, PAD};
use dvam::harness::{beta_schedule, Checkpoint, RngState, TrainConfig, ArtifactKind};
use dvam::model::{self, dvam_loss, LatentKind, QuantMode, CODEBOOK_LEAF};
use dvam::prior::{self, predictive_probs, CodeGrids, PriorConfig, PriorOutput, PriorVars};
use dvam::quantizer::{straight_through, CodeBook};
use dvam::variational::{discrete_kl, gaussian_kl};
use dvam::{attention, Exec};

use common::*;

fn reals(n: usize, scale: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-scale..scale, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // ---- numeric core

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(), shift in -50.0f64..50.0) {
        let x = uniform(&mut rng(seed), rows * cols, 20.0);
        let g = Graph::new();
        let a = g.value(g.softmax(g.constant(&[rows, cols], x.clone())));
        let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let b = g.value(g.softmax(g.constant(&[rows, cols], shifted)));
        for r in 0..rows {
            let row = &a[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn stop_gradient_is_identity_without_gradient(x in reals(6, 3.0)) {
        let g = Graph::new();
        let v = g.variable(&[6], x.clone());
        let s = g.stop_gradient(v);
        prop_assert_eq!(g.value(s), x.clone());
        let loss = g.add(g.sum(g.square(s)), g.sum(v));
        let grads = g.backward(loss).unwrap();
        prop_assert!(grads.get(v).unwrap().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn reuse_accumulates_both_paths(x in reals(5, 3.0)) {
        let g = Graph::new();
        let v = g.variable(&[5], x.clone());
        let loss = g.add(g.sum(g.mul(v, v)), g.scale(g.sum(v), 3.0));
        let grads = g.backward(loss).unwrap();
        for (d, xi) in grads.get(v).unwrap().iter().zip(&x) {
            prop_assert!((d - (2.0 * xi + 3.0)).abs() <= 1e-12);
        }
    }

    #[test]
    fn tensor_length_must_match_shape(a in 1usize..5, b in 1usize..5, extra in 1usize..3) {
        prop_assert!(Tensor::new(&[a, b], vec![0.0; a * b]).is_ok());
        prop_assert!(Tensor::new(&[a, b], vec![0.0; a * b + extra]).is_err());
    }

    #[test]
    fn param_store_keeps_insertion_order(n in 1usize..8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut names: Vec<String> = (0..n).map(|i| format!("p{}", (i * 7 + 3) % 11)).collect();
        names.dedup();
        let mut s = ParamStore::new();
        for name in &names {
            s.insert(name.clone(), Tensor::new(&[2], uniform(&mut r, 2, 1.0)).unwrap()).unwrap();
        }
        let got: Vec<&str> = s.names().collect();
        prop_assert_eq!(got, names.iter().map(String::as_str).collect::<Vec<_>>());
        prop_assert!(s.insert(names[0].clone(), Tensor::zeros(&[1])).is_err());
    }

    // ---- corpus

    #[test]
    fn decode_inverts_encode(lines in prop::collection::vec("[a-e]{1,3}( [a-e]{1,3}){0,6}", 1..8)) {
        let vocab = build_vocab(&lines, 1000, 1).unwrap();
        for line in &lines {
            let seq = vocab.encode_line(line);
            prop_assert_eq!(*seq.ids.last().unwrap(), EOS);
            prop_assert!(!seq.ids.contains(&PAD));
            let words: Vec<&str> = line.split_whitespace().collect();
            prop_assert_eq!(vocab.decode(&seq.ids), words.join(" "));
        }
    }

    #[test]
    fn batches_preserve_token_count(seed in any::<u64>(), n in 1usize..40, bs in 1usize..9, shuffle in any::<bool>()) {
        let seqs = random_seqs(&mut rng(seed), n, 12, 9);
        let batches = make_batches(&seqs, bs, shuffle.then_some(seed));
        let total: usize = batches.iter().map(|b| b.num_tokens()).sum();
        prop_assert_eq!(total, seqs.iter().map(|s| s.len()).sum::<usize>());
        for b in &batches {
            prop_assert!(b.size() <= bs);
            prop_assert_eq!(b.t_max, *b.lengths.iter().max().unwrap());
            for r in 0..b.size() {
                let row = b.row(r);
                prop_assert!(row[b.lengths[r]..].iter().all(|&i| i == PAD));
                prop_assert!(row[..b.lengths[r]].iter().all(|&i| i != PAD));
                prop_assert_eq!(row[b.lengths[r] - 1], EOS);
            }
        }
    }

    #[test]
    fn average_length_matches_direct_count(lines in prop::collection::vec("[a-z]{1,4}( [a-z]{1,4}){0,9}", 1..20)) {
        let mut total = 0usize;
        for l in &lines {
            total += l.split(' ').filter(|w| !w.is_empty()).count();
        }
        prop_assert_eq!(average_length(&lines), total as f64 / lines.len() as f64);
    }

    // ---- quantizer

    #[test]
    fn posterior_is_one_hot_at_argmin(k in 2usize..20, d in 1usize..6, n in 1usize..12, seed in any::<u64>()) {
        let mut r = rng(seed);
        let vectors = uniform(&mut r, k * d, 1.0);
        let hidden = uniform(&mut r, n * d, 1.5);
        let book = CodeBook::new(k, d, vectors.clone(), 0.99).unwrap();
        let q = book.quantize(&hidden).unwrap();
        let mut commit = 0.0;
        for row in 0..n {
            let h = &hidden[row * d..(row + 1) * d];
            let dist = |c: usize| -> f64 { (0..d).map(|j| (h[j] - vectors[c * d + j]).powi(2)).sum() };
            let best = (0..k).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
            prop_assert_eq!(q.indices[row], best);
            prop_assert_eq!(&q.quantized[row * d..(row + 1) * d], &vectors[best * d..(best + 1) * d]);
            commit += dist(best);
        }
        prop_assert!(q.commit_term >= 0.0);
        prop_assert!((q.commit_term - commit).abs() <= 1e-12 * commit.max(1.0));
    }

    #[test]
    fn commit_term_zero_on_codes(k in 2usize..10, d in 1usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let vectors = uniform(&mut r, k * d, 1.0);
        let book = CodeBook::new(k, d, vectors.clone(), 0.99).unwrap();
        prop_assert_eq!(book.quantize(&vectors).unwrap().commit_term, 0.0);
        let mut off = vectors.clone();
        off[0] += 0.5;
        prop_assert!(book.quantize(&off).unwrap().commit_term > 0.0);
    }

    #[test]
    fn straight_through_forward_quantized_backward_identity(k in 2usize..8, d in 1usize..4, n in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let book = CodeBook::new(k, d, uniform(&mut r, k * d, 1.0), 0.99).unwrap();
        let hidden = uniform(&mut r, n * d, 1.0);
        let w = uniform(&mut r, n * d, 1.0);
        let q = book.quantize(&hidden).unwrap();

        let g = Graph::new();
        let h = g.variable(&[n, d], hidden.clone());
        let out = straight_through(&g, h, g.constant(&[n, d], q.quantized.clone()));
        prop_assert_eq!(g.value(out), q.quantized.clone());
        let loss = g.sum(g.mul(g.tanh(out), g.constant(&[n, d], w.clone())));
        let st = g.backward(loss).unwrap().get(h).unwrap().to_vec();

        // Identity layer evaluated at the quantized point.
        let g2 = Graph::new();
        let p = g2.variable(&[n, d], q.quantized.clone());
        let loss2 = g2.sum(g2.mul(g2.tanh(p), g2.constant(&[n, d], w)));
        let id = g2.backward(loss2).unwrap().get(p).unwrap().to_vec();
        prop_assert_eq!(st, id);
    }

    #[test]
    fn ema_with_unit_decay_is_noop(k in 2usize..8, d in 1usize..4, n in 1usize..10, seed in any::<u64>()) {
        let mut r = rng(seed);
        let vectors = uniform(&mut r, k * d, 1.0);
        let mut book = CodeBook::new(k, d, vectors.clone(), 1.0).unwrap();
        let hidden = uniform(&mut r, n * d, 1.0);
        let idx = book.quantize(&hidden).unwrap().indices;
        let counts = book.ema_counts().to_vec();
        book.ema_update(&hidden, &idx).unwrap();
        prop_assert_eq!(book.vectors(), vectors.as_slice());
        prop_assert_eq!(book.ema_counts(), counts.as_slice());
    }

    #[test]
    fn parallel_quantize_matches_sequential(k in 2usize..32, d in 1usize..8, n in 1usize..64, seed in any::<u64>()) {
        let mut r = rng(seed);
        let book = CodeBook::new(k, d, uniform(&mut r, k * d, 1.0), 0.99).unwrap();
        let hidden = uniform(&mut r, n * d, 1.0);
        prop_assert_eq!(
            book.quantize_with(&hidden, Exec::Sequential).unwrap(),
            book.quantize_with(&hidden, Exec::default()).unwrap()
        );
    }

    // ---- attention

    #[test]
    fn masked_positions_get_zero_weight(t in 2usize..7, valid in 1usize..7, seed in any::<u64>()) {
        let valid = valid.min(t);
        let mut r = rng(seed);
        let (d, h, da) = (3, 4, 5);
        let mut s = ParamStore::new();
        attention::init_params(&mut s, "a.", d, h, da, 1.0, &mut r).unwrap();
        let codes = uniform(&mut r, t * d, 1.0);
        let prev = uniform(&mut r, h, 1.0);
        let alpha = attention::attention_weights(&s, "a.", &codes, d, &prev, valid).unwrap();
        prop_assert!(alpha[valid..].iter().all(|&a| a == 0.0));
        prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let ctx = attention::context(&alpha, &codes, d).unwrap();
        prop_assert_eq!(ctx.len(), d);
    }

    #[test]
    fn masked_normalisation_ignores_score_shift(t in 2usize..7, valid in 1usize..7, shift in -30.0f64..30.0, seed in any::<u64>()) {
        let valid = valid.min(t);
        let scores = uniform(&mut rng(seed), t, 4.0);
        let bias = g_mask(valid, t);
        let norm = |s: &[f64]| {
            let g = Graph::new();
            let x = g.add(g.constant(&[1, t], s.to_vec()), g.constant(&[1, t], bias.clone()));
            g.value(g.softmax(x))
        };
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        for (a, b) in norm(&scores).iter().zip(norm(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    // ---- seq2seq model

    #[test]
    fn rec_ignores_padding(seed in any::<u64>(), extra in 1usize..4) {
        let mut r = rng(seed);
        let cfg = small_model(10, 4);
        let params = model::init_params(&cfg, LatentKind::Discrete, &mut r).unwrap();
        let seqs = random_seqs(&mut r, 3, 10, 5);
        let refs: Vec<&TokenSeq> = seqs.iter().collect();
        let tight = Batch::from_seqs(&refs);
        let loose = Batch::padded_to(&refs, tight.t_max + extra);
        let rec = |b: &Batch| {
            let g = Graph::new();
            let f = dvam_loss(&g, &params, &cfg, QuantMode::Identity, b, 0.0).unwrap();
            g.scalar_value(f.rec)
        };
        prop_assert_eq!(rec(&tight), rec(&loose));
    }

    #[test]
    fn codebook_gets_no_gradient(seed in any::<u64>()) {
        let mut r = rng(seed);
        let cfg = small_model(10, 4);
        let params = model::init_params(&cfg, LatentKind::Discrete, &mut r).unwrap();
        let book = CodeBook::new(4, cfg.code_dim, uniform(&mut r, 4 * cfg.code_dim, 1.0), 0.99).unwrap();
        let seqs = random_seqs(&mut r, 2, 10, 5);
        let g = Graph::new();
        let f = dvam_loss(&g, &params, &cfg, QuantMode::Live(&book), &batch_of(&seqs), 1.0).unwrap();
        let grads = g.backward(f.total).unwrap();
        let leaked = grads.named(CODEBOOK_LEAF).map(|v| v.iter().any(|&x| x != 0.0)).unwrap_or(false);
        prop_assert!(!leaked);
    }

    // ---- variational

    #[test]
    fn discrete_kl_nonnegative_zero_iff_certain(k in 2usize..10, t in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let raw = uniform(&mut r, t * k, 1.0);
        let mut probs = Vec::with_capacity(t * k);
        for row in raw.chunks(k) {
            let e: Vec<f64> = row.iter().map(|x| x.exp()).collect();
            let s: f64 = e.iter().sum();
            probs.extend(e.iter().map(|x| x / s));
        }
        let idx: Vec<usize> = (0..t).map(|i| (seed as usize + i) % k).collect();
        let kl = discrete_kl(&idx, &probs, k).unwrap();
        prop_assert!(kl > 0.0);
        let mut certain = vec![0.0; t * k];
        for (pos, &j) in idx.iter().enumerate() {
            certain[pos * k + j] = 1.0;
        }
        prop_assert_eq!(discrete_kl(&idx, &certain, k).unwrap(), 0.0);
    }

    #[test]
    fn gaussian_kl_nonnegative(n in 1usize..8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mu = uniform(&mut r, n, 3.0);
        let mh = uniform(&mut r, n, 3.0);
        let s: Vec<f64> = uniform(&mut r, n, 2.0).iter().map(|x| x.exp()).collect();
        let sh: Vec<f64> = uniform(&mut r, n, 2.0).iter().map(|x| x.exp()).collect();
        prop_assert!(gaussian_kl(&mu, &s, &mh, &sh).unwrap() >= -1e-9);
    }

    // ---- prior

    #[test]
    fn greedy_choice_has_lowest_nll(seed in any::<u64>()) {
        let mut r = rng(seed);
        let cfg = PriorConfig { code_count: 5, channels: 6, layers: 3, kernel: 3, gated: true };
        let store = prior::init_params(&cfg, PriorOutput::Categorical, &mut r).unwrap();
        let t = 6;
        let k = cfg.code_count;
        let mut codes = Vec::new();
        for step in 0..t {
            let g = Graph::new();
            let v = PriorVars::load(&g, &store, "", &cfg);
            let mut inputs = vec![cfg.start_symbol()];
            inputs.extend_from_slice(&codes);
            let logits = g.value(v.logits(&g, &inputs, 1, step + 1));
            let row = &logits[step * (k + 1)..step * (k + 1) + k];
            let best = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap();
            codes.push(best);
        }
        let grids = CodeGrids::new(k, t + 1, vec![codes.clone()]).unwrap();
        let p = predictive_probs(&store, "", &cfg, &grids.batch(0, 1));
        for (pos, &z) in codes.iter().enumerate() {
            let row = &p[pos * (k + 1)..pos * (k + 1) + k];
            for alt in 0..k {
                prop_assert!(-row[z].ln() <= -row[alt].ln());
            }
        }
    }

    #[test]
    fn code_grids_roundtrip(k in 2usize..50, t in 1usize..10, n in 0usize..6, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let rows: Vec<Vec<usize>> = (0..n).map(|_| {
            let len = r.random_range(0..=t);
            (0..len).map(|_| r.random_range(0..k)).collect()
        }).collect();
        let grids = CodeGrids::new(k, t, rows).unwrap();
        let back = CodeGrids::from_bytes(&grids.to_bytes()).unwrap();
        prop_assert_eq!(&back.rows, &grids.rows);
        prop_assert_eq!((back.k, back.t_max), (k, t));
        if n > 0 {
            let b = grids.batch(0, n);
            for (row, codes) in grids.rows.iter().enumerate() {
                let tg = &b.targets[row * t..(row + 1) * t];
                prop_assert_eq!(&tg[..codes.len()], codes.as_slice());
                prop_assert!(tg[codes.len()..].iter().all(|&z| z == k));
            }
        }
    }

    // ---- harness

    #[test]
    fn beta_schedule_is_continuous_and_clamped(start in 0.0f64..1.0, span in 0.0f64..10.0, warmup in 0usize..40, ramp in 1usize..20) {
        let max = start + span;
        let mut prev = beta_schedule(start, max, warmup, ramp, 0);
        prop_assert_eq!(prev, start);
        for epoch in 1..warmup + ramp + 10 {
            let b = beta_schedule(start, max, warmup, ramp, epoch);
            prop_assert!(b >= start && b <= max);
            prop_assert!(b >= prev);
            prop_assert!(b - prev <= span / ramp as f64 + 1e-12);
            prev = b;
        }
        prop_assert_eq!(prev, max);
    }

    #[test]
    fn config_text_roundtrip(seed in any::<u64>(), k in 2usize..600, lr in 0.01f64..2.0, beta in 0.0f64..3.0, epochs in 1usize..200) {
        let mut c = TrainConfig::default();
        c.seed = seed;
        c.model.code_count = k;
        c.lr = lr;
        c.beta_start = beta;
        c.beta_max = beta + 1.5;
        c.max_epochs = epochs;
        c.grad_clip = lr * 3.0;
        let back = TrainConfig::parse(&c.to_text()).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn checkpoint_roundtrip_random(seed in any::<u64>(), k in 2usize..6) {
        let mut r = rng(seed);
        let vocab = build_vocab(&["x y z", "y z w v"], 100, 1).unwrap();
        let mut config = TrainConfig::default();
        config.model = small_model(vocab.len(), k);
        let params = model::init_params(&config.model, LatentKind::Discrete, &mut r).unwrap();
        let mut book = CodeBook::new(k, config.model.code_dim, uniform(&mut r, k * config.model.code_dim, 1e3), 0.97).unwrap();
        book.set_ema_counts(uniform(&mut r, k, 5.0).iter().map(|x| x.abs()).collect());
        let ck = Checkpoint {
            kind: ArtifactKind::Dvam,
            config,
            vocab,
            params,
            codebook: Some(book),
            rng: RngState::capture(&r),
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.params.digest(), ck.params.digest());
        prop_assert_eq!(back, ck);
    }
}

fn g_mask(valid: usize, t: usize) -> Vec<f64> {
    attention::mask_bias(&[valid], t)
}
