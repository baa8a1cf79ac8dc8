//! End-to-end acceptance checks. Runs as a plain binary and prints one
//! PASS/FAIL line per criterion; exits nonzero if any criterion fails.

mod common;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::time::{Duration, Instant};

use common::{ok, p, sentence, word, write_lines};
use cpt_core::batching::{example_rng, MaskAction, Masker, MaskingConfig};
use cpt_core::eval::{average_metric, f1_score, jaccard, pearson, F1Average};
use cpt_core::model::loss::mlm_loss;
use cpt_core::model::{
    load_checkpoint, load_checkpoint_with, parameter_count, save_checkpoint, Checkpoint, HeadKind, MlmRows,
    Mode, Model, ModelConfig, OutputGrads, Params, TaskHead, Targets,
};
use cpt_core::tokenizer::{Vocab, SPECIAL_TOKENS};
use cpt_core::training::{
    adamw_step, clip_gradients, global_norm, loss_log_csv, lr_at, pretrain, validation_examples,
    validation_loss, AdamState, PretrainData, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let filters: Vec<usize> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .filter_map(|a| a.parse().ok())
        .collect();
    let criteria: [(usize, &str, u64, Check); 10] = [
        (1, "dedup matches brute-force window counting", 60, dedup_oracle),
        (2, "masking statistics", 30, masking_statistics),
        (3, "translation-pair layout", 10, tlm_layout),
        (4, "analytic gradients match finite differences", 300, gradient_check),
        (5, "layer truncation", 10, truncation),
        (6, "optimizer, schedule and clipping", 10, optimizer),
        (7, "overfit a toy corpus", 600, overfit),
        (8, "staged pipeline end to end", 900, pipeline),
        (9, "metric arithmetic against published rows", 10, metrics),
        (10, "checkpoint container", 10, checkpoint_format),
    ];
    let mut failed = 0;
    for (id, name, budget, check) in criteria {
        if !filters.is_empty() && !filters.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check)
            .unwrap_or_else(|e| Err(format!("panicked: {}", panic_message(&e))));
        let elapsed = start.elapsed();
        let result = result.and_then(|detail| {
            if elapsed > Duration::from_secs(budget) {
                Err(format!("{detail}; took {:.1}s, budget {budget}s", elapsed.as_secs_f64()))
            } else {
                Ok(detail)
            }
        });
        match result {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail} ({:.1}s)", elapsed.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL {id:>2} {name}: {why} ({:.1}s)", elapsed.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn panic_message(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().expect("tempdir")
}

// 1 ------------------------------------------------------------------------

/// Keeps a sentence unless at least `threshold` of its windows occur
/// elsewhere in the corpus; of byte-identical copies only the first is kept.
fn brute_force_dedup(corpus: &[String], window: usize, threshold: f64) -> Vec<String> {
    let windows = |s: &str| -> Vec<String> {
        let toks: Vec<&str> = s.split_whitespace().collect();
        if toks.is_empty() {
            vec![]
        } else if toks.len() < window {
            vec![toks.join(" ")]
        } else {
            toks.windows(window).map(|w| w.join(" ")).collect()
        }
    };
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut copies: HashMap<&str, usize> = HashMap::new();
    for s in corpus {
        for w in windows(s) {
            *counts.entry(w).or_default() += 1;
        }
        *copies.entry(s.as_str()).or_default() += 1;
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for s in corpus {
        let ws = windows(s);
        let repeated = ws.iter().filter(|w| counts[*w] > 1).count();
        let ratio = if ws.is_empty() { 0.0 } else { repeated as f64 / ws.len() as f64 };
        let first = seen.insert(s.as_str());
        if ratio < threshold || (copies[s.as_str()] > 1 && first) {
            out.push(s.clone());
        }
    }
    out
}

fn planted_corpus(rng: &mut ChaCha8Rng) -> Vec<String> {
    let lex: Vec<String> = (0..rng.gen_range(30..300)).map(word).collect();
    let n = rng.gen_range(50..=1000);
    let mut out: Vec<String> = Vec::with_capacity(n);
    while out.len() < n {
        let roll: f64 = rng.gen();
        if out.len() > 5 && roll < 0.15 {
            let i = rng.gen_range(0..out.len());
            out.push(out[i].clone());
        } else if out.len() > 5 && roll < 0.3 {
            let i = rng.gen_range(0..out.len());
            let mut toks: Vec<String> = out[i].split(' ').map(str::to_string).collect();
            let j = rng.gen_range(0..toks.len());
            toks[j] = lex[rng.gen_range(0..lex.len())].clone();
            if rng.gen_bool(0.5) {
                toks.push(lex[rng.gen_range(0..lex.len())].clone());
            }
            out.push(toks.join(" "));
        } else {
            let (lo, hi) = if rng.gen_bool(0.2) { (1, 9) } else { (10, 30) };
            out.push(sentence(rng, &lex, lo, hi));
        }
    }
    out
}

fn dedup_oracle() -> Result<String, String> {
    let dir = tempdir();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut sentences, mut removed, mut kept_from_pools) = (0, 0, 0);
    for c in 0..50 {
        let corpus = planted_corpus(&mut rng);
        let input = dir.path().join(format!("c{c}.txt"));
        let output = dir.path().join(format!("c{c}.dedup.txt"));
        write_lines(&input, &corpus);
        ok(&["dedup", "--window", "10", "--threshold", "0.7", "--in", p(&input), "--out", p(&output)]);
        let got: Vec<String> = std::fs::read_to_string(&output)
            .map_err(|e| e.to_string())?
            .lines()
            .map(str::to_string)
            .collect();
        let want = brute_force_dedup(&corpus, 10, 0.7);
        ensure!(got == want, "corpus {c}: {} kept by cpt, {} by the oracle", got.len(), want.len());
        let distinct: HashSet<&String> = corpus.iter().collect();
        let pools = corpus.len() - distinct.len();
        ensure!(pools > 0, "corpus {c} has no exact duplicates");
        kept_from_pools += want.iter().filter(|s| corpus.iter().filter(|t| t == s).count() > 1).count();
        sentences += corpus.len();
        removed += corpus.len() - got.len();
    }
    ensure!(kept_from_pools > 0, "no duplicate pool kept a copy");
    Ok(format!(
        "50 corpora, {sentences} sentences, {removed} removed, {kept_from_pools} kept from duplicate pools"
    ))
}

// 2 ------------------------------------------------------------------------

fn word_vocab(n: usize) -> Vocab {
    let mut toks: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    toks.extend((0..n).map(|i| format!("w{i}")));
    Vocab::from_tokens(toks).expect("vocab")
}

fn masking_statistics() -> Result<String, String> {
    let vocab = word_vocab(1000);
    let specials = vocab.specials();
    let masker = Masker::new(&vocab, MaskingConfig::default(), 202).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut eligible, mut selected, mut masked, mut random, mut unchanged_keep) = (0usize, 0usize, 0, 0, 0);
    for i in 0..10_000u64 {
        let ids: Vec<u32> = (0..200).map(|_| rng.gen_range(5..vocab.len() as u32)).collect();
        let (ex, actions) = masker.mlm(&ids, &mut example_rng(1, i)).map_err(|e| e.to_string())?;
        eligible += ids.len();
        for (pos, label) in ex.mlm_labels.iter().enumerate() {
            let Some(orig) = label else { continue };
            selected += 1;
            ensure!(*orig == ids[pos - 1], "label at {pos} is not the original id");
            let tok = ex.token_ids[pos];
            match actions[pos] {
                MaskAction::Masked => {
                    ensure!(tok == specials.mask, "masked position holds {tok}");
                    masked += 1;
                }
                MaskAction::Random(d) => {
                    ensure!(tok == d && !specials.contains(tok), "random position holds {tok}");
                    random += 1;
                }
                other => {
                    unchanged_keep += 1;
                    ensure!(false, "labeled position {pos} has action {other:?}");
                }
            }
        }
        ensure!(
            ex.mlm_labels[0].is_none() && ex.mlm_labels[201].is_none(),
            "special position selected"
        );
    }
    let sel = selected as f64 / eligible as f64;
    let m = masked as f64 / selected as f64;
    let r = random as f64 / selected as f64;
    ensure!((0.14..=0.16).contains(&sel), "selected fraction {sel:.4}");
    ensure!((0.88..=0.92).contains(&m), "mask share {m:.4}");
    ensure!((0.08..=0.12).contains(&r), "random share {r:.4}");
    ensure!(unchanged_keep == 0, "{unchanged_keep} keep-unchanged events");
    Ok(format!("selected {sel:.4}, mask {m:.4}, random {r:.4}, keep-unchanged 0"))
}

// 3 ------------------------------------------------------------------------

fn tlm_layout() -> Result<String, String> {
    let vocab = word_vocab(300);
    let s = vocab.specials();
    let masker = Masker::new(&vocab, MaskingConfig::default(), 256).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..1000u64 {
        let src: Vec<u32> = (0..rng.gen_range(1..60)).map(|_| rng.gen_range(5..305)).collect();
        let tgt: Vec<u32> = (0..rng.gen_range(1..60)).map(|_| rng.gen_range(5..305)).collect();
        let (ex, _) = masker.tlm(&src, &tgt, &mut example_rng(4, i)).map_err(|e| e.to_string())?;
        let zeros = ex.position_ids.iter().filter(|&&x| x == 0).count();
        ensure!(zeros == 2, "pair {i}: {zeros} zero positions");
        let first_sep = ex.token_ids.iter().position(|&t| t == s.sep).unwrap_or(usize::MAX);
        // a random replacement never produces [SEP], so the first one is the boundary
        ensure!(first_sep == src.len() + 1, "pair {i}: first [SEP] at {first_sep}");
        let boundary = ex.segment_ids.iter().position(|&g| g == 1);
        ensure!(boundary == Some(first_sep + 1), "pair {i}: segment 1 starts at {boundary:?}");
        ensure!(ex.segment_ids[first_sep + 1..].iter().all(|&g| g == 1), "pair {i}: segment not contiguous");
        let expect: Vec<u32> = (0..=src.len() as u32 + 1).chain(0..=tgt.len() as u32).collect();
        ensure!(ex.position_ids == expect, "pair {i}: positions {:?}", ex.position_ids);
        ensure!(ex.token_ids[0] == s.cls && *ex.token_ids.last().unwrap() == s.sep, "pair {i}: ends");
    }
    Ok("1000 pairs, positions restart at the target".into())
}

// 4 ------------------------------------------------------------------------

fn gc_batch() -> cpt_core::batching::Batch {
    cpt_core::batching::Batch {
        batch_size: 2,
        seq_len: 6,
        token_ids: vec![2, 17, 4, 3, 33, 3, 2, 41, 9, 3, 0, 0],
        position_ids: vec![0, 1, 2, 3, 0, 1, 0, 1, 2, 3, 4, 5],
        segment_ids: vec![0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0],
        attention_mask: vec![1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0],
        mlm_labels: vec![None, Some(9), Some(12), None, Some(21), None, None, Some(40), None, None, None, None],
    }
}

fn gc_loss(
    m: &Model<f64>,
    head: &TaskHead<f64>,
    kind: Option<HeadKind>,
    want_grads: bool,
) -> (f64, Option<(Params<f64>, Params<f64>)>) {
    let b = gc_batch();
    match kind {
        None => {
            let out = m.forward(&b, Mode::Eval, MlmRows::Labeled).unwrap();
            let labels: Vec<Option<u32>> = out.mlm_rows.iter().map(|&r| b.mlm_labels[r]).collect();
            let l = mlm_loss(&out.mlm_logits, m.config.vocab_size, &labels).unwrap();
            let grads = want_grads.then(|| {
                let g = m
                    .backward(&out, OutputGrads { mlm_logits: Some(&l.grad), ..Default::default() })
                    .unwrap();
                (g, head.params.zeros_like())
            });
            (l.loss, grads)
        }
        Some(k) => {
            let out = m.forward(&b, Mode::Eval, MlmRows::None).unwrap();
            let y = head.forward(&out.pooled);
            let t = match k {
                HeadKind::SingleClass(_) | HeadKind::PairClass(_) => Targets::Classes(vec![2, 0]),
                HeadKind::MultiLabel(_) => Targets::MultiLabel(vec![vec![0, 2], vec![1]]),
                HeadKind::Regression => Targets::Real(vec![0.3, 0.8]),
            };
            let l = head.loss(&y, &t).unwrap();
            let grads = want_grads.then(|| {
                let (hg, dp) = head.backward(&out.pooled, &l.grad);
                let g = m
                    .backward(&out, OutputGrads { pooled: Some(&dp), ..Default::default() })
                    .unwrap();
                (g, hg)
            });
            (l.loss, grads)
        }
    }
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let denom = norm(a).max(norm(n));
    if denom < 1e-10 {
        0.0
    } else {
        norm(&diff) / denom
    }
}

fn gradient_check() -> Result<String, String> {
    let cfg = ModelConfig {
        num_layers: 2,
        hidden_size: 8,
        num_heads: 2,
        ff_size: 16,
        vocab_size: 50,
        max_positions: 16,
        num_segments: 2,
        ..ModelConfig::default()
    };
    let h = 1e-5;
    let mut summary = Vec::new();
    let kinds = [
        ("mlm", None),
        ("classification", Some(HeadKind::SingleClass(3))),
        ("multi-label", Some(HeadKind::MultiLabel(3))),
        ("regression", Some(HeadKind::Regression)),
    ];
    for (label, kind) in kinds {
        let mut m = Model::<f64>::init(&cfg, 21).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for (name, t) in m.params.iter_mut() {
            for v in &mut t.data {
                let r: f64 = rng.gen_range(-0.5..0.5);
                *v = if name.ends_with(".gain") { 1.0 + r } else { r };
            }
        }
        let mut head = TaskHead::<f64>::init(kind.unwrap_or(HeadKind::Regression), 8, 1).map_err(|e| e.to_string())?;
        for (_, t) in head.params.iter_mut() {
            for v in &mut t.data {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let (_, grads) = gc_loss(&m, &head, kind, true);
        let (g, hg) = grads.unwrap();
        let mut worst = (0.0f64, String::new());
        let names: Vec<String> = m.params.names().cloned().collect();
        for name in &names {
            let n = m.params.get(name).unwrap().numel();
            let mut fd = vec![0.0; n];
            for i in 0..n {
                let orig = m.params.get(name).unwrap().data[i];
                m.params.get_mut(name).unwrap().data[i] = orig + h;
                let up = gc_loss(&m, &head, kind, false).0;
                m.params.get_mut(name).unwrap().data[i] = orig - h;
                let down = gc_loss(&m, &head, kind, false).0;
                m.params.get_mut(name).unwrap().data[i] = orig;
                fd[i] = (up - down) / (2.0 * h);
            }
            let e = rel_err(&g.get(name).unwrap().data, &fd);
            if e > worst.0 {
                worst = (e, name.clone());
            }
        }
        if kind.is_some() {
            let names: Vec<String> = head.params.names().cloned().collect();
            for name in &names {
                let n = head.params.get(name).unwrap().numel();
                let mut fd = vec![0.0; n];
                for i in 0..n {
                    let orig = head.params.get(name).unwrap().data[i];
                    head.params.get_mut(name).unwrap().data[i] = orig + h;
                    let up = gc_loss(&m, &head, kind, false).0;
                    head.params.get_mut(name).unwrap().data[i] = orig - h;
                    let down = gc_loss(&m, &head, kind, false).0;
                    head.params.get_mut(name).unwrap().data[i] = orig;
                    fd[i] = (up - down) / (2.0 * h);
                }
                let e = rel_err(&hg.get(name).unwrap().data, &fd);
                if e > worst.0 {
                    worst = (e, name.clone());
                }
            }
        }
        ensure!(worst.0 < 1e-4, "{label}: {} relative error {:e}", worst.1, worst.0);
        summary.push(format!("{label} {:.1e}", worst.0));
    }
    Ok(format!("max relative error per loss: {}", summary.join(", ")))
}

// 5 ------------------------------------------------------------------------

fn truncation() -> Result<String, String> {
    let dir = tempdir();
    let big = dir.path().join("l12.ckpt");
    let small = dir.path().join("l4.ckpt");
    let same = dir.path().join("l12b.ckpt");
    ok(&[
        "--seed", "8", "init", "--vocab-size", "300", "--layers", "12", "--hidden", "32", "--heads", "4",
        "--ff-size", "64", "--out", p(&big),
    ]);
    ok(&["truncate", "--in", p(&big), "--keep-layers", "4", "--out", p(&small)]);
    ok(&["truncate", "--in", p(&big), "--keep-layers", "12", "--out", p(&same)]);
    let desc = ok(&["inspect-checkpoint", "--in", p(&small)]);
    ensure!(desc.contains("num_layers=4\n"), "inspect does not show num_layers=4");

    let b = load_checkpoint(&big).map_err(|e| e.to_string())?;
    let s = load_checkpoint(&small).map_err(|e| e.to_string())?;
    let bits = |c: &Checkpoint, n: &str| -> Vec<u32> {
        c.tensors.get(n).unwrap().data.iter().map(|v| v.to_bits()).collect()
    };
    let mut compared = 0;
    for (name, _) in s.tensors.iter() {
        ensure!(b.tensors.get(name).is_some(), "{name} not in the source");
        ensure!(bits(&s, name) == bits(&b, name), "{name} differs from the source");
        compared += 1;
    }
    for l in 0..12 {
        let prefix = format!("layers.{l}.");
        let present = s.tensors.names().any(|n| n.starts_with(&prefix));
        ensure!(present == (l < 4), "layer {l} presence wrong");
    }
    let fresh_cfg = ModelConfig { num_layers: 4, ..b.config.clone() };
    let fresh = Model::<f32>::init(&fresh_cfg, 0).map_err(|e| e.to_string())?;
    ensure!(s.num_parameters() == fresh.num_parameters(), "parameter counts differ");
    ensure!(s.num_parameters() == parameter_count(&fresh_cfg), "parameter count formula differs");

    let id = load_checkpoint(&same).map_err(|e| e.to_string())?;
    ensure!(id.config == b.config, "keep = L changed the config");
    ensure!(id.tensors == b.tensors, "keep = L changed tensors");
    let mut meta = id.metadata.clone();
    meta.remove("truncated_from");
    ensure!(meta == b.metadata, "keep = L changed metadata beyond truncated_from");
    Ok(format!(
        "{compared} tensors byte-equal, {} parameters (fresh 4-layer: {})",
        s.num_parameters(),
        fresh.num_parameters()
    ))
}

// 6 ------------------------------------------------------------------------

fn optimizer() -> Result<String, String> {
    let cfg = TrainConfig::default();
    let lr = |s| lr_at(s, &cfg).map_err(|e| e.to_string());
    let (w, t, base) = (cfg.warmup_steps, cfg.total_steps, cfg.base_lr);
    ensure!(w == 10_000 && base == 1e-5, "defaults are warmup {w}, lr {base}");
    ensure!(lr(0)? == 0.0, "lr_at(0) = {}", lr(0)?);
    ensure!((lr(w)? - 1e-5).abs() < 1e-12, "lr_at(10000) = {}", lr(w)?);
    ensure!(lr(t)? == 0.0, "lr_at(total) = {}", lr(t)?);
    let rising = base * (w - 1) as f64 / w as f64;
    let falling = base * (t - w - 1) as f64 / (t - w) as f64;
    ensure!((lr(w - 1)? - rising).abs() < 1e-12, "warmup side off");
    ensure!((lr(w + 1)? - falling).abs() < 1e-12, "decay side off");
    let left_limit = base * w as f64 / w as f64;
    let right_limit = base * (t - w) as f64 / (t - w) as f64;
    ensure!((left_limit - lr(w)?).abs() < 1e-12 && (right_limit - lr(w)?).abs() < 1e-12, "jump at warmup");

    // two AdamW steps on one decayed scalar, against the closed form
    let cfg = TrainConfig { weight_decay: 0.2, ..TrainConfig::default() };
    let (p0, g1, g2, lr1, lr2) = (0.75f64, 0.3f64, -0.1f64, 1e-3, 2e-3);
    let mut params = Params::new();
    params.insert("w", cpt_core::model::Tensor::from_vec(&[1], vec![p0]));
    let mut state = AdamState::new(&params);
    let grad = |g: f64| {
        let mut gp = Params::new();
        gp.insert("w", cpt_core::model::Tensor::from_vec(&[1], vec![g]));
        gp
    };
    adamw_step(&mut params, &grad(g1), &mut state, 1, lr1, &cfg).map_err(|e| e.to_string())?;
    let (b1, b2, eps, wd) = (cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let m1 = (1.0 - b1) * g1;
    let v1 = (1.0 - b2) * g1 * g1;
    let p1 = p0 * (1.0 - lr1 * wd) - lr1 * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
    let got1 = params.data("w")[0];
    ensure!((got1 - p1).abs() < 1e-12, "step 1: {got1} vs {p1}");
    adamw_step(&mut params, &grad(g2), &mut state, 2, lr2, &cfg).map_err(|e| e.to_string())?;
    let m2 = b1 * m1 + (1.0 - b1) * g2;
    let v2 = b2 * v1 + (1.0 - b2) * g2 * g2;
    let p2 = p1 * (1.0 - lr2 * wd)
        - lr2 * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
    let got2 = params.data("w")[0];
    ensure!((got2 - p2).abs() < 1e-12, "step 2: {got2} vs {p2}");

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..100 {
        let mut g = Params::<f64>::new();
        let scale = 10f64.powf(rng.gen_range(-3.0..1.0));
        for k in 0..rng.gen_range(1..5) {
            let n = rng.gen_range(1..50);
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
            g.insert(format!("t{k}"), cpt_core::model::Tensor::from_vec(&[n], data));
        }
        let pre: f64 = g.iter().flat_map(|(_, t)| t.data.iter()).map(|x| x * x).sum::<f64>().sqrt();
        let reported = clip_gradients(&mut g, 0.1);
        let post: f64 = g.iter().flat_map(|(_, t)| t.data.iter()).map(|x| x * x).sum::<f64>().sqrt();
        ensure!((reported - pre).abs() < 1e-9 * pre.max(1.0), "trial {trial}: reported norm {reported} vs {pre}");
        ensure!((post - pre.min(0.1)).abs() < 1e-6, "trial {trial}: post-clip norm {post}, pre {pre}");
        ensure!((global_norm(&g) - post).abs() < 1e-12, "trial {trial}: global_norm disagrees");
    }
    Ok("schedule endpoints and continuity, two closed-form AdamW steps, 100 clip trials".into())
}

// 7 ------------------------------------------------------------------------

fn overfit_run() -> Result<(Vec<String>, f64, f64), String> {
    let vocab = word_vocab(40);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let corpus: Vec<Vec<u32>> = (0..32).map(|_| (0..10).map(|_| 5 + rng.gen_range(0..40)).collect()).collect();
    let data = PretrainData::Mlm(corpus);
    let cfg = ModelConfig {
        num_layers: 2,
        hidden_size: 64,
        num_heads: 2,
        ff_size: 256,
        vocab_size: vocab.len(),
        max_positions: 64,
        num_segments: 2,
        dropout_prob: 0.0,
        layer_norm_eps: 1e-12,
    };
    let tc = TrainConfig {
        base_lr: 3e-3,
        warmup_steps: 200,
        total_steps: 2000,
        weight_decay: 0.01,
        clip_norm: 1.0,
        eps: 1e-8,
        batch_size: 32,
        validation_every: 250,
        patience: 1000,
        seed: 3,
        max_seq_len: 64,
        ..TrainConfig::default()
    };
    let masking = MaskingConfig::default();
    let out = pretrain(Model::<f32>::init(&cfg, 5).map_err(|e| e.to_string())?, &data, &data, &vocab, &masking, &tc)
        .map_err(|e| e.to_string())?;
    let train: Vec<f64> = out.log.iter().filter_map(|r| r.train_loss).collect();
    let tail = &train[train.len().saturating_sub(50)..];
    let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
    let masker = Masker::new(&vocab, masking, 64).map_err(|e| e.to_string())?;
    let examples = validation_examples(&data, &masker, &tc).map_err(|e| e.to_string())?;
    let eval_loss = validation_loss(&out.model, &examples, 32, vocab.specials().pad).map_err(|e| e.to_string())?;
    let csv = loss_log_csv(&out.log);
    Ok((vec![csv], tail_mean, eval_loss))
}

fn overfit() -> Result<String, String> {
    let (log_a, tail_a, eval_a) = overfit_run()?;
    ensure!(tail_a < 0.1, "mean training MLM loss over the last 50 steps is {tail_a:.4}");
    ensure!(eval_a < 0.1, "eval-mode MLM loss on the corpus is {eval_a:.4}");
    let (log_b, _, _) = overfit_run()?;
    ensure!(log_a == log_b, "rerun produced a different loss log");
    Ok(format!(
        "training loss {tail_a:.4} (mean of last 50 steps), eval loss {eval_a:.4}, rerun log bit-identical"
    ))
}

// 8 ------------------------------------------------------------------------

const ENGLISH: &[&str] = &[
    "the", "house", "river", "road", "city", "book", "school", "market", "friend", "water", "bread", "sun",
    "night", "door", "window", "car", "street", "teacher", "child", "work", "money", "phone", "letter",
    "garden", "tree", "song", "story", "table", "chair", "morning",
];

/// Raw corpora with markup, emoji, diacritics, blank lines and planted
/// duplicates; plus a separable classification task.
fn synthetic_corpora(dir: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let msa: Vec<String> = (0..400).map(word).collect();
    let dialect: Vec<String> = (0..120).map(|i| word(2000 + i)).collect();
    let mixed: Vec<String> = msa.iter().chain(dialect.iter().take(40)).cloned().collect();
    let noisy = |rng: &mut ChaCha8Rng, s: String| -> String {
        match rng.gen_range(0..10) {
            0 => format!("<p>{s}</p>"),
            1 => format!("{s} 😀"),
            2 => s.replacen(' ', "\u{064E} ", 1),
            _ => s,
        }
    };

    let mut c1: Vec<String> = Vec::new();
    while c1.len() < 5000 {
        if c1.len() > 10 && rng.gen_bool(0.03) {
            let i = rng.gen_range(0..c1.len());
            c1.push(c1[i].clone());
        } else {
            let s = sentence(&mut rng, &mixed, 6, 16);
            c1.push(noisy(&mut rng, s));
        }
    }
    c1.insert(100, String::new());
    write_lines(&dir.join("c1.raw"), &c1);

    let c2: Vec<String> = (0..500)
        .map(|_| {
            let s = sentence(&mut rng, &dialect, 6, 14);
            noisy(&mut rng, s)
        })
        .collect();
    write_lines(&dir.join("c2.raw"), &c2);

    let c3: Vec<String> = (0..500)
        .map(|_| {
            let n = rng.gen_range(4..12);
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..ENGLISH.len())).collect();
            let src: Vec<&str> = idx.iter().map(|&i| msa[i].as_str()).collect();
            let tgt: Vec<&str> = idx.iter().map(|&i| ENGLISH[i]).collect();
            format!("{}\t{}", src.join(" "), tgt.join(" "))
        })
        .collect();
    write_lines(&dir.join("c3.raw"), &c3);

    // label 1: the sentence carries dialect markers
    let task = |rng: &mut ChaCha8Rng, n: usize| -> String {
        let mut out = String::from("text_a\tlabel\n");
        for i in 0..n {
            let label = i % 2;
            let mut toks: Vec<String> = (0..rng.gen_range(6..12))
                .map(|_| msa[rng.gen_range(0..msa.len())].clone())
                .collect();
            if label == 1 {
                for _ in 0..3 {
                    let at = rng.gen_range(0..=toks.len());
                    toks.insert(at, dialect[rng.gen_range(0..dialect.len())].clone());
                }
            }
            out.push_str(&format!("{}\t{label}\n", toks.join(" ")));
        }
        out
    };
    let td = dir.join("task");
    std::fs::create_dir_all(&td).unwrap();
    std::fs::write(td.join("train.tsv"), task(&mut rng, 600)).unwrap();
    std::fs::write(td.join("dev.tsv"), task(&mut rng, 200)).unwrap();

    std::fs::write(
        dir.join("plan.toml"),
        r#"[[stage]]
tag = "c1"
corpora = ["c1.txt"]
objective = "mlm"
[stage.train]
total_steps = 800
warmup_steps = 80

[[stage]]
tag = "c2"
corpora = ["c2.txt"]
objective = "mlm"
[stage.train]
total_steps = 200
warmup_steps = 20
held_out_fraction = 0.05

[[stage]]
tag = "c2c3"
corpora = ["c3.tsv"]
objective = "tlm"
[stage.train]
total_steps = 200
warmup_steps = 20
held_out_fraction = 0.05
"#,
    )
    .unwrap();
}

fn read_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect()
}

/// Stage data rebuilt independently of the CLI, from the stage's files.
fn stage_data(dir: &Path, tag: &str, vocab: &Vocab) -> PretrainData {
    match tag {
        "c1" | "c2" => PretrainData::Mlm(
            read_lines(&dir.join(format!("{tag}.txt")))
                .iter()
                .map(|l| vocab.encode(l))
                .filter(|v| !v.is_empty())
                .collect(),
        ),
        _ => PretrainData::Tlm(
            read_lines(&dir.join("c3.tsv"))
                .iter()
                .map(|l| {
                    let (a, b) = l.split_once('\t').unwrap();
                    (vocab.encode(a), vocab.encode(b))
                })
                .filter(|(a, b)| !a.is_empty() && !b.is_empty())
                .collect(),
        ),
    }
}

fn pipeline() -> Result<String, String> {
    let dir = tempdir();
    let d = dir.path();
    synthetic_corpora(d);
    for c in ["c1", "c2"] {
        ok(&["clean", "--stage", &c.to_uppercase(), "--in", p(&d.join(format!("{c}.raw"))), "--out", p(&d.join(format!("{c}.clean")))]);
        ok(&[
            "dedup", "--in", p(&d.join(format!("{c}.clean"))), "--out", p(&d.join(format!("{c}.txt"))), "--report",
            p(&d.join(format!("{c}.dedup.toml"))),
        ]);
    }
    ok(&["clean", "--parallel", "--stage", "C3", "--in", p(&d.join("c3.raw")), "--out", p(&d.join("c3.tsv"))]);
    let c1_kept = read_lines(&d.join("c1.txt")).len();
    let c1_clean = read_lines(&d.join("c1.clean")).len();
    ensure!(c1_clean == 5000 && c1_kept < c1_clean, "dedup kept {c1_kept} of {c1_clean}");
    ensure!(
        !std::fs::read_to_string(d.join("c1.txt")).unwrap().contains(['<', '😀', '\u{064E}']),
        "cleaning left markup, emoji or diacritics"
    );

    ok(&[
        "tokenizer", "train", "--vocab-size", "600", "--in", p(&d.join("c1.txt")), p(&d.join("c2.txt")), "--parallel",
        p(&d.join("c3.tsv")), "--out", p(&d.join("vocab.txt")),
    ]);
    let vocab = Vocab::load(&d.join("vocab.txt")).map_err(|e| e.to_string())?;

    let out = d.join("stages");
    let stdout = ok(&[
        "--seed", "17", "pretrain", "--from-scratch", "--plan", p(&d.join("plan.toml")), "--vocab",
        p(&d.join("vocab.txt")), "--out-dir", p(&out), "--layers", "2", "--hidden", "64", "--heads", "2",
        "--ff-size", "128", "--max-positions", "64", "--max-seq-len", "64", "--dropout", "0.1", "--lr", "2e-3",
        "--batch-size", "16", "--weight-decay", "0.01", "--clip-norm", "1.0", "--validation-every", "100",
        "--patience", "3",
    ]);

    // step-0 validation loss of each stage is the previous stage's model
    // evaluated on this stage's held-out split
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let plan = &manifest["config"]["plan"]["stage"];
    let masking = MaskingConfig { seed: 17, ..MaskingConfig::default() };
    let tags = ["c1", "c2", "c2c3"];
    let mut prev = "init";
    let mut chain = Vec::new();
    for (k, tag) in tags.iter().enumerate() {
        let tc: TrainConfig = serde_json::from_value(plan[k]["train"].clone()).map_err(|e| e.to_string())?;
        ensure!(tc.seed == 17, "stage {tag} seed {}", tc.seed);
        let data = stage_data(d, tag, &vocab);
        let (_, valid) = data.split(tc.held_out_fraction, tc.seed).map_err(|e| e.to_string())?;
        let masker = Masker::new(&vocab, masking, tc.max_seq_len).map_err(|e| e.to_string())?;
        let examples = validation_examples(&valid, &masker, &tc).map_err(|e| e.to_string())?;
        let before = Model::<f32>::from_checkpoint(&load_checkpoint(&out.join(format!("{prev}.ckpt"))).unwrap())
            .map_err(|e| e.to_string())?;
        let expect = validation_loss(&before, &examples, tc.batch_size, vocab.specials().pad).map_err(|e| e.to_string())?;
        let csv = std::fs::read_to_string(out.join(format!("{tag}.loss.csv"))).unwrap();
        let row0: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
        ensure!(row0[0] == "0", "{tag}: first log row is step {}", row0[0]);
        let step0: f64 = row0[3].parse().map_err(|_| format!("{tag}: no step-0 validation loss"))?;
        ensure!(step0 == expect, "{tag}: step-0 val loss {step0} but {prev} scores {expect}");

        let after = Model::<f32>::from_checkpoint(&load_checkpoint(&out.join(format!("{tag}.ckpt"))).unwrap())
            .map_err(|e| e.to_string())?;
        let best = manifest["results"][k]["best_val_loss"].as_f64().unwrap();
        let own = validation_loss(&after, &examples, tc.batch_size, vocab.specials().pad).map_err(|e| e.to_string())?;
        ensure!(own == best, "{tag}: saved checkpoint scores {own}, log says best {best}");
        ensure!(best < step0, "{tag}: validation loss did not improve ({step0} -> {best})");
        chain.push(format!("{tag} {step0:.3}->{best:.3}"));
        prev = tag;
    }
    ensure!(stdout.contains("stage c2c3"), "pretrain output lacks the last stage");

    let ft = d.join("ft");
    ok(&[
        "--seed", "17", "finetune", "--task", "FID", "--train", p(&d.join("task/train.tsv")), "--dev",
        p(&d.join("task/dev.tsv")), "--checkpoint", p(&out.join("c2c3.ckpt")), "--vocab", p(&d.join("vocab.txt")),
        "--out-dir", p(&ft), "--lr", "1e-3", "--batch-size", "16", "--max-seq-len", "64", "--clip-norm", "1.0",
        "--weight-decay", "0.01",
    ]);
    let preds = std::fs::read_to_string(ft.join("predictions.tsv")).unwrap();
    let rows: Vec<(&str, &str)> = preds.lines().skip(1).map(|l| l.split_once('\t').unwrap()).collect();
    let acc = rows.iter().filter(|(g, q)| g == q).count() as f64 / rows.len() as f64;
    ensure!(rows.len() == 200, "{} dev predictions", rows.len());
    ensure!(acc >= 0.95, "dev accuracy {acc:.3}");
    Ok(format!(
        "C1 {c1_clean}->{c1_kept} after dedup, vocab {}, {}, dev accuracy {acc:.3}",
        vocab.len(),
        chain.join(", ")
    ))
}

// 9 ------------------------------------------------------------------------

const TASKS: [&str; 8] = ["FID", "MDD", "MQ2Q", "SVREG", "SEC", "OOLD", "OHSD", "XNLI"];

fn metrics() -> Result<String, String> {
    let rows: [(&str, [f64; 8], f64); 8] = [
        ("AraBERT", [78.31, 51.15, 77.41, 42.41, 32.21, 94.92, 96.57, 51.02], 65.50),
        ("t-B-Ar", [81.04, 53.49, 72.63, 74.37, 49.26, 95.12, 98.36, 51.03], 71.91),
        ("m-B-Ar", [79.61, 56.04, 80.26, 50.82, 41.05, 94.62, 97.13, 50.57], 68.76),
        ("B-Ar", [79.32, 55.84, 80.35, 51.65, 41.88, 94.58, 97.27, 51.04], 68.99),
        ("m-B-Ar+C2", [79.35, 56.60, 80.46, 53.72, 40.13, 94.56, 97.16, 51.33], 69.16),
        ("m-B-Ar+C2+C3", [78.29, 56.82, 80.65, 51.42, 40.75, 95.18, 97.51, 52.69], 69.17),
        ("B-Ar+C2", [81.20, 55.84, 84.73, 69.72, 47.66, 94.53, 97.75, 52.13], 72.94),
        ("B-Ar+C2+C3", [79.9, 57.61, 85.31, 70.31, 48.03, 94.67, 97.91, 51.38], 73.14),
    ];
    let mut worst = 0.0f64;
    for (model, scores, quoted) in rows {
        let per_task: BTreeMap<String, f64> = TASKS.iter().map(|t| t.to_string()).zip(scores).collect();
        let avg = average_metric(&per_task, &TASKS, false).map_err(|e| e.to_string())?;
        ensure!(!avg.is_subset(), "{model}: average flagged as subset");
        let diff = (avg.value - quoted).abs();
        ensure!(diff <= 0.01, "{model}: average {:.4} vs quoted {quoted}", avg.value);
        worst = worst.max(diff);
    }
    let mut partial: BTreeMap<String, f64> = TASKS.iter().map(|t| t.to_string()).zip(rows[0].1).collect();
    partial.remove("SEC");
    let sub = average_metric(&partial, &TASKS, true).map_err(|e| e.to_string())?;
    let seven = (65.50 * 8.0 - 32.21) / 7.0;
    ensure!(sub.is_subset() && sub.missing == ["SEC"], "subset annotation missing");
    ensure!((sub.value - seven).abs() < 0.01, "subset average {}", sub.value);
    ensure!(average_metric(&partial, &TASKS, false).is_err(), "missing task accepted without subset mode");

    let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 2.0]).map_err(|e| e.to_string())?;
    ensure!((r - 0.8660).abs() < 1e-4, "pearson {r}");
    let f1 = f1_score(&[1, 0, 1, 1, 0, 0], &[1, 1, 0, 1, 0, 0], F1Average::Binary).map_err(|e| e.to_string())?;
    ensure!((f1 - 2.0 / 3.0).abs() < 1e-4, "binary f1 {f1}");
    let mf1 = f1_score(&[0, 1, 2, 2], &[0, 2, 2, 2], F1Average::Macro).map_err(|e| e.to_string())?;
    ensure!((mf1 - (1.0 + 0.0 + 0.8) / 3.0).abs() < 1e-4, "macro f1 {mf1}");
    let j = jaccard(&[vec![0, 1], vec![2], vec![]], &[vec![1], vec![2, 3], vec![]], 4).map_err(|e| e.to_string())?;
    ensure!((j - (0.5 + 0.5 + 1.0) / 3.0).abs() < 1e-4, "jaccard {j}");
    Ok(format!("8 published averages within {worst:.4}, pearson {r:.4}, f1 {f1:.4}, jaccard {j:.4}"))
}

// 10 -----------------------------------------------------------------------

/// Byte offset just past the name of `name`'s manifest entry.
fn entry_after_name(bytes: &[u8], name: &str) -> usize {
    let mut needle = (name.len() as u32).to_le_bytes().to_vec();
    needle.extend_from_slice(name.as_bytes());
    bytes.windows(needle.len()).position(|w| w == needle.as_slice()).expect("entry") + needle.len()
}

fn checkpoint_format() -> Result<String, String> {
    let dir = tempdir();
    let cfg = ModelConfig {
        num_layers: 2,
        hidden_size: 16,
        num_heads: 2,
        ff_size: 32,
        vocab_size: 60,
        max_positions: 32,
        ..ModelConfig::default()
    };
    let ckpt = Model::<f32>::init(&cfg, 4).map_err(|e| e.to_string())?.to_checkpoint().with_meta("note", "x");
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&ckpt, &path).map_err(|e| e.to_string())?;
    let back = load_checkpoint_with(&path, true).map_err(|e| e.to_string())?;
    let bits = |c: &Checkpoint| -> Vec<u32> { c.tensors.iter().flat_map(|(_, t)| t.data.iter().map(|v| v.to_bits())).collect() };
    ensure!(back.config == ckpt.config && back.metadata == ckpt.metadata, "header changed on round trip");
    ensure!(bits(&back) == bits(&ckpt), "tensor bits changed on round trip");
    let again = dir.path().join("b.ckpt");
    save_checkpoint(&back, &again).map_err(|e| e.to_string())?;
    let original = std::fs::read(&path).unwrap();
    ensure!(original == std::fs::read(&again).unwrap(), "re-saved file differs");

    let target = "layers.1.attention.query.weight";
    ensure!(ckpt.tensors.get(target).is_some(), "{target} missing from the fixture");
    let at = entry_after_name(&original, target);
    // entry layout after the name: dtype u8, ndim u8, dims u64 each, offset u64, nbytes u64
    let ndim = original[at + 1] as usize;
    let dims_at = at + 2;
    let offset_at = dims_at + 8 * ndim;
    let nbytes_at = offset_at + 8;
    let bump = |bytes: &mut Vec<u8>, pos: usize, by: u64| {
        let v = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) + by;
        bytes[pos..pos + 8].copy_from_slice(&v.to_le_bytes());
    };
    let dims0 = u64::from_le_bytes(original[dims_at..dims_at + 8].try_into().unwrap());
    let dims1 = u64::from_le_bytes(original[dims_at + 8..dims_at + 16].try_into().unwrap());
    let fixtures: Vec<(&str, Box<dyn Fn(&mut Vec<u8>)>)> = vec![
        ("unknown dtype", Box::new(move |b| b[at] = 7)),
        ("shape disagrees with nbytes", Box::new(move |b| bump(b, dims_at, 1))),
        ("nbytes disagrees with shape", Box::new(move |b| bump(b, nbytes_at, 4))),
        ("offset out of sequence", Box::new(move |b| bump(b, offset_at, 4))),
        (
            "consistent but wrong shape",
            Box::new(move |b| {
                b[dims_at..dims_at + 8].copy_from_slice(&(dims0 / 2).to_le_bytes());
                b[dims_at + 8..dims_at + 16].copy_from_slice(&(dims1 * 2).to_le_bytes());
            }),
        ),
        ("renamed tensor", Box::new(move |b| {
            let start = at - target.len();
            b[start] = b'X';
        })),
    ];
    let mut rejected = 0;
    for (what, corrupt) in &fixtures {
        let mut bytes = original.clone();
        corrupt(&mut bytes);
        let err = match Checkpoint::from_bytes(&bytes, false) {
            Ok(_) => return Err(format!("{what}: corrupted manifest accepted")),
            Err(e) => e.to_string(),
        };
        let named = if *what == "renamed tensor" {
            err.contains("Xayers.1.attention.query.weight") || err.contains(target)
        } else {
            err.contains(target)
        };
        ensure!(named, "{what}: error does not name the tensor: {err}");
        rejected += 1;
    }
    let mut short = original.clone();
    short.truncate(short.len() - 4);
    let err = Checkpoint::from_bytes(&short, false).err().map(|e| e.to_string()).unwrap_or_default();
    let last = ckpt.tensors.names().last().unwrap().clone();
    ensure!(err.contains(&last), "truncated payload error does not name {last}: {err}");
    Ok(format!("bit-identical round trip, {} corrupted fixtures rejected with the tensor named", rejected + 1))
}
