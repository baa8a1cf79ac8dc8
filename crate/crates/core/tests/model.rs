use cpt_core::batching::Batch;
use cpt_core::model::loss::mlm_loss;
use cpt_core::model::{
    truncate, HeadKind, MlmRows, Mode, Model, ModelConfig, OutputGrads, Params, TaskHead, Targets,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(layers: usize) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        hidden_size: 8,
        num_heads: 2,
        ff_size: 16,
        vocab_size: 50,
        max_positions: 32,
        num_segments: 2,
        ..ModelConfig::default()
    }
}

/// Two examples of length 5; the second has two padded positions.
fn batch() -> Batch {
    Batch {
        batch_size: 2,
        seq_len: 5,
        token_ids: vec![2, 17, 4, 33, 3, 2, 41, 3, 0, 0],
        position_ids: vec![0, 1, 2, 3, 4, 0, 1, 2, 3, 4],
        segment_ids: vec![0, 0, 0, 1, 1, 0, 0, 0, 0, 0],
        attention_mask: vec![1, 1, 1, 1, 1, 1, 1, 1, 0, 0],
        mlm_labels: vec![None, Some(9), None, Some(21), None, None, Some(40), None, None, None],
    }
}

/// Spread the weights out so every gradient is comfortably above
/// finite-difference noise.
fn perturbed(cfg: &ModelConfig, seed: u64) -> Model<f64> {
    let mut m = Model::<f64>::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for (name, t) in m.params.iter_mut() {
        for v in &mut t.data {
            let r: f64 = rng.gen_range(-0.5..0.5);
            *v = if name.ends_with(".gain") { 1.0 + r } else { r };
        }
    }
    m
}

#[derive(Clone, Copy, Debug)]
enum Objective {
    Mlm,
    Head(HeadKind),
}

fn targets(kind: HeadKind) -> Targets {
    match kind {
        HeadKind::SingleClass(_) | HeadKind::PairClass(_) => Targets::Classes(vec![1, 0]),
        HeadKind::MultiLabel(_) => Targets::MultiLabel(vec![vec![0, 2], vec![]]),
        HeadKind::Regression => Targets::Real(vec![0.25, 0.9]),
    }
}

fn loss_and_grads(
    m: &Model<f64>,
    head: &TaskHead<f64>,
    obj: Objective,
    mode: Mode,
    scale: f64,
) -> (f64, Params<f64>, Params<f64>) {
    let b = batch();
    match obj {
        Objective::Mlm => {
            let out = m.forward(&b, mode, MlmRows::Labeled).unwrap();
            let labels: Vec<Option<u32>> = out.mlm_rows.iter().map(|&r| b.mlm_labels[r]).collect();
            let l = mlm_loss(&out.mlm_logits, m.config.vocab_size, &labels).unwrap();
            let d: Vec<f64> = l.grad.iter().map(|g| g * scale).collect();
            let g = m
                .backward(&out, OutputGrads { mlm_logits: Some(&d), ..Default::default() })
                .unwrap();
            (l.loss * scale, g, head.params.zeros_like())
        }
        Objective::Head(_) => {
            let out = m.forward(&b, mode, MlmRows::None).unwrap();
            let y = head.forward(&out.pooled);
            let l = head.loss(&y, &targets(head.kind)).unwrap();
            let d: Vec<f64> = l.grad.iter().map(|g| g * scale).collect();
            let (hg, d_pooled) = head.backward(&out.pooled, &d);
            let g = m
                .backward(&out, OutputGrads { pooled: Some(&d_pooled), ..Default::default() })
                .unwrap();
            (l.loss * scale, g, hg)
        }
    }
}

fn loss_only(m: &Model<f64>, head: &TaskHead<f64>, obj: Objective, mode: Mode) -> f64 {
    loss_and_grads(m, head, obj, mode, 1.0).0
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

/// Worst per-tensor relative error against central differences.
fn gradient_check(obj: Objective, mode: Mode) -> (f64, String) {
    let h = 1e-5;
    let mut m = perturbed(&small(2), 11);
    let kind = match obj {
        Objective::Mlm => HeadKind::SingleClass(2),
        Objective::Head(k) => k,
    };
    let mut head = TaskHead::<f64>::init(kind, 8, 4).unwrap();
    for (_, t) in head.params.iter_mut() {
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = ((i * 7 % 13) as f64 - 6.0) / 10.0;
        }
    }
    let (_, g, hg) = loss_and_grads(&m, &head, obj, mode, 1.0);

    let mut worst = (0.0, String::new());
    let names: Vec<String> = m.params.names().cloned().collect();
    for name in names {
        let n = m.params.get(&name).unwrap().numel();
        let mut fd = vec![0.0; n];
        for i in 0..n {
            let orig = m.params.get(&name).unwrap().data[i];
            m.params.get_mut(&name).unwrap().data[i] = orig + h;
            let up = loss_only(&m, &head, obj, mode);
            m.params.get_mut(&name).unwrap().data[i] = orig - h;
            let down = loss_only(&m, &head, obj, mode);
            m.params.get_mut(&name).unwrap().data[i] = orig;
            fd[i] = (up - down) / (2.0 * h);
        }
        let e = rel_err(&g.get(&name).unwrap().data, &fd);
        if e > worst.0 {
            worst = (e, name);
        }
    }
    if let Objective::Head(_) = obj {
        let names: Vec<String> = head.params.names().cloned().collect();
        for name in names {
            let n = head.params.get(&name).unwrap().numel();
            let mut fd = vec![0.0; n];
            for i in 0..n {
                let orig = head.params.get(&name).unwrap().data[i];
                head.params.get_mut(&name).unwrap().data[i] = orig + h;
                let up = loss_only(&m, &head, obj, mode);
                head.params.get_mut(&name).unwrap().data[i] = orig - h;
                let down = loss_only(&m, &head, obj, mode);
                head.params.get_mut(&name).unwrap().data[i] = orig;
                fd[i] = (up - down) / (2.0 * h);
            }
            let e = rel_err(&hg.get(&name).unwrap().data, &fd);
            if e > worst.0 {
                worst = (e, name);
            }
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    let objectives = [
        Objective::Mlm,
        Objective::Head(HeadKind::SingleClass(3)),
        Objective::Head(HeadKind::MultiLabel(3)),
        Objective::Head(HeadKind::Regression),
    ];
    for obj in objectives {
        for mode in [Mode::Eval, Mode::Train { seed: 5 }] {
            let (err, name) = gradient_check(obj, mode);
            eprintln!("{obj:?} {mode:?}: worst {name} {err:e}");
            assert!(err < 1e-4, "{obj:?} {mode:?}: {name} relative error {err:e}");
        }
    }
}

#[test]
fn unused_head_gets_zero_gradient_under_mlm() {
    let m = perturbed(&small(2), 1);
    let head = TaskHead::<f64>::init(HeadKind::SingleClass(2), 8, 0).unwrap();
    let (_, g, hg) = loss_and_grads(&m, &head, Objective::Mlm, Mode::Eval, 1.0);
    assert!(hg.iter().all(|(_, t)| t.data.iter().all(|&v| v == 0.0)));
    // the pooler is not on the MLM path either
    assert!(g.get("pooler.dense.weight").unwrap().data.iter().all(|&v| v == 0.0));
    assert_eq!(g.len(), m.params.len());
}

#[test]
fn doubling_the_loss_doubles_gradients() {
    let m = perturbed(&small(2), 2);
    let head = TaskHead::<f64>::init(HeadKind::SingleClass(2), 8, 0).unwrap();
    let obj = Objective::Head(HeadKind::SingleClass(2));
    let (_, g1, h1) = loss_and_grads(&m, &head, obj, Mode::Eval, 1.0);
    let (_, g2, h2) = loss_and_grads(&m, &head, obj, Mode::Eval, 2.0);
    for ((_, a), (_, b)) in g1.iter().chain(h1.iter()).zip(g2.iter().chain(h2.iter())) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(2.0 * x, *y);
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let m = Model::<f32>::init(&small(2), 3).unwrap();
    let out = m.forward(&batch(), Mode::Eval, MlmRows::None).unwrap();
    for layer in 0..2 {
        for row in out.attention_probs(layer).chunks(5) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "{s}");
        }
    }
}

#[test]
fn padded_positions_do_not_leak() {
    let m = Model::<f32>::init(&small(2), 3).unwrap();
    let a = batch();
    let mut b = batch();
    b.token_ids[8] = 27;
    b.token_ids[9] = 13;
    b.segment_ids[9] = 1;
    let oa = m.forward(&a, Mode::Eval, MlmRows::All).unwrap();
    let ob = m.forward(&b, Mode::Eval, MlmRows::All).unwrap();
    let v = m.config.vocab_size;
    for (r, &mask) in a.attention_mask.iter().enumerate() {
        if mask == 1 {
            assert_eq!(oa.mlm_logits[r * v..(r + 1) * v], ob.mlm_logits[r * v..(r + 1) * v]);
        }
    }
    assert_eq!(oa.pooled, ob.pooled);
}

#[test]
fn forward_backward_is_deterministic() {
    let run = || {
        let m = Model::<f32>::init(&small(2), 9).unwrap();
        let out = m.forward(&batch(), Mode::Train { seed: 4 }, MlmRows::Labeled).unwrap();
        let labels: Vec<Option<u32>> = out.mlm_rows.iter().map(|&r| batch().mlm_labels[r]).collect();
        let l = mlm_loss(&out.mlm_logits, 50, &labels).unwrap();
        let g = m
            .backward(&out, OutputGrads { mlm_logits: Some(&l.grad), ..Default::default() })
            .unwrap();
        (l.loss.to_bits(), g)
    };
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let a = single.install(run);
    let b = single.install(run);
    let c = run();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn truncated_forward_equals_assembled_prefix_model() {
    let deep = Model::<f32>::init(&small(5), 21).unwrap();
    let t = truncate(&deep.to_checkpoint(), 2).unwrap();
    let from_trunc = Model::<f32>::from_checkpoint(&t).unwrap();

    let mut params = Params::new();
    for (name, tensor) in deep.params.iter() {
        let keep = match cpt_core::model::layer_of(name) {
            Some(l) => l < 2,
            None => true,
        };
        if keep {
            params.insert(name.clone(), tensor.clone());
        }
    }
    let assembled = Model::from_params(small(2), params).unwrap();
    let a = from_trunc.forward(&batch(), Mode::Eval, MlmRows::All).unwrap();
    let b = assembled.forward(&batch(), Mode::Eval, MlmRows::All).unwrap();
    assert_eq!(a.mlm_logits, b.mlm_logits);
    assert_eq!(a.pooled, b.pooled);
}

#[test]
fn shape_errors() {
    let m = Model::<f32>::init(&small(1), 0).unwrap();
    let mut b = batch();
    b.token_ids[0] = 50;
    assert!(m.forward(&b, Mode::Eval, MlmRows::None).unwrap_err().to_string().contains("50"));
    let mut b = batch();
    b.position_ids[0] = 32;
    assert!(m.forward(&b, Mode::Eval, MlmRows::None).is_err());
    let mut b = batch();
    b.segment_ids.pop();
    assert!(m.forward(&b, Mode::Eval, MlmRows::None).is_err());
}
