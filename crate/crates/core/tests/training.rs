use fliplearn_core::objectives::{
    example_loss_and_grad, loss_lm, loss_total, loss_ul, train, EncodedExample, TrainConfig, UL_EPS,
};
use fliplearn_core::rendering::{render, RenderMode};
use fliplearn_core::seq_model::{
    load_checkpoint, save_checkpoint, Mat, Model, ModelConfig, SequenceScorer, Vocabulary,
};
use fliplearn_core::task_schema::{
    Instance, LabelOptionSet, PromptTemplate, Segment, TaskKind, TaskSet, Verbalizer,
};

fn cfg() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        ..ModelConfig::default()
    }
}

fn task() -> TaskSet {
    let template = PromptTemplate::new(
        "t",
        vec![
            Segment::Instruction("is the word red ?".into()),
            Segment::Input("text".into()),
        ],
    )
    .unwrap();
    let words = ["red", "blue", "green", "red", "gray", "red"];
    let instances = words
        .iter()
        .map(|w| {
            let correct = usize::from(*w != "red");
            Instance::new(
                [("text", *w)],
                LabelOptionSet::new(vec!["y".into(), "n".into()], correct).unwrap(),
            )
        })
        .collect();
    TaskSet::new(
        "red",
        TaskKind::Classification,
        vec![template],
        vec![Verbalizer::new("yn", [("y", "yes"), ("n", "no")])],
        instances,
        None,
    )
    .unwrap()
}

fn model(seed: u64) -> Model {
    let t = task();
    Model::new(cfg(), Vocabulary::for_tasks(&[t], &[]).unwrap(), seed).unwrap()
}

/// Uniform next-token distribution: every weight zero.
fn uniform_model() -> Model {
    let words = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k"].map(String::from);
    let vocab = Vocabulary::new(words, 2);
    assert_eq!(vocab.len(), 16);
    let mut m = Model::new(cfg(), vocab, 0).unwrap();
    for p in m.params_mut() {
        p.fill(0.0);
    }
    m
}

#[test]
fn uniform_closed_forms() {
    let m = uniform_model();
    let v = m.vocab();
    let src = vec![v.id("a").unwrap(), v.id("b").unwrap()];
    let tgt = vec![v.id("c").unwrap(), v.id("d").unwrap(), 1];
    let pos = EncodedExample {
        positive: (src.clone(), tgt.clone()),
        negative: Some((src, tgt)),
    };
    let (loss, _) = example_loss_and_grad(&m, &pos, 3.0).unwrap();
    assert!((loss.l_lm - 3.0 * 16f64.ln()).abs() < 1e-12);
    assert!((loss.l_lm - 8.3178).abs() < 1e-4);
    assert!((loss.l_ul + 3.0 * (15.0f64 / 16.0).ln()).abs() < 1e-12);
    assert!((loss.total - (loss.l_lm + 3.0 * loss.l_ul)).abs() < 1e-12);
}

#[test]
fn losses_match_naive_oracles() {
    let t = task();
    let m = model(11);
    let inst = &t.instances[1];
    let pos = render(
        RenderMode::Flipped,
        &t.templates[0],
        inst,
        &t.verbalizers[0],
        1,
    )
    .unwrap();
    let neg = render(
        RenderMode::Flipped,
        &t.templates[0],
        inst,
        &t.verbalizers[0],
        0,
    )
    .unwrap();
    let (src, tgt) = m.encode(&pos).unwrap();
    assert!((loss_lm(&m, &pos).unwrap() + m.sequence_logprob(&src, &tgt).unwrap()).abs() < 1e-9);

    let (src, tgt) = m.encode(&neg).unwrap();
    let logits = m.logits(&src, &tgt).unwrap();
    let mut oracle = 0.0;
    for (row, &tok) in tgt.iter().enumerate() {
        let z = logits.row(row);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let norm: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let p = ((z[tok as usize] - max).exp() / norm).min(1.0 - UL_EPS);
        oracle -= (1.0 - p).ln();
    }
    assert!((loss_ul(&m, &neg).unwrap() - oracle).abs() < 1e-9);
    assert!(loss_ul(&m, &neg).unwrap() >= 0.0);
}

#[test]
fn zero_lambda_total_is_the_likelihood_loss() {
    for x in [0.0, 1e-300, 0.1, 8.3178, 123.456] {
        assert_eq!(loss_total(x, 99.0, 0.0).total.to_bits(), x.to_bits());
    }
}

#[test]
fn training_reduces_the_loss() {
    let t = task();
    for mode in RenderMode::ALL {
        let mut m = model(1);
        let mut c = TrainConfig {
            mode,
            steps: 120,
            batch_size: 8,
            seed: 5,
            ..TrainConfig::default()
        };
        c.optimizer.learning_rate = 1e-2;
        let log = train(&mut m, std::slice::from_ref(&t), &c).unwrap();
        assert_eq!(log.records.len(), 120);
        let head: f64 = log.records[..10].iter().map(|r| r.total).sum();
        let tail: f64 = log.records[110..].iter().map(|r| r.total).sum();
        assert!(tail < 0.75 * head, "{mode}: {head} -> {tail}");
        assert!(log
            .records
            .iter()
            .all(|r| r.total == r.l_lm + r.lambda * r.l_ul));
    }
}

#[test]
fn training_is_deterministic() {
    let t = task();
    let c = TrainConfig {
        steps: 15,
        batch_size: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = model(2);
        let log = train(&mut m, std::slice::from_ref(&t), &c).unwrap();
        (m, log)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    for (x, y) in a.params().iter().zip(b.params()) {
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn disabled_unlikelihood_records_zero_lambda() {
    let t = task();
    let mut m = model(3);
    let c = TrainConfig {
        steps: 3,
        batch_size: 2,
        ul_enabled: false,
        ..TrainConfig::default()
    };
    let log = train(&mut m, &[t], &c).unwrap();
    assert!(log
        .records
        .iter()
        .all(|r| r.lambda == 0.0 && r.l_ul == 0.0 && r.total == r.l_lm));
    assert!(log.to_jsonl().unwrap().lines().count() == 3);
}

#[test]
fn zero_steps_leave_the_model_alone() {
    let t = task();
    let mut m = model(4);
    let before: Vec<Mat> = m.params().to_vec();
    let c = TrainConfig {
        steps: 0,
        ..TrainConfig::default()
    };
    assert!(train(&mut m, &[t], &c).unwrap().records.is_empty());
    assert_eq!(m.params(), &before[..]);
}

#[test]
fn checkpoint_preserves_scores() {
    let t = task();
    let m = model(8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let meta = [("mode".to_string(), "flipped".to_string())]
        .into_iter()
        .collect();
    let id = save_checkpoint(&m, &meta, &path).unwrap();
    let (back, back_meta, back_id) = load_checkpoint(&path).unwrap();
    assert_eq!((id, meta), (back_id, back_meta));
    let ex = render(
        RenderMode::Flipped,
        &t.templates[0],
        &t.instances[0],
        &t.verbalizers[0],
        0,
    )
    .unwrap();
    let (src, tgt) = m.encode(&ex).unwrap();
    assert_eq!(
        m.sequence_logprob(&src, &tgt).unwrap().to_bits(),
        back.sequence_logprob(&src, &tgt).unwrap().to_bits()
    );
}
