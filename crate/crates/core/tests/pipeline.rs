use std::collections::BTreeSet;

use keci::corpus::toy::{generate_toy, ToySpec};
use keci::corpus::{load_dataset, save_dataset, TaskSchema};
use keci::eval::{cross_validate, evaluate, predict, run_ablation};
use keci::kb::{build_kg, link_candidates, KgNode, KnowledgeBase};
use keci::model::{KbMeta, Model};
use keci::train::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Trainer};
use keci::{KeciError, ModelConfig, Variant};

fn small_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        d_tok: 8,
        d_len: 2,
        d_kb: 16,
        max_span_len: 3,
        batch_size: 4,
        epochs: 2,
        lr_lower: 3e-3,
        lr_upper: 3e-3,
        position_encoding: true,
        ..ModelConfig::default()
    }
}

fn toy(n: usize, dev: usize, seed: u64) -> (keci::corpus::toy::ToyData, KnowledgeBase) {
    let data = generate_toy(&ToySpec::simple(n, dev, 0.5), seed).unwrap();
    let kb = KnowledgeBase::from_file(data.kb.clone()).unwrap();
    (data, kb)
}

#[test]
fn dataset_round_trips_through_jsonl() {
    let (data, _) = toy(10, 3, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    save_dataset(&path, &data.train, &data.schema).unwrap();
    assert_eq!(load_dataset(&path, &data.schema).unwrap(), data.train);
}

#[test]
fn toy_generation_is_seeded() {
    let spec = ToySpec::simple(20, 5, 0.5);
    let (a, b) = (
        generate_toy(&spec, 4).unwrap(),
        generate_toy(&spec, 4).unwrap(),
    );
    assert_eq!(a.train, b.train);
    assert_eq!(a.kb, b.kb);
    assert_ne!(generate_toy(&spec, 5).unwrap().train, a.train);
}

#[test]
fn background_graph_is_deterministic_and_typed() {
    let (data, kb) = toy(30, 0, 2);
    for doc in &data.train {
        let tokens: Vec<&str> = doc.token_texts().collect();
        let spans = keci::corpus::enumerate_spans(tokens.len(), 3);
        let candidates = link_candidates(&tokens, &spans, &kb);
        let g = build_kg(&candidates, &kb);
        assert_eq!(g, build_kg(&candidates, &kb));

        // span order does not change the node set
        let mut reversed = candidates.clone();
        reversed.reverse();
        assert_eq!(build_kg(&reversed, &kb).nodes, g.nodes);

        let entities: BTreeSet<usize> = candidates.iter().flatten().copied().collect();
        assert_eq!(g.num_entities(), entities.len());
        let expected: usize = entities
            .iter()
            .map(|e| kb.entity_type_indices(*e).len())
            .sum();
        let count = |rel: usize| g.edges.iter().filter(|(_, r, _)| *r == rel).count();
        assert_eq!(count(kb.has_type_relation()), expected);
        assert_eq!(count(kb.type_of_relation()), expected);
        for (s, r, t) in &g.edges {
            if *r == kb.has_type_relation() {
                assert!(matches!(g.nodes[*s], KgNode::Entity(_)));
                assert!(matches!(g.nodes[*t], KgNode::Type(_)));
            }
        }
    }
}

#[test]
fn ablations_drop_exactly_their_parameters() {
    let (data, kb) = toy(6, 0, 3);
    let names = |v: Variant| -> BTreeSet<String> {
        let kb = v.uses_kg().then_some(&kb);
        let model =
            Model::<f32>::new(small_config(), v, data.schema.clone(), &data.train, kb).unwrap();
        model.store.names().map(String::from).collect()
    };
    let full = names(Variant::Full);
    let diff = |v: Variant| -> BTreeSet<String> { full.difference(&names(v)).cloned().collect() };
    let prefixes = |set: &BTreeSet<String>| -> BTreeSet<String> {
        set.iter()
            .map(|n| n.split('.').next().unwrap().to_string())
            .collect()
    };

    let sent = diff(Variant::SentContextOnly);
    assert_eq!(
        prefixes(&sent),
        ["bigcn", "final", "fusion", "kg", "kgnn"]
            .map(String::from)
            .into()
    );

    let no_bigcn = diff(Variant::NoBigcn);
    assert!(!no_bigcn.is_empty() && no_bigcn.iter().all(|n| n.starts_with("bigcn.")));

    let no_rgcn = diff(Variant::NoRgcn);
    assert!(!no_rgcn.is_empty() && no_rgcn.iter().all(|n| n.starts_with("kgnn.layer")));

    let flat = diff(Variant::FlatAttention);
    assert_eq!(flat, no_bigcn.union(&no_rgcn).cloned().collect());
    assert!(names(Variant::FlatAttention)
        .iter()
        .all(|n| full.contains(n)));
}

#[test]
fn small_steps_lower_the_loss() {
    let (data, kb) = toy(8, 0, 5);
    let config = ModelConfig {
        lr_lower: 1e-4,
        lr_upper: 1e-4,
        ..small_config()
    };
    let model = Model::<f32>::new(
        config,
        Variant::Full,
        data.schema.clone(),
        &data.train,
        Some(&kb),
    )
    .unwrap();
    let docs: Vec<_> = data
        .train
        .iter()
        .map(|d| model.prepare(d, Some(&kb)).unwrap())
        .collect();
    let batch: Vec<_> = docs.iter().collect();
    let mut trainer = Trainer::new(model);
    let total =
        |t: &Trainer| -> f64 { docs.iter().map(|d| t.loss(d).unwrap().unwrap().total).sum() };
    let before = total(&trainer);
    for _ in 0..10 {
        trainer.step(&batch).unwrap();
    }
    let after = total(&trainer);
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn checkpoint_keeps_predictions() {
    let (data, kb) = toy(12, 4, 6);
    let model = keci::train::fit(
        &small_config(),
        Variant::Full,
        &data.schema,
        &data.train,
        &[],
        Some(&kb),
    )
    .unwrap()
    .model;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, model);
    let graphs = |m: &Model<f32>| -> Vec<_> {
        predict(m, &data.dev, Some(&kb))
            .unwrap()
            .into_iter()
            .map(|p| p.graph)
            .collect()
    };
    assert_eq!(graphs(&loaded), graphs(&model));
}

#[test]
fn mismatched_schema_or_kb_is_rejected() {
    let (data, kb) = toy(6, 0, 7);
    let model = Model::<f32>::new(
        small_config(),
        Variant::Full,
        data.schema.clone(),
        &data.train,
        Some(&kb),
    )
    .unwrap();
    let loaded = read_checkpoint(&write_checkpoint(&model).unwrap()).unwrap();
    let other = TaskSchema::new(vec!["Protein".into()], vec!["binds".into()]).unwrap();
    assert!(matches!(
        loaded.check_schema(&other),
        Err(KeciError::Validation(_))
    ));
    assert!(loaded.check_schema(&data.schema).is_ok());
    assert!(matches!(loaded.check_kb(None), Err(KeciError::Argument(_))));

    let mut file = data.kb.clone();
    file.semantic_types.push("Extra_Type".into());
    let other_kb = KnowledgeBase::from_file(file).unwrap();
    assert_ne!(KbMeta::of(&other_kb), KbMeta::of(&kb));
    assert!(evaluate(&loaded, &data.train, Some(&other_kb)).is_err());

    let mut bytes = write_checkpoint(&model).unwrap();
    bytes.truncate(bytes.len() / 2);
    assert!(matches!(read_checkpoint(&bytes), Err(KeciError::Format(_))));
}

#[test]
fn ablation_and_cross_validation_report_every_variant() {
    let (data, kb) = toy(12, 6, 8);
    let variants = [Variant::Full, Variant::SentContextOnly];
    let rows = run_ablation(
        &variants,
        &small_config(),
        &data.schema,
        &data.train,
        &data.dev,
        &data.dev,
        Some(&kb),
    )
    .unwrap();
    assert_eq!(rows.iter().map(|r| r.variant).collect::<Vec<_>>(), variants);
    assert!(rows[0].num_parameters > rows[1].num_parameters);

    let rows = cross_validate(
        &variants,
        &small_config(),
        &data.schema,
        &data.train,
        Some(&kb),
        3,
    )
    .unwrap();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert!((0.0..=1.0).contains(&r.metrics.entity.micro.f1));
    }
}
