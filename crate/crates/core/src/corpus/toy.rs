//! Synthetic sentences whose entity types can only be recovered from the
//! knowledge base for a controlled fraction of mentions.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{save_dataset, save_schema, Document, RawDocument, RawEntity, RawRelation, TaskSchema};
use crate::kb::{KbEntity, KbFile};
use crate::{KeciError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEntityType {
    pub name: String,
    /// KB semantic type given to relevant candidates of this entity type.
    pub semantic_type: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRelation {
    pub name: String,
    pub head: String,
    pub tail: String,
    pub predicates: Vec<String>,
}

/// Generator settings. Sentences are `<head> <predicate> <tail> .`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    /// Surface forms per entity type for unambiguous mentions. Each form
    /// should occur at least twice in training to stay in the vocabulary.
    pub vocab_size: usize,
    pub entity_types: Vec<ToyEntityType>,
    pub relations: Vec<ToyRelation>,
    pub num_sentences: usize,
    #[serde(default)]
    pub num_dev_sentences: usize,
    /// Fraction of mentions replaced by a one-off word whose type is only
    /// recoverable from the semantic type of its relevant KB candidate.
    #[serde(default)]
    pub ambiguity_rate: f64,
    #[serde(default = "default_distractors")]
    pub distractors_per_mention: usize,
    #[serde(default = "default_distractor_types")]
    pub distractor_semantic_types: Vec<String>,
    #[serde(default = "default_kb_dim")]
    pub kb_dim: usize,
    #[serde(default = "default_definition_len")]
    pub definition_length: usize,
    /// Fraction of unambiguous surface forms that also get a KB entry.
    #[serde(default)]
    pub unambiguous_kb_coverage: f64,
}

fn default_distractors() -> usize {
    2
}

fn default_distractor_types() -> Vec<String> {
    ["Gene_or_Genome", "Disease_or_Syndrome", "Cell_Component"]
        .map(String::from)
        .to_vec()
}

fn default_kb_dim() -> usize {
    16
}

fn default_definition_len() -> usize {
    4
}

impl ToySpec {
    /// Two entity types, two directed relations, no ambiguity.
    pub fn simple(num_sentences: usize, num_dev_sentences: usize, ambiguity_rate: f64) -> Self {
        Self {
            vocab_size: 6,
            entity_types: vec![
                ToyEntityType {
                    name: "Protein".into(),
                    semantic_type: "Amino_Acid_Peptide_or_Protein".into(),
                },
                ToyEntityType {
                    name: "Chemical".into(),
                    semantic_type: "Pharmacologic_Substance".into(),
                },
            ],
            relations: vec![
                ToyRelation {
                    name: "binds".into(),
                    head: "Protein".into(),
                    tail: "Chemical".into(),
                    predicates: vec!["binds".into(), "captures".into()],
                },
                ToyRelation {
                    name: "inhibits".into(),
                    head: "Chemical".into(),
                    tail: "Protein".into(),
                    predicates: vec!["inhibits".into(), "blocks".into()],
                },
            ],
            num_sentences,
            num_dev_sentences,
            ambiguity_rate,
            distractors_per_mention: default_distractors(),
            distractor_semantic_types: default_distractor_types(),
            kb_dim: default_kb_dim(),
            definition_length: default_definition_len(),
            unambiguous_kb_coverage: 0.0,
        }
    }

    pub fn schema(&self) -> Result<TaskSchema> {
        TaskSchema::new(
            self.entity_types.iter().map(|t| t.name.clone()).collect(),
            self.relations.iter().map(|r| r.name.clone()).collect(),
        )
    }

    fn validate(&self) -> Result<()> {
        let arg = |m: &str| Err(KeciError::Argument(format!("toy spec: {m}")));
        if self.entity_types.is_empty() {
            return arg("needs at least one entity type");
        }
        if self.relations.is_empty() {
            return arg("needs at least one relation");
        }
        if self.vocab_size == 0 {
            return arg("vocab_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.ambiguity_rate)
            || !(0.0..=1.0).contains(&self.unambiguous_kb_coverage)
        {
            return arg("rates must lie in [0, 1]");
        }
        if self.kb_dim == 0 {
            return arg("kb_dim must be positive");
        }
        if self.distractors_per_mention > 0 && self.distractor_semantic_types.is_empty() {
            return arg("distractors need distractor_semantic_types");
        }
        let sem: HashSet<&str> = self
            .entity_types
            .iter()
            .map(|t| t.semantic_type.as_str())
            .collect();
        if self
            .distractor_semantic_types
            .iter()
            .any(|d| sem.contains(d.as_str()))
        {
            return arg("distractor semantic types must differ from entity semantic types");
        }
        for r in &self.relations {
            if r.predicates.is_empty() {
                return arg(&format!("relation `{}` has no predicates", r.name));
            }
            for end in [&r.head, &r.tail] {
                if !self.entity_types.iter().any(|t| &t.name == end) {
                    return arg(&format!("relation `{}` uses unknown type `{end}`", r.name));
                }
            }
        }
        self.schema()
            .map_err(|e| KeciError::Argument(e.to_string()))?;
        Ok(())
    }
}

/// Generated corpus plus its knowledge base and schema.
#[derive(Debug, Clone)]
pub struct ToyData {
    pub train: Vec<Document>,
    pub dev: Vec<Document>,
    pub kb: KbFile,
    pub schema: TaskSchema,
    /// Semantic types attached to relevant candidates.
    pub relevant_types: Vec<String>,
    /// Semantic types used only by distractor candidates.
    pub distractor_types: Vec<String>,
}

impl ToyData {
    /// Writes `train.jsonl`, `dev.jsonl`, `kb.json` and `schema.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| KeciError::io(dir, e))?;
        save_dataset(&dir.join("train.jsonl"), &self.train, &self.schema)?;
        save_dataset(&dir.join("dev.jsonl"), &self.dev, &self.schema)?;
        save_schema(&dir.join("schema.json"), &self.schema)?;
        let kb = serde_json::to_string(&self.kb).expect("kb serializes");
        let path = dir.join("kb.json");
        std::fs::write(&path, kb + "\n").map_err(|e| KeciError::io(path, e))
    }
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "re", "su", "ta", "vo", "ne", "pi", "du", "ge", "ro", "ba", "fi", "zu", "he",
];

struct Words {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl Words {
    fn fresh(&mut self, syllables: usize, upper: bool) -> String {
        loop {
            let mut w: String = (0..syllables)
                .map(|_| SYLLABLES[self.rng.gen_range(0..SYLLABLES.len())])
                .collect();
            if upper {
                w = format!("{}{}", w.to_uppercase(), self.rng.gen_range(0..10));
            }
            if self.used.insert(w.to_lowercase()) {
                return w;
            }
        }
    }
}

struct Sentence {
    relation: usize,
    head_type: usize,
    tail_type: usize,
    predicate: String,
}

/// Deterministic under `seed`: the same spec and seed give identical data.
pub fn generate_toy(spec: &ToySpec, seed: u64) -> Result<ToyData> {
    spec.validate()?;
    let schema = spec.schema()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut words = Words {
        rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f70),
        used: HashSet::new(),
    };
    for r in &spec.relations {
        for p in &r.predicates {
            words.used.insert(p.to_lowercase());
        }
    }
    let type_idx = |name: &str| {
        spec.entity_types
            .iter()
            .position(|t| t.name == name)
            .unwrap()
    };

    let pools: Vec<Vec<String>> = spec
        .entity_types
        .iter()
        .map(|_| {
            (0..spec.vocab_size)
                .map(|_| words.fresh(2, false))
                .collect()
        })
        .collect();
    let fillers: Vec<String> = (0..24).map(|_| words.fresh(3, false)).collect();

    let mut relevant_types: Vec<String> = Vec::new();
    for t in &spec.entity_types {
        if !relevant_types.contains(&t.semantic_type) {
            relevant_types.push(t.semantic_type.clone());
        }
    }
    let mut semantic_types = relevant_types.clone();
    semantic_types.extend(spec.distractor_semantic_types.iter().cloned());

    let mut kb = KbBuilder {
        spec,
        entities: Vec::new(),
        ids: HashSet::new(),
        edges: Vec::new(),
        fillers: &fillers,
    };
    // unambiguous forms that also live in the KB
    let mut form_entity: Vec<Vec<Option<String>>> = Vec::new();
    for (t, pool) in pools.iter().enumerate() {
        let mut row = Vec::new();
        for form in pool {
            let covered = rng.gen_bool(spec.unambiguous_kb_coverage);
            row.push(covered.then(|| kb.add(&mut rng, form, &spec.entity_types[t].semantic_type)));
        }
        form_entity.push(row);
    }

    let mut split = |n: usize,
                     prefix: &str,
                     rng: &mut ChaCha8Rng,
                     kb: &mut KbBuilder,
                     decks: &mut Vec<Vec<usize>>| {
        let sentences: Vec<Sentence> = (0..n)
            .map(|_| {
                let relation = rng.gen_range(0..spec.relations.len());
                let r = &spec.relations[relation];
                Sentence {
                    relation,
                    head_type: type_idx(&r.head),
                    tail_type: type_idx(&r.tail),
                    predicate: r.predicates[rng.gen_range(0..r.predicates.len())].clone(),
                }
            })
            .collect();
        let slots = 2 * n;
        let n_ambiguous = (spec.ambiguity_rate * slots as f64).round() as usize;
        let mut order: Vec<usize> = (0..slots).collect();
        order.shuffle(rng);
        let ambiguous: HashSet<usize> = order[..n_ambiguous].iter().copied().collect();

        let mut docs = Vec::with_capacity(n);
        for (i, s) in sentences.iter().enumerate() {
            let mut mention =
                |slot: usize, ty: usize, rng: &mut ChaCha8Rng| -> (String, Option<String>) {
                    if ambiguous.contains(&slot) {
                        let word = words.fresh(2, true);
                        let id = kb.add(rng, &word, &spec.entity_types[ty].semantic_type);
                        for d in pick_distractors(rng, spec) {
                            kb.add(rng, &word, &d);
                        }
                        (word, Some(id))
                    } else {
                        let deck = &mut decks[ty];
                        if deck.is_empty() {
                            deck.extend(0..spec.vocab_size);
                            deck.shuffle(rng);
                        }
                        let f = deck.pop().unwrap();
                        (pools[ty][f].clone(), form_entity[ty][f].clone())
                    }
                };
            let (head, head_id) = mention(2 * i, s.head_type, rng);
            let (tail, tail_id) = mention(2 * i + 1, s.tail_type, rng);
            if let (Some(h), Some(t)) = (head_id, tail_id) {
                kb.edges.push((h, "interacts_with".into(), t));
            }
            let raw = RawDocument {
                id: format!("{prefix}-{i:05}"),
                text: format!("{head} {} {tail} .", s.predicate),
                entities: vec![
                    RawEntity {
                        start: 0,
                        end: 1,
                        label: spec.entity_types[s.head_type].name.clone(),
                    },
                    RawEntity {
                        start: 2,
                        end: 3,
                        label: spec.entity_types[s.tail_type].name.clone(),
                    },
                ],
                relations: vec![RawRelation {
                    head: 0,
                    tail: 1,
                    label: spec.relations[s.relation].name.clone(),
                }],
            };
            docs.push(raw.resolve(&schema).expect("generated documents are valid"));
        }
        docs
    };

    let mut decks = vec![Vec::new(); spec.entity_types.len()];
    let train = split(spec.num_sentences, "train", &mut rng, &mut kb, &mut decks);
    let mut dev_decks = vec![Vec::new(); spec.entity_types.len()];
    let dev = split(
        spec.num_dev_sentences,
        "dev",
        &mut rng,
        &mut kb,
        &mut dev_decks,
    );

    let mut type_edges = Vec::new();
    for r in &spec.relations {
        let h = &spec.entity_types[type_idx(&r.head)].semantic_type;
        let t = &spec.entity_types[type_idx(&r.tail)].semantic_type;
        type_edges.push((h.clone(), "related_to".to_string(), t.clone()));
    }
    for w in spec.distractor_semantic_types.windows(2) {
        type_edges.push((w[0].clone(), "related_to".into(), w[1].clone()));
    }
    type_edges.sort();
    type_edges.dedup();

    let KbBuilder {
        mut entities,
        edges,
        ..
    } = kb;
    entities.sort_by(|a, b| a.id.cmp(&b.id));
    let kb = KbFile {
        semantic_types,
        kb_relations: vec!["interacts_with".into(), "related_to".into()],
        entities,
        entity_edges: edges,
        type_edges,
    };
    Ok(ToyData {
        train,
        dev,
        kb,
        schema,
        relevant_types,
        distractor_types: spec.distractor_semantic_types.clone(),
    })
}

fn pick_distractors(rng: &mut ChaCha8Rng, spec: &ToySpec) -> Vec<String> {
    let pool = &spec.distractor_semantic_types;
    let mut out = Vec::with_capacity(spec.distractors_per_mention);
    let mut deck: Vec<&String> = Vec::new();
    for _ in 0..spec.distractors_per_mention {
        if deck.is_empty() {
            deck = pool.iter().collect();
            deck.shuffle(rng);
        }
        out.push(deck.pop().unwrap().clone());
    }
    out
}

struct KbBuilder<'a> {
    spec: &'a ToySpec,
    entities: Vec<KbEntity>,
    ids: HashSet<String>,
    edges: Vec<(String, String, String)>,
    fillers: &'a [String],
}

impl KbBuilder<'_> {
    fn add(&mut self, rng: &mut ChaCha8Rng, alias: &str, semantic_type: &str) -> String {
        let id = loop {
            let id = format!("C{:07}", rng.gen_range(0..10_000_000u32));
            if self.ids.insert(id.clone()) {
                break id;
            }
        };
        let definition: Vec<&str> = (0..self.spec.definition_length)
            .map(|_| self.fillers[rng.gen_range(0..self.fillers.len())].as_str())
            .collect();
        let embedding = (0..self.spec.kb_dim)
            .map(|_| {
                // round-trips exactly through JSON text
                let v: f64 = rng.gen_range(-1.0..1.0);
                (v * 1e6).round() / 1e6
            })
            .collect();
        self.entities.push(KbEntity {
            id: id.clone(),
            aliases: vec![alias.to_string()],
            definition: definition.join(" "),
            semantic_types: vec![semantic_type.to_string()],
            embedding,
        });
        id
    }
}
