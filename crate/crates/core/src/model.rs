//! The full pipeline: parameters per variant, document preparation and the
//! forward pass from token ids to final span-graph distributions.

use std::collections::HashMap;

use keci_autodiff::{ParameterStore, Real, Tape, Tensor, Var};

use crate::config::{ModelConfig, RelationLossMode, Variant};
use crate::corpus::{enumerate_spans, Document, Span, TaskSchema};
use crate::encoder::{load_embedding_file, SpanEncoder, Vocab, TOKEN_EMBEDDING};
use crate::fusion::{Fusion, SpanAttention};
use crate::kb::{build_kg, link_candidates, KgNode, KnowledgeBase};
use crate::kgnn::{projection, KgInputs, NodeInit, Rgcn};
use crate::nn::{init_store, Linear, ParamSpec};
use crate::spangraph::{ordered_pairs, prune_spans, BiGcn, EntityClassifier, RelationClassifier};
use crate::{KeciError, Result};

/// Knowledge-base facts a trained model depends on.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KbMeta {
    pub semantic_types: Vec<String>,
    pub graph_relations: Vec<String>,
    pub embedding_dim: usize,
}

impl KbMeta {
    pub fn of(kb: &KnowledgeBase) -> Self {
        Self {
            semantic_types: kb.semantic_types().to_vec(),
            graph_relations: kb.graph_relations(),
            embedding_dim: kb.embedding_dim(),
        }
    }
}

/// Layer layout of one variant. Components a variant drops are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub variant: Variant,
    pub prune_ratio: f64,
    pub relation_loss_mode: RelationLossMode,
    pub relation_grad_through_edges: bool,
    pub encoder: SpanEncoder,
    pub entity: EntityClassifier,
    pub relation: RelationClassifier,
    pub bigcn: Option<BiGcn>,
    pub node_init: Option<NodeInit>,
    pub rgcn: Option<Rgcn>,
    pub projection: Option<Linear>,
    pub fusion: Option<Fusion>,
    pub final_entity: Option<EntityClassifier>,
    pub final_relation: Option<RelationClassifier>,
}

impl Architecture {
    pub fn new(
        config: &ModelConfig,
        variant: Variant,
        vocab_size: usize,
        schema: &TaskSchema,
        kb: Option<&KbMeta>,
    ) -> Result<Self> {
        let d = config.d;
        let (n_ent, n_rel) = (schema.num_entity_types(), schema.num_relation_types());
        let mut arch = Self {
            variant,
            prune_ratio: config.prune_ratio,
            relation_loss_mode: config.relation_loss_mode,
            relation_grad_through_edges: config.relation_grad_through_edges,
            encoder: SpanEncoder::new(config, vocab_size),
            entity: EntityClassifier::new("spangraph.entity", d, n_ent),
            relation: RelationClassifier::new("spangraph.relation", d, n_rel),
            bigcn: None,
            node_init: None,
            rgcn: None,
            projection: None,
            fusion: None,
            final_entity: None,
            final_relation: None,
        };
        if !variant.uses_kg() {
            return Ok(arch);
        }
        let kb = kb.ok_or_else(|| {
            KeciError::Argument(format!("variant {variant} needs a knowledge base"))
        })?;
        // an entity-free KB has no embeddings to disagree with
        if kb.embedding_dim != 0 && kb.embedding_dim != config.d_kb {
            return Err(KeciError::Validation(format!(
                "KB embeddings have dimension {}, config has d_kb = {}",
                kb.embedding_dim, config.d_kb
            )));
        }
        let d_v = config.d_kb + config.d_tok;
        if variant.uses_bigcn() && config.gcn_layers > 0 {
            arch.bigcn = Some(BiGcn::new(
                d,
                n_rel,
                config.gcn_layers,
                config.bigcn_num_bases,
            ));
        }
        arch.node_init = Some(NodeInit {
            d_kb: config.d_kb,
            num_semantic_types: kb.semantic_types.len(),
        });
        if variant.uses_rgcn() && config.rgcn_layers > 0 {
            arch.rgcn = Some(Rgcn {
                d_v,
                num_relations: kb.graph_relations.len(),
                num_layers: config.rgcn_layers,
            });
        }
        arch.projection = Some(projection(d_v, d));
        arch.fusion = Some(Fusion::new(d));
        arch.final_entity = Some(EntityClassifier::new("final.entity", d, n_ent));
        arch.final_relation = Some(RelationClassifier::new("final.relation", d, n_rel));
        Ok(arch)
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut s = self.encoder.specs();
        s.extend(self.entity.specs());
        s.extend(self.relation.specs());
        if let Some(b) = &self.bigcn {
            s.extend(b.specs());
        }
        if let Some(n) = &self.node_init {
            s.extend(n.specs());
        }
        if let Some(r) = &self.rgcn {
            s.extend(r.specs());
        }
        if let Some(p) = &self.projection {
            s.extend(p.specs());
        }
        if let Some(f) = &self.fusion {
            s.extend(f.specs());
        }
        if let Some(e) = &self.final_entity {
            s.extend(e.specs());
        }
        if let Some(r) = &self.final_relation {
            s.extend(r.specs());
        }
        s
    }

    /// Runs the pipeline on one prepared document. Returns `None` when the
    /// document has no spans.
    pub fn forward<'t, F: Real>(
        &self,
        tape: &'t Tape<F>,
        store: &ParameterStore<F>,
        doc: &PreparedDoc,
    ) -> Result<Option<ForwardOutput<'t, F>>> {
        if doc.spans.is_empty() {
            return Ok(None);
        }
        let x = self.encoder.embed_tokens(tape, store, &doc.token_ids)?;
        let s = self
            .encoder
            .encode_spans(tape, store, x, &doc.spans)?
            .expect("non-empty span list");
        let entity_probs = self.entity.forward(tape, store, s)?;

        let probs = entity_probs.value();
        let non_entity: Vec<f64> = (0..doc.spans.len())
            .map(|i| probs.at(i, 0).to_f64_lossy())
            .collect();
        let kept = prune_spans(
            &non_entity,
            &doc.spans,
            self.prune_ratio,
            doc.token_ids.len(),
        );
        let s_kept = s.select_rows(&kept)?;
        let relation_logits = self.relation.logits(tape, store, s_kept)?;
        let relation_probs = relation_logits.map(|l| l.softmax(1)).transpose()?;

        let mut out = ForwardOutput {
            entity_probs,
            kept,
            relation_logits,
            relation_probs,
            final_entity: None,
            final_relation_logits: None,
            final_relation_probs: None,
            attention: Vec::new(),
        };
        let (Some(fusion), Some(final_entity), Some(final_relation)) =
            (&self.fusion, &self.final_entity, &self.final_relation)
        else {
            return Ok(Some(out));
        };

        let h = match &self.bigcn {
            Some(gcn) => {
                let edges = if self.relation_grad_through_edges {
                    relation_probs
                } else {
                    relation_probs.map(Var::detach)
                };
                gcn.forward(tape, store, s_kept, edges)?
            }
            None => s_kept,
        };

        let kg = doc.kg.as_ref().ok_or_else(|| {
            KeciError::Contract("document was prepared without a knowledge graph".into())
        })?;
        let node_init = self.node_init.as_ref().expect("set with fusion");
        let nodes = match node_init.forward(tape, store, &self.encoder, kg)? {
            Some(v0) => {
                let v = match &self.rgcn {
                    Some(rgcn) => rgcn.forward(tape, store, &kg.graph, v0)?,
                    None => v0,
                };
                let proj = self.projection.as_ref().expect("set with fusion");
                Some(proj.forward(tape, store, v)?)
            }
            None => None,
        };
        let candidates: Vec<Vec<usize>> = out
            .kept
            .iter()
            .map(|i| kg.graph.candidates[*i].clone())
            .collect();
        let fused = fusion.forward(tape, store, h, nodes, &candidates)?;
        out.final_entity = Some(final_entity.forward(tape, store, fused.fused)?);
        let logits = final_relation.logits(tape, store, fused.fused)?;
        out.final_relation_probs = logits.map(|l| l.softmax(1)).transpose()?;
        out.final_relation_logits = logits;
        out.attention = fused.attention;
        Ok(Some(out))
    }
}

/// A document turned into model inputs and span-level targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDoc {
    pub token_ids: Vec<usize>,
    /// Every span up to the maximum length, in enumeration order.
    pub spans: Vec<Span>,
    /// Gold entity type per span, 0 where none.
    pub entity_targets: Vec<usize>,
    /// Gold relation types between spans (by span index), in gold order.
    pub relation_gold: HashMap<(usize, usize), Vec<usize>>,
    pub kg: Option<KgInputs>,
}

impl PreparedDoc {
    /// Gold relation types between kept spans `i` and `j`.
    pub fn relations_between(&self, kept: &[usize], i: usize, j: usize) -> &[usize] {
        self.relation_gold
            .get(&(kept[i], kept[j]))
            .map_or(&[], Vec::as_slice)
    }
}

/// Everything the forward pass produced for one document.
pub struct ForwardOutput<'t, F: Real> {
    /// Initial entity distributions over every span `[m × |E|]`.
    pub entity_probs: Var<'t, F>,
    /// Indices of spans that survived pruning, ascending.
    pub kept: Vec<usize>,
    /// Initial relation logits over kept ordered pairs, `None` below two
    /// kept spans.
    pub relation_logits: Option<Var<'t, F>>,
    pub relation_probs: Option<Var<'t, F>>,
    /// Final entity distributions over kept spans `[k × |E|]`.
    pub final_entity: Option<Var<'t, F>>,
    pub final_relation_logits: Option<Var<'t, F>>,
    pub final_relation_probs: Option<Var<'t, F>>,
    pub attention: Vec<SpanAttention>,
}

/// Distributions the decoder reads, all over kept spans.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanGraphScores {
    pub kept: Vec<usize>,
    /// `[k][|E|]`.
    pub entities: Vec<Vec<f64>>,
    /// Per ordered pair: softmax distribution, or per-type sigmoid
    /// probabilities in sigmoid mode.
    pub relations: Vec<Vec<f64>>,
    pub attention: Vec<SpanAttention>,
}

fn rows<F: Real>(v: Var<'_, F>) -> Vec<Vec<f64>> {
    let t = v.value();
    let cols = t.shape()[1];
    t.values()
        .chunks(cols)
        .map(|r| r.iter().map(|x| x.to_f64_lossy()).collect())
        .collect()
}

impl<F: Real> ForwardOutput<'_, F> {
    /// Final predictions, or the initial ones for the sentence-only variant.
    pub fn scores(&self, mode: RelationLossMode) -> Result<SpanGraphScores> {
        let (entities, logits, probs) = match self.final_entity {
            Some(e) => (
                rows(e),
                self.final_relation_logits,
                self.final_relation_probs,
            ),
            None => (
                rows(self.entity_probs.select_rows(&self.kept)?),
                self.relation_logits,
                self.relation_probs,
            ),
        };
        let relations = match mode {
            RelationLossMode::SoftmaxCe => probs.map(rows),
            RelationLossMode::SigmoidBce => logits.map(|l| rows(l.sigmoid())),
        }
        .unwrap_or_default();
        Ok(SpanGraphScores {
            kept: self.kept.clone(),
            entities,
            relations,
            attention: self.attention.clone(),
        })
    }
}

/// A trained or freshly initialised model with everything needed to
/// rebuild its parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F: Real> {
    pub config: ModelConfig,
    pub variant: Variant,
    pub schema: TaskSchema,
    pub vocab: Vocab,
    pub kb: Option<KbMeta>,
    pub store: ParameterStore<F>,
}

impl<F: Real> Model<F> {
    /// Builds and initialises a model. The vocabulary comes from the
    /// training documents and, when used, the knowledge base.
    pub fn new(
        config: ModelConfig,
        variant: Variant,
        schema: TaskSchema,
        train: &[Document],
        kb: Option<&KnowledgeBase>,
    ) -> Result<Self> {
        config.validate()?;
        let kb = if variant.uses_kg() { kb } else { None };
        let vocab = Vocab::build(train, kb, config.min_token_count);
        let mut model = Self::from_parts(config, variant, schema, vocab, kb.map(KbMeta::of), None)?;
        if let Some(path) = model.config.embedding_file.clone() {
            model.load_token_vectors(&path)?;
        }
        Ok(model)
    }

    /// Assembles a model from its metadata, initialising parameters unless
    /// a store is given (which must match the layout).
    pub fn from_parts(
        config: ModelConfig,
        variant: Variant,
        schema: TaskSchema,
        vocab: Vocab,
        kb: Option<KbMeta>,
        store: Option<ParameterStore<F>>,
    ) -> Result<Self> {
        let arch = Architecture::new(&config, variant, vocab.len(), &schema, kb.as_ref())?;
        let specs = arch.specs();
        let store = match store {
            None => init_store(&specs, config.seed)?,
            Some(mut store) => {
                adopt_layout(&specs, &mut store)?;
                store
            }
        };
        Ok(Self {
            config,
            variant,
            schema,
            vocab,
            kb,
            store,
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::new(
            &self.config,
            self.variant,
            self.vocab.len(),
            &self.schema,
            self.kb.as_ref(),
        )
        .expect("validated when the model was built")
    }

    fn load_token_vectors(&mut self, path: &std::path::Path) -> Result<()> {
        let vectors = load_embedding_file(path)?;
        let d_tok = self.config.d_tok;
        let table = self.store.get_mut(TOKEN_EMBEDDING).expect("encoder table");
        let mut hits = 0;
        for (token, values) in vectors {
            if values.len() != d_tok {
                return Err(KeciError::Validation(format!(
                    "embedding file has dimension {}, config has d_tok = {d_tok}",
                    values.len()
                )));
            }
            let id = self.vocab.id(&token);
            if id == 0 && token != crate::encoder::UNK {
                continue;
            }
            hits += 1;
            for (dst, v) in table.values_mut()[id * d_tok..(id + 1) * d_tok]
                .iter_mut()
                .zip(values)
            {
                *dst = F::lit(v);
            }
        }
        log::info!("initialised {hits} token rows from {}", path.display());
        Ok(())
    }

    /// Rejects data annotated with a different label set.
    pub fn check_schema(&self, schema: &TaskSchema) -> Result<()> {
        if *schema == self.schema {
            return Ok(());
        }
        Err(KeciError::Validation(format!(
            "schema mismatch: model has {} entity and {} relation labels, data has {} and {}",
            self.schema.num_entity_types(),
            self.schema.num_relation_types(),
            schema.num_entity_types(),
            schema.num_relation_types()
        )))
    }

    /// Checks that a knowledge base matches the one the model was built with.
    pub fn check_kb(&self, kb: Option<&KnowledgeBase>) -> Result<()> {
        match (&self.kb, kb) {
            (None, _) => Ok(()),
            (Some(_), None) => Err(KeciError::Argument(format!(
                "variant {} needs a knowledge base",
                self.variant
            ))),
            (Some(meta), Some(kb)) if *meta == KbMeta::of(kb) => Ok(()),
            (Some(_), Some(_)) => Err(KeciError::Validation(
                "knowledge base types, relations or embedding size differ from the model's".into(),
            )),
        }
    }

    pub fn prepare(&self, doc: &Document, kb: Option<&KnowledgeBase>) -> Result<PreparedDoc> {
        let kb = if self.kb.is_some() { kb } else { None };
        prepare(doc, &self.vocab, self.config.max_span_len, kb)
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape<F>,
        doc: &PreparedDoc,
    ) -> Result<Option<ForwardOutput<'t, F>>> {
        self.architecture().forward(tape, &self.store, doc)
    }

    /// Copy of the model at another precision.
    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            variant: self.variant,
            schema: self.schema.clone(),
            vocab: self.vocab.clone(),
            kb: self.kb.clone(),
            store: self.store.cast(),
        }
    }
}

/// Checks names and shapes against the layout and applies its trainable
/// flags.
fn adopt_layout<F: Real>(specs: &[ParamSpec], store: &mut ParameterStore<F>) -> Result<()> {
    if specs.len() != store.len() {
        return Err(KeciError::Validation(format!(
            "expected {} parameters, found {}",
            specs.len(),
            store.len()
        )));
    }
    for s in specs {
        match store.get(&s.name) {
            None => {
                return Err(KeciError::Validation(format!(
                    "missing parameter `{}`",
                    s.name
                )));
            }
            Some(t) if t.shape() != s.shape.as_slice() => {
                return Err(KeciError::Validation(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
            Some(_) => {}
        }
        let t = store.get_mut(&s.name).expect("checked above");
        *t = std::mem::replace(t, Tensor::scalar(F::zero())).with_requires_grad(s.trainable);
    }
    Ok(())
}

/// Enumerates spans, aligns gold annotations to them and, with a knowledge
/// base, links candidates and builds the document graph.
pub fn prepare(
    doc: &Document,
    vocab: &Vocab,
    max_span_len: usize,
    kb: Option<&KnowledgeBase>,
) -> Result<PreparedDoc> {
    let spans = enumerate_spans(doc.len(), max_span_len);
    let index: HashMap<Span, usize> = spans.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let mut entity_targets = vec![0; spans.len()];
    let mut labelled = vec![false; spans.len()];
    for e in &doc.entities {
        if let Some(&i) = index.get(&e.span) {
            // the first gold label of a span wins
            if !labelled[i] {
                entity_targets[i] = e.label;
                labelled[i] = true;
            }
        }
    }
    let mut relation_gold: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for r in &doc.relations {
        let head = index.get(&doc.entities[r.head].span);
        let tail = index.get(&doc.entities[r.tail].span);
        if let (Some(&h), Some(&t)) = (head, tail) {
            if h != t {
                let labels = relation_gold.entry((h, t)).or_default();
                if !labels.contains(&r.label) {
                    labels.push(r.label);
                }
            }
        }
    }
    let kg = kb.map(|kb| {
        let tokens: Vec<&str> = doc.token_texts().collect();
        let graph = build_kg(&link_candidates(&tokens, &spans, kb), kb);
        KgInputs::new(graph, kb, vocab)
    });
    Ok(PreparedDoc {
        token_ids: vocab.ids(doc.token_texts()),
        spans,
        entity_targets,
        relation_gold,
        kg,
    })
}

/// Semantic type indices of a graph node's entity, empty for type nodes.
pub fn node_semantic_types<'a>(kg: &KgInputs, kb: &'a KnowledgeBase, node: usize) -> &'a [usize] {
    match kg.graph.nodes[node] {
        KgNode::Entity(e) => kb.entity_type_indices(e),
        KgNode::Type(_) => &[],
    }
}

/// Ordered kept-span pairs, matching the rows of relation outputs.
pub fn kept_pairs(kept: &[usize]) -> Vec<(usize, usize)> {
    ordered_pairs(kept.len())
}
