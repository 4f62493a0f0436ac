//! Node features and the relational GCN over a document's background graph.

use std::collections::BTreeMap;

use keci_autodiff::{ParameterStore, Real, Tape, Var};

use crate::encoder::{SpanEncoder, Vocab};
use crate::kb::{KgNode, KnowledgeBase, KnowledgeGraph};
use crate::nn::{matrix, Init, Linear, ParamSpec};
use crate::{KeciError, Result};

pub const TYPE_EMBEDDING: &str = "kg.type_embedding";

/// Everything the model needs from the knowledge base for one document.
#[derive(Debug, Clone, PartialEq)]
pub struct KgInputs {
    pub graph: KnowledgeGraph,
    /// Pretrained embeddings of the entity nodes, row-major.
    pub entity_embeddings: Vec<f64>,
    /// Token ids of each node's definition (entities) or name (types).
    pub node_texts: Vec<Vec<usize>>,
    /// Semantic type index of each type node.
    pub type_ids: Vec<usize>,
}

impl KgInputs {
    pub fn new(graph: KnowledgeGraph, kb: &KnowledgeBase, vocab: &Vocab) -> Self {
        let mut entity_embeddings = Vec::new();
        let mut node_texts = Vec::with_capacity(graph.len());
        let mut type_ids = Vec::new();
        for node in &graph.nodes {
            match node {
                KgNode::Entity(e) => {
                    let ent = &kb.entities()[*e];
                    entity_embeddings.extend_from_slice(&ent.embedding);
                    node_texts.push(vocab.text_ids(&ent.definition));
                }
                KgNode::Type(t) => {
                    type_ids.push(*t);
                    node_texts.push(vocab.text_ids(&kb.semantic_types()[*t]));
                }
            }
        }
        Self {
            graph,
            entity_embeddings,
            node_texts,
            type_ids,
        }
    }
}

/// Initial node states: pretrained embedding (entities) or learned type
/// embedding (types), concatenated with the mean embedding of the node text.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeInit {
    pub d_kb: usize,
    pub num_semantic_types: usize,
}

impl NodeInit {
    pub fn specs(&self) -> Vec<ParamSpec> {
        vec![ParamSpec::new(
            TYPE_EMBEDDING,
            vec![self.num_semantic_types.max(1), self.d_kb],
            Init::Uniform(0.5),
        )]
    }

    /// `[|V| × (d_kb + d_tok)]`, or `None` for an empty graph.
    pub fn forward<'t, F: Real>(
        &self,
        tape: &'t Tape<F>,
        store: &ParameterStore<F>,
        encoder: &SpanEncoder,
        inputs: &KgInputs,
    ) -> Result<Option<Var<'t, F>>> {
        if inputs.graph.is_empty() {
            return Ok(None);
        }
        let n_ent = inputs.graph.num_entities();
        if inputs.entity_embeddings.len() != n_ent * self.d_kb {
            return Err(KeciError::Validation(format!(
                "KB embeddings have dimension {}, model expects d_kb = {}",
                inputs.entity_embeddings.len() / n_ent.max(1),
                self.d_kb
            )));
        }
        let mut blocks = Vec::with_capacity(2);
        if n_ent > 0 {
            let vals = inputs
                .entity_embeddings
                .iter()
                .map(|v| F::lit(*v))
                .collect();
            blocks.push(matrix(tape, n_ent, self.d_kb, vals)?);
        }
        if !inputs.type_ids.is_empty() {
            blocks.push(
                tape.param(store, TYPE_EMBEDDING)?
                    .select_rows(&inputs.type_ids)?,
            );
        }
        let kb_part = tape.concat(&blocks, 0)?;
        let text_part = encoder.embed_texts(tape, store, &inputs.node_texts)?;
        Ok(Some(tape.concat(&[kb_part, text_part], 1)?))
    }
}

/// Relational GCN with square per-relation matrices and mean aggregation
/// over in-neighbours.
#[derive(Debug, Clone, PartialEq)]
pub struct Rgcn {
    pub d_v: usize,
    pub num_relations: usize,
    pub num_layers: usize,
}

impl Rgcn {
    pub fn self_weight(layer: usize) -> String {
        format!("kgnn.layer{layer}.self")
    }

    pub fn relation_weight(layer: usize, rel: usize) -> String {
        format!("kgnn.layer{layer}.rel{rel}")
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut s = Vec::new();
        for l in 0..self.num_layers {
            s.push(ParamSpec::new(
                Self::self_weight(l),
                vec![self.d_v, self.d_v],
                Init::Glorot,
            ));
            for k in 0..self.num_relations {
                s.push(ParamSpec::new(
                    Self::relation_weight(l, k),
                    vec![self.d_v, self.d_v],
                    Init::Glorot,
                ));
            }
        }
        s
    }

    /// Row-normalized in-neighbour matrices, one per relation with edges.
    pub fn normalized_adjacency(graph: &KnowledgeGraph) -> BTreeMap<usize, Vec<f64>> {
        let n = graph.len();
        let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for (_, r, d) in &graph.edges {
            *counts.entry((*r, *d)).or_default() += 1;
        }
        let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (s, r, d) in &graph.edges {
            let m = out.entry(*r).or_insert_with(|| vec![0.0; n * n]);
            m[d * n + s] += 1.0 / counts[&(*r, *d)] as f64;
        }
        out
    }

    pub fn forward<'t, F: Real>(
        &self,
        tape: &'t Tape<F>,
        store: &ParameterStore<F>,
        graph: &KnowledgeGraph,
        v0: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        let n = graph.len();
        let adjacency: Vec<(usize, Var<'t, F>)> = Self::normalized_adjacency(graph)
            .into_iter()
            .map(|(r, m)| Ok((r, matrix(tape, n, n, m.into_iter().map(F::lit).collect())?)))
            .collect::<Result<_>>()?;
        let mut v = v0;
        for l in 0..self.num_layers {
            let mut total = v.matmul(tape.param(store, &Self::self_weight(l))?)?;
            for (r, a) in &adjacency {
                let w = tape.param(store, &Self::relation_weight(l, *r))?;
                total = total.add(a.matmul(v.matmul(w)?)?)?;
            }
            v = total.relu();
        }
        Ok(v)
    }
}

/// Linear map from node states to the span dimension.
pub fn projection(d_v: usize, d: usize) -> Linear {
    Linear::new("kgnn.project", d_v, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::build_kg;
    use crate::nn::init_store;
    use keci_autodiff::Tensor;

    fn graph(n: usize, edges: Vec<(usize, usize, usize)>) -> KnowledgeGraph {
        KnowledgeGraph {
            nodes: (0..n).map(KgNode::Type).collect(),
            edges,
            candidates: vec![],
            num_relations: 2,
        }
    }

    #[test]
    fn isolated_node_uses_self_term_only() {
        let rgcn = Rgcn {
            d_v: 2,
            num_relations: 2,
            num_layers: 1,
        };
        let store = init_store::<f64>(&rgcn.specs(), 3).unwrap();
        let tape = Tape::new();
        let v0 = tape.constant(Tensor::new(vec![1, 2], vec![0.4, -0.7]).unwrap());
        let got = rgcn.forward(&tape, &store, &graph(1, vec![]), v0).unwrap();
        let u = tape.param(&store, "kgnn.layer0.self").unwrap();
        assert_eq!(got.to_vec(), v0.matmul(u).unwrap().relu().to_vec());
    }

    #[test]
    fn mean_aggregation_cancels_neighbor_count() {
        let rgcn = Rgcn {
            d_v: 2,
            num_relations: 2,
            num_layers: 1,
        };
        let mut store = init_store::<f64>(&rgcn.specs(), 3).unwrap();
        store
            .get_mut("kgnn.layer0.self")
            .unwrap()
            .values_mut()
            .fill(0.0);
        let tape = Tape::new();
        // nodes 1..=3 share state u and all point at node 0 under relation 1
        let u = [0.3, 0.9];
        let v0 = tape.constant(
            Tensor::new(
                vec![4, 2],
                vec![5.0, -5.0, u[0], u[1], u[0], u[1], u[0], u[1]],
            )
            .unwrap(),
        );
        let g = graph(4, vec![(1, 1, 0), (2, 1, 0), (3, 1, 0)]);
        let got = rgcn.forward(&tape, &store, &g, v0).unwrap().value();
        let w = store.get("kgnn.layer0.rel1").unwrap();
        let expect: Vec<f64> = (0..2)
            .map(|j| (u[0] * w.at(0, j) + u[1] * w.at(1, j)).max(0.0))
            .collect();
        for (j, e) in expect.iter().enumerate() {
            assert!((got.at(0, j) - e).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_graph_has_no_states() {
        let kb = crate::kb::tests::sample_kb();
        let g = build_kg(&[vec![]], &kb);
        let vocab = Vocab::build(&[], Some(&kb), 1);
        let inputs = KgInputs::new(g, &kb, &vocab);
        let cfg = crate::config::ModelConfig {
            d_kb: 4,
            ..Default::default()
        };
        let enc = SpanEncoder::new(&cfg, vocab.len());
        let init = NodeInit {
            d_kb: 4,
            num_semantic_types: 3,
        };
        let mut specs = enc.specs();
        specs.extend(init.specs());
        let store = init_store::<f64>(&specs, 0).unwrap();
        let tape = Tape::new();
        assert!(init
            .forward(&tape, &store, &enc, &inputs)
            .unwrap()
            .is_none());
    }

    #[test]
    fn node_features_concatenate_embedding_and_text() {
        let kb = crate::kb::tests::sample_kb();
        let g = build_kg(&[vec![2]], &kb);
        let vocab = Vocab::build(&[], Some(&kb), 1);
        let inputs = KgInputs::new(g, &kb, &vocab);
        let cfg = crate::config::ModelConfig {
            d_kb: 4,
            d_tok: 4,
            ..Default::default()
        };
        let enc = SpanEncoder::new(&cfg, vocab.len());
        let init = NodeInit {
            d_kb: 4,
            num_semantic_types: 3,
        };
        let mut specs = enc.specs();
        specs.extend(init.specs());
        let store = init_store::<f64>(&specs, 0).unwrap();
        let tape = Tape::new();
        let v0 = init
            .forward(&tape, &store, &enc, &inputs)
            .unwrap()
            .unwrap()
            .value();
        assert_eq!(v0.shape(), &[2, 8]);
        assert_eq!(&v0.row(0)[..4], &[0.5; 4]);
        let types = store.get(TYPE_EMBEDDING).unwrap();
        assert_eq!(&v0.row(1)[..4], types.row(2));
    }
}
