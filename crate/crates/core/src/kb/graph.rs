use std::collections::{BTreeMap, BTreeSet};

use super::KnowledgeBase;

/// A node of the per-document background graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KgNode {
    /// Index into the knowledge base entity list.
    Entity(usize),
    /// Index into the knowledge base semantic type list.
    Type(usize),
}

/// Background graph restricted to the candidates of one document.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KnowledgeGraph {
    /// Entity nodes sorted by id, then type nodes sorted by name.
    pub nodes: Vec<KgNode>,
    /// `(src, relation, dst)`, sorted and deduplicated. Relation indices
    /// follow [`KnowledgeBase::graph_relations`].
    pub edges: Vec<(usize, usize, usize)>,
    /// Entity node indices for each span, ascending.
    pub candidates: Vec<Vec<usize>>,
    pub num_relations: usize,
}

impl KnowledgeGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_entities(&self) -> usize {
        self.nodes
            .iter()
            .take_while(|n| matches!(n, KgNode::Entity(_)))
            .count()
    }

    /// Source nodes of edges of relation `rel` that end at `dst`.
    pub fn in_neighbors(&self, dst: usize, rel: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges
            .iter()
            .filter(move |(_, r, d)| *r == rel && *d == dst)
            .map(|(s, _, _)| *s)
    }
}

/// Builds the graph over the union of all span candidates (entity indices)
/// and their semantic types.
pub fn build_kg(candidate_map: &[Vec<usize>], kb: &KnowledgeBase) -> KnowledgeGraph {
    let entities = kb.entities();
    let mut included: Vec<usize> = candidate_map
        .iter()
        .flatten()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    included.sort_by(|a, b| entities[*a].id.cmp(&entities[*b].id));

    let types: BTreeSet<usize> = included
        .iter()
        .flat_map(|e| kb.entity_type_indices(*e).iter().copied())
        .collect();
    let mut types: Vec<usize> = types.into_iter().collect();
    let names = kb.semantic_types();
    types.sort_by(|a, b| names[*a].cmp(&names[*b]));

    let entity_node: BTreeMap<usize, usize> =
        included.iter().enumerate().map(|(n, e)| (*e, n)).collect();
    let type_node: BTreeMap<usize, usize> = types
        .iter()
        .enumerate()
        .map(|(n, t)| (*t, included.len() + n))
        .collect();

    let mut edges = BTreeSet::new();
    for (e, n) in &entity_node {
        for t in kb.entity_type_indices(*e) {
            let tn = type_node[t];
            edges.insert((*n, kb.has_type_relation(), tn));
            edges.insert((tn, kb.type_of_relation(), *n));
        }
    }
    for (h, r, t) in kb.entity_edges() {
        if let (Some(a), Some(b)) = (entity_node.get(h), entity_node.get(t)) {
            edges.insert((*a, *r, *b));
        }
    }
    for (h, r, t) in kb.type_edges() {
        if let (Some(a), Some(b)) = (type_node.get(h), type_node.get(t)) {
            edges.insert((*a, *r, *b));
        }
    }

    let mut nodes: Vec<KgNode> = included.iter().map(|e| KgNode::Entity(*e)).collect();
    nodes.extend(types.iter().map(|t| KgNode::Type(*t)));
    let candidates = candidate_map
        .iter()
        .map(|c| {
            let mut v: Vec<usize> = c.iter().map(|e| entity_node[e]).collect();
            v.sort_unstable();
            v.dedup();
            v
        })
        .collect();
    KnowledgeGraph {
        nodes,
        edges: edges.into_iter().collect(),
        candidates,
        num_relations: kb.graph_relations().len(),
    }
}
