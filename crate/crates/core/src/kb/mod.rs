//! Local knowledge base: alias matching and per-document background graphs.

mod graph;

pub use graph::{build_kg, KgNode, KnowledgeGraph};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Span};
use crate::{KeciError, Result};

/// Reserved relation from an entity to each of its semantic types.
pub const HAS_TYPE: &str = "HAS_TYPE";
/// Inverse of [`HAS_TYPE`], so type nodes can send messages to entities.
pub const TYPE_OF: &str = "TYPE_OF";

/// On-disk knowledge base layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbFile {
    pub semantic_types: Vec<String>,
    pub kb_relations: Vec<String>,
    pub entities: Vec<KbEntity>,
    #[serde(default)]
    pub entity_edges: Vec<(String, String, String)>,
    #[serde(default)]
    pub type_edges: Vec<(String, String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbEntity {
    pub id: String,
    pub aliases: Vec<String>,
    #[serde(default)]
    pub definition: String,
    pub semantic_types: Vec<String>,
    pub embedding: Vec<f64>,
}

/// Validated knowledge base with a normalized alias index.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    file: KbFile,
    entity_types: Vec<Vec<usize>>,
    entity_edges: Vec<(usize, usize, usize)>,
    type_edges: Vec<(usize, usize, usize)>,
    aliases: HashMap<String, Vec<usize>>,
    embedding_dim: usize,
}

/// Lowercases each token and removes ASCII punctuation from it. Returns
/// `None` when a boundary token is pure punctuation, so `"FKBP12 ."` does
/// not match the alias `FKBP12`.
pub fn normalize_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Option<String> {
    let parts: Vec<String> = tokens
        .into_iter()
        .map(|t| {
            t.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(char::to_lowercase)
                .collect()
        })
        .collect();
    if parts.first()?.is_empty() || parts.last()?.is_empty() {
        return None;
    }
    let kept: Vec<&str> = parts
        .iter()
        .map(String::as_str)
        .filter(|p| !p.is_empty())
        .collect();
    Some(kept.join(" "))
}

/// Normal form of a free-text alias.
pub fn normalize_alias(alias: &str) -> Option<String> {
    let toks = tokenize(alias);
    let parts: Vec<&str> = toks
        .iter()
        .map(|t| t.text.as_str())
        .filter(|t| !t.chars().all(|c| c.is_ascii_punctuation()))
        .collect();
    normalize_tokens(parts)
}

impl KnowledgeBase {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KeciError::io(path, e))?;
        let file: KbFile = serde_json::from_str(&text).map_err(|e| KeciError::Parse {
            source_name: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Self::from_file(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.file).expect("kb serializes");
        std::fs::write(path, text + "\n").map_err(|e| KeciError::io(path, e))
    }

    pub fn from_file(file: KbFile) -> Result<Self> {
        let bad = |m: String| Err(KeciError::Validation(m));
        let type_index = index_names(&file.semantic_types, "semantic type")?;
        let rel_index = index_names(&file.kb_relations, "kb relation")?;
        for reserved in [HAS_TYPE, TYPE_OF] {
            if rel_index.contains_key(reserved) {
                return bad(format!("kb relation `{reserved}` is reserved"));
            }
        }
        let mut ids = HashMap::new();
        let mut entity_types = Vec::with_capacity(file.entities.len());
        let mut aliases: HashMap<String, Vec<usize>> = HashMap::new();
        let embedding_dim = file.entities.first().map_or(0, |e| e.embedding.len());
        for (i, e) in file.entities.iter().enumerate() {
            if ids.insert(e.id.as_str(), i).is_some() {
                return bad(format!("duplicate entity id `{}`", e.id));
            }
            if e.embedding.len() != embedding_dim || embedding_dim == 0 {
                return bad(format!(
                    "entity `{}` has embedding dim {}, expected {}",
                    e.id,
                    e.embedding.len(),
                    embedding_dim
                ));
            }
            if e.embedding.iter().any(|v| !v.is_finite()) {
                return bad(format!("entity `{}` has a non-finite embedding", e.id));
            }
            if e.semantic_types.is_empty() {
                return bad(format!("entity `{}` has no semantic type", e.id));
            }
            let mut types = BTreeSet::new();
            for t in &e.semantic_types {
                let ti = type_index.get(t.as_str()).ok_or_else(|| {
                    KeciError::Validation(format!(
                        "entity `{}` has unknown semantic type `{t}`",
                        e.id
                    ))
                })?;
                types.insert(*ti);
            }
            entity_types.push(types.into_iter().collect());
            let normalized: BTreeSet<String> = e
                .aliases
                .iter()
                .filter_map(|a| normalize_alias(a))
                .collect();
            if normalized.is_empty() {
                return bad(format!("entity `{}` has no usable alias", e.id));
            }
            for a in normalized {
                aliases.entry(a).or_default().push(i);
            }
        }
        let mut entity_edges = Vec::with_capacity(file.entity_edges.len());
        for (h, r, t) in &file.entity_edges {
            let (Some(hi), Some(ri), Some(ti)) = (
                ids.get(h.as_str()),
                rel_index.get(r.as_str()),
                ids.get(t.as_str()),
            ) else {
                return bad(format!("dangling entity edge ({h}, {r}, {t})"));
            };
            entity_edges.push((*hi, *ri, *ti));
        }
        let mut type_edges = Vec::with_capacity(file.type_edges.len());
        for (h, r, t) in &file.type_edges {
            let (Some(hi), Some(ri), Some(ti)) = (
                type_index.get(h.as_str()),
                rel_index.get(r.as_str()),
                type_index.get(t.as_str()),
            ) else {
                return bad(format!("dangling type edge ({h}, {r}, {t})"));
            };
            type_edges.push((*hi, *ri, *ti));
        }
        Ok(Self {
            file,
            entity_types,
            entity_edges,
            type_edges,
            aliases,
            embedding_dim,
        })
    }

    pub fn file(&self) -> &KbFile {
        &self.file
    }

    pub fn entities(&self) -> &[KbEntity] {
        &self.file.entities
    }

    pub fn semantic_types(&self) -> &[String] {
        &self.file.semantic_types
    }

    pub fn kb_relations(&self) -> &[String] {
        &self.file.kb_relations
    }

    /// KB relations followed by the reserved `HAS_TYPE` and `TYPE_OF`.
    pub fn graph_relations(&self) -> Vec<String> {
        let mut r = self.file.kb_relations.clone();
        r.push(HAS_TYPE.into());
        r.push(TYPE_OF.into());
        r
    }

    pub fn has_type_relation(&self) -> usize {
        self.file.kb_relations.len()
    }

    pub fn type_of_relation(&self) -> usize {
        self.file.kb_relations.len() + 1
    }

    /// Semantic type indices of entity `i`, ascending and deduplicated.
    pub fn entity_type_indices(&self, i: usize) -> &[usize] {
        &self.entity_types[i]
    }

    pub fn entity_edges(&self) -> &[(usize, usize, usize)] {
        &self.entity_edges
    }

    pub fn type_edges(&self) -> &[(usize, usize, usize)] {
        &self.type_edges
    }

    /// Width of entity embeddings, 0 when there are no entities.
    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    /// Entities whose normalized alias equals the normalized token text.
    pub fn lookup<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> &[usize] {
        normalize_tokens(tokens)
            .and_then(|k| self.aliases.get(&k))
            .map_or(&[], Vec::as_slice)
    }
}

fn index_names<'a>(names: &'a [String], what: &str) -> Result<BTreeMap<&'a str, usize>> {
    let mut map = BTreeMap::new();
    for (i, n) in names.iter().enumerate() {
        if map.insert(n.as_str(), i).is_some() {
            return Err(KeciError::Validation(format!("duplicate {what} `{n}`")));
        }
    }
    Ok(map)
}

/// Candidate entity indices for each span. No cap is applied.
pub fn link_candidates(tokens: &[&str], spans: &[Span], kb: &KnowledgeBase) -> Vec<Vec<usize>> {
    spans
        .iter()
        .map(|s| kb.lookup(tokens[s.start..s.end].iter().copied()).to_vec())
        .collect()
}
