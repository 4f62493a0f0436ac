use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{tokenize, Document, GoldEntity, GoldRelation, Span, TaskSchema};
use crate::{KeciError, Result};

/// One dataset line as stored on disk: token indices, type names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub entities: Vec<RawEntity>,
    #[serde(default)]
    pub relations: Vec<RawRelation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEntity {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRelation {
    pub head: usize,
    pub tail: usize,
    #[serde(rename = "type")]
    pub label: String,
}

/// Reads JSONL without resolving type names. Blank lines are skipped.
pub fn read_raw_dataset(path: &Path) -> Result<Vec<RawDocument>> {
    let file = File::open(path).map_err(|e| KeciError::io(path, e))?;
    parse_raw(BufReader::new(file), &path.display().to_string())
}

fn parse_raw(reader: impl BufRead, source_name: &str) -> Result<Vec<RawDocument>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| KeciError::io(source_name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc = serde_json::from_str(&line).map_err(|e| KeciError::Parse {
            source_name: source_name.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(doc);
    }
    Ok(out)
}

/// Parses and validates JSONL documents against `schema`.
pub fn parse_dataset(
    reader: impl BufRead,
    schema: &TaskSchema,
    source_name: &str,
) -> Result<Vec<Document>> {
    parse_raw(reader, source_name)?
        .into_iter()
        .map(|raw| raw.resolve(schema))
        .collect()
}

pub fn load_dataset(path: &Path, schema: &TaskSchema) -> Result<Vec<Document>> {
    read_raw_dataset(path)?
        .into_iter()
        .map(|raw| raw.resolve(schema))
        .collect()
}

pub fn save_dataset(path: &Path, docs: &[Document], schema: &TaskSchema) -> Result<()> {
    let raw: Vec<RawDocument> = docs
        .iter()
        .map(|d| RawDocument::from_document(d, schema))
        .collect();
    save_raw_dataset(path, &raw)
}

/// Writes one JSON document per line.
pub fn save_raw_dataset(path: &Path, docs: &[RawDocument]) -> Result<()> {
    let file = File::create(path).map_err(|e| KeciError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in docs {
        let line = serde_json::to_string(d).expect("dataset lines serialize");
        writeln!(w, "{line}").map_err(|e| KeciError::io(path, e))?;
    }
    w.flush().map_err(|e| KeciError::io(path, e))
}

pub fn load_schema(path: &Path) -> Result<TaskSchema> {
    let text = std::fs::read_to_string(path).map_err(|e| KeciError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| KeciError::Parse {
        source_name: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn save_schema(path: &Path, schema: &TaskSchema) -> Result<()> {
    let text = serde_json::to_string_pretty(schema).expect("schema serializes");
    std::fs::write(path, text + "\n").map_err(|e| KeciError::io(path, e))
}

impl TaskSchema {
    /// Schema holding every type name used in `docs`, sorted by name.
    pub fn infer(docs: &[RawDocument]) -> Result<Self> {
        let ents: BTreeSet<_> = docs
            .iter()
            .flat_map(|d| d.entities.iter().map(|e| e.label.clone()))
            .collect();
        let rels: BTreeSet<_> = docs
            .iter()
            .flat_map(|d| d.relations.iter().map(|r| r.label.clone()))
            .collect();
        Self::new(ents.into_iter().collect(), rels.into_iter().collect())
    }
}

impl RawDocument {
    /// Tokenizes the text and checks every annotation against `schema`.
    pub fn resolve(self, schema: &TaskSchema) -> Result<Document> {
        let tokens = tokenize(&self.text);
        let n = tokens.len();
        let bad = |msg: String| KeciError::Validation(format!("document `{}`: {msg}", self.id));
        let mut entities = Vec::with_capacity(self.entities.len());
        for (i, e) in self.entities.iter().enumerate() {
            if e.start >= e.end || e.end > n {
                return Err(bad(format!(
                    "entity {i} span [{}, {}) out of range for {n} tokens",
                    e.start, e.end
                )));
            }
            let label = schema
                .entity_index(&e.label)
                .filter(|l| *l != 0)
                .ok_or_else(|| bad(format!("unknown entity type `{}`", e.label)))?;
            entities.push(GoldEntity {
                span: Span::new(e.start, e.end),
                label,
            });
        }
        let mut relations = Vec::with_capacity(self.relations.len());
        for (i, r) in self.relations.iter().enumerate() {
            if r.head >= entities.len() || r.tail >= entities.len() || r.head == r.tail {
                return Err(bad(format!(
                    "relation {i} links entities {} -> {} of {}",
                    r.head,
                    r.tail,
                    entities.len()
                )));
            }
            let label = schema
                .relation_index(&r.label)
                .filter(|l| *l != 0)
                .ok_or_else(|| bad(format!("unknown relation type `{}`", r.label)))?;
            relations.push(GoldRelation {
                head: r.head,
                tail: r.tail,
                label,
            });
        }
        Ok(Document {
            id: self.id,
            text: self.text,
            tokens,
            entities,
            relations,
        })
    }

    pub fn from_document(doc: &Document, schema: &TaskSchema) -> Self {
        Self {
            id: doc.id.clone(),
            text: doc.text.clone(),
            entities: doc
                .entities
                .iter()
                .map(|e| RawEntity {
                    start: e.span.start,
                    end: e.span.end,
                    label: schema.entity_types()[e.label].clone(),
                })
                .collect(),
            relations: doc
                .relations
                .iter()
                .map(|r| RawRelation {
                    head: r.head,
                    tail: r.tail,
                    label: schema.relation_types()[r.label].clone(),
                })
                .collect(),
        }
    }
}
