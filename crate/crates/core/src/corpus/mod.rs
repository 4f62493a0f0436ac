//! Documents, schemas, tokenization, span enumeration and data splits.

mod dataset;
mod kfold;
mod spans;
mod tokenize;
pub mod toy;

pub use dataset::{
    load_dataset, load_schema, parse_dataset, read_raw_dataset, save_dataset, save_raw_dataset,
    save_schema, RawDocument, RawEntity, RawRelation,
};
pub use kfold::{kfold_split, Fold};
pub use spans::{enumerate_spans, span_count, Span};
pub use tokenize::{tokenize, Token};

use serde::{Deserialize, Serialize};

use crate::{KeciError, Result};

pub const NON_ENTITY: &str = "O";
pub const NON_RELATION: &str = "NO_REL";

/// Entity and relation label sets. Index 0 of each is the reserved
/// "nothing here" label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SchemaFile", into = "SchemaFile")]
pub struct TaskSchema {
    entity_types: Vec<String>,
    relation_types: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    entity_types: Vec<String>,
    relation_types: Vec<String>,
}

impl TryFrom<SchemaFile> for TaskSchema {
    type Error = KeciError;

    fn try_from(f: SchemaFile) -> Result<Self> {
        TaskSchema::new(f.entity_types, f.relation_types)
    }
}

impl From<TaskSchema> for SchemaFile {
    fn from(s: TaskSchema) -> Self {
        SchemaFile {
            entity_types: s.entity_types[1..].to_vec(),
            relation_types: s.relation_types[1..].to_vec(),
        }
    }
}

impl TaskSchema {
    /// Builds a schema from the non-reserved type names.
    pub fn new(entity_types: Vec<String>, relation_types: Vec<String>) -> Result<Self> {
        let build = |reserved: &str, names: Vec<String>, what: &str| -> Result<Vec<String>> {
            if names.is_empty() {
                return Err(KeciError::Validation(format!(
                    "schema needs at least one {what} type"
                )));
            }
            let mut all = vec![reserved.to_string()];
            for n in names {
                if n == reserved {
                    return Err(KeciError::Validation(format!(
                        "reserved {what} type `{reserved}` must not be listed"
                    )));
                }
                if all.contains(&n) {
                    return Err(KeciError::Validation(format!(
                        "duplicate {what} type `{n}`"
                    )));
                }
                all.push(n);
            }
            Ok(all)
        };
        Ok(Self {
            entity_types: build(NON_ENTITY, entity_types, "entity")?,
            relation_types: build(NON_RELATION, relation_types, "relation")?,
        })
    }

    /// All entity labels, `O` first.
    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    /// All relation labels, `NO_REL` first.
    pub fn relation_types(&self) -> &[String] {
        &self.relation_types
    }

    pub fn num_entity_types(&self) -> usize {
        self.entity_types.len()
    }

    pub fn num_relation_types(&self) -> usize {
        self.relation_types.len()
    }

    pub fn entity_index(&self, name: &str) -> Option<usize> {
        self.entity_types.iter().position(|t| t == name)
    }

    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.relation_types.iter().position(|t| t == name)
    }
}

/// Gold entity mention with a resolved type index (never 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GoldEntity {
    pub span: Span,
    pub label: usize,
}

/// Directed relation between two entries of a document's entity list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GoldRelation {
    pub head: usize,
    pub tail: usize,
    pub label: usize,
}

/// A tokenized sentence with gold annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub tokens: Vec<Token>,
    pub entities: Vec<GoldEntity>,
    pub relations: Vec<GoldRelation>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_texts(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.text.as_str())
    }
}
