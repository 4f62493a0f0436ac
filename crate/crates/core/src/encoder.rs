//! Token embeddings and span representations.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader};
use std::path::Path;

use keci_autodiff::{ParameterStore, Real, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::corpus::{tokenize, Document, Span};
use crate::kb::KnowledgeBase;
use crate::nn::{mask_value, matrix, zeros, Ffnn, Init, ParamSpec};
use crate::{KeciError, Result};

pub const UNK: &str = "<unk>";
pub const TOKEN_EMBEDDING: &str = "encoder.token_embedding";
pub const LENGTH_EMBEDDING: &str = "encoder.length_embedding";
pub const HEAD_ATTENTION: &str = "encoder.head_attention";

/// Lowercased token vocabulary with the unknown token at index 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = KeciError;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(KeciError::Validation(format!(
                "vocabulary must start with `{UNK}`"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(KeciError::Validation(format!(
                    "duplicate vocabulary entry `{t}`"
                )));
            }
        }
        Ok(Self { tokens, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Training tokens seen at least `min_count` times, plus every token of
    /// KB definitions and semantic type names.
    pub fn build(docs: &[Document], kb: Option<&KnowledgeBase>, min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for d in docs {
            for t in d.token_texts() {
                *counts.entry(t.to_lowercase()).or_default() += 1;
            }
        }
        let mut words: BTreeSet<String> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .map(|(w, _)| w)
            .collect();
        if let Some(kb) = kb {
            let texts = kb
                .entities()
                .iter()
                .map(|e| e.definition.as_str())
                .chain(kb.semantic_types().iter().map(String::as_str));
            for text in texts {
                words.extend(tokenize(text).into_iter().map(|t| t.text.to_lowercase()));
            }
        }
        words.remove(UNK);
        let tokens: Vec<String> = std::iter::once(UNK.to_string()).chain(words).collect();
        Self::try_from(tokens).expect("deduplicated by construction")
    }

    /// Appends tokens that are not yet present.
    pub fn extend<'a>(&mut self, tokens: impl IntoIterator<Item = &'a str>) {
        for t in tokens {
            let t = t.to_lowercase();
            if !self.index.contains_key(&t) {
                self.index.insert(t.clone(), self.tokens.len());
                self.tokens.push(t);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Index of a token, or 0 when unknown.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(&token.to_lowercase()).copied().unwrap_or(0)
    }

    pub fn ids<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> Vec<usize> {
        tokens.into_iter().map(|t| self.id(t)).collect()
    }

    pub fn text_ids(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(&t.text)).collect()
    }
}

/// Reads `<count> <dim>` followed by `<token> <v1> … <vdim>` lines.
pub fn load_embedding_file(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let file = std::fs::File::open(path).map_err(|e| KeciError::io(path, e))?;
    let name = path.display().to_string();
    let parse_err = |line: usize, message: String| KeciError::Parse {
        source_name: name.clone(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))?
        .map_err(|e| KeciError::io(path, e))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|x| x.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    let [count, dim] = dims[..] else {
        return Err(parse_err(1, "header must be `<count> <dim>`".into()));
    };
    let mut out = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| KeciError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().unwrap().to_string();
        let values: Vec<f64> = parts
            .map(|x| x.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(i + 2, format!("bad value: {e}")))?;
        if values.len() != dim {
            return Err(parse_err(
                i + 2,
                format!("expected {dim} values, got {}", values.len()),
            ));
        }
        out.push((token, values));
    }
    if out.len() != count {
        return Err(parse_err(
            1,
            format!("header promises {count} rows, file has {}", out.len()),
        ));
    }
    Ok(out)
}

/// Sinusoidal position table `[n × dim]`.
pub fn position_encoding(n: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * dim);
    for pos in 0..n {
        for i in 0..dim {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 / rate;
            out.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

/// Maps token ids to span representations of width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanEncoder {
    pub vocab_size: usize,
    pub d_tok: usize,
    pub d_len: usize,
    pub max_span_len: usize,
    pub position_encoding: bool,
    pub freeze_tokens: bool,
    pub ffnn_g: Ffnn,
}

impl SpanEncoder {
    pub fn new(config: &ModelConfig, vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_tok: config.d_tok,
            d_len: config.d_len,
            max_span_len: config.max_span_len,
            position_encoding: config.position_encoding,
            freeze_tokens: config.freeze_token_embeddings,
            ffnn_g: Ffnn::new(
                "encoder.ffnn_g",
                3 * config.d_tok + config.d_len,
                config.d,
                config.d,
            ),
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut tokens = ParamSpec::new(
            TOKEN_EMBEDDING,
            vec![self.vocab_size, self.d_tok],
            Init::Uniform(0.5),
        );
        tokens.trainable = !self.freeze_tokens;
        let mut s = vec![
            tokens,
            ParamSpec::new(
                LENGTH_EMBEDDING,
                vec![self.max_span_len, self.d_len],
                Init::Uniform(0.5),
            ),
            ParamSpec::new(HEAD_ATTENTION, vec![self.d_tok, 1], Init::Glorot),
        ];
        s.extend(self.ffnn_g.specs());
        s
    }

    /// Token matrix `[n × d_tok]`, optionally plus sinusoidal positions.
    pub fn embed_tokens<'t, F: Real>(
        &self,
        tape: &'t Tape<F>,
        store: &ParameterStore<F>,
        ids: &[usize],
    ) -> Result<Var<'t, F>> {
        if ids.is_empty() {
            return Err(KeciError::Contract(
                "embed_tokens needs at least one token".into(),
            ));
        }
        let x = tape.param(store, TOKEN_EMBEDDING)?.select_rows(ids)?;
        if !self.position_encoding {
            return Ok(x);
        }
        let pe = position_encoding(ids.len(), self.d_tok)
            .into_iter()
            .map(F::lit)
            .collect();
        Ok(x.add(matrix(tape, ids.len(), self.d_tok, pe)?)?)
    }

    /// Mean token embedding of each text; empty texts give zero rows.
    pub fn embed_texts<'t, F: Real>(
        &self,
        tape: &'t Tape<F>,
        store: &ParameterStore<F>,
        texts: &[Vec<usize>],
    ) -> Result<Var<'t, F>> {
        let used: Vec<usize> = texts
            .iter()
            .flatten()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if used.is_empty() {
            return zeros(tape, texts.len(), self.d_tok);
        }
        let col: HashMap<usize, usize> = used.iter().enumerate().map(|(c, id)| (*id, c)).collect();
        let mut weights = vec![F::zero(); texts.len() * used.len()];
        for (r, text) in texts.iter().enumerate() {
            let share = F::one() / F::from_usize(text.len().max(1)).unwrap();
            for id in text {
                let w = &mut weights[r * used.len() + col[id]];
                *w = *w + share;
            }
        }
        let table = tape.param(store, TOKEN_EMBEDDING)?.select_rows(&used)?;
        Ok(matrix(tape, texts.len(), used.len(), weights)?.matmul(table)?)
    }

    /// Attention-pooled span vectors `[m × d_tok]` and the pooling weights
    /// laid out over token positions `[m × n]`.
    pub fn head_attention<'t, F: Real>(
        &self,
        tape: &'t Tape<F>,
        store: &ParameterStore<F>,
        x: Var<'t, F>,
        spans: &[Span],
    ) -> Result<(Var<'t, F>, Var<'t, F>)> {
        let n = x.shape()[0];
        let m = spans.len();
        let width = spans.iter().map(Span::len).max().unwrap_or(1);
        let scores = x.matmul(tape.param(store, HEAD_ATTENTION)?)?;
        let mut index = Vec::with_capacity(m * width);
        let mut mask = Vec::with_capacity(m * width);
        for s in spans {
            for t in 0..width {
                let inside = t < s.len();
                index.push(inside.then_some(s.start + t));
                mask.push(if inside { F::zero() } else { mask_value() });
            }
        }
        let local = scores
            .gather(index, vec![m, width])?
            .add(matrix(tape, m, width, mask)?)?
            .softmax(1)?;
        let mut spread = Vec::with_capacity(m * n);
        for (i, s) in spans.iter().enumerate() {
            for t in 0..n {
                let inside = t >= s.start && t < s.end;
                spread.push(inside.then(|| i * width + t - s.start));
            }
        }
        let weights = local.gather(spread, vec![m, n])?;
        Ok((weights.matmul(x)?, weights))
    }

    /// Learned length embedding row `len - 1` for each span.
    pub fn length_features<'t, F: Real>(
        &self,
        tape: &'t Tape<F>,
        store: &ParameterStore<F>,
        spans: &[Span],
    ) -> Result<Var<'t, F>> {
        let rows = spans
            .iter()
            .map(|s| {
                if s.is_empty() || s.len() > self.max_span_len {
                    Err(KeciError::Contract(format!(
                        "span length {} outside 1..={}",
                        s.len(),
                        self.max_span_len
                    )))
                } else {
                    Ok(s.len() - 1)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(tape.param(store, LENGTH_EMBEDDING)?.select_rows(&rows)?)
    }

    /// Span representations `[m × d]`, or `None` for an empty span list.
    pub fn encode_spans<'t, F: Real>(
        &self,
        tape: &'t Tape<F>,
        store: &ParameterStore<F>,
        x: Var<'t, F>,
        spans: &[Span],
    ) -> Result<Option<Var<'t, F>>> {
        if spans.is_empty() {
            return Ok(None);
        }
        let n = x.shape()[0];
        if let Some(s) = spans.iter().find(|s| s.end > n) {
            return Err(KeciError::Contract(format!(
                "span {s:?} exceeds {n} tokens"
            )));
        }
        let starts: Vec<usize> = spans.iter().map(|s| s.start).collect();
        let lasts: Vec<usize> = spans.iter().map(Span::last).collect();
        let (pooled, _) = self.head_attention(tape, store, x, spans)?;
        let phi = self.length_features(tape, store, spans)?;
        let input = tape.concat(
            &[x.select_rows(&starts)?, x.select_rows(&lasts)?, pooled, phi],
            1,
        )?;
        Ok(Some(self.ffnn_g.forward(tape, store, input)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::enumerate_spans;
    use crate::nn::init_store;

    fn setup() -> (SpanEncoder, ParameterStore<f64>) {
        let cfg = ModelConfig {
            d: 5,
            d_tok: 4,
            d_len: 3,
            max_span_len: 3,
            ..Default::default()
        };
        let enc = SpanEncoder::new(&cfg, 6);
        let store = init_store(&enc.specs(), 11).unwrap();
        (enc, store)
    }

    #[test]
    fn vocab_maps_oov_to_unk() {
        let doc = crate::corpus::RawDocument {
            id: "a".into(),
            text: "Foo bar foo .".into(),
            entities: vec![],
            relations: vec![],
        };
        let schema = crate::corpus::TaskSchema::new(vec!["X".into()], vec!["r".into()]).unwrap();
        let v = Vocab::build(&[doc.resolve(&schema).unwrap()], None, 2);
        assert_eq!(v.tokens(), &[UNK, "foo"]);
        assert_eq!(v.id("FOO"), 1);
        assert_eq!(v.id("bar"), 0);
    }

    #[test]
    fn token_rows_and_shape() {
        let (enc, store) = setup();
        let tape = Tape::new();
        let x = enc.embed_tokens(&tape, &store, &[3, 0, 5]).unwrap();
        assert_eq!(x.shape(), vec![3, 4]);
        let table = store.get(TOKEN_EMBEDDING).unwrap();
        assert_eq!(&x.to_vec()[..4], table.row(3));
        assert_eq!(&x.to_vec()[4..8], table.row(0));
    }

    #[test]
    fn text_means() {
        let (enc, store) = setup();
        let tape = Tape::new();
        let t = enc
            .embed_texts(&tape, &store, &[vec![2], vec![], vec![1, 4], vec![4, 1]])
            .unwrap()
            .value();
        let table = store.get(TOKEN_EMBEDDING).unwrap();
        assert_eq!(t.row(0), table.row(2));
        assert!(t.row(1).iter().all(|v| *v == 0.0));
        assert_eq!(t.row(2), t.row(3));
    }

    #[test]
    fn single_token_attention_is_exact() {
        let (enc, store) = setup();
        let tape = Tape::new();
        let x = enc.embed_tokens(&tape, &store, &[1, 2, 3]).unwrap();
        let spans = enumerate_spans(3, 3);
        let (pooled, w) = enc.head_attention(&tape, &store, x, &spans).unwrap();
        let (pooled, w, xv) = (pooled.value(), w.value(), x.value());
        for (i, s) in spans.iter().enumerate() {
            let sum: f64 = w.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            if s.len() == 1 {
                assert_eq!(pooled.row(i), xv.row(s.start));
            }
        }
    }

    #[test]
    fn identical_tokens_get_uniform_weights() {
        let (enc, store) = setup();
        let tape = Tape::new();
        let x = enc.embed_tokens(&tape, &store, &[2, 2, 2]).unwrap();
        let (_, w) = enc
            .head_attention(&tape, &store, x, &[Span::new(0, 3)])
            .unwrap();
        for v in w.to_vec() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn length_features() {
        let (enc, store) = setup();
        let tape = Tape::new();
        let f = enc
            .length_features(
                &tape,
                &store,
                &[Span::new(0, 2), Span::new(3, 5), Span::new(1, 2)],
            )
            .unwrap()
            .value();
        assert_eq!(f.row(0), f.row(1));
        assert_ne!(f.row(0), f.row(2));
        assert_eq!(store.get(LENGTH_EMBEDDING).unwrap().shape()[0], 3);
        let err = enc.length_features(&tape, &store, &[Span::new(0, 4)]);
        assert!(matches!(err, Err(KeciError::Contract(_))));
    }

    #[test]
    fn single_token_span_repeats_the_token_three_times() {
        let (enc, store) = setup();
        let tape = Tape::new();
        let x = enc.embed_tokens(&tape, &store, &[1, 2]).unwrap();
        let spans = [Span::new(1, 2)];
        let (pooled, _) = enc.head_attention(&tape, &store, x, &spans).unwrap();
        assert_eq!(pooled.to_vec(), x.value().row(1).to_vec());
        let s = enc.encode_spans(&tape, &store, x, &spans).unwrap().unwrap();
        assert_eq!(s.shape(), vec![1, 5]);
        assert!(enc.encode_spans(&tape, &store, x, &[]).unwrap().is_none());
    }

    #[test]
    fn embedding_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.txt");
        std::fs::write(&p, "2 3\nfoo 1 2 3\nbar 0.5 0 -1\n").unwrap();
        let rows = load_embedding_file(&p).unwrap();
        assert_eq!(rows[1], ("bar".to_string(), vec![0.5, 0.0, -1.0]));
        std::fs::write(&p, "2 3\nfoo 1 2\n").unwrap();
        assert!(matches!(
            load_embedding_file(&p),
            Err(KeciError::Parse { line: 2, .. })
        ));
    }
}
