//! Phrase embedding providers.
//!
//! Both providers return unit-norm vectors. The hash provider is fully
//! deterministic in (seed, token) and needs no data files: each token
//! gets a fixed Gaussian vector, tokens are mean-pooled, and the result
//! is normalized. The file provider looks whole phrases up in a small
//! text table and normalizes on load.
//!
//! Table format, one phrase per line after the header:
//!
//! ```text
//! EMB 1 4
//! the dog\t0.1,0.2,0.3,0.4
//! ```

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::seeding::{fnv1a64, rng_from, splitmix64};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EmbedError {
    #[error("cannot embed an empty phrase")]
    EmptyPhrase,
    #[error("phrase not in the embedding table: {phrase:?}")]
    UnknownPhrase { phrase: String },
}

/// Errors loading or writing an embedding table. `line` counts data
/// rows from 1; the header, blank lines, and `#` comments are not
/// counted.
#[derive(Debug, Error)]
pub enum EmbFileError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad embedding file header: {detail}")]
    BadHeader { detail: String },
    #[error("row {line}: expected {expected} components, got {got}")]
    DimMismatch {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("row {line}: {detail}")]
    BadRow { line: usize, detail: String },
    #[error("row {line}: duplicate phrase {phrase:?}")]
    DuplicatePhrase { line: usize, phrase: String },
}

pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, phrase: &str) -> Result<Vec<f64>, EmbedError>;
}

/// Scales to unit norm in place; an (effectively) zero vector becomes
/// the uniform unit vector so callers always get norm 1.
fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        let fill = 1.0 / (v.len() as f64).sqrt();
        v.iter_mut().for_each(|x| *x = fill);
    } else {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

// ── Hash provider ──

#[derive(Debug, Clone)]
pub struct HashEmbedder {
    seed: u64,
    dim: usize,
}

impl HashEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { seed, dim }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = rng_from(splitmix64(self.seed ^ fnv1a64(token.as_bytes())));
        (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, phrase: &str) -> Result<Vec<f64>, EmbedError> {
        let tokens: Vec<&str> = phrase.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(EmbedError::EmptyPhrase);
        }
        let mut pooled = vec![0.0; self.dim];
        for token in &tokens {
            for (acc, x) in pooled.iter_mut().zip(self.token_vector(token)) {
                *acc += x;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        pooled.iter_mut().for_each(|x| *x *= inv);
        normalize(&mut pooled);
        Ok(pooled)
    }
}

// ── File provider ──

#[derive(Debug, Clone)]
pub struct FileEmbedder {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl FileEmbedder {
    pub fn load(path: &Path) -> Result<Self, EmbFileError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, EmbFileError> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        let fields: Vec<&str> = header.split_whitespace().collect();
        let dim = match fields.as_slice() {
            ["EMB", "1", d] => d.parse::<usize>().map_err(|_| EmbFileError::BadHeader {
                detail: format!("dimension {d:?} is not a number"),
            })?,
            ["EMB", v, _] => {
                return Err(EmbFileError::BadHeader {
                    detail: format!("unsupported version {v}"),
                })
            }
            _ => {
                return Err(EmbFileError::BadHeader {
                    detail: format!("expected \"EMB 1 <dim>\", got {header:?}"),
                })
            }
        };
        if dim == 0 {
            return Err(EmbFileError::BadHeader {
                detail: "dimension must be positive".into(),
            });
        }

        let mut table = HashMap::new();
        let mut row = 0usize;
        for line in lines {
            let trimmed = line.trim_end();
            if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
                continue;
            }
            row += 1;
            let (phrase, values) =
                trimmed
                    .split_once('\t')
                    .ok_or_else(|| EmbFileError::BadRow {
                        line: row,
                        detail: "missing tab between phrase and components".into(),
                    })?;
            let mut vector = Vec::with_capacity(dim);
            for piece in values.split(',') {
                let x: f64 = piece.trim().parse().map_err(|_| EmbFileError::BadRow {
                    line: row,
                    detail: format!("bad component {piece:?}"),
                })?;
                vector.push(x);
            }
            if vector.len() != dim {
                return Err(EmbFileError::DimMismatch {
                    line: row,
                    expected: dim,
                    got: vector.len(),
                });
            }
            normalize(&mut vector);
            if table.insert(phrase.to_string(), vector).is_some() {
                return Err(EmbFileError::DuplicatePhrase {
                    line: row,
                    phrase: phrase.to_string(),
                });
            }
        }
        Ok(Self { dim, table })
    }

    pub fn phrases(&self) -> impl Iterator<Item = &str> {
        self.table.keys().map(String::as_str)
    }
}

impl Embedder for FileEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, phrase: &str) -> Result<Vec<f64>, EmbedError> {
        if phrase.split_whitespace().next().is_none() {
            return Err(EmbedError::EmptyPhrase);
        }
        self.table
            .get(phrase)
            .cloned()
            .ok_or_else(|| EmbedError::UnknownPhrase {
                phrase: phrase.to_string(),
            })
    }
}

/// Writes a table in the format [`FileEmbedder`] reads. Rows are
/// written in the given order; vectors are stored as is (the loader
/// normalizes).
pub fn write_embedding_file(
    path: &Path,
    dim: usize,
    rows: &[(String, Vec<f64>)],
) -> Result<(), EmbFileError> {
    for (i, (phrase, vector)) in rows.iter().enumerate() {
        if vector.len() != dim {
            return Err(EmbFileError::DimMismatch {
                line: i + 1,
                expected: dim,
                got: vector.len(),
            });
        }
        if phrase.contains(['\t', '\n']) {
            return Err(EmbFileError::BadRow {
                line: i + 1,
                detail: "phrase contains a tab or newline".into(),
            });
        }
    }
    let mut out = std::fs::File::create(path)?;
    writeln!(out, "EMB 1 {dim}")?;
    for (phrase, vector) in rows {
        let joined = vector
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",");
        writeln!(out, "{phrase}\t{joined}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::test_util::assert_close;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn hash_embeddings_are_deterministic_and_unit_norm() {
        let e = HashEmbedder::new(42, 16);
        let a = e.embed("the dog runs").unwrap();
        let b = e.embed("the dog runs").unwrap();
        assert_eq!(a, b);
        assert_close(&[norm(&a)], &[1.0], 1e-12);

        let other_seed = HashEmbedder::new(43, 16).embed("the dog runs").unwrap();
        assert_ne!(a, other_seed);
        let other_phrase = e.embed("the cat runs").unwrap();
        assert_ne!(a, other_phrase);
    }

    #[test]
    fn hash_embedding_is_the_normalized_token_mean() {
        let e = HashEmbedder::new(7, 8);
        let a = e.token_vector("red");
        let b = e.token_vector("fox");
        let mut manual: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x + y) / 2.0).collect();
        normalize(&mut manual);
        let got = e.embed("red fox").unwrap();
        assert_close(&got, &manual, 1e-12);
        // Extra inner whitespace does not change tokenization.
        assert_eq!(got, e.embed("  red   fox ").unwrap());
    }

    #[test]
    fn empty_phrases_are_rejected() {
        let e = HashEmbedder::new(1, 4);
        assert_eq!(e.embed(""), Err(EmbedError::EmptyPhrase));
        assert_eq!(e.embed("   "), Err(EmbedError::EmptyPhrase));
    }

    #[test]
    fn file_round_trip_normalizes_and_looks_up() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.emb");
        let rows = vec![
            ("the dog".to_string(), vec![3.0, 0.0, 4.0]),
            ("runs".to_string(), vec![0.0, 2.0, 0.0]),
        ];
        write_embedding_file(&path, 3, &rows).unwrap();
        let table = FileEmbedder::load(&path).unwrap();
        assert_eq!(table.dim(), 3);
        let dog = table.embed("the dog").unwrap();
        assert_close(&dog, &[0.6, 0.0, 0.8], 1e-12);
        assert_close(&[norm(&table.embed("runs").unwrap())], &[1.0], 1e-12);
        match table.embed("flies") {
            Err(EmbedError::UnknownPhrase { phrase }) => assert_eq!(phrase, "flies"),
            other => panic!("expected UnknownPhrase, got {other:?}"),
        }
    }

    #[test]
    fn dim_mismatch_reports_the_data_row_index() {
        let text = "EMB 1 3\nok\t1,2,3\nbad\t1,2\n";
        match FileEmbedder::parse(text) {
            Err(EmbFileError::DimMismatch { line, expected, got }) => {
                assert_eq!((line, expected, got), (2, 3, 2));
            }
            other => panic!("expected DimMismatch, got {other:?}"),
        }
        // Blank and comment lines do not advance the row counter.
        let spaced = "EMB 1 3\n\n# comment\nok\t1,2,3\n\nbad\t1,2\n";
        match FileEmbedder::parse(spaced) {
            Err(EmbFileError::DimMismatch { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected DimMismatch, got {other:?}"),
        }
    }

    #[test]
    fn bad_headers_and_rows_are_rejected() {
        assert!(matches!(
            FileEmbedder::parse("EMB 2 3\n"),
            Err(EmbFileError::BadHeader { .. })
        ));
        assert!(matches!(
            FileEmbedder::parse("nope\n"),
            Err(EmbFileError::BadHeader { .. })
        ));
        assert!(matches!(
            FileEmbedder::parse("EMB 1 2\nno-tab 1,2\n"),
            Err(EmbFileError::BadRow { line: 1, .. })
        ));
        assert!(matches!(
            FileEmbedder::parse("EMB 1 2\na\t1,x\n"),
            Err(EmbFileError::BadRow { line: 1, .. })
        ));
        assert!(matches!(
            FileEmbedder::parse("EMB 1 2\na\t1,2\na\t3,4\n"),
            Err(EmbFileError::DuplicatePhrase { line: 2, .. })
        ));
    }

    #[test]
    fn zero_vectors_fall_back_to_the_uniform_unit_vector() {
        let table = FileEmbedder::parse("EMB 1 4\nnull\t0,0,0,0\n").unwrap();
        let v = table.embed("null").unwrap();
        let fill = 0.5;
        assert!(v.iter().all(|x| (x - fill).abs() < 1e-15));
        assert_close(&[norm(&v)], &[1.0], 1e-12);
    }

    #[test]
    fn providers_share_the_trait() {
        let hash = HashEmbedder::new(3, 8);
        let boxed: Box<dyn Embedder> = Box::new(hash);
        assert_eq!(boxed.dim(), 8);
        assert_eq!(boxed.embed("dog").unwrap().len(), 8);
    }
}
