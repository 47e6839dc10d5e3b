//! Vocabulary and pre-trained embedding loading.
//!
//! The embedding text format is `V D` on the first line, then `V` lines of
//! `code v1 ... vD`. Codes become vocabulary ids 2.. in file order; id 0 is
//! the padding token (all-zero vector) and id 1 the unknown token (the mean
//! of all loaded vectors).

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::PreprocessError;
use crate::autodiff::Tensor;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";

/// Bijection between diagnosis codes and token ids, with ids 0 and 1 reserved
/// for padding and unknown tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    codes: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_codes(codes: Vec<String>) -> Result<Self, PreprocessError> {
        let mut index = HashMap::with_capacity(codes.len());
        for (i, code) in codes.iter().enumerate() {
            if code == PAD_TOKEN || code == UNK_TOKEN {
                return Err(PreprocessError::Format(format!(
                    "reserved token '{code}' cannot be a vocabulary code"
                )));
            }
            if index.insert(code.clone(), i as u32 + 2).is_some() {
                return Err(PreprocessError::Format(format!("duplicate code '{code}'")));
            }
        }
        Ok(Vocabulary { codes, index })
    }

    /// Token id of a code, if it has an embedding.
    pub fn id_of(&self, code: &str) -> Option<u32> {
        self.index.get(code).copied()
    }

    /// Code string for a token id, including the reserved tokens.
    pub fn code_of(&self, id: u32) -> Option<&str> {
        match id {
            PAD_ID => Some(PAD_TOKEN),
            UNK_ID => Some(UNK_TOKEN),
            _ => self.codes.get(id as usize - 2).map(|s| s.as_str()),
        }
    }

    /// Total id count including the two reserved tokens.
    pub fn len(&self) -> usize {
        self.codes.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Non-reserved codes in id order.
    pub fn codes(&self) -> &[String] {
        &self.codes
    }
}

/// Embedding matrix aligned to vocabulary ids: row 0 zeros (PAD), row 1 the
/// mean of all loaded rows (UNK), rows 2.. the file vectors in order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    weights: Tensor,
}

impl EmbeddingTable {
    pub fn new(dim: usize, weights: Tensor) -> Self {
        EmbeddingTable { dim, weights }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn into_weights(self) -> Tensor {
        self.weights
    }

    pub fn row(&self, id: u32) -> &[f64] {
        let d = self.dim;
        &self.weights.data()[id as usize * d..(id as usize + 1) * d]
    }
}

/// Load the embedding file, building the vocabulary from its codes.
/// `expected_dim` guards against loading vectors of the wrong width (pass the
/// configured dimension; the conventional width is 200).
pub fn load_embeddings(
    path: &Path,
    expected_dim: usize,
) -> Result<(Vocabulary, EmbeddingTable), PreprocessError> {
    let display = path.display().to_string();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| PreprocessError::Format(format!("{display}: empty file")))??;
    let mut parts = header.split_whitespace();
    let count: usize = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| PreprocessError::Format(format!("{display}: bad header '{header}'")))?;
    let dim: usize = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| PreprocessError::Format(format!("{display}: bad header '{header}'")))?;
    if parts.next().is_some() {
        return Err(PreprocessError::Format(format!("{display}: bad header '{header}'")));
    }
    if dim != expected_dim {
        return Err(PreprocessError::Format(format!(
            "{display}: embeddings are {dim}-dimensional, expected {expected_dim}"
        )));
    }

    let mut codes = Vec::with_capacity(count);
    let mut data = vec![0.0f64; (count + 2) * dim];
    for row in 0..count {
        let line = lines.next().ok_or_else(|| {
            PreprocessError::Format(format!(
                "{display}: header promises {count} vectors, found {row}"
            ))
        })??;
        let mut fields = line.split_whitespace();
        let code = fields
            .next()
            .ok_or_else(|| PreprocessError::Format(format!("{display}: empty vector line")))?
            .to_string();
        let dest = &mut data[(row + 2) * dim..(row + 3) * dim];
        for (j, slot) in dest.iter_mut().enumerate() {
            let field = fields.next().ok_or_else(|| {
                PreprocessError::Format(format!(
                    "{display}: vector for '{code}' has fewer than {dim} components"
                ))
            })?;
            *slot = field.parse().map_err(|e| {
                PreprocessError::Format(format!(
                    "{display}: bad float '{field}' in component {j} of '{code}': {e}"
                ))
            })?;
        }
        if fields.next().is_some() {
            return Err(PreprocessError::Format(format!(
                "{display}: vector for '{code}' has more than {dim} components"
            )));
        }
        codes.push(code);
    }
    if lines.next().transpose()?.is_some_and(|l| !l.trim().is_empty()) {
        return Err(PreprocessError::Format(format!(
            "{display}: trailing content after {count} vectors"
        )));
    }

    // UNK row: arithmetic mean of all loaded code rows
    if count > 0 {
        for j in 0..dim {
            let mut sum = 0.0;
            for row in 0..count {
                sum += data[(row + 2) * dim + j];
            }
            data[dim + j] = sum / count as f64;
        }
    }

    let vocab = Vocabulary::from_codes(codes)?;
    let weights = Tensor::from_vec(&[count + 2, dim], data)
        .map_err(|e| PreprocessError::Format(e.to_string()))?;
    Ok((vocab, EmbeddingTable { dim, weights }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_embeddings(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        std::fs::write(&path, content).unwrap();
        (dir, path)
    }

    #[test]
    fn pad_is_zero_and_unk_is_mean() {
        let (_dir, path) = write_embeddings("2 3\na 1 2 3\nb 3 4 5\n");
        let (vocab, table) = load_embeddings(&path, 3).unwrap();
        assert_eq!(vocab.len(), 4);
        assert_eq!(table.row(PAD_ID), &[0.0, 0.0, 0.0]);
        for (u, want) in table.row(UNK_ID).iter().zip([2.0, 3.0, 4.0]) {
            assert!((u - want).abs() < 1e-12);
        }
        assert_eq!(table.row(vocab.id_of("a").unwrap()), &[1.0, 2.0, 3.0]);
        assert_eq!(vocab.code_of(vocab.id_of("b").unwrap()), Some("b"));
        assert_eq!(vocab.code_of(PAD_ID), Some(PAD_TOKEN));
    }

    #[test]
    fn dimension_mismatch_is_a_format_error() {
        let (_dir, path) = write_embeddings("1 3\na 1 2 3\n");
        assert!(load_embeddings(&path, 200).is_err());
    }

    #[test]
    fn missing_vector_line_is_a_format_error() {
        let (_dir, path) = write_embeddings("2 2\na 1 2\n");
        let err = load_embeddings(&path, 2).unwrap_err();
        assert!(err.to_string().contains("promises 2 vectors"), "{err}");
    }

    #[test]
    fn duplicate_code_is_a_format_error() {
        let (_dir, path) = write_embeddings("2 2\na 1 2\na 3 4\n");
        let err = load_embeddings(&path, 2).unwrap_err();
        assert!(err.to_string().contains("duplicate code"), "{err}");
    }

    #[test]
    fn wrong_component_count_is_a_format_error() {
        let (_dir, path) = write_embeddings("1 3\na 1 2\n");
        assert!(load_embeddings(&path, 3).is_err());
        let (_dir2, path2) = write_embeddings("1 2\na 1 2 3\n");
        assert!(load_embeddings(&path2, 2).is_err());
    }
}
