//! Fixed toy vocabulary and prompt embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Index into the embedding table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub usize);

/// The reserved unconditional token.
pub const NULL_TOKEN: TokenId = TokenId(0);
/// Prompt-start token; every conditional prompt begins with it.
pub const START_TOKEN: TokenId = TokenId(1);

pub const VOCABULARY: [&str; 16] = [
    "<null>", "<start>", "circle", "square", "bar", "red", "green", "blue", "a", "photo", "of",
    "and", "shape", "color", "<end>", "<pad>",
];

pub const SHAPES: [&str; 3] = ["circle", "square", "bar"];
pub const COLORS: [&str; 3] = ["red", "green", "blue"];

pub fn token(name: &str) -> Result<TokenId> {
    VOCABULARY
        .iter()
        .position(|&w| w == name)
        .map(TokenId)
        .ok_or_else(|| Error::Lookup {
            kind: "token",
            name: name.to_string(),
        })
}

pub fn token_name(id: TokenId) -> &'static str {
    VOCABULARY.get(id.0).copied().unwrap_or("<unk>")
}

/// An embedded prompt: one row of the embedding table per token.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    token_ids: Vec<TokenId>,
    embeddings: Mat,
    null: bool,
}

impl PromptEmbedding {
    /// Embeds `tokens` with `table` (`vocab × embed_dim`). The null token may
    /// only appear alone, where it yields the unconditional embedding.
    pub fn new(tokens: &[TokenId], table: &Mat) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Argument("prompt has no tokens".into()));
        }
        if let Some(bad) = tokens.iter().find(|t| t.0 >= table.rows()) {
            return Err(Error::Index {
                what: "token",
                index: bad.0,
                len: table.rows(),
            });
        }
        let null = tokens.contains(&NULL_TOKEN);
        if null && tokens.len() != 1 {
            return Err(Error::Argument(
                "the null token cannot be mixed with other tokens".into(),
            ));
        }
        let rows: Vec<&[f64]> = tokens.iter().map(|t| table.row(t.0)).collect();
        let mut data = Vec::with_capacity(tokens.len() * table.cols());
        for r in rows {
            data.extend_from_slice(r);
        }
        Ok(PromptEmbedding {
            token_ids: tokens.to_vec(),
            embeddings: Mat::from_vec(tokens.len(), table.cols(), data),
            null,
        })
    }

    pub fn token_ids(&self) -> &[TokenId] {
        &self.token_ids
    }

    /// `tokens × embed_dim`.
    pub fn embeddings(&self) -> &Mat {
        &self.embeddings
    }

    pub fn is_null(&self) -> bool {
        self.null
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn position(&self, id: TokenId) -> Option<usize> {
        self.token_ids.iter().position(|&t| t == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_lookup() {
        assert_eq!(token("<null>").unwrap(), NULL_TOKEN);
        assert_eq!(token("circle").unwrap(), TokenId(2));
        assert_eq!(token_name(token("blue").unwrap()), "blue");
        assert!(matches!(token("hat"), Err(Error::Lookup { .. })));
    }

    #[test]
    fn embedding_columns_match_tokens() {
        let table = Mat::from_fn(16, 4, |r, c| (r * 4 + c) as f64);
        let p = PromptEmbedding::new(&[START_TOKEN, TokenId(3)], &table).unwrap();
        assert_eq!(p.embeddings().shape(), (2, 4));
        assert_eq!(p.embeddings().row(1), table.row(3));
        assert!(!p.is_null());
        assert!(PromptEmbedding::new(&[NULL_TOKEN], &table).unwrap().is_null());
    }

    #[test]
    fn null_token_must_stand_alone() {
        let table = Mat::zeros(16, 4);
        assert!(PromptEmbedding::new(&[START_TOKEN, NULL_TOKEN], &table).is_err());
        assert!(PromptEmbedding::new(&[], &table).is_err());
        assert!(PromptEmbedding::new(&[TokenId(16)], &table).is_err());
    }
}
