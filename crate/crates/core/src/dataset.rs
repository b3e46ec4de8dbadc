use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::Schema;
use crate::sql::{self, Sql};

/// Lowercases and splits on whitespace and punctuation; punctuation is dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Where a turn's self-contained question came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Seed,
    Generated,
    /// Accepted by the checker in the given self-training loop (1-based).
    Accepted(usize),
    Annotated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Turn {
    pub question: Vec<String>,
    pub gold_sql: String,
    pub gold: Sql,
    pub self_contained: Option<Vec<String>>,
    pub generated_self_contained: Option<Vec<String>>,
    pub provenance: Option<Provenance>,
}

impl Turn {
    /// The self-contained question, falling back to the raw question.
    pub fn self_contained_or_question(&self) -> &[String] {
        self.self_contained.as_deref().unwrap_or(&self.question)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Interaction {
    pub database_id: String,
    pub turns: Vec<Turn>,
}

impl Interaction {
    /// Questions of turns `0..=turn`, the parser's context input.
    pub fn context(&self, turn: usize) -> Vec<&[String]> {
        self.turns[..=turn].iter().map(|t| t.question.as_slice()).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawTurn {
    utterance: String,
    query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    self_contained: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawInteraction {
    database_id: String,
    interaction: Vec<RawTurn>,
}

pub fn load_interactions(path: impl AsRef<Path>, schemas: &HashMap<String, Schema>) -> Result<Vec<Interaction>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text, schemas, path)
}

pub fn parse_interactions(text: &str, schemas: &HashMap<String, Schema>, path: &Path) -> Result<Vec<Interaction>> {
    let raw: Vec<RawInteraction> = serde_json::from_str(text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    raw.into_iter()
        .enumerate()
        .map(|(index, r)| {
            let err = |turn: Option<usize>, message: String| Error::Ingest {
                path: path.to_path_buf(),
                index,
                turn,
                message,
            };
            let schema = schemas
                .get(&r.database_id)
                .ok_or_else(|| err(None, format!("unknown database `{}`", r.database_id)))?;
            if r.interaction.is_empty() {
                return Err(err(None, "interaction has no turns".into()));
            }
            let turns = r
                .interaction
                .into_iter()
                .enumerate()
                .map(|(t, rt)| {
                    let question = tokenize(&rt.utterance);
                    if question.is_empty() {
                        return Err(err(Some(t), "empty question".into()));
                    }
                    let gold = sql::parse(&rt.query, schema).map_err(|e| err(Some(t), e.to_string()))?;
                    let self_contained = rt.self_contained.as_deref().map(tokenize).filter(|v| !v.is_empty());
                    Ok(Turn {
                        question,
                        gold_sql: rt.query,
                        gold,
                        self_contained,
                        generated_self_contained: None,
                        provenance: rt.provenance,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Interaction {
                database_id: r.database_id,
                turns,
            })
        })
        .collect()
}

/// Writes interactions in the input format; self-contained questions are
/// written as space-joined tokens.
pub fn save_interactions(path: impl AsRef<Path>, interactions: &[Interaction]) -> Result<()> {
    let raw: Vec<RawInteraction> = interactions
        .iter()
        .map(|i| RawInteraction {
            database_id: i.database_id.clone(),
            interaction: i
                .turns
                .iter()
                .map(|t| RawTurn {
                    utterance: t.question.join(" "),
                    query: t.gold_sql.clone(),
                    self_contained: t.self_contained.as_ref().map(|s| s.join(" ")),
                    provenance: t.provenance.clone(),
                })
                .collect(),
        })
        .collect();
    let text = serde_json::to_string_pretty(&raw).map_err(|source| Error::Json {
        path: path.as_ref().to_path_buf(),
        source,
    })?;
    fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
}

/// One human-written self-contained question.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedAnnotation {
    pub database_id: String,
    pub interaction_index: usize,
    pub turn_index: usize,
    pub self_contained: String,
}

pub fn load_seed_annotations(path: impl AsRef<Path>) -> Result<Vec<SeedAnnotation>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}
