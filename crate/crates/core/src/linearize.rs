//! Joint question/schema token sequence and the pairwise relation graph over it.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::schema::{Schema, SchemaItem};
use crate::vocab::{LATENT, SEP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Segment {
    Latent,
    Separator,
    Question { turn: usize },
    Table(usize),
    Column(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    /// Words whose embeddings are averaged for this token.
    pub words: Vec<String>,
    pub segment: Segment,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinearizedInput {
    pub tokens: Vec<Token>,
}

impl LinearizedInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    /// Positions of schema items, in serialization order.
    pub fn schema_positions(&self) -> Vec<(SchemaItem, usize)> {
        self.tokens
            .iter()
            .enumerate()
            .filter_map(|(i, t)| match t.segment {
                Segment::Table(x) => Some((SchemaItem::Table(x), i)),
                Segment::Column(x) => Some((SchemaItem::Column(x), i)),
                _ => None,
            })
            .collect()
    }

    /// Position of each table, indexed by table id.
    pub fn table_positions(&self, schema: &Schema) -> Vec<usize> {
        let mut out = vec![0; schema.tables.len()];
        for (i, t) in self.tokens.iter().enumerate() {
            if let Segment::Table(x) = t.segment {
                out[x] = i;
            }
        }
        out
    }

    /// Position of each column, indexed by column id.
    pub fn column_positions(&self, schema: &Schema) -> Vec<usize> {
        let mut out = vec![0; schema.columns.len()];
        for (i, t) in self.tokens.iter().enumerate() {
            if let Segment::Column(x) = t.segment {
                out[x] = i;
            }
        }
        out
    }
}

fn special(text: &str, segment: Segment) -> Token {
    Token {
        text: text.to_string(),
        words: vec![text.to_string()],
        segment,
    }
}

/// `[Z] q1 [SEP] q2 ... [SEP] t1 c11 c12 [SEP] t2 ...`. A self-contained
/// question is passed as a single turn.
pub fn linearize(turns: &[&[String]], schema: &Schema) -> Result<LinearizedInput> {
    if turns.is_empty() || turns.iter().any(|t| t.is_empty()) {
        return Err(Error::Invalid("empty question".into()));
    }
    let mut tokens = vec![special(LATENT, Segment::Latent)];
    for (turn, words) in turns.iter().enumerate() {
        if turn > 0 {
            tokens.push(special(SEP, Segment::Separator));
        }
        tokens.extend(words.iter().map(|w| Token {
            text: w.clone(),
            words: vec![w.clone()],
            segment: Segment::Question { turn },
        }));
    }
    for (t, table) in schema.tables.iter().enumerate() {
        tokens.push(special(SEP, Segment::Separator));
        tokens.push(Token {
            text: table.name.clone(),
            words: table.words.clone(),
            segment: Segment::Table(t),
        });
        for &c in &table.columns {
            let col = &schema.columns[c];
            tokens.push(Token {
                text: col.name.clone(),
                words: col.words.clone(),
                segment: Segment::Column(c),
            });
        }
    }
    Ok(LinearizedInput { tokens })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(usize)]
pub enum Relation {
    Default = 0,
    QuestionDistMinus2,
    QuestionDistMinus1,
    QuestionDist0,
    QuestionDistPlus1,
    QuestionDistPlus2,
    ExactMatch,
    PartialMatch,
    NoMatch,
    BelongsTo,
    ForeignKey,
    SameTable,
}

pub const NUM_RELATIONS: usize = 12;

impl Relation {
    pub fn id(self) -> usize {
        self as usize
    }

    fn question_distance(d: isize) -> Relation {
        match d.clamp(-2, 2) {
            -2 => Relation::QuestionDistMinus2,
            -1 => Relation::QuestionDistMinus1,
            0 => Relation::QuestionDist0,
            1 => Relation::QuestionDistPlus1,
            _ => Relation::QuestionDistPlus2,
        }
    }
}

/// Dense `n x n` label matrix, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationGraph {
    pub n: usize,
    pub labels: Arc<Vec<usize>>,
}

impl RelationGraph {
    pub fn get(&self, i: usize, j: usize) -> usize {
        self.labels[i * self.n + j]
    }

    /// Every pair carries the same label.
    pub fn uniform(n: usize, label: usize) -> Self {
        RelationGraph {
            n,
            labels: Arc::new(vec![label; n * n]),
        }
    }
}

fn partial(token: &str, word: &str) -> bool {
    if token == word {
        return true;
    }
    let shorter = token.len().min(word.len());
    shorter >= 3 && (token.contains(word) || word.contains(token))
}

/// Question-to-item match labels for one turn's tokens.
fn match_labels(words: &[&str], item: &[String]) -> Vec<Relation> {
    let mut out = vec![Relation::NoMatch; words.len()];
    let m = item.len();
    if m > 0 && m <= words.len() {
        for i in 0..=words.len() - m {
            if words[i..i + m].iter().zip(item).all(|(a, b)| *a == b) {
                out[i..i + m].fill(Relation::ExactMatch);
            }
        }
    }
    for (i, w) in words.iter().enumerate() {
        if out[i] == Relation::NoMatch && item.iter().any(|x| partial(w, x)) {
            out[i] = Relation::PartialMatch;
        }
    }
    out
}

pub fn build_relations(input: &LinearizedInput, schema: &Schema) -> RelationGraph {
    let n = input.len();
    let mut labels = vec![Relation::Default.id(); n * n];
    let seg: Vec<Segment> = input.tokens.iter().map(|t| t.segment).collect();
    let mut set = |i: usize, j: usize, r: Relation| labels[i * n + j] = r.id();

    // Question-question: relative turn distance.
    for i in 0..n {
        for j in 0..n {
            if let (Segment::Question { turn: a }, Segment::Question { turn: b }) = (seg[i], seg[j]) {
                set(i, j, Relation::question_distance(b as isize - a as isize));
            }
        }
    }

    // Schema-schema structure.
    for i in 0..n {
        for j in 0..n {
            let r = match (seg[i], seg[j]) {
                (Segment::Column(c), Segment::Table(t)) | (Segment::Table(t), Segment::Column(c))
                    if schema.columns[c].table == t =>
                {
                    Relation::BelongsTo
                }
                (Segment::Column(a), Segment::Column(b)) => {
                    if schema.foreign_keys.iter().any(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a)) {
                        Relation::ForeignKey
                    } else if schema.columns[a].table == schema.columns[b].table {
                        Relation::SameTable
                    } else {
                        continue;
                    }
                }
                _ => continue,
            };
            set(i, j, r);
        }
    }

    // Latent-schema is NoMatch in both directions.
    for j in 0..n {
        if matches!(seg[j], Segment::Table(_) | Segment::Column(_)) {
            for (i, s) in seg.iter().enumerate() {
                if *s == Segment::Latent {
                    set(i, j, Relation::NoMatch);
                    set(j, i, Relation::NoMatch);
                }
            }
        }
    }

    // Question-schema textual match, computed per turn so n-grams never span turns.
    let turns = seg
        .iter()
        .filter_map(|s| match s {
            Segment::Question { turn } => Some(*turn + 1),
            _ => None,
        })
        .max()
        .unwrap_or(0);
    for turn in 0..turns {
        let positions: Vec<usize> = (0..n).filter(|&i| seg[i] == Segment::Question { turn }).collect();
        let words: Vec<&str> = positions.iter().map(|&i| input.tokens[i].text.as_str()).collect();
        for (j, token) in input.tokens.iter().enumerate() {
            let item: &[String] = match token.segment {
                Segment::Table(_) | Segment::Column(_) => &token.words,
                _ => continue,
            };
            for (k, r) in match_labels(&words, item).into_iter().enumerate() {
                set(positions[k], j, r);
                set(j, positions[k], r);
            }
        }
    }

    RelationGraph {
        n,
        labels: Arc::new(labels),
    }
}
