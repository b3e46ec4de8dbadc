//! Exact-match scoring (question and interaction level) with turn and
//! difficulty breakdowns.
//!
//! Two queries match when their canonical forms are equal:
//! - SELECT: the DISTINCT flag and the items as a multiset
//! - FROM and GROUP BY: sets
//! - WHERE and HAVING: nested AND/OR chains flattened into sets of operands
//! - ORDER BY: the item list in order, plus the direction
//! - LIMIT: presence only; literals everywhere are placeholders
//! - set operations: operator and both sides, compared recursively

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::Interaction;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::schema::Schema;
use crate::sql::{self, CmpOp, Cond, Direction, Item, Operand, Query, SetOp, Sql};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum COperand {
    Value,
    Column(usize),
    Nested(Box<CSql>),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum CCond {
    And(BTreeSet<CCond>),
    Or(BTreeSet<CCond>),
    Compare(CmpOp, Item, COperand),
    Between(Item, COperand, COperand),
    In(Item, COperand),
    NotIn(Item, COperand),
    Like(Item, COperand),
    NotLike(Item, COperand),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct CQuery {
    distinct: bool,
    select: Vec<Item>,
    from: BTreeSet<usize>,
    filter: Option<CCond>,
    group: Option<(BTreeSet<usize>, Option<CCond>)>,
    order: Option<(Vec<Item>, Direction)>,
    limit: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct CSql {
    query: CQuery,
    compound: Option<(SetOp, Box<CSql>)>,
}

fn c_operand(o: &Operand) -> COperand {
    match o {
        Operand::Value => COperand::Value,
        Operand::Column(c) => COperand::Column(*c),
        Operand::Nested(s) => COperand::Nested(Box::new(canonical(s))),
    }
}

fn flatten(c: &Cond, and: bool, out: &mut BTreeSet<CCond>) {
    match (c, and) {
        (Cond::And(a, b), true) | (Cond::Or(a, b), false) => {
            flatten(a, and, out);
            flatten(b, and, out);
        }
        _ => {
            out.insert(c_cond(c));
        }
    }
}

fn c_cond(c: &Cond) -> CCond {
    match c {
        Cond::And(..) => {
            let mut s = BTreeSet::new();
            flatten(c, true, &mut s);
            CCond::And(s)
        }
        Cond::Or(..) => {
            let mut s = BTreeSet::new();
            flatten(c, false, &mut s);
            CCond::Or(s)
        }
        Cond::Compare(op, i, o) => CCond::Compare(*op, *i, c_operand(o)),
        Cond::Between(i, a, b) => CCond::Between(*i, c_operand(a), c_operand(b)),
        Cond::In(i, o) => CCond::In(*i, c_operand(o)),
        Cond::NotIn(i, o) => CCond::NotIn(*i, c_operand(o)),
        Cond::Like(i, o) => CCond::Like(*i, c_operand(o)),
        Cond::NotLike(i, o) => CCond::NotLike(*i, c_operand(o)),
    }
}

fn c_query(q: &Query) -> CQuery {
    let mut select = q.select.clone();
    select.sort();
    CQuery {
        distinct: q.distinct,
        select,
        from: q.from.iter().copied().collect(),
        filter: q.filter.as_ref().map(c_cond),
        group: q
            .group
            .as_ref()
            .map(|g| (g.columns.iter().copied().collect(), g.having.as_ref().map(c_cond))),
        order: q.order.as_ref().map(|o| (o.items.clone(), o.direction)),
        limit: q.limit,
    }
}

fn canonical(s: &Sql) -> CSql {
    CSql {
        query: c_query(&s.query),
        compound: s.compound.as_ref().map(|(op, rhs)| (*op, Box::new(canonical(rhs)))),
    }
}

/// Component-wise equality of two parsed queries.
pub fn sql_match(pred: &Sql, gold: &Sql) -> bool {
    canonical(pred) == canonical(gold)
}

/// Exact match of SQL strings. An unparseable prediction is a non-match;
/// an unparseable gold is an error.
pub fn exact_match(pred: &str, gold: &str, schema: &Schema) -> Result<bool> {
    let gold = sql::parse(gold, schema)?;
    Ok(match sql::parse(pred, schema) {
        Ok(p) => sql_match(&p, &gold),
        Err(e) => {
            log::debug!("unparseable prediction `{pred}`: {e}");
            false
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
    Extra,
}

impl Difficulty {
    pub const ALL: [Difficulty; 4] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard, Difficulty::Extra];

    pub fn label(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
            Difficulty::Extra => "extra",
        }
    }
}

fn cond_leaves<'a>(c: &'a Cond, out: &mut Vec<&'a Cond>) {
    match c {
        Cond::And(a, b) | Cond::Or(a, b) => {
            cond_leaves(a, out);
            cond_leaves(b, out);
        }
        _ => out.push(c),
    }
}

fn count_or(c: &Cond) -> usize {
    match c {
        Cond::And(a, b) => count_or(a) + count_or(b),
        Cond::Or(a, b) => 1 + count_or(a) + count_or(b),
        _ => 0,
    }
}

fn leaf_item(c: &Cond) -> &Item {
    match c {
        Cond::Compare(_, i, _) | Cond::Between(i, ..) | Cond::In(i, _) | Cond::NotIn(i, _) => i,
        Cond::Like(i, _) | Cond::NotLike(i, _) => i,
        Cond::And(..) | Cond::Or(..) => unreachable!("leaves only"),
    }
}

/// Rubric component counts `(structural, nesting, other)` of the outer block.
pub fn difficulty_components(s: &Sql) -> (usize, usize, usize) {
    let q = &s.query;
    let having = q.group.as_ref().and_then(|g| g.having.as_ref());
    let conds: Vec<&Cond> = q.filter.iter().chain(having).collect();
    let mut leaves = Vec::new();
    for c in &conds {
        cond_leaves(c, &mut leaves);
    }

    let mut comp1 = [q.filter.is_some(), q.group.is_some(), q.order.is_some(), q.limit]
        .iter()
        .filter(|&&b| b)
        .count();
    comp1 += q.from.len().saturating_sub(1);
    comp1 += conds.iter().map(|c| count_or(c)).sum::<usize>();
    comp1 += leaves
        .iter()
        .filter(|c| matches!(c, Cond::Like(..) | Cond::NotLike(..)))
        .count();

    let mut nested = Vec::new();
    sql::collect_nested(q, &mut nested);
    let comp2 = nested.len() + usize::from(s.compound.is_some());

    let mut where_leaves = Vec::new();
    if let Some(f) = &q.filter {
        cond_leaves(f, &mut where_leaves);
    }
    let aggs = q.select.iter().filter(|i| i.agg.is_some()).count()
        + leaves.iter().filter(|c| leaf_item(c).agg.is_some()).count()
        + q.order
            .as_ref()
            .map_or(0, |o| o.items.iter().filter(|i| i.agg.is_some()).count());
    let others = [
        aggs > 1,
        q.select.len() > 1,
        where_leaves.len() > 1,
        q.group.as_ref().is_some_and(|g| g.columns.len() > 1),
    ]
    .iter()
    .filter(|&&b| b)
    .count();
    (comp1, comp2, others)
}

/// Approximate benchmark-style hardness. Any nesting or set operation lands
/// in Hard or Extra.
pub fn classify_difficulty(s: &Sql) -> Difficulty {
    let (c1, c2, o) = difficulty_components(s);
    if c2 == 0 {
        if c1 <= 1 && o == 0 {
            Difficulty::Easy
        } else if (o <= 2 && c1 <= 1) || (c1 <= 2 && o < 2) {
            Difficulty::Medium
        } else if (o > 2 && c1 <= 2) || (c1 > 2 && c1 <= 3 && o <= 2) {
            Difficulty::Hard
        } else {
            Difficulty::Extra
        }
    } else if c1 == 0 && o == 0 && c2 == 1 {
        Difficulty::Hard
    } else {
        Difficulty::Extra
    }
}

pub fn classify_difficulty_of(src: &str, schema: &Schema) -> Result<Difficulty> {
    Ok(classify_difficulty(&sql::parse(src, schema)?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub count: usize,
    pub correct: usize,
}

impl Bucket {
    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }

    fn add(&mut self, ok: bool) {
        self.count += 1;
        self.correct += usize::from(ok);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub interaction: usize,
    pub turn: usize,
    pub database_id: String,
    pub predicted: Option<String>,
    pub gold: String,
    pub correct: bool,
    pub difficulty: Difficulty,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub qm: f64,
    pub im: f64,
    pub questions: Bucket,
    pub interactions: Bucket,
    /// Keys "1", "2", "3", "4", ">4".
    pub by_turn: BTreeMap<String, Bucket>,
    pub by_difficulty: BTreeMap<Difficulty, Bucket>,
    pub results: Vec<QuestionResult>,
}

pub const TURN_BUCKETS: [&str; 5] = ["1", "2", "3", "4", ">4"];

fn turn_bucket(turn: usize) -> &'static str {
    TURN_BUCKETS[turn.min(4)]
}

/// A prediction for one question: SQL text or the reason none was produced.
pub type Prediction = std::result::Result<String, String>;

/// Scores predictions laid out as `preds[interaction][turn]`. Only gold SQL
/// is read from the dataset.
pub fn score(data: &[Interaction], preds: &[Vec<Prediction>], schemas: &HashMap<String, Schema>) -> Result<EvalReport> {
    if preds.len() != data.len() {
        return Err(Error::Invalid(format!(
            "{} prediction groups for {} interactions",
            preds.len(),
            data.len()
        )));
    }
    let mut questions = Bucket::default();
    let mut interactions = Bucket::default();
    let mut by_turn: BTreeMap<String, Bucket> = TURN_BUCKETS.iter().map(|k| (k.to_string(), Bucket::default())).collect();
    let mut by_difficulty: BTreeMap<Difficulty, Bucket> = Difficulty::ALL.iter().map(|&d| (d, Bucket::default())).collect();
    let mut results = Vec::new();
    for (i, (inter, p)) in data.iter().zip(preds).enumerate() {
        if p.len() != inter.turns.len() {
            return Err(Error::Invalid(format!("interaction {i}: {} predictions for {} turns", p.len(), inter.turns.len())));
        }
        let schema = schemas.get(&inter.database_id).ok_or_else(|| Error::Unknown {
            kind: "database",
            name: inter.database_id.clone(),
        })?;
        let mut all = true;
        for (t, (turn, pred)) in inter.turns.iter().zip(p).enumerate() {
            let (correct, error) = match pred {
                Ok(s) => match sql::parse(s, schema) {
                    Ok(parsed) => (sql_match(&parsed, &turn.gold), None),
                    Err(e) => (false, Some(format!("unparseable prediction: {e}"))),
                },
                Err(e) => (false, Some(e.clone())),
            };
            let difficulty = classify_difficulty(&turn.gold);
            questions.add(correct);
            by_turn.get_mut(turn_bucket(t)).expect("all buckets present").add(correct);
            by_difficulty.get_mut(&difficulty).expect("all buckets present").add(correct);
            all &= correct;
            results.push(QuestionResult {
                interaction: i,
                turn: t,
                database_id: inter.database_id.clone(),
                predicted: pred.as_ref().ok().cloned(),
                gold: turn.gold_sql.clone(),
                correct,
                difficulty,
                error,
            });
        }
        interactions.add(all);
    }
    let report = EvalReport {
        qm: questions.accuracy(),
        im: interactions.accuracy(),
        questions,
        interactions,
        by_turn,
        by_difficulty,
        results,
    };
    report.check()?;
    Ok(report)
}

/// Beam-decodes every question from its question context alone and scores
/// the top hypothesis.
pub fn evaluate(model: &Model, data: &[Interaction], schemas: &HashMap<String, Schema>, beam: usize) -> Result<EvalReport> {
    let preds = predict_all(model, data, schemas, beam)?;
    score(data, &preds, schemas)
}

/// `preds[interaction][turn]`, decoded from questions only.
pub fn predict_all(
    model: &Model,
    data: &[Interaction],
    schemas: &HashMap<String, Schema>,
    beam: usize,
) -> Result<Vec<Vec<Prediction>>> {
    data.iter()
        .map(|inter| {
            let schema = schemas.get(&inter.database_id).ok_or_else(|| Error::Unknown {
                kind: "database",
                name: inter.database_id.clone(),
            })?;
            let questions: Vec<&[String]> = inter.turns.iter().map(|t| t.question.as_slice()).collect();
            Ok((0..questions.len())
                .map(|t| model.predict(&questions[..=t], schema, beam).map_err(|e| e.to_string()))
                .collect())
        })
        .collect()
}

impl EvalReport {
    /// Bucket totals reconcile, the interaction count agrees with the
    /// per-question results, and matched interactions never outnumber matched
    /// questions. The ratio form IM <= QM can fail on mixed-length
    /// interactions, so it is only warned about.
    pub fn check(&self) -> Result<()> {
        let turn_total: usize = self.by_turn.values().map(|b| b.count).sum();
        let diff_total: usize = self.by_difficulty.values().map(|b| b.count).sum();
        let turn_correct: usize = self.by_turn.values().map(|b| b.correct).sum();
        if turn_total != self.questions.count
            || diff_total != self.questions.count
            || turn_correct != self.questions.correct
        {
            return Err(Error::Invalid("evaluation buckets do not reconcile".into()));
        }
        let mut all: BTreeMap<usize, bool> = BTreeMap::new();
        for r in &self.results {
            *all.entry(r.interaction).or_insert(true) &= r.correct;
        }
        let matched = all.values().filter(|&&c| c).count();
        if matched != self.interactions.correct || self.interactions.correct > self.questions.correct {
            return Err(Error::Invalid(format!(
                "{} matched interactions against {} matched questions",
                self.interactions.correct, self.questions.correct
            )));
        }
        if self.im > self.qm {
            log::warn!("IM {:.4} exceeds QM {:.4} (short interactions dominate the matches)", self.im, self.qm);
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "QM {:6.2}%  ({}/{})\nIM {:6.2}%  ({}/{})\n",
            100.0 * self.qm,
            self.questions.correct,
            self.questions.count,
            100.0 * self.im,
            self.interactions.correct,
            self.interactions.count
        );
        let _ = writeln!(s, "{:<10}{:>8}{:>10}", "turn", "#", "QM %");
        for k in TURN_BUCKETS {
            let b = self.by_turn[k];
            let _ = writeln!(s, "{:<10}{:>8}{:>10.2}", k, b.count, 100.0 * b.accuracy());
        }
        let _ = writeln!(s, "\n{:<10}{:>8}{:>10}", "difficulty", "#", "QM %");
        for d in Difficulty::ALL {
            let b = self.by_difficulty[&d];
            let _ = writeln!(s, "{:<10}{:>8}{:>10.2}", d.label(), b.count, 100.0 * b.accuracy());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::tests::tiny_schema;

    fn em(a: &str, b: &str) -> bool {
        exact_match(a, b, &tiny_schema()).unwrap()
    }

    #[test]
    fn select_order_is_ignored() {
        assert!(em("SELECT name FROM singer", "SELECT name FROM singer"));
        assert!(em("SELECT name, age FROM singer", "SELECT age, name FROM singer"));
        assert!(!em("SELECT name, name FROM singer", "SELECT name FROM singer"));
    }

    #[test]
    fn where_operator_and_conjunct_order() {
        assert!(!em("SELECT name FROM singer WHERE age > 3", "SELECT name FROM singer WHERE age < 3"));
        assert!(em(
            "SELECT name FROM singer WHERE age > 3 AND name = 'x' AND age < 9",
            "SELECT name FROM singer WHERE age < 1 AND (age > 2 AND name = 'y')"
        ));
        assert!(!em(
            "SELECT name FROM singer WHERE age > 3 AND name = 'x'",
            "SELECT name FROM singer WHERE age > 3 OR name = 'x'"
        ));
    }

    #[test]
    fn order_direction_and_limit_matter() {
        assert!(!em("SELECT name FROM singer ORDER BY age", "SELECT name FROM singer ORDER BY age DESC"));
        assert!(!em("SELECT name FROM singer ORDER BY age LIMIT 1", "SELECT name FROM singer ORDER BY age"));
        assert!(em("SELECT name FROM singer ORDER BY age LIMIT 1", "SELECT name FROM singer ORDER BY age LIMIT 5"));
    }

    #[test]
    fn unparseable_prediction_is_a_miss() {
        assert!(!em("SELECT FROM", "SELECT name FROM singer"));
        assert!(exact_match("SELECT name FROM singer", "SELECT nope FROM singer", &tiny_schema()).is_err());
    }

    #[test]
    fn difficulty_rubric() {
        let s = tiny_schema();
        let d = |q: &str| classify_difficulty_of(q, &s).unwrap();
        assert_eq!(d("SELECT name FROM singer"), Difficulty::Easy);
        assert_eq!(d("SELECT name, age FROM singer WHERE age > 3"), Difficulty::Medium);
        assert_eq!(d("SELECT name FROM singer WHERE age IN (SELECT age FROM singer)"), Difficulty::Extra);
        assert_eq!(d("SELECT name FROM singer INTERSECT SELECT name FROM singer"), Difficulty::Hard);
        assert_eq!(
            d("SELECT name FROM singer WHERE age > 3"),
            d("SELECT name FROM singer WHERE age > 99")
        );
    }
}
