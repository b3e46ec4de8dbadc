//! Self-training for reformulation: train on the accepted set, reformulate
//! every turn, keep what a frozen single-turn parser can still parse, repeat
//! until the accepted set stops growing.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::cqr::{cqr_train, CqrConfig, CqrExample, CqrModel, CqrTrainConfig};
use crate::dataset::{tokenize, Interaction, Provenance, SeedAnnotation, Turn};
use crate::error::{Error, Result};
use crate::eval::sql_match;
use crate::grammar::actions_to_ast;
use crate::model::Model;
use crate::schema::Schema;
use crate::sql::Sql;
use crate::vocab::Vocab;

pub const CHECK_BEAM: usize = 5;

/// True iff any of the parser's top-`beam` parses of `question` matches `gold`.
/// Decoding failures count as a rejection.
pub fn check(parser: &Model, question: &[String], schema: &Schema, gold: &Sql, beam: usize) -> bool {
    if question.is_empty() {
        return false;
    }
    let Ok(hyps) = parser.beam_search(&[question], schema, beam) else {
        return false;
    };
    hyps.iter()
        .filter_map(|h| actions_to_ast(&h.actions, schema, &parser.grammar).ok())
        .any(|sql| sql_match(&sql, gold))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainConfig {
    pub loop_cap: usize,
    pub check_beam: usize,
    pub model: CqrConfig,
    pub train: CqrTrainConfig,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        SelfTrainConfig {
            loop_cap: 5,
            check_beam: CHECK_BEAM,
            model: CqrConfig::default(),
            train: CqrTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopReport {
    pub loop_index: usize,
    pub accepted_before: usize,
    pub accepted_after: usize,
    pub generated: usize,
    /// Turns whose generated question passed the check for the first time.
    pub newly_accepted: usize,
    /// Already-accepted turns that got a different, also passing, question.
    pub churn: usize,
    pub final_token_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Accepted {
    pub question: Vec<String>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug)]
pub struct SelfTrainResult {
    /// The dataset with a self-contained question on every turn.
    pub merged: Vec<Interaction>,
    pub accepted: BTreeMap<(usize, usize), Accepted>,
    pub loops: Vec<LoopReport>,
    /// The loop cap stopped the run before the accepted set settled.
    pub hit_cap: bool,
    pub model: CqrModel,
}

fn schema_of<'a>(schemas: &'a HashMap<String, Schema>, db: &str) -> Result<&'a Schema> {
    schemas.get(db).ok_or_else(|| Error::Unknown {
        kind: "database",
        name: db.to_string(),
    })
}

/// Seeds keyed by `(interaction, turn)`, validated against the dataset.
pub fn seed_map(seeds: &[SeedAnnotation], data: &[Interaction]) -> Result<BTreeMap<(usize, usize), Accepted>> {
    let mut out = BTreeMap::new();
    for (k, s) in seeds.iter().enumerate() {
        let inter = data
            .get(s.interaction_index)
            .ok_or_else(|| Error::Invalid(format!("seed {k}: no interaction {}", s.interaction_index)))?;
        if inter.database_id != s.database_id {
            return Err(Error::Invalid(format!(
                "seed {k}: interaction {} is on `{}`, not `{}`",
                s.interaction_index, inter.database_id, s.database_id
            )));
        }
        if s.turn_index >= inter.turns.len() {
            return Err(Error::Invalid(format!(
                "seed {k}: interaction {} has no turn {}",
                s.interaction_index, s.turn_index
            )));
        }
        let question = tokenize(&s.self_contained);
        if question.is_empty() {
            return Err(Error::Invalid(format!("seed {k}: empty self-contained question")));
        }
        out.insert(
            (s.interaction_index, s.turn_index),
            Accepted {
                question,
                provenance: Provenance::Seed,
            },
        );
    }
    Ok(out)
}

/// Single-turn training pairs for the checker: every first turn plus every
/// seed question, each as its own one-turn interaction.
pub fn checker_pairs(seeds: &[SeedAnnotation], data: &[Interaction]) -> Result<Vec<Interaction>> {
    let seeded = seed_map(seeds, data)?;
    let single = |db: &str, turn: &Turn, question: Vec<String>| Interaction {
        database_id: db.to_string(),
        turns: vec![Turn {
            question,
            self_contained: None,
            generated_self_contained: None,
            provenance: None,
            ..turn.clone()
        }],
    };
    let mut out = Vec::new();
    for (i, inter) in data.iter().enumerate() {
        out.push(single(&inter.database_id, &inter.turns[0], inter.turns[0].question.clone()));
        for (t, turn) in inter.turns.iter().enumerate().skip(1) {
            if let Some(a) = seeded.get(&(i, t)) {
                out.push(single(&inter.database_id, turn, a.question.clone()));
            }
        }
    }
    Ok(out)
}

/// Previous-turn reformulation used as the labeled input for turn `t`.
fn labeled_prev(
    data: &[Interaction],
    accepted: &BTreeMap<(usize, usize), Accepted>,
    generated: &BTreeMap<(usize, usize), Vec<String>>,
    i: usize,
    t: usize,
) -> Vec<String> {
    if t == 0 {
        return Vec::new();
    }
    if let Some(a) = accepted.get(&(i, t - 1)) {
        return a.question.clone();
    }
    if t == 1 {
        // a first question needs no history
        return data[i].turns[0].question.clone();
    }
    generated
        .get(&(i, t - 1))
        .cloned()
        .unwrap_or_else(|| data[i].turns[t - 1].question.clone())
}

fn examples(
    data: &[Interaction],
    accepted: &BTreeMap<(usize, usize), Accepted>,
    generated: &BTreeMap<(usize, usize), Vec<String>>,
) -> Vec<CqrExample> {
    accepted
        .iter()
        .map(|(&(i, t), a)| CqrExample {
            interaction: i,
            turn: t,
            database_id: data[i].database_id.clone(),
            context: data[i].turns[..=t].iter().map(|x| x.question.clone()).collect(),
            prev: labeled_prev(data, accepted, generated, i, t),
            sampled_prev: (t > 0).then(|| generated.get(&(i, t - 1)).cloned()).flatten(),
            target: a.question.clone(),
        })
        .collect()
}

/// Reformulator training examples built from the seed annotations alone.
pub fn seed_examples(seeds: &[SeedAnnotation], data: &[Interaction]) -> Result<Vec<CqrExample>> {
    Ok(examples(data, &seed_map(seeds, data)?, &BTreeMap::new()))
}

/// Reformulates every turn recursively, each turn conditioned on the model's
/// own previous output. Failed generations fall back to the raw question.
pub fn infer_all(
    model: &CqrModel,
    data: &[Interaction],
    schemas: &HashMap<String, Schema>,
) -> Result<BTreeMap<(usize, usize), Vec<String>>> {
    let mut out = BTreeMap::new();
    for (i, inter) in data.iter().enumerate() {
        let schema = schema_of(schemas, &inter.database_id)?;
        let mut prev: Vec<String> = Vec::new();
        for t in 0..inter.turns.len() {
            let context = inter.context(t);
            let r = match model.generate(&prev, &context, schema) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("interaction {i}, turn {t}: {e}; keeping the raw question");
                    inter.turns[t].question.clone()
                }
            };
            out.insert((i, t), r.clone());
            prev = r;
        }
    }
    Ok(out)
}

pub fn self_train(
    seeds: &[SeedAnnotation],
    data: &[Interaction],
    schemas: &HashMap<String, Schema>,
    parser: &Model,
    vocab: &Vocab,
    cfg: &SelfTrainConfig,
) -> Result<SelfTrainResult> {
    if seeds.is_empty() {
        return Err(Error::Invalid("self-training needs at least one seed annotation".into()));
    }
    if cfg.loop_cap == 0 || cfg.check_beam == 0 {
        return Err(Error::Config("loop cap and check beam must be positive".into()));
    }
    let mut accepted = seed_map(seeds, data)?;
    let mut generated: BTreeMap<(usize, usize), Vec<String>> = BTreeMap::new();
    let mut loops = Vec::new();
    let mut model = None;
    let mut hit_cap = false;

    for l in 1..=cfg.loop_cap {
        let before = accepted.len();
        let ex = examples(data, &accepted, &generated);
        let mut m = CqrModel::new(cfg.model.clone(), vocab.clone(), cfg.train.seed.wrapping_add(l as u64))?;
        let train_cfg = CqrTrainConfig {
            seed: cfg.train.seed.wrapping_add(l as u64),
            ..cfg.train.clone()
        };
        let history = cqr_train(&mut m, &ex, schemas, &train_cfg)?;
        generated = infer_all(&m, data, schemas)?;

        let (mut fresh, mut churn) = (0, 0);
        for (&(i, t), r) in &generated {
            let schema = schema_of(schemas, &data[i].database_id)?;
            let gold = &data[i].turns[t].gold;
            match accepted.get(&(i, t)) {
                Some(a) => {
                    if a.question != *r && check(parser, r, schema, gold, cfg.check_beam) {
                        churn += 1;
                    }
                }
                None => {
                    if check(parser, r, schema, gold, cfg.check_beam) {
                        accepted.insert(
                            (i, t),
                            Accepted {
                                question: r.clone(),
                                provenance: Provenance::Accepted(l),
                            },
                        );
                        fresh += 1;
                    }
                }
            }
        }
        let report = LoopReport {
            loop_index: l,
            accepted_before: before,
            accepted_after: accepted.len(),
            generated: generated.len(),
            newly_accepted: fresh,
            churn,
            final_token_accuracy: history.last().map_or(0.0, |h| h.token_accuracy),
        };
        log::info!(
            "self-train loop {l}: accepted {} -> {} ({} new, churn {})",
            before,
            accepted.len(),
            fresh,
            churn
        );
        loops.push(report);
        model = Some(m);
        if accepted.len() == before {
            break;
        }
        if l == cfg.loop_cap {
            hit_cap = true;
            log::warn!("self-training stopped at the loop cap ({l}) while the accepted set was still growing");
        }
    }

    let merged = merge(data, &accepted, &generated);
    Ok(SelfTrainResult {
        merged,
        accepted,
        loops,
        hit_cap,
        model: model.expect("loop cap is positive"),
    })
}

/// Every turn gets its accepted question if there is one, else the last
/// generated one.
pub fn merge(
    data: &[Interaction],
    accepted: &BTreeMap<(usize, usize), Accepted>,
    generated: &BTreeMap<(usize, usize), Vec<String>>,
) -> Vec<Interaction> {
    data.iter()
        .enumerate()
        .map(|(i, inter)| Interaction {
            database_id: inter.database_id.clone(),
            turns: inter
                .turns
                .iter()
                .enumerate()
                .map(|(t, turn)| {
                    let gen = generated.get(&(i, t)).cloned();
                    let (q, prov) = match accepted.get(&(i, t)) {
                        Some(a) => (a.question.clone(), a.provenance.clone()),
                        None => (
                            gen.clone().unwrap_or_else(|| turn.question.clone()),
                            Provenance::Generated,
                        ),
                    };
                    Turn {
                        self_contained: Some(q),
                        generated_self_contained: gen,
                        provenance: Some(prov),
                        ..turn.clone()
                    }
                })
                .collect(),
        })
        .collect()
}
