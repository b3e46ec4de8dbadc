mod common;

use std::path::Path;

use common::fixture;
use ctxsql_core::dataset::parse_interactions;
use ctxsql_core::eval::{classify_difficulty_of, evaluate, exact_match, predict_all, score, Difficulty, Prediction};
use serde::Deserialize;

#[derive(Deserialize)]
struct Pair {
    db: String,
    pred: String,
    gold: String,
    #[serde(rename = "match")]
    label: bool,
    why: String,
}

fn pairs() -> Vec<Pair> {
    serde_json::from_str(&std::fs::read_to_string(fixture("exact_match_pairs.json")).unwrap()).unwrap()
}

#[test]
fn hand_labeled_pairs_agree_with_exact_match() {
    let schemas = common::schemas();
    let pairs = pairs();
    assert_eq!(pairs.len(), 40);
    for p in &pairs {
        let got = exact_match(&p.pred, &p.gold, &schemas[&p.db]).unwrap();
        assert_eq!(got, p.label, "{}: {} vs {}", p.why, p.pred, p.gold);
    }
}

#[test]
fn question_and_interaction_scores_follow_the_labels() {
    let schemas = common::schemas();
    let pairs = pairs();
    // consecutive pairs on one database form interactions of up to four turns
    let mut groups: Vec<Vec<&Pair>> = Vec::new();
    for p in &pairs {
        match groups.last_mut() {
            Some(g) if g.len() < 4 && g[0].db == p.db => g.push(p),
            _ => groups.push(vec![p]),
        }
    }
    let raw: Vec<serde_json::Value> = groups
        .iter()
        .map(|g| {
            serde_json::json!({
                "database_id": g[0].db,
                "interaction": g.iter().map(|p| serde_json::json!({"utterance": p.why, "query": p.gold})).collect::<Vec<_>>(),
            })
        })
        .collect();
    let data = parse_interactions(&serde_json::to_string(&raw).unwrap(), &schemas, Path::new("pairs")).unwrap();
    let preds: Vec<Vec<Prediction>> = groups.iter().map(|g| g.iter().map(|p| Ok(p.pred.clone())).collect()).collect();
    let report = score(&data, &preds, &schemas).unwrap();

    let q_expect = pairs.iter().filter(|p| p.label).count();
    let i_expect = groups.iter().filter(|g| g.iter().all(|p| p.label)).count();
    assert_eq!(report.questions.correct, q_expect);
    assert_eq!(report.questions.count, 40);
    assert_eq!(report.interactions.correct, i_expect);
    assert_eq!(report.interactions.count, groups.len());
    assert_eq!(report.qm, q_expect as f64 / 40.0);
    assert_eq!(report.im, i_expect as f64 / groups.len() as f64);
    assert!(report.im <= report.qm);
    report.check().unwrap();
    let unparseable = report.results.iter().filter(|r| r.error.is_some()).count();
    assert_eq!(unparseable, 2);

    // gold injected as the prediction scores perfectly
    let gold: Vec<Vec<Prediction>> = data.iter().map(|i| i.turns.iter().map(|t| Ok(t.gold_sql.clone())).collect()).collect();
    let perfect = score(&data, &gold, &schemas).unwrap();
    assert_eq!((perfect.qm, perfect.im), (1.0, 1.0));
}

#[test]
fn one_wrong_turn_fails_the_interaction_only() {
    let schemas = common::schemas();
    let data = common::interactions(&schemas);
    let three = data.iter().position(|i| i.turns.len() == 3).unwrap();
    let mut preds: Vec<Vec<Prediction>> =
        data.iter().map(|i| i.turns.iter().map(|t| Ok(t.gold_sql.clone())).collect()).collect();
    preds[three][1] = Err("decoder failed".into());
    let r = score(&data, &preds, &schemas).unwrap();
    assert_eq!(r.questions.correct, r.questions.count - 1);
    assert_eq!(r.interactions.correct, r.interactions.count - 1);
    assert_eq!(r.by_turn["2"].correct, r.by_turn["2"].count - 1);
}

#[test]
fn evaluation_ignores_self_contained_questions() {
    let (model, schemas, data) = common::desk_model(31);
    let base = evaluate(&model, &data, &schemas, 1).unwrap();
    let mut tampered = data.clone();
    for inter in &mut tampered {
        for t in &mut inter.turns {
            t.self_contained = Some(vec!["tampered".into(); 3]);
            t.generated_self_contained = Some(vec!["junk".into()]);
        }
    }
    let again = evaluate(&model, &tampered, &schemas, 1).unwrap();
    assert_eq!(serde_json::to_string(&base).unwrap(), serde_json::to_string(&again).unwrap());
    assert_eq!(predict_all(&model, &data, &schemas, 2).unwrap(), predict_all(&model, &data, &schemas, 2).unwrap());
}

#[test]
fn difficulty_examples() {
    let schemas = common::schemas();
    let s = &schemas["concert_singer"];
    let d = |q: &str| classify_difficulty_of(q, s).unwrap();
    assert_eq!(d("SELECT name FROM singer"), Difficulty::Easy);
    assert_eq!(d("SELECT name FROM singer WHERE age > 30"), Difficulty::Easy);
    assert_eq!(d("SELECT name, age FROM singer WHERE age > 30"), Difficulty::Medium);
    assert_eq!(
        d("SELECT name FROM stadium WHERE stadium_id IN (SELECT stadium_id FROM concert)"),
        Difficulty::Extra
    );
    assert_eq!(
        d("SELECT country FROM singer WHERE age > 40 INTERSECT SELECT country FROM singer WHERE age < 30"),
        Difficulty::Extra
    );
    assert_eq!(
        d("SELECT name FROM singer WHERE age > 30"),
        d("SELECT name FROM singer WHERE age > 99")
    );
}
