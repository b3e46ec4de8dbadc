use std::path::{Path, PathBuf};

use ctxsql_core::dataset::{load_interactions, load_seed_annotations, tokenize};
use ctxsql_core::grammar::{actions_to_sql, sql_to_actions, Grammar};
use ctxsql_core::linearize::{build_relations, linearize, Relation};
use ctxsql_core::schema::{index_schemas, load_schema, load_schemas};
use ctxsql_core::sql::normalize;
use std::sync::Arc;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

#[test]
fn concert_singer_has_four_tables() {
    let s = load_schema(fixture("concert_singer.json")).unwrap();
    assert_eq!(s.tables.len(), 4);
    assert_eq!(s.columns.len(), 16);
    assert_eq!(s.foreign_keys.len(), 3);
}

#[test]
fn bundled_interactions_load() {
    let schemas = index_schemas(load_schemas(fixture("schemas.json")).unwrap());
    let data = load_interactions(fixture("interactions.json"), &schemas).unwrap();
    assert_eq!(data.len(), 20);
    assert_eq!(data.iter().map(|i| i.turns.len()).sum::<usize>(), 60);
    let dbs: std::collections::BTreeSet<_> = data.iter().map(|i| i.database_id.as_str()).collect();
    assert_eq!(dbs.len(), 2);
    assert!(data.iter().all(|i| (1..=4).contains(&i.turns.len())));
    let seeds = load_seed_annotations(fixture("seed_annotations.json")).unwrap();
    assert_eq!(seeds.len(), 10);
    for s in &seeds {
        assert_eq!(data[s.interaction_index].database_id, s.database_id);
        assert!(s.turn_index < data[s.interaction_index].turns.len());
    }
}

#[test]
fn missing_table_error_names_the_turn() {
    let schemas = index_schemas(load_schemas(fixture("schemas.json")).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        r#"[{"database_id": "pets_1", "interaction": [
            {"utterance": "count pets", "query": "SELECT count(*) FROM pets"},
            {"utterance": "and owners", "query": "SELECT count(*) FROM owners"}]}]"#,
    )
    .unwrap();
    let msg = load_interactions(&path, &schemas).unwrap_err().to_string();
    assert!(msg.contains("record 0, turn 1") && msg.contains("owners"), "{msg}");
}

#[test]
fn every_corpus_query_round_trips() {
    let schemas = index_schemas(load_schemas(fixture("schemas.json")).unwrap());
    let grammar = Arc::new(Grammar::sql());
    let corpus = std::fs::read_to_string(fixture("roundtrip.tsv")).unwrap();
    let mut n = 0;
    for line in corpus.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let (db, sql) = line.split_once('\t').unwrap();
        let schema = &schemas[db];
        let actions = sql_to_actions(sql, schema, &grammar).unwrap_or_else(|e| panic!("{sql}: {e}"));
        let back = actions_to_sql(&actions, schema, &grammar).unwrap();
        assert_eq!(normalize(&back, schema).unwrap(), normalize(sql, schema).unwrap(), "{sql}");
        n += 1;
    }
    assert!(n >= 50);
}

#[test]
fn latent_row_is_no_match_against_the_real_schema() {
    let schemas = index_schemas(load_schemas(fixture("schemas.json")).unwrap());
    let s = &schemas["concert_singer"];
    let (a, b) = (tokenize("Show all singers."), tokenize("Which are from France?"));
    let input = linearize(&[&a, &b], s).unwrap();
    let g = build_relations(&input, s);
    assert_eq!(g.n, input.len());
    for (_, j) in input.schema_positions() {
        assert_eq!(g.get(0, j), Relation::NoMatch.id());
    }
    assert_eq!(input.schema_positions().len(), s.tables.len() + s.columns.len());
}
