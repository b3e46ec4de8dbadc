#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ctxsql_core::dataset::{load_interactions, Interaction};
use ctxsql_core::grammar::Grammar;
use ctxsql_core::model::{Model, ModelConfig};
use ctxsql_core::schema::{index_schemas, load_schemas, Schema};
use ctxsql_core::vocab::Vocab;
use std::sync::Arc;

use ctxsql_autograd::{Graph, ParamStore, Tensor, LAYER_NORM_EPS};
use ctxsql_core::decoder::DecoderConfig;
use ctxsql_core::encoder::{init_params, rat_layer, EncoderConfig};
use ctxsql_core::grammar::{Action, ActionSpace, AstState, Symbol, TerminalKind};
use ctxsql_core::linearize::{RelationGraph, NUM_RELATIONS};
use ctxsql_core::losses::trace_nll;
use ctxsql_core::schema::load_schema;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn schemas() -> HashMap<String, Schema> {
    index_schemas(load_schemas(fixture("schemas.json")).unwrap())
}

pub fn interactions(schemas: &HashMap<String, Schema>) -> Vec<Interaction> {
    load_interactions(fixture("interactions.json"), schemas).unwrap()
}

/// Desk-preset model over the bundled fixture vocabulary.
pub fn desk_model(seed: u64) -> (Model, HashMap<String, Schema>, Vec<Interaction>) {
    let s = schemas();
    let data = interactions(&s);
    let vocab = Vocab::build(&data, s.values());
    let model = Model::new(ModelConfig::desk(vocab, &Grammar::sql()), seed).unwrap();
    (model, s, data)
}

/// Row-major matrix helpers for hand-written oracles.
pub type M = Vec<Vec<f64>>;

pub fn mat(t: &ctxsql_autograd::Tensor) -> M {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

pub fn mm(a: &M, b: &M) -> M {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

pub fn softmax_row(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn max_diff(a: &M, b: &M) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

// Relation-aware layer oracle.

pub fn cfg() -> EncoderConfig {
    EncoderConfig {
        layers: 1,
        heads: 2,
        d_h: 6,
        d_k: 3,
        ffn: 5,
        dropout: 0.1,
    }
}

pub fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_relations(rng: &mut ChaCha8Rng, n: usize) -> RelationGraph {
    RelationGraph {
        n,
        labels: Arc::new((0..n * n).map(|_| rng.gen_range(0..NUM_RELATIONS)).collect()),
    }
}

pub fn store(seed: u64, c: &EncoderConfig, zero_relations: bool) -> ParamStore {
    let mut s = ParamStore::new(seed);
    init_params(&mut s, c, 4).unwrap();
    // non-trivial layer-norm affine terms
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for name in ["enc.l0.ln1_g", "enc.l0.ln1_b", "enc.l0.ln2_g", "enc.l0.ln2_b", "enc.l0.ff1_b", "enc.l0.ff2_b"] {
        let shape = s.get(name).unwrap().shape().to_vec();
        s.set(name, random(&mut rng, shape[0], shape[1])).unwrap();
    }
    if zero_relations {
        s.set("enc.l0.rel_k", Tensor::zeros(&[NUM_RELATIONS, c.d_k])).unwrap();
        s.set("enc.l0.rel_v", Tensor::zeros(&[NUM_RELATIONS, c.d_k])).unwrap();
    }
    s
}

pub fn layer_norm(x: &M, g: &[f64], b: &[f64]) -> M {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mean) * inv * g[j] + b[j]).collect()
        })
        .collect()
}

pub fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn add_bias(a: &M, b: &[f64]) -> M {
    a.iter().map(|x| x.iter().zip(b).map(|(p, q)| p + q).collect()).collect()
}

/// Straight-line evaluation of one block, optionally with relation terms.
pub fn oracle(s: &ParamStore, c: &EncoderConfig, h: &M, rel: Option<&RelationGraph>) -> M {
    let p = |n: &str| mat(s.get(&format!("enc.l0.{n}")).unwrap());
    let row = |n: &str| s.get(&format!("enc.l0.{n}")).unwrap().data().to_vec();
    let (q, k, v) = (mm(h, &p("wq")), mm(h, &p("wk")), mm(h, &p("wv")));
    let (rk, rv) = (p("rel_k"), p("rel_v"));
    let n = h.len();
    let mut out = vec![vec![0.0; c.d_h]; n];
    for head in 0..c.heads {
        let o = head * c.d_k;
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    (0..c.d_k)
                        .map(|t| {
                            let r = rel.map_or(0.0, |g| rk[g.get(i, j)][t]);
                            q[i][o + t] * (k[j][o + t] + r)
                        })
                        .sum::<f64>()
                        / (c.d_k as f64).sqrt()
                })
                .collect();
            let e = softmax_row(&scores);
            for t in 0..c.d_k {
                out[i][o + t] = (0..n)
                    .map(|j| e[j] * (v[j][o + t] + rel.map_or(0.0, |g| rv[g.get(i, j)][t])))
                    .sum();
            }
        }
    }
    let a = layer_norm(&add(h, &out), &row("ln1_g"), &row("ln1_b"));
    let f = add_bias(&mm(&a, &p("ff1_w")), &row("ff1_b"));
    let f: M = f.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
    let f = add_bias(&mm(&f, &p("ff2_w")), &row("ff2_b"));
    layer_norm(&add(&a, &f), &row("ln2_g"), &row("ln2_b"))
}

pub fn run(s: &ParamStore, c: &EncoderConfig, h: &Tensor, rel: &RelationGraph) -> M {
    let mut g = Graph::new();
    let x = g.constant(h.clone());
    let y = rat_layer(&mut g, s, c, 0, x, rel).unwrap();
    mat(g.value(y))
}


// Pruned grammar with a small, enumerable language.

pub const KEEP: [&str; 18] = [
    "Single",
    "Query",
    "Select",
    "SelectDistinct",
    "ItemsEnd",
    "Plain",
    "Agg",
    "Count",
    "Star",
    "ColumnRef",
    "TablesEnd",
    "NoWhere",
    "NoGroup",
    "NoOrder",
    "OrderBy",
    "Asc",
    "Desc",
    "NoLimit",
];

pub fn pruned() -> Grammar {
    let small = Grammar::sql()
        .prune(|r| KEEP.contains(&r.name.as_str()))
        .unwrap();
    assert!(small.num_rules() < Grammar::sql().num_rules());
    small
}

pub fn tiny_model(grammar: &Grammar, seed: u64) -> Model {
    let vocab = Vocab::new(["how", "many", "singers", "name", "age", "singer", "oldest"]);
    let cfg = ModelConfig::new(
        EncoderConfig {
            layers: 1,
            heads: 2,
            d_h: 8,
            d_k: 4,
            ffn: 8,
            dropout: 0.1,
        },
        DecoderConfig {
            hidden: 8,
            action_dim: 6,
            node_dim: 4,
            att_heads: 2,
            mlp_hidden: 8,
            dropout: 0.2,
            max_steps: 40,
        },
        vocab,
        grammar,
    );
    Model::new(cfg, seed).unwrap()
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

pub fn tiny() -> Schema {
    load_schema(fixture("tiny.json")).unwrap()
}

/// Every complete action sequence the grammar admits over the schema.
pub fn enumerate(grammar: &Arc<Grammar>, schema: &Schema) -> Vec<Vec<Action>> {
    fn go(state: AstState, out: &mut Vec<Vec<Action>>) {
        if state.is_complete() {
            out.push(state.actions().to_vec());
            return;
        }
        let mask = state.valid_actions().unwrap();
        for a in mask.actions() {
            let mut next = state.clone();
            next.apply(a).unwrap();
            go(next, out);
        }
    }
    let mut out = Vec::new();
    go(AstState::new(grammar.clone(), schema), &mut out);
    out
}

pub fn sequence_log_prob(model: &Model, question: &[String], schema: &Schema, actions: &[Action]) -> f64 {
    let mut g = Graph::new();
    let enc = model.encode(&mut g, &[question], schema).unwrap();
    let trace = model.decoder().teacher_forced_trace(&mut g, &enc, actions).unwrap();
    let nll = trace_nll(&mut g, &trace).unwrap();
    -g.scalar(nll)
}


/// Applicable actions derived from a hand-maintained derivation stack rather
/// than the state's own bookkeeping.
pub fn oracle_mask(grammar: &Grammar, schema: &Schema, pending: &[Symbol]) -> Vec<Action> {
    let space = ActionSpace::new(grammar, schema);
    let Some(&top) = pending.last() else { return Vec::new() };
    space
        .all()
        .filter(|a| match (top, a) {
            (Symbol::NonTerminal(n), Action::ApplyRule(r)) => grammar.rule(*r).lhs == n,
            (Symbol::Terminal(TerminalKind::Column), Action::SelectColumn(c)) => *c < schema.columns.len(),
            (Symbol::Terminal(TerminalKind::Table), Action::SelectTable(t)) => *t < schema.tables.len(),
            (Symbol::Terminal(TerminalKind::Value), Action::SelectValue(_)) => true,
            _ => false,
        })
        .collect()
}

/// Random partial derivations; returns the number of masks compared and the
/// number of trees where `valid_actions` and the stack oracle disagree.
pub fn mask_disagreements(trees: usize, seed: u64) -> (usize, usize) {
    let s = schemas();
    let grammar = Arc::new(Grammar::sql());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dbs: Vec<&Schema> = {
        let mut v: Vec<&Schema> = s.values().collect();
        v.sort_by(|a, b| a.db_id.cmp(&b.db_id));
        v
    };
    let (mut bad, mut compared) = (0, 0);
    for _ in 0..trees {
        let schema = dbs[rng.gen_range(0..dbs.len())];
        let mut state = AstState::new(grammar.clone(), schema);
        let mut pending = vec![Symbol::NonTerminal(grammar.root())];
        let steps = rng.gen_range(0..80);
        for _ in 0..steps {
            if state.is_complete() {
                break;
            }
            let mask = state.valid_actions().unwrap();
            let mut got = mask.actions();
            got.sort();
            let mut want = oracle_mask(&grammar, schema, &pending);
            want.sort();
            compared += 1;
            if got != want {
                bad += 1;
                break;
            }
            // prefer leaf-ward rules as the tree deepens so walks stay finite
            let a = if pending.len() > 12 {
                got[0]
            } else {
                got[rng.gen_range(0..got.len())]
            };
            let top = pending.pop().unwrap();
            if let (Symbol::NonTerminal(_), Action::ApplyRule(r)) = (top, a) {
                pending.extend(grammar.rule(r).children.iter().rev().copied());
            }
            state.apply(a).unwrap();
        }
        if state.is_complete() != pending.is_empty() {
            bad += 1;
        }
    }
    (compared, bad)
}
