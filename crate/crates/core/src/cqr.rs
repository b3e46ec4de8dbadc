//! Recursive question reformulation: a transformer encoder over
//! `prev [SEP] q1 [SEP] ... q_t [SEP] schema` and a two-layer LSTM decoder
//! with dot attention and input feeding.

use std::path::Path;
use std::sync::Arc;

use ctxsql_autograd::{Adam, Gradients, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::encoder::{self, EncoderConfig, WORD_EMB};
use crate::error::{Error, Result};
use crate::linearize::{Relation, RelationGraph};
use crate::schema::Schema;
use crate::vocab::{Vocab, BOS, EOS, SEP};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CqrConfig {
    pub encoder: EncoderConfig,
    /// Decoder LSTM width.
    pub hidden: usize,
    pub max_input: usize,
    pub max_target: usize,
    pub beam: usize,
}

impl Default for CqrConfig {
    fn default() -> Self {
        CqrConfig {
            encoder: EncoderConfig {
                layers: 2,
                heads: 8,
                d_h: 256,
                d_k: 32,
                ffn: 1024,
                dropout: 0.1,
            },
            hidden: 256,
            max_input: 256,
            max_target: 40,
            beam: 5,
        }
    }
}

impl CqrConfig {
    pub fn desk() -> Self {
        CqrConfig {
            encoder: EncoderConfig {
                layers: 2,
                heads: 4,
                d_h: 32,
                d_k: 8,
                ffn: 64,
                dropout: 0.1,
            },
            hidden: 32,
            max_input: 256,
            max_target: 40,
            beam: 3,
        }
    }
}

/// One training pair. `prev` is the labeled previous reformulation (empty on
/// the first turn); `sampled_prev` is an alternative produced by an earlier model.
#[derive(Clone, Debug, PartialEq)]
pub struct CqrExample {
    pub interaction: usize,
    pub turn: usize,
    pub database_id: String,
    pub context: Vec<Vec<String>>,
    pub prev: Vec<String>,
    pub sampled_prev: Option<Vec<String>>,
    pub target: Vec<String>,
}

/// `prev [SEP] q1 [SEP] ... q_t [SEP] t1 c11 c12 [SEP] t2 ...`, one word per token.
pub fn cqr_input(prev: &[String], context: &[&[String]], schema: &Schema) -> Vec<String> {
    let mut out: Vec<String> = prev.to_vec();
    for q in context {
        out.push(SEP.to_string());
        out.extend(q.iter().cloned());
    }
    for t in &schema.tables {
        out.push(SEP.to_string());
        out.extend(t.words.iter().cloned());
        for &c in &t.columns {
            out.extend(schema.columns[c].words.iter().cloned());
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SavedConfig {
    cqr: CqrConfig,
    vocab: Vocab,
}

#[derive(Clone, Debug)]
pub struct CqrModel {
    pub config: CqrConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
}

const POS_EMB: &str = "cqr.pos_emb";

fn dec(what: &str) -> String {
    format!("cqr.dec.{what}")
}

/// Decoder recurrent state between steps.
#[derive(Clone, Debug)]
struct DecState {
    c: [Var; 2],
    h: [Var; 2],
    feed: Var,
}

/// Encoder memory and its attention keys.
struct Memory {
    h: Var,
    keys: Var,
}

#[derive(Clone, Debug)]
struct Beam {
    ids: Vec<usize>,
    log_prob: f64,
    state: DecState,
}

impl CqrModel {
    pub fn new(config: CqrConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new(seed);
        Self::init(&mut params, &config, vocab.len())?;
        Ok(CqrModel { config, vocab, params })
    }

    fn init(store: &mut ParamStore, cfg: &CqrConfig, v: usize) -> Result<()> {
        if cfg.hidden == 0 || cfg.max_input == 0 || cfg.max_target == 0 || cfg.beam == 0 {
            return Err(Error::Config("CQR widths, length caps and beam must be positive".into()));
        }
        encoder::init_params(store, &cfg.encoder, v)?;
        let (d, hd) = (cfg.encoder.d_h, cfg.hidden);
        store.init_uniform_bound(POS_EMB, &[cfg.max_input, d], 0.1)?;
        store.init_uniform(&dec("init"), &[d, hd])?;
        store.init_uniform(&dec("wi0"), &[d + hd, 4 * hd])?;
        store.init_uniform(&dec("wh0"), &[hd, 4 * hd])?;
        store.init_constant(&dec("b0"), &[1, 4 * hd], 0.0)?;
        store.init_uniform(&dec("wi1"), &[hd, 4 * hd])?;
        store.init_uniform(&dec("wh1"), &[hd, 4 * hd])?;
        store.init_constant(&dec("b1"), &[1, 4 * hd], 0.0)?;
        store.init_uniform(&dec("att"), &[d, hd])?;
        store.init_uniform(&dec("comb"), &[hd + d, hd])?;
        store.init_uniform(&dec("out_w"), &[hd, v])?;
        store.init_constant(&dec("out_b"), &[1, v], 0.0)?;
        Ok(())
    }

    fn encode(&self, g: &mut Graph, input: &[String]) -> Result<Memory> {
        let cfg = &self.config;
        let n = input.len();
        if n == 0 {
            return Err(Error::Invalid("empty reformulation input".into()));
        }
        if n > cfg.max_input {
            return Err(Error::Invalid(format!(
                "reformulation input has {n} tokens, cap is {}",
                cfg.max_input
            )));
        }
        let ids: Vec<usize> = input.iter().map(|w| self.vocab.id(w)).collect();
        let emb = g.param(&self.params, WORD_EMB)?;
        let words = g.select_rows(emb, &ids)?;
        let pos = g.param(&self.params, POS_EMB)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.select_rows(pos, &positions)?;
        let mut h = g.add(words, pos)?;
        h = g.dropout(h, cfg.encoder.dropout)?;
        let rel = RelationGraph::uniform(n, Relation::Default.id());
        for l in 0..cfg.encoder.layers {
            h = encoder::rat_layer(g, &self.params, &cfg.encoder, l, h, &rel)?;
        }
        let wa = g.param(&self.params, &dec("att"))?;
        let keys = g.matmul(h, wa)?;
        Ok(Memory { h, keys })
    }

    fn init_state(&self, g: &mut Graph, mem: &Memory) -> Result<DecState> {
        let n = g.shape(mem.h)[0];
        let mean = g.gather_mean(mem.h, Arc::new(vec![(0..n).collect()]))?;
        let w = g.param(&self.params, &dec("init"))?;
        let h0 = g.matmul(mean, w)?;
        let h0 = g.tanh(h0)?;
        let zero = g.constant(Tensor::zeros(&[1, self.config.hidden]));
        Ok(DecState {
            c: [zero, zero],
            h: [h0, h0],
            feed: zero,
        })
    }

    /// Feeds `token` and returns next-token log-probabilities `[1, V]`.
    fn step(&self, g: &mut Graph, mem: &Memory, state: &DecState, token: usize) -> Result<(Var, DecState)> {
        let p = |g: &mut Graph, w: &str| g.param(&self.params, &dec(w));
        let emb = g.param(&self.params, WORD_EMB)?;
        let x = g.select_rows(emb, &[token])?;
        let x = g.concat_cols(&[x, state.feed])?;
        let (wi0, wh0, b0) = (p(g, "wi0")?, p(g, "wh0")?, p(g, "b0")?);
        let (c0, h0) = g.lstm_cell(x, state.c[0], state.h[0], wi0, wh0, b0)?;
        let x1 = g.dropout(h0, self.config.encoder.dropout)?;
        let (wi1, wh1, b1) = (p(g, "wi1")?, p(g, "wh1")?, p(g, "b1")?);
        let (c1, h1) = g.lstm_cell(x1, state.c[1], state.h[1], wi1, wh1, b1)?;
        let scores = g.matmul_t(h1, mem.keys)?;
        let alpha = g.softmax(scores)?;
        let ctx = g.matmul(alpha, mem.h)?;
        let cat = g.concat_cols(&[h1, ctx])?;
        let comb = p(g, "comb")?;
        let feed = g.matmul(cat, comb)?;
        let feed = g.tanh(feed)?;
        let out = g.dropout(feed, self.config.encoder.dropout)?;
        let (ow, ob) = (p(g, "out_w")?, p(g, "out_b")?);
        let logits = g.matmul(out, ow)?;
        let logits = g.add_row(logits, ob)?;
        let lp = g.log_softmax(logits)?;
        Ok((
            lp,
            DecState {
                c: [c0, c1],
                h: [h0, h1],
                feed,
            },
        ))
    }

    /// Summed token negative log-likelihood of `target` followed by the end
    /// symbol, plus the number of argmax hits.
    pub fn target_nll(&self, g: &mut Graph, input: &[String], target: &[String]) -> Result<(Var, usize, usize)> {
        if target.is_empty() {
            return Err(Error::Invalid("empty reformulation target".into()));
        }
        if target.len() > self.config.max_target {
            return Err(Error::Invalid(format!(
                "target has {} tokens, cap is {}",
                target.len(),
                self.config.max_target
            )));
        }
        let mem = self.encode(g, input)?;
        let mut state = self.init_state(g, &mem)?;
        let mut prev = self.vocab.id(BOS);
        let gold: Vec<usize> = target
            .iter()
            .map(|w| self.vocab.id(w))
            .chain([self.vocab.id(EOS)])
            .collect();
        let mut terms = Vec::with_capacity(gold.len());
        let mut hits = 0;
        for &y in &gold {
            let (lp, next) = self.step(g, &mem, &state, prev)?;
            if argmax(g.value(lp).row_slice(0)) == y {
                hits += 1;
            }
            let t = g.pick(lp, 0, y)?;
            terms.push(g.scale(t, -1.0)?);
            state = next;
            prev = y;
        }
        Ok((g.add_all(&terms)?, hits, gold.len()))
    }

    /// Beam-decodes a reformulation. Ties break toward lower token ids.
    pub fn generate(&self, prev: &[String], context: &[&[String]], schema: &Schema) -> Result<Vec<String>> {
        let input = cqr_input(prev, context, schema);
        let mut g = Graph::new();
        let mem = self.encode(&mut g, &input)?;
        let start = self.init_state(&mut g, &mem)?;
        let eos = self.vocab.id(EOS);
        let banned = [self.vocab.id(BOS), self.vocab.id(crate::vocab::PAD)];
        let mut live = vec![Beam {
            ids: Vec::new(),
            log_prob: 0.0,
            state: start,
        }];
        let mut done: Vec<(Vec<usize>, f64)> = Vec::new();
        let beam = self.config.beam;
        for _ in 0..=self.config.max_target {
            let mut cand: Vec<(f64, usize, usize, DecState)> = Vec::new();
            for (b, hyp) in live.iter().enumerate() {
                let prev = hyp.ids.last().copied().unwrap_or(self.vocab.id(BOS));
                let (lp, next) = self.step(&mut g, &mem, &hyp.state, prev)?;
                let row = g.value(lp).row_slice(0).to_vec();
                let mut order: Vec<usize> = (0..row.len()).filter(|i| !banned.contains(i)).collect();
                order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                for &tok in order.iter().take(beam) {
                    cand.push((hyp.log_prob + row[tok], b, tok, next.clone()));
                }
            }
            cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next_live = Vec::new();
            for (lp, b, tok, state) in cand.into_iter().take(beam) {
                let mut ids = live[b].ids.clone();
                if tok == eos {
                    if !ids.is_empty() {
                        done.push((ids, lp));
                    }
                    continue;
                }
                ids.push(tok);
                if ids.len() <= self.config.max_target {
                    next_live.push(Beam { ids, log_prob: lp, state });
                }
            }
            done.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            done.truncate(beam);
            if done.len() == beam {
                let kth = done[beam - 1].1;
                next_live.retain(|h| h.log_prob >= kth);
            }
            live = next_live;
            if live.is_empty() {
                break;
            }
        }
        let best = done.into_iter().next().ok_or(Error::DecodeBudget(self.config.max_target))?;
        Ok(best.0.iter().map(|&i| self.vocab.word(i).to_string()).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let cfg = serde_json::to_value(SavedConfig {
            cqr: self.config.clone(),
            vocab: self.vocab.clone(),
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        checkpoint::save_checkpoint(path, &self.params, &cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (params, cfg) = checkpoint::load_checkpoint(path)?;
        let saved: SavedConfig =
            serde_json::from_value(cfg).map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
        let mut expected = ParamStore::new(0);
        Self::init(&mut expected, &saved.cqr, saved.vocab.len())?;
        for (name, p) in expected.iter() {
            match params.param(name) {
                Some(got) if got.value.shape() == p.value.shape() => {}
                Some(_) => return Err(Error::Checkpoint(format!("parameter `{name}` has the wrong shape"))),
                None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
            }
        }
        Ok(CqrModel {
            config: saved.cqr,
            vocab: saved.vocab,
            params,
        })
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CqrTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Chance of feeding an earlier model's reformulation as the previous turn.
    pub p_sample: f64,
    pub dropout: bool,
    pub seed: u64,
    pub clip_norm: Option<f64>,
}

impl Default for CqrTrainConfig {
    fn default() -> Self {
        CqrTrainConfig {
            lr: 3e-3,
            batch_size: 4,
            epochs: 160,
            p_sample: 0.5,
            dropout: false,
            seed: 0,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CqrEpoch {
    pub epoch: usize,
    pub nll: f64,
    pub token_accuracy: f64,
}

/// Teacher-forced cross-entropy training in place.
pub fn cqr_train(
    model: &mut CqrModel,
    examples: &[CqrExample],
    schemas: &std::collections::HashMap<String, Schema>,
    cfg: &CqrTrainConfig,
) -> Result<Vec<CqrEpoch>> {
    if examples.is_empty() {
        return Err(Error::Training("no reformulation examples".into()));
    }
    if cfg.batch_size == 0 || !(0.0..=1.0).contains(&cfg.p_sample) || !cfg.lr.is_finite() {
        return Err(Error::Config("bad reformulation training config".into()));
    }
    for ex in examples {
        if ex.target.len() > model.config.max_target {
            return Err(Error::Training(format!(
                "interaction {}, turn {}: target longer than {} tokens",
                ex.interaction, ex.turn, model.config.max_target
            )));
        }
    }
    let mut adam = Adam::new(cfg.lr);
    adam.clip_norm = cfg.clip_norm;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut nll, mut hits, mut total) = (0.0, 0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::default();
            for &i in batch {
                let ex = &examples[i];
                let schema = schemas.get(&ex.database_id).ok_or_else(|| Error::Unknown {
                    kind: "database",
                    name: ex.database_id.clone(),
                })?;
                let prev = match &ex.sampled_prev {
                    Some(s) if rng.gen::<f64>() < cfg.p_sample => s,
                    _ => &ex.prev,
                };
                let context: Vec<&[String]> = ex.context.iter().map(|q| q.as_slice()).collect();
                let input = cqr_input(prev, &context, schema);
                let mut g = if cfg.dropout {
                    Graph::training(rng.gen())
                } else {
                    Graph::new()
                };
                let (loss, h, n) = model.target_nll(&mut g, &input, &ex.target)?;
                nll += g.scalar(loss);
                hits += h;
                total += n;
                grads.accumulate(&g.backward(loss)?);
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut model.params, &grads)?;
        }
        let m = CqrEpoch {
            epoch,
            nll: nll / examples.len() as f64,
            token_accuracy: hits as f64 / total.max(1) as f64,
        };
        log::info!("cqr epoch {epoch}: nll {:.4} token acc {:.4}", m.nll, m.token_accuracy);
        history.push(m);
    }
    Ok(history)
}

/// Teacher-forced token accuracy with labeled previous reformulations.
pub fn token_accuracy(
    model: &CqrModel,
    examples: &[CqrExample],
    schemas: &std::collections::HashMap<String, Schema>,
) -> Result<f64> {
    let (mut hits, mut total) = (0, 0);
    for ex in examples {
        let schema = schemas.get(&ex.database_id).ok_or_else(|| Error::Unknown {
            kind: "database",
            name: ex.database_id.clone(),
        })?;
        let context: Vec<&[String]> = ex.context.iter().map(|q| q.as_slice()).collect();
        let mut g = Graph::new();
        let (_, h, n) = model.target_nll(&mut g, &cqr_input(&ex.prev, &context, schema), &ex.target)?;
        hits += h;
        total += n;
    }
    Ok(hits as f64 / total.max(1) as f64)
}
