//! Grammar-constrained tree LSTM decoder: teacher-forced traces and beam search.

use std::cmp::Ordering;
use std::sync::Arc;

use ctxsql_autograd::{Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::grammar::{Action, ActionMask, ActionSpace, AstState, Grammar};
use crate::schema::Schema;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub action_dim: usize,
    pub node_dim: usize,
    pub att_heads: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub max_steps: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            hidden: 256,
            action_dim: 128,
            node_dim: 64,
            att_heads: 8,
            mlp_hidden: 256,
            dropout: 0.2,
            max_steps: 120,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, d_h: usize) -> Result<()> {
        if self.att_heads == 0 || !d_h.is_multiple_of(self.att_heads) {
            return Err(Error::Config(format!(
                "decoder attention heads ({}) must divide d_h ({d_h})",
                self.att_heads
            )));
        }
        if [self.hidden, self.action_dim, self.node_dim, self.mlp_hidden, self.max_steps].contains(&0) {
            return Err(Error::Config("decoder widths and max_steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("decoder dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

const HEADS: [&str; 3] = ["rule", "table", "col"];

pub fn init_params(store: &mut ParamStore, cfg: &DecoderConfig, d_h: usize, grammar: &Grammar) -> Result<()> {
    cfg.validate(d_h)?;
    let (a, hd, m) = (cfg.action_dim, cfg.hidden, cfg.mlp_hidden);
    store.init_uniform_bound("dec.rule_emb", &[grammar.num_rules(), a], 0.5)?;
    store.init_uniform("dec.table_act", &[d_h, a])?;
    store.init_uniform("dec.col_act", &[d_h, a])?;
    store.init_uniform_bound("dec.value_emb", &[1, a], 0.5)?;
    store.init_uniform_bound("dec.node_emb", &[grammar.num_symbols(), cfg.node_dim], 0.5)?;
    store.init_uniform_bound("dec.a0", &[1, a], 0.5)?;
    store.init_uniform_bound("dec.hp0", &[1, hd], 0.5)?;
    store.init_uniform_bound("dec.ap0", &[1, a], 0.5)?;
    store.init_uniform("dec.lstm_wi", &[2 * a + hd + cfg.node_dim, 4 * hd])?;
    store.init_uniform("dec.lstm_wh", &[hd, 4 * hd])?;
    store.init_constant("dec.lstm_b", &[1, 4 * hd], 0.0)?;
    store.init_uniform_bound("dec.init_query", &[1, d_h], 0.5)?;
    store.init_uniform("dec.w1", &[d_h, d_h])?;
    store.init_uniform("dec.w2", &[d_h, hd])?;
    store.init_uniform("dec.att_wq", &[hd, d_h])?;
    store.init_uniform("dec.att_wk", &[d_h, d_h])?;
    store.init_uniform("dec.att_wv", &[d_h, d_h])?;
    store.init_uniform("dec.att_wo", &[d_h, d_h])?;
    for head in HEADS {
        store.init_uniform(&format!("dec.{head}_mlp1_w"), &[hd + d_h, m])?;
        store.init_constant(&format!("dec.{head}_mlp1_b"), &[1, m], 0.0)?;
        store.init_uniform(&format!("dec.{head}_mlp2_w"), &[m, m])?;
        store.init_constant(&format!("dec.{head}_mlp2_b"), &[1, m], 0.0)?;
    }
    store.init_uniform("dec.w_rule", &[m, grammar.num_rules()])?;
    store.init_uniform("dec.w_table", &[m, d_h])?;
    store.init_uniform("dec.w_col", &[m, d_h])?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    Rule,
    Table,
    Column,
    /// The literal placeholder; forced, no distribution.
    Value,
}

/// Distribution of the active head at one step, restricted to legal actions.
#[derive(Clone, Debug)]
pub struct StepDist {
    pub head: Head,
    pub actions: Vec<Action>,
    /// `[1, actions.len()]` log-probabilities; `None` for forced steps.
    pub log_probs: Option<Var>,
}

/// Per-encoding quantities shared by every decoding step.
#[derive(Clone, Debug)]
pub struct DecoderContext {
    h: Var,
    tables: Var,
    columns: Var,
    keys: Vec<Var>,
    values: Vec<Var>,
    table_proj: Var,
    col_proj: Var,
    n_tables: usize,
    n_columns: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderState {
    pub c: Var,
    pub h: Var,
    /// LSTM output at each step.
    pub hist_h: Vec<Var>,
    /// Embedding of the action taken at each step.
    pub hist_a: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub actions: Vec<Action>,
    pub ids: Vec<usize>,
    pub log_prob: f64,
}

/// Borrowed view of the decoder parameters.
pub struct Decoder<'a> {
    pub cfg: &'a DecoderConfig,
    pub d_h: usize,
    pub grammar: &'a Arc<Grammar>,
    pub store: &'a ParamStore,
}

impl<'a> Decoder<'a> {
    fn p(&self, g: &mut Graph, name: &str) -> Result<Var> {
        Ok(g.param(self.store, name)?)
    }

    pub fn context(&self, g: &mut Graph, enc: &EncoderOutput) -> Result<DecoderContext> {
        let dk = self.d_h / self.cfg.att_heads;
        let wk = self.p(g, "dec.att_wk")?;
        let wv = self.p(g, "dec.att_wv")?;
        let k = g.matmul(enc.h, wk)?;
        let v = g.matmul(enc.h, wv)?;
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for head in 0..self.cfg.att_heads {
            keys.push(g.slice_cols(k, head * dk, dk)?);
            values.push(g.slice_cols(v, head * dk, dk)?);
        }
        let wt = self.p(g, "dec.w_table")?;
        let wc = self.p(g, "dec.w_col")?;
        let table_proj = g.matmul_t(enc.tables, wt)?;
        let col_proj = g.matmul_t(enc.columns, wc)?;
        Ok(DecoderContext {
            h: enc.h,
            tables: enc.tables,
            columns: enc.columns,
            keys,
            values,
            table_proj,
            col_proj,
            n_tables: g.shape(enc.tables)[0],
            n_columns: g.shape(enc.columns)[0],
        })
    }

    /// Attention-pooled initial hidden state; the cell starts at zero.
    pub fn init_state(&self, g: &mut Graph, ctx: &DecoderContext) -> Result<DecoderState> {
        let query = self.p(g, "dec.init_query")?;
        let w1 = self.p(g, "dec.w1")?;
        let w2 = self.p(g, "dec.w2")?;
        let proj = g.matmul(ctx.h, w1)?;
        let proj = g.tanh(proj)?;
        let scores = g.matmul_t(query, proj)?;
        let e = g.softmax(scores)?;
        let pooled = g.matmul(e, ctx.h)?;
        let h0 = g.matmul(pooled, w2)?;
        let h = g.tanh(h0)?;
        let c = g.constant(Tensor::zeros(&[1, self.cfg.hidden]));
        Ok(DecoderState {
            c,
            h,
            hist_h: Vec::new(),
            hist_a: Vec::new(),
        })
    }

    fn attend(&self, g: &mut Graph, ctx: &DecoderContext, h: Var) -> Result<Var> {
        let dk = self.d_h / self.cfg.att_heads;
        let wq = self.p(g, "dec.att_wq")?;
        let q = g.matmul(h, wq)?;
        let mut heads = Vec::with_capacity(self.cfg.att_heads);
        for head in 0..self.cfg.att_heads {
            let qh = g.slice_cols(q, head * dk, dk)?;
            let s = g.matmul_t(qh, ctx.keys[head])?;
            let s = g.scale(s, 1.0 / (dk as f64).sqrt())?;
            let e = g.softmax(s)?;
            heads.push(g.matmul(e, ctx.values[head])?);
        }
        let cat = g.concat_cols(&heads)?;
        let wo = self.p(g, "dec.att_wo")?;
        Ok(g.matmul(cat, wo)?)
    }

    fn mlp(&self, g: &mut Graph, head: &str, x: Var) -> Result<Var> {
        let w1 = self.p(g, &format!("dec.{head}_mlp1_w"))?;
        let b1 = self.p(g, &format!("dec.{head}_mlp1_b"))?;
        let w2 = self.p(g, &format!("dec.{head}_mlp2_w"))?;
        let b2 = self.p(g, &format!("dec.{head}_mlp2_b"))?;
        let y = g.matmul(x, w1)?;
        let y = g.add_row(y, b1)?;
        let y = g.tanh(y)?;
        let y = g.matmul(y, w2)?;
        Ok(g.add_row(y, b2)?)
    }

    /// Advances the LSTM for the current frontier and returns the masked
    /// distribution of the active head. The caller commits the chosen action
    /// with [`Decoder::commit`].
    pub fn step(
        &self,
        g: &mut Graph,
        ctx: &DecoderContext,
        state: &mut DecoderState,
        ast: &AstState,
    ) -> Result<StepDist> {
        let frontier = ast.frontier().ok_or_else(|| Error::InvalidAction {
            step: ast.step(),
            message: "tree is complete".into(),
        })?;
        let a_prev = match state.hist_a.last() {
            Some(&a) => a,
            None => self.p(g, "dec.a0")?,
        };
        let (hp, ap) = match ast.frontier_parent() {
            Some(p) => (state.hist_h[p], state.hist_a[p]),
            None => (self.p(g, "dec.hp0")?, self.p(g, "dec.ap0")?),
        };
        let node_table = self.p(g, "dec.node_emb")?;
        let node = g.select_rows(node_table, &[self.grammar.symbol_index(frontier)])?;
        let x = g.concat_cols(&[a_prev, hp, ap, node])?;
        let (wi, wh, b) = (
            self.p(g, "dec.lstm_wi")?,
            self.p(g, "dec.lstm_wh")?,
            self.p(g, "dec.lstm_b")?,
        );
        let (c, h) = g.lstm_cell(x, state.c, state.h, wi, wh, b)?;
        state.c = c;
        state.h = h;
        state.hist_h.push(h);

        let mask = ast.valid_actions()?;
        let actions = mask.actions();
        let head = match mask {
            ActionMask::Rules(_) => Head::Rule,
            ActionMask::Tables(_) => Head::Table,
            ActionMask::Columns(_) => Head::Column,
            ActionMask::Value => {
                return Ok(StepDist {
                    head: Head::Value,
                    actions,
                    log_probs: None,
                })
            }
        };
        let hd = g.dropout(h, self.cfg.dropout)?;
        let ctx_vec = self.attend(g, ctx, hd)?;
        let feat = g.concat_cols(&[hd, ctx_vec])?;
        let logits = match &mask {
            ActionMask::Rules(rules) => {
                let y = self.mlp(g, "rule", feat)?;
                let wr = self.p(g, "dec.w_rule")?;
                let all = g.matmul(y, wr)?;
                g.select_cols(all, rules)?
            }
            ActionMask::Tables(_) => {
                let y = self.mlp(g, "table", feat)?;
                g.matmul_t(y, ctx.table_proj)?
            }
            _ => {
                let y = self.mlp(g, "col", feat)?;
                g.matmul_t(y, ctx.col_proj)?
            }
        };
        let log_probs = g.log_softmax(logits)?;
        Ok(StepDist {
            head,
            actions,
            log_probs: Some(log_probs),
        })
    }

    pub fn action_embedding(&self, g: &mut Graph, ctx: &DecoderContext, action: Action) -> Result<Var> {
        Ok(match action {
            Action::ApplyRule(r) => {
                let t = self.p(g, "dec.rule_emb")?;
                g.select_rows(t, &[r])?
            }
            Action::SelectTable(i) => {
                let row = g.select_rows(ctx.tables, &[i])?;
                let w = self.p(g, "dec.table_act")?;
                g.matmul(row, w)?
            }
            Action::SelectColumn(i) => {
                let row = g.select_rows(ctx.columns, &[i])?;
                let w = self.p(g, "dec.col_act")?;
                g.matmul(row, w)?
            }
            Action::SelectValue(_) => self.p(g, "dec.value_emb")?,
        })
    }

    /// Records the action taken at the step just computed.
    pub fn commit(
        &self,
        g: &mut Graph,
        ctx: &DecoderContext,
        state: &mut DecoderState,
        ast: &mut AstState,
        action: Action,
    ) -> Result<()> {
        ast.apply(action)?;
        let emb = self.action_embedding(g, ctx, action)?;
        state.hist_a.push(emb);
        Ok(())
    }

    fn new_ast(&self, ctx: &DecoderContext) -> AstState {
        AstState::with_bounds(self.grammar.clone(), ctx.n_columns, ctx.n_tables)
    }

    /// Step distributions under teacher forcing on `gold`, paired with the
    /// gold action's position inside each distribution.
    pub fn teacher_forced_trace(
        &self,
        g: &mut Graph,
        enc: &EncoderOutput,
        gold: &[Action],
    ) -> Result<Vec<(StepDist, usize)>> {
        let ctx = self.context(g, enc)?;
        let mut state = self.init_state(g, &ctx)?;
        let mut ast = self.new_ast(&ctx);
        let mut trace = Vec::with_capacity(gold.len());
        for (t, &action) in gold.iter().enumerate() {
            if ast.is_complete() {
                return Err(Error::InvalidAction {
                    step: t,
                    message: "gold continues after the tree is complete".into(),
                });
            }
            let dist = self.step(g, &ctx, &mut state, &ast)?;
            let pos = dist.actions.iter().position(|&a| a == action).ok_or_else(|| Error::InvalidAction {
                step: t,
                message: format!("gold action {action} is masked out"),
            })?;
            self.commit(g, &ctx, &mut state, &mut ast, action)?;
            trace.push((dist, pos));
        }
        if !ast.is_complete() {
            return Err(Error::InvalidAction {
                step: gold.len(),
                message: "gold sequence leaves the tree incomplete".into(),
            });
        }
        Ok(trace)
    }

    /// Ranked complete hypotheses, best first.
    pub fn beam_search(
        &self,
        g: &mut Graph,
        enc: &EncoderOutput,
        schema: &Schema,
        beam_size: usize,
        max_steps: usize,
    ) -> Result<Vec<Hypothesis>> {
        if beam_size == 0 {
            return Err(Error::Invalid("beam size must be at least 1".into()));
        }
        let space = ActionSpace::new(self.grammar, schema);
        let ctx = self.context(g, enc)?;
        struct Live {
            state: DecoderState,
            ast: AstState,
            ids: Vec<usize>,
            log_prob: f64,
        }
        let mut live = vec![Live {
            state: self.init_state(g, &ctx)?,
            ast: self.new_ast(&ctx),
            ids: Vec::new(),
            log_prob: 0.0,
        }];
        let mut finished: Vec<Hypothesis> = Vec::new();

        for _ in 0..max_steps {
            if live.is_empty() {
                break;
            }
            // (hypothesis index, action, new score, new ids)
            let mut candidates: Vec<(usize, Action, f64, Vec<usize>)> = Vec::new();
            for (i, hyp) in live.iter_mut().enumerate() {
                let dist = self.step(g, &ctx, &mut hyp.state, &hyp.ast)?;
                let lp: Vec<f64> = match dist.log_probs {
                    Some(v) => g.value(v).data().to_vec(),
                    None => vec![0.0],
                };
                for (&a, l) in dist.actions.iter().zip(lp) {
                    let mut ids = hyp.ids.clone();
                    ids.push(space.id(a));
                    candidates.push((i, a, hyp.log_prob + l, ids));
                }
            }
            candidates.sort_by(|a, b| rank(a.2, &a.3, b.2, &b.3));
            candidates.truncate(beam_size);

            let mut next = Vec::new();
            for (i, action, log_prob, ids) in candidates {
                let mut state = live[i].state.clone();
                let mut ast = live[i].ast.clone();
                self.commit(g, &ctx, &mut state, &mut ast, action)?;
                if ast.is_complete() {
                    finished.push(Hypothesis {
                        actions: ast.actions().to_vec(),
                        ids,
                        log_prob,
                    });
                } else {
                    next.push(Live {
                        state,
                        ast,
                        ids,
                        log_prob,
                    });
                }
            }
            live = next;
            finished.sort_by(|a, b| rank(a.log_prob, &a.ids, b.log_prob, &b.ids));
            finished.truncate(beam_size);
            // Scores never increase, so a live prefix below the k-th finished score is dead.
            if finished.len() == beam_size {
                let kth = finished[beam_size - 1].log_prob;
                live.retain(|h| h.log_prob >= kth);
            }
        }
        if finished.is_empty() {
            return Err(Error::DecodeBudget(max_steps));
        }
        Ok(finished)
    }
}

/// Higher score first; ties go to the lexicographically smaller id sequence.
fn rank(sa: f64, ia: &[usize], sb: f64, ib: &[usize]) -> Ordering {
    sb.total_cmp(&sa).then_with(|| ia.cmp(ib))
}
