//! Relation-aware transformer encoder over the linearized question/schema sequence.

use std::sync::Arc;

use ctxsql_autograd::{Graph, ParamStore, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linearize::{LinearizedInput, RelationGraph, NUM_RELATIONS};
use crate::schema::Schema;
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_h: usize,
    pub d_k: usize,
    pub ffn: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 4,
            heads: 8,
            d_h: 256,
            d_k: 32,
            ffn: 1024,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.heads == 0 || self.heads * self.d_k != self.d_h {
            return Err(Error::Config(format!(
                "heads ({}) x d_k ({}) must equal d_h ({})",
                self.heads, self.d_k, self.d_h
            )));
        }
        if self.ffn == 0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("ffn width must be positive and dropout in [0, 1)".into()));
        }
        Ok(())
    }
}

pub const WORD_EMB: &str = "enc.word_emb";

fn layer_name(l: usize, what: &str) -> String {
    format!("enc.l{l}.{what}")
}

pub fn init_params(store: &mut ParamStore, cfg: &EncoderConfig, vocab_size: usize) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_h;
    store.init_uniform_bound(WORD_EMB, &[vocab_size, d], 1.0)?;
    for l in 0..cfg.layers {
        for w in ["wq", "wk", "wv"] {
            store.init_uniform(&layer_name(l, w), &[d, d])?;
        }
        store.init_uniform_bound(&layer_name(l, "rel_k"), &[NUM_RELATIONS, cfg.d_k], 0.1)?;
        store.init_uniform_bound(&layer_name(l, "rel_v"), &[NUM_RELATIONS, cfg.d_k], 0.1)?;
        store.init_constant(&layer_name(l, "ln1_g"), &[1, d], 1.0)?;
        store.init_constant(&layer_name(l, "ln1_b"), &[1, d], 0.0)?;
        store.init_uniform(&layer_name(l, "ff1_w"), &[d, cfg.ffn])?;
        store.init_constant(&layer_name(l, "ff1_b"), &[1, cfg.ffn], 0.0)?;
        store.init_uniform(&layer_name(l, "ff2_w"), &[cfg.ffn, d])?;
        store.init_constant(&layer_name(l, "ff2_b"), &[1, d], 0.0)?;
        store.init_constant(&layer_name(l, "ln2_g"), &[1, d], 1.0)?;
        store.init_constant(&layer_name(l, "ln2_b"), &[1, d], 0.0)?;
    }
    Ok(())
}

/// Encoder hidden states plus row views the heads need.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[n, d_h]` final hidden states.
    pub h: Var,
    /// `[1, d_h]` latent row.
    pub z: Var,
    /// `[tables, d_h]`, indexed by table id.
    pub tables: Var,
    /// `[columns, d_h]`, indexed by column id.
    pub columns: Var,
    /// `[items, d_h]` in schema item order (each table then its columns).
    pub items: Var,
    pub n: usize,
}

/// `H^0`: one row per token, the mean of its word embeddings.
pub fn embed(g: &mut Graph, store: &ParamStore, vocab: &Vocab, input: &LinearizedInput) -> Result<Var> {
    let groups: Vec<Vec<usize>> = input
        .tokens
        .iter()
        .map(|t| t.words.iter().map(|w| vocab.id(w)).collect())
        .collect();
    let table = g.param(store, WORD_EMB)?;
    Ok(g.gather_mean(table, Arc::new(groups))?)
}

/// One relation-aware block. Returns the new states and the per-head attention
/// matrices.
pub fn rat_layer_with_attention(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    layer: usize,
    h: Var,
    relations: &RelationGraph,
) -> Result<(Var, Vec<Var>)> {
    let n = g.shape(h)[0];
    if relations.n != n {
        return Err(Error::Invalid(format!(
            "relation graph is {0}x{0} but the input has {n} tokens",
            relations.n
        )));
    }
    let p = |g: &mut Graph, w: &str| g.param(store, &layer_name(layer, w));
    let (wq, wk, wv) = (p(g, "wq")?, p(g, "wk")?, p(g, "wv")?);
    let (rk, rv) = (p(g, "rel_k")?, p(g, "rel_v")?);
    let q = g.matmul(h, wq)?;
    let k = g.matmul(h, wk)?;
    let v = g.matmul(h, wv)?;
    let idx = relations.labels.clone();
    let scale = 1.0 / (cfg.d_k as f64).sqrt();

    let mut heads = Vec::with_capacity(cfg.heads);
    let mut attention = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let start = head * cfg.d_k;
        let qh = g.slice_cols(q, start, cfg.d_k)?;
        let kh = g.slice_cols(k, start, cfg.d_k)?;
        let vh = g.slice_cols(v, start, cfg.d_k)?;
        // Q_i (K_j + r^K_ij)^T = Q_i K_j^T + (Q r^K^T)[i, label(i, j)]
        let qk = g.matmul_t(qh, kh)?;
        let qr = g.matmul_t(qh, rk)?;
        let qr = g.gather_by_index(qr, idx.clone())?;
        let scores = g.add(qk, qr)?;
        let scores = g.scale(scores, scale)?;
        let e = g.softmax(scores)?;
        // sum_j e_ij (V_j + r^V_ij) = e V + (per-label mass of e) r^V
        let ev = g.matmul(e, vh)?;
        let mass = g.scatter_by_index(e, idx.clone(), NUM_RELATIONS)?;
        let er = g.matmul(mass, rv)?;
        heads.push(g.add(ev, er)?);
        attention.push(e);
    }
    let a = g.concat_cols(&heads)?;
    let a = g.dropout(a, cfg.dropout)?;
    let res = g.add(h, a)?;
    let (g1, b1) = (p(g, "ln1_g")?, p(g, "ln1_b")?);
    let a_tilde = g.layer_norm(res, g1, b1)?;

    let (w1, bias1, w2, bias2) = (p(g, "ff1_w")?, p(g, "ff1_b")?, p(g, "ff2_w")?, p(g, "ff2_b")?);
    let f = g.matmul(a_tilde, w1)?;
    let f = g.add_row(f, bias1)?;
    let f = g.relu(f)?;
    let f = g.matmul(f, w2)?;
    let f = g.add_row(f, bias2)?;
    let f = g.dropout(f, cfg.dropout)?;
    let res = g.add(a_tilde, f)?;
    let (g2, b2) = (p(g, "ln2_g")?, p(g, "ln2_b")?);
    Ok((g.layer_norm(res, g2, b2)?, attention))
}

pub fn rat_layer(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    layer: usize,
    h: Var,
    relations: &RelationGraph,
) -> Result<Var> {
    Ok(rat_layer_with_attention(g, store, cfg, layer, h, relations)?.0)
}

pub fn encode(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    vocab: &Vocab,
    input: &LinearizedInput,
    relations: &RelationGraph,
    schema: &Schema,
) -> Result<EncoderOutput> {
    cfg.validate()?;
    let mut h = embed(g, store, vocab, input)?;
    h = g.dropout(h, cfg.dropout)?;
    for l in 0..cfg.layers {
        h = rat_layer(g, store, cfg, l, h, relations)?;
    }
    let z = g.select_rows(h, &[0])?;
    let tables = g.select_rows(h, &input.table_positions(schema))?;
    let columns = g.select_rows(h, &input.column_positions(schema))?;
    let item_rows: Vec<usize> = input.schema_positions().into_iter().map(|(_, i)| i).collect();
    let items = g.select_rows(h, &item_rows)?;
    Ok(EncoderOutput {
        h,
        z,
        tables,
        columns,
        items,
        n: input.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_zero_layers_and_bad_heads() {
        let mut c = EncoderConfig::default();
        assert!(c.validate().is_ok());
        c.layers = 0;
        assert!(c.validate().is_err());
        let c = EncoderConfig { d_k: 7, ..EncoderConfig::default() };
        assert!(c.validate().is_err());
    }
}
