//! Parsing, schema grounding and dual-input consistency losses.

use ctxsql_autograd::{Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::decoder::StepDist;
use crate::error::{Error, Result};
use crate::grammar::Action;
use crate::model::{Model, SG_WEIGHT};
use crate::schema::Schema;
use crate::sql::{schema_items, Sql};

/// Which loss terms take part; mirrors the ablation rows of the method.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Every term.
    #[default]
    Full,
    /// No schema grounding (neither the BoW nor its consistency term).
    NoSg,
    /// No parsing consistency term.
    NoSpKl,
    /// Context input only, parsing loss only.
    EndToEnd,
    /// Context input only, parsing plus BoW grounding.
    EndToEndBow,
}

impl Variant {
    pub fn uses_self_input(self) -> bool {
        matches!(self, Variant::Full | Variant::NoSg | Variant::NoSpKl)
    }

    pub fn bow(self) -> bool {
        !matches!(self, Variant::NoSg | Variant::EndToEnd)
    }

    pub fn sg_kl(self) -> bool {
        matches!(self, Variant::Full | Variant::NoSpKl)
    }

    pub fn sp_kl(self) -> bool {
        matches!(self, Variant::Full | Variant::NoSg)
    }
}

/// Graph handles of every loss component.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub sp: Var,
    pub sg_bow: Var,
    pub sp_kl: Var,
    pub sg_kl: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sp: f64,
    pub sg_bow: f64,
    pub sp_kl: f64,
    pub sg_kl: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossTerms {
    pub fn values(&self, g: &Graph, lambda1: f64, lambda2: f64) -> LossBreakdown {
        LossBreakdown {
            sp: g.scalar(self.sp),
            sg_bow: g.scalar(self.sg_bow),
            sp_kl: g.scalar(self.sp_kl),
            sg_kl: g.scalar(self.sg_kl),
            total: g.scalar(self.total),
            lambda1,
            lambda2,
        }
    }
}

/// `f_d(z) = h_d W z^T` for every schema item, as a `[1, |D|]` row.
pub fn grounding_logits(g: &mut Graph, store: &ParamStore, z: Var, items: Var) -> Result<Var> {
    let w = g.param(store, SG_WEIGHT)?;
    let hw = g.matmul(items, w)?;
    Ok(g.matmul_t(z, hw)?)
}

/// `-sum over gold items of log softmax(f(z))`.
pub fn bow_loss(g: &mut Graph, logits: Var, gold: &[usize]) -> Result<Var> {
    if gold.is_empty() {
        log::warn!("empty gold schema set; grounding loss contributes 0");
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let ls = g.log_softmax(logits)?;
    let picks = gold.iter().map(|&i| g.pick(ls, 0, i)).collect::<ctxsql_autograd::Result<Vec<_>>>()?;
    let s = g.add_all(&picks)?;
    Ok(g.scale(s, -1.0)?)
}

/// Symmetric KL between the two grounding distributions.
pub fn sg_consistency(g: &mut Graph, logits_o: Var, logits_r: Var) -> Result<Var> {
    if g.shape(logits_o) != g.shape(logits_r) {
        return Err(Error::Invalid("grounding distributions over different schemas".into()));
    }
    let p = g.softmax(logits_o)?;
    let q = g.softmax(logits_r)?;
    Ok(g.symmetric_kl(p, q)?)
}

/// Teacher-forced trace: each step's distribution and the gold position in it.
pub type Trace = [(StepDist, usize)];

/// `-sum_t log p(gold_t)` over one trace; forced steps contribute nothing.
pub fn trace_nll(g: &mut Graph, trace: &Trace) -> Result<Var> {
    let mut picks = Vec::with_capacity(trace.len());
    for (dist, pos) in trace {
        if let Some(lp) = dist.log_probs {
            picks.push(g.pick(lp, 0, *pos)?);
        }
    }
    if picks.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let s = g.add_all(&picks)?;
    Ok(g.scale(s, -1.0)?)
}

/// Parsing loss summed over both input variants.
pub fn sp_loss(g: &mut Graph, trace_ctx: &Trace, trace_self: &Trace) -> Result<Var> {
    if trace_ctx.len() != trace_self.len() {
        return Err(Error::Invalid(format!(
            "trace lengths differ: {} vs {}",
            trace_ctx.len(),
            trace_self.len()
        )));
    }
    let a = trace_nll(g, trace_ctx)?;
    let b = trace_nll(g, trace_self)?;
    Ok(g.add(a, b)?)
}

/// `(1/T) sum_t` symmetric KL of the active head; inactive heads contribute 0.
pub fn sp_consistency(g: &mut Graph, trace_a: &Trace, trace_b: &Trace) -> Result<Var> {
    if trace_a.len() != trace_b.len() {
        return Err(Error::Invalid(format!(
            "trace lengths differ: {} vs {}",
            trace_a.len(),
            trace_b.len()
        )));
    }
    let mut terms = Vec::new();
    for (t, ((da, _), (db, _))) in trace_a.iter().zip(trace_b).enumerate() {
        if da.head != db.head || da.actions != db.actions {
            return Err(Error::InvalidAction {
                step: t,
                message: "traces disagree on the active head".into(),
            });
        }
        if let (Some(la), Some(lb)) = (da.log_probs, db.log_probs) {
            let p = g.exp(la)?;
            let q = g.exp(lb)?;
            terms.push(g.symmetric_kl(p, q)?);
        }
    }
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let s = g.add_all(&terms)?;
    Ok(g.scale(s, 1.0 / trace_a.len() as f64)?)
}

/// `sp + l1 * bow + l2 * (sp_kl + sg_kl)`, built on one arithmetic path.
pub fn combine(g: &mut Graph, sp: Var, sg_bow: Var, sp_kl: Var, sg_kl: Var, lambda1: f64, lambda2: f64) -> Result<LossTerms> {
    let b = g.scale(sg_bow, lambda1)?;
    let kl = g.add(sp_kl, sg_kl)?;
    let kl = g.scale(kl, lambda2)?;
    let base = g.add(sp, b)?;
    let total = g.add(base, kl)?;
    Ok(LossTerms {
        sp,
        sg_bow,
        sp_kl,
        sg_kl,
        total,
    })
}

/// Indices into [`Schema::items`] of the items a query mentions.
pub fn gold_item_indices(sql: &Sql, schema: &Schema) -> Vec<usize> {
    let used = schema_items(sql);
    schema
        .items()
        .iter()
        .enumerate()
        .filter(|(_, it)| used.contains(it))
        .map(|(i, _)| i)
        .collect()
}

/// One training turn: the question context, its self-contained form and the gold.
#[derive(Clone, Copy, Debug)]
pub struct LossInput<'a> {
    pub context: &'a [&'a [String]],
    /// `None` means the context is already self-contained.
    pub self_contained: Option<&'a [String]>,
    pub schema: &'a Schema,
    pub gold_actions: &'a [Action],
    pub gold_items: &'a [usize],
}

impl LossInput<'_> {
    /// True when both input variants tokenize identically.
    pub fn inputs_identical(&self) -> bool {
        match self.self_contained {
            None => true,
            Some(r) => self.context.len() == 1 && self.context[0] == r,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub variant: Variant,
}

/// Builds every loss term for one turn in `g`.
pub fn turn_loss(g: &mut Graph, model: &Model, input: &LossInput<'_>, w: &LossWeights) -> Result<LossTerms> {
    let dec = model.decoder();
    let zero = |g: &mut Graph| g.constant(Tensor::scalar(0.0));
    let enc_o = model.encode(g, input.context, input.schema)?;
    let trace_o = dec.teacher_forced_trace(g, &enc_o, input.gold_actions)?;
    let nll_o = trace_nll(g, &trace_o)?;
    let bow_o = if w.variant.bow() {
        let logits = grounding_logits(g, &model.params, enc_o.z, enc_o.items)?;
        Some((logits, bow_loss(g, logits, input.gold_items)?))
    } else {
        None
    };

    if !w.variant.uses_self_input() {
        let bow = match bow_o {
            Some((_, b)) => b,
            None => zero(g),
        };
        let (sp_kl, sg_kl) = (zero(g), zero(g));
        return combine(g, nll_o, bow, sp_kl, sg_kl, w.lambda1, w.lambda2);
    }

    if input.inputs_identical() {
        // One encoding serves both variants: each parsing and grounding term
        // counts twice and the consistency terms vanish.
        let sp = g.add(nll_o, nll_o)?;
        let bow = match bow_o {
            Some((_, b)) => g.add(b, b)?,
            None => zero(g),
        };
        let (sp_kl, sg_kl) = (zero(g), zero(g));
        return combine(g, sp, bow, sp_kl, sg_kl, w.lambda1, w.lambda2);
    }

    let r = input.self_contained.expect("checked above");
    let enc_r = model.encode(g, &[r], input.schema)?;
    let trace_r = dec.teacher_forced_trace(g, &enc_r, input.gold_actions)?;
    let nll_r = trace_nll(g, &trace_r)?;
    let sp = g.add(nll_o, nll_r)?;
    let (bow, sg_kl) = match bow_o {
        Some((logits_o, b_o)) => {
            let logits_r = grounding_logits(g, &model.params, enc_r.z, enc_r.items)?;
            let b_r = bow_loss(g, logits_r, input.gold_items)?;
            let bow = g.add(b_o, b_r)?;
            let kl = if w.variant.sg_kl() {
                sg_consistency(g, logits_o, logits_r)?
            } else {
                zero(g)
            };
            (bow, kl)
        }
        None => (zero(g), zero(g)),
    };
    let sp_kl = if w.variant.sp_kl() {
        sp_consistency(g, &trace_o, &trace_r)?
    } else {
        zero(g)
    };
    combine(g, sp, bow, sp_kl, sg_kl, w.lambda1, w.lambda2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(g: &mut Graph, v: &[f64]) -> Var {
        g.constant(Tensor::row(v.to_vec()))
    }

    #[test]
    fn bow_uniform_two_items_is_ln2() {
        let mut g = Graph::new();
        let l = row(&mut g, &[0.3, 0.3]);
        let loss = bow_loss(&mut g, l, &[1]).unwrap();
        assert!((g.scalar(loss) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bow_hand_logits() {
        let mut g = Graph::new();
        let l = row(&mut g, &[1.0, 0.0, 0.0]);
        let loss = bow_loss(&mut g, l, &[0]).unwrap();
        let e = 1f64.exp();
        assert!((g.scalar(loss) + (e / (e + 2.0)).ln()).abs() < 1e-12);
    }

    #[test]
    fn bow_all_gold_uniform_is_n_ln_n() {
        let mut g = Graph::new();
        let l = row(&mut g, &[0.0; 4]);
        let loss = bow_loss(&mut g, l, &[0, 1, 2, 3]).unwrap();
        assert!((g.scalar(loss) - 4.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bow_empty_gold_is_zero() {
        let mut g = Graph::new();
        let l = row(&mut g, &[1.0, 2.0]);
        let loss = bow_loss(&mut g, l, &[]).unwrap();
        assert_eq!(g.scalar(loss), 0.0);
    }

    #[test]
    fn sg_consistency_summation_and_symmetry() {
        let mut g = Graph::new();
        let a = row(&mut g, &[0.8f64.ln(), 0.2f64.ln()]);
        let b = row(&mut g, &[0.5f64.ln(), 0.5f64.ln()]);
        let ab = sg_consistency(&mut g, a, b).unwrap();
        let ba = sg_consistency(&mut g, b, a).unwrap();
        let aa = sg_consistency(&mut g, a, a).unwrap();
        let kl = |p: [f64; 2], q: [f64; 2]| p.iter().zip(q).map(|(x, y)| x * (x / y).ln()).sum::<f64>();
        let expect = kl([0.8, 0.2], [0.5, 0.5]) + kl([0.5, 0.5], [0.8, 0.2]);
        assert!((g.scalar(ab) - expect).abs() < 1e-9);
        assert_eq!(g.scalar(ab), g.scalar(ba));
        assert_eq!(g.scalar(aa), 0.0);
    }

    #[test]
    fn combine_matches_formula() {
        let mut g = Graph::new();
        let v: Vec<Var> = [1.5, 0.25, 0.125, 0.5].iter().map(|&x| g.constant(Tensor::scalar(x))).collect();
        let t = combine(&mut g, v[0], v[1], v[2], v[3], 0.1, 3.0).unwrap();
        assert_eq!(g.scalar(t.total), 1.5 + 0.1 * 0.25 + 3.0 * (0.125 + 0.5));
        let t0 = combine(&mut g, v[0], v[1], v[2], v[3], 0.0, 0.0).unwrap();
        assert_eq!(g.scalar(t0.total), 1.5);
    }

    #[test]
    fn variant_flags() {
        assert!(Variant::Full.uses_self_input() && Variant::Full.sp_kl() && Variant::Full.sg_kl());
        assert!(!Variant::NoSg.bow() && !Variant::NoSg.sg_kl() && Variant::NoSg.sp_kl());
        assert!(!Variant::NoSpKl.sp_kl() && Variant::NoSpKl.sg_kl());
        assert!(!Variant::EndToEnd.uses_self_input() && !Variant::EndToEnd.bow());
        assert!(!Variant::EndToEndBow.uses_self_input() && Variant::EndToEndBow.bow());
    }
}
