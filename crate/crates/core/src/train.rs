//! Minibatch Adam training on the combined loss, with JSON-lines metrics.

use std::collections::HashMap;
use std::io::Write;

use ctxsql_autograd::{Adam, Gradients, Graph};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Interaction;
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::grammar::{sql_to_tree, Action};
use crate::losses::{gold_item_indices, turn_loss, LossBreakdown, LossInput, LossWeights, Variant};
use crate::model::Model;
use crate::schema::Schema;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub variant: Variant,
    /// Use the model's dropout rates during training.
    pub dropout: bool,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    /// Evaluate training-set QM after every epoch.
    pub eval_train: bool,
    /// Stop once training QM reaches 1.0 (requires `eval_train`).
    pub stop_at_perfect: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            batch_size: 32,
            epochs: 300,
            lambda1: 0.1,
            lambda2: 3.0,
            variant: Variant::Full,
            dropout: true,
            seed: 0,
            clip_norm: Some(5.0),
            eval_train: false,
            stop_at_perfect: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            variant: self.variant,
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub sp: f64,
    pub sg_bow: f64,
    pub sp_kl: f64,
    pub sg_kl: f64,
    pub total: f64,
    pub train_qm: Option<f64>,
    pub dev_qm: Option<f64>,
    pub dev_im: Option<f64>,
}

/// A turn with its gold actions and grounding targets resolved.
#[derive(Clone, Debug)]
pub struct Example {
    pub interaction: usize,
    pub turn: usize,
    pub gold_actions: Vec<Action>,
    pub gold_items: Vec<usize>,
}

pub fn prepare(model: &Model, data: &[Interaction], schemas: &HashMap<String, Schema>) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, inter) in data.iter().enumerate() {
        let schema = schema_for(schemas, inter)?;
        for (t, turn) in inter.turns.iter().enumerate() {
            let tree = sql_to_tree(&turn.gold, &model.grammar).map_err(|e| Error::Training(format!(
                "interaction {i}, turn {t}: {e}"
            )))?;
            out.push(Example {
                interaction: i,
                turn: t,
                gold_actions: tree.actions(),
                gold_items: gold_item_indices(&turn.gold, schema),
            });
        }
    }
    Ok(out)
}

fn schema_for<'a>(schemas: &'a HashMap<String, Schema>, inter: &Interaction) -> Result<&'a Schema> {
    schemas.get(&inter.database_id).ok_or_else(|| Error::Unknown {
        kind: "database",
        name: inter.database_id.clone(),
    })
}

/// Loss terms for one example, built in `g`.
pub fn example_loss(
    g: &mut Graph,
    model: &Model,
    data: &[Interaction],
    schemas: &HashMap<String, Schema>,
    ex: &Example,
    weights: &LossWeights,
) -> Result<crate::losses::LossTerms> {
    let inter = &data[ex.interaction];
    let schema = schema_for(schemas, inter)?;
    let context = inter.context(ex.turn);
    let input = LossInput {
        context: &context,
        self_contained: inter.turns[ex.turn].self_contained.as_deref(),
        schema,
        gold_actions: &ex.gold_actions,
        gold_items: &ex.gold_items,
    };
    turn_loss(g, model, &input, weights)
}

/// Dropout seed for one example in one epoch.
fn graph_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    seed ^ ((epoch as u64) << 32) ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Trains in place. `on_epoch` sees each epoch's metrics as they are produced
/// and may stop training early by returning `false`.
pub fn train(
    model: &mut Model,
    data: &[Interaction],
    schemas: &HashMap<String, Schema>,
    dev: Option<&[Interaction]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> bool,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let examples = prepare(model, data, schemas)?;
    if examples.is_empty() {
        return Err(Error::Training("no training examples".into()));
    }
    let weights = cfg.weights();
    let mut adam = Adam::new(cfg.lr);
    adam.clip_norm = cfg.clip_norm;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::new();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::default();
            for &idx in batch {
                let ex = &examples[idx];
                let mut g = if cfg.dropout {
                    Graph::training(graph_seed(cfg.seed, epoch, idx))
                } else {
                    Graph::new()
                };
                let terms = example_loss(&mut g, model, data, schemas, ex, &weights).map_err(|e| {
                    Error::Training(format!("interaction {}, turn {}: {e}", ex.interaction, ex.turn))
                })?;
                let v = terms.values(&g, cfg.lambda1, cfg.lambda2);
                if !v.total.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss at interaction {}, turn {}",
                        ex.interaction, ex.turn
                    )));
                }
                sums.sp += v.sp;
                sums.sg_bow += v.sg_bow;
                sums.sp_kl += v.sp_kl;
                sums.sg_kl += v.sg_kl;
                sums.total += v.total;
                grads.accumulate(&g.backward(terms.total)?);
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut model.params, &grads)?;
        }
        let n = examples.len() as f64;
        let mut m = EpochMetrics {
            epoch,
            sp: sums.sp / n,
            sg_bow: sums.sg_bow / n,
            sp_kl: sums.sp_kl / n,
            sg_kl: sums.sg_kl / n,
            total: sums.total / n,
            ..EpochMetrics::default()
        };
        if cfg.eval_train {
            m.train_qm = Some(eval::evaluate(model, data, schemas, 1)?.qm);
        }
        if let Some(dev) = dev {
            let r: EvalReport = eval::evaluate(model, dev, schemas, 1)?;
            m.dev_qm = Some(r.qm);
            m.dev_im = Some(r.im);
        }
        log::info!(
            "epoch {epoch}: total {:.4} sp {:.4} bow {:.4} sp_kl {:.4} sg_kl {:.4} train_qm {:?}",
            m.total,
            m.sp,
            m.sg_bow,
            m.sp_kl,
            m.sg_kl,
            m.train_qm
        );
        let keep_going = on_epoch(&m);
        let perfect = cfg.stop_at_perfect && m.train_qm == Some(1.0);
        history.push(m);
        if !keep_going || perfect {
            break;
        }
    }
    Ok(history)
}

/// Epoch-average consistency terms measured without updating parameters.
pub fn measure(
    model: &Model,
    data: &[Interaction],
    schemas: &HashMap<String, Schema>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let examples = prepare(model, data, schemas)?;
    let mut sums = LossBreakdown {
        lambda1: weights.lambda1,
        lambda2: weights.lambda2,
        ..LossBreakdown::default()
    };
    for ex in &examples {
        let mut g = Graph::new();
        let v = example_loss(&mut g, model, data, schemas, ex, weights)?.values(&g, weights.lambda1, weights.lambda2);
        sums.sp += v.sp;
        sums.sg_bow += v.sg_bow;
        sums.sp_kl += v.sp_kl;
        sums.sg_kl += v.sg_kl;
        sums.total += v.total;
    }
    let n = examples.len().max(1) as f64;
    sums.sp /= n;
    sums.sg_bow /= n;
    sums.sp_kl /= n;
    sums.sg_kl /= n;
    sums.total /= n;
    Ok(sums)
}

/// Writes one JSON object per line with the metrics-log fields.
pub fn write_metrics(mut w: impl Write, m: &EpochMetrics) -> std::io::Result<()> {
    let line = serde_json::json!({
        "epoch": m.epoch,
        "sp": m.sp,
        "sg_bow": m.sg_bow,
        "sp_kl": m.sp_kl,
        "sg_kl": m.sg_kl,
        "total": m.total,
        "train_qm": m.train_qm,
        "dev_qm": m.dev_qm,
        "dev_im": m.dev_im,
    });
    writeln!(w, "{line}")
}
