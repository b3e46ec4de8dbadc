mod common;

use std::time::Instant;

use ctxsql_autograd::{grad_check, GradCheckConfig, Graph, TensorError};
use ctxsql_core::grammar::sql_to_actions;
use ctxsql_core::losses::{gold_item_indices, turn_loss, LossInput, LossWeights, Variant};
use ctxsql_core::model::SG_WEIGHT;
use proptest::prelude::*;
use proptest::test_runner::{Config, FileFailurePersistence, RngSeed, TestRunner};

fn weights(variant: Variant) -> LossWeights {
    LossWeights {
        lambda1: 0.1,
        lambda2: 3.0,
        variant,
    }
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    let (model, schemas, data) = common::desk_model(21);
    // a two-turn interaction whose second turn has a self-contained form
    let inter = data.iter().find(|i| i.turns.len() == 2).unwrap();
    let schema = &schemas[&inter.database_id];
    let turn = &inter.turns[1];
    let gold = sql_to_actions(&turn.gold_sql, schema, &model.grammar).unwrap();
    let items = gold_item_indices(&turn.gold, schema);
    let ctx = inter.context(1);
    let input = LossInput {
        context: &ctx,
        self_contained: turn.self_contained.as_deref(),
        schema,
        gold_actions: &gold,
        gold_items: &items,
    };
    assert!(!input.inputs_identical());
    let start = Instant::now();
    let report = grad_check(
        |store, g| {
            let m = ctxsql_core::model::Model {
                params: store.clone(),
                ..model.clone()
            };
            let terms = turn_loss(g, &m, &input, &weights(Variant::Full)).map_err(|e| TensorError::Invalid(e.to_string()))?;
            Ok(terms.total)
        },
        &model.params,
        &GradCheckConfig {
            max_entries_per_param: Some(2),
            step: 1e-5,
            abs_floor: 1e-5,
            seed: 5,
            ..GradCheckConfig::default()
        },
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn loss_terms_are_non_negative_and_combine_exactly() {
    let (model, schemas, data) = common::desk_model(22);
    let mut runner = TestRunner::new(Config {
        cases: 24,
        rng_seed: RngSeed::Fixed(22),
        failure_persistence: Some(Box::new(FileFailurePersistence::Off)),
        ..Config::default()
    });
    let n = data.len();
    runner
        .run(&(0..n, 0usize..4, 0usize..5), |(i, t, v)| {
            let inter = &data[i];
            let t = t % inter.turns.len();
            let variant = [Variant::Full, Variant::NoSg, Variant::NoSpKl, Variant::EndToEnd, Variant::EndToEndBow][v];
            let schema = &schemas[&inter.database_id];
            let turn = &inter.turns[t];
            let gold = sql_to_actions(&turn.gold_sql, schema, &model.grammar).unwrap();
            let items = gold_item_indices(&turn.gold, schema);
            let ctx = inter.context(t);
            let input = LossInput {
                context: &ctx,
                self_contained: turn.self_contained.as_deref(),
                schema,
                gold_actions: &gold,
                gold_items: &items,
            };
            let w = weights(variant);
            let mut g = Graph::new();
            let terms = turn_loss(&mut g, &model, &input, &w).unwrap();
            let v = terms.values(&g, w.lambda1, w.lambda2);
            prop_assert_eq!(v.total, v.sp + w.lambda1 * v.sg_bow + w.lambda2 * (v.sp_kl + v.sg_kl));
            prop_assert!(v.sp >= 0.0 && v.sg_bow >= 0.0 && v.sp_kl >= 0.0 && v.sg_kl >= 0.0);
            if !variant.uses_self_input() || input.inputs_identical() {
                prop_assert_eq!(v.sp_kl, 0.0);
                prop_assert_eq!(v.sg_kl, 0.0);
            }
            Ok(())
        })
        .unwrap();
}

#[test]
fn identical_inputs_have_zero_consistency_terms() {
    let (model, schemas, data) = common::desk_model(23);
    let inter = &data[0];
    let schema = &schemas[&inter.database_id];
    let turn = &inter.turns[0];
    let gold = sql_to_actions(&turn.gold_sql, schema, &model.grammar).unwrap();
    let items = gold_item_indices(&turn.gold, schema);
    let ctx = inter.context(0);
    for self_contained in [None, Some(turn.question.as_slice())] {
        let input = LossInput {
            context: &ctx,
            self_contained,
            schema,
            gold_actions: &gold,
            gold_items: &items,
        };
        let mut g = Graph::new();
        let v = turn_loss(&mut g, &model, &input, &weights(Variant::Full)).unwrap().values(&g, 0.1, 3.0);
        assert_eq!((v.sp_kl, v.sg_kl), (0.0, 0.0));
        assert!(v.sp > 0.0);
    }
}

#[test]
fn end_to_end_variant_trains_the_parser_only() {
    let (model, schemas, data) = common::desk_model(24);
    let inter = data.iter().find(|i| i.turns.len() >= 3).unwrap();
    let schema = &schemas[&inter.database_id];
    let turn = &inter.turns[2];
    let gold = sql_to_actions(&turn.gold_sql, schema, &model.grammar).unwrap();
    let items = gold_item_indices(&turn.gold, schema);
    let ctx = inter.context(2);
    let input = LossInput {
        context: &ctx,
        self_contained: turn.self_contained.as_deref(),
        schema,
        gold_actions: &gold,
        gold_items: &items,
    };
    let w = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        variant: Variant::EndToEnd,
    };
    let mut g = Graph::new();
    let terms = turn_loss(&mut g, &model, &input, &w).unwrap();
    let v = terms.values(&g, 0.0, 0.0);
    assert_eq!(v.total, v.sp);
    assert_eq!((v.sg_bow, v.sp_kl, v.sg_kl), (0.0, 0.0, 0.0));
    let grads = g.backward(terms.total).unwrap();
    assert!(grads.get(SG_WEIGHT).is_none_or(|t| t.data().iter().all(|&x| x == 0.0)));

    // the context-only parsing loss equals half the dual-input sum when both inputs coincide
    let mut g2 = Graph::new();
    let single = LossInput {
        self_contained: None,
        ..input
    };
    let full = turn_loss(&mut g2, &model, &single, &weights(Variant::Full)).unwrap().values(&g2, 0.1, 3.0);
    assert!((full.sp - 2.0 * v.sp).abs() < 1e-9);
}
