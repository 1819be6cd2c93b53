mod support;

use std::collections::BTreeMap;

use mergesearch::dis_space::*;
use mergesearch::evaluator::{make_synthetic_family, run_plan, SyntheticNet, BASE_MODEL};
use mergesearch::space::SearchSpace;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::oracles;

fn config(layers: usize, d: usize, m: usize, r: usize, blocks: Vec<BlockSpec>) -> DisConfig {
    DisConfig {
        base_model: "base".into(),
        models: (0..m).map(|i| format!("m{i}")).collect(),
        layer_count: layers,
        depth: d,
        repeat: r,
        max_layers: DEFAULT_MAX_LAYERS,
        blocks,
    }
}

fn block(selection: Vec<bool>, ordering: BlockOrdering, scale: f64) -> BlockSpec {
    BlockSpec { selection, ordering, scale }
}

#[test]
fn rank_unrank_exhaustive_for_small_multisets() {
    for d in 1..=6usize {
        for m in 1..=6usize {
            for r in 1..=6usize {
                if d * m * r > 6 {
                    continue;
                }
                let all = oracles::multiset_arrangements(d, m, r);
                // the oracle stores items as (m, d) in the same lexicographic order
                assert_eq!(permutation_count(d, m, r).unwrap(), all.len() as u128, "D{d} M{m} R{r}");
                for (p, want) in all.iter().enumerate() {
                    let got = unrank_permutation(p as u128, d, m, r).unwrap();
                    assert_eq!(&got, want, "D{d} M{m} R{r} p{p}");
                    assert_eq!(rank_permutation(&got, d, m, r).unwrap(), p as u128);
                }
                assert!(unrank_permutation(all.len() as u128, d, m, r).is_err());
            }
        }
    }
}

#[test]
fn count_matches_factorial_formula() {
    assert_eq!(permutation_count(1, 3, 1).unwrap(), 6);
    assert_eq!(permutation_count(1, 1, 2).unwrap(), 1);
    assert_eq!(permutation_count(2, 2, 1).unwrap(), 24);
    for (d, m, r) in [(2, 3, 2), (4, 2, 3), (5, 1, 4)] {
        let n = (d * m * r) as u128;
        let want = oracles::factorial(n) / oracles::factorial(r as u128).pow((d * m) as u32);
        assert_eq!(permutation_count(d, m, r).unwrap(), want);
    }
    assert!(permutation_count(40, 3, 2).is_err());
}

#[test]
fn unselected_blocks_retain_base_layers() {
    let blocks = (0..4).map(|_| block(vec![false; 6], BlockOrdering::Index(0), 1.0)).collect();
    let plan = build_dis_plan(&config(8, 2, 3, 1, blocks), None).unwrap();
    let layers: Vec<(String, usize)> = plan.steps.iter().map(|s| (s.model.clone(), s.layer)).collect();
    let want: Vec<(String, usize)> = (0..8).map(|l| ("base".to_string(), l)).collect();
    assert_eq!(layers, want);
    assert!(!plan.infeasible);
}

#[test]
fn retained_plan_runs_like_the_base_model() {
    let family = make_synthetic_family(6, 4, 2, 3).unwrap();
    let blocks = (0..6).map(|_| block(vec![false; 2], BlockOrdering::Index(0), 1.0)).collect();
    let mut cfg = config(6, 1, 2, 1, blocks);
    cfg.base_model = BASE_MODEL.into();
    let plan = build_dis_plan(&cfg, Some(family.stores())).unwrap();
    let nets: BTreeMap<String, SyntheticNet> =
        family.stores().iter().map(|(id, s)| (id.clone(), SyntheticNet::from_store(s, 4).unwrap())).collect();
    for x in family.probes().iter().take(50) {
        let got = run_plan(&plan, &nets, x).unwrap();
        let want = nets[BASE_MODEL].forward(x).unwrap();
        assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() <= 1e-6));
    }
}

#[test]
fn full_selection_of_forty_layers_is_infeasible() {
    let blocks = (0..40).map(|_| block(vec![true; 3], BlockOrdering::Index(0), 1.0)).collect();
    let cfg = config(40, 1, 3, 1, blocks);
    assert_eq!(cfg.realized_depth(), 120);
    assert!(!cfg.is_feasible());
    let plan = build_dis_plan(&cfg, None).unwrap();
    assert_eq!(plan.len(), 120);
    assert!(plan.infeasible);
}

#[test]
fn priorities_order_active_slots() {
    assert_eq!(priority_ordering(&[0.9, 0.1, 0.5], &[true, true, true]), vec![0, 2, 1]);
    assert_eq!(priority_ordering(&[0.9, 0.1, 0.5], &[false, true, true]), vec![2, 1]);
    let cfg = config(1, 1, 3, 1, vec![block(vec![true; 3], BlockOrdering::Priority(vec![0.9, 0.1, 0.5]), 1.0)]);
    let plan = build_dis_plan(&cfg, None).unwrap();
    let models: Vec<&str> = plan.steps.iter().map(|s| s.model.as_str()).collect();
    assert_eq!(models, ["m0", "m2", "m1"]);
}

#[test]
fn block_scales_multiply_through() {
    let blocks = vec![
        block(vec![true], BlockOrdering::Index(0), 1.5),
        block(vec![true], BlockOrdering::Index(0), 1.0),
    ];
    let plan = build_dis_plan(&config(2, 1, 1, 1, blocks), None).unwrap();
    let out = execute_plan(&plan, &[1.0, -2.0], |_, _, x| Ok(x.iter().map(|v| 2.0 * v).collect())).unwrap();
    assert_eq!(out, vec![6.0, -12.0]);
}

#[test]
fn affine_layers_compose_in_plan_order() {
    // each (model, layer) is x -> a*x + c with distinct coefficients
    let coef = |m: &str, l: usize| {
        let k = m.bytes().map(u64::from).sum::<u64>() as f64 + l as f64;
        (1.0 + 0.1 * k.sin(), 0.3 * k.cos())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let space = DisSpace::new("base", vec!["m0".into(), "m1".into()], 6, 2, 1, 50, OrderingMode::Index).unwrap();
    for _ in 0..20 {
        let cfg = space.sample_config(&mut rng);
        let plan = build_dis_plan(&cfg, None).unwrap();
        let got = execute_plan(&plan, &[0.7], |m, l, x| {
            let (a, c) = coef(m, l);
            Ok(vec![a * x[0] + c])
        })
        .unwrap();
        let mut want = 0.7;
        for (b, blk) in cfg.blocks.iter().enumerate() {
            let slots = cfg.ordered_active_slots(blk).unwrap();
            if slots.is_empty() {
                for d in 0..2 {
                    let (a, c) = coef("base", b * 2 + d);
                    want = a * want + c;
                }
            } else {
                for s in slots {
                    let (m, d) = (s / 2, s % 2);
                    let (a, c) = coef(&format!("m{m}"), b * 2 + d);
                    want = a * want + c;
                }
            }
            want *= blk.scale;
        }
        assert!((got[0] - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
}

#[test]
fn manifest_round_trips_through_text() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let space = DisSpace::new("base", vec!["m0".into(), "m1".into()], 4, 1, 2, 50, OrderingMode::Priority).unwrap();
    for _ in 0..20 {
        let plan = build_dis_plan(&space.sample_config(&mut rng), None).unwrap();
        let text = export_plan(&plan).unwrap();
        let back = import_plan(&text).unwrap();
        assert_eq!(back.steps, plan.steps);
        assert_eq!(back.block_scales, plan.block_scales);
        assert_eq!(export_plan(&back).unwrap(), text);
    }
}

#[test]
fn manifest_structure_is_enforced() {
    let text = r#"{"base_model":"base","D":1,"M":1,"R":1,"blocks":[
        {"layers":[{"model":"m0","layer":1}],"scale":1.0},
        {"layers":[{"model":"m0","layer":1}],"scale":1.0}]}"#;
    let err = import_plan(text).unwrap_err().to_string();
    assert!(err.contains("block 0"), "{err}");
    let mixed = r#"{"base_model":"base","D":1,"M":1,"R":2,"blocks":[
        {"layers":[{"model":"base","layer":0},{"model":"m0","layer":0}],"scale":1.0}]}"#;
    assert!(import_plan(mixed).is_err());
    let scale = r#"{"base_model":"base","D":1,"M":1,"R":1,"blocks":[
        {"layers":[{"model":"m0","layer":0}],"scale":2.0}]}"#;
    assert!(import_plan(scale).is_err());
}

#[test]
fn encoding_round_trips_and_stays_canonical() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for mode in [OrderingMode::Index, OrderingMode::Priority] {
        let space = DisSpace::new("base", vec!["m0".into(), "m1".into()], 6, 3, 1, 10, mode).unwrap();
        for _ in 0..30 {
            let x = space.sample(&mut rng);
            let cfg = space.decode(&x).unwrap();
            assert_eq!(space.encode(&cfg).unwrap(), x);
            assert_eq!(space.is_feasible(&x), cfg.is_feasible());
            let y = space.neighbor(&x, &mut rng);
            assert!(space.decode(&y).unwrap().validate().is_ok());
        }
    }
}
