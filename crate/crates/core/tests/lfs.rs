mod support;

use std::collections::BTreeMap;

use mergesearch::evaluator::{make_synthetic_family, synthetic_evaluate, Candidate, BASE_MODEL, MEAN_TASK};
use mergesearch::lfs_space::*;
use mergesearch::merge_kernels::{MergeMethod, MethodKind};
use mergesearch::space::SearchSpace;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::oracles;

const ALL: [MethodKind; 4] = [MethodKind::TaskArithmetic, MethodKind::Ties, MethodKind::Slerp, MethodKind::Linear];

fn uniform_recipe(layers: usize, groups: usize, components: usize, cell: CellSpec) -> LfsRecipe {
    let keys = CellKey::for_components(components);
    LfsRecipe {
        base_model: BASE_MODEL.into(),
        component_count: components,
        groups: assign_layer_groups(layers, groups)
            .unwrap()
            .into_iter()
            .map(|r| LayerGroup {
                range: [*r.start(), *r.end()],
                cells: keys.iter().map(|k| (*k, cell.clone())).collect(),
            })
            .collect(),
        globals: None,
    }
}

#[test]
fn groups_cover_layers_in_near_equal_runs() {
    let g = assign_layer_groups(5, 2).unwrap();
    assert_eq!(g, vec![0..=2, 3..=4]);
    let g = assign_layer_groups(40, 4).unwrap();
    assert!(g.iter().all(|r| r.clone().count() == 10));
    assert!(assign_layer_groups(3, 4).is_err());
}

#[test]
fn encoded_length_follows_layout() {
    let cands: Vec<String> = vec!["m0".into(), "m1".into(), "m2".into()];
    let s = LfsSpace::new(BASE_MODEL, cands.clone(), 12, 4, 3, ALL.to_vec()).unwrap();
    // one-hot (4) + hyperparameters (1 + 2 + 1 + 3) + source mask (3)
    assert_eq!(s.cell_width(), 14);
    assert_eq!(s.encoded_len(), 4 * 3 * 14);
    assert_eq!(s.dim(), s.encoded_len());
    let s1 = LfsSpace::new(BASE_MODEL, cands, 12, 2, 1, vec![MethodKind::Linear]).unwrap();
    assert_eq!(s1.encoded_len(), 2 * (1 + 3 + 3));
}

#[test]
fn sampling_covers_every_method_and_decodes() {
    let cands: Vec<String> = vec!["m0".into(), "m1".into()];
    let s = LfsSpace::new(BASE_MODEL, cands, 6, 2, 3, ALL.to_vec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..200 {
        let x = s.sample(&mut rng);
        let r = s.decode(&x).unwrap();
        assert!(r.validate(Some(6)).is_ok());
        assert_eq!(s.encode(&r).unwrap(), x);
        for g in &r.groups {
            for c in g.cells.values() {
                seen.insert(c.method.kind());
            }
        }
    }
    assert_eq!(seen.len(), 4);
}

#[test]
fn one_layer_slerp_matches_oracle() {
    let family = make_synthetic_family(1, 3, 2, 8).unwrap();
    let stores = family.stores();
    let cell = CellSpec::new(MergeMethod::Slerp { t: 0.3 }, vec!["m0", "m1"]);
    let merged = build_lfs_model(&uniform_recipe(1, 1, 1, cell), stores).unwrap();
    for rec in stores[BASE_MODEL].tensors() {
        let a = stores["m0"].get(rec.name()).unwrap().to_f32();
        let b = stores["m1"].get(rec.name()).unwrap().to_f32();
        let got = merged.get(rec.name()).unwrap().to_f32();
        assert!(oracles::close_rel(&got, &oracles::slerp(&a, &b, 0.3), 1e-6), "{}", rec.name());
    }
}

#[test]
fn cells_apply_per_component() {
    let family = make_synthetic_family(4, 3, 2, 9).unwrap();
    let stores = family.stores();
    let mut recipe = uniform_recipe(4, 2, 3, CellSpec::new(MergeMethod::TaskArithmetic { lambda: 0.0 }, vec!["m0"]));
    recipe.groups[1].cells.insert(CellKey::Mlp, CellSpec::new(MergeMethod::Linear { weights: vec![1.0] }, vec!["m1"]));
    let merged = build_lfs_model(&recipe, stores).unwrap();
    for rec in merged.tensors() {
        let (layer, class) = mergesearch::tensor_store::classify_parameter(rec.name());
        let from_m1 = layer.is_some_and(|l| l >= 2) && class == mergesearch::tensor_store::ComponentClass::Mlp;
        let want = if from_m1 { &stores["m1"] } else { &stores[BASE_MODEL] };
        assert_eq!(rec.raw(), want.get(rec.name()).unwrap().raw(), "{}", rec.name());
    }
}

#[test]
fn uniform_linear_recipe_hits_the_mean_target() {
    for components in [1, 3] {
        let family = make_synthetic_family(4, 4, 3, 21).unwrap();
        let w = vec![1.0 / 3.0; 3];
        let cell = CellSpec::new(MergeMethod::Linear { weights: w }, vec!["m0", "m1", "m2"]);
        let merged = build_lfs_model(&uniform_recipe(4, 2, components, cell), family.stores()).unwrap();
        let cost = synthetic_evaluate(&Candidate::Store(&merged), &family, &[MEAN_TASK.into()], 1000).unwrap();
        assert!(cost.costs[0] <= 1e-10, "{:?}", cost.costs);
    }
}

#[test]
fn missing_and_malformed_recipes_are_rejected() {
    let family = make_synthetic_family(2, 3, 1, 1).unwrap();
    let cell = CellSpec::new(MergeMethod::TaskArithmetic { lambda: 0.5 }, vec!["nope"]);
    assert!(build_lfs_model(&uniform_recipe(2, 1, 1, cell), family.stores()).is_err());
    let bad = CellSpec::new(MergeMethod::Slerp { t: 0.5 }, vec!["m0", "base", "m0"]);
    assert!(!uniform_recipe(2, 1, 1, bad).violations(Some(2)).is_empty());
    let empty: BTreeMap<String, _> = BTreeMap::new();
    let ok = CellSpec::new(MergeMethod::TaskArithmetic { lambda: 0.5 }, vec!["m0"]);
    assert!(build_lfs_model(&uniform_recipe(2, 1, 1, ok), &empty).is_err());
}

#[test]
fn recipe_json_round_trips() {
    let s = LfsSpace::new(BASE_MODEL, vec!["m0".into(), "m1".into()], 6, 3, 3, ALL.to_vec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let r = s.sample_recipe(&mut rng);
        assert_eq!(LfsRecipe::from_json(&r.to_json_pretty().unwrap()).unwrap(), r);
    }
}
