#![no_main]

use libfuzzer_sys::fuzz_target;
use mergesearch::lfs_space::LfsRecipe;
use mergesearch::sfs_space::SfsConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(recipe) = LfsRecipe::from_json(text) {
        let _ = recipe.violations(None);
        let _ = recipe.violations(Some(8));
        let _ = recipe.referenced_models();
        let back = LfsRecipe::from_json(&recipe.to_json_pretty().unwrap()).unwrap();
        assert_eq!(back, recipe);
    }
    if let Ok(config) = SfsConfig::from_json(text) {
        let _ = config.violations();
    }
});
