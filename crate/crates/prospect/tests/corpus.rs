use std::collections::BTreeSet;
use std::path::PathBuf;

use prospect::arch::{check_constant_time, check_ct_up_to_decl};
use prospect::config::ScenarioFile;
use prospect::corpus::{all_gadgets, export_files, get_gadget, gadgets_tagged, mix, GadgetTag, GADGET_NAMES};
use prospect::isa::parse_program;

fn shipped_corpus() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

#[test]
fn catalog_names_resolve_and_are_unique() {
    let gadgets = all_gadgets();
    assert_eq!(gadgets.len(), GADGET_NAMES.len());
    let names: BTreeSet<_> = gadgets.iter().map(|g| g.name).collect();
    let stems: BTreeSet<_> = gadgets.iter().map(|g| g.stem).collect();
    assert_eq!(names.len(), gadgets.len());
    assert_eq!(stems.len(), gadgets.len());
    let err = get_gadget("spectre-v9").unwrap_err();
    assert!(err.to_string().contains("spectre-pht"), "{err}");
}

#[test]
fn sources_parse_to_the_catalogued_programs() {
    for g in all_gadgets() {
        let p = parse_program(g.source).unwrap_or_else(|e| panic!("{}: {e}", g.name));
        assert_eq!(p.instructions(), g.program.instructions(), "{}", g.name);
        assert_eq!(p.entry(), g.program.entry(), "{}", g.name);
    }
}

#[test]
fn tag_sets() {
    let names = |t| gadgets_tagged(t).iter().map(|g| g.name).collect::<Vec<_>>();
    assert_eq!(names(GadgetTag::LeaksInsecure), ["spectre-pht", "spectre-btb", "spectre-stl", "lvi"]);
    assert_eq!(
        names(GadgetTag::CtPlain),
        ["spectre-pht", "spectre-btb", "spectre-stl", "lvi", "example2"]
    );
    assert_eq!(names(GadgetTag::CtUpToDecl), ["listing2", "listing3", "declassify-public"]);
    assert_eq!(names(GadgetTag::RollbackDemo), ["example2"]);
    assert_eq!(names(GadgetTag::ClassicalDeclDemo), ["listing3"]);
    assert!(get_gadget("spt").unwrap().tags.is_empty());
}

#[test]
fn leaky_gadgets_ship_an_attack() {
    for g in gadgets_tagged(GadgetTag::LeaksInsecure) {
        assert!(g.attack.is_some(), "{}", g.name);
    }
}

#[test]
fn catalogued_software_preconditions_hold() {
    for g in gadgets_tagged(GadgetTag::CtPlain) {
        let v = check_constant_time(&g.scenario(), g.steps, 64, 1);
        assert!(v.is_pass(), "{}: {v:?}", g.name);
    }
    for g in gadgets_tagged(GadgetTag::CtUpToDecl) {
        let v = check_ct_up_to_decl(&g.scenario(), g.steps, 64, 1);
        assert!(v.is_pass(), "{}: {v:?}", g.name);
        assert!(!check_constant_time(&g.scenario(), g.steps, 64, 1).is_pass() || g.name == "declassify-public");
    }
}

#[test]
fn mix_is_injective_on_small_inputs() {
    let images: BTreeSet<_> = (0..4096u64).map(mix).collect();
    assert_eq!(images.len(), 4096);
}

#[test]
fn shipped_corpus_matches_the_catalog() {
    let dir = shipped_corpus();
    let mut expected = BTreeSet::new();
    for g in all_gadgets() {
        for (name, contents) in export_files(&g) {
            let path = dir.join(&name);
            let on_disk = std::fs::read_to_string(&path)
                .unwrap_or_else(|e| panic!("{}: {e} (re-export with `prospect export`)", path.display()));
            assert_eq!(on_disk, contents, "{name} is stale (re-export with `prospect export`)");
            expected.insert(name);
        }
    }
    let present: BTreeSet<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(present, expected, "unexpected files in corpus/");
}

#[test]
fn shipped_scenarios_load_like_the_catalog() {
    for g in all_gadgets() {
        let t = ScenarioFile::load(&shipped_corpus().join(format!("{}.json", g.stem))).unwrap();
        assert_eq!(t.name, g.name);
        assert_eq!(t.steps, g.steps);
        assert_eq!(t.attack, g.attack);
        let (a, b) = (t.scenario, g.scenario());
        assert_eq!(a.program.instructions(), b.program.instructions());
        assert_eq!(a.partition, b.partition);
        assert_eq!(a.init, b.init);
        assert_eq!(a.sites(), b.sites());
    }
}
