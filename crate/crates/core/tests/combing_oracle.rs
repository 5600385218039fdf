mod common;

use common::{oracle_groups, random_dag, rng, scheme_as_oracle, DagConfig};
use cpd_core::combing::build_coupling_groups;
use cpd_core::graph::{parse_graph, OpCategory};
use cpd_core::harness::zoo::{zoo_build, ZOO};
use proptest::prelude::*;

#[test]
fn zoo_graphs_match_the_label_oracle() {
    for name in ZOO {
        let g = zoo_build(name).unwrap();
        let s = build_coupling_groups(&g).unwrap();
        assert_eq!(scheme_as_oracle(&s), oracle_groups(&g), "{name}");
    }
}

#[test]
fn generator_respects_its_bounds() {
    let mut r = rng(11);
    let mut coupled = 0;
    for _ in 0..100 {
        let g = random_dag(&DagConfig::default(), &mut r);
        let stops = g.stop_ops().count();
        let couplings = g.iter().filter(|n| n.kind.category() == OpCategory::Coupling).count();
        assert!(stops <= 12 && couplings <= 4, "{stops} stops, {couplings} couplings");
        coupled += usize::from(couplings > 0);
    }
    assert!(coupled > 50, "only {coupled} graphs have couplings");
}

#[test]
fn partial_binding_pins_but_does_not_merge() {
    let g = parse_graph(
        "x = input() {channels=4, layout=tokens, tokens=3}
         a = linear(x) {out=2}
         b = linear(x) {out=3}
         c = linear(x) {out=5}
         cat = concat(a, b)
         s = add(cat, c)
         fc = linear(s) {out=2}
         y = output(fc)",
    )
    .unwrap();
    let s = build_coupling_groups(&g).unwrap();
    assert_eq!(scheme_as_oracle(&s), oracle_groups(&g));
    assert_eq!(s.groups.len(), 4);
    assert!(s.groups.iter().all(|g| !g.prunable));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_dags_match_the_label_oracle(seed in any::<u64>()) {
        let g = random_dag(&DagConfig::default(), &mut rng(seed));
        let s = build_coupling_groups(&g).unwrap();
        prop_assert_eq!(scheme_as_oracle(&s), oracle_groups(&g), "{}", g);
    }

    #[test]
    fn every_stop_op_lands_in_exactly_one_group(seed in any::<u64>()) {
        let g = random_dag(&DagConfig::default(), &mut rng(seed));
        let s = build_coupling_groups(&g).unwrap();
        let mut seen: Vec<&str> = s.groups.iter().flat_map(|g| g.producers.iter().map(String::as_str)).collect();
        seen.sort();
        let mut stops: Vec<&str> = g.stop_ops().map(|n| n.id.as_str()).collect();
        stops.sort();
        prop_assert_eq!(seen, stops);
        for grp in &s.groups {
            for p in &grp.producers {
                prop_assert_eq!(g.node(p).unwrap().out_channels(), grp.channels);
            }
        }
    }
}
