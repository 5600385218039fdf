mod common;

use std::collections::BTreeMap;

use common::{compaction_worst, random_consistent_masks, randn, rng};
use cpd_core::combing::build_coupling_groups;
use cpd_core::graph::{compact, execute, init_params, Model};
use cpd_core::harness::zoo::{zoo_build, ZOO};

#[test]
fn compacted_models_reproduce_masked_outputs() {
    for name in ZOO.iter().filter(|n| **n != "attention-large") {
        let err = compaction_worst(name, 10, 1);
        assert!(err <= 1e-6, "{name}: {err}");
    }
}

#[test]
fn mac_estimate_matches_the_tape_count() {
    let mut r = rng(4);
    for name in ZOO {
        let graph = zoo_build(name).unwrap();
        let model = Model::new(graph.clone(), init_params(&graph, &mut r)).unwrap();
        let scheme = build_coupling_groups(&graph).unwrap();
        let small = compact(&model, &scheme, &random_consistent_masks(&scheme, &mut r)).unwrap();
        for m in [&model, &small] {
            let input = &m.graph.named_inputs()[0];
            let batch = 3;
            let shape = m.graph.node(input).unwrap().shape.tensor_shape(batch);
            let exec = execute(m, &BTreeMap::from([(input.clone(), randn(&shape, &mut r))]), false).unwrap();
            assert_eq!(exec.tape.macs(), batch as u64 * m.graph.macs_per_sample(), "{name}");
        }
    }
}
