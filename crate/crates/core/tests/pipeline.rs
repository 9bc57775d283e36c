use proptest::prelude::*;

use winoshare::graphopt::{optimize, PassConfig, ProtocolGraph};
use winoshare::netsim::CostModel;
use winoshare::network::{preset, BuildMode, NetworkDesc, BENCH_DIMS};
use winoshare::report::{rows_from_csv, ReportDocument, Totals};
use winoshare::scenario::{layer_comm_cost, run_network, RunOptions};
use winoshare::Error;

const F4_BLOCKS: &str = r#"
schema_version = 1
name = "f4-blocks"
seed = 5

[input]
c = 4
h = 6
w = 6
nonneg = true

[defaults]
l_w = 2
l_a = 4
m = 4

[[layers]]
op = "conv"
name = "stem"
k = 8

[[layers]]
op = "relu"

[[layers]]
op = "residual"
name = "b1"

[[layers]]
op = "residual"
name = "b2"
"#;

fn cm() -> CostModel {
    CostModel::default()
}

#[test]
fn coarse_main_branch_still_joins_exactly() {
    let d = NetworkDesc::from_toml(F4_BLOCKS).unwrap();
    let g = d.build_graph(&BuildMode::AsDescribed).unwrap();
    let (f, _) = optimize(&g, PassConfig::all(), &cm()).unwrap();
    for seed in 0..5 {
        let x = d.sample_input(seed).unwrap();
        let (a, ma) = g.run_metered(&x, cm(), seed).unwrap();
        let (b, mb) = f.run_metered(&x, cm(), seed + 9).unwrap();
        assert_eq!(a.signed_values(), b.signed_values());
        assert!(mb.total_bits() < ma.total_bits());
    }
}

#[test]
fn optimized_graphs_survive_json() {
    let d = preset("minionn-toy").unwrap();
    let g = d.build_graph(&BuildMode::AsDescribed).unwrap();
    let (f, _) = optimize(&g, PassConfig::all(), &cm()).unwrap();
    let back = ProtocolGraph::from_json(&f.to_json().unwrap()).unwrap();
    assert_eq!(back, f);
    let x = d.sample_input(3).unwrap();
    assert_eq!(back.run_metered(&x, cm(), 1).unwrap(), f.run_metered(&x, cm(), 1).unwrap());
}

#[test]
fn reports_are_reproducible_and_consistent() {
    let d = preset("minionn-toy").unwrap();
    let opts = RunOptions {
        waterfall: true,
        ..RunOptions::default()
    };
    let (a, _) = run_network(&d, &opts, cm()).unwrap();
    let (b, _) = run_network(&d, &opts, cm()).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(Totals::of(&rows_from_csv(&a.to_csv()).unwrap()), a.totals);
    assert_eq!(ReportDocument::from_json(&a.to_json().unwrap()).unwrap(), a);
    assert_eq!(a.steps.last().unwrap().predicted_bits, a.totals.total_bits);
}

#[test]
fn wider_activations_cost_more_on_benchmark_shapes() {
    for dims in BENCH_DIMS {
        for opt in [false, true] {
            let a4 = layer_comm_cost(dims, 2, 4, opt, &cm()).unwrap();
            let a6 = layer_comm_cost(dims, 2, 6, opt, &cm()).unwrap();
            assert!(a4 < a6, "{dims:?}");
        }
    }
    assert_eq!(layer_comm_cost((0, 0, 0, 0), 2, 4, true, &cm()).unwrap(), 0);
}

#[test]
fn lambda_validation_is_enforced() {
    let d = preset("minionn-toy").unwrap();
    let bad = CostModel {
        lambda: 0,
        ..CostModel::default()
    };
    assert!(matches!(run_network(&d, &RunOptions::default(), bad), Err(Error::InvalidConfig(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn layer_cost_is_monotone(h in 2usize..10, c in 1usize..6, k in 1usize..6, l_w in 1u32..4, l_a in 3u32..7, opt: bool) {
        let c0 = cm();
        let dims = (h, h, c, k);
        let base = layer_comm_cost(dims, l_w, l_a, opt, &c0).unwrap();
        prop_assert!(layer_comm_cost(dims, l_w + 1, l_a, opt, &c0).unwrap() >= base);
        prop_assert!(layer_comm_cost(dims, l_w, l_a + 1, opt, &c0).unwrap() >= base);
        prop_assert!(layer_comm_cost(dims, l_w, l_a, true, &c0).unwrap() <= layer_comm_cost(dims, l_w, l_a, false, &c0).unwrap());
    }

    #[test]
    fn passes_preserve_outputs_on_random_inputs(seed in 0u64..1000) {
        let d = preset("minionn-toy").unwrap();
        let g = d.build_graph(&BuildMode::AsDescribed).unwrap();
        let (f, _) = optimize(&g, PassConfig::all(), &cm()).unwrap();
        let x = d.sample_input(seed).unwrap();
        let (a, ma) = g.run_metered(&x, cm(), seed).unwrap();
        let (b, mb) = f.run_metered(&x, cm(), seed).unwrap();
        prop_assert_eq!(a.signed_values(), b.signed_values());
        prop_assert!(mb.total_bits() <= ma.total_bits());
    }
}
