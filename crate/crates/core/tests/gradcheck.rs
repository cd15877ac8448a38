mod common;

use a2q::model::{GradMode, LossConfig, ModelConfig, ModelParams, QuantMode, QuantTable};
use common::{finite_difference_check, six_node_graph, Kind};

fn run(cfg: ModelConfig, quant: bool, seed: u64) -> common::FdOutcome {
    let (g, x, split) = six_node_graph();
    let mut model = ModelParams::init(cfg, seed).unwrap();
    common::randomize_biases(&mut model, seed);
    let qt = quant.then(|| QuantTable::init(&model, QuantMode::PerNodeLearned, 6, seed + 1).unwrap());
    let loss = LossConfig {
        grad_mode: GradMode::Global,
        lambda: 0.5,
        m_target: Some(1e-3),
    };
    finite_difference_check(&model, qt.as_ref(), &g, &x, &split, &loss, 1e-4)
}

#[test]
fn fp32_gcn_gradients() {
    let o = run(ModelConfig { hidden: 5, ..ModelConfig::gcn(4, 3) }, false, 1);
    eprintln!("checked {} skipped {} worst {:e} kinds {:?}", o.checked, o.skipped, o.worst_rel, o.kinds_checked);
    assert!(o.failures.is_empty(), "{:?}", o.failures);
    assert!(o.checked > 40, "checked {} skipped {}", o.checked, o.skipped);
}

#[test]
fn quantized_gcn_gradients() {
    let cfg = ModelConfig {
        hidden: 5,
        quantize_first_layer: true,
        ..ModelConfig::gcn(4, 3)
    };
    let o = run(cfg, true, 2);
    eprintln!("checked {} skipped {} worst {:e} kinds {:?}", o.checked, o.skipped, o.worst_rel, o.kinds_checked);
    assert!(o.failures.is_empty(), "{:?}", o.failures);
    for k in [Kind::Weight, Kind::Bias, Kind::WeightStep, Kind::ColStep, Kind::NodeStep, Kind::NodeBit] {
        assert!(o.kinds_checked.contains(&k), "{k:?} not exercised: {:?} checked {} skipped {}", o.kinds_checked, o.checked, o.skipped);
    }
}

#[test]
fn quantized_gin_gradients() {
    let cfg = ModelConfig {
        hidden: 5,
        quantize_first_layer: true,
        ..ModelConfig::gin(4, 3)
    };
    let o = run(cfg, true, 3);
    eprintln!("checked {} skipped {} worst {:e} kinds {:?}", o.checked, o.skipped, o.worst_rel, o.kinds_checked);
    assert!(o.failures.is_empty(), "{:?}", o.failures);
    for k in [Kind::Eps, Kind::Bn, Kind::NodeStep, Kind::NodeBit, Kind::ColStep] {
        assert!(o.kinds_checked.contains(&k), "{k:?} not exercised: {:?} checked {} skipped {}", o.kinds_checked, o.checked, o.skipped);
    }
}
