use edgeflow::fixtures;
use edgeflow::graph::{HardwareDescriptor, TensorShape};
use edgeflow::pipeline::optimize;
use edgeflow::sim::{
    compare_plans, execute_plan, execute_reference, random_inputs, ExecutionPlan, PassFlags, SimError, TensorMap,
};
use edgeflow::tensor::Tensor;

#[test]
fn linear_layer_matches_hand_computation() {
    let g = fixtures::linear_2x2();
    let mut inputs = TensorMap::new();
    inputs.insert("x".into(), Tensor::from_vec(TensorShape::chw(2, 1, 1), vec![1.0, 2.0]));
    let want = [6.0, 12.0];
    assert_eq!(execute_reference(&g, &inputs, 0).unwrap()["fc"].data, want);
    for flags in [PassFlags::VANILLA, PassFlags::ALL] {
        let o = optimize(&g, &HardwareDescriptor::default(), flags, 0).unwrap();
        let (out, report) = execute_plan(&o.plan, &inputs).unwrap();
        assert_eq!(out["fc"].data, want);
        assert_eq!(report.totals.macs, 4 + 2);
    }
}

#[test]
fn plan_compared_with_itself_is_neutral() {
    let g = fixtures::squeezenet_fire();
    let o = optimize(&g, &HardwareDescriptor::default(), PassFlags::ALL, 3).unwrap();
    let c = compare_plans(&o.plan, &o.plan, &random_inputs(&g, 3)).unwrap();
    assert_eq!(c.speedup, 1.0);
    assert_eq!(c.max_abs_diff, 0.0);
    assert_eq!(c.base_cycles, c.opt_cycles);
}

#[test]
fn reloaded_plan_runs_identically() {
    let g = fixtures::shufflenet_unit();
    let o = optimize(&g, &HardwareDescriptor::default(), PassFlags::ALL, 5).unwrap();
    let reloaded = ExecutionPlan::from_json(&o.plan.to_json()).unwrap();
    let inputs = random_inputs(&g, 5);
    let (a, ra) = execute_plan(&o.plan, &inputs).unwrap();
    let (b, rb) = execute_plan(&reloaded, &inputs).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.to_json(), rb.to_json());
}

#[test]
fn report_totals_add_up_and_memory_fits() {
    let hw = HardwareDescriptor::default();
    for g in fixtures::suite() {
        let o = optimize(&g, &hw, PassFlags::ALL, 1).unwrap();
        let (_, r) = execute_plan(&o.plan, &random_inputs(&g, 1)).unwrap();
        assert_eq!(r.totals.simulated_cycles, r.layers.iter().map(|l| l.cycles).sum::<u64>(), "{}", g.name);
        assert_eq!(r.totals.misses, r.layers.iter().map(|l| l.misses).sum::<u64>());
        for l in &r.layers {
            assert_eq!(l.cycles, *l.unit_cycles.iter().max().unwrap());
        }
        assert!(r.memory.peak_shared_bytes <= hw.shared_bytes);
        let csv = r.to_csv();
        assert!(csv.starts_with("layer,unit,cycles,hits,misses"));
        assert_eq!(csv.lines().count(), 1 + r.layers.len() * hw.unit_count);
    }
}

#[test]
fn malformed_plans_are_rejected() {
    let g = fixtures::mobilenet_block();
    let o = optimize(&g, &HardwareDescriptor::default(), PassFlags::ALL, 0).unwrap();
    let inputs = random_inputs(&g, 0);

    let mut bad_unit = o.plan.clone();
    bad_unit.layers[0].tasks[0].unit = 99;
    assert!(matches!(execute_plan(&bad_unit, &inputs), Err(SimError::PlanValidation(_))));

    let mut missing = o.plan.clone();
    missing.layers.pop();
    assert!(matches!(execute_plan(&missing, &inputs), Err(SimError::PlanValidation(_))));

    let mut reordered = o.plan.clone();
    reordered.layers.swap(0, 1);
    assert!(matches!(execute_plan(&reordered, &inputs), Err(SimError::PlanValidation(_))));
}
