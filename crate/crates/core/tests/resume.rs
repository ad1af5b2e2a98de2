use omoe_core::checkpoint::{
    load_model, load_optimizer, model_to_json, save_model, save_optimizer, OptimizerCheckpoint,
};
use omoe_core::linalg::Rng;
use omoe_core::model::{init_model, InitMode, ModelDims, MoEModel, RoutingMode};
use omoe_core::omoe::{OMoEConfig, OMoEState};
use omoe_core::optim::{BaseOptimizer, OptimizerConfig, OptimizerKind};
use omoe_core::tasks::{batches, gen_subspace_clusters, Batch, BatchPlan, Shuffle, SubspaceClusters};

fn setup() -> (MoEModel, OMoEState, Vec<Batch>) {
    let spec = SubspaceClusters {
        d_raw: 12,
        n_per_cluster: 60,
        subspace_dim: 3,
        ..SubspaceClusters::default()
    };
    let data = gen_subspace_clusters(&mut Rng::new(5), &spec).unwrap();
    let dims = ModelDims {
        d_raw: 12,
        d: 6,
        h: 10,
        c: 4,
    };
    let model = init_model(&mut Rng::new(6), dims, 3, InitMode::Replicate, RoutingMode::Top1Hard).unwrap();
    let plan = BatchPlan {
        seed: 8,
        batch_size: 16,
        epochs: 3,
        shuffle: Shuffle::PerEpoch,
    };
    let batches = batches(&data, &plan).unwrap();
    let config = OMoEConfig {
        s: 3,
        ..OMoEConfig::default()
    };
    let base = BaseOptimizer::new(OptimizerConfig::new(OptimizerKind::Adamw, 3e-3));
    let state = OMoEState::new(base, config, &model, batches.len() as u64).unwrap();
    (model, state, batches)
}

fn train(model: &mut MoEModel, state: &mut OMoEState, batches: &[Batch]) {
    for b in batches {
        state.step_dispatch(model, &b.x, &b.y).unwrap();
    }
}

#[test]
fn resuming_from_checkpoints_reproduces_the_trajectory() {
    let (mut model, mut state, batches) = setup();
    let cut = 17; // mid-way between O steps, so buffers hold pending means
    train(&mut model, &mut state, &batches[..cut]);
    assert!(state.buffers().values().any(|b| !b.is_empty()));

    let dir = tempfile::tempdir().unwrap();
    save_model(&model, &dir.path().join("model.json")).unwrap();
    save_optimizer(&OptimizerCheckpoint::OMoE(state.clone()), &dir.path().join("opt.json")).unwrap();

    train(&mut model, &mut state, &batches[cut..]);

    let mut resumed_model = load_model(&dir.path().join("model.json")).unwrap();
    let OptimizerCheckpoint::OMoE(mut resumed) = load_optimizer(&dir.path().join("opt.json")).unwrap() else {
        panic!("expected an OMoE checkpoint");
    };
    train(&mut resumed_model, &mut resumed, &batches[cut..]);

    assert_eq!(model_to_json(&model).unwrap(), model_to_json(&resumed_model).unwrap());
    assert_eq!(state.counters(), resumed.counters());
    for (key, p) in state.projectors() {
        let q = resumed.projector(key.0, key.1);
        let bits = |m: &omoe_core::Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(p.matrix()), bits(q.matrix()));
    }
}

#[test]
fn base_optimizer_checkpoint_round_trips() {
    let (mut model, _, batches) = setup();
    let mut opt = BaseOptimizer::new(OptimizerConfig::new(OptimizerKind::Rmsprop, 1e-3));
    for b in &batches[..5] {
        let (_, tape) = model.forward(&b.x).unwrap();
        let (g, _) = omoe_core::backprop::backward(&model, &tape, &b.y).unwrap();
        opt.step(&mut model, &g).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("opt.json");
    save_optimizer(&OptimizerCheckpoint::Base(opt.clone()), &path).unwrap();
    match load_optimizer(&path).unwrap() {
        OptimizerCheckpoint::Base(back) => assert_eq!(back, opt),
        OptimizerCheckpoint::OMoE(_) => panic!("kind changed in round trip"),
    }
}
