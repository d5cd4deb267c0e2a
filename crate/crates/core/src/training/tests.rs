use super::*;
use crate::backbone::BackboneConfig;
use crate::model::ModelConfig;
use crate::tcmoa::MoaConfig;

fn tiny() -> Settings {
    let mut s = Settings::default();
    s.model = ModelConfig {
        backbone: BackboneConfig {
            image_size: 8,
            patch_size: 2,
            dim: 8,
            encoder_depth: 2,
            decoder_depth: 2,
            heads: 2,
            window: 2,
            tau: 2,
            mlp_ratio: 2.0,
        },
        moa: MoaConfig { experts: 4, top_k: 2, group: 2, bottleneck: Some(2) },
        average_branches: false,
    };
    s.train.batch_per_task = 1;
    s.pretrain.steps = 2;
    s.pretrain.batch = 2;
    s
}

#[test]
fn lr_zero_keeps_every_parameter() {
    let mut s = tiny();
    s.train.lr = 0.0;
    let mut state = TrainState::new(s).unwrap();
    let before = state.model.params.clone();
    train_fusion(&mut state, 3, &mut |_| {}).unwrap();
    for (id, e) in before.iter() {
        assert!(state.model.params.get(id).bitwise_eq(&e.value), "{}", e.name);
    }
    assert_eq!(state.step, 3);
}

#[test]
fn backbone_is_frozen_and_fusion_params_move() {
    let mut state = TrainState::new(tiny()).unwrap();
    let before = state.model.params.clone();
    let history = train_fusion(&mut state, 2, &mut |_| {}).unwrap();
    assert_eq!(history.len(), 2);
    assert_eq!(history[0].terms.len(), 3);
    let mut moved = 0;
    for (id, e) in before.iter() {
        let same = state.model.params.get(id).bitwise_eq(&e.value);
        if e.role.is_backbone() {
            assert!(same, "{} changed", e.name);
        } else if !same {
            moved += 1;
        }
    }
    assert!(moved > 0);
}

#[test]
fn training_is_reproducible() {
    let run = || {
        let mut state = TrainState::new(tiny()).unwrap();
        pretrain_backbone(&mut state, &mut |_, _| {}).unwrap();
        let h = train_fusion(&mut state, 2, &mut |_| {}).unwrap();
        (checkpoint::encode(&state), h)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(ha, hb);
    assert!(a == b);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let mut state = TrainState::new(tiny()).unwrap();
    train_fusion(&mut state, 1, &mut |_| {}).unwrap();
    state.pretrain_mse = Some(0.125);
    let bytes = checkpoint::encode(&state);
    let back = checkpoint::decode(&bytes).unwrap();
    assert_eq!(back.step, 1);
    assert_eq!(back.pretrain_mse, Some(0.125));
    assert_eq!(back.settings, state.settings);
    assert!(checkpoint::encode(&back) == bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    checkpoint::save(&state, &path).unwrap();
    assert!(checkpoint::encode(&checkpoint::load(&path).unwrap()) == bytes);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let state = TrainState::new(tiny()).unwrap();
    let bytes = checkpoint::encode(&state);
    let bad = |b: &[u8]| matches!(checkpoint::decode(b), Err(Error::Format { .. }));
    assert!(bad(b"NOTACKPT"));
    assert!(bad(&bytes[..bytes.len() / 2]));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(bad(&extra));
}

#[test]
fn report_counts_match_declared_shapes() {
    let state = TrainState::new(tiny()).unwrap();
    let r = param_report(&state.model.params);
    assert_eq!(r.frozen + r.trainable, r.total);
    assert_eq!(r.prompt_generation + r.prompt_fusion, r.trainable);
    assert_eq!(r.trainable_ids, state.adam.ids());

    // hand count for C=8, d_b=2, g=2, N=4 over 2 layers
    let (c, db, n) = (8, 2, 4);
    let reduce = 2 * c * c + c + 2 * c;
    let routers = 3 * 2 * c * n;
    let adapters = n * (c * db + db + db * 2 * 2 + 2 * 2);
    let fusion = 3 * 2 * c + 2 * (9 * c * c + c) + 1;
    assert_eq!(r.prompt_generation, 2 * (reduce + routers + adapters));
    assert_eq!(r.prompt_fusion, 2 * fusion);
    // one [w, w, C] table per block
    assert_eq!(r.position_embeddings, 4 * 2 * 2 * c);
}

#[test]
fn mix_seed_separates_streams() {
    assert_ne!(mix_seed(&[0, 1]), mix_seed(&[1, 0]));
    assert_eq!(mix_seed(&[5, 6]), mix_seed(&[5, 6]));
}
