use tcmoa_core::autodiff::Tensor;
use tcmoa_core::backbone::BackboneConfig;
use tcmoa_core::config::Settings;
use tcmoa_core::data::generate;
use tcmoa_core::model::ModelConfig;
use tcmoa_core::params::ParamRole;
use tcmoa_core::tcmoa::{MoaConfig, PromptControl, Task};
use tcmoa_core::training::{checkpoint, pretrain_backbone, train_fusion, TrainState};

fn small() -> Settings {
    let mut s = Settings::default();
    s.model = ModelConfig {
        backbone: BackboneConfig {
            image_size: 16,
            patch_size: 4,
            dim: 16,
            encoder_depth: 4,
            decoder_depth: 2,
            heads: 2,
            window: 2,
            tau: 2,
            mlp_ratio: 2.0,
        },
        moa: MoaConfig::default(),
        average_branches: false,
    };
    s.pretrain.steps = 40;
    s.pretrain.batch = 2;
    s.train.batch_per_task = 1;
    s
}

fn l1(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.numel() as f64
}

#[test]
fn pretraining_lowers_reconstruction_error() {
    let mut state = TrainState::new(small()).unwrap();
    let report = pretrain_backbone(&mut state, &mut |_, _| {}).unwrap();
    assert!(report.final_mse < report.initial_mse, "{report:?}");
    assert_eq!(report.history.len(), 40);
    assert_eq!(state.pretrain_mse, Some(report.final_mse));
}

#[test]
fn full_shift_to_x_removes_sensitivity_to_y() {
    let state = TrainState::new(small()).unwrap();
    let params = state.model.params.clone();
    let pair = generate(Task::Vif, 4, 16);
    let nudged = pair.y.map(|v| (v + 0.2).min(1.0));
    let sensitivity = |alpha: f64, beta: f64| {
        let c = Some(PromptControl::Affine { alpha, beta });
        let a = state.model.infer(&params, &pair.x, &pair.y, Task::Vif, c).unwrap().fused;
        let b = state.model.infer(&params, &pair.x, &nudged, Task::Vif, c).unwrap().fused;
        l1(&a, &b)
    };
    let plain = sensitivity(1.0, 0.0);
    let shifted = sensitivity(0.0, 0.5);
    assert!(plain > 0.0);
    assert!(shifted < plain, "{shifted} vs {plain}");
}

#[test]
fn prompt_control_reaches_every_layer() {
    let state = TrainState::new(small()).unwrap();
    let pair = generate(Task::Mff, 2, 16);
    let c = Some(PromptControl::Affine { alpha: 0.0, beta: 0.25 });
    let out = state.model.infer(&state.model.params, &pair.x, &pair.y, Task::Mff, c).unwrap();
    assert_eq!(out.prompts.len(), 3);
    for p in &out.prompts {
        for pair in p.data().chunks(2) {
            assert!((pair[0] - 0.75).abs() < 1e-12 && (pair[1] - 0.25).abs() < 1e-12);
        }
    }
}

#[test]
fn ema_shadows_lag_live_weights_after_training() {
    let mut state = TrainState::new(small()).unwrap();
    train_fusion(&mut state, 2, &mut |_| {}).unwrap();
    let ema = state.inference_params();
    let mut lagging = 0;
    for (id, e) in state.model.params.iter() {
        let same = ema.get(id).bitwise_eq(&e.value);
        if e.role.has_ema() {
            lagging += usize::from(!same);
        } else {
            assert!(same, "{} should not be shadowed", e.name);
        }
    }
    assert!(lagging > 0);
    state.settings.infer.use_ema = false;
    let live = state.inference_params();
    assert!(state.model.params.iter().all(|(id, e)| live.get(id).bitwise_eq(&e.value)));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let mut straight = TrainState::new(small()).unwrap();
    train_fusion(&mut straight, 3, &mut |_| {}).unwrap();

    let mut first = TrainState::new(small()).unwrap();
    train_fusion(&mut first, 1, &mut |_| {}).unwrap();
    let mut resumed = checkpoint::decode(&checkpoint::encode(&first)).unwrap();
    train_fusion(&mut resumed, 2, &mut |_| {}).unwrap();
    assert!(checkpoint::encode(&resumed) == checkpoint::encode(&straight));
}

#[test]
fn non_finite_training_aborts_and_names_the_term() {
    let mut state = TrainState::new(small()).unwrap();
    let id = state.model.params.ids_where(|r| r == ParamRole::LambdaF)[0];
    *state.model.params.get_mut(id) = Tensor::full(vec![1], f64::NAN);
    let err = train_fusion(&mut state, 1, &mut |_| {}).unwrap_err().to_string();
    assert!(err.contains("vif ssim loss"), "{err}");
    assert_eq!(state.step, 0);
}
