use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use super::*;
use crate::autodiff::Tape;

const DIM: usize = 8;

fn layer_with(cfg: MoaConfig, seed: u64) -> (ParamStore, MoaLayer) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = MoaLayer::new(&mut store, &mut rng, "moa", DIM, cfg).unwrap();
    (store, layer)
}

fn layer(seed: u64) -> (ParamStore, MoaLayer) {
    layer_with(MoaConfig { group: 2, ..Default::default() }, seed)
}

fn random_grid(h: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![h, h, DIM], |_| rng.gen_range(-1.0..1.0))
}

fn set(store: &mut ParamStore, id: ParamId, value: Tensor) {
    assert_eq!(store.get(id).shape(), value.shape());
    *store.get_mut(id) = value;
}

fn zero(store: &mut ParamStore, id: ParamId) {
    let shape = store.get(id).shape().to_vec();
    set(store, id, Tensor::zeros(shape));
}

/// One token whose logits under the VIF router are exactly `logits`.
fn gate_for_logits(cfg: MoaConfig, logits: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let n = cfg.experts;
    let (mut store, layer) = layer_with(cfg, 0);
    let w = Tensor::from_fn(vec![DIM, n], |i| if i < n { logits[i] } else { 0.0 });
    set(&mut store, layer.routers[0].w_gate, w);
    let tape = Tape::new();
    let p = store.bind(&tape, |_| false);
    let phi = tape.constant(Tensor::from_fn(vec![1, 1, DIM], |i| if i == 0 { 1.0 } else { 0.0 }));
    let g = layer.gate(&p, phi, Task::Vif, None).unwrap();
    (g.weights.value().data().to_vec(), g.selected[0].clone())
}

#[test]
fn top_two_of_four_logits() {
    let (w, sel) = gate_for_logits(MoaConfig::default(), &[2.0, 1.0, 0.0, -1.0]);
    let e = std::f64::consts::E;
    assert_eq!(sel, vec![0, 1]);
    assert!((w[0] - e / (e + 1.0)).abs() < 1e-12);
    assert!((w[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    assert!((w[0] - 0.7311).abs() < 1e-4 && (w[1] - 0.2689).abs() < 1e-4);
    assert_eq!(&w[2..], &[0.0, 0.0]);
}

#[test]
fn equal_logits_pick_lowest_indices() {
    let (w, sel) = gate_for_logits(MoaConfig::default(), &[0.3; 4]);
    assert_eq!(sel, vec![0, 1]);
    assert_eq!(w, vec![0.5, 0.5, 0.0, 0.0]);
}

#[test]
fn full_k_is_dense_softmax() {
    let logits = [0.4, -1.3, 2.2, 0.1];
    let (w, sel) = gate_for_logits(MoaConfig { top_k: 4, ..Default::default() }, &logits);
    assert_eq!(sel, vec![0, 1, 2, 3]);
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    for (a, l) in w.iter().zip(logits) {
        assert!((a - l.exp() / z).abs() < 1e-12);
    }
}

#[test]
fn eval_gate_is_deterministic_and_training_noise_uses_rng() {
    let (mut store, layer) = layer(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noisy = Tensor::from_fn(vec![DIM, 4], |_| rng.gen_range(-1.0..1.0));
    set(&mut store, layer.routers[1].w_noise, noisy);
    let phi = random_grid(4, 5);
    let run = |noise: Option<u64>| {
        let tape = Tape::new();
        let p = store.bind(&tape, |_| false);
        let mut rng = noise.map(ChaCha8Rng::seed_from_u64);
        let g = layer.gate(&p, tape.constant(phi.clone()), Task::Mef, rng.as_mut()).unwrap();
        g.weights.value()
    };
    assert!(run(None).bitwise_eq(&run(None)));
    assert!(run(Some(1)).bitwise_eq(&run(Some(1))));
    assert!(!run(Some(1)).bitwise_eq(&run(None)));
}

proptest! {
    #[test]
    fn gates_have_k_positive_weights_summing_to_one(seed in 0u64..1000, k in 1usize..=4) {
        let (store, layer) = layer_with(MoaConfig { top_k: k, group: 2, ..Default::default() }, seed);
        let tape = Tape::new();
        let p = store.bind(&tape, |_| false);
        let phi = tape.constant(random_grid(4, seed + 1).map(|v| v * 3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = if seed % 2 == 0 { Some(&mut rng) } else { None };
        let g = layer.gate(&p, phi, Task::Mff, noise).unwrap();
        let w = g.weights.value();
        for row in w.data().chunks(4) {
            prop_assert_eq!(row.iter().filter(|&&v| v > 0.0).count(), k);
            prop_assert_eq!(row.iter().filter(|&&v| v != 0.0).count(), k);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn prompt_values_stay_inside_unit_interval(seed in 0u64..1000, scale in 0.1f64..4.0) {
        let (store, layer) = layer(seed);
        let tape = Tape::new();
        let p = store.bind(&tape, |_| false);
        let phi = tape.constant(random_grid(2, seed).map(|v| v * scale));
        let g = layer.gate(&p, phi, Task::Vif, None).unwrap();
        let prompt = layer.generate_prompt(&p, phi, &g).unwrap().value();
        prop_assert_eq!(prompt.shape(), &[2, 2, 2]);
        prop_assert!(prompt.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn adapter_map_ignores_monotone_rescaling(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::from_fn(vec![16, 4], |_| rng.gen_range(0.0..1.0));
        let warped = w.map(|v| (3.0 * v).exp() - 7.0);
        prop_assert_eq!(adapter_map(&w), adapter_map(&warped));
    }
}

#[test]
fn zeroed_adapters_give_exact_half_prompt() {
    let (mut store, layer) = layer(6);
    for a in &layer.adapters {
        for id in [a.up.weight, a.up.bias] {
            zero(&mut store, id);
        }
    }
    let tape = Tape::new();
    let p = store.bind(&tape, |_| false);
    let phi = tape.constant(random_grid(4, 7));
    let g = layer.gate(&p, phi, Task::Vif, None).unwrap();
    let prompt = layer.generate_prompt(&p, phi, &g).unwrap();
    assert!(prompt.value().data().iter().all(|&v| v == 0.5));
    assert_eq!(mir_penalty(prompt).unwrap().item(), 0.0);
}

/// Straight-line adapter: down, tanh-gelu, up.
fn adapter_oracle(store: &ParamStore, a: &Adapter, token: &[f64]) -> Vec<f64> {
    let lin = |x: &[f64], l: &Linear| -> Vec<f64> {
        let w = store.get(l.weight);
        let b = store.get(l.bias);
        let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
        (0..n_out).map(|j| b.data()[j] + (0..n_in).map(|i| x[i] * w.data()[i * n_out + j]).sum::<f64>()).collect()
    };
    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
    let hidden: Vec<f64> = lin(token, &a.down).into_iter().map(gelu).collect();
    lin(&hidden, &a.up)
}

#[test]
fn single_active_adapter_matches_oracle() {
    let cfg = MoaConfig { top_k: 1, group: 3, ..Default::default() };
    let (mut store, layer) = layer_with(cfg, 8);
    // column 2 dominates for positive first channel
    let w = Tensor::from_fn(vec![DIM, 4], |i| if i == 2 { 50.0 } else { 0.0 });
    set(&mut store, layer.routers[2].w_gate, w);
    let mut grid = random_grid(2, 9);
    for (i, v) in grid.data_mut().iter_mut().enumerate() {
        if i % DIM == 0 {
            *v = 0.5 + v.abs();
        }
    }
    let tape = Tape::new();
    let p = store.bind(&tape, |_| false);
    let phi = tape.constant(grid.clone());
    let g = layer.gate(&p, phi, Task::Mff, None).unwrap();
    assert!(g.selected.iter().all(|s| s == &[2]));
    assert!(g.weights.value().data().chunks(4).all(|r| r == [0.0, 0.0, 1.0, 0.0]));
    let prompt = layer.generate_prompt(&p, phi, &g).unwrap().value();
    for (t, token) in grid.data().chunks(DIM).enumerate() {
        let s: Vec<f64> = adapter_oracle(&store, &layer.adapters[2], token).into_iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let px = s[..3].iter().sum::<f64>() / 3.0;
        let py = s[3..].iter().sum::<f64>() / 3.0;
        assert!((prompt.data()[2 * t] - px).abs() < 1e-12);
        assert!((prompt.data()[2 * t + 1] - py).abs() < 1e-12);
    }
}

#[test]
fn unit_group_prompt_is_plain_sigmoid_of_mixture() {
    let cfg = MoaConfig { group: 1, ..Default::default() };
    let (store, layer) = layer_with(cfg, 10);
    let grid = random_grid(2, 11);
    let tape = Tape::new();
    let p = store.bind(&tape, |_| false);
    let phi = tape.constant(grid.clone());
    let g = layer.gate(&p, phi, Task::Vif, None).unwrap();
    let w = g.weights.value();
    let prompt = layer.generate_prompt(&p, phi, &g).unwrap().value();
    for (t, token) in grid.data().chunks(DIM).enumerate() {
        let mut s = [0.0; 2];
        for (i, a) in layer.adapters.iter().enumerate() {
            let out = adapter_oracle(&store, a, token);
            for c in 0..2 {
                s[c] += w.data()[t * 4 + i] * out[c];
            }
        }
        for c in 0..2 {
            assert!((prompt.data()[2 * t + c] - 1.0 / (1.0 + (-s[c]).exp())).abs() < 1e-12);
        }
    }
}

#[test]
fn mir_examples() {
    let tape = Tape::new();
    let constant = |px: f64, py: f64| tape.constant(Tensor::from_fn(vec![2, 3, 2], |i| if i % 2 == 0 { px } else { py }));
    assert_eq!(mir_penalty(constant(0.5, 0.5)).unwrap().item(), 0.0);
    assert!((mir_penalty(constant(0.7, 0.5)).unwrap().item() - 0.2).abs() < 1e-12);
    assert!(mir_penalty(constant(0.2, 0.8)).unwrap().item().abs() < 1e-15);
}

#[test]
fn reduce_is_equivariant_to_swapped_weight_halves() {
    let (mut store, layer) = layer(12);
    let fx = random_grid(2, 13);
    let fy = random_grid(2, 14);
    let run = |store: &ParamStore, a: &Tensor, b: &Tensor| {
        let tape = Tape::new();
        let p = store.bind(&tape, |_| false);
        layer.reduce_pair(&p, tape.constant(a.clone()), tape.constant(b.clone())).unwrap().value()
    };
    let before = run(&store, &fx, &fy);
    assert_eq!(before.shape(), &[2, 2, DIM]);
    let w = store.get(layer.reduce.weight).clone();
    let swapped = Tensor::from_fn(vec![2 * DIM, DIM], |i| {
        let (r, c) = (i / DIM, i % DIM);
        w.data()[((r + DIM) % (2 * DIM)) * DIM + c]
    });
    set(&mut store, layer.reduce.weight, swapped);
    let after = run(&store, &fy, &fx);
    assert!(before.max_abs_diff(&after) < 1e-12);
}

#[test]
fn zero_pair_reduces_to_zero() {
    let (store, layer) = layer(15);
    let tape = Tape::new();
    let p = store.bind(&tape, |_| false);
    let z = tape.constant(Tensor::zeros(vec![2, 2, DIM]));
    let phi = layer.reduce_pair(&p, z, z).unwrap().value();
    assert!(phi.data().iter().all(|&v| v == 0.0));
    let other = tape.constant(Tensor::zeros(vec![2, 2, DIM + 1]));
    assert!(layer.reduce_pair(&p, z, other).is_err());
}

fn fuse(
    store: &ParamStore,
    layer: &MoaLayer,
    fx: &Tensor,
    fy: &Tensor,
    task: Task,
    control: Option<PromptControl>,
) -> (Tensor, Tensor, Tensor) {
    let tape = Tape::new();
    let p = store.bind(&tape, |_| false);
    let out = layer.fuse_step(&p, tape.constant(fx.clone()), tape.constant(fy.clone()), task, None, control).unwrap();
    (out.fx.value(), out.fy.value(), out.trace.prompt.value())
}

#[test]
fn lambda_one_passes_sources_through() {
    let (mut store, layer) = layer(16);
    set(&mut store, layer.lambda_f, Tensor::ones(vec![1]));
    let (fx, fy) = (random_grid(4, 17), random_grid(4, 18));
    let (ox, oy, _) = fuse(&store, &layer, &fx, &fy, Task::Vif, None);
    assert!(ox.bitwise_eq(&fx) && oy.bitwise_eq(&fy));
}

#[test]
fn lambda_zero_collapses_branches() {
    let (mut store, layer) = layer(19);
    zero(&mut store, layer.lambda_f);
    let (fx, fy) = (random_grid(4, 20), random_grid(4, 21));
    let (ox, oy, _) = fuse(&store, &layer, &fx, &fy, Task::Mef, None);
    assert!(ox.bitwise_eq(&oy));
}

fn identity_kernel() -> Tensor {
    Tensor::from_fn(vec![3, 3, DIM, DIM], |i| {
        let (tap, cin, cout) = (i / (DIM * DIM), (i / DIM) % DIM, i % DIM);
        if tap == 4 && cin == cout {
            1.0
        } else {
            0.0
        }
    })
}

#[test]
fn unit_prompt_with_identity_convs_sums_sources() {
    // The fusion input is exactly f_x + f_y; the identity-configured conv
    // pair then reduces to the activation between them.
    let (mut store, layer) = layer(22);
    set(&mut store, layer.conv1.kernel, identity_kernel());
    set(&mut store, layer.conv2.kernel, identity_kernel());
    zero(&mut store, layer.lambda_f);
    let (fx, fy) = (random_grid(4, 23), random_grid(4, 24));
    let sum = fx.zip_map(&fy, |a, b| a + b).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape, |_| false);
    let conv = layer.fusion_convs(&p, tape.constant(sum.clone())).unwrap().value();
    assert!(conv.bitwise_eq(&tape.constant(sum).gelu().unwrap().value()));
    let (ox, _, prompt) = fuse(&store, &layer, &fx, &fy, Task::Vif, Some(PromptControl::Constant(1.0, 1.0)));
    assert!(prompt.data().iter().all(|&v| v == 1.0));
    assert!(ox.bitwise_eq(&conv));
}

#[test]
fn symmetric_sources_stay_symmetric() {
    let (mut store, layer) = layer(25);
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let s = Tensor::from_fn(vec![DIM], |_| rng.gen_range(-1.0..1.0));
    let (sx, sy) = layer.source_embed[Task::Mff.index()];
    set(&mut store, sx, s.clone());
    set(&mut store, sy, s);
    let f = random_grid(4, 27);
    let (ox, oy, _) = fuse(&store, &layer, &f, &f, Task::Mff, Some(PromptControl::Constant(0.5, 0.5)));
    assert!(ox.bitwise_eq(&oy));
}

#[test]
fn identity_control_keeps_prompt_bitwise() {
    let (store, layer) = layer(28);
    let (fx, fy) = (random_grid(4, 29), random_grid(4, 30));
    let control = PromptControl::Affine { alpha: 1.0, beta: 0.0 };
    assert!(control.is_identity());
    let plain = fuse(&store, &layer, &fx, &fy, Task::Vif, None);
    let steered = fuse(&store, &layer, &fx, &fy, Task::Vif, Some(control));
    assert!(plain.0.bitwise_eq(&steered.0) && plain.1.bitwise_eq(&steered.1) && plain.2.bitwise_eq(&steered.2));
}

#[test]
fn manipulate_prompt_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let p = Tensor::from_fn(vec![3, 3, 2], |_| rng.gen_range(0.01..0.99));
    assert!(manipulate_prompt(&p, 1.0, 0.0).bitwise_eq(&p));
    let flat = manipulate_prompt(&p, 0.0, 0.3);
    for pair in flat.data().chunks(2) {
        assert!((pair[0] - 0.8).abs() < 1e-15 && (pair[1] - 0.2).abs() < 1e-15);
    }
    let wide = manipulate_prompt(&p, 3.0, 0.4);
    assert!(wide.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    // tape version agrees
    let tape = Tape::new();
    let v = PromptControl::Affine { alpha: 2.5, beta: -0.3 }.apply(tape.constant(p.clone())).unwrap().value();
    assert!(v.max_abs_diff(&manipulate_prompt(&p, 2.5, -0.3)) < 1e-15);
}

#[test]
fn changing_one_router_leaves_other_tasks_untouched() {
    let (mut store, layer) = layer(32);
    let (fx, fy) = (random_grid(4, 33), random_grid(4, 34));
    let before = fuse(&store, &layer, &fx, &fy, Task::Mef, None);
    let vif_before = fuse(&store, &layer, &fx, &fy, Task::Vif, None);
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    for id in layer.router_params(Task::Vif) {
        let shape = store.get(id).shape().to_vec();
        set(&mut store, id, Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0)));
    }
    let after = fuse(&store, &layer, &fx, &fy, Task::Mef, None);
    assert!(before.0.bitwise_eq(&after.0) && before.1.bitwise_eq(&after.1));
    let vif_after = fuse(&store, &layer, &fx, &fy, Task::Vif, None);
    assert!(!vif_before.2.bitwise_eq(&vif_after.2));
}

#[test]
fn adapter_map_examples() {
    let one_hot = Tensor::from_fn(vec![6, 4], |i| if i % 4 == 1 { 1.0 } else { 0.0 });
    assert_eq!(adapter_map(&one_hot), vec![1; 6]);
    assert_eq!(adapter_map(&Tensor::full(vec![3, 4], 0.25)), vec![0; 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let w = Tensor::from_fn(vec![50, 4], |_| rng.gen_range(0.0..1.0));
    for (row, &best) in w.data().chunks(4).zip(&adapter_map(&w)) {
        let brute = (0..4).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        assert_eq!(best, brute);
    }
}

fn prompt_of(pairs: &[(f64, f64)]) -> Tensor {
    Tensor::new(vec![pairs.len(), 2], pairs.iter().flat_map(|&(a, b)| [a, b]).collect()).unwrap()
}

#[test]
fn intensity_bias_examples() {
    let stats = intensity_bias_stats(&[prompt_of(&[(0.7467, 0.2), (0.1607, 0.9)])]).unwrap();
    assert!((stats.dom_x.unwrap() - 0.7467).abs() < 1e-12);
    assert!((stats.aux_x.unwrap() - 0.1607).abs() < 1e-12);
    assert!((stats.dom_y.unwrap() - 0.9).abs() < 1e-12);
    assert!((stats.aux_y.unwrap() - 0.2).abs() < 1e-12);

    let ties = intensity_bias_stats(&[prompt_of(&[(0.5, 0.5); 4])]).unwrap();
    assert_eq!(ties.dom_x, None);
    assert_eq!(ties.aux_y, None);
    assert_eq!(ties.dom_y, Some(0.5));
    assert_eq!(ties.avg_dom, None);

    let xs = intensity_bias_stats(&[prompt_of(&[(0.8, 0.2)]), prompt_of(&[(0.6, 0.4)])]).unwrap();
    assert!((xs.dom_x.unwrap() - 0.7).abs() < 1e-12);
    assert_eq!(xs.dom_y, None);
    assert_eq!(xs.diff_dom, None);

    assert!(intensity_bias_stats(&[]).is_err());
}

#[test]
fn task_names_round_trip() {
    for t in Task::ALL {
        assert_eq!(t.name().parse::<Task>().unwrap(), t);
    }
    assert!(matches!("rgb".parse::<Task>(), Err(Error::UnknownTask(_))));
}

#[test]
fn config_rejects_bad_k() {
    assert!(MoaConfig { top_k: 5, ..Default::default() }.validate().is_err());
    assert!(MoaConfig { top_k: 0, ..Default::default() }.validate().is_err());
}
