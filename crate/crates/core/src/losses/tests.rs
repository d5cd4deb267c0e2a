use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![h, w, 3], |_| rng.gen())
}

fn at(t: &Tensor, y: usize, x: usize, c: usize) -> f64 {
    let s = t.shape();
    t.data()[(y * s[1] + x) * s[2] + c]
}

#[test]
fn sobel_of_constant_is_zero() {
    let (gx, gy) = sobel_tensor(&Tensor::full(vec![6, 5, 3], 0.37)).unwrap();
    assert!(gx.data().iter().chain(gy.data()).all(|&v| v == 0.0));
}

#[test]
fn sobel_of_horizontal_ramp() {
    let w = 8;
    let ramp = Tensor::from_fn(vec![6, w, 3], |i| ((i / 3) % w) as f64 / w as f64);
    let (gx, gy) = sobel_tensor(&ramp).unwrap();
    // interior: (1 + 2 + 1) taps times a two-pixel step of 1/w
    for y in 0..6 {
        for x in 1..w - 1 {
            for c in 0..3 {
                assert!((at(&gx, y, x, c) - 8.0 / w as f64).abs() < 1e-12);
                assert!(at(&gy, y, x, c).abs() < 1e-12);
            }
        }
    }
    // replicate padding halves the step at the borders
    assert!((at(&gx, 2, 0, 0) - 4.0 / w as f64).abs() < 1e-12);
}

#[test]
fn sobel_is_odd() {
    let img = random(7, 9, 1);
    let (gx, gy) = sobel_tensor(&img).unwrap();
    let (nx, ny) = sobel_tensor(&img.map(|v| -v)).unwrap();
    assert!(nx.bitwise_eq(&gx.map(|v| -v)));
    assert!(ny.bitwise_eq(&gy.map(|v| -v)));
}

fn ssim_of(a: &Tensor, b: &Tensor) -> f64 {
    let tape = Tape::new();
    ssim(tape.constant(a.clone()), tape.constant(b.clone())).unwrap().item()
}

/// Direct double loop SSIM with the same Gaussian window.
fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let z: f64 = g.iter().sum::<f64>().powi(2);
    let mut total = 0.0;
    let mut count = 0;
    for c in 0..3 {
        for oy in 0..=h - 11 {
            for ox in 0..=w - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let k = g[dy] * g[dx] / z;
                        let (va, vb) = (at(a, oy + dy, ox + dx, c), at(b, oy + dy, ox + dx, c));
                        ma += k * va;
                        mb += k * vb;
                        saa += k * va * va;
                        sbb += k * vb * vb;
                        sab += k * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + 1e-4) * (2.0 * cov + 9e-4)) / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
                count += 1;
            }
        }
    }
    total / count as f64
}

#[test]
fn ssim_matches_direct_computation() {
    let (a, b) = (random(14, 13, 2), random(14, 13, 3));
    assert!((ssim_of(&a, &b) - ssim_oracle(&a, &b)).abs() < 1e-12);
}

#[test]
fn ssim_identity_and_symmetry() {
    let (a, b) = (random(16, 16, 4), random(16, 16, 5));
    assert!((ssim_of(&a, &a) - 1.0).abs() < 1e-12);
    assert!((ssim_of(&a, &b) - ssim_of(&b, &a)).abs() < 1e-12);
    // below window size: one global window
    let (s, t) = (random(6, 6, 6), random(6, 6, 7));
    assert!((ssim_of(&s, &s) - 1.0).abs() < 1e-12);
    assert!(ssim_of(&s, &t) < 1.0);
}

#[test]
fn ssim_of_inverted_checkerboard_is_negative() {
    let board = Tensor::from_fn(vec![16, 16, 3], |i| {
        let (y, x) = (i / 48, (i / 3) % 16);
        ((y / 2 + x / 2) % 2) as f64
    });
    let inverted = board.map(|v| 1.0 - v);
    assert!(ssim_of(&board, &inverted) < 0.0);
}

#[test]
fn pixel_loss_examples() {
    let tape = Tape::new();
    let (x, y) = (random(8, 8, 8), random(8, 8, 9));
    let max = x.zip_map(&y, f64::max).unwrap();
    assert_eq!(pixel_loss(tape.constant(max), &x, &y, PixelMode::Max, None).unwrap().item(), 0.0);

    let (cx, cy) = (Tensor::full(vec![4, 4, 3], 0.3), Tensor::full(vec![4, 4, 3], 0.7));
    let half = tape.constant(Tensor::full(vec![4, 4, 3], 0.5));
    assert_eq!(pixel_loss(half, &cx, &cy, PixelMode::Avg, None).unwrap().item(), 0.0);

    // two patches: X on the left, Y on the right
    let mask = MaskMap { take_x: vec![true, false], rows: 1, cols: 2, patch: 4 };
    let fused = Tensor::from_fn(vec![4, 8, 3], |i| if (i / 3) % 8 < 4 { 0.3 } else { 0.7 });
    let (mx, my) = (Tensor::full(vec![4, 8, 3], 0.3), Tensor::full(vec![4, 8, 3], 0.7));
    assert_eq!(pixel_loss(tape.constant(fused.clone()), &mx, &my, PixelMode::Mask, Some(&mask)).unwrap().item(), 0.0);
    assert!(pixel_loss(tape.constant(fused), &mx, &my, PixelMode::Mask, None).is_err());
}

#[test]
fn absmax_keeps_sign_and_prefers_x_on_ties() {
    assert_eq!(absmax(2.0, -3.0), -3.0);
    assert_eq!(absmax(-4.0, 1.0), -4.0);
    assert_eq!(absmax(2.0, -2.0), 2.0);
}

#[test]
fn grad_loss_with_flat_y_targets_x() {
    let tape = Tape::new();
    let x = Tensor::from_fn(vec![8, 8, 3], |i| if (i / 3) % 8 < 4 { 0.1 } else { 0.9 });
    let y = Tensor::full(vec![8, 8, 3], 0.5);
    assert_eq!(grad_loss(tape.constant(x.clone()), &x, &y, GradMode::Max, None).unwrap().item(), 0.0);
    assert!(grad_loss(tape.constant(y.clone()), &x, &y, GradMode::Max, None).unwrap().item() > 0.0);
}

#[test]
fn grad_loss_matches_scalar_loop() {
    let (f, x, y) = (random(6, 7, 10), random(6, 7, 11), random(6, 7, 12));
    let tape = Tape::new();
    let got = grad_loss(tape.constant(f.clone()), &x, &y, GradMode::Max, None).unwrap().item();
    let (fgx, fgy) = sobel_tensor(&f).unwrap();
    let (xgx, xgy) = sobel_tensor(&x).unwrap();
    let (ygx, ygy) = sobel_tensor(&y).unwrap();
    let mut sum = 0.0;
    for i in 0..f.numel() {
        let tx = if ygx.data()[i].abs() > xgx.data()[i].abs() { ygx.data()[i] } else { xgx.data()[i] };
        let ty = if ygy.data()[i].abs() > xgy.data()[i].abs() { ygy.data()[i] } else { xgy.data()[i] };
        sum += (fgx.data()[i] - tx).abs() + (fgy.data()[i] - ty).abs();
    }
    assert!((got - sum / (2 * f.numel()) as f64).abs() < 1e-12);
}

fn box_blur(img: &Tensor) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    Tensor::from_fn(img.shape().to_vec(), |i| {
        let (y, x, c) = (i / (w * 3), (i / 3) % w, i % 3);
        let mut s = 0.0;
        for dy in -2i64..=2 {
            for dx in -2i64..=2 {
                let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                s += at(img, yy, xx, c);
            }
        }
        s / 25.0
    })
}

#[test]
fn mask_prefers_sharp_source_and_x_on_ties() {
    let sharp = random(16, 16, 13);
    let blurred = box_blur(&box_blur(&sharp));
    let m = compute_mask(&sharp, &blurred, 4).unwrap();
    assert!(m.take_x.iter().all(|&v| v));
    let flat = Tensor::full(vec![16, 16, 3], 0.4);
    assert!(compute_mask(&flat, &flat, 4).unwrap().take_x.iter().all(|&v| v));
    let m = compute_mask(&blurred, &sharp, 4).unwrap();
    assert!(m.take_x.iter().all(|&v| !v));
    let (mx, my) = m.as_tensors();
    assert!(mx.zip_map(&my, |a, b| a + b).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(compute_mask(&sharp, &blurred, 5).is_err());
}

#[test]
fn aux_loss_examples() {
    let tape = Tape::new();
    let imp = |v: Vec<f64>| tape.constant(Tensor::new(vec![v.len()], v).unwrap());
    assert_eq!(aux_loss(imp(vec![1.5; 4]), 0.01).unwrap().item(), 0.0);
    let skewed = aux_loss(imp(vec![2.0, 0.0, 0.0, 0.0]), 0.01).unwrap().item();
    assert!((skewed - 0.03).abs() < 1e-15);
    assert!((cv_squared(&[2.0, 0.0, 0.0, 0.0]) - 3.0).abs() < 1e-15);
    let v = vec![0.3, 1.7, 0.9, 2.2];
    let a = aux_loss(imp(v.clone()), 0.01).unwrap().item();
    let b = aux_loss(imp(v.iter().map(|x| 2.0 * x).collect()), 0.01).unwrap().item();
    assert!((a - b).abs() < 1e-15);
}

#[test]
fn identical_sources_give_zero_image_terms() {
    let x = random(16, 16, 14);
    for task in Task::ALL {
        let tape = Tape::new();
        let r = task_loss(task, tape.constant(x.clone()), &x, &x, &[], &LossWeights::default(), 4).unwrap();
        let v = r.values();
        assert!(v[0].abs() < 1e-12, "{task} ssim {}", v[0]);
        assert_eq!(&v[1..], &[0.0; 4]);
        assert_eq!(LossWeights::default().ssim_x, 0.5);
        assert_eq!(LossWeights::default().ssim_y, 0.5);
    }
}

proptest! {
    #[test]
    fn total_is_sum_of_terms(seed in 0u64..500, t in 0usize..3) {
        let (f, x, y) = (random(12, 12, seed), random(12, 12, seed + 1), random(12, 12, seed + 2));
        let tape = Tape::new();
        let r = task_loss(Task::ALL[t], tape.constant(f), &x, &y, &[], &LossWeights::default(), 4).unwrap();
        let v = r.values();
        prop_assert!((r.total.item() - v.iter().sum::<f64>()).abs() < 1e-10);
        prop_assert!(v.iter().all(|&term| term >= 0.0));
    }

    #[test]
    fn absmax_target_is_swap_invariant_off_ties(seed in 0u64..500) {
        let (x, y) = (random(6, 6, seed), random(6, 6, seed + 7));
        let (xg, _) = sobel_tensor(&x).unwrap();
        let (yg, _) = sobel_tensor(&y).unwrap();
        for (a, b) in xg.data().iter().zip(yg.data()) {
            if a.abs() != b.abs() {
                prop_assert_eq!(absmax(*a, *b), absmax(*b, *a));
            }
        }
    }
}
