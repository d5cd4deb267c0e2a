//! Deterministic synthetic source pairs with known ground truth.
//!
//! Every generator is a pure function of `(task, seed, size)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::tcmoa::Task;

/// Symmetric exposure offset of the MEF pairs.
pub const MEF_OFFSET: f64 = 0.2;
/// MEF latent values live on this grid so `B ± d` and their mean are exact.
const MEF_GRID: f64 = 1024.0;
/// Box blur radius and pass count used for defocus.
const BLUR_RADIUS: usize = 2;
const BLUR_PASSES: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum GroundTruth {
    /// `hotspots[i]` marks pixels where the infrared source carries a blob;
    /// `texture` is the visible image before fine detail was added.
    Vif { hotspots: Vec<bool>, texture: Tensor },
    /// `x = latent - offset`, `y = latent + offset`.
    Mef { latent: Tensor, offset: f64 },
    /// `focus[i]` is true where X is sharp.
    Mff { focus: Vec<bool> },
}

impl GroundTruth {
    /// Image form written next to a pair: masks as black/white, the MEF
    /// latent as is.
    pub fn to_image(&self, size: usize) -> Tensor {
        let mask = |m: &[bool]| Tensor::from_fn(vec![size, size, 3], |i| if m[i / 3] { 1.0 } else { 0.0 });
        match self {
            GroundTruth::Vif { hotspots, .. } => mask(hotspots),
            GroundTruth::Mef { latent, .. } => latent.clone(),
            GroundTruth::Mff { focus } => mask(focus),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourcePair {
    pub x: Tensor,
    pub y: Tensor,
    pub task: Task,
    pub truth: GroundTruth,
}

fn task_stream(task: Task, seed: u64) -> ChaCha8Rng {
    let salt = [0x7669_6600u64, 0x6d65_6600, 0x6d66_6600][task.index()];
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt)
}

/// Random lattice values bilinearly interpolated over a `size×size` plane,
/// values in [0, 1].
fn smooth_field(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f64> {
    let n = cells + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.gen()).collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let fy = y as f64 * cells as f64 / (size - 1).max(1) as f64;
            let fx = x as f64 * cells as f64 / (size - 1).max(1) as f64;
            let (iy, ix) = ((fy as usize).min(cells - 1), (fx as usize).min(cells - 1));
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let at = |r: usize, c: usize| lattice[r * n + c];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn color_image(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f64> {
    let gray = smooth_field(rng, size, cells);
    let tint: [f64; 3] = [rng.gen_range(0.8..1.2), rng.gen_range(0.8..1.2), rng.gen_range(0.8..1.2)];
    let mut out = Vec::with_capacity(size * size * 3);
    for g in gray {
        for t in tint {
            out.push((g * t).clamp(0.0, 1.0));
        }
    }
    out
}

/// Separable box blur with replicate borders, `passes` times.
pub fn box_blur(image: &Tensor, radius: usize, passes: usize) -> Tensor {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let r = radius as isize;
    let norm = (2 * radius + 1) as f64;
    let mut cur = image.data().to_vec();
    for _ in 0..passes {
        for horizontal in [true, false] {
            let mut next = vec![0.0; cur.len()];
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        let mut sum = 0.0;
                        for d in -r..=r {
                            let (yy, xx) = if horizontal {
                                (y, (x as isize + d).clamp(0, w as isize - 1) as usize)
                            } else {
                                ((y as isize + d).clamp(0, h as isize - 1) as usize, x)
                            };
                            sum += cur[(yy * w + xx) * c + ch];
                        }
                        next[(y * w + x) * c + ch] = sum / norm;
                    }
                }
            }
            cur = next;
        }
    }
    Tensor::new(s.to_vec(), cur).expect("same shape")
}

fn vif(rng: &mut ChaCha8Rng, size: usize) -> SourcePair {
    let texture = color_image(rng, size, 4);
    let detail = smooth_field(rng, size, (size / 2).max(1));
    let x: Vec<f64> = texture
        .iter()
        .enumerate()
        .map(|(i, &t)| (0.1 + 0.7 * t + 0.3 * (detail[i / 3] - 0.5)).clamp(0.0, 1.0))
        .collect();

    let background = smooth_field(rng, size, 2);
    let blobs = rng.gen_range(1..=3);
    let centers: Vec<(f64, f64, f64, f64)> = (0..blobs)
        .map(|_| {
            let s = size as f64;
            (rng.gen_range(0.15..0.85) * s, rng.gen_range(0.15..0.85) * s, rng.gen_range(0.08..0.18) * s, rng.gen_range(0.6..0.85))
        })
        .collect();
    let mut y = Vec::with_capacity(size * size * 3);
    let mut hotspots = Vec::with_capacity(size * size);
    for py in 0..size {
        for px in 0..size {
            let mut heat = 0.0f64;
            for &(cy, cx, r, amp) in &centers {
                let d2 = (py as f64 - cy).powi(2) + (px as f64 - cx).powi(2);
                heat = heat.max(amp * (-d2 / (2.0 * r * r)).exp());
            }
            hotspots.push(heat > 0.25);
            let v = (0.08 + 0.1 * background[py * size + px] + heat).clamp(0.0, 1.0);
            y.extend([v, v, v]);
        }
    }
    let shape = vec![size, size, 3];
    SourcePair {
        x: Tensor::new(shape.clone(), x).expect("sized"),
        y: Tensor::new(shape.clone(), y).expect("sized"),
        task: Task::Vif,
        truth: GroundTruth::Vif { hotspots, texture: Tensor::new(shape, texture).expect("sized") },
    }
}

fn mef(rng: &mut ChaCha8Rng, size: usize) -> SourcePair {
    let field = color_image(rng, size, 3);
    let lo = 0.25 * MEF_GRID;
    let span = 0.5 * MEF_GRID;
    let latent: Vec<f64> = field.iter().map(|&v| (lo + (v * span).round()) / MEF_GRID).collect();
    let shape = vec![size, size, 3];
    let latent = Tensor::new(shape, latent).expect("sized");
    SourcePair {
        x: latent.map(|b| b - MEF_OFFSET),
        y: latent.map(|b| b + MEF_OFFSET),
        task: Task::Mef,
        truth: GroundTruth::Mef { latent, offset: MEF_OFFSET },
    }
}

fn mff(rng: &mut ChaCha8Rng, size: usize) -> SourcePair {
    let smooth = color_image(rng, size, 4);
    let base: Vec<f64> = smooth
        .iter()
        .map(|&v| (0.15 + 0.7 * v + rng.gen_range(-0.15..0.15)).clamp(0.0, 1.0))
        .collect();
    let s = size as f64;
    let focus: Vec<bool> = if rng.gen_bool(0.5) {
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let offset = rng.gen_range(-0.25..0.25) * s;
        let (ny, nx) = angle.sin_cos();
        (0..size * size)
            .map(|i| {
                let (py, px) = ((i / size) as f64 - s / 2.0 + 0.5, (i % size) as f64 - s / 2.0 + 0.5);
                py * ny + px * nx > offset
            })
            .collect()
    } else {
        let (cy, cx) = (rng.gen_range(0.3..0.7) * s, rng.gen_range(0.3..0.7) * s);
        let r = rng.gen_range(0.2..0.35) * s;
        (0..size * size)
            .map(|i| {
                let (py, px) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
                (py - cy).powi(2) + (px - cx).powi(2) < r * r
            })
            .collect()
    };
    let shape = vec![size, size, 3];
    let sharp = Tensor::new(shape.clone(), base).expect("sized");
    let blurred = box_blur(&sharp, BLUR_RADIUS, BLUR_PASSES);
    let pick = |inside_sharp: bool| {
        Tensor::from_fn(shape.clone(), |i| {
            if focus[i / 3] == inside_sharp {
                sharp.data()[i]
            } else {
                blurred.data()[i]
            }
        })
    };
    SourcePair { x: pick(true), y: pick(false), task: Task::Mff, truth: GroundTruth::Mff { focus } }
}

/// One synthetic pair for `task`. `size` must be at least 2.
pub fn generate(task: Task, seed: u64, size: usize) -> SourcePair {
    assert!(size >= 2, "image side must be at least 2");
    let mut rng = task_stream(task, seed);
    match task {
        Task::Vif => vif(&mut rng, size),
        Task::Mef => mef(&mut rng, size),
        Task::Mff => mff(&mut rng, size),
    }
}

/// Per-patch focus label: `Some(true)` if the patch lies fully inside the
/// focus region, `Some(false)` if fully outside, `None` on the boundary.
pub fn focus_patch_labels(focus: &[bool], size: usize, patch: usize) -> Vec<Option<bool>> {
    let cols = size / patch;
    let mut labels = Vec::with_capacity(cols * cols);
    for r in 0..cols {
        for c in 0..cols {
            let mut any = false;
            let mut all = true;
            for y in r * patch..(r + 1) * patch {
                for x in c * patch..(c + 1) * patch {
                    let f = focus[y * size + x];
                    any |= f;
                    all &= f;
                }
            }
            labels.push(if all { Some(true) } else if !any { Some(false) } else { None });
        }
    }
    labels
}

/// Top-left corner offsets for a random `crop×crop` window.
pub fn random_crop_offset(rng: &mut impl Rng, size: usize, crop: usize) -> (usize, usize) {
    if crop >= size {
        return (0, 0);
    }
    (rng.gen_range(0..=size - crop), rng.gen_range(0..=size - crop))
}

/// Copies the `crop×crop` window at `(top, left)`.
pub fn crop(image: &Tensor, top: usize, left: usize, crop: usize) -> Tensor {
    let s = image.shape();
    let (w, c) = (s[1], s[2]);
    Tensor::from_fn(vec![crop, crop, c], |i| {
        let (y, x, ch) = (i / (crop * c), (i / c) % crop, i % c);
        image.data()[((top + y) * w + left + x) * c + ch]
    })
}
