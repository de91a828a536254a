//! Shared fixtures: synthetic scenes and on-disk dataset layout.

use cone::imageio;
use cone::rng;
use cone::tensor::Tensor;
use rand::Rng;
use std::path::Path;

/// Smooth structured scene in [0,1] with soft lighting and a few colored
/// patches; deterministic in `seed`.
pub fn synthetic_scene(seed: u64, w: usize, h: usize) -> Tensor {
    let mut r = rng::stream(seed, "fixture/scene");
    let fx: f32 = r.gen_range(1.0..2.5);
    let fy: f32 = r.gen_range(1.0..2.5);
    let phase: f32 = r.gen_range(0.0..std::f32::consts::TAU);
    let mut t = Tensor::zeros(vec![3, h, w]);
    for c in 0..3 {
        let chroma = 0.04 * (c as f32 - 1.0);
        for y in 0..h {
            for x in 0..w {
                let u = x as f32 / w as f32;
                let v = y as f32 / h as f32;
                let wave = (std::f32::consts::TAU * (fx * u + fy * v) + phase).sin();
                t.data_mut()[c * h * w + y * w + x] = 0.55 + 0.22 * wave + chroma;
            }
        }
    }
    // Rectangular patches shared across channels keep the scene roughly
    // color-balanced while adding edges.
    for _ in 0..4 {
        let x0 = r.gen_range(0..w / 2);
        let y0 = r.gen_range(0..h / 2);
        let x1 = x0 + r.gen_range(w / 8..w / 2);
        let y1 = y0 + r.gen_range(h / 8..h / 2);
        let delta: f32 = r.gen_range(-0.25..0.25);
        for c in 0..3 {
            let jitter: f32 = r.gen_range(-0.03..0.03);
            for y in y0..y1.min(h) {
                for x in x0..x1.min(w) {
                    t.data_mut()[c * h * w + y * w + x] += delta + jitter;
                }
            }
        }
    }
    t.map(|v| v.clamp(0.05, 0.98))
}

/// Low-light counterpart: v ↦ 0.3·v^1.8.
pub fn darken(scene: &Tensor) -> Tensor {
    scene.map(|v| 0.3 * v.powf(1.8))
}

/// Write one dataset under `root` where the same `n` scenes appear darkened in
/// `train/low` and `test/low` and clean in `test/high`. Returns the clean
/// scenes in directory order.
pub fn write_shared_dataset(root: &Path, n: usize, w: usize, h: usize) -> Vec<Tensor> {
    let train_low = root.join("train/low");
    let test_low = root.join("test/low");
    let test_high = root.join("test/high");
    std::fs::create_dir_all(&train_low).unwrap();
    std::fs::create_dir_all(&test_low).unwrap();
    std::fs::create_dir_all(&test_high).unwrap();
    let mut cleans = Vec::new();
    for i in 0..n {
        let clean = synthetic_scene(300 + i as u64, w, h);
        let dark = darken(&clean);
        let name = format!("img{i:03}.png");
        imageio::save_image(&dark, &train_low.join(&name)).unwrap();
        imageio::save_image(&dark, &test_low.join(&name)).unwrap();
        imageio::save_image(&clean, &test_high.join(&name)).unwrap();
        cleans.push(clean);
    }
    cleans
}

/// Write a dataset under `root`: `train/low` plus paired `test/low`/`test/high`.
/// Returns the clean test scenes in directory order.
pub fn write_dataset(
    root: &Path,
    n_train: usize,
    n_test: usize,
    w: usize,
    h: usize,
) -> Vec<Tensor> {
    let train_low = root.join("train/low");
    let test_low = root.join("test/low");
    let test_high = root.join("test/high");
    std::fs::create_dir_all(&train_low).unwrap();
    std::fs::create_dir_all(&test_low).unwrap();
    std::fs::create_dir_all(&test_high).unwrap();
    for i in 0..n_train {
        let clean = synthetic_scene(100 + i as u64, w, h);
        imageio::save_image(&darken(&clean), &train_low.join(format!("img{i:03}.png"))).unwrap();
    }
    let mut cleans = Vec::new();
    for i in 0..n_test {
        let clean = synthetic_scene(200 + i as u64, w, h);
        imageio::save_image(&darken(&clean), &test_low.join(format!("img{i:03}.png"))).unwrap();
        imageio::save_image(&clean, &test_high.join(format!("img{i:03}.png"))).unwrap();
        cleans.push(clean);
    }
    cleans
}
