//! Procedural toy scenes: one coloured shape on a textured background.
//!
//! Each sample yields pixels (reconstruction target), a segmentation mask
//! (source of the teacher attention) and a class label (shape x colour
//! family).

mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MuseError, Result};

pub use io::{
    decode_dataset, encode_dataset, read_dataset, write_dataset, DatasetHeader, DATASET_MAGIC, DATASET_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_size: usize,
    pub patch: usize,
    pub classes: usize,
    /// Foreground objects per scene; the label follows the first one.
    pub objects: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig { image_size: 32, patch: 4, classes: 8, objects: 1 }
    }
}

pub const SHAPES: [&str; 4] = ["square", "circle", "triangle", "bar"];
const MAX_ATTEMPTS: usize = 256;

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(MuseError::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch
            )));
        }
        if self.classes < 2 || !self.classes.is_multiple_of(2) || self.classes > 2 * SHAPES.len() {
            return Err(MuseError::Config(format!(
                "classes must be an even number in [2, {}], got {}",
                2 * SHAPES.len(),
                self.classes
            )));
        }
        if self.objects == 0 || self.objects > 8 {
            return Err(MuseError::Config(format!("objects per scene must be in [1, 8], got {}", self.objects)));
        }
        if self.image_size > 255 * 16 {
            return Err(MuseError::Config("image too large".into()));
        }
        // the smallest object spans three patches per side
        if 3 * self.patch > self.image_size * 85 / 100 {
            return Err(MuseError::Config(format!(
                "object larger than image: a {}px image cannot hold a 3-patch object at patch size {}",
                self.image_size, self.patch
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// `H x W x 3`, row-major, values in `[0, 1]`.
    pub image: Vec<f32>,
    /// `H x W` segment ids, 0 = background.
    pub mask: Vec<u8>,
    pub label: u16,
    pub seed: u64,
}

/// Patch tokens of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    /// `N_p x (P*P*3)` flattened patches in raster order.
    pub tokens: Vec<f32>,
    /// Majority segment id per patch.
    pub patch_mask: Vec<u8>,
    pub num_patches: usize,
    pub patch_dim: usize,
}

/// Seed of the `index`-th sample of a dataset (splitmix64 of the pair).
pub fn sample_seed(base_seed: u64, index: u64) -> u64 {
    let mut z = base_seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Square { x0: f32, y0: f32, side: f32 },
    Circle { cx: f32, cy: f32, r: f32 },
    Triangle { x0: f32, y0: f32, w: f32, h: f32 },
    Bar { x0: f32, y0: f32, w: f32, h: f32 },
}

impl Shape {
    fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Shape::Square { x0, y0, side } => x >= x0 && x < x0 + side && y >= y0 && y < y0 + side,
            Shape::Bar { x0, y0, w, h } => x >= x0 && x < x0 + w && y >= y0 && y < y0 + h,
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Triangle { x0, y0, w, h } => {
                // apex at the top centre, base at y0 + h
                if y < y0 || y >= y0 + h {
                    return false;
                }
                let half = 0.5 * w * (y - y0) / h;
                let mid = x0 + 0.5 * w;
                x >= mid - half && x <= mid + half
            }
        }
    }
}

fn sample_shape(rng: &mut ChaCha8Rng, kind: usize, size: f32) -> Shape {
    let lo = 0.375 * size;
    let hi = 0.625 * size;
    match kind {
        0 => {
            let side = rng.random_range(lo..=hi);
            Shape::Square { x0: rng.random_range(0.0..=size - side), y0: rng.random_range(0.0..=size - side), side }
        }
        1 => {
            let r = 0.5 * rng.random_range(lo * 1.1..=hi * 1.1).min(size);
            Shape::Circle { cx: rng.random_range(r..=size - r), cy: rng.random_range(r..=size - r), r }
        }
        2 => {
            let w = rng.random_range(lo * 1.2..=(hi * 1.2).min(size));
            let h = rng.random_range(lo * 1.2..=(hi * 1.2).min(size));
            Shape::Triangle { x0: rng.random_range(0.0..=size - w), y0: rng.random_range(0.0..=size - h), w, h }
        }
        _ => {
            let long = rng.random_range(0.6 * size..=0.85 * size);
            let short = rng.random_range(0.2 * size..=0.25 * size);
            let (w, h) = if rng.random_bool(0.5) { (long, short) } else { (short, long) };
            Shape::Bar { x0: rng.random_range(0.0..=size - w), y0: rng.random_range(0.0..=size - h), w, h }
        }
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Warm family: red through yellow. Cool family: cyan through blue.
fn sample_color(rng: &mut ChaCha8Rng, cool: bool) -> [f32; 3] {
    let hue = if cool { rng.random_range(180.0..250.0) } else { rng.random_range(0.0..55.0) };
    hsv_to_rgb(hue, rng.random_range(0.7..1.0), rng.random_range(0.75..1.0))
}

/// Generates one scene. Deterministic in `(seed, config)`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SceneSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.image_size;
    let label = rng.random_range(0..config.classes) as u16;

    // background: gray level with a faint gradient and pixel noise
    let base: f32 = rng.random_range(0.35..0.65);
    let (gx, gy): (f32, f32) = (rng.random_range(-0.04..0.04), rng.random_range(-0.04..0.04));
    let mut image = vec![0f32; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let shade = base + gx * (x as f32 / size as f32 - 0.5) + gy * (y as f32 / size as f32 - 0.5);
            for c in 0..3 {
                let tint = rng.random_range(-0.025f32..0.025);
                image[(y * size + x) * 3 + c] = (shade + tint).clamp(0.0, 1.0);
            }
        }
    }

    let mut kinds = vec![(label as usize / 2, label % 2 == 1)];
    for _ in 1..config.objects {
        kinds.push((rng.random_range(0..SHAPES.len()), rng.random_bool(0.5)));
    }

    for _ in 0..MAX_ATTEMPTS {
        let mut mask = vec![0u8; size * size];
        let mut colors = Vec::with_capacity(kinds.len());
        for (id, &(kind, cool)) in kinds.iter().enumerate() {
            let shape = sample_shape(&mut rng, kind, size as f32);
            colors.push(sample_color(&mut rng, cool));
            for y in 0..size {
                for x in 0..size {
                    if shape.contains(x as f32 + 0.5, y as f32 + 0.5) {
                        mask[y * size + x] = (id + 1) as u8;
                    }
                }
            }
        }
        let patch_mask = patch_majority(&mask, config);
        let covered = (1..=kinds.len()).all(|id| patch_mask.iter().filter(|&&m| m as usize == id).count() >= 4);
        if !covered {
            continue;
        }
        let mut img = image.clone();
        for (p, &m) in mask.iter().enumerate() {
            if m > 0 {
                let col = colors[m as usize - 1];
                for c in 0..3 {
                    let jitter = rng.random_range(-0.02f32..0.02);
                    img[p * 3 + c] = (col[c] + jitter).clamp(0.0, 1.0);
                }
            }
        }
        return Ok(SceneSample { image: img, mask, label, seed });
    }
    Err(MuseError::Config(format!("could not place objects covering 4 patches each after {MAX_ATTEMPTS} attempts")))
}

/// Generates `count` scenes with per-sample seeds derived from `base_seed`.
pub fn generate_dataset(count: usize, base_seed: u64, config: &SceneConfig) -> Result<Vec<SceneSample>> {
    config.validate()?;
    (0..count).map(|i| generate_scene(sample_seed(base_seed, i as u64), config)).collect()
}

/// Majority segment id per patch; ties go to the lowest id.
pub fn patch_majority(mask: &[u8], config: &SceneConfig) -> Vec<u8> {
    let (size, p, grid) = (config.image_size, config.patch, config.grid());
    let mut out = Vec::with_capacity(grid * grid);
    let mut counts = [0usize; 256];
    for gy in 0..grid {
        for gx in 0..grid {
            counts.iter_mut().for_each(|c| *c = 0);
            for y in 0..p {
                for x in 0..p {
                    counts[mask[(gy * p + y) * size + gx * p + x] as usize] += 1;
                }
            }
            // ties resolve to the lowest id
            let (mut best, mut best_count) = (0u8, 0usize);
            for (id, &c) in counts.iter().enumerate() {
                if c > best_count {
                    best = id as u8;
                    best_count = c;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Splits a scene into raster-ordered `P x P x 3` patch tokens.
pub fn patchify(sample: &SceneSample, config: &SceneConfig) -> PatchGrid {
    let (size, p, grid) = (config.image_size, config.patch, config.grid());
    let dim = config.patch_dim();
    let mut tokens = Vec::with_capacity(grid * grid * dim);
    for gy in 0..grid {
        for gx in 0..grid {
            for y in 0..p {
                let start = ((gy * p + y) * size + gx * p) * 3;
                tokens.extend_from_slice(&sample.image[start..start + p * 3]);
            }
        }
    }
    PatchGrid { tokens, patch_mask: patch_majority(&sample.mask, config), num_patches: grid * grid, patch_dim: dim }
}

/// Inverse of [`patchify`] for the pixel data.
pub fn unpatchify(tokens: &[f32], config: &SceneConfig) -> Vec<f32> {
    let (size, p, grid) = (config.image_size, config.patch, config.grid());
    let dim = config.patch_dim();
    let mut image = vec![0f32; size * size * 3];
    for gy in 0..grid {
        for gx in 0..grid {
            let tok = &tokens[(gy * grid + gx) * dim..(gy * grid + gx + 1) * dim];
            for y in 0..p {
                let start = ((gy * p + y) * size + gx * p) * 3;
                image[start..start + p * 3].copy_from_slice(&tok[y * p * 3..(y + 1) * p * 3]);
            }
        }
    }
    image
}

/// Row-stochastic structural target over patches.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherAttention {
    pub num_patches: usize,
    /// `N_p x N_p`, row-major.
    pub target: Vec<f64>,
}

/// Row `i` is `(1 - eps)` spread uniformly over patches in the same segment
/// as `i` plus `eps` spread uniformly over all patches.
pub fn teacher_attention_from_mask(patch_mask: &[u8], smoothing: f64) -> Result<TeacherAttention> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(MuseError::Argument(format!("smoothing must be in [0, 1), got {smoothing}")));
    }
    let n = patch_mask.len();
    if n == 0 {
        return Err(MuseError::Argument("empty patch mask".into()));
    }
    let mut sizes = [0usize; 256];
    for &m in patch_mask {
        sizes[m as usize] += 1;
    }
    let mut target = vec![0f64; n * n];
    let floor = smoothing / n as f64;
    for i in 0..n {
        let same = sizes[patch_mask[i] as usize] as f64;
        let on = (1.0 - smoothing) / same + floor;
        for j in 0..n {
            target[i * n + j] = if patch_mask[j] == patch_mask[i] { on } else { floor };
        }
    }
    Ok(TeacherAttention { num_patches: n, target })
}
