//! Synthetic datasets with a finite training set and a fixed evaluation set.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    /// Per-pixel classification of `[b, c, h, w]` outputs.
    Dense,
}

/// Named inputs plus labels; dense labels enumerate `(image, y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: BTreeMap<String, Tensor>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: TaskKind,
    pub classes: usize,
    pub input: String,
    /// Shape of one sample, without the batch axis.
    pub sample_shape: Vec<usize>,
    train: Vec<(Vec<f64>, Vec<usize>)>,
    eval: Vec<Batch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixtureConfig {
    pub classes: usize,
    /// Sample shape: `[d]` for vectors or `[c, h, w]` for images.
    pub shape: Vec<usize>,
    pub modes_per_class: usize,
    /// Standard deviation of the mode centers.
    pub separation: f64,
    /// Standard deviation of samples around their mode.
    pub noise: f64,
    pub train_size: usize,
    pub eval_size: usize,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            shape: vec![16],
            modes_per_class: 3,
            separation: 1.0,
            noise: 1.0,
            train_size: 512,
            eval_size: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapesConfig {
    /// Background is class 0; shape classes are `1..classes`.
    pub classes: usize,
    pub size: usize,
    pub max_shapes: usize,
    /// Standard deviation of the per-pixel texture noise.
    pub noise: f64,
    /// Standard deviation of the per-shape color jitter.
    pub color_jitter: f64,
    pub train_size: usize,
    pub eval_size: usize,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self { classes: 4, size: 16, max_shapes: 3, noise: 0.35, color_jitter: 0.25, train_size: 64, eval_size: 64 }
    }
}

const EVAL_BATCH: usize = 64;

impl Dataset {
    fn assemble(
        task: TaskKind,
        classes: usize,
        sample_shape: Vec<usize>,
        train: Vec<(Vec<f64>, Vec<usize>)>,
        eval_samples: Vec<(Vec<f64>, Vec<usize>)>,
    ) -> Self {
        let mut ds = Self { task, classes, input: "x".into(), sample_shape, train, eval: Vec::new() };
        let eval_batch = match task {
            TaskKind::Classification => EVAL_BATCH,
            TaskKind::Dense => 8,
        };
        ds.eval = eval_samples.chunks(eval_batch).map(|c| ds.make_batch(c.iter())).collect();
        ds
    }

    fn make_batch<'a>(&self, samples: impl Iterator<Item = &'a (Vec<f64>, Vec<usize>)>) -> Batch {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut n = 0;
        for (x, y) in samples {
            data.extend_from_slice(x);
            labels.extend_from_slice(y);
            n += 1;
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&self.sample_shape);
        let t = Tensor::new(shape, data).expect("samples match the declared shape");
        Batch { inputs: BTreeMap::from([(self.input.clone(), t)]), labels }
    }

    /// `size` training samples drawn uniformly with replacement.
    pub fn train_batch<R: Rng>(&self, rng: &mut R, size: usize) -> Batch {
        let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..self.train.len())).collect();
        self.make_batch(idx.iter().map(|&i| &self.train[i]))
    }

    pub fn eval_batches(&self) -> &[Batch] {
        &self.eval
    }

    pub fn train_len(&self) -> usize {
        self.train.len()
    }

    /// Classes are unions of Gaussian modes with isotropic noise.
    pub fn gaussian_mixture(cfg: &MixtureConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim: usize = cfg.shape.iter().product();
        let centers_dist = Normal::new(0.0, cfg.separation).unwrap();
        let noise = Normal::new(0.0, cfg.noise).unwrap();
        let centers: Vec<Vec<Vec<f64>>> = (0..cfg.classes)
            .map(|_| (0..cfg.modes_per_class).map(|_| (0..dim).map(|_| centers_dist.sample(&mut rng)).collect()).collect())
            .collect();
        let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<(Vec<f64>, Vec<usize>)> {
            (0..n)
                .map(|_| {
                    let class = rng.random_range(0..cfg.classes);
                    let mode = &centers[class][rng.random_range(0..cfg.modes_per_class)];
                    (mode.iter().map(|m| m + noise.sample(rng)).collect(), vec![class])
                })
                .collect()
        };
        let train = draw(cfg.train_size, &mut rng);
        let eval = draw(cfg.eval_size, &mut rng);
        Self::assemble(TaskKind::Classification, cfg.classes, cfg.shape.clone(), train, eval)
    }

    /// Textured 3-channel images with filled shapes; each shape class has its
    /// own outline and base color.
    pub fn shapes(cfg: &ShapesConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let palette: Vec<[f64; 3]> =
            (0..cfg.classes).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let train = (0..cfg.train_size).map(|_| shape_image(cfg, &palette, &mut rng)).collect();
        let eval = (0..cfg.eval_size).map(|_| shape_image(cfg, &palette, &mut rng)).collect();
        Self::assemble(TaskKind::Dense, cfg.classes, vec![3, cfg.size, cfg.size], train, eval)
    }
}

fn inside(class: usize, dy: f64, dx: f64, r: f64) -> bool {
    match class % 4 {
        1 => dy * dy + dx * dx <= r * r,
        2 => dy.abs() <= r && dx.abs() <= r,
        3 => dy.abs() + dx.abs() <= r,
        _ => (dy.abs() <= r && dx.abs() <= r / 3.0) || (dx.abs() <= r && dy.abs() <= r / 3.0),
    }
}

fn shape_image(cfg: &ShapesConfig, palette: &[[f64; 3]], rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    let s = cfg.size;
    let noise = Normal::new(0.0, cfg.noise).unwrap();
    let jitter = Normal::new(0.0, cfg.color_jitter).unwrap();
    let mut labels = vec![0usize; s * s];
    let mut color = vec![[0.0f64; 3]; s * s];
    let bg = palette[0].map(|c| c + jitter.sample(rng));
    color.iter_mut().for_each(|p| *p = bg);
    let count = rng.random_range(1..=cfg.max_shapes);
    for _ in 0..count {
        let class = rng.random_range(1..cfg.classes);
        let r = rng.random_range(s as f64 * 0.12..s as f64 * 0.28);
        let cy = rng.random_range(0.0..s as f64);
        let cx = rng.random_range(0.0..s as f64);
        let c = palette[class].map(|v| v + jitter.sample(rng));
        for y in 0..s {
            for x in 0..s {
                if inside(class, y as f64 + 0.5 - cy, x as f64 + 0.5 - cx, r) {
                    labels[y * s + x] = class;
                    color[y * s + x] = c;
                }
            }
        }
    }
    let mut data = vec![0.0; 3 * s * s];
    for ch in 0..3 {
        for p in 0..s * s {
            data[ch * s * s + p] = color[p][ch] + noise.sample(rng);
        }
    }
    (data, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_have_declared_shapes() {
        let ds = Dataset::gaussian_mixture(&MixtureConfig { shape: vec![2, 3, 3], ..Default::default() }, 0);
        let b = ds.train_batch(&mut ChaCha8Rng::seed_from_u64(1), 5);
        assert_eq!(b.inputs["x"].shape(), &[5, 2, 3, 3]);
        assert_eq!(b.labels.len(), 5);
        assert_eq!(ds.eval_batches().iter().map(|b| b.labels.len()).sum::<usize>(), 512);

        let seg = Dataset::shapes(&ShapesConfig::default(), 0);
        let b = seg.train_batch(&mut ChaCha8Rng::seed_from_u64(1), 2);
        assert_eq!(b.inputs["x"].shape(), &[2, 3, 16, 16]);
        assert_eq!(b.labels.len(), 2 * 16 * 16);
        assert!(b.labels.iter().any(|&l| l > 0) && b.labels.iter().all(|&l| l < 4));
    }

    #[test]
    fn generators_are_deterministic() {
        let a = Dataset::shapes(&ShapesConfig::default(), 7);
        let b = Dataset::shapes(&ShapesConfig::default(), 7);
        assert_eq!(a, b);
    }
}
