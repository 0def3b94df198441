//! Seeded synthetic segmentation data: filled ellipses and rings on a
//! noisy, shaded background.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::HarnessError;

pub const BACKGROUND: usize = 0;
pub const ELLIPSE: usize = 1;
pub const RING: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Per image, `height * width` standardized intensities.
    pub images: Vec<Vec<f64>>,
    /// Per image, `height * width` class labels.
    pub labels: Vec<Vec<usize>>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn standardize(img: &mut [f64]) {
    let n = img.len() as f64;
    let mean = img.iter().sum::<f64>() / n;
    let var = img.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    img.iter_mut().for_each(|v| *v = (*v - mean) * inv);
}

fn draw_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let noise = Normal::new(0.0, rng.random_range(0.2..0.4)).expect("positive std");
    let (gy, gx) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    let scale = (h.min(w) as f64) / 32.0;
    let mut labels = vec![BACKGROUND; h * w];
    let mut signal = vec![0.0; h * w];

    let ring_level = rng.random_range(0.5..0.8);
    let (ry, rx) = (rng.random_range(0.25..0.75) * h as f64, rng.random_range(0.25..0.75) * w as f64);
    let outer = rng.random_range(5.0..8.5) * scale;
    let inner = outer - rng.random_range(1.6..2.8) * scale;

    let ellipse_level = rng.random_range(1.1..1.5);
    let (ey, ex) = (rng.random_range(0.2..0.8) * h as f64, rng.random_range(0.2..0.8) * w as f64);
    let (a, b) = (rng.random_range(2.5..6.5) * scale, rng.random_range(2.5..6.5) * scale);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (s, c) = theta.sin_cos();

    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let i = y * w + x;
            let r = ((py - ry).powi(2) + (px - rx).powi(2)).sqrt();
            if r <= outer && r >= inner {
                labels[i] = RING;
                signal[i] = ring_level;
            }
            let (dy, dx) = (py - ey, px - ex);
            let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
            if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                labels[i] = ELLIPSE;
                signal[i] = ellipse_level;
            }
        }
    }
    let jitter = rng.random_range(0.8..1.25);
    let offset = rng.random_range(-0.5..0.5);
    let mut img: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 / h as f64 - 0.5, (i % w) as f64 / w as f64 - 0.5);
            jitter * (signal[i] + gy * y + gx * x + noise.sample(rng)) + offset
        })
        .collect();
    standardize(&mut img);
    (img, labels)
}

/// Generates `n` images and splits them 80/20 into train+val and test,
/// then 90/10 into train and validation.
pub fn gen_synthetic(seed: u64, n: usize, height: usize, width: usize, classes: usize) -> Result<SyntheticDataset, HarnessError> {
    if n < 10 {
        return Err(HarnessError::Config(format!("need at least 10 images for the splits, got {n}")));
    }
    if classes != 3 {
        return Err(HarnessError::Config(format!("the generator draws 3 classes, got {classes}")));
    }
    if height < 8 || width < 8 {
        return Err(HarnessError::Config(format!("images must be at least 8x8, got {height}x{width}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    while images.len() < n {
        let (img, lab) = draw_image(&mut rng, height, width);
        // the ellipse may be fully covered by nothing only if it rasterizes
        // to zero pixels; redraw such images
        if lab.contains(&ELLIPSE) && lab.contains(&RING) {
            images.push(img);
            labels.push(lab);
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_test = n / 5;
    let test = order[..n_test].to_vec();
    let rest = &order[n_test..];
    let n_val = (rest.len() / 10).max(1);
    let val = rest[..n_val].to_vec();
    let train = rest[n_val..].to_vec();
    Ok(SyntheticDataset { height, width, classes, images, labels, train, val, test })
}

impl SyntheticDataset {
    /// Stacks images `idx` into a `[B, 1, H, W]` buffer and `[B, H, W]` labels.
    pub fn batch(&self, idx: &[usize], flip: Option<&[bool]>) -> (Vec<f64>, Vec<usize>) {
        let (h, w) = (self.height, self.width);
        let mut x = Vec::with_capacity(idx.len() * h * w);
        let mut y = Vec::with_capacity(idx.len() * h * w);
        for (k, &i) in idx.iter().enumerate() {
            let mirrored = flip.is_some_and(|f| f[k]);
            for row in 0..h {
                for col in 0..w {
                    let c = if mirrored { w - 1 - col } else { col };
                    x.push(self.images[i][row * w + c]);
                    y.push(self.labels[i][row * w + c]);
                }
            }
        }
        (x, y)
    }

    pub fn foreground_fraction(&self, i: usize) -> f64 {
        self.labels[i].iter().filter(|&&l| l != BACKGROUND).count() as f64 / self.labels[i].len() as f64
    }
}
