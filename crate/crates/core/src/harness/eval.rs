//! Per-class Dice and HD95 on label maps.

use serde::{Deserialize, Serialize};

/// Per foreground class, averaged over images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub dice: Vec<f64>,
    pub hd95: Vec<f64>,
}

impl Evaluation {
    pub fn mean_dice(&self) -> f64 {
        self.dice.iter().sum::<f64>() / self.dice.len() as f64
    }

    pub fn mean_hd95(&self) -> f64 {
        self.hd95.iter().sum::<f64>() / self.hd95.len() as f64
    }
}

/// `2|A∩B| / (|A|+|B|)`; 1 when both masks are empty.
pub fn dice(pred: &[bool], target: &[bool]) -> f64 {
    let inter = pred.iter().zip(target).filter(|(p, t)| **p && **t).count();
    let total = pred.iter().filter(|p| **p).count() + target.iter().filter(|t| **t).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Mask pixels with a 4-neighbour outside the mask; the image border counts
/// as outside.
fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<(f64, f64)> {
    let inside = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize];
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if inside(y, x) && !(inside(y - 1, x) && inside(y + 1, x) && inside(y, x - 1) && inside(y, x + 1)) {
                out.push((y as f64, x as f64));
            }
        }
    }
    out
}

fn directed<'a>(from: &'a [(f64, f64)], to: &'a [(f64, f64)]) -> impl Iterator<Item = f64> + 'a {
    from.iter().map(move |&(y, x)| to.iter().map(|&(ty, tx)| (y - ty).hypot(x - tx)).fold(f64::INFINITY, f64::min))
}

/// Linear-interpolated percentile of unsorted `values`, `q` in `[0, 100]`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// 95th percentile of the pooled boundary-to-boundary distances in both
/// directions. Both empty gives 0; exactly one empty gives the image
/// diagonal.
pub fn hd95(pred: &[bool], target: &[bool], h: usize, w: usize) -> f64 {
    let (bp, bt) = (boundary(pred, h, w), boundary(target, h, w));
    match (bp.is_empty(), bt.is_empty()) {
        (true, true) => 0.0,
        (true, false) | (false, true) => (h as f64).hypot(w as f64),
        _ => {
            let mut d: Vec<f64> = directed(&bp, &bt).chain(directed(&bt, &bp)).collect();
            percentile(&mut d, 95.0)
        }
    }
}

/// Averages per-image scores of every foreground class over `pred`/`target`
/// label maps of `h * w` pixels each.
pub fn evaluate_labels(pred: &[Vec<usize>], target: &[Vec<usize>], classes: usize, h: usize, w: usize) -> Evaluation {
    assert!(!pred.is_empty() && pred.len() == target.len(), "evaluation needs matching nonempty label sets");
    let mut dice_sum = vec![0.0; classes - 1];
    let mut hd_sum = vec![0.0; classes - 1];
    for (p, t) in pred.iter().zip(target) {
        for c in 1..classes {
            let pm: Vec<bool> = p.iter().map(|&l| l == c).collect();
            let tm: Vec<bool> = t.iter().map(|&l| l == c).collect();
            dice_sum[c - 1] += dice(&pm, &tm);
            hd_sum[c - 1] += hd95(&pm, &tm, h, w);
        }
    }
    let n = pred.len() as f64;
    Evaluation { dice: dice_sum.iter().map(|s| s / n).collect(), hd95: hd_sum.iter().map(|s| s / n).collect() }
}

/// Per-pixel argmax of `[B, C, H, W]` logits, as one label map per image.
pub fn argmax_labels(logits: &[f64], batch: usize, classes: usize, plane: usize) -> Vec<Vec<usize>> {
    (0..batch)
        .map(|b| {
            (0..plane)
                .map(|p| {
                    (0..classes)
                        .map(|c| logits[(b * classes + c) * plane + p])
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (c, v)| if v > best.1 { (c, v) } else { best })
                        .0
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> Vec<bool> {
        (0..h * w).map(|i| (y0..y0 + side).contains(&(i / w)) && (x0..x0 + side).contains(&(i % w))).collect()
    }

    #[test]
    fn identity_and_empty_conventions() {
        let m = square(16, 16, 3, 4, 6);
        assert_eq!((dice(&m, &m), hd95(&m, &m, 16, 16)), (1.0, 0.0));
        let empty = vec![false; 256];
        assert_eq!((dice(&empty, &empty), hd95(&empty, &empty, 16, 16)), (1.0, 0.0));
        assert_eq!(dice(&empty, &m), 0.0);
        assert_eq!(hd95(&empty, &m, 16, 16), 16f64.hypot(16.0));
    }

    #[test]
    fn one_pixel_shift_of_a_large_square() {
        let a = square(40, 40, 5, 5, 20);
        let b = square(40, 40, 5, 6, 20);
        assert_eq!(hd95(&a, &b, 40, 40), 1.0);
        assert!((dice(&a, &b) - 2.0 * 380.0 / 800.0).abs() < 1e-12);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&mut [3.0, 1.0, 2.0, 4.0, 5.0], 50.0), 3.0);
        assert!((percentile(&mut [0.0, 10.0], 95.0) - 9.5).abs() < 1e-12);
    }

    #[test]
    fn argmax_and_averaging() {
        // one image, 2 classes, 2 pixels: class 1 wins at pixel 1
        let labels = argmax_labels(&[1.0, 0.0, 0.0, 2.0], 1, 2, 2);
        assert_eq!(labels, vec![vec![0, 1]]);
        let e = evaluate_labels(&labels, &[vec![0, 1]], 2, 1, 2);
        assert_eq!((e.dice.clone(), e.hd95.clone()), (vec![1.0], vec![0.0]));
        assert_eq!(e.mean_dice(), 1.0);
    }
}
