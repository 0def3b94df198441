#![allow(dead_code)]

use fmprune::losses::{
    cross_entropy, delta_opt, dice_loss, minmax_normalize_channels, one_hot, reference_distances, row_max_normalize,
    total_loss, DeltaNormMode, LossConfig,
};
use fmprune::segnet::{FeatureMapRecord, Mode, NetworkGraph, NormKind, UnetSpec};
use fmprune::{backward, Tensor};
use microlp::{ComparisonOp, OptimizationDirection, Problem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error bound for gradient checks.
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Worst relative error between autodiff and central differences over all
/// inputs of a scalar-valued `f`.
pub fn gradcheck(inputs: &[(Vec<f64>, Vec<usize>)], f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>) -> f64 {
    let params: Vec<Tensor<f64>> =
        inputs.iter().map(|(d, s)| Tensor::param(d.clone(), s.clone()).unwrap()).collect();
    let out = f(&params);
    let grads = backward(&out).unwrap();
    let mut worst = 0.0f64;
    for (k, (data, _)) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&params[k]);
        let numeric = numeric_gradient(data, 1e-6, |probe| {
            let ts: Vec<Tensor<f64>> = inputs
                .iter()
                .enumerate()
                .map(|(j, (d, s))| {
                    let v = if j == k { probe.to_vec() } else { d.clone() };
                    Tensor::new(v, s.clone()).unwrap()
                })
                .collect();
            f(&ts).item()
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Contracts an arbitrary output with fixed weights so every output
/// element contributes to the checked scalar.
pub fn probe(t: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let w = Tensor::new(uniform(&mut rng(seed), t.numel(), -1.0, 1.0), t.shape().to_vec()).unwrap();
    t.mul(&w).unwrap().sum().unwrap()
}

pub fn input(seed: u64, shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    (uniform(&mut rng(seed), shape.iter().product(), -1.0, 1.0), shape.to_vec())
}

/// Random labels for a `[b, classes, h, w]` batch.
pub fn labels(seed: u64, n: usize, classes: usize) -> Vec<usize> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(0..classes)).collect()
}

/// One gradient case: a name and the worst relative error on the random
/// instance drawn from a seed.
pub type GradCase = (&'static str, fn(u64) -> f64);

/// Every differentiable op and loss, each on a random small instance.
pub fn grad_cases() -> Vec<GradCase> {
    fn conv(s: u64, stride: usize, pad: usize, k: usize) -> f64 {
        gradcheck(&[input(s, &[2, 3, 6, 6]), input(s + 1, &[4, 3, k, k]), input(s + 2, &[4])], |t| {
            probe(&t[0].conv2d(&t[1], Some(&t[2]), stride, pad).unwrap(), s + 3)
        })
    }
    fn conv_t(s: u64, stride: usize, pad: usize, k: usize) -> f64 {
        gradcheck(&[input(s, &[2, 3, 4, 4]), input(s + 1, &[2, 3, k, k]), input(s + 2, &[2])], |t| {
            probe(&t[0].conv_transpose2d(&t[1], Some(&t[2]), stride, pad).unwrap(), s + 3)
        })
    }
    vec![
        ("conv2d 3x3 s1 p1", |s| conv(s, 1, 1, 3)),
        ("conv2d 3x3 s2 p1", |s| conv(s, 2, 1, 3)),
        ("conv2d 1x1", |s| conv(s, 1, 0, 1)),
        ("conv2d 2x2 s2", |s| conv(s, 2, 0, 2)),
        ("conv_transpose2d 2x2 s2", |s| conv_t(s, 2, 0, 2)),
        ("conv_transpose2d 3x3 s1 p1", |s| conv_t(s, 1, 1, 3)),
        ("conv_transpose2d 3x3 s2 p1", |s| conv_t(s, 2, 1, 3)),
        ("avg_pool2d", |s| gradcheck(&[input(s, &[2, 2, 5, 4])], |t| probe(&t[0].avg_pool2d(2).unwrap(), s + 1))),
        ("max_pool2d", |s| gradcheck(&[input(s, &[1, 2, 4, 4])], |t| probe(&t[0].max_pool2d(2).unwrap(), s + 1))),
        ("leaky_relu", |s| gradcheck(&[input(s, &[3, 4])], |t| probe(&t[0].leaky_relu(0.01).unwrap(), s + 1))),
        ("mul/sub/maximum", |s| {
            gradcheck(&[input(s, &[3, 4]), input(s + 1, &[3, 4])], |t| {
                probe(&t[0].mul(&t[1]).unwrap().sub(&t[1]).unwrap().maximum(&t[0]).unwrap(), s + 2)
            })
        }),
        ("concat_channels", |s| {
            gradcheck(&[input(s, &[2, 1, 3, 3]), input(s + 1, &[2, 2, 3, 3])], |t| {
                probe(&Tensor::concat_channels(&[t[0].clone(), t[1].clone()]).unwrap(), s + 2)
            })
        }),
        ("softmax_channels", |s| gradcheck(&[input(s, &[2, 3, 2, 2])], |t| probe(&t[0].softmax_channels().unwrap(), s + 1))),
        ("instance_norm", |s| gradcheck(&[input(s, &[2, 3, 3, 3])], |t| probe(&t[0].instance_norm(1e-5).unwrap(), s + 1))),
        ("batch_norm", |s| gradcheck(&[input(s, &[3, 2, 2, 3])], |t| probe(&t[0].batch_norm(1e-5).unwrap().0, s + 1))),
        ("channel_affine", |s| {
            gradcheck(&[input(s, &[2, 3, 2, 2]), input(s + 1, &[3]), input(s + 2, &[3])], |t| {
                probe(&t[0].channel_affine(&t[1], &t[2]).unwrap(), s + 3)
            })
        }),
        ("minmax_normalize_channels", |s| {
            gradcheck(&[input(s, &[2, 3, 3, 3])], |t| probe(&minmax_normalize_channels(&t[0]).unwrap(), s + 1))
        }),
        ("reference_distances", |s| {
            let reference = (s % 4) as usize;
            gradcheck(&[input(s, &[2, 4, 2, 2])], |t| probe(&reference_distances(&t[0], reference).unwrap(), s + 1))
        }),
        ("row_max_normalize", |s| {
            let (mut d, shape) = input(s, &[3, 4]);
            d.iter_mut().for_each(|v| *v = v.abs() + 0.1);
            gradcheck(&[(d, shape)], |t| probe(&row_max_normalize(&t[0]).unwrap(), s + 1))
        }),
        ("cross_entropy", |s| {
            let y = labels(s + 1, 8, 3);
            gradcheck(&[input(s, &[2, 3, 2, 2])], |t| cross_entropy(&t[0], &y).unwrap())
        }),
        ("dice_loss", |s| {
            let target = one_hot::<f64>(&labels(s + 1, 8, 3), 2, 3, 2, 2).unwrap();
            gradcheck(&[input(s, &[2, 3, 2, 2])], |t| dice_loss(&t[0].softmax_channels().unwrap(), &target).unwrap())
        }),
        ("lambda * delta_opt on maps", |s| {
            let cfg = LossConfig::default();
            gradcheck(&[input(s, &[2, 3, 4, 4]), input(s + 1, &[2, 5, 2, 2])], |t| {
                let records: Vec<FeatureMapRecord<f64>> = t
                    .iter()
                    .enumerate()
                    .map(|(i, o)| FeatureMapRecord { layer: format!("l{i}"), layer_index: i, epoch: 0, output: o.clone() })
                    .collect();
                delta_opt(&records, &cfg).unwrap().scale(cfg.lambda).unwrap()
            })
        }),
        ("lambda * delta_opt through a network", |s| {
            let cfg = LossConfig::default();
            network_gradcheck(&small_net(NormKind::Instance, s), s, |n, x| {
                let pass = n.forward(x, true, Mode::Train).unwrap();
                delta_opt(&pass.records, &cfg).unwrap().scale(cfg.lambda).unwrap()
            })
        }),
    ]
}

pub fn small_net(norm: NormKind, seed: u64) -> NetworkGraph<f64> {
    let spec = UnetSpec { levels: 2, init_filters: 3, in_channels: 1, num_classes: 2, norm };
    NetworkGraph::build_unet(spec, seed).unwrap()
}

/// Worst relative error of d(loss)/d(every weight tensor) of `net` on a
/// random `[2, 1, 8, 8]` batch.
pub fn network_gradcheck(
    net: &NetworkGraph<f64>,
    seed: u64,
    loss: impl Fn(&NetworkGraph<f64>, &Tensor<f64>) -> Tensor<f64>,
) -> f64 {
    let x = Tensor::new(uniform(&mut rng(seed + 100), 2 * 8 * 8, -1.0, 1.0), [2, 1, 8, 8]).unwrap();
    let grads = backward(&loss(net, &x)).unwrap();
    let mut probe_net = net.clone();
    let mut worst = 0.0f64;
    for li in 0..net.layers().len() {
        let w = net.layers()[li].weight.value().clone();
        let analytic = grads.get_or_zeros(&w);
        let numeric = numeric_gradient(w.data(), 1e-6, |v| {
            probe_net.layers_mut()[li].weight.assign(v.to_vec()).unwrap();
            loss(&probe_net, &x).item()
        });
        probe_net.layers_mut()[li].weight.assign(w.to_vec()).unwrap();
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Full training loss (cross-entropy, Dice and the regularizer) of a
/// two-class network.
pub fn training_loss(net: &NetworkGraph<f64>, x: &Tensor<f64>, mode: DeltaNormMode) -> Tensor<f64> {
    let [b, _, h, w] = x.dims4("training_loss").unwrap();
    let labels: Vec<usize> = (0..b * h * w).map(|i| usize::from((i % w) >= w / 2)).collect();
    let target = one_hot::<f64>(&labels, b, 2, h, w).unwrap();
    let cfg = LossConfig { delta_norm_mode: mode, ..Default::default() };
    let pass = net.forward(x, true, Mode::Train).unwrap();
    let ce = cross_entropy(&pass.logits, &labels).unwrap();
    let dice = dice_loss(&pass.logits.softmax_channels().unwrap(), &target).unwrap();
    let dopt = delta_opt(&pass.records, &cfg).unwrap();
    total_loss(&ce, &dice, Some(&dopt), cfg.lambda).unwrap()
}

/// Dip of sorted distinct samples by direct fit of the closest unimodal CDF.
///
/// The closest unimodal CDF may be taken piecewise linear between samples
/// with values u_i at x_i. The empirical CDF jumps from (i−1)/n to i/n at
/// x_i, so the sup deviation is 1/(2n) + max_i |u_i − (i − ½)/n|. For every
/// mode position m, a linear program minimizes that maximum subject to u
/// non-decreasing with slopes non-decreasing up to x_m and non-increasing
/// after it.
pub fn dip_oracle(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    let nf = n as f64;
    let mut best = f64::INFINITY;
    for m in 0..n {
        let mut p = Problem::new(OptimizationDirection::Minimize);
        let t = p.add_var(1.0, (0.0, f64::INFINITY));
        let u: Vec<_> = (0..n).map(|_| p.add_var(0.0, (0.0, 1.0))).collect();
        for (i, &ui) in u.iter().enumerate() {
            let target = (i as f64 + 0.5) / nf;
            p.add_constraint([(ui, 1.0), (t, -1.0)], ComparisonOp::Le, target);
            p.add_constraint([(ui, 1.0), (t, 1.0)], ComparisonOp::Ge, target);
        }
        for i in 0..n - 1 {
            p.add_constraint([(u[i + 1], 1.0), (u[i], -1.0)], ComparisonOp::Ge, 0.0);
        }
        for i in 0..n.saturating_sub(2) {
            let (g0, g1) = (sorted[i + 1] - sorted[i], sorted[i + 2] - sorted[i + 1]);
            // slope over segment i+1 minus slope over segment i
            let terms = [(u[i], 1.0 / g0), (u[i + 1], -1.0 / g0 - 1.0 / g1), (u[i + 2], 1.0 / g1)];
            if i + 1 < m {
                p.add_constraint(terms, ComparisonOp::Ge, 0.0);
            } else if i >= m {
                p.add_constraint(terms, ComparisonOp::Le, 0.0);
            }
        }
        best = best.min(p.solve().expect("feasible").objective());
    }
    best + 1.0 / (2.0 * nf)
}

/// Every subset of `{0, 1, …, 12}` with 2 to 12 elements, ascending.
pub fn grid_subsets() -> impl Iterator<Item = Vec<f64>> {
    (0u32..(1 << 13))
        .filter(|m| (2..=12).contains(&m.count_ones()))
        .map(|mask| (0..13).filter(|b| mask & (1 << b) != 0).map(f64::from).collect())
}
