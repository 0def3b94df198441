//! Randomized invariants across the crate.

use std::collections::BTreeSet;

use fmprune::clusterlab::{
    avg_first_distance, classify_trend, dip_dist, dip_statistic, neighbor_count, ChannelDistances, DipAggregate,
    MetricKind,
};
use fmprune::losses::{cross_entropy, delta_opt, dice_loss, one_hot, pooled_view, DeltaNormMode, LossConfig};
use fmprune::pruner::{select_removals, PrunerConfig, ThresholdState};
use fmprune::segnet::{count_flops, FeatureMapRecord, Mode, NetworkGraph, NormKind, UnetSpec};
use fmprune::Tensor;
use proptest::prelude::*;

fn record(data: Vec<f64>, shape: [usize; 4]) -> FeatureMapRecord<f64> {
    FeatureMapRecord { layer: "l".into(), layer_index: 0, epoch: 0, output: Tensor::new(data, shape).unwrap() }
}

/// `(b, c, h, w)` with even spatial sizes and matching data.
fn map_strategy() -> impl Strategy<Value = ([usize; 4], Vec<f64>)> {
    (1usize..4, 2usize..7, 1usize..4, 1usize..4).prop_flat_map(|(b, c, h2, w2)| {
        let shape = [b, c, 2 * h2, 2 * w2];
        (Just(shape), prop::collection::vec(-3.0f64..3.0, b * c * 4 * h2 * w2))
    })
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn first_channel_bounds_every_pair((shape, data) in map_strategy()) {
        let phi = pooled_view(&record(data, shape).output, 2, DeltaNormMode::MinmaxFeatureMaps).unwrap();
        let [b, c, h, w] = phi.dims4("test").unwrap();
        let plane = h * w;
        let at = |s: usize, ch: usize| &phi.data()[(s * c + ch) * plane..(s * c + ch + 1) * plane];
        for s in 0..b {
            for i in 1..c {
                for j in 1..c {
                    let lhs = l2(at(s, i), at(s, j));
                    prop_assert!(lhs <= l2(at(s, 0), at(s, i)) + l2(at(s, 0), at(s, j)) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn regularizer_is_non_negative((shape, data) in map_strategy()) {
        let v = delta_opt(&[record(data, shape)], &LossConfig::default()).unwrap().item();
        prop_assert!(v >= 0.0);
    }

    #[test]
    fn dip_bounds_and_affine_invariance(
        s in prop::collection::vec(-100.0f64..100.0, 2..40),
        a in 0.01f64..50.0,
        b in -100.0f64..100.0,
    ) {
        let n = s.len() as f64;
        let d = dip_statistic(&s).unwrap();
        prop_assert!(d >= 1.0 / (2.0 * n) - 1e-15 && d <= 0.25 + 1e-15);
        let t: Vec<f64> = s.iter().map(|v| a * v + b).collect();
        prop_assert!((dip_statistic(&t).unwrap() - d).abs() < 1e-9);
    }

    #[test]
    fn measures_ignore_channel_order(
        data in prop::collection::vec(-1.0f64..1.0, 6 * 2 * 5),
        perm in Just((1..6).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let (c, s, len) = (6, 2, 5);
        let d = ChannelDistances::from_vectors(c, s, len, &data);
        // channel 0 stays first: the neighbor radius and the first-channel
        // distance are positional
        let order: Vec<usize> = std::iter::once(0).chain(perm).collect();
        let permuted: Vec<f64> = order.iter().flat_map(|&ch| data[ch * s * len..(ch + 1) * s * len].to_vec()).collect();
        let p = ChannelDistances::from_vectors(c, s, len, &permuted);
        prop_assert!((dip_dist(&d, DipAggregate::Mean).unwrap() - dip_dist(&p, DipAggregate::Mean).unwrap()).abs() < 1e-12);
        prop_assert_eq!(dip_dist(&d, DipAggregate::Max).unwrap(), dip_dist(&p, DipAggregate::Max).unwrap());
        prop_assert_eq!(neighbor_count(&d, 0.2).unwrap(), neighbor_count(&p, 0.2).unwrap());
        prop_assert!((avg_first_distance(&d).unwrap() - avg_first_distance(&p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn trend_classification_is_total(series in prop::collection::vec(0.0f64..10.0, 6..30)) {
        for kind in [MetricKind::Dip, MetricKind::Neighbors, MetricKind::Distance] {
            let a = classify_trend(&series, kind).unwrap();
            prop_assert_eq!(a, classify_trend(&series, kind).unwrap());
        }
    }

    #[test]
    fn removals_spare_the_reference(
        d in prop::collection::vec(0.0f64..1.0, 1..12),
        reference in 0usize..12,
        tau in 0.0f64..0.5,
    ) {
        let reference = reference % (d.len() + 1);
        let mut dist: Vec<Option<f64>> = d.into_iter().map(Some).collect();
        dist.insert(reference, None);
        let removed = select_removals(&dist, tau);
        prop_assert!(!removed.contains(&reference));
        prop_assert!(removed.len() < dist.len() - 1 || dist.len() == 1);
        for (i, v) in dist.iter().enumerate() {
            if let Some(v) = v {
                if !removed.contains(&i) {
                    // survivors exceed tau unless kept as the farthest
                    prop_assert!(*v > tau || removed.len() == dist.len() - 2);
                }
            }
        }
    }

    #[test]
    fn thresholds_rise_in_exact_clamped_steps(
        losses in prop::collection::vec((0.0f64..2.0, 0.0f64..2.0), 2..60),
        pruned in prop::collection::vec(0usize..3, 60),
    ) {
        let cfg = PrunerConfig::default();
        let mut st = ThresholdState::new(cfg, ["a".to_string()]).unwrap();
        let mut prev = st.tau("a").unwrap();
        for (e, (t, v)) in losses.iter().enumerate() {
            let epoch = e + 1;
            st.record_losses(*t, *v);
            if st.check_conditions("a", epoch, 20).unwrap() {
                st.increase_threshold("a", epoch).unwrap();
            }
            st.record_pruned("a", epoch, pruned[e]).unwrap();
            let tau = st.tau("a").unwrap();
            prop_assert!(tau >= prev && tau <= cfg.tau_max);
            let delta = tau - prev;
            prop_assert!(delta == 0.0 || (delta - cfg.step()).abs() < 1e-12);
            prev = tau;
        }
    }

    #[test]
    fn random_removals_keep_the_graph_consistent(seed in 0u64..1000, picks in prop::collection::vec((0usize..64, 0usize..64), 1..8)) {
        let spec = UnetSpec { levels: 3, init_filters: 4, in_channels: 1, num_classes: 3, norm: NormKind::Instance };
        let mut net = NetworkGraph::<f64>::build_unet(spec, seed).unwrap();
        for (layer_pick, chan_pick) in picks {
            let prunable = net.prunable_indices();
            let li = prunable[layer_pick % prunable.len()];
            let live = net.layers()[li].out_channels();
            if live < 2 {
                continue;
            }
            let before = count_flops(&net, 8, 8).unwrap().total;
            net.remove_filters_at(li, &BTreeSet::from([chan_pick % live])).unwrap();
            net.audit().unwrap();
            prop_assert!(count_flops(&net, 8, 8).unwrap().total < before);
            prop_assert_eq!(net.layers().last().unwrap().out_channels(), 3);
        }
        let x = Tensor::new(vec![0.5; 2 * 8 * 8], [2, 1, 8, 8]).unwrap();
        let pass = net.forward(&x, false, Mode::Eval).unwrap();
        prop_assert_eq!(pass.logits.shape(), &[2, 3, 8, 8]);
    }

    #[test]
    fn losses_ignore_batch_order(
        logits in prop::collection::vec(-3.0f64..3.0, 3 * 3 * 4),
        labels in prop::collection::vec(0usize..3, 3 * 4),
        perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
    ) {
        let (b, c, plane) = (3, 3, 4);
        let pl: Vec<f64> = perm.iter().flat_map(|&i| logits[i * c * plane..(i + 1) * c * plane].to_vec()).collect();
        let py: Vec<usize> = perm.iter().flat_map(|&i| labels[i * plane..(i + 1) * plane].to_vec()).collect();
        let eval = |l: &[f64], y: &[usize]| {
            let t = Tensor::new(l.to_vec(), [b, c, 2, 2]).unwrap();
            let ce = cross_entropy(&t, y).unwrap().item();
            let dice = dice_loss(&t.softmax_channels().unwrap(), &one_hot::<f64>(y, b, c, 2, 2).unwrap()).unwrap().item();
            (ce, dice)
        };
        let ((c0, d0), (c1, d1)) = (eval(&logits, &labels), eval(&pl, &py));
        prop_assert!((c0 - c1).abs() < 1e-12 && (d0 - d1).abs() < 1e-12);
    }

    #[test]
    fn conv_is_linear_and_pooling_is_consistent(
        x in prop::collection::vec(-2.0f64..2.0, 2 * 4 * 4),
        y in prop::collection::vec(-2.0f64..2.0, 2 * 4 * 4),
        w in prop::collection::vec(-1.0f64..1.0, 3 * 2 * 9),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        k in -5.0f64..5.0,
    ) {
        let t = |d: &[f64]| Tensor::new(d.to_vec(), [1, 2, 4, 4]).unwrap();
        let wt = Tensor::new(w, [3, 2, 3, 3]).unwrap();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = t(&mix).conv2d(&wt, None, 1, 1).unwrap();
        let (cx, cy) = (t(&x).conv2d(&wt, None, 1, 1).unwrap(), t(&y).conv2d(&wt, None, 1, 1).unwrap());
        for ((l, p), q) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
            prop_assert!((l - (a * p + b * q)).abs() < 1e-10);
        }
        prop_assert_eq!(t(&x).avg_pool2d(1).unwrap().to_vec(), x.clone());
        let constant = Tensor::new(vec![k; 2 * 4 * 4], [1, 2, 4, 4]).unwrap();
        prop_assert!(constant.avg_pool2d(2).unwrap().data().iter().all(|v| (v - k).abs() < 1e-12));
    }
}
