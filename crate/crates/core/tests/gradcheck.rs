//! Autodiff gradients against central finite differences.

mod common;

use common::{grad_cases, network_gradcheck, small_net, training_loss, GRAD_TOL};
use fmprune::losses::{delta_opt, DeltaNormMode, LossConfig};
use fmprune::segnet::{Mode, NormKind};

#[test]
fn every_op_on_a_few_instances() {
    for (name, case) in grad_cases() {
        for seed in [1, 2, 3] {
            let err = case(seed * 10);
            assert!(err < GRAD_TOL, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn regularizer_gradient_in_every_mode() {
    for mode in [DeltaNormMode::MinmaxFeatureMaps, DeltaNormMode::DivideByMaxDistance, DeltaNormMode::None] {
        let cfg = LossConfig { delta_norm_mode: mode, ..Default::default() };
        let err = network_gradcheck(&small_net(NormKind::Instance, 5), 5, |n, x| {
            let pass = n.forward(x, true, Mode::Train).unwrap();
            delta_opt(&pass.records, &cfg).unwrap().scale(cfg.lambda).unwrap()
        });
        assert!(err < GRAD_TOL, "{mode:?}: {err}");
    }
}

#[test]
fn full_training_loss_gradient() {
    for norm in [NormKind::Instance, NormKind::Batch] {
        let err = network_gradcheck(&small_net(norm, 7), 7, |n, x| training_loss(n, x, DeltaNormMode::MinmaxFeatureMaps));
        assert!(err < GRAD_TOL, "{norm:?}: {err}");
    }
}
