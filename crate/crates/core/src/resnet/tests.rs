use super::*;
use crate::numerics::{check_gradients, Tensor};
use crate::paths::{enumerate_path_codes, linear_unravel_oracle};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform_net(n: usize, width: usize, seed: u64) -> ResidualNet {
    ResidualNet::new(&Architecture::uniform(2, 3, n, width), &mut rng(seed)).unwrap()
}

/// Net with trained-looking running statistics so eval mode is not trivial.
fn warmed(net: &ResidualNet, x: &Tensor) -> ResidualNet {
    let mut net = net.clone();
    for _ in 0..3 {
        let mut tape = Tape::new();
        let r = net.record(&mut tape, x, None, Mode::Train).unwrap();
        net.fold_batch_stats(&r.bn_stats);
    }
    net
}

fn input(rows: usize, seed: u64) -> Tensor {
    Tensor::randn(rows, 2, 1.0, &mut rng(seed))
}

/// Block-by-block evaluation without masks.
fn recursive_eval(net: &ResidualNet, x: &Tensor, mode: Mode) -> Tensor {
    let mut h = x.matmul_nt(&net.embed.weight).unwrap().add_row(&net.embed.bias).unwrap();
    for b in &net.blocks {
        h = b.forward(&h, mode).unwrap();
    }
    h.matmul_nt(&net.head.weight).unwrap().add_row(&net.head.bias).unwrap()
}

#[test]
fn zero_branch_is_identity() {
    let mut b = Block::standard(4, 0, &mut rng(1));
    if let Some(Branch::PreActivation { w_out, .. }) = &mut b.branch {
        *w_out = Tensor::zeros(4, 4);
    }
    let x = Tensor::randn(5, 4, 1.0, &mut rng(2));
    assert_eq!(b.forward(&x, Mode::Train).unwrap(), x);
}

#[test]
fn block_output_minus_input_is_branch() {
    let b = Block::standard(4, 0, &mut rng(1));
    let x = Tensor::randn(6, 4, 1.0, &mut rng(2));
    for mode in [Mode::Train, Mode::Eval] {
        let y = b.forward(&x, mode).unwrap();
        let f = b.branch_forward(&x, mode).unwrap();
        let diff = y.sub(&x).unwrap().sub(&f).unwrap();
        assert!(diff.data().iter().all(|d| d.abs() < 1e-12));
    }
}

#[test]
fn standard_mask_matches_recursive_evaluation() {
    let x = input(9, 3);
    let net = warmed(&ResidualNet::new(&Architecture::three_stage(2, 3, 2), &mut rng(4)).unwrap(), &x);
    for mode in [Mode::Train, Mode::Eval] {
        let masked = net.forward(&x, &RoutingMask::standard(net.n()), mode).unwrap();
        assert_eq!(masked, recursive_eval(&net, &x, mode));
    }
}

#[test]
fn skip_only_gate_equals_deletion() {
    let x = input(7, 5);
    let net = warmed(&uniform_net(5, 6, 6), &x);
    for i in 0..net.n() {
        let gated = net.forward(&x, &RoutingMask::skipping(net.n(), &[i]), Mode::Eval).unwrap();
        let deleted = net.delete_block(i).unwrap().logits(&x).unwrap();
        assert_eq!(gated, deleted);
    }
}

#[test]
fn silencing_every_branch_leaves_projections() {
    let x = input(7, 5);
    let net = warmed(&ResidualNet::new(&Architecture::three_stage(2, 3, 2), &mut rng(8)).unwrap(), &x);
    let all = (0..net.n()).collect::<Vec<_>>();
    let expect = net.head_of_embed(&x).unwrap();
    let gated = net.forward(&x, &RoutingMask::uniform(net.n(), Gate::SkipOnly), Mode::Eval).unwrap();
    let deleted = net.delete_blocks(&all).unwrap().logits(&x).unwrap();
    assert_eq!(gated, expect);
    assert_eq!(deleted, expect);
}

#[test]
fn delete_out_of_range_fails() {
    assert!(uniform_net(3, 4, 1).delete_block(3).is_err());
}

#[test]
fn identity_permutation_is_bitwise_identical() {
    let x = input(8, 1);
    let net = warmed(&uniform_net(4, 6, 2), &x);
    let same = net.permute_blocks(&[0, 1, 2, 3]).unwrap();
    assert_eq!(same.logits(&x).unwrap(), net.logits(&x).unwrap());
}

#[test]
fn swapping_identical_blocks_changes_nothing() {
    let x = input(8, 1);
    let mut net = warmed(&uniform_net(4, 6, 2), &x);
    net.blocks[2] = net.blocks[1].clone();
    let swapped = net.permute_blocks(&[0, 2, 1, 3]).unwrap();
    assert_eq!(swapped.logits(&x).unwrap(), net.logits(&x).unwrap());
}

#[test]
fn cross_stage_and_transition_moves_are_rejected() {
    let net = ResidualNet::new(&Architecture::three_stage(2, 3, 2), &mut rng(1)).unwrap();
    assert_eq!(net.transition_indices(), vec![2, 4]);
    // block 1 (stage 0) with block 3 (stage 1)
    assert!(matches!(net.permute_blocks(&[0, 3, 2, 1, 4, 5]), Err(Error::Incompatible(_))));
    // transition 2 with block 3, same stage
    assert!(matches!(net.permute_blocks(&[0, 1, 3, 2, 4, 5]), Err(Error::Incompatible(_))));
    assert!(net.permute_blocks(&[1, 0, 2, 3, 4, 5]).is_ok());
    assert!(net.permute_blocks(&[0, 0, 2, 3, 4, 5]).is_err());
    assert!(net.permute_blocks(&[0, 1, 2]).is_err());
}

#[test]
fn mask_length_is_checked() {
    let net = uniform_net(3, 4, 1);
    let err = net.forward(&input(4, 1), &RoutingMask::standard(2), Mode::Eval).unwrap_err();
    assert!(err.to_string().contains("2 gates for 3 blocks"));
}

#[test]
fn input_width_is_checked() {
    let net = uniform_net(3, 4, 1);
    let x = Tensor::zeros(4, 3);
    assert!(matches!(net.logits(&x), Err(Error::Dimension { .. })));
}

fn loss_of<'a>(net: &'a ResidualNet, labels: &[usize], mode: Mode) -> impl Fn(&mut Tape, Var) -> Result<Var> + 'a {
    let labels = labels.to_vec();
    move |tape, x| {
        let r = net.record_input(tape, x, None, mode)?;
        tape.softmax_cross_entropy(r.logits, &labels)
    }
}

#[test]
fn full_net_input_gradient_matches_finite_differences() {
    let x = input(6, 11);
    let labels = [0, 1, 2, 0, 1, 2];
    let net = warmed(&ResidualNet::new(&Architecture::three_stage(2, 3, 1), &mut rng(12)).unwrap(), &x);
    for mode in [Mode::Train, Mode::Eval] {
        let err = check_gradients(loss_of(&net, &labels, mode), &x, 1e-6).unwrap();
        assert!(err < 1e-4, "{mode:?}: relative error {err}");
    }
}

#[test]
fn full_net_parameter_gradients_match_finite_differences() {
    let x = input(6, 21);
    let labels = [0, 1, 2, 2, 1, 0];
    let net = ResidualNet::new(&Architecture::three_stage(2, 3, 1), &mut rng(22)).unwrap();
    let loss = |n: &ResidualNet| {
        let mut tape = Tape::new();
        let r = n.record(&mut tape, &x, None, Mode::Train).unwrap();
        let l = tape.softmax_cross_entropy(r.logits, &labels).unwrap();
        tape.value(l).get(0, 0)
    };
    let mut tape = Tape::new();
    let r = net.record(&mut tape, &x, None, Mode::Train).unwrap();
    let l = tape.softmax_cross_entropy(r.logits, &labels).unwrap();
    let grads = tape.backward(l).unwrap();
    let mut probe = net.clone();
    let count = probe.params_mut().len();
    assert_eq!(count, r.params.len());
    let h = 1e-6;
    let mut worst = 0.0f64;
    for p in 0..count {
        let analytic = grads.get_or_zeros(r.params[p]);
        let len = analytic.len();
        for e in [0, len / 2, len - 1] {
            let mut plus = net.clone();
            plus.params_mut()[p].data_mut()[e] += h;
            let mut minus = net.clone();
            minus.params_mut()[p].data_mut()[e] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = analytic.data()[e];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
        }
    }
    assert!(worst < 1e-4, "relative error {worst}");
}

#[test]
fn params_follow_record_order() {
    let x = input(4, 1);
    let mut net = ResidualNet::new(&Architecture::three_stage(2, 3, 1), &mut rng(2)).unwrap();
    let mut tape = Tape::new();
    let r = net.record(&mut tape, &x, None, Mode::Train).unwrap();
    let params = net.params_mut();
    assert_eq!(params.len(), r.params.len());
    for (p, v) in params.iter().zip(&r.params) {
        assert_eq!(**p, *tape.value(*v));
    }
}

#[test]
fn skipped_blocks_still_record_parameters() {
    let x = input(4, 1);
    let net = uniform_net(3, 4, 2);
    let mut tape = Tape::new();
    let full = net.record(&mut tape, &x, None, Mode::Train).unwrap();
    let mut tape = Tape::new();
    let r = net.record(&mut tape, &x, Some(&RoutingMask::uniform(3, Gate::SkipOnly)), Mode::Train).unwrap();
    assert_eq!(full.params.len(), r.params.len());
    assert!(r.bn_stats.is_empty());
}

fn linear_net(weights: &[Tensor]) -> ResidualNet {
    let w = weights[0].rows();
    let blocks = weights.iter().map(|m| Block::linear(m.clone()).unwrap()).collect();
    ResidualNet::from_parts(Linear::identity(w), blocks, Linear::identity(w)).unwrap()
}

#[test]
fn linear_net_equals_unraveled_sum() {
    for n in 1..=6 {
        let mut r = rng(n as u64);
        let weights: Vec<Tensor> = (0..n).map(|_| Tensor::randn(3, 3, 0.4, &mut r)).collect();
        let net = linear_net(&weights);
        let x = Tensor::randn(5, 3, 1.0, &mut r);
        let direct = net.logits(&x).unwrap();
        let oracle = linear_unravel_oracle(&weights, &x).unwrap();
        let diff = direct.sub(&oracle).unwrap();
        assert!(diff.norm() < 1e-10 * (1.0 + oracle.norm()), "n={n}");
    }
}

#[test]
fn path_gradients_sum_to_full_gradient() {
    for n in 1..=8usize {
        let x = input(5, 40 + n as u64);
        let labels = [0, 1, 2, 1, 0];
        let net = warmed(&uniform_net(n, 4, n as u64), &x);
        for mode in [Mode::Train, Mode::Eval] {
            let grad_with = |mask: Option<&RoutingMask>| {
                let mut tape = Tape::new();
                let r = net.record(&mut tape, &x, mask, mode).unwrap();
                let l = tape.softmax_cross_entropy(r.logits, &labels).unwrap();
                tape.backward(l).unwrap().get_or_zeros(r.stream[0])
            };
            let full = grad_with(None);
            let mut sum = Tensor::zeros(full.rows(), full.cols());
            for code in enumerate_path_codes(n).unwrap() {
                sum.add_assign(&grad_with(Some(&RoutingMask::single_path(code.bits())))).unwrap();
            }
            let diff = sum.sub(&full).unwrap().norm();
            assert!(diff <= 1e-9 * (1.0 + full.norm()), "n={n} {mode:?}: {diff}");
        }
    }
}
