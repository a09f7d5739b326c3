use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unravel_core::checkpoint::{self, Model};
use unravel_core::data::Dataset;
use unravel_core::lesion::random_swaps;
use unravel_core::numerics::{Mode, Tensor};
use unravel_core::resnet::{Architecture, Gate, Network, ResidualNet, RoutingMask};
use unravel_core::training::recalibrate_batch_norm;

fn net(n: usize, width: usize, seed: u64) -> ResidualNet {
    let mut net = ResidualNet::new(&Architecture::uniform(2, 3, n, width), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let x = Tensor::randn(32, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 100));
    let labels = (0..32).map(|i| i % 3).collect();
    recalibrate_batch_norm(&mut net, &Dataset::new(x, labels, 3).unwrap(), 16).unwrap();
    net
}

fn input(seed: u64) -> Tensor {
    Tensor::randn(7, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn deleting_equals_gating_to_skip(n in 1usize..8, seed in 0u64..1000, pick in any::<u64>()) {
        let net = net(n, 5, seed);
        let deleted: Vec<usize> = (0..n).filter(|i| pick >> i & 1 == 1).collect();
        let x = input(seed);
        let gated = net.forward(&x, &RoutingMask::skipping(n, &deleted), Mode::Eval).unwrap();
        let removed = net.delete_blocks(&deleted).unwrap().logits(&x).unwrap();
        prop_assert_eq!(gated, removed);
    }

    #[test]
    fn permuting_then_inverting_restores_the_net(n in 2usize..10, seed in 0u64..1000, swaps in 0usize..12) {
        let net = net(n, 4, seed);
        let perm = random_swaps(&net, swaps, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut inverse = vec![0; n];
        for (j, &p) in perm.iter().enumerate() {
            inverse[p] = j;
        }
        let back = net.permute_blocks(&perm).unwrap().permute_blocks(&inverse).unwrap();
        prop_assert_eq!(&back, &net);
    }

    #[test]
    fn checkpoints_round_trip_exactly(n in 1usize..6, seed in 0u64..1000) {
        let net = net(n, 3, seed);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        checkpoint::save_residual(&net, &path).unwrap();
        prop_assert_eq!(checkpoint::load(&path).unwrap(), Model::Residual(net));
    }

    #[test]
    fn standard_gates_match_no_mask(n in 1usize..6, seed in 0u64..1000) {
        let net = net(n, 4, seed);
        let x = input(seed + 1);
        for mode in [Mode::Train, Mode::Eval] {
            let a = net.forward(&x, &RoutingMask::uniform(n, Gate::Standard), mode).unwrap();
            let b = net.forward(&x, &RoutingMask::standard(n), mode).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

#[test]
fn three_stage_layout() {
    let net = ResidualNet::new(&Architecture::three_stage(2, 3, 3), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(net.n(), 9);
    assert_eq!(net.transition_indices(), vec![3, 6]);
    assert_eq!(net.standard_indices(), vec![0, 1, 2, 4, 5, 7, 8]);
    assert_eq!(net.stage_count(), 3);
    let logits = net.logits(&input(2)).unwrap();
    assert_eq!(logits.shape(), (7, 3));
}
