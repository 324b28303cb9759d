//! Property tests over randomly drawn layer shapes, batches and task mixes.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use eks_core::autodiff::Tape;
use eks_core::conv::{conv2d_value, ConvSpec};
use eks_core::eks::{eks_backward_check, eks_cost_model, EksConvLayer, TaskMask};
use eks_core::losses::{temp_softmax, transfer_kl};
use eks_core::oracle::eks_forward_naive;
use eks_core::tensor::Tensor;

#[derive(Debug, Clone)]
struct Case {
    t: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    rank: usize,
    size: usize,
    tasks: Vec<usize>,
    seed: u64,
}

fn case() -> impl Strategy<Value = Case> {
    (
        1usize..=6,
        1usize..=8,
        1usize..=8,
        prop::bool::ANY,
        1usize..=2,
        2usize..=6,
    )
        .prop_flat_map(|(t, c_in, c_out, k3, stride, size)| {
            (
                Just((t, c_in, c_out, if k3 { 3 } else { 1 }, stride, size)),
                1..=c_in.min(c_out),
                prop::collection::vec(0..t, 1..=10),
                any::<u64>(),
            )
        })
        .prop_map(
            |((t, c_in, c_out, k, stride, size), rank, tasks, seed)| Case {
                t,
                c_in,
                c_out,
                k,
                stride,
                rank,
                size,
                tasks,
                seed,
            },
        )
}

fn build(c: &Case) -> (EksConvLayer, Tensor, TaskMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let spec = ConvSpec::same(c.c_in, c.c_out, c.k, c.stride).unwrap();
    let mut layer = EksConvLayer::init(spec, c.t, c.rank, &mut rng).unwrap();
    for e in &mut layer.experts {
        e.b_factor = Tensor::uniform(e.b_factor.shape(), -1.0, 1.0, &mut rng);
    }
    let h = Tensor::uniform(
        &[c.tasks.len(), c.c_in, c.size, c.size],
        -1.0,
        1.0,
        &mut rng,
    );
    let mask = TaskMask::from_tasks(&c.tasks, c.t).unwrap();
    (layer, h, mask)
}

fn forward(layer: &EksConvLayer, h: &Tensor, mask: &TaskMask) -> Tensor {
    let mut tape = Tape::new();
    let vars = layer.bind(&mut tape);
    let x = tape.constant(h.clone());
    let y = layer.forward(&mut tape, &vars, x, mask).unwrap();
    tape.value(y).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn single_pass_matches_per_task_loop(c in case()) {
        let (layer, h, mask) = build(&c);
        let factors: Vec<_> = layer
            .experts
            .iter()
            .map(|e| (e.b_factor.clone(), e.a_factor.clone()))
            .collect();
        let naive = eks_forward_naive(&h, &layer.w0, &factors, &c.tasks, &layer.spec);
        prop_assert!(forward(&layer, &h, &mask).max_abs_diff(&naive) < 1e-10);
    }

    #[test]
    fn absent_experts_get_exactly_zero_gradient(c in case()) {
        let (layer, h, mask) = build(&c);
        let report = eks_backward_check(&layer, &h, &mask, |tape, y| {
            let sq = tape.mul(y, y)?;
            tape.sum(sq)
        })
        .unwrap();
        prop_assert!(report.absent_experts_zero);
        prop_assert!(report.expert_rel_err < 1e-8);
        prop_assert!(report.w0_rel_err < 1e-8);
        prop_assert!(report.w0_subbatch_rel_err < 1e-8);
    }

    #[test]
    fn fused_plain_conv_serves_its_task(c in case(), pick in any::<prop::sample::Index>()) {
        let (layer, h, _) = build(&c);
        let t = pick.index(c.t);
        let all_t = TaskMask::from_tasks(&vec![t; c.tasks.len()], c.t).unwrap();
        let reference = forward(&layer, &h, &all_t);
        let mut fused = layer.clone();
        fused.fuse(t).unwrap();
        let plain = conv2d_value(&h, &fused.w0, &fused.spec).unwrap();
        prop_assert!(plain.max_abs_diff(&reference) < 1e-10);
        fused.unfuse().unwrap();
        prop_assert!(fused.w0.max_abs_diff(&layer.w0) < 1e-12);
    }

    #[test]
    fn switching_through_every_task_returns_home(c in case()) {
        let (layer, _, _) = build(&c);
        let mut direct = layer.clone();
        direct.fuse(0).unwrap();
        let mut hopping = layer.clone();
        hopping.fuse(0).unwrap();
        for t in (0..c.t).rev() {
            hopping.switch(t).unwrap();
        }
        prop_assert!(hopping.w0.max_abs_diff(&direct.w0) < 1e-12);
    }

    #[test]
    fn cost_flag_matches_the_inequality(
        t in 1u64..64, r in 1u64..32, b in 1u64..256, l in 1u64..256, d in 1u64..1024
    ) {
        let c = eks_cost_model(t, r, b, l, d).unwrap();
        prop_assert_eq!(c.eks_cheaper, c.eks_cost <= c.flora_cost);
        prop_assert_eq!(c.eks_cheaper, t * r + b * l <= r * b * l);
        if r == 1 {
            prop_assert!(!c.eks_cheaper);
        }
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0f64..50.0, 1..12), alpha in 0.05f64..100.0) {
        let p = temp_softmax(&logits, alpha).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal_inputs(
        pair in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..10),
        alpha in 0.1f64..20.0
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pair.into_iter().unzip();
        prop_assert!(transfer_kl(&a, &b, alpha).unwrap() >= 0.0);
        prop_assert_eq!(transfer_kl(&a, &a, alpha).unwrap(), 0.0);
    }
}
