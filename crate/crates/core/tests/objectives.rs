mod common;

use ablate_core::ablation::{
    ablate_run, combined_objective, matching_loss, select_params, weight_penalty_node, AblateConfig, Batch, Objective,
    ObjectiveKind, SubsetKind,
};
use ablate_core::concepts::{build_ablation_dataset, default_concept_map, PromptPool, Source, Task, Vocab};
use ablate_core::diffusion::{diffusion_loss, BoundParams, Checkpoint, NoiseDraw};
use ablate_core::numcore::{rng_stream, ParamMap, Tape};
use common::*;
use proptest::prelude::*;

#[test]
fn gradients_match_finite_differences_for_every_objective_and_subset() {
    let (configs, worst) = gradient_suite(2);
    assert!(configs >= 20);
    assert!(worst < 1e-4, "max relative error {worst:e}");
}

#[test]
fn matching_loss_is_scaled_reverse_step_kl() {
    let worst = kl_equivalence(100);
    assert!(worst < 1e-8, "max relative error {worst:e}");
}

#[test]
fn stop_gradient_equals_frozen_anchor_copy() {
    let worst = sg_oracle(5);
    assert!(worst <= 1e-10, "max abs difference {worst:e}");
}

#[test]
fn identical_prompts_give_zero_matching_loss() {
    let cfg = tiny_model();
    let vocab = Vocab::standard();
    let params = random_params(&cfg, 1);
    let mut rng = rng_stream(1, 0);
    let b = random_batch(&vocab, 4, &mut rng);
    let t = [3, 50, 99, 7];
    assert_eq!(matching_loss(&cfg, &params, &b.x, &t, &b.c, &b.c).unwrap(), 0.0);
}

/// Two-parameter denoiser: only the bias changes with the prompt, so the loss is
/// the squared difference of the two hand-computed outputs.
#[test]
fn matching_loss_on_a_hand_set_network() {
    let cfg = tiny_model();
    let vocab = Vocab::standard();
    let mut params: ParamMap = random_params(&cfg, 2);
    for t in params.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    // eps_hat = head2_w^T silu(head1_w^T (attention output)) + head2_b; only the
    // output bias is set, so every prompt predicts (0.25, -0.5).
    params.get_mut("head2_b").unwrap().data_mut().copy_from_slice(&[0.25, -0.5]);
    let mut rng = rng_stream(2, 0);
    let b = random_batch(&vocab, 2, &mut rng);
    assert_eq!(matching_loss(&cfg, &params, &b.x, &[10, 20], &b.c, &b.cstar).unwrap(), 0.0);
    let p = ablate_core::diffusion::denoise(
        &cfg,
        &params,
        &b.x,
        &[10.0, 20.0],
        ablate_core::diffusion::Cond::Prompts(&b.c),
    )
    .unwrap();
    assert_eq!(p, vec![[0.25, -0.5], [0.25, -0.5]]);
}

#[test]
fn subset_masks_partition_as_declared() {
    let params = random_params(&tiny_model(), 0);
    let embed = select_params(&params, SubsetKind::Embed).unwrap().names;
    let xattn = select_params(&params, SubsetKind::Xattn).unwrap().names;
    let full = select_params(&params, SubsetKind::Full).unwrap().names;
    assert_eq!(embed.iter().collect::<Vec<_>>(), ["emb"]);
    assert_eq!(xattn.iter().collect::<Vec<_>>(), ["w_k", "w_v"]);
    assert!(embed.is_subset(&full) && xattn.is_subset(&full));
    assert!(embed.is_disjoint(&xattn));
    assert_eq!(full.len(), params.len());
}

#[test]
fn weight_penalty_vanishes_at_init_and_hinge_saturates() {
    let cfg = tiny_model();
    let params = random_params(&cfg, 3);
    let mask = select_params(&params, SubsetKind::Full).unwrap().names;
    let mut tape = Tape::new();
    let p = BoundParams::bind(&mut tape, &params, None);
    let pen = weight_penalty_node(&mut tape, &p, &params, &mask, 10.0).unwrap();
    assert_eq!(tape.value(pen).item(), 0.0);

    // A model whose loss exceeds 1 leaves only the penalty, which is zero here.
    let vocab = Vocab::standard();
    let sched = schedule();
    let mut loud = params.clone();
    loud.get_mut("head2_b").unwrap().data_mut().copy_from_slice(&[40.0, 40.0]);
    let mut rng = rng_stream(3, 0);
    let b = random_batch(&vocab, 4, &mut rng);
    let draw = NoiseDraw::sample(4, &sched, &mut rng);
    assert!(diffusion_loss(&cfg, &loud, &b.x, &b.cstar, &sched, &draw).unwrap() > 1.0);
    let obj = Objective::new(ObjectiveKind::MaxLoss);
    let (parts, grads) = combined_objective(&obj, &cfg, &loud, &loud, &mask, &b, &draw, &draw, &sched).unwrap();
    assert_eq!(parts.total, 0.0);
    assert!(grads.values().all(|g| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn objective_validation() {
    assert!(Objective::new(ObjectiveKind::ModelBased).validate().is_ok());
    assert!(Objective::new(ObjectiveKind::MaxLoss).validate().is_ok());
    assert!(Objective::new(ObjectiveKind::ModelBased).with_lambda(-1.0).validate().is_err());
    let mut o = Objective::new(ObjectiveKind::NoiseBased);
    o.penalty = Some(10.0);
    assert!(o.validate().is_err());
    assert!("bogus".parse::<ObjectiveKind>().is_err());
    assert_eq!("baseline".parse::<ObjectiveKind>().unwrap(), ObjectiveKind::MaxLoss);
    assert_eq!(ObjectiveKind::ModelBased.default_steps(), 100);
    assert_eq!(ObjectiveKind::NoiseBased.default_steps(), 200);
    assert_eq!(ObjectiveKind::MaxLoss.default_steps(), 50);
}

fn tiny_dataset(ck: &Checkpoint, kind: ObjectiveKind) -> ablate_core::concepts::AblationDataset {
    let vocab = Vocab::standard();
    let map = default_concept_map();
    let task = Task::from_relation(&map, "grumpy").unwrap();
    let src = if kind.uses_target_samples() { Source::Target } else { Source::Anchor };
    build_ablation_dataset(ck, &vocab, &map, &task, 24, 20, &PromptPool::standard(&vocab), src, 5).unwrap()
}

#[test]
fn zero_steps_returns_the_input_parameters() {
    let ck = pretrained(0);
    let ds = tiny_dataset(&ck, ObjectiveKind::ModelBased);
    let cfg = AblateConfig { steps: 0, batch: 4, lr: 1e-3, seed: 0 };
    let out = ablate_run(&ck, &ds, &Objective::new(ObjectiveKind::ModelBased), SubsetKind::Full, &cfg, None).unwrap();
    assert_eq!(out.checkpoint.params, ck.params);
    assert!(out.trace.is_empty());
    assert!(out.checkpoint.descends_from(&ck));
}

#[test]
fn provenance_mismatch_is_rejected() {
    let ck = pretrained(0);
    let other = pretrained(1);
    let ds = tiny_dataset(&other, ObjectiveKind::ModelBased);
    let cfg = AblateConfig { steps: 1, batch: 4, lr: 1e-3, seed: 0 };
    let r = ablate_run(&ck, &ds, &Objective::new(ObjectiveKind::ModelBased), SubsetKind::Full, &cfg, None);
    assert!(matches!(r, Err(ablate_core::ablation::AblationError::Provenance(_))));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    /// Parameters outside the trained subset are bitwise unchanged.
    #[test]
    fn masking_leaves_other_parameters_bitwise_equal(
        kind in prop::sample::select(ObjectiveKind::ALL.to_vec()),
        subset in prop::sample::select(SubsetKind::ALL.to_vec()),
        seed in 0u64..1000,
    ) {
        let ck = pretrained(0);
        let ds = tiny_dataset(&ck, kind);
        let cfg = AblateConfig { steps: 100, batch: 4, lr: 1e-3, seed };
        let out = ablate_run(&ck, &ds, &Objective::new(kind), subset, &cfg, None).unwrap();
        let mask = select_params(&ck.params, subset).unwrap().names;
        for (name, before) in &ck.params {
            let after = &out.checkpoint.params[name];
            if mask.contains(name) {
                prop_assert_ne!(before, after);
            } else {
                let same = before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                prop_assert!(same, "{} changed", name);
            }
        }
    }

    /// With c* = c the ablation term is identically zero and so is its gradient.
    #[test]
    fn identical_prompts_are_stationary(seed in 0u64..1000, n in 1usize..6) {
        let cfg = tiny_model();
        let vocab = Vocab::standard();
        let sched = schedule();
        let params = random_params(&cfg, seed);
        let mut rng = rng_stream(seed, 9);
        let b = random_batch(&vocab, n, &mut rng);
        let b = Batch { cstar: b.c.clone(), ..b };
        let draw = NoiseDraw::sample(n, &sched, &mut rng);
        let mask = select_params(&params, SubsetKind::Full).unwrap().names;
        for kind in [ObjectiveKind::ModelBased, ObjectiveKind::ReverseKl] {
            let obj = Objective::new(kind).with_lambda(0.0);
            let (parts, g) = combined_objective(&obj, &cfg, &params, &params, &mask, &b, &draw, &draw, &sched).unwrap();
            prop_assert_eq!(parts.ablation, 0.0);
            let norm: f64 = g.values().map(|t| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
            prop_assert!(norm < 1e-8);
        }
    }

    /// The same seed gives the same ablated checkpoint.
    #[test]
    fn ablation_is_seed_deterministic(seed in 0u64..1000) {
        let ck = pretrained(0);
        let ds = tiny_dataset(&ck, ObjectiveKind::ModelBased);
        let cfg = AblateConfig { steps: 10, batch: 4, lr: 1e-3, seed };
        let obj = Objective::new(ObjectiveKind::ModelBased);
        let a = ablate_run(&ck, &ds, &obj, SubsetKind::Xattn, &cfg, None).unwrap();
        let b = ablate_run(&ck, &ds, &obj, SubsetKind::Xattn, &cfg, None).unwrap();
        prop_assert_eq!(a.checkpoint.content_hash(), b.checkpoint.content_hash());
        prop_assert_eq!(a.trace, b.trace);
    }
}
