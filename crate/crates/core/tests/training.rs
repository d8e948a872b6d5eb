mod common;

use ablate_core::ablation::{
    ablate_run, composition_dataset, multi_concept_ablate, select_params, trace_csv, union_dataset, AblateConfig,
    AblationError, Objective, ObjectiveKind, SubsetKind,
};
use ablate_core::concepts::{
    build_ablation_dataset, default_concept_map, AblationDataset, PromptPool, Source, Task, Vocab,
};
use ablate_core::diffusion::Checkpoint;
use common::pretrained;

fn dataset(ck: &Checkpoint, target: &str, seed: u64) -> AblationDataset {
    let (vocab, map) = (Vocab::standard(), default_concept_map());
    let task = Task::from_relation(&map, target).unwrap();
    build_ablation_dataset(ck, &vocab, &map, &task, 16, 20, &PromptPool::standard(&vocab), Source::Anchor, seed)
        .unwrap()
}

fn short(seed: u64) -> AblateConfig {
    AblateConfig { steps: 5, ..AblateConfig::recommended(ObjectiveKind::ModelBased, SubsetKind::Xattn, seed) }
}

#[test]
fn recommended_configs_follow_the_tuned_table() {
    use ObjectiveKind::*;
    use SubsetKind::*;
    let lr = |k, s| AblateConfig::recommended(k, s, 0).lr;
    assert_eq!(lr(ModelBased, Embed), 1.25e-3);
    assert_eq!(lr(NoiseBased, Xattn), 3.75e-4);
    assert_eq!(lr(ReverseKl, Full), 1.25e-4);
    assert!((lr(MaxLoss, Full) - 1.25e-4 * 100.0 / 3.0).abs() < 1e-15);
    for (k, steps) in [(ModelBased, 100), (ReverseKl, 100), (NoiseBased, 200), (MaxLoss, 50)] {
        let c = AblateConfig::recommended(k, Xattn, 4);
        assert_eq!((c.steps, c.batch, c.seed), (steps, 8, 4));
        assert_eq!(c.effective_lr(), c.lr * 8.0);
    }
}

#[test]
fn runs_are_seeded_and_touch_only_their_subset() {
    let ck = pretrained(0);
    let ds = dataset(&ck, "grumpy", 1);
    let obj = Objective::new(ObjectiveKind::ModelBased);
    for subset in SubsetKind::ALL {
        let a = ablate_run(&ck, &ds, &obj, subset, &short(2), None).unwrap();
        let b = ablate_run(&ck, &ds, &obj, subset, &short(2), None).unwrap();
        assert_eq!(a.checkpoint.content_hash(), b.checkpoint.content_hash());
        assert_eq!(a.trace, b.trace);
        let c = ablate_run(&ck, &ds, &obj, subset, &short(3), None).unwrap();
        assert_ne!(a.checkpoint.content_hash(), c.checkpoint.content_hash());

        let names = select_params(&ck.params, subset).unwrap().names;
        for (name, t) in &ck.params {
            let moved = a.checkpoint.params[name].max_abs_diff(t) > 0.0;
            assert_eq!(moved, names.contains(name), "{subset:?}: {name}");
        }
        assert_eq!(a.checkpoint.lineage.first(), Some(&ck.content_hash()));
    }
}

#[test]
fn probe_sees_every_step_and_trace_csv_has_a_row_per_step() {
    let ck = pretrained(0);
    let ds = dataset(&ck, "grumpy", 1);
    let mut seen = Vec::new();
    let mut probe = |step: usize, _: &ablate_core::numcore::ParamMap| seen.push(step);
    let out = ablate_run(
        &ck,
        &ds,
        &Objective::new(ObjectiveKind::NoiseBased),
        SubsetKind::Embed,
        &short(0),
        Some(&mut probe),
    )
    .unwrap();
    assert_eq!(seen, vec![1, 2, 3, 4, 5]);
    let csv = trace_csv(&out.trace);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,ablation_loss,reg_loss,total");
    assert_eq!(lines.len(), 6);
    for (row, line) in out.trace.iter().zip(&lines[1..]) {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(f, vec![row.step as f64, row.ablation_loss, row.reg_loss, row.total]);
    }
}

#[test]
fn foreign_datasets_and_empty_batches_are_rejected() {
    let (a, b) = (pretrained(0), pretrained(1));
    let ds = dataset(&a, "grumpy", 1);
    let obj = Objective::new(ObjectiveKind::ModelBased);
    assert!(matches!(ablate_run(&b, &ds, &obj, SubsetKind::Xattn, &short(0), None), Err(AblationError::Provenance(_))));
    let zero = AblateConfig { batch: 0, ..short(0) };
    assert!(matches!(ablate_run(&a, &ds, &obj, SubsetKind::Xattn, &zero, None), Err(AblationError::Config(_))));
    let other = dataset(&b, "corgi", 1);
    assert!(matches!(union_dataset(&[ds, other]), Err(AblationError::Provenance(_))));
    assert!(matches!(union_dataset(&[]), Err(AblationError::Config(_))));
}

#[test]
fn single_concept_union_is_a_plain_run() {
    let ck = pretrained(0);
    let (g, c) = (dataset(&ck, "grumpy", 1), dataset(&ck, "corgi", 2));
    let obj = Objective::new(ObjectiveKind::ModelBased);
    let one = multi_concept_ablate(&ck, std::slice::from_ref(&g), &obj, SubsetKind::Xattn, &short(0)).unwrap();
    let plain = ablate_run(&ck, &g, &obj, SubsetKind::Xattn, &short(0), None).unwrap();
    assert_eq!(one.checkpoint.content_hash(), plain.checkpoint.content_hash());

    let u = union_dataset(&[g.clone(), c.clone()]).unwrap();
    assert_eq!(u.len(), g.len() + c.len());
    assert_eq!(&u.tuples[..g.len()], &g.tuples[..]);
    let two = multi_concept_ablate(&ck, &[g, c], &obj, SubsetKind::Xattn, &short(0)).unwrap();
    assert_eq!(two.trace.len(), 10);
}

#[test]
fn composition_regularizes_the_subject_and_the_style_elsewhere() {
    let (vocab, map) = (Vocab::standard(), default_concept_map());
    let ck = pretrained(0);
    let task = Task::from_relation(&map, "dog_vangogh").unwrap();
    let pool = PromptPool::standard(&vocab);
    let ds = composition_dataset(&ck, &vocab, &map, &task, 16, 20, &pool, 4).unwrap();
    let reg = ds.regularization.as_ref().unwrap();
    let (dog, cat, vg) = (vocab.id("dog").unwrap(), vocab.id("cat").unwrap(), vocab.id("vangogh").unwrap());
    assert!(reg.iter().any(|r| r.c.subject() == dog && r.c.style() != vg));
    assert!(reg.iter().any(|r| r.c.subject() == cat && r.c.style() == vg));
    assert!(!reg.iter().any(|r| r.c.subject() == dog && r.c.style() == vg));
    assert!(ds.tuples.iter().all(|t| t.c.subject() == dog && t.c.style() != vg));

    let wrong = Task::from_relation(&map, "grumpy").unwrap();
    assert!(composition_dataset(&ck, &vocab, &map, &wrong, 16, 20, &pool, 4).is_err());
}
