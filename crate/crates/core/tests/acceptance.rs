//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.

mod common;

use std::time::{Duration, Instant};

use ablate_core::ablation::{
    ablate_run, compositional_ablate, multi_concept_ablate, AblateConfig, Objective, ObjectiveKind, SubsetKind,
};
use ablate_core::concepts::{
    build_ablation_dataset, build_memorization_dataset, default_concept_map, AblationDataset, ConceptMap,
    MemorizationOptions, PromptPool, Source, Task, Vocab,
};
use ablate_core::diffusion::Checkpoint;
use ablate_core::eval::{
    bayes_wins, full_report, mmd_poly, mmd_poly_brute, robustness_eval, sample_concept, ConceptRef, EvalReport,
    EvalRole, MetricConfig,
};
use ablate_core::numcore::{normal, rng_stream};
use common::{gradient_suite, kl_equivalence, pretrained, sg_oracle};
use rand::Rng as _;

const SEEDS: [u64; 3] = [0, 1, 2];
const DATA_SEED: u64 = 7;
const EVAL_SEED: u64 = 11;
const DATA_N: usize = 1000;
const GEN_STEPS: usize = 200;

struct Ctx {
    vocab: Vocab,
    map: ConceptMap,
    pool: PromptPool,
    metrics: MetricConfig,
    cks: Vec<Checkpoint>,
}

impl Ctx {
    fn dataset(&self, ck: &Checkpoint, target: &str, source: Source, seed: u64) -> AblationDataset {
        let task = Task::from_relation(&self.map, target).unwrap();
        build_ablation_dataset(ck, &self.vocab, &self.map, &task, DATA_N, GEN_STEPS, &self.pool, source, seed).unwrap()
    }

    fn report(&self, ablated: &Checkpoint, ck: &Checkpoint, target: &str) -> EvalReport {
        let task = Task::from_relation(&self.map, target).unwrap();
        full_report(ablated, ck, &self.vocab, &self.map, &task, &self.metrics, EVAL_SEED, false).unwrap()
    }
}

fn target_accuracy(r: &EvalReport) -> f64 {
    r.by_role(EvalRole::Target).next().unwrap().accuracy
}

fn min_surrounding(r: &EvalReport) -> f64 {
    r.by_role(EvalRole::Surrounding).map(|c| c.accuracy).fold(1.0, f64::min)
}

fn mean_surrounding_mmd(r: &EvalReport) -> f64 {
    let m: Vec<f64> = r.by_role(EvalRole::Surrounding).map(|c| c.mmd2).collect();
    m.iter().sum::<f64>() / m.len() as f64
}

fn majority(votes: &[bool]) -> bool {
    2 * votes.iter().filter(|v| **v).count() > votes.len()
}

fn default_ablation(ck: &Checkpoint, ds: &AblationDataset, kind: ObjectiveKind, subset: SubsetKind) -> Checkpoint {
    let cfg = AblateConfig::recommended(kind, subset, DATA_SEED);
    ablate_run(ck, ds, &Objective::new(kind), subset, &cfg, None).unwrap().checkpoint
}

fn criterion_1() -> (bool, String) {
    let t0 = Instant::now();
    let (configs, worst) = gradient_suite(2);
    let dt = t0.elapsed();
    let pass = configs >= 20 && worst < 1e-4 && dt < Duration::from_secs(30);
    (pass, format!("{configs} configurations, max relative error {worst:.2e}, {dt:.1?}"))
}

fn criterion_2() -> (bool, String) {
    let worst = kl_equivalence(100);
    (worst < 1e-8, format!("max relative error {worst:.2e} over 100 draws"))
}

fn criterion_3() -> (bool, String) {
    let worst = sg_oracle(5);
    (worst <= 1e-10, format!("max abs difference {worst:.2e}"))
}

fn criterion_4(ctx: &Ctx) -> (bool, String) {
    let mut all = true;
    let mut detail = Vec::new();
    for (s, ck) in SEEDS.iter().zip(&ctx.cks) {
        let t0 = Instant::now();
        let ds = ctx.dataset(ck, "grumpy", Source::Anchor, DATA_SEED);
        let out = default_ablation(ck, &ds, ObjectiveKind::ModelBased, SubsetKind::Xattn);
        let r = ctx.report(&out, ck, "grumpy");
        let dt = t0.elapsed();
        let t = r.by_role(EvalRole::Target).next().unwrap();
        let worst_ratio = r.by_role(EvalRole::Surrounding).map(|c| c.mmd2 / c.mmd2_null95).fold(0.0, f64::max);
        let band = r.by_role(EvalRole::Surrounding).all(|c| c.mmd_within_band());
        let ok = t.pretrained_accuracy > 0.9
            && t.accuracy < 0.2
            && min_surrounding(&r) > 0.8
            && band
            && dt < Duration::from_secs(300);
        all &= ok;
        detail.push(format!(
            "seed {s}: target {:.3} (pretrained {:.3}), min surrounding {:.3}, worst MMD2/null95 {worst_ratio:.1}, {dt:.1?}",
            t.accuracy,
            t.pretrained_accuracy,
            min_surrounding(&r)
        ));
    }
    (all, detail.join("; "))
}

fn criterion_5(ctx: &Ctx) -> (bool, String) {
    let task = Task::from_relation(&ctx.map, "memo").unwrap();
    let mut all = true;
    let mut detail = Vec::new();
    for (s, ck) in SEEDS.iter().zip(&ctx.cks) {
        let t0 = Instant::now();
        let opts = MemorizationOptions::default();
        let ds =
            build_memorization_dataset(ck, &ctx.vocab, &ctx.map, &task, DATA_N, GEN_STEPS, &opts, DATA_SEED).unwrap();
        let out = default_ablation(ck, &ds, ObjectiveKind::ModelBased, SubsetKind::Full);
        let m = ctx.report(&out, ck, "memo").memorization.unwrap();
        let dt = t0.elapsed();
        all &= m.pretrained_rate > 0.5 && m.rate < 0.05 && dt < Duration::from_secs(300);
        detail.push(format!("seed {s}: rate {:.3} -> {:.3}, {dt:.1?}", m.pretrained_rate, m.rate));
    }
    (all, detail.join("; "))
}

/// Target accuracy of both matching objectives after the model-based step budget.
fn criterion_6(ctx: &Ctx) -> (bool, String) {
    let mut votes = Vec::new();
    let mut detail = Vec::new();
    for (s, ck) in SEEDS.iter().zip(&ctx.cks) {
        let ds = ctx.dataset(ck, "grumpy", Source::Anchor, DATA_SEED);
        let budget = ObjectiveKind::ModelBased.default_steps();
        let mut acc = Vec::new();
        for kind in [ObjectiveKind::ModelBased, ObjectiveKind::NoiseBased] {
            let cfg = AblateConfig { steps: budget, ..AblateConfig::recommended(kind, SubsetKind::Xattn, DATA_SEED) };
            let out = ablate_run(ck, &ds, &Objective::new(kind), SubsetKind::Xattn, &cfg, None).unwrap();
            acc.push(target_accuracy(&ctx.report(&out.checkpoint, ck, "grumpy")));
        }
        votes.push(acc[0] <= acc[1]);
        detail.push(format!("seed {s}: model {:.3} vs noise {:.3} at step {budget}", acc[0], acc[1]));
    }
    (majority(&votes), detail.join("; "))
}

/// `(step, target accuracy, mean surrounding MMD^2)` every 10 steps of a default run.
fn probed_run(ctx: &Ctx, ck: &Checkpoint, ds: &AblationDataset, kind: ObjectiveKind) -> Vec<(usize, f64, f64)> {
    let cfg = AblateConfig::recommended(kind, SubsetKind::Xattn, DATA_SEED);
    let mut points = Vec::new();
    let mut probe = |step: usize, p: &ablate_core::numcore::ParamMap| {
        if step % 10 == 0 {
            let r = ctx.report(&ck.child(p.clone(), serde_json::json!({ "probe": step })), ck, "grumpy");
            points.push((step, target_accuracy(&r), mean_surrounding_mmd(&r)));
        }
    };
    ablate_run(ck, ds, &Objective::new(kind), SubsetKind::Xattn, &cfg, Some(&mut probe)).unwrap();
    points
}

/// Surrounding MMD^2 at the first probe where each run reaches the accuracy
/// level that both runs attain by their final step.
fn criterion_7(ctx: &Ctx) -> (bool, String) {
    let mut votes = Vec::new();
    let mut detail = Vec::new();
    for (s, ck) in SEEDS.iter().zip(&ctx.cks) {
        let anchor_ds = ctx.dataset(ck, "grumpy", Source::Anchor, DATA_SEED);
        let target_ds = ctx.dataset(ck, "grumpy", Source::Target, DATA_SEED);
        let model = probed_run(ctx, ck, &anchor_ds, ObjectiveKind::ModelBased);
        let base = probed_run(ctx, ck, &target_ds, ObjectiveKind::MaxLoss);
        let level = model.last().unwrap().1.max(base.last().unwrap().1);
        let at = |run: &[(usize, f64, f64)]| *run.iter().find(|p| p.1 <= level).unwrap();
        let (m, b) = (at(&model), at(&base));
        votes.push(b.2 > m.2);
        detail.push(format!(
            "seed {s}: accuracy level {level:.3}, baseline MMD2 {:.3} (step {}) vs model {:.3} (step {})",
            b.2, b.0, m.2, m.0
        ));
    }
    (majority(&votes), detail.join("; "))
}

fn criterion_8(ctx: &Ctx) -> (bool, String) {
    let mut votes = Vec::new();
    let mut detail = Vec::new();
    for (s, ck) in SEEDS.iter().zip(&ctx.cks) {
        let ds = ctx.dataset(ck, "grumpy", Source::Anchor, DATA_SEED);
        let mut rise = Vec::new();
        for subset in [SubsetKind::Embed, SubsetKind::Xattn] {
            let out = default_ablation(ck, &ds, ObjectiveKind::ModelBased, subset);
            let curve = robustness_eval(
                &out,
                &ck.params,
                &ctx.vocab,
                &ctx.map,
                "grumpy",
                "cat",
                &[0.0, 0.3],
                ctx.metrics.samples,
                ctx.metrics.steps,
                EVAL_SEED,
            )
            .unwrap();
            rise.push(curve[1].accuracy - curve[0].accuracy);
        }
        votes.push(rise[0] > 0.0 && rise[0] > 2.0 * rise[1].max(0.0));
        detail.push(format!("seed {s}: recovery embed {:+.3} vs xattn {:+.3}", rise[0], rise[1]));
    }
    (majority(&votes), detail.join("; "))
}

fn criterion_9(ctx: &Ctx) -> (bool, String) {
    let mut votes = Vec::new();
    let mut detail = Vec::new();
    for (s, ck) in SEEDS.iter().zip(&ctx.cks) {
        let sets = [
            ctx.dataset(ck, "grumpy", Source::Anchor, DATA_SEED),
            ctx.dataset(ck, "corgi", Source::Anchor, DATA_SEED + 1),
        ];
        let kind = ObjectiveKind::ModelBased;
        let cfg = AblateConfig::recommended(kind, SubsetKind::Xattn, DATA_SEED);
        let out = multi_concept_ablate(ck, &sets, &Objective::new(kind), SubsetKind::Xattn, &cfg).unwrap();
        let reports = [ctx.report(&out.checkpoint, ck, "grumpy"), ctx.report(&out.checkpoint, ck, "corgi")];
        let ok = reports.iter().all(|r| target_accuracy(r) < 0.2 && min_surrounding(r) > 0.8);
        votes.push(ok);
        detail.push(format!(
            "seed {s}: targets {:.3}/{:.3}, min surrounding {:.3}/{:.3}",
            target_accuracy(&reports[0]),
            target_accuracy(&reports[1]),
            min_surrounding(&reports[0]),
            min_surrounding(&reports[1])
        ));
    }
    (majority(&votes), detail.join("; "))
}

fn criterion_10(ctx: &Ctx) -> (bool, String) {
    let task = Task::from_relation(&ctx.map, "dog_vangogh").unwrap();
    let mut votes = Vec::new();
    let mut detail = Vec::new();
    for (s, ck) in SEEDS.iter().zip(&ctx.cks) {
        let kind = ObjectiveKind::ModelBased;
        let cfg = AblateConfig::recommended(kind, SubsetKind::Xattn, DATA_SEED);
        let (_, out) = compositional_ablate(
            ck,
            &ctx.vocab,
            &ctx.map,
            &task,
            DATA_N,
            GEN_STEPS,
            &ctx.pool,
            &Objective::new(kind),
            SubsetKind::Xattn,
            &cfg,
        )
        .unwrap();
        let r = full_report(&out.checkpoint, ck, &ctx.vocab, &ctx.map, &task, &ctx.metrics, EVAL_SEED, false).unwrap();
        let comp = r.composition.as_ref().unwrap();
        let t = r.by_role(EvalRole::Target).next().unwrap();
        let drop = t.pretrained_score - t.score;
        let shift = r
            .by_role(EvalRole::Anchor)
            .chain(r.by_role(EvalRole::Surrounding))
            .map(|c| (c.score - c.pretrained_score).abs())
            .fold(0.0, f64::max);
        votes.push(comp.mmd_within_band() && drop > 1.0 && shift <= 0.05);
        detail.push(format!(
            "seed {s}: subject MMD2/null95 {:.2}, composed score drop {drop:.2} nats, max marginal shift {shift:.3} nats",
            comp.mmd2 / comp.mmd2_null95
        ));
    }
    (majority(&votes), detail.join("; "))
}

fn criterion_11(ctx: &Ctx) -> (bool, String) {
    let mut rng = rng_stream(2024, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (m, n) = (rng.random_range(2..=50), rng.random_range(2..=50));
        let shift = 3.0 * normal(&mut rng);
        let a: Vec<[f64; 2]> = (0..m).map(|_| [normal(&mut rng), normal(&mut rng)]).collect();
        let b: Vec<[f64; 2]> = (0..n).map(|_| [normal(&mut rng) + shift, normal(&mut rng)]).collect();
        worst = worst.max((mmd_poly(&a, &b).unwrap() - mmd_poly_brute(&a, &b).unwrap()).abs());
    }

    let ck = &ctx.cks[0];
    let mut complement = true;
    for (c, v) in [("grumpy", "cat"), ("tabby", "cat"), ("corgi", "dog")] {
        let (c, v) = (ConceptRef::plain(c), ConceptRef::plain(v));
        let xs =
            sample_concept(ck, &ctx.vocab, &ctx.map, &c, ctx.metrics.samples, ctx.metrics.steps, EVAL_SEED).unwrap();
        let (dc, dv) = (c.density(&ctx.map).unwrap(), v.density(&ctx.map).unwrap());
        complement &= bayes_wins(&xs, &dc, &dv).unwrap() + bayes_wins(&xs, &dv, &dc).unwrap() == xs.len();
    }

    let run = || {
        let ds = ctx.dataset(ck, "grumpy", Source::Anchor, DATA_SEED);
        let out = default_ablation(ck, &ds, ObjectiveKind::ModelBased, SubsetKind::Xattn);
        let metrics = MetricConfig { robustness_levels: vec![0.0, 0.3], ..ctx.metrics.clone() };
        let task = Task::from_relation(&ctx.map, "grumpy").unwrap();
        full_report(&out, ck, &ctx.vocab, &ctx.map, &task, &metrics, EVAL_SEED, false).unwrap().to_json()
    };
    let (first, second) = (run(), run());
    let identical = first == second;
    let roundtrip = EvalReport::from_json(&first).unwrap().to_json() == first;

    let pass = worst < 1e-10 && complement && identical && roundtrip;
    (
        pass,
        format!(
            "MMD vs brute force {worst:.2e}, complement identity {complement}, byte-identical reports {identical}, JSON round trip {roundtrip}"
        ),
    )
}

type Check<'a> = &'a dyn Fn() -> (bool, String);

fn main() {
    let vocab = Vocab::standard();
    let map = default_concept_map();
    let pool = PromptPool::standard(&vocab);
    let metrics = MetricConfig { robustness_levels: vec![], ..MetricConfig::default() };
    let cks = SEEDS.iter().map(|&s| pretrained(s)).collect();
    let ctx = Ctx { vocab, map, pool, metrics, cks };

    let criteria: [(&str, Check); 11] = [
        ("gradient suite", &criterion_1),
        ("matching loss equals scaled reverse-step KL", &criterion_2),
        ("stop-gradient equals frozen anchor copy", &criterion_3),
        ("instance ablation efficacy", &|| criterion_4(&ctx)),
        ("memorization removal", &|| criterion_5(&ctx)),
        ("model-based converges before noise-based", &|| criterion_6(&ctx)),
        ("baseline degrades surrounding concepts", &|| criterion_7(&ctx)),
        ("embedding ablation is less robust", &|| criterion_8(&ctx)),
        ("multi-concept ablation", &|| criterion_9(&ctx)),
        ("compositional ablation", &|| criterion_10(&ctx)),
        ("metric oracles and determinism", &|| criterion_11(&ctx)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let (pass, detail) = run();
        failed += usize::from(!pass);
        println!(
            "criterion {:>2} {}: {name} [{:.1?}] {detail}",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            t0.elapsed()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
