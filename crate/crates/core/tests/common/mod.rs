#![allow(dead_code)]

use std::path::PathBuf;

use ablate_core::ablation::Batch;
use ablate_core::concepts::{default_concept_map, Prompt, Vocab};
use ablate_core::diffusion::{
    pretrain, Checkpoint, ModelConfig, NoiseDraw, NoiseSchedule, PretrainConfig, ScheduleConfig,
};
use ablate_core::numcore::{normal, rng_stream, ParamMap, Rng};
use rand::Rng as _;

/// A narrow network over the standard vocabulary, cheap enough for finite differences.
pub fn tiny_model() -> ModelConfig {
    ModelConfig { vocab: Vocab::standard().len(), embed_dim: 4, time_dim: 4, hidden: 6 }
}

pub fn schedule() -> NoiseSchedule {
    NoiseSchedule::new(ScheduleConfig::default()).unwrap()
}

/// Initialization scaled up so that every path carries a non-negligible gradient.
pub fn random_params(cfg: &ModelConfig, seed: u64) -> ParamMap {
    let mut p = cfg.init(&mut rng_stream(seed, 0));
    let mut rng = rng_stream(seed, 1);
    for t in p.values_mut() {
        for v in t.data_mut() {
            *v += 0.3 * normal(&mut rng);
        }
    }
    p
}

pub fn random_prompt(vocab: &Vocab, subjects: &[&str], rng: &mut Rng) -> Prompt {
    let tmpl = vocab.templates();
    let s = vocab.id(subjects[rng.random_range(0..subjects.len())]).unwrap();
    let styles = [vocab.pad(), vocab.id("plain").unwrap(), vocab.id("vangogh").unwrap()];
    Prompt::new(tmpl[rng.random_range(0..tmpl.len())], s, styles[rng.random_range(0..styles.len())], vocab.pad())
}

pub fn random_points(n: usize, rng: &mut Rng) -> Vec<[f64; 2]> {
    (0..n).map(|_| [normal(rng), normal(rng)]).collect()
}

/// A batch whose target prompts swap the anchor subject for "grumpy".
pub fn random_batch(vocab: &Vocab, n: usize, rng: &mut Rng) -> Batch {
    let c: Vec<Prompt> = (0..n).map(|_| random_prompt(vocab, &["cat", "dog"], rng)).collect();
    let g = vocab.id("grumpy").unwrap();
    let cstar = c.iter().map(|p| Prompt::new(p.template(), g, p.style(), vocab.pad())).collect();
    let reg_c = (0..n).map(|_| random_prompt(vocab, &["cat", "tabby"], rng)).collect();
    Batch { x: random_points(n, rng), c, cstar, reg_x: random_points(n, rng), reg_c }
}

pub fn random_draw(n: usize, sched: &NoiseSchedule, rng: &mut Rng) -> NoiseDraw {
    NoiseDraw::sample(n, sched, rng)
}

fn cache_dir() -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("pretrained");
    std::fs::create_dir_all(&d).unwrap();
    d
}

/// Default pretraining for `seed`, cached on disk by its configuration.
pub fn pretrained(seed: u64) -> Checkpoint {
    let map = default_concept_map();
    let vocab = Vocab::standard();
    let cfg = PretrainConfig { seed, ..PretrainConfig::default() };
    let model = ModelConfig::standard(vocab.len());
    let key = ablate_core::diffusion::json_hash(&(&cfg, &model, ScheduleConfig::default(), &map));
    let path = cache_dir().join(format!("{}.json", &key[..16]));
    if let Ok(ck) = Checkpoint::load(&path) {
        return ck;
    }
    let ck = pretrain(&map, &vocab, model, ScheduleConfig::default(), &cfg).unwrap();
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    ck.save(&tmp).unwrap();
    std::fs::rename(&tmp, &path).unwrap();
    ck
}

/// `combined_objective`'s value with the stop-gradient anchor branch evaluated
/// at `anchor` instead of `p`: the function whose gradient at `p = anchor` the
/// stop-gradient contract defines.
#[allow(clippy::too_many_arguments)]
pub fn anchored_value(
    obj: &ablate_core::ablation::Objective,
    cfg: &ModelConfig,
    p: &ParamMap,
    anchor: &ParamMap,
    frozen: &ParamMap,
    mask: &std::collections::BTreeSet<String>,
    batch: &Batch,
    draw: &NoiseDraw,
    reg_draw: &NoiseDraw,
    sched: &NoiseSchedule,
) -> f64 {
    use ablate_core::ablation::{combined_objective, ObjectiveKind};
    use ablate_core::diffusion::net::forward;
    use ablate_core::diffusion::{diffusion_loss, mean_sq_dist, BoundParams, Cond};
    use ablate_core::numcore::{Tape, Tensor};

    if !matches!(obj.kind, ObjectiveKind::ModelBased | ObjectiveKind::ReverseKl) {
        return combined_objective(obj, cfg, p, frozen, mask, batch, draw, reg_draw, sched).unwrap().0.total;
    }
    let mut tape = Tape::new();
    let a = BoundParams::frozen(&mut tape, anchor);
    let live = BoundParams::frozen(&mut tape, p);
    let xt = tape.constant(Tensor::from_points(&draw.noised(&batch.x, sched)));
    let tf = draw.t_f64();
    let fixed = forward(&mut tape, cfg, &a, xt, &tf, Cond::Prompts(&batch.c)).unwrap();
    let pred = forward(&mut tape, cfg, &live, xt, &tf, Cond::Prompts(&batch.cstar)).unwrap();
    let abl = mean_sq_dist(&mut tape, fixed, pred).unwrap();
    let reg = diffusion_loss(cfg, p, &batch.reg_x, &batch.reg_c, sched, reg_draw).unwrap();
    obj.lambda * reg + tape.value(abl).item()
}

/// Worst relative error of `combined_objective`'s gradient against central
/// differences, over every objective kind x subset x `seeds` configuration.
pub fn gradient_suite(seeds: u64) -> (usize, f64) {
    use ablate_core::ablation::{combined_objective, select_params, Objective, ObjectiveKind, SubsetKind};
    use ablate_core::numcore::grad_check_named;

    let cfg = tiny_model();
    let vocab = Vocab::standard();
    let sched = schedule();
    let mut configs = 0;
    let mut worst: f64 = 0.0;
    for kind in ObjectiveKind::ALL {
        for subset in SubsetKind::ALL {
            for seed in 0..seeds {
                let params = random_params(&cfg, 100 + seed);
                let frozen = random_params(&cfg, 200 + seed);
                let mut rng = rng_stream(300 + seed, kind as u64 * 3 + subset as u64);
                let batch = random_batch(&vocab, 3, &mut rng);
                let draw = random_draw(3, &sched, &mut rng);
                let reg_draw = random_draw(3, &sched, &mut rng);
                let obj = Objective::new(kind).with_lambda(0.5);
                let mask = select_params(&params, subset).unwrap().names;
                let (_, grad) =
                    combined_objective(&obj, &cfg, &params, &frozen, &mask, &batch, &draw, &reg_draw, &sched).unwrap();
                let value = |p: &ParamMap| {
                    anchored_value(&obj, &cfg, p, &params, &frozen, &mask, &batch, &draw, &reg_draw, &sched)
                };
                worst = worst.max(grad_check_named(value, &params, &grad, 1e-5));
                configs += 1;
            }
        }
    }
    (configs, worst)
}

/// Worst relative gap between the per-step Gaussian KL of the two reverse
/// steps and `kl_factor * matching_loss`, over `draws` random draws.
pub fn kl_equivalence(draws: u64) -> f64 {
    use ablate_core::ablation::{kl_factor, matching_loss};
    use ablate_core::concepts::Gaussian2;
    use ablate_core::diffusion::{denoise, Cond};

    let cfg = ModelConfig::standard(Vocab::standard().len());
    let vocab = Vocab::standard();
    let sched = schedule();
    let mut worst: f64 = 0.0;
    for k in 0..draws {
        let params = random_params(&cfg, 1000 + k);
        let mut rng = rng_stream(77, k);
        let x = [2.0 * normal(&mut rng), 2.0 * normal(&mut rng)];
        let t = rng.random_range(2..=sched.t_max());
        let c = random_prompt(&vocab, &["cat", "dog", "poster"], &mut rng);
        let cs = random_prompt(&vocab, &["grumpy", "corgi", "memo"], &mut rng);
        let loss = matching_loss(&cfg, &params, &[x], &[t], &[c], &[cs]).unwrap();

        let mean = |p: Prompt| {
            let e = denoise(&cfg, &params, &[x], &[t as f64], Cond::Prompts(&[p])).unwrap()[0];
            let k = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
            let s = sched.alpha(t).sqrt();
            [(x[0] - k * e[0]) / s, (x[1] - k * e[1]) / s]
        };
        let var = sched.beta_tilde(t);
        let cov = [[var, 0.0], [0.0, var]];
        let kl = Gaussian2::new(mean(c), cov).unwrap().kl(&Gaussian2::new(mean(cs), cov).unwrap());
        let scaled = kl_factor(&sched, t) * loss;
        worst = worst.max((kl - scaled).abs() / kl.abs().max(1e-300));
    }
    worst
}

/// Largest absolute difference between the stop-gradient gradients and those
/// of an explicit two-model formulation with a frozen anchor copy.
pub fn sg_oracle(configs: u64) -> f64 {
    use ablate_core::ablation::{combined_objective, select_params, Objective, ObjectiveKind, SubsetKind};
    use ablate_core::diffusion::net::forward;
    use ablate_core::diffusion::{mean_sq_dist, BoundParams, Cond};
    use ablate_core::numcore::{Tape, Tensor};

    let cfg = ModelConfig::standard(Vocab::standard().len());
    let vocab = Vocab::standard();
    let sched = schedule();
    let mut worst: f64 = 0.0;
    for k in 0..configs {
        let params = random_params(&cfg, 500 + k);
        let mut rng = rng_stream(501, k);
        let batch = random_batch(&vocab, 5, &mut rng);
        let draw = random_draw(5, &sched, &mut rng);
        for kind in [ObjectiveKind::ModelBased, ObjectiveKind::ReverseKl] {
            let mask = select_params(&params, SubsetKind::Full).unwrap().names;
            let obj = Objective::new(kind).with_lambda(0.0);
            let (_, sg) =
                combined_objective(&obj, &cfg, &params, &params, &mask, &batch, &draw, &draw, &sched).unwrap();

            let mut tape = Tape::new();
            let frozen = BoundParams::frozen(&mut tape, &params);
            let live = BoundParams::bind(&mut tape, &params, None);
            let xt = tape.constant(Tensor::from_points(&draw.noised(&batch.x, &sched)));
            let tf = draw.t_f64();
            let anchor = forward(&mut tape, &cfg, &frozen, xt, &tf, Cond::Prompts(&batch.c)).unwrap();
            let pred = forward(&mut tape, &cfg, &live, xt, &tf, Cond::Prompts(&batch.cstar)).unwrap();
            let loss = mean_sq_dist(&mut tape, anchor, pred).unwrap();
            let g = tape.backward(loss).unwrap();
            for (name, id) in live.iter() {
                worst = worst.max(g.get(*id).max_abs_diff(&sg[name]));
            }
        }
    }
    worst
}
