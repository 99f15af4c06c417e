use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use svdp_core::adaptation::{AdaptationConfig, Engine, Mode, PlacementPolicy, UpdateScope};
use svdp_core::benchmark::train::{pretrain, PretrainConfig};
use svdp_core::benchmark::{
    generate_corpus, CorpusParams, CorruptionKind, DomainPattern, NUM_CLASSES,
};
use svdp_core::model::{Architecture, Task};
use svdp_core::num::mix_seed;

fn env_f64(k: &str, d: f64) -> f64 {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let size = 32usize;
    let arch = Architecture::seg(NUM_CLASSES);
    let src = generate_corpus(&CorpusParams {
        seed: 7,
        size,
        n_source: 48,
        n_per_domain: 1,
        ..Default::default()
    });
    let (params, _) = pretrain(&arch, &src.source, &PretrainConfig::for_task(Task::Seg)).unwrap();

    let corpus_seed = 100u64;
    let corpus = generate_corpus(&CorpusParams {
        seed: corpus_seed,
        size,
        n_source: 1,
        n_per_domain: std::env::var("N").ok().and_then(|v| v.parse().ok()).unwrap_or(10),
        severity: 0.8,
        severity_jitter: 0.2,
        ..Default::default()
    });
    // Rebuild the rain overlay pixel set (domain index 2).
    let mut prng = ChaCha8Rng::seed_from_u64(mix_seed(corpus_seed, 500 + 2));
    let pattern = DomainPattern::generate(CorruptionKind::Rain, size, &mut prng);
    let mut on_overlay = vec![false; size * size];
    for &(y0, x0, len) in &pattern.streaks {
        for i in 0..len {
            let (y, x) = (y0 + i, x0 as isize - i as isize);
            if y >= size || x < 0 {
                break;
            }
            on_overlay[y * size + x as usize] = true;
        }
    }
    let overlay_total = on_overlay.iter().filter(|&&b| b).count();
    println!("rain overlay covers {overlay_total}/{} px", size * size);

    let beta_mode = match std::env::var("BETA").as_deref() {
        Ok("off") => svdp_core::adaptation::BetaMode::Off,
        Ok(v) if v.parse::<f64>().is_ok() => svdp_core::adaptation::BetaMode::Fixed(v.parse().unwrap()),
        _ => svdp_core::adaptation::BetaMode::Adaptive,
    };
    let cfg = AdaptationConfig {
        beta_mode,
        theta: env_f64("THETA", 0.01),
        rho: env_f64("RHO", 16.0 / (size * size) as f64),
        alpha: 0.9,
        tau: env_f64("TAU", 0.69),
        prompt_lr_scale: env_f64("PLS", 30.0),
        mode: Mode::Ctta,
        rounds: 1,
        update_scope: UpdateScope::NormHead,
        seed: 1,
        uncertainty_method: if std::env::var("UNC").as_deref() == Ok("res") {
            svdp_core::uncertainty::UncertaintyMethod::ResolutionAug
        } else {
            svdp_core::uncertainty::UncertaintyMethod::McDropout
        },
        replace_period: std::env::var("REPLACE").ok().and_then(|v| v.parse().ok()).unwrap_or(1),
        lr: env_f64("LR", 1e-3),
        ..Default::default()
    };
    let mut engine = Engine::new(arch.clone(), &params, size, size, cfg, PlacementPolicy::Uncertainty).unwrap();
    let rain = &corpus.targets[2];
    for (i, s) in rain.samples.iter().enumerate() {
        let (pred, rec) = engine.process_sample(&s.image).unwrap();
        let labels = pred.labels().unwrap();
        let acc = labels.iter().zip(&s.gt_labels).filter(|(a, b)| a == b).count() as f64
            / labels.len() as f64;
        let prompts = engine.prompts();
        let k = prompts.active_count();
        let on = prompts
            .active_entries()
            .filter(|(px, _)| on_overlay[*px])
            .count();
        let mean_off: f64 = prompts
            .active_entries()
            .map(|(_, v)| (v[0] + v[1] + v[2]) as f64 / 3.0)
            .sum::<f64>()
            / k.max(1) as f64;
        println!(
            "t{i:02} acc {acc:.3} U {:.3} loss {:.4} valid {:>4} prompts_on_overlay {on}/{k} mean_offset {mean_off:+.3} pl2 {:.3}",
            rec.image_uncertainty, rec.loss, rec.valid_pixels, rec.prompt_l2
        );
    }
}
