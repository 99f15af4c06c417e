use std::time::Instant;
use svdp_core::adaptation::{run, AdaptationConfig, Mode, UpdateScope};
use svdp_core::benchmark::train::{pretrain, PretrainConfig};
use svdp_core::benchmark::{generate_corpus, CorpusParams, NUM_CLASSES};
use svdp_core::model::{Architecture, Task};

fn env_f64(k: &str, d: f64) -> f64 {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}
fn env_usize(k: &str, d: usize) -> usize {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let task = if std::env::var("TASK").as_deref() == Ok("depth") {
        Task::Depth
    } else {
        Task::Seg
    };
    let size = env_usize("SIZE", 32);
    let n = env_usize("N", 8);
    let seeds = env_usize("SEEDS", 3);
    let severity = env_f64("SEV", 0.8);
    let alpha = env_f64("ALPHA", 0.9);
    let lr = env_f64("LR", 1e-3);
    let tau = env_f64("TAU", 0.69);
    let rho = env_f64("RHO", 8.0 / (size * size) as f64);
    let pls = env_f64("PLS", 0.03 / lr);
    let rounds = env_usize("ROUNDS", 3);
    let theta = env_f64("THETA", 0.01);
    let scope = match std::env::var("SCOPE").as_deref() {
        Ok("all") => UpdateScope::All,
        Ok("norm") => UpdateScope::NormOnly,
        _ => UpdateScope::NormHead,
    };

    let arch = match task {
        Task::Seg => Architecture::seg(NUM_CLASSES),
        Task::Depth => Architecture::depth(),
    };
    let src = generate_corpus(&CorpusParams {
        seed: 7,
        size,
        n_source: 48,
        n_per_domain: 1,
        ..Default::default()
    });
    let (params, rep) = pretrain(&arch, &src.source, &PretrainConfig::for_task(task)).unwrap();
    println!("pretrain {task}: {:.3} | size {size} n {n} sev {severity} alpha {alpha} lr {lr} tau {tau} rho {rho:.5} pls {pls:.0} scope {scope:?}", rep.metric);

    let base = AdaptationConfig {
        rho,
        alpha,
        lr,
        tau,
        theta,
        prompt_lr_scale: pls,
        mode: Mode::Ctta,
        rounds,
        update_scope: scope,
        replace_period: env_usize("REPLACE", 1),
        uncertainty_method: if std::env::var("UNC").as_deref() == Ok("res") {
            svdp_core::uncertainty::UncertaintyMethod::ResolutionAug
        } else {
            svdp_core::uncertainty::UncertaintyMethod::McDropout
        },
        ..Default::default()
    };

    let t0 = Instant::now();
    for ex in 1..=6usize {
        let mut vals = Vec::new();
        let mut first_rounds = (0.0, 0.0, 0.0);
        for seed in 0..seeds as u64 {
            let corpus = generate_corpus(&CorpusParams {
                seed: 100 + seed,
                size,
                n_source: 1,
                n_per_domain: n,
                severity,
                severity_jitter: 0.2,
                ..Default::default()
            });
            let mut cfg = base.ablation_preset(ex).unwrap();
            cfg.seed = seed;
            let r = run(&arch, &params, &corpus.targets, &cfg, None).unwrap();
            if seed == 0 {
                first_rounds = (
                    r.round_means.first().copied().unwrap_or(0.0),
                    r.round_means.get(1).copied().unwrap_or(0.0),
                    r.round_means.get(2).copied().unwrap_or(0.0),
                );
            }
            vals.push(r.overall_mean);
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let detail: Vec<String> = vals.iter().map(|v| format!("{v:.3}")).collect();
        println!(
            "Ex{ex}: mean {mean:.4} [{}] rounds({:.3},{:.3},{:.3})",
            detail.join(","),
            first_rounds.0,
            first_rounds.1,
            first_rounds.2
        );
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
