use svdp_core::adaptation::{run, run_baseline, AdaptationConfig, Baseline, Mode};
use svdp_core::benchmark::train::{pretrain, PretrainConfig};
use svdp_core::benchmark::{generate_corpus, CorpusParams, NUM_CLASSES};
use svdp_core::model::{Architecture, Task};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let task = if args.get(1).map(|s| s.as_str()) == Some("depth") {
        Task::Depth
    } else {
        Task::Seg
    };
    let size: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(32);
    let alpha: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.999);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let n: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(8);
    let tau: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.69);
    let scope = match args.get(8).map(|s| s.as_str()) {
        Some("norm") => svdp_core::adaptation::UpdateScope::NormOnly,
        _ => svdp_core::adaptation::UpdateScope::All,
    };
    let rounds: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(2);

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
    println!("pretrain metric {:.3}", rep.metric);

    for severity in [0.0, 0.4, 0.7, 0.9] {
        let corpus = generate_corpus(&CorpusParams {
            seed: 100,
            size,
            n_source: 1,
            n_per_domain: n,
            severity,
            severity_jitter: 0.1,
            ..Default::default()
        });
        let cfg = AdaptationConfig {
            m: 6,
            scales: vec![0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0],
            mode: Mode::Ctta,
            rounds,
            rho: 2e-3,
            alpha,
            lr,
            tau,
            update_scope: scope,
            seed: 5,
            ..Default::default()
        };
        let source = run_baseline(&arch, &params, &corpus.targets, &cfg, Baseline::Source, None).unwrap();
        let full = run(&arch, &params, &corpus.targets, &cfg, None).unwrap();
        let dom_src: Vec<String> = source.cells[..4].iter().map(|c| format!("{}={:.3}", c.domain, c.primary())).collect();
        let dom_full: Vec<String> = full
            .cells
            .iter()
            .map(|c| format!("{}{}={:.3}", c.domain.chars().next().unwrap(), c.round, c.primary()))
            .collect();
        println!(
            "sev {severity:.1}: source {:.4} [{}]\n         full {:.4} (gain {:+.4}) [{}]",
            source.overall_mean,
            dom_src.join(" "),
            full.overall_mean,
            full.overall_mean - source.overall_mean,
            dom_full.join(" ")
        );
    }
}
