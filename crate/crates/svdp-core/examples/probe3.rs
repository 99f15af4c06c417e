use svdp_core::benchmark::train::{pretrain, PretrainConfig};
use svdp_core::benchmark::{generate_corpus, CorpusParams, NUM_CLASSES};
use svdp_core::model::{Architecture, Dropout, Task};
use svdp_core::pseudo::{generate, PseudoTarget};

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

    let corpus = generate_corpus(&CorpusParams {
        seed: 100,
        size,
        n_source: 1,
        n_per_domain: 6,
        severity: 0.8,
        severity_jitter: 0.1,
        ..Default::default()
    });

    let all_scales = vec![0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0];
    let down_scales = vec![0.25, 0.5, 0.75, 1.0];
    for stream in &corpus.targets {
        let mut plain_acc = 0.0;
        let mut rows: Vec<String> = Vec::new();
        for (name, scales, tau) in [
            ("7sc t=0.69", &all_scales, 0.69),
            ("7sc t=0.90", &all_scales, 0.90),
            ("down t=0.69", &down_scales, 0.69),
            ("down t=0.90", &down_scales, 0.90),
        ] {
            let mut acc = 0.0;
            let mut cov = 0.0;
            for s in &stream.samples {
                let pseudo = generate(&arch, &params, &s.image, scales, tau).unwrap();
                let classes = match &pseudo.target {
                    PseudoTarget::Seg { classes } => classes,
                    _ => unreachable!(),
                };
                let mut hit = 0usize;
                let mut n = 0usize;
                for (i, (&c, &g)) in classes.iter().zip(&s.gt_labels).enumerate() {
                    if pseudo.valid[i] {
                        n += 1;
                        hit += (c == g) as usize;
                    }
                }
                acc += hit as f64 / n.max(1) as f64 / stream.samples.len() as f64;
                cov += n as f64 / classes.len() as f64 / stream.samples.len() as f64;
            }
            rows.push(format!("{name}: acc {acc:.3} cov {cov:.2}"));
        }
        for s in &stream.samples {
            let pred = arch.forward(&params, &s.image, Dropout::off()).unwrap();
            let labels = pred.labels().unwrap();
            let hit = labels.iter().zip(&s.gt_labels).filter(|(a, b)| a == b).count();
            plain_acc += hit as f64 / labels.len() as f64 / stream.samples.len() as f64;
        }
        println!("{:>6}: plain {plain_acc:.3} | {}", stream.kind.name(), rows.join(" | "));
    }
}
