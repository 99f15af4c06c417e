use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use svdp_core::benchmark::train::{pretrain, PretrainConfig};
use svdp_core::benchmark::{
    corrupt_with_pattern, generate_corpus, render_scene, CorpusParams, CorruptionKind,
    DomainPattern, NUM_CLASSES,
};
use svdp_core::model::{Architecture, Dropout, Task};
use svdp_core::num::mix_seed;
use svdp_core::placement::PlacementMask;
use svdp_core::prompts::{warp, PromptState};

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

    for kind in [CorruptionKind::Rain, CorruptionKind::Snow] {
        let mut prng = ChaCha8Rng::seed_from_u64(mix_seed(900, 500));
        let pattern = DomainPattern::generate(kind, size, &mut prng);
        let mut acc_plain = 0.0;
        let mut accs = vec![0.0; 4];
        let ks = [16usize, 64, 200, 330];
        let n = 8;
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(900, 77 + i));
            let scene = render_scene(size, &mut rng);
            let corrupted = corrupt_with_pattern(&scene.image, kind, 0.8, &pattern);
            // Per-pixel restoration offsets, ranked by damage.
            let mut damage: Vec<(f64, usize)> = (0..size * size)
                .map(|px| {
                    let mut d = 0.0;
                    for ch in 0..3 {
                        d += (scene.image.data()[px * 3 + ch] - corrupted.data()[px * 3 + ch]).abs()
                            as f64;
                    }
                    (d, px)
                })
                .collect();
            damage.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

            let pred = arch.forward(&params, &corrupted, Dropout::off()).unwrap();
            let labels = pred.labels().unwrap();
            acc_plain += labels.iter().zip(&scene.labels).filter(|(a, b)| a == b).count() as f64
                / labels.len() as f64
                / n as f64;

            for (j, &k) in ks.iter().enumerate() {
                let mut prompts = PromptState::<f32>::new(size, size, k as f64 / (size * size) as f64).unwrap();
                let mut mask = vec![false; size * size];
                for &(_, px) in &damage[..k] {
                    mask[px] = true;
                }
                prompts.reseat(&PlacementMask::from_parts(mask, size, size, k, 0.0)).unwrap();
                for &(_, px) in &damage[..k] {
                    let mut off = [0f32; 3];
                    for ch in 0..3 {
                        off[ch] = scene.image.data()[px * 3 + ch] - corrupted.data()[px * 3 + ch];
                    }
                    *prompts.entry_mut(px).unwrap() = off;
                }
                let warped = warp(&corrupted, &prompts).unwrap();
                let pred = arch.forward(&params, &warped, Dropout::off()).unwrap();
                let labels = pred.labels().unwrap();
                accs[j] += labels.iter().zip(&scene.labels).filter(|(a, b)| a == b).count() as f64
                    / labels.len() as f64
                    / n as f64;
            }
        }
        println!(
            "{kind}: plain {acc_plain:.3} | oracle k=16 {:.3} k=64 {:.3} k=200 {:.3} k=330 {:.3}",
            accs[0], accs[1], accs[2], accs[3]
        );
    }
}
