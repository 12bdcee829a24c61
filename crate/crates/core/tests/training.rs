use std::sync::Arc;

use stylenas::arch::{ArchCode, Encoder, NetworkGraph};
use stylenas::train::{reconstruction_psnr, train_decoder, Corpus, TrainConfig};

fn graph(code: ArchCode, base: usize) -> NetworkGraph {
    NetworkGraph::new(code, Arc::new(Encoder::seeded(base, 0).unwrap()), 0)
}

#[test]
fn zeros_decoder_halves_its_loss_and_generalizes() {
    let cfg = TrainConfig::default();
    let corpus = Corpus::procedural(16, cfg.image_size, 0).unwrap();
    let held_out = Corpus::procedural(8, cfg.image_size, 99).unwrap();
    let untrained = graph(ArchCode::ZEROS, 8);
    let mut g = untrained.clone();
    let trace = train_decoder(&mut g, &corpus, &cfg).unwrap();
    assert_eq!(trace.len(), 300);
    assert!(trace.iter().all(|l| l.is_finite()));
    let (first, last) = (trace[0], trace[trace.len() - 1]);
    assert!(last < 0.5 * first, "initial {first}, final {last}");
    assert_eq!(g.encoder().named_tensors(), untrained.encoder().named_tensors());

    let before = reconstruction_psnr(&untrained, &held_out).unwrap();
    let after = reconstruction_psnr(&g, &held_out).unwrap();
    assert!(after > before, "{before} dB -> {after} dB");
}

#[test]
fn default_config_stays_finite_across_seeds() {
    for seed in 0..5 {
        let cfg = TrainConfig {
            seed,
            ..Default::default()
        };
        let corpus = Corpus::procedural(8, cfg.image_size, seed).unwrap();
        let mut g = NetworkGraph::new(ArchCode::ONES, Arc::new(Encoder::seeded(2, seed).unwrap()), seed);
        let trace = train_decoder(&mut g, &corpus, &cfg).unwrap();
        assert!(trace.iter().all(|l| l.is_finite()), "seed {seed}");
    }
}

#[test]
fn same_seed_gives_identical_weights() {
    let cfg = TrainConfig {
        steps: 20,
        image_size: 32,
        seed: 7,
        ..Default::default()
    };
    let corpus = Corpus::procedural(6, 32, 3).unwrap();
    let run = || {
        let mut g = graph(ArchCode::ONES, 2);
        let trace = train_decoder(&mut g, &corpus, &cfg).unwrap();
        (g.named_tensors(), trace)
    };
    assert_eq!(run(), run());
}
