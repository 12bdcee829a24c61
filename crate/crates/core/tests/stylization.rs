use std::sync::Arc;

use stylenas::arch::{ArchCode, Encoder, NetworkGraph};
use stylenas::metrics::{gram, rms_distance};
use stylenas::train::{reconstruction_psnr, train_decoder, Corpus, TrainConfig};
use stylenas::transfer::TransferConfig;
use stylenas::Tensor;

fn trained(code: ArchCode, corpus: &Corpus) -> NetworkGraph {
    let cfg = TrainConfig {
        steps: 200,
        batch: corpus.len(),
        image_size: 32,
        ..Default::default()
    };
    let mut g = NetworkGraph::new(code, Arc::new(Encoder::seeded(4, 0).unwrap()), 1);
    train_decoder(&mut g, corpus, &cfg).unwrap();
    g
}

fn relu5_gram_distance(a: &Tensor, b: &Tensor, encoder: &Encoder) -> f64 {
    let ga = gram(encoder.forward(a).unwrap().get(5)).unwrap();
    let gb = gram(encoder.forward(b).unwrap().get(5)).unwrap();
    ga.iter().zip(&gb).map(|(x, y)| (x - y).powi(2)).sum()
}

#[test]
fn trained_graphs_transfer_and_reconstruct() {
    let corpus = Corpus::procedural(8, 32, 0).unwrap();
    let ones = trained(ArchCode::ONES, &corpus);
    let zeros = trained(ArchCode::ZEROS, &corpus);
    let encoder = ones.encoder().clone();

    for g in [&ones, &zeros] {
        assert!(reconstruction_psnr(g, &corpus).unwrap() > 15.0, "{}", g.code());
    }

    let pairs = Corpus::procedural(5, 32, 77).unwrap();
    let imgs = pairs.images();
    let cfg = TransferConfig::default();
    let (mut d_ones, mut d_zeros) = (0.0, 0.0);
    for k in 0..4 {
        let (content, style) = (&imgs[k], &imgs[k + 1]);
        d_ones += relu5_gram_distance(&ones.forward(content, style, &cfg).unwrap(), style, &encoder);
        d_zeros += relu5_gram_distance(&zeros.forward(content, style, &cfg).unwrap(), style, &encoder);

        // No transfer sites: the output is the reconstruction whatever the style.
        assert_eq!(zeros.forward(content, style, &cfg).unwrap(), zeros.reconstruct(content).unwrap());

        // Self-transfer without regularization stays within the
        // reconstruction error.
        let exact = TransferConfig { epsilon: 0.0, ..cfg };
        let recon = ones.reconstruct(content).unwrap();
        let selfie = ones.forward(content, content, &exact).unwrap();
        let drift = rms_distance(&selfie, &recon).unwrap();
        let recon_err = rms_distance(&recon, content).unwrap();
        assert!(drift <= recon_err, "pair {k}: {drift} > {recon_err}");
    }
    // Summed over the pairs; single pairs go either way at this scale.
    assert!(d_ones < d_zeros, "{d_ones} >= {d_zeros}");
}
