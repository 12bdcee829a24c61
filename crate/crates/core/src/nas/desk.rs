use std::sync::Arc;

use crate::arch::{ArchCode, Encoder, EncoderTaps, NetworkGraph};
use crate::error::{Error, Result};
use crate::io::KeyValues;
use crate::metrics::{objective, EvalReport, ObjectiveWeights};
use crate::tensor::Tensor;
use crate::train::{train_decoder_prepared, Corpus, PreparedCorpus, TrainConfig};
use crate::transfer::{TransferConfig, TransferKind};

use super::{Candidate, Evaluator, Outcome};

/// Small-scale evaluation problem: procedural data, a seeded encoder, and
/// short decoder training per candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct DeskConfig {
    pub base_width: usize,
    pub encoder_seed: u64,
    pub data_seed: u64,
    pub train_images: usize,
    pub val_pairs: usize,
    /// Decoder initialization seed shared by all candidates.
    pub init_seed: u64,
    pub train: TrainConfig,
    pub oracle_init_seed: u64,
    pub oracle_train: TrainConfig,
    pub transfer: TransferConfig,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            base_width: 4,
            encoder_seed: 0,
            data_seed: 0,
            train_images: 8,
            val_pairs: 4,
            init_seed: 1,
            train: TrainConfig {
                steps: 40,
                batch: 8,
                learning_rate: 1e-3,
                seed: 1,
                image_size: 32,
            },
            oracle_init_seed: 2,
            oracle_train: TrainConfig {
                steps: 600,
                batch: 8,
                learning_rate: 1e-3,
                seed: 2,
                image_size: 32,
            },
            transfer: TransferConfig::default(),
        }
    }
}

impl DeskConfig {
    pub const KEYS: [&'static str; 17] = [
        "train.steps",
        "train.batch",
        "train.learning_rate",
        "train.seed",
        "train.image_size",
        "oracle.steps",
        "oracle.batch",
        "oracle.learning_rate",
        "oracle.seed",
        "desk.base_width",
        "desk.encoder_seed",
        "desk.data_seed",
        "desk.train_images",
        "desk.val_pairs",
        "desk.init_seed",
        "transfer.epsilon",
        "transfer.kind",
    ];

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = Self::default();
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.get($key)? {
                    $field = v;
                }
            };
        }
        set!("train.steps", c.train.steps);
        set!("train.batch", c.train.batch);
        set!("train.learning_rate", c.train.learning_rate);
        set!("train.seed", c.train.seed);
        set!("train.image_size", c.train.image_size);
        c.oracle_train.image_size = c.train.image_size;
        set!("oracle.steps", c.oracle_train.steps);
        set!("oracle.batch", c.oracle_train.batch);
        set!("oracle.learning_rate", c.oracle_train.learning_rate);
        set!("oracle.seed", c.oracle_init_seed);
        set!("desk.base_width", c.base_width);
        set!("desk.encoder_seed", c.encoder_seed);
        set!("desk.data_seed", c.data_seed);
        set!("desk.train_images", c.train_images);
        set!("desk.val_pairs", c.val_pairs);
        set!("desk.init_seed", c.init_seed);
        set!("transfer.epsilon", c.transfer.epsilon);
        if let Some(kind) = kv.get::<TransferKind>("transfer.kind")? {
            c.transfer.kind = kind;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.oracle_train.validate()?;
        self.transfer.validate()?;
        if self.train.image_size != self.oracle_train.image_size {
            return Err(Error::Config("oracle and candidates must train at the same image size".into()));
        }
        if self.train_images == 0 || self.val_pairs == 0 {
            return Err(Error::Config("desk corpora must be non-empty".into()));
        }
        Ok(())
    }

    pub fn encoder(&self) -> Result<Arc<Encoder>> {
        Ok(Arc::new(Encoder::seeded(self.base_width, self.encoder_seed)?))
    }

    pub fn train_corpus(&self) -> Result<Corpus> {
        Corpus::procedural(self.train_images, self.train.image_size, self.data_seed)
    }

    /// `(content, style)` validation pairs, disjoint from the training set.
    pub fn validation_pairs(&self) -> Result<Vec<(Tensor, Tensor)>> {
        let s = self.train.image_size;
        let contents = Corpus::procedural(self.val_pairs, s, self.data_seed.wrapping_add(1_000_001))?;
        let styles = Corpus::procedural(self.val_pairs + 1, s, self.data_seed.wrapping_add(2_000_003))?;
        // The offset pairs each content with a style of a different kind.
        Ok(contents
            .images()
            .iter()
            .zip(&styles.images()[1..])
            .map(|(c, s)| (c.clone(), s.clone()))
            .collect())
    }
}

/// The trained all-ones network and its stylized validation outputs.
#[derive(Clone, Debug)]
pub struct Oracle {
    pub graph: NetworkGraph,
    pub pairs: Vec<(Tensor, Tensor)>,
    pub outputs: Vec<Tensor>,
    pub loss_trace: Vec<f32>,
}

pub(crate) fn stylize_pairs(
    graph: &NetworkGraph,
    content_taps: &[EncoderTaps],
    pairs: &[(Tensor, Tensor)],
    transfer: &TransferConfig,
) -> Result<Vec<Tensor>> {
    content_taps
        .iter()
        .zip(pairs)
        .map(|(taps, (_, style))| {
            let cache = graph.style_cache(style)?;
            graph.stylize(taps, &cache, transfer)
        })
        .collect()
}

/// Trains the all-ones network and caches its outputs on the validation pairs.
pub fn train_oracle(config: &DeskConfig) -> Result<Oracle> {
    config.validate()?;
    let encoder = config.encoder()?;
    let corpus = PreparedCorpus::new(&config.train_corpus()?, encoder.clone())?;
    let mut graph = NetworkGraph::new(ArchCode::ONES, encoder.clone(), config.oracle_init_seed);
    let loss_trace = train_decoder_prepared(&mut graph, &corpus, &config.oracle_train)?;
    let pairs = config.validation_pairs()?;
    let taps = pairs.iter().map(|(c, _)| encoder.forward(c)).collect::<Result<Vec<_>>>()?;
    let outputs = stylize_pairs(&graph, &taps, &pairs, &config.transfer)?;
    Ok(Oracle {
        graph,
        pairs,
        outputs,
        loss_trace,
    })
}

/// Trains and scores candidates against an [`Oracle`].
pub struct DeskEvaluator {
    config: DeskConfig,
    weights: ObjectiveWeights,
    oracle: Arc<Oracle>,
    corpus: PreparedCorpus,
    content_taps: Vec<EncoderTaps>,
}

impl DeskEvaluator {
    pub fn new(config: &DeskConfig, oracle: Arc<Oracle>, weights: ObjectiveWeights) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        let encoder = oracle.graph.encoder().clone();
        let corpus = PreparedCorpus::new(&config.train_corpus()?, encoder.clone())?;
        let content_taps = oracle
            .pairs
            .iter()
            .map(|(c, _)| encoder.forward(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            weights,
            oracle,
            corpus,
            content_taps,
        })
    }

    pub fn oracle(&self) -> &Oracle {
        &self.oracle
    }

    pub fn config(&self) -> &DeskConfig {
        &self.config
    }

    pub fn weights(&self) -> ObjectiveWeights {
        self.weights
    }

    /// An untrained candidate network.
    pub fn build(&self, code: ArchCode) -> NetworkGraph {
        NetworkGraph::new(code, self.oracle.graph.encoder().clone(), self.config.init_seed)
    }

    /// Builds and trains the decoder of `code`.
    pub fn train(&self, code: ArchCode) -> Result<NetworkGraph> {
        let mut graph = self.build(code);
        train_decoder_prepared(&mut graph, &self.corpus, &self.config.train)?;
        Ok(graph)
    }

    /// Stylized validation outputs of `graph`.
    pub fn outputs(&self, graph: &NetworkGraph) -> Result<Vec<Tensor>> {
        stylize_pairs(graph, &self.content_taps, &self.oracle.pairs, &self.config.transfer)
    }

    /// Scores an already trained network.
    pub fn score(&self, graph: &NetworkGraph) -> Result<EvalReport> {
        let outputs = self.outputs(graph)?;
        if outputs.iter().any(|o| !o.is_finite()) {
            return Err(Error::Precondition("non-finite stylized output".into()));
        }
        objective(
            &outputs,
            &self.oracle.outputs,
            &self.oracle.pairs,
            graph.code(),
            &self.weights,
            graph.encoder(),
        )
    }

    /// Analytic flop count of one stylization at the desk image size.
    pub fn flops(&self, code: ArchCode) -> u64 {
        let s = self.config.train.image_size;
        self.build(code).count_flops(s, s).total()
    }
}

impl Evaluator for DeskEvaluator {
    fn evaluate(&self, code: ArchCode) -> Outcome {
        match self.train(code).and_then(|g| self.score(&g)) {
            Ok(report) => Outcome::Trained(report),
            Err(e) => Outcome::Failed(e.to_string()),
        }
    }
}

/// Trains and scores one code. Failures come back as a failed candidate with
/// an infinite loss.
pub fn evaluate_candidate(code: ArchCode, evaluator: &DeskEvaluator) -> Candidate {
    Candidate::from_outcome(code, 0, 0, &evaluator.evaluate(code))
}
