//! The weight-shared Siamese LSTM encoder, its triplet loss, training loop and
//! checkpoint format.
//!
//! Layer order: masking → batch norm (over unmasked rows) → LSTM (tanh,
//! sequence output) → dropout → batch norm → LSTM (tanh, final state). The
//! embedding is the final hidden state of the second LSTM and is not
//! length-normalized.

mod activation;
mod checkpoint;
mod loss;
pub mod network;
mod optim;
mod train;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSample;
use network::{Batch, Network};

pub use checkpoint::{
    load_state, load_state_compatible, save_state, state_digest, CHECKPOINT_FORMAT_VERSION,
};
pub use loss::{squared_distance, triplet_loss, triplet_loss_grad, TripletGradient};
pub use optim::Adam;
pub use train::{train, write_training_log, TrainLogEntry, TrainOutcome, ValidationHook};

pub const EMBEDDING_DIM: usize = 128;
pub const DEFAULT_MARGIN: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Rows per sample (M).
    pub seq_len: usize,
    /// Feature columns per row.
    pub n_features: usize,
    pub embedding_dim: usize,
    pub lstm_units: [usize; 2],
    pub dropout_rate: f32,
    /// Triplet-loss margin α.
    pub margin: f64,
    /// Triplets per parameter update.
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Total triplets consumed by training.
    pub triplet_budget: u64,
    pub seed: u64,
    /// Running-statistics momentum of the batch-norm layers.
    pub bn_momentum: f32,
    /// How many validation evaluations to spread over a run, when a
    /// validation hook is supplied.
    pub validation_evaluations: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            seq_len: 70,
            n_features: 5,
            embedding_dim: EMBEDDING_DIM,
            lstm_units: [128, 128],
            dropout_rate: 0.2,
            margin: DEFAULT_MARGIN,
            batch_size: 64,
            learning_rate: 1e-3,
            triplet_budget: 7_600_000,
            seed: 0,
            bn_momentum: 0.9,
            validation_evaluations: 10,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.seq_len == 0 || self.n_features == 0 {
            return fail(format!(
                "seq_len ({}) and n_features ({}) must be positive",
                self.seq_len, self.n_features
            ));
        }
        if self.lstm_units.contains(&0) {
            return fail("lstm_units must be positive".into());
        }
        if self.embedding_dim != self.lstm_units[1] {
            return fail(format!(
                "embedding_dim ({}) must equal the second LSTM's units ({})",
                self.embedding_dim, self.lstm_units[1]
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.margin > 0.0) {
            return fail(format!("margin {} must be positive", self.margin));
        }
        if self.batch_size == 0 || self.triplet_budget == 0 {
            return fail("batch_size and triplet_budget must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return fail(format!("bn_momentum {} outside [0, 1)", self.bn_momentum));
        }
        Ok(())
    }

    /// Parameter updates needed to consume the triplet budget.
    pub fn steps(&self) -> u64 {
        self.triplet_budget.div_ceil(self.batch_size as u64)
    }
}

/// A sample's position in embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f32>);

impl Embedding {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn euclidean(&self, other: &Embedding) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| {
                let d = f64::from(a) - f64::from(b);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Parameters, training-step counter and the configuration they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub config: EncoderConfig,
    pub network: Network,
    pub step: u64,
}

/// Samples embedded per inference call.
const INFERENCE_CHUNK: usize = 256;

impl EncoderState {
    /// Freshly initialized parameters, seeded by `config.seed`.
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let network = Network::new(config.n_features, config.lstm_units, &mut rng);
        Ok(EncoderState {
            config,
            network,
            step: 0,
        })
    }

    pub fn embed(&self, sample: &FeatureSample) -> Result<Embedding> {
        Ok(self
            .embed_batch(&[sample])?
            .pop()
            .expect("one sample in, one out"))
    }

    /// Inference-mode embeddings; deterministic and read-only.
    pub fn embed_batch(&self, samples: &[&FeatureSample]) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(INFERENCE_CHUNK) {
            let batch = self.make_batch(chunk)?;
            let emb = self.network.infer(&batch);
            out.extend(emb.rows().into_iter().map(|r| Embedding(r.to_vec())));
        }
        Ok(out)
    }

    pub(crate) fn make_batch(&self, samples: &[&FeatureSample]) -> Result<Batch> {
        let (seq_len, features) = (self.config.seq_len, self.config.n_features);
        let batch = samples.len();
        let mut x = Array2::zeros((seq_len * batch, features));
        let mut lengths = Vec::with_capacity(batch);
        for (b, sample) in samples.iter().enumerate() {
            if sample.matrix().dim() != (seq_len, features) {
                return Err(Error::Shape(format!(
                    "sample of subject `{}` is {:?}, encoder expects ({seq_len}, {features})",
                    sample.subject_id(),
                    sample.matrix().dim()
                )));
            }
            if sample.matrix().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "sample of subject `{}`",
                    sample.subject_id()
                )));
            }
            for t in 0..sample.valid_rows() {
                x.row_mut(t * batch + b).assign(&sample.matrix().row(t));
            }
            lengths.push(sample.valid_rows());
        }
        Ok(Batch {
            x,
            lengths,
            seq_len,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::SampleSource;
    use rand::Rng;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            seq_len: 6,
            n_features: 3,
            embedding_dim: 5,
            lstm_units: [4, 5],
            dropout_rate: 0.0,
            ..EncoderConfig::default()
        }
    }

    fn random_sample(
        rng: &mut impl Rng,
        seq_len: usize,
        features: usize,
        valid: usize,
    ) -> FeatureSample {
        let m = Array2::from_shape_fn((seq_len, features), |(t, _)| {
            if t < valid {
                rng.gen_range(-1.0..1.0)
            } else {
                0.0
            }
        });
        let mask: Vec<bool> = (0..seq_len).map(|t| t < valid).collect();
        FeatureSample::new(
            "s",
            m,
            &mask,
            SampleSource {
                session: 0,
                start: 0,
            },
        )
        .unwrap()
    }

    #[test]
    fn step_count_rounds_up() {
        let cfg = EncoderConfig {
            triplet_budget: 120_000,
            batch_size: 512,
            ..EncoderConfig::default()
        };
        assert_eq!(cfg.steps(), 235);
        assert_eq!(120_000 - 234 * 512, 192);
    }

    #[test]
    fn default_embedding_is_128_finite_reals() {
        let state = EncoderState::init(EncoderConfig {
            seq_len: 10,
            n_features: 4,
            ..EncoderConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = state.embed(&random_sample(&mut rng, 10, 4, 7)).unwrap();
        assert_eq!(e.0.len(), 128);
        assert!(e.0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shape_mismatch_and_non_finite_are_errors() {
        let state = EncoderState::init(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            state.embed(&random_sample(&mut rng, 6, 4, 3)),
            Err(Error::Shape(_))
        ));
        let mut m = Array2::zeros((6, 3));
        m[[0, 0]] = f32::NAN;
        let s = FeatureSample::new(
            "s",
            m,
            &[true; 6],
            SampleSource {
                session: 0,
                start: 0,
            },
        )
        .unwrap();
        assert!(matches!(state.embed(&s), Err(Error::NonFinite(_))));
    }

    #[test]
    fn batched_and_single_inference_agree() {
        let state = EncoderState::init(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<_> = (0..7)
            .map(|i| random_sample(&mut rng, 6, 3, 1 + i % 6))
            .collect();
        let refs: Vec<_> = samples.iter().collect();
        let batched = state.embed_batch(&refs).unwrap();
        for (s, e) in samples.iter().zip(&batched) {
            let single = state.embed(s).unwrap();
            for (a, b) in single.0.iter().zip(&e.0) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig {
            embedding_dim: 64,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig {
            dropout_rate: 1.0,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
