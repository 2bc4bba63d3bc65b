use std::io::Write;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::triplet_loss_grad;
use super::optim::Adam;
use super::{EncoderConfig, EncoderState};
use crate::error::{Error, Result};
use crate::features::FeatureSample;
use crate::sampler::TripletSpec;

/// Scores a candidate state on held-out subjects; lower is better.
pub type ValidationHook<'a> = &'a mut dyn FnMut(&EncoderState) -> Result<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: u64,
    pub mean_loss: f64,
    pub validation_eer: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The final state, or the best-validation state when a hook was given.
    pub state: EncoderState,
    pub log: Vec<TrainLogEntry>,
    pub best_step: u64,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> Option<f64> {
        self.log.first().map(|e| e.mean_loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.log.last().map(|e| e.mean_loss)
    }
}

fn resolve(samples: &[Vec<FeatureSample>], subject: u32, index: u32) -> Result<&FeatureSample> {
    samples
        .get(subject as usize)
        .and_then(|s| s.get(index as usize))
        .ok_or_else(|| {
            Error::Config(format!(
                "triplet references missing sample {index} of subject {subject}"
            ))
        })
}

/// Trains a fresh encoder on `config.triplet_budget` triplets taken from
/// `triplets`, one Adam update per batch on the mean batch loss.
///
/// `samples[s][i]` is sample `i` of pool subject `s`. With a validation hook,
/// the hook runs `config.validation_evaluations` times spread over the run
/// (always including the last step) and the best-scoring state is returned.
pub fn train<I>(
    config: &EncoderConfig,
    samples: &[Vec<FeatureSample>],
    triplets: I,
    mut validation: Option<ValidationHook<'_>>,
) -> Result<TrainOutcome>
where
    I: IntoIterator<Item = TripletSpec>,
{
    let mut state = EncoderState::init(config.clone())?;
    let mut optimizer = Adam::new(&state.network, config.learning_rate);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let total_steps = config.steps();
    let evaluations = (config.validation_evaluations.max(1) as u64).min(total_steps.max(1));
    // Evaluate when step * evaluations / total_steps reaches the next integer,
    // giving exactly `evaluations` evenly spread points ending at the last step.
    let due = |step: u64| step * evaluations / total_steps > (step - 1) * evaluations / total_steps;
    let budget = usize::try_from(config.triplet_budget).expect("budget fits in memory");

    let mut stream = triplets.into_iter();
    let mut log = Vec::with_capacity(total_steps as usize);
    let mut best: Option<(f64, EncoderState)> = None;
    let mut consumed = 0usize;
    let mut chunk = Vec::with_capacity(config.batch_size);

    for step in 1..=total_steps {
        chunk.clear();
        let want = config.batch_size.min(budget - consumed);
        chunk.extend(stream.by_ref().take(want));
        consumed += chunk.len();
        if chunk.len() < want {
            return Err(Error::TripletStreamExhausted { consumed, budget });
        }
        let n = chunk.len();
        let mut refs = Vec::with_capacity(3 * n);
        for t in &chunk {
            refs.push(resolve(samples, t.anchor_subject, t.anchor_index)?);
        }
        for t in &chunk {
            refs.push(resolve(samples, t.anchor_subject, t.positive_index)?);
        }
        for t in &chunk {
            refs.push(resolve(samples, t.negative_subject, t.negative_index)?);
        }
        let batch = state.make_batch(&refs)?;

        // One parameter set serves anchor, positive and negative alike.
        let (emb, cache) = state.network.forward_train(
            &batch,
            config.dropout_rate,
            config.bn_momentum,
            &mut dropout_rng,
        );
        let dim = emb.ncols();
        let mut d_emb = Array2::<f32>::zeros(emb.raw_dim());
        let mut loss_sum = 0.0f64;
        let mut active = 0usize;
        for j in 0..n {
            let row = |r: usize| -> Vec<f64> { emb.row(r).iter().map(|&v| f64::from(v)).collect() };
            let g = triplet_loss_grad(&row(j), &row(n + j), &row(2 * n + j), config.margin)?;
            loss_sum += g.loss;
            active += usize::from(g.loss > 0.0);
            for k in 0..dim {
                d_emb[[j, k]] = (g.anchor[k] / n as f64) as f32;
                d_emb[[n + j, k]] = (g.positive[k] / n as f64) as f32;
                d_emb[[2 * n + j, k]] = (g.negative[k] / n as f64) as f32;
            }
        }
        let mean_loss = loss_sum / n as f64;
        if !mean_loss.is_finite() {
            let max_abs = emb.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            return Err(Error::NonFiniteLoss {
                step: step as usize,
                diagnostic: format!(
                    "batch of {n} triplets, {active} with active hinge, mean loss {mean_loss}, max |embedding| {max_abs}"
                ),
            });
        }
        let grad = state.network.backward(&batch, &cache, &d_emb);
        optimizer.step(&mut state.network, &grad);
        state.step = step;

        let mut entry = TrainLogEntry {
            step,
            mean_loss,
            validation_eer: None,
        };
        if let Some(hook) = validation.as_mut() {
            if due(step) {
                let eer = hook(&state)?;
                entry.validation_eer = Some(eer);
                if best.as_ref().is_none_or(|(b, _)| eer < *b) {
                    best = Some((eer, state.clone()));
                }
            }
        }
        log.push(entry);
    }

    let (state, best_step) = match best {
        Some((_, s)) => {
            let step = s.step;
            (s, step)
        }
        None => {
            let step = state.step;
            (state, step)
        }
    };
    Ok(TrainOutcome {
        state,
        log,
        best_step,
    })
}

pub fn write_training_log<W: Write>(writer: W, log: &[TrainLogEntry]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["step", "mean_loss", "validation_eer"])?;
    for e in log {
        w.write_record([
            e.step.to_string(),
            e.mean_loss.to_string(),
            e.validation_eer.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<training log>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::SampleSource;
    use crate::sampler::TripletPool;
    use rand::Rng;

    fn config(budget: u64, batch: usize) -> EncoderConfig {
        EncoderConfig {
            seq_len: 5,
            n_features: 2,
            embedding_dim: 8,
            lstm_units: [8, 8],
            batch_size: batch,
            triplet_budget: budget,
            learning_rate: 1e-2,
            seed: 3,
            ..EncoderConfig::default()
        }
    }

    /// Subject `s` emits rows near `(s, -s)` plus noise.
    fn clusters(subjects: usize, per_subject: usize) -> Vec<Vec<FeatureSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (0..subjects)
            .map(|s| {
                (0..per_subject)
                    .map(|_| {
                        let centre = s as f32;
                        let m = Array2::from_shape_fn((5, 2), |(_, f)| {
                            let sign = if f == 0 { 1.0 } else { -1.0 };
                            sign * centre + rng.gen_range(-0.2..0.2)
                        });
                        FeatureSample::new(
                            format!("s{s}"),
                            m,
                            &[true; 5],
                            SampleSource {
                                session: 0,
                                start: 0,
                            },
                        )
                        .unwrap()
                    })
                    .collect()
            })
            .collect()
    }

    fn pool(samples: &[Vec<FeatureSample>]) -> TripletPool {
        TripletPool::new(
            samples
                .iter()
                .enumerate()
                .map(|(i, v)| (format!("s{i}"), v.len())),
        )
        .unwrap()
    }

    #[test]
    fn loss_goes_down_on_separable_clusters() {
        let samples = clusters(4, 6);
        let cfg = config(3_200, 32);
        let out = train(&cfg, &samples, pool(&samples).generate(3_200, 1), None).unwrap();
        assert_eq!(out.log.len(), 100);
        let head: f64 = out.log[..10].iter().map(|e| e.mean_loss).sum::<f64>() / 10.0;
        let tail: f64 = out.log[90..].iter().map(|e| e.mean_loss).sum::<f64>() / 10.0;
        assert!(tail < 0.5 * head, "loss {head} -> {tail}");
        assert_eq!(out.state.step, 100);
    }

    #[test]
    fn budget_of_one_batch_is_one_step() {
        let samples = clusters(3, 3);
        let out = train(
            &config(16, 16),
            &samples,
            pool(&samples).generate(16, 1),
            None,
        )
        .unwrap();
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.best_step, 1);
    }

    #[test]
    fn partial_last_batch_consumes_exactly_the_budget() {
        let samples = clusters(3, 3);
        let pool = pool(&samples);
        let stream = pool.generate(1_000, 1);
        let mut taken = 0usize;
        let counted = stream.inspect(|_| taken += 1);
        let out = train(&config(40, 16), &samples, counted, None).unwrap();
        assert_eq!(out.log.len(), 3);
        assert_eq!(taken, 40);
    }

    #[test]
    fn short_stream_is_an_error() {
        let samples = clusters(3, 3);
        let err = train(
            &config(40, 16),
            &samples,
            pool(&samples).generate(20, 1),
            None,
        )
        .unwrap_err();
        assert!(
            matches!(
                err,
                Error::TripletStreamExhausted {
                    consumed: 20,
                    budget: 40
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn validation_hook_runs_on_schedule_and_picks_the_best_state() {
        let samples = clusters(3, 4);
        let cfg = EncoderConfig {
            validation_evaluations: 4,
            ..config(160, 16)
        };
        let mut calls = Vec::new();
        // Scores that bottom out at the second evaluation.
        let scores = [0.4, 0.1, 0.3, 0.2];
        let mut hook = |state: &EncoderState| -> Result<f64> {
            calls.push(state.step);
            Ok(scores[calls.len() - 1])
        };
        let out = train(
            &cfg,
            &samples,
            pool(&samples).generate(160, 1),
            Some(&mut hook),
        )
        .unwrap();
        assert_eq!(calls, vec![3, 5, 8, 10]);
        assert_eq!(out.best_step, 5);
        assert_eq!(out.state.step, 5);
        let logged: Vec<_> = out.log.iter().filter_map(|e| e.validation_eer).collect();
        assert_eq!(logged, scores);
    }

    #[test]
    fn triplets_referencing_missing_samples_are_errors() {
        let samples = clusters(2, 2);
        let bad = TripletSpec {
            anchor_subject: 0,
            anchor_index: 0,
            positive_index: 5,
            negative_subject: 1,
            negative_index: 0,
        };
        assert!(train(&config(1, 1), &samples, [bad], None).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let samples = clusters(3, 4);
        let run = || {
            train(
                &config(64, 16),
                &samples,
                pool(&samples).generate(64, 9),
                None,
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.log, b.log);
        assert_eq!(a.state.network, b.state.network);
    }
}
