//! Synthetic free-text corpora with per-subject Gaussian timing signatures.
//!
//! Every subject gets its own mean hold time and mean release-to-press gap,
//! plus a per-key offset table. Keystrokes draw around those means with
//! Gaussian noise and a per-session tempo factor. With the default narrow
//! ranges for the subject means, identity lives mostly in the per-key
//! offsets, which averaging over a sequence does not reveal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{KeystrokeEvent, SubjectStream};
use crate::error::{Error, Result};

const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub subjects: usize,
    pub sessions_per_subject: usize,
    pub keys_per_session: usize,
    /// Distinct keys drawn from (at most 27: `a`–`z` and space).
    pub alphabet_size: usize,
    pub seed: u64,
    /// Range of subject mean hold times, seconds.
    pub hold_range_s: (f64, f64),
    /// Range of subject mean release-to-press gaps, seconds.
    pub gap_range_s: (f64, f64),
    /// Spread of the per-key offsets around a subject's means, seconds.
    pub key_offset_sd_s: f64,
    /// Per-keystroke noise, relative to the mean.
    pub noise_cv: f64,
    /// Log-scale spread of a per-session tempo factor applied to every
    /// duration in the session.
    pub session_tempo_sd: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            subjects: 40,
            sessions_per_subject: 60,
            keys_per_session: 11,
            alphabet_size: 5,
            seed: 0,
            hold_range_s: (0.105, 0.115),
            gap_range_s: (0.165, 0.175),
            key_offset_sd_s: 0.06,
            noise_cv: 0.1,
            session_tempo_sd: 0.1,
        }
    }
}

struct Signature {
    hold: Vec<f64>,
    gap: Vec<f64>,
}

fn subject_id(index: usize) -> String {
    format!("syn{index:05}")
}

/// Generates `config.subjects` streams. Subject `i` depends only on the seed
/// and `i`, so growing the corpus keeps existing subjects unchanged.
pub fn generate_corpus(config: &SynthConfig) -> Result<Vec<SubjectStream>> {
    if !(1..=ALPHABET.len()).contains(&config.alphabet_size) {
        return Err(Error::Config(format!(
            "alphabet_size must be in 1..={}, got {}",
            ALPHABET.len(),
            config.alphabet_size
        )));
    }
    (0..config.subjects)
        .map(|i| generate_subject(config, i))
        .collect()
}

fn generate_subject(config: &SynthConfig, index: usize) -> Result<SubjectStream> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64 + 1);
    let hold_mean = rng.gen_range(config.hold_range_s.0..config.hold_range_s.1);
    let gap_mean = rng.gen_range(config.gap_range_s.0..config.gap_range_s.1);
    let alphabet = &ALPHABET[..config.alphabet_size];
    let offset = Normal::new(0.0, config.key_offset_sd_s).expect("finite spread");
    let signature = Signature {
        hold: alphabet
            .iter()
            .map(|_| (hold_mean + offset.sample(&mut rng)).max(0.02))
            .collect(),
        gap: alphabet
            .iter()
            .map(|_| gap_mean + offset.sample(&mut rng))
            .collect(),
    };

    let noise = Normal::new(0.0, config.noise_cv).expect("finite noise");
    let tempo = Normal::new(0.0, config.session_tempo_sd).expect("finite tempo spread");
    let sessions: Vec<String> = (0..config.sessions_per_subject)
        .map(|s| format!("s{s:03}"))
        .collect();
    let mut events = Vec::with_capacity(config.sessions_per_subject * config.keys_per_session);
    let mut clock_ms: i64 = 0;
    for session in 0..config.sessions_per_subject as u32 {
        clock_ms += 60_000;
        let mut press_ms = clock_ms;
        let speed = f64::exp(tempo.sample(&mut rng));
        for _ in 0..config.keys_per_session {
            let k = rng.gen_range(0..alphabet.len());
            let hold_s = (speed * signature.hold[k] * (1.0 + noise.sample(&mut rng))).max(0.01);
            let gap_s = speed * signature.gap[k] * (1.0 + noise.sample(&mut rng));
            let hold_ms = (hold_s * 1000.0).round() as i64;
            events.push(KeystrokeEvent {
                session,
                key_code: alphabet[k],
                press_ms,
                release_ms: press_ms + hold_ms,
            });
            // Next press follows this release after the gap; never earlier
            // than a few ms after this press.
            press_ms += (hold_ms + (gap_s * 1000.0).round() as i64).max(5);
        }
        clock_ms = press_ms;
    }
    SubjectStream::new(subject_id(index), sessions, events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::extract_features;

    #[test]
    fn shape_and_determinism() {
        let cfg = SynthConfig {
            subjects: 3,
            sessions_per_subject: 4,
            keys_per_session: 11,
            ..SynthConfig::default()
        };
        let a = generate_corpus(&cfg).unwrap();
        assert_eq!(a, generate_corpus(&cfg).unwrap());
        assert_eq!(a.len(), 3);
        for s in &a {
            assert_eq!(s.sessions().len(), 4);
            assert_eq!(s.event_count(), 44);
            assert_eq!(extract_features(s).len(), 40);
        }
        let bigger = generate_corpus(&SynthConfig { subjects: 5, ..cfg }).unwrap();
        assert_eq!(&bigger[..3], &a[..]);
    }
}
