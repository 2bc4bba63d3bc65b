//! Gallery/query verification protocol and equal error rate.
//!
//! Each test subject enrolls its first `G` embeddings as a gallery. Its
//! remaining embeddings are genuine queries, and one seeded pick from every
//! other test subject forms the impostor queries. A query's score is its
//! aggregated Euclidean distance to the gallery (lower is more genuine).

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Embedding, EncoderState};
use crate::error::{Error, Result};
use crate::features::FeatureSample;

pub const SCORE_CONVENTION: &str = "distance (lower = more genuine)";

/// How the `G` query-to-gallery distances collapse into one score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Min,
}

/// FAR/FRR crossing of a distance-score verifier.
///
/// At threshold `t` a query is accepted when its score is `≤ t`, so
/// `FAR(t)` is the fraction of impostor scores `≤ t` and `FRR(t)` the
/// fraction of genuine scores `> t`. The sweep visits every distinct pooled
/// score (plus a threshold below all of them) and linearly interpolates
/// between the two operating points that bracket `FAR = FRR`.
pub fn equal_error_rate(genuine: &[f64], impostor: &[f64]) -> Result<f64> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Config(
            "EER needs at least one genuine and one impostor score".into(),
        ));
    }
    let mut g = genuine.to_vec();
    let mut im = impostor.to_vec();
    g.sort_by(f64::total_cmp);
    im.sort_by(f64::total_cmp);
    let (ng, ni) = (g.len() as f64, im.len() as f64);

    let (mut far_prev, mut frr_prev) = (0.0, 1.0);
    let (mut gi, mut ii) = (0, 0);
    while gi < g.len() || ii < im.len() {
        let t = match (g.get(gi), im.get(ii)) {
            (Some(&a), Some(&b)) => a.min(b),
            (Some(&a), None) => a,
            (None, Some(&b)) => b,
            (None, None) => unreachable!(),
        };
        while gi < g.len() && g[gi] <= t {
            gi += 1;
        }
        while ii < im.len() && im[ii] <= t {
            ii += 1;
        }
        let far = ii as f64 / ni;
        let frr = (g.len() - gi) as f64 / ng;
        if far >= frr {
            let d0 = far_prev - frr_prev;
            let d1 = far - frr;
            let lambda = if d1 == d0 { 1.0 } else { -d0 / (d1 - d0) };
            return Ok(far_prev + lambda * (far - far_prev));
        }
        far_prev = far;
        frr_prev = frr;
    }
    unreachable!("FAR reaches 1 and FRR reaches 0 at the largest score")
}

/// Embeddings of the test subjects, computed once and shared by every
/// gallery size.
#[derive(Debug, Clone)]
pub struct EmbeddedTestSet {
    subjects: Vec<String>,
    embeddings: Vec<Vec<Embedding>>,
}

/// `selection[s][u]` is the sample of subject `u` that acts as impostor
/// against subject `s` (the diagonal is unused).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImpostorSelection {
    selection: Vec<Vec<usize>>,
}

impl ImpostorSelection {
    pub fn draw(sample_counts: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = sample_counts.len();
        let selection = (0..t)
            .map(|s| {
                (0..t)
                    .map(|u| {
                        if u == s {
                            0
                        } else {
                            rng.gen_range(0..sample_counts[u])
                        }
                    })
                    .collect()
            })
            .collect();
        ImpostorSelection { selection }
    }

    pub fn pick(&self, subject: usize, impostor: usize) -> usize {
        self.selection[subject][impostor]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ImpostorQuery<'a> {
    pub subject_id: &'a str,
    /// Sample index within the impostor subject.
    pub origin: usize,
    pub embedding: &'a Embedding,
}

/// One subject's gallery, genuine queries and impostor queries.
#[derive(Debug, Clone)]
pub struct SubjectEvalSet<'a> {
    pub subject_id: &'a str,
    pub gallery: &'a [Embedding],
    /// Samples `G..` of the subject, in order.
    pub genuine_queries: &'a [Embedding],
    pub impostor_queries: Vec<ImpostorQuery<'a>>,
}

impl SubjectEvalSet<'_> {
    pub fn score(&self, query: &Embedding, aggregation: Aggregation) -> f64 {
        let distances = self.gallery.iter().map(|g| g.euclidean(query));
        match aggregation {
            Aggregation::Mean => distances.sum::<f64>() / self.gallery.len() as f64,
            Aggregation::Min => distances.fold(f64::INFINITY, f64::min),
        }
    }

    /// `(genuine_scores, impostor_scores)`.
    pub fn score_queries(&self, aggregation: Aggregation) -> (Vec<f64>, Vec<f64>) {
        let genuine = self
            .genuine_queries
            .iter()
            .map(|q| self.score(q, aggregation))
            .collect();
        let impostor = self
            .impostor_queries
            .iter()
            .map(|q| self.score(q.embedding, aggregation))
            .collect();
        (genuine, impostor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub g: usize,
    pub per_subject_eer: BTreeMap<String, f64>,
    pub mean_eer: f64,
    pub score_convention: String,
}

impl EmbeddedTestSet {
    /// Embeds every sample of every test subject (in the given order).
    pub fn embed(state: &EncoderState, test: &[(String, Vec<FeatureSample>)]) -> Result<Self> {
        let mut subjects = Vec::with_capacity(test.len());
        let mut embeddings = Vec::with_capacity(test.len());
        for (subject, samples) in test {
            let refs: Vec<&FeatureSample> = samples.iter().collect();
            subjects.push(subject.clone());
            embeddings.push(state.embed_batch(&refs)?);
        }
        Ok(EmbeddedTestSet {
            subjects,
            embeddings,
        })
    }

    pub fn from_embeddings(subjects: Vec<String>, embeddings: Vec<Vec<Embedding>>) -> Self {
        assert_eq!(subjects.len(), embeddings.len());
        EmbeddedTestSet {
            subjects,
            embeddings,
        }
    }

    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    pub fn sample_counts(&self) -> Vec<usize> {
        self.embeddings.iter().map(Vec::len).collect()
    }

    pub fn impostor_selection(&self, seed: u64) -> ImpostorSelection {
        ImpostorSelection::draw(&self.sample_counts(), seed)
    }

    /// Gallery of the first `g` embeddings per subject. Every subject needs
    /// more than `g` samples and there must be at least two subjects.
    pub fn eval_sets(
        &self,
        g: usize,
        impostors: &ImpostorSelection,
    ) -> Result<Vec<SubjectEvalSet<'_>>> {
        if self.subjects.len() < 2 {
            return Err(Error::InsufficientSubjects {
                needed: 2,
                available: self.subjects.len(),
            });
        }
        if g == 0 {
            return Err(Error::Config("gallery size must be positive".into()));
        }
        if let Some((s, e)) = self
            .subjects
            .iter()
            .zip(&self.embeddings)
            .find(|(_, e)| e.len() <= g)
        {
            return Err(Error::InsufficientSamples {
                subject: s.clone(),
                available: e.len(),
                needed: g,
            });
        }
        Ok((0..self.subjects.len())
            .map(|s| {
                let own = &self.embeddings[s];
                let impostor_queries = (0..self.subjects.len())
                    .filter(|&u| u != s)
                    .map(|u| {
                        let origin = impostors.pick(s, u);
                        ImpostorQuery {
                            subject_id: &self.subjects[u],
                            origin,
                            embedding: &self.embeddings[u][origin],
                        }
                    })
                    .collect();
                SubjectEvalSet {
                    subject_id: &self.subjects[s],
                    gallery: &own[..g],
                    genuine_queries: &own[g..],
                    impostor_queries,
                }
            })
            .collect())
    }

    pub fn build_eval_sets(&self, g: usize, seed: u64) -> Result<Vec<SubjectEvalSet<'_>>> {
        let impostors = self.impostor_selection(seed);
        self.eval_sets(g, &impostors)
    }

    /// One result per gallery size, all sharing one impostor selection.
    pub fn evaluate(
        &self,
        g_list: &[usize],
        seed: u64,
        aggregation: Aggregation,
    ) -> Result<Vec<EvalResult>> {
        if g_list.is_empty() {
            return Err(Error::Config("gallery size list is empty".into()));
        }
        let impostors = self.impostor_selection(seed);
        g_list
            .iter()
            .map(|&g| {
                let sets = self.eval_sets(g, &impostors)?;
                let mut per_subject_eer = BTreeMap::new();
                for set in &sets {
                    let (genuine, impostor) = set.score_queries(aggregation);
                    per_subject_eer.insert(
                        set.subject_id.to_owned(),
                        equal_error_rate(&genuine, &impostor)?,
                    );
                }
                let mean_eer = per_subject_eer.values().sum::<f64>() / per_subject_eer.len() as f64;
                Ok(EvalResult {
                    g,
                    per_subject_eer,
                    mean_eer,
                    score_convention: SCORE_CONVENTION.to_owned(),
                })
            })
            .collect()
    }
}

/// Embeds the test subjects once and evaluates every gallery size in
/// `g_list` against the same impostor picks.
pub fn evaluate(
    state: &EncoderState,
    test: &[(String, Vec<FeatureSample>)],
    g_list: &[usize],
    seed: u64,
    aggregation: Aggregation,
) -> Result<Vec<EvalResult>> {
    EmbeddedTestSet::embed(state, test)?.evaluate(g_list, seed, aggregation)
}

/// Writes `subject, query_subject, query_origin, label, score` rows.
pub fn write_scores<W: Write>(
    writer: W,
    sets: &[SubjectEvalSet<'_>],
    aggregation: Aggregation,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["subject", "query_subject", "query_origin", "label", "score"])?;
    for set in sets {
        let g = set.gallery.len();
        for (i, q) in set.genuine_queries.iter().enumerate() {
            let score = set.score(q, aggregation);
            w.write_record([
                set.subject_id,
                set.subject_id,
                &(g + i).to_string(),
                "genuine",
                &score.to_string(),
            ])?;
        }
        for q in &set.impostor_queries {
            let score = set.score(q.embedding, aggregation);
            w.write_record([
                set.subject_id,
                q.subject_id,
                &q.origin.to_string(),
                "impostor",
                &score.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<scores>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive crossing search: evaluate FAR/FRR by direct counting at
    /// every candidate threshold and interpolate at the first crossing.
    pub(crate) fn brute_force_eer(genuine: &[f64], impostor: &[f64]) -> f64 {
        let mut thresholds: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        let rates = |t: f64| {
            let far = impostor.iter().filter(|&&s| s <= t).count() as f64 / impostor.len() as f64;
            let frr = genuine.iter().filter(|&&s| s > t).count() as f64 / genuine.len() as f64;
            (far, frr)
        };
        let mut points = vec![(0.0, 1.0)];
        points.extend(thresholds.into_iter().map(rates));
        let k = points.iter().position(|(far, frr)| far >= frr).unwrap();
        let ((a0, r0), (a1, r1)) = (points[k - 1], points[k]);
        let lambda = (r0 - a0) / ((a1 - a0) - (r1 - r0));
        a0 + lambda * (a1 - a0)
    }

    #[test]
    fn tagged_examples() {
        assert_eq!(equal_error_rate(&[0.1, 0.2], &[0.8, 0.9]).unwrap(), 0.0);
        assert_eq!(equal_error_rate(&[0.5], &[0.5]).unwrap(), 0.5);
        assert_eq!(
            equal_error_rate(&[1.0, 2.0, 3.0, 4.0], &[3.0, 4.0, 5.0, 6.0]).unwrap(),
            0.25
        );
        assert!(equal_error_rate(&[], &[1.0]).is_err());
    }

    #[test]
    fn fully_inverted_scores_give_one() {
        assert_eq!(equal_error_rate(&[5.0, 6.0], &[1.0, 2.0]).unwrap(), 1.0);
    }

    fn emb(v: &[f32]) -> Embedding {
        Embedding(v.to_vec())
    }

    #[test]
    fn mean_distance_score() {
        let gallery = [emb(&[0.0, 0.0]), emb(&[2.0, 0.0])];
        let set = SubjectEvalSet {
            subject_id: "a",
            gallery: &gallery,
            genuine_queries: &[],
            impostor_queries: vec![],
        };
        assert_eq!(set.score(&emb(&[1.0, 0.0]), Aggregation::Mean), 1.0);
        assert_eq!(set.score(&emb(&[1.0, 0.0]), Aggregation::Min), 1.0);
        let single = [emb(&[0.3, 0.4])];
        let set = SubjectEvalSet {
            gallery: &single,
            ..set
        };
        assert_eq!(set.score(&emb(&[0.3, 0.4]), Aggregation::Mean), 0.0);
    }

    fn synthetic_set(subjects: usize, samples: usize) -> EmbeddedTestSet {
        EmbeddedTestSet::from_embeddings(
            (0..subjects).map(|s| format!("s{s}")).collect(),
            (0..subjects)
                .map(|s| {
                    (0..samples)
                        .map(|i| emb(&[s as f32, i as f32 * 0.01]))
                        .collect()
                })
                .collect(),
        )
    }

    #[test]
    fn set_sizes_follow_protocol() {
        let t = synthetic_set(5, 400);
        let sets = t.build_eval_sets(40, 3).unwrap();
        assert_eq!(sets.len(), 5);
        for set in &sets {
            assert_eq!(set.gallery.len(), 40);
            assert_eq!(set.genuine_queries.len(), 360);
            assert_eq!(set.impostor_queries.len(), 4);
            assert!(set
                .impostor_queries
                .iter()
                .all(|q| q.subject_id != set.subject_id));
        }
        let sets = t.build_eval_sets(399, 3).unwrap();
        assert_eq!(sets[0].genuine_queries.len(), 1);
        assert!(matches!(
            t.build_eval_sets(400, 3),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn thousand_subjects_fifteen_samples() {
        let t = synthetic_set(1000, 15);
        let sets = t.build_eval_sets(10, 0).unwrap();
        assert!(sets.iter().all(|s| s.gallery.len() == 10
            && s.genuine_queries.len() == 5
            && s.impostor_queries.len() == 999));
    }

    #[test]
    fn single_subject_is_rejected() {
        assert!(matches!(
            synthetic_set(1, 20).evaluate(&[5], 0, Aggregation::Mean),
            Err(Error::InsufficientSubjects { .. })
        ));
    }

    #[test]
    fn degenerate_embeddings_score_equally() {
        let t = EmbeddedTestSet::from_embeddings(
            vec!["a".into(), "b".into(), "c".into()],
            vec![vec![emb(&[1.0, 1.0]); 4]; 3],
        );
        let sets = t.build_eval_sets(2, 1).unwrap();
        let (g, i) = sets[0].score_queries(Aggregation::Mean);
        assert!(g.iter().chain(&i).all(|&s| s == 0.0));
        let r = t.evaluate(&[2], 1, Aggregation::Mean).unwrap();
        assert_eq!(r[0].mean_eer, 0.5);
    }

    #[test]
    fn separated_subjects_evaluate_to_zero() {
        let results = synthetic_set(6, 30)
            .evaluate(&[5, 10, 20], 4, Aggregation::Mean)
            .unwrap();
        assert_eq!(results.len(), 3);
        assert!(results
            .iter()
            .all(|r| r.mean_eer == 0.0 && r.per_subject_eer.len() == 6));
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..10.0, 1..8)
    }

    proptest! {
        #[test]
        fn matches_brute_force(g in scores(), i in scores()) {
            let fast = equal_error_rate(&g, &i).unwrap();
            prop_assert!((fast - brute_force_eer(&g, &i)).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&fast));
        }

        #[test]
        fn invariant_under_scaling_and_permutation(g in scores(), i in scores(), k in 0.01f64..100.0) {
            let base = equal_error_rate(&g, &i).unwrap();
            let gs: Vec<f64> = g.iter().map(|v| v * k).collect();
            let is: Vec<f64> = i.iter().map(|v| v * k).collect();
            prop_assert!((equal_error_rate(&gs, &is).unwrap() - base).abs() < 1e-12);
            let mut gr = g.clone();
            gr.reverse();
            let mut ir = i.clone();
            ir.rotate_left(1);
            prop_assert_eq!(equal_error_rate(&gr, &ir).unwrap(), base);
        }
    }
}
