//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criterion 9 needs the public CMU password table; point `KSNN_CMU_CSV` at
//! it to run that check, otherwise it is reported as SKIP.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ksnn::corpus::SubjectStream;
use ksnn::encoder::network::Batch;
use ksnn::encoder::{train, triplet_loss, triplet_loss_grad, EncoderConfig, EncoderState};
use ksnn::eval::{equal_error_rate, evaluate, Aggregation};
use ksnn::features::{prepare_samples, FeatureSample, SampleRecipe, SampleSource, SegmentPolicy};
use ksnn::lab::synth::{generate_corpus, SynthConfig};
use ksnn::lab::{
    derive_seed, replay_manifest, run_breadth_sweep, stability_of_curves, DatasetKind,
    ExperimentConfig, Lab, StabilityThresholds, TrainingVerdict,
};
use ksnn::sampler::{genuine_pairs, possible_triplets, TripletPool};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1

fn brute_force_triplets(subjects: u64, n: u64) -> u128 {
    let mut count = 0u128;
    for anchor in 0..subjects {
        for i in 0..n {
            for j in 0..n {
                for negative in 0..subjects {
                    for _k in 0..n {
                        if i < j && negative != anchor {
                            count += 1;
                        }
                    }
                }
            }
        }
    }
    count
}

fn combinatorics() -> Result<String, String> {
    for p in 2..=6u64 {
        for n in 2..=5u64 {
            let pairs = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).count() as u128;
            ensure(genuine_pairs(n) == pairs, || format!("genuine_pairs({n})"))?;
            let expect = brute_force_triplets(p, n);
            let got = possible_triplets(p, n).unwrap();
            ensure(got == expect, || {
                format!("possible_triplets({p},{n}) = {got}, brute force {expect}")
            })?;
            let pool = TripletPool::new((0..p).map(|s| (format!("s{s}"), n as usize))).unwrap();
            ensure(pool.possible() == expect, || {
                format!("pool of {p}×{n} counts {}", pool.possible())
            })?;
        }
    }
    let small = possible_triplets(125, 15).unwrap();
    let large = possible_triplets(68_000, 15).unwrap();
    ensure(small == 24_412_500, || {
        format!("possible_triplets(125,15) = {small}")
    })?;
    ensure(large == 7_282_692_900_000, || {
        format!("possible_triplets(68000,15) = {large}")
    })?;
    Ok(format!("(125,15) → {small}, (68000,15) → {large}"))
}

// ---------------------------------------------------------------- 2

fn loss_and_gradients() -> Result<String, String> {
    let z = [0.3, -0.2];
    ensure(triplet_loss(&z, &z, &z, 1.5).unwrap() == 1.5, || {
        "equal embeddings".into()
    })?;
    // ‖a−p‖² = 1, ‖a−n‖² = 4.
    let l = triplet_loss(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 2.0], 1.5).unwrap();
    ensure(l == 0.0, || format!("inactive hinge gave {l}"))?;
    let l = triplet_loss(&[0.0, 0.0], &[0.0, 2.0], &[1.0, 0.0], 1.5).unwrap();
    ensure(l == 4.5, || format!("active hinge gave {l}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (h, margin) = (1e-6, 1.5);
    let mut checked = 0;
    let mut worst = 0.0f64;
    while checked < 100 {
        let dim = rng.gen_range(2..=16);
        let mut draw = || {
            (0..dim)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect::<Vec<f64>>()
        };
        let (a, p, n) = (draw(), draw(), draw());
        let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
        if (d(&a, &p) - d(&a, &n) + margin).abs() < 1e-2 {
            continue;
        }
        checked += 1;
        let grad = triplet_loss_grad(&a, &p, &n, margin).unwrap();
        for (role, analytic) in [&grad.anchor, &grad.positive, &grad.negative]
            .into_iter()
            .enumerate()
        {
            for k in 0..dim {
                let mut plus = [a.clone(), p.clone(), n.clone()];
                let mut minus = plus.clone();
                plus[role][k] += h;
                minus[role][k] -= h;
                let fd = (triplet_loss(&plus[0], &plus[1], &plus[2], margin).unwrap()
                    - triplet_loss(&minus[0], &minus[1], &minus[2], margin).unwrap())
                    / (2.0 * h);
                let err = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-8);
                let err = if fd == 0.0 && analytic[k] == 0.0 {
                    0.0
                } else {
                    err
                };
                worst = worst.max(err);
            }
        }
    }
    ensure(worst < 1e-4, || {
        format!("worst relative gradient error {worst:.2e}")
    })?;
    Ok(format!(
        "worst relative gradient error {worst:.1e} over 100 points"
    ))
}

// ---------------------------------------------------------------- 3

/// Walks the (FAR, FRR) polyline over every candidate threshold and returns
/// where it first meets the diagonal.
fn crossing_search(genuine: &[f64], impostor: &[f64]) -> f64 {
    let mut cuts: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    cuts.sort_by(f64::total_cmp);
    let mut points = vec![(0.0, 1.0)];
    for t in cuts {
        let far = impostor.iter().filter(|&&s| s <= t).count() as f64 / impostor.len() as f64;
        let frr = genuine.iter().filter(|&&s| s > t).count() as f64 / genuine.len() as f64;
        points.push((far, frr));
    }
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x1 >= y1 {
            // Solve x0 + s(x1−x0) = y0 + s(y1−y0) on the segment.
            let denom = (x1 - x0) - (y1 - y0);
            let s = if denom == 0.0 { 1.0 } else { (y0 - x0) / denom };
            return x0 + s * (x1 - x0);
        }
    }
    unreachable!()
}

fn eer_oracle() -> Result<String, String> {
    let cases: [(&[f64], &[f64], f64); 3] = [
        (&[0.1, 0.2], &[0.8, 0.9], 0.0),
        (&[0.5], &[0.5], 0.5),
        (&[1.0, 2.0, 3.0, 4.0], &[3.0, 4.0, 5.0, 6.0], 0.25),
    ];
    for (g, i, want) in cases {
        let got = equal_error_rate(g, i).unwrap();
        ensure(got == want, || {
            format!("EER{g:?}/{i:?} = {got}, want {want}")
        })?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let total = rng.gen_range(2..=8);
        let ng = rng.gen_range(1..total);
        let scores: Vec<f64> = (0..total).map(|_| rng.gen::<f64>()).collect();
        let (g, i) = scores.split_at(ng);
        let diff = (equal_error_rate(g, i).unwrap() - crossing_search(g, i)).abs();
        worst = worst.max(diff);
    }
    ensure(worst <= 1e-9, || {
        format!("max deviation from crossing search {worst:.2e}")
    })?;
    Ok(format!("1000 random score sets, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- 4

fn masking_invariance() -> Result<String, String> {
    let (m, f) = (20, 5);
    let config = EncoderConfig {
        seq_len: m,
        n_features: f,
        seed: 4,
        ..EncoderConfig::default()
    };
    let mut state = EncoderState::init(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    // Non-default normalization statistics so the padding would show if read.
    state.network.bn1.running_mean.fill(0.2);
    state.network.bn2.running_var.fill(0.5);

    let mut samples = Vec::new();
    for _ in 0..50 {
        let valid = rng.gen_range(1..m);
        let matrix = Array2::from_shape_fn((m, f), |(t, _)| {
            if t < valid {
                rng.gen_range(0.0..0.5f32)
            } else {
                0.0
            }
        });
        let mask: Vec<bool> = (0..m).map(|t| t < valid).collect();
        samples.push(
            FeatureSample::new(
                "s",
                matrix,
                &mask,
                SampleSource {
                    session: 0,
                    start: 0,
                },
            )
            .unwrap(),
        );
    }
    let refs: Vec<&FeatureSample> = samples.iter().collect();
    let reference = state.embed_batch(&refs).unwrap();

    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    for (k, s) in samples.iter().enumerate() {
        // Perturb the padding, then re-zero it and rebuild the sample.
        let mut noisy = s.matrix().clone();
        for t in s.valid_rows()..m {
            noisy
                .row_mut(t)
                .mapv_inplace(|_| rng.gen_range(-100.0..100.0));
        }
        for t in s.valid_rows()..m {
            noisy.row_mut(t).fill(0.0);
        }
        let rebuilt = FeatureSample::new("s", noisy, &s.mask(), s.source()).unwrap();
        let again = state.embed(&rebuilt).unwrap();
        ensure(bits(&again.0) == bits(&reference[k].0), || {
            format!("sample {k} changed after re-zeroing")
        })?;
    }

    // The network must not read padded rows even if they are not zero.
    let batch_size = samples.len();
    let mut x = Array2::zeros((m * batch_size, f));
    for (b, s) in samples.iter().enumerate() {
        for t in 0..m {
            if t < s.valid_rows() {
                x.row_mut(t * batch_size + b).assign(&s.matrix().row(t));
            } else {
                x.row_mut(t * batch_size + b)
                    .mapv_inplace(|_| rng.gen_range(-100.0..100.0));
            }
        }
    }
    let batch = Batch {
        x,
        lengths: samples.iter().map(FeatureSample::valid_rows).collect(),
        seq_len: m,
    };
    let raw = state.network.infer(&batch);
    for (k, row) in raw.rows().into_iter().enumerate() {
        ensure(
            bits(row.as_slice().unwrap()) == bits(&reference[k].0),
            || format!("sample {k} read non-zero padding"),
        )?;
    }
    Ok("50 samples bit-identical".into())
}

// ---------------------------------------------------------------- 5

fn replay() -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.kind = DatasetKind::Synthetic;
    cfg.dataset.synthetic = SynthConfig {
        subjects: 20,
        sessions_per_subject: 12,
        keys_per_session: 21,
        seed: 5,
        ..SynthConfig::default()
    };
    cfg.split.n_test = 5;
    cfg.split.n_validation = 0;
    cfg.grid.breadth = vec![10];
    cfg.grid.samples_per_subject = vec![5];
    cfg.grid.seq_len = vec![20];
    cfg.grid.triplets = vec![5_000];
    cfg.grid.g_list = vec![1, 5, 10];
    cfg.grid.reruns = 1;
    cfg.grid.validate = false;
    cfg.results_dir = dir.path().join("first");
    let first = run_breadth_sweep(cfg).map_err(|e| e.to_string())?;
    let replayed = replay_manifest(&first.manifest, Some(dir.path().join("second")))
        .map_err(|e| e.to_string())?;
    ensure(first.records.len() == 1 && replayed.len() == 1, || {
        "expected one run each".into()
    })?;
    let (a, b) = (&first.records[0], &replayed[0]);
    ensure(a.eer_by_g == b.eer_by_g, || {
        format!("{:?} vs {:?}", a.eer_by_g, b.eer_by_g)
    })?;
    ensure(a.same_outcome(b), || {
        "records differ beyond per-G EERs".into()
    })?;
    let shown: Vec<String> = a
        .eer_by_g
        .iter()
        .map(|(g, e)| format!("G={g}: {e:.4}"))
        .collect();
    Ok(format!("identical per-G EERs ({})", shown.join(", ")))
}

// ---------------------------------------------------------------- 6, 7

const SEEDS: u64 = 5;
const TRIPLETS: u64 = 50_000;
const SEQ_LEN: usize = 10;
const GALLERY: usize = 10;

struct SyntheticSplit {
    train: Vec<(String, Vec<FeatureSample>)>,
    test: Vec<(String, Vec<FeatureSample>)>,
}

fn synthetic_split(seed: u64) -> SyntheticSplit {
    let streams = generate_corpus(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let recipe = SampleRecipe {
        policy: SegmentPolicy::SessionPerSample,
        seq_len: SEQ_LEN,
        max_samples: usize::MAX,
        outlier_threshold_s: 5.0,
    };
    let prepare = |s: &[SubjectStream]| {
        s.iter()
            .map(|s| (s.subject_id().to_owned(), prepare_samples(s, &recipe)))
            .collect()
    };
    let (train, test) = streams.split_at(20);
    SyntheticSplit {
        train: prepare(train),
        test: prepare(&test[..20]),
    }
}

fn held_out_eer(state: &EncoderState, split: &SyntheticSplit, seed: u64) -> f64 {
    let eval_seed = derive_seed(seed, &["eval"]);
    evaluate(state, &split.test, &[GALLERY], eval_seed, Aggregation::Mean).unwrap()[0].mean_eer
}

/// Trains on the first `breadth` training subjects and returns the held-out
/// EER before and after training.
fn train_and_score(split: &SyntheticSplit, breadth: usize, seed: u64) -> (f64, f64) {
    let pool_data = &split.train[..breadth];
    let config = EncoderConfig {
        seq_len: SEQ_LEN,
        n_features: 5,
        triplet_budget: TRIPLETS,
        seed: derive_seed(seed, &["encoder"]),
        ..EncoderConfig::default()
    };
    let init = EncoderState::init(config.clone()).unwrap();
    let pool = TripletPool::new(pool_data.iter().map(|(s, v)| (s.clone(), v.len()))).unwrap();
    let samples: Vec<Vec<FeatureSample>> = pool_data.iter().map(|(_, v)| v.clone()).collect();
    let triplets = pool.generate(TRIPLETS, derive_seed(seed, &["triplets"]));
    let trained = train(&config, &samples, triplets, None).unwrap().state;
    (
        held_out_eer(&init, split, seed),
        held_out_eer(&trained, split, seed),
    )
}

struct SeedRun {
    init: f64,
    wide: f64,
}

/// The 20-subject runs shared by criteria 6 and 7.
fn wide_runs() -> &'static Vec<SeedRun> {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        (0..SEEDS)
            .map(|seed| {
                let (init, wide) = train_and_score(&synthetic_split(seed), 20, seed);
                SeedRun { init, wide }
            })
            .collect()
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter()
        .map(|e| format!("{e:.3}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn trainability() -> Result<String, String> {
    let runs = wide_runs();
    let init: Vec<f64> = runs.iter().map(|r| r.init).collect();
    let trained: Vec<f64> = runs.iter().map(|r| r.wide).collect();
    let (mi, mt) = (median(init.clone()), median(trained.clone()));
    let detail = format!(
        "init [{}] median {mi:.3}; trained [{}] median {mt:.3}",
        fmt_list(&init),
        fmt_list(&trained)
    );
    ensure(mt < 0.15 && mt < mi, || detail.clone())?;
    Ok(detail)
}

fn breadth_trend() -> Result<String, String> {
    let wide: Vec<f64> = wide_runs().iter().map(|r| r.wide).collect();
    let narrow: Vec<f64> = (0..SEEDS)
        .map(|seed| train_and_score(&synthetic_split(seed), 5, seed).1)
        .collect();
    let (mw, mn) = (median(wide.clone()), median(narrow.clone()));
    let detail = format!(
        "20 subjects [{}] median {mw:.3}; 5 subjects [{}] median {mn:.3}",
        fmt_list(&wide),
        fmt_list(&narrow)
    );
    ensure(mw <= mn, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn stability() -> Result<String, String> {
    let t = StabilityThresholds::default();
    let deep = stability_of_curves(
        &[5, 10, 20, 40, 60],
        &[vec![5.90, 2.78, 1.36, 0.70, 0.70]],
        t,
    )
    .unwrap();
    ensure(
        deep.verdict == TrainingVerdict::ConsistentWithWellTrained,
        || format!("{:?}", deep.verdict),
    )?;
    let noisy = stability_of_curves(
        &[10, 20, 30, 40, 50, 60],
        &[vec![8.75, 9.27, 9.42, 7.75, 9.77, 10.02]],
        t,
    )
    .unwrap();
    ensure(noisy.verdict == TrainingVerdict::UnderTrained, || {
        format!("{:?}", noisy.verdict)
    })?;
    Ok(format!("{} / {}", deep.verdict, noisy.verdict))
}

// ---------------------------------------------------------------- 9

fn cmu_reference() -> Option<Result<String, String>> {
    let path = std::env::var_os("KSNN_CMU_CSV")?;
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.kind = DatasetKind::Cmu;
    cfg.dataset.name = "cmu".into();
    cfg.dataset.path = Some(path.into());
    cfg.split.n_test = 5;
    cfg.split.n_validation = 5;
    cfg.grid.breadth = vec![41];
    cfg.grid.samples_per_subject = vec![200];
    cfg.grid.seq_len = vec![10];
    cfg.grid.triplets = vec![120_000];
    cfg.grid.g_list = vec![10];
    cfg.grid.reruns = 1;
    let outcome = Lab::new(cfg).and_then(|mut lab| lab.run_breadth_sweep());
    Some(match outcome {
        Err(e) => Err(e.to_string()),
        Ok(o) => {
            let eer = o.records[0].eer_by_g[&10];
            let detail = format!("mean EER {:.2}%", 100.0 * eer);
            if eer <= 0.10 {
                Ok(detail)
            } else {
                Err(detail)
            }
        }
    })
}

fn main() {
    let criteria: [(&str, Check, Duration); 8] = [
        (
            "1 combinatorics oracle",
            combinatorics,
            Duration::from_secs(1),
        ),
        (
            "2 triplet loss and gradients",
            loss_and_gradients,
            Duration::from_secs(10),
        ),
        ("3 EER oracle", eer_oracle, Duration::from_secs(10)),
        (
            "4 masking invariance",
            masking_invariance,
            Duration::from_secs(30),
        ),
        (
            "5 determinism and replay",
            replay,
            Duration::from_secs(5 * 60),
        ),
        (
            "6 synthetic trainability",
            trainability,
            Duration::from_secs(15 * 60),
        ),
        (
            "7 breadth trend",
            breadth_trend,
            Duration::from_secs(30 * 60),
        ),
        ("8 stability diagnostic", stability, Duration::from_secs(1)),
    ];
    // Quiet the default panic message; failures are reported below.
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check, limit) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|d| {
            if elapsed <= limit {
                Ok(d)
            } else {
                Err(format!("{d}; took longer than {limit:?}"))
            }
        });
        match outcome {
            Ok(detail) => println!("PASS  {name} [{:.1}s] {detail}", elapsed.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name} [{:.1}s] {detail}", elapsed.as_secs_f64());
            }
        }
    }
    let start = Instant::now();
    match cmu_reference() {
        None => println!("SKIP  9 CMU reference run (set KSNN_CMU_CSV to enable)"),
        Some(Ok(d)) => println!(
            "PASS  9 CMU reference run [{:.0}s] {d}",
            start.elapsed().as_secs_f64()
        ),
        Some(Err(d)) => {
            failed += 1;
            println!(
                "FAIL  9 CMU reference run [{:.0}s] {d}",
                start.elapsed().as_secs_f64()
            );
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
