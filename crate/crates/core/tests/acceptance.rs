//! Acceptance suite. Prints one PASS/FAIL line per criterion and a summary.
//!
//! The verdicts are the printed lines. The process fails only when the suite
//! cannot run to completion, so a criterion that is out of reach at this scale
//! is reported without masking the rest of `cargo test`.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use depthprior::diffcore::GRAD_TOLERANCE;
use depthprior::model::{gradient_check_suite, Branch};
use depthprior::objectives::{compute_metrics, kl_loss, si_loss, MetricsReport};
use depthprior::params::ParamGroup;
use depthprior::scenegen::{
    default_catalog, generate_dataset, read_dataset, write_dataset, Dataset, GeneratorConfig, Sample,
};
use depthprior::trainer::{schedule_select, train_and_evaluate, Checkpoint, EpochLog, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn report(id: usize, name: &str, elapsed: Duration, limit: Duration, v: Verdict, failed: &mut Vec<usize>) {
    let in_time = elapsed <= limit;
    let pass = v.pass && in_time;
    if !pass {
        failed.push(id);
    }
    println!(
        "{} [{id}] {name}: {} ({:.1} s, limit {} s{})",
        if pass { "PASS" } else { "FAIL" },
        v.detail,
        elapsed.as_secs_f64(),
        limit.as_secs(),
        if in_time { "" } else { ", over time" },
    );
}

fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

fn loss_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_hand = 0.0f64;
    let mut worst_invariance = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..200);
        let target: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..20.0)).collect();
        let mask = vec![true; n];
        let y: Vec<f64> = target.iter().map(|t| std::f64::consts::E * t).collect();
        worst_hand = worst_hand.max((si_loss(&y, &target, &mask, 0.85).unwrap() - 0.15).abs());
        let c = rng.random_range(0.1..10.0);
        let y: Vec<f64> = target.iter().map(|t| c * t).collect();
        worst_invariance = worst_invariance.max(si_loss(&y, &target, &mask, 1.0).unwrap().abs());
    }
    let kl0 = kl_loss(&[0.0f64; 8], &[1.0; 8]).unwrap();
    let kl1 = kl_loss(&[1.0f64; 8], &[1.0; 8]).unwrap();
    let pass = worst_hand <= 1e-12 && worst_invariance <= 1e-12 && kl0.abs() <= 1e-12 && (kl1 - 0.5).abs() <= 1e-12;
    verdict(
        pass,
        format!(
            "|L(e y*) - 0.15| {worst_hand:.1e}, |L_gamma=1(c y*)| {worst_invariance:.1e}, KL(0,1) {kl0:.1e}, KL(1,1) {kl1}"
        ),
    )
}

fn gradient_checks() -> Verdict {
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let mut covered = BTreeSet::new();
    for seed in [11u64, 22, 33] {
        for (branch, rep) in gradient_check_suite(seed, 1e-6).unwrap() {
            worst = worst.max(rep.max_rel_error());
            if !rep.pass {
                failures.push(format!("{branch:?}@{seed}"));
            }
            for (name, leaf) in &rep.leaves {
                if let Some(group) = ParamGroup::of(name) {
                    covered.insert(name.clone());
                    // The text head only reaches the image objective through detached inputs.
                    if branch == Branch::Image && group == ParamGroup::Text && !leaf.all_zero {
                        failures.push(format!("{name} not zero through detach at seed {seed}"));
                    }
                }
            }
        }
    }
    let expected: BTreeSet<String> = depthprior::model::ModelConfig::toy()
        .param_specs()
        .into_iter()
        .map(|s| s.name)
        .collect();
    let missing: Vec<_> = expected.difference(&covered).collect();
    let pass = failures.is_empty() && missing.is_empty() && worst <= GRAD_TOLERANCE;
    verdict(
        pass,
        format!(
            "max relative error {worst:.2e} over {} parameters, 3 seeds, both objectives{}{}",
            covered.len(),
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failed {failures:?}")
            },
            if missing.is_empty() {
                String::new()
            } else {
                format!("; unchecked {missing:?}")
            },
        ),
    )
}

/// Straightforward re-derivation of every metric from its definition.
fn brute_metrics(y: &[f64], t: &[f64], mask: &[bool]) -> [f64; 7] {
    let pairs: Vec<(f64, f64)> = y
        .iter()
        .zip(t)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&a, &b), _)| (a, b))
        .collect();
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(f64, f64) -> f64| pairs.iter().map(|&(a, b)| f(a, b)).sum::<f64>() / n;
    let delta = |k: i32| {
        pairs
            .iter()
            .filter(|&&(a, b)| f64::max(a / b, b / a) < 1.25f64.powi(k))
            .count() as f64
            / n
    };
    [
        mean(&|a, b| (a - b).abs() / b),
        mean(&|a, b| (a - b).powi(2)).sqrt(),
        mean(&|a, b| (a.log10() - b.log10()).abs()),
        mean(&|a, b| (a.ln() - b.ln()).powi(2)).sqrt(),
        delta(1),
        delta(2),
        delta(3),
    ]
}

fn metric_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut monotone = true;
    for _ in 0..100 {
        let n = rng.random_range(1..500);
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..12.0)).collect();
        let y: Vec<f64> = t.iter().map(|v| v * rng.random_range(0.4..2.5)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        mask[0] = true;
        let m: MetricsReport = compute_metrics(&y, &t, &mask).unwrap();
        let got = [m.abs_rel, m.rmse, m.log10, m.rmse_log, m.delta1, m.delta2, m.delta3];
        for (g, e) in got.iter().zip(brute_metrics(&y, &t, &mask)) {
            worst = worst.max((g - e).abs() / e.abs().max(1e-300));
        }
        monotone &= m.delta1 <= m.delta2 && m.delta2 <= m.delta3;
    }
    verdict(
        worst <= 1e-9 && monotone,
        format!("max relative deviation {worst:.1e} on 100 masked arrays, delta monotone: {monotone}"),
    )
}

fn snapshot(t: &Trainer<f32>, group: ParamGroup) -> Vec<u32> {
    t.model
        .params
        .group(group)
        .flat_map(|(_, a)| a.data().iter().map(|v| v.to_bits()))
        .collect()
}

fn freeze_alternation(train: &Dataset) -> Verdict {
    let cfg = TrainConfig::default();
    let mut t = Trainer::<f32>::new(cfg.clone(), train.header.vocabulary.len()).unwrap();
    let steps = 1000u64;
    t.total_steps = steps;
    let b = cfg.batch_size;
    let batches = train.len() / b;
    let (mut text, mut violations, mut decoder_moved) = (0u64, Vec::new(), 0u64);
    for s in 0..steps {
        let i = (s as usize % batches) * b;
        let batch: Vec<&Sample> = train.samples[i..i + b].iter().collect();
        let before = [ParamGroup::Text, ParamGroup::Sampler, ParamGroup::Decoder].map(|g| snapshot(&t, g));
        let out = t.train_step(&batch).unwrap();
        let after = [ParamGroup::Text, ParamGroup::Sampler, ParamGroup::Decoder].map(|g| snapshot(&t, g));
        if out.branch != schedule_select(s, cfg.p) {
            violations.push(format!("step {s} ran {:?}", out.branch));
        }
        match out.branch {
            Branch::Text => {
                text += 1;
                if before[1] != after[1] {
                    violations.push(format!("sampler changed on text step {s}"));
                }
            }
            Branch::Image => {
                if before[0] != after[0] {
                    violations.push(format!("text head changed on image step {s}"));
                }
            }
        }
        decoder_moved += (before[2] != after[2]) as u64;
    }
    let frac = decoder_moved as f64 / steps as f64;
    verdict(
        text == 10 && violations.is_empty() && frac >= 0.99,
        format!(
            "{text} caption steps of {steps}, decoder changed on {:.1}% of steps, {} freeze violations{}",
            100.0 * frac,
            violations.len(),
            violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default()
        ),
    )
}

struct Run {
    metrics: MetricsReport,
    best: Checkpoint,
    nonzero_features: u64,
    elapsed: Duration,
}

struct Benchmark {
    train: Dataset,
    val: Dataset,
    test: Dataset,
}

impl Benchmark {
    fn generate() -> Self {
        let catalog = default_catalog();
        let g = GeneratorConfig::default();
        Benchmark {
            train: generate_dataset(0, 4000, &catalog, &g).unwrap(),
            val: generate_dataset(1, 500, &catalog, &g).unwrap(),
            test: generate_dataset(2, 500, &catalog, &g).unwrap(),
        }
    }

    fn run(&self, cfg: &TrainConfig, label: &str) -> Run {
        let start = Instant::now();
        let (fit, metrics, nonzero_features) =
            train_and_evaluate(cfg, &self.train, &self.val, &self.test, |_| {}).unwrap();
        let elapsed = start.elapsed();
        eprintln!(
            "  {label}: best epoch {}, test AbsRel {:.4}, delta1 {:.4}, {:.0} s",
            fit.best_epoch,
            metrics.abs_rel,
            metrics.delta1,
            elapsed.as_secs_f64()
        );
        Run {
            metrics,
            best: fit.best,
            nonzero_features,
            elapsed,
        }
    }
}

fn scale_grounding(with: &Run, without: &Run) -> Verdict {
    let m = &with.metrics;
    let a = &without.metrics;
    verdict(
        m.abs_rel <= 0.08 && m.delta1 >= 0.90 && a.abs_rel >= 0.20,
        format!(
            "captioned AbsRel {:.4} (<= 0.08), delta1 {:.4} (>= 0.90); caption-ablated AbsRel {:.4} (>= 0.20), {} nonzero text features reached it",
            m.abs_rel, m.delta1, a.abs_rel, without.nonzero_features
        ),
    )
}

fn ratio_sweep(rows: &[(f64, &Run)]) -> Verdict {
    let at = |p: f64| rows.iter().find(|(q, _)| *q == p).unwrap().1.metrics.abs_rel;
    let (r0, r1, r50, r100) = (at(0.0), at(0.01), at(0.5), at(1.0));
    verdict(
        r50 - r1 >= 0.02 && r100 - r50 >= 0.02 && r1 <= r0 + 0.01,
        format!("AbsRel p=0: {r0:.4}, p=0.01: {r1:.4}, p=0.5: {r50:.4}, p=1: {r100:.4}"),
    )
}

fn generative_mode(best: &Checkpoint, vocab: &depthprior::textprior::Vocabulary) -> Verdict {
    let mut t = Trainer::<f32>::from_checkpoint(best).unwrap();
    let ids = |text: &str| vocab.tokenize(text);
    let samples = t
        .infer_text(&ids("a large room with a chair and a table"), 64, 5)
        .unwrap();
    let px = samples[0].len();
    let varying = (0..px)
        .filter(|&i| {
            let vals: Vec<f64> = samples.iter().map(|s| s.data()[i] as f64).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() > 0.0
        })
        .count();
    let frac = varying as f64 / px as f64;
    let mut mean_depth = |text: &str| {
        let maps = t.infer_text(&ids(text), 64, 6).unwrap();
        maps.iter()
            .flat_map(|m| m.data().iter().map(|&v| v as f64))
            .sum::<f64>()
            / (maps.len() * px) as f64
    };
    let large = mean_depth("a large room with a chair");
    let small = mean_depth("a small room with a chair");
    let ratio = large / small;
    verdict(
        frac >= 0.10 && (1.7..=2.3).contains(&ratio),
        format!(
            "{:.1}% of pixels vary over 64 samples; mean depth large {large:.3} m / small {small:.3} m = {ratio:.3}",
            100.0 * frac
        ),
    )
}

fn reproducibility(dir: &std::path::Path) -> Verdict {
    let catalog = default_catalog();
    let g = GeneratorConfig::default();
    let train = generate_dataset(10, 320, &catalog, &g).unwrap();
    let val = generate_dataset(11, 40, &catalog, &g).unwrap();
    let mut notes = Vec::new();

    let path = dir.join("train.wdph");
    write_dataset(&train, &path).unwrap();
    let back = read_dataset(&path).unwrap();
    let dataset_ok = back == train && back.to_bytes().unwrap() == std::fs::read(&path).unwrap();
    if !dataset_ok {
        notes.push("dataset round trip");
    }

    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let fit_logs = |cfg: &TrainConfig| {
        let mut t = Trainer::<f32>::new(cfg.clone(), train.header.vocabulary.len()).unwrap();
        let mut lines = Vec::new();
        let fit = t
            .fit(&train, &val, |e: &EpochLog| {
                lines.push(serde_json::to_string(e).unwrap())
            })
            .unwrap();
        (lines, fit.best)
    };
    let (first, best) = fit_logs(&cfg);
    let (second, _) = fit_logs(&cfg);
    let logs_ok = first == second;
    if !logs_ok {
        notes.push("epoch logs differ");
    }

    let ck_path = dir.join("best.wdck");
    best.save(&ck_path).unwrap();
    let loaded = Checkpoint::load(&ck_path).unwrap();
    let ckpt_ok = loaded.to_bytes().unwrap() == std::fs::read(&ck_path).unwrap() && loaded.params == best.params;
    if !ckpt_ok {
        notes.push("checkpoint round trip");
    }

    let echo = serde_json::to_string(&cfg).unwrap();
    let replay: TrainConfig = serde_json::from_str(&echo).unwrap();
    let (third, _) = fit_logs(&replay);
    let echo_ok = third == first;
    if !echo_ok {
        notes.push("config echo replay differs");
    }
    verdict(
        notes.is_empty(),
        if notes.is_empty() {
            "epoch logs bit-identical across seeds and config echo; dataset and checkpoint files round-trip".to_string()
        } else {
            format!("mismatch: {}", notes.join(", "))
        },
    )
}

fn main() {
    let mut failed = Vec::new();
    let timed = |f: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let v = f();
        (start.elapsed(), v)
    };

    let (t, v) = timed(&mut loss_oracles);
    report(1, "loss oracles", t, Duration::from_secs(1), v, &mut failed);
    let (t, v) = timed(&mut gradient_checks);
    report(2, "gradient checks", t, minutes(2), v, &mut failed);
    let (t, v) = timed(&mut metric_oracle);
    report(3, "metric oracle", t, Duration::from_secs(5), v, &mut failed);

    let bench = Benchmark::generate();
    let (t, v) = timed(&mut || freeze_alternation(&bench.train));
    report(4, "freeze and alternation", t, minutes(5), v, &mut failed);

    let dir = tempfile::tempdir().unwrap();
    let (t, v) = timed(&mut || reproducibility(dir.path()));
    report(8, "reproducibility and formats", t, minutes(10), v, &mut failed);

    let base = TrainConfig::default();
    let with = bench.run(&base, "p=0.01");
    let without = bench.run(
        &TrainConfig {
            drop_captions: true,
            ..base.clone()
        },
        "caption-ablated",
    );
    report(
        5,
        "scale grounding",
        with.elapsed + without.elapsed,
        minutes(15),
        scale_grounding(&with, &without),
        &mut failed,
    );

    let (t, v) = timed(&mut || generative_mode(&with.best, &bench.train.header.vocabulary));
    report(7, "generative mode", t, minutes(1), v, &mut failed);

    let others: Vec<(f64, Run)> = [0.0, 0.5, 1.0]
        .into_iter()
        .map(|p| (p, bench.run(&TrainConfig { p, ..base.clone() }, &format!("p={p}"))))
        .collect();
    let mut rows: Vec<(f64, &Run)> = vec![(0.01, &with)];
    rows.extend(others.iter().map(|(p, r)| (*p, r)));
    let elapsed = rows.iter().map(|(_, r)| r.elapsed).sum();
    report(
        6,
        "alternation ratio sweep",
        elapsed,
        minutes(45),
        ratio_sweep(&rows),
        &mut failed,
    );

    failed.sort_unstable();
    println!("{} of 8 criteria passed; failed: {failed:?}", 8 - failed.len());
}
