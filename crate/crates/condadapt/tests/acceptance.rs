//! End-to-end acceptance: one pass/fail line per criterion.
//!
//! Runs the gradient, loss and metric suites, the container checks, and two
//! complete default-configuration pipelines in temporary directories.
//! Runs without the libtest harness so the criterion lines always print.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use condadapt::container::{decode, encode};
use condadapt::pipeline::{AdaptersReport, FileEntry, GanReport, Metrics, OnlineReport, TasksReport, ADAPTER, NO_ADAPTER};
use condadapt::{ContainerError, Pipeline};
use condadapt_core::config::PipelineConfig;
use condadapt_core::orchestrator::Novelty;
use condadapt_core::world::REFERENCE_ID;
use condadapt_core::{ParamSet, Rng, Tensor};
use serde::de::DeserializeOwned;
use serde_json::json;

const GRADIENT_TOLERANCE: f64 = 1e-3;
const GRADIENT_BUDGET: Duration = Duration::from_secs(60);
const MIN_MEAN_MIOU_GAIN: f64 = 0.10;
const MAX_CONDITION_MIOU_LOSS: f64 = 0.02;
const PIPELINE_BUDGET: Duration = Duration::from_secs(30 * 60);
const MIN_MEAN_AUC_GAIN: f64 = 0.05;
const MIN_CLASSIFIER_ACCURACY: f64 = 0.90;
const MIN_ONLINE_MIOU_GAIN: f64 = 0.05;
const MAX_REFERENCE_MIOU_CHANGE: f64 = 0.03;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn read<T: DeserializeOwned>(root: &Path, rel: &str) -> T {
    let path = root.join(rel);
    let bytes = fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_slice(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst: (f64, &str) = (0.0, "");
    let suite = common::gradcheck::suite();
    for (name, make) in &suite {
        let e = common::gradcheck::worst_error(make.as_ref());
        if e >= worst.0 {
            worst = (e, name);
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst.0 < GRADIENT_TOLERANCE && elapsed < GRADIENT_BUDGET && common::gradcheck::INSTANCES >= 10,
        format!(
            "{} operators x {} instances, worst relative error {:.2e} ({}), {:.1}s",
            suite.len(),
            common::gradcheck::INSTANCES,
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    )
}

fn failures_outcome(failures: Vec<String>, what: &str) -> Outcome {
    if failures.is_empty() {
        outcome(true, format!("all {what} hold"))
    } else {
        outcome(false, failures.join("; "))
    }
}

fn persistence() -> Outcome {
    let mut problems = Vec::new();
    for seed in 0..20u64 {
        let mut rng = Rng::new(seed);
        let mut p = ParamSet::new();
        for i in 0..1 + rng.below(5) {
            let shape: Vec<usize> = (0..1 + rng.below(3)).map(|_| 1 + rng.below(4)).collect();
            let n = shape.iter().product();
            let data = (0..n).map(|_| f32::from_bits(rng.next_u64() as u32)).collect();
            p.insert(format!("t{i}"), Tensor::new(&shape, data).unwrap());
        }
        let bytes = encode(&p, &json!({ "seed": seed }));
        match decode(&bytes) {
            Ok((q, _)) => {
                let same = p.len() == q.len()
                    && p.iter().zip(q.iter()).all(|((a, x), (b, y))| {
                        a == b
                            && x.shape() == y.shape()
                            && x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits())
                    });
                if !same {
                    problems.push(format!("seed {seed}: round trip not bit-exact"));
                }
            }
            Err(e) => problems.push(format!("seed {seed}: {e}")),
        }
        let last = bytes.len() - 1;
        let mut corrupt = bytes.clone();
        corrupt[last] ^= 0x80;
        if !matches!(decode(&corrupt), Err(ContainerError::HashMismatch { .. })) {
            problems.push(format!("seed {seed}: corrupted blob accepted"));
        }
        let mut magic = bytes.clone();
        magic[1] = b'x';
        if !matches!(decode(&magic), Err(ContainerError::BadMagic(_))) {
            problems.push(format!("seed {seed}: wrong magic accepted"));
        }
    }
    if problems.is_empty() {
        outcome(true, "20 random round trips bit-exact; corrupted blobs and bad magic rejected".into())
    } else {
        outcome(false, problems.join("; "))
    }
}

fn run_pipeline(dir: &Path) -> Duration {
    let config = PipelineConfig {
        output_dir: dir.to_string_lossy().into_owned(),
        ..PipelineConfig::default()
    };
    let start = Instant::now();
    Pipeline::new(config).unwrap().run_all().unwrap();
    start.elapsed()
}

fn frozen_tasks(root: &Path, initial: &[String]) -> Outcome {
    let tasks: TasksReport = read(root, "reports/tasks.json");
    let mut seen = Vec::new();
    for name in initial {
        let g: GanReport = read(root, &format!("reports/gan/{name}.json"));
        seen.push((format!("gan {name}"), g.task_hashes_before, g.task_hashes_after));
    }
    let a: AdaptersReport = read(root, "reports/adapters/summary.json");
    seen.push(("adapters".into(), a.task_hashes_before, a.task_hashes_after));
    let o: OnlineReport = read(root, "reports/online.json");
    seen.push(("online".into(), o.task_hashes_before, o.task_hashes_after));
    let changed: Vec<String> = seen
        .iter()
        .filter(|(_, b, a)| *b != tasks.hashes || *a != tasks.hashes)
        .map(|(n, _, _)| n.clone())
        .collect();
    if changed.is_empty() {
        outcome(true, format!("segmentation {} / retrieval {} unchanged across {} stages", &tasks.hashes[0][..12], &tasks.hashes[1][..12], seen.len()))
    } else {
        outcome(false, format!("hash changed during: {}", changed.join(", ")))
    }
}

fn adapter_gain(m: &Metrics, initial: &[String], elapsed: Duration) -> Outcome {
    let mean = m.mean_initial[ADAPTER].miou - m.mean_initial[NO_ADAPTER].miou;
    let per: Vec<(String, f64)> = initial
        .iter()
        .map(|c| (c.clone(), m.conditions[c][ADAPTER].miou - m.conditions[c][NO_ADAPTER].miou))
        .collect();
    let worst = per.iter().map(|(_, g)| *g).fold(f64::INFINITY, f64::min);
    outcome(
        mean >= MIN_MEAN_MIOU_GAIN && worst >= -MAX_CONDITION_MIOU_LOSS && elapsed <= PIPELINE_BUDGET,
        format!(
            "mean mIOU {:.4} -> {:.4} (gain {mean:+.4}); per condition {}; pipeline {:.1} min",
            m.mean_initial[NO_ADAPTER].miou,
            m.mean_initial[ADAPTER].miou,
            per.iter().map(|(c, g)| format!("{c} {g:+.4}")).collect::<Vec<_>>().join(", "),
            elapsed.as_secs_f64() / 60.0
        ),
    )
}

fn retrieval_gain(m: &Metrics) -> Outcome {
    let (raw, adapted) = (m.mean_initial[NO_ADAPTER].auc, m.mean_initial[ADAPTER].auc);
    outcome(
        adapted - raw >= MIN_MEAN_AUC_GAIN,
        format!("mean AUC {raw:.4} -> {adapted:.4} (gain {:+.4})", adapted - raw),
    )
}

fn online_episode(o: &OnlineReport) -> Outcome {
    let novel = o.first_verdict.is_some_and(|v| v.is_novel());
    let reference_known = matches!(o.reference_probe, Novelty::Known { id: REFERENCE_ID, .. });
    let gain = o.adapted.map(|a| a.miou - o.raw.miou);
    let known_after = !o.verdict_after.is_novel();
    let grew = o.records_after == o.records_before + 1;
    let seeds = o.seeds_before == o.seeds_after;
    outcome(
        novel && reference_known && gain.is_some_and(|g| g >= MIN_ONLINE_MIOU_GAIN) && known_after && grew && seeds,
        format!(
            "{}: first verdict {:?}, reference probe {:?}, mIOU {:.4} -> {}, verdict after {:?}, records {} -> {}, seeds unchanged {seeds}",
            o.condition,
            o.first_verdict,
            o.reference_probe,
            o.raw.miou,
            o.adapted.map_or("none".into(), |a| format!("{:.4}", a.miou)),
            o.verdict_after,
            o.records_before,
            o.records_after
        ),
    )
}

fn reference_transparency(m: &Metrics) -> Outcome {
    let r = &m.conditions["reference"];
    let delta = r[ADAPTER].miou - r[NO_ADAPTER].miou;
    outcome(
        delta.abs() < MAX_REFERENCE_MIOU_CHANGE,
        format!("reference mIOU {:.4} -> {:.4} with identity adapter ({delta:+.4})", r[NO_ADAPTER].miou, r[ADAPTER].miou),
    )
}

#[derive(serde::Deserialize)]
struct Manifest {
    files: Vec<FileEntry>,
}

/// Path and digest of every artifact except the configuration, which records
/// its own output directory.
fn digests(root: &Path) -> Vec<FileEntry> {
    read::<Manifest>(root, "manifest.json").files.into_iter().filter(|e| e.path != "config.json").collect()
}

fn determinism(a: &Path, b: &Path) -> Outcome {
    let files = ["reports/metrics.json", "reports/online.json", "reports/summary.json"];
    let mut differing: Vec<String> = files
        .iter()
        .filter(|f| fs::read(a.join(f)).ok() != fs::read(b.join(f)).ok())
        .map(|f| f.to_string())
        .collect();
    let (da, db) = (digests(a), digests(b));
    differing.extend(da.iter().filter(|e| !db.contains(e)).map(|e| e.path.clone()));
    if differing.is_empty() {
        outcome(true, format!("{} and all {} artifact digests identical across two runs", files.join(", "), da.len()))
    } else {
        outcome(false, format!("differ: {}", differing.join(", ")))
    }
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradient suite", gradient_suite()),
        (2, "loss identities", failures_outcome(common::identities::loss_identity_failures(), "closed-form loss values")),
        (3, "metric oracles", failures_outcome(common::identities::metric_oracle_failures(), "mIOU/PR/AUC oracle matches")),
        (10, "persistence", persistence()),
    ];

    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let elapsed = run_pipeline(first.path());
    run_pipeline(second.path());
    let root = first.path();

    let (initial, _) = PipelineConfig::default().conditions().unwrap();
    let initial: Vec<String> = initial.into_iter().map(|c| c.name).collect();
    let metrics: Metrics = read(root, "reports/metrics.json");
    let online: OnlineReport = read(root, "reports/online.json");
    results.push((4, "frozen-task immutability", frozen_tasks(root, &initial)));
    results.push((5, "adapter mIOU gain", adapter_gain(&metrics, &initial, elapsed)));
    results.push((6, "adapter retrieval gain", retrieval_gain(&metrics)));
    results.push((
        7,
        "classifier accuracy",
        outcome(
            metrics.classifier_accuracy >= MIN_CLASSIFIER_ACCURACY,
            format!("accuracy {:.4} on real test frames of known conditions", metrics.classifier_accuracy),
        ),
    ));
    results.push((8, "online learning episode", online_episode(&online)));
    results.push((9, "reference transparency", reference_transparency(&metrics)));
    results.push((11, "determinism", determinism(first.path(), second.path())));
    results.sort_by_key(|(n, _, _)| *n);

    for (n, name, o) in &results {
        println!("criterion {n:>2} {:<4} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<u32> = results.iter().filter(|(_, _, o)| !o.pass).map(|(n, _, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", results.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
