use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use amcbf::envs::{metrics_csv, EpisodeMetrics};
use amcbf::rl::{baseline_training_metrics, RlError, Trainer};
use serde::Serialize;

use crate::config::Resolved;
use crate::error::CliError;
use crate::manifest::{write_file, RunManifest};

pub struct TrainJob {
    pub config: Resolved,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub baseline: bool,
}

/// Artifact names for one seed, relative to the run directory.
pub struct SeedPaths {
    pub metrics: String,
    pub timing: String,
    pub checkpoint: String,
    pub baseline: String,
    pub abort: String,
}

impl SeedPaths {
    pub fn new(seed: u64) -> Self {
        let dir = format!("seed_{seed}");
        Self {
            metrics: format!("{dir}/metrics.csv"),
            timing: format!("{dir}/timing.csv"),
            checkpoint: format!("{dir}/checkpoint.json"),
            baseline: format!("{dir}/baseline_metrics.csv"),
            abort: format!("{dir}/abort.json"),
        }
    }
}

#[derive(Serialize)]
struct AbortDump<'a> {
    seed: u64,
    episode: usize,
    error: String,
    trainer: &'a amcbf::rl::Checkpoint,
}

struct SeedResult {
    seed: u64,
    rows: Vec<EpisodeMetrics>,
    baseline: Option<Vec<EpisodeMetrics>>,
}

fn timing_csv(seconds: &[f64]) -> String {
    let mut out = String::from("episode,wall_seconds\n");
    for (i, s) in seconds.iter().enumerate() {
        writeln!(out, "{i},{s:.6}").unwrap();
    }
    out
}

fn run_seed(job: &TrainJob, seed: u64) -> Result<SeedResult, CliError> {
    let paths = SeedPaths::new(seed);
    let out = &job.out;
    let mut trainer = Trainer::new(job.config.scenario.clone(), job.config.train.clone(), seed)?;
    let total = trainer.scenario.episodes;
    let mut rows = Vec::with_capacity(total);
    let mut seconds = Vec::with_capacity(total);
    while trainer.episode < total {
        let ep = trainer.episode;
        let started = Instant::now();
        match trainer.run_episode() {
            Ok(log) => {
                seconds.push(started.elapsed().as_secs_f64());
                let m = EpisodeMetrics::from_log(ep, &log);
                if ep % 25 == 0 || ep + 1 == total {
                    eprintln!(
                        "seed {seed} episode {ep}: return {:.2} reached {} h_min {:.4}",
                        m.return_value, m.reached, m.h_min
                    );
                }
                rows.push(m);
            }
            Err(e @ RlError::NonFinite { .. }) => {
                write_file(out, &paths.metrics, &metrics_csv(&rows))?;
                write_file(out, &paths.timing, &timing_csv(&seconds))?;
                let ck = trainer.checkpoint();
                let dump = AbortDump { seed, episode: ep, error: e.to_string(), trainer: &ck };
                let text = serde_json::to_string_pretty(&dump).expect("dump serializes");
                write_file(out, &paths.abort, &text)?;
                return Err(CliError::NumericAbort { message: e.to_string(), dump: out.join(&paths.abort) });
            }
            Err(e) => return Err(e.into()),
        }
    }
    write_file(out, &paths.metrics, &metrics_csv(&rows))?;
    write_file(out, &paths.timing, &timing_csv(&seconds))?;
    write_file(out, &paths.checkpoint, &trainer.checkpoint().to_json())?;
    let baseline = if job.baseline {
        let b = baseline_training_metrics(&trainer.scenario, seed)?;
        write_file(out, &paths.baseline, &metrics_csv(&b))?;
        Some(b)
    } else {
        None
    };
    Ok(SeedResult { seed, rows, baseline })
}

/// Median return over the final tenth of the episodes.
pub fn tail_median(rows: &[EpisodeMetrics]) -> f64 {
    let k = (rows.len() / 10).max(1);
    let mut tail: Vec<f64> = rows[rows.len() - k..].iter().map(|m| m.return_value).collect();
    tail.sort_by(f64::total_cmp);
    let n = tail.len();
    if n % 2 == 1 {
        tail[n / 2]
    } else {
        0.5 * (tail[n / 2 - 1] + tail[n / 2])
    }
}

fn planned_artifacts(manifest: &mut RunManifest, job: &TrainJob) {
    for &seed in &job.seeds {
        let p = SeedPaths::new(seed);
        manifest.add(p.metrics);
        manifest.add(p.timing);
        manifest.add(p.checkpoint);
        if job.baseline {
            manifest.add(p.baseline);
        }
    }
}

/// Trains every seed on its own thread and writes the run directory.
pub fn cmd_train(job: TrainJob) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(&job.out).map_err(CliError::io(&job.out))?;
    let mut manifest = RunManifest::new("train", job.config.clone(), job.seeds.clone());
    planned_artifacts(&mut manifest, &job);
    manifest.write(&job.out)?;
    if job.config.train.tau > 0.1 {
        eprintln!("note: soft-update rate tau = {} is far above the usual 0.001 to 0.01", job.config.train.tau);
    }

    let results: Vec<Result<SeedResult, CliError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = job.seeds.iter().map(|&seed| scope.spawn({
            let job = &job;
            move || run_seed(job, seed)
        })).collect();
        handles.into_iter().map(|h| h.join().expect("training worker panicked")).collect()
    });

    let mut first_error = None;
    for (r, &seed) in results.into_iter().zip(&job.seeds) {
        match r {
            Ok(res) => {
                let mut line = format!("seed {}: final-10% median return {:.3}", res.seed, tail_median(&res.rows));
                if let Some(b) = &res.baseline {
                    write!(line, " (baseline {:.3})", tail_median(b)).unwrap();
                }
                let reached = res.rows.iter().filter(|m| m.reached).count();
                write!(line, ", reached {reached}/{}", res.rows.len()).unwrap();
                println!("{line}");
            }
            Err(e) => {
                if matches!(e, CliError::NumericAbort { .. }) {
                    manifest.add(SeedPaths::new(seed).abort);
                }
                manifest.artifacts.retain(|a| !a.starts_with(&format!("seed_{seed}/")) || exists(&job.out, a));
                eprintln!("seed {seed}: {e}");
                first_error.get_or_insert(e);
            }
        }
    }
    manifest.finish(if first_error.is_some() { "failed" } else { "ok" });
    manifest.write(&job.out)?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(job.out),
    }
}

fn exists(dir: &Path, rel: &str) -> bool {
    dir.join(rel).exists()
}
