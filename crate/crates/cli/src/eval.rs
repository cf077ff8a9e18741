use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use amcbf::envs::{baseline_rollout, EpisodeLog, EpisodeMetrics};
use amcbf::rl::{evaluate, evaluation_task, Checkpoint};
use serde::Serialize;

use crate::config::Resolved;
use crate::error::CliError;
use crate::manifest::{write_file, RunManifest};

pub struct EvalJob {
    pub checkpoint: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub rollouts: usize,
    pub steps: Option<usize>,
    pub baseline: bool,
    pub export_kappa: bool,
}

/// Grid used by `--export-kappa`.
pub const KAPPA_GRID: (f64, f64, usize) = (-2.0, 2.0, 401);

#[derive(Debug, Serialize)]
struct Summary {
    rollouts: usize,
    mean_return: f64,
    reach_rate: f64,
    min_h: f64,
    runs: Vec<Run>,
}

#[derive(Debug, Serialize)]
struct Run {
    seed: u64,
    #[serde(flatten)]
    metrics: EpisodeMetrics,
}

#[derive(Debug, Serialize)]
struct Report {
    checkpoint: String,
    trained_episodes: usize,
    steps: usize,
    policy: Summary,
    baseline: Option<Summary>,
}

fn summarize(runs: Vec<Run>) -> Summary {
    let n = runs.len().max(1) as f64;
    Summary {
        rollouts: runs.len(),
        mean_return: runs.iter().map(|r| r.metrics.return_value).sum::<f64>() / n,
        reach_rate: runs.iter().filter(|r| r.metrics.reached).count() as f64 / n,
        min_h: runs.iter().map(|r| r.metrics.h_min).fold(f64::INFINITY, f64::min),
        runs,
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let load = |message: String| CliError::Load { path: path.to_path_buf(), message };
    let text = std::fs::read_to_string(path).map_err(|e| load(e.to_string()))?;
    Checkpoint::from_json(&text).map_err(|e| load(e.to_string()))
}

pub fn kappa_csv(ck: &Checkpoint) -> String {
    let (lo, hi, n) = KAPPA_GRID;
    let learned = ck.agent.class_k();
    let alpha = ck.scenario.baseline_alpha;
    let mut out = String::from("z,kappa,linear\n");
    for i in 0..n {
        let z = lo + (hi - lo) * i as f64 / (n - 1) as f64;
        writeln!(out, "{z},{},{}", learned.eval(z), alpha * z).unwrap();
    }
    out
}

/// Noise-free rollouts on the evaluation tasks of consecutive seeds.
pub fn cmd_eval(job: EvalJob) -> Result<PathBuf, CliError> {
    let ck = load_checkpoint(&job.checkpoint)?;
    let out = job.out.clone().unwrap_or_else(|| {
        job.checkpoint.parent().map(|p| p.join("eval")).unwrap_or_else(|| PathBuf::from("eval"))
    });
    if job.rollouts == 0 {
        return Err(CliError::Usage("--rollouts must be positive".into()));
    }
    std::fs::create_dir_all(&out).map_err(CliError::io(&out))?;
    let first = job.seed.unwrap_or(ck.seed);
    let seeds: Vec<u64> = (0..job.rollouts as u64).map(|i| first + i).collect();
    let steps = job.steps.unwrap_or(ck.scenario.steps);
    let mut scenario = ck.scenario.clone();
    scenario.steps = steps;

    let config = Resolved { scenario: ck.scenario.clone(), train: ck.config.clone() };
    let mut manifest = RunManifest::new("eval", config, seeds.clone());
    for &s in &seeds {
        manifest.add(format!("trajectory_seed{s}.csv"));
        if job.baseline {
            manifest.add(format!("baseline_trajectory_seed{s}.csv"));
        }
    }
    manifest.add("summary.json");
    if job.export_kappa {
        manifest.add("kappa.csv");
    }
    manifest.write(&out)?;

    let mut runs = Vec::new();
    let mut base_runs = Vec::new();
    let record = |log: &EpisodeLog, seed: u64| Run { seed, metrics: EpisodeMetrics::from_log(0, log) };
    for &seed in &seeds {
        let task = evaluation_task(&scenario, seed)?;
        let log = evaluate(&ck.agent, &scenario, &task, steps)?;
        write_file(&out, &format!("trajectory_seed{seed}.csv"), &log.trajectory_csv(&scenario))?;
        runs.push(record(&log, seed));
        if job.baseline {
            let b = baseline_rollout(&task, &scenario)?;
            write_file(&out, &format!("baseline_trajectory_seed{seed}.csv"), &b.trajectory_csv(&scenario))?;
            base_runs.push(record(&b, seed));
        }
    }
    let report = Report {
        checkpoint: job.checkpoint.display().to_string(),
        trained_episodes: ck.episode,
        steps,
        policy: summarize(runs),
        baseline: job.baseline.then(|| summarize(base_runs)),
    };
    println!(
        "policy: mean return {:.3}, reach rate {:.2}, min h {:.4}",
        report.policy.mean_return, report.policy.reach_rate, report.policy.min_h
    );
    if let Some(b) = &report.baseline {
        println!("baseline: mean return {:.3}, reach rate {:.2}, min h {:.4}", b.mean_return, b.reach_rate, b.min_h);
    }
    write_file(&out, "summary.json", &serde_json::to_string_pretty(&report).expect("summary serializes"))?;
    if job.export_kappa {
        write_file(&out, "kappa.csv", &kappa_csv(&ck))?;
    }
    manifest.finish("ok");
    manifest.write(&out)?;
    Ok(out)
}
