//! Run configs and the `train`, `ablate`, `eval` and `figure` commands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use ippo::config::AlgoConfig;
use ippo::env::EnvConfig;
use ippo::metrics::{emit, read_curves, render_svg, CurveSet};
use ippo::trainer::{
    ablation_curves, run_ablation_suite, run_training, AblationSpec, EvalResult, Schedule, SeedOutcome, SeedRun,
    Trainer, Variant, VariantRuns, PARAMS_FILE,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Name of the effective-config echo written into every output directory.
pub const CONFIG_ECHO: &str = "config.toml";
pub const METRICS_DIR: &str = "metrics";

type Pick = fn(&EvalResult) -> f64;

/// Metrics recorded for every run, with the field of [`EvalResult`] each reads.
const METRICS: [(&str, Pick); 3] = [
    ("mean_return", |e| e.mean_return),
    ("win_rate", |e| e.win_rate),
    ("stag_rate", |e| e.stag_rate),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunBlock {
    pub seeds: Vec<u64>,
    pub iterations: u64,
    /// Evaluate every this many iterations.
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub out_dir: PathBuf,
    /// Variant trained by `train`.
    pub variant: Variant,
    /// Variants compared by `ablate`.
    pub variants: Vec<Variant>,
    /// Learning-rate multiplier of `iac_low_lr`.
    pub lr_scale: f64,
}

impl Default for RunBlock {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            iterations: 200,
            eval_every: 10,
            eval_episodes: 32,
            out_dir: PathBuf::from("runs"),
            variant: Variant::Ippo,
            variants: Variant::ALL.to_vec(),
            lr_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub algo: AlgoConfig,
    pub run: RunBlock,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.algo.validate()?;
        let r = &self.run;
        ensure!(!r.seeds.is_empty(), "invalid config `run.seeds`: need at least one seed");
        let mut seeds = r.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        ensure!(seeds.len() == r.seeds.len(), "invalid config `run.seeds`: seeds must be distinct");
        ensure!(r.iterations >= 1, "invalid config `run.iterations`: must be at least 1");
        ensure!(r.eval_every >= 1, "invalid config `run.eval_every`: must be at least 1");
        ensure!(r.eval_episodes >= 1, "invalid config `run.eval_episodes`: must be at least 1");
        ensure!(!r.variants.is_empty(), "invalid config `run.variants`: need at least one variant");
        ensure!(
            r.lr_scale.is_finite() && r.lr_scale > 0.0,
            "invalid config `run.lr_scale`: must be finite and > 0"
        );
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule { iterations: self.run.iterations, eval_every: self.run.eval_every, eval_episodes: self.run.eval_episodes }
    }

    fn spec(&self, variant: Variant) -> AblationSpec {
        AblationSpec { variant, lr_scale: self.run.lr_scale }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Parses and validates a TOML run config. Unknown keys are errors.
pub fn parse_str(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse_str(&text).with_context(|| format!("in config {}", path.display()))
}

/// Command-line overrides applied on top of a parsed config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
}

impl Overrides {
    pub fn apply(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        if let Some(out) = &self.out {
            cfg.run.out_dir = out.clone();
        }
        if let Some(seeds) = &self.seeds {
            cfg.run.seeds = seeds.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Creates `dir` for a fresh run. An existing non-empty directory is only
/// replaced when `force` is set.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let empty = dir.is_dir() && fs::read_dir(dir)?.next().is_none();
        if !empty {
            if !force {
                bail!("output directory {} already exists; pass --force to overwrite it", dir.display());
            }
            log::warn!("removing existing output directory {}", dir.display());
            if dir.is_dir() {
                fs::remove_dir_all(dir)?;
            } else {
                fs::remove_file(dir)?;
            }
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn echo_config(cfg: &RunConfig) -> Result<()> {
    let text = cfg.to_toml()?;
    log::info!("effective config:\n{text}");
    fs::write(cfg.run.out_dir.join(CONFIG_ECHO), text)?;
    Ok(())
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

fn emit_metrics(runs: &[VariantRuns], dir: &Path, env: &str) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (metric, pick) in METRICS {
        let curves = ablation_curves(runs, metric, pick);
        if !curves.is_empty() {
            written.extend(emit(&curves, dir, &format!("{env}: {metric}"))?);
        }
    }
    Ok(written)
}

fn failures(runs: &[VariantRuns]) -> Vec<String> {
    runs.iter()
        .flat_map(|v| {
            v.runs
                .iter()
                .filter_map(move |r| r.outcome.as_ref().err().map(|e| format!("{} seed {}: {e}", v.spec.variant.name(), r.seed)))
        })
        .collect()
}

/// Trains `run.variant` on every seed. Writes a resumable checkpoint per
/// seed under `seed_<s>/` and the learning curves under `metrics/`.
pub fn command_train(cfg: &RunConfig, force: bool) -> Result<()> {
    let out = &cfg.run.out_dir;
    prepare_out_dir(out, force)?;
    echo_config(cfg)?;
    let spec = cfg.spec(cfg.run.variant);
    let algo = spec.apply(&cfg.algo);
    let sched = cfg.schedule();
    let runs: Vec<SeedRun> = cfg
        .run
        .seeds
        .par_iter()
        .map(|&seed| {
            let outcome = (|| {
                let mut t = Trainer::new(cfg.env.clone(), algo.clone(), seed)?;
                t.crash_dir = Some(seed_dir(out, seed).join("crash"));
                let curve = run_training(&mut t, &sched, seed)?;
                t.save_checkpoint(&seed_dir(out, seed))?;
                Ok::<_, ippo::Error>(SeedOutcome { curve, params: t.state.params })
            })()
            .map_err(|e| {
                log::error!("seed {seed} failed: {e}");
                e.to_string()
            });
            SeedRun { seed, algo: algo.clone(), outcome }
        })
        .collect();
    let runs = vec![VariantRuns { spec, runs }];
    for p in emit_metrics(&runs, &out.join(METRICS_DIR), cfg.env.name())? {
        log::info!("wrote {}", p.display());
    }
    let failed = failures(&runs);
    ensure!(failed.is_empty(), "{} run(s) failed: {}", failed.len(), failed.join("; "));
    Ok(())
}

/// Trains every variant in `run.variants` on every seed. Final parameters
/// go to `<variant>/seed_<s>/params.bin`, curves to `metrics/`.
pub fn command_ablate(cfg: &RunConfig, force: bool) -> Result<()> {
    let out = &cfg.run.out_dir;
    prepare_out_dir(out, force)?;
    echo_config(cfg)?;
    let specs: Vec<AblationSpec> = cfg.run.variants.iter().map(|&v| cfg.spec(v)).collect();
    let runs = run_ablation_suite(&cfg.env, &cfg.algo, &specs, &cfg.run.seeds, &cfg.schedule())?;
    for v in &runs {
        for r in &v.runs {
            if let Ok(o) = &r.outcome {
                let dir = seed_dir(&out.join(v.spec.variant.name()), r.seed);
                fs::create_dir_all(&dir)?;
                o.params.save(std::io::BufWriter::new(fs::File::create(dir.join(PARAMS_FILE))?))?;
            }
        }
    }
    for p in emit_metrics(&runs, &out.join(METRICS_DIR), cfg.env.name())? {
        log::info!("wrote {}", p.display());
    }
    let failed = failures(&runs);
    ensure!(failed.is_empty(), "{} run(s) failed: {}", failed.len(), failed.join("; "));
    Ok(())
}

/// Greedy evaluation of the checkpoints written by `train`.
pub fn command_eval(cfg: &RunConfig) -> Result<Vec<(u64, EvalResult)>> {
    let out = &cfg.run.out_dir;
    let mut results = Vec::new();
    for &seed in &cfg.run.seeds {
        let dir = seed_dir(out, seed);
        let t = Trainer::resume(&dir, cfg.env.clone())
            .with_context(|| format!("loading checkpoint {}", dir.display()))?;
        let e = t.evaluate(cfg.run.eval_episodes, seed)?;
        println!(
            "seed {seed} iteration {}: mean_return {:.4} win_rate {:.4} stag_rate {:.4} over {} episodes",
            t.state.iteration, e.mean_return, e.win_rate, e.stag_rate, e.episodes
        );
        results.push((seed, e));
    }
    Ok(results)
}

/// Re-renders one plot per directory and metric from the CSVs under `dir`.
pub fn command_figure(dir: &Path) -> Result<Vec<PathBuf>> {
    let groups = read_curves(dir)?;
    if groups.is_empty() {
        bail!("no metrics found under {}", dir.display());
    }
    let mut written = Vec::new();
    for (parent, sets) in groups {
        let metric = sets[0].metric.clone();
        let title = figure_title(&parent, dir, &sets);
        let path = parent.join(format!("{metric}.svg"));
        fs::write(&path, render_svg(&sets, &title)?)?;
        println!("{}", path.display());
        written.push(path);
    }
    Ok(written)
}

fn figure_title(parent: &Path, root: &Path, sets: &[CurveSet]) -> String {
    let rel = parent.strip_prefix(root).unwrap_or(parent).display().to_string();
    let labels: Vec<&str> = sets.iter().map(|s| s.label.as_str()).collect();
    if rel.is_empty() {
        format!("{} ({})", sets[0].metric, labels.join(", "))
    } else {
        format!("{rel}: {} ({})", sets[0].metric, labels.join(", "))
    }
}
