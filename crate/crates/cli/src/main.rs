//! `navstack` command-line entry point.
//!
//! Exit codes: 0 on success, 1 when an episode fails (simulator or planner
//! error) or training does not improve, 2 on usage or configuration errors.

mod manifest;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use navstack::eval::{aggregate, episode_seeds};
use navstack::exploration::candidates_csv;
use navstack::geometry::{Pose, Rect};
use navstack::policy::{build_observation, safety_heatmap, ObservationConfig, PolicyBundle};
use navstack::reward::Outcome;
use navstack::scenarios::{generate, SCENARIO_NAMES};
use navstack::stack::{
    fmt_f64, metrics_csv_row, run_episode_observed, EpisodeObserver, EpisodeResult,
    ScenarioSource, SelectionInfo, StackConfig, StackMode, TraceRecorder, METRICS_CSV_HEADER,
};
use navstack::trainer::{
    cotrain_fusion, default_fusion_mix, train_expert, ExpertProfile, TrainConfig,
};
use navstack::world::{ScenarioSpec, SimConfig, World};

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "navstack", version, about = "Hierarchical exploration and fused-expert navigation")]
struct Cli {
    /// Worker threads for episodes and training candidates.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run episodes through the stack; writes traces, metrics CSV and a manifest.
    Simulate(SimulateArgs),
    /// Run episodes and write per-episode metrics plus an aggregate summary.
    Evaluate(SimulateArgs),
    /// Train an expert or the fusion stage.
    Train(TrainArgs),
    /// Critic heatmap around a pose, as a PGM image.
    Heatmap(HeatmapArgs),
    /// Scored frontier candidates at every exploration selection, as CSV.
    FrontierDebug(FrontierArgs),
    /// Built-in scenario specs.
    Scenario {
        #[command(subcommand)]
        command: ScenarioCommand,
    },
}

#[derive(Args)]
struct Common {
    /// Built-in scenario name or path to a scenario JSON file.
    #[arg(long)]
    scenario: String,
    /// Policy bundle JSON, or "scripted" for the scripted experts.
    #[arg(long, default_value = "scripted")]
    bundle: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Safety weight of the exploration heuristic.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_enum, default_value_t = ModeArg::Full)]
    mode: ModeArg,
    /// Episode timeout in simulated seconds.
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 1)]
    episodes: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    LowerOnly,
    UpperWithScriptedLower,
}

impl From<ModeArg> for StackMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => StackMode::Full,
            ModeArg::LowerOnly => StackMode::LowerOnly,
            ModeArg::UpperWithScriptedLower => StackMode::UpperWithScriptedLower,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    ExpertGs,
    ExpertOa,
    Fusion,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(value_enum)]
    stage: Stage,
    /// Training config JSON; defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    generations: Option<usize>,
    /// Go-straight checkpoint (fusion stage).
    #[arg(long)]
    expert_gs: Option<PathBuf>,
    /// Obstacle-avoidance checkpoint (fusion stage).
    #[arg(long)]
    expert_oa: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    scenario: String,
    #[arg(long, default_value = "scripted")]
    bundle: String,
    /// Robot pose "x,y,theta"; defaults to the scenario start.
    #[arg(long, allow_hyphen_values = true)]
    pose: Option<String>,
    /// Robot-frame region "x0,y0,x1,y1".
    #[arg(long, default_value = "-3,-3,3,3", allow_hyphen_values = true)]
    region: String,
    #[arg(long, default_value_t = 0.25)]
    stride: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FrontierArgs {
    #[command(flatten)]
    common: Common,
    /// Control ticks to simulate.
    #[arg(long, default_value_t = 900)]
    steps: usize,
}

#[derive(Subcommand)]
enum ScenarioCommand {
    /// Write a generated scenario spec as JSON.
    Generate {
        #[arg(long)]
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// List built-in scenario names.
    List,
}

/// Errors that map to exit code 1 rather than 2.
#[derive(Debug)]
struct EpisodeFailure(String);

impl std::fmt::Display for EpisodeFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for EpisodeFailure {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NAVSTACK_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --jobs: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let episode = e.downcast_ref::<EpisodeFailure>().is_some()
                || matches!(
                    e.downcast_ref::<navstack::Error>(),
                    Some(navstack::Error::NoImprovement { .. })
                );
            ExitCode::from(if episode { 1 } else { 2 })
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Simulate(a) => cmd_simulate(a, false),
        Command::Evaluate(a) => cmd_simulate(a, true),
        Command::Train(a) => cmd_train(a),
        Command::Heatmap(a) => cmd_heatmap(a),
        Command::FrontierDebug(a) => cmd_frontier_debug(a),
        Command::Scenario { command } => match command {
            ScenarioCommand::Generate { name, seed, out } => {
                let spec = generate(&name, seed)?;
                write_file(&out, spec.to_json()?.as_bytes())?;
                Ok(())
            }
            ScenarioCommand::List => {
                for n in SCENARIO_NAMES {
                    println!("{n}");
                }
                Ok(())
            }
        },
    }
}

fn load_source(arg: &str) -> anyhow::Result<(ScenarioSource, Option<String>)> {
    if SCENARIO_NAMES.contains(&arg) {
        return Ok((ScenarioSource::named(arg), None));
    }
    let text = fs::read_to_string(arg)
        .with_context(|| format!("scenario '{arg}' is neither a built-in name nor a readable file"))?;
    let spec = ScenarioSpec::from_json(&text).with_context(|| format!("parsing {arg}"))?;
    Ok((ScenarioSource::Fixed(spec), Some(arg.to_string())))
}

fn load_bundle(arg: &str) -> anyhow::Result<(PolicyBundle, Option<String>)> {
    if arg == "scripted" {
        return Ok((PolicyBundle::scripted(), None));
    }
    let text = fs::read_to_string(arg).with_context(|| format!("cannot read bundle '{arg}'"))?;
    let bundle = PolicyBundle::from_json(&text).with_context(|| format!("parsing bundle {arg}"))?;
    Ok((bundle, Some(arg.to_string())))
}

fn stack_config(c: &Common) -> anyhow::Result<StackConfig> {
    let mut cfg = StackConfig {
        mode: c.mode.into(),
        ..StackConfig::default()
    };
    if let Some(g) = c.gamma {
        cfg.exploration.gamma = g;
    }
    if let Some(t) = c.timeout {
        cfg.timeout = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn command_line() -> String {
    std::env::args().skip(1).collect::<Vec<_>>().join(" ")
}

fn cmd_simulate(a: SimulateArgs, summary: bool) -> anyhow::Result<()> {
    let c = &a.common;
    let (source, scenario_path) = load_source(&c.scenario)?;
    let (bundle, bundle_path) = load_bundle(&c.bundle)?;
    let cfg = stack_config(c)?;
    let seeds = episode_seeds(c.seed, a.episodes);
    let specs = seeds
        .iter()
        .map(|&s| source.instantiate(s))
        .collect::<navstack::Result<Vec<_>>>()?;
    let runs: Vec<(EpisodeResult, String)> = specs
        .par_iter()
        .map(|spec| {
            let mut trace = TraceRecorder::default();
            let r = run_episode_observed(spec, &bundle, &cfg, &mut trace);
            (r, trace.lines)
        })
        .collect();

    let mut manifest = RunManifest::new(command_line(), &c.out);
    manifest.config_paths.extend(scenario_path);
    manifest.config_paths.extend(bundle_path);
    manifest.seeds = seeds;

    let mut csv = format!("{METRICS_CSV_HEADER}\n");
    for (i, (r, trace)) in runs.iter().enumerate() {
        csv.push_str(&metrics_csv_row(r));
        csv.push('\n');
        if !summary {
            manifest.write(&format!("trace-{i:03}.jsonl"), trace.as_bytes())?;
        }
    }
    manifest.write("metrics.csv", csv.as_bytes())?;
    if summary {
        let results: Vec<EpisodeResult> = runs.iter().map(|(r, _)| r.clone()).collect();
        let agg = aggregate(&results, c.seed);
        let json = serde_json::to_string_pretty(&agg)?;
        manifest.write("aggregate.json", json.as_bytes())?;
        println!("{json}");
    }
    manifest.finish()?;

    let failed: Vec<String> = runs
        .iter()
        .filter(|(r, _)| r.outcome == Outcome::Failed)
        .map(|(r, _)| format!("seed {}: {}", r.seed, r.error.as_deref().unwrap_or("failed")))
        .collect();
    if !failed.is_empty() {
        return Err(EpisodeFailure(format!("{} episode(s) failed: {}", failed.len(), failed.join("; "))).into());
    }
    Ok(())
}

fn load_expert(path: &Option<PathBuf>, flag: &str) -> anyhow::Result<navstack::policy::MlpParams> {
    let path = path
        .as_ref()
        .ok_or_else(|| anyhow!("the fusion stage needs --{flag} <checkpoint>"))?;
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let bundle = PolicyBundle::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
    match bundle.controller {
        navstack::policy::Controller::Single { expert } => Ok(expert),
        _ => bail!("{} is not a single-expert checkpoint", path.display()),
    }
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            let mut value: serde_json::Value = serde_json::from_str(&text)?;
            // fill missing fields from the defaults
            let mut full = serde_json::to_value(TrainConfig::default())?;
            if let (Some(obj), Some(dst)) = (value.as_object_mut(), full.as_object_mut()) {
                for (k, v) in obj.iter() {
                    dst.insert(k.clone(), v.clone());
                }
            }
            serde_json::from_value::<TrainConfig>(full).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(g) = a.generations {
        cfg.generations = g;
    }
    cfg.validate()?;

    let mut manifest = RunManifest::new(command_line(), &a.out);
    manifest.config_paths.extend(a.config.iter().map(|p| p.display().to_string()));
    manifest.seeds = vec![cfg.seed];
    let obs = ObservationConfig::default();
    match a.stage {
        Stage::ExpertGs | Stage::ExpertOa => {
            let profile = match a.stage {
                Stage::ExpertGs => ExpertProfile::GoStraight,
                _ => ExpertProfile::ObstacleAvoidance,
            };
            let out = train_expert(profile, &profile.default_scenarios(), &cfg)?;
            let bundle = PolicyBundle::single(obs, out.params);
            manifest.write("checkpoint.json", bundle.to_json()?.as_bytes())?;
            manifest.write("train_log.jsonl", out.log.to_jsonl().as_bytes())?;
        }
        Stage::Fusion => {
            let gs = load_expert(&a.expert_gs, "expert-gs")?;
            let oa = load_expert(&a.expert_oa, "expert-oa")?;
            manifest.config_paths.extend(a.expert_gs.iter().map(|p| p.display().to_string()));
            manifest.config_paths.extend(a.expert_oa.iter().map(|p| p.display().to_string()));
            let out = cotrain_fusion(&gs, &oa, &default_fusion_mix(), &cfg)?;
            manifest.write("checkpoint.json", out.bundle(obs).to_json()?.as_bytes())?;
            manifest.write("train_log.jsonl", out.log.to_jsonl().as_bytes())?;
            let mut loss = String::from("epoch,loss\n");
            for (i, l) in out.critic_loss.iter().enumerate() {
                let _ = writeln!(loss, "{i},{}", fmt_f64(*l));
            }
            manifest.write("critic_loss.csv", loss.as_bytes())?;
        }
    }
    manifest.finish()
}

fn parse_floats<const N: usize>(s: &str, what: &str) -> anyhow::Result<[f64; N]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("{what}: expected {N} comma-separated numbers"))?;
    v.try_into()
        .map_err(|_| anyhow!("{what}: expected {N} comma-separated numbers"))
}

fn cmd_heatmap(a: HeatmapArgs) -> anyhow::Result<()> {
    let (source, scenario_path) = load_source(&a.scenario)?;
    let (bundle, bundle_path) = load_bundle(&a.bundle)?;
    let [x0, y0, x1, y1] = parse_floats::<4>(&a.region, "--region")?;
    if !(x1 >= x0 && y1 >= y0 && a.stride > 0.0) {
        bail!("--region needs x0 <= x1, y0 <= y1 and a positive --stride");
    }
    let spec = source.instantiate(a.seed)?;
    let mut world = World::spawn(&spec, SimConfig::default())?;
    if let Some(p) = &a.pose {
        let [x, y, th] = parse_floats::<3>(p, "--pose")?;
        world.robot.pose = Pose::new(x, y, th);
    }
    let o = bundle.observation;
    let scan = world.raycast(o.beams, o.max_range);
    let base = build_observation(
        std::iter::once(scan.as_slice()),
        o.history,
        world.robot.pose,
        spec.goal,
        world.robot.velocity,
    );
    let map = safety_heatmap(|obs| bundle.value(obs), &base, Rect::new(x0, y0, x1, y1), a.stride);
    let mut manifest = RunManifest::new(command_line(), &a.out);
    manifest.config_paths.extend(scenario_path);
    manifest.config_paths.extend(bundle_path);
    manifest.seeds = vec![a.seed];
    manifest.write("heatmap.pgm", &map.to_pgm())?;
    println!("mean {}", fmt_f64(map.mean()));
    manifest.finish()
}

struct CandidateLog {
    gamma: f64,
    csv: String,
}

impl EpisodeObserver for CandidateLog {
    fn on_selection(&mut self, sel: &SelectionInfo<'_>) {
        for line in candidates_csv(sel.scored, self.gamma, false).lines() {
            let _ = writeln!(self.csv, "{},{line}", fmt_f64(sel.t));
        }
    }
}

fn cmd_frontier_debug(a: FrontierArgs) -> anyhow::Result<()> {
    let c = &a.common;
    let (source, scenario_path) = load_source(&c.scenario)?;
    let (bundle, bundle_path) = load_bundle(&c.bundle)?;
    let mut cfg = stack_config(c)?;
    if cfg.mode == StackMode::LowerOnly {
        bail!("frontier-debug needs the upper layer; use --mode full or upper-with-scripted-lower");
    }
    cfg.timeout = a.steps as f64 * cfg.dt();
    let spec = source.instantiate(c.seed)?;
    let mut log = CandidateLog {
        gamma: cfg.exploration.gamma,
        csv: String::from("t,cell_x,cell_y,d1,d2,d_h,v_h,score,selected\n"),
    };
    let r = run_episode_observed(&spec, &bundle, &cfg, &mut log);
    let mut manifest = RunManifest::new(command_line(), &c.out);
    manifest.config_paths.extend(scenario_path);
    manifest.config_paths.extend(bundle_path);
    manifest.seeds = vec![c.seed];
    manifest.write("candidates.csv", log.csv.as_bytes())?;
    manifest.finish()?;
    if r.outcome == Outcome::Failed {
        return Err(EpisodeFailure(r.error.unwrap_or_default()).into());
    }
    Ok(())
}
