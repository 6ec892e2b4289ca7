//! Command-line interface: synthesis, tokenization, training, rollout,
//! evaluation, and map inspection.
//!
//! Configuration precedence: flags > config file > built-in defaults.
//! Exit codes: 0 success, 2 usage, 3 validation, 4 runtime/numeric.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use scenestreamer_core::map_codec::{segment_polylines, MapSegment};
use scenestreamer_core::model::Model;
use scenestreamer_core::rollout::{rollout, Decision, RolloutConfig, RolloutMode};
use scenestreamer_core::scenario::{synth_scenario, ScenarioDescription, Template};
use scenestreamer_core::sequence::{build_sequence, BuildOptions, SequenceMode, TokenSequence};
use scenestreamer_core::train::Trainer;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{load_config_file, parse_config_text, RunConfig};
use crate::error::{AppError, AppResult};
use crate::eval::{evaluate, Protocol};
use crate::format::{load_scenario, save_scenario};
use crate::plot::save_svg;
use crate::tokens::write_token_jsonl;

#[derive(Parser)]
#[command(
    name = "scenestreamer",
    about = "Autoregressive traffic scenario generation pipeline",
    long_about = "Config precedence: flags > --config file > built-in defaults.\n\
                  Exit codes: 0 success, 2 usage, 3 validation, 4 runtime/numeric."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args)]
pub struct ConfigArgs {
    /// Key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Inline config override, repeatable (e.g. --set d_model=64).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> AppResult<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply(&load_config_file(path)?)?;
        }
        let mut overrides = String::new();
        for s in &self.sets {
            overrides.push_str(s);
            overrides.push('\n');
        }
        cfg.apply(&parse_config_text(&overrides)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate synthetic scenarios.
    Synth {
        /// straight | intersection | curve
        #[arg(long, default_value = "straight")]
        template: String,
        /// Number of scenario files.
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Agents per scenario.
        #[arg(long, default_value_t = 2)]
        agents: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert scenarios to token-stream JSONL.
    Tokenize {
        /// Scenario file or directory of .json scenarios.
        #[arg(long)]
        input: PathBuf,
        /// pretrain | full
        #[arg(long, default_value = "full")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the model on a scenario directory.
    Train {
        /// Scenario directory.
        #[arg(long)]
        data: PathBuf,
        /// pretrain | finetune
        #[arg(long, default_value = "pretrain")]
        stage: String,
        /// Optimization steps to run in this invocation.
        #[arg(long, default_value_t = 100)]
        steps: u64,
        /// Sequences per optimization step.
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// Model init seed (fresh runs only).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Allow finetune without a pretrain checkpoint.
        #[arg(long, default_value_t = false)]
        allow_fresh: bool,
        /// Also write a checkpoint every N steps (0 = only at the end).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: u64,
        /// Loss-curve CSV path.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the closed-loop engine from a checkpoint.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source scenario file.
        #[arg(long)]
        scenario: PathBuf,
        /// motion_prediction | full_generation | densification | closed_loop
        #[arg(long, default_value = "full_generation")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Steps to simulate (default: the scenario's length).
        #[arg(long)]
        horizon: Option<usize>,
        /// Densification population target.
        #[arg(long)]
        target: Option<usize>,
        /// Injection retries before giving up.
        #[arg(long)]
        retries: Option<usize>,
        /// Off-map retirement margin in meters.
        #[arg(long)]
        retire_distance: Option<f64>,
        /// Also write an SVG trajectory plot.
        #[arg(long, default_value_t = false)]
        plot: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Compare rollouts against ground truth.
    Eval {
        /// Prediction directory; repeat for K rollout sets.
        #[arg(long, required = true)]
        pred: Vec<PathBuf>,
        /// Ground-truth scenario file or directory.
        #[arg(long)]
        gt: PathBuf,
        /// strict | relaxed
        #[arg(long, default_value = "relaxed")]
        protocol: String,
        /// Report path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a scenario's map segmentation.
    InspectMap {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> AppResult<()> {
    match cli.command {
        Command::Synth { template, count, agents, seed, out } => {
            cmd_synth(&template, count, agents, seed, &out)
        }
        Command::Tokenize { input, mode, out, config } => {
            cmd_tokenize(&input, &mode, &out, &config)
        }
        Command::Train {
            data,
            stage,
            steps,
            batch,
            seed,
            out,
            resume,
            allow_fresh,
            checkpoint_every,
            log,
            config,
        } => cmd_train(TrainArgs {
            data,
            stage,
            steps,
            batch,
            seed,
            out,
            resume,
            allow_fresh,
            checkpoint_every,
            log,
            config,
        }),
        Command::Rollout {
            checkpoint,
            scenario,
            mode,
            seed,
            out,
            horizon,
            target,
            retries,
            retire_distance,
            plot,
            config,
        } => cmd_rollout(RolloutArgs {
            checkpoint,
            scenario,
            mode,
            seed,
            out,
            horizon,
            target,
            retries,
            retire_distance,
            plot,
            config,
        }),
        Command::Eval { pred, gt, protocol, out } => cmd_eval(&pred, &gt, &protocol, out.as_deref()),
        Command::InspectMap { scenario, out } => cmd_inspect_map(&scenario, out.as_deref()),
    }
}

fn ensure_dir(path: &Path) -> AppResult<()> {
    fs::create_dir_all(path)
        .map_err(|e| AppError::Runtime(format!("{}: {e}", path.display())))
}

/// Scenario files in a directory (or the single file itself), sorted by name
/// so every command is deterministic.
fn scenario_paths(input: &Path) -> AppResult<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| AppError::Runtime(format!("{}: {e}", input.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(AppError::Validation(format!(
            "{}: no scenario .json files",
            input.display()
        )));
    }
    Ok(paths)
}

fn load_segments(s: &ScenarioDescription) -> AppResult<Vec<MapSegment>> {
    let (cx, cy) = s.map_bbox_centroid();
    Ok(segment_polylines(s, cx, cy)?)
}

fn cmd_synth(template: &str, count: usize, agents: usize, seed: u64, out: &Path) -> AppResult<()> {
    let template = Template::from_name(template)
        .ok_or_else(|| AppError::Usage(format!("unknown template {template:?}")))?;
    ensure_dir(out)?;
    for i in 0..count {
        let s = synth_scenario(template, agents, seed + i as u64)?;
        let path = out.join(format!("{}.json", s.scenario_id));
        save_scenario(&s, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn parse_mode(mode: &str) -> AppResult<SequenceMode> {
    match mode {
        "pretrain" => Ok(SequenceMode::Pretrain),
        "full" => Ok(SequenceMode::Full),
        _ => Err(AppError::Usage(format!("unknown mode {mode:?}"))),
    }
}

fn cmd_tokenize(input: &Path, mode: &str, out: &Path, config: &ConfigArgs) -> AppResult<()> {
    let mode = parse_mode(mode)?;
    let cfg = config.resolve()?;
    ensure_dir(out)?;
    for path in scenario_paths(input)? {
        let s = load_scenario(&path)
            .map_err(|e| AppError::Validation(format!("scenario {}: {e}", path.display())))?;
        let segments = load_segments(&s)?;
        let opts = BuildOptions { max_agents: cfg.model.max_agents, ranges: cfg.ranges };
        let seq = build_sequence(&s, &segments, mode, &opts)?;
        let dest = out.join(format!("{}.tokens.jsonl", s.scenario_id));
        write_token_jsonl(&seq, &dest)?;
        println!("wrote {} ({} tokens)", dest.display(), seq.len());
    }
    Ok(())
}

struct TrainArgs {
    data: PathBuf,
    stage: String,
    steps: u64,
    batch: usize,
    seed: u64,
    out: PathBuf,
    resume: Option<PathBuf>,
    allow_fresh: bool,
    checkpoint_every: u64,
    log: Option<PathBuf>,
    config: ConfigArgs,
}

fn cmd_train(a: TrainArgs) -> AppResult<()> {
    let mode = match a.stage.as_str() {
        "pretrain" => SequenceMode::Pretrain,
        "finetune" => SequenceMode::Full,
        other => return Err(AppError::Usage(format!("unknown stage {other:?}"))),
    };
    if a.stage == "finetune" && a.resume.is_none() && !a.allow_fresh {
        return Err(AppError::Usage(
            "finetune needs --resume with a pretrain checkpoint (or --allow-fresh)".to_string(),
        ));
    }
    if a.batch == 0 {
        return Err(AppError::Usage("--batch must be at least 1".to_string()));
    }
    let cfg = a.config.resolve()?;

    // dataset: sequences plus their segments, fixed order
    let mut data: Vec<(TokenSequence, Vec<MapSegment>)> = Vec::new();
    for path in scenario_paths(&a.data)? {
        let s = load_scenario(&path)?;
        let segments = load_segments(&s)?;
        let opts = BuildOptions { max_agents: cfg.model.max_agents, ranges: cfg.ranges };
        let seq = build_sequence(&s, &segments, mode, &opts)?;
        data.push((seq, segments));
    }

    let mut tr = match &a.resume {
        Some(path) => {
            let tr = load_checkpoint(path)?;
            if tr.model.cfg != cfg.model {
                return Err(AppError::Validation(format!(
                    "{}: checkpoint model config differs from the requested config",
                    path.display()
                )));
            }
            tr
        }
        None => Trainer::new(Model::new(cfg.model, a.seed)?, cfg.train)?,
    };

    let mut log_file = match &a.log {
        Some(path) => {
            let fresh = !path.exists();
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| AppError::Runtime(format!("{}: {e}", path.display())))?;
            if fresh {
                writeln!(f, "step,lr,loss,grad_norm,min_accuracy")?;
            }
            Some(f)
        }
        None => None,
    };

    for _ in 0..a.steps {
        // batch selection is a pure function of the step counter so resumed
        // runs see the same data order
        let start = (tr.step as usize * a.batch) % data.len();
        let batch: Vec<_> = (0..a.batch)
            .map(|j| {
                let (seq, segs) = &data[(start + j) % data.len()];
                (seq, segs.as_slice())
            })
            .collect();
        let report = tr.train_step(&batch)?;
        if let Some(f) = log_file.as_mut() {
            writeln!(
                f,
                "{},{},{},{},{}",
                report.step,
                report.lr,
                report.stats.total,
                report.grad_norm,
                report.stats.min_accuracy()
            )?;
        }
        if report.step % 20 == 0 || report.step == 1 {
            println!(
                "step {} lr {:.3e} loss {:.4} min-acc {:.3}",
                report.step,
                report.lr,
                report.stats.total,
                report.stats.min_accuracy()
            );
        }
        if a.checkpoint_every > 0 && report.step % a.checkpoint_every == 0 {
            save_checkpoint(&tr, &a.out)?;
        }
    }
    save_checkpoint(&tr, &a.out)?;
    println!("wrote {} at step {}", a.out.display(), tr.step);
    Ok(())
}

struct RolloutArgs {
    checkpoint: PathBuf,
    scenario: PathBuf,
    mode: String,
    seed: u64,
    out: PathBuf,
    horizon: Option<usize>,
    target: Option<usize>,
    retries: Option<usize>,
    retire_distance: Option<f64>,
    plot: bool,
    config: ConfigArgs,
}

fn decision_to_json(d: &Decision) -> serde_json::Value {
    match d {
        Decision::Tl(s) => json!({"kind": "tl", "state": s.index()}),
        Decision::TypeOrEnd(c) => json!({"kind": "type_or_end", "class": c}),
        Decision::MapId(m) => json!({"kind": "map_id", "id": m}),
        Decision::RsBins(b) => json!({"kind": "rs_bins", "bins": b}),
        Decision::Motion(l) => json!({"kind": "motion", "label": l}),
    }
}

fn cmd_rollout(a: RolloutArgs) -> AppResult<()> {
    let mode = RolloutMode::from_name(&a.mode)
        .ok_or_else(|| AppError::Usage(format!("unknown rollout mode {:?}", a.mode)))?;
    let run_cfg = a.config.resolve()?;
    let tr = load_checkpoint(&a.checkpoint)?;
    let scenario = load_scenario(&a.scenario)?;
    let segments = load_segments(&scenario)?;
    if segments.len() > tr.model.cfg.max_map_segments {
        return Err(AppError::Validation(format!(
            "scenario has {} map segments, checkpoint supports {}",
            segments.len(),
            tr.model.cfg.max_map_segments
        )));
    }
    let mut cfg = RolloutConfig::new(mode, a.seed);
    cfg.horizon = a.horizon;
    cfg.ranges = run_cfg.ranges;
    cfg.max_agents = cfg.max_agents.min(tr.model.cfg.max_agents);
    if let Some(t) = a.target {
        cfg.densify_target = t;
        cfg.force_end_logit_off = true;
    }
    if let Some(r) = a.retries {
        cfg.max_inject_retries = r;
    }
    if let Some(d) = a.retire_distance {
        cfg.retire_distance = d;
    }

    ensure_dir(&a.out)?;
    let result = rollout(&tr.model, &scenario, &segments, &cfg)?;
    let scenario_path = a.out.join(format!("{}.json", result.scenario.scenario_id));
    save_scenario(&result.scenario, &scenario_path)?;
    let log_path = a.out.join(format!("{}.log.jsonl", result.scenario.scenario_id));
    let mut log_lines = String::new();
    for d in &result.log.0 {
        log_lines.push_str(&serde_json::to_string(&decision_to_json(d)).unwrap());
        log_lines.push('\n');
    }
    fs::write(&log_path, log_lines)?;
    if a.plot {
        save_svg(&result.scenario, &a.out.join(format!("{}.svg", result.scenario.scenario_id)))?;
    }
    println!(
        "wrote {} ({} decisions, {} injected)",
        scenario_path.display(),
        result.log.0.len(),
        result.injected.len()
    );
    Ok(())
}

fn cmd_eval(pred: &[PathBuf], gt: &Path, protocol: &str, out: Option<&Path>) -> AppResult<()> {
    let protocol = Protocol::from_name(protocol)
        .ok_or_else(|| AppError::Usage(format!("unknown protocol {protocol:?}")))?;
    let gt_scenarios: Vec<ScenarioDescription> = scenario_paths(gt)?
        .iter()
        .map(|p| load_scenario(p))
        .collect::<AppResult<_>>()?;
    let mut pred_sets = Vec::new();
    for dir in pred {
        let mut set = BTreeMap::new();
        for path in scenario_paths(dir)? {
            let s = load_scenario(&path)?;
            // rollout exports suffix the source id; map back to the gt id
            let key = gt_scenarios
                .iter()
                .map(|g| &g.scenario_id)
                .find(|id| s.scenario_id == **id || s.scenario_id.starts_with(&format!("{id}-")))
                .cloned()
                .ok_or_else(|| {
                    AppError::Validation(format!(
                        "pairing error: prediction {:?} matches no ground-truth scenario",
                        s.scenario_id
                    ))
                })?;
            set.insert(key, s);
        }
        pred_sets.push(set);
    }
    let report = evaluate(&pred_sets, &gt_scenarios, protocol)?;
    let text = serde_json::to_string_pretty(&report).unwrap() + "\n";
    match out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_inspect_map(scenario: &Path, out: Option<&Path>) -> AppResult<()> {
    let s = load_scenario(scenario)?;
    let segments = load_segments(&s)?;
    let mut by_type: BTreeMap<&str, usize> = BTreeMap::new();
    let mut total_length = 0.0;
    for seg in &segments {
        *by_type.entry(seg.semantic_type.name()).or_default() += 1;
        total_length += seg.total_length;
    }
    let report = json!({
        "scenario_id": s.scenario_id,
        "num_polylines": s.polylines.len(),
        "num_segments": segments.len(),
        "segments_by_type": by_type,
        "total_length_m": total_length,
    });
    let text = serde_json::to_string_pretty(&report).unwrap() + "\n";
    match out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}
