//! Command-line front end: argument definitions and one function per
//! subcommand. Every command writes `manifest.json` next to its outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{parse_json, Dataset, RunConfig};
use crate::error::{Error, Result};
use crate::graph::{graph_sequence, GraphKind};
use crate::model::{prepare_sample, Batch, Forecaster};
use crate::numeric::Checkpoint;
use crate::rss::{estimate_parameters, safety_envelope, RssParameters};
use crate::train::{density_grid, evaluate, write_heatmap_csv, GridSpec, MetricAccumulator, Trainer};
use crate::trajectory::{
    load_trajectories, synthesize_tracks, write_ngsim_csv, AgentState, Context, SynthSpec, TrajectoryFormat,
};

#[derive(Debug, Parser)]
#[command(name = "safecast", version, about = "Safety-aware multi-agent trajectory forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GraphChoice {
    Dig,
    Dsg,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    NgsimCsv,
    ApolloTxt,
}

impl From<FormatArg> for TrajectoryFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::NgsimCsv => TrajectoryFormat::NgsimCsv,
            FormatArg::ApolloTxt => TrajectoryFormat::ApolloTxt,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ContextArg {
    Highway,
    Urban,
}

impl From<ContextArg> for Context {
    fn from(c: ContextArg) -> Self {
        match c {
            ContextArg::Highway => Context::Highway,
            ContextArg::Urban => Context::Urban,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes as an NGSIM-style CSV.
    Gen {
        /// JSON generator spec; defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; `--checkpoint` resumes from a trainer checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on one split of the configured data.
    Eval {
        /// Defaults to the run config stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// Per-frame RSS safety envelopes for every agent of a trajectory file.
    Rss {
        #[arg(long)]
        input: PathBuf,
        /// `default`, `estimate`, or a JSON parameter file.
        #[arg(long, default_value = "default")]
        params: String,
        #[arg(long, value_enum, default_value = "highway")]
        context: ContextArg,
        #[arg(long, value_enum, default_value = "ngsim-csv")]
        format: FormatArg,
        #[arg(long, default_value_t = 10.0)]
        frame_rate_hz: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the graph sequence of one window as JSON.
    Graph {
        #[arg(long)]
        config: PathBuf,
        /// Window index in dataset order.
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long, value_enum, default_value = "both")]
        kind: GraphChoice,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Mixture density grids of one window's forecast as CSV.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Window index in dataset order.
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// Cell edge in meters.
        #[arg(long, default_value_t = 0.25)]
        grid: f64,
        /// Forecast steps (0-based); defaults to whole seconds.
        #[arg(long, value_delimiter = ',')]
        steps: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Parses `std::env::args`, runs the command and maps errors to exit codes:
/// 2 for configuration or argument problems, 1 for everything else.
pub fn main() -> ExitCode {
    let env = env_logger::Env::new().filter_or("SAFECAST_LOG", "info");
    env_logger::Builder::from_env(env).format_timestamp(None).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Argument(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen { spec, out, seed } => cmd_gen(spec.as_deref(), &out, seed),
        Command::Train {
            config,
            checkpoint,
            out,
            seed,
        } => cmd_train(&config, checkpoint.as_deref(), out, seed),
        Command::Eval {
            config,
            checkpoint,
            out,
            seed,
            split,
        } => cmd_eval(config.as_deref(), &checkpoint, out, seed, split),
        Command::Rss {
            input,
            params,
            context,
            format,
            frame_rate_hz,
            out,
        } => cmd_rss(&input, &params, context.into(), format.into(), frame_rate_hz, &out),
        Command::Graph {
            config,
            scene,
            kind,
            out,
            seed,
        } => cmd_graph(&config, scene, kind, out, seed),
        Command::Heatmap {
            checkpoint,
            config,
            scene,
            grid,
            steps,
            out,
            seed,
        } => cmd_heatmap(&checkpoint, config.as_deref(), scene, grid, &steps, out, seed),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    command_line: Vec<String>,
    config_sha256: Option<String>,
    seed: Option<u64>,
    git_describe: String,
    version: &'static str,
    extra: serde_json::Value,
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_manifest(
    dir: &Path,
    command: &str,
    config_sha256: Option<String>,
    seed: Option<u64>,
    extra: serde_json::Value,
) -> Result<()> {
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            command,
            command_line: std::env::args().collect(),
            config_sha256,
            seed,
            git_describe: git_describe(),
            version: env!("CARGO_PKG_VERSION"),
            extra,
        },
    )
}

fn load_run_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    Ok(cfg)
}

/// Generator output: the CSV plus per-scene metadata.
pub fn cmd_gen(spec_path: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec: SynthSpec = match spec_path {
        Some(p) => parse_json(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?, p)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let scenes = synthesize_tracks(&spec)?;
    create_dir(out)?;
    let tracks: Vec<_> = scenes.iter().flat_map(|s| s.tracks.iter().cloned()).collect();
    write_ngsim_csv(&out.join("tracks.csv"), &tracks)?;
    let meta: Vec<_> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            serde_json::json!({
                "scene": i,
                "ego_id": s.ego_id,
                "anchor_frame": s.anchor_frame,
                "maneuver": s.intended.to_string(),
                "braking_leader": s.braking_leader,
            })
        })
        .collect();
    write_json(&out.join("scenes.json"), &meta)?;
    let spec_hash = sha256_hex(&serde_json::to_vec(&spec)?);
    write_manifest(out, "gen", Some(spec_hash), Some(spec.seed), serde_json::json!({ "scenes": scenes.len() }))?;
    log::info!("wrote {} scenes ({} tracks) to {}", scenes.len(), tracks.len(), out.display());
    Ok(())
}

pub fn cmd_train(config: &Path, resume: Option<&Path>, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let cfg = load_run_config(config, seed, out)?;
    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;
    let data = Dataset::build(&cfg, None)?;
    let train = data.samples(&data.split.train, &cfg)?;
    let val = data.samples(&data.split.val, &cfg)?;
    if train.is_empty() {
        return Err(Error::EmptyInput("the training split is empty".into()));
    }
    log::info!(
        "{} train / {} val / {} test windows, method {}",
        train.len(),
        val.len(),
        data.split.test.len(),
        cfg.model.ablation.label()
    );
    let mut trainer = match resume {
        Some(p) => {
            let t = Trainer::resume(&Checkpoint::load(p)?, Some(cfg.train.clone()))?;
            if t.model.config != cfg.model || t.model.dims != cfg.dims() {
                return Err(Error::Config(format!("checkpoint {} was trained with a different model", p.display())));
            }
            log::info!("resuming after epoch {}", t.epoch());
            t
        }
        None => Trainer::new(Forecaster::new(&cfg.model, cfg.dims(), cfg.data.seed)?, cfg.train.clone(), cfg.data.seed)?,
    };
    let run_meta = |ckpt: &mut Checkpoint| -> Result<()> {
        let meta = ckpt.meta.as_object_mut().expect("checkpoint meta is an object");
        meta.insert("run".into(), serde_json::to_value(&cfg)?);
        meta.insert("rss".into(), serde_json::to_value(&data.rss)?);
        Ok(())
    };
    let result = trainer.fit(&train, &val, |t, _| {
        let mut ckpt = t.checkpoint()?;
        run_meta(&mut ckpt)?;
        ckpt.save(&dir.join("checkpoint.bin"))?;
        t.write_loss_csv(&dir.join("loss.csv"))?;
        t.write_val_loss_csv(&dir.join("val_loss.csv"))
    });
    let mut model_ckpt = trainer.best_model().to_checkpoint(serde_json::Value::Null)?;
    run_meta(&mut model_ckpt)?;
    if result.is_ok() {
        model_ckpt.save(&dir.join("model.bin"))?;
    }
    write_json(&dir.join("config.json"), &cfg)?;
    write_manifest(
        &dir,
        "train",
        Some(cfg.hash()?),
        Some(cfg.data.seed),
        serde_json::json!({
            "method": cfg.model.ablation.label(),
            "ablation": cfg.model.ablation,
            "parameters": trainer.model.num_parameters(),
            "epochs_completed": trainer.epoch(),
            "best_epoch": trainer.best_epoch(),
            "stopped_early": trainer.stopped_early(),
            "rss": data.rss,
            "rss_warning": data.rss_warning,
        }),
    )?;
    result
}

/// Model and run config from a checkpoint written by `train`.
fn model_and_config(checkpoint: &Path, config: Option<&Path>, seed: Option<u64>, out: Option<PathBuf>) -> Result<(Forecaster, RunConfig, Option<RssParameters>)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = Forecaster::from_checkpoint(&ckpt)?;
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => serde_json::from_value(
            ckpt.meta
                .get("run")
                .cloned()
                .ok_or_else(|| Error::Config("checkpoint has no run config; pass --config".into()))?,
        )?,
    };
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    if model.dims != cfg.dims() {
        return Err(Error::Config(format!(
            "checkpoint dims {:?} do not match the config windows {:?}",
            model.dims,
            cfg.dims()
        )));
    }
    let rss = ckpt.meta.get("rss").cloned().map(serde_json::from_value).transpose()?;
    Ok((model, cfg, rss))
}

pub fn cmd_eval(config: Option<&Path>, checkpoint: &Path, out: Option<PathBuf>, seed: Option<u64>, split: SplitName) -> Result<()> {
    let (model, cfg, rss) = model_and_config(checkpoint, config, seed, out)?;
    let data = Dataset::build(&cfg, rss)?;
    let windows = match split {
        SplitName::Train => &data.split.train,
        SplitName::Val => &data.split.val,
        SplitName::Test => &data.split.test,
    };
    let samples = data.samples(windows, &cfg)?;
    let report = evaluate(&model, &samples, cfg.train.batch_size, cfg.train.point_mode)?;
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    write_json(&dir.join("metrics.json"), &report)?;
    report.write_rmse_csv(&dir.join("rmse.csv"))?;
    let ckpt_hash = sha256_hex(&fs::read(checkpoint).map_err(|e| Error::io(checkpoint, e))?);
    write_manifest(
        dir,
        "eval",
        Some(cfg.hash()?),
        Some(cfg.data.seed),
        serde_json::json!({ "checkpoint_sha256": ckpt_hash, "split": format!("{split:?}").to_lowercase(), "samples": samples.len() }),
    )?;
    for h in &report.rmse {
        log::info!("rmse @ {} s: {:.4}", h.horizon_s, h.rmse);
    }
    log::info!("wsade {:.4} wsfde {:.4}", report.wsade, report.wsfde);
    Ok(())
}

#[derive(Serialize)]
struct EnvelopeRow {
    frame: i64,
    agent_id: i64,
    d_lon: f64,
    d_lat: f64,
    leader_id: Option<i64>,
    lateral_id: Option<i64>,
}

pub fn cmd_rss(
    input: &Path,
    params: &str,
    context: Context,
    format: TrajectoryFormat,
    frame_rate_hz: f64,
    out: &Path,
) -> Result<()> {
    let report = load_trajectories(input, format, frame_rate_hz)?;
    let (p, warning) = match params {
        "default" => (RssParameters::for_context(context), None),
        "estimate" => {
            let est = estimate_parameters(&report.tracks, context);
            println!("{}", serde_json::to_string_pretty(&est.params)?);
            (est.params, est.warning)
        }
        path => {
            let path = Path::new(path);
            let p: RssParameters = parse_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?, path)?;
            p.validate().map_err(|e| Error::Config(e.to_string()))?;
            (p, None)
        }
    };
    if let Some(w) = &warning {
        log::warn!("rss estimation: {w}");
    }
    let mut frames: BTreeMap<i64, Vec<AgentState>> = BTreeMap::new();
    for s in report.tracks.iter().flat_map(|t| &t.states) {
        frames.entry(s.frame).or_default().push(*s);
    }
    create_dir(out)?;
    let path = out.join("envelope.csv");
    let wrap = |e: csv::Error| Error::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(&path).map_err(wrap)?;
    for (frame, agents) in &frames {
        for ego in agents {
            let others: Vec<AgentState> = agents.iter().filter(|a| a.agent_id != ego.agent_id).copied().collect();
            let env = safety_envelope(ego, &others, &p)?;
            w.serialize(EnvelopeRow {
                frame: *frame,
                agent_id: ego.agent_id,
                d_lon: env.d_lon,
                d_lat: env.d_lat,
                leader_id: env.leader_id,
                lateral_id: env.lateral_id,
            })
            .map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(&out.join("rss_params.json"), &p)?;
    write_manifest(
        out,
        "rss",
        Some(sha256_hex(&serde_json::to_vec(&p)?)),
        None,
        serde_json::json!({ "input": input, "params": params, "warning": warning }),
    )
}

fn scene_window(cfg: &RunConfig, data: &Dataset, scene: usize) -> Result<crate::trajectory::SceneWindow> {
    data.windows.get(scene).cloned().ok_or_else(|| {
        Error::Argument(format!(
            "scene {scene} out of range: {} windows in the configured data (seed {})",
            data.windows.len(),
            cfg.data.seed
        ))
    })
}

pub fn cmd_graph(config: &Path, scene: usize, kind: GraphChoice, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let cfg = load_run_config(config, seed, out)?;
    let data = Dataset::build(&cfg, None)?;
    let window = scene_window(&cfg, &data, scene)?;
    let gcfg = cfg.model.graph();
    let kinds: &[GraphKind] = match kind {
        GraphChoice::Dig => &[GraphKind::Dig],
        GraphChoice::Dsg => &[GraphKind::Dsg],
        GraphChoice::Both => &[GraphKind::Dig, GraphKind::Dsg],
    };
    let mut doc = serde_json::Map::new();
    doc.insert("source".into(), window.source.clone().into());
    doc.insert("ego_id".into(), window.ego_id.into());
    doc.insert("anchor_frame".into(), window.anchor_frame.into());
    doc.insert("origin".into(), serde_json::to_value(window.origin)?);
    for &k in kinds {
        let seq = graph_sequence(&window, k, &gcfg, &data.rss)?;
        let key = if k == GraphKind::Dig { "dig" } else { "dsg" };
        doc.insert(key.into(), serde_json::to_value(seq)?);
    }
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    write_json(&dir.join("graph.json"), &doc)?;
    write_manifest(dir, "graph", Some(cfg.hash()?), Some(cfg.data.seed), serde_json::json!({ "scene": scene }))
}

pub fn cmd_heatmap(
    checkpoint: &Path,
    config: Option<&Path>,
    scene: usize,
    grid: f64,
    steps: &[usize],
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<()> {
    let (model, cfg, rss) = model_and_config(checkpoint, config, seed, out)?;
    let data = Dataset::build(&cfg, rss)?;
    let window = scene_window(&cfg, &data, scene)?;
    let sample = prepare_sample(&window, &data.rss, &cfg.model.graph(), &cfg.data.labels)?;
    let batch = Batch::new(&[&sample], model.config.ablation.no_rss)?;
    let dist = model.predict(&batch, &mut ChaCha8Rng::seed_from_u64(cfg.data.seed))?.remove(0);
    let steps: Vec<usize> = if steps.is_empty() {
        MetricAccumulator::new(dist.horizon(), sample.dt)?
            .whole_second_steps()
            .into_iter()
            .map(|(k, _)| k)
            .collect()
    } else {
        steps.to_vec()
    };
    let spec = GridSpec {
        step: grid,
        ..Default::default()
    };
    let mut cells = Vec::new();
    for &k in &steps {
        cells.extend(density_grid(&dist, k, sample.dt, &spec)?);
    }
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    write_heatmap_csv(&dir.join("heatmap.csv"), &cells)?;
    write_json(&dir.join("forecast.json"), &dist)?;
    write_manifest(
        dir,
        "heatmap",
        Some(cfg.hash()?),
        Some(cfg.data.seed),
        serde_json::json!({ "scene": scene, "grid": grid, "steps": steps }),
    )
}
