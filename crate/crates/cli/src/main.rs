use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use qarsmith_annotate::simulate::SimulatedAnnotators;
use qarsmith_cli::config::{BackendMode, RunConfig};
use qarsmith_cli::pipeline::{Pipeline, Stage};
use qarsmith_cli::report::{build_run_report, report_text};
use qarsmith_core::store::Store;

#[derive(Parser)]
#[command(name = "qarsmith", version, about = "Build region-grounded QAR corpora")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "qarsmith.toml")]
    config: PathBuf,
    /// Override the run directory from the config.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use the deterministic mock backends.
    #[arg(long, global = true)]
    mock: bool,
    /// Re-run complete stages and clear what depends on them.
    #[arg(long, global = true)]
    force: bool,
    /// Override the filter threshold.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select regions from detector proposals.
    Curate,
    /// Build per-image descriptor bundles.
    Verbalize,
    /// Ask the LLM for QARs in both reference modes.
    Generate,
    /// Cluster QARs per image and pick candidates for annotation.
    Dedup,
    /// Serve the annotation API until every rating task is complete.
    ServeAnnotation {
        /// Rate tasks with scripted annotators instead of waiting.
        #[arg(long)]
        simulate: bool,
        /// Override the bind address from the config.
        #[arg(long)]
        bind: Option<SocketAddr>,
    },
    TrainCritic,
    /// Score every generated QAR.
    Score,
    /// Keep QARs scoring above the threshold.
    Filter,
    /// Vary drawn region sets and remap ids.
    Augment,
    Export,
    /// Write corpus statistics.
    Stats,
    /// Summarize a run directory.
    Report {
        #[arg(long)]
        json: bool,
    },
    /// Run stages in order.
    RunAll {
        /// Stop after this stage.
        #[arg(long)]
        stage: Option<String>,
        #[arg(long)]
        simulate: bool,
    },
    /// Write a synthetic input corpus and a config that uses it.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        images: usize,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = if cli.config.exists() {
        RunConfig::load(&cli.config)?
    } else if cli.config == PathBuf::from("qarsmith.toml") {
        RunConfig::default()
    } else {
        bail!("config file {} not found", cli.config.display());
    };
    if let Some(d) = &cli.run_dir {
        cfg.run_dir = d.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.mock {
        cfg.backend.mode = BackendMode::Mock;
    }
    if let Some(t) = cli.threshold {
        cfg.filter.threshold = t;
    }
    Ok(cfg)
}

fn open(cli: &Cli, simulate: bool) -> Result<Pipeline> {
    let mut cfg = load_config(cli)?;
    cfg.annotation.simulate |= simulate;
    let mut p = Pipeline::open(cfg, cli.force)?;
    p.quiet = cli.quiet;
    Ok(p)
}

fn serve_annotation(p: &mut Pipeline, force: bool, simulate: bool, bind: Option<SocketAddr>) -> Result<()> {
    if !p.begin_stage(Stage::Annotate, force, false)? {
        return Ok(());
    }
    let addr: SocketAddr = match bind {
        Some(a) => a,
        None => p
            .cfg
            .annotation
            .bind
            .parse()
            .with_context(|| format!("bad bind address {}", p.cfg.annotation.bind))?,
    };
    let (service, ids) = p.start_annotation()?;
    let service = Arc::new(service);
    let handle = qarsmith_annotate::serve(service.clone(), addr)?;
    p.note(&format!("annotation: serving {} rating tasks at {}", ids.len(), handle.url()));
    if simulate {
        let mut sim = SimulatedAnnotators::new(
            p.cfg.annotation.simulated_annotators.max(p.cfg.annotation.required_annotators),
            p.cfg.stage_seed("simulated-annotators"),
        );
        sim.noise = p.cfg.annotation.simulated_noise;
        sim.contexts = p.annotation_contexts()?;
        sim.run(&service)?;
    }
    while service.counts().rating_open > 0 {
        std::thread::sleep(Duration::from_millis(500));
    }
    let summary = service.export_labels()?;
    handle.stop();
    let service = Arc::try_unwrap(service).map_err(|_| anyhow!("annotation service still in use"))?;
    p.finish_annotation(service)?;
    p.note(&format!("annotate: {} labels exported", summary.labels));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let single = |stage: Stage| -> Result<()> {
        let mut p = open(&cli, false)?;
        p.run_stage(stage, cli.force)?;
        Ok(())
    };
    match &cli.command {
        Command::Curate => single(Stage::Curate),
        Command::Verbalize => single(Stage::Verbalize),
        Command::Generate => single(Stage::Generate),
        Command::Dedup => single(Stage::Dedup),
        Command::TrainCritic => single(Stage::TrainCritic),
        Command::Score => single(Stage::Score),
        Command::Filter => single(Stage::Filter),
        Command::Augment => single(Stage::Augment),
        Command::Export => single(Stage::Export),
        Command::Stats => single(Stage::Stats),
        Command::ServeAnnotation { simulate, bind } => {
            let mut p = open(&cli, false)?;
            serve_annotation(&mut p, cli.force, *simulate, *bind)
        }
        Command::RunAll { stage, simulate } => {
            let until = match stage {
                Some(s) => Some(Stage::parse(s).ok_or_else(|| anyhow!("unknown stage {s}"))?),
                None => None,
            };
            let mut p = open(&cli, *simulate)?;
            p.run_all(until, cli.force)?;
            Ok(())
        }
        Command::Report { json } => {
            let cfg = load_config(&cli)?;
            let report = if cfg.run_dir.join("manifest.json").exists() {
                let store = Store::open(&cfg.run_dir)?;
                Some(build_run_report(&store, cfg.filter.threshold)?)
            } else {
                None
            };
            match (report, json) {
                (Some(r), true) => println!("{}", serde_json::to_string_pretty(&r)?),
                (Some(r), false) => print!("{}", report_text(&r)),
                (None, true) => println!("{{\"stages\": []}}"),
                (None, false) => println!("no stages"),
            }
            Ok(())
        }
        Command::Fixtures { out, images } => {
            let seed = cli.seed.unwrap_or(0);
            let paths = qarsmith_core::fixtures::write_fixture_corpus(out, *images, seed)?;
            let rel = |p: &std::path::Path| p.strip_prefix(out).unwrap_or(p).display().to_string();
            let mut cfg = RunConfig {
                seed,
                run_dir: PathBuf::from("run"),
                ..RunConfig::default()
            };
            cfg.annotation.simulate = true;
            // The mock critic is weak; a lower bar keeps later stages populated.
            cfg.filter.threshold = 0.5;
            cfg.inputs.detections = rel(&paths.detector_path).into();
            cfg.inputs.places = rel(&paths.places).into();
            cfg.inputs.objects = rel(&paths.objects).into();
            cfg.inputs.concepts = rel(&paths.concepts).into();
            let path = out.join("qarsmith.toml");
            std::fs::write(&path, cfg.to_toml())?;
            if !cli.quiet {
                eprintln!("wrote {} images and {}", images, path.display());
            }
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
