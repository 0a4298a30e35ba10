use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use featlift::openvocab::PseudoLabelDomain;
use featlift::pipeline::{self, FeatureSource, PipelineConfig, Workspace};

#[derive(Parser)]
#[command(name = "featlift", version, about = "Lift dense ViT features onto RGB-D point clouds")]
struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scene folder with color/, depth/, pose/, intrinsic/ and cloud.ply.
    scene: PathBuf,
    /// Config file of key=value lines.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output folder; defaults to <scene>/out.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Config overrides, e.g. `--set tau=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct Source {
    /// Use a distilled point network instead of the projected targets.
    #[arg(long, value_name = "DIR")]
    model: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Domain {
    Unseen,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Per-view dense feature maps.
    Extract(Common),
    /// Multi-view per-point targets from cached feature maps.
    Project(Common),
    /// Train the point network on one or more projected scenes.
    Distill {
        #[arg(required = true)]
        scenes: Vec<PathBuf>,
        #[arg(long, short)]
        config: Option<PathBuf>,
        /// Output folder of the network bundle.
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Classify every point against the class embeddings.
    Segment {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
    },
    /// Mask points matching the query embedding.
    Query {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
    },
    /// Keep seen-class labels and pseudo-label the remaining points.
    PseudoLabel {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[arg(long, value_enum, default_value = "unseen")]
        domain: Domain,
    },
    /// Score a label tensor against the cloud's ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Predicted labels (FOT1 i32); defaults to <out>/segment/labels.fot.
        #[arg(long)]
        pred: Option<PathBuf>,
    },
    /// Write the planted synthetic scene.
    Synth { dir: PathBuf },
    /// Run the invariant checks and the planted end-to-end scene.
    Selftest {
        /// Working folder; a temporary one when omitted.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> featlift::Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

fn setup(c: &Common) -> featlift::Result<(Workspace, PipelineConfig)> {
    let cfg = load_config(c.config.as_deref(), &c.overrides)?;
    let out = c.out.clone().unwrap_or_else(|| c.scene.join("out"));
    Ok((Workspace::new(&c.scene, out), cfg))
}

fn source(s: &Source) -> FeatureSource {
    s.model.clone().map_or(FeatureSource::Targets, FeatureSource::Model)
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Extract(c) => {
            let (ws, cfg) = setup(&c)?;
            let paths = pipeline::cmd_extract(&ws, &cfg)?;
            println!("wrote {} feature maps to {}", paths.len(), ws.features_dir().display());
        }
        Command::Project(c) => {
            let (ws, cfg) = setup(&c)?;
            let t = pipeline::cmd_project(&ws, &cfg)?;
            println!("{} of {} points supervised", t.num_valid(), t.len());
        }
        Command::Distill { scenes, config, model, overrides } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let ws: Vec<Workspace> = scenes.iter().map(|s| Workspace::new(s, s.join("out"))).collect();
            let outcome = pipeline::cmd_distill(&ws, &model, &cfg)?;
            if let Some(last) = outcome.curve.last() {
                println!("step {} loss {:.4}", last.step, last.loss);
            }
        }
        Command::Segment { common, source: s } => {
            let (ws, cfg) = setup(&common)?;
            let seg = pipeline::cmd_segment(&ws, &cfg, &source(&s))?;
            let unlabeled = seg.labels.iter().filter(|&&l| l < 0).count();
            println!("{} points labeled, {unlabeled} without features", seg.labels.len() - unlabeled);
        }
        Command::Query { common, source: s } => {
            let (ws, cfg) = setup(&common)?;
            let mask = pipeline::cmd_query(&ws, &cfg, &source(&s))?;
            println!("{} of {} points match", mask.iter().filter(|&&m| m).count(), mask.len());
        }
        Command::PseudoLabel { common, source: s, domain } => {
            let (ws, cfg) = setup(&common)?;
            let domain = match domain {
                Domain::Unseen => PseudoLabelDomain::UnseenOnly,
                Domain::All => PseudoLabelDomain::AllClasses,
            };
            let p = pipeline::cmd_pseudo(&ws, &cfg, &source(&s), domain)?;
            match p.unseen_accuracy {
                Some(a) => println!("unseen pseudo-label accuracy {a:.1}%"),
                None => println!("no unseen-class points in ground truth"),
            }
        }
        Command::Eval { common, pred } => {
            let (ws, cfg) = setup(&common)?;
            let pred = pred.unwrap_or_else(|| ws.out.join("segment").join("labels.fot"));
            let report = pipeline::cmd_eval(&ws, &cfg, &pred)?;
            print!("{}", report.to_pretty());
        }
        Command::Synth { dir } => {
            let cfg = pipeline::cmd_synth(&dir)?;
            println!("wrote planted scene; config at {}", cfg.display());
        }
        Command::Selftest { dir } => {
            let dir = match dir {
                Some(d) => d,
                None => tempfile_dir()?,
            };
            let checks = pipeline::selftest(&dir)?;
            let failed = checks.iter().filter(|c| !c.passed).count();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if failed > 0 {
                return Err(featlift::Error::Numeric(format!("{failed} self-test checks failed")).into());
            }
        }
    }
    Ok(())
}

fn tempfile_dir() -> anyhow::Result<PathBuf> {
    let dir = std::env::temp_dir().join(format!("featlift-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<featlift::Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
