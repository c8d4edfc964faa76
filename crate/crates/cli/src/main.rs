use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use geovid_cli::config::{parse_fractions, PipelineConfig};
use geovid_cli::error::{CliError, Result};
use geovid_cli::layout::{new_run_dir, VideoDir};
use geovid_cli::{init_threads, server, stages};
use geovid_core::eval::synthetic::SyntheticSceneSpec;
use geovid_core::frame_store::FRAME_PATTERN;

/// Geometric context labelling for video.
///
/// Exit codes: 0 success, 1 stage failure, 2 configuration or usage error,
/// 3 missing dependency (an earlier stage has not been run).
#[derive(Parser)]
#[command(name = "geovid", version)]
struct Cli {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Force {
    /// Rerun even when the inputs are unchanged.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build the supervoxel hierarchy of a video.
    Segment {
        /// Frame directory to import into the video directory.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// File name pattern of the imported frames.
        #[arg(long, default_value = FRAME_PATTERN)]
        pattern: String,
        /// Video directory.
        #[arg(long = "out")]
        out: PathBuf,
        #[command(flatten)]
        force: Force,
    },
    /// Serve the annotation API for the segmented videos under a directory.
    AnnotateServe {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Cache segment features of videos.
    Extract {
        #[arg(long, num_args = 1.., required = true)]
        video: Vec<PathBuf>,
        #[command(flatten)]
        force: Force,
    },
    /// Train the classifier bundle on labelled videos.
    Train {
        #[arg(long, num_args = 1.., required = true)]
        videos: Vec<PathBuf>,
        /// Model file; defaults to `<runs>/<timestamp>/model.gvbt`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated hierarchy fractions, e.g. `0.1,0.2`.
        #[arg(long)]
        level_fractions: Option<String>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Label every supervoxel of videos.
    Predict {
        #[arg(long, num_args = 1.., required = true)]
        video: Vec<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        window: Option<usize>,
        /// Comma-separated hierarchy fractions fused at prediction time.
        #[arg(long)]
        level_fractions: Option<String>,
        #[command(flatten)]
        force: Force,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        videos: Vec<PathBuf>,
    },
    /// Feature, window and level ablation.
    Ablate {
        #[arg(long, num_args = 1.., required = true)]
        train: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        test: Vec<PathBuf>,
        /// Comma-separated temporal windows.
        #[arg(long)]
        windows: Option<String>,
    },
    /// Self-training over unlabelled videos.
    Bootstrap {
        #[arg(long, num_args = 1.., required = true)]
        train: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        unlabeled: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        test: Vec<PathBuf>,
        /// Starting model; trained from `--train` when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        quota: Option<usize>,
        #[arg(long)]
        posterior_min: Option<f64>,
        #[arg(long)]
        homogeneity_min: Option<f64>,
        #[arg(long)]
        introspect_every: Option<usize>,
    },
    /// Render synthetic videos with pixel ground truth.
    Synth {
        /// Scene description; without it `--count` random scenes are drawn.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        width: Option<u32>,
        #[arg(long)]
        height: Option<u32>,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Run every stage over the configured corpus.
    All {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        force: Force,
    },
}

fn dirs(paths: &[PathBuf]) -> Vec<VideoDir> {
    paths.iter().map(VideoDir::new).collect()
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| CliError::Config(format!("bad number {t:?}"))))
        .collect()
}

fn report(path: &Path) {
    println!("{}", path.display());
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Segment {
            input,
            pattern,
            out,
            force,
        } => {
            let v = VideoDir::new(out);
            stages::segment(&v, input.as_deref().map(|p| (p, pattern.as_str())), &cfg.model, force.force)?;
        }
        Command::AnnotateServe { root, addr } => server::serve(&root, addr)?,
        Command::Extract { video, force } => {
            for v in dirs(&video) {
                stages::extract(&v, &cfg.model, force.force)?;
            }
        }
        Command::Train {
            videos,
            out,
            level_fractions,
            rounds,
            depth,
        } => {
            if let Some(f) = level_fractions {
                cfg.model.level_fractions = parse_fractions(&f)?;
            }
            if let Some(r) = rounds {
                cfg.model.boost.rounds = r;
            }
            if let Some(d) = depth {
                cfg.model.boost.max_depth = d;
            }
            cfg.validate()?;
            let out = match out {
                Some(o) => o,
                None => new_run_dir(&cfg.paths.runs)?.join("model.gvbt"),
            };
            stages::train(&dirs(&videos), &cfg.model, &out)?;
            report(&out);
        }
        Command::Predict {
            video,
            model,
            window,
            level_fractions,
            force,
        } => {
            if let Some(w) = window {
                cfg.model.inference.window = w;
            }
            if let Some(f) = level_fractions {
                cfg.model.inference.level_fractions = parse_fractions(&f)?;
            }
            cfg.validate()?;
            for v in dirs(&video) {
                stages::predict(&v, &model, &cfg.model, force.force)?;
            }
        }
        Command::Eval { videos } => {
            let run = new_run_dir(&cfg.paths.runs)?;
            let e = stages::evaluate(&dirs(&videos), &run)?;
            println!("{}", e.headline()?);
            report(&run);
        }
        Command::Ablate { train, test, windows } => {
            if let Some(w) = windows {
                cfg.ablation.windows = parse_list(&w)?;
            }
            cfg.validate()?;
            let run = new_run_dir(&cfg.paths.runs)?;
            stages::ablate(&dirs(&train), &dirs(&test), &cfg, &run)?;
            report(&run);
        }
        Command::Bootstrap {
            train,
            unlabeled,
            test,
            model,
            iters,
            quota,
            posterior_min,
            homogeneity_min,
            introspect_every,
        } => {
            let b = &mut cfg.bootstrap;
            if let Some(x) = iters {
                b.iterations = x;
            }
            if let Some(x) = quota {
                b.per_class_quota = x;
            }
            if let Some(x) = posterior_min {
                b.posterior_min = x;
            }
            if let Some(x) = homogeneity_min {
                b.homogeneity_min = x;
            }
            if let Some(x) = introspect_every {
                b.introspect_every = x;
            }
            cfg.validate()?;
            let run = new_run_dir(&cfg.paths.runs)?;
            stages::bootstrap(&dirs(&train), &dirs(&unlabeled), &dirs(&test), &cfg, model.as_deref(), &run)?;
            report(&run);
        }
        Command::Synth {
            spec,
            out,
            count,
            seed,
            width,
            height,
            frames,
        } => {
            if let Some(path) = spec {
                let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
                let spec: SyntheticSceneSpec =
                    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                stages::synth_one(&spec, &VideoDir::new(&out))?;
                report(&out);
            } else {
                let s = &cfg.synth;
                let count = count.unwrap_or(s.count.max(1));
                let made = stages::synth_corpus(
                    &out,
                    count,
                    seed.unwrap_or(cfg.seed),
                    width.unwrap_or(s.width),
                    height.unwrap_or(s.height),
                    frames.unwrap_or(s.frames),
                )?;
                for v in made {
                    report(&v.root);
                }
            }
        }
        Command::All { corpus, force } => {
            if let Some(c) = corpus {
                cfg.paths.corpus = Some(c);
            }
            let run = stages::run_all(&cfg, force.force)?;
            report(&run);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = init_threads().and_then(|_| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
