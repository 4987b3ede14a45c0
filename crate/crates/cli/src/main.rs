use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use planenav::env::EnvConfig;
use planenav::eval::{self, EvalConfig, GreedyPolicy, OraclePolicy, Policy, RandomPolicy};
use planenav::geometry::{sample_slice, slice_grid, Plane};
use planenav::phantom::{generate, PhantomSpec};
use planenav::trainer::{self, labels_path_for, TrainConfig, TrainVolume};
use planenav::volume::{self, Dims, IntensityWindow, VolumeData};

#[derive(Parser)]
#[command(name = "planenav", version, about = "Multi-agent plane navigation in labeled volumes")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom: writes <out>.vvol and <out>.labels.vvol.
    GenPhantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.10)]
        jitter: f64,
    },
    /// Sample an oblique slice of a volume as PGM.
    Slice {
        #[arg(long)]
        volume: PathBuf,
        /// Also write the label slice next to the output as <out>.labels.pgm.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Plane coefficients a0,a1,a2,a3 with a0*x + a1*y + a2*z + a3 = 0.
        #[arg(long, allow_hyphen_values = true)]
        plane: Plane,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also run the random-policy baseline and write baseline.json.
        #[arg(long)]
        baseline: bool,
    },
    /// Evaluate a policy over seeded episodes.
    Eval {
        /// Required for the greedy policy.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        volume: PathBuf,
        /// Defaults to the label file paired with --volume.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = PolicyKind::Greedy)]
        policy: PolicyKind,
        /// Episode length cap.
        #[arg(long, default_value_t = EnvConfig::default().max_steps)]
        steps: usize,
        /// Write per-step records to trajectories.jsonl.
        #[arg(long)]
        trajectories: bool,
    },
    /// Mean (blue) / std (red) overlay of the PGM slices in a directory.
    Overlay {
        #[arg(long)]
        slices_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Intensity augmentation: window, then z smoothing, then noise.
    Augment {
        #[arg(long)]
        volume: PathBuf,
        /// Intensity window lo,hi.
        #[arg(long, value_parser = parse_window)]
        window: Option<IntensityWindow>,
        /// Savitzky-Golay smoothing along z.
        #[arg(long)]
        sg: bool,
        #[arg(long, default_value_t = 5, requires = "sg")]
        sg_window: usize,
        #[arg(long, default_value_t = 1, requires = "sg")]
        sg_order: usize,
        /// Gaussian noise standard deviation.
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyKind {
    Greedy,
    Random,
    Oracle,
}

fn parse_window(s: &str) -> Result<IntensityWindow, String> {
    let (lo, hi) = s.split_once(',').ok_or("expected lo,hi")?;
    let lo = lo.trim().parse::<u8>().map_err(|e| format!("lo: {e}"))?;
    let hi = hi.trim().parse::<u8>().map_err(|e| format!("hi: {e}"))?;
    IntensityWindow::new(lo, hi).map_err(|e| e.to_string())
}

type AnyResult<T = ()> = Result<T, Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::Eval {
        checkpoint: None,
        policy: PolicyKind::Greedy,
        ..
    } = cli.command
    {
        Cli::command()
            .error(ErrorKind::MissingRequiredArgument, "--checkpoint is required for the greedy policy")
            .exit();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run(cmd: Command) -> AnyResult {
    match cmd {
        Command::GenPhantom { out, size, seed, jitter } => {
            let p = generate(&PhantomSpec::new(Dims::cube(size), seed).with_jitter(jitter))?;
            let vol_path = with_suffix(&out, ".vvol");
            volume::save_vvol(p.volume, &vol_path)?;
            volume::save_vvol(p.labels, labels_path_for(&vol_path))?;
            println!("wrote {} and {}", vol_path.display(), labels_path_for(&vol_path).display());
        }
        Command::Slice { volume, labels, plane, out } => {
            let v = volume::load_vvol(&volume)?.into_intensity()?;
            let grid = slice_grid(&plane, v.dims());
            sample_slice(&v, &grid).save_pgm(&out)?;
            if let Some(lp) = labels {
                let l = volume::load_vvol(&lp)?.into_labels()?;
                if l.dims() != v.dims() {
                    return Err(format!("label dims {:?} differ from volume dims {:?}", l.dims(), v.dims()).into());
                }
                let stem = out.with_extension("");
                sample_slice(&l, &grid).save_pgm(with_suffix(&stem, ".labels.pgm"))?;
            }
        }
        Command::Train { config, out_dir, baseline } => {
            let text = std::fs::read_to_string(&config).map_err(|e| format!("{}: {e}", config.display()))?;
            let cfg = TrainConfig::from_kv_str(&text)?;
            cfg.validate()?;
            std::fs::create_dir_all(&out_dir)?;
            std::fs::write(out_dir.join("config.txt"), cfg.to_kv_string())?;
            let vols = trainer::load_training_set(&cfg)?;
            let (report, _) = trainer::train(&cfg, &vols, Some(&out_dir))?;
            std::fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            let tail = 20.min(report.episodes.len());
            println!(
                "trained {} episodes, {} optimizer steps; last {tail}: plane reward {:.4}, terminal distance {:.4}",
                report.episodes.len(),
                report.optimizer_steps,
                report.tail_mean(tail, |e| e.plane_reward),
                report.tail_mean(tail, |e| e.terminal_distance),
            );
            if baseline {
                let base = trainer::random_baseline(&cfg, &vols)?;
                std::fs::write(out_dir.join("baseline.json"), serde_json::to_string_pretty(&base)?)?;
                println!(
                    "random baseline; last {tail}: plane reward {:.4}, terminal distance {:.4}",
                    base.tail_mean(tail, |e| e.plane_reward),
                    base.tail_mean(tail, |e| e.terminal_distance),
                );
            }
        }
        Command::Eval {
            checkpoint,
            volume,
            labels,
            runs,
            seed,
            out_dir,
            policy,
            steps,
            trajectories,
        } => {
            let v = volume::load_vvol(&volume)?.into_intensity()?;
            let l = volume::load_vvol(labels.unwrap_or_else(|| labels_path_for(&volume)))?.into_labels()?;
            let name = volume.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let mut env = EnvConfig {
                max_steps: steps,
                ..EnvConfig::default()
            };
            let policy: Box<dyn Policy> = match policy {
                PolicyKind::Greedy => {
                    let g = GreedyPolicy::from_checkpoint(checkpoint.ok_or("missing --checkpoint")?)?;
                    env.history_len = g.params.config().history;
                    env.obs_size = g.params.config().input_size;
                    Box::new(g)
                }
                PolicyKind::Random => Box::new(RandomPolicy),
                PolicyKind::Oracle => Box::new(OraclePolicy::for_labels(&l)?),
            };
            let tv = TrainVolume::new(name, v, l)?;
            let cfg = EvalConfig {
                runs,
                seed,
                env,
                record_trajectories: trajectories,
            };
            let out = eval::evaluate(policy.as_ref(), &tv, &cfg)?;
            eval::write_outputs(&out, &out_dir)?;
            print!("{}", eval::EvalSummary::table(std::slice::from_ref(&out.summary)));
        }
        Command::Overlay { slices_dir, out } => {
            let slices = eval::load_slices_dir(&slices_dir)?;
            eval::overlay(&slices)?.save_ppm(&out)?;
            println!("overlay of {} slices written to {}", slices.len(), out.display());
        }
        Command::Augment {
            volume,
            window,
            sg,
            sg_window,
            sg_order,
            noise,
            seed,
            out,
        } => {
            let mut v = volume::load_vvol(&volume)?.into_intensity()?;
            if let Some(w) = window {
                v = volume::apply_window(&v, w);
            }
            if sg {
                v = volume::sg_smooth_z(&v, sg_window, sg_order)?;
            }
            if let Some(sigma) = noise {
                v = volume::add_noise(&v, sigma, seed)?;
            }
            volume::save_vvol(VolumeData::Intensity(v), &out)?;
        }
    }
    Ok(())
}
