//! `mvp3d` command-line tool.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 when a
//! command fails at runtime.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::info;

use mvp3d::checkpoint::load_checkpoint;
use mvp3d::config::{Preset, RunConfig};
use mvp3d::episodes::{gen_episodes, load_demos, manifest_path, read_episodes, Demo};
use mvp3d::eval::{eval_success, perturbation_sweep, reconstruct_report, sweep_csv};
use mvp3d::model::ModelConfig;
use mvp3d::pointcloud::{gen_scene, load_ply, PerturbationKind};
use mvp3d::renderer::dump::dump_observation;
use mvp3d::renderer::render_all;
use mvp3d::train::{finetune, gradcheck_preset, pretrain, Mode, SceneSource, FINAL_CHECKPOINT};

const GRADCHECK_TOL: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "mvp3d", version, about = "Multi-view masked-autoencoder pretraining over point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate procedural scenes with their episode manifest.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run config; only its [corpus.spec] section is used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render the five virtual views of a PLY scene to image files.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
    },
    /// Masked-reconstruction pretraining.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the model and train seeds.
        #[arg(long)]
        seed: Option<u64>,
        /// Average the loss over masked patches only.
        #[arg(long)]
        loss_masked_only: bool,
    },
    /// Finetune the action decoder, from a pretrained encoder or scratch.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pretrained checkpoint; without it the run starts from scratch.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Reconstruct masked views of every scene in a directory.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.75)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a finetuned checkpoint on an episode set.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        episodes: PathBuf,
        /// Also run the perturbation sweep.
        #[arg(long)]
        sweep: bool,
        #[arg(long, default_value_t = 0.5)]
        magnitude: f64,
        /// Comma-separated perturbation kinds; all when omitted.
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<PerturbationKind>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for `success.json` and `sweep.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients against central differences.
    Gradcheck {
        #[arg(long, value_parser = parse_preset)]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scenes per loss path.
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    match s {
        "desk" => Ok(Preset::Desk),
        "paper" => Ok(Preset::Paper),
        _ => Err(format!("unknown preset '{s}' (expected desk or paper)")),
    }
}

enum Failure {
    Usage(String),
    Runtime(mvp3d::Error),
}

impl From<mvp3d::Error> for Failure {
    fn from(e: mvp3d::Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn load_config(path: &Path, mode: Mode) -> CliResult<RunConfig> {
    RunConfig::load(path, mode).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn ply_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| {
        Failure::Runtime(mvp3d::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ply"))
        .collect();
    files.sort();
    Ok(files)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(mvp3d::Error::from)?;
    fs::write(path, text).map_err(|e| {
        Failure::Runtime(mvp3d::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::GenCorpus { out, n, seed, config } => {
            let mut cfg = match &config {
                Some(p) => load_config(p, Mode::Pretrain)?,
                None => RunConfig::preset(Preset::Desk, Mode::Pretrain),
            };
            cfg.corpus.n_scenes = n;
            cfg.corpus.seed = seed;
            let episodes = gen_episodes(&out, n, seed, &cfg.corpus.spec)?;
            cfg.write_resolved(&out)?;
            println!("wrote {} scenes to {}", episodes.len(), out.display());
        }
        Command::Render {
            scene,
            out,
            width,
            height,
        } => {
            let cloud = load_ply(&scene)?;
            let obs = render_all(&cloud, width, height);
            fs::create_dir_all(&out).map_err(|e| mvp3d::Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let stem = scene.file_stem().map_or("scene".into(), |s| s.to_string_lossy().into_owned());
            let written = dump_observation(&out, &stem, &obs)?;
            println!("wrote {} images to {}", written.len(), out.display());
        }
        Command::Pretrain {
            config,
            out,
            seed,
            loss_masked_only,
        } => {
            let mut cfg = load_config(&config, Mode::Pretrain)?;
            if let Some(s) = seed {
                cfg.model.seed = s;
                cfg.train.seed = s;
            }
            cfg.train.loss_masked_only |= loss_masked_only;
            cfg.write_resolved(&out)?;
            let corpus: Vec<SceneSource> = match &cfg.corpus.scenes {
                Some(dir) => ply_files(dir)?.into_iter().map(SceneSource::Path).collect(),
                None => (0..cfg.corpus.n_scenes as u64)
                    .map(|i| Ok(SceneSource::Cloud(gen_scene(cfg.corpus.seed + i, &cfg.corpus.spec)?.0)))
                    .collect::<mvp3d::Result<_>>()?,
            };
            let t = Instant::now();
            let outcome = pretrain(&corpus, &cfg.model, &cfg.train, Some(&out))?;
            report_losses(&outcome.losses, outcome.steps, t);
            if outcome.skipped > 0 {
                println!("skipped {} unreadable scenes", outcome.skipped);
            }
            println!("checkpoint {}", out.join(FINAL_CHECKPOINT).display());
        }
        Command::Finetune {
            config,
            out,
            init,
            seed,
        } => {
            let mut cfg = load_config(&config, Mode::Finetune)?;
            if let Some(s) = seed {
                cfg.model.seed = s;
                cfg.train.seed = s;
            }
            cfg.write_resolved(&out)?;
            let demos = match &cfg.corpus.episodes {
                Some(p) => load_demos(&read_episodes(&manifest_path(p))?)?,
                None => (0..cfg.corpus.n_demos as u64)
                    .map(|i| Demo::generate(cfg.corpus.seed + i, &cfg.corpus.spec))
                    .collect::<mvp3d::Result<_>>()?,
            };
            let init = match &init {
                Some(p) => Some(load_checkpoint(p)?.0),
                None => {
                    info!("no --init given; training from scratch");
                    None
                }
            };
            let t = Instant::now();
            let outcome = finetune(&demos, init.as_ref(), &cfg.model, &cfg.train, Some(&out))?;
            report_losses(&outcome.losses, outcome.steps, t);
            let train = eval_success(&outcome.params, &demos)?;
            println!(
                "train success {:.3}, mean position error {:.4}",
                train.success_rate, train.mean_pos_err
            );
            println!("checkpoint {}", out.join(FINAL_CHECKPOINT).display());
        }
        Command::Reconstruct {
            ckpt,
            scenes,
            out,
            ratio,
            seed,
        } => {
            let (params, _) = load_checkpoint(&ckpt)?;
            let named = ply_files(&scenes)?
                .into_iter()
                .map(|p| {
                    let name = p.file_stem().expect("ply file name").to_string_lossy().into_owned();
                    Ok((name, load_ply(&p)?))
                })
                .collect::<mvp3d::Result<Vec<_>>>()?;
            let strategy = params.config().strategy;
            let report = reconstruct_report(&params, &named, ratio, strategy, seed, Some(&out))?;
            write_json(&out.join("recon.json"), &report)?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.5}"));
            println!("scenes {}", report.scenes.len());
            println!("masked mse {}", fmt(report.mean_masked_mse));
            println!("unmasked mse {}", fmt(report.mean_unmasked_mse));
            println!("copy baseline mse {}", fmt(report.mean_copy_baseline_mse));
            println!("beats copy baseline on {}", fmt(report.beats_copy_fraction()));
        }
        Command::Eval {
            ckpt,
            episodes,
            sweep,
            magnitude,
            kinds,
            seed,
            out,
        } => {
            let (params, _) = load_checkpoint(&ckpt)?;
            let demos = load_demos(&read_episodes(&manifest_path(&episodes))?)?;
            let report = eval_success(&params, &demos)?;
            println!(
                "episodes {}, success {:.3}, mean position error {:.4}",
                demos.len(),
                report.success_rate,
                report.mean_pos_err
            );
            if let Some(dir) = &out {
                fs::create_dir_all(dir).map_err(|e| mvp3d::Error::Io {
                    path: dir.clone(),
                    source: e,
                })?;
                write_json(&dir.join("success.json"), &report)?;
            }
            if sweep {
                let kinds = if kinds.is_empty() {
                    PerturbationKind::ALL.to_vec()
                } else {
                    kinds
                };
                let rows = perturbation_sweep(&params, &demos, &kinds, magnitude, seed)?;
                let csv = sweep_csv(&rows);
                print!("{csv}");
                if let Some(dir) = &out {
                    let path = dir.join("sweep.csv");
                    fs::write(&path, csv).map_err(|e| mvp3d::Error::Io { path, source: e })?;
                }
            }
        }
        Command::Gradcheck { preset, seed, batch } => {
            let cfg = match preset {
                Preset::Desk => ModelConfig::desk(),
                Preset::Paper => ModelConfig::paper(),
            };
            let t = Instant::now();
            let report = gradcheck_preset(&ModelConfig { seed, ..cfg }, batch.max(1), seed)?;
            for (path, r) in [("pretrain", &report.pretrain), ("finetune", &report.finetune)] {
                let worst = r.worst().map_or("-", |w| w.name.as_str());
                println!("{path}: max rel err {:.3e} ({worst})", r.max_rel_err);
            }
            let max = report.max_rel_err();
            println!("max rel err {max:.3e} in {:.1}s", t.elapsed().as_secs_f64());
            if max.is_nan() || max >= GRADCHECK_TOL {
                return Err(Failure::Runtime(mvp3d::Error::NonFinite(format!(
                    "gradient check: max rel err {max:.3e} is not below {GRADCHECK_TOL:e}"
                ))));
            }
        }
    }
    Ok(())
}

fn report_losses(losses: &[f64], steps: usize, t: Instant) {
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!(
            "{steps} steps in {:.1}s, loss {first:.5} -> {last:.5}",
            t.elapsed().as_secs_f64()
        );
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
