//! The `segmap` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use segmap_core::eval::render_table;
use segmap_core::gradcheck::GradCheckOptions;
use segmap_core::model::Model;
use segmap_core::scene::{generate_dataset, SurroundFrame};
use segmap_core::suite::gradient_suite;
use segmap_core::train::Trainer;
use segmap_core::Config;

use crate::checkpoint::Checkpoint;
use crate::config_file::{apply_override, load_config, to_toml};
use crate::dataset::{load_dataset, save_dataset};
use crate::error::{Error, Result};
use crate::overlay;
use crate::runner::{self, evaluate_model, module_variants, resolution_variants, run_ablation, RESOLUTION_NOTE};

/// Largest finite-difference relative error the gradient suite accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "segmap", version, about = "Vectorized BEV map construction with semantic guidance")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration file (defaults apply to missing keys).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints and `metrics.jsonl` to `--out`.
    Train {
        /// Dataset directory; synthesized from the configuration when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint (its configuration is used).
        #[arg(long, conflicts_with = "init")]
        resume: Option<PathBuf>,
        /// Warm start: initialise every parameter whose name and shape match
        /// from this checkpoint, then train the configured model afresh.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Stop after this many completed steps instead of the configured budget.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report path stem: writes `<out>.json` and `<out>.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for per-frame BEV overlay images.
        #[arg(long)]
        overlays: Option<PathBuf>,
    },
    /// Train and evaluate the ablation variants.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Table::Modules)]
        table: Table,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Table {
    /// Module ablation (five rows).
    Modules,
    /// Input resolution and backbone width (three rows).
    Resolution,
    Both,
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 2 on usage errors, 1 on any other error. Errors are printed to `err` as
/// a single `error kind=... msg="..."` line.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            let _ = writeln!(err, "{}", Error::Usage(first.to_string()).one_line());
            return 2;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", e.one_line());
            if matches!(e, Error::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn frames_for(cfg: &Config, data: Option<&Path>) -> Result<Vec<SurroundFrame>> {
    match data {
        Some(dir) => {
            let (scene, frames) = load_dataset(dir)?;
            if scene != cfg.scene {
                return Err(Error::Usage(format!(
                    "dataset {} was generated with a different scene configuration",
                    dir.display()
                )));
            }
            Ok(frames)
        }
        None => Ok(generate_dataset(&cfg.scene)?),
    }
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Synth { out: dir } => {
            let cfg = load_config(g.config.as_deref(), &g.sets)?;
            let frames = generate_dataset(&cfg.scene)?;
            save_dataset(dir, &cfg.scene, &frames)?;
            say(out, format!("wrote {} frames to {}", frames.len(), dir.display()))
        }
        Command::Train {
            data,
            out: dir,
            resume,
            init,
            steps,
        } => {
            let (cfg, ck) = match resume {
                Some(p) => {
                    if g.config.is_some() || !g.sets.is_empty() {
                        return Err(Error::Usage("--resume uses the checkpoint's configuration; drop --config/--set".into()));
                    }
                    let ck = Checkpoint::load(p)?;
                    (ck.config.clone(), Some(ck))
                }
                None => (load_config(g.config.as_deref(), &g.sets)?, None),
            };
            let frames = frames_for(&cfg, data.as_deref())?;
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            write_text(&dir.join("config.toml"), &to_toml(&cfg))?;
            let mut trainer = match ck {
                Some(ck) => ck.into_trainer()?,
                None => Trainer::new(&cfg)?,
            };
            if let Some(p) = init {
                let missed = Checkpoint::load(p)?.warm_start(&mut trainer.model);
                let total = trainer.model.store.iter().count();
                say(out, format!("warm start: {} of {total} parameters from {}", total - missed.len(), p.display()))?;
            }
            let started = Instant::now();
            let trainer = runner::train_with(trainer, &frames, Some(dir), *steps, &mut |r| {
                let _ = writeln!(
                    out,
                    "step {} epoch {} lr {:.3e} loss {:.6} grad_norm {:.3}",
                    r.step, r.epoch, r.lr, r.loss.total, r.grad_norm
                );
            })?;
            say(
                out,
                format!(
                    "trained to step {} in {:.1}s; checkpoint {}",
                    trainer.step,
                    started.elapsed().as_secs_f64(),
                    dir.join(runner::FINAL_CHECKPOINT).display()
                ),
            )
        }
        Command::Eval {
            checkpoint,
            data,
            out: report,
            overlays,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            let mut cfg = match &g.config {
                Some(_) => load_config(g.config.as_deref(), &[])?,
                None => ck.config.clone(),
            };
            for s in &g.sets {
                cfg = apply_override(&cfg, s)?;
            }
            cfg.validate()?;
            let mut model = Model::<f32>::new(&cfg)?;
            ck.load_weights(&mut model)?;
            let frames = frames_for(&cfg, data.as_deref())?;
            let ev = evaluate_model(&model, &frames, &cfg.eval)?;
            let row = segmap_core::eval::AblationRow::from_report(
                &cfg.module_label(),
                (cfg.scene.image_h, cfg.scene.image_w),
                &ev.report,
            );
            let mut text = render_table("Module", &[row]);
            if let Some(iou) = ev.bev_iou {
                text.push_str(&format!("bev foreground IoU {iou:.4}\n"));
            }
            for (i, t) in cfg.eval.thresholds.iter().enumerate() {
                text.push_str(&format!("map@{t:.1} {:.4}\n", ev.report.map_at(i)));
            }
            if let Some(stem) = report {
                let json = serde_json::to_string_pretty(&ev).expect("report serializes");
                write_text(&with_ext(stem, "json"), &(json + "\n"))?;
                write_text(&with_ext(stem, "txt"), &text)?;
            }
            if let Some(dir) = overlays {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let grid = cfg.scene.grid()?;
                for (i, f) in frames.iter().enumerate() {
                    let png = overlay::render(
                        &grid,
                        &f.bev_mask,
                        ev.seg[i].as_deref(),
                        &f.elements,
                        &ev.detections[i],
                        cfg.eval.score_min,
                    );
                    let p = dir.join(format!("frame_{i:05}.png"));
                    std::fs::write(&p, png).map_err(|e| Error::io(&p, e))?;
                }
            }
            say(out, text.trim_end())
        }
        Command::Ablate { data, out: dir, table } => {
            let cfg = load_config(g.config.as_deref(), &g.sets)?;
            let frames = frames_for(&cfg, data.as_deref())?;
            let mut studies = Vec::new();
            if matches!(table, Table::Modules | Table::Both) {
                studies.push(("modules", "Module", module_variants(), None));
            }
            if matches!(table, Table::Resolution | Table::Both) {
                studies.push(("resolution", "backbone", resolution_variants(&cfg), Some(RESOLUTION_NOTE)));
            }
            for (stem, first, variants, note) in studies {
                let started = Instant::now();
                let rows = run_ablation(&cfg, &frames, &variants, &mut |_, _| {})?;
                let mut text = render_table(first, &rows);
                if let Some(n) = note {
                    text.push_str(&format!("note: {n}\n"));
                }
                let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
                write_text(&dir.join(format!("{stem}.txt")), &text)?;
                write_text(&dir.join(format!("{stem}.json")), &(json + "\n"))?;
                say(out, text.trim_end())?;
                say(out, format!("{} rows in {:.1}s", rows.len(), started.elapsed().as_secs_f64()))?;
            }
            Ok(())
        }
        Command::Gradcheck => {
            let started = Instant::now();
            let reports = gradient_suite(GradCheckOptions::default())?;
            let mut worst = 0.0f64;
            for r in &reports {
                let ok = r.max_rel_err <= GRADCHECK_TOLERANCE;
                say(
                    out,
                    format!(
                        "{:<14} max_rel_err {:.3e} coords {:>4} {}",
                        r.name,
                        r.max_rel_err,
                        r.coords_checked,
                        if ok { "ok" } else { "FAIL" }
                    ),
                )?;
                worst = worst.max(r.max_rel_err);
            }
            say(out, format!("{} checks in {:.2}s", reports.len(), started.elapsed().as_secs_f64()))?;
            if worst > GRADCHECK_TOLERANCE || worst.is_nan() {
                return Err(segmap_core::Error::Domain(format!(
                    "gradient check failed: max relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}"
                ))
                .into());
            }
            Ok(())
        }
    }
}
