//! Command-line front end. Exit codes: 0 ok, 2 usage/config, 3 numeric.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::attention::{count_flops, FlopsConfig};
use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::skeldata::{generate_synthetic, Dataset, ModalityKind, SyntheticSpec};
use crate::trainer::{evaluate, evaluate_ensemble, fit, inspect, RunConfig};

pub const THREADS_ENV: &str = "SKATE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "skateformer", version, about = "Skeletal-temporal partition transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic skeleton dataset
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        per_class: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
    },
    /// Train one modality from a run config
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        modality: Option<ModalityKind>,
        /// overrides `out_dir`
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy of one or more checkpoints
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// average softmax outputs across checkpoints
        #[arg(long)]
        ensemble: bool,
    },
    /// Attention cost of full vs partitioned attention
    Flops {
        v: u64,
        t: u64,
        c: u64,
        k: u64,
        l: u64,
        m: u64,
        n: u64,
    },
    /// Per-class Skate-Type importance and accuracy as CSV
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        per_class: bool,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

/// Relative paths in a config file are taken from the file's directory.
fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Read a run config and apply command-line overrides.
pub fn load_run(config: &Path, modality: Option<ModalityKind>, out: Option<PathBuf>) -> Result<RunConfig> {
    let text = std::fs::read_to_string(config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", config.display())))?;
    let mut run = RunConfig::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    let base = config.parent().unwrap_or(Path::new("."));
    run.train_data = resolve(base, &run.train_data);
    run.eval_data = resolve(base, &run.eval_data);
    run.out_dir = match out {
        Some(o) => o,
        None => resolve(base, &run.out_dir),
    };
    if let Some(m) = modality {
        run.modality = m;
    }
    for p in [&run.train_data, &run.eval_data] {
        if !p.is_dir() {
            return Err(Error::Config(format!("data directory {} does not exist", p.display())));
        }
    }
    Ok(run)
}

/// Run one command, writing normal output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenData { out: dir, classes, per_class, seed, noise } => {
            if classes < 2 {
                return Err(Error::Config("classes must be ≥ 2".into()));
            }
            let spec = SyntheticSpec { classes, per_class, noise_sigma: noise, ..SyntheticSpec::default() };
            let ds = generate_synthetic(&spec, seed)?;
            ds.save(&dir).map_err(|e| Error::Config(format!("cannot write {}: {e}", dir.display())))?;
            writeln!(out, "wrote {} sequences, {} classes, seed {seed} to {}", ds.len(), classes, dir.display())?;
        }
        Command::Train { config, modality, out: out_dir } => {
            let run = load_run(&config, modality, out_dir)?;
            let train = Dataset::load(&run.train_data)?;
            let eval = Dataset::load(&run.eval_data)?;
            writeln!(
                out,
                "modality={} train={} eval={} classes={} epochs={} seed={}",
                run.modality,
                train.len(),
                eval.len(),
                train.num_classes(),
                run.optim.epochs,
                run.seed
            )?;
            let dir = run.out_dir.clone();
            let mut io_err = None;
            let summary = fit(&run, &train, &eval, &dir, |m| {
                let r = writeln!(
                    out,
                    "epoch {:>3} lr {:.3e} train_loss {:.4} train_acc {:.4} eval_loss {:.4} eval_acc {:.4}",
                    m.epoch, m.lr, m.train_loss, m.train_acc, m.eval_loss, m.eval_acc
                );
                if let Err(e) = r {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            writeln!(out, "params={} best_epoch={} dir={}", summary.num_params, summary.best_epoch, dir.display())?;
            writeln!(out, "best_acc={:.6}", summary.best_acc)?;
        }
        Command::Eval { ckpt, data, ensemble } => {
            let ds = Dataset::load(&data)?;
            let ckpts = ckpt.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
            if let Some(bad) = ckpts.iter().find(|c| c.config.num_classes != ckpts[0].config.num_classes) {
                return Err(Error::Config(format!(
                    "checkpoints disagree on class count ({} vs {})",
                    ckpts[0].config.num_classes, bad.config.num_classes
                )));
            }
            if ensemble {
                let r = evaluate_ensemble(&ckpts, &ds)?;
                writeln!(out, "ensemble of {} loss={:.6} accuracy={:.6}", ckpts.len(), r.loss, r.accuracy)?;
            } else {
                for (p, c) in ckpt.iter().zip(&ckpts) {
                    let r = evaluate(&c.params, &c.config, &ds, c.modality)?;
                    writeln!(out, "{} modality={} loss={:.6} accuracy={:.6}", p.display(), c.modality, r.loss, r.accuracy)?;
                }
            }
        }
        Command::Flops { v, t, c, k, l, m, n } => {
            let rep = count_flops(&FlopsConfig { v, t, c, k, l, m, n })?;
            writeln!(out, "{}", rep.to_json())?;
        }
        Command::Inspect { ckpt, data, per_class: _ } => {
            let ck = Checkpoint::load(&ckpt)?;
            let ds = Dataset::load(&data)?;
            writeln!(out, "class,name,type1,type2,type3,type4,accuracy")?;
            for r in inspect(&ck, &ds)? {
                let [a, b, c, d] = r.scores;
                writeln!(out, "{},{},{a:.6e},{b:.6e},{c:.6e},{d:.6e},{:.6}", r.class, r.name, r.accuracy)?;
            }
        }
    }
    Ok(())
}

/// Size the global worker pool from `SKATE_THREADS` if set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Parse arguments, run, and map the outcome to a process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = init_threads().and_then(|_| run(cli, &mut std::io::stdout().lock()));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::CONFIG_FILE;

    fn run_args(args: &[&str]) -> (Result<()>, String) {
        let cli = Cli::try_parse_from(std::iter::once("skateformer").chain(args.iter().copied())).unwrap();
        let mut buf = Vec::new();
        let r = run(cli, &mut buf);
        (r, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn flops_prints_exact_ratio() {
        let (r, s) = run_args(&["flops", "48", "64", "96", "12", "4", "8", "8"]);
        r.unwrap();
        assert!(s.contains("\"ratio\":48.000"), "{s}");
        let (r, s) = run_args(&["flops", "20", "64", "96", "5", "4", "8", "8"]);
        r.unwrap();
        assert!(s.contains("\"ratio_exact\":\"320/9\""), "{s}");
        assert!(s.contains("\"ratio\":35.556"), "{s}");
        let (r, _) = run_args(&["flops", "21", "64", "96", "5", "4", "8", "8"]);
        assert_eq!(exit_code(&r.unwrap_err()), 2);
    }

    #[test]
    fn gen_data_rejects_one_class() {
        let dir = tempfile::tempdir().unwrap();
        let (r, _) = run_args(&["gen-data", "--out", dir.path().to_str().unwrap(), "--classes", "1"]);
        let e = r.unwrap_err();
        assert_eq!(exit_code(&e), 2);
        assert!(e.to_string().contains("classes must be ≥ 2"));
    }

    #[test]
    fn relative_config_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("tr")).unwrap();
        std::fs::create_dir_all(dir.path().join("ev")).unwrap();
        let cfg = dir.path().join(CONFIG_FILE);
        std::fs::write(&cfg, "data.train = tr\ndata.eval = ev\nout_dir = o\n").unwrap();
        let run = load_run(&cfg, Some(ModalityKind::Bone), None).unwrap();
        assert_eq!(run.train_data, dir.path().join("tr"));
        assert_eq!(run.out_dir, dir.path().join("o"));
        assert_eq!(run.modality, ModalityKind::Bone);
        std::fs::write(&cfg, "data.train = missing\n").unwrap();
        assert!(load_run(&cfg, None, None).is_err());
    }
}
