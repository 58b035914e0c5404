//! `crda` command dispatch. Every failure becomes a [`CliError`] carrying
//! the process exit code and a one-line message.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use crda_core::checkpoint::Checkpoint;
use crda_core::engine::{apply_preset, evaluate, run_training, Trainer};
use crda_core::environments::partition_batch;
use crda_core::ppo::compute_gae;
use crda_core::rewards::roc_auc;
use crda_core::schedules::schedule_csv;
use crda_core::{config, CrdaError};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "crda",
    version,
    about = "Curriculum RL augmentation trainer on a synthetic detection task"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Sectioned `key = value` config file; missing keys take defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override one key after the file is read, e.g. `--set ppo.clip=0.1`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory; replaces `engine.out_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run full training and write metrics, summary and a final checkpoint.
    Train,
    /// Run one ablation preset into `<out>/ablate_<id>`.
    Ablate {
        #[arg(value_parser = clap::value_parser!(u8).range(1..=5))]
        preset: u8,
    },
    /// Print the curriculum schedules as CSV, one row per epoch.
    DumpSchedules,
    /// Cross-check helpers reading CSV from a file or stdin.
    Oracle {
        kind: OracleKind,
        /// Input CSV; stdin when absent or `-`.
        input: Option<PathBuf>,
        /// Value after the last row, for `gae`.
        #[arg(long, default_value_t = 0.0)]
        bootstrap: f64,
    },
    /// Score a checkpoint on its run's validation and shift sets.
    Eval { checkpoint: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleKind {
    Auc,
    Gae,
    Partition,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    /// The message as printed: one line, `error:` prefix.
    pub fn line(&self) -> String {
        let flat = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error: {flat}")
    }
}

impl From<CrdaError> for CliError {
    fn from(e: CrdaError) -> Self {
        let code = if e.is_config() {
            EXIT_CONFIG
        } else if e.is_numeric() {
            EXIT_NUMERIC
        } else {
            EXIT_FAILURE
        };
        Self::new(code, e.to_string())
    }
}

fn io_err(e: io::Error) -> CliError {
    CliError::new(EXIT_FAILURE, e.to_string())
}

/// Parses `args` and runs the command. Returns the exit code; errors are
/// written to `err` as a single `error:` line.
pub fn execute<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let e = CliError::new(EXIT_CONFIG, first.trim_start_matches("error:").trim());
            let _ = writeln!(err, "{}", e.line());
            return e.code;
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", e.line());
            e.code
        }
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Train => {
            let cfg = load_config(cli)?;
            train(cfg, out)
        }
        Command::Ablate { preset } => {
            let mut cfg = load_config(cli)?;
            apply_preset(&mut cfg.engine, *preset)?;
            cfg.engine.out_dir = Path::new(&cfg.engine.out_dir)
                .join(format!("ablate_{preset}"))
                .to_string_lossy()
                .into_owned();
            train(cfg, out)
        }
        Command::DumpSchedules => {
            let cfg = load_config(cli)?;
            out.write_all(schedule_csv(&cfg.curriculum())?.as_bytes())
                .map_err(io_err)
        }
        Command::Oracle { kind, input, bootstrap } => {
            let cfg = load_config(cli)?;
            let rows = read_rows(input.as_deref())?;
            match kind {
                OracleKind::Auc => oracle_auc(&rows, out),
                OracleKind::Gae => oracle_gae(&rows, *bootstrap, cfg.ppo.discount, cfg.ppo.gae_lambda, out),
                OracleKind::Partition => oracle_partition(&rows, out),
            }
        }
        Command::Eval { checkpoint } => eval(checkpoint, out),
    }
}

/// File values, then `--set`, then `--seed` and `--out`, then validation.
pub fn load_config(cli: &Cli) -> Result<crda_core::engine::TrainConfig, CliError> {
    let text = match &cli.config {
        Some(path) => fs::read_to_string(path)
            .map_err(|e| CliError::new(EXIT_CONFIG, format!("cannot read config {}: {e}", path.display())))?,
        None => String::new(),
    };
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("engine.seed={seed}"));
    }
    if let Some(dir) = &cli.out {
        overrides.push(format!("engine.out_dir={}", dir.display()));
    }
    Ok(config::parse_with_overrides(&text, &overrides)?)
}

fn train(cfg: crda_core::engine::TrainConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let dir = PathBuf::from(&cfg.engine.out_dir);
    let report = run_training(cfg, Some(&dir))?;
    let s = &report.summary;
    let lines = [
        ("final_val_auc", s.final_val_auc),
        ("final_val_ce", s.final_val_ce),
        ("final_shift_auc", s.final_shift_auc),
        ("best_val_auc", s.best_val_auc),
        ("final_train_ce", s.final_train_ce),
    ];
    writeln!(out, "epochs {}", s.epochs).map_err(io_err)?;
    for (name, v) in lines {
        writeln!(out, "{name} {v:.12}").map_err(io_err)?;
    }
    writeln!(out, "out_dir {}", dir.display()).map_err(io_err)
}

fn eval(path: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(path)?;
    let trainer = Trainer::from_checkpoint(&ckpt)?;
    let (val_auc, val_ce) = evaluate(trainer.detector(), trainer.validation_set())?;
    let (shift_auc, shift_ce) = evaluate(trainer.detector(), trainer.shift_set())?;
    writeln!(out, "epoch {}", ckpt.epoch).map_err(io_err)?;
    for (name, v) in [
        ("val_auc", val_auc),
        ("val_ce", val_ce),
        ("shift_auc", shift_auc),
        ("shift_ce", shift_ce),
    ] {
        writeln!(out, "{name} {v:.12}").map_err(io_err)?;
    }
    Ok(())
}

/// Numeric CSV rows. Blank lines and `#` comments are skipped; a first
/// line that does not parse is taken as a header.
pub fn parse_rows(text: &str) -> Result<Vec<Vec<f64>>, CliError> {
    let mut rows = Vec::new();
    let mut first = true;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed: Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if first => {}
            Err(_) => {
                return Err(CliError::new(
                    EXIT_FAILURE,
                    format!("input line {}: not numeric: `{line}`", n + 1),
                ));
            }
        }
        first = false;
    }
    if rows.is_empty() {
        return Err(CliError::new(EXIT_FAILURE, "input has no data rows"));
    }
    Ok(rows)
}

fn read_rows(input: Option<&Path>) -> Result<Vec<Vec<f64>>, CliError> {
    let text = match input {
        Some(p) if p != Path::new("-") => fs::read_to_string(p)
            .map_err(|e| CliError::new(EXIT_FAILURE, format!("cannot read {}: {e}", p.display())))?,
        _ => {
            let mut s = String::new();
            io::stdin().read_to_string(&mut s).map_err(io_err)?;
            s
        }
    };
    parse_rows(&text)
}

fn columns<const N: usize>(rows: &[Vec<f64>], names: &str) -> Result<[Vec<f64>; N], CliError> {
    let mut cols: [Vec<f64>; N] = std::array::from_fn(|_| Vec::with_capacity(rows.len()));
    for (i, row) in rows.iter().enumerate() {
        if row.len() != N {
            return Err(CliError::new(
                EXIT_FAILURE,
                format!("row {} has {} fields, expected {N} ({names})", i + 1, row.len()),
            ));
        }
        for (c, v) in cols.iter_mut().zip(row) {
            c.push(*v);
        }
    }
    Ok(cols)
}

pub fn oracle_auc(rows: &[Vec<f64>], out: &mut dyn Write) -> Result<(), CliError> {
    let [scores, labels] = columns::<2>(rows, "score,label")?;
    let auc = roc_auc(&scores, &labels)?;
    writeln!(out, "{auc:.12}").map_err(io_err)
}

pub fn oracle_gae(
    rows: &[Vec<f64>],
    bootstrap: f64,
    discount: f64,
    lambda: f64,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let [rewards, mut values] = columns::<2>(rows, "reward,value")?;
    values.push(bootstrap);
    let g = compute_gae(&rewards, &values, discount, lambda)?;
    writeln!(out, "t,advantage,normalized_advantage,return").map_err(io_err)?;
    for t in 0..rewards.len() {
        writeln!(
            out,
            "{t},{:.12},{:.12},{:.12}",
            g.raw_advantages[t], g.advantages[t], g.returns[t]
        )
        .map_err(io_err)?;
    }
    Ok(())
}

pub fn oracle_partition(rows: &[Vec<f64>], out: &mut dyn Write) -> Result<(), CliError> {
    let entropies: Vec<f64> = rows.iter().flatten().copied().collect();
    let p = partition_batch(&entropies)?;
    for (name, set) in ["dominant", "adv1", "adv2", "adv3"].iter().zip(p.sets()) {
        let items: Vec<String> = set.iter().map(usize::to_string).collect();
        writeln!(out, "{name} {{{}}}", items.join(", ")).map_err(io_err)?;
    }
    Ok(())
}
