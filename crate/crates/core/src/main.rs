use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use attractor_mem::bench::gradcheck::{default_arch, gradcheck};
use attractor_mem::bench::histogram::run_energy_hist;
use attractor_mem::bench::sweep::run_distortion_rate;
use attractor_mem::bench::table1::run_table1;
use attractor_mem::bench::{BenchError, Checkpoint, ExperimentConfig, JsonLines, Mode, Result, Table};
use attractor_mem::metatrain::{train, TrainConfig};
use attractor_mem::tape::Precision;

#[derive(Parser, Debug)]
#[command(version, about = "Associative memories: Hopfield baselines and meta-learned energy models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[arg(long, global = true)]
    precision: Option<Bits>,
    /// Omit wall-clock fields so repeated runs produce identical files.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Bits {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Meta-train an energy model.
    Train,
    /// Error versus memory size for rules and checkpoints.
    Eval,
    /// Hopfield (and optionally trained) retrieval table.
    Table1,
    /// Energies of stored, distorted and unseen patterns.
    EnergyHist,
    /// Finite-difference gradient suite.
    Gradcheck,
}

impl Command {
    fn mode(self) -> Mode {
        match self {
            Command::Train => Mode::Train,
            Command::Eval => Mode::Eval,
            Command::Table1 => Mode::Table1,
            Command::EnergyHist => Mode::EnergyHist,
            Command::Gradcheck => Mode::Gradcheck,
        }
    }
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let mode = cli.command.mode();
    let mut cfg = match &cli.config {
        Some(p) => {
            let c: ExperimentConfig = serde_json::from_str(&fs::read_to_string(p)?)?;
            if c.mode != mode {
                return Err(BenchError::Config(format!("config is for mode {:?}, command is {:?}", c.mode, mode)));
            }
            c
        }
        None => ExperimentConfig::new(mode),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.trials {
        cfg.trials = t;
    }
    if let Some(b) = cli.precision {
        let p = match b {
            Bits::F32 => Precision::F32,
            Bits::F64 => Precision::F64,
        };
        cfg.precision = p;
        if let Some(t) = cfg.train.as_mut() {
            t.precision = p;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn load_checkpoints(cfg: &ExperimentConfig) -> Result<Vec<Checkpoint>> {
    cfg.checkpoints.iter().map(|p| Ok(Checkpoint::load(p)?)).collect()
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?;
    fs::create_dir_all(&cli.out)?;
    let out = &cli.out;
    match cli.command {
        Command::Table1 => {
            let cks = load_checkpoints(&cfg)?;
            let mut log = JsonLines::new(create(out, "metrics.jsonl")?);
            let t = run_table1(&cfg, cks.first(), cli.deterministic, |r| Ok(log.push(r)?))?;
            log.flush()?;
            t.table.write_csv(create(out, "table1.csv")?)?;
            print!("{}", t.table.to_csv());
        }
        Command::Eval => {
            let cks = load_checkpoints(&cfg)?;
            let mut log = JsonLines::new(create(out, "metrics.jsonl")?);
            let rows = run_distortion_rate(&cfg, &cks, cli.deterministic, |r| Ok(log.push(r)?))?;
            log.flush()?;
            let mut t = Table::new(["tag", "n", "memory_size", "batches", "mean", "p5", "p95"].map(String::from).to_vec());
            for r in &rows {
                t.push(vec![
                    r.tag.clone(),
                    r.n.to_string(),
                    r.memory_size.to_string(),
                    r.batches.to_string(),
                    format!("{:.4}", r.mean),
                    format!("{:.4}", r.p5),
                    format!("{:.4}", r.p95),
                ]);
            }
            t.write_csv(create(out, "distortion_rate.csv")?)?;
            print!("{}", t.to_csv());
        }
        Command::EnergyHist => {
            let ck = Checkpoint::load(&cfg.checkpoints[0])?;
            let h = run_energy_hist(&cfg, &ck)?;
            h.table().write_csv(create(out, "energy_hist.csv")?)?;
            let mut log = JsonLines::new(create(out, "metrics.jsonl")?);
            for b in &h.batches {
                log.push(b)?;
            }
            log.flush()?;
            println!("separated batches: {:.3}", h.separation());
        }
        Command::Gradcheck => {
            let arch = cfg.arch.clone().unwrap_or_else(default_arch);
            let report = gradcheck(&arch, cfg.seed, None)?;
            let t = report.table();
            t.write_csv(create(out, "gradcheck.csv")?)?;
            print!("{}", t.to_csv());
            report.into_result()?;
        }
        Command::Train => train_cmd(&cfg, out, cli.deterministic)?,
    }
    Ok(())
}

fn train_cmd(cfg: &ExperimentConfig, out: &Path, deterministic: bool) -> Result<()> {
    let tc: TrainConfig = cfg.train.clone().expect("validated");
    let mut state = match cfg.checkpoints.first() {
        Some(p) => Checkpoint::load(p)?.state,
        None => tc.init_state(cfg.seed)?,
    };
    let mut source = cfg.source(tc.arch.dim())?;
    let ck_path = out.join("checkpoint.ckpt");
    let mut log = JsonLines::new(create(out, "metrics.jsonl")?);
    let start = std::time::Instant::now();
    let mut failure: Option<BenchError> = None;
    let mut last_saved = state.step;
    train(&tc, &mut state, source.as_mut(), |w, s| {
        let mut v = serde_json::to_value(w).expect("plain struct");
        if !deterministic {
            v["wall_s"] = start.elapsed().as_secs_f64().into();
        }
        let r = log.push(&v).map_err(BenchError::from).and_then(|_| {
            if cfg.checkpoint_every > 0 && s.step - last_saved >= cfg.checkpoint_every {
                last_saved = s.step;
                Checkpoint::new(s.clone(), Some(tc.clone())).save(&ck_path)?;
            }
            Ok(())
        });
        if !deterministic {
            eprintln!("step {:>6}  loss {:.4}  bits {:.3}  |g| {:.3e}", w.step, w.loss, w.bit_error, w.grad_norm);
        }
        match r {
            Ok(()) => true,
            Err(e) => {
                failure = Some(e);
                false
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    log.flush()?;
    Checkpoint::new(state, Some(tc)).save(&ck_path)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("ATTRACTOR_MEM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global().expect("thread pool set once");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
