use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use log::{error, LevelFilter};
use sobotrim::cli::{run, write_error, Command, RunConfig};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Energy,
    Approximate,
    Counterexample,
    Calibrate,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Command {
        match c {
            Cmd::Energy => Command::Energy,
            Cmd::Approximate => Command::Approximate,
            Cmd::Counterexample => Command::Counterexample,
            Cmd::Calibrate => Command::Calibrate,
        }
    }
}

/// Grid laboratory for approximating manifold-valued Sobolev maps by bounded maps.
#[derive(Parser, Debug)]
#[command(name = "sobotrim", version)]
struct Args {
    command: Cmd,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Worker thread cap.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn init_logging() {
    let level = match std::env::var("SOBOTRIM_LOG").as_deref() {
        Ok("quiet") => LevelFilter::Off,
        Ok("info") => LevelFilter::Info,
        Ok("debug") => LevelFilter::Debug,
        _ => LevelFilter::Warn,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn main() -> ExitCode {
    init_logging();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = args.threads {
        if n == 0 || rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            eprintln!("invalid thread count {n}");
            return ExitCode::from(2);
        }
    }
    let cfg = match RunConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            return ExitCode::from(write_error(&args.out, &e) as u8);
        }
    };
    let command: Command = args.command.into();
    if let Some(c) = cfg.command {
        if c != command {
            log::warn!("config names command {c:?}; running {command:?}");
        }
    }
    let (code, res) = run(command, &cfg, &args.out);
    match res {
        Ok(o) => {
            println!("{}", o.summary);
            for f in &o.files {
                println!("wrote {}", f.display());
            }
        }
        Err(e) => eprintln!("error: {e}"),
    }
    ExitCode::from(code as u8)
}
