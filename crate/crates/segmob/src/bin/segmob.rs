use std::path::PathBuf;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

use segmob::config::RunConfig;
use segmob::ingest::load_stringency;
use segmob::pipeline::{emit_plots, Pipeline, STAGES};
use segmob::segmentation::suggest_breakpoints;
use segmob::synth::{generate_city, SynthSpec};

#[derive(Parser)]
#[command(name = "segmob", version, about = "Mobility segregation analytics")]
struct Cli {
    /// Worker threads for the parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the analysis pipeline from a config file.
    Run(RunArgs),
    /// Generate a seeded synthetic city with known ground truth.
    Synth(SynthArgs),
    /// Flatten pipeline outputs into plot-ready CSV tables.
    EmitPlots {
        /// Pipeline output directory (default: $SEGMOB_OUT or ./out).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List dates where any restriction level jumps, to help pick periods.
    SuggestBreakpoints {
        /// Stringency CSV path.
        #[arg(long)]
        stringency: PathBuf,
        /// Minimum absolute level change that counts as a jump.
        #[arg(long, default_value_t = 1.0)]
        min_jump: f64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: $SEGMOB_OUT or ./out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single stage instead of the full pipeline.
    #[arg(long, value_parser = STAGES)]
    stage: Option<String>,
    /// Skip malformed trajectory rows instead of aborting.
    #[arg(long)]
    lenient: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory to write the city into.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    users: usize,
    #[arg(long, default_value_t = 100)]
    regions: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Mean non-home visits per user per day.
    #[arg(long, default_value_t = 3.0)]
    visits_per_day: f64,
    /// Fraction of nights spent at the planted home.
    #[arg(long, default_value_t = 0.95)]
    home_fidelity: f64,
    #[arg(long, default_value = "2020-01-01")]
    start: NaiveDate,
    #[arg(long, default_value_t = 60)]
    days: u32,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Baseline probability that a visit targets the visitor's own class.
    #[arg(long, default_value_t = 0.6)]
    baseline_p: f64,
    /// Mixing shift, repeatable: DATE=P switches to mixing P from DATE on.
    #[arg(long = "shift", value_parser = parse_shift)]
    shifts: Vec<(NaiveDate, f64)>,
}

fn parse_shift(s: &str) -> Result<(NaiveDate, f64), String> {
    let (date, p) = s
        .split_once('=')
        .ok_or_else(|| format!("expected DATE=P, got `{s}`"))?;
    Ok((
        date.parse().map_err(|e| format!("bad date `{date}`: {e}"))?,
        p.parse().map_err(|e| format!("bad mixing `{p}`: {e}"))?,
    ))
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("SEGMOB_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // ignore "already initialized" when embedded in tests
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            eprintln!("  caused by: {s}");
            source = s.source();
        }
        std::process::exit(1);
    }
}

fn run(command: Command) -> segmob::Result<()> {
    match command {
        Command::Run(args) => {
            let mut config = RunConfig::load(&args.config)?;
            if args.lenient {
                config.lenient = true;
            }
            let out = out_dir(args.out);
            let pipeline = Pipeline::new(config, &out)?;
            match args.stage {
                Some(stage) => pipeline.run_stage(&stage)?,
                None => pipeline.run_all()?,
            }
            println!("pipeline outputs written to {}", out.display());
        }
        Command::Synth(args) => {
            let mut mixing = vec![(args.start, args.baseline_p)];
            let mut shifts = args.shifts.clone();
            shifts.sort_by_key(|(d, _)| *d);
            mixing.extend(shifts);
            let spec = SynthSpec {
                n_users: args.users,
                n_regions: args.regions,
                n_classes: args.classes,
                mixing,
                visits_per_day: args.visits_per_day,
                home_fidelity: args.home_fidelity,
                start: args.start,
                n_days: args.days,
                seed: args.seed,
            };
            let files = generate_city(&spec, &args.out)?;
            println!(
                "wrote {} stay records under {}; run with --config {}",
                files.n_stay_records,
                args.out.display(),
                files.config.display()
            );
        }
        Command::EmitPlots { out } => {
            let out = out_dir(out);
            emit_plots(&out)?;
            println!("plot tables written to {}", out.join("plots").display());
        }
        Command::SuggestBreakpoints {
            stringency,
            min_jump,
        } => {
            let (records, gaps) = load_stringency(&stringency)?;
            for date in suggest_breakpoints(&records, min_jump) {
                println!("{date}");
            }
            if !gaps.is_empty() {
                eprintln!("warning: {} missing dates in the series", gaps.len());
            }
        }
    }
    Ok(())
}
