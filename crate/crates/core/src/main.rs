use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use excite_lens::analysis::Grouping;
use excite_lens::report::{self, RunConfig};
use excite_lens::Error;

/// Excitation backprop attribution, map statistics and unit analysis.
#[derive(Debug, Parser)]
#[command(name = "excite-lens", version)]
struct Cli {
    /// TOML or `key = value` file; flags override it.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic three-brand dataset and its template network.
    Synth(RunArgs),
    /// Predict a brand for every test image.
    Predict(RunArgs),
    /// Excitation maps and strength/extent statistics per test image.
    Attribute(RunArgs),
    /// Brand summaries, logo correlations and unit rankings.
    Report(RunArgs),
    /// Unit rankings, specialist counts and top examples.
    Units(RunArgs),
    /// Heatmap images of the aggregate excitation map.
    Heatmap {
        #[command(flatten)]
        run: RunArgs,
        /// Image id to render (repeatable); all test images when omitted.
        #[arg(long = "image")]
        images: Vec<String>,
        /// Skip the blended overlay image.
        #[arg(long)]
        no_overlay: bool,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Layer to attribute at (default: the model's own).
    #[arg(long)]
    target_layer: Option<String>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    top_n: Option<usize>,
    /// Images listed per unit in top_examples.json.
    #[arg(long)]
    top_examples: Option<usize>,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, capped by EXCITE_LENS_THREADS.
    #[arg(short = 'j', long)]
    workers: Option<usize>,
    /// ground_truth or predicted.
    #[arg(long)]
    grouping: Option<Grouping>,
    #[arg(long)]
    images_per_brand: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
}

impl RunArgs {
    fn apply(self, cfg: &mut RunConfig) {
        macro_rules! take {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            )*};
        }
        macro_rules! take_opt {
            ($($field:ident),*) => {$(
                if self.$field.is_some() {
                    cfg.$field = self.$field;
                }
            )*};
        }
        take_opt!(model, manifest, annotations, target_layer);
        take!(bins, alpha, top_n, top_examples, output, seed, workers, grouping, images_per_brand, image_size);
    }
}

fn config_for(file: Option<&PathBuf>, args: RunArgs) -> excite_lens::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = file {
        cfg.apply_file(p)?;
    }
    args.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> excite_lens::Result<Vec<PathBuf>> {
    let file = cli.config.as_ref();
    match cli.command {
        Command::Synth(a) => report::cmd_synth(&config_for(file, a)?),
        Command::Predict(a) => report::cmd_predict(&config_for(file, a)?),
        Command::Attribute(a) => report::cmd_attribute(&config_for(file, a)?),
        Command::Report(a) => report::cmd_report(&config_for(file, a)?),
        Command::Units(a) => report::cmd_units(&config_for(file, a)?),
        Command::Heatmap {
            run,
            images,
            no_overlay,
        } => report::cmd_heatmap(&config_for(file, run)?, &images, !no_overlay),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(written) => {
            for p in written {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.class().exit_code() as u8
}
