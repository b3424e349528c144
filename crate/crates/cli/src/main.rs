//! `tgr`: data generation, teacher and student training, evaluation,
//! routing analysis, expert-count sweeps and plotting.

mod analyze;
mod commands;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

/// Misuse of the command line (exit code 2).
#[derive(Debug)]
pub struct UsageError {
    pub message: String,
    pub subcommand: Option<&'static str>,
}

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(subcommand: &'static str, message: impl Into<String>) -> anyhow::Error {
    UsageError {
        message: message.into(),
        subcommand: Some(subcommand),
    }
    .into()
}

#[derive(Parser, Debug)]
#[command(
    name = "tgr",
    version,
    about = "Teacher-guided routing for sparse mixture-of-experts"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Overrides the seed of the resolved config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON config for the subcommand; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory [default: $TGR_OUT, else ./tgr-out].
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// No progress output on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

impl Global {
    pub fn out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os("TGR_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("tgr-out"))
    }

    pub fn progress(&self, line: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", line.as_ref());
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic token-classification dataset.
    GenData(GenDataArgs),
    /// Train a dense teacher and freeze it.
    TrainTeacher(TrainArgs),
    /// Train a student variant from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Routing analyses over traces and checkpoints.
    Analyze(AnalyzeArgs),
    /// Train vmoe and tgr arms across expert counts and seeds.
    Sweep(SweepArgs),
    /// Render CSV series (x,series_name,value) to SVG or merged CSV.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Number of classes C.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Number of prototype components M.
    #[arg(long)]
    pub components: Option<usize>,
    /// Dimension of each input token.
    #[arg(long)]
    pub token_dim: Option<usize>,
    /// Tokens per sample N.
    #[arg(long)]
    pub tokens: Option<usize>,
    /// Standard deviation of the token noise.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Training samples.
    #[arg(long)]
    pub train_samples: Option<usize>,
    /// Validation samples.
    #[arg(long)]
    pub val_samples: Option<usize>,
    /// How a sample's components determine its label.
    #[arg(long, value_enum)]
    pub label_rule: Option<LabelRuleArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LabelRuleArg {
    MajorityComponent,
    ComponentPairParity,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory (overrides `data_dir`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Frozen teacher checkpoint (overrides `teacher_checkpoint`).
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Checkpoint to warm-start from (overrides `init_checkpoint`).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Method variant, e.g. dense, vmoe, tgr, upper_bound.
    #[arg(long)]
    pub variant: Option<String>,
    /// Number of training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Experts per MoE layer.
    #[arg(long)]
    pub experts: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum, serde::Serialize, serde::Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum RoutingArg {
    Student,
    Teacher,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint directory to evaluate.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory [default: the run's `data_dir`].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Dataset split to evaluate [default: val].
    #[arg(long, value_enum)]
    pub split: Option<Split>,
    /// Router that selects experts [default: student].
    #[arg(long, value_enum)]
    pub routing: Option<RoutingArg>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(subcommand)]
    pub analysis: Analysis,
}

#[derive(Subcommand, Debug)]
pub enum Analysis {
    /// Agreement of each snapshot with the final one, or between epochs
    /// `stride` apart.
    Agreement {
        /// Routing trace written by a training run.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Reference snapshot [default: final].
        #[arg(long, value_enum)]
        mode: Option<AgreementMode>,
        /// Epoch distance in consecutive mode [default: 5].
        #[arg(long)]
        stride: Option<u32>,
        /// Series name in the CSV output.
        #[arg(long)]
        label: Option<String>,
    },
    /// Normalized routing entropy per layer, from a trace (per epoch) or a
    /// checkpoint.
    Entropy {
        /// Routing trace; gives one row per epoch and layer.
        #[arg(long, conflicts_with = "checkpoint")]
        trace: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Entropy of the mean router probabilities instead of top-1 counts.
        #[arg(long)]
        mean_prob: bool,
    },
    /// Per-layer top-1 agreement of a run's teacher and student routers.
    TeacherAgreement {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Probe samples [default: the run's probe size].
        #[arg(long)]
        probe_size: Option<usize>,
    },
    /// Expert token counts and importance per layer.
    Utilization {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<Split>,
    },
    /// Routing agreement of two checkpoints on the first one's probe set.
    Preservation {
        #[arg(long)]
        before: Option<PathBuf>,
        #[arg(long)]
        after: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Probe samples [default: the run's probe size].
        #[arg(long)]
        probe_size: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementMode {
    Final,
    Consecutive,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Comma-separated expert counts.
    #[arg(long, value_delimiter = ',')]
    pub experts: Vec<usize>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Comma-separated variants [default: vmoe,tgr].
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    /// Runs trained at once.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Dataset directory (overrides `data_dir`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Frozen teacher checkpoint (overrides `teacher_checkpoint`).
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Training epochs of every arm.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epoch stride of the consecutive-agreement column.
    #[arg(long)]
    pub stride: Option<u32>,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// CSV files with header `x,series_name,value`.
    #[arg(long = "input")]
    pub inputs: Vec<PathBuf>,
    /// Output file; the extension (.svg or .csv) picks the format.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Chart title.
    #[arg(long)]
    pub title: Option<String>,
    /// X-axis label.
    #[arg(long)]
    pub x_label: Option<String>,
    /// Y-axis label.
    #[arg(long)]
    pub y_label: Option<String>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        2
    } else {
        1
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// The error chain joined with `: `, skipping causes the message already
/// quotes.
fn chain_message(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let c = cause.to_string();
        if !msg.contains(&c) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&c);
        }
    }
    one_line(&msg)
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
pub fn emit(text: &str) -> anyhow::Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                eprintln!("ERROR 2: missing subcommand");
                eprintln!("{}", Cli::command().render_usage());
                return ExitCode::from(2);
            }
            let text = e.to_string();
            let mut lines = text.lines();
            let first = lines.next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("ERROR 2: {}", one_line(first));
            for l in lines {
                eprintln!("{l}");
            }
            return ExitCode::from(2);
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            eprintln!("ERROR {code}: {}", chain_message(&err));
            if let Some(UsageError {
                subcommand: Some(sub), ..
            }) = err.downcast_ref::<UsageError>()
            {
                let mut cmd = Cli::command();
                if let Some(sc) = cmd.find_subcommand_mut(sub) {
                    let mut sc = sc.clone().bin_name(format!("tgr {sub}"));
                    eprintln!("\n{}", sc.render_usage());
                }
            }
            ExitCode::from(code)
        }
    }
}
