//! `tam`: explain, score, render and analyse exported conversations.
//!
//! Every command accepts one or more `--input` paths. A path holding a
//! `manifest.json` is a single conversation; any other directory is scanned
//! one level deep for conversation directories, in name order.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tam_core::causal::CausalConfig;
use tam_core::filter::{FilterConfig, FilterKind};
use tam_core::fuse::{ExplainConfig, PipelineStage};
use tam_core::metrics::PairingMode;

mod commands;
mod input;

pub use commands::CliError;
pub use input::{discover, Conversation};

/// Commands that would reproduce the dataset-scale tables given model
/// weights, the datasets and the exporter. Not runnable at desk scale.
pub const REPRODUCTION_RECIPE: &str = "\
Dataset-scale reproduction (needs model weights, the datasets and the exporter;
none of these ship with this tool):

  1. Export every caption conversation of the evaluation split, one dump per
     image, with masks rasterized at grid resolution:
       export --model Qwen/Qwen2-VL-2B-Instruct --prompt \"Describe this image.\" \\
              --image IMG --out dumps/coco/<id> --topk 3
       export_masks --annotations instances_val.json --dump dumps/coco/<id>
  2. Score the four ablation rows:
       tam eval --input dumps/coco --stage cam-only    --out runs/cam
       tam eval --input dumps/coco --stage eci-only    --out runs/eci
       tam eval --input dumps/coco --stage filter-only --out runs/rgf
       tam eval --input dumps/coco --stage full        --out runs/full
  3. Swap the denoiser for the filter comparison:
       tam eval --input dumps/coco --filter median|gaussian|adaptive_median --out runs/<filter>
  4. Placebo check and interference statistics:
       tam eval  --input dumps/coco --placebo --seed 0 --out runs/placebo
       tam stats --input dumps/coco --mode random --seed 0 --out runs/stats
       tam stats --input dumps/coco --mode most-related --out runs/stats-related

Expected full-row F1-IoU for that model on COCO Caption is about 39.1.
";

#[derive(Debug, Parser)]
#[command(name = "tam", version, about = "Token activation maps for multimodal language model outputs")]
pub struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, env = "TAM_THREADS", global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write one map file per answer token and an HTML report per conversation.
    Explain {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Score maps against object masks and print Obj-IoU / Func-IoU / F1-IoU.
    Eval {
        #[command(flatten)]
        io: OptionalOutArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Keep the first answer token's own map instead of the first prompt token's.
        #[arg(long)]
        no_first_token_sub: bool,
        /// Mask root overriding dump masks: DIR/<conversation>/<lemma>_<frame>.png.
        #[arg(long, value_name = "DIR")]
        masks: Option<PathBuf>,
        /// Also score placebo targets drawn with --seed.
        #[arg(long)]
        placebo: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write PNG overlays, one per answer token and frame.
    Render {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Correlate map distance with textual relevance over token pairs.
    Stats {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long, value_enum, default_value_t = ModeArg::Random)]
        mode: ModeArg,
        /// Pairs drawn per conversation in random mode.
        #[arg(long, default_value_t = 20)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the synthetic fixture corpus.
    Synth {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Print the dataset-scale reproduction command sequence.
    Recipe,
}

#[derive(Debug, Args)]
pub struct IoArgs {
    #[arg(long, required = true, num_args = 1.., value_name = "PATH")]
    pub input: Vec<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OptionalOutArgs {
    #[arg(long, required = true, num_args = 1.., value_name = "PATH")]
    pub input: Vec<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long, value_enum, default_value_t = FilterArg::RankGaussian)]
    pub filter: FilterArg,
    #[arg(long, default_value_t = 3, value_name = "K")]
    pub kernel: usize,
    #[arg(long, default_value_t = 1e-6, value_name = "E")]
    pub epsilon: f64,
    #[arg(long, value_enum, default_value_t = StageArg::Full)]
    pub stage: StageArg,
}

impl PipelineArgs {
    pub fn config(&self) -> ExplainConfig {
        ExplainConfig {
            causal: CausalConfig {
                epsilon: self.epsilon,
                ..CausalConfig::default()
            },
            filter: FilterConfig::new(self.filter.into(), self.kernel),
            stage: self.stage.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum FilterArg {
    RankGaussian,
    Median,
    Gaussian,
    AdaptiveMedian,
    None,
}

impl From<FilterArg> for FilterKind {
    fn from(f: FilterArg) -> Self {
        match f {
            FilterArg::RankGaussian => FilterKind::RankGaussian,
            FilterArg::Median => FilterKind::Median,
            FilterArg::Gaussian => FilterKind::Gaussian,
            FilterArg::AdaptiveMedian => FilterKind::AdaptiveMedian,
            FilterArg::None => FilterKind::None,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StageArg {
    CamOnly,
    EciOnly,
    FilterOnly,
    Full,
}

impl From<StageArg> for PipelineStage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::CamOnly => PipelineStage::CamOnly,
            StageArg::EciOnly => PipelineStage::EciOnly,
            StageArg::FilterOnly => PipelineStage::FilterOnly,
            StageArg::Full => PipelineStage::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Random,
    MostRelated,
}

impl From<ModeArg> for PairingMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Random => PairingMode::Random,
            ModeArg::MostRelated => PairingMode::MostRelated,
        }
    }
}

/// Parses `argv` (program name first) and runs the command.
///
/// Returns 0 on success, 1 when an input fails validation or a
/// conversation could not be processed, and 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("tam: {e}");
            e.exit_code()
        }
    }
}
