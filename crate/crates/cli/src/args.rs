use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use recon_core::config::{Strategy, TrainConfig};
use recon_core::relation::KlMode;

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "recon", version, about = "Relation-consistency training under noisy correspondences")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic corpus (features plus a JSON sidecar with ground truth).
    Generate(GenerateArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Divide a corpus with a frozen checkpoint.
    Divide(DivideArgs),
    /// Retrieval recall of a checkpoint, plus division quality when ground truth is known.
    Eval(EvalArgs),
    /// Render the epoch log of a run directory.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for recon_core::data::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Self::Train,
            SplitArg::Val => Self::Val,
            SplitArg::Test => Self::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MixingArg {
    Identity,
    Random,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub pairs: usize,
    /// Fraction of training pairs whose captions are shuffled.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
    #[arg(long, default_value_t = 48)]
    pub vocab: usize,
    #[arg(long, default_value_t = 3)]
    pub items_min: usize,
    #[arg(long, default_value_t = 6)]
    pub items_max: usize,
    #[arg(long, default_value_t = 2)]
    pub objects_min: usize,
    #[arg(long, default_value_t = 4)]
    pub objects_max: usize,
    #[arg(long, default_value_t = 32)]
    pub visual_dim: usize,
    #[arg(long, default_value_t = 24)]
    pub text_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub latent_dim: usize,
    /// Standard deviation of per-item feature noise.
    #[arg(long, default_value_t = 0.3)]
    pub sigma: f64,
    #[arg(long, value_enum, default_value = "random")]
    pub mixing: MixingArg,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KlModeArg {
    Forward,
    Symmetric,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StrategyArg {
    Recon,
    TripletOnly,
}

/// Overrides for [`TrainConfig`]; anything left unset keeps the value from
/// the config file (or the built-in default).
#[derive(Debug, Default, Args)]
pub struct ConfigFlags {
    /// TOML file with `TrainConfig` fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub relation_tau: Option<f64>,
    #[arg(long)]
    pub omega1: Option<f64>,
    #[arg(long)]
    pub omega2: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub xi: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Epochs after warmup.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, alias = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub lr_decay_at: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub train_similarity: Option<bool>,
    #[arg(long, value_enum)]
    pub kl_mode: Option<KlModeArg>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    #[arg(long)]
    pub intra_modal_loss: Option<bool>,
    #[arg(long)]
    pub refinement: Option<bool>,
    #[arg(long)]
    pub penalization: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigFlags {
    /// Defaults, then `base` (a manifest snapshot) or the `--config` file, then flags.
    pub fn resolve(&self, base: Option<TrainConfig>) -> Result<TrainConfig, CliError> {
        let mut c = match (&self.config, base) {
            (Some(path), _) => read_toml(path)?,
            (None, Some(base)) => base,
            (None, None) => TrainConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = self.$flag { c.$field = v; })*
            };
        }
        set!(
            batch_size => batch_size, tau => tau, relation_tau => relation_tau,
            omega1 => omega1, omega2 => omega2, alpha => alpha, beta => beta,
            gamma => gamma, xi => xi, warmup => warmup_epochs, epochs => epochs,
            learning_rate => learning_rate, momentum => momentum,
            lr_decay_at => lr_decay_at, lr_decay => lr_decay, embed_dim => embed_dim,
            train_similarity => train_similarity, intra_modal_loss => intra_modal_loss,
            refinement => refinement, penalization => penalization, seed => seed,
        );
        if let Some(k) = self.kl_mode {
            c.kl_mode = match k {
                KlModeArg::Forward => KlMode::Forward,
                KlModeArg::Symmetric => KlMode::Symmetric,
            };
        }
        if let Some(s) = self.strategy {
            c.strategy = match s {
                StrategyArg::Recon => Strategy::Recon,
                StrategyArg::TripletOnly => Strategy::TripletOnly,
            };
        }
        c.validate()?;
        Ok(c)
    }
}

fn read_toml(path: &Path) -> Result<TrainConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training corpus.
    #[arg(long, required_unless_present = "from_manifest")]
    pub corpus: Option<PathBuf>,
    /// Validation corpus used to pick the best checkpoint.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Re-run the configuration and corpora recorded in a run manifest.
    #[arg(long, conflicts_with_all = ["corpus", "val"])]
    pub from_manifest: Option<PathBuf>,
    /// Output directory (default: `<RECON_RUN_DIR>/<corpus>-<digest>`).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Root for default run directories.
    #[arg(long, env = "RECON_RUN_DIR", default_value = "runs")]
    pub run_root: PathBuf,
    /// Replace an existing run directory.
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Debug, Args)]
pub struct DivideArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Epoch index selecting the shuffling stream.
    #[arg(long, default_value_t = 0)]
    pub epoch: u64,
    /// Partition CSV destination (stdout when omitted).
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Fail unless the corpus belongs to this split.
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// List the k pairs with the highest discrepancy among those accepted as clean.
    #[arg(long, value_name = "K")]
    pub dump_mismatches: Option<usize>,
    /// Print the report as JSON instead of tables.
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub run_dir: PathBuf,
    #[arg(long)]
    pub json: bool,
}
