use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use patchforge::attack::AttackConfig;
use patchforge::embednet::{EmbedNetConfig, TrainConfig};
use patchforge::SyntheticIdentitySpec;
use serde::Serialize;

// Built-in defaults come from the library configuration types.
static SYNTH: std::sync::LazyLock<SyntheticIdentitySpec> =
    std::sync::LazyLock::new(SyntheticIdentitySpec::default);
static NET: std::sync::LazyLock<EmbedNetConfig> = std::sync::LazyLock::new(EmbedNetConfig::default);
static TRAIN: std::sync::LazyLock<TrainConfig> = std::sync::LazyLock::new(TrainConfig::default);
static ATTACK: std::sync::LazyLock<AttackConfig> = std::sync::LazyLock::new(AttackConfig::default);

#[derive(Debug, Parser)]
#[command(
    name = "patchforge",
    version,
    about = "Adversarial patch synthesis against a face-embedding model",
    arg_required_else_help = true
)]
pub struct Cli {
    /// Root that relative paths resolve against.
    #[arg(long, global = true, env = "PATCHFORGE_WORKSPACE", default_value = ".")]
    pub workspace: PathBuf,
    /// TOML file with one table per subcommand, keyed by flag name.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic identity dataset and its manifest.
    SynthData(SynthDataArgs),
    /// Train the embedding network on every labelled photo of a manifest.
    TrainTarget(TrainTargetArgs),
    /// Build the per-identity gallery of reference embeddings.
    EmbedGallery(EmbedGalleryArgs),
    /// Optimise a patch against one identity's training photos.
    Attack(AttackArgs),
    /// Composite a finished patch onto photos and write the aligned crops.
    ApplyPatch(ApplyPatchArgs),
    /// Score a finished patch on every split.
    Evaluate(EvaluateArgs),
    /// Collect evaluations into report tables.
    Report(ReportArgs),
    /// Render the printable calibration chessboard.
    MakeChessboard(MakeChessboardArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthData(_) => "synth-data",
            Command::TrainTarget(_) => "train-target",
            Command::EmbedGallery(_) => "embed-gallery",
            Command::Attack(_) => "attack",
            Command::ApplyPatch(_) => "apply-patch",
            Command::Evaluate(_) => "evaluate",
            Command::Report(_) => "report",
            Command::MakeChessboard(_) => "make-chessboard",
        }
    }

    pub fn to_toml(&self) -> Result<toml::Value, toml::ser::Error> {
        match self {
            Command::SynthData(a) => toml::Value::try_from(a),
            Command::TrainTarget(a) => toml::Value::try_from(a),
            Command::EmbedGallery(a) => toml::Value::try_from(a),
            Command::Attack(a) => toml::Value::try_from(a),
            Command::ApplyPatch(a) => toml::Value::try_from(a),
            Command::Evaluate(a) => toml::Value::try_from(a),
            Command::Report(a) => toml::Value::try_from(a),
            Command::MakeChessboard(a) => toml::Value::try_from(a),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutChoice {
    /// The layout recorded in the manifest.
    Manifest,
    /// 14×5 cells at 1.0 cm.
    Forehead,
    /// 12×6 cells at 0.7 cm.
    Nose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeChoice {
    Untargeted,
    Targeted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitChoice {
    Constant,
    UniformRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitChoice {
    All,
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SynthDataArgs {
    /// Output directory for images/ and manifest.json.
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    #[arg(long, default_value_t = SYNTH.num_identities)]
    pub num_identities: usize,
    #[arg(long, default_value_t = SYNTH.images_per_identity)]
    pub images_per_identity: usize,
    #[arg(long, default_value_t = SYNTH.train_per_identity)]
    pub train_per_identity: usize,
    #[arg(long, default_value_t = SYNTH.val_per_identity)]
    pub val_per_identity: usize,
    #[arg(long, default_value_t = SYNTH.blobs_per_identity)]
    pub blobs_per_identity: usize,
    /// Largest per-image shift in pixels.
    #[arg(long, default_value_t = SYNTH.max_shift_px)]
    pub max_shift_px: f64,
    /// Largest per-image brightness offset.
    #[arg(long, default_value_t = SYNTH.max_brightness)]
    pub max_brightness: f64,
    /// Patch pixels per chessboard cell.
    #[arg(long, default_value_t = SYNTH.layout.cell_px)]
    pub cell_px: usize,
    #[arg(long, default_value_t = SYNTH.seed)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainTargetArgs {
    #[arg(long, default_value = "data/manifest.json")]
    pub manifest: PathBuf,
    /// Checkpoint to write.
    #[arg(long, default_value = "model/target.pfck")]
    pub out: PathBuf,
    /// Conv block widths, comma separated.
    #[arg(long, default_value = "8,16,32")]
    pub channels: String,
    #[arg(long, default_value_t = NET.embedding_dim)]
    pub embedding_dim: usize,
    /// Additive angular margin in radians.
    #[arg(long, default_value_t = NET.margin)]
    pub margin: f64,
    /// Logit scale.
    #[arg(long, default_value_t = NET.scale)]
    pub scale: f64,
    #[arg(long, default_value_t = TRAIN.epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TRAIN.min_epochs)]
    pub min_epochs: usize,
    #[arg(long, default_value_t = TRAIN.learning_rate)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = TRAIN.momentum)]
    pub momentum: f64,
    #[arg(long, default_value_t = TRAIN.batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = TRAIN.target_accuracy)]
    pub target_accuracy: f64,
    #[arg(long, default_value_t = TRAIN.centering_rate)]
    pub centering_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct EmbedGalleryArgs {
    #[arg(long, default_value = "data/manifest.json")]
    pub manifest: PathBuf,
    #[arg(long, default_value = "model/target.pfck")]
    pub model: PathBuf,
    #[arg(long, default_value = "model/gallery.json")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct AttackArgs {
    #[arg(long, default_value = "data/manifest.json")]
    pub manifest: PathBuf,
    #[arg(long, default_value = "model/target.pfck")]
    pub model: PathBuf,
    #[arg(long, default_value = "model/gallery.json")]
    pub gallery: PathBuf,
    /// Run directory for the patch, trace and run summary.
    #[arg(long, default_value = "runs/patch")]
    pub out: PathBuf,
    /// Ground-truth identity of the attacker.
    #[arg(long, default_value_t = 0)]
    pub identity: usize,
    #[arg(long, value_enum, default_value_t = ModeChoice::Untargeted)]
    pub mode: ModeChoice,
    /// Target class id, or `nearest` for the closest gallery class other
    /// than the ground truth. Required in targeted mode.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    /// Sign-step size.
    #[arg(long, default_value_t = ATTACK.epsilon)]
    pub epsilon: f64,
    /// Momentum decay.
    #[arg(long, default_value_t = ATTACK.mu)]
    pub mu: f64,
    /// Total-variation weight.
    #[arg(long, default_value_t = ATTACK.tau)]
    pub tau: f64,
    #[arg(long, default_value_t = ATTACK.max_iters)]
    pub max_iters: usize,
    /// Stop once the mean adversarial loss falls below this value.
    #[arg(long, default_value_t = ATTACK.stop_when_adv_below)]
    pub stop_below: f64,
    #[arg(long, value_enum, default_value_t = InitChoice::Constant)]
    pub init: InitChoice,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = LayoutChoice::Manifest)]
    pub layout: LayoutChoice,
    /// Patch pixels per cell for the forehead and nose layouts.
    #[arg(long, default_value_t = 4)]
    pub cell_px: usize,
    /// Grayscale image of the patch shape; pixels above 0.5 exist physically.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    /// Resolution of the printable export.
    #[arg(long, default_value_t = 300.0)]
    pub dpi: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ApplyPatchArgs {
    #[arg(long, default_value = "data/manifest.json")]
    pub manifest: PathBuf,
    /// Attack run directory holding the patch and its summary.
    #[arg(long, default_value = "runs/patch")]
    pub run: PathBuf,
    /// Output directory; defaults to `<run>/applied`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitChoice::All)]
    pub split: SplitChoice,
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvaluateArgs {
    #[arg(long, default_value = "data/manifest.json")]
    pub manifest: PathBuf,
    #[arg(long, default_value = "model/target.pfck")]
    pub model: PathBuf,
    #[arg(long, default_value = "model/gallery.json")]
    pub gallery: PathBuf,
    /// Attack run directory; the evaluation is written into it.
    #[arg(long, default_value = "runs/patch")]
    pub run: PathBuf,
    /// Row label in the report; defaults to the run directory name.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ReportArgs {
    /// Evaluated run directories, comma separated.
    #[arg(long, default_value = "runs/patch")]
    pub runs: String,
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct MakeChessboardArgs {
    #[arg(long, value_enum, default_value_t = LayoutChoice::Forehead)]
    pub layout: LayoutChoice,
    /// Print resolution; sets the pixel size of one cell.
    #[arg(long, default_value_t = 300.0)]
    pub dpi: f64,
    #[arg(long, default_value_t = 0)]
    pub border_px: usize,
    #[arg(long, default_value = "chessboard.png")]
    pub out: PathBuf,
}
