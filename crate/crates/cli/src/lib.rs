//! `tpedit`: batch driver for every workflow of the tri-plane editor.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error, 4 numerical
//! failure.

mod commands;
pub mod config;
mod context_dir;

use std::fmt;
use std::net::IpAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use triplane_edit::select::DeletionMode;
use triplane_edit::EditKind;

pub use context_dir::{ContextState, StoredView, STATE_FILE};

#[derive(Debug, Parser)]
#[command(name = "tpedit", version, about = "Tri-plane radiance field editing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run record path; defaults to `<out>.run.toml`.
    #[arg(long, global = true)]
    pub record: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an oracle dataset from an analytic scene.
    Synth(SynthArgs),
    /// Reconstruct a field from a dataset and report holdout PSNR.
    Pretrain(PretrainArgs),
    /// Render one view to PNG.
    Render(RenderArgs),
    /// Select an object from a patch of one frame.
    Select(SelectArgs),
    /// Context grid round trip.
    #[command(subcommand)]
    Context(ContextCommand),
    /// Train a residual edit token from edited views.
    Edit(EditArgs),
    /// Fine-tune the whole field on the edited views of a context directory.
    Finetune(FinetuneArgs),
    /// Inspect and change edit layer files.
    #[command(subcommand)]
    Layers(LayersCommand),
    /// Serve the HTTP edit API for one scene.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory; receives `scene.toml` and the images.
    #[arg(long)]
    pub out: PathBuf,
    /// Scene description (TOML); the built-in two-object scene when absent.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
    /// Number of train views.
    #[arg(long)]
    pub train: Option<usize>,
    /// Number of holdout views.
    #[arg(long)]
    pub holdout: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Training flags shared by the training commands.
#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    /// TOML config with `[field]`, `[train]`, `[render]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Rays per batch.
    #[arg(long, visible_alias = "batch")]
    pub rays: Option<usize>,
    /// Samples per ray while training.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Per-iteration metrics as JSON lines.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Dataset manifest, or a directory holding `scene.toml`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Plane resolution.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Plane feature channels.
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// Hidden width of the geometry and color networks.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Geometry feature width.
    #[arg(long)]
    pub geom_dim: Option<usize>,
    /// Plane L1 weight.
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Plane total-variation weight.
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Publish a snapshot every N iterations.
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    /// Samples per ray for the holdout report; the training count when absent.
    #[arg(long)]
    pub eval_samples: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DeleteArg {
    Selected,
    Unselected,
}

impl From<DeleteArg> for DeletionMode {
    fn from(d: DeleteArg) -> Self {
        match d {
            DeleteArg::Selected => DeletionMode::Selected,
            DeleteArg::Unselected => DeletionMode::Unselected,
        }
    }
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset, needed with `--frame`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Frame index from the dataset.
    #[arg(long, conflicts_with = "camera", required_unless_present = "camera", requires = "data")]
    pub frame: Option<usize>,
    /// Camera description (TOML).
    #[arg(long)]
    pub camera: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a 16-bit depth PNG, linear between the camera's near and far.
    #[arg(long)]
    pub depth: Option<PathBuf>,
    /// Also write the projected selection mask.
    #[arg(long, requires = "sel")]
    pub mask: Option<PathBuf>,
    /// Selection sidecar, for `--mask` and `--delete`.
    #[arg(long)]
    pub sel: Option<PathBuf>,
    /// Edit stacks or tokens applied in order.
    #[arg(long, num_args = 1..)]
    pub layers: Vec<PathBuf>,
    /// Remove density on one side of the selection.
    #[arg(long, value_enum, requires = "sel")]
    pub delete: Option<DeleteArg>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl std::str::FromStr for Rect {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let v: Vec<u32> = s
            .split(',')
            .map(|p| p.trim().parse::<u32>())
            .collect::<Result<_, _>>()
            .map_err(|_| format!("expected x,y,w,h as unsigned integers, got `{s}`"))?;
        match v[..] {
            [x, y, w, h] => Ok(Rect { x, y, w, h }),
            _ => Err(format!("expected four values x,y,w,h, got `{s}`")),
        }
    }
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub frame: usize,
    /// Query rectangle `x,y,w,h`.
    #[arg(long, conflicts_with = "bitmap", required_unless_present = "bitmap")]
    pub rect: Option<Rect>,
    /// Query brush as a mask PNG of the frame's size.
    #[arg(long)]
    pub bitmap: Option<PathBuf>,
    /// Squared feature-distance threshold; half the query norm squared when absent.
    #[arg(long)]
    pub thr: Option<f32>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the selection projected into the frame.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ContextCommand {
    /// Write the next 2x2 context grid into a context directory.
    Export(ExportArgs),
    /// Store an edited mosaic and advance to the next epoch.
    Import(ImportArgs),
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub sel: PathBuf,
    /// Context directory; holds the protocol state and the edited views.
    #[arg(long)]
    pub dir: PathBuf,
    /// Number of context epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Session id written into the provenance.
    #[arg(long)]
    pub session: Option<String>,
    /// Discard the stored edits and start again at epoch 0.
    #[arg(long)]
    pub restart: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    /// Checkpoint the grid must have been exported from.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub dir: PathBuf,
    /// Edited mosaic PNG.
    #[arg(long)]
    pub mosaic: PathBuf,
    /// Sidecar of the exported grid; `<dir>/context.txt` when absent.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Feature,
    Color,
}

impl From<KindArg> for EditKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Feature => EditKind::Feature,
            KindArg::Color => EditKind::Color,
        }
    }
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub sel: PathBuf,
    /// Edited mosaic PNG (with its sidecar), or a context directory.
    #[arg(long)]
    pub context: PathBuf,
    /// Sidecar for a mosaic PNG; `context.txt` next to it when absent.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "feature")]
    pub kind: KindArg,
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub sel: PathBuf,
    /// Context directory with imported edits.
    #[arg(long)]
    pub context: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Passes over the edited views.
    #[arg(long, conflicts_with = "iters")]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Subcommand)]
pub enum LayersCommand {
    /// Print the tokens of stack or token files.
    List {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Flip one layer of a stack file in place.
    Toggle {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        id: u64,
        /// Set the state instead of flipping it.
        #[arg(long)]
        enabled: Option<bool>,
    },
    /// Combine stacks and tokens, in order, into one stack file.
    Merge {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Remove one layer of a stack file in place.
    Delete {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        id: u64,
    },
    /// Reorder a stack file in place; `--order` lists every id.
    Reorder {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        order: Vec<u64>,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Edit stacks or tokens to start with.
    #[arg(long, num_args = 1..)]
    pub layers: Vec<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: IpAddr,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Browser origin allowed by CORS; any origin when absent.
    #[arg(long)]
    pub cors_origin: Option<String>,
    #[arg(long, default_value = "session")]
    pub session: String,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// A command-line or configuration mistake (exit code 2).
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

/// Exit code for a failed run.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    use triplane_edit::Error as E;
    for cause in e.chain() {
        if cause.is::<Usage>() {
            return EXIT_USAGE;
        }
        if let Some(core) = cause.downcast_ref::<E>() {
            return match core {
                E::Config(_) | E::InvalidCamera(_) | E::InvalidRange { .. } => EXIT_USAGE,
                E::Diverged { .. } | E::NonFiniteGradient(_) | E::NonFinite(_) => EXIT_NUMERICAL,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    commands::run(cli)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_line_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn rect_parses_four_integers() {
        assert_eq!("1,2,3,4".parse::<Rect>().unwrap(), Rect { x: 1, y: 2, w: 3, h: 4 });
        assert!("1,2,3".parse::<Rect>().is_err());
        assert!("1,2,3,-4".parse::<Rect>().is_err());
    }

    #[test]
    fn conflicting_flags_are_rejected() {
        let both = Cli::try_parse_from([
            "tpedit", "render", "--ckpt", "c", "--data", "d", "--frame", "0", "--camera", "k", "--out", "o",
        ]);
        assert!(both.is_err());
        let neither = Cli::try_parse_from(["tpedit", "render", "--ckpt", "c", "--out", "o"]);
        assert!(neither.is_err());
        let mask_without_sel = Cli::try_parse_from(["tpedit", "render", "--ckpt", "c", "--camera", "k", "--out", "o", "--mask", "m"]);
        assert!(mask_without_sel.is_err());
        let passes_and_iters = Cli::try_parse_from([
            "tpedit",
            "finetune",
            "--ckpt",
            "c",
            "--data",
            "d",
            "--sel",
            "s",
            "--context",
            "x",
            "--out",
            "o",
            "--epochs",
            "2",
            "--iters",
            "9",
        ]);
        assert!(passes_and_iters.is_err());
    }

    #[test]
    fn exit_codes_follow_the_error_kind() {
        assert_eq!(exit_code(&usage("x")), EXIT_USAGE);
        assert_eq!(exit_code(&triplane_edit::Error::Config("x".into()).into()), EXIT_USAGE);
        assert_eq!(exit_code(&triplane_edit::Error::Diverged { iteration: 3 }.into()), EXIT_NUMERICAL);
        let stale = triplane_edit::Error::StaleProvenance {
            expected: "a".into(),
            found: "b".into(),
        };
        assert_eq!(exit_code(&anyhow::Error::from(stale).context("importing")), EXIT_DATA);
    }
}
