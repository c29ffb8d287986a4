//! The `svdamage` command line: every pipeline stage as a subcommand.
//!
//! Each run writes its outputs and a `run_manifest.json` to one directory:
//! `--out` when given, else a fresh directory under `$SVDAMAGE_OUTPUT_ROOT`
//! (default `runs/`). Output paths are printed one per line on stdout.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.

pub mod commands;
pub mod manifest;
pub mod serve;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use svdamage::gradcam::{Colormap, TargetClass};

pub use manifest::{RunManifest, MANIFEST_FILE, OUTPUT_ROOT_ENV};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "svdamage", version, about = "Bi-temporal street-view damage classification")]
pub struct Cli {
    /// Output directory for this run [default: a new directory under $SVDAMAGE_OUTPUT_ROOT]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Part {
    Train,
    Val,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate an image manifest into a catalog
    Ingest {
        /// CSV with header image_id,phase,latitude,longitude,captured_at,uri
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Pair each post image with its nearest pre image
    Pair {
        /// Catalog or manifest CSV
        #[arg(long)]
        catalog: PathBuf,
        /// Meters; farther posts are discarded
        #[arg(long, default_value_t = 10.0)]
        max_distance: f64,
    },
    /// Stratified train/validation split of labeled pairs
    Split {
        /// Consensus labels, CSV pair_id,label
        #[arg(long)]
        labels: PathBuf,
        /// Restrict to the pairs in this pair list
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long, default_value = "8:2")]
        ratio: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a synthetic pair dataset with damage masks
    Synth {
        #[arg(long, default_value_t = 2000)]
        count: usize,
        /// TOML dataset spec; defaults apply to absent keys
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one experiment configuration
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split file; recomputed from the checkpoint's config when absent
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Part::Val)]
        part: Part,
    },
    /// Export a Grad-CAM heatmap for one pair
    Gradcam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pair_id: String,
        /// `predicted`, a class name or a class index
        #[arg(long, default_value = "predicted")]
        class: TargetClass,
        /// Layer tap such as `post.features`; the model's last stage when absent
        #[arg(long)]
        layer: Option<String>,
        #[arg(long, default_value_t = 0.5)]
        alpha: f32,
        #[arg(long, default_value = "jet")]
        colormap: Colormap,
    },
    /// Serve the annotation HTTP API
    AnnotateServe {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Append-only JSON Lines label log, created if absent
        #[arg(long)]
        label_log: PathBuf,
        #[command(flatten)]
        corpus: Corpus,
        /// Directory with the annotation UI bundle
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Write consensus labels from a label log, leaving out conflicts
    AnnotateExport {
        #[arg(long)]
        label_log: PathBuf,
        #[command(flatten)]
        corpus: Corpus,
    },
    /// Render metrics tables from metrics files or run directories
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Debug, clap::Args)]
pub struct Corpus {
    /// Catalog or manifest CSV
    #[arg(long)]
    pub catalog: PathBuf,
    /// Pair list (JSON Lines)
    #[arg(long)]
    pub pairs: PathBuf,
    /// Registered annotator ids, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    pub annotators: Vec<String>,
    /// Adjudicator ids, comma separated
    #[arg(long, value_delimiter = ',')]
    pub adjudicators: Vec<String>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Ingest { .. } => "ingest",
            Self::Pair { .. } => "pair",
            Self::Split { .. } => "split",
            Self::Synth { .. } => "synth",
            Self::Train { .. } => "train",
            Self::Eval { .. } => "eval",
            Self::Gradcam { .. } => "gradcam",
            Self::AnnotateServe { .. } => "annotate-serve",
            Self::AnnotateExport { .. } => "annotate-export",
            Self::Report { .. } => "report",
        }
    }
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    let command_line = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut manifest = RunManifest::start(command_line, cli.command.name());
    let dir = match manifest::output_dir(cli.out.as_deref(), cli.command.name()) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_RUNTIME;
        }
    };
    let result = commands::dispatch(&cli.command, &dir, &mut manifest);
    let code = match &result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            manifest.error = Some(e.to_string());
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    };
    manifest.finished_at = Some(chrono::Utc::now());
    manifest.exit_code = Some(code);
    match manifest.write(&dir) {
        Ok(p) => println!("{}", p.display()),
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_RUNTIME;
        }
    }
    code
}
