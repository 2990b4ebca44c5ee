//! Flag surface. Every flag id doubles as a config-file key; values are read
//! back through the resolved key map, so these structs only drive parsing,
//! validation and `--help`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use evtrack_core::config::join_list;
use evtrack_core::events::{DataConfig, DEFAULT_LABEL_RATE_HZ};
use evtrack_core::lrp::{DEFAULT_EPSILON, DEFAULT_GAMMA};
use evtrack_core::metrics::DEFAULT_TOLERANCES;
use evtrack_core::models::{ModelConfig, Variant};
use evtrack_core::synth::{TrajectoryConfig, TrajectoryKind};
use evtrack_core::training::TrainConfig;

#[derive(Debug, Parser)]
#[command(
    name = "evtrack",
    version,
    about = "Event-camera pupil tracking pipeline"
)]
#[command(
    after_help = "Flags override --config (key = value lines, keys named like the flags with '_'). \
The seed falls back to EVTRACK_SEED, then 42.\nExit codes: 0 success, 1 runtime or data error, 2 usage or config error."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic pupil recording (events + 100 Hz labels)
    Synth(SynthArgs),
    /// Bin a recording into 20 Hz two-channel event frames
    Bin(BinArgs),
    /// Train a model on one recording or a directory of sessions
    Train(TrainArgs),
    /// Evaluate a checkpoint: p_acc at each tolerance and Euclidean distance
    Eval(EvalArgs),
    /// Relevance heatmaps for one window's predictions
    Explain(ExplainArgs),
    /// Finite-difference check of every differentiable op and model variant
    GradCheck(GradCheckArgs),
}

fn synth_defaults() -> TrajectoryConfig {
    TrajectoryConfig::new(TrajectoryKind::Fixation, 10.0, 42)
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// key = value settings; a manifest.cfg from an earlier run works
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write a named multi-session fixture instead of one recording
    #[arg(long, value_parser = ["synthetic-13"])]
    pub fixture: Option<String>,
    /// fixation, smooth_pursuit, saccade_mix or blink_cycle
    #[arg(long, default_value = "fixation", value_parser = ["fixation", "smooth_pursuit", "saccade_mix", "blink_cycle"])]
    pub kind: String,
    #[arg(long, default_value_t = 10.0)]
    pub seconds: f64,
    /// Sensor width in pixels
    #[arg(long, default_value_t = synth_defaults().width)]
    pub width: u32,
    /// Sensor height in pixels
    #[arg(long, default_value_t = synth_defaults().height)]
    pub height: u32,
    /// Pupil radius in sensor pixels
    #[arg(long, default_value_t = synth_defaults().radius)]
    pub radius: f64,
    /// Fixation jitter RMS in pixels
    #[arg(long, default_value_t = synth_defaults().jitter_rms)]
    pub jitter_rms: f64,
    #[arg(long, default_value_t = synth_defaults().px_per_degree)]
    pub px_per_degree: f64,
    #[arg(long, default_value_t = synth_defaults().pursuit_speed_deg_s)]
    pub pursuit_speed_deg_s: f64,
    #[arg(long, default_value_t = synth_defaults().pursuit_amplitude)]
    pub pursuit_amplitude: f64,
    #[arg(long, default_value_t = synth_defaults().saccade_speed_deg_s)]
    pub saccade_speed_deg_s: f64,
    /// Background noise events per second over the whole sensor
    #[arg(long, default_value_t = synth_defaults().noise_rate_hz)]
    pub noise_rate_hz: f64,
    /// Initial pupil centre x (random when unset)
    #[arg(long, requires = "center_y")]
    pub center_x: Option<f64>,
    #[arg(long, requires = "center_x")]
    pub center_y: Option<f64>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

/// Frame and window preparation shared by bin, train, eval and explain.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// Recording directory (events.evt + labels.csv) or a directory of them
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = DataConfig::default().spatial_factor)]
    pub spatial_factor: f64,
    /// Label decimation factor (100 Hz to 20 Hz)
    #[arg(long, default_value_t = DataConfig::default().temporal_factor)]
    pub temporal_factor: f64,
    #[arg(long, default_value_t = DataConfig::default().frame_duration_us)]
    pub frame_duration_us: u64,
    /// none, log1p or per_frame_max
    #[arg(long, default_value_t = DataConfig::default().frame_norm.name().to_string())]
    pub frame_norm: String,
    #[arg(long, default_value_t = DEFAULT_LABEL_RATE_HZ)]
    pub label_rate_hz: f64,
}

#[derive(Debug, Args)]
pub struct WindowArgs {
    /// Frames per window
    #[arg(long, default_value_t = DataConfig::default().seq_len)]
    pub seq_len: usize,
    #[arg(long, default_value_t = DataConfig::default().stride)]
    pub stride: usize,
    /// Drop windows containing a closed-eye frame
    #[arg(long)]
    pub drop_closed: bool,
}

#[derive(Debug, Args)]
pub struct BinArgs {
    /// key = value settings; a manifest.cfg from an earlier run works
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
}

fn model_defaults() -> ModelConfig {
    ModelConfig::new(Variant::CnnLstm)
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// key = value settings; a manifest.cfg from an earlier run works
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoints and reports
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from this checkpoint (its model settings win)
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub windows: WindowArgs,
    #[arg(long, default_value = "cnn_lstm", value_parser = ["cnn_gru", "cnn_bilstm", "cnn_lstm"])]
    pub model: String,
    /// Output channels of each conv block
    #[arg(long, default_value_t = join_list(&model_defaults().conv_channels))]
    pub conv_channels: String,
    #[arg(long, default_value_t = model_defaults().kernel)]
    pub kernel: usize,
    #[arg(long, default_value_t = model_defaults().feature_dim)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = model_defaults().hidden)]
    pub hidden: usize,
    /// Recurrent layers [default: 2 for cnn_lstm, 1 otherwise]
    #[arg(long)]
    pub rnn_layers: Option<usize>,
    #[arg(long, default_value_t = model_defaults().dropout)]
    pub dropout: f64,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    /// Per-coordinate loss weights w_x,w_y
    #[arg(long, default_value_t = join_list(&TrainConfig::default().loss_weights))]
    pub loss_weights: String,
    /// Held-out fraction of windows
    #[arg(long, default_value_t = TrainConfig::default().val_split)]
    pub val_split: f64,
    /// Write a checkpoint every N epochs (0 = final only)
    #[arg(long, default_value_t = TrainConfig::default().checkpoint_every)]
    pub checkpoint_every: usize,
    /// Leave closed-eye frames out of the loss
    #[arg(long)]
    pub use_close_mask: bool,
    /// Global gradient-norm clip
    #[arg(long, default_value_t = TrainConfig::default().clip_norm)]
    pub clip_norm: f64,
    /// Validation tolerances in pixels (fixed)
    #[arg(long, default_value_t = join_list(&DEFAULT_TOLERANCES), value_parser = ["5,10,15"])]
    pub tolerances: String,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// key = value settings; a manifest.cfg from an earlier run works
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory for eval.csv and eval.json (print only when unset)
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub windows: WindowArgs,
    /// Pixel tolerances
    #[arg(long, default_value_t = join_list(&DEFAULT_TOLERANCES))]
    pub tolerances: String,
    /// downsampled or sensor
    #[arg(long, default_value = "downsampled", value_parser = ["downsampled", "sensor"])]
    pub pixel_space: String,
    /// Skip closed-eye frames
    #[arg(long)]
    pub exclude_closed: bool,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    /// key = value settings; a manifest.cfg from an earlier run works
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub windows: WindowArgs,
    /// Window index across all sessions
    #[arg(long, default_value_t = 0)]
    pub window: usize,
    /// Frames to export; each explains its own output step unless --step is set
    #[arg(long, default_value = "0")]
    pub frame: String,
    /// Output step to explain
    #[arg(long)]
    pub step: Option<usize>,
    /// x, y or sum
    #[arg(long, default_value = "x", value_parser = ["x", "y", "sum"])]
    pub target: String,
    /// lrp0, epsilon, gamma or composite
    #[arg(long, default_value = "composite", value_parser = ["lrp0", "epsilon", "gamma", "composite"])]
    pub rule: String,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    pub gamma: f64,
    /// Per-class overrides, e.g. conv=epsilon:1e-9,head=lrp0
    #[arg(long)]
    pub layer_rules: Option<String>,
    /// Multiplier on the seeded score
    #[arg(long, default_value_t = 1.0)]
    pub seed_scale: f64,
    /// Heatmap formats
    #[arg(long, default_value = "pgm,csv")]
    pub format: String,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// key = value settings; a manifest.cfg from an earlier run works
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for gradcheck.json
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Random points per check
    #[arg(long, default_value_t = 10)]
    pub points: usize,
    /// extrapolated (Richardson over h = 1e-3, 5e-4) or central (h = 1e-5)
    #[arg(long, default_value = "extrapolated", value_parser = ["extrapolated", "central"])]
    pub stencil: String,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}
