//! The `tcmoa` command line: data generation, two-stage training, fusion
//! with prompt control, sweeps, routing statistics, gradient checking and
//! metrics.

pub mod metrics;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use tcmoa_core::autodiff::{FaultInjection, Tensor};
use tcmoa_core::config::Settings;
use tcmoa_core::data::generate;
use tcmoa_core::gradcheck;
use tcmoa_core::ppm::{read_image, write_image};
use tcmoa_core::tcmoa::{adapter_map, intensity_bias_stats, PromptControl, Task};
use tcmoa_core::losses::TERM_NAMES;
use tcmoa_core::training::{self, checkpoint, TrainState};

pub use metrics::{compute_metrics, MetricsRow, ShapeMismatch};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VERIFY: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_SIZE: u8 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: tcmoa_core::Error,
    },
    #[error("size mismatch: {0}")]
    Size(String),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error(transparent)]
    Core(#[from] tcmoa_core::Error),
}

impl From<ShapeMismatch> for CliError {
    fn from(e: ShapeMismatch) -> Self {
        CliError::Size(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use tcmoa_core::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::File { .. } => EXIT_IO,
            CliError::Size(_) => EXIT_SIZE,
            CliError::Verify(_) => EXIT_VERIFY,
            CliError::Core(E::Io(_) | E::Format { .. }) => EXIT_IO,
            CliError::Core(E::Config(_) | E::UnknownTask(_)) => EXIT_USAGE,
            CliError::Core(_) => EXIT_VERIFY,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "tcmoa", version, about = "Multi-task image fusion with routed adapters on a frozen backbone")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat key=value settings file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides train.seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PairArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub x: PathBuf,
    #[arg(long)]
    pub y: PathBuf,
    #[arg(long)]
    pub task: Task,
    /// Use live router and adapter weights instead of their moving averages
    #[arg(long)]
    pub live: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic source pairs as <out>/<task>/<seed>_{x,y,truth}.ppm
    Gen {
        #[arg(long)]
        task: Task,
        #[arg(long, default_value_t = 1)]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the backbone as an autoencoder
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the fusion layers with the backbone frozen
    Train {
        #[command(flatten)]
        common: Common,
        /// Start from this checkpoint instead of pretraining first
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to train.epochs × train.steps_per_epoch
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse one pair
    Fuse {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        alpha: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        beta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse one pair over a grid of prompt scales and shifts
    Sweep {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, value_delimiter = ',', default_value = "1", allow_hyphen_values = true)]
        alpha: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0", allow_hyphen_values = true)]
        beta: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Intensity-bias statistics and adapter maps of the last encoder layer
    Stats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: Task,
        #[arg(long, default_value_t = 8)]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        live: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and numeric gradients on a one-layer model
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Report EN, PSNR, SD, SSIM and MI of a fused image
    Metrics {
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        y: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

fn io<T>(path: &Path, r: tcmoa_core::Result<T>) -> CliResult<T> {
    r.map_err(|source| match source {
        tcmoa_core::Error::Io(_) | tcmoa_core::Error::Format { .. } => CliError::File { path: path.to_path_buf(), source },
        other => CliError::Core(other),
    })
}

fn create_dir(path: &Path) -> CliResult<()> {
    io(path, fs::create_dir_all(path).map_err(Into::into))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    io(path, fs::write(path, text).map_err(Into::into))
}

fn write_ppm(path: &Path, image: &Tensor) -> CliResult<()> {
    io(path, write_image(path, image))
}

pub fn load_settings(common: &Common, base: Settings) -> CliResult<Settings> {
    let mut s = base;
    if let Some(path) = &common.config {
        let text = io(path, fs::read_to_string(path).map_err(Into::into))?;
        s.apply_text(&text)?;
    }
    if let Some(seed) = common.seed {
        s.train.seed = seed;
    }
    s.validate()?;
    Ok(s)
}

pub fn load_checkpoint(path: &Path) -> CliResult<TrainState> {
    io(path, checkpoint::load(path))
}

fn save_checkpoint(path: &Path, state: &TrainState) -> CliResult<()> {
    io(path, checkpoint::save(state, path))
}

fn read_pair(state: &TrainState, pair: &PairArgs) -> CliResult<(Tensor, Tensor)> {
    let x = io(&pair.x, read_image(&pair.x))?;
    let y = io(&pair.y, read_image(&pair.y))?;
    let side = state.settings.model.backbone.image_size;
    for (path, img) in [(&pair.x, &x), (&pair.y, &y)] {
        if img.shape() != [side, side, 3] {
            return Err(CliError::Size(format!(
                "{} is {}x{}, the model takes {side}x{side}",
                path.display(),
                img.shape()[1],
                img.shape()[0]
            )));
        }
    }
    Ok((x, y))
}

fn params_for(state: &TrainState, live: bool) -> tcmoa_core::params::ParamStore {
    if live {
        state.model.params.clone()
    } else {
        state.inference_params()
    }
}

/// Fused image with `manipulate_prompt(alpha, beta)` at every layer.
pub fn fuse_pair(
    state: &TrainState,
    params: &tcmoa_core::params::ParamStore,
    x: &Tensor,
    y: &Tensor,
    task: Task,
    alpha: f64,
    beta: f64,
) -> CliResult<Tensor> {
    let control = PromptControl::Affine { alpha, beta };
    Ok(state.model.infer(params, x, y, task, Some(control))?.fused)
}

/// Eight well-separated colors for adapter ids.
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// Token-grid adapter ids as an image, each token a `patch×patch` block.
pub fn adapter_map_image(ids: &[usize], grid: usize, patch: usize) -> Tensor {
    let side = grid * patch;
    Tensor::from_fn(vec![side, side, 3], |i| {
        let (pix, c) = (i / 3, i % 3);
        let (r, col) = (pix / side, pix % side);
        PALETTE[ids[(r / patch) * grid + col / patch] % PALETTE.len()][c] as f64 / 255.0
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or("none".into(), |v| format!("{v:.6}"))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    let mut say = |s: String| {
        let _ = writeln!(out, "{s}");
    };
    match cli.command {
        Command::Gen { task, n, seed, size, out: dir } => {
            if size < 2 {
                return Err(CliError::Usage("--size must be at least 2".into()));
            }
            let dir = dir.join(task.name());
            create_dir(&dir)?;
            for s in seed..seed + n {
                let pair = generate(task, s, size);
                write_ppm(&dir.join(format!("{s}_x.ppm")), &pair.x)?;
                write_ppm(&dir.join(format!("{s}_y.ppm")), &pair.y)?;
                write_ppm(&dir.join(format!("{s}_truth.ppm")), &pair.truth.to_image(size))?;
            }
            say(format!("wrote {n} {task} pairs to {}", dir.display()));
        }
        Command::Pretrain { common, out: dir } => {
            let settings = load_settings(&common, Settings::default())?;
            create_dir(&dir)?;
            let mut state = TrainState::new(settings)?;
            let mut history = String::from("step\tmse\n");
            let report = training::pretrain_backbone(&mut state, &mut |step, mse| {
                history.push_str(&format!("{step}\t{mse:.9}\n"));
            })?;
            write_text(&dir.join("pretrain_history.tsv"), &history)?;
            save_checkpoint(&dir.join("pretrained.ckpt"), &state)?;
            say(format!("held-out mse {:.6} -> {:.6}", report.initial_mse, report.final_mse));
        }
        Command::Train { common, checkpoint: from, steps, out: dir } => {
            let mut state = match &from {
                Some(path) => {
                    let mut state = load_checkpoint(path)?;
                    let settings = load_settings(&common, state.settings.clone())?;
                    if settings.model != state.settings.model {
                        return Err(CliError::Usage("model settings differ from the checkpoint".into()));
                    }
                    state.settings = settings;
                    state
                }
                None => {
                    let mut state = TrainState::new(load_settings(&common, Settings::default())?)?;
                    training::pretrain_backbone(&mut state, &mut |_, _| {})?;
                    state
                }
            };
            create_dir(&dir)?;
            let steps = steps.unwrap_or_else(|| state.settings.train.total_steps());
            let mut header = vec!["step".to_string(), "total".into(), "mir".into()];
            for task in &state.settings.train.tasks {
                header.extend(TERM_NAMES.iter().map(|t| format!("{task}_{t}")));
            }
            let mut history = header.join("\t") + "\n";
            let records = training::train_fusion(&mut state, steps, &mut |r| {
                let mut row = vec![r.step.to_string(), format!("{:.9}", r.total), format!("{:.9}", r.mir)];
                for (_, terms) in &r.terms {
                    row.extend(terms.iter().map(|v| format!("{v:.9}")));
                }
                history.push_str(&(row.join("\t") + "\n"));
            })?;
            write_text(&dir.join("train_history.tsv"), &history)?;
            save_checkpoint(&dir.join("model.ckpt"), &state)?;
            if let (Some(first), Some(last)) = (records.first(), records.last()) {
                say(format!("total loss {:.6} -> {:.6} over {} steps", first.total, last.total, records.len()));
            }
        }
        Command::Fuse { pair, alpha, beta, out: path } => {
            let state = load_checkpoint(&pair.checkpoint)?;
            let (x, y) = read_pair(&state, &pair)?;
            let params = params_for(&state, pair.live);
            let fused = fuse_pair(&state, &params, &x, &y, pair.task, alpha, beta)?;
            write_ppm(&path, &fused)?;
            say(format!("wrote {}", path.display()));
        }
        Command::Sweep { pair, alpha, beta, out: dir } => {
            let state = load_checkpoint(&pair.checkpoint)?;
            let (x, y) = read_pair(&state, &pair)?;
            let params = params_for(&state, pair.live);
            create_dir(&dir)?;
            let mut index = format!("file\talpha\tbeta\t{}\n", MetricsRow::HEADER);
            for (i, &a) in alpha.iter().enumerate() {
                for (j, &b) in beta.iter().enumerate() {
                    let fused = fuse_pair(&state, &params, &x, &y, pair.task, a, b)?;
                    let name = format!("cell_{i:02}_{j:02}.ppm");
                    write_ppm(&dir.join(&name), &fused)?;
                    let m = compute_metrics(&fused, &x, &y, None)?;
                    index.push_str(&format!("{name}\t{a}\t{b}\t{}\n", m.tsv()));
                }
            }
            write_text(&dir.join("index.tsv"), &index)?;
            say(format!("wrote {} cells to {}", alpha.len() * beta.len(), dir.display()));
        }
        Command::Stats { checkpoint: path, task, n, seed, live, out: dir } => {
            let state = load_checkpoint(&path)?;
            let experts = state.settings.model.moa.experts;
            if experts > PALETTE.len() {
                return Err(CliError::Usage(format!("{experts} adapters exceed the {}-color palette", PALETTE.len())));
            }
            let params = params_for(&state, live);
            let b = &state.settings.model.backbone;
            let layer = state.model.last_encoder_layer();
            create_dir(&dir)?;
            let mut prompts = Vec::new();
            for s in seed..seed + n {
                let pair = generate(task, s, b.image_size);
                let inf = state.model.infer(&params, &pair.x, &pair.y, task, None)?;
                let ids = adapter_map(&inf.gates[layer]);
                write_ppm(&dir.join(format!("adapter_map_{s}.ppm")), &adapter_map_image(&ids, b.grid_side(), b.patch_size))?;
                prompts.push(inf.prompts[layer].clone());
            }
            let st = intensity_bias_stats(&prompts)?;
            let text = format!(
                "task={task}\nlayer={layer}\ntokens={}\nx_dominant={}\ndom_x={}\naux_x={}\ndom_y={}\naux_y={}\navg_dom={}\ndiff_dom={}\n",
                st.tokens,
                st.x_dominant,
                opt(st.dom_x),
                opt(st.aux_x),
                opt(st.dom_y),
                opt(st.aux_y),
                opt(st.avg_dom),
                opt(st.diff_dom)
            );
            write_text(&dir.join("stats.txt"), &text)?;
            let legend: String =
                (0..experts).map(|k| format!("{k}\t{} {} {}\n", PALETTE[k][0], PALETTE[k][1], PALETTE[k][2])).collect();
            write_text(&dir.join("legend.txt"), &legend)?;
            say(text.trim_end().to_string());
        }
        Command::Gradcheck { seed, inject_fault } => {
            let fault = inject_fault.then_some(FaultInjection::SigmoidDerivative);
            let checks = gradcheck::run(&gradcheck::toy_settings(), seed, fault)?;
            let mut failed = Vec::new();
            for c in &checks {
                let verdict = if c.passed() { "ok" } else { "FAIL" };
                say(format!(
                    "{}\tmax_rel_err={:.3e}\tcoords={}\t{verdict}",
                    c.task, c.report.max_relative_error, c.report.coordinates
                ));
                if !c.passed() {
                    let (_, coord) = c.report.worst.unwrap_or_default();
                    failed.push(format!(
                        "{}: {}[{coord}] analytic {:.6e} numeric {:.6e}",
                        c.task,
                        c.worst_param.as_deref().unwrap_or("?"),
                        c.report.worst_analytic,
                        c.report.worst_numeric
                    ));
                }
            }
            if !failed.is_empty() {
                return Err(CliError::Verify(failed.join("; ")));
            }
        }
        Command::Metrics { fused, x, y, reference } => {
            let f = io(&fused, read_image(&fused))?;
            let xi = io(&x, read_image(&x))?;
            let yi = io(&y, read_image(&y))?;
            let r = match &reference {
                Some(p) => Some(io(p, read_image(p))?),
                None => None,
            };
            say(compute_metrics(&f, &xi, &yi, r.as_ref())?.to_string());
        }
    }
    Ok(())
}
