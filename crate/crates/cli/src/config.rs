use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pointbev::attention::{TemporalThreshold, WindowSpec};
use pointbev::sampling::CoarseSpec;
use pointbev::train::{TemporalConfig, TrainConfig};
use pointbev::world::BENCHMARK_FRAMES;

use crate::error::{CliError, CliResult};

/// `sigmoid(-5)`, the default past-point cutoff.
const DEFAULT_TAU_TEMP: f64 = 0.0066928509242848554;

#[derive(Debug, Clone, Parser)]
#[command(name = "pbev", version, about = "Sparse BeV segmentation toolkit: self-tests, benchmarks, sweeps and toy training")]
pub struct RunConfig {
    #[command(subcommand)]
    pub command: Command,

    /// Worker threads for scene-level parallelism. 1 is the reference mode.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,

    #[arg(long, global = true, env = "PBEV_SEED", default_value_t = 42)]
    pub seed: u64,

    /// Also write an SVG plot next to each sweep CSV.
    #[arg(long, global = true)]
    pub svg: bool,

    /// JSON file with grid, pillar and camera rig. Defaults to the synthetic rig.
    #[arg(long, global = true)]
    pub geometry: Option<PathBuf>,

    /// Feature-map width of the synthetic rig.
    #[arg(long, global = true, default_value_t = 60)]
    pub feat_w: usize,

    #[arg(long, global = true, default_value_t = 28)]
    pub feat_h: usize,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Oracle-equivalence and gradient-check suites.
    Selftest {
        /// Randomized instances per oracle suite.
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Sparse vs naive feature pulling at the canonical and desk shapes.
    BenchPulling {
        /// Cap on points per shape; 0 emits the header only.
        #[arg(long)]
        points: Option<usize>,
        #[arg(long, default_value_t = 128)]
        channels: usize,
    },
    /// Submanifold pair counts and timings on the benchmark temporal instance.
    BenchAttention {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = DEFAULT_TAU_TEMP)]
        tau_temp: f64,
    },
    /// Train the toy model on the synthetic benchmark.
    Train(TrainArgs),
    /// Dense and two-pass evaluation of a model on the eval scenes.
    Eval(EvalArgs),
    /// Sparse-inference parameter sweep.
    Sweep(SweepArgs),
    /// Render param-vs-IoU and param-vs-ops curves of a CSV as SVG.
    Plot {
        csv: PathBuf,
        /// Column used as abscissa (default: the first).
        #[arg(long)]
        x: Option<String>,
        /// Output path (default: the CSV path with an .svg extension).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 2500)]
    pub n_coarse: usize,
    #[arg(long, default_value_t = 2500)]
    pub n_fine: usize,
    #[arg(long, default_value_t = 100)]
    pub n_anchor: usize,
    #[arg(long, default_value_t = 9)]
    pub k_fine: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-7)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Train with temporal fusion over past frames.
    #[arg(long)]
    pub temporal: bool,
    #[arg(long, default_value_t = DEFAULT_TAU_TEMP)]
    pub tau_temp: f64,
    /// Attention window `w_t,w_x,w_y`.
    #[arg(long, value_delimiter = ',', default_values_t = [8, 4, 4])]
    pub window: Vec<usize>,
    /// Past frames used by temporal fusion.
    #[arg(long, default_value_t = BENCHMARK_FRAMES - 1)]
    pub history: usize,
}

impl Default for TrainArgs {
    fn default() -> Self {
        let cfg = TrainConfig::default();
        Self {
            steps: cfg.steps,
            batch: cfg.batch,
            n_coarse: cfg.n_coarse,
            n_fine: cfg.n_fine,
            n_anchor: cfg.n_anchor,
            k_fine: cfg.k_fine,
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            dim: cfg.dim,
            temporal: false,
            tau_temp: DEFAULT_TAU_TEMP,
            window: vec![8, 4, 4],
            history: BENCHMARK_FRAMES - 1,
        }
    }
}

impl TrainArgs {
    pub fn window_spec(&self) -> CliResult<WindowSpec> {
        match self.window.as_slice() {
            [t, x, y] => Ok(WindowSpec::new(*t, *x, *y)),
            w => Err(CliError::Config(format!("--window takes three values, got {}", w.len()))),
        }
    }

    /// Past frames rendered for each scene.
    pub fn history(&self) -> usize {
        if self.temporal {
            self.history
        } else {
            0
        }
    }

    pub fn to_train_config(&self, seed: u64) -> CliResult<TrainConfig> {
        let temporal = if self.temporal {
            Some(TemporalConfig {
                window: self.window_spec()?,
                tau: TemporalThreshold::new(self.tau_temp)?,
                history: self.history,
            })
        } else {
            None
        };
        let cfg = TrainConfig {
            steps: self.steps,
            batch: self.batch,
            n_coarse: self.n_coarse,
            n_fine: self.n_fine,
            n_anchor: self.n_anchor,
            k_fine: self.k_fine,
            lr: self.lr,
            weight_decay: self.weight_decay,
            dim: self.dim,
            seed,
            temporal,
        };
        cfg.validate()?;
        if self.history >= BENCHMARK_FRAMES {
            return Err(CliError::Config(format!("--history must be below {BENCHMARK_FRAMES}")));
        }
        Ok(cfg)
    }
}

/// Where the evaluated model comes from.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// Checkpoint to evaluate. Without it a model is trained with default settings first.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate only the first N eval scenes.
    #[arg(long)]
    pub eval_scenes: Option<usize>,
}

fn parse_coarse(s: &str) -> Result<CoarseSpec, String> {
    s.parse().map_err(|e: pointbev::Error| e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Coarse strategies of the two-pass rows (`regular:4`, `random:2500`, `mask:lidar`, ...).
    #[arg(long, value_parser = parse_coarse, value_delimiter = ',', default_values = ["regular:4", "mask:lidar"])]
    pub coarse: Vec<CoarseSpec>,
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
    #[arg(long, default_value_t = 9)]
    pub k_fine: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Kfine,
    Tau,
    Subsample,
    #[value(name = "temporal_tau", alias = "temporal-tau")]
    TemporalTau,
}

impl SweepKind {
    pub fn file_stem(&self) -> &'static str {
        match self {
            SweepKind::Kfine => "sweep_kfine",
            SweepKind::Tau => "sweep_tau",
            SweepKind::Subsample => "sweep_subsample",
            SweepKind::TemporalTau => "sweep_temporal_tau",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    pub kind: SweepKind,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Coarse strategy for the kfine and tau sweeps.
    #[arg(long, value_parser = parse_coarse, default_value = "regular:4")]
    pub coarse: CoarseSpec,
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
    #[arg(long, default_value_t = 9)]
    pub k_fine: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 3, 5, 7, 9, 11, 13, 15])]
    pub k_list: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9])]
    pub tau_list: Vec<f64>,
    /// `S_k:k_fine` pairs for the subsample sweep.
    #[arg(long, value_delimiter = ',', default_values = ["2:3", "4:5", "8:7", "16:9", "32:13", "64:17"])]
    pub pairs: Vec<String>,
    /// Logits whose sigmoid gives the swept temporal thresholds.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_values_t = [0.0, -1.0, -2.0, -3.0, -5.0, -7.0])]
    pub logit_list: Vec<f64>,
    /// Attention window for the temporal sweep when the model has none.
    #[arg(long, value_delimiter = ',', default_values_t = [8, 4, 4])]
    pub window: Vec<usize>,
}

impl SweepArgs {
    pub fn subsample_pairs(&self) -> CliResult<Vec<(u32, usize)>> {
        self.pairs
            .iter()
            .map(|p| {
                let bad = || CliError::Config(format!("expected S_k:k_fine, got `{p}`"));
                let (s, k) = p.split_once(':').ok_or_else(bad)?;
                let s: u32 = s.trim().parse().map_err(|_| bad())?;
                let k: usize = k.trim().parse().map_err(|_| bad())?;
                if s == 0 {
                    return Err(bad());
                }
                check_k_fine(k)?;
                Ok((s, k))
            })
            .collect()
    }
}

fn check_tau(tau: f64, flag: &str) -> CliResult<()> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(CliError::Config(format!("{flag} must lie in [0, 1], got {tau}")))
    }
}

fn check_k_fine(k: usize) -> CliResult<()> {
    if k % 2 == 1 {
        Ok(())
    } else {
        Err(CliError::Config(format!("k_fine must be odd, got {k}")))
    }
}

fn check_window(w: &[usize]) -> CliResult<()> {
    if w.len() == 3 {
        Ok(())
    } else {
        Err(CliError::Config(format!("--window takes three values, got {}", w.len())))
    }
}

impl RunConfig {
    /// Checks every flag against the preconditions of the code it feeds, so
    /// that no work starts on a bad configuration.
    pub fn validate(&self) -> CliResult<()> {
        if self.threads == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        if self.feat_w == 0 || self.feat_h == 0 {
            return Err(CliError::Config("feature maps must be non-empty".into()));
        }
        let model_args = match &self.command {
            Command::BenchAttention { model, .. } => Some(model),
            Command::Eval(e) => Some(&e.model),
            Command::Sweep(s) => Some(&s.model),
            _ => None,
        };
        if model_args.and_then(|m| m.eval_scenes) == Some(0) {
            return Err(CliError::Config("--eval-scenes must be positive".into()));
        }
        match &self.command {
            Command::Selftest { instances } => {
                if *instances == 0 {
                    return Err(CliError::Config("--instances must be positive".into()));
                }
            }
            Command::BenchPulling { channels, .. } => {
                if *channels == 0 {
                    return Err(CliError::Config("--channels must be positive".into()));
                }
            }
            Command::BenchAttention { tau_temp, .. } => check_tau(*tau_temp, "--tau-temp")?,
            Command::Train(t) => {
                t.to_train_config(self.seed)?;
                check_window(&t.window)?;
                check_tau(t.tau_temp, "--tau-temp")?;
            }
            Command::Eval(e) => {
                check_tau(e.tau, "--tau")?;
                check_k_fine(e.k_fine)?;
            }
            Command::Sweep(s) => {
                check_tau(s.tau, "--tau")?;
                check_k_fine(s.k_fine)?;
                check_window(&s.window)?;
                if s.k_list.is_empty() || s.tau_list.is_empty() || s.pairs.is_empty() || s.logit_list.is_empty() {
                    return Err(CliError::Config("sweep lists must be non-empty".into()));
                }
                s.k_list.iter().try_for_each(|k| check_k_fine(*k))?;
                s.tau_list.iter().try_for_each(|t| check_tau(*t, "--tau-list"))?;
                s.subsample_pairs()?;
                if s.logit_list.iter().any(|l| !l.is_finite()) {
                    return Err(CliError::Config("--logit-list must be finite".into()));
                }
            }
            Command::Plot { .. } => {}
        }
        Ok(())
    }
}
