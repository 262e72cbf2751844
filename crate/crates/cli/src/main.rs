use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sparsevb::experiments::{
    example_2d, run_experiment, ExperimentConfig, ExperimentKind, TvExperiment, TvImage, TvSolver, Tuner,
};
use sparsevb::gig::PriorKind;
use sparsevb::vbl::{HyperParams, StoppingRule};

#[derive(Parser)]
#[command(name = "sparsevb", version, about = "Variational Bayesian LASSO fits and image deconvolution")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a tabular data set.
    Fit(FitArgs),
    /// Deblur an image under a total-variation prior.
    Tv(TvArgs),
    /// k-fold cross-validated prediction error.
    Cv(CvArgs),
    /// Two-coefficient example with a quadrature comparison.
    Vbl2d(Vbl2dArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Nu {
    #[value(name = "0")]
    Zero,
    #[value(name = "1")]
    One,
    Improper,
}

#[derive(Clone, Copy, ValueEnum)]
enum TunerArg {
    None,
    Nested,
    Interleaved,
    Dirac,
}

#[derive(Clone, Copy, ValueEnum)]
enum Phantom {
    SheppLogan,
    Toy,
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = HyperParams::DEFAULT_DELTA)]
    delta: f64,
    #[arg(long, value_enum, default_value = "1")]
    nu: Nu,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    /// Stop when successive iterates move by less than this.
    #[arg(long, default_value_t = 1e-8)]
    eps: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Timing repetitions.
    #[arg(long, default_value_t = 30)]
    reps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    label: String,
    #[arg(long, value_enum, default_value = "none")]
    tuner: TunerArg,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    label: String,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TvArgs {
    /// PGM or CSV ground-truth image; a built-in phantom is used otherwise.
    #[arg(long, conflicts_with = "phantom")]
    image: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "shepp-logan")]
    phantom: Phantom,
    #[arg(long, default_value_t = 256)]
    p0: usize,
    #[arg(long)]
    omega: f64,
    /// Keep the wavenumbers with blur factor above rho·gamma.
    #[arg(long, conflicts_with_all = ["modes", "online", "full"])]
    rho: Option<f64>,
    /// Keep this many dominant wavenumbers.
    #[arg(long, conflicts_with_all = ["online", "full"])]
    modes: Option<usize>,
    /// Stream the observations through the low-rank online update.
    #[arg(long, requires = "batch")]
    online: bool,
    /// First batch size 2M (later batches have M rows).
    #[arg(long)]
    batch: Option<usize>,
    /// Online rows keep the wavenumbers with blur factor above band_rho·gamma.
    #[arg(long, default_value_t = 0.1)]
    band_rho: f64,
    /// Inner iterations per online batch.
    #[arg(long, default_value_t = 2)]
    inner: usize,
    /// Untruncated model (small images only).
    #[arg(long)]
    full: bool,
    /// Also run the Gaussian prior with variance 2/lambda².
    #[arg(long)]
    baseline: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Vbl2dArgs {
    /// Quadrature points per direction on [-4, 4].
    #[arg(long, default_value_t = 1000)]
    grid: usize,
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn hyper(&self) -> Result<HyperParams> {
        let kind = match self.nu {
            Nu::Zero => PriorKind::InvGaussNu0,
            Nu::One => PriorKind::LaplaceNu1,
            Nu::Improper => PriorKind::JeffreysImproper,
        };
        Ok(HyperParams::new(self.gamma * self.gamma, self.lambda, self.delta, kind)?)
    }

    fn config(&self, id: &str, kind: ExperimentKind) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::new(id, kind, self.hyper()?, &self.out);
        cfg.stop = StoppingRule::iterate_delta(self.eps, self.max_iter);
        cfg.seed = self.seed;
        cfg.reps = self.reps;
        Ok(cfg)
    }
}

fn tv_solver(a: &TvArgs) -> Result<TvSolver> {
    Ok(match (a.rho, a.modes, a.online, a.full) {
        (Some(rho), None, false, false) => TvSolver::Truncated { rho },
        (None, Some(count), false, false) => TvSolver::TruncatedCount { count },
        (None, None, true, false) => {
            let first_batch = a.batch.context("--online needs --batch")?;
            if first_batch < 2 {
                bail!("--batch must be at least 2");
            }
            TvSolver::Online { first_batch, band_rho: a.band_rho, inner: a.inner }
        }
        (None, None, false, true) => TvSolver::Full,
        (None, None, false, false) => TvSolver::Truncated { rho: 0.8 },
        _ => bail!("choose one of --rho, --modes, --online, --full"),
    })
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match &cli.cmd {
        Command::Fit(a) => {
            let mut cfg = a.common.config("fit", ExperimentKind::Fit { data: a.data.clone(), label: a.label.clone() })?;
            cfg.tuner = match a.tuner {
                TunerArg::None => Tuner::None,
                TunerArg::Nested => Tuner::Nested,
                TunerArg::Interleaved => Tuner::Interleaved,
                TunerArg::Dirac => Tuner::Dirac,
            };
            cfg
        }
        Command::Cv(a) => a.common.config(
            "cv",
            ExperimentKind::CrossValidation { data: a.data.clone(), label: a.label.clone(), folds: a.folds },
        )?,
        Command::Tv(a) => {
            let image = match (&a.image, a.phantom) {
                (Some(f), _) => TvImage::File(f.clone()),
                (None, Phantom::SheppLogan) => TvImage::SheppLogan,
                (None, Phantom::Toy) => TvImage::Toy,
            };
            let tv = TvExperiment { image, p0: a.p0, omega: a.omega, solver: tv_solver(a)?, baseline: a.baseline };
            a.common.config("tv", ExperimentKind::Tv(tv))?
        }
        Command::Vbl2d(a) => {
            let (_, hp) = example_2d();
            let mut cfg = ExperimentConfig::new("vbl-2d", ExperimentKind::Vbl2d { grid: a.grid }, hp, &a.out);
            cfg.stop = StoppingRule::iterate_delta(1e-13, 10_000);
            cfg
        }
    };
    let report = run_experiment(&cfg).with_context(|| format!("running {}", cfg.id))?;
    println!("{}", serde_json::to_string_pretty(&report.metrics)?);
    log::info!("wrote {} files to {}", report.files.len(), cfg.out_dir.display());
    Ok(())
}
