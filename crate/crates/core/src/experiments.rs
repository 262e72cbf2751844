//! Experiment drivers: configuration, runs and artifact bundles.
//!
//! Each run writes CSV tables, PGM/CSV images for the image experiments, a
//! timing table and `manifest.json` holding a SHA-256 hash of the numeric
//! configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{kfold_rmse, load_csv, TabularDataset};
use crate::gaussian::DesignBlock;
use crate::gig::{ln_marginal_prior, GigParams, PriorKind};
use crate::hyper::{tune_dirac_em, tune_interleaved, tune_nested, DiracVariant, TunedPath, TunerConfig};
use crate::model::{CovNeed, LinearModel, RowData};
use crate::online::{make_batches, BatchPlan, BatchStrategy, LowRankState};
use crate::tvop::{
    build_tv_design, fourier_truncate, fourier_truncate_count, shepp_logan, toy_image, BlurSpec, ImageGrid,
    SpectralBasis, TvDesign, TvRows,
};
use crate::vbl::{credible_flags, vbl_run, HyperParams, PosteriorTriple, StoppingRule, VblOptions, VblTrace};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tuner {
    None,
    Nested,
    Interleaved,
    Dirac,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TvImage {
    SheppLogan,
    Toy,
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TvSolver {
    /// Every observation, every mode (small grids only).
    Full,
    /// Modes with blur factor above ρ·γ.
    Truncated { rho: f64 },
    /// The `count` dominant modes.
    TruncatedCount { count: usize },
    /// Low-rank online: first batch `2M` observations, then `M` per batch.
    /// Rows live on the modes with blur factor above `band_rho`·γ and each
    /// batch runs `inner` iterations.
    Online { first_batch: usize, band_rho: f64, inner: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvExperiment {
    pub image: TvImage,
    pub p0: usize,
    pub omega: f64,
    pub solver: TvSolver,
    /// Also run the Gaussian (Tikhonov) prior with variance 2/λ².
    pub baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum ExperimentKind {
    Fit { data: PathBuf, label: String },
    CrossValidation { data: PathBuf, label: String, folds: usize },
    Vbl2d { grid: usize },
    Tv(TvExperiment),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub id: String,
    pub kind: ExperimentKind,
    pub hp: HyperParams,
    pub stop: StoppingRule,
    pub tuner: Tuner,
    pub seed: u64,
    /// Repetitions for the timing table.
    pub reps: usize,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn new(id: impl Into<String>, kind: ExperimentKind, hp: HyperParams, out_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            id: id.into(),
            kind,
            hp,
            stop: StoppingRule::iterate_delta(1e-8, 500),
            tuner: Tuner::None,
            seed: 7,
            reps: 30,
            out_dir: out_dir.into(),
        }
    }

    /// SHA-256 of the JSON form (output directory excluded).
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Every file the run reads must exist.
    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        self.stop.validate()?;
        let missing = |p: &Path| Error::Invalid(format!("input file {} does not exist", p.display()));
        match &self.kind {
            ExperimentKind::Fit { data, .. } | ExperimentKind::CrossValidation { data, .. } if !data.exists() => {
                Err(missing(data))
            }
            ExperimentKind::Tv(TvExperiment { image: TvImage::File(f), .. }) if !f.exists() => Err(missing(f)),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ExperimentReport {
    pub metrics: BTreeMap<String, f64>,
    pub files: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    id: &'a str,
    config: &'a ExperimentConfig,
    config_hash: String,
    /// Hash of the manifest this run replaced, when it differed.
    replaced_hash: Option<String>,
    metrics: &'a BTreeMap<String, f64>,
    files: &'a [String],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingRow {
    pub phase: &'static str,
    pub reps: usize,
    pub median_s: f64,
    pub iqr_s: f64,
}

impl TimingRow {
    pub fn from_samples(phase: &'static str, samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let q = |f: f64| {
            let pos = f * (s.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
        };
        TimingRow { phase, reps: s.len(), median_s: q(0.5), iqr_s: q(0.75) - q(0.25) }
    }
}

struct Bundle {
    dir: PathBuf,
    report: ExperimentReport,
    timing: Vec<TimingRow>,
}

impl Bundle {
    fn path(&mut self, name: &str) -> PathBuf {
        self.report.files.push(name.to_string());
        self.dir.join(name)
    }

    fn table<T: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<()> {
        let mut w = csv::Writer::from_path(self.path(name))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    fn image(&mut self, stem: &str, img: &ImageGrid, lo: f64, hi: f64) -> Result<()> {
        img.save_pgm(self.path(&format!("{stem}.pgm")), lo, hi)?;
        img.save_csv(self.path(&format!("{stem}.csv")))
    }

    fn metric(&mut self, key: &str, v: f64) {
        self.report.metrics.insert(key.to_string(), v);
    }

    fn time(&mut self, phase: &'static str, t: Instant) {
        self.timing.push(TimingRow::from_samples(phase, &[t.elapsed().as_secs_f64()]));
    }
}

/// Runs one experiment and writes its artifact bundle into `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let ctx = |e: Error| e.context(format!("experiment {}", cfg.id));
    cfg.validate().map_err(ctx)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| ctx(e.into()))?;
    let mut b = Bundle { dir: cfg.out_dir.clone(), report: ExperimentReport::default(), timing: Vec::new() };
    match &cfg.kind {
        ExperimentKind::Fit { data, label } => run_fit(cfg, &load_csv(data, label).map_err(ctx)?, &mut b),
        ExperimentKind::CrossValidation { data, label, folds } => {
            run_cv(cfg, &load_csv(data, label).map_err(ctx)?, *folds, &mut b)
        }
        ExperimentKind::Vbl2d { grid } => run_vbl2d(cfg, *grid, &mut b),
        ExperimentKind::Tv(tv) => run_tv(cfg, tv, &mut b),
    }
    .map_err(ctx)?;
    let timing = std::mem::take(&mut b.timing);
    b.table("timing.csv", timing).map_err(ctx)?;
    write_manifest(cfg, &mut b.report).map_err(ctx)?;
    Ok(b.report)
}

fn write_manifest(cfg: &ExperimentConfig, report: &mut ExperimentReport) -> Result<()> {
    let path = cfg.out_dir.join("manifest.json");
    let hash = cfg.hash();
    let replaced_hash = fs::read(&path)
        .ok()
        .and_then(|bytes| serde_json::from_slice::<serde_json::Value>(&bytes).ok())
        .and_then(|v| v.get("config_hash").and_then(|h| h.as_str()).map(str::to_string))
        .filter(|old| *old != hash);
    if let Some(old) = &replaced_hash {
        log::warn!("{}: configuration changed since the previous run ({old} -> {hash})", cfg.id);
    }
    report.files.push("manifest.json".into());
    let m = Manifest {
        id: &cfg.id,
        config: cfg,
        config_hash: hash,
        replaced_hash,
        metrics: &report.metrics,
        files: &report.files,
    };
    fs::write(path, serde_json::to_vec_pretty(&m)?)?;
    Ok(())
}

fn tuner_config(cfg: &ExperimentConfig) -> TunerConfig {
    TunerConfig { inner: cfg.stop, ..TunerConfig::new(cfg.stop.max_iter, 1e-6) }
}

/// Hyperparameters from the configured tuner (unchanged for `Tuner::None`).
pub fn tune<M: LinearModel>(model: &M, cfg: &ExperimentConfig) -> Result<(HyperParams, Option<crate::hyper::TuneResult>)> {
    let tc = tuner_config(cfg);
    let res = match cfg.tuner {
        Tuner::None => return Ok((cfg.hp, None)),
        Tuner::Nested => tune_nested(model, &cfg.hp, &tc)?,
        Tuner::Interleaved => tune_interleaved(model, &cfg.hp, &tc)?,
        Tuner::Dirac => tune_dirac_em(model, &cfg.hp, TunedPath::Vbem, DiracVariant::default(), &tc)?,
    };
    Ok((res.hp, Some(res)))
}

#[derive(Serialize)]
struct CoefRow<'a> {
    name: &'a str,
    mu: f64,
    m: f64,
    lower_2sd: f64,
    upper_2sd: f64,
    zero_inside: bool,
    flagged: bool,
}

fn coefficient_rows<'a>(names: &'a [String], t: &PosteriorTriple) -> Vec<CoefRow<'a>> {
    credible_flags(t)
        .into_iter()
        .map(|f| CoefRow {
            name: &names[f.index],
            mu: t.mu[f.index],
            m: t.m[f.index],
            lower_2sd: f.lower,
            upper_2sd: f.upper,
            zero_inside: f.zero_inside,
            flagged: f.flagged,
        })
        .collect()
}

/// One monolithic VBL fit with full covariance.
pub fn fit_block(block: &DesignBlock, hp: &HyperParams, stop: &StoppingRule) -> Result<(PosteriorTriple, VblTrace)> {
    let opts = VblOptions { cov: Some(CovNeed::Full), ..Default::default() };
    vbl_run(block, block, hp, PosteriorTriple::initial(block.p(), CovNeed::Full), stop, opts, |_, _| {})
}

fn run_fit(cfg: &ExperimentConfig, ds: &TabularDataset, b: &mut Bundle) -> Result<()> {
    let block = ds.block()?;
    let t = Instant::now();
    let (hp, tuned) = tune(&block, cfg)?;
    b.time("tune", t);
    if let Some(res) = &tuned {
        res.trace.save_csv(b.path("hyper_trace.csv"))?;
    }
    let (triple, trace) = fit_block(&block, &hp, &cfg.stop)?;
    let samples: Vec<f64> = (0..cfg.reps.max(1))
        .map(|_| {
            let t = Instant::now();
            let _ = fit_block(&block, &hp, &cfg.stop);
            t.elapsed().as_secs_f64()
        })
        .collect();
    b.timing.push(TimingRow::from_samples("fit", &samples));
    b.table("coefficients.csv", coefficient_rows(&ds.names, &triple))?;
    trace.save_csv(b.path("trace.csv"))?;
    b.metric("n", ds.n() as f64);
    b.metric("p", ds.p() as f64);
    b.metric("gamma", hp.gamma());
    b.metric("lambda", hp.lambda);
    b.metric("iterations", trace.steps.len() as f64);
    b.metric("misfit", trace.steps.last().map_or(f64::NAN, |s| s.misfit_m));
    Ok(())
}

fn run_cv(cfg: &ExperimentConfig, ds: &TabularDataset, folds: usize, b: &mut Bundle) -> Result<()> {
    let t = Instant::now();
    let rmse = kfold_rmse(ds, &cfg.hp, folds, cfg.seed, &cfg.stop)?;
    b.time("cross_validation", t);
    #[derive(Serialize)]
    struct Row {
        folds: usize,
        seed: u64,
        gamma: f64,
        lambda: f64,
        rmse: f64,
    }
    b.table("cv.csv", [Row { folds, seed: cfg.seed, gamma: cfg.hp.gamma(), lambda: cfg.hp.lambda, rmse }])?;
    b.metric("n", ds.n() as f64);
    b.metric("rmse", rmse);
    Ok(())
}

/// The two-coefficient example: X = [[1, 0.6], [0.4, 1]], Y = (1.5, 0.3),
/// γ = 0.7, λ = 1.5, ν = 1, δ = 10⁻³.
pub fn example_2d() -> (DesignBlock, HyperParams) {
    let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.4, 1.0]);
    let y = DVector::from_vec(vec![1.5, 0.3]);
    let hp = HyperParams::new(0.49, 1.5, 1e-3, PriorKind::LaplaceNu1).expect("valid example");
    (DesignBlock::new(x, y).expect("2x2 block"), hp)
}

/// Unnormalized log posterior ln p(Y|β) + Σ ln p(β_j) tabulated on a square grid.
#[derive(Debug, Clone)]
pub struct Grid2d {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
    /// ln density, index (i, j) ↔ (β₁, β₂) = (node(i), node(j)).
    pub log_density: DMatrix<f64>,
    /// ln p(β) at each node.
    pub log_prior: Vec<f64>,
    pub gig: GigParams,
}

impl Grid2d {
    pub fn tabulate(block: &DesignBlock, hp: &HyperParams, lo: f64, hi: f64, points: usize) -> Result<Self> {
        if block.p() != 2 || points < 2 {
            return Err(Error::Invalid("the grid needs a two-coefficient model and at least two points".into()));
        }
        let h = (hi - lo) / (points - 1) as f64;
        let node = |i: usize| lo + i as f64 * h;
        let prior: Vec<f64> =
            (0..points).map(|i| ln_marginal_prior(&hp.gig(), node(i))).collect::<Result<Vec<f64>>>()?;
        let (x, y) = (block.x(), block.y());
        let log_density = DMatrix::from_fn(points, points, |i, j| {
            let (b1, b2) = (node(i), node(j));
            let r0 = y[0] - x[(0, 0)] * b1 - x[(0, 1)] * b2;
            let r1 = y[1] - x[(1, 0)] * b1 - x[(1, 1)] * b2;
            -(r0 * r0 + r1 * r1) / (2.0 * hp.gamma_sq) + prior[i] + prior[j]
        });
        Ok(Grid2d { lo, hi, points, log_density, log_prior: prior, gig: hp.gig() })
    }

    pub fn cell(&self) -> f64 {
        (self.hi - self.lo) / (self.points - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.cell()
    }

    pub fn argmax(&self) -> [f64; 2] {
        let (k, _) = self.log_density.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).expect("non-empty grid");
        let (i, j) = (k % self.points, k / self.points);
        [self.node(i), self.node(j)]
    }

    /// Posterior mean and covariance by the trapezoid rule.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let top = self.log_density.max();
        let mut z = 0.0;
        let mut s1 = DVector::zeros(2);
        let mut s2 = DMatrix::zeros(2, 2);
        for j in 0..self.points {
            for i in 0..self.points {
                let w = self.weight(i) * self.weight(j) * (self.log_density[(i, j)] - top).exp();
                let v = DVector::from_vec(vec![self.node(i), self.node(j)]);
                z += w;
                s1 += w * &v;
                s2 += w * &v * v.transpose();
            }
        }
        let mean = s1 / z;
        let cov = s2 / z - &mean * mean.transpose();
        (mean, cov)
    }

    fn weight(&self, i: usize) -> f64 {
        if i == 0 || i + 1 == self.points {
            0.5
        } else {
            1.0
        }
    }

    /// KL(N(m, C) ‖ posterior) up to the log normalizer of the posterior, by the
    /// trapezoid rule on this grid.
    pub fn kl(&self, m: &DVector<f64>, c: &DMatrix<f64>) -> Result<f64> {
        self.gaussian_expectation(m, c, |i, j| self.log_density[(i, j)])
    }

    /// The mean-field objective: KL(N(m, C) q(θ) ‖ p(β, θ | Y)) minimized over
    /// q(θ), up to the log evidence. The θ-minimization leaves the marginal prior
    /// evaluated at √(m_j² + C_jj); the likelihood part is integrated on the grid.
    pub fn variational_kl(&self, m: &DVector<f64>, c: &DMatrix<f64>) -> Result<f64> {
        let lik = |i: usize, j: usize| self.log_density[(i, j)] - self.log_prior[i] - self.log_prior[j];
        let mut total = self.gaussian_expectation(m, c, lik)?;
        for k in 0..2 {
            total -= ln_marginal_prior(&self.gig, (m[k] * m[k] + c[(k, k)]).sqrt())?;
        }
        Ok(total)
    }

    /// ∫ q (ln q − f) for q = N(m, C) by the trapezoid rule.
    fn gaussian_expectation(&self, m: &DVector<f64>, c: &DMatrix<f64>, f: impl Fn(usize, usize) -> f64) -> Result<f64> {
        let chol = c.clone().cholesky().ok_or_else(|| Error::Invalid("covariance is not positive definite".into()))?;
        let ln_det = 2.0 * chol.l().diagonal().map(f64::ln).sum();
        let inv = chol.inverse();
        let h2 = self.cell() * self.cell();
        let mut total = 0.0;
        for j in 0..self.points {
            for i in 0..self.points {
                let d = DVector::from_vec(vec![self.node(i) - m[0], self.node(j) - m[1]]);
                let ln_q = -0.5 * (d.dot(&(&inv * &d)) + ln_det) - (2.0 * std::f64::consts::PI).ln();
                let q = ln_q.exp();
                if q > 0.0 {
                    total += self.weight(i) * self.weight(j) * h2 * q * (ln_q - f(i, j));
                }
            }
        }
        Ok(total)
    }
}

fn run_vbl2d(cfg: &ExperimentConfig, grid: usize, b: &mut Bundle) -> Result<()> {
    let (block, _) = example_2d();
    let hp = cfg.hp;
    let t = Instant::now();
    let (triple, trace) = fit_block(&block, &hp, &cfg.stop)?;
    b.time("fit", t);
    let t = Instant::now();
    let g = Grid2d::tabulate(&block, &hp, -4.0, 4.0, grid)?;
    let (qm, qc) = g.moments();
    let c = triple.cov.full().cloned().unwrap_or_else(|| DMatrix::from_diagonal(&triple.cov_diag()));
    let kl = g.kl(&triple.m, &c)?;
    let vkl = g.variational_kl(&triple.m, &c)?;
    b.time("quadrature", t);
    let argmax = g.argmax();

    #[derive(Serialize)]
    struct Point {
        beta1: f64,
        beta2: f64,
        log_density: f64,
    }
    let stride = (grid / 200).max(1);
    let mut pts = Vec::new();
    for j in (0..grid).step_by(stride) {
        for i in (0..grid).step_by(stride) {
            pts.push(Point { beta1: g.node(i), beta2: g.node(j), log_density: g.log_density[(i, j)] });
        }
    }
    b.table("density.csv", pts)?;

    #[derive(Serialize)]
    struct Cmp {
        quantity: &'static str,
        vbl: f64,
        quadrature: f64,
    }
    let rows = [
        Cmp { quantity: "mu1_vs_argmax", vbl: triple.mu[0], quadrature: argmax[0] },
        Cmp { quantity: "mu2_vs_argmax", vbl: triple.mu[1], quadrature: argmax[1] },
        Cmp { quantity: "m1_vs_mean", vbl: triple.m[0], quadrature: qm[0] },
        Cmp { quantity: "m2_vs_mean", vbl: triple.m[1], quadrature: qm[1] },
        Cmp { quantity: "c11_vs_var", vbl: c[(0, 0)], quadrature: qc[(0, 0)] },
        Cmp { quantity: "c12_vs_cov", vbl: c[(0, 1)], quadrature: qc[(0, 1)] },
        Cmp { quantity: "c22_vs_var", vbl: c[(1, 1)], quadrature: qc[(1, 1)] },
    ];
    b.table("quadrature_comparison.csv", rows)?;
    b.table("coefficients.csv", coefficient_rows(&["beta1".into(), "beta2".into()], &triple))?;
    trace.save_csv(b.path("trace.csv"))?;
    b.metric("grid_cell", g.cell());
    b.metric("kl", kl);
    b.metric("variational_kl", vkl);
    b.metric("mu_argmax_distance", (triple.mu[0] - argmax[0]).abs().max((triple.mu[1] - argmax[1]).abs()));
    Ok(())
}

/// Ground truth, forward model and simulated data for an image experiment.
pub struct TvSetup {
    pub truth: ImageGrid,
    pub spec: BlurSpec,
    pub design: TvDesign,
    pub y: DVector<f64>,
}

pub fn tv_setup(tv: &TvExperiment, gamma: f64, seed: u64) -> Result<TvSetup> {
    let truth = match &tv.image {
        TvImage::SheppLogan => shepp_logan(tv.p0)?,
        TvImage::Toy => toy_image(tv.p0)?,
        TvImage::File(f) => ImageGrid::load(f)?,
    };
    if truth.p0() != tv.p0 {
        return Err(Error::Dimension(format!("image side {} but p0 = {}", truth.p0(), tv.p0)));
    }
    let spec = BlurSpec::full(tv.p0, tv.omega, gamma);
    let design = build_tv_design(&spec)?;
    let y = design.simulate(&truth, seed);
    Ok(TvSetup { truth, spec, design, y })
}

/// One row of an image-experiment trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TvTraceRow {
    pub iter: usize,
    pub misfit_m: f64,
    pub misfit_mu: f64,
    pub err_m: f64,
    pub err_mu: f64,
    pub delta_m: f64,
}

/// Monolithic VBL on an image model, recording reconstruction errors per iterate.
pub fn tv_monolithic<M: LinearModel>(
    model: &M,
    setup: &TvSetup,
    hp: &HyperParams,
    stop: &StoppingRule,
) -> Result<(PosteriorTriple, Vec<TvTraceRow>)> {
    let opts = VblOptions { cov: Some(CovNeed::Diagonal), skip_objectives: true, ..Default::default() };
    let init = PosteriorTriple::initial(model.dim(), CovNeed::Diagonal);
    let mut rows = Vec::new();
    let (triple, _) = vbl_run(model, model, hp, init, stop, opts, |info, t| {
        rows.push(TvTraceRow {
            iter: info.iter,
            misfit_m: info.misfit_m,
            misfit_mu: info.misfit_mu,
            err_m: setup.design.image(&t.m).relative_error(&setup.truth),
            err_mu: setup.design.image(&t.mu).relative_error(&setup.truth),
            delta_m: info.delta_m,
        });
    })?;
    Ok((triple, rows))
}

/// Per-batch record of the online image run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TvBatchRow {
    pub batch: usize,
    pub rows: usize,
    pub err_m: f64,
    pub tail_sum: f64,
    pub seconds: f64,
}

/// Strided batches of M = first_batch/2 pixels with the first two merged.
pub fn tv_batches(n: usize, first_batch: usize) -> Result<Vec<Vec<usize>>> {
    let m = first_batch / 2;
    let mut batches = make_batches(n, &BatchPlan { batch_size: m.max(1), strategy: BatchStrategy::Strided, seed: 0 })?;
    if batches.len() >= 2 {
        let mut first = batches.remove(0);
        first.extend(batches.remove(0));
        first.sort_unstable();
        batches.insert(0, first);
    }
    Ok(batches)
}

/// Low-rank online VBEM over strided pixel batches. Only the VBEM path is run.
pub fn tv_online(
    setup: &TvSetup,
    hp: &HyperParams,
    first_batch: usize,
    band_rho: f64,
    inner: usize,
    mut on_batch: impl FnMut(&TvBatchRow),
) -> Result<(PosteriorTriple, Vec<TvBatchRow>)> {
    let p0 = setup.spec.p0;
    let basis = Arc::new(SpectralBasis::above(p0, setup.spec.omega, band_rho * hp.gamma())?);
    let rank = first_batch / 2;
    let pixels = setup.design.pixels();
    let batches = tv_batches(pixels.len(), first_batch)?;
    let mut state = LowRankState::new(TvRows::observations(basis.clone(), &[]), rank)?;
    state.opts.skip_em = true;
    state.opts.skip_objectives = true;
    let stop = StoppingRule::iterate_delta(f64::MIN_POSITIVE, inner);
    let mut rows = Vec::with_capacity(batches.len());
    for (k, idx) in batches.iter().enumerate() {
        let t = Instant::now();
        let px: Vec<usize> = idx.iter().map(|&i| pixels[i]).collect();
        let batch_rows = TvRows::observations(basis.clone(), &px);
        let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| setup.y[i]));
        let rep = state.step(&batch_rows, &y, hp, &stop, |_, _| {})?;
        let row = TvBatchRow {
            batch: k,
            rows: idx.len(),
            err_m: setup.design.image(&state.m_star).relative_error(&setup.truth),
            tail_sum: rep.tail_sum,
            seconds: t.elapsed().as_secs_f64(),
        };
        on_batch(&row);
        rows.push(row);
    }
    Ok((state.triple(), rows))
}

/// Tikhonov counterpart of `hp`: Gaussian prior with the Laplace variance 2/λ².
pub fn tikhonov(hp: &HyperParams) -> Result<HyperParams> {
    HyperParams::new(hp.gamma_sq, hp.lambda, hp.delta, PriorKind::FixedScale(2.0 / (hp.lambda * hp.lambda)))
}

fn tv_maps(setup: &TvSetup, t: &PosteriorTriple, with_map: bool, b: &mut Bundle) -> Result<()> {
    let p0 = setup.spec.p0;
    let np = p0 * p0;
    let (lo, hi) = (0.0, setup.truth.values().iter().cloned().fold(f64::MIN, f64::max).max(1e-12));
    b.image("truth", &setup.truth, lo, hi)?;
    if setup.design.n() == np {
        let mut obs = vec![0.0; np];
        for (&k, v) in setup.design.pixels().iter().zip(setup.y.iter()) {
            obs[k] = *v;
        }
        b.image("observed", &ImageGrid::new(p0, obs)?, lo, hi)?;
    }
    b.image("mean", &setup.design.image(&t.m), lo, hi)?;
    if with_map {
        b.image("map", &setup.design.image(&t.mu), lo, hi)?;
    }
    let grad_norm = ImageGrid::new(p0, (0..np).map(|k| t.m[k].hypot(t.m[np + k])).collect())?;
    let gmax = grad_norm.values().iter().cloned().fold(1e-12, f64::max);
    b.image("gradient_norm", &grad_norm, 0.0, gmax)?;
    let d = t.cov_diag();
    let sd = ImageGrid::new(p0, (0..np).map(|k| (d[k].max(0.0) + d[np + k].max(0.0)).sqrt()).collect())?;
    let smax = sd.values().iter().cloned().fold(1e-12, f64::max);
    b.image("gradient_std", &sd, 0.0, smax)
}

fn run_tv(cfg: &ExperimentConfig, tv: &TvExperiment, b: &mut Bundle) -> Result<()> {
    let hp = cfg.hp;
    let t = Instant::now();
    let setup = tv_setup(tv, hp.gamma(), cfg.seed)?;
    b.time("setup", t);
    b.metric("n", setup.design.n() as f64);
    b.metric("p", setup.design.p() as f64);
    let t = Instant::now();
    let triple = match tv.solver {
        TvSolver::Full => {
            let basis = Arc::new(SpectralBasis::full(tv.p0, tv.omega)?);
            let model = RowData::new(TvRows::observations(basis, setup.design.pixels()), setup.y.clone())?;
            let triple = tv_trace(cfg, &model, &setup, &hp, b, "")?;
            if tv.baseline {
                let base = tv_trace(cfg, &model, &setup, &tikhonov(&hp)?, b, "tikhonov_")?;
                b.image("tikhonov_mean", &setup.design.image(&base.m), 0.0, 1.0)?;
            }
            triple
        }
        TvSolver::Truncated { .. } | TvSolver::TruncatedCount { .. } => {
            let trunc = match tv.solver {
                TvSolver::Truncated { rho } => fourier_truncate(&setup.spec, rho)?,
                TvSolver::TruncatedCount { count } => fourier_truncate_count(&setup.spec, count)?,
                _ => unreachable!(),
            };
            b.metric("n_tilde", trunc.n_tilde() as f64);
            b.metric("observation_truncation_error", trunc.observation_error(&setup.truth));
            let model = trunc.model(&setup.y)?;
            b.time("truncate", t);
            let triple = tv_trace(cfg, &model, &setup, &hp, b, "")?;
            if tv.baseline {
                tv_trace(cfg, &model, &setup, &tikhonov(&hp)?, b, "tikhonov_")?;
            }
            triple
        }
        TvSolver::Online { first_batch, band_rho, inner } => {
            let (triple, rows) = tv_online(&setup, &hp, first_batch, band_rho, inner, |r| {
                log::info!("batch {} ({} rows): error {:.4}, {:.1}s", r.batch, r.rows, r.err_m, r.seconds);
            })?;
            b.metric("first_batch_err_m", rows.first().map_or(f64::NAN, |r| r.err_m));
            b.metric("batches", rows.len() as f64);
            b.table("batches.csv", rows)?;
            triple
        }
    };
    b.time("solve", t);
    b.metric("err_m", setup.design.image(&triple.m).relative_error(&setup.truth));
    let online = matches!(tv.solver, TvSolver::Online { .. });
    if !online {
        b.metric("err_mu", setup.design.image(&triple.mu).relative_error(&setup.truth));
    }
    tv_maps(&setup, &triple, !online, b)
}

fn tv_trace<M: LinearModel>(
    cfg: &ExperimentConfig,
    model: &M,
    setup: &TvSetup,
    hp: &HyperParams,
    b: &mut Bundle,
    prefix: &str,
) -> Result<PosteriorTriple> {
    let (triple, rows) = tv_monolithic(model, setup, hp, &cfg.stop)?;
    let best_mu = rows.iter().map(|r| r.err_mu).fold(f64::INFINITY, f64::min);
    let best_m = rows.iter().map(|r| r.err_m).fold(f64::INFINITY, f64::min);
    if let Some(last) = rows.last() {
        b.metric(&format!("{prefix}final_err_m"), last.err_m);
        b.metric(&format!("{prefix}final_err_mu"), last.err_mu);
        b.metric(&format!("{prefix}final_misfit"), last.misfit_m);
    }
    b.metric(&format!("{prefix}best_err_m"), best_m);
    b.metric(&format!("{prefix}best_err_mu"), best_mu);
    b.metric(&format!("{prefix}iterations"), rows.len() as f64);
    b.table(&format!("{prefix}trace.csv"), rows)?;
    Ok(triple)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timing_quantiles() {
        let r = TimingRow::from_samples("x", &[4.0, 1.0, 3.0, 2.0, 5.0]);
        assert_eq!((r.median_s, r.iqr_s, r.reps), (3.0, 2.0, 5));
    }

    #[test]
    fn hash_ignores_output_dir() {
        let (_, hp) = example_2d();
        let a = ExperimentConfig::new("x", ExperimentKind::Vbl2d { grid: 50 }, hp, "/tmp/a");
        let mut b = a.clone();
        b.out_dir = "/tmp/b".into();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn first_batch_is_doubled() {
        let b = tv_batches(100, 20).unwrap();
        assert_eq!(b[0].len(), 20);
        assert_eq!(b.iter().map(Vec::len).sum::<usize>(), 100);
        assert_eq!(b.len(), 9);
    }
}
