//! Tabular regression data: CSV ingestion, standardization and k-fold CV.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::gaussian::DesignBlock;
use crate::model::CovNeed;
use crate::vbl::{vbl_run, HyperParams, PosteriorTriple, StoppingRule, VblOptions};
use crate::{Error, Result};

/// Column centring and scaling applied at load time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    /// Column L2 norm after centring; columns end up with unit norm.
    pub x_scale: Vec<f64>,
    pub y_mean: f64,
}

#[derive(Debug, Clone)]
pub struct TabularDataset {
    pub names: Vec<String>,
    pub label: String,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub record: Standardization,
}

impl TabularDataset {
    /// Standardizes raw columns: centred, unit L2 norm, y centred.
    pub fn from_raw(names: Vec<String>, label: String, x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let (n, p) = x.shape();
        if names.len() != p || y.len() != n {
            return Err(Error::Dimension(format!("{n}x{p} design with {} names and {} labels", names.len(), y.len())));
        }
        if n < 2 {
            return Err(Error::Invalid("need at least two rows".into()));
        }
        let mut xs = x;
        let mut x_mean = Vec::with_capacity(p);
        let mut x_scale = Vec::with_capacity(p);
        for j in 0..p {
            let mut col = xs.column_mut(j);
            let mean = col.mean();
            col.add_scalar_mut(-mean);
            let scale = col.norm();
            if !(scale > 0.0) {
                return Err(Error::Invalid(format!("column {} is constant", names[j])));
            }
            col /= scale;
            x_mean.push(mean);
            x_scale.push(scale);
        }
        let y_mean = y.mean();
        let y = y.add_scalar(-y_mean);
        Ok(TabularDataset { names, label, x: xs, y, record: Standardization { x_mean, x_scale, y_mean } })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn block(&self) -> Result<DesignBlock> {
        DesignBlock::new(self.x.clone(), self.y.clone())
    }

    /// Undoes the standardization.
    pub fn raw(&self) -> (DMatrix<f64>, DVector<f64>) {
        let r = &self.record;
        let mut x = self.x.clone();
        for (j, mut col) in x.column_iter_mut().enumerate() {
            col *= r.x_scale[j];
            col.add_scalar_mut(r.x_mean[j]);
        }
        (x, self.y.add_scalar(r.y_mean))
    }

    /// Coefficients for the raw columns and the intercept.
    pub fn raw_coefficients(&self, beta: &DVector<f64>) -> (DVector<f64>, f64) {
        let r = &self.record;
        let b = DVector::from_fn(beta.len(), |j, _| beta[j] / r.x_scale[j]);
        let intercept = r.y_mean - b.iter().zip(&r.x_mean).map(|(b, m)| b * m).sum::<f64>();
        (b, intercept)
    }
}

/// Reads a headed CSV; `label` names the response column.
pub fn read_csv<R: Read>(input: R, label: &str) -> Result<TabularDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let li = header
        .iter()
        .position(|h| h == label)
        .ok_or_else(|| Error::Invalid(format!("label column '{label}' not in header")))?;
    let names: Vec<String> = header.iter().enumerate().filter(|(i, _)| *i != li).map(|(_, h)| h.clone()).collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 2;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                row,
                column: rec.len().min(header.len()) + 1,
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                column: c + 1,
                message: format!("'{cell}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { row, column: c + 1, message: "missing or non-finite value".into() });
            }
            if c == li {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    let n = ys.len();
    let x = DMatrix::from_row_slice(n, names.len(), &xs);
    TabularDataset::from_raw(names, label.to_string(), x, DVector::from_vec(ys))
}

pub fn load_csv(path: impl AsRef<Path>, label: &str) -> Result<TabularDataset> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::from(e).context(format!("opening {}", path.display())))?;
    read_csv(f, label).map_err(|e| e.context(format!("reading {}", path.display())))
}

/// Seeded fold assignment: a shuffled permutation cut into k near-equal parts.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Invalid("k-fold CV needs k >= 2".into()));
    }
    if n / k < 1 {
        return Err(Error::Invalid(format!("{n} rows cannot fill {k} folds")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, idx) in perm.into_iter().enumerate() {
        folds[i % k].push(idx);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Worker count from `SPARSEVB_THREADS`, defaulting to the available cores.
pub fn thread_budget() -> usize {
    std::env::var("SPARSEVB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn select(ds: &TabularDataset, rows: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let x = DMatrix::from_fn(rows.len(), ds.p(), |i, j| ds.x[(rows[i], j)]);
    let y = DVector::from_fn(rows.len(), |i, _| ds.y[rows[i]]);
    (x, y)
}

/// Squared prediction errors on one held-out fold. The training part is
/// re-centred, so the fit carries its own intercept.
fn fold_sq_error(ds: &TabularDataset, test: &[usize], hp: &HyperParams, stop: &StoppingRule) -> Result<f64> {
    let train: Vec<usize> = (0..ds.n()).filter(|i| test.binary_search(i).is_err()).collect();
    let (mut xt, mut yt) = select(ds, &train);
    let x_mean: Vec<f64> = xt.column_iter().map(|c| c.mean()).collect();
    for (j, mut col) in xt.column_iter_mut().enumerate() {
        col.add_scalar_mut(-x_mean[j]);
    }
    let y_mean = yt.mean();
    yt.add_scalar_mut(-y_mean);
    let block = DesignBlock::new(xt, yt)?;
    let opts = VblOptions { cov: Some(CovNeed::Full), skip_objectives: true, ..Default::default() };
    let init = PosteriorTriple::initial(ds.p(), CovNeed::Full);
    let (triple, _) = vbl_run(&block, &block, hp, init, stop, opts, |_, _| {})?;
    let (xs, ys) = select(ds, test);
    let mut sq = 0.0;
    for i in 0..test.len() {
        let pred = y_mean + (0..ds.p()).map(|j| (xs[(i, j)] - x_mean[j]) * triple.m[j]).sum::<f64>();
        sq += (ys[i] - pred).powi(2);
    }
    Ok(sq)
}

/// Pooled k-fold RMSE of the VBEM mean as predictor.
pub fn kfold_rmse(ds: &TabularDataset, hp: &HyperParams, k: usize, seed: u64, stop: &StoppingRule) -> Result<f64> {
    let folds = kfold_split(ds.n(), k, seed)?;
    let workers = thread_budget().min(k);
    let mut errs = vec![0.0; k];
    if workers <= 1 {
        for (f, test) in folds.iter().enumerate() {
            errs[f] = fold_sq_error(ds, test, hp, stop).map_err(|e| e.context(format!("fold {f}")))?;
        }
    } else {
        let results: Vec<Result<f64>> = std::thread::scope(|s| {
            let chunks: Vec<Vec<(usize, &Vec<usize>)>> =
                (0..workers).map(|w| folds.iter().enumerate().skip(w).step_by(workers).collect()).collect();
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|chunk| {
                    s.spawn(move || {
                        chunk
                            .into_iter()
                            .map(|(f, test)| (f, fold_sq_error(ds, test, hp, stop)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            let mut out: Vec<(usize, Result<f64>)> =
                handles.into_iter().flat_map(|h| h.join().expect("fold worker panicked")).collect();
            out.sort_by_key(|(f, _)| *f);
            out.into_iter().map(|(_, r)| r).collect()
        });
        for (f, r) in results.into_iter().enumerate() {
            errs[f] = r.map_err(|e| e.context(format!("fold {f}")))?;
        }
    }
    Ok((errs.iter().sum::<f64>() / ds.n() as f64).sqrt())
}
