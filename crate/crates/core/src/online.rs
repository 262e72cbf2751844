//! Online inference: exact recursion through sufficient statistics for moderate
//! p, and the rank-M + diagonal approximate recursion for large p.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gaussian::{top_eigenpairs, DesignBlock, SufficientStats};
use crate::model::{Centered, CovNeed, CovRepr, DenseRows, RowRef, RowStore};
use crate::vbl::{vbl_run, HyperParams, PosteriorTriple, StepInfo, StoppingRule, VblOptions, VblTrace};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchStrategy {
    Sequential,
    Random,
    Strided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub strategy: BatchStrategy,
    pub seed: u64,
}

/// Partition of 0..n into batches of at most `batch_size` indices. Strided
/// batches are (i, i+b, i+2b, …) for i < b with b = ⌈n/M⌉.
pub fn make_batches(n: usize, plan: &BatchPlan) -> Result<Vec<Vec<usize>>> {
    let m = plan.batch_size;
    if m == 0 {
        return Err(Error::Invalid("batch size must be at least 1".into()));
    }
    let chunk = |idx: Vec<usize>| idx.chunks(m).map(<[usize]>::to_vec).collect();
    Ok(match plan.strategy {
        BatchStrategy::Sequential => chunk((0..n).collect()),
        BatchStrategy::Random => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(plan.seed));
            chunk(idx)
        }
        BatchStrategy::Strided => {
            let b = n.div_ceil(m);
            (0..b).map(|i| (i..n).step_by(b).collect()).collect()
        }
    })
}

pub fn stats_accumulate(stats: &SufficientStats, batch: &DesignBlock) -> Result<SufficientStats> {
    let mut out = stats.clone();
    out.push(batch)?;
    Ok(out)
}

/// Exact online VBL: sufficient statistics plus a warm-started VBL run after each batch.
#[derive(Debug, Clone)]
pub struct ExactOnline {
    pub stats: SufficientStats,
    pub triple: PosteriorTriple,
    pub hp: HyperParams,
    pub stop: StoppingRule,
    pub opts: VblOptions,
}

impl ExactOnline {
    pub fn new(p: usize, hp: HyperParams, stop: StoppingRule) -> Self {
        ExactOnline {
            stats: SufficientStats::zeros(p),
            triple: PosteriorTriple::initial(p, CovNeed::Full),
            hp,
            stop,
            opts: VblOptions::default(),
        }
    }

    pub fn assimilate(&mut self, batch: &DesignBlock) -> Result<VblTrace> {
        self.stats.push(batch)?;
        let (triple, trace) =
            vbl_run(&self.stats, &self.stats, &self.hp, self.triple.clone(), &self.stop, self.opts, |_, _| {})?;
        self.triple = triple;
        Ok(trace)
    }
}

pub fn online_exact_vbl<'a>(
    batches: impl IntoIterator<Item = &'a DesignBlock>,
    p: usize,
    hp: &HyperParams,
    stop: &StoppingRule,
) -> Result<(PosteriorTriple, SufficientStats)> {
    let mut state = ExactOnline::new(p, *hp, *stop);
    for (i, batch) in batches.into_iter().enumerate() {
        state.assimilate(batch).map_err(|e| e.context(format!("batch {i}")))?;
    }
    Ok((state.triple, state.stats))
}

/// Rank-M + diagonal state of the approximate recursion. Memory is O(Mp).
#[derive(Debug, Clone)]
pub struct LowRankState<R: RowStore> {
    /// Compressed rows X̂ (at most `rank` rows; empty before the first batch).
    pub x_hat: R,
    pub mu_star: DVector<f64>,
    pub m_star: DVector<f64>,
    /// diag C*.
    pub c_diag: DVector<f64>,
    pub rank: usize,
    pub batch_index: usize,
    /// Dropped eigenvalue sum at the last compression.
    pub tail_sum: f64,
    /// ‖𝖷ᵀ𝖷 − X̂ᵀX̂‖_F at the last compression.
    pub tail_frobenius: f64,
    /// Inner-loop options (not checkpointed). The covariance is always diagonal.
    pub opts: VblOptions,
}

fn inner_defaults() -> VblOptions {
    VblOptions { cov: Some(CovNeed::Diagonal), ..Default::default() }
}

#[derive(Debug, Clone)]
pub struct OnlineStepReport {
    pub batch_index: usize,
    pub trace: VblTrace,
    pub tail_sum: f64,
    pub tail_frobenius: f64,
}

impl<R: RowStore> LowRankState<R> {
    /// Fresh state: μ* = m* = 0, diag C* = 1, no carried rows.
    pub fn new(empty: R, rank: usize) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Invalid("rank must be at least 1".into()));
        }
        let p = empty.dim();
        let x_hat = empty.zero_rows(0);
        Ok(LowRankState {
            x_hat,
            mu_star: DVector::zeros(p),
            m_star: DVector::zeros(p),
            c_diag: DVector::from_element(p, 1.0),
            rank,
            batch_index: 0,
            tail_sum: 0.0,
            tail_frobenius: 0.0,
            opts: inner_defaults(),
        })
    }

    pub fn triple(&self) -> PosteriorTriple {
        PosteriorTriple { mu: self.mu_star.clone(), m: self.m_star.clone(), cov: CovRepr::Diagonal(self.c_diag.clone()) }
    }

    /// Off-diagonal covariance is not represented on this path.
    pub fn covariance_entry(&self, i: usize, j: usize) -> Option<f64> {
        (i == j).then(|| self.c_diag[i])
    }

    /// Assimilates one batch: inner VBL loop on the stacked rows 𝖷 = (X̂; X̃) with
    /// pseudo-observations (X̂m*; Ỹ) and (X̂μ*; Ỹ), then compresses 𝖷 to `rank` rows.
    pub fn step(
        &mut self,
        rows: &R,
        y: &DVector<f64>,
        hp: &HyperParams,
        stop: &StoppingRule,
        observer: impl FnMut(&StepInfo, &PosteriorTriple),
    ) -> Result<OnlineStepReport> {
        let batch = self.batch_index;
        if rows.n_rows() != y.len() || rows.dim() != self.m_star.len() {
            return Err(Error::Dimension(format!("batch {batch} does not match the state")));
        }
        let (rows, y) = if rows.n_rows() < self.rank {
            let extra = self.rank - rows.n_rows();
            (rows.stack(&rows.zero_rows(extra))?, y.clone().resize_vertically(self.rank, 0.0))
        } else {
            (rows.clone(), y.clone())
        };
        let carried = self.x_hat.n_rows();
        let stacked = if carried == 0 { rows.clone() } else { self.x_hat.stack(&rows)? };
        // Ŷ − 𝖷c vanishes on the carried rows by construction.
        let shifted = |center: &DVector<f64>| {
            let mut r = DVector::zeros(carried + y.len());
            r.rows_mut(carried, y.len()).copy_from(&(&y - rows.mul_vec(center)));
            r
        };
        let y_em = shifted(&self.mu_star);
        let y_vb = shifted(&self.m_star);
        let em = Centered { inner: RowRef { rows: &stacked, y: &y_em }, center: self.mu_star.clone() };
        let vb = Centered { inner: RowRef { rows: &stacked, y: &y_vb }, center: self.m_star.clone() };
        let (triple, trace) =
            vbl_run(&em, &vb, hp, self.triple(), stop, self.opts, observer).map_err(|e| e.context(format!("batch {batch}")))?;

        let (x_hat, tail_sum, tail_frobenius) = if stacked.n_rows() > self.rank {
            let (u, _, dropped) = top_eigenpairs(&stacked.gram(), self.rank).map_err(|_| Error::Eigen { batch })?;
            (stacked.combine(&u.transpose()), dropped.iter().sum(), dropped.norm())
        } else {
            (stacked, 0.0, 0.0)
        };
        self.x_hat = x_hat;
        self.mu_star = triple.mu;
        self.m_star = triple.m;
        self.c_diag = triple.cov.diagonal().expect("diagonal covariance requested");
        self.tail_sum = tail_sum;
        self.tail_frobenius = tail_frobenius;
        self.batch_index += 1;
        Ok(OnlineStepReport { batch_index: batch, trace, tail_sum, tail_frobenius })
    }
}

/// One approximate online step; see [`LowRankState::step`].
pub fn online_approx_step<R: RowStore>(
    state: &mut LowRankState<R>,
    rows: &R,
    y: &DVector<f64>,
    hp: &HyperParams,
    stop: &StoppingRule,
) -> Result<(PosteriorTriple, OnlineStepReport)> {
    let report = state.step(rows, y, hp, stop, |_, _| {})?;
    Ok((state.triple(), report))
}

/// Row stores that can be written into a checkpoint.
pub trait RowCodec: Sized {
    fn encode(&self, out: &mut Vec<u8>);
    fn decode(input: &mut &[u8]) -> Result<Self>;
}

const MAGIC: &[u8; 8] = b"SVBLRS01";

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64s<'a>(out: &mut Vec<u8>, vals: impl IntoIterator<Item = &'a f64>) {
    for v in vals {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

pub(crate) fn take_u64(input: &mut &[u8]) -> Result<u64> {
    if input.len() < 8 {
        return Err(Error::Invalid("truncated checkpoint".into()));
    }
    let (head, rest) = input.split_at(8);
    *input = rest;
    Ok(u64::from_le_bytes(head.try_into().expect("8 bytes")))
}

pub(crate) fn take_f64s(input: &mut &[u8], n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| take_u64(input).map(f64::from_bits)).collect()
}

impl RowCodec for DenseRows {
    fn encode(&self, out: &mut Vec<u8>) {
        put_u64(out, self.0.nrows() as u64);
        put_u64(out, self.0.ncols() as u64);
        put_f64s(out, self.0.iter());
    }

    fn decode(input: &mut &[u8]) -> Result<Self> {
        let r = take_u64(input)? as usize;
        let c = take_u64(input)? as usize;
        Ok(DenseRows(DMatrix::from_vec(r, c, take_f64s(input, r * c)?)))
    }
}

impl<R: RowStore + RowCodec> LowRankState<R> {
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u64(&mut buf, self.rank as u64);
        put_u64(&mut buf, self.batch_index as u64);
        put_u64(&mut buf, self.m_star.len() as u64);
        put_f64s(&mut buf, self.mu_star.iter());
        put_f64s(&mut buf, self.m_star.iter());
        put_f64s(&mut buf, self.c_diag.iter());
        put_f64s(&mut buf, [self.tail_sum, self.tail_frobenius].iter());
        self.x_hat.encode(&mut buf);
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint<Rd: Read>(mut input: Rd) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut cur: &[u8] = &bytes;
        if cur.len() < 8 || &cur[..8] != MAGIC {
            return Err(Error::Invalid("not a low-rank state checkpoint (bad magic or version)".into()));
        }
        cur = &cur[8..];
        let rank = take_u64(&mut cur)? as usize;
        let batch_index = take_u64(&mut cur)? as usize;
        let p = take_u64(&mut cur)? as usize;
        let mu_star = DVector::from_vec(take_f64s(&mut cur, p)?);
        let m_star = DVector::from_vec(take_f64s(&mut cur, p)?);
        let c_diag = DVector::from_vec(take_f64s(&mut cur, p)?);
        let tails = take_f64s(&mut cur, 2)?;
        let x_hat = R::decode(&mut cur)?;
        if x_hat.dim() != p {
            return Err(Error::Invalid("checkpoint rows do not match the mean length".into()));
        }
        Ok(LowRankState { x_hat, mu_star, m_star, c_diag, rank, batch_index, tail_sum: tails[0], tail_frobenius: tails[1], opts: inner_defaults() })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_checkpoint(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_checkpoint(std::fs::File::open(path)?)
    }
}
