//! Periodic Gaussian deblurring with an anisotropic total-variation prior,
//! recast as a LASSO prior on the spectral gradients β̄ = 𝐃β̃ plus the
//! coefficient β₀ of the constant image.
//!
//! FFT convention: forward unnormalized, F[f](q) = Σₓ f(x) e^{−2πi q·x/p₀};
//! inverse carries the 1/p̃. Wavenumbers are signed integers in
//! {−p₀/2, …, p₀/2−1}. D_i is the multiplier −i k_i, except on the Nyquist
//! wavenumber k_i = −p₀/2 where the real value p₀/2 is used so that D_i stays a
//! real operator and 𝐃ᵀ𝐃 = |k|² has only the constants in its kernel.
//!
//! Coefficient vectors β have length p = 2p̃ + 1: (D₁β̃, D₂β̃, β₀), images in
//! row-major order, k₁ along rows and k₂ along columns.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::dense;
use crate::model::{RowData, RowStore};
use crate::online::{put_f64s, put_u64, take_f64s, take_u64, RowCodec};
use crate::{Error, Result};

/// Band sizes up to this use dense d×d spectral operators; larger bands go
/// through two FFTs per row.
pub const DENSE_BAND_LIMIT: usize = 6000;

/// Largest truncated problem solved monolithically.
pub const MAX_TRUNCATED: usize = 8192;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Square 2-D FFT.
#[derive(Clone)]
pub struct Fft2 {
    p0: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fft2").field("p0", &self.p0).finish()
    }
}

impl Fft2 {
    pub fn new(p0: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 { p0, fwd: planner.plan_fft_forward(p0), inv: planner.plan_fft_inverse(p0) }
    }

    pub fn p0(&self) -> usize {
        self.p0
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.pass(data, &*self.fwd);
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        self.pass(data, &*self.inv);
        let s = 1.0 / data.len() as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }

    fn pass(&self, data: &mut [Complex64], plan: &dyn Fft<f64>) {
        let p0 = self.p0;
        assert_eq!(data.len(), p0 * p0);
        let mut tmp = vec![ZERO; data.len()];
        plan.process(data);
        transpose::transpose(data, &mut tmp, p0, p0);
        plan.process(&mut tmp);
        transpose::transpose(&tmp, data, p0, p0);
    }

    fn spectrum(&self, values: &[f64]) -> Vec<Complex64> {
        let mut z: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut z);
        z
    }

    /// Spectra of two real fields with one transform.
    fn spectrum_pair(&self, a: &[f64], b: &[f64]) -> (Vec<Complex64>, Vec<Complex64>) {
        let mut z: Vec<Complex64> = a.iter().zip(b).map(|(&x, &y)| Complex64::new(x, y)).collect();
        self.forward(&mut z);
        let p0 = self.p0;
        let mut sa = vec![ZERO; z.len()];
        let mut sb = vec![ZERO; z.len()];
        for q in 0..z.len() {
            let c = z[neg_index(q, p0)].conj();
            sa[q] = (z[q] + c) * 0.5;
            sb[q] = (z[q] - c) * Complex64::new(0.0, -0.5);
        }
        (sa, sb)
    }

    /// Real field from a Hermitian spectrum.
    fn real_field(&self, mut spec: Vec<Complex64>) -> Vec<f64> {
        self.inverse(&mut spec);
        check_real(&spec, |z| z.im);
        spec.into_iter().map(|z| z.re).collect()
    }

    /// Two real fields from two Hermitian spectra with one transform.
    fn real_pair(&self, a: &[Complex64], b: &[Complex64]) -> (Vec<f64>, Vec<f64>) {
        let mut z: Vec<Complex64> = a.iter().zip(b).map(|(&x, &y)| x + Complex64::new(-y.im, y.re)).collect();
        self.inverse(&mut z);
        (z.iter().map(|v| v.re).collect(), z.iter().map(|v| v.im).collect())
    }
}

fn check_real(z: &[Complex64], im: impl Fn(&Complex64) -> f64) {
    let scale = z.iter().fold(1.0f64, |m, v| m.max(v.re.abs()));
    let resid = z.iter().fold(0.0f64, |m, v| m.max(im(v).abs()));
    assert!(resid <= 1e-10 * scale, "imaginary residue {resid:.3e} in a real field");
}

fn signed(idx: usize, p0: usize) -> i64 {
    if idx < p0 / 2 {
        idx as i64
    } else {
        idx as i64 - p0 as i64
    }
}

fn neg_index(q: usize, p0: usize) -> usize {
    let (r, c) = (q / p0, q % p0);
    ((p0 - r) % p0) * p0 + (p0 - c) % p0
}

fn k_sq(q: usize, p0: usize) -> f64 {
    let (a, b) = (signed(q / p0, p0), signed(q % p0, p0));
    (a * a + b * b) as f64
}

fn deriv_multiplier(k: i64, p0: usize) -> Complex64 {
    if k == -(p0 as i64) / 2 {
        Complex64::new(p0 as f64 / 2.0, 0.0)
    } else {
        Complex64::new(0.0, -(k as f64))
    }
}

/// Per-wavenumber multipliers of D₁, D₂ and of the components of 𝐃†ᵀ = 𝐃(𝐃ᵀ𝐃)⁺.
#[derive(Debug, Clone)]
struct Multipliers {
    d: [Vec<Complex64>; 2],
    pinv_t: [Vec<Complex64>; 2],
}

impl Multipliers {
    fn new(p0: usize) -> Self {
        let n = p0 * p0;
        let mut d = [vec![ZERO; n], vec![ZERO; n]];
        let mut pinv_t = [vec![ZERO; n], vec![ZERO; n]];
        for q in 0..n {
            let m = [deriv_multiplier(signed(q / p0, p0), p0), deriv_multiplier(signed(q % p0, p0), p0)];
            let ksq = k_sq(q, p0);
            for i in 0..2 {
                d[i][q] = m[i];
                if q != 0 {
                    pinv_t[i][q] = m[i] / ksq;
                }
            }
        }
        Multipliers { d, pinv_t }
    }
}

/// A p₀×p₀ real image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    p0: usize,
    values: Vec<f64>,
}

impl ImageGrid {
    pub fn new(p0: usize, values: Vec<f64>) -> Result<Self> {
        if p0 == 0 || p0 % 2 != 0 {
            return Err(Error::Invalid(format!("image side must be even and positive, got {p0}")));
        }
        if values.len() != p0 * p0 {
            return Err(Error::Dimension(format!("{} values for a {p0}×{p0} image", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("image values must be finite".into()));
        }
        Ok(ImageGrid { p0, values })
    }

    pub fn from_fn(p0: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        Self::new(p0, (0..p0 * p0).map(|k| f(k / p0, k % p0)).collect())
    }

    pub fn constant(p0: usize, c: f64) -> Result<Self> {
        Self::new(p0, vec![c; p0 * p0])
    }

    pub fn p0(&self) -> usize {
        self.p0
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.p0 + j]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }

    /// ‖self − truth‖₂ / ‖truth‖₂.
    pub fn relative_error(&self, truth: &ImageGrid) -> f64 {
        let d: f64 = self.values.iter().zip(&truth.values).map(|(a, b)| (a - b) * (a - b)).sum();
        d.sqrt() / truth.norm()
    }

    /// Binary 16-bit PGM; values are mapped linearly from [lo, hi] to [0, 65535].
    pub fn write_pgm<W: Write>(&self, mut out: W, lo: f64, hi: f64) -> Result<()> {
        write!(out, "P5\n{} {}\n65535\n", self.p0, self.p0)?;
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut buf = Vec::with_capacity(2 * self.values.len());
        for v in &self.values {
            let s = (((v - lo) / span).clamp(0.0, 1.0) * 65535.0).round() as u16;
            buf.extend_from_slice(&s.to_be_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    /// Reads a binary PGM (8 or 16 bit) into [0, 1].
    pub fn read_pgm<R: Read>(input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(input).read_to_end(&mut bytes)?;
        let mut pos = 0;
        let mut fields = Vec::new();
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Invalid("truncated PGM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P5" {
            return Err(Error::Invalid(format!("expected P5, found {}", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Invalid(format!("bad PGM header field {s}")));
        let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if w != h {
            return Err(Error::Invalid(format!("image must be square, got {w}×{h}")));
        }
        let width = if maxval > 255 { 2 } else { 1 };
        let data = &bytes[pos.min(bytes.len())..];
        if data.len() < w * h * width {
            return Err(Error::Invalid("truncated PGM data".into()));
        }
        let vals = (0..w * h)
            .map(|k| {
                let raw = if width == 2 { u16::from_be_bytes([data[2 * k], data[2 * k + 1]]) as f64 } else { data[k] as f64 };
                raw / maxval as f64
            })
            .collect();
        Self::new(w, vals)
    }

    /// Flat CSV: header `p0=<N>`, then one value per line in row-major order.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "p0={}", self.p0)?;
        for v in &self.values {
            writeln!(out, "{v:e}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut lines = BufReader::new(input).lines();
        let header = lines.next().ok_or_else(|| Error::Invalid("empty image file".into()))??;
        let p0 = header
            .trim()
            .strip_prefix("p0=")
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::Invalid(format!("expected header p0=<N>, found {header:?}")))?;
        let mut vals = Vec::with_capacity(p0 * p0);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            vals.push(line.trim().parse::<f64>().map_err(|_| Error::Parse {
                row: i + 2,
                column: 1,
                message: format!("not a number: {:?}", line.trim()),
            })?);
        }
        Self::new(p0, vals)
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>, lo: f64, hi: f64) -> Result<()> {
        self.write_pgm(std::io::BufWriter::new(std::fs::File::create(path)?), lo, hi)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    /// Reads `.pgm` or the flat CSV format by extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path)?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
            Self::read_pgm(f)
        } else {
            Self::read_csv(f)
        }
    }
}

/// Which pixels are observed.
#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    Full,
    /// Every `stride`-th pixel in row-major order, starting at `offset`.
    Strided { stride: usize, offset: usize },
    Indices(Vec<usize>),
}

/// Blur width ω in exp(−ω|k|²), noise level γ and observed pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurSpec {
    pub p0: usize,
    pub omega: f64,
    pub gamma: f64,
    pub observed: Observation,
}

impl BlurSpec {
    pub fn full(p0: usize, omega: f64, gamma: f64) -> Self {
        BlurSpec { p0, omega, gamma, observed: Observation::Full }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p0 == 0 || self.p0 % 2 != 0 {
            return Err(Error::Invalid(format!("image side must be even and positive, got {}", self.p0)));
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(Error::Domain(format!("blur width must be positive, got {}", self.omega)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Domain(format!("noise level must be positive, got {}", self.gamma)));
        }
        let n = self.p0 * self.p0;
        match &self.observed {
            Observation::Full => {}
            Observation::Strided { stride, offset } => {
                if *stride == 0 || *offset >= n {
                    return Err(Error::Invalid("bad strided observation set".into()));
                }
            }
            Observation::Indices(ix) => {
                if ix.iter().any(|&i| i >= n) {
                    return Err(Error::Invalid("observation index outside the grid".into()));
                }
            }
        }
        Ok(())
    }

    pub fn pixels(&self) -> Vec<usize> {
        let n = self.p0 * self.p0;
        match &self.observed {
            Observation::Full => (0..n).collect(),
            Observation::Strided { stride, offset } => (*offset..n).step_by(*stride).collect(),
            Observation::Indices(ix) => ix.clone(),
        }
    }

    pub fn blur_factor(&self, q: usize) -> f64 {
        (-self.omega * k_sq(q, self.p0)).exp()
    }
}

/// Spectral multiplication by exp(−ω|k|²) (periodic Gaussian convolution).
pub fn blur_apply(img: &ImageGrid, spec: &BlurSpec) -> ImageGrid {
    let fft = Fft2::new(img.p0);
    blur_with(&fft, img, spec.omega)
}

fn blur_with(fft: &Fft2, img: &ImageGrid, omega: f64) -> ImageGrid {
    let p0 = img.p0;
    let mut s = fft.spectrum(&img.values);
    for (q, v) in s.iter_mut().enumerate() {
        *v *= (-omega * k_sq(q, p0)).exp();
    }
    ImageGrid { p0, values: fft.real_field(s) }
}

/// (D₁β̃, D₂β̃).
pub fn grad_apply(img: &ImageGrid) -> (ImageGrid, ImageGrid) {
    let p0 = img.p0;
    let fft = Fft2::new(p0);
    let mult = Multipliers::new(p0);
    let s = fft.spectrum(&img.values);
    let a: Vec<Complex64> = s.iter().zip(&mult.d[0]).map(|(x, m)| x * m).collect();
    let b: Vec<Complex64> = s.iter().zip(&mult.d[1]).map(|(x, m)| x * m).collect();
    let (dx, dy) = fft.real_pair(&a, &b);
    (ImageGrid { p0, values: dx }, ImageGrid { p0, values: dy })
}

/// 𝐃†(dx, dy) + mean·1.
pub fn grad_pinv_apply(dx: &ImageGrid, dy: &ImageGrid, mean: f64) -> Result<ImageGrid> {
    if dx.p0 != dy.p0 {
        return Err(Error::Dimension("gradient components differ in size".into()));
    }
    let p0 = dx.p0;
    let fft = Fft2::new(p0);
    let mult = Multipliers::new(p0);
    let mut beta = dx.values.clone();
    beta.extend_from_slice(&dy.values);
    beta.push(mean);
    Ok(ImageGrid { p0, values: fft.real_field(pinv_spectrum(&fft, &mult, &beta)) })
}

/// Spectrum of 𝐃†β̄ + β₀1.
fn pinv_spectrum(fft: &Fft2, mult: &Multipliers, beta: &[f64]) -> Vec<Complex64> {
    let n = fft.p0 * fft.p0;
    let (s1, s2) = fft.spectrum_pair(&beta[..n], &beta[n..2 * n]);
    let mut u: Vec<Complex64> =
        (0..n).map(|q| mult.pinv_t[0][q].conj() * s1[q] + mult.pinv_t[1][q].conj() * s2[q]).collect();
    u[0] = Complex64::new(n as f64 * beta[2 * n], 0.0);
    u
}

/// (𝐃†ᵀh, ⟨h, 1⟩) from the spectrum of h.
fn pinv_t_coords(fft: &Fft2, mult: &Multipliers, h: &[Complex64]) -> DVector<f64> {
    let n = h.len();
    let a: Vec<Complex64> = h.iter().zip(&mult.pinv_t[0]).map(|(x, m)| x * m).collect();
    let b: Vec<Complex64> = h.iter().zip(&mult.pinv_t[1]).map(|(x, m)| x * m).collect();
    let (f1, f2) = fft.real_pair(&a, &b);
    let mut out = DVector::zeros(2 * n + 1);
    out.rows_mut(0, n).copy_from_slice(&f1);
    out.rows_mut(n, n).copy_from_slice(&f2);
    out[2 * n] = h[0].re;
    out
}

/// Matrix-free X = X̃(𝐃†, 1) on β = (β̄, β₀), with X̃ = observed pixels of the blur.
#[derive(Debug, Clone)]
pub struct TvDesign {
    spec: BlurSpec,
    fft: Fft2,
    mult: Multipliers,
    pixels: Vec<usize>,
}

pub fn build_tv_design(spec: &BlurSpec) -> Result<TvDesign> {
    spec.validate()?;
    Ok(TvDesign { spec: spec.clone(), fft: Fft2::new(spec.p0), mult: Multipliers::new(spec.p0), pixels: spec.pixels() })
}

impl TvDesign {
    pub fn spec(&self) -> &BlurSpec {
        &self.spec
    }

    pub fn n(&self) -> usize {
        self.pixels.len()
    }

    pub fn p(&self) -> usize {
        2 * self.spec.p0 * self.spec.p0 + 1
    }

    pub fn pixels(&self) -> &[usize] {
        &self.pixels
    }

    /// (𝐃β̃, mean(β̃)).
    pub fn coords(&self, img: &ImageGrid) -> DVector<f64> {
        let (dx, dy) = grad_apply(img);
        let mut v = dx.values;
        v.extend_from_slice(&dy.values);
        v.push(img.mean());
        DVector::from_vec(v)
    }

    /// 𝐃†β̄ + β₀1.
    pub fn image(&self, beta: &DVector<f64>) -> ImageGrid {
        let s = pinv_spectrum(&self.fft, &self.mult, beta.as_slice());
        ImageGrid { p0: self.spec.p0, values: self.fft.real_field(s) }
    }

    /// X̃β̃ at the observed pixels.
    pub fn observe(&self, img: &ImageGrid) -> DVector<f64> {
        let z = blur_with(&self.fft, img, self.spec.omega);
        DVector::from_iterator(self.pixels.len(), self.pixels.iter().map(|&k| z.values[k]))
    }

    pub fn apply(&self, beta: &DVector<f64>) -> DVector<f64> {
        let mut s = pinv_spectrum(&self.fft, &self.mult, beta.as_slice());
        let p0 = self.spec.p0;
        for (q, v) in s.iter_mut().enumerate() {
            *v *= (-self.spec.omega * k_sq(q, p0)).exp();
        }
        let z = self.fft.real_field(s);
        DVector::from_iterator(self.pixels.len(), self.pixels.iter().map(|&k| z[k]))
    }

    pub fn adjoint(&self, w: &DVector<f64>) -> DVector<f64> {
        let p0 = self.spec.p0;
        let mut z = vec![0.0; p0 * p0];
        for (&k, v) in self.pixels.iter().zip(w.iter()) {
            z[k] += v;
        }
        let mut s = self.fft.spectrum(&z);
        for (q, v) in s.iter_mut().enumerate() {
            *v *= (-self.spec.omega * k_sq(q, p0)).exp();
        }
        pinv_t_coords(&self.fft, &self.mult, &s)
    }

    /// X̃β̃ + γε with ε ~ N(0, I) drawn from a seeded stream.
    pub fn simulate(&self, truth: &ImageGrid, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = self.observe(truth);
        z.map(|v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            v + self.spec.gamma * e
        })
    }
}

/// diag(K·Bᵀ) as (K∘B)1, for K and B = C₀Xᵀ of equal shape.
pub fn cov_diag_trick(k: &DMatrix<f64>, c0xt: &DMatrix<f64>) -> Result<DVector<f64>> {
    if k.shape() != c0xt.shape() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", k.shape(), c0xt.shape())));
    }
    Ok(DVector::from_fn(k.nrows(), |i, _| k.row(i).dot(&c0xt.row(i))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ModePart {
    /// Self-conjugate wavenumber, e_q itself is real.
    Real,
    Cos,
    Sin,
}

/// One real orthonormal Fourier function: √2·Re e_q, √2·Im e_q, or e_q when q ≡ −q,
/// with e_q(x) = exp(2πi q·x/p₀)/√p̃.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandMode {
    pub q: usize,
    pub partner: usize,
    pub part: ModePart,
    pub k_sq: f64,
}

impl BandMode {
    /// (wavenumber index, coefficient) pairs with φ = Σ t·e_q.
    fn terms(&self) -> ([(usize, Complex64); 2], usize) {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        match self.part {
            ModePart::Real => ([(self.q, Complex64::new(1.0, 0.0)), (self.q, ZERO)], 1),
            ModePart::Cos => ([(self.q, Complex64::new(r, 0.0)), (self.partner, Complex64::new(r, 0.0))], 2),
            ModePart::Sin => ([(self.q, Complex64::new(0.0, -r)), (self.partner, Complex64::new(0.0, r))], 2),
        }
    }
}

/// Real orthonormal Fourier functions ordered by |k|² (so by decreasing blur
/// factor), truncated to a leading set.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    p0: usize,
    omega: f64,
    modes: Vec<BandMode>,
    zero: Option<usize>,
    fft: Fft2,
    mult: Multipliers,
    cos_table: Vec<f64>,
    sin_table: Vec<f64>,
}

impl PartialEq for SpectralBasis {
    fn eq(&self, other: &Self) -> bool {
        self.p0 == other.p0 && self.omega.to_bits() == other.omega.to_bits() && self.modes.len() == other.modes.len()
    }
}

fn all_modes(p0: usize) -> Vec<BandMode> {
    let n = p0 * p0;
    let mut modes = Vec::with_capacity(n);
    for q in 0..n {
        let partner = neg_index(q, p0);
        let k = k_sq(q, p0);
        if partner == q {
            modes.push(BandMode { q, partner, part: ModePart::Real, k_sq: k });
        } else if q < partner {
            modes.push(BandMode { q, partner, part: ModePart::Cos, k_sq: k });
            modes.push(BandMode { q, partner, part: ModePart::Sin, k_sq: k });
        }
    }
    modes.sort_by(|a, b| a.k_sq.total_cmp(&b.k_sq).then(a.q.cmp(&b.q)).then(a.part.cmp(&b.part)));
    modes
}

impl SpectralBasis {
    /// The `count` leading functions.
    pub fn leading(p0: usize, omega: f64, count: usize) -> Result<Self> {
        if p0 == 0 || p0 % 2 != 0 {
            return Err(Error::Invalid(format!("image side must be even and positive, got {p0}")));
        }
        if !(omega >= 0.0 && omega.is_finite()) {
            return Err(Error::Domain(format!("blur width must be non-negative, got {omega}")));
        }
        let mut modes = all_modes(p0);
        if count > modes.len() {
            return Err(Error::Dimension(format!("{count} modes requested, {} exist", modes.len())));
        }
        modes.truncate(count);
        let zero = modes.iter().position(|m| m.q == 0);
        let cos_table = (0..p0).map(|m| (2.0 * std::f64::consts::PI * m as f64 / p0 as f64).cos()).collect();
        let sin_table = (0..p0).map(|m| (2.0 * std::f64::consts::PI * m as f64 / p0 as f64).sin()).collect();
        Ok(SpectralBasis { p0, omega, modes, zero, fft: Fft2::new(p0), mult: Multipliers::new(p0), cos_table, sin_table })
    }

    /// All functions whose blur factor exceeds `threshold`.
    pub fn above(p0: usize, omega: f64, threshold: f64) -> Result<Self> {
        let count = all_modes(p0).iter().filter(|m| (-omega * m.k_sq).exp() > threshold).count();
        Self::leading(p0, omega, count)
    }

    pub fn full(p0: usize, omega: f64) -> Result<Self> {
        Self::leading(p0, omega, p0 * p0)
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn p0(&self) -> usize {
        self.p0
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn modes(&self) -> &[BandMode] {
        &self.modes
    }

    pub fn blur(&self, a: usize) -> f64 {
        (-self.omega * self.modes[a].k_sq).exp()
    }

    /// Dimension of the coefficient vector β.
    pub fn dim(&self) -> usize {
        2 * self.p0 * self.p0 + 1
    }

    /// ⟨φ_a, f⟩ for every band function, from the spectrum of a real field f.
    pub fn analysis(&self, spec: &[Complex64]) -> DVector<f64> {
        let n = (self.p0 * self.p0) as f64;
        let (s1, s2) = (1.0 / n.sqrt(), (2.0 / n).sqrt());
        DVector::from_iterator(
            self.len(),
            self.modes.iter().map(|m| match m.part {
                ModePart::Real => spec[m.q].re * s1,
                ModePart::Cos => spec[m.q].re * s2,
                ModePart::Sin => -spec[m.q].im * s2,
            }),
        )
    }

    /// Spectrum of Σ_a c_a φ_a.
    pub fn synthesis(&self, coeffs: &[f64]) -> Vec<Complex64> {
        let mut out = vec![ZERO; self.p0 * self.p0];
        self.synthesis_into(coeffs, &mut out);
        out
    }

    /// φ_a(x) for every band function at pixel x.
    pub fn values_at(&self, pixel: usize) -> DVector<f64> {
        let (i, j) = (pixel / self.p0, pixel % self.p0);
        let n = (self.p0 * self.p0) as f64;
        let (s1, s2) = (1.0 / n.sqrt(), (2.0 / n).sqrt());
        DVector::from_iterator(
            self.len(),
            self.modes.iter().map(|m| {
                let phase = ((m.q / self.p0) * i + (m.q % self.p0) * j) % self.p0;
                match m.part {
                    ModePart::Real => self.cos_table[phase] * s1,
                    ModePart::Cos => self.cos_table[phase] * s2,
                    ModePart::Sin => self.sin_table[phase] * s2,
                }
            }),
        )
    }

    /// Terms of 𝐃†ᵀφ_a per gradient component: (wavenumber, coefficient) lists.
    fn pinv_terms(&self) -> Vec<([(usize, [Complex64; 2]); 2], usize)> {
        self.modes
            .iter()
            .map(|m| {
                let (terms, len) = m.terms();
                let mut out = [(0usize, [ZERO; 2]); 2];
                for (slot, &(q, t)) in out.iter_mut().zip(&terms[..len]) {
                    *slot = (q, [t * self.mult.pinv_t[0][q], t * self.mult.pinv_t[1][q]]);
                }
                (out, len)
            })
            .collect()
    }

    fn diff_index(&self, a: usize, b: usize) -> usize {
        let p0 = self.p0;
        let r = (a / p0 + p0 - b / p0) % p0;
        let c = (a % p0 + p0 - b % p0) % p0;
        r * p0 + c
    }

    /// B_w[a, b] = ⟨𝐃†ᵀφ_a, D(w̄)𝐃†ᵀφ_b⟩ + w₀⟨φ_a, 1⟩⟨φ_b, 1⟩, assembled from the
    /// spectrum of w: each entry is a short sum of ŵ at wavenumber differences.
    pub fn weighted_operator(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let n = self.p0 * self.p0;
        let (w1, w2) = self.fft.spectrum_pair(&w.as_slice()[..n], &w.as_slice()[n..2 * n]);
        let terms = self.pinv_terms();
        let d = self.len();
        let inv_n = 1.0 / n as f64;
        let mut out = DMatrix::zeros(d, d);
        for a in 0..d {
            let (ta, la) = &terms[a];
            for b in a..d {
                let (tb, lb) = &terms[b];
                let mut acc = ZERO;
                for &(qa, ua) in &ta[..*la] {
                    for &(qb, ub) in &tb[..*lb] {
                        let k = self.diff_index(qa, qb);
                        acc += ua[0].conj() * ub[0] * w1[k] + ua[1].conj() * ub[1] * w2[k];
                    }
                }
                let v = acc.re * inv_n;
                out[(a, b)] = v;
                out[(b, a)] = v;
            }
        }
        if let Some(z) = self.zero {
            out[(z, z)] += w[2 * n] * n as f64;
        }
        out
    }

    /// Σ_{a,b} Q_ab (𝐃†ᵀφ_a)_j (𝐃†ᵀφ_b)_j for every coordinate j of β (with the
    /// β₀ coordinate using ⟨φ_a, 1⟩).
    pub fn quadratic_diagonal(&self, q: &DMatrix<f64>) -> DVector<f64> {
        let n = self.p0 * self.p0;
        let terms = self.pinv_terms();
        let d = self.len();
        let mut h1 = vec![ZERO; n];
        let mut h2 = vec![ZERO; n];
        for a in 0..d {
            let (ta, la) = &terms[a];
            for b in 0..d {
                let qab = q[(a, b)];
                if qab == 0.0 {
                    continue;
                }
                let (tb, lb) = &terms[b];
                for &(qa, ua) in &ta[..*la] {
                    for &(qb, ub) in &tb[..*lb] {
                        let k = self.diff_index(qa, qb);
                        h1[k] += ua[0] * ub[0].conj() * qab;
                        h2[k] += ua[1] * ub[1].conj() * qab;
                    }
                }
            }
        }
        let (s1, s2) = self.fft.real_pair(&h1, &h2);
        let mut out = DVector::zeros(2 * n + 1);
        out.rows_mut(0, n).copy_from_slice(&s1);
        out.rows_mut(n, n).copy_from_slice(&s2);
        if let Some(z) = self.zero {
            out[2 * n] = n as f64 * q[(z, z)];
        }
        out
    }

    /// 𝐃†ᵀ applied to a band function, with its ⟨·, 1⟩ coordinate: the β-row of a
    /// coefficient vector.
    pub fn row_vector(&self, coeffs: &[f64]) -> DVector<f64> {
        pinv_t_coords(&self.fft, &self.mult, &self.synthesis(coeffs))
    }

    /// Band coefficients of 𝐃†β̄ + β₀1.
    pub fn image_coeffs(&self, beta: &DVector<f64>) -> DVector<f64> {
        self.analysis(&pinv_spectrum(&self.fft, &self.mult, beta.as_slice()))
    }

    /// Σ_a c_a φ_a as a spectrum, written into `out`.
    fn synthesis_into(&self, coeffs: &[f64], out: &mut [Complex64]) {
        let scale = ((self.p0 * self.p0) as f64).sqrt();
        out.fill(ZERO);
        for (m, &c) in self.modes.iter().zip(coeffs) {
            let (terms, len) = m.terms();
            for &(q, t) in &terms[..len] {
                out[q] += t * (c * scale);
            }
        }
    }

    /// Pixel fields of the two components of 𝐃†ᵀh packed as re + i·im, from the
    /// spectrum h.
    fn pinv_t_fields(&self, h: &[Complex64], z: &mut [Complex64]) {
        let (a1, a2) = (&self.mult.pinv_t[0], &self.mult.pinv_t[1]);
        for q in 0..z.len() {
            let (x, y) = (h[q] * a1[q], h[q] * a2[q]);
            z[q] = x + Complex64::new(-y.im, y.re);
        }
        self.fft.inverse(z);
    }

    /// B_w applied to one coefficient vector via two FFTs.
    fn weighted_apply(&self, coeffs: &[f64], w: &DVector<f64>, h: &mut [Complex64], z: &mut [Complex64], out: &mut [f64]) {
        let n = self.p0 * self.p0;
        self.synthesis_into(coeffs, h);
        self.pinv_t_fields(h, z);
        let (w1, w2) = (&w.as_slice()[..n], &w.as_slice()[n..2 * n]);
        for j in 0..n {
            z[j] = Complex64::new(z[j].re * w1[j], z[j].im * w2[j]);
        }
        self.fft.forward(z);
        let (s1, s2) = (1.0 / (n as f64).sqrt(), (2.0 / n as f64).sqrt());
        let (a1, a2) = (&self.mult.pinv_t[0], &self.mult.pinv_t[1]);
        let p0 = self.p0;
        for (m, o) in self.modes.iter().zip(out.iter_mut()) {
            let q = m.q;
            let v = if q == 0 {
                Complex64::new(n as f64 * w[2 * n] * h[0].re, 0.0)
            } else {
                let c = z[neg_index(q, p0)].conj();
                let f1 = (z[q] + c) * 0.5;
                let f2 = (z[q] - c) * Complex64::new(0.0, -0.5);
                a1[q].conj() * f1 + a2[q].conj() * f2
            };
            *o = match m.part {
                ModePart::Real => v.re * s1,
                ModePart::Cos => v.re * s2,
                ModePart::Sin => -v.im * s2,
            };
        }
    }

    /// Adds the squared β-row of `coeffs` to `acc`.
    fn accumulate_sq_row(&self, coeffs: &[f64], acc: &mut [f64], h: &mut [Complex64], z: &mut [Complex64]) {
        let n = self.p0 * self.p0;
        self.synthesis_into(coeffs, h);
        self.pinv_t_fields(h, z);
        let (a, b) = acc.split_at_mut(n);
        for j in 0..n {
            a[j] += z[j].re * z[j].re;
            b[j] += z[j].im * z[j].im;
        }
        acc[2 * n] += h[0].re * h[0].re;
    }

    fn scratch(&self) -> (Vec<Complex64>, Vec<Complex64>) {
        let n = self.p0 * self.p0;
        (vec![ZERO; n], vec![ZERO; n])
    }
}

/// How weighted Grams and column norms are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BandPath {
    /// Dense d×d spectral operators up to [`DENSE_BAND_LIMIT`], FFTs beyond.
    #[default]
    Auto,
    Dense,
    Fft,
}

/// Rows of X held as band coefficients: row l is the pixel functional
/// g_l = Σ_a G_la φ_a, acting on β through ⟨g_l, 𝐃†β̄ + β₀1⟩.
#[derive(Debug, Clone)]
pub struct TvRows {
    basis: Arc<SpectralBasis>,
    coeffs: DMatrix<f64>,
    path: BandPath,
}

impl TvRows {
    pub fn new(basis: Arc<SpectralBasis>, coeffs: DMatrix<f64>) -> Result<Self> {
        if coeffs.ncols() != basis.len() {
            return Err(Error::Dimension(format!("{} coefficients for a band of {}", coeffs.ncols(), basis.len())));
        }
        Ok(TvRows { basis, coeffs, path: BandPath::Auto })
    }

    pub fn with_path(mut self, path: BandPath) -> Self {
        self.path = path;
        self
    }

    /// Blurred point evaluations at `pixels`, restricted to the band.
    pub fn observations(basis: Arc<SpectralBasis>, pixels: &[usize]) -> Self {
        let d = basis.len();
        let blur = DVector::from_fn(d, |a, _| basis.blur(a));
        let mut coeffs = DMatrix::zeros(pixels.len(), d);
        for (l, &x) in pixels.iter().enumerate() {
            let v = basis.values_at(x).component_mul(&blur);
            coeffs.set_row(l, &v.transpose());
        }
        TvRows { basis, coeffs, path: BandPath::Auto }
    }

    /// Blurred projections onto each band function: diag of the blur factors.
    pub fn projections(basis: Arc<SpectralBasis>) -> Self {
        let d = basis.len();
        let coeffs = DMatrix::from_fn(d, d, |a, b| if a == b { basis.blur(a) } else { 0.0 });
        TvRows { basis, coeffs, path: BandPath::Auto }
    }

    pub fn basis(&self) -> &Arc<SpectralBasis> {
        &self.basis
    }

    pub fn coeffs(&self) -> &DMatrix<f64> {
        &self.coeffs
    }

    fn dense_band(&self) -> bool {
        match self.path {
            BandPath::Auto => self.basis.len() <= DENSE_BAND_LIMIT,
            BandPath::Dense => true,
            BandPath::Fft => false,
        }
    }
}

impl RowStore for TvRows {
    fn n_rows(&self) -> usize {
        self.coeffs.nrows()
    }

    fn dim(&self) -> usize {
        self.basis.dim()
    }

    fn mul_vec(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.coeffs * self.basis.image_coeffs(beta)
    }

    fn tr_mul_vec(&self, alpha: &DVector<f64>) -> DVector<f64> {
        let h = self.coeffs.tr_mul(alpha);
        self.basis.row_vector(h.as_slice())
    }

    fn weighted_gram(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let r = self.n_rows();
        if r == 0 {
            return DMatrix::zeros(0, 0);
        }
        // Column l of `applied` is B_w g_l.
        let applied = if self.dense_band() {
            let bw = self.basis.weighted_operator(w);
            dense::mul_transpose(&bw, &self.coeffs)
        } else {
            let d = self.basis.len();
            let (mut h, mut z) = self.basis.scratch();
            let mut row = vec![0.0; d];
            let mut out = DMatrix::zeros(d, r);
            for l in 0..r {
                row.iter_mut().zip(self.coeffs.row(l).iter()).for_each(|(a, b)| *a = *b);
                self.basis.weighted_apply(&row, w, &mut h, &mut z, out.column_mut(l).as_mut_slice());
            }
            out
        };
        dense::mul_symmetric(&self.coeffs, &applied)
    }

    fn gram(&self) -> DMatrix<f64> {
        let n = (self.basis.p0 * self.basis.p0) as f64;
        let scaled = DMatrix::from_fn(self.n_rows(), self.basis.len(), |l, a| {
            let m = self.basis.modes[a];
            let nu = if m.q == 0 { n } else { 1.0 / m.k_sq };
            self.coeffs[(l, a)] * nu
        });
        dense::mul_transpose_symmetric(&self.coeffs, &scaled)
    }

    fn combine(&self, coeffs: &DMatrix<f64>) -> Self {
        TvRows { basis: self.basis.clone(), coeffs: dense::mul(coeffs, &self.coeffs), path: self.path }
    }

    fn combine_lower(&self, coeffs: &DMatrix<f64>) -> Self {
        TvRows { basis: self.basis.clone(), coeffs: dense::mul_lower(coeffs, &self.coeffs), path: self.path }
    }

    fn sq_col_norms(&self) -> DVector<f64> {
        if self.dense_band() {
            let q = dense::mul(&self.coeffs.transpose(), &self.coeffs);
            return self.basis.quadratic_diagonal(&q);
        }
        let (mut h, mut z) = self.basis.scratch();
        let mut row = vec![0.0; self.basis.len()];
        let mut out = DVector::zeros(self.basis.dim());
        for l in 0..self.n_rows() {
            row.iter_mut().zip(self.coeffs.row(l).iter()).for_each(|(a, b)| *a = *b);
            self.basis.accumulate_sq_row(&row, out.as_mut_slice(), &mut h, &mut z);
        }
        out
    }

    fn stack(&self, below: &Self) -> Result<Self> {
        if *self.basis != *below.basis {
            return Err(Error::Dimension("row blocks use different spectral bands".into()));
        }
        let (r1, r2, d) = (self.n_rows(), below.n_rows(), self.basis.len());
        let mut coeffs = DMatrix::zeros(r1 + r2, d);
        coeffs.rows_mut(0, r1).copy_from(&self.coeffs);
        coeffs.rows_mut(r1, r2).copy_from(&below.coeffs);
        Ok(TvRows { basis: self.basis.clone(), coeffs, path: self.path })
    }

    fn zero_rows(&self, k: usize) -> Self {
        TvRows { basis: self.basis.clone(), coeffs: DMatrix::zeros(k, self.basis.len()), path: self.path }
    }
}

impl RowCodec for TvRows {
    fn encode(&self, out: &mut Vec<u8>) {
        put_u64(out, self.basis.p0 as u64);
        put_f64s(out, [self.basis.omega].iter());
        put_u64(out, self.basis.len() as u64);
        put_u64(out, self.coeffs.nrows() as u64);
        put_f64s(out, self.coeffs.iter());
    }

    fn decode(input: &mut &[u8]) -> Result<Self> {
        let p0 = take_u64(input)? as usize;
        let omega = take_f64s(input, 1)?[0];
        let d = take_u64(input)? as usize;
        let r = take_u64(input)? as usize;
        let basis = Arc::new(SpectralBasis::leading(p0, omega, d)?);
        TvRows::new(basis, DMatrix::from_vec(r, d, take_f64s(input, r * d)?))
    }
}

/// Full-observation model truncated to the wavenumbers 𝓘: X ≈ X_ℓX_r with
/// X_ℓ = Φ_𝓘 D(b) (orthonormal columns up to the blur factors) and
/// X_r = Φ_𝓘ᵀ(𝐃†, 1). The posterior uses X_r with data (X_ℓᵀX_ℓ)⁻¹X_ℓᵀY and noise
/// γ²(X_ℓᵀX_ℓ)⁻¹, written here with the rows scaled by b so the noise is γ²I.
#[derive(Debug, Clone)]
pub struct FourierTruncation {
    pub basis: Arc<SpectralBasis>,
    pub rows: TvRows,
}

/// 𝓘 = {k : exp(−ω|k|²) > ργ}.
pub fn fourier_truncate(spec: &BlurSpec, rho: f64) -> Result<FourierTruncation> {
    spec.validate()?;
    if !(rho > 0.0 && rho * spec.gamma < 1.0) {
        return Err(Error::Domain(format!("need 0 < ργ < 1, got ρ = {rho}, γ = {}", spec.gamma)));
    }
    let basis = SpectralBasis::above(spec.p0, spec.omega, rho * spec.gamma)?;
    truncation_from(basis)
}

/// The `count` dominant wavenumber functions.
pub fn fourier_truncate_count(spec: &BlurSpec, count: usize) -> Result<FourierTruncation> {
    spec.validate()?;
    truncation_from(SpectralBasis::leading(spec.p0, spec.omega, count.min(spec.p0 * spec.p0))?)
}

fn truncation_from(basis: SpectralBasis) -> Result<FourierTruncation> {
    if basis.len() > MAX_TRUNCATED {
        return Err(Error::Capacity(format!(
            "{} retained modes exceed the dense limit {MAX_TRUNCATED}; use the online path",
            basis.len()
        )));
    }
    let basis = Arc::new(basis);
    Ok(FourierTruncation { rows: TvRows::projections(basis.clone()), basis })
}

impl FourierTruncation {
    pub fn n_tilde(&self) -> usize {
        self.basis.len()
    }

    /// ⟨φ_a, Y⟩ for full-grid observations Y (row-major).
    pub fn project(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let p0 = self.basis.p0;
        if y.len() != p0 * p0 {
            return Err(Error::Dimension("truncation needs observations at every pixel".into()));
        }
        Ok(self.basis.analysis(&self.basis.fft.spectrum(y.as_slice())))
    }

    pub fn model(&self, y: &DVector<f64>) -> Result<RowData<TvRows>> {
        RowData::new(self.rows.clone(), self.project(y)?)
    }

    /// X_ℓc as an image.
    pub fn apply_left(&self, c: &DVector<f64>) -> ImageGrid {
        let scaled: Vec<f64> = c.iter().enumerate().map(|(a, v)| v * self.basis.blur(a)).collect();
        ImageGrid { p0: self.basis.p0, values: self.basis.fft.real_field(self.basis.synthesis(&scaled)) }
    }

    /// X_rβ.
    pub fn apply_right(&self, beta: &DVector<f64>) -> DVector<f64> {
        self.basis.image_coeffs(beta)
    }

    /// ‖X̃β̃ − X_ℓX_r(𝐃β̃, mean β̃)‖ / ‖X̃β̃‖ over the full grid.
    pub fn observation_error(&self, truth: &ImageGrid) -> f64 {
        let z = blur_with(&self.basis.fft, truth, self.basis.omega);
        let coeffs = self.basis.analysis(&self.basis.fft.spectrum(&truth.values));
        let zt = self.apply_left(&coeffs);
        zt.relative_error(&z)
    }
}

/// Modified Shepp–Logan phantom on [−1, 1]², values in [0, 1], y pointing up.
pub fn shepp_logan(p0: usize) -> Result<ImageGrid> {
    const E: [[f64; 6]; 10] = [
        [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
        [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0],
        [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0],
        [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0],
        [0.1, 0.21, 0.25, 0.0, 0.35, 0.0],
        [0.1, 0.046, 0.046, 0.0, 0.1, 0.0],
        [0.1, 0.046, 0.046, 0.0, -0.1, 0.0],
        [0.1, 0.046, 0.023, -0.08, -0.605, 0.0],
        [0.1, 0.023, 0.023, 0.0, -0.606, 0.0],
        [0.1, 0.023, 0.046, 0.06, -0.605, 0.0],
    ];
    let half = (p0 as f64 - 1.0) / 2.0;
    ImageGrid::from_fn(p0, |i, j| {
        let x = (j as f64 - half) / half;
        let y = (half - i as f64) / half;
        E.iter()
            .filter(|e| {
                let (s, c) = e[5].to_radians().sin_cos();
                let (dx, dy) = (x - e[3], y - e[4]);
                let u = dx * c + dy * s;
                let v = dy * c - dx * s;
                (u / e[1]).powi(2) + (v / e[2]).powi(2) <= 1.0
            })
            .map(|e| e[0])
            .sum()
    })
}

/// Piecewise-constant test image: a bright rectangle and a dimmer disk.
pub fn toy_image(p0: usize) -> Result<ImageGrid> {
    let s = p0 as f64;
    ImageGrid::from_fn(p0, |i, j| {
        let (x, y) = (i as f64 / s, j as f64 / s);
        let mut v = 0.0;
        if (0.2..0.55).contains(&x) && (0.15..0.5).contains(&y) {
            v += 1.0;
        }
        if (x - 0.65).powi(2) + (y - 0.65).powi(2) < 0.04 {
            v += 0.5;
        }
        v
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fft_round_trip() {
        let fft = Fft2::new(8);
        let orig: Vec<Complex64> = (0..64).map(|k| Complex64::new(k as f64 * 0.1, (k % 5) as f64)).collect();
        let mut z = orig.clone();
        fft.forward(&mut z);
        fft.inverse(&mut z);
        assert!(z.iter().zip(&orig).all(|(a, b)| (a - b).norm() < 1e-12));
    }

    #[test]
    fn constant_image_is_fixed_by_blur_and_killed_by_gradient() {
        let img = ImageGrid::constant(8, 2.5).unwrap();
        let spec = BlurSpec::full(8, 0.3, 0.1);
        let b = blur_apply(&img, &spec);
        assert!(b.values.iter().all(|v| (v - 2.5).abs() < 1e-12));
        let (dx, dy) = grad_apply(&img);
        assert!(dx.norm() < 1e-12 && dy.norm() < 1e-12);
    }

    #[test]
    fn band_analysis_inverts_synthesis() {
        let basis = SpectralBasis::full(6, 0.1).unwrap();
        assert_eq!(basis.len(), 36);
        let c: Vec<f64> = (0..36).map(|k| (k as f64 * 0.7).sin()).collect();
        let back = basis.analysis(&basis.synthesis(&c));
        assert!(back.iter().zip(&c).all(|(a, b)| (a - b).abs() < 1e-12));
        let x = 13;
        let vals = basis.values_at(x);
        let field = basis.fft.real_field(basis.synthesis(&c));
        assert!((vals.dot(&DVector::from_vec(c.clone())) - field[x]).abs() < 1e-12);
    }

    #[test]
    fn cov_diag_trick_small() {
        let k = DMatrix::from_row_slice(2, 1, &[2.0, 3.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.5, -1.0]);
        assert_eq!(cov_diag_trick(&k, &b).unwrap(), DVector::from_vec(vec![1.0, -3.0]));
        assert!(cov_diag_trick(&k, &DMatrix::zeros(1, 2)).is_err());
    }
}
