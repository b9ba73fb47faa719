//! Ground-truth Wiener-Hammerstein channel.
//!
//! The channel is the cascade `x → h → u → c(·) → y → g → (+e) → w` where
//! `h` and `g` are FIR filters, `c` is a static amplifier nonlinearity (Rapp
//! or odd polynomial), and `e` is white Gaussian noise applied only at the
//! output. Filtering is causal with zero initial state: samples before index
//! 0 are treated as zero.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::lsq;
use crate::signals::Signal;

/// Finite impulse response filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FirFilter {
    taps: Vec<f64>,
}

impl FirFilter {
    pub fn new(taps: Vec<f64>) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::invalid("taps", "filter needs at least one tap"));
        }
        if let Some(bad) = taps.iter().position(|t| !t.is_finite()) {
            return Err(Error::invalid("taps", format!("non-finite tap at index {bad}")));
        }
        Ok(Self { taps })
    }

    /// Identity filter (single unit tap).
    pub fn identity() -> Self {
        Self { taps: vec![1.0] }
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn scaled(&self, c: f64) -> FirFilter {
        FirFilter {
            taps: self.taps.iter().map(|t| t * c).collect(),
        }
    }

    /// Squared 2-norm of the tap vector.
    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|t| t * t).sum()
    }

    /// Causal convolution with zero initial state; the output has the same
    /// length as the input.
    pub fn filter(&self, x: &Signal) -> Signal {
        let xs = x.samples();
        let mut out = vec![0.0; xs.len()];
        for (n, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            let span = self.taps.len().min(n + 1);
            for (i, t) in self.taps.iter().take(span).enumerate() {
                acc += t * xs[n - i];
            }
            *o = acc;
        }
        Signal::raw(out)
    }

    /// Full filter-by-filter convolution; the result has `L₁ + L₂ − 1` taps.
    pub fn cascade(&self, other: &FirFilter) -> FirFilter {
        let mut taps = vec![0.0; self.taps.len() + other.taps.len() - 1];
        for (i, a) in self.taps.iter().enumerate() {
            for (j, b) in other.taps.iter().enumerate() {
                taps[i + j] += a * b;
            }
        }
        FirFilter { taps }
    }

    /// Magnitude of the frequency response at `points` frequencies spanning
    /// `[0, 1/2)` (uniform grid, `f_j = j / (2·points)`).
    pub fn magnitude_response(&self, points: usize) -> Vec<f64> {
        (0..points)
            .map(|j| {
                let f = 0.5 * j as f64 / points as f64;
                let (mut re, mut im) = (0.0, 0.0);
                for (i, t) in self.taps.iter().enumerate() {
                    let w = 2.0 * PI * f * i as f64;
                    re += t * w.cos();
                    im -= t * w.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    /// Group delay in samples: `(L−1)/2` exactly for linear-phase
    /// (symmetric or antisymmetric) filters, otherwise the energy centroid
    /// `Σ i·f(i)² / Σ f(i)²`.
    pub fn group_delay(&self) -> Result<f64> {
        let energy = self.energy();
        if energy == 0.0 {
            return Err(Error::UndefinedRatio("group delay of an all-zero filter"));
        }
        let n = self.taps.len();
        let scale = self.taps.iter().fold(0.0f64, |m, t| m.max(t.abs()));
        let tol = 1e-12 * scale;
        let symmetric = (0..n / 2).all(|i| (self.taps[i] - self.taps[n - 1 - i]).abs() <= tol);
        let antisymmetric = (0..n / 2).all(|i| (self.taps[i] + self.taps[n - 1 - i]).abs() <= tol)
            && (n % 2 == 0 || self.taps[n / 2].abs() <= tol);
        if symmetric || antisymmetric {
            return Ok((n as f64 - 1.0) / 2.0);
        }
        let centroid = self
            .taps
            .iter()
            .enumerate()
            .map(|(i, t)| i as f64 * t * t)
            .sum::<f64>()
            / energy;
        Ok(centroid)
    }

    /// Loads taps from CSV, one tap per line.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut text = String::new();
        std::io::BufReader::new(input).read_to_string(&mut text)?;
        let mut taps = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let v: f64 = line
                .parse()
                .map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
            taps.push(v);
        }
        FirFilter::new(taps)
    }

    pub fn from_csv_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        for t in &self.taps {
            writeln!(out, "{t:.17e}")?;
        }
        Ok(())
    }

    pub fn to_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// The `h` filter from the appendix of the reference channel (20 symmetric taps).
pub fn paper_h() -> FirFilter {
    FirFilter::read_csv(include_str!("../data/h_paper.csv").as_bytes()).expect("embedded h taps")
}

/// The `g` filter from the appendix of the reference channel (20 symmetric taps).
pub fn paper_g() -> FirFilter {
    FirFilter::read_csv(include_str!("../data/g_paper.csv").as_bytes()).expect("embedded g taps")
}

/// Rapp AM/AM saturation model.
///
/// `|y| = G·|u| / (1 + (G·|u|/A₀)^{2p})^{1/(2p)}`, with the sign of the
/// input preserved. Output magnitude is strictly below the saturation
/// amplitude `A₀` for finite inputs, and the small-signal gain is `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct RappAmplifier {
    pub gain: f64,
    pub saturation: f64,
    pub smoothness: f64,
}

impl RappAmplifier {
    pub fn new(gain: f64, saturation: f64, smoothness: f64) -> Result<Self> {
        for (name, v) in [("gain", gain), ("saturation", saturation), ("smoothness", smoothness)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, "must be a positive real"));
            }
        }
        Ok(Self { gain, saturation, smoothness })
    }

    /// The reference amplifier: G = 1, A₀ = 10, p = 3.
    pub fn paper() -> Self {
        Self { gain: 1.0, saturation: 10.0, smoothness: 3.0 }
    }

    pub fn apply_sample(&self, u: f64) -> f64 {
        if u == 0.0 {
            return 0.0;
        }
        let two_p = 2.0 * self.smoothness;
        let drive = self.gain * u.abs() / self.saturation;
        // Above the knee the algebraically equivalent form
        // A₀·(1 + drive^{−2p})^{−1/(2p)} avoids overflow of drive^{2p}.
        let mag = if drive <= 1.0 {
            self.gain * u.abs() / (1.0 + drive.powf(two_p)).powf(1.0 / two_p)
        } else {
            self.saturation / (1.0 + drive.powf(-two_p)).powf(1.0 / two_p)
        };
        u.signum() * mag
    }

    /// Input amplitude at which the output reaches `fraction` of `A₀`.
    /// `fraction = 0.99` gives a practical saturation input amplitude.
    pub fn input_amplitude_at(&self, fraction: f64) -> f64 {
        // |y| = fraction·A₀ ⇒ drive^{2p} = f^{2p} / (1 − f^{2p})
        let f2p = fraction.powf(2.0 * self.smoothness);
        let drive = (f2p / (1.0 - f2p)).powf(1.0 / (2.0 * self.smoothness));
        drive * self.saturation / self.gain
    }
}

/// Static odd-order polynomial nonlinearity `c(u) = Σ γ(k)·u^k`, odd `k` only.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialAmplifier {
    /// Coefficient of order `2j + 1` at index `j`.
    odd_coeffs: Vec<f64>,
}

impl PolynomialAmplifier {
    /// Builds from the coefficients of orders `1, 3, …, K` in that order.
    pub fn from_odd_coeffs(odd_coeffs: Vec<f64>) -> Result<Self> {
        if odd_coeffs.is_empty() {
            return Err(Error::invalid("odd_coeffs", "need at least the order-1 coefficient"));
        }
        if odd_coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("odd_coeffs", "coefficients must be finite"));
        }
        Ok(Self { odd_coeffs })
    }

    /// Linear amplifier `c(u) = gain·u`.
    pub fn linear(gain: f64) -> Self {
        Self { odd_coeffs: vec![gain] }
    }

    /// `c(u) = γ₁·u + γ₃·u³`.
    pub fn cubic(gamma1: f64, gamma3: f64) -> Self {
        Self { odd_coeffs: vec![gamma1, gamma3] }
    }

    /// Coefficients of orders `1, 3, …, K`.
    pub fn odd_coeffs(&self) -> &[f64] {
        &self.odd_coeffs
    }

    /// Highest order `K` (odd).
    pub fn max_order(&self) -> usize {
        2 * self.odd_coeffs.len() - 1
    }

    /// Coefficient `γ(k)`; zero for orders not present or even.
    pub fn coeff(&self, order: usize) -> f64 {
        if order % 2 == 1 {
            self.odd_coeffs.get(order / 2).copied().unwrap_or(0.0)
        } else {
            0.0
        }
    }

    pub fn apply_sample(&self, u: f64) -> f64 {
        // Horner in u² over the odd coefficients, times u.
        let u2 = u * u;
        let mut acc = 0.0;
        for c in self.odd_coeffs.iter().rev() {
            acc = acc * u2 + c;
        }
        acc * u
    }
}

/// Either amplifier model.
#[derive(Debug, Clone, PartialEq)]
pub enum Amplifier {
    Rapp(RappAmplifier),
    Polynomial(PolynomialAmplifier),
}

impl Amplifier {
    pub fn apply_sample(&self, u: f64) -> f64 {
        match self {
            Amplifier::Rapp(a) => a.apply_sample(u),
            Amplifier::Polynomial(a) => a.apply_sample(u),
        }
    }

    pub fn apply(&self, u: &Signal) -> Signal {
        Signal::raw(u.samples().iter().map(|&s| self.apply_sample(s)).collect())
    }

    /// Gain in the linear (small-signal) region.
    pub fn small_signal_gain(&self) -> f64 {
        match self {
            Amplifier::Rapp(a) => a.gain,
            Amplifier::Polynomial(a) => a.coeff(1),
        }
    }
}

/// Samplewise Rapp amplification.
pub fn rapp(amp: &RappAmplifier, u: &Signal) -> Signal {
    Signal::raw(u.samples().iter().map(|&s| amp.apply_sample(s)).collect())
}

/// Samplewise odd-polynomial amplification.
pub fn poly_amp(amp: &PolynomialAmplifier, u: &Signal) -> Signal {
    Signal::raw(u.samples().iter().map(|&s| amp.apply_sample(s)).collect())
}

/// Hammerstein coefficients `g'_k(i) = γ(k)·g(i)` flattened k-major:
/// `[g'_1(0..L₂), g'_3(0..L₂), …, g'_K(0..L₂)]`.
pub fn hammerstein_coeffs(amp: &PolynomialAmplifier, g: &FirFilter) -> Vec<f64> {
    let mut out = Vec::with_capacity(amp.odd_coeffs().len() * g.len());
    for &gamma in amp.odd_coeffs() {
        for &tap in g.taps() {
            out.push(gamma * tap);
        }
    }
    out
}

/// Ground-truth Wiener-Hammerstein model.
#[derive(Debug, Clone)]
pub struct WhModel {
    pub h: FirFilter,
    pub amplifier: Amplifier,
    pub g: FirFilter,
    /// Variance of the additive output noise `e`.
    pub noise_variance: f64,
}

/// All intermediate signals of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    /// After the first filter: `u = h * x`.
    pub u: Signal,
    /// After the nonlinearity: `y = c(u)`.
    pub y: Signal,
    /// Channel output: `w = g * y + e`.
    pub w: Signal,
}

impl WhModel {
    pub fn new(h: FirFilter, amplifier: Amplifier, g: FirFilter, noise_variance: f64) -> Result<Self> {
        if !(noise_variance.is_finite() && noise_variance >= 0.0) {
            return Err(Error::invalid("noise_variance", "must be finite and ≥ 0"));
        }
        Ok(Self { h, amplifier, g, noise_variance })
    }

    /// The reference channel: appendix filters and the Rapp amplifier
    /// (G = 1, A₀ = 10, p = 3), noiseless.
    pub fn paper(noise_variance: f64) -> Self {
        Self {
            h: paper_h(),
            amplifier: Amplifier::Rapp(RappAmplifier::paper()),
            g: paper_g(),
            noise_variance,
        }
    }

    /// Composite linear filter `r = G·(g*h)` seen in the quasi-linear regime.
    pub fn composite_r(&self) -> FirFilter {
        self.g.cascade(&self.h).scaled(self.amplifier.small_signal_gain())
    }

    /// Forward pass with seeded output noise.
    pub fn forward(&self, x: &Signal, seed: u64) -> ForwardRecord {
        let u = self.h.filter(x);
        let y = self.amplifier.apply(&u);
        let mut w = self.g.filter(&y);
        if self.noise_variance > 0.0 {
            let sigma = self.noise_variance.sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            w = Signal::raw(
                w.samples()
                    .iter()
                    .map(|&s| s + sigma * normal.sample(&mut rng))
                    .collect(),
            );
        }
        ForwardRecord { u, y, w }
    }

    /// Forward pass with the noise source disabled.
    pub fn forward_noiseless(&self, x: &Signal) -> ForwardRecord {
        let u = self.h.filter(x);
        let y = self.amplifier.apply(&u);
        let w = self.g.filter(&y);
        ForwardRecord { u, y, w }
    }

    /// Copy with a different noise variance.
    pub fn with_noise_variance(&self, noise_variance: f64) -> Self {
        Self {
            h: self.h.clone(),
            amplifier: self.amplifier.clone(),
            g: self.g.clone(),
            noise_variance,
        }
    }
}

/// Least-squares fit of an odd polynomial of order `max_order` to samples
/// `(u, y)` of a static nonlinearity. Returns the fitted amplifier and the
/// fit NMSE in dB.
pub fn fit_polynomial(u: &Signal, y: &Signal, max_order: usize) -> Result<(PolynomialAmplifier, f64)> {
    if max_order % 2 == 0 || max_order == 0 {
        return Err(Error::invalid("max_order", "must be a positive odd integer"));
    }
    if u.len() != y.len() {
        return Err(Error::invalid("y", "input and output must have equal length"));
    }
    let terms = max_order.div_ceil(2);
    if u.len() < terms {
        return Err(Error::invalid("u", "need at least as many samples as coefficients"));
    }
    let n = u.len();
    let design = nalgebra::DMatrix::from_fn(n, terms, |row, col| {
        u.samples()[row].powi(2 * col as i32 + 1)
    });
    let target = nalgebra::DVector::from_column_slice(y.samples());
    let problem = lsq::RegressionProblem::new(design, target)?;
    let solution = lsq::solve(&problem)?;
    let amp = PolynomialAmplifier::from_odd_coeffs(solution.coefficients.iter().copied().collect())?;
    let y_energy: f64 = y.samples().iter().map(|v| v * v).sum();
    if y_energy == 0.0 {
        return Err(Error::UndefinedRatio("fit NMSE with a zero output signal"));
    }
    let nmse_db = 10.0 * (solution.residual_norm.powi(2) / y_energy).log10();
    Ok((amp, nmse_db))
}

/// Circular fractional delay by `tau` samples via a frequency-domain phase
/// ramp `e^{−j2πfτ}`.
///
/// The operation is exact for periodic records (whole periods); non-periodic
/// signals should be zero-padded by at least `⌈τ⌉` plus the filter length
/// before use, since content wraps around circularly.
pub fn fractional_delay(x: &Signal, tau: f64) -> Signal {
    let n = x.len();
    if n == 1 || tau == 0.0 {
        return x.clone();
    }
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);
    let mut buf: Vec<Complex<f64>> = x.samples().iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.process(&mut buf);
    for (k, b) in buf.iter_mut().enumerate() {
        // Signed frequency convention keeps the output real.
        let f = if 2 * k < n {
            k as f64 / n as f64
        } else if 2 * k == n {
            // Nyquist bin: the real part of the ramp preserves realness.
            *b *= (PI * tau).cos();
            continue;
        } else {
            (k as f64 - n as f64) / n as f64
        };
        let phase = -2.0 * PI * f * tau;
        *b *= Complex::new(phase.cos(), phase.sin());
    }
    ifft.process(&mut buf);
    Signal::raw(buf.iter().map(|c| c.re / n as f64).collect())
}
