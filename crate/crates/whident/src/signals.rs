//! Pilot-signal generation and characterization.
//!
//! The identification pilots are multisines, sums of `M` equal-amplitude
//! cosines at consecutive multiples of a fundamental frequency. Their peak
//! amplitude is easy to control, unlike white Gaussian noise, which is the
//! reason they are preferred as amplifier pilots. Phases are either the
//! deterministic Schroeder rule (low crest factor) or the result of a
//! seeded min-max PAR search that stays low-PAR even after band-limiting.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};

/// Magic bytes of the binary signal format.
const SIGNAL_MAGIC: &[u8; 4] = b"WHSG";
/// Version of the binary signal format.
const SIGNAL_VERSION: u32 = 1;

/// A uniformly sampled real-valued sequence.
///
/// Invariants: at least one sample, all samples finite, positive sample rate.
/// The sample rate is normalized (`f_s = 1` by default); all frequencies in
/// this crate are expressed as fractions of `f_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    samples: Vec<f64>,
    sample_rate: f64,
}

impl Signal {
    /// Creates a signal with the default normalized sample rate `f_s = 1`.
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        Self::with_sample_rate(samples, 1.0)
    }

    pub fn with_sample_rate(samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("samples", "signal must contain at least one sample"));
        }
        if let Some(bad) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(
                "samples",
                format!("non-finite sample at index {bad}"),
            ));
        }
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::invalid("sample_rate", "must be a positive real"));
        }
        Ok(Self { samples, sample_rate })
    }

    /// Internal constructor for samples produced by operations that preserve
    /// finiteness. Checked in debug builds only.
    pub(crate) fn raw(samples: Vec<f64>) -> Self {
        debug_assert!(!samples.is_empty());
        debug_assert!(samples.iter().all(|s| s.is_finite()));
        Self { samples, sample_rate: 1.0 }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// Always false (the type invariant requires at least one sample); kept
    /// for clippy's `len_without_is_empty`.
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    /// Mean power `σ_x² = (1/N) Σ x(n)²`.
    pub fn mean_power(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    /// Peak amplitude `max |x(n)|`.
    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, &s| m.max(s.abs()))
    }

    /// Returns a copy scaled by `c`.
    pub fn scaled(&self, c: f64) -> Signal {
        Signal {
            samples: self.samples.iter().map(|s| s * c).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Returns a copy scaled so that the mean power equals `power`.
    ///
    /// An all-zero signal is returned unchanged.
    pub fn scaled_to_power(&self, power: f64) -> Signal {
        let p = self.mean_power();
        if p == 0.0 {
            return self.clone();
        }
        self.scaled((power / p).sqrt())
    }

    /// Returns a copy scaled so that the peak amplitude equals `peak`.
    pub fn scaled_to_peak(&self, peak: f64) -> Signal {
        let m = self.peak();
        if m == 0.0 {
            return self.clone();
        }
        self.scaled(peak / m)
    }

    /// Elementwise odd power of the signal (used for Hammerstein regressors).
    pub fn powi(&self, k: i32) -> Signal {
        Signal {
            samples: self.samples.iter().map(|s| s.powi(k)).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Writes the CSV form: a header row `sample` followed by one sample per line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "sample")?;
        for s in &self.samples {
            writeln!(out, "{s:.17e}")?;
        }
        Ok(())
    }

    pub fn to_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut text = String::new();
        let mut reader = std::io::BufReader::new(input);
        reader.read_to_string(&mut text)?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "sample" => {}
            _ => return Err(Error::Parse("expected `sample` header row".into())),
        }
        let mut samples = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let v: f64 = line
                .parse()
                .map_err(|e| Error::Parse(format!("line {}: {e}", i + 2)))?;
            samples.push(v);
        }
        Signal::new(samples)
    }

    pub fn from_csv_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    /// Writes the binary form: 16-byte header (magic `WHSG`, u32 version,
    /// u64 length, little-endian) followed by the samples as little-endian
    /// 64-bit floats.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(SIGNAL_MAGIC)?;
        out.write_all(&SIGNAL_VERSION.to_le_bytes())?;
        out.write_all(&(self.samples.len() as u64).to_le_bytes())?;
        for s in &self.samples {
            out.write_all(&s.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_binary_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_binary(std::io::BufWriter::new(file))
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut header = [0u8; 16];
        input.read_exact(&mut header)?;
        if &header[0..4] != SIGNAL_MAGIC {
            return Err(Error::Parse("bad magic in binary signal header".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != SIGNAL_VERSION {
            return Err(Error::Parse(format!("unsupported signal version {version}")));
        }
        let len = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
        let mut samples = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            input.read_exact(&mut buf)?;
            samples.push(f64::from_le_bytes(buf));
        }
        Signal::new(samples)
    }

    pub fn from_binary_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_binary(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Specification of a multisine `x(n) = Σ_{k=k₀}^{k₀+M-1} cos(2π f₁ k n + θ_k)`.
///
/// The classic pilot form starts at the fundamental (`k₀ = 1`); a first
/// harmonic `k₀ > 1` places the same construction inside a band-pass region,
/// which step 2 of the estimator needs. Harmonic amplitudes are all 1 as in
/// the defining equation; power scaling is applied by callers.
#[derive(Debug, Clone, PartialEq)]
pub struct MultisineSpec {
    num_harmonics: usize,
    first_harmonic: usize,
    fundamental: f64,
    phases: Vec<f64>,
    length: usize,
}

impl MultisineSpec {
    /// Baseband multisine with harmonics `1·f₁ … M·f₁`.
    pub fn new(num_harmonics: usize, fundamental: f64, phases: Vec<f64>, length: usize) -> Result<Self> {
        Self::band(num_harmonics, 1, fundamental, phases, length)
    }

    /// Band-limited multisine with harmonics `k₀·f₁ … (k₀+M-1)·f₁`.
    pub fn band(
        num_harmonics: usize,
        first_harmonic: usize,
        fundamental: f64,
        phases: Vec<f64>,
        length: usize,
    ) -> Result<Self> {
        if num_harmonics == 0 {
            return Err(Error::invalid("num_harmonics", "must be ≥ 1"));
        }
        if first_harmonic == 0 {
            return Err(Error::invalid("first_harmonic", "must be ≥ 1"));
        }
        if !(fundamental > 0.0 && fundamental < 0.5) {
            return Err(Error::invalid("fundamental", "must lie in (0, 1/2)"));
        }
        let top = (first_harmonic + num_harmonics - 1) as f64 * fundamental;
        if top > 0.5 + 1e-12 {
            return Err(Error::invalid(
                "fundamental",
                format!("highest harmonic {top:.6} exceeds the Nyquist frequency 1/2"),
            ));
        }
        if phases.len() != num_harmonics {
            return Err(Error::invalid(
                "phases",
                format!("expected {} phases, got {}", num_harmonics, phases.len()),
            ));
        }
        if length == 0 {
            return Err(Error::invalid("length", "must be ≥ 1"));
        }
        let phases = phases.into_iter().map(|p| p.rem_euclid(2.0 * PI)).collect();
        Ok(Self {
            num_harmonics,
            first_harmonic,
            fundamental,
            phases,
            length,
        })
    }

    /// Baseband multisine with Schroeder phases.
    pub fn schroeder(num_harmonics: usize, fundamental: f64, length: usize) -> Result<Self> {
        Self::new(num_harmonics, fundamental, schroeder_phases(num_harmonics), length)
    }

    pub fn num_harmonics(&self) -> usize {
        self.num_harmonics
    }

    pub fn first_harmonic(&self) -> usize {
        self.first_harmonic
    }

    pub fn fundamental(&self) -> f64 {
        self.fundamental
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn with_length(&self, length: usize) -> Result<Self> {
        Self::band(
            self.num_harmonics,
            self.first_harmonic,
            self.fundamental,
            self.phases.clone(),
            length,
        )
    }

    /// Normalized frequencies `k·f₁` of all harmonics.
    pub fn harmonic_frequencies(&self) -> Vec<f64> {
        (self.first_harmonic..self.first_harmonic + self.num_harmonics)
            .map(|k| k as f64 * self.fundamental)
            .collect()
    }
}

/// Schroeder's low-crest-factor phase rule `θ_k = π ⌊k²/(2M)⌋ mod 2π`.
///
/// Every phase is either 0 or π.
pub fn schroeder_phases(num_harmonics: usize) -> Vec<f64> {
    (1..=num_harmonics as u64)
        .map(|k| {
            let steps = (k * k) / (2 * num_harmonics as u64);
            if steps % 2 == 0 {
                0.0
            } else {
                PI
            }
        })
        .collect()
}

/// Generates the multisine described by `spec`.
pub fn multisine(spec: &MultisineSpec) -> Signal {
    let mut samples = vec![0.0; spec.length];
    for (j, phase) in spec.phases.iter().enumerate() {
        let k = (spec.first_harmonic + j) as f64;
        let omega = 2.0 * PI * spec.fundamental * k;
        for (n, s) in samples.iter_mut().enumerate() {
            *s += (omega * n as f64 + phase).cos();
        }
    }
    Signal::raw(samples)
}

/// Peak-to-average power ratio `max |x(n)|² / σ_x²` (linear).
pub fn par(x: &Signal) -> Result<f64> {
    let power = x.mean_power();
    if power == 0.0 {
        return Err(Error::UndefinedRatio("PAR of an all-zero signal"));
    }
    let peak = x.peak();
    Ok(peak * peak / power)
}

/// PAR in dB.
pub fn par_db(x: &Signal) -> Result<f64> {
    Ok(10.0 * par(x)?.log10())
}

/// Configuration for the min-max PAR phase search.
///
/// The objective is `max_{j ∈ [M₀, M]} PAR(x^j)` where `x^j` keeps only the
/// first `j` harmonics; minimizing it yields phases whose PAR stays low even
/// when the channel filter removes the upper harmonics.
#[derive(Debug, Clone)]
pub struct MinMaxSearch {
    pub num_harmonics: usize,
    pub min_harmonics: usize,
    pub fundamental: f64,
    pub length: usize,
    /// Number of candidate evaluations (the Schroeder seed is free).
    pub budget: usize,
    pub seed: u64,
}

/// Outcome of [`minmax_phase_search`].
#[derive(Debug, Clone)]
pub struct PhaseSearchResult {
    pub phases: Vec<f64>,
    /// Worst-case PAR (linear) of the returned phases.
    pub objective: f64,
    /// Worst-case PAR (linear) of the Schroeder seed.
    pub seed_objective: f64,
    pub evaluations: usize,
}

// Evolutionary-search constants (fixed so results are reproducible).
const GA_POPULATION: usize = 32;
const GA_MUTATION_SIGMA: f64 = 0.3;
const GA_TOURNAMENT: usize = 3;
const GA_ELITES: usize = 2;

/// Seeded evolutionary search for the min-max PAR problem.
///
/// Deterministic given `seed` and `budget`; never returns phases whose
/// objective exceeds the Schroeder seed's. With `budget = 0` the seed is
/// returned unchanged.
pub fn minmax_phase_search(cfg: &MinMaxSearch) -> Result<PhaseSearchResult> {
    if cfg.min_harmonics == 0 || cfg.min_harmonics > cfg.num_harmonics {
        return Err(Error::invalid("min_harmonics", "need 1 ≤ M₀ ≤ M"));
    }
    // Validates the Nyquist bound and length.
    MultisineSpec::new(cfg.num_harmonics, cfg.fundamental, schroeder_phases(cfg.num_harmonics), cfg.length)?;

    let seed_phases = schroeder_phases(cfg.num_harmonics);
    let seed_objective = minmax_objective(cfg, &seed_phases);
    let mut best = (seed_phases.clone(), seed_objective);
    if cfg.budget == 0 {
        return Ok(PhaseSearchResult {
            phases: best.0,
            objective: best.1,
            seed_objective,
            evaluations: 0,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, GA_MUTATION_SIGMA).expect("valid sigma");
    let mut evaluations = 0usize;

    let mutate = |rng: &mut ChaCha8Rng, parent: &[f64]| -> Vec<f64> {
        parent
            .iter()
            .map(|p| (p + normal.sample(rng)).rem_euclid(2.0 * PI))
            .collect()
    };

    // Initial population: the seed plus mutated copies of it.
    let mut population: Vec<(Vec<f64>, f64)> = vec![(seed_phases.clone(), seed_objective)];
    while population.len() < GA_POPULATION && evaluations < cfg.budget {
        let cand = mutate(&mut rng, &seed_phases);
        let obj = minmax_objective(cfg, &cand);
        evaluations += 1;
        if obj < best.1 {
            best = (cand.clone(), obj);
        }
        population.push((cand, obj));
    }

    while evaluations < cfg.budget {
        population.sort_by(|a, b| a.1.total_cmp(&b.1));
        let mut next: Vec<(Vec<f64>, f64)> =
            population.iter().take(GA_ELITES.min(population.len())).cloned().collect();
        while next.len() < GA_POPULATION && evaluations < cfg.budget {
            // Tournament selection over the current population.
            let mut winner = rng.random_range(0..population.len());
            for _ in 1..GA_TOURNAMENT {
                let c = rng.random_range(0..population.len());
                if population[c].1 < population[winner].1 {
                    winner = c;
                }
            }
            let cand = mutate(&mut rng, &population[winner].0);
            let obj = minmax_objective(cfg, &cand);
            evaluations += 1;
            if obj < best.1 {
                best = (cand.clone(), obj);
            }
            next.push((cand, obj));
        }
        population = next;
    }

    Ok(PhaseSearchResult {
        phases: best.0,
        objective: best.1,
        seed_objective,
        evaluations,
    })
}

/// Worst-case PAR over the truncated multisines `x^j`, `j ∈ [M₀, M]`.
fn minmax_objective(cfg: &MinMaxSearch, phases: &[f64]) -> f64 {
    let mut acc = vec![0.0f64; cfg.length];
    let mut worst = 0.0f64;
    for (j, phase) in phases.iter().enumerate() {
        let k = (j + 1) as f64;
        let omega = 2.0 * PI * cfg.fundamental * k;
        for (n, s) in acc.iter_mut().enumerate() {
            *s += (omega * n as f64 + phase).cos();
        }
        if j + 1 >= cfg.min_harmonics {
            let mut peak_sq = 0.0f64;
            let mut power = 0.0f64;
            for &s in &acc {
                let p = s * s;
                power += p;
                if p > peak_sq {
                    peak_sq = p;
                }
            }
            power /= cfg.length as f64;
            if power > 0.0 {
                let ratio = peak_sq / power;
                if ratio > worst {
                    worst = ratio;
                }
            }
        }
    }
    worst
}

/// I.i.d. zero-mean Gaussian noise scaled to the reference signal's mean
/// power (`σ = sqrt(σ_ref²)`), deterministic given the seed.
pub fn matched_white_noise(reference: &Signal, length: usize, seed: u64) -> Result<Signal> {
    if length == 0 {
        return Err(Error::invalid("length", "must be ≥ 1"));
    }
    let sigma = reference.mean_power().sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let samples = (0..length).map(|_| sigma * normal.sample(&mut rng)).collect();
    Ok(Signal::raw(samples))
}

/// Occupied bandwidth: the fraction of the normalized band `[0, 1/2]`
/// (expressed as a width, i.e. `count · bin_width`) whose periodogram lies
/// within `threshold_db` of the spectral peak.
///
/// `threshold_db` is the allowed drop below the peak, in dB; its sign is
/// ignored (`-20.0` and `20.0` both mean "within 20 dB of the peak"). Long
/// records use a 16-segment averaged periodogram so that single-bin noise
/// fluctuations do not punch holes in the measured band.
pub fn occupied_bandwidth(x: &Signal, threshold_db: f64) -> f64 {
    let spectrum = averaged_periodogram(x.samples());
    let bins = spectrum.len();
    // One-sided spectrum of a segment of length L has L/2 + 1 bins spaced 1/L apart.
    let seg_len = 2 * (bins - 1).max(1);
    let peak = spectrum.iter().fold(0.0f64, |m, &v| m.max(v));
    if peak == 0.0 {
        return 0.0;
    }
    let floor = peak * 10f64.powf(-threshold_db.abs() / 10.0);
    let count = spectrum.iter().filter(|&&v| v >= floor).count();
    count as f64 / seg_len as f64
}

/// Number of segments used by the averaged periodogram for long records.
const PERIODOGRAM_SEGMENTS: usize = 16;
/// Records shorter than this use a single raw periodogram.
const PERIODOGRAM_SEGMENT_THRESHOLD: usize = 1024;

/// One-sided averaged periodogram (bins `0 ..= L/2` of segments of length `L`).
fn averaged_periodogram(samples: &[f64]) -> Vec<f64> {
    let n = samples.len();
    let segments = if n >= PERIODOGRAM_SEGMENT_THRESHOLD {
        PERIODOGRAM_SEGMENTS
    } else {
        1
    };
    let seg_len = (n / segments).max(1);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(seg_len);
    let mut acc = vec![0.0f64; seg_len / 2 + 1];
    for s in 0..segments {
        let start = s * seg_len;
        let mut buf: Vec<Complex<f64>> = samples[start..start + seg_len]
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .collect();
        fft.process(&mut buf);
        for (b, a) in buf.iter().take(acc.len()).zip(acc.iter_mut()) {
            *a += b.norm_sqr();
        }
    }
    acc
}
