//! Three-step identification of the Wiener-Hammerstein channel.
//!
//! Step 1 transmits a low-power wideband multisine `x₁` so that the amplifier
//! stays quasi-linear and estimates the composite filter `r = G·g*h` by least
//! squares. Step 2 transmits a band-limited multisine `x₂` whose energy lives
//! in the non-attenuated band of `r̂` (so `u ≈ x₂` up to the group delay of
//! `h`, searched over a candidate grid) and at full drive, and estimates the
//! Hammerstein blocks `ĝ₁ ≈ γ(1)·g`, `ĝ₃ ≈ γ(3)·g`; `ĝ₁` is then replaced by
//! `γ̂′₁·ĝ₃` via a scalar projection, which is far more accurate. Step 3 uses
//! a short pilot `x₃` (the spectrum of `x₂` at the amplitude of `x₁`) to fix
//! the scale `α̂`, and recovers `ĥ` by deconvolving `r̂` with `ĝ = α̂·ĝ₁`
//! through a Toeplitz least-squares system.

use nalgebra::{DMatrix, DVector};

use crate::channel::{fractional_delay, FirFilter, WhModel};
use crate::error::{Error, Result};
use crate::lsq;
use crate::metrics;
use crate::signals::{multisine, schroeder_phases, MultisineSpec, Signal};

/// Number of equally spaced delay candidates on `[τ_r/4, 3·τ_r/4]`.
const DELAY_GRID: usize = 17;
/// Golden-section refinement iterations after the grid pass. The delay
/// must resolve to ~1e-5 samples so that the fractional-shift ambiguity of
/// the Hammerstein blocks does not floor noiseless identification.
const DELAY_REFINE_ITERS: usize = 30;
/// Selection-NMSE margin within which delay candidates count as tied.
const DELAY_TIE_DB: f64 = 1.0;
/// Fraction of x₂ energy that must fall inside the passband of `r̂`.
const MIN_IN_BAND_FRACTION: f64 = 0.5;

/// Result of step 1.
#[derive(Debug, Clone)]
pub struct Step1Result {
    pub r_hat: FirFilter,
    /// Mean power of the received record.
    pub output_power: f64,
    /// SNR estimated from the regression residual, in dB.
    pub snr_estimate_db: f64,
    /// Fit NMSE of the linear model on the record, in dB.
    pub fit_nmse_db: f64,
    pub condition: f64,
}

/// Step 1: least-squares estimate of `r = G·g*h` from the wideband pilot.
///
/// The pilot is expected to obey the back-off rule
/// `P^{in,sat}_dB − σ²_{x₁,dB} = IBO_dB + PAR(x₁)_dB`; with too little
/// back-off the amplifier distortion floors the achievable Q-value.
pub fn step1_estimate_r(x1: &Signal, w1: &Signal, taps: usize) -> Result<Step1Result> {
    if x1.len() != w1.len() {
        return Err(Error::invalid("w1", "pilot and received record must have equal length"));
    }
    let design = lsq::linear_design(x1, taps)?;
    let problem = lsq::RegressionProblem::new(design, DVector::from_column_slice(w1.samples()))?;
    let solution = lsq::solve(&problem)?;
    let r_hat = FirFilter::new(solution.coefficients.iter().copied().collect())?;

    let n = w1.len();
    let residual_power = solution.residual_norm.powi(2) / (n.saturating_sub(taps).max(1)) as f64;
    let output_power = w1.mean_power();
    let fit = r_hat.filter(x1);
    let fit_power = fit.mean_power();
    let w_energy: f64 = w1.samples().iter().map(|v| v * v).sum();
    let fit_nmse_db = if w_energy > 0.0 {
        10.0 * (solution.residual_norm.powi(2) / w_energy).log10()
    } else {
        f64::NEG_INFINITY
    };
    let snr_estimate_db = if residual_power > 0.0 {
        10.0 * (fit_power / residual_power).log10()
    } else {
        f64::INFINITY
    };
    Ok(Step1Result {
        r_hat,
        output_power,
        snr_estimate_db,
        fit_nmse_db,
        condition: solution.condition,
    })
}

/// Per-order FIR blocks of a Hammerstein fit.
#[derive(Debug, Clone)]
pub struct HammersteinFit {
    /// Block for order `2j+1` at index `j` (`[ĝ₁, ĝ₃, …]`).
    pub blocks: Vec<FirFilter>,
    /// NMSE of the returned (truncated) solution on the regression rows.
    pub fit_nmse_db: f64,
    /// NMSE of the untruncated least-squares fit; the delay search ranks
    /// candidates by this value, which reflects pure model mismatch.
    pub selection_nmse_db: f64,
    pub condition: f64,
}

/// Ceiling of the relative singular-value cutoff for the step-2
/// Hammerstein regression.
///
/// A band-limited pilot leaves frequency directions of the lagged design
/// unexcited; the truncated pseudo-inverse zeroes the estimate there
/// instead of amplifying noise into them. The cutoff adapts to the
/// disturbance level (`residual/target`, measured on the untruncated fit)
/// so that noiseless records keep the exact unique solution.
pub const HAMMERSTEIN_TRUNCATION: f64 = 1e-3;

/// Disturbance-to-cutoff factor of the adaptive truncation rule.
const TRUNCATION_PER_RESIDUAL: f64 = 1e-2;

/// The x₂ multisine keeps its harmonics below this fraction of the upper
/// 3-dB edge of `r̂`. The upper roll-off of `r` comes from `h`; staying
/// clear of it keeps `u ≈ x₂` valid (the flat-passband assumption), while
/// low harmonics are attenuated by `g` only and remain usable.
pub const X2_TOP_FRACTION: f64 = 0.8;

/// Evaluation budget of the PAR-minimizing phase search for x₂.
pub const X2_PHASE_BUDGET: usize = 3000;

/// Fixed seed of the x₂ phase search: the pilot design is deterministic,
/// independent of the per-run noise seeds.
pub const X2_PHASE_SEED: u64 = 2;

/// Least-squares Hammerstein fit with a known input `u`.
///
/// The first `skip` rows of the record are excluded from the regression
/// (filter warm-up); lag windows still reach into the skipped samples.
pub fn estimate_hammerstein_known_u(
    u: &Signal,
    w: &Signal,
    taps: usize,
    max_order: usize,
    skip: usize,
) -> Result<HammersteinFit> {
    let (problem, target_energy) = hammerstein_problem(u, w, taps, max_order, skip)?;

    // Pass 1 with a vanishing cutoff measures the pure model mismatch; the
    // cutoff for the final solve follows the disturbance level.
    let probe = lsq::solve_with(
        &problem,
        &lsq::SolveOptions {
            truncate: Some(f64::EPSILON),
            ..Default::default()
        },
    )?;
    let disturbance = if target_energy > 0.0 {
        probe.subspace_residual_norm / target_energy.sqrt()
    } else {
        0.0
    };
    let truncate = (TRUNCATION_PER_RESIDUAL * disturbance).min(HAMMERSTEIN_TRUNCATION);
    let solution = if truncate > f64::EPSILON {
        let options = lsq::SolveOptions {
            truncate: Some(truncate),
            ..Default::default()
        };
        lsq::solve_with(&problem, &options)?
    } else {
        probe
    };

    let orders = max_order.div_ceil(2);
    let blocks = (0..orders)
        .map(|j| {
            FirFilter::new(
                solution
                    .coefficients
                    .rows(j * taps, taps)
                    .iter()
                    .copied()
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let to_db = |residual: f64| {
        if target_energy > 0.0 {
            10.0 * (residual.powi(2) / target_energy).log10()
        } else {
            f64::NEG_INFINITY
        }
    };
    Ok(HammersteinFit {
        blocks,
        fit_nmse_db: to_db(solution.residual_norm),
        selection_nmse_db: to_db(solution.subspace_residual_norm),
        condition: solution.condition,
    })
}

/// Builds the skip-trimmed Hammerstein regression problem.
fn hammerstein_problem(
    u: &Signal,
    w: &Signal,
    taps: usize,
    max_order: usize,
    skip: usize,
) -> Result<(lsq::RegressionProblem, f64)> {
    if u.len() != w.len() {
        return Err(Error::invalid("w", "input and output must have equal length"));
    }
    if skip >= u.len() {
        return Err(Error::invalid("skip", "cannot skip the whole record"));
    }
    let design_full = lsq::hammerstein_design(u, taps, max_order)?;
    let rows = design_full.nrows() - skip;
    let design = design_full.rows(skip, rows).into_owned();
    let target = DVector::from_column_slice(&w.samples()[skip..]);
    let target_energy = target.norm_squared();
    Ok((lsq::RegressionProblem::new(design, target)?, target_energy))
}

/// Selection metric only: NMSE (dB) of the untruncated least-squares fit.
fn hammerstein_selection_nmse_db(
    u: &Signal,
    w: &Signal,
    taps: usize,
    max_order: usize,
    skip: usize,
) -> Result<f64> {
    let (problem, target_energy) = hammerstein_problem(u, w, taps, max_order, skip)?;
    let probe = lsq::solve_with(
        &problem,
        &lsq::SolveOptions {
            truncate: Some(f64::EPSILON),
            ..Default::default()
        },
    )?;
    if target_energy > 0.0 {
        Ok(10.0 * (probe.subspace_residual_norm.powi(2) / target_energy).log10())
    } else {
        Ok(f64::NEG_INFINITY)
    }
}

/// Result of step 2.
#[derive(Debug, Clone)]
pub struct Step2Result {
    /// Direct (unimproved) estimate of `γ(1)·g` from the regression.
    pub g1_raw: FirFilter,
    /// Estimate of `γ(3)·g`.
    pub g3_hat: FirFilter,
    /// Selected delay correction in samples.
    pub delay: f64,
    /// Best candidate input `u = fractional_delay(x₂, delay)`.
    pub u_hat: Signal,
    pub fit_nmse_db: f64,
    pub condition: f64,
}

/// Step 2: estimate the Hammerstein model from the band-limited pilot.
///
/// For each delay candidate `τ_f` on a grid over `[τ_r/4, 3·τ_r/4]`
/// (refined by a golden-section pass) the candidate input
/// `fractional_delay(x₂, τ_f)` is regressed against `w₂`; the candidate
/// with the smallest fit NMSE wins. `x₂` must be periodic over its record
/// (harmonics on DFT bins) for the circular delay to represent the filter
/// delay exactly.
pub fn step2_estimate_hammerstein(
    x2: &Signal,
    w2: &Signal,
    r_hat: &FirFilter,
    taps: usize,
    max_order: usize,
    skip: usize,
) -> Result<Step2Result> {
    if max_order != 3 {
        return Err(Error::invalid(
            "max_order",
            "the three-step estimator uses a third-order Hammerstein model",
        ));
    }
    if x2.len() != w2.len() {
        return Err(Error::invalid("w2", "pilot and received record must have equal length"));
    }
    check_in_band(x2, r_hat)?;

    let tau_r = r_hat.group_delay()?;
    let lo = tau_r / 4.0;
    let hi = 3.0 * tau_r / 4.0;

    let probe = |tau: f64| -> Result<(f64, f64)> {
        let u = fractional_delay(x2, tau);
        let sel = hammerstein_selection_nmse_db(&u, w2, taps, max_order, skip)?;
        Ok((tau, sel))
    };

    // Candidate set: the grid, a golden-section refinement around the best
    // grid point, and every half-integer in the bracket (half-integer
    // delays are exactly absorbable by shifting the Hammerstein blocks, so
    // they are the natural representatives of the shift-ambiguity basins).
    let mut evaluated: Vec<(f64, f64)> = Vec::new();
    let steps = if hi > lo { DELAY_GRID } else { 1 };
    for i in 0..steps {
        let tau = if steps == 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (steps - 1) as f64
        };
        evaluated.push(probe(tau)?);
    }
    let mut best_idx = 0;
    for (i, e) in evaluated.iter().enumerate() {
        if e.1 < evaluated[best_idx].1 {
            best_idx = i;
        }
    }

    if steps > 1 {
        let spacing = (hi - lo) / (steps - 1) as f64;
        let best_tau = evaluated[best_idx].0;
        let mut a = (best_tau - spacing).max(lo);
        let mut b = (best_tau + spacing).min(hi);
        const INV_PHI: f64 = 0.618_033_988_749_894_9;
        let mut c = b - (b - a) * INV_PHI;
        let mut d = a + (b - a) * INV_PHI;
        let mut fc = probe(c)?;
        let mut fd = probe(d)?;
        for _ in 0..DELAY_REFINE_ITERS {
            if fc.1 < fd.1 {
                b = d;
                d = c;
                evaluated.push(fc);
                fd = fc;
                c = b - (b - a) * INV_PHI;
                fc = probe(c)?;
            } else {
                a = c;
                c = d;
                evaluated.push(fd);
                fc = fd;
                d = a + (b - a) * INV_PHI;
                fd = probe(d)?;
            }
        }
        evaluated.push(fc);
        evaluated.push(fd);

        // Half-integer representatives.
        let mut half = (lo * 2.0).ceil() / 2.0;
        while half <= hi {
            evaluated.push(probe(half)?);
            half += 0.5;
        }
    }

    // Among statistical ties, prefer the candidate closest to the bracket
    // center τ_r/2: the bracket embodies the prior that h and g contribute
    // comparable group delays, and shift-ambiguous basins are otherwise
    // indistinguishable at the noise floor.
    let best_sel = evaluated.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
    let center = tau_r / 2.0;
    let mut choice = evaluated[0];
    let mut choice_key = (f64::INFINITY, f64::INFINITY);
    for e in &evaluated {
        if e.1 <= best_sel + DELAY_TIE_DB {
            let key = ((e.0 - center).abs(), e.0);
            if key < choice_key {
                choice_key = key;
                choice = *e;
            }
        }
    }
    let best_tau = choice.0;
    let best_u = fractional_delay(x2, best_tau);
    let best_fit = estimate_hammerstein_known_u(&best_u, w2, taps, max_order, skip)?;

    let mut blocks = best_fit.blocks.into_iter();
    let g1_raw = blocks.next().expect("order-1 block");
    let g3_hat = blocks.next().expect("order-3 block");
    Ok(Step2Result {
        g1_raw,
        g3_hat,
        delay: best_tau,
        u_hat: best_u,
        fit_nmse_db: best_fit.fit_nmse_db,
        condition: best_fit.condition,
    })
}

/// Errors when the pilot has (essentially) no energy in the passband of `r̂`.
fn check_in_band(x2: &Signal, r_hat: &FirFilter) -> Result<()> {
    let points = 512;
    let response = r_hat.magnitude_response(points);
    let peak = response.iter().fold(0.0f64, |m, &v| m.max(v));
    if peak == 0.0 {
        return Err(Error::EmptyBand("r̂ has an all-zero frequency response".into()));
    }
    let threshold = peak * 10f64.powf(-3.0 / 20.0);
    let spectrum = spectrum_power(x2, points);
    let total: f64 = spectrum.iter().sum();
    if total == 0.0 {
        return Err(Error::EmptyBand("x₂ carries no energy".into()));
    }
    let in_band: f64 = spectrum
        .iter()
        .zip(&response)
        .filter(|(_, r)| **r >= threshold)
        .map(|(s, _)| s)
        .sum();
    if in_band / total < MIN_IN_BAND_FRACTION {
        return Err(Error::EmptyBand(format!(
            "only {:.1}% of the x₂ energy lies in the passband of r̂",
            100.0 * in_band / total
        )));
    }
    Ok(())
}

/// Power of `x` accumulated onto `points` frequency cells spanning `[0, 1/2)`.
fn spectrum_power(x: &Signal, points: usize) -> Vec<f64> {
    use rustfft::{num_complex::Complex, FftPlanner};
    let n = x.len();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> = x.samples().iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.process(&mut buf);
    let mut out = vec![0.0; points];
    for (k, b) in buf.iter().enumerate().take(n / 2 + 1) {
        let f = k as f64 / n as f64;
        let cell = ((f / 0.5) * points as f64) as usize;
        out[cell.min(points - 1)] += b.norm_sqr();
    }
    out
}

/// Result of the `ĝ₁` improvement.
#[derive(Debug, Clone)]
pub struct G1Improvement {
    /// Estimated ratio `γ(1)/γ(3)`.
    pub gamma1_prime: f64,
    /// Improved estimate `ĝ₁ = γ̂′₁ · ĝ₃`.
    pub g1_hat: FirFilter,
}

/// Replaces the weak direct `ĝ₁` estimate by `γ̂′₁·ĝ₃`.
///
/// With `w' = r̂*w`, `y'₁ = r̂*ĝ₃*u`, `y'₃ = r̂*ĝ₃*u³` the ratio is the
/// scalar projection `γ̂′₁ = ⟨y'₁, w' − y'₃⟩ / ‖y'₁‖²`, evaluated after
/// dropping the first `skip` warm-up samples.
pub fn improve_g1(
    r_hat: &FirFilter,
    g3_hat: &FirFilter,
    u: &Signal,
    w: &Signal,
    skip: usize,
) -> Result<G1Improvement> {
    if u.len() != w.len() {
        return Err(Error::invalid("w", "u and w must have equal length"));
    }
    if skip >= u.len() {
        return Err(Error::invalid("skip", "cannot skip the whole record"));
    }
    let w_f = r_hat.filter(w);
    let y1 = r_hat.filter(&g3_hat.filter(u));
    let y3 = r_hat.filter(&g3_hat.filter(&u.powi(3)));

    let y1s = &y1.samples()[skip..];
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&y1v, &wv), &y3v) in y1s
        .iter()
        .zip(&w_f.samples()[skip..])
        .zip(&y3.samples()[skip..])
    {
        num += y1v * (wv - y3v);
        den += y1v * y1v;
    }
    if den == 0.0 {
        return Err(Error::DegenerateProjection("‖r̂*ĝ₃*u‖ is zero"));
    }
    let gamma1_prime = num / den;
    Ok(G1Improvement {
        gamma1_prime,
        g1_hat: g3_hat.scaled(gamma1_prime),
    })
}

/// Result of step 3.
#[derive(Debug, Clone)]
pub struct Step3Result {
    /// Scale estimate; `ĝ = α̂·ĝ₁`.
    pub alpha: f64,
    pub g_hat: FirFilter,
    pub h_hat: FirFilter,
    pub condition: f64,
}

/// Step 3: recover the scale `α̂` from the third pilot and deconvolve
/// `r̂ = Ĝ·ĥ` for `ĥ`.
///
/// `x₃` must carry the spectrum of `x₂` at the (low) peak amplitude of
/// `x₁`; `delay` is the step-2 delay correction, reused here since `x₃`
/// shares the band of `x₂`.
pub fn step3_estimate_h(
    r_hat: &FirFilter,
    g1_hat: &FirFilter,
    x3: &Signal,
    w3: &Signal,
    h_taps: usize,
    delay: f64,
    skip: usize,
) -> Result<Step3Result> {
    if x3.len() != w3.len() {
        return Err(Error::invalid("w3", "pilot and received record must have equal length"));
    }
    if skip >= x3.len() {
        return Err(Error::invalid("skip", "cannot skip the whole record"));
    }
    if r_hat.len() != h_taps + g1_hat.len() - 1 {
        return Err(Error::invalid(
            "h_taps",
            format!(
                "r̂ has {} taps but L₁ + L₂ − 1 = {}",
                r_hat.len(),
                h_taps + g1_hat.len() - 1
            ),
        ));
    }

    // α̂ from the linear-regime projection ⟨ĝ₁*u, w₃⟩ / ‖ĝ₁*u‖².
    let u3 = fractional_delay(x3, delay);
    let y = g1_hat.filter(&u3);
    let ys = &y.samples()[skip..];
    let mut num = 0.0;
    let mut den = 0.0;
    for (&yv, &wv) in ys.iter().zip(&w3.samples()[skip..]) {
        num += yv * wv;
        den += yv * yv;
    }
    if den == 0.0 {
        return Err(Error::DegenerateProjection("‖ĝ₁*u₃‖ is zero"));
    }
    let alpha = num / den;
    let g_hat = g1_hat.scaled(alpha);

    // Toeplitz deconvolution: r̂ = Ĝ·ĥ, Ĝ of size (L₁+L₂−1) × L₁.
    let toeplitz = convolution_matrix(&g_hat, h_taps);
    let problem = lsq::RegressionProblem::new(toeplitz, DVector::from_column_slice(r_hat.taps()))?;
    let solution = lsq::solve(&problem)?;
    let h_hat = FirFilter::new(solution.coefficients.iter().copied().collect())?;
    Ok(Step3Result {
        alpha,
        g_hat,
        h_hat,
        condition: solution.condition,
    })
}

/// Convolution (Toeplitz) matrix of `g`: column `j` holds `g` shifted down
/// by `j` rows; `(L₁+L₂−1) × L₁`.
pub fn convolution_matrix(g: &FirFilter, h_taps: usize) -> DMatrix<f64> {
    let rows = h_taps + g.len() - 1;
    DMatrix::from_fn(rows, h_taps, |i, j| {
        if i >= j && i - j < g.len() {
            g.taps()[i - j]
        } else {
            0.0
        }
    })
}

/// One diagnostics row, mirroring the `diagnostics.csv` schema
/// `(step, metric, value_db)`. Values that are not decibel quantities
/// (delay, scale factors) keep their natural unit.
#[derive(Debug, Clone)]
pub struct DiagnosticRow {
    pub step: &'static str,
    pub metric: String,
    pub value_db: f64,
}

/// Phase selection for the x₁ multisine.
#[derive(Debug, Clone, PartialEq)]
pub enum PhaseMode {
    Schroeder,
    /// Min-max PAR search seeded with Schroeder phases.
    MinMax { min_harmonics: usize, budget: usize },
    Explicit(Vec<f64>),
}

/// Full description of the three pilots and the estimation dimensions.
#[derive(Debug, Clone)]
pub struct PilotPlan {
    /// Assumed length of `h`.
    pub l1: usize,
    /// Assumed length of `g`.
    pub l2: usize,
    /// Hammerstein polynomial order (currently 3).
    pub poly_order: usize,
    /// Length of x₁.
    pub n1: usize,
    /// Harmonics of x₁.
    pub m1: usize,
    /// Fundamental of x₁ (normalized frequency).
    pub f1: f64,
    pub phase_mode: PhaseMode,
    /// Input back-off in dB (margin between peak |u|² and `P^{in,sat}`).
    pub ibo_db: f64,
    /// Amplifier input amplitude at which saturation is reached.
    pub sat_input_amplitude: f64,
    /// Length of x₂.
    pub n2: usize,
    /// Harmonics of x₂.
    pub m2: usize,
    /// Length of x₃ (`None` = 50 × the one-coefficient budget `n1/L`,
    /// rounded up to whole x₂ periods).
    pub n3: Option<usize>,
    /// Band edge threshold for the non-attenuated band of r̂, in dB below peak.
    pub passband_threshold_db: f64,
    /// When set, the noise variance of every transmission is adjusted so the
    /// SNR (noiseless output power over σ_e²) equals this value; when
    /// `None` the model's own noise variance applies.
    pub snr_db: Option<f64>,
    /// Master seed; per-pilot noise seeds derive from it.
    pub seed: u64,
}

impl PilotPlan {
    /// The plan used throughout the reference experiments: N = 8000 pilots,
    /// 100 harmonics, 5 dB IBO, saturation amplitude 16, L₁ = L₂ = 20.
    ///
    /// x₁ spans the whole band (harmonics up to ≈ 0.495·f_s): the plain
    /// Q-value of r̂ needs excitation everywhere, including the stopband
    /// of r.
    pub fn paper_default(seed: u64) -> Self {
        Self {
            l1: 20,
            l2: 20,
            poly_order: 3,
            n1: 8000,
            m1: 100,
            f1: 0.5 / 101.0,
            phase_mode: PhaseMode::Schroeder,
            ibo_db: 5.0,
            sat_input_amplitude: 16.0,
            n2: 8000,
            m2: 100,
            n3: None,
            passband_threshold_db: 3.0,
            snr_db: Some(20.0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l1 == 0 || self.l2 == 0 {
            return Err(Error::invalid("l1", "filter lengths must be ≥ 1"));
        }
        if self.poly_order != 3 {
            return Err(Error::invalid("poly_order", "only order 3 is supported"));
        }
        if self.ibo_db < 0.0 {
            return Err(Error::invalid("ibo_db", "IBO must be ≥ 0 dB"));
        }
        if !(self.sat_input_amplitude.is_finite() && self.sat_input_amplitude > 0.0) {
            return Err(Error::invalid("sat_input_amplitude", "must be positive"));
        }
        // Validates m1/f1/n1 jointly (Nyquist bound included).
        MultisineSpec::new(self.m1, self.f1, schroeder_phases(self.m1), self.n1)?;
        if self.n2 < self.l1 + self.l2 {
            return Err(Error::invalid("n2", "record too short for the filter lengths"));
        }
        if self.m2 == 0 {
            return Err(Error::invalid("m2", "must be ≥ 1"));
        }
        Ok(())
    }

    /// Taps of the composite filter `r`.
    pub fn r_taps(&self) -> usize {
        self.l1 + self.l2 - 1
    }

    fn skip_rows(&self) -> usize {
        self.l1 + self.l2
    }

    fn x1_phases(&self) -> Result<Vec<f64>> {
        match &self.phase_mode {
            PhaseMode::Schroeder => Ok(schroeder_phases(self.m1)),
            PhaseMode::MinMax { min_harmonics, budget } => {
                let search = crate::signals::MinMaxSearch {
                    num_harmonics: self.m1,
                    min_harmonics: *min_harmonics,
                    fundamental: self.f1,
                    length: self.n1.min((1.0 / self.f1).round() as usize * 2),
                    budget: *budget,
                    seed: self.seed,
                };
                Ok(crate::signals::minmax_phase_search(&search)?.phases)
            }
            PhaseMode::Explicit(phases) => {
                if phases.len() != self.m1 {
                    return Err(Error::invalid("phase_mode", "explicit phase count must equal m1"));
                }
                Ok(phases.clone())
            }
        }
    }

    /// The x₁ pilot at the power prescribed by the back-off rule
    /// `σ²_{x₁} = P^{in,sat} / (IBO · PAR(x₁))`.
    pub fn design_x1(&self) -> Result<Signal> {
        let spec = MultisineSpec::new(self.m1, self.f1, self.x1_phases()?, self.n1)?;
        let x = multisine(&spec);
        let par = crate::signals::par(&x)?;
        let ibo = 10f64.powf(self.ibo_db / 10.0);
        let sat_power = self.sat_input_amplitude * self.sat_input_amplitude;
        Ok(x.scaled_to_power(sat_power / (ibo * par)))
    }
}

/// The estimator's output: every element of the W-H model plus diagnostics.
///
/// The scale split between `ĥ` and `ĝ` is inherently ambiguous; the
/// convention here makes `ĝ∗u` match the channel output in the linear
/// regime (so `ĝ ≈ G·g` when `h` has unit in-band gain), which in the
/// reference setup (G = 1) reduces to `ĝ ≈ g` and `ĥ ≈ h`.
#[derive(Debug, Clone)]
pub struct WhEstimate {
    pub r_hat: FirFilter,
    /// Improved `γ(1)·g` estimate (`γ̂′₁·ĝ₃`).
    pub g1_hat: FirFilter,
    /// Direct step-2 `γ(1)·g` estimate, kept for diagnostics.
    pub g1_raw: FirFilter,
    pub g3_hat: FirFilter,
    /// Estimated ratio `γ(1)/γ(3)`.
    pub gamma1_prime: f64,
    pub alpha: f64,
    pub g_hat: FirFilter,
    pub h_hat: FirFilter,
    /// Step-2 delay correction in samples.
    pub delay: f64,
    pub diagnostics: Vec<DiagnosticRow>,
}

impl WhEstimate {
    /// Nonlinear prediction `ŵ = ĝ₁*û + ĝ₃*û³`, `û = ĥ*x`.
    pub fn predict(&self, x: &Signal) -> Signal {
        let u = self.h_hat.filter(x);
        let lin = self.g1_hat.filter(&u);
        let cub = self.g3_hat.filter(&u.powi(3));
        Signal::raw(
            lin.samples()
                .iter()
                .zip(cub.samples())
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    /// Linear surrogate `ŵ = ĝ₁*ĥ*x` (nonlinearity ignored).
    pub fn predict_linear(&self, x: &Signal) -> Signal {
        self.g1_hat.filter(&self.h_hat.filter(x))
    }

    /// Recombined composite filter `r' = ĥ*ĝ`.
    pub fn r_recombined(&self) -> FirFilter {
        self.h_hat.cascade(&self.g_hat)
    }

    /// Estimated polynomial coefficients `(γ̂(1), γ̂(3))` consistent with
    /// the `(ĥ, ĝ)` split; non-finite when `α̂` or `γ̂′₁` degenerate.
    pub fn gamma(&self) -> (f64, f64) {
        (1.0 / self.alpha, 1.0 / (self.alpha * self.gamma1_prime))
    }

    /// Writes `r_hat.csv`, `g_hat.csv`, `h_hat.csv`, `gamma.csv`, and
    /// `diagnostics.csv` into `dir` (created if missing).
    pub fn save_dir(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.r_hat.to_csv_file(dir.join("r_hat.csv"))?;
        self.g_hat.to_csv_file(dir.join("g_hat.csv"))?;
        self.h_hat.to_csv_file(dir.join("h_hat.csv"))?;
        let (gamma1, gamma3) = self.gamma();
        let mut gamma = String::from("order,value\n");
        gamma.push_str(&format!("1,{gamma1:e}\n3,{gamma3:e}\n"));
        std::fs::write(dir.join("gamma.csv"), gamma)?;
        let mut diag = String::from("step,metric,value_db\n");
        for row in &self.diagnostics {
            diag.push_str(&format!(
                "{},{},{}\n",
                row.step,
                row.metric,
                metrics::clamp_db_for_csv(row.value_db)
            ));
        }
        std::fs::write(dir.join("diagnostics.csv"), diag)?;
        Ok(())
    }
}

/// The three pilot/receive records of a full identification pass.
#[derive(Debug, Clone)]
pub struct CapturedPilots {
    pub x1: Signal,
    pub w1: Signal,
    pub x2: Signal,
    pub w2: Signal,
    pub x3: Signal,
    pub w3: Signal,
}

/// Runs the full three-step pipeline against a channel model, synthesizing
/// the pilot transmissions internally with independent noise seeds.
pub fn run_full_pipeline(model: &WhModel, plan: &PilotPlan) -> Result<WhEstimate> {
    let pilots = synthesize_pilots(model, plan)?;
    let mut estimate = run_pipeline_captured(&pilots, plan)?;
    attach_truth_diagnostics(&mut estimate, model);
    Ok(estimate)
}

/// Runs the pipeline on captured pilot/receive records.
pub fn run_pipeline_captured(pilots: &CapturedPilots, plan: &PilotPlan) -> Result<WhEstimate> {
    plan.validate()?;
    let skip = plan.skip_rows();

    let s1 = step1_estimate_r(&pilots.x1, &pilots.w1, plan.r_taps()).map_err(|e| e.in_step("step1"))?;

    let s2 = step2_estimate_hammerstein(
        &pilots.x2,
        &pilots.w2,
        &s1.r_hat,
        plan.l2,
        plan.poly_order,
        skip,
    )
    .map_err(|e| e.in_step("step2"))?;

    // The scalar projections see r̂- and ĝ₃-filtered records; their skip
    // additionally covers those filters' memory of the candidate-u wrap
    // artifacts at the record head.
    let proj_skip = (skip + plan.r_taps() + plan.l2).min(pilots.w2.len().saturating_sub(1));
    let improvement = improve_g1(&s1.r_hat, &s2.g3_hat, &s2.u_hat, &pilots.w2, proj_skip)
        .map_err(|e| e.in_step("step2"))?;

    // The replacement ĝ₁ = γ̂′₁·ĝ₃ presumes a significant cubic response.
    // On a (quasi-)linear channel ĝ₃ is noise-shaped and the replacement is
    // meaningless; it only goes through when the identified cubic branch
    // carries real energy on the pilot.
    let cubic_ratio_db = cubic_branch_ratio_db(&s2.g3_hat, &s2.u_hat, &pilots.w2, skip);
    let use_improved = cubic_ratio_db > CUBIC_SIGNIFICANCE_DB;
    let g1_hat = if use_improved {
        improvement.g1_hat.clone()
    } else {
        s2.g1_raw.clone()
    };

    let s3 = step3_estimate_h(
        &s1.r_hat,
        &g1_hat,
        &pilots.x3,
        &pilots.w3,
        plan.l1,
        s2.delay,
        (skip + plan.l2).min(pilots.x3.len().saturating_sub(1)),
    )
    .map_err(|e| e.in_step("step3"))?;

    let mut diagnostics = vec![
        DiagnosticRow {
            step: "step1",
            metric: "fit_nmse_db".into(),
            value_db: s1.fit_nmse_db,
        },
        DiagnosticRow {
            step: "step1",
            metric: "snr_estimate_db".into(),
            value_db: s1.snr_estimate_db,
        },
        DiagnosticRow {
            step: "step1",
            metric: "output_power_db".into(),
            value_db: 10.0 * s1.output_power.log10(),
        },
        DiagnosticRow {
            step: "step2",
            metric: "delay_samples".into(),
            value_db: s2.delay,
        },
        DiagnosticRow {
            step: "step2",
            metric: "fit_nmse_db".into(),
            value_db: s2.fit_nmse_db,
        },
        DiagnosticRow {
            step: "step2",
            metric: "gamma1_prime".into(),
            value_db: improvement.gamma1_prime,
        },
        DiagnosticRow {
            step: "step2",
            metric: "g1_improvement_used".into(),
            value_db: if use_improved { 1.0 } else { 0.0 },
        },
        DiagnosticRow {
            step: "step3",
            metric: "alpha".into(),
            value_db: s3.alpha,
        },
    ];

    // Flat-passband precondition check: warn (as a diagnostic row) when the
    // measured ripple of r̂ over the x₂ band exceeds 1 dB.
    let ripple = passband_ripple_db(&s1.r_hat, &pilots.x2);
    diagnostics.push(DiagnosticRow {
        step: "step2",
        metric: "passband_ripple_db".into(),
        value_db: ripple,
    });

    Ok(WhEstimate {
        r_hat: s1.r_hat,
        g1_hat,
        g1_raw: s2.g1_raw,
        g3_hat: s2.g3_hat,
        gamma1_prime: improvement.gamma1_prime,
        alpha: s3.alpha,
        g_hat: s3.g_hat,
        h_hat: s3.h_hat,
        delay: s2.delay,
        diagnostics,
    })
}

/// Minimum energy of the identified cubic branch, relative to the received
/// record, for the ĝ₁ replacement to apply.
pub const CUBIC_SIGNIFICANCE_DB: f64 = -30.0;

/// Energy ratio `‖ĝ₃ ∗ u³‖² / ‖w‖²` on the pilot rows, in dB.
fn cubic_branch_ratio_db(g3: &FirFilter, u: &Signal, w: &Signal, skip: usize) -> f64 {
    let cub = g3.filter(&u.powi(3));
    let num: f64 = cub.samples()[skip..].iter().map(|v| v * v).sum();
    let den: f64 = w.samples()[skip..].iter().map(|v| v * v).sum();
    if den == 0.0 || num == 0.0 {
        return f64::NEG_INFINITY;
    }
    10.0 * (num / den).log10()
}

/// Ripple (max/min magnitude of `r̂`, dB) over the cells where `x₂` carries energy.
fn passband_ripple_db(r_hat: &FirFilter, x2: &Signal) -> f64 {
    let points = 512;
    let response = r_hat.magnitude_response(points);
    let spectrum = spectrum_power(x2, points);
    let peak_spec = spectrum.iter().fold(0.0f64, |m, &v| m.max(v));
    if peak_spec == 0.0 {
        return 0.0;
    }
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for (s, r) in spectrum.iter().zip(&response) {
        if *s >= 1e-6 * peak_spec {
            lo = lo.min(*r);
            hi = hi.max(*r);
        }
    }
    if lo <= 0.0 || !lo.is_finite() {
        return f64::INFINITY;
    }
    20.0 * (hi / lo).log10()
}

/// Synthesizes the three pilot transmissions through the model.
pub fn synthesize_pilots(model: &WhModel, plan: &PilotPlan) -> Result<CapturedPilots> {
    plan.validate()?;
    let pad = plan.l1.max(plan.l2);

    // x₁: wideband, backed-off.
    let x1 = plan.design_x1()?;
    let w1 = transmit(model, &x1, plan.snr_db, derive_seed(plan.seed, 1), 0);

    // Probe run of step 1 to locate the non-attenuated band of r̂ for x₂.
    // The probe reuses the x₁ record (that is exactly what a receiver has
    // at this point in the protocol).
    let probe = step1_estimate_r(&x1, &w1, plan.r_taps()).map_err(|e| e.in_step("step1"))?;
    let band = passband(&probe.r_hat, plan.passband_threshold_db);

    let spec2 = design_x2_multisine(band, plan.m2, plan.n2, X2_PHASE_SEED)?;
    let x2 = multisine(&spec2).scaled_to_peak(plan.sat_input_amplitude);
    let w2 = transmit(model, &x2, plan.snr_db, derive_seed(plan.seed, 2), pad);

    // x₃: the x₂ spectrum at the x₁ peak amplitude; length defaults to
    // 50 × the one-coefficient budget, rounded up to whole x₂ periods.
    let period = x2_period(&spec2, plan.n2);
    let n3_raw = plan
        .n3
        .unwrap_or_else(|| 50 * plan.n1.div_ceil(plan.r_taps()))
        .max(plan.skip_rows() + period);
    let n3 = n3_raw.div_ceil(period) * period;
    let spec3 = spec2.with_length(n3)?;
    let x3 = multisine(&spec3).scaled_to_peak(x1.peak());
    let w3 = transmit(model, &x3, plan.snr_db, derive_seed(plan.seed, 3), pad);

    Ok(CapturedPilots { x1, w1, x2, w2, x3, w3 })
}

/// Length of one period of the pilot in samples.
fn x2_period(spec: &MultisineSpec, n: usize) -> usize {
    // The fundamental is b/n by construction; the period is n/gcd(b, n).
    let b = (spec.fundamental() * n as f64).round() as usize;
    if b == 0 {
        return n;
    }
    n / gcd(b, n)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn derive_seed(master: u64, stream: u64) -> u64 {
    master
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9))
}

/// Transmits `x` through the channel with `pad` leading zeros; returns the
/// received record aligned to `x` (padding rows dropped). With `snr_db`
/// set, the noise variance is adjusted to the noiseless output power.
fn transmit(model: &WhModel, x: &Signal, snr_db: Option<f64>, seed: u64, pad: usize) -> Signal {
    let padded = if pad == 0 {
        x.clone()
    } else {
        let mut samples = vec![0.0; pad + x.len()];
        samples[pad..].copy_from_slice(x.samples());
        Signal::raw(samples)
    };
    let w_full = match snr_db {
        None => model.forward(&padded, seed).w,
        Some(snr) => {
            let v = model.forward_noiseless(&padded).w;
            let sigma2 = v.mean_power() / 10f64.powf(snr / 10.0);
            add_noise(&v, sigma2, seed)
        }
    };
    Signal::raw(w_full.samples()[pad..].to_vec())
}

/// Adds seeded white Gaussian noise of variance `sigma2`.
pub fn add_noise(v: &Signal, sigma2: f64, seed: u64) -> Signal {
    use rand::SeedableRng;
    use rand_distr::Distribution;
    if sigma2 <= 0.0 {
        return v.clone();
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::Normal::new(0.0, sigma2.sqrt()).expect("valid sigma");
    Signal::raw(
        v.samples()
            .iter()
            .map(|&s| s + normal.sample(&mut rng))
            .collect(),
    )
}

/// Longest contiguous run of frequencies where `|R̂|` stays within
/// `threshold_db` of its peak; returned as `(f_lo, f_hi)`.
pub fn passband(filter: &FirFilter, threshold_db: f64) -> (f64, f64) {
    let points = 2048;
    let response = filter.magnitude_response(points);
    let peak = response.iter().fold(0.0f64, |m, &v| m.max(v));
    let floor = peak * 10f64.powf(-threshold_db.abs() / 20.0);
    let df = 0.5 / points as f64;
    let mut best = (0usize, 0usize);
    let mut run_start = None;
    for (i, &v) in response.iter().enumerate() {
        if v >= floor {
            if run_start.is_none() {
                run_start = Some(i);
            }
        } else if let Some(s) = run_start.take() {
            if i - s > best.1 - best.0 {
                best = (s, i);
            }
        }
    }
    if let Some(s) = run_start {
        if points - s > best.1 - best.0 {
            best = (s, points);
        }
    }
    (best.0 as f64 * df, best.1 as f64 * df)
}

/// Designs the x₂ pilot for the measured non-attenuated band of `r̂`:
/// a baseband multisine whose top harmonic stays at [`X2_TOP_FRACTION`] of
/// the upper band edge, with PAR-minimized phases (seeded search over one
/// fundamental period).
pub fn design_x2_multisine(
    band: (f64, f64),
    m: usize,
    n: usize,
    seed: u64,
) -> Result<MultisineSpec> {
    let (_, f_hi) = band;
    let top = X2_TOP_FRACTION * f_hi;
    if !(top > 0.0) {
        return Err(Error::EmptyBand("r̂ has no measurable passband".into()));
    }
    // Fundamental on a DFT bin of the record, so the record holds whole
    // periods and circular delays are exact.
    let bin = ((top / m as f64) * n as f64).round().max(1.0) as usize;
    let fundamental = bin as f64 / n as f64;
    if m as f64 * fundamental >= 0.5 {
        return Err(Error::EmptyBand(format!(
            "cannot place {m} harmonics below the Nyquist frequency with top {top:.4}"
        )));
    }
    let period = n / gcd(bin, n);
    let phases = cached_x2_phases(m, bin, n, seed)?;
    let _ = period;
    MultisineSpec::new(m, fundamental, phases, n)
}

/// The PAR search result is a pure function of `(m, bin, n, seed)`; repeated
/// pipeline runs (Monte Carlo sweeps) reuse it.
fn cached_x2_phases(m: usize, bin: usize, n: usize, seed: u64) -> Result<Vec<f64>> {
    use std::collections::HashMap;
    use std::sync::{Mutex, OnceLock};
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize, usize, u64), Vec<f64>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(hit) = cache.lock().expect("phase cache").get(&(m, bin, n, seed)) {
        return Ok(hit.clone());
    }
    let period = n / gcd(bin, n);
    let search = crate::signals::MinMaxSearch {
        num_harmonics: m,
        min_harmonics: m,
        fundamental: bin as f64 / n as f64,
        length: period.min(n),
        budget: X2_PHASE_BUDGET,
        seed,
    };
    let phases = crate::signals::minmax_phase_search(&search)?.phases;
    cache
        .lock()
        .expect("phase cache")
        .insert((m, bin, n, seed), phases.clone());
    Ok(phases)
}

/// Chooses a multisine of `m` harmonics with DFT-bin-aligned fundamental
/// whose lines all fall inside `band`; errors if the band cannot host them.
pub fn design_band_multisine(band: (f64, f64), m: usize, n: usize) -> Result<MultisineSpec> {
    let (f_lo, f_hi) = band;
    if f_hi <= f_lo {
        return Err(Error::EmptyBand(format!("band [{f_lo:.4}, {f_hi:.4}] is empty")));
    }
    let width = f_hi - f_lo;
    let mut b = ((width / m as f64) * n as f64).floor() as usize;
    while b >= 1 {
        let f1 = b as f64 / n as f64;
        let k0 = ((f_lo / f1).ceil() as usize).max(1);
        let top = (k0 + m - 1) as f64 * f1;
        if top <= f_hi + 1e-12 && top < 0.5 {
            return MultisineSpec::band(m, k0, f1, schroeder_phases(m), n);
        }
        b -= 1;
    }
    Err(Error::EmptyBand(format!(
        "cannot place {m} harmonics in band [{f_lo:.4}, {f_hi:.4}] with an N = {n} record"
    )))
}

/// Adds Q/Q′ diagnostics computed against the ground-truth model.
fn attach_truth_diagnostics(estimate: &mut WhEstimate, model: &WhModel) {
    let r_true = model.composite_r();
    let gain = model.amplifier.small_signal_gain();
    if let Ok(q) = metrics::q_value(&r_true, &estimate.r_hat) {
        estimate.diagnostics.push(DiagnosticRow {
            step: "step1",
            metric: "q_r_db".into(),
            value_db: q,
        });
    }
    // The Hammerstein blocks estimate γ(k)·g. For the Rapp amplifier the
    // polynomial γ is not defined by the model, so only the composite
    // diagnostics are emitted in that case.
    if let crate::channel::Amplifier::Polynomial(poly) = &model.amplifier {
        let g1_true = model.g.scaled(poly.coeff(1));
        let g3_true = model.g.scaled(poly.coeff(3));
        for (name, truth, est) in [
            ("q_prime_g3_db", &g3_true, &estimate.g3_hat),
            ("q_prime_g1_raw_db", &g1_true, &estimate.g1_raw),
            ("q_prime_g1_db", &g1_true, &estimate.g1_hat),
        ] {
            if let Ok(q) = metrics::q_prime(truth, est, &model.g) {
                estimate.diagnostics.push(DiagnosticRow {
                    step: "step2",
                    metric: name.into(),
                    value_db: q,
                });
            }
        }
    }
    let g_scaled = model.g.scaled(gain);
    if let Ok(q) = metrics::q_prime(&g_scaled, &estimate.g_hat, &model.g) {
        estimate.diagnostics.push(DiagnosticRow {
            step: "step3",
            metric: "q_prime_g_db".into(),
            value_db: q,
        });
    }
    if let Ok(q) = metrics::q_prime(&model.h, &estimate.h_hat, &model.h) {
        estimate.diagnostics.push(DiagnosticRow {
            step: "step3",
            metric: "q_prime_h_db".into(),
            value_db: q,
        });
    }
    if let Ok(q) = metrics::q_value(&r_true, &estimate.r_recombined()) {
        estimate.diagnostics.push(DiagnosticRow {
            step: "step3",
            metric: "q_r_recombined_db".into(),
            value_db: q,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{paper_g, paper_h, Amplifier, PolynomialAmplifier};

    fn linear_paper_model(gain: f64) -> WhModel {
        WhModel::new(
            paper_h(),
            Amplifier::Polynomial(PolynomialAmplifier::linear(gain)),
            paper_g(),
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn step1_exact_on_linear_channel() {
        let model = linear_paper_model(1.7);
        let plan = PilotPlan::paper_default(5);
        let x1 = plan.design_x1().unwrap();
        let w1 = model.forward_noiseless(&x1).w;
        let s1 = step1_estimate_r(&x1, &w1, 39).unwrap();
        let r_true = model.composite_r();
        let scale = r_true.taps().iter().fold(0.0f64, |m, t| m.max(t.abs()));
        for (a, b) in s1.r_hat.taps().iter().zip(r_true.taps()) {
            assert!((a - b).abs() <= 1e-8 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn known_u_hammerstein_fit_is_exact_noiseless() {
        let g = FirFilter::new(vec![0.9, -0.4, 0.15, 0.05]).unwrap();
        let amp = PolynomialAmplifier::cubic(1.0, -0.02);
        let model = WhModel::new(
            FirFilter::identity(),
            Amplifier::Polynomial(amp.clone()),
            g.clone(),
            0.0,
        )
        .unwrap();
        let spec = MultisineSpec::schroeder(20, 1.0 / 128.0, 1024).unwrap();
        let u = multisine(&spec).scaled(2.0);
        let w = model.forward_noiseless(&u).w;
        let fit = estimate_hammerstein_known_u(&u, &w, 4, 3, 8).unwrap();
        for (a, b) in fit.blocks[0].taps().iter().zip(g.taps()) {
            assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
        }
        for (a, b) in fit.blocks[1].taps().iter().zip(g.scaled(-0.02).taps()) {
            assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn step2_degenerate_known_u_single_tap_g() {
        // h = [1] and a single-tap g make τ_r = 0, so the candidate search
        // collapses onto τ = 0 and the fit is exact.
        let amp = PolynomialAmplifier::cubic(1.3, -0.05);
        let g = FirFilter::new(vec![0.8]).unwrap();
        let model = WhModel::new(
            FirFilter::identity(),
            Amplifier::Polynomial(amp),
            g,
            0.0,
        )
        .unwrap();
        let spec = MultisineSpec::schroeder(10, 1.0 / 64.0, 512).unwrap();
        let x2 = multisine(&spec);
        let w2 = model.forward_noiseless(&x2).w;
        let r_hat = model.composite_r();
        let s2 = step2_estimate_hammerstein(&x2, &w2, &r_hat, 1, 3, 4).unwrap();
        assert!(s2.delay.abs() <= 1e-9);
        assert!((s2.g1_raw.taps()[0] - 1.3 * 0.8).abs() <= 1e-8);
        assert!((s2.g3_hat.taps()[0] + 0.05 * 0.8).abs() <= 1e-8);
    }

    #[test]
    fn step2_rejects_out_of_band_pilot() {
        // r̂ is a strong lowpass; the pilot lives at high frequencies.
        let r_hat = FirFilter::new(vec![1.0 / 16.0; 16]).unwrap();
        let spec = MultisineSpec::band(8, 40, 1.0 / 100.0, vec![0.0; 8], 400).unwrap();
        let x2 = multisine(&spec);
        let w2 = x2.clone();
        let err = step2_estimate_hammerstein(&x2, &w2, &r_hat, 4, 3, 8);
        assert!(matches!(err, Err(Error::EmptyBand(_))), "{err:?}");
    }

    #[test]
    fn improve_g1_exact_ratio_noiseless() {
        let g = paper_g();
        let (gamma1, gamma3) = (0.97, -0.031);
        let amp = PolynomialAmplifier::cubic(gamma1, gamma3);
        let model = WhModel::new(
            FirFilter::identity(),
            Amplifier::Polynomial(amp),
            g.clone(),
            0.0,
        )
        .unwrap();
        let spec = MultisineSpec::schroeder(50, 1.0 / 512.0, 2048).unwrap();
        let u = multisine(&spec).scaled(3.0);
        let w = model.forward_noiseless(&u).w;
        let g3_exact = g.scaled(gamma3);
        let r_hat = g.cascade(&paper_h());
        let imp = improve_g1(&r_hat, &g3_exact, &u, &w, 0).unwrap();
        let expect = gamma1 / gamma3;
        assert!(
            (imp.gamma1_prime - expect).abs() <= 1e-8 * expect.abs(),
            "{} vs {expect}",
            imp.gamma1_prime
        );
    }

    #[test]
    fn improve_g1_pure_cubic_gives_zero() {
        let g = FirFilter::new(vec![1.0, 0.4]).unwrap();
        let amp = PolynomialAmplifier::cubic(0.0, 0.5);
        let model = WhModel::new(
            FirFilter::identity(),
            Amplifier::Polynomial(amp),
            g.clone(),
            0.0,
        )
        .unwrap();
        let spec = MultisineSpec::schroeder(6, 1.0 / 64.0, 256).unwrap();
        let u = multisine(&spec);
        let w = model.forward_noiseless(&u).w;
        let g3_exact = g.scaled(0.5);
        let imp = improve_g1(&FirFilter::identity(), &g3_exact, &u, &w, 0).unwrap();
        assert!(imp.gamma1_prime.abs() <= 1e-10, "{}", imp.gamma1_prime);
    }

    #[test]
    fn step3_exact_deconvolution() {
        let h = paper_h();
        let g = paper_g();
        let r = g.cascade(&h);
        // ĝ₁ = g exactly; x₃ in-band at low amplitude; channel is linear.
        let model = linear_paper_model(1.0);
        let spec = MultisineSpec::schroeder(60, 18.0 / 8000.0, 8000).unwrap();
        let x3 = multisine(&spec).scaled_to_peak(2.9);
        let pad = 20;
        let mut xs = vec![0.0; pad + x3.len()];
        xs[pad..].copy_from_slice(x3.samples());
        let w3_full = model.forward_noiseless(&Signal::new(xs).unwrap()).w;
        let w3 = Signal::raw(w3_full.samples()[pad..].to_vec());
        let tau = h.group_delay().unwrap();
        let s3 = step3_estimate_h(&r, &g, &x3, &w3, 20, tau, 40).unwrap();
        // α̂ is biased only by the residual u ≈ delayed-x₃ mismatch.
        assert!((s3.alpha - 1.0).abs() <= 1e-2, "alpha = {}", s3.alpha);
        // The deconvolution itself is exact: rescaling by α̂ recovers h.
        let q = metrics::q_value(&h, &s3.h_hat.scaled(s3.alpha)).unwrap();
        assert!(q >= 100.0, "q = {q}");
    }

    #[test]
    fn step3_deconvolution_is_exact_with_exact_scale() {
        // Direct check of the Toeplitz solve: r = g*h, Ĝ from exact g.
        let h = paper_h();
        let g = paper_g();
        let r = g.cascade(&h);
        let toeplitz = convolution_matrix(&g, 20);
        let problem =
            lsq::RegressionProblem::new(toeplitz, DVector::from_column_slice(r.taps())).unwrap();
        let sol = lsq::solve(&problem).unwrap();
        for (a, b) in sol.coefficients.iter().zip(h.taps()) {
            assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
        }
    }

    /// A flat-in-band first filter (pure delay), for which the
    /// flat-passband assumption of step 2 holds exactly.
    fn pure_delay_h(delay: usize, gain: f64) -> FirFilter {
        let mut taps = vec![0.0; delay + 1];
        taps[delay] = gain;
        FirFilter::new(taps).unwrap()
    }

    #[test]
    fn pipeline_linear_noiseless_reconstruction() {
        let model = WhModel::new(
            pure_delay_h(9, 1.0),
            Amplifier::Polynomial(PolynomialAmplifier::linear(1.0)),
            paper_g(),
            0.0,
        )
        .unwrap();
        let mut plan = PilotPlan::paper_default(11);
        plan.l1 = 10;
        plan.snr_db = None; // noiseless
        let estimate = run_full_pipeline(&model, &plan).unwrap();

        let spec = MultisineSpec::schroeder(90, 1.0 / 256.0, 4096).unwrap();
        let x = multisine(&spec).scaled(0.2);
        let w_true = model.forward_noiseless(&x).w;
        let w_hat = estimate.predict(&x);
        let nmse = metrics::nmse_db(&w_true, &w_hat).unwrap();
        assert!(nmse <= -80.0, "nmse = {nmse}");
    }

    #[test]
    fn pipeline_polynomial_noiseless_end_to_end() {
        // With an exactly flat |H| the identification is exact up to the
        // scale split; the predicted output matches to solver precision.
        // The true h is declared with a few extra taps: the fit can place
        // the Hammerstein delay a sample or two off (an exact model
        // ambiguity), which shifts ĥ correspondingly and needs headroom.
        // A deep x₁ back-off keeps the step-1 regression out of the cubic
        // region; x₂ still drives to saturation.
        let mut h_taps = vec![0.0; 14];
        h_taps[9] = 0.9;
        let h = FirFilter::new(h_taps).unwrap();
        let amp = PolynomialAmplifier::cubic(1.0, -1.5e-3);
        let model = WhModel::new(h, Amplifier::Polynomial(amp), paper_g(), 0.0).unwrap();
        let mut plan = PilotPlan::paper_default(13);
        plan.l1 = 14;
        plan.ibo_db = 60.0;
        plan.snr_db = None;
        let estimate = run_full_pipeline(&model, &plan).unwrap();

        let spec = MultisineSpec::schroeder(60, 1.0 / 512.0, 4096).unwrap();
        let x = multisine(&spec).scaled_to_peak(10.0);
        let w_true = model.forward_noiseless(&x).w;
        let w_hat = estimate.predict(&x);
        let nmse = metrics::nmse_db(&w_true, &w_hat).unwrap();
        assert!(nmse <= -100.0, "nmse = {nmse}");
    }

    #[test]
    fn pipeline_paper_channel_noiseless_floor() {
        // The appendix h is only approximately flat over the pilot band, so
        // a noiseless run floors at the flat-passband approximation error
        // rather than solver precision.
        let amp = PolynomialAmplifier::cubic(1.0, -1.5e-3);
        let model = WhModel::new(paper_h(), Amplifier::Polynomial(amp), paper_g(), 0.0).unwrap();
        let mut plan = PilotPlan::paper_default(13);
        plan.snr_db = None;
        let estimate = run_full_pipeline(&model, &plan).unwrap();

        let spec = MultisineSpec::schroeder(60, 1.0 / 512.0, 4096).unwrap();
        let x = multisine(&spec).scaled_to_peak(10.0);
        let w_true = model.forward_noiseless(&x).w;
        let w_hat = estimate.predict(&x);
        let nmse = metrics::nmse_db(&w_true, &w_hat).unwrap();
        assert!(nmse <= -35.0, "nmse = {nmse}");
    }

    #[test]
    fn estimate_scale_consistency() {
        let amp = PolynomialAmplifier::cubic(1.0, -1.5e-3);
        let model = WhModel::new(paper_h(), Amplifier::Polynomial(amp), paper_g(), 0.0).unwrap();
        let mut plan = PilotPlan::paper_default(17);
        plan.snr_db = None;
        let estimate = run_full_pipeline(&model, &plan).unwrap();

        let c = 2.0;
        let mut rescaled = estimate.clone();
        rescaled.h_hat = estimate.h_hat.scaled(1.0 / c);

        let spec = MultisineSpec::schroeder(30, 1.0 / 256.0, 1024).unwrap();
        let x = multisine(&spec).scaled(0.05);
        let base = estimate.predict(&x);
        let moved = rescaled.predict(&x.scaled(c));
        for (a, b) in base.samples().iter().zip(moved.samples()) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1e-9), "{a} vs {b}");
        }
    }

    #[test]
    fn delay_search_objective_minimized_at_group_delay() {
        // Synthetic linear-phase lowpass h (windowed sinc). The cutoff is
        // well above the pilot band, so the flat-passband assumption holds.
        // Small delay offsets are partially absorbed by shifting the
        // Hammerstein blocks, so identifiability is at grid resolution: the
        // grid argmin must land within one grid point of the true delay.
        let l1 = 41;
        let cutoff = 0.35;
        let h_taps: Vec<f64> = (0..l1)
            .map(|i| {
                let t = i as f64 - (l1 as f64 - 1.0) / 2.0;
                let sinc = if t == 0.0 {
                    2.0 * cutoff
                } else {
                    (2.0 * std::f64::consts::PI * cutoff * t).sin() / (std::f64::consts::PI * t)
                };
                let hamming = 0.54
                    - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (l1 as f64 - 1.0)).cos();
                sinc * hamming
            })
            .collect();
        let h = FirFilter::new(h_taps).unwrap();
        let g = paper_g();
        let amp = PolynomialAmplifier::cubic(1.0, -0.004);
        let model = WhModel::new(h.clone(), Amplifier::Polynomial(amp), g.clone(), 0.0).unwrap();

        // Pilot safely inside the flat region of h (top harmonic at 0.12).
        let n = 8000;
        let spec = MultisineSpec::schroeder(100, 10.0 / n as f64, n).unwrap();
        let x2 = multisine(&spec).scaled_to_peak(16.0);
        let pad = l1.max(20);
        let mut xs = vec![0.0; pad + n];
        xs[pad..].copy_from_slice(x2.samples());
        let w2_full = model.forward_noiseless(&Signal::new(xs).unwrap()).w;
        let w2 = Signal::raw(w2_full.samples()[pad..].to_vec());

        let tau_h = h.group_delay().unwrap();
        let tau_r = model.composite_r().group_delay().unwrap();
        let (lo, hi) = (tau_r / 4.0, 3.0 * tau_r / 4.0);
        assert!(lo < tau_h && tau_h < hi, "bracket must contain τ_h");
        let grid = 17;
        let spacing = (hi - lo) / (grid - 1) as f64;
        let skip = l1 + 20;
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..grid {
            let tau = lo + spacing * i as f64;
            let u = fractional_delay(&x2, tau);
            let fit = estimate_hammerstein_known_u(&u, &w2, 20, 3, skip).unwrap();
            if fit.selection_nmse_db < best.0 {
                best = (fit.selection_nmse_db, tau);
            }
        }
        assert!(
            (best.1 - tau_h).abs() <= 1.5 * spacing,
            "grid argmin {} vs true {tau_h} (spacing {spacing:.3})",
            best.1
        );

        // The full search lands in the same shallow basin.
        let s2 = step2_estimate_hammerstein(&x2, &w2, &model.composite_r(), 20, 3, skip).unwrap();
        assert!(
            (s2.delay - tau_h).abs() <= 2.5,
            "delay {} vs true {tau_h}",
            s2.delay
        );
    }

    #[test]
    fn pipeline_step_attribution_on_failure() {
        // A dead (all-zero) x₁ capture makes the step-1 design singular.
        let plan = PilotPlan::paper_default(1);
        let n = plan.n1;
        let pilots = CapturedPilots {
            x1: Signal::new(vec![0.0; n]).unwrap(),
            w1: Signal::new(vec![1.0; n]).unwrap(),
            x2: Signal::new(vec![1.0; plan.n2]).unwrap(),
            w2: Signal::new(vec![1.0; plan.n2]).unwrap(),
            x3: Signal::new(vec![1.0; 600]).unwrap(),
            w3: Signal::new(vec![1.0; 600]).unwrap(),
        };
        match run_pipeline_captured(&pilots, &plan) {
            Err(Error::Step { step: "step1", source }) => assert!(source.is_conditioning()),
            other => panic!("expected step1 attribution, got {other:?}"),
        }
    }

    #[test]
    fn estimate_save_dir_layout() {
        let amp = PolynomialAmplifier::cubic(1.0, -1.5e-3);
        let model = WhModel::new(paper_h(), Amplifier::Polynomial(amp), paper_g(), 0.0).unwrap();
        let mut plan = PilotPlan::paper_default(29);
        plan.snr_db = None;
        let estimate = run_full_pipeline(&model, &plan).unwrap();
        let dir = std::env::temp_dir().join(format!("whident-estimate-{}", std::process::id()));
        estimate.save_dir(&dir).unwrap();
        for file in ["r_hat.csv", "g_hat.csv", "h_hat.csv", "gamma.csv", "diagnostics.csv"] {
            assert!(dir.join(file).exists(), "{file} missing");
        }
        let diag = std::fs::read_to_string(dir.join("diagnostics.csv")).unwrap();
        assert!(diag.starts_with("step,metric,value_db\n"));
        let back = FirFilter::from_csv_file(dir.join("h_hat.csv")).unwrap();
        assert_eq!(back.taps(), estimate.h_hat.taps());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
