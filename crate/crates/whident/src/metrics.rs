//! Figures of merit and pilot budgets.
//!
//! The Q-value measures filter-estimate accuracy, `Q = ‖r‖²/‖r−r̂‖²`; its
//! primed variant weights both filters by a band-selection filter first.
//! For white-noise excitation the expected Q of a least-squares estimate is
//! `10·log10(N/L) + SNR` dB, which also predicts the output NMSE through the
//! near-unit-slope relation between the two. The SNR budgets and minimum
//! pilot lengths translate amplifier saturation, PAR, bandwidth ratios, and
//! back-off into the record length needed for a target NMSE.

use crate::channel::FirFilter;
use crate::error::{Error, Result};
use crate::signals::Signal;

/// Sentinel used in CSV output for non-finite dB values (`±∞` clamp).
pub const DB_SENTINEL: f64 = 400.0;

/// Clamps a dB value for CSV serialization: `−∞ → −400`, `+∞ → 400`,
/// `NaN → −400`.
pub fn clamp_db_for_csv(value_db: f64) -> f64 {
    if value_db.is_nan() {
        -DB_SENTINEL
    } else if value_db == f64::INFINITY {
        DB_SENTINEL
    } else if value_db == f64::NEG_INFINITY {
        -DB_SENTINEL
    } else {
        value_db.clamp(-DB_SENTINEL, DB_SENTINEL)
    }
}

/// Q-value in dB: `10·log10(‖true‖² / ‖true − est‖²)`.
///
/// Returns `+∞` for an exact estimate.
pub fn q_value(truth: &FirFilter, est: &FirFilter) -> Result<f64> {
    if truth.len() != est.len() {
        return Err(Error::invalid("est", "filters must have equal length"));
    }
    let num = truth.energy();
    if num == 0.0 {
        return Err(Error::UndefinedRatio("Q-value of an all-zero filter"));
    }
    let den: f64 = truth
        .taps()
        .iter()
        .zip(est.taps())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if den == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (num / den).log10())
}

/// Frequency-weighted Q-value: the Q-value of both filters convolved with
/// the band-selection filter `weighting`.
pub fn q_prime(truth: &FirFilter, est: &FirFilter, weighting: &FirFilter) -> Result<f64> {
    if truth.len() != est.len() {
        return Err(Error::invalid("est", "filters must have equal length"));
    }
    let truth_w = weighting.cascade(truth);
    let est_w = weighting.cascade(est);
    if truth_w.energy() == 0.0 {
        return Err(Error::UndefinedRatio("Q'-value with a weighting that annihilates the filter"));
    }
    q_value(&truth_w, &est_w)
}

/// Predicted expected Q-value `10·log10(N/L) + SNR` in dB.
pub fn predicted_q_db(record_len: usize, taps: usize, snr_db: f64) -> f64 {
    10.0 * (record_len as f64 / taps as f64).log10() + snr_db
}

/// Single-realization NMSE in dB: `10·log10(‖w − ŵ‖²/‖w‖²)`.
///
/// Returns `−∞` when the signals are identical; expectation over noise
/// realizations is the caller's responsibility.
pub fn nmse_db(w: &Signal, w_hat: &Signal) -> Result<f64> {
    if w.len() != w_hat.len() {
        return Err(Error::invalid("w_hat", "signals must have equal length"));
    }
    let num: f64 = w
        .samples()
        .iter()
        .zip(w_hat.samples())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let den: f64 = w.samples().iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(Error::UndefinedRatio("NMSE against a zero reference"));
    }
    if num == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(10.0 * (num / den).log10())
}

/// NMSE after filtering both signals by the band-selection filter.
pub fn nmse_prime_db(w: &Signal, w_hat: &Signal, weighting: &FirFilter) -> Result<f64> {
    if w.len() != w_hat.len() {
        return Err(Error::invalid("w_hat", "signals must have equal length"));
    }
    nmse_db(&weighting.filter(w), &weighting.filter(w_hat))
}

/// Inputs for the SNR budgets and minimum pilot lengths. All entries are
/// linear (not dB) and strictly positive.
#[derive(Debug, Clone)]
pub struct BudgetInputs {
    /// Target NMSE in dB (negative, e.g. −30).
    pub target_nmse_db: f64,
    /// Number of taps: `L` (size of `r`) for the x₁ rules, `L₂` for x₂.
    pub taps: usize,
    /// `W_x / W_r^x ≥ 1`: pilot bandwidth over the surviving bandwidth after `r`.
    pub bandwidth_ratio_x: f64,
    /// `W_u / W_g^u ≥ 1`: bandwidth of `u` over its overlap with the band of `g`.
    pub bandwidth_ratio_u: f64,
    /// PAR of x₁ (linear).
    pub par_x1: f64,
    /// PAR of x₂ (linear).
    pub par_x2: f64,
    /// PAR increase `PAR(u)/PAR(x₁)` (linear).
    pub par_increase: f64,
    /// Input back-off (linear, ≥ 1).
    pub ibo: f64,
    /// Output noise variance σ_e².
    pub noise_variance: f64,
    /// Amplifier linear gain G.
    pub gain: f64,
    /// Amplifier saturation input power `P^{in,sat}`.
    pub sat_input_power: f64,
    /// Safety margin β for the x₂ rule of thumb.
    pub beta: f64,
}

impl BudgetInputs {
    pub fn validate(&self) -> Result<()> {
        let entries = [
            ("bandwidth_ratio_x", self.bandwidth_ratio_x),
            ("bandwidth_ratio_u", self.bandwidth_ratio_u),
            ("par_x1", self.par_x1),
            ("par_x2", self.par_x2),
            ("par_increase", self.par_increase),
            ("ibo", self.ibo),
            ("noise_variance", self.noise_variance),
            ("gain", self.gain),
            ("sat_input_power", self.sat_input_power),
            ("beta", self.beta),
        ];
        for (name, v) in entries {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, "must be a positive real"));
            }
        }
        if self.taps == 0 {
            return Err(Error::invalid("taps", "must be ≥ 1"));
        }
        if !self.target_nmse_db.is_finite() {
            return Err(Error::invalid("target_nmse_db", "must be finite"));
        }
        Ok(())
    }

    /// The target NMSE as the inverse linear factor `10^{−NMSE_dB/10}`
    /// consumed by the length formulas (a large number for negative-dB
    /// targets).
    pub fn nmse_inverse(&self) -> f64 {
        10f64.powf(-self.target_nmse_db / 10.0)
    }
}

/// Which pilot-design option the budget refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PilotOption {
    /// Option 1: the pilot peak is kept at or below the amplifier input peak
    /// (`max|u| ≤ max|x₁|`); the bandwidth loss through `r` is paid in SNR.
    PeakBounded,
    /// Option 2: phases additionally minimize the PAR increase of `u`,
    /// allowing a higher pilot power; the PAR increase is paid instead.
    ParRobust,
}

/// Maximum achievable SNR (dB) for the chosen x₁ design option.
pub fn snr_budget_db(inputs: &BudgetInputs, option: PilotOption) -> f64 {
    let base = inputs.gain * inputs.gain * inputs.sat_input_power
        / (inputs.noise_variance * inputs.par_x1 * inputs.ibo);
    let linear = match option {
        PilotOption::PeakBounded => base / inputs.bandwidth_ratio_x,
        PilotOption::ParRobust => base / (inputs.bandwidth_ratio_u * inputs.par_increase),
    };
    10.0 * linear.log10()
}

/// Which minimum-length rule to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PilotLengthRule {
    X1Option1,
    X1Option2,
    X2,
}

/// Minimum pilot length to reach the target NMSE, rounded up.
pub fn min_pilot_length(inputs: &BudgetInputs, rule: PilotLengthRule) -> usize {
    let noise_over_sat =
        inputs.noise_variance / (inputs.gain * inputs.gain * inputs.sat_input_power);
    let l = inputs.taps as f64;
    let n = match rule {
        PilotLengthRule::X1Option1 => {
            inputs.nmse_inverse()
                * l
                * inputs.bandwidth_ratio_x
                * inputs.par_x1
                * inputs.ibo
                * noise_over_sat
        }
        PilotLengthRule::X1Option2 => {
            inputs.nmse_inverse()
                * l
                * inputs.bandwidth_ratio_u
                * inputs.par_x1
                * inputs.ibo
                * inputs.par_increase
                * noise_over_sat
        }
        PilotLengthRule::X2 => {
            inputs.beta * inputs.nmse_inverse() * l * inputs.par_x2 * noise_over_sat
        }
    };
    n.ceil().max(1.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::paper_g;

    fn filter(taps: &[f64]) -> FirFilter {
        FirFilter::new(taps.to_vec()).unwrap()
    }

    #[test]
    fn q_value_unit_error() {
        let truth = filter(&[1.0, -0.5, 0.25]);
        let doubled = filter(&[2.0, -1.0, 0.5]);
        assert!((q_value(&truth, &doubled).unwrap() - 0.0).abs() <= 1e-12);
    }

    #[test]
    fn q_value_relative_perturbation() {
        let truth = filter(&[0.4, 1.1, -0.2]);
        let eps = 1e-3;
        let est = truth.scaled(1.0 + eps);
        let q = q_value(&truth, &est).unwrap();
        assert!((q - 60.0).abs() <= 1e-9, "q = {q}");
    }

    #[test]
    fn q_value_zero_estimate_and_exact_estimate() {
        let truth = filter(&[1.0, 2.0]);
        assert!((q_value(&truth, &filter(&[0.0, 0.0])).unwrap()).abs() <= 1e-12);
        assert_eq!(q_value(&truth, &truth).unwrap(), f64::INFINITY);
    }

    #[test]
    fn q_prime_identity_weighting_equals_q() {
        let truth = paper_g();
        let est = truth.scaled(1.0 + 3e-4);
        let q = q_value(&truth, &est).unwrap();
        let qp = q_prime(&truth, &est, &FirFilter::identity()).unwrap();
        assert_eq!(q, qp);
    }

    #[test]
    fn q_prime_ignores_stopband_error() {
        // Error confined to high frequencies; weighting is a strong lowpass
        // (wide moving average) that kills the error band.
        let truth = filter(&vec![1.0 / 8.0; 8]);
        let mut est_taps = truth.taps().to_vec();
        for (i, t) in est_taps.iter_mut().enumerate() {
            // Error at the Nyquist frequency: alternating signs.
            *t += 0.05 * if i % 2 == 0 { 1.0 } else { -1.0 };
        }
        let est = filter(&est_taps);
        let weighting = filter(&vec![1.0 / 32.0; 32]);
        let q = q_value(&truth, &est).unwrap();
        let qp = q_prime(&truth, &est, &weighting).unwrap();
        assert!(qp - q >= 20.0, "q = {q}, q' = {qp}");
    }

    #[test]
    fn predicted_q_values() {
        assert!((predicted_q_db(8000, 20, 20.0) - 46.02).abs() <= 0.01);
        assert_eq!(predicted_q_db(64, 64, 0.0), 0.0);
        let base = predicted_q_db(1000, 10, 12.0);
        let doubled = predicted_q_db(2000, 10, 12.0);
        assert!((doubled - base - 3.0103).abs() <= 1e-4);
    }

    #[test]
    fn nmse_basic_values() {
        let w = Signal::new(vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(nmse_db(&w, &w).unwrap(), f64::NEG_INFINITY);
        let zero = Signal::new(vec![0.0; 3]).unwrap();
        assert!((nmse_db(&w, &zero).unwrap()).abs() <= 1e-12);
        let perturbed = w.scaled(1.0 + 1e-2);
        assert!((nmse_db(&w, &perturbed).unwrap() + 40.0).abs() <= 1e-9);
        assert!(nmse_db(&zero, &w).is_err());
    }

    #[test]
    fn nmse_csv_sentinel() {
        assert_eq!(clamp_db_for_csv(f64::NEG_INFINITY), -400.0);
        assert_eq!(clamp_db_for_csv(f64::INFINITY), 400.0);
        assert_eq!(clamp_db_for_csv(f64::NAN), -400.0);
        assert_eq!(clamp_db_for_csv(-31.5), -31.5);
    }

    fn unit_inputs() -> BudgetInputs {
        BudgetInputs {
            target_nmse_db: 0.0,
            taps: 1,
            bandwidth_ratio_x: 1.0,
            bandwidth_ratio_u: 1.0,
            par_x1: 1.0,
            par_x2: 1.0,
            par_increase: 1.0,
            ibo: 1.0,
            noise_variance: 1.0,
            gain: 1.0,
            sat_input_power: 1.0,
            beta: 1.0,
        }
    }

    #[test]
    fn snr_budget_unit_factors() {
        let mut inputs = unit_inputs();
        inputs.gain = 2.0;
        inputs.sat_input_power = 5.0;
        inputs.noise_variance = 0.1;
        let snr = snr_budget_db(&inputs, PilotOption::PeakBounded);
        let expect = 10.0 * (4.0 * 5.0 / 0.1f64).log10();
        assert!((snr - expect).abs() <= 1e-12);
    }

    #[test]
    fn snr_budget_options_coincide_when_ratios_match() {
        let mut inputs = unit_inputs();
        inputs.bandwidth_ratio_x = 3.0;
        inputs.bandwidth_ratio_u = 3.0;
        inputs.par_increase = 1.0; // PAR(u) = PAR(x₁)
        let a = snr_budget_db(&inputs, PilotOption::PeakBounded);
        let b = snr_budget_db(&inputs, PilotOption::ParRobust);
        assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn snr_budget_six_db_ratios() {
        // 6 dB bandwidth ratio and 6 dB IBO sit 12 dB below the unfiltered bound.
        let mut inputs = unit_inputs();
        let six_db = 10f64.powf(0.6);
        inputs.bandwidth_ratio_x = six_db;
        inputs.ibo = six_db;
        let snr = snr_budget_db(&inputs, PilotOption::PeakBounded);
        let unfiltered = 0.0; // G²P/σ² = 1 → 0 dB
        assert!((unfiltered - snr - 12.0).abs() <= 1e-9, "snr = {snr}");
    }

    #[test]
    fn min_length_x2_rule_of_thumb() {
        let mut inputs = unit_inputs();
        inputs.beta = 2.0;
        inputs.target_nmse_db = -30.0; // inverse factor 10³
        inputs.taps = 20;
        inputs.par_x2 = 4.0;
        inputs.noise_variance = 1e-4;
        let n = min_pilot_length(&inputs, PilotLengthRule::X2);
        assert_eq!(n, 16);
    }

    #[test]
    fn min_length_unit_factors() {
        let inputs = unit_inputs();
        assert_eq!(min_pilot_length(&inputs, PilotLengthRule::X1Option1), 1);
        assert_eq!(min_pilot_length(&inputs, PilotLengthRule::X2), 1);
    }

    #[test]
    fn pilot_length_ratio_matches_narrative() {
        // L = 39 for x₁ against L₂ = 20, β = 2 for x₂; W ratio 4, IBO 3.16.
        // The noise/NMSE factors keep both lengths large so that the ceil
        // rounding is negligible.
        let mut x1 = unit_inputs();
        x1.target_nmse_db = -100.0;
        x1.taps = 39;
        x1.bandwidth_ratio_x = 4.0;
        x1.ibo = 3.16;
        x1.noise_variance = 1e-4;
        let mut x2 = x1.clone();
        x2.taps = 20;
        x2.beta = 2.0;
        let n1 = min_pilot_length(&x1, PilotLengthRule::X1Option1) as f64;
        let n2 = min_pilot_length(&x2, PilotLengthRule::X2) as f64;
        let ratio = n1 / n2;
        let expect = 39.0 / (2.0 * 20.0) * 4.0 * 3.16;
        assert!((ratio - expect).abs() / expect <= 0.01, "ratio = {ratio}");
    }

    #[test]
    fn budget_inputs_validation() {
        let mut inputs = unit_inputs();
        assert!(inputs.validate().is_ok());
        inputs.ibo = 0.0;
        assert!(inputs.validate().is_err());
    }
}
