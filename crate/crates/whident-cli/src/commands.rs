//! The four experiment commands.

use std::path::Path;

use whident::channel::WhModel;
use whident::estimator::{
    add_noise, design_x2_multisine, passband, run_full_pipeline, step1_estimate_r, X2_PHASE_SEED,
};
use whident::metrics::{
    self, min_pilot_length, nmse_db, nmse_prime_db, predicted_q_db, q_value, snr_budget_db,
    BudgetInputs, PilotLengthRule, PilotOption,
};
use whident::signals::{self, matched_white_noise, multisine, occupied_bandwidth, MultisineSpec, Signal};
use whident::volterra::{enumerate_reduced_indices, estimate_volterra_with, pilot_length_ratio};
use whident::{Error, FirFilter};

use crate::config::Config;
use crate::report::{write_gnuplot_long, write_gnuplot_signals, write_report, LongTable};

pub type CmdResult = Result<(), Box<dyn std::error::Error>>;

fn derive(master: u64, stream: u64) -> u64 {
    master
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Fraction of the band `[0, 1/2]` where the filter magnitude stays within
/// `threshold_db` of its peak (a width, like `occupied_bandwidth`).
fn filter_band_width(filter: &FirFilter, threshold_db: f64) -> f64 {
    let points = 2048;
    let response = filter.magnitude_response(points);
    let peak = response.iter().fold(0.0f64, |m, &v| m.max(v));
    let floor = peak * 10f64.powf(-threshold_db.abs() / 20.0);
    let count = response.iter().filter(|&&v| v >= floor).count();
    0.5 * count as f64 / points as f64
}

/// Designs the three pilots and writes signal files plus a design report.
pub fn design_pilot(config: &Config, out: &Path, seed: u64, gnuplot: bool) -> CmdResult {
    std::fs::create_dir_all(out)?;
    let model = config.build_model();
    let plan = config.build_plan(seed);
    plan.validate()?;

    let x1 = plan.design_x1()?;
    let r = model.composite_r();
    let band = passband(&r, plan.passband_threshold_db);
    let spec2 = design_x2_multisine(band, plan.m2, plan.n2, X2_PHASE_SEED)?;
    let x2 = multisine(&spec2).scaled_to_peak(plan.sat_input_amplitude);
    let bin = (spec2.fundamental() * plan.n2 as f64).round().max(1.0) as usize;
    let period = plan.n2 / gcd(bin, plan.n2);
    let n3_raw = plan
        .n3
        .unwrap_or_else(|| 50 * plan.n1.div_ceil(plan.r_taps()))
        .max(plan.l1 + plan.l2 + period);
    let n3 = n3_raw.div_ceil(period) * period;
    let x3 = multisine(&spec2.with_length(n3)?).scaled_to_peak(x1.peak());

    for (name, signal) in [("x1", &x1), ("x2", &x2), ("x3", &x3)] {
        signal.to_csv_file(out.join(format!("{name}.csv")))?;
        signal.to_binary_file(out.join(format!("{name}.bin")))?;
    }

    // Measured quantities feeding the SNR budgets and minimum lengths.
    let u = model.h.filter(&x1);
    let par_x1 = signals::par(&x1)?;
    let par_x2 = signals::par(&x2)?;
    let par_u = signals::par(&u)?;
    let w_x1 = occupied_bandwidth(&x1, -20.0);
    let w_r = filter_band_width(&r, 3.0);
    let w_u = occupied_bandwidth(&u, -20.0);
    let w_g = filter_band_width(&model.g, 3.0);
    let gain = model.amplifier.small_signal_gain();
    let sat_power = plan.sat_input_amplitude * plan.sat_input_amplitude;
    // Noise variance: explicit, or derived from the target SNR on x₁'s output.
    let noise_variance = match plan.snr_db {
        Some(snr) => model.forward_noiseless(&x1).w.mean_power() / 10f64.powf(snr / 10.0),
        None => model.noise_variance,
    };
    let inputs = BudgetInputs {
        target_nmse_db: -30.0,
        taps: plan.r_taps(),
        bandwidth_ratio_x: (w_x1 / w_r.min(w_x1)).max(1.0),
        bandwidth_ratio_u: (w_u / w_g.min(w_u)).max(1.0),
        par_x1,
        par_x2,
        par_increase: (par_u / par_x1).max(1.0),
        ibo: 10f64.powf(plan.ibo_db / 10.0),
        noise_variance: noise_variance.max(f64::MIN_POSITIVE),
        gain,
        sat_input_power: sat_power,
        beta: 2.0,
    };
    inputs.validate()?;
    let mut x2_inputs = inputs.clone();
    x2_inputs.taps = plan.l2;

    let kernel_count = enumerate_reduced_indices(plan.l1, plan.l2, 3)?.len();
    let rows = vec![
        ("par_x1_db".into(), 10.0 * par_x1.log10()),
        ("par_x2_db".into(), 10.0 * par_x2.log10()),
        ("par_u_db".into(), 10.0 * par_u.log10()),
        ("backoff_db".into(), plan.ibo_db + 10.0 * par_x1.log10()),
        ("power_x1".into(), x1.mean_power()),
        ("peak_x1".into(), x1.peak()),
        ("peak_x2".into(), x2.peak()),
        ("n3".into(), n3 as f64),
        ("bandwidth_x1".into(), w_x1),
        ("bandwidth_r".into(), w_r),
        ("x2_band_lo".into(), band.0),
        ("x2_band_hi".into(), band.1),
        ("snr_max_option1_db".into(), snr_budget_db(&inputs, PilotOption::PeakBounded)),
        ("snr_max_option2_db".into(), snr_budget_db(&inputs, PilotOption::ParRobust)),
        ("n_min_x1_option1".into(), min_pilot_length(&inputs, PilotLengthRule::X1Option1) as f64),
        ("n_min_x1_option2".into(), min_pilot_length(&inputs, PilotLengthRule::X1Option2) as f64),
        ("n_min_x2".into(), min_pilot_length(&x2_inputs, PilotLengthRule::X2) as f64),
        ("volterra_kernel_count".into(), kernel_count as f64),
        (
            "volterra_pilot_ratio".into(),
            pilot_length_ratio(kernel_count as f64, plan.r_taps() as f64, inputs.ibo),
        ),
    ];
    write_report(&out.join("report.csv"), &rows)?;
    if gnuplot {
        write_gnuplot_signals(&out.join("pilots.gp"), &["x1.csv", "x2.csv", "x3.csv"])?;
    }
    Ok(())
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Runs the full three-step identification and writes the estimate plus
/// per-step metrics.
pub fn identify(config: &Config, out: &Path, seed: u64, gnuplot: bool) -> CmdResult {
    std::fs::create_dir_all(out)?;
    let model = config.build_model();
    let mut table = LongTable::default();
    let mut first_estimate = None;
    for rep in 0..config.experiment.seeds {
        let plan = config.build_plan(derive(seed, rep));
        let estimate = run_full_pipeline(&model, &plan)?;
        for d in &estimate.diagnostics {
            table.push(
                "identify",
                "seed",
                rep as f64,
                rep,
                format!("{}_{}", d.step, d.metric),
                d.value_db,
            );
        }
        table.push("identify", "seed", rep as f64, rep, "delay_samples", estimate.delay);
        if first_estimate.is_none() {
            first_estimate = Some(estimate);
        }
    }
    first_estimate
        .expect("at least one seed")
        .save_dir(out.join("estimate"))?;
    table.write_csv(&out.join("metrics.csv"))?;
    if gnuplot {
        write_gnuplot_long(&out.join("metrics.gp"), "metrics.csv", "step1_q_r_db", "seed")?;
    }
    Ok(())
}

/// Volterra-baseline sweep: estimates the reduced kernels from white-noise
/// pilots at each SNR and reports prediction NMSE against the predicted Q.
pub fn volterra(config: &Config, out: &Path, seed: u64, gnuplot: bool) -> CmdResult {
    std::fs::create_dir_all(out)?;
    let vcfg = config.volterra.clone().unwrap_or_default();
    let model = config.build_model();
    let indices = enumerate_reduced_indices(vcfg.l1, vcfg.l2, 3)?;
    let count = indices.len();
    let n = ((vcfg.n_factor * count as f64).ceil() as usize).max(2);
    let options = whident::lsq::SolveOptions {
        ridge: (vcfg.ridge > 0.0).then_some(vcfg.ridge),
        ..Default::default()
    };

    let mut table = LongTable::default();
    let mut last_model = None;
    for &snr in &vcfg.snr_db {
        for rep in 0..config.experiment.seeds {
            let sd = derive(seed, 1000 + rep);
            let x = matched_white_noise(&Signal::new(vec![1.0])?, n, sd)?;
            let v = model.forward_noiseless(&x).w;
            let sigma2 = v.mean_power() / 10f64.powf(snr / 10.0);
            let w = add_noise(&v, sigma2, derive(sd, 7));
            let est = estimate_volterra_with(&x, &w, vcfg.l1, vcfg.l2, &options)?;

            let xv = matched_white_noise(&Signal::new(vec![1.0])?, n.min(8000), derive(sd, 8))?;
            let wv = model.forward_noiseless(&xv).w;
            let nmse = nmse_db(&wv, &est.predict(&xv))?;
            table.push("volterra", "snr_db", snr, rep, "nmse_db", nmse);
            table.push(
                "volterra",
                "snr_db",
                snr,
                rep,
                "predicted_q_db",
                predicted_q_db(n, count, snr),
            );
            last_model = Some(est);
        }
    }
    table.push("volterra", "snr_db", 0.0, 0, "kernel_count", count as f64);
    table.write_csv(&out.join("volterra.csv"))?;
    if let Some(est) = last_model {
        est.to_csv_file(out.join("volterra_model.csv"))?;
    }
    if gnuplot {
        write_gnuplot_long(&out.join("volterra.gp"), "volterra.csv", "nmse_db", "snr_db")?;
    }
    Ok(())
}

/// Axis sweep; points × seeds evaluated (in parallel when `--jobs` > 1)
/// with deterministic, ordered output.
pub fn sweep(config: &Config, out: &Path, seed: u64, jobs: usize, gnuplot: bool) -> CmdResult {
    use rayon::prelude::*;

    std::fs::create_dir_all(out)?;
    let sweep_cfg = config
        .sweep
        .as_ref()
        .ok_or_else(|| crate::config::UsageError("missing [sweep] table".into()))?;
    let model = config.build_model();
    let axis = sweep_cfg.axis.clone();
    let seeds = config.experiment.seeds;

    let tasks: Vec<(usize, f64, u64)> = sweep_cfg
        .values
        .iter()
        .enumerate()
        .flat_map(|(i, &v)| (0..seeds).map(move |s| (i, v, s)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| crate::config::UsageError(format!("--jobs: {e}")))?;

    let results: Vec<(usize, Result<LongTable, Error>)> = pool.install(|| {
        tasks
            .par_iter()
            .enumerate()
            .map(|(order, &(_, value, rep))| {
                let run_seed = derive(seed, rep);
                let table = sweep_point(config, &model, &axis, value, rep, run_seed);
                (order, table)
            })
            .collect()
    });

    let mut table = LongTable::default();
    let mut ordered = results;
    ordered.sort_by_key(|(order, _)| *order);
    for (_, r) in ordered {
        table.extend(r?);
    }
    table.write_csv(&out.join("sweep.csv"))?;
    if gnuplot {
        let metric = match axis.as_str() {
            "backoff_db" => "q_r_db",
            _ => "nmse_prime_db",
        };
        write_gnuplot_long(&out.join("sweep.gp"), "sweep.csv", metric, &axis)?;
    }
    Ok(())
}

static SWEEP: &str = "sweep";

fn sweep_point(
    config: &Config,
    model: &WhModel,
    axis: &str,
    value: f64,
    rep: u64,
    run_seed: u64,
) -> Result<LongTable, Error> {
    let mut table = LongTable::default();
    let mut plan = config.build_plan(run_seed);
    let axis_static: &'static str = match axis {
        "backoff_db" => "backoff_db",
        "snr_db" => "snr_db",
        "n1" => "n1",
        "n2" => "n2",
        _ => "axis",
    };
    match axis {
        "backoff_db" => {
            // Step-1 quality as a function of the x₁ back-off; the target
            // SNR stays fixed (noise follows the output power).
            let spec = MultisineSpec::new(
                plan.m1,
                plan.f1,
                signals::schroeder_phases(plan.m1),
                plan.n1,
            )?;
            let sat_power = plan.sat_input_amplitude * plan.sat_input_amplitude;
            let x1 = multisine(&spec).scaled_to_power(sat_power * 10f64.powf(-value / 10.0));
            let v = model.forward_noiseless(&x1).w;
            let snr = plan.snr_db.unwrap_or(20.0);
            let sigma2 = v.mean_power() / 10f64.powf(snr / 10.0);
            let w1 = add_noise(&v, sigma2, run_seed);
            let s1 = step1_estimate_r(&x1, &w1, plan.r_taps())?;
            let r_true = model.composite_r();
            table.push(SWEEP, axis_static, value, rep, "q_r_db", q_value(&r_true, &s1.r_hat)?);
            table.push(SWEEP, axis_static, value, rep, "fit_nmse_db", s1.fit_nmse_db);
            table.push(
                SWEEP,
                axis_static,
                value,
                rep,
                "predicted_q_db",
                predicted_q_db(plan.n1, plan.r_taps(), snr),
            );
        }
        other => {
            match other {
                "snr_db" => plan.snr_db = Some(value),
                "n1" => plan.n1 = value.max(1.0) as usize,
                "n2" => plan.n2 = value.max(1.0) as usize,
                _ => {
                    return Err(Error::invalid("axis", format!("unsupported sweep axis {other}")));
                }
            }
            let estimate = run_full_pipeline(model, &plan)?;
            for d in &estimate.diagnostics {
                table.push(
                    SWEEP,
                    axis_static,
                    value,
                    rep,
                    format!("{}_{}", d.step, d.metric),
                    d.value_db,
                );
            }
            // Validation NMSE′ at 5 dB and 0 dB back-off (band weighting g).
            let spec = MultisineSpec::new(
                plan.m1,
                plan.f1,
                signals::schroeder_phases(plan.m1),
                4000,
            )?;
            let anchor5 = multisine(&spec)
                .scaled_to_peak(plan.sat_input_amplitude * 10f64.powf(-5.0 / 20.0));
            let anchor0 = multisine(&spec).scaled_to_peak(plan.sat_input_amplitude);
            for (name, anchor) in [("nmse_prime_db", &anchor5), ("nmse_prime_0db", &anchor0)] {
                let xv = matched_white_noise(anchor, 8000, derive(run_seed, 5))?;
                let wv = model.forward_noiseless(&xv).w;
                let nm = nmse_prime_db(&wv, &estimate.predict(&xv), &model.g)?;
                table.push(SWEEP, axis_static, value, rep, name, nm);
                let nm_lin = nmse_prime_db(&wv, &estimate.predict_linear(&xv), &model.g)?;
                table.push(SWEEP, axis_static, value, rep, format!("{name}_linear"), nm_lin);
            }
            let r_true = model.composite_r();
            table.push(
                SWEEP,
                axis_static,
                value,
                rep,
                "q_r_recombined_db",
                metrics::q_value(&r_true, &estimate.r_recombined())?,
            );
        }
    }
    Ok(table)
}

/// Maps errors onto the documented exit codes.
pub fn exit_code_for(error: &Box<dyn std::error::Error>) -> i32 {
    if error.downcast_ref::<crate::config::UsageError>().is_some() {
        return 2;
    }
    if let Some(e) = error.downcast_ref::<Error>() {
        return exit_code_for_whident(e);
    }
    if error.downcast_ref::<std::io::Error>().is_some() {
        return 4;
    }
    2
}

fn exit_code_for_whident(error: &Error) -> i32 {
    if error.is_conditioning() {
        return 3;
    }
    match error {
        Error::Io(_) | Error::Parse(_) => 4,
        Error::Step { source, .. } => exit_code_for_whident(source),
        _ => 2,
    }
}
