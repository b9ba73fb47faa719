//! CSV and gnuplot output helpers.

use std::io::Write;
use std::path::Path;

use whident::metrics::clamp_db_for_csv;

/// Long/tidy result table: `experiment,axis,value,seed,metric,value_db`.
#[derive(Debug, Default)]
pub struct LongTable {
    rows: Vec<Row>,
}

#[derive(Debug)]
struct Row {
    experiment: &'static str,
    axis: &'static str,
    value: f64,
    seed: u64,
    metric: String,
    value_db: f64,
}

impl LongTable {
    pub fn push(
        &mut self,
        experiment: &'static str,
        axis: &'static str,
        value: f64,
        seed: u64,
        metric: impl Into<String>,
        value_db: f64,
    ) {
        self.rows.push(Row {
            experiment,
            axis,
            value,
            seed,
            metric: metric.into(),
            value_db,
        });
    }

    pub fn extend(&mut self, other: LongTable) {
        self.rows.extend(other.rows);
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "experiment,axis,value,seed,metric,value_db")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.experiment,
                r.axis,
                r.value,
                r.seed,
                r.metric,
                clamp_db_for_csv(r.value_db)
            )?;
        }
        out.flush()
    }
}

/// Simple two-column report `metric,value`.
pub fn write_report(path: &Path, rows: &[(String, f64)]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "metric,value")?;
    for (metric, value) in rows {
        writeln!(out, "{metric},{value}")?;
    }
    out.flush()
}

/// Companion gnuplot script plotting `metric` from a long-format CSV.
pub fn write_gnuplot_long(path: &Path, csv_name: &str, metric: &str, axis: &str) -> std::io::Result<()> {
    let script = format!(
        "set datafile separator \",\"\n\
         set key outside\n\
         set xlabel \"{axis}\"\n\
         set ylabel \"{metric} [dB]\"\n\
         set grid\n\
         plot \"< awk -F, 'NR>1 && $5==\\\"{metric}\\\"' {csv_name}\" using 3:6 with points title \"{metric}\"\n"
    );
    std::fs::write(path, script)
}

/// Companion gnuplot script plotting signal time series from `sample` CSVs.
pub fn write_gnuplot_signals(path: &Path, csv_names: &[&str]) -> std::io::Result<()> {
    let mut script = String::from(
        "set datafile separator \",\"\nset xlabel \"n\"\nset ylabel \"amplitude\"\nset grid\nplot ",
    );
    let plots: Vec<String> = csv_names
        .iter()
        .map(|name| format!("\"{name}\" using 0:1 every ::1 with lines title \"{name}\""))
        .collect();
    script.push_str(&plots.join(", "));
    script.push('\n');
    std::fs::write(path, script)
}
