//! Data-fraction sweeps, leave-one-out ablations and the TSV report.

use std::fmt::Write as _;
use std::path::Path;

use super::config::{Method, Variant};
use super::run::{mean, Experiment, RunResult};
use crate::error::{Error, Result};

/// Column names of the per-seed report. Per-class fields hold one value per
/// class separated by `;`, with `NA` for undefined values.
pub const REPORT_HEADER: &str =
    "method\tvariant\tfraction\tseed\tn_train\tbest_epoch\taccuracy\tweighted_f1\tmacro_auc\tprecision\trecall\tf1\tauc";

/// Column names of the per-run summary.
pub const SUMMARY_HEADER: &str =
    "method\tvariant\tfraction\tseeds\tmean_weighted_f1\tstd_weighted_f1\tmean_accuracy\tmean_macro_auc";

impl Experiment {
    /// One run per fraction; fractions must be strictly ascending.
    pub fn sweep_data_fraction(&self, method: Method, fractions: &[f64]) -> Result<Vec<RunResult>> {
        if fractions.is_empty() || fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "sweep fractions must be non-empty and strictly ascending".into(),
            ));
        }
        fractions
            .iter()
            .map(|&f| self.run_adaptation(method, Variant::Full, f))
            .collect()
    }

    /// The full main method followed by each leave-one-out variant, all on
    /// the configured fraction and seeds.
    pub fn run_ablation(&self) -> Result<Vec<RunResult>> {
        let fraction = self.config.train.fraction;
        Variant::ALL
            .iter()
            .map(|&v| self.run_adaptation(Method::DicopDpl, v, fraction))
            .collect()
    }
}

fn fmt_value(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

fn fmt_list(values: impl Iterator<Item = Option<f64>>) -> String {
    values.map(fmt_value).collect::<Vec<_>>().join(";")
}

/// Per-seed report: the header and one line per (seed, variant, fraction).
pub fn report_tsv(runs: &[RunResult]) -> String {
    let mut out = String::new();
    out.push_str(REPORT_HEADER);
    out.push('\n');
    for run in runs {
        for s in &run.seeds {
            let m = &s.test;
            let _ = writeln!(
                out,
                "{}\t{}\t{:.4}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{}\t{}",
                run.method,
                run.variant,
                run.fraction,
                s.seed,
                s.n_train,
                s.best_epoch,
                m.accuracy,
                m.weighted_f1,
                fmt_value(m.macro_auc),
                fmt_list(m.per_class.iter().map(|c| c.precision)),
                fmt_list(m.per_class.iter().map(|c| c.recall)),
                fmt_list(m.per_class.iter().map(|c| c.f1)),
                fmt_list(m.per_class.iter().map(|c| c.auc)),
            );
        }
    }
    out
}

/// Mean metrics per run.
pub fn summary_tsv(runs: &[RunResult]) -> String {
    let mut out = String::new();
    out.push_str(SUMMARY_HEADER);
    out.push('\n');
    for run in runs {
        let f1 = run.weighted_f1s();
        let mu = mean(&f1);
        let sd = if f1.len() > 1 {
            (f1.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (f1.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        let acc: Vec<f64> = run.seeds.iter().map(|s| s.test.accuracy).collect();
        let auc: Vec<f64> = run.seeds.iter().filter_map(|s| s.test.macro_auc).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{:.4}\t{}\t{mu:.6}\t{sd:.6}\t{:.6}\t{}",
            run.method,
            run.variant,
            run.fraction,
            run.seeds.len(),
            mean(&acc),
            fmt_value((!auc.is_empty()).then(|| mean(&auc))),
        );
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One parsed line of a per-seed report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub variant: String,
    pub fraction: String,
    pub seed: u64,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub macro_auc: Option<f64>,
}

pub fn parse_report(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == REPORT_HEADER => {}
        _ => {
            return Err(Error::Input(
                "report does not start with the expected header".into(),
            ))
        }
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Input(format!("report line {} is malformed", i + 2));
            if f.len() != REPORT_HEADER.split('\t').count() {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(ReportRow {
                method: f[0].to_string(),
                variant: f[1].to_string(),
                fraction: f[2].to_string(),
                seed: f[3].parse().map_err(|_| bad())?,
                accuracy: num(f[6])?,
                weighted_f1: num(f[7])?,
                macro_auc: if f[8] == "NA" { None } else { Some(num(f[8])?) },
            })
        })
        .collect()
}
