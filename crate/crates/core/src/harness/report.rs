use std::fs;
use std::path::{Path, PathBuf};

use crate::calibration::Method;
use crate::error::{BaeError, Result};
use crate::forward::Point;

use super::ExperimentReport;

/// One trial of an experiment. Missing values are `None`; method failures
/// are listed in `errors` as `tag: message`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRow {
    /// Index into the test-location set.
    pub test_location: usize,
    pub position: Point,
    pub sigma_true: f64,
    pub amplitude: f64,
    pub snr_db: f64,
    pub realization: usize,
    pub noise_seed: u64,
    /// `ok`, or `failed: <reason>` when the trial itself could not run.
    pub status: String,
    /// Candidate indices picked by the standard, BAE and alternating scans.
    pub loc_st: Option<usize>,
    pub loc_bae: Option<usize>,
    pub loc_alt: Option<usize>,
    pub x_st: Option<f64>,
    pub x_bae: Option<f64>,
    pub x_alt: Option<f64>,
    pub alpha_hat: Option<f64>,
    pub amplitude_hat: Option<f64>,
    pub sigma_cg: Option<f64>,
    pub sigma_cg_iter: Option<f64>,
    pub sigma_gp: Option<f64>,
    pub sigma_map: Option<f64>,
    pub sigma_alt: Option<f64>,
    pub converged_cg_iter: Option<bool>,
    pub converged_alt: Option<bool>,
    pub errors: Vec<String>,
}

impl TrialRow {
    pub fn new(
        test_location: usize,
        position: Point,
        sigma_true: f64,
        amplitude: f64,
        snr_db: f64,
        realization: usize,
        noise_seed: u64,
    ) -> Self {
        TrialRow {
            test_location,
            position,
            sigma_true,
            amplitude,
            snr_db,
            realization,
            noise_seed,
            status: "ok".into(),
            loc_st: None,
            loc_bae: None,
            loc_alt: None,
            x_st: None,
            x_bae: None,
            x_alt: None,
            alpha_hat: None,
            amplitude_hat: None,
            sigma_cg: None,
            sigma_cg_iter: None,
            sigma_gp: None,
            sigma_map: None,
            sigma_alt: None,
            converged_cg_iter: None,
            converged_alt: None,
            errors: Vec::new(),
        }
    }

    pub fn sigma(&self, method: Method) -> Option<f64> {
        match method {
            Method::Cg => self.sigma_cg,
            Method::CgIter => self.sigma_cg_iter,
            Method::Gp => self.sigma_gp,
            Method::MapA2 => self.sigma_map,
            Method::Alternating => self.sigma_alt,
        }
    }

    pub fn set_sigma(&mut self, method: Method, value: Option<f64>) {
        let slot = match method {
            Method::Cg => &mut self.sigma_cg,
            Method::CgIter => &mut self.sigma_cg_iter,
            Method::Gp => &mut self.sigma_gp,
            Method::MapA2 => &mut self.sigma_map,
            Method::Alternating => &mut self.sigma_alt,
        };
        *slot = value;
    }

    /// `100 |sigma_hat - sigma_true| / sigma_true`.
    pub fn sigma_error_pct(&self, method: Method) -> Option<f64> {
        self.sigma(method)
            .map(|s| 100.0 * (s - self.sigma_true).abs() / self.sigma_true)
    }

    /// Improvement `X_st - X_bae` in millimetres.
    pub fn dx_bae(&self) -> Option<f64> {
        Some(self.x_st? - self.x_bae?)
    }

    /// Improvement `X_st - X_alt` in millimetres.
    pub fn dx_alt(&self) -> Option<f64> {
        Some(self.x_st? - self.x_alt?)
    }
}

/// Estimate columns in [`Method::ALL`] order.
const SIGMA_COLUMNS: [&str; 5] = [
    "sigma_cg",
    "sigma_cg_iter",
    "sigma_gp",
    "sigma_map",
    "sigma_alt",
];

const COLUMNS: &[&str] = &[
    "test_location",
    "x",
    "y",
    "sigma_true",
    "amplitude",
    "snr_db",
    "realization",
    "noise_seed",
    "status",
    "loc_st",
    "loc_bae",
    "loc_alt",
    "x_st_mm",
    "x_bae_mm",
    "x_alt_mm",
    "dx_bae_mm",
    "dx_alt_mm",
    "alpha_hat",
    "amplitude_hat",
    "sigma_cg",
    "sigma_cg_iter",
    "sigma_gp",
    "sigma_map",
    "sigma_alt",
    "err_pct_cg",
    "err_pct_cg_iter",
    "err_pct_gp",
    "err_pct_map",
    "err_pct_alt",
    "converged_cg_iter",
    "converged_alt",
    "errors",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn row_record(r: &TrialRow) -> Vec<String> {
    let mut rec = vec![
        r.test_location.to_string(),
        r.position[0].to_string(),
        r.position[1].to_string(),
        r.sigma_true.to_string(),
        r.amplitude.to_string(),
        r.snr_db.to_string(),
        r.realization.to_string(),
        r.noise_seed.to_string(),
        r.status.clone(),
        opt(r.loc_st),
        opt(r.loc_bae),
        opt(r.loc_alt),
        opt(r.x_st),
        opt(r.x_bae),
        opt(r.x_alt),
        opt(r.dx_bae()),
        opt(r.dx_alt()),
        opt(r.alpha_hat),
        opt(r.amplitude_hat),
    ];
    rec.extend(Method::ALL.iter().map(|&m| opt(r.sigma(m))));
    rec.extend(Method::ALL.iter().map(|&m| opt(r.sigma_error_pct(m))));
    rec.push(opt(r.converged_cg_iter));
    rec.push(opt(r.converged_alt));
    rec.push(r.errors.join("; "));
    rec
}

fn column(name: &str) -> usize {
    COLUMNS
        .iter()
        .position(|&c| c == name)
        .expect("known column")
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, name: &str) -> Result<T> {
    let s = &rec[column(name)];
    s.parse()
        .map_err(|_| BaeError::Report(format!("column {name} has unparsable value `{s}`")))
}

fn parse_opt<T: std::str::FromStr>(rec: &csv::StringRecord, name: &str) -> Result<Option<T>> {
    match &rec[column(name)] {
        "" => Ok(None),
        _ => parse_field(rec, name).map(Some),
    }
}

fn parse_row(rec: &csv::StringRecord) -> Result<TrialRow> {
    if rec.len() != COLUMNS.len() {
        return Err(BaeError::Report(format!(
            "trial row has {} fields, expected {}",
            rec.len(),
            COLUMNS.len()
        )));
    }
    let mut row = TrialRow::new(
        parse_field(rec, "test_location")?,
        [parse_field(rec, "x")?, parse_field(rec, "y")?],
        parse_field(rec, "sigma_true")?,
        parse_field(rec, "amplitude")?,
        parse_field(rec, "snr_db")?,
        parse_field(rec, "realization")?,
        parse_field(rec, "noise_seed")?,
    );
    row.status = rec[column("status")].to_string();
    row.loc_st = parse_opt(rec, "loc_st")?;
    row.loc_bae = parse_opt(rec, "loc_bae")?;
    row.loc_alt = parse_opt(rec, "loc_alt")?;
    row.x_st = parse_opt(rec, "x_st_mm")?;
    row.x_bae = parse_opt(rec, "x_bae_mm")?;
    row.x_alt = parse_opt(rec, "x_alt_mm")?;
    row.alpha_hat = parse_opt(rec, "alpha_hat")?;
    row.amplitude_hat = parse_opt(rec, "amplitude_hat")?;
    for (m, name) in Method::ALL.iter().zip(SIGMA_COLUMNS) {
        row.set_sigma(*m, parse_opt(rec, name)?);
    }
    row.converged_cg_iter = parse_opt(rec, "converged_cg_iter")?;
    row.converged_alt = parse_opt(rec, "converged_alt")?;
    let errors = &rec[column("errors")];
    if !errors.is_empty() {
        row.errors = errors.split("; ").map(str::to_string).collect();
    }
    Ok(row)
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> BaeError {
    BaeError::Report(format!("{}: {e}", path.display()))
}

/// Parses a `trials.csv` written by [`emit_report`].
pub fn read_trials(path: impl AsRef<Path>) -> Result<Vec<TrialRow>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| io_error(path, e))?;
    let header = reader.headers().map_err(|e| io_error(path, e))?;
    if header.iter().ne(COLUMNS.iter().copied()) {
        return Err(BaeError::Report(format!(
            "{}: unexpected header",
            path.display()
        )));
    }
    reader
        .records()
        .map(|rec| parse_row(&rec.map_err(|e| io_error(path, e))?))
        .collect()
}

/// Linear-interpolation quantile (`q` in `[0, 1]`) of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub metric: String,
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
    /// Fraction of values strictly above each threshold, for improvements.
    pub above: Vec<(f64, f64)>,
}

impl MetricSummary {
    /// `None` when no values are present.
    pub fn from_values(metric: &str, values: &[f64], thresholds: &[f64]) -> Option<Self> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let above = thresholds
            .iter()
            .map(|&t| {
                (
                    t,
                    v.iter().filter(|&&x| x > t).count() as f64 / v.len() as f64,
                )
            })
            .collect();
        Some(MetricSummary {
            metric: metric.to_string(),
            count: v.len(),
            median: quantile(&v, 0.5),
            q1: quantile(&v, 0.25),
            q3: quantile(&v, 0.75),
            min: v[0],
            max: v[v.len() - 1],
            above,
        })
    }
}

/// Statistics for one `(sigma_true, amplitude, snr)` group; `None` fields
/// mean "all values".
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub sigma_true: Option<f64>,
    pub amplitude: Option<f64>,
    pub snr_db: Option<f64>,
    pub trials: usize,
    pub failures: usize,
    pub metrics: Vec<MetricSummary>,
}

impl GroupSummary {
    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.metric == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub groups: Vec<GroupSummary>,
}

impl Summary {
    pub fn group(
        &self,
        sigma_true: Option<f64>,
        amplitude: Option<f64>,
        snr_db: Option<f64>,
    ) -> Option<&GroupSummary> {
        self.groups
            .iter()
            .find(|g| g.sigma_true == sigma_true && g.amplitude == amplitude && g.snr_db == snr_db)
    }
}

fn metric_names() -> Vec<String> {
    let mut names: Vec<String> = ["x_st_mm", "x_bae_mm", "x_alt_mm", "dx_bae_mm", "dx_alt_mm"]
        .map(String::from)
        .to_vec();
    names.extend(Method::ALL.iter().map(|m| format!("sigma_{}", m.tag())));
    names.extend(Method::ALL.iter().map(|m| format!("err_pct_{}", m.tag())));
    names
}

fn metric_value(row: &TrialRow, name: &str) -> Option<f64> {
    match name {
        "x_st_mm" => row.x_st,
        "x_bae_mm" => row.x_bae,
        "x_alt_mm" => row.x_alt,
        "dx_bae_mm" => row.dx_bae(),
        "dx_alt_mm" => row.dx_alt(),
        _ => {
            let (tag, error) = match name.strip_prefix("sigma_") {
                Some(tag) => (tag, false),
                None => (name.strip_prefix("err_pct_")?, true),
            };
            let method: Method = tag.parse().ok()?;
            if error {
                row.sigma_error_pct(method)
            } else {
                row.sigma(method)
            }
        }
    }
}

fn distinct(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for v in values {
        if !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

fn summarize(
    rows: &[&TrialRow],
    key: (Option<f64>, Option<f64>, Option<f64>),
    thresholds: &[f64],
) -> GroupSummary {
    let metrics = metric_names()
        .iter()
        .filter_map(|name| {
            let values: Vec<f64> = rows.iter().filter_map(|r| metric_value(r, name)).collect();
            let t: &[f64] = if name.starts_with("dx_") {
                thresholds
            } else {
                &[]
            };
            MetricSummary::from_values(name, &values, t)
        })
        .collect();
    GroupSummary {
        sigma_true: key.0,
        amplitude: key.1,
        snr_db: key.2,
        trials: rows.len(),
        failures: rows.iter().filter(|r| r.status != "ok").count(),
        metrics,
    }
}

/// Per-group box statistics plus the all-trials and per-`sigma_true`
/// groups. Groups follow first-appearance order of the report rows.
pub fn aggregate(report: &ExperimentReport) -> Result<Summary> {
    if report.rows.is_empty() {
        return Err(BaeError::Config("cannot aggregate an empty report".into()));
    }
    let rows = &report.rows;
    let t = &report.thresholds_mm;
    let all: Vec<&TrialRow> = rows.iter().collect();
    let mut groups = vec![summarize(&all, (None, None, None), t)];
    for s in distinct(rows.iter().map(|r| r.sigma_true)) {
        let sel: Vec<&TrialRow> = rows.iter().filter(|r| r.sigma_true == s).collect();
        groups.push(summarize(&sel, (Some(s), None, None), t));
    }
    for snr in distinct(rows.iter().map(|r| r.snr_db)) {
        let sel: Vec<&TrialRow> = rows.iter().filter(|r| r.snr_db == snr).collect();
        groups.push(summarize(&sel, (None, None, Some(snr)), t));
    }
    for s in distinct(rows.iter().map(|r| r.sigma_true)) {
        for a in distinct(rows.iter().map(|r| r.amplitude)) {
            for snr in distinct(rows.iter().map(|r| r.snr_db)) {
                let sel: Vec<&TrialRow> = rows
                    .iter()
                    .filter(|r| r.sigma_true == s && r.amplitude == a && r.snr_db == snr)
                    .collect();
                if !sel.is_empty() {
                    groups.push(summarize(&sel, (Some(s), Some(a), Some(snr)), t));
                }
            }
        }
    }
    Ok(Summary { groups })
}

/// One-sided sign test p-value for "the first sample is worse", i.e.
/// `P(B >= #{a_i < b_i})` with `B ~ Binomial(n, 1/2)` over the `n` untied
/// pairs. Returns 1 when every pair ties.
pub fn sign_test_worse(pairs: &[(f64, f64)]) -> f64 {
    let worse = pairs.iter().filter(|(a, b)| a < b).count();
    let n = pairs.iter().filter(|(a, b)| a != b).count();
    if n == 0 {
        return 1.0;
    }
    // Tail sum in log space; n is at most a few thousand.
    let ln_choose =
        |n: usize, k: usize| -> f64 { (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum() };
    (worse..=n)
        .map(|k| (ln_choose(n, k) - n as f64 * std::f64::consts::LN_2).exp())
        .sum::<f64>()
        .min(1.0)
}

fn write_csv(
    path: &Path,
    header: &[&str],
    records: impl Iterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_path(path)
        .map_err(|e| io_error(path, e))?;
    w.write_record(header).map_err(|e| io_error(path, e))?;
    for rec in records {
        w.write_record(&rec).map_err(|e| io_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

fn group_label(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_else(|| "all".into())
}

const HISTOGRAM_BINS: usize = 30;
const HISTOGRAM_WIDTH_MM: f64 = 1.0;

/// Creates `dir` if needed; a non-empty `dir` is an error unless
/// `overwrite` is set.
pub fn prepare_output_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| BaeError::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !overwrite {
            return Err(BaeError::Report(format!(
                "{}: directory is not empty, pass the overwrite flag to replace its reports",
                dir.display()
            )));
        }
        Ok(())
    } else {
        fs::create_dir_all(dir).map_err(|e| BaeError::io(dir, e))
    }
}

/// Writes `trials.csv`, `summary.csv`, `histogram.csv` (1 mm bins over
/// [0, 30] mm plus an overflow bin) and `boxplot.csv` into `out_dir`.
/// A non-empty `out_dir` is only written to with `overwrite`.
pub fn emit_report(
    report: &ExperimentReport,
    out_dir: impl AsRef<Path>,
    overwrite: bool,
) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    prepare_output_dir(dir, overwrite)?;
    let summary = aggregate(report)?;
    let mut written = Vec::new();

    let path = dir.join("trials.csv");
    write_csv(&path, COLUMNS, report.rows.iter().map(row_record))?;
    written.push(path);

    let thresholds = &report.thresholds_mm;
    let mut header: Vec<String> = [
        "sigma_true",
        "amplitude",
        "snr_db",
        "trials",
        "failures",
        "metric",
        "count",
        "median",
        "q1",
        "q3",
        "min",
        "max",
    ]
    .map(String::from)
    .to_vec();
    header.extend(thresholds.iter().map(|t| format!("frac_above_{t}mm")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let records = summary.groups.iter().flat_map(|g| {
        g.metrics.iter().map(move |m| {
            let mut rec = vec![
                group_label(g.sigma_true),
                group_label(g.amplitude),
                group_label(g.snr_db),
                g.trials.to_string(),
                g.failures.to_string(),
                m.metric.clone(),
                m.count.to_string(),
                m.median.to_string(),
                m.q1.to_string(),
                m.q3.to_string(),
                m.min.to_string(),
                m.max.to_string(),
            ];
            rec.extend(thresholds.iter().map(|t| {
                m.above
                    .iter()
                    .find(|(x, _)| x == t)
                    .map(|(_, f)| f.to_string())
                    .unwrap_or_default()
            }));
            rec
        })
    });
    let path = dir.join("summary.csv");
    write_csv(&path, &header_refs, records)?;
    written.push(path);

    let mut hist = Vec::new();
    for s in distinct(report.rows.iter().map(|r| r.sigma_true)) {
        for (name, get) in [
            (
                "standard",
                (|r: &TrialRow| r.x_st) as fn(&TrialRow) -> Option<f64>,
            ),
            ("bae", |r: &TrialRow| r.x_bae),
            ("alternating", |r: &TrialRow| r.x_alt),
        ] {
            let mut counts = [0usize; HISTOGRAM_BINS + 1];
            for v in report
                .rows
                .iter()
                .filter(|r| r.sigma_true == s)
                .filter_map(get)
            {
                let bin = ((v / HISTOGRAM_WIDTH_MM).floor().max(0.0) as usize).min(HISTOGRAM_BINS);
                counts[bin] += 1;
            }
            for (b, &c) in counts.iter().enumerate() {
                let lo = b as f64 * HISTOGRAM_WIDTH_MM;
                let hi = if b == HISTOGRAM_BINS {
                    "inf".to_string()
                } else {
                    (lo + HISTOGRAM_WIDTH_MM).to_string()
                };
                hist.push(vec![
                    s.to_string(),
                    name.to_string(),
                    lo.to_string(),
                    hi,
                    c.to_string(),
                ]);
            }
        }
    }
    let path = dir.join("histogram.csv");
    write_csv(
        &path,
        &["sigma_true", "solution", "bin_lo_mm", "bin_hi_mm", "count"],
        hist.into_iter(),
    )?;
    written.push(path);

    let mut boxes = Vec::new();
    for g in summary
        .groups
        .iter()
        .filter(|g| g.sigma_true.is_some() && g.amplitude.is_some())
    {
        for m in &g.metrics {
            let sel: Vec<f64> = report
                .rows
                .iter()
                .filter(|r| {
                    Some(r.sigma_true) == g.sigma_true
                        && Some(r.amplitude) == g.amplitude
                        && Some(r.snr_db) == g.snr_db
                })
                .filter_map(|r| metric_value(r, &m.metric))
                .filter(|v| v.is_finite())
                .collect();
            let iqr = m.q3 - m.q1;
            let (lo_fence, hi_fence) = (m.q1 - 1.5 * iqr, m.q3 + 1.5 * iqr);
            let whisker_lo = sel
                .iter()
                .copied()
                .filter(|&v| v >= lo_fence)
                .fold(f64::INFINITY, f64::min);
            let whisker_hi = sel
                .iter()
                .copied()
                .filter(|&v| v <= hi_fence)
                .fold(f64::NEG_INFINITY, f64::max);
            let outliers = sel
                .iter()
                .filter(|&&v| v < lo_fence || v > hi_fence)
                .count();
            boxes.push(vec![
                group_label(g.sigma_true),
                group_label(g.amplitude),
                group_label(g.snr_db),
                m.metric.clone(),
                m.median.to_string(),
                m.q1.to_string(),
                m.q3.to_string(),
                whisker_lo.to_string(),
                whisker_hi.to_string(),
                outliers.to_string(),
            ]);
        }
    }
    let path = dir.join("boxplot.csv");
    write_csv(
        &path,
        &[
            "sigma_true",
            "amplitude",
            "snr_db",
            "metric",
            "median",
            "q1",
            "q3",
            "whisker_lo",
            "whisker_hi",
            "outliers",
        ],
        boxes.into_iter(),
    )?;
    written.push(path);
    Ok(written)
}
