//! mAP@K and precision@K for cross-modal Hamming retrieval.
//!
//! An item is relevant to a query when both carry the same class label.
//! Average precision at K is normalized by `min(R, K)` where `R` is the number
//! of relevant items in the retrieval set.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{PackedCodes, RetrievalIndex};

pub const REPORT_FORMAT: &str = "xmhash-eval/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Image queries against text codes.
    ImgToTxt,
    /// Text queries against image codes.
    TxtToImg,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::ImgToTxt => "img_to_txt",
            Direction::TxtToImg => "txt_to_img",
        }
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "img_to_txt" | "i2t" => Ok(Direction::ImgToTxt),
            "txt_to_img" | "t2i" => Ok(Direction::TxtToImg),
            other => Err(Error::Config(format!("unknown direction {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub map_k: usize,
    /// Precision is reported for K = 1..=precision_k_max.
    pub precision_k_max: usize,
    pub direction: Direction,
    pub keep_per_query: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            map_k: 20,
            precision_k_max: 100,
            direction: Direction::ImgToTxt,
            keep_per_query: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.map_k == 0 {
            return Err(Error::Config("map_k must be at least 1".into()));
        }
        if self.precision_k_max == 0 {
            return Err(Error::Config("precision range must be non-empty".into()));
        }
        Ok(())
    }
}

#[inline]
pub fn is_relevant(label_q: u32, label_r: u32) -> bool {
    label_q == label_r
}

/// `(Σ_{i≤K} P@i · rel_i) / min(R, K)`, or 0 when `R = 0`.
pub fn average_precision_at_k(ranked_relevance: &[bool], k: usize, total_relevant: usize) -> f64 {
    let denom = total_relevant.min(k);
    if denom == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in ranked_relevance.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / denom as f64
}

/// Queries and a labeled retrieval index for one retrieval direction.
pub struct EvalInput<'a> {
    pub queries: &'a PackedCodes,
    pub query_labels: &'a [u32],
    pub index: &'a RetrievalIndex,
    /// Labels aligned with index positions.
    pub index_labels: &'a [u32],
}

impl EvalInput<'_> {
    fn validate(&self) -> Result<()> {
        if self.queries.is_empty() {
            return Err(Error::Config("query split is empty".into()));
        }
        if self.query_labels.len() != self.queries.len()
            || self.index_labels.len() != self.index.len()
        {
            return Err(Error::dim("eval", "labels do not match code counts"));
        }
        if self.queries.bits() != self.index.codes().bits() {
            return Err(Error::dim(
                "eval",
                format!(
                    "query codes have {} bits, index codes {}",
                    self.queries.bits(),
                    self.index.codes().bits()
                ),
            ));
        }
        Ok(())
    }

    /// Relevance flags of the top `k` results for query `q`, plus `R`.
    fn ranked(&self, q: usize, k: usize) -> Result<(Vec<bool>, usize)> {
        let lq = self.query_labels[q];
        let hits = self.index.nearest(self.queries.code(q), k)?;
        let rel = hits
            .iter()
            .map(|&(pos, _)| is_relevant(lq, self.index_labels[pos]))
            .collect();
        let total = self
            .index_labels
            .iter()
            .filter(|&&l| is_relevant(lq, l))
            .count();
        Ok((rel, total))
    }
}

/// Metrics for one retrieval direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub direction: Direction,
    pub code_bits: usize,
    pub map_k: usize,
    pub n_queries: usize,
    pub n_retrieval: usize,
    pub map_at_k: f64,
    pub precision_k: Vec<usize>,
    pub precision: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_query_ap: Option<Vec<f64>>,
}

impl EvalReport {
    pub fn precision_curve(&self) -> Vec<(usize, f64)> {
        self.precision_k
            .iter()
            .copied()
            .zip(self.precision.iter().copied())
            .collect()
    }

    pub fn has_nan(&self) -> bool {
        self.map_at_k.is_nan()
            || self.precision.iter().any(|v| v.is_nan())
            || self
                .per_query_ap
                .as_ref()
                .is_some_and(|v| v.iter().any(|x| x.is_nan()))
    }
}

/// Mean AP@`map_k` over all queries, summed in query order.
pub fn map_at_k(input: &EvalInput<'_>, cfg: &EvalConfig) -> Result<f64> {
    input.validate()?;
    cfg.validate()?;
    let mut sum = 0.0;
    for q in 0..input.queries.len() {
        let (rel, r) = input.ranked(q, cfg.map_k)?;
        sum += average_precision_at_k(&rel, cfg.map_k, r);
    }
    Ok(sum / input.queries.len() as f64)
}

/// `(K, P@K)` for `K = 1..=min(precision_k_max, n_retrieval)`.
pub fn precision_curve(input: &EvalInput<'_>, cfg: &EvalConfig) -> Result<Vec<(usize, f64)>> {
    input.validate()?;
    cfg.validate()?;
    let kmax = cfg.precision_k_max.min(input.index.len());
    if kmax < cfg.precision_k_max {
        log::warn!(
            "retrieval set has {} items; precision curve truncated at K = {kmax}",
            input.index.len()
        );
    }
    let mut hits_at = vec![0.0; kmax];
    for q in 0..input.queries.len() {
        let (rel, _) = input.ranked(q, kmax)?;
        let mut hits = 0usize;
        for (i, &r) in rel.iter().enumerate() {
            hits += r as usize;
            hits_at[i] += hits as f64 / (i + 1) as f64;
        }
    }
    let nq = input.queries.len() as f64;
    Ok(hits_at
        .into_iter()
        .enumerate()
        .map(|(i, s)| (i + 1, s / nq))
        .collect())
}

/// Computes mAP and the precision curve with a single ranking per query.
pub fn evaluate(input: &EvalInput<'_>, cfg: &EvalConfig) -> Result<EvalReport> {
    input.validate()?;
    cfg.validate()?;
    let n = input.index.len();
    let kmax = cfg.precision_k_max.min(n);
    if kmax < cfg.precision_k_max {
        log::warn!("retrieval set has {n} items; precision curve truncated at K = {kmax}");
    }
    let depth = cfg.map_k.max(kmax);
    let nq = input.queries.len();
    let mut ap_sum = 0.0;
    let mut per_query = Vec::with_capacity(nq);
    let mut prec_sum = vec![0.0; kmax];
    for q in 0..nq {
        let (rel, r) = input.ranked(q, depth)?;
        let ap = average_precision_at_k(&rel, cfg.map_k, r);
        ap_sum += ap;
        per_query.push(ap);
        let mut hits = 0usize;
        for (i, &flag) in rel.iter().take(kmax).enumerate() {
            hits += flag as usize;
            prec_sum[i] += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(EvalReport {
        format: REPORT_FORMAT.into(),
        direction: cfg.direction,
        code_bits: input.queries.bits(),
        map_k: cfg.map_k,
        n_queries: nq,
        n_retrieval: n,
        map_at_k: ap_sum / nq as f64,
        precision_k: (1..=kmax).collect(),
        precision: prec_sum.into_iter().map(|s| s / nq as f64).collect(),
        per_query_ap: cfg.keep_per_query.then_some(per_query),
    })
}

/// Floats are written with 17 significant digits so that parsing recovers them exactly.
fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.16e}")
    }
}

fn fmt_list<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    let parts: Vec<String> = items.iter().map(f).collect();
    format!("[{}]", parts.join(", "))
}

/// TOML text of a report.
pub fn report_to_string(r: &EvalReport) -> String {
    let mut s = String::new();
    s.push_str("# cross-modal hashing retrieval report\n");
    s.push_str("# relevance: equal class labels; AP@K normalized by min(R, K)\n");
    writeln!(s, "format = \"{}\"", r.format).unwrap();
    writeln!(s, "direction = \"{}\"", r.direction.name()).unwrap();
    writeln!(s, "code_bits = {}", r.code_bits).unwrap();
    writeln!(s, "map_k = {}", r.map_k).unwrap();
    writeln!(s, "n_queries = {}", r.n_queries).unwrap();
    writeln!(s, "n_retrieval = {}", r.n_retrieval).unwrap();
    writeln!(s, "map_at_k = {}", fmt_f64(r.map_at_k)).unwrap();
    writeln!(
        s,
        "precision_k = {}",
        fmt_list(&r.precision_k, |k| k.to_string())
    )
    .unwrap();
    writeln!(s, "precision = {}", fmt_list(&r.precision, |v| fmt_f64(*v))).unwrap();
    if let Some(ap) = &r.per_query_ap {
        writeln!(s, "per_query_ap = {}", fmt_list(ap, |v| fmt_f64(*v))).unwrap();
    }
    s
}

pub fn report_from_str(text: &str) -> Result<EvalReport> {
    let r: EvalReport =
        toml::from_str(text).map_err(|e| Error::format("eval report", e.to_string()))?;
    if r.format != REPORT_FORMAT {
        return Err(Error::Version {
            found: r.format,
            expected: REPORT_FORMAT.into(),
        });
    }
    Ok(r)
}

/// `K,precision` rows.
pub fn precision_csv(r: &EvalReport) -> String {
    let mut s = String::from("K,precision\n");
    for (k, p) in r.precision_curve() {
        writeln!(s, "{k},{}", fmt_f64(p)).unwrap();
    }
    s
}

/// Path of the precision CSV written alongside a report.
pub fn csv_path(report_path: &Path) -> PathBuf {
    report_path.with_extension("csv")
}

/// Writes the TOML report at `path` and the precision curve next to it.
pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    fs::write(path, report_to_string(report)).map_err(|e| Error::io(path, e))?;
    let csv = csv_path(path);
    fs::write(&csv, precision_csv(report)).map_err(|e| Error::io(&csv, e))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    report_from_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
