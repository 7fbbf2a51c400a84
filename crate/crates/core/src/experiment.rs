//! End-to-end runs: train, encode the evaluation splits, and score both directions.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{EmbeddingDataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_report, Direction, EvalConfig, EvalInput, EvalReport};
use crate::models::checkpoint::save_checkpoint;
use crate::models::ModelBundle;
use crate::retrieval::{encode_split, write_codes, PackedCodes, RetrievalIndex};
use crate::trainer::{train, AblationSwitch, TrainConfig, TrainReport};

/// Rows encoded per eval-mode forward pass.
pub const ENCODE_BATCH: usize = 256;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_REPORT_FILE: &str = "train_report.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const CONFIG_ECHO_FILE: &str = "train_config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" | "img" => Ok(Modality::Image),
            "text" | "txt" => Ok(Modality::Text),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

/// Packed codes for one split and modality; ids are dataset row indices.
pub fn encode_dataset_split(
    bundle: &ModelBundle,
    dataset: &EmbeddingDataset,
    split: Split,
    modality: Modality,
) -> Result<(PackedCodes, Vec<u64>)> {
    let rows = dataset.indices(split);
    let (net, data) = match modality {
        Modality::Image => (&bundle.f, &dataset.x),
        Modality::Text => (&bundle.g, &dataset.y),
    };
    let codes = encode_split(net, &data.select_rows(&rows), ENCODE_BATCH)?;
    Ok((codes, rows.into_iter().map(|i| i as u64).collect()))
}

/// Scores prepared query and retrieval codes. Labels are looked up by id.
pub fn evaluate_codes(
    queries: &PackedCodes,
    query_ids: &[u64],
    retrieval: &PackedCodes,
    retrieval_ids: &[u64],
    labels: &[u32],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let lookup = |ids: &[u64]| -> Result<Vec<u32>> {
        ids.iter()
            .map(|&i| {
                labels.get(i as usize).copied().ok_or_else(|| {
                    Error::Config(format!(
                        "id {i} is outside the {} labeled rows",
                        labels.len()
                    ))
                })
            })
            .collect()
    };
    let query_labels = lookup(query_ids)?;
    let index_labels = lookup(retrieval_ids)?;
    let index = RetrievalIndex::new(retrieval.clone(), retrieval_ids.to_vec())?;
    evaluate(
        &EvalInput {
            queries,
            query_labels: &query_labels,
            index: &index,
            index_labels: &index_labels,
        },
        cfg,
    )
}

/// Query-split codes against retrieval-split codes of the other modality.
pub fn evaluate_direction(
    bundle: &ModelBundle,
    dataset: &EmbeddingDataset,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let (qm, rm) = match cfg.direction {
        Direction::ImgToTxt => (Modality::Image, Modality::Text),
        Direction::TxtToImg => (Modality::Text, Modality::Image),
    };
    let (q, qids) = encode_dataset_split(bundle, dataset, Split::Query, qm)?;
    let (r, rids) = encode_dataset_split(bundle, dataset, Split::Retrieval, rm)?;
    evaluate_codes(&q, &qids, &r, &rids, &dataset.labels, cfg)
}

/// Image→text and text→image reports.
pub fn evaluate_both(
    bundle: &ModelBundle,
    dataset: &EmbeddingDataset,
    cfg: &EvalConfig,
) -> Result<(EvalReport, EvalReport)> {
    let i2t = evaluate_direction(
        bundle,
        dataset,
        &EvalConfig {
            direction: Direction::ImgToTxt,
            ..cfg.clone()
        },
    )?;
    let t2i = evaluate_direction(
        bundle,
        dataset,
        &EvalConfig {
            direction: Direction::TxtToImg,
            ..cfg.clone()
        },
    )?;
    Ok((i2t, t2i))
}

/// Config echo written next to every training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainEcho {
    pub train: TrainConfig,
    /// How the quantization and bit-balance terms are scaled in the report.
    pub binarization_normalization: String,
}

impl TrainEcho {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            train: cfg.clone(),
            binarization_normalization: "divided by batch_rows * code_bits".into(),
        }
    }
}

pub fn config_json(cfg: &TrainConfig) -> String {
    serde_json::to_string_pretty(&TrainEcho::new(cfg)).expect("config serializes")
}

/// Artifacts of [`run_training`].
pub struct TrainOutputs {
    pub bundle: ModelBundle,
    pub report: TrainReport,
    pub checkpoint: PathBuf,
}

/// Trains on the dataset's train split and writes the checkpoint, report,
/// timings and config echo into `out_dir`.
pub fn run_training(
    dataset: &EmbeddingDataset,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutputs> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (bundle, report) = train(&dataset.training_data(), cfg)?;
    let json = config_json(cfg);
    let echo = out_dir.join(CONFIG_ECHO_FILE);
    fs::write(&echo, format!("{json}\n")).map_err(|e| Error::io(&echo, e))?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, &bundle, &json)?;
    let rp = out_dir.join(TRAIN_REPORT_FILE);
    fs::write(&rp, report.to_jsonl()).map_err(|e| Error::io(&rp, e))?;
    let tp = out_dir.join(TIMINGS_FILE);
    fs::write(&tp, report.timings_jsonl()).map_err(|e| Error::io(&tp, e))?;
    Ok(TrainOutputs {
        bundle,
        report,
        checkpoint,
    })
}

/// Encodes the query/retrieval splits of both modalities and writes the code
/// files plus both reports into `out_dir`.
pub fn write_eval_artifacts(
    bundle: &ModelBundle,
    dataset: &EmbeddingDataset,
    cfg: &EvalConfig,
    out_dir: &Path,
) -> Result<(EvalReport, EvalReport)> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (split, modality, name) in [
        (Split::Query, Modality::Image, "query_image.codes"),
        (Split::Query, Modality::Text, "query_text.codes"),
        (Split::Retrieval, Modality::Image, "retrieval_image.codes"),
        (Split::Retrieval, Modality::Text, "retrieval_text.codes"),
    ] {
        let (codes, ids) = encode_dataset_split(bundle, dataset, split, modality)?;
        write_codes(&out_dir.join(name), &codes, &ids)?;
    }
    let (i2t, t2i) = evaluate_both(bundle, dataset, cfg)?;
    write_report(&i2t, &out_dir.join("eval_img_to_txt.toml"))?;
    write_report(&t2i, &out_dir.join("eval_txt_to_img.toml"))?;
    Ok((i2t, t2i))
}

/// Configurations compared in the objective ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    Full,
    NoAdversarial,
    NoQuantization,
    NoBitBalance,
    NoIntraModal,
    NoTextIntra,
    NoImageIntra,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 7] = [
        AblationVariant::Full,
        AblationVariant::NoAdversarial,
        AblationVariant::NoQuantization,
        AblationVariant::NoBitBalance,
        AblationVariant::NoIntraModal,
        AblationVariant::NoTextIntra,
        AblationVariant::NoImageIntra,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::Full => "DUCH",
            AblationVariant::NoAdversarial => "DUCH-NA",
            AblationVariant::NoQuantization => "DUCH-NQ",
            AblationVariant::NoBitBalance => "DUCH-NB",
            AblationVariant::NoIntraModal => "DUCH-CL",
            AblationVariant::NoTextIntra => "DUCH-CL-I",
            AblationVariant::NoImageIntra => "DUCH-CL-T",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            AblationVariant::Full => "original",
            AblationVariant::NoAdversarial => "alpha = 0",
            AblationVariant::NoQuantization => "beta = 0",
            AblationVariant::NoBitBalance => "gamma = 0",
            AblationVariant::NoIntraModal => "lambda1 = 0, lambda2 = 0",
            AblationVariant::NoTextIntra => "lambda2 = 0",
            AblationVariant::NoImageIntra => "lambda1 = 0",
        }
    }

    pub fn switches(self) -> &'static [AblationSwitch] {
        use AblationSwitch::*;
        match self {
            AblationVariant::Full => &[],
            AblationVariant::NoAdversarial => &[NoAdv],
            AblationVariant::NoQuantization => &[NoQuant],
            AblationVariant::NoBitBalance => &[NoBb],
            AblationVariant::NoIntraModal => &[NoIntraImg, NoIntraTxt],
            AblationVariant::NoTextIntra => &[NoIntraTxt],
            AblationVariant::NoImageIntra => &[NoIntraImg],
        }
    }

    /// `base` with this variant's switches added.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.ablation.extend(self.switches().iter().copied());
        cfg
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_uppercase();
        let t = t.strip_prefix("DUCH-").unwrap_or(&t);
        Ok(match t {
            "DUCH" | "FULL" => AblationVariant::Full,
            "NA" => AblationVariant::NoAdversarial,
            "NQ" => AblationVariant::NoQuantization,
            "NB" => AblationVariant::NoBitBalance,
            "CL" => AblationVariant::NoIntraModal,
            "CL-I" => AblationVariant::NoTextIntra,
            "CL-T" => AblationVariant::NoImageIntra,
            _ => return Err(Error::Config(format!("unknown ablation variant {s:?}"))),
        })
    }
}

/// Scores of one variant over all seeds, in seed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub seeds: Vec<u64>,
    pub map_i2t: Vec<f64>,
    pub map_t2i: Vec<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationRow {
    pub fn median_i2t(&self) -> f64 {
        median(&self.map_i2t)
    }

    pub fn median_t2i(&self) -> f64 {
        median(&self.map_t2i)
    }
}

/// Trains and evaluates each variant for each seed, sequentially.
pub fn run_ablation(
    dataset: &EmbeddingDataset,
    base: &TrainConfig,
    eval_cfg: &EvalConfig,
    variants: &[AblationVariant],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let data = dataset.training_data();
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut row = AblationRow {
            variant,
            seeds: seeds.to_vec(),
            map_i2t: Vec::new(),
            map_t2i: Vec::new(),
        };
        for &seed in seeds {
            let mut cfg = variant.apply(base);
            cfg.seed = seed;
            let (bundle, _) = train(&data, &cfg)?;
            let (i2t, t2i) = evaluate_both(&bundle, dataset, eval_cfg)?;
            log::info!(
                "{} seed {seed}: I->T {:.4} T->I {:.4}",
                variant.label(),
                i2t.map_at_k,
                t2i.map_at_k
            );
            row.map_i2t.push(i2t.map_at_k);
            row.map_t2i.push(t2i.map_at_k);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Fixed-width text table with per-variant medians.
pub fn format_ablation_table(rows: &[AblationRow], map_k: usize) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{:<10} {:<26} {:>10} {:>10}",
        "Method",
        "Configuration",
        format!("I->T@{map_k}"),
        format!("T->I@{map_k}")
    )
    .unwrap();
    for r in rows {
        writeln!(
            s,
            "{:<10} {:<26} {:>10.4} {:>10.4}",
            r.variant.label(),
            r.variant.description(),
            r.median_i2t(),
            r.median_t2i()
        )
        .unwrap();
    }
    s
}
