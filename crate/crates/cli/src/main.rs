//! `xmhash`: generate data, train, encode, evaluate and run ablations.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use xmhash_core::dataset::{generate_synthetic, load_dataset, save_dataset};
use xmhash_core::eval::write_report;
use xmhash_core::experiment::{
    encode_dataset_split, evaluate_codes, format_ablation_table, run_ablation, run_training,
    write_eval_artifacts, AblationRow, AblationVariant, Modality,
};
use xmhash_core::models::checkpoint::load_checkpoint;
use xmhash_core::retrieval::{read_codes, write_codes};
use xmhash_core::trainer::AblationSwitch;
use xmhash_core::{Direction, EmbeddingDataset, EvalConfig, Split, SyntheticConfig};

use config::{add_switches, manifest_path, output_root, Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "xmhash",
    version,
    about = "Unsupervised cross-modal contrastive hashing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a clustered synthetic dataset
    GenSynth(GenSynthArgs),
    /// Train the hash networks and save a checkpoint
    Train(TrainArgs),
    /// Encode one split of one modality into a code file
    Encode(EncodeArgs),
    /// Score query codes against retrieval codes
    Eval(EvalArgs),
    /// Run the ablation matrix and print a summary table
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    #[arg(long, default_value_t = SyntheticConfig::default().n_clusters)]
    clusters: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().n_pairs)]
    pairs: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().d_img)]
    d_img: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().d_txt)]
    d_txt: usize,
    /// Per-pair noise around the cluster anchor
    #[arg(long, default_value_t = SyntheticConfig::default().noise_sigma)]
    noise: f64,
    /// Extra noise of the augmented views
    #[arg(long, default_value_t = SyntheticConfig::default().aug_sigma)]
    aug: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory [default: $XMHASH_OUT/synthetic]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Comma-separated loss switches: no_adv, no_quant, no_bb, no_intra_img, no_intra_txt
    #[arg(long, value_delimiter = ',')]
    ablation: Vec<AblationSwitch>,
    /// Also encode the query/retrieval splits and write both evaluation reports
    #[arg(long)]
    evaluate: bool,
    /// Run directory [default: from --config, else $XMHASH_OUT/train-b<bits>-s<seed>]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// train, query or retrieval
    #[arg(long)]
    split: Split,
    /// image or text
    #[arg(long)]
    modality: Modality,
    /// Code file [default: $XMHASH_OUT/<split>_<modality>.codes]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Code file of the queries
    #[arg(long)]
    query: PathBuf,
    /// Code file of the retrieval set
    #[arg(long)]
    retrieval: PathBuf,
    /// Dataset supplying the labels
    #[arg(long)]
    dataset: PathBuf,
    /// img_to_txt or txt_to_img
    #[arg(long, default_value = "img_to_txt")]
    direction: Direction,
    #[arg(long, default_value_t = EvalConfig::default().map_k)]
    map_k: usize,
    /// Precision is reported for K = 1..=this
    #[arg(long, default_value_t = EvalConfig::default().precision_k_max)]
    precision_k_max: usize,
    /// Report path; the CSV goes next to it [default: $XMHASH_OUT/eval_<direction>.toml]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Comma-separated variants (DUCH, NA, NQ, NB, CL, CL-I, CL-T) [default: all]
    #[arg(long, alias = "ablation", value_delimiter = ',')]
    variants: Vec<AblationVariant>,
    /// Comma-separated seeds
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Output directory [default: $XMHASH_OUT/ablation]
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a),
        Command::Encode(a) => encode(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load(path: &Path) -> Result<EmbeddingDataset> {
    let manifest = manifest_path(path);
    load_dataset(&manifest).with_context(|| format!("loading dataset {}", manifest.display()))
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, toml::to_string(value)?).with_context(|| format!("writing {}", path.display()))
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        n_clusters: a.clusters,
        n_pairs: a.pairs,
        d_img: a.d_img,
        d_txt: a.d_txt,
        noise_sigma: a.noise,
        aug_sigma: a.aug,
        seed: a.seed,
    };
    let out = a.out.unwrap_or_else(|| output_root().join("synthetic"));
    let ds = generate_synthetic(&cfg)?;
    let manifest = save_dataset(&ds, &out)?;
    write_toml(&out.join("synthetic_config.toml"), &cfg)?;
    println!("{}", manifest.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.overrides.resolve()?;
    add_switches(&mut cfg, &a.ablation);
    if let Some(out) = a.out {
        cfg.out = Some(out);
    }
    let out = cfg.out.clone().unwrap_or_else(|| {
        output_root().join(format!(
            "train-b{}-s{}",
            cfg.train.code_bits, cfg.train.seed
        ))
    });
    cfg.out = Some(out.clone());
    let Some(dataset) = cfg.dataset.clone() else {
        bail!("no dataset given (use --dataset or set `dataset` in the config file)");
    };
    cfg.train.validate()?;
    cfg.eval.validate()?;
    let ds = load(&dataset)?;
    cfg.write_echo(&out)?;
    log::info!("effective config:\n{}", cfg.to_toml());

    let outputs = run_training(&ds, &cfg.train, &out)?;
    if let Some(last) = outputs.report.records.last() {
        log::info!(
            "final epoch {}: L_C_inter {:.6}",
            last.epoch,
            last.l_c_inter
        );
    }
    if a.evaluate {
        let (i2t, t2i) = write_eval_artifacts(&outputs.bundle, &ds, &cfg.eval, &out)?;
        for r in [&i2t, &t2i] {
            println!("{} mAP@{}: {:.6}", r.direction.name(), r.map_k, r.map_at_k);
            if r.has_nan() {
                bail!("{} report contains NaN", r.direction.name());
            }
        }
    }
    println!("{}", outputs.checkpoint.display());
    Ok(())
}

fn encode(a: EncodeArgs) -> Result<()> {
    let (bundle, _) = load_checkpoint(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let ds = load(&a.dataset)?;
    let split = format!("{:?}", a.split).to_lowercase();
    let modality = format!("{:?}", a.modality).to_lowercase();
    let out = a
        .out
        .unwrap_or_else(|| output_root().join(format!("{split}_{modality}.codes")));
    log::info!(
        "encode: checkpoint {} dataset {} split {split} modality {modality}",
        a.checkpoint.display(),
        a.dataset.display()
    );
    let (codes, ids) = encode_dataset_split(&bundle, &ds, a.split, a.modality)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_codes(&out, &codes, &ids)?;
    println!(
        "{} codes of {} bits -> {}",
        codes.len(),
        codes.bits(),
        out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = EvalConfig {
        map_k: a.map_k,
        precision_k_max: a.precision_k_max,
        direction: a.direction,
        keep_per_query: false,
    };
    cfg.validate()?;
    let (q, qids) =
        read_codes(&a.query).with_context(|| format!("reading {}", a.query.display()))?;
    let (r, rids) =
        read_codes(&a.retrieval).with_context(|| format!("reading {}", a.retrieval.display()))?;
    let ds = load(&a.dataset)?;
    log::info!(
        "eval: direction {} map_k {} precision K 1..={}",
        cfg.direction.name(),
        cfg.map_k,
        cfg.precision_k_max
    );
    let report = evaluate_codes(&q, &qids, &r, &rids, &ds.labels, &cfg)?;
    let out = a
        .out
        .unwrap_or_else(|| output_root().join(format!("eval_{}.toml", cfg.direction.name())));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_report(&report, &out)?;
    println!(
        "{} mAP@{}: {:.6}",
        cfg.direction.name(),
        cfg.map_k,
        report.map_at_k
    );
    if report.has_nan() {
        bail!("report {} contains NaN", out.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationSummary {
    config: RunConfig,
    rows: Vec<AblationRow>,
    failed: Vec<String>,
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = a.overrides.resolve()?;
    let out = a
        .out
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| output_root().join("ablation"));
    cfg.out = Some(out.clone());
    let Some(dataset) = cfg.dataset.clone() else {
        bail!("no dataset given (use --dataset or set `dataset` in the config file)");
    };
    if a.seeds.is_empty() {
        bail!("at least one seed is required");
    }
    cfg.train.validate()?;
    cfg.eval.validate()?;
    let variants = if a.variants.is_empty() {
        AblationVariant::ALL.to_vec()
    } else {
        a.variants
    };
    let ds = load(&dataset)?;
    cfg.write_echo(&out)?;

    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for v in variants {
        match run_ablation(&ds, &cfg.train, &cfg.eval, &[v], &a.seeds) {
            Ok(mut r) => rows.append(&mut r),
            Err(e) => {
                log::error!("{} failed: {e}", v.label());
                failed.push(format!("{}: {e}", v.label()));
            }
        }
    }
    let mut table = format_ablation_table(&rows, cfg.eval.map_k);
    for f in &failed {
        table.push_str(&format!("FAILED {f}\n"));
    }
    print!("{table}");
    let path = out.join("ablation.txt");
    fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
    let n_failed = failed.len();
    write_toml(
        &out.join("ablation.toml"),
        &AblationSummary {
            config: cfg,
            rows,
            failed,
        },
    )?;
    if n_failed > 0 {
        bail!("{n_failed} ablation configuration(s) failed");
    }
    Ok(())
}
