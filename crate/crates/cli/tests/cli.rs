use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use xmhash_core::dataset::{load_dataset, MANIFEST_FILE};
use xmhash_core::models::checkpoint::load_checkpoint;
use xmhash_core::retrieval::read_codes;
use xmhash_core::Split;

fn xmhash(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmhash"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("XMHASH_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = xmhash(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small dataset that trains in well under a second per epoch.
fn small_dataset(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    ok(&[
        "gen-synth",
        "--pairs",
        "300",
        "--d-img",
        "12",
        "--d-txt",
        "16",
        "--seed",
        "3",
        "--out",
        s(&out),
    ]);
    out
}

const TINY: &[&str] = &[
    "--epochs",
    "1",
    "--hidden",
    "24",
    "--disc-hidden",
    "8",
    "--batch",
    "32",
];

fn train_tiny(data: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--dataset", s(data), "--out", s(out)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args)
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_synth_defaults_are_loadable() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("d");
    let stdout = ok(&["gen-synth", "--out", s(&out)]);
    assert!(stdout.trim().ends_with(MANIFEST_FILE));
    let ds = load_dataset(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(ds.n(), 2000);
    assert!(out.join("synthetic_config.toml").exists());
}

#[test]
fn gen_synth_is_byte_reproducible() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen-synth", "--pairs", "100", "--seed", "9", "--out", s(d)]);
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn gen_synth_rejects_one_cluster() {
    let tmp = TempDir::new().unwrap();
    let out = xmhash(&[
        "gen-synth",
        "--clusters",
        "1",
        "--out",
        s(&tmp.path().join("d")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 2 clusters"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(xmhash(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(xmhash(&["train", "--bits", "many"]).status.code(), Some(2));
    assert_eq!(
        xmhash(&["train", "--ablation", "no_everything"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(xmhash(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(xmhash(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_accepts_every_code_length() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path());
    for bits in ["16", "32", "64", "128"] {
        let out = tmp.path().join(format!("run{bits}"));
        train_tiny(&data, &out, &["--bits", bits]);
        let (bundle, _) = load_checkpoint(&out.join("checkpoint.bin")).unwrap();
        assert_eq!(bundle.code_bits(), bits.parse::<usize>().unwrap());
        for f in [
            "run_config.toml",
            "train_config.json",
            "train_report.jsonl",
            "timings.jsonl",
        ] {
            assert!(out.join(f).exists(), "{f} missing for {bits} bits");
        }
    }
}

#[test]
fn ablation_flag_zeroes_both_intra_terms() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path());
    let out = tmp.path().join("cl");
    train_tiny(&data, &out, &["--ablation", "no_intra_img,no_intra_txt"]);
    let echo = fs::read_to_string(out.join("run_config.toml")).unwrap();
    assert!(
        echo.contains("no_intra_img") && echo.contains("no_intra_txt"),
        "{echo}"
    );
    for line in fs::read_to_string(out.join("train_report.jsonl"))
        .unwrap()
        .lines()
    {
        assert!(line.contains("\"L_C_img\":0.0"), "{line}");
        assert!(line.contains("\"L_C_txt\":0.0"), "{line}");
    }
}

#[test]
fn flags_take_precedence_over_config_file() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path());
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        format!(
            "dataset = {:?}\n[train]\ncode_bits = 32\nepochs = 1\nhidden_dim = 16\n\
             disc_hidden_dim = 8\nbatch_size = 32\nseed = 4\n[train.weights]\ntau = 0.25\nalpha = 0.5\n",
            s(&data)
        ),
    )
    .unwrap();
    let out = tmp.path().join("run");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--bits",
        "16",
        "--alpha",
        "0.0",
        "--out",
        s(&out),
    ]);
    let echo = fs::read_to_string(out.join("run_config.toml")).unwrap();
    let v: toml::Table = toml::from_str(&echo).unwrap();
    let train = v["train"].as_table().unwrap();
    assert_eq!(train["code_bits"].as_integer(), Some(16));
    assert_eq!(train["seed"].as_integer(), Some(4));
    assert_eq!(train["weights"]["alpha"].as_float(), Some(0.0));
    assert_eq!(train["weights"]["tau"].as_float(), Some(0.25));
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let tmp = TempDir::new().unwrap();
    let out = xmhash(&[
        "train",
        "--dataset",
        s(&tmp.path().join("nope")),
        "--epochs",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = xmhash(&["train", "--epochs", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no dataset"));
}

#[test]
fn output_root_comes_from_environment() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_xmhash"))
        .args(["gen-synth", "--pairs", "50"])
        .env("XMHASH_OUT", &root)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(root.join("synthetic").join(MANIFEST_FILE).exists());
}

#[test]
fn encode_then_eval_both_directions() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path());
    let run = tmp.path().join("run");
    train_tiny(&data, &run, &["--bits", "16"]);
    let ckpt = run.join("checkpoint.bin");
    let ds = load_dataset(&data.join(MANIFEST_FILE)).unwrap();

    let mut files = Vec::new();
    for split in ["query", "retrieval"] {
        for modality in ["image", "text"] {
            let path = tmp.path().join(format!("{split}_{modality}.codes"));
            ok(&[
                "encode",
                "--checkpoint",
                s(&ckpt),
                "--dataset",
                s(&data),
                "--split",
                split,
                "--modality",
                modality,
                "--out",
                s(&path),
            ]);
            let (codes, ids) = read_codes(&path).unwrap();
            let split: Split = split.parse().unwrap();
            assert_eq!(codes.len(), ds.indices(split).len());
            assert_eq!(
                ids,
                ds.indices(split)
                    .iter()
                    .map(|&i| i as u64)
                    .collect::<Vec<_>>()
            );
            files.push(path);
        }
    }
    let again = tmp.path().join("again.codes");
    ok(&[
        "encode",
        "--checkpoint",
        s(&ckpt),
        "--dataset",
        s(&data),
        "--split",
        "query",
        "--modality",
        "image",
        "--out",
        s(&again),
    ]);
    assert_eq!(fs::read(&again).unwrap(), fs::read(&files[0]).unwrap());

    for (dir, q, r) in [
        ("img_to_txt", &files[0], &files[3]),
        ("txt_to_img", &files[1], &files[2]),
    ] {
        let report = tmp.path().join(format!("{dir}.toml"));
        let stdout = ok(&[
            "eval",
            "--query",
            s(q),
            "--retrieval",
            s(r),
            "--dataset",
            s(&data),
            "--direction",
            dir,
            "--out",
            s(&report),
        ]);
        assert!(stdout.starts_with(&format!("{dir} mAP@20: ")), "{stdout}");
        let text = fs::read_to_string(&report).unwrap();
        assert!(text.contains(&format!("direction = \"{dir}\"")), "{text}");
        let csv = fs::read_to_string(report.with_extension("csv")).unwrap();
        assert_eq!(csv.lines().count(), 101);
    }

    let missing = xmhash(&[
        "eval",
        "--query",
        s(&tmp.path().join("absent.codes")),
        "--retrieval",
        s(&files[3]),
        "--dataset",
        s(&data),
    ]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn train_evaluate_writes_reports() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path());
    let run = tmp.path().join("run");
    let stdout = train_tiny(&data, &run, &["--bits", "16", "--evaluate"]);
    assert!(stdout.contains("img_to_txt mAP@20") && stdout.contains("txt_to_img mAP@20"));
    for f in [
        "eval_img_to_txt.toml",
        "eval_txt_to_img.csv",
        "query_image.codes",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
}

#[test]
fn ablate_prints_seven_rows_deterministically() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path());
    let mut tables = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let mut args = vec![
            "ablate",
            "--dataset",
            s(&data),
            "--seeds",
            "5",
            "--out",
            s(&out),
        ];
        args.extend_from_slice(TINY);
        args.extend_from_slice(&["--bits", "16"]);
        let stdout = ok(&args);
        assert_eq!(
            fs::read_to_string(out.join("ablation.txt")).unwrap(),
            stdout
        );
        assert!(out.join("ablation.toml").exists());
        tables.push(stdout);
    }
    assert_eq!(tables[0], tables[1]);
    let rows: Vec<&str> = tables[0].lines().skip(1).collect();
    let labels: Vec<&str> = rows
        .iter()
        .map(|r| r.split_whitespace().next().unwrap())
        .collect();
    assert_eq!(
        labels,
        [
            "DUCH",
            "DUCH-NA",
            "DUCH-NQ",
            "DUCH-NB",
            "DUCH-CL",
            "DUCH-CL-I",
            "DUCH-CL-T"
        ]
    );
}

#[test]
fn ablate_subset_and_unknown_variant() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path());
    let out = tmp.path().join("sub");
    let mut args = vec![
        "ablate",
        "--dataset",
        s(&data),
        "--ablation",
        "CL,NA",
        "--seeds",
        "0,1",
        "--out",
        s(&out),
    ];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--bits", "16"]);
    let stdout = ok(&args);
    assert_eq!(stdout.lines().count(), 3);
    assert_eq!(
        xmhash(&["ablate", "--variants", "DUCH-ZZ"]).status.code(),
        Some(2)
    );
}
