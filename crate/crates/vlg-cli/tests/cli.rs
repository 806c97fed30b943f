//! End-to-end checks of the vlg binary: every subcommand runs against real
//! files, and rerunning the pipeline reproduces its outputs byte for byte.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vlg_core::heads::write_pgm;
use vlg_core::metrics::BinaryMask;

fn vlg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_of(out: &Output) -> String {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).expect("utf8 stdout")
}

#[test]
fn decompose_emits_the_pinned_json_shape() {
    let out = vlg(&[
        "decompose",
        "--tree",
        "(S (NP (NNP Panda)) (VP (VP (VBG lying) (RP down)) (CC and) (VP (VBG eating))))",
    ]);
    let line = stdout_of(&out);
    let value: serde_json::Value = serde_json::from_str(line.trim()).expect("json line");
    assert_eq!(value["P"], 2);
    assert_eq!(value["np"], "Panda");
    assert_eq!(value["vps"][0], "lying down");
    assert_eq!(value["vps"][1], "eating");
    assert_eq!(value["np_span"][0], 0);
    assert_eq!(value["vp_spans"][1][1], 5);
}

#[test]
fn failures_exit_nonzero_with_one_stderr_line() {
    let out = vlg(&["decompose", "--tree", "(S (NP bad)"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.trim().lines().count(), 1);
    assert!(stderr.starts_with("error: "), "got {stderr:?}");

    let out = vlg(&["--json", "decompose", "--tree", "(S (NP bad)"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let value: serde_json::Value = serde_json::from_str(stderr.trim()).expect("json error line");
    assert!(value["error"].is_string());
}

#[test]
fn help_enumerates_flags_with_defaults() {
    let out = vlg(&["train-vtg", "--help"]);
    let text = stdout_of(&out);
    for flag in ["--lr", "--batch-size", "--tau-min", "--epochs"] {
        assert!(text.contains(flag), "help misses {flag}");
    }
    assert!(text.contains("[default: 16]"), "batch default missing");
    assert!(text.contains("[default: 0.0001]"), "lr default missing");
}

/// Every checkpoint file, byte for byte.
fn checkpoint_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|name| {
            let bytes = fs::read(dir.join(&name)).unwrap();
            (name, bytes)
        })
        .collect()
}

#[test]
fn pipeline_reruns_reproduce_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let data_s = data.to_str().unwrap();

    let gen = vlg(&[
        "gen-data", "--out", data_s, "--count", "9", "--slots", "2", "--frames", "16",
        "--channels", "8",
    ]);
    stdout_of(&gen);
    assert!(data.join("manifest.jsonl").exists());
    assert!(data.join("samples/vtg-42-0000/grid.prtk").exists());

    let train = |metrics: &Path, ckpt: &Path| {
        let out = vlg(&[
            "train-vtg", "--data", data_s, "--epochs", "1", "--batch-size", "4", "--heads",
            "2", "--lr", "0.003",
            "--metrics", metrics.to_str().unwrap(),
            "--checkpoint-dir", ckpt.to_str().unwrap(),
        ]);
        stdout_of(&out);
    };
    let (m1, c1) = (root.join("m1.tsv"), root.join("ck1"));
    let (m2, c2) = (root.join("m2.tsv"), root.join("ck2"));
    train(&m1, &c1);
    train(&m2, &c2);
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
    assert_eq!(checkpoint_bytes(&c1), checkpoint_bytes(&c2));

    // Metrics table: header, epoch 0 baseline, one trained epoch.
    let table = fs::read_to_string(&m1).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("epoch\ttrain_loss"));
    assert!(lines[1].starts_with("0\t"));

    let eval = vlg(&[
        "eval-vtg", "--data", data_s, "--checkpoint", c1.to_str().unwrap(), "--skip", "6",
        "--heads", "2",
    ]);
    let table = stdout_of(&eval);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 6, "header, four cells, mean:\n{table}");
    assert_eq!(lines[0], "n\tm\tvalue");
    assert!(lines[5].starts_with("mean\t-\t"));

    let refined = root.join("refined.prtk");
    let refine = vlg(&[
        "refine",
        "--grid", data.join("samples/vtg-42-0000/grid.prtk").to_str().unwrap(),
        "--tree-file", data.join("samples/vtg-42-0000/tree.mrg").to_str().unwrap(),
        "--heads", "2",
        "--out", refined.to_str().unwrap(),
    ]);
    let log = stdout_of(&refine);
    let value: serde_json::Value = serde_json::from_str(log.trim()).unwrap();
    assert_eq!(value["variant"], "full");
    assert!(value["P"].as_u64().unwrap() >= 1);
    assert_eq!(
        value["per_step_output_norms"].as_array().unwrap().len(),
        value["P"].as_u64().unwrap() as usize
    );
    assert!(refined.exists());
}

#[test]
fn eval_rvos_scores_mask_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let square = BinaryMask::from_fn(8, 8, |x, y| (2..6).contains(&x) && (2..6).contains(&y));
    let shifted = BinaryMask::from_fn(8, 8, |x, y| (3..7).contains(&x) && (2..6).contains(&y));
    for seq in ["a", "b"] {
        for side in ["pred", "gt"] {
            fs::create_dir_all(root.join(side).join(seq)).unwrap();
        }
        for frame in ["000.pgm", "001.pgm"] {
            write_pgm(&root.join("gt").join(seq).join(frame), &square).unwrap();
            let pred = if seq == "a" { &square } else { &shifted };
            write_pgm(&root.join("pred").join(seq).join(frame), pred).unwrap();
        }
    }
    let out = vlg(&[
        "eval-rvos",
        "--pred", root.join("pred").to_str().unwrap(),
        "--gt", root.join("gt").to_str().unwrap(),
    ]);
    let table = stdout_of(&out);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4, "header, two sequences, mean:\n{table}");
    assert_eq!(lines[0], "sequence\tframes\tj\tf\tjf");
    assert!(lines[1].starts_with("a\t2\t1.0000\t1.0000\t1.0000"));
    assert!(lines[2].starts_with("b\t2\t"), "got {}", lines[2]);
    assert!(lines[3].starts_with("mean\t4\t"));
    // The shifted sequence overlaps 3 of 4 columns: J = 3/5.
    assert!(lines[2].contains("0.6000"));
}

#[test]
fn eval_rvos_requires_a_prediction_for_every_gt_frame() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let square = BinaryMask::from_fn(8, 8, |x, y| (2..6).contains(&x) && (2..6).contains(&y));
    for side in ["pred", "gt"] {
        fs::create_dir_all(root.join(side).join("a")).unwrap();
    }
    for frame in ["000.pgm", "001.pgm"] {
        write_pgm(&root.join("gt").join("a").join(frame), &square).unwrap();
    }
    write_pgm(&root.join("pred").join("a").join("000.pgm"), &square).unwrap();
    let out = vlg(&[
        "eval-rvos",
        "--pred", root.join("pred").to_str().unwrap(),
        "--gt", root.join("gt").to_str().unwrap(),
    ]);
    assert!(!out.status.success(), "gt frame without a prediction must fail");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("001.pgm"), "error names the missing frame: {stderr}");
}

#[test]
fn bench_attn_counts_agree_with_closed_forms() {
    let out = vlg(&["bench-attn", "--nf", "1,2", "--t", "2,3", "--c", "8"]);
    let table = stdout_of(&out);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5);
    for line in &lines[1..] {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols.len(), 10);
        assert_eq!(cols[3], cols[4], "factorized measured vs closed: {line}");
        assert_eq!(cols[5], cols[6], "joint measured vs closed: {line}");
    }

    let timed = vlg(&[
        "bench-attn", "--nf", "2", "--t", "2", "--c", "8", "--heads", "2", "--repeats", "2",
    ]);
    let table = stdout_of(&timed);
    let header = table.lines().next().unwrap();
    assert!(header.ends_with("factorized_ms\tjoint_ms"));
}
