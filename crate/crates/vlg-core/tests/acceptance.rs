//! Release gate: one check per shipped claim, run sequentially in a fixed
//! order, each printing a single PASS/FAIL line. The binary exits nonzero
//! if any check fails or overruns its time budget, so `cargo test` treats
//! the gate as one unit.
//!
//! Every check is self-contained and single-threaded; numbers asserted
//! here (tolerances, fixture settings, expected scores) are pinned in
//! this file on purpose so a regression shows up as a diff, not a drift.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use vlg_core::bench::{
    complexity_table, factorized_order, joint_order, median_step_wallclock,
};
use vlg_core::heads::{
    rvos_mask_logits, rvos_loss, scaled_iou_labels, vtg_loss, vtg_scores, MaskDecoder,
    RvosLossConfig, TAU_MAX, TAU_MIN,
};
use vlg_core::metrics::{
    boundary_f, rank_n_at_m, reference, region_similarity_j, temporal_iou, BinaryMask,
    RankedQuery,
};
use vlg_core::planner::{decompose, SubPromptChain};
use vlg_core::refiner::{
    refine, ChainEmbeddings, RefinerConfig, RefinerParams, Variant,
};
use vlg_core::seeding::{derive_seed, rng_from};
use vlg_core::synth::{generate, read_dataset, write_dataset, Dataset, SynthConfig};
use vlg_core::tensor::{finite_diff_check, AdamConfig, AttentionParams, FD_EPSILON};
use vlg_core::train::{history_tsv, save_checkpoint, train_vtg, TrainConfig};
use vlg_core::treebank::read_tree_file;
use vlg_core::{Tape, Tensor};

use rand::Rng;

type Check = fn() -> Result<String, String>;

fn main() {
    let checks: [(&str, u64, Check); 7] = [
        ("planner corpus", 1, check_planner_corpus),
        ("gradient check", 30, check_gradients),
        ("attention cost model", 120, check_cost_model),
        ("variant ordering", 600, check_variant_ordering),
        ("refiner invariants", 10, check_refiner_invariants),
        ("metric oracles", 30, check_metric_oracles),
        ("training determinism", 120, check_determinism),
    ];

    let mut failures = 0;
    for (i, (label, limit_secs, check)) in checks.iter().enumerate() {
        let limit = Duration::from_secs(*limit_secs);
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check));
        let elapsed = start.elapsed();
        let secs = elapsed.as_secs_f64();

        let verdict = match outcome {
            Ok(Ok(detail)) if elapsed <= limit => {
                format!("PASS - {detail} ({secs:.1}s)")
            }
            Ok(Ok(detail)) => {
                failures += 1;
                format!(
                    "FAIL - over time budget {limit_secs}s ({secs:.1}s); checks held: {detail}"
                )
            }
            Ok(Err(reason)) => {
                failures += 1;
                format!("FAIL - {reason} ({secs:.1}s)")
            }
            Err(_) => {
                failures += 1;
                format!("FAIL - panicked ({secs:.1}s)")
            }
        };
        println!("acceptance {} ({label}): {verdict}", i + 1);
    }

    if failures > 0 {
        eprintln!("{failures} acceptance check(s) failed");
        std::process::exit(1);
    }
}

// ── 1: planner corpus ──

/// Every tree in the shipped corpus must decompose to its hand-written
/// chain, byte for byte.
fn check_planner_corpus() -> Result<String, String> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus");
    let trees = read_tree_file(&dir.join("trees.mrg")).map_err(|e| e.to_string())?;
    let expected: Vec<SubPromptChain> =
        std::fs::read_to_string(dir.join("expected_chains.jsonl"))
            .map_err(|e| e.to_string())?
            .lines()
            .map(|line| serde_json::from_str(line).map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()?;
    if trees.len() != expected.len() {
        return Err(format!(
            "corpus size mismatch: {} trees vs {} chains",
            trees.len(),
            expected.len()
        ));
    }
    if trees.len() != 20 {
        return Err(format!("corpus holds {} trees, expected 20", trees.len()));
    }

    let mut mismatches = 0;
    for (tree, want) in trees.iter().zip(&expected) {
        let got = decompose(tree).map_err(|e| e.to_string())?;
        if got != *want {
            mismatches += 1;
        }
    }
    if mismatches > 0 {
        return Err(format!("{mismatches}/{} chains mismatch", trees.len()));
    }
    Ok(format!("{}/{} chains match", trees.len(), trees.len()))
}

// ── 2: gradient check ──

fn unit_vec<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    v.into_iter().map(|x| x / norm).collect()
}

/// Tape gradients through refinement plus each head loss must agree with
/// central differences on every grid cell.
fn check_gradients() -> Result<String, String> {
    const C: usize = 8;
    let mut rng = rng_from(derive_seed(11, "acceptance-grad"));
    let params = RefinerParams::init(C, 2, &mut rng).map_err(|e| e.to_string())?;
    let config = RefinerConfig::for_variant(Variant::Full);
    let chain = ChainEmbeddings {
        np: unit_vec(&mut rng, C),
        vps: vec![unit_vec(&mut rng, C), unit_vec(&mut rng, C)],
    };
    let shape = [4usize, 3, 8];
    let x0: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-0.5..0.5))
        .collect();

    // Retrieval branch: refine, score sliding windows, regress on labels.
    let sentence = unit_vec(&mut rng, C);
    let candidates = [(0usize, 1usize), (0, 2), (1, 3)];
    let labels = scaled_iou_labels(&candidates, (0, 2), TAU_MIN, TAU_MAX);
    let vtg_err = finite_diff_check(
        |tape, x| {
            let (refined, _) = refine(tape, &params, &config, x, &chain).expect("refine");
            let scores =
                vtg_scores(tape, &refined, &sentence, &candidates).expect("scores");
            Ok(vtg_loss(tape, &scores, &labels).expect("loss"))
        },
        &x0,
        &shape,
        FD_EPSILON,
    )
    .map_err(|e| e.to_string())?;

    // Segmentation branch: refine, decode masks, frame plus volume loss.
    let decoder = MaskDecoder::init(C, 2, 2, true, &mut rng).map_err(|e| e.to_string())?;
    let lang_rows: Vec<f64> = [&chain.np[..], &chain.vps[0][..]].concat();
    let lang = Tensor::from_vec(lang_rows, &[2, C]).map_err(|e| e.to_string())?;
    let feats_data: Vec<f64> = (0..3 * 4 * 4 * C)
        .map(|_| rng.gen_range(-0.5..0.5))
        .collect();
    let feats = Tensor::from_vec(feats_data, &[3, 4, 4, C]).map_err(|e| e.to_string())?;
    let gt: Vec<f64> = (0..3 * 4 * 4)
        .map(|_| if rng.gen::<f64>() < 0.5 { 1.0 } else { 0.0 })
        .collect();
    let rvos_err = finite_diff_check(
        |tape, x| {
            let (refined, _) = refine(tape, &params, &config, x, &chain).expect("refine");
            let logits =
                rvos_mask_logits(tape, &decoder, &lang, &refined, Some(x), &feats, None)
                    .expect("logits");
            Ok(rvos_loss(tape, &logits, &gt, &RvosLossConfig::default()).expect("loss"))
        },
        &x0,
        &shape,
        FD_EPSILON,
    )
    .map_err(|e| e.to_string())?;

    if vtg_err >= 1e-4 || rvos_err >= 1e-4 {
        return Err(format!(
            "max relative error too large: retrieval {vtg_err:.2e}, segmentation {rvos_err:.2e}"
        ));
    }
    Ok(format!(
        "max relative error: retrieval {vtg_err:.2e}, segmentation {rvos_err:.2e}"
    ))
}

// ── 3: attention cost model ──

/// Metered multiply-accumulate counts must equal the closed forms on a
/// dimension sweep, the canonical layout ratio must come out, and the
/// factorized step must actually be faster on the wall clock.
fn check_cost_model() -> Result<String, String> {
    let mut dims = Vec::new();
    for &s in &[1usize, 2, 8, 20, 32] {
        for &f in &[1usize, 2, 6, 32, 64] {
            dims.push((s, f));
        }
    }
    let rows = complexity_table(&dims, 64).map_err(|e| e.to_string())?;
    let disagreeing: Vec<String> = rows
        .iter()
        .filter(|r| !r.agrees())
        .map(|r| format!("({},{})", r.slots, r.frames))
        .collect();
    if !disagreeing.is_empty() {
        return Err(format!(
            "metered counts diverge from closed form at {}",
            disagreeing.join(", ")
        ));
    }

    let fo = factorized_order(20, 6, 256);
    let jo = joint_order(20, 6, 256);
    if fo != 798_720 || jo != 3_686_400 {
        return Err(format!("order terms off: factorized {fo}, joint {jo}"));
    }
    let ratio = jo as f64 / fo as f64;
    if (ratio - 4.615_384_615_384_615).abs() > 1e-9 {
        return Err(format!("layout ratio {ratio:.6} departs from 4.615385"));
    }

    let fast = median_step_wallclock(Variant::Full, 32, 32, 64, 4, 5)
        .map_err(|e| e.to_string())?;
    let slow = median_step_wallclock(Variant::Joint, 32, 32, 64, 4, 5)
        .map_err(|e| e.to_string())?;
    if fast >= slow {
        return Err(format!(
            "factorized step not faster: {:.1}ms vs joint {:.1}ms",
            fast.as_secs_f64() * 1e3,
            slow.as_secs_f64() * 1e3
        ));
    }
    Ok(format!(
        "{}/{} dims exact, ratio {ratio:.3}, factorized {:.1}ms < joint {:.1}ms",
        rows.len(),
        rows.len(),
        fast.as_secs_f64() * 1e3,
        slow.as_secs_f64() * 1e3
    ))
}

// ── 4: variant ordering ──

/// The tuned grounding fixture for this check. Noise and distractor
/// strength are set so the untrained scorer sits below the bar with
/// headroom above it, fourteen single-step epochs are enough for the
/// full variant to clear 0.9, and every rewired variant stays behind.
fn ordering_fixture() -> (SynthConfig, TrainConfig) {
    let synth = SynthConfig {
        seed: 7,
        count: 96,
        slots: 8,
        frames: 64,
        channels: 32,
        action_gain: 1.5,
        noise: 0.75,
        distractor_rate: 0.5,
        distractor_gain: 0.5,
        concepts: 24,
    };
    let train = TrainConfig {
        seed: 7,
        epochs: 14,
        batch_size: 16,
        optimizer: AdamConfig { lr: 1e-3, weight_decay: 0.0, ..AdamConfig::default() },
        refiner: RefinerConfig {
            heads: 4,
            max_steps: Some(1),
            ..RefinerConfig::default()
        },
        tau: (TAU_MIN, TAU_MAX),
        threads: 1,
    };
    (synth, train)
}

fn check_variant_ordering() -> Result<String, String> {
    let (synth_cfg, base) = ordering_fixture();
    let samples = generate(&synth_cfg).map_err(|e| e.to_string())?;
    // Round-trip through the on-disk format so this check trains on the
    // same f32-quantized grids the command-line pipeline sees.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_dataset(dir.path(), &synth_cfg, &samples).map_err(|e| e.to_string())?;
    let dataset = read_dataset(dir.path()).map_err(|e| e.to_string())?;

    let rank1 = |variant: Variant| -> Result<f64, String> {
        let config = TrainConfig {
            refiner: RefinerConfig { variant, ..base.refiner.clone() },
            ..base.clone()
        };
        let outcome = train_vtg(&config, &dataset, 64).map_err(|e| e.to_string())?;
        Ok(outcome.history.last().expect("history never empty").eval.rank1_at_05)
    };

    let full = rank1(Variant::Full)?;
    let ablations = [Variant::NoLang, Variant::Joint, Variant::ParallelAvg];
    let mut scored = Vec::new();
    for v in ablations {
        scored.push((v.name(), rank1(v)?));
    }

    if full < 0.9 {
        return Err(format!("full variant reached only rank1@0.5 {full:.4}"));
    }
    let not_below: Vec<String> = scored
        .iter()
        .filter(|(_, s)| *s >= full)
        .map(|(n, s)| format!("{n} {s:.4}"))
        .collect();
    if !not_below.is_empty() {
        return Err(format!(
            "full {full:.4} not strictly ahead of: {}",
            not_below.join(", ")
        ));
    }
    let listing: Vec<String> =
        scored.iter().map(|(n, s)| format!("{n} {s:.4}")).collect();
    Ok(format!("full {full:.4} ahead of {}", listing.join(", ")))
}

// ── 5: refiner invariants ──

fn sample_grid(slots: usize, frames: usize, channels: usize, seed: u64) -> Tensor {
    let mut rng = rng_from(derive_seed(seed, "acceptance-grid"));
    let data: Vec<f64> = (0..slots * frames * channels)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    Tensor::from_vec(data, &[slots, frames, channels]).expect("sized to fit")
}

fn check_refiner_invariants() -> Result<String, String> {
    const C: usize = 8;
    let mut rng = rng_from(derive_seed(23, "acceptance-invariants"));
    let grid = sample_grid(3, 4, C, 23);
    let before: Vec<f64> = grid.value();
    let chain = ChainEmbeddings {
        np: unit_vec(&mut rng, C),
        vps: vec![unit_vec(&mut rng, C), unit_vec(&mut rng, C)],
    };
    let config = RefinerConfig::default();

    // Zero steps: the grid must come back bit for bit.
    let empty = ChainEmbeddings { np: chain.np.clone(), vps: Vec::new() };
    let params = RefinerParams::init(C, 2, &mut rng).map_err(|e| e.to_string())?;
    let mut tape = Tape::new();
    let (out, trace) =
        refine(&mut tape, &params, &config, &grid, &empty).map_err(|e| e.to_string())?;
    if trace.steps() != 0 {
        return Err(format!("empty chain ran {} steps", trace.steps()));
    }
    let bits_differ = out
        .value()
        .iter()
        .zip(&before)
        .any(|(a, b)| a.to_bits() != b.to_bits());
    if bits_differ {
        return Err("zero-step refinement altered the grid".into());
    }

    // Identity mixer with muted value/output projections: pass-through.
    let eye: Vec<f64> = (0..C * C)
        .map(|i| if i % (C + 1) == 0 { 1.0 } else { 0.0 })
        .collect();
    let muted = |rng: &mut rand_chacha::ChaCha8Rng| AttentionParams {
        w_q: Tensor::randn(rng, &[C, C], 0.5),
        w_k: Tensor::randn(rng, &[C, C], 0.5),
        w_v: Tensor::from_vec(vec![0.0; C * C], &[C, C]).expect("sized"),
        w_o: Tensor::from_vec(vec![0.0; C * C], &[C, C]).expect("sized"),
        heads: 2,
    };
    let passthrough = RefinerParams {
        w: Tensor::from_vec(eye, &[C, C]).expect("sized"),
        spatial: muted(&mut rng),
        temporal: muted(&mut rng),
    };
    let mut tape = Tape::new();
    let (out, _) = refine(&mut tape, &passthrough, &config, &grid, &chain)
        .map_err(|e| e.to_string())?;
    let worst = out
        .value()
        .iter()
        .zip(&before)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    if worst > 1e-12 {
        return Err(format!("muted projections drifted by {worst:.2e}"));
    }

    // Every variant preserves the grid shape, and every softmax row the
    // meter saw sums to one.
    let mut row_lo = f64::INFINITY;
    let mut row_hi = f64::NEG_INFINITY;
    for variant in Variant::ALL {
        let config = RefinerConfig::for_variant(variant);
        let mut tape = Tape::new();
        let (out, trace) = refine(&mut tape, &params, &config, &grid, &chain)
            .map_err(|e| format!("{}: {e}", variant.name()))?;
        if out.shape() != vec![3, 4, C] {
            return Err(format!(
                "{} changed shape to {:?}",
                variant.name(),
                out.shape()
            ));
        }
        row_lo = row_lo.min(trace.meter.row_sum_min);
        row_hi = row_hi.max(trace.meter.row_sum_max);
    }
    if (row_lo - 1.0).abs() > 1e-9 || (row_hi - 1.0).abs() > 1e-9 {
        return Err(format!("softmax row sums in [{row_lo:.12}, {row_hi:.12}]"));
    }

    // Label map: overlap at the lower threshold, midpoint, upper
    // threshold, and beyond must land on 0, 1/2, 1, 1.
    let table = scaled_iou_labels(&[(0, 3), (0, 5), (0, 7), (0, 9)], (0, 10), TAU_MIN, TAU_MAX);
    let want = [0.0, 0.5, 1.0, 1.0];
    for (i, (got, want)) in table.iter().zip(&want).enumerate() {
        if (got - want).abs() > 1e-12 {
            return Err(format!("label table entry {i}: {got} != {want}"));
        }
    }

    Ok(format!(
        "zero-step exact, pass-through drift 0, {} variants keep shape, rows in [{row_lo:.10}, {row_hi:.10}]",
        Variant::ALL.len()
    ))
}

// ── 6: metric oracles ──

/// Each metric is replayed against a slow, structurally different
/// reference on 1,000 randomized instances.
fn check_metric_oracles() -> Result<String, String> {
    const CASES: usize = 1000;
    let mut rng = rng_from(derive_seed(31, "acceptance-metrics"));

    // Interval IoU against unit-cell counting on integer endpoints.
    for case in 0..CASES {
        let mut draw = || {
            let a = rng.gen_range(0..24u32) as f64;
            let b = rng.gen_range(0..=24u32) as f64;
            if a < b { (a, b) } else if a > b { (b, a) } else { (a, b + 1.0) }
        };
        let (a, b) = (draw(), draw());
        let cells = |iv: (f64, f64), i: u32| -> bool {
            (i as f64) >= iv.0 && ((i + 1) as f64) <= iv.1
        };
        let mut inter = 0u32;
        let mut union = 0u32;
        for i in 0..24 {
            let in_a = cells(a, i);
            let in_b = cells(b, i);
            inter += (in_a && in_b) as u32;
            union += (in_a || in_b) as u32;
        }
        let want = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
        let got = temporal_iou(a, b);
        if (got - want).abs() > 1e-12 {
            return Err(format!(
                "interval IoU case {case}: {got} vs counted {want} for {a:?} {b:?}"
            ));
        }
    }

    // Rank n at m against the per-query hit test.
    for case in 0..CASES {
        let iv = |rng: &mut rand_chacha::ChaCha8Rng| {
            let s = rng.gen_range(0.0..20.0);
            (s, s + rng.gen_range(0.5..8.0))
        };
        let query_count = rng.gen_range(1..=3);
        let queries: Vec<RankedQuery> = (0..query_count)
            .map(|_| {
                let gt = iv(&mut rng);
                let candidate_count = rng.gen_range(3..=8);
                RankedQuery {
                    gt,
                    ranked: (0..candidate_count).map(|_| iv(&mut rng)).collect(),
                }
            })
            .collect();
        let n = rng.gen_range(1..=5);
        let m = [0.3, 0.5, 0.7][rng.gen_range(0..3)];
        let want = queries.iter().filter(|q| reference::rank_hit(q, n, m)).count()
            as f64
            / queries.len() as f64;
        let got = rank_n_at_m(&queries, n, m).map_err(|e| e.to_string())?;
        if (got - want).abs() > 1e-12 {
            return Err(format!("rank{n}@{m} case {case}: {got} vs {want}"));
        }
    }

    // Mask overlap and boundary agreement against pixel loops.
    let random_mask =
        |rng: &mut rand_chacha::ChaCha8Rng, w: usize, h: usize| -> BinaryMask {
            BinaryMask::from_fn(w, h, |_, _| rng.gen::<f64>() < 0.4)
        };
    for case in 0..CASES {
        let (w, h) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let pred = random_mask(&mut rng, w, h);
        let gt = random_mask(&mut rng, w, h);
        let got = region_similarity_j(&pred, &gt).map_err(|e| e.to_string())?;
        let want = reference::region_similarity_by_pixels(&pred, &gt);
        if (got - want).abs() > 1e-12 {
            return Err(format!("region similarity case {case}: {got} vs {want}"));
        }
        let radius = rng.gen_range(0..=2);
        let got = boundary_f(&pred, &gt, radius).map_err(|e| e.to_string())?;
        let want = reference::boundary_f_by_distances(&pred, &gt, radius);
        if (got - want).abs() > 1e-12 {
            return Err(format!("boundary score case {case}: {got} vs {want}"));
        }
    }

    Ok(format!("4 metrics x {CASES} randomized cases agree within 1e-12"))
}

// ── 7: training determinism ──

/// Two identical single-threaded runs must emit byte-identical history
/// tables and checkpoint files.
fn check_determinism() -> Result<String, String> {
    let synth_cfg = SynthConfig {
        seed: 5,
        count: 12,
        slots: 3,
        frames: 16,
        channels: 8,
        noise: 0.5,
        ..SynthConfig::default()
    };
    let samples = generate(&synth_cfg).map_err(|e| e.to_string())?;
    let dataset = Dataset { config: synth_cfg, samples };
    let config = TrainConfig {
        seed: 5,
        epochs: 2,
        batch_size: 4,
        threads: 1,
        ..TrainConfig::default()
    };

    let run = || -> Result<(String, Vec<(String, Vec<u8>)>), String> {
        let outcome = train_vtg(&config, &dataset, 8).map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        save_checkpoint(dir.path(), &outcome.state).map_err(|e| e.to_string())?;
        let mut files = Vec::new();
        let mut names: Vec<_> = std::fs::read_dir(dir.path())
            .map_err(|e| e.to_string())?
            .map(|entry| entry.expect("dir entry").path())
            .collect();
        names.sort();
        for path in names {
            let name = path.file_name().expect("file name").to_string_lossy().into_owned();
            let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
            files.push((name, bytes));
        }
        Ok((history_tsv(&outcome.history), files))
    };

    let (table_a, files_a) = run()?;
    let (table_b, files_b) = run()?;
    if table_a != table_b {
        return Err("history tables differ between identical runs".into());
    }
    if files_a.len() != files_b.len() {
        return Err(format!(
            "checkpoint file counts differ: {} vs {}",
            files_a.len(),
            files_b.len()
        ));
    }
    for ((name_a, bytes_a), (name_b, bytes_b)) in files_a.iter().zip(&files_b) {
        if name_a != name_b || bytes_a != bytes_b {
            return Err(format!("checkpoint file {name_a} differs between runs"));
        }
    }
    Ok(format!(
        "history table and {} checkpoint files byte-identical across runs",
        files_a.len()
    ))
}
