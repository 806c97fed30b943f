//! vlg: command-line front end for the grounding pipeline.
//!
//! One binary, seven subcommands, one seed. Every random stream is derived
//! from `--seed` by name, so any command line rerun byte-for-byte
//! reproduces its outputs. Errors leave with a nonzero status and a single
//! line on stderr (`error: ...`, or a JSON object under `--json`).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use vlg_core::bench;
use vlg_core::embed::{Embedder, FileEmbedder, HashEmbedder};
use vlg_core::heads::read_pgm;
use vlg_core::metrics::{j_and_f, rank_n_at_m, BinaryMask};
use vlg_core::planner::{decompose, decompose_lenient, SubPromptChain};
use vlg_core::refiner::{
    refine_forward, ChainEmbeddings, GridBuffer, RefinerConfig, RefinerParams, Variant,
};
use vlg_core::seeding::{derive_seed, rng_from};
use vlg_core::synth::{generate, read_dataset, write_dataset, SynthConfig};
use vlg_core::tensor::{read_tensor, write_tensor, AdamConfig};
use vlg_core::train::{
    history_tsv, load_checkpoint, save_checkpoint, train_vtg_with, vtg_queries, EpochRecord,
    TrainConfig,
};
use vlg_core::treebank::{parse_tree, read_tree_file, ParseTree};

// ── Command line ──

#[derive(Parser)]
#[command(
    name = "vlg",
    version,
    about = "Grounding pipeline: decompose captions, refine token grids, train and score heads"
)]
struct Cli {
    /// Root seed; every random stream is derived from it by name.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Threads for data-parallel paths: 1 runs sequentially, 0 uses one
    /// thread per logical CPU. Results never depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Emit machine-readable JSON summaries on stdout.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split caption trees into noun-phrase plus verb-phrase chains
    Decompose(DecomposeArgs),
    /// Refine a token grid against a caption and write the result
    Refine(RefineArgs),
    /// Generate a synthetic grounding dataset
    GenData(GenDataArgs),
    /// Train refiner weights for temporal grounding
    TrainVtg(TrainVtgArgs),
    /// Rank candidate windows under a checkpoint and tabulate retrieval quality
    EvalVtg(EvalVtgArgs),
    /// Score predicted segmentation masks against ground truth
    EvalRvos(EvalRvosArgs),
    /// Tabulate attention cost for factorized and joint layouts
    BenchAttn(BenchAttnArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let message = format!("{err:#}").replace('\n', " ");
            if cli.json {
                eprintln!("{}", serde_json::json!({ "error": message }));
            } else {
                eprintln!("error: {message}");
            }
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Decompose(args) => cmd_decompose(args),
        Command::Refine(args) => cmd_refine(cli, args),
        Command::GenData(args) => cmd_gen_data(cli, args),
        Command::TrainVtg(args) => cmd_train_vtg(cli, args),
        Command::EvalVtg(args) => cmd_eval_vtg(cli, args),
        Command::EvalRvos(args) => cmd_eval_rvos(cli, args),
        Command::BenchAttn(args) => cmd_bench_attn(cli, args),
    }
}

// ── Shared helpers ──

fn parse_variant(name: &str) -> Result<Variant> {
    Variant::from_name(name).ok_or_else(|| {
        let known: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
        anyhow!("unknown variant {name:?} (expected one of {})", known.join(", "))
    })
}

/// Write to `path` when given, stdout otherwise.
fn emit_table(out: &Option<PathBuf>, table: &str) -> Result<()> {
    match out {
        Some(path) => {
            fs::write(path, table).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            print!("{table}");
            Ok(())
        }
    }
}

// ── decompose ──

#[derive(Args)]
struct DecomposeArgs {
    /// One bracketed caption tree, inline
    #[arg(long, conflicts_with = "input")]
    tree: Option<String>,

    /// File of bracketed trees, one per line ('#' starts a comment)
    #[arg(long)]
    input: Option<PathBuf>,

    /// Fall back to whole-sentence spans when the tree has no usable
    /// noun or verb phrases
    #[arg(long)]
    lenient: bool,
}

#[derive(Serialize)]
struct ChainJson {
    #[serde(rename = "P")]
    p: usize,
    np: String,
    vps: Vec<String>,
    np_span: (usize, usize),
    vp_spans: Vec<(usize, usize)>,
}

impl From<SubPromptChain> for ChainJson {
    fn from(chain: SubPromptChain) -> Self {
        ChainJson {
            p: chain.vps.len(),
            np: chain.np,
            vps: chain.vps.iter().map(|v| v.text.clone()).collect(),
            np_span: chain.np_span,
            vp_spans: chain.vps.iter().map(|v| v.span).collect(),
        }
    }
}

fn cmd_decompose(args: &DecomposeArgs) -> Result<()> {
    let trees: Vec<ParseTree> = match (&args.tree, &args.input) {
        (Some(text), None) => vec![parse_tree(text)?],
        (None, Some(path)) => {
            read_tree_file(path).with_context(|| format!("reading {}", path.display()))?
        }
        _ => bail!("pass exactly one of --tree or --input"),
    };
    for tree in &trees {
        let chain = if args.lenient {
            decompose_lenient(tree)
        } else {
            decompose(tree)?
        };
        println!("{}", serde_json::to_string(&ChainJson::from(chain))?);
    }
    Ok(())
}

// ── refine ──

#[derive(Args)]
struct RefineArgs {
    /// Token grid to refine (rank-3 tensor file)
    #[arg(long)]
    grid: PathBuf,

    /// Caption tree, inline
    #[arg(long, conflicts_with = "tree_file", required_unless_present = "tree_file")]
    tree: Option<String>,

    /// File with the caption tree (its first tree is used)
    #[arg(long)]
    tree_file: Option<PathBuf>,

    /// Refiner wiring
    #[arg(long, default_value = "full")]
    variant: String,

    #[arg(long, default_value_t = 4)]
    heads: usize,

    /// Cap refinement at this many steps
    #[arg(long)]
    max_steps: Option<usize>,

    /// Trained checkpoint directory (default: fresh seeded weights)
    #[arg(long)]
    checkpoint: Option<PathBuf>,

    /// Phrase embedding table file (default: seeded hash embeddings)
    #[arg(long)]
    embeddings: Option<PathBuf>,

    /// Where to write the refined grid
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct StepLog<'a> {
    #[serde(rename = "P")]
    p: usize,
    variant: &'a str,
    per_step_output_norms: &'a [f64],
}

fn cmd_refine(cli: &Cli, args: &RefineArgs) -> Result<()> {
    let tensor = read_tensor(&args.grid)
        .with_context(|| format!("reading grid {}", args.grid.display()))?;
    let grid = GridBuffer::from_tensor(&tensor)?;

    let tree = match (&args.tree, &args.tree_file) {
        (Some(text), None) => parse_tree(text)?,
        (None, Some(path)) => read_tree_file(path)
            .with_context(|| format!("reading {}", path.display()))?
            .into_iter()
            .next()
            .ok_or_else(|| anyhow!("{} holds no trees", path.display()))?,
        _ => bail!("pass exactly one of --tree or --tree-file"),
    };
    let chain_syntax = decompose(&tree)?;

    let embedder: Box<dyn Embedder> = match &args.embeddings {
        Some(path) => Box::new(
            FileEmbedder::load(path)
                .with_context(|| format!("loading embeddings {}", path.display()))?,
        ),
        None => Box::new(HashEmbedder::new(
            derive_seed(cli.seed, "embed"),
            grid.channels,
        )),
    };
    if embedder.dim() != grid.channels {
        bail!(
            "embedding width {} does not match grid channels {}",
            embedder.dim(),
            grid.channels
        );
    }
    let chain = ChainEmbeddings::from_chain(embedder.as_ref(), &chain_syntax)?;

    let variant = parse_variant(&args.variant)?;
    let config = RefinerConfig {
        heads: args.heads,
        max_steps: args.max_steps,
        ..RefinerConfig::for_variant(variant)
    };
    let params = match &args.checkpoint {
        Some(dir) => RefinerParams::from_state(
            &load_checkpoint(dir).with_context(|| format!("loading {}", dir.display()))?,
        )?,
        None => {
            let mut rng = rng_from(derive_seed(cli.seed, "init"));
            RefinerParams::init(grid.channels, args.heads, &mut rng)?
        }
    };

    let (refined, trace) = refine_forward(&params, &config, &grid, &chain)?;
    write_tensor(&args.out, &refined.to_tensor())
        .with_context(|| format!("writing {}", args.out.display()))?;
    let log = StepLog {
        p: trace.per_step_norms.len(),
        variant: variant.name(),
        per_step_output_norms: &trace.per_step_norms,
    };
    println!("{}", serde_json::to_string(&log)?);
    Ok(())
}

// ── gen-data ──

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,

    #[arg(long, default_value_t = 96)]
    count: usize,

    /// Spatial tokens per frame
    #[arg(long, default_value_t = 8)]
    slots: usize,

    #[arg(long, default_value_t = 64)]
    frames: usize,

    #[arg(long, default_value_t = 32)]
    channels: usize,

    /// Action direction strength relative to the subject direction
    #[arg(long, default_value_t = 1.5)]
    action_gain: f64,

    /// Per-channel Gaussian noise floor
    #[arg(long, default_value_t = 0.25)]
    noise: f64,

    /// Chance of each background event hook firing
    #[arg(long, default_value_t = 0.5)]
    distractor_rate: f64,

    /// Background event strength relative to the true event
    #[arg(long, default_value_t = 0.8)]
    distractor_gain: f64,

    /// Vocabulary size for subjects and actions
    #[arg(long, default_value_t = 24)]
    concepts: usize,
}

fn cmd_gen_data(cli: &Cli, args: &GenDataArgs) -> Result<()> {
    let config = SynthConfig {
        seed: cli.seed,
        count: args.count,
        slots: args.slots,
        frames: args.frames,
        channels: args.channels,
        action_gain: args.action_gain,
        noise: args.noise,
        distractor_rate: args.distractor_rate,
        distractor_gain: args.distractor_gain,
        concepts: args.concepts,
    };
    let samples = generate(&config)?;
    write_dataset(&args.out, &config, &samples)
        .with_context(|| format!("writing dataset to {}", args.out.display()))?;
    if cli.json {
        println!(
            "{}",
            serde_json::json!({
                "command": "gen-data",
                "dir": args.out.display().to_string(),
                "count": samples.len(),
                "slots": config.slots,
                "frames": config.frames,
                "channels": config.channels,
                "candidates_per_sample": samples[0].candidates.len(),
            })
        );
    } else {
        println!(
            "wrote {} samples ({}x{}x{} grids, {} candidate windows each) to {}",
            samples.len(),
            config.slots,
            config.frames,
            config.channels,
            samples[0].candidates.len(),
            args.out.display()
        );
    }
    Ok(())
}

// ── train-vtg ──

#[derive(Args)]
struct TrainVtgArgs {
    /// Dataset directory produced by gen-data
    #[arg(long)]
    data: PathBuf,

    /// Samples trained on, taken from the front of the manifest
    /// (default: two thirds of the dataset)
    #[arg(long)]
    train_count: Option<usize>,

    #[arg(long, default_value_t = 10)]
    epochs: usize,

    #[arg(long, default_value_t = 16)]
    batch_size: usize,

    #[arg(long, default_value_t = 1e-4)]
    lr: f64,

    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,

    #[arg(long, default_value = "full")]
    variant: String,

    #[arg(long, default_value_t = 4)]
    heads: usize,

    /// Cap refinement at this many steps
    #[arg(long)]
    max_steps: Option<usize>,

    /// Overlap at or below this labels a candidate 0
    #[arg(long, default_value_t = 0.3)]
    tau_min: f64,

    /// Overlap at or above this labels a candidate 1
    #[arg(long, default_value_t = 0.7)]
    tau_max: f64,

    /// Where to save the trained weights
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,

    /// Where to write the per-epoch metrics table (default: stdout)
    #[arg(long)]
    metrics: Option<PathBuf>,
}

fn cmd_train_vtg(cli: &Cli, args: &TrainVtgArgs) -> Result<()> {
    let dataset =
        read_dataset(&args.data).with_context(|| format!("reading {}", args.data.display()))?;
    let total = dataset.samples.len();
    let train_count = args.train_count.unwrap_or((total * 2) / 3);
    let variant = parse_variant(&args.variant)?;
    let config = TrainConfig {
        seed: cli.seed,
        epochs: args.epochs,
        batch_size: args.batch_size,
        optimizer: AdamConfig {
            lr: args.lr,
            weight_decay: args.weight_decay,
            ..AdamConfig::default()
        },
        refiner: RefinerConfig {
            heads: args.heads,
            max_steps: args.max_steps,
            ..RefinerConfig::for_variant(variant)
        },
        tau: (args.tau_min, args.tau_max),
        threads: cli.threads,
    };
    let on_epoch = |r: &EpochRecord| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  rank1@0.5 {:.4}  rank1@0.7 {:.4}",
            r.epoch, r.train_loss, r.eval.rank1_at_05, r.eval.rank1_at_07
        );
    };
    let outcome = train_vtg_with(&config, &dataset, train_count, on_epoch)?;

    let table = history_tsv(&outcome.history);
    if let Some(path) = &args.metrics {
        fs::write(path, &table).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(dir) = &args.checkpoint_dir {
        save_checkpoint(dir, &outcome.state)
            .with_context(|| format!("writing checkpoint to {}", dir.display()))?;
    }
    let last = outcome.history.last().expect("history is never empty");
    if cli.json {
        println!(
            "{}",
            serde_json::json!({
                "command": "train-vtg",
                "variant": variant.name(),
                "train_count": train_count,
                "eval_count": total - train_count,
                "epochs": args.epochs,
                "final_train_loss": last.train_loss,
                "final_rank1_at_05": last.eval.rank1_at_05,
                "final_rank1_at_07": last.eval.rank1_at_07,
                "final_rank5_at_05": last.eval.rank5_at_05,
            })
        );
    } else if args.metrics.is_none() {
        print!("{table}");
    }
    Ok(())
}

// ── eval-vtg ──

#[derive(Args)]
struct EvalVtgArgs {
    /// Dataset directory produced by gen-data
    #[arg(long)]
    data: PathBuf,

    /// Trained checkpoint directory (default: fresh seeded weights)
    #[arg(long)]
    checkpoint: Option<PathBuf>,

    /// Skip this many leading samples, evaluating the manifest tail
    #[arg(long, default_value_t = 0)]
    skip: usize,

    #[arg(long, default_value = "full")]
    variant: String,

    #[arg(long, default_value_t = 4)]
    heads: usize,

    /// Cap refinement at this many steps
    #[arg(long)]
    max_steps: Option<usize>,

    /// Where to write the TSV (default: stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_eval_vtg(cli: &Cli, args: &EvalVtgArgs) -> Result<()> {
    let dataset =
        read_dataset(&args.data).with_context(|| format!("reading {}", args.data.display()))?;
    if args.skip >= dataset.samples.len() {
        bail!(
            "--skip {} leaves no samples out of {}",
            args.skip,
            dataset.samples.len()
        );
    }
    let samples = &dataset.samples[args.skip..];
    let variant = parse_variant(&args.variant)?;
    let config = RefinerConfig {
        heads: args.heads,
        max_steps: args.max_steps,
        ..RefinerConfig::for_variant(variant)
    };
    let state = match &args.checkpoint {
        Some(dir) => {
            load_checkpoint(dir).with_context(|| format!("loading {}", dir.display()))?
        }
        None => {
            let mut rng = rng_from(derive_seed(cli.seed, "init"));
            RefinerParams::init(dataset.config.channels, args.heads, &mut rng)?.to_state()
        }
    };
    let embedder = dataset.config.embedder();
    let queries = vtg_queries(&state, &config, &embedder, samples, cli.threads)?;

    let cells = [(1usize, 0.5), (1, 0.7), (5, 0.5), (5, 0.7)];
    let mut rows = Vec::with_capacity(cells.len());
    for (n, m) in cells {
        rows.push((n, m, rank_n_at_m(&queries, n, m)?));
    }
    let mean = rows.iter().map(|r| r.2).sum::<f64>() / rows.len() as f64;

    let mut table = String::from("n\tm\tvalue\n");
    for (n, m, value) in &rows {
        table.push_str(&format!("{n}\t{m}\t{value:.4}\n"));
    }
    table.push_str(&format!("mean\t-\t{mean:.4}\n"));
    emit_table(&args.out, &table)?;
    if cli.json {
        println!(
            "{}",
            serde_json::json!({
                "command": "eval-vtg",
                "samples": samples.len(),
                "rows": rows
                    .iter()
                    .map(|(n, m, value)| serde_json::json!({ "n": n, "m": m, "value": value }))
                    .collect::<Vec<_>>(),
                "mean": mean,
            })
        );
    }
    Ok(())
}

// ── eval-rvos ──

#[derive(Args)]
struct EvalRvosArgs {
    /// Predicted masks: PGM frames, one subdirectory per sequence (a flat
    /// directory is treated as a single sequence)
    #[arg(long)]
    pred: PathBuf,

    /// Ground-truth masks with the same layout and file names
    #[arg(long)]
    gt: PathBuf,

    /// Boundary match radius in pixels
    #[arg(long, default_value_t = 1)]
    radius: usize,

    /// Where to write the TSV (default: stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Sequence name and its frame file names, both sorted for stable output.
fn mask_sequences(root: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let list_pgms = |dir: &Path| -> Result<Vec<String>> {
        let mut frames = Vec::new();
        for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if entry.file_type()?.is_file() && name.ends_with(".pgm") {
                frames.push(name);
            }
        }
        frames.sort();
        Ok(frames)
    };

    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).with_context(|| format!("listing {}", root.display()))? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            dirs.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    dirs.sort();

    let mut sequences = Vec::new();
    if dirs.is_empty() {
        sequences.push(("all".to_string(), list_pgms(root)?));
    } else {
        for dir in dirs {
            let frames = list_pgms(&root.join(&dir))?;
            sequences.push((dir, frames));
        }
    }
    for (name, frames) in &sequences {
        if frames.is_empty() {
            bail!("sequence {name:?} holds no .pgm frames");
        }
    }
    if sequences.is_empty() {
        bail!("{} holds no mask sequences", root.display());
    }
    Ok(sequences)
}

fn cmd_eval_rvos(cli: &Cli, args: &EvalRvosArgs) -> Result<()> {
    // Ground truth defines the frame set; every gt frame needs a prediction.
    let sequences = mask_sequences(&args.gt)?;
    let mut table = String::from("sequence\tframes\tj\tf\tjf\n");
    let mut summaries = Vec::with_capacity(sequences.len());
    for (name, frames) in &sequences {
        let sub: PathBuf = if name == "all" {
            PathBuf::new()
        } else {
            PathBuf::from(name)
        };
        let pairs: Vec<(BinaryMask, BinaryMask)> = frames
            .iter()
            .map(|frame| -> Result<(BinaryMask, BinaryMask)> {
                let pred_path = args.pred.join(&sub).join(frame);
                let gt_path = args.gt.join(&sub).join(frame);
                let pred = read_pgm(&pred_path)
                    .with_context(|| format!("reading {}", pred_path.display()))?;
                let gt = read_pgm(&gt_path)
                    .with_context(|| format!("reading {}", gt_path.display()))?;
                Ok((pred, gt))
            })
            .collect::<Result<_>>()?;
        let summary = j_and_f(&pairs, args.radius)
            .with_context(|| format!("scoring sequence {name:?}"))?;
        table.push_str(&format!(
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\n",
            name,
            frames.len(),
            summary.j_mean,
            summary.f_mean,
            summary.combined
        ));
        summaries.push((frames.len(), summary));
    }
    let count = summaries.len() as f64;
    let total_frames: usize = summaries.iter().map(|(n, _)| n).sum();
    let j = summaries.iter().map(|(_, s)| s.j_mean).sum::<f64>() / count;
    let f = summaries.iter().map(|(_, s)| s.f_mean).sum::<f64>() / count;
    let jf = summaries.iter().map(|(_, s)| s.combined).sum::<f64>() / count;
    table.push_str(&format!("mean\t{total_frames}\t{j:.4}\t{f:.4}\t{jf:.4}\n"));
    emit_table(&args.out, &table)?;
    if cli.json {
        println!(
            "{}",
            serde_json::json!({
                "command": "eval-rvos",
                "sequences": sequences.len(),
                "frames": total_frames,
                "j": j,
                "f": f,
                "jf": jf,
            })
        );
    }
    Ok(())
}

// ── bench-attn ──

#[derive(Args)]
struct BenchAttnArgs {
    /// Spatial token counts, comma separated
    #[arg(long, value_delimiter = ',', default_value = "1,2,8,20,32")]
    nf: Vec<usize>,

    /// Frame counts, comma separated
    #[arg(long, value_delimiter = ',', default_value = "1,2,6,32,64")]
    t: Vec<usize>,

    /// Channel width
    #[arg(long, default_value_t = 64)]
    c: usize,

    #[arg(long, default_value_t = 4)]
    heads: usize,

    /// Timed repeats per table cell; 0 skips wallclock columns
    #[arg(long, default_value_t = 0)]
    repeats: usize,

    /// Where to write the TSV (default: stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_bench_attn(cli: &Cli, args: &BenchAttnArgs) -> Result<()> {
    if args.nf.is_empty() || args.t.is_empty() {
        bail!("--nf and --t need at least one value each");
    }
    let mut dims = Vec::with_capacity(args.nf.len() * args.t.len());
    for &nf in &args.nf {
        for &t in &args.t {
            dims.push((nf, t));
        }
    }
    let rows = bench::complexity_table(&dims, args.c)?;
    for row in &rows {
        if !row.agrees() {
            bail!(
                "instrumented counts diverged from closed forms at ({}, {})",
                row.slots,
                row.frames
            );
        }
    }
    let table = if args.repeats > 0 {
        bench::timed_tsv(&bench::timed_table(&dims, args.c, args.heads, args.repeats)?)
    } else {
        bench::complexity_tsv(&rows)
    };
    emit_table(&args.out, &table)?;
    if cli.json {
        println!(
            "{}",
            serde_json::json!({
                "command": "bench-attn",
                "rows": rows.len(),
                "channels": args.c,
                "timed": args.repeats > 0,
            })
        );
    }
    Ok(())
}
