//! Grounding trainer: fits refiner weights with AdamW on scaled-overlap
//! cross entropy, evaluates with ranked retrieval metrics, and writes
//! checkpoints as one tensor file per parameter.
//!
//! Determinism contract: the same config over the same dataset produces
//! bitwise-identical histories, weights, and checkpoint files. Shuffling
//! draws from a per-epoch derived stream and evaluation fans out over
//! order-preserving maps only.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{EmbedError, Embedder};
use crate::heads::{
    ranked_spans, scaled_iou_labels, vtg_loss, vtg_scores, HeadError, TAU_MAX, TAU_MIN,
};
use crate::metrics::{rank_n_at_m, MetricError, RankedQuery};
use crate::parallel::par_map;
use crate::planner::{decompose, PlanError};
use crate::refiner::{
    refine, ChainEmbeddings, RefineError, RefinerConfig, RefinerParams, RefinerState,
};
use crate::seeding::{derive_seed, derive_seed_indexed, rng_from};
use crate::synth::{Dataset, GroundingSample};
use crate::tensor::{
    adamw_step, read_tensor, write_tensor, AdamConfig, AdamState, Tape, Tensor, TensorError,
    TensorIoError,
};
use crate::treebank::{parse_tree, TreeParseError};

// ── Errors ──

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("caption failed to parse: {0}")]
    Parse(#[from] TreeParseError),
    #[error("caption has no groundable structure: {0}")]
    Plan(#[from] PlanError),
    #[error("bad training config: {detail}")]
    BadConfig { detail: String },
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("tensor file: {0}")]
    TensorIo(#[from] TensorIoError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint {path}: {detail}")]
    BadCheckpoint { path: String, detail: String },
}

// ── Config ──

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub seed: u64,
    /// Zero is valid: evaluate the untrained weights and stop.
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub refiner: RefinerConfig,
    /// Overlap thresholds mapped to label 0 and 1.
    pub tau: (f64, f64),
    /// Threads for evaluation fan-out; 1 is sequential, 0 takes the pool
    /// default. Results are identical either way.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            epochs: 10,
            batch_size: 8,
            optimizer: AdamConfig {
                lr: 3e-3,
                weight_decay: 0.01,
                ..AdamConfig::default()
            },
            refiner: RefinerConfig::default(),
            tau: (TAU_MIN, TAU_MAX),
            threads: 1,
        }
    }
}

// ── Reports ──

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VtgEval {
    pub rank1_at_05: f64,
    pub rank1_at_07: f64,
    pub rank5_at_05: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval: VtgEval,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub state: RefinerState,
}

/// Fixed-format table of the training history, one row per epoch. The
/// formatting is part of the reproducibility surface: identical runs must
/// produce identical bytes.
pub fn history_tsv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch\ttrain_loss\trank1_at_05\trank1_at_07\trank5_at_05\n");
    for r in history {
        out.push_str(&format!(
            "{}\t{:.6}\t{:.4}\t{:.4}\t{:.4}\n",
            r.epoch, r.train_loss, r.eval.rank1_at_05, r.eval.rank1_at_07, r.eval.rank5_at_05
        ));
    }
    out
}

// ── Sample preparation ──

/// Language-side view of one sample: chain and sentence embeddings plus
/// per-candidate regression targets. Grids stay on the sample.
struct Prepared {
    chain: ChainEmbeddings,
    sentence: Vec<f64>,
    labels: Vec<f64>,
}

fn prepare(
    embedder: &dyn Embedder,
    sample: &GroundingSample,
    tau: (f64, f64),
) -> Result<Prepared, TrainError> {
    let tree = parse_tree(&sample.tree)?;
    let chain = decompose(&tree)?;
    Ok(Prepared {
        chain: ChainEmbeddings::from_chain(embedder, &chain)?,
        sentence: embedder.embed(&tree.text())?,
        labels: scaled_iou_labels(&sample.candidates, sample.gt, tau.0, tau.1),
    })
}

fn sample_loss(
    tape: &mut Tape,
    params: &RefinerParams,
    refiner: &RefinerConfig,
    sample: &GroundingSample,
    prepared: &Prepared,
) -> Result<Tensor, TrainError> {
    let grid = sample.grid.to_tensor();
    let (refined, _) = refine(tape, params, refiner, &grid, &prepared.chain)?;
    let scores = vtg_scores(tape, &refined, &prepared.sentence, &sample.candidates)?;
    Ok(vtg_loss(tape, &scores, &prepared.labels)?)
}

// ── Evaluation ──

/// Rank every sample's candidates under a weight snapshot. Each sample
/// refines and scores on its own tape, so the fan-out is safe and the
/// result does not depend on `threads`.
pub fn vtg_queries<E: Embedder + Sync>(
    state: &RefinerState,
    refiner: &RefinerConfig,
    embedder: &E,
    samples: &[GroundingSample],
    threads: usize,
) -> Result<Vec<RankedQuery>, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::BadConfig {
            detail: "evaluation needs at least one sample".into(),
        });
    }
    let queries = par_map(samples, threads, |sample| -> Result<RankedQuery, TrainError> {
        let params = RefinerParams::from_state(state)?;
        let prepared = prepare(embedder, sample, (TAU_MIN, TAU_MAX))?;
        let mut tape = Tape::new();
        let grid = sample.grid.to_tensor();
        let (refined, _) = refine(&mut tape, &params, refiner, &grid, &prepared.chain)?;
        let scores = vtg_scores(&mut tape, &refined, &prepared.sentence, &sample.candidates)?;
        Ok(RankedQuery {
            gt: (sample.gt.0 as f64, sample.gt.1 as f64),
            ranked: ranked_spans(&sample.candidates, &scores.value()),
        })
    });
    queries.into_iter().collect()
}

/// Ranked-retrieval quality of a weight snapshot over `samples`.
pub fn evaluate_vtg<E: Embedder + Sync>(
    state: &RefinerState,
    refiner: &RefinerConfig,
    embedder: &E,
    samples: &[GroundingSample],
    threads: usize,
) -> Result<VtgEval, TrainError> {
    let queries = vtg_queries(state, refiner, embedder, samples, threads)?;
    Ok(VtgEval {
        rank1_at_05: rank_n_at_m(&queries, 1, 0.5)?,
        rank1_at_07: rank_n_at_m(&queries, 1, 0.7)?,
        rank5_at_05: rank_n_at_m(&queries, 5, 0.5)?,
    })
}

// ── Training ──

/// Train on the first `train_count` samples of `dataset` (manifest order)
/// and evaluate on the rest after every epoch. The history always opens
/// with an epoch-0 record for the untrained weights, so zero epochs means
/// "report the baseline".
///
/// Gradients accumulate across the batch from per-sample tapes, each loss
/// scaled by the batch size, so one optimizer step sees the batch mean.
pub fn train_vtg(
    config: &TrainConfig,
    dataset: &Dataset,
    train_count: usize,
) -> Result<TrainOutcome, TrainError> {
    train_vtg_with(config, dataset, train_count, |_| {})
}

/// [`train_vtg`] with a per-epoch observer, called as each history record
/// (the epoch-0 baseline included) is finished.
pub fn train_vtg_with(
    config: &TrainConfig,
    dataset: &Dataset,
    train_count: usize,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    let n = dataset.samples.len();
    if config.batch_size == 0 {
        return Err(TrainError::BadConfig {
            detail: "batch_size must be positive".into(),
        });
    }
    if !(config.tau.1 > config.tau.0) {
        return Err(TrainError::BadConfig {
            detail: format!("tau thresholds must be ordered, got {:?}", config.tau),
        });
    }
    if train_count == 0 || train_count >= n {
        return Err(TrainError::BadConfig {
            detail: format!(
                "train split {train_count} of {n} leaves no training or no evaluation samples"
            ),
        });
    }
    let embedder = dataset.config.embedder();
    let (train, eval) = dataset.samples.split_at(train_count);
    let prepared: Vec<Prepared> = train
        .iter()
        .map(|s| prepare(&embedder, s, config.tau))
        .collect::<Result<_, _>>()?;

    let mut rng = rng_from(derive_seed(config.seed, "init"));
    let params = RefinerParams::init(dataset.config.channels, config.refiner.heads, &mut rng)?;
    let tensors = params.tensors();
    let mut adam = AdamState::new(&tensors);

    let mut history = Vec::with_capacity(config.epochs + 1);

    // Epoch 0: the untrained baseline, forward passes only.
    let mut baseline_sum = 0.0;
    for (sample, prep) in train.iter().zip(&prepared) {
        let mut tape = Tape::new();
        let loss = sample_loss(&mut tape, &params, &config.refiner, sample, prep)?;
        baseline_sum += loss.item();
    }
    history.push(EpochRecord {
        epoch: 0,
        train_loss: baseline_sum / train.len() as f64,
        eval: evaluate_vtg(
            &params.to_state(),
            &config.refiner,
            &embedder,
            eval,
            config.threads,
        )?,
    });
    on_epoch(&history[0]);

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        let mut shuffle_rng = rng_from(derive_seed_indexed(config.seed, "shuffle", epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for (batch_index, batch) in order.chunks(config.batch_size).enumerate() {
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut tape = Tape::new();
                let loss = sample_loss(&mut tape, &params, &config.refiner, &train[i], &prepared[i])?;
                let value = loss.item();
                if !value.is_finite() {
                    return Err(TrainError::Diverged {
                        epoch,
                        batch: batch_index,
                    });
                }
                loss_sum += value;
                let scaled = tape.scale(&loss, inv)?;
                tape.backward(&scaled)?;
            }
            adamw_step(&tensors, &mut adam, &config.optimizer)?;
            for t in &tensors {
                t.zero_grad();
            }
        }

        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            eval: evaluate_vtg(
                &params.to_state(),
                &config.refiner,
                &embedder,
                eval,
                config.threads,
            )?,
        });
        on_epoch(history.last().expect("just pushed"));
    }

    Ok(TrainOutcome {
        history,
        state: params.to_state(),
    })
}

// ── Checkpoints ──

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointIndex {
    channels: usize,
    heads: usize,
    params: Vec<IndexEntry>,
}

/// Write `state` as `index.json` plus one tensor file per parameter.
pub fn save_checkpoint(dir: &Path, state: &RefinerState) -> Result<(), TrainError> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(state.params.len());
    for p in &state.params {
        let file = format!("{}.prtk", p.name);
        let tensor = Tensor::from_vec(p.data.clone(), &p.shape)?;
        write_tensor(&dir.join(&file), &tensor)?;
        entries.push(IndexEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            file,
        });
    }
    let index = CheckpointIndex {
        channels: state.channels,
        heads: state.heads,
        params: entries,
    };
    let mut json = serde_json::to_string_pretty(&index)?;
    json.push('\n');
    fs::write(dir.join("index.json"), json)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<RefinerState, TrainError> {
    let index_path = dir.join("index.json");
    let bad = |detail: String| TrainError::BadCheckpoint {
        path: index_path.display().to_string(),
        detail,
    };
    if !index_path.exists() {
        return Err(bad("index.json not found".into()));
    }
    let index: CheckpointIndex = serde_json::from_str(&fs::read_to_string(&index_path)?)?;
    let mut params = Vec::with_capacity(index.params.len());
    for entry in &index.params {
        let tensor = read_tensor(&dir.join(&entry.file))?;
        if tensor.shape() != entry.shape {
            return Err(bad(format!(
                "{} has shape {:?}, index says {:?}",
                entry.file,
                tensor.shape(),
                entry.shape
            )));
        }
        params.push(crate::refiner::ParamState {
            name: entry.name.clone(),
            shape: entry.shape.clone(),
            data: tensor.value(),
        });
    }
    Ok(RefinerState {
        channels: index.channels,
        heads: index.heads,
        params,
    })
}

// ── Tests ──

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};
    use crate::tensor::test_util::assert_close;

    fn tiny_dataset() -> Dataset {
        let config = SynthConfig {
            seed: 11,
            count: 8,
            slots: 2,
            frames: 16,
            channels: 8,
            noise: 0.3,
            distractor_rate: 0.5,
            ..SynthConfig::default()
        };
        let samples = generate(&config).unwrap();
        Dataset { config, samples }
    }

    fn tiny_train_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            refiner: RefinerConfig {
                heads: 2,
                ..RefinerConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_falls_on_a_tiny_corpus() {
        let dataset = tiny_dataset();
        let outcome = train_vtg(&tiny_train_config(4), &dataset, 6).unwrap();
        // Four trained epochs behind the untrained baseline.
        assert_eq!(outcome.history.len(), 5);
        assert_eq!(outcome.history[0].epoch, 0);
        let first = outcome.history.first().unwrap().train_loss;
        let last = outcome.history.last().unwrap().train_loss;
        assert!(
            last < first,
            "loss should fall, went {first:.4} -> {last:.4}"
        );
        for r in &outcome.history {
            assert!(r.train_loss.is_finite());
            assert!((0.0..=1.0).contains(&r.eval.rank1_at_05));
        }
    }

    #[test]
    fn zero_epochs_reports_the_untrained_baseline() {
        let dataset = tiny_dataset();
        let outcome = train_vtg(&tiny_train_config(0), &dataset, 6).unwrap();
        assert_eq!(outcome.history.len(), 1);
        assert_eq!(outcome.history[0].epoch, 0);
        // Weights are exactly the seeded init, untouched by the optimizer.
        let mut rng = rng_from(derive_seed(42, "init"));
        let fresh = RefinerParams::init(dataset.config.channels, 2, &mut rng).unwrap();
        assert_eq!(outcome.state, fresh.to_state());
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let dataset = tiny_dataset();
        let cfg = tiny_train_config(2);
        let a = train_vtg(&cfg, &dataset, 6).unwrap();
        let b = train_vtg(&cfg, &dataset, 6).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.state, b.state);
        assert_eq!(history_tsv(&a.history), history_tsv(&b.history));
    }

    #[test]
    fn eval_threads_do_not_change_results() {
        let dataset = tiny_dataset();
        let outcome = train_vtg(&tiny_train_config(1), &dataset, 6).unwrap();
        let embedder = dataset.config.embedder();
        let refiner = tiny_train_config(1).refiner;
        let seq = evaluate_vtg(&outcome.state, &refiner, &embedder, &dataset.samples[6..], 1)
            .unwrap();
        let par = evaluate_vtg(&outcome.state, &refiner, &embedder, &dataset.samples[6..], 4)
            .unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn bad_splits_are_rejected() {
        let dataset = tiny_dataset();
        let cfg = tiny_train_config(1);
        for split in [0, dataset.samples.len()] {
            assert!(matches!(
                train_vtg(&cfg, &dataset, split),
                Err(TrainError::BadConfig { .. })
            ));
        }
    }

    #[test]
    fn non_finite_grids_trip_the_divergence_guard() {
        let mut dataset = tiny_dataset();
        dataset.samples[0].grid.data[0] = f64::NAN;
        match train_vtg(&tiny_train_config(1), &dataset, 6) {
            Err(TrainError::Diverged { epoch: 1, .. }) => {}
            other => panic!("expected Diverged, got {other:?}"),
        }
    }

    #[test]
    fn checkpoints_round_trip_through_disk() {
        let dataset = tiny_dataset();
        let outcome = train_vtg(&tiny_train_config(1), &dataset, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &outcome.state).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.channels, outcome.state.channels);
        assert_eq!(loaded.heads, outcome.state.heads);
        assert_eq!(loaded.params.len(), outcome.state.params.len());
        for (a, b) in outcome.state.params.iter().zip(&loaded.params) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            // Tensor files hold f32 payloads.
            assert_close(&a.data, &b.data, 1e-5);
        }
        // Loaded states rebuild working parameters.
        RefinerParams::from_state(&loaded).unwrap();
    }

    #[test]
    fn missing_checkpoints_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(TrainError::BadCheckpoint { .. })
        ));
    }

    #[test]
    fn history_table_has_fixed_format() {
        let history = [EpochRecord {
            epoch: 1,
            train_loss: 0.6931471805599453,
            eval: VtgEval {
                rank1_at_05: 0.5,
                rank1_at_07: 0.25,
                rank5_at_05: 1.0,
            },
        }];
        let tsv = history_tsv(&history);
        assert_eq!(
            tsv,
            "epoch\ttrain_loss\trank1_at_05\trank1_at_07\trank5_at_05\n\
             1\t0.693147\t0.5000\t0.2500\t1.0000\n"
        );
    }
}
