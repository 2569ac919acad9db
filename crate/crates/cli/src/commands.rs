//! The four subcommands, generic over run precision.

use crate::checkpoint::{load_config, load_state, save_state};
use crate::config;
use crate::metrics::MetricsLog;
use anyhow::{anyhow, bail, Context, Result};
use std::path::{Path, PathBuf};
use vsm_core::data::Split;
use vsm_core::rng::{derive, stream};
use vsm_core::scalar::Scalar;
use vsm_core::trainer::{
    episode_loss, evaluate, train, AblationMode, EpisodeCtx, GridSpec, Precision, TrainConfig,
    TrainError, TrainerState,
};

/// Process exit code classes: 2 config, 3 data, 4 numeric failure.
pub struct CliError {
    pub code: i32,
    pub source: anyhow::Error,
}

impl std::fmt::Debug for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.source)
    }
}

pub type CliResult<T = ()> = std::result::Result<T, CliError>;

fn config_err(source: anyhow::Error) -> CliError {
    CliError { code: 2, source }
}

fn data_err(source: anyhow::Error) -> CliError {
    CliError { code: 3, source }
}

fn classify_train_error(e: TrainError) -> CliError {
    let code = match &e {
        TrainError::Config { .. } => 2,
        TrainError::Data(_) => 3,
        TrainError::NonFinite { .. } => 4,
        _ => 1,
    };
    CliError {
        code,
        source: anyhow!(e),
    }
}

pub fn cmd_train(config_path: &Path, seed: Option<u64>, out: &Path) -> CliResult {
    let cfg = config::load_config(config_path, seed).map_err(config_err)?;
    match cfg.precision {
        Precision::F32 => run_train::<f32>(cfg, out),
        Precision::F64 => run_train::<f64>(cfg, out),
    }
}

fn run_train<E: Scalar>(cfg: TrainConfig, out: &Path) -> CliResult {
    std::fs::create_dir_all(out)
        .with_context(|| format!("cannot create output directory {}", out.display()))
        .map_err(data_err)?;
    let data = cfg.load_dataset::<E>().map_err(classify_train_error)?;
    let state = TrainerState::<E>::new(cfg.clone()).map_err(classify_train_error)?;
    let mut log = MetricsLog::create(&out.join("metrics.jsonl")).map_err(data_err)?;
    let mut log_err = None;
    let output = train(state, &data, |m| {
        log::info!(
            "episode {}: {} accuracy {:.4} +- {:.4} (|M| = {})",
            m.episode,
            m.split,
            m.accuracy,
            m.half_width,
            m.memory_slots
        );
        if let Err(e) = log.append(m) {
            log_err.get_or_insert(e);
        }
    })
    .map_err(classify_train_error)?;
    if let Some(e) = log_err {
        return Err(data_err(e));
    }
    let final_path = out.join("checkpoint.vsmc");
    save_state(&final_path, &output.state).map_err(data_err)?;
    save_state(&out.join("checkpoint_best.vsmc"), &output.best_state).map_err(data_err)?;
    println!(
        "trained {} episodes; best val accuracy {:.4}; checkpoint: {}",
        output.state.episodes_done,
        output.best_val_accuracy,
        final_path.display()
    );
    Ok(())
}

pub fn cmd_eval(
    checkpoint: &Path,
    split: Split,
    episodes: Option<usize>,
    seed: Option<u64>,
) -> CliResult {
    let cfg = load_config(checkpoint).map_err(data_err)?;
    match cfg.precision {
        Precision::F32 => run_eval::<f32>(checkpoint, split, episodes, seed),
        Precision::F64 => run_eval::<f64>(checkpoint, split, episodes, seed),
    }
}

fn run_eval<E: Scalar>(
    checkpoint: &Path,
    split: Split,
    episodes: Option<usize>,
    seed: Option<u64>,
) -> CliResult {
    let mut state: TrainerState<E> = load_state(checkpoint).map_err(data_err)?;
    if let Some(seed) = seed {
        state.config.seed = seed;
    }
    let episodes = episodes.unwrap_or(state.config.eval_episodes);
    let data = state
        .config
        .load_dataset::<E>()
        .map_err(classify_train_error)?;
    let metrics = evaluate(
        &state.models,
        &state.store,
        data.get(split),
        &state.config,
        episodes,
        stream::EVAL_DATA ^ u64::MAX,
        state.episodes_done,
    )
    .map_err(classify_train_error)?;
    println!(
        "accuracy {:.4} +- {:.4} (split={}, episodes={}, ce={:.4}, kl_z={:.4}, kl_m={:.4}, memory_slots={})",
        metrics.accuracy,
        metrics.half_width,
        metrics.split,
        episodes,
        metrics.ce,
        metrics.kl_z,
        metrics.kl_m,
        metrics.memory_slots
    );
    Ok(())
}

/// `alpha=0:1:0.1` (inclusive range) or `mode=protonet,vpn,vsm`.
pub fn parse_grid(spec: &str) -> Result<GridSpec> {
    let (axis, rest) = spec
        .split_once('=')
        .context("grid spec must look like axis=values")?;
    match axis.trim() {
        "alpha" => {
            let parts: Vec<&str> = rest.split(':').collect();
            if parts.len() != 3 {
                bail!("alpha grid must be start:end:step, got {rest}");
            }
            let start: f64 = parts[0].parse().context("alpha start")?;
            let end: f64 = parts[1].parse().context("alpha end")?;
            let step: f64 = parts[2].parse().context("alpha step")?;
            if step <= 0.0 || end < start {
                bail!("alpha grid needs step > 0 and end >= start");
            }
            let n = ((end - start) / step).round() as usize + 1;
            let values: Vec<f64> = (0..n)
                .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
                .filter(|&v| v <= end + 1e-9)
                .collect();
            if values.is_empty() {
                bail!("alpha grid is empty");
            }
            Ok(GridSpec::Alpha(values))
        }
        "mode" | "modes" => {
            let modes: Vec<AblationMode> = rest
                .split(',')
                .map(|m| {
                    serde_json::from_value(serde_json::Value::String(m.trim().to_string()))
                        .map_err(|_| anyhow!("unknown mode {m}"))
                })
                .collect::<Result<_>>()?;
            if modes.is_empty() {
                bail!("mode grid is empty");
            }
            Ok(GridSpec::Modes(modes))
        }
        other => bail!("unknown grid axis {other} (use alpha or mode)"),
    }
}

pub fn cmd_ablate(config_path: &Path, grid: &str, out: &Path, seed: Option<u64>) -> CliResult {
    if grid.trim().is_empty() {
        return Err(config_err(anyhow!("empty grid spec")));
    }
    let grid = parse_grid(grid).map_err(config_err)?;
    let cfg = config::load_config(config_path, seed).map_err(config_err)?;
    match cfg.precision {
        Precision::F32 => run_ablate::<f32>(cfg, grid, out),
        Precision::F64 => run_ablate::<f64>(cfg, grid, out),
    }
}

fn run_ablate<E: Scalar>(cfg: TrainConfig, grid: GridSpec, out: &Path) -> CliResult {
    let rows = vsm_core::trainer::ablation_suite::<E>(&cfg, &grid).map_err(classify_train_error)?;
    let mut w = csv::Writer::from_path(out)
        .with_context(|| format!("cannot create {}", out.display()))
        .map_err(data_err)?;
    for row in &rows {
        w.serialize(row)
            .context("csv serialization")
            .map_err(data_err)?;
    }
    w.flush().context("csv flush").map_err(data_err)?;
    println!("wrote {} comparison rows to {}", rows.len(), out.display());
    Ok(())
}

pub fn cmd_dump_prototypes(
    checkpoint: &Path,
    episodes: usize,
    out: &Path,
    seed: Option<u64>,
) -> CliResult {
    let cfg = load_config(checkpoint).map_err(data_err)?;
    match cfg.precision {
        Precision::F32 => run_dump::<f32>(checkpoint, episodes, out, seed),
        Precision::F64 => run_dump::<f64>(checkpoint, episodes, out, seed),
    }
}

const DUMP_STREAM: u64 = 0xD07;

fn run_dump<E: Scalar>(
    checkpoint: &Path,
    episodes: usize,
    out: &Path,
    seed: Option<u64>,
) -> CliResult {
    let mut state: TrainerState<E> = load_state(checkpoint).map_err(data_err)?;
    if let Some(seed) = seed {
        state.config.seed = seed;
    }
    let cfg = state.config.clone();
    if cfg.mode == AblationMode::Protonet {
        return Err(config_err(anyhow!(
            "prototypes are deterministic means in protonet mode; nothing to dump"
        )));
    }
    let data = cfg.load_dataset::<E>().map_err(classify_train_error)?;
    let split = if data.test.n_classes() >= cfg.n_way {
        Split::Test
    } else {
        Split::Train
    };
    let ds = data.get(split);

    let mut w = csv::Writer::from_path(out)
        .with_context(|| format!("cannot create {}", out.display()))
        .map_err(data_err)?;
    let d = state.models.networks.feature_dim();
    let mut header = vec![
        "episode".to_string(),
        "class_id".to_string(),
        "kind".to_string(),
        "sample_index".to_string(),
    ];
    header.extend((0..d).map(|i| format!("f{i}")));
    w.write_record(&header).context("csv header").map_err(data_err)?;

    let ctx = EpisodeCtx {
        training: false,
        compute_grads: false,
        gumbel_tau: cfg.gumbel.min_temperature,
    };
    for e in 0..episodes {
        let mut data_rng = derive(cfg.seed, &[DUMP_STREAM, stream::EVAL_DATA, e as u64]);
        let episode = vsm_core::data::sample_episode(
            ds,
            cfg.n_way,
            cfg.k_shot,
            cfg.queries_per_class,
            &mut data_rng,
        )
        .map_err(|err| classify_train_error(err.into()))?;
        let mut model_rng = derive(cfg.seed, &[DUMP_STREAM, stream::EVAL_MODEL, e as u64]);
        let outcome = episode_loss(&state.models, &state.store, &episode, &cfg, ctx, &mut model_rng)
            .map_err(classify_train_error)?;

        let mut write_row = |class_id: i64, kind: &str, idx: usize, feats: &[E]| -> Result<()> {
            let mut rec = vec![
                e.to_string(),
                class_id.to_string(),
                kind.to_string(),
                idx.to_string(),
            ];
            rec.extend(feats.iter().map(|v| format!("{}", v.as_f64())));
            w.write_record(&rec)?;
            Ok(())
        };
        for (n, bank) in outcome.sample_banks.iter().enumerate() {
            for l in 0..bank.rows() {
                write_row(episode.class_ids[n], "sample", l, bank.row(l))
                    .context("csv row")
                    .map_err(data_err)?;
            }
        }
        for (n, means) in outcome.posterior_means.iter().enumerate() {
            // Hierarchical posteriors carry one mean per latent-memory
            // sample; the reported mean is the mixture mean.
            let rows = means.rows();
            let dd = means.row_len();
            let mut avg = vec![E::zero(); dd];
            for r in 0..rows {
                for (a, &v) in avg.iter_mut().zip(means.row(r)) {
                    *a += v / E::from_f64(rows as f64);
                }
            }
            write_row(episode.class_ids[n], "mean", 0, &avg)
                .context("csv row")
                .map_err(data_err)?;
        }
    }
    w.flush().context("csv flush").map_err(data_err)?;
    println!("wrote prototype dump to {}", out.display());
    Ok(())
}

/// Shared argument type for split selection.
#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SplitArg {
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}
