use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{lr_schedule, TrainConfig};
use super::step::{compare_hardness, train_step, StepReport, TrainState};
use crate::data::UnpairedDataset;
use crate::error::{Error, Result};
use crate::networks::checkpoint::{load_checkpoint, save_checkpoint};
use crate::networks::Partition;
use crate::plot;
use crate::sampling::{write_similarities, HardnessSummary};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const NAN_DUMP_FILE: &str = "nan_dump.json";
const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4521;
const HARDNESS_IMAGES: usize = 4;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Checkpoint to continue from; its epoch counter decides where.
    pub resume: Option<PathBuf>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub state: TrainState,
    /// Reports of the steps run by this call.
    pub reports: Vec<StepReport>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_path: PathBuf,
}

/// Per-epoch permutation of one domain, independent of the other domain.
pub fn epoch_permutation(seed: u64, epoch: usize, domain: u64, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
    rng.set_stream(2 * epoch as u64 + domain);
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng);
    idx
}

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir
        .join("checkpoints")
        .join(format!("epoch_{epoch:04}.safetensors"))
}

/// Most recent `epoch_*.safetensors` under `out_dir/checkpoints`.
pub fn latest_checkpoint(out_dir: &Path) -> Result<Option<PathBuf>> {
    let dir = out_dir.join("checkpoints");
    if !dir.exists() {
        return Ok(None);
    }
    let mut found: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().unwrap_or_default().to_string_lossy();
            name.starts_with("epoch_") && name.ends_with(".safetensors")
        })
        .collect();
    found.sort();
    Ok(found.pop())
}

/// Saves parameters, optimizer moments and counters.
pub fn save_state(path: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    let mut extra = BTreeMap::new();
    let mut opt_steps = BTreeMap::new();
    for p in Partition::ALL {
        let opt = state.optimizer(p);
        extra.extend(opt.state_tensors());
        opt_steps.insert(p.name().to_string(), opt.steps());
    }
    let mut meta = BTreeMap::new();
    meta.insert("epoch".to_string(), state.epoch.to_string());
    meta.insert("global_step".to_string(), state.global_step.to_string());
    meta.insert("optimizer_steps".to_string(), serde_json::to_string(&opt_steps)?);
    meta.insert("train_config".to_string(), serde_json::to_string(cfg)?);
    save_checkpoint(path, &state.nets, &extra, &meta)?;
    Ok(())
}

/// Restores a [`TrainState`] written by [`save_state`].
pub fn load_state(path: &Path, cfg: &TrainConfig) -> Result<TrainState> {
    let loaded = load_checkpoint(path)?;
    if loaded.header.negatives != cfg.negative_mode() || loaded.header.model != cfg.model {
        return Err(Error::Config(format!(
            "{}: checkpoint model does not match the configuration",
            path.display()
        )));
    }
    let nets = loaded.networks()?;
    let mut state = TrainState::from_networks(nets, cfg);
    let meta_num = |key: &str| -> Result<u64> {
        loaded
            .meta
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::InvalidInput(format!("{}: missing {key}", path.display())))
    };
    state.epoch = meta_num("epoch")? as usize;
    state.global_step = meta_num("global_step")?;
    let opt_steps: BTreeMap<String, u64> = match loaded.meta.get("optimizer_steps") {
        Some(s) => serde_json::from_str(s)?,
        None => BTreeMap::new(),
    };
    for p in Partition::ALL {
        let steps = opt_steps.get(p.name()).copied().unwrap_or(0);
        state.optimizer_mut(p).load_state(steps, &loaded.tensors)?;
    }
    Ok(state)
}

#[derive(Serialize, Deserialize)]
struct HardnessRecord {
    epoch: usize,
    generated: HardnessSummary,
    in_image: HardnessSummary,
}

fn write_hardness(out_dir: &Path, state: &TrainState, data: &UnpairedDataset, cfg: &TrainConfig) -> Result<()> {
    let dir = out_dir.join("hardness");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let n = data.a.len().min(HARDNESS_IMAGES);
    let idx: Vec<usize> = (0..n).collect();
    let x = UnpairedDataset::batch(&data.a, &idx)?;
    let cmp = compare_hardness(&state.nets, &x, cfg, cfg.seed)?;
    let stem = format!("epoch_{:04}", state.epoch);
    let generated = cmp.generated.concat();
    let in_image = cmp.in_image.concat();
    write_similarities(&dir.join(format!("{stem}_generated.tsv")), &generated)?;
    write_similarities(&dir.join(format!("{stem}_in_image.tsv")), &in_image)?;
    let record = HardnessRecord {
        epoch: state.epoch,
        generated: cmp.generated_summary(),
        in_image: cmp.in_image_summary(),
    };
    let path = dir.join(format!("{stem}_summary.json"));
    fs::write(&path, serde_json::to_string_pretty(&record)?).map_err(|e| Error::io(&path, e))?;
    plot::write_histogram_png(
        &dir.join(format!("{stem}.png")),
        &[(&generated, plot::GENERATED_COLOR), (&in_image, plot::IN_IMAGE_COLOR)],
        plot::HISTOGRAM_BINS,
    )
}

fn write_nan_dump(out_dir: &Path, reports: &[StepReport], err: &Error) -> Result<()> {
    #[derive(Serialize)]
    struct Dump<'a> {
        error: String,
        history: &'a [StepReport],
    }
    let path = out_dir.join(NAN_DUMP_FILE);
    let dump = Dump {
        error: err.to_string(),
        history: reports,
    };
    fs::write(&path, serde_json::to_string_pretty(&dump)?).map_err(|e| Error::io(&path, e))
}

/// Trains for `cfg.epochs` epochs, writing `metrics.jsonl`, checkpoints and
/// hardness histograms under `opts.out_dir`.
///
/// Each epoch walks a fresh permutation of domain A; domain-B batches come
/// from an independent permutation. A non-finite loss stops the run and
/// dumps every report so far to `nan_dump.json`; so does a degenerate
/// embedding or any other numerical failure.
pub fn train_loop(data: &UnpairedDataset, cfg: &TrainConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let out = &opts.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut state = match &opts.resume {
        Some(p) => load_state(p, cfg)?,
        None => TrainState::new(cfg)?,
    };
    let metrics_path = out.join(METRICS_FILE);
    let file = if opts.resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&metrics_path)
    } else {
        File::create(&metrics_path)
    }
    .map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);

    let mut reports = Vec::new();
    let mut checkpoints = Vec::new();
    let bs = cfg.batch_size;
    let steps_per_epoch = data.a.len().div_ceil(bs);
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let scale = lr_schedule(epoch, cfg)?;
        let perm_a = epoch_permutation(cfg.seed, epoch, 0, data.a.len());
        let perm_b = epoch_permutation(cfg.seed, epoch, 1, data.b.len());
        for k in 0..steps_per_epoch {
            let ia: Vec<usize> = (0..bs).map(|j| perm_a[(k * bs + j) % perm_a.len()]).collect();
            let ib: Vec<usize> = (0..bs).map(|j| perm_b[(k * bs + j) % perm_b.len()]).collect();
            let x = UnpairedDataset::batch(&data.a, &ia)?;
            let y = UnpairedDataset::batch(&data.b, &ib)?;
            let report = match train_step(&mut state, &x, &y, cfg, scale) {
                Ok(r) => r,
                Err(e @ (Error::NonFinite { .. } | Error::Degenerate(_) | Error::Numerical(_))) => {
                    metrics.flush().map_err(|io| Error::io(&metrics_path, io))?;
                    write_nan_dump(out, &reports, &e)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if report.step % cfg.log_every == 0 {
                serde_json::to_writer(&mut metrics, &report)?;
                writeln!(metrics).map_err(|e| Error::io(&metrics_path, e))?;
            }
            reports.push(report);
        }
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        state.epoch += 1;
        if state.epoch % cfg.checkpoint_every == 0 || state.epoch == cfg.epochs {
            let path = checkpoint_path(out, state.epoch);
            save_state(&path, &state, cfg)?;
            write_hardness(out, &state, data, cfg)?;
            checkpoints.push(path);
        }
    }
    Ok(RunOutcome {
        state,
        reports,
        checkpoints,
        metrics_path,
    })
}
