//! The four subcommands. Each takes a resolved [`ExperimentConfig`] and
//! writes its artifacts under the run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use image::{imageops::FilterType, GrayImage};
use negcut::data::{
    generate_synth_dataset, load_image_folder, load_mask_folder, rgb_to_tensor, UnpairedDataset,
};
use negcut::eval::{evaluate, evaluate_images, similarity_map, EvalSummary, FeatureEmbedderConfig};
use negcut::networks::checkpoint::load_checkpoint;
use negcut::networks::{embed_patches, Networks};
use negcut::plot;
use negcut::sampling::write_similarities;
use negcut::training::{compare_hardness, negative_spread, train_loop, RunOptions};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, CONFIG_SNAPSHOT};
use crate::error::{CliError, CliResult};

/// Images per domain plus source masks when available.
pub struct LoadedData {
    pub data: UnpairedDataset,
    pub masks_a: Option<Vec<GrayImage>>,
}

/// Loads `data.dataset_dir`, or regenerates the synthetic dataset.
pub fn load_data(cfg: &ExperimentConfig) -> CliResult<LoadedData> {
    match &cfg.data.dataset_dir {
        Some(dir) => {
            let size = cfg.data.image_size;
            let a = load_image_folder(&dir.join("domainA"), size)?;
            let b = load_image_folder(&dir.join("domainB"), size)?;
            let mask_dir = dir.join("masksA");
            let masks_a = if mask_dir.is_dir() {
                let masks = load_mask_folder(&mask_dir)?;
                let by_name: std::collections::HashMap<_, _> = masks.into_iter().collect();
                a.names
                    .iter()
                    .map(|n| by_name.get(n).cloned())
                    .collect::<Option<Vec<_>>>()
            } else {
                None
            };
            Ok(LoadedData {
                data: UnpairedDataset::new(a.images, b.images)?,
                masks_a,
            })
        }
        None => {
            let (a, b) = generate_synth_dataset(&cfg.data.synth)?;
            Ok(LoadedData {
                data: UnpairedDataset::from_synth(&a, &b)?,
                masks_a: Some(a.into_iter().map(|s| s.mask).collect()),
            })
        }
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Trains one run; returns its directory.
pub fn cmd_train(cfg: &ExperimentConfig, resume: Option<&Path>) -> CliResult<PathBuf> {
    let run_dir = cfg.run_dir();
    write_text(&run_dir.join(CONFIG_SNAPSHOT), &cfg.to_toml()?)?;
    let loaded = load_data(cfg)?;
    let outcome = train_loop(
        &loaded.data,
        &cfg.train,
        &RunOptions {
            out_dir: run_dir.clone(),
            resume: resume.map(Path::to_path_buf),
        },
    )?;
    log::info!(
        "trained {} steps, {} checkpoints in {}",
        outcome.reports.len(),
        outcome.checkpoints.len(),
        run_dir.display()
    );
    Ok(run_dir)
}

/// Structured result of `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub checkpoint: Option<String>,
    pub generated: Option<String>,
    pub embedder: FeatureEmbedderConfig,
    pub summary: EvalSummary,
}

pub fn load_networks(checkpoint: &Path) -> CliResult<Networks> {
    if !checkpoint.is_file() {
        return Err(CliError::Io(format!("{}: no such checkpoint", checkpoint.display())));
    }
    Ok(load_checkpoint(checkpoint)?.networks()?)
}

/// Scores a checkpoint's translations of domain A (or a folder of already
/// generated images) against domain B. The record is written to `report`,
/// defaulting to `<run dir>/eval.json`.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    generated: Option<&Path>,
    report: Option<&Path>,
) -> CliResult<EvalRecord> {
    let loaded = load_data(cfg)?;
    let summary = match (checkpoint, generated) {
        (_, Some(dir)) => {
            let images = load_image_folder(dir, cfg.data.image_size)?.images;
            let masks = loaded
                .masks_a
                .as_deref()
                .filter(|m| m.len() == images.len());
            evaluate_images(images.len(), &images, masks, &loaded.data.b, &cfg.embedder)?
        }
        (Some(ckpt), None) => {
            let nets = load_networks(ckpt)?;
            evaluate(
                &nets,
                &loaded.data.a,
                loaded.masks_a.as_deref(),
                &loaded.data.b,
                &cfg.embedder,
            )?
        }
        (None, None) => {
            return Err(CliError::Config("eval needs --checkpoint or --generated".into()));
        }
    };
    let record = EvalRecord {
        checkpoint: checkpoint.map(|p| p.display().to_string()),
        generated: generated.map(|p| p.display().to_string()),
        embedder: cfg.embedder,
        summary,
    };
    let path = report
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.run_dir().join("eval.json"));
    let text = serde_json::to_string_pretty(&record).map_err(|e| CliError::Io(e.to_string()))?;
    write_text(&path, &text)?;
    Ok(record)
}

/// Query position in image pixels, `(row, col)`.
pub fn parse_query(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s
        .split_once(',')
        .ok_or_else(|| format!("query {s:?} is not ROW,COL"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("query {s:?}: {e}"));
    Ok((parse(r)?, parse(c)?))
}

pub struct VisualizeArgs<'a> {
    pub checkpoint: &'a Path,
    pub image: &'a Path,
    pub queries: &'a [(usize, usize)],
    pub layer: usize,
    pub tau: Option<f64>,
    /// Compare the source embedding with itself instead of with the
    /// translation's.
    pub self_similarity: bool,
}

/// Similarity-map overlays (PNG + TSV) per query and the hardness
/// histogram of one layer (PNG + one TSV per negative source).
pub fn cmd_visualize(cfg: &ExperimentConfig, args: &VisualizeArgs) -> CliResult<Vec<PathBuf>> {
    let nets = load_networks(args.checkpoint)?;
    let size = cfg.data.image_size;
    let img = image::open(args.image)
        .map_err(|e| CliError::Io(format!("{}: {e}", args.image.display())))?
        .to_rgb8();
    let img = if img.dimensions() == (size, size) {
        img
    } else {
        image::imageops::resize(&img, size, size, FilterType::Triangle)
    };
    let layers = nets.num_layers();
    if args.layer >= layers {
        return Err(CliError::Config(format!(
            "layer {} out of bounds: the model has {layers} tap layers",
            args.layer
        )));
    }
    for &(r, c) in args.queries {
        if r >= size as usize || c >= size as usize {
            return Err(CliError::Config(format!(
                "query ({r}, {c}) out of bounds for a {size}x{size} image"
            )));
        }
    }
    let tau = args.tau.unwrap_or(cfg.train.tau);
    let x = nets.cast(&rgb_to_tensor(&img)?.unsqueeze(0).map_err(negcut::Error::from)?)?;
    let (y, taps_x) = nets.generator.forward(&x)?;
    let taps_y = nets.generator.encode_taps(&y)?;
    let rep = &nets.repnets[args.layer];
    let emb_x = embed_patches(&taps_x[args.layer], rep)?;
    let emb_y = if args.self_similarity {
        emb_x.clone()
    } else {
        embed_patches(&taps_y[args.layer], rep)?
    };
    let (_, _, h, w) = emb_x.dims4().map_err(negcut::Error::from)?;

    let out = cfg.run_dir().join("visualize");
    fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let mut written = Vec::new();
    for (i, &(r, c)) in args.queries.iter().enumerate() {
        let q = (r * h / size as usize, c * w / size as usize);
        let map = similarity_map(q, &emb_y, &emb_x, tau)?;
        let stem = format!("simmap_{i:02}_r{r}_c{c}");
        let mut tsv = String::new();
        for row in 0..map.height {
            let line: Vec<String> = (0..map.width).map(|col| map.at(row, col).to_string()).collect();
            writeln!(tsv, "{}", line.join("\t")).expect("string write");
        }
        let tsv_path = out.join(format!("{stem}.tsv"));
        write_text(&tsv_path, &tsv)?;
        let png_path = out.join(format!("{stem}.png"));
        let overlay = plot::heatmap_overlay(&map.values, map.height, map.width, &img, 0.6)?;
        overlay
            .save(&png_path)
            .map_err(|e| CliError::Io(format!("{}: {e}", png_path.display())))?;
        written.push(png_path);
        written.push(tsv_path);
    }

    let cmp = compare_hardness(&nets, &x, &cfg.train, cfg.train.seed)?;
    let gen = &cmp.generated[args.layer];
    let inimg = &cmp.in_image[args.layer];
    let gen_path = out.join("hardness_generated.tsv");
    let inimg_path = out.join("hardness_in_image.tsv");
    write_similarities(&gen_path, gen)?;
    write_similarities(&inimg_path, inimg)?;
    let hist_path = out.join("hardness.png");
    plot::write_histogram_png(
        &hist_path,
        &[(gen, plot::GENERATED_COLOR), (inimg, plot::IN_IMAGE_COLOR)],
        plot::HISTOGRAM_BINS,
    )?;
    written.extend([hist_path, gen_path, inimg_path]);
    Ok(written)
}

/// One cell of the ablation grid with its final metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub neg_generator: bool,
    pub diversity: bool,
    pub num_negatives: usize,
    pub frechet: f64,
    pub correspondence: Option<f64>,
    pub hardness_mean: f64,
    pub neg_pairwise_l1: f64,
}

pub const ABLATION_COLUMNS: [&str; 8] = [
    "cell",
    "neg_generator",
    "diversity",
    "num_negatives",
    "frechet",
    "correspondence",
    "hardness_mean",
    "neg_pairwise_l1",
];

impl AblationRow {
    fn fields(&self) -> [String; 8] {
        [
            self.cell.clone(),
            self.neg_generator.to_string(),
            self.diversity.to_string(),
            self.num_negatives.to_string(),
            format!("{:.6}", self.frechet),
            self.correspondence
                .map(|c| format!("{c:.6}"))
                .unwrap_or_else(|| "-".into()),
            format!("{:.6}", self.hardness_mean),
            format!("{:.6}", self.neg_pairwise_l1),
        ]
    }
}

pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut s = ABLATION_COLUMNS.join("\t") + "\n";
    for r in rows {
        s += &(r.fields().join("\t") + "\n");
    }
    s
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut s = format!("| {} |\n", ABLATION_COLUMNS.join(" | "));
    s += &format!("|{}\n", "---|".repeat(ABLATION_COLUMNS.len()));
    for r in rows {
        s += &format!("| {} |\n", r.fields().join(" | "));
    }
    s
}

/// Trains every grid cell with the shared seed and tabulates final metrics
/// in `ablation.tsv` and `ablation.md`.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> CliResult<Vec<AblationRow>> {
    let grid = &cfg.ablate;
    if grid.neg_generator.is_empty() || grid.diversity.is_empty() || grid.num_negatives.is_empty() {
        return Err(CliError::Config("ablate: every grid axis needs at least one value".into()));
    }
    let run_dir = cfg.run_dir();
    write_text(&run_dir.join(CONFIG_SNAPSHOT), &cfg.to_toml()?)?;
    let loaded = load_data(cfg)?;
    let n_probe = loaded.data.a.len().min(4);
    let probe_idx: Vec<usize> = (0..n_probe).collect();
    let probe: Tensor = UnpairedDataset::batch(&loaded.data.a, &probe_idx)?;
    let on_off = |b: bool| if b { "on" } else { "off" };

    let mut rows = Vec::new();
    for &gen in &grid.neg_generator {
        for &div in &grid.diversity {
            for &n in &grid.num_negatives {
                let cell = format!("gen-{}_div-{}_n{n}", on_off(gen), on_off(div));
                let mut train = cfg.train.clone();
                train.use_neg_generator = gen;
                train.use_diversity_loss = div;
                train.num_negatives = n;
                train.validate().map_err(|e| CliError::Config(format!("{cell}: {e}")))?;
                log::info!("ablation cell {cell}");
                let outcome = train_loop(
                    &loaded.data,
                    &train,
                    &RunOptions {
                        out_dir: run_dir.join("cells").join(&cell),
                        resume: None,
                    },
                )?;
                let nets = &outcome.state.nets;
                let summary = evaluate(
                    nets,
                    &loaded.data.a,
                    loaded.masks_a.as_deref(),
                    &loaded.data.b,
                    &cfg.embedder,
                )?;
                let hardness = compare_hardness(nets, &probe, &train, train.seed)?;
                rows.push(AblationRow {
                    cell,
                    neg_generator: gen,
                    diversity: div,
                    num_negatives: n,
                    frechet: summary.frechet,
                    correspondence: summary.correspondence,
                    hardness_mean: hardness.generated_summary().mean,
                    neg_pairwise_l1: negative_spread(nets, &probe, &train, train.seed)?,
                });
            }
        }
    }
    write_text(&run_dir.join("ablation.tsv"), &ablation_tsv(&rows))?;
    write_text(&run_dir.join("ablation.md"), &ablation_markdown(&rows))?;
    Ok(rows)
}
