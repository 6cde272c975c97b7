use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::Args;
use rayon::prelude::*;

use r2d2::datagen::{load_image, save_pgm};
use r2d2::eval::{load_homography, parse_pair_list, EvalReport, PairEntry, PairReport};
use r2d2::extractor::extract_keypoints_with_maps;
use r2d2::io::write_atomic;
use r2d2::selfcheck::{run_selfcheck, GradCheckConfig};
use r2d2::trainer::{curve_csv, query_log_csv, run_toy_ablation, Checkpoint, ToyAblationConfig};
use r2d2::{
    evaluate_pair, extract_keypoints, mutual_nn_match, AblationMode, EvalConfig, ExtractConfig, KeypointSet, Network,
    PairGeometry, TrainConfig, Trainer,
};

use crate::config::{self, log_resolved};
use crate::{CliResult, Failure};

/// `model.r2d2` → `model.r2d2.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name: OsString = path.as_os_str().to_owned();
    name.push(".");
    name.push(suffix);
    PathBuf::from(name)
}

fn load_network(path: &Path) -> CliResult<Network<f32>> {
    Network::load(path).map_err(|e| Failure::Runtime(format!("cannot load model {}: {e}", path.display())))
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config (JSON); defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained model file.
    #[arg(long)]
    out: PathBuf,
    /// Loss curve CSV [default: <out>.loss.csv].
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Checkpoint file, rewritten at the configured cadence [default: <out>.ckpt].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue from a checkpoint written with the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Start from the reduced toy preset instead of the full defaults.
    #[arg(long)]
    toy: bool,
}

pub fn train(a: TrainArgs) -> CliResult {
    let cfg: TrainConfig = match (&a.config, a.toy) {
        (Some(_), true) => return Err(Failure::Usage("--toy and --config are exclusive".into())),
        (None, true) => TrainConfig::toy(),
        (path, false) => config::load(path.as_deref())?,
    };
    config::check(cfg.validate())?;
    log_resolved("training config", &cfg);
    let checkpoint_path = a.checkpoint.unwrap_or_else(|| sibling(&a.out, "ckpt"));
    let curve_path = a.curve.unwrap_or_else(|| sibling(&a.out, "loss.csv"));
    let queries_path = sibling(&a.out, "queries.csv");

    let mut trainer = match &a.resume {
        Some(path) => {
            let checkpoint = Checkpoint::load(path)?;
            log::info!("resuming from {} at iteration {}", path.display(), checkpoint.iteration);
            Trainer::resume(cfg, checkpoint).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?
        }
        None => Trainer::new(cfg)?,
    };
    trainer.run(|t| {
        t.checkpoint().save(&checkpoint_path)?;
        write_atomic(&curve_path, curve_csv(t.curve()).as_bytes())?;
        if t.config().log_queries {
            write_atomic(&queries_path, query_log_csv(t.query_log()).as_bytes())?;
        }
        log::info!("checkpoint at iteration {} written to {}", t.iteration(), checkpoint_path.display());
        Ok(())
    })?;
    trainer.network().save(&a.out)?;
    let mean = trainer.stats().mean();
    log::info!(
        "wrote {} after {} iterations (mean total loss {:.4}, {} pairs skipped)",
        a.out.display(),
        trainer.iteration(),
        mean.total,
        trainer.stats().skipped_pairs
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    model: PathBuf,
    /// PPM or PGM image.
    #[arg(long)]
    image: PathBuf,
    /// Keypoints kept over all scales [default: 5000].
    #[arg(long)]
    top_k: Option<usize>,
    /// Patch size the model was trained with; recorded in the log only.
    #[arg(long, default_value_t = 16)]
    n_patch: usize,
    /// Keypoint file (R2KP).
    #[arg(long)]
    out: PathBuf,
    /// Write S and R of every pyramid level as 8-bit PGM into this directory.
    #[arg(long)]
    dump_heatmaps: Option<PathBuf>,
    /// Extraction config (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Detection map of an ablated model: full, reliability_only, repeatability_only.
    #[arg(long)]
    mode: Option<AblationMode>,
    #[arg(long)]
    repeatability_threshold: Option<f64>,
    #[arg(long)]
    reliability_threshold: Option<f64>,
}

impl ExtractArgs {
    fn resolve(&self) -> CliResult<ExtractConfig> {
        let mut cfg: ExtractConfig = config::load(self.config.as_deref())?;
        if let Some(k) = self.top_k {
            cfg.top_k = k;
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(t) = self.repeatability_threshold {
            cfg.repeatability_threshold = t;
        }
        if let Some(t) = self.reliability_threshold {
            cfg.reliability_threshold = t;
        }
        config::check(cfg.validate())?;
        Ok(cfg)
    }
}

pub fn extract(a: ExtractArgs) -> CliResult {
    let cfg = a.resolve()?;
    log_resolved("extraction config", &cfg);
    log::info!("model trained with patch size {}", a.n_patch);
    let network = load_network(&a.model)?;
    let image = load_image(&a.image)?;
    let (keypoints, maps) = extract_keypoints_with_maps(&image, &network, &cfg)?;
    if let Some(dir) = &a.dump_heatmaps {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
        let stem = a.image.file_stem().map_or("image".into(), |s| s.to_string_lossy());
        for (k, level) in maps.iter().enumerate() {
            save_pgm(&dir.join(format!("{stem}.level{k}.S.pgm")), &level.repeatability)?;
            save_pgm(&dir.join(format!("{stem}.level{k}.R.pgm")), &level.reliability)?;
        }
        log::info!("heatmaps of {} levels written to {}", maps.len(), dir.display());
    }
    keypoints.save(&a.out)?;
    log::info!("{} keypoints written to {}", keypoints.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Keypoints of the first image.
    a: PathBuf,
    /// Keypoints of the second image.
    b: PathBuf,
    /// One "idxA idxB distance" line per mutual match.
    #[arg(long)]
    out: PathBuf,
}

pub fn matches(a: MatchArgs) -> CliResult {
    let ka = KeypointSet::load(&a.a)?;
    let kb = KeypointSet::load(&a.b)?;
    let m = mutual_nn_match(&ka, &kb)?;
    write_atomic(&a.out, m.to_text().as_bytes())?;
    log::info!("{} mutual matches between {} and {} keypoints", m.len(), ka.len(), kb.len());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Lines of "imageA imageB homography"; entries are images (with
    /// --model) or R2KP keypoint files. Relative paths start at the list.
    #[arg(long)]
    pairs: PathBuf,
    /// MMA thresholds in pixels [default: 1,2,...,10].
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    #[arg(long)]
    repeatability_tolerance: Option<f64>,
    #[arg(long)]
    matching_tolerance: Option<f64>,
    /// Network used to extract keypoints from image entries.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Extraction config (JSON) for image entries.
    #[arg(long)]
    extract_config: Option<PathBuf>,
    /// Keypoints per image for image entries [default: 5000].
    #[arg(long)]
    top_k: Option<usize>,
    /// Image size "WxH" of keypoint-file entries; otherwise read from an
    /// image next to each file with the same stem.
    #[arg(long, value_parser = parse_size)]
    image_size: Option<(usize, usize)>,
    /// JSON report.
    #[arg(long)]
    out: PathBuf,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got '{s}'"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("'{v}': {e}"));
    Ok((parse(w)?, parse(h)?))
}

fn is_keypoint_file(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("r2kp"))
}

/// Size of the image a keypoint file was extracted from.
fn keypoint_image_size(path: &Path, given: Option<(usize, usize)>) -> CliResult<(usize, usize)> {
    if let Some(size) = given {
        return Ok(size);
    }
    for ext in ["ppm", "pgm", "pnm"] {
        let candidate = path.with_extension(ext);
        if candidate.is_file() {
            let image = load_image(&candidate)?;
            return Ok((image.shape()[1], image.shape()[0]));
        }
    }
    Err(Failure::Runtime(format!(
        "{}: image size unknown; pass --image-size or place the source image next to it",
        path.display()
    )))
}

struct Source<'a> {
    network: Option<&'a Network<f32>>,
    extract: &'a ExtractConfig,
    image_size: Option<(usize, usize)>,
}

impl Source<'_> {
    fn keypoints(&self, path: &Path) -> CliResult<KeypointSet> {
        if is_keypoint_file(path) {
            let mut set = KeypointSet::load(path)?;
            (set.width, set.height) = keypoint_image_size(path, self.image_size)?;
            return Ok(set);
        }
        let network = self
            .network
            .ok_or_else(|| Failure::Usage(format!("{}: image entries need --model", path.display())))?;
        Ok(extract_keypoints(&load_image(path)?, network, self.extract)?)
    }

    fn evaluate(&self, entry: &PairEntry, cfg: &EvalConfig) -> CliResult<PairReport> {
        let a = self.keypoints(&entry.image_a)?;
        let b = self.keypoints(&entry.image_b)?;
        let homography = load_homography(&entry.homography)?;
        let geometry = PairGeometry::new(homography, (a.width, a.height), (b.width, b.height));
        let result = evaluate_pair(&a, &b, &geometry, cfg)
            .map_err(|e| Failure::Runtime(format!("{} / {}: {e}", entry.image_a.display(), entry.image_b.display())))?;
        Ok(PairReport {
            image_a: entry.image_a.display().to_string(),
            image_b: entry.image_b.display().to_string(),
            homography: entry.homography.display().to_string(),
            result,
        })
    }
}

pub fn eval(a: EvalArgs) -> CliResult {
    let mut cfg = EvalConfig::default();
    if let Some(t) = &a.thresholds {
        cfg.thresholds = t.clone();
    }
    if let Some(t) = a.repeatability_tolerance {
        cfg.repeatability_tolerance = t;
    }
    if let Some(t) = a.matching_tolerance {
        cfg.matching_tolerance = t;
    }
    config::check(cfg.validate())?;
    let mut extract: ExtractConfig = config::load(a.extract_config.as_deref())?;
    if let Some(k) = a.top_k {
        extract.top_k = k;
    }
    config::check(extract.validate())?;
    log_resolved("evaluation config", &cfg);
    if a.model.is_some() {
        log_resolved("extraction config", &extract);
    }

    let text = std::fs::read_to_string(&a.pairs)
        .map_err(|e| Failure::Runtime(format!("cannot read pair list {}: {e}", a.pairs.display())))?;
    let base = a.pairs.parent().unwrap_or(Path::new("."));
    let entries = parse_pair_list(&text, base).map_err(|e| Failure::Runtime(format!("{}: {e}", a.pairs.display())))?;
    let network = a.model.as_deref().map(load_network).transpose()?;
    let source = Source {
        network: network.as_ref(),
        extract: &extract,
        image_size: a.image_size,
    };
    let pairs = entries
        .par_iter()
        .map(|entry| source.evaluate(entry, &cfg))
        .collect::<CliResult<Vec<_>>>()?;
    let report = EvalReport::new(cfg, pairs);
    report.save(&a.out)?;
    let m = &report.mean;
    log::info!(
        "{} pairs: repeatability {:.3}, matching score {:.3}, MMA {}",
        m.pairs,
        m.repeatability,
        m.matching_score,
        m.mma.iter().map(|(t, v)| format!("@{t}:{v:.3}")).collect::<Vec<_>>().join(" ")
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    /// Accepted random instances per gradient check.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON report of every check.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn selfcheck(a: SelfcheckArgs) -> CliResult {
    let mut cfg = GradCheckConfig::default();
    if let Some(t) = a.trials {
        cfg.trials = t;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if cfg.trials == 0 {
        return Err(Failure::Usage("--trials must be >= 1".into()));
    }
    log_resolved("self-check config", &cfg);
    let report = run_selfcheck(&cfg);
    if let Some(out) = &a.out {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
        write_atomic(out, json.as_bytes())?;
    }
    let failed: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
    println!(
        "{} of {} checks passed in {:.1}s",
        report.checks.len() - failed.len(),
        report.checks.len(),
        report.seconds
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Selfcheck(format!("failed checks: {}", failed.join(", "))))
    }
}

#[derive(Debug, Args)]
pub struct ToyAblationArgs {
    /// Ablation config (JSON); defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON report.
    #[arg(long)]
    out: PathBuf,
    /// Also write each trained variant and its loss curve here.
    #[arg(long)]
    models_dir: Option<PathBuf>,
}

pub fn toy_ablation(a: ToyAblationArgs) -> CliResult {
    let cfg: ToyAblationConfig = config::load(a.config.as_deref())?;
    config::check(cfg.validate())?;
    log_resolved("toy ablation config", &cfg);
    let outcome = run_toy_ablation(&cfg)?;
    if let Some(dir) = &a.models_dir {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
        for (mode, run) in &outcome.runs {
            run.network().save(&dir.join(format!("{mode}.r2d2")))?;
            run.save_curve(&dir.join(format!("{mode}.loss.csv")))?;
        }
    }
    outcome.report.save(&a.out)?;
    print!("{}", outcome.report.to_table());
    Ok(())
}
