//! Command implementations behind the `overcount` binary.
//!
//! Every command writes into `--out-dir`. Outputs carry `#` comment lines with
//! the effective settings and a hash of them, and never depend on thread count
//! or wall-clock time, so identical inputs give byte-identical files.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::analytics::{self, CountRecord};
use crate::detection::{
    self, BlobDetector, Detection, Detector, DetectorConfig, OracleDetector, SceneDetection, TilePixels,
};
use crate::evaluation::{self, EvalRow};
use crate::geometry::{self, AoiFeature, AoiPolygon};
use crate::ingestion::{self, AnnotationSet, Scene};
use crate::merger::{self, MergeConfig};
use crate::tiler::{self, TileGrid};

pub const THREADS_ENV: &str = "OVERCOUNT_THREADS";
pub const FULL_FRAME_AOI: &str = "full";

#[derive(Debug, Parser)]
#[command(
    name = "overcount",
    version,
    about = "Count vehicles in overhead imagery and report year-over-year change"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tile, detect, merge and count vehicles per scene and AOI.
    Count(CountArgs),
    /// Score detections against COWC-style annotations.
    Eval(EvalArgs),
    /// Year-over-year change per location from a counts CSV.
    Trend(TrendArgs),
    /// Seeded train/test split of a manifest.
    Split(SplitArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DetectorKind {
    Blob,
    Oracle,
    File,
}

impl DetectorKind {
    fn name(self) -> &'static str {
        match self {
            DetectorKind::Blob => "blob",
            DetectorKind::Oracle => "oracle",
            DetectorKind::File => "file",
        }
    }
}

/// Pipeline settings shared by the commands. Unset flags fall back to the
/// config file, then to built-in defaults.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Settings {
    #[arg(long)]
    pub tile_size: Option<usize>,
    #[arg(long)]
    pub tile_stride: Option<usize>,
    #[arg(long)]
    pub nms_iou: Option<f64>,
    #[arg(long)]
    pub match_iou: Option<f64>,
    #[arg(long)]
    pub box_size: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Drop tile detections within this many pixels of an interior tile edge; negative disables.
    #[arg(long, allow_hyphen_values = true)]
    pub seam_margin: Option<f64>,
    #[arg(long)]
    pub blob_threshold: Option<f64>,
    #[arg(long)]
    pub blob_min_area: Option<usize>,
    #[arg(long)]
    pub blob_max_area: Option<usize>,
    #[arg(long)]
    pub blob_min_fill: Option<f64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, env = THREADS_ENV)]
    #[serde(skip)]
    pub threads: Option<usize>,
}

impl Settings {
    fn or(self, fallback: Settings) -> Settings {
        Settings {
            tile_size: self.tile_size.or(fallback.tile_size),
            tile_stride: self.tile_stride.or(fallback.tile_stride),
            nms_iou: self.nms_iou.or(fallback.nms_iou),
            match_iou: self.match_iou.or(fallback.match_iou),
            box_size: self.box_size.or(fallback.box_size),
            seed: self.seed.or(fallback.seed),
            seam_margin: self.seam_margin.or(fallback.seam_margin),
            blob_threshold: self.blob_threshold.or(fallback.blob_threshold),
            blob_min_area: self.blob_min_area.or(fallback.blob_min_area),
            blob_max_area: self.blob_max_area.or(fallback.blob_max_area),
            blob_min_fill: self.blob_min_fill.or(fallback.blob_min_fill),
            threads: self.threads.or(fallback.threads),
        }
    }

    /// Apply the config file (if any) under these flags and resolve defaults.
    pub fn resolve(self, config_file: Option<&Path>) -> Result<RunConfig> {
        let from_file = match config_file {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<Settings>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Settings::default(),
        };
        let s = self.or(from_file);
        let grid = TileGrid::new(
            s.tile_size.unwrap_or(tiler::DEFAULT_TILE_SIZE),
            s.tile_stride.unwrap_or(tiler::DEFAULT_TILE_STRIDE),
        )?;
        let nms_iou = s.nms_iou.unwrap_or(merger::DEFAULT_NMS_IOU);
        let match_iou = s.match_iou.unwrap_or(evaluation::DEFAULT_MATCH_IOU);
        for (name, v) in [("nms-iou", nms_iou), ("match-iou", match_iou)] {
            if !(v > 0.0 && v <= 1.0) {
                bail!("{name} must lie in (0, 1], got {v}");
            }
        }
        let defaults = DetectorConfig::default();
        let blob = DetectorConfig {
            threshold: s.blob_threshold.unwrap_or(defaults.threshold),
            min_area_px: s.blob_min_area.unwrap_or(defaults.min_area_px),
            max_area_px: s.blob_max_area.unwrap_or(defaults.max_area_px),
            min_fill: s.blob_min_fill.unwrap_or(defaults.min_fill),
        };
        blob.validate()?;
        let margin = s.seam_margin.unwrap_or(merger::DEFAULT_SEAM_MARGIN_PX);
        if s.threads == Some(0) {
            bail!("thread count must be at least 1");
        }
        Ok(RunConfig {
            grid,
            merge: MergeConfig {
                nms_iou,
                seam_margin_px: (margin >= 0.0).then_some(margin),
            },
            match_iou,
            box_size: s.box_size.unwrap_or(ingestion::DEFAULT_BOX_SIZE_PX),
            seed: s.seed.unwrap_or(0),
            blob,
            threads: s.threads,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub grid: TileGrid,
    pub merge: MergeConfig,
    pub match_iou: f64,
    pub box_size: f64,
    pub seed: u64,
    pub blob: DetectorConfig,
    /// Not part of the metadata: results must not depend on it.
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Settings::default().resolve(None).expect("defaults are valid")
    }
}

impl RunConfig {
    fn metadata(&self) -> Vec<(&'static str, String)> {
        vec![
            ("tile_size", self.grid.tile_size().to_string()),
            ("tile_stride", self.grid.stride().to_string()),
            ("nms_iou", self.merge.nms_iou.to_string()),
            (
                "seam_margin",
                self.merge.seam_margin_px.map_or("off".to_owned(), |m| m.to_string()),
            ),
            ("match_iou", self.match_iou.to_string()),
            ("box_size", self.box_size.to_string()),
            ("seed", self.seed.to_string()),
            ("blob_threshold", self.blob.threshold.to_string()),
            ("blob_min_area", self.blob.min_area_px.to_string()),
            ("blob_max_area", self.blob.max_area_px.to_string()),
            ("blob_min_fill", self.blob.min_fill.to_string()),
        ]
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = self.threads {
            b = b.num_threads(n);
        }
        Ok(b.build()?)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// `# key=value` header lines ending in a hash over everything above it.
fn metadata_block(command: &str, mut entries: Vec<(&'static str, String)>) -> String {
    entries.insert(0, ("command", command.to_owned()));
    let mut body = String::new();
    for (k, v) in &entries {
        let _ = writeln!(body, "# {k}={v}");
    }
    let hash = sha256_hex(body.as_bytes());
    let _ = writeln!(body, "# config_hash={}", &hash[..16]);
    body
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes)[..16].to_owned())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_scenes(manifest: &Path, locations: Option<&Path>) -> Result<Vec<Scene>> {
    let registry = locations.map(ingestion::read_locations).transpose()?;
    Ok(ingestion::read_manifest(manifest, registry.as_ref())?)
}

fn annotation_path(dir: &Path, scene_id: &str) -> PathBuf {
    dir.join(format!("{scene_id}.txt"))
}

#[derive(Debug, Clone, Args)]
pub struct CountArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Location registry CSV; when given, unknown location ids are rejected.
    #[arg(long)]
    pub locations: Option<PathBuf>,
    /// GeoJSON AOI polygons; scenes without a matching AOI are counted over the whole frame.
    #[arg(long)]
    pub aoi: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub detector: DetectorKind,
    /// Interchange file with scene-global detections (detector=file).
    #[arg(long)]
    pub detections_in: Option<PathBuf>,
    /// Directory of `<scene_id>.txt` COWC point files (detector=oracle).
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Flat TOML config; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: Settings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFailure {
    pub scene_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountOutcome {
    pub records: Vec<CountRecord>,
    pub failures: Vec<SceneFailure>,
    pub skipped: Vec<SceneFailure>,
    pub scenes_attempted: usize,
    pub counts_path: PathBuf,
    pub detections_path: PathBuf,
}

impl CountOutcome {
    /// Every attempted scene failed.
    pub fn total_failure(&self) -> bool {
        self.scenes_attempted > 0 && self.failures.len() == self.scenes_attempted
    }
}

enum DetectorSource {
    Blob(BlobDetector),
    Oracle(PathBuf),
    File(HashMap<String, Vec<Detection<f64>>>),
}

struct SceneResult {
    detections: Vec<Detection<f64>>,
    records: Vec<CountRecord>,
}

fn aois_for(scene: &Scene, features: &[AoiFeature]) -> Result<Vec<AoiPolygon<f64>>> {
    let matching: Vec<&AoiFeature> = features
        .iter()
        .filter(|f| f.location_id.as_deref().is_none_or(|l| l == scene.location_id))
        .collect();
    if matching.is_empty() {
        return Ok(vec![AoiPolygon::full_frame(FULL_FRAME_AOI, scene.width, scene.height)]);
    }
    matching
        .into_iter()
        .map(|f| Ok(f.to_pixel_polygon(scene.geo.as_ref())?))
        .collect()
}

fn detect_tiles(
    detector: &dyn Detector,
    scene: &Scene,
    image: Option<&image::RgbImage>,
    cfg: &RunConfig,
) -> Result<Vec<Detection<f64>>> {
    let tiles = tiler::plan_tiles(scene.width, scene.height, &cfg.grid);
    let per_tile: Vec<Vec<Detection<f64>>> = tiles
        .par_iter()
        .map(|t| {
            let view = image.map(|img| {
                image::imageops::crop_imm(
                    img,
                    t.origin.0 as u32,
                    t.origin.1 as u32,
                    t.width as u32,
                    t.height as u32,
                )
            });
            detector
                .detect(t, view.as_ref().map(|v| &**v as &dyn TilePixels))
                .with_context(|| format!("tile {:?}", t.index))
        })
        .collect::<Result<_>>()?;
    Ok(merger::merge_scene(
        per_tile.into_iter().flatten().collect(),
        &tiles,
        &cfg.merge,
    )?)
}

fn process_scene(
    scene: &Scene,
    source: &DetectorSource,
    features: &[AoiFeature],
    base_dir: &Path,
    cfg: &RunConfig,
) -> Result<SceneResult> {
    let aois = aois_for(scene, features)?;
    let detections = match source {
        DetectorSource::Blob(det) => {
            let path = base_dir.join(&scene.image_path);
            let img = image::open(&path)
                .with_context(|| format!("reading image {}", path.display()))?
                .to_rgb8();
            if (img.width() as usize, img.height() as usize) != (scene.width, scene.height) {
                bail!(
                    "image is {}x{} but the manifest says {}x{}",
                    img.width(),
                    img.height(),
                    scene.width,
                    scene.height
                );
            }
            detect_tiles(det, scene, Some(&img), cfg)?
        }
        DetectorSource::Oracle(dir) => {
            let truth = ingestion::read_cowc_annotations(&annotation_path(dir, &scene.scene_id), scene, cfg.box_size)?;
            detect_tiles(&OracleDetector { truth }, scene, None, cfg)?
        }
        DetectorSource::File(by_scene) => {
            let dets = by_scene.get(&scene.scene_id).map(Vec::as_slice).unwrap_or(&[]);
            merger::dedupe(dets, cfg.merge.nms_iou)?
        }
    };
    let records = aois
        .iter()
        .map(|aoi| CountRecord {
            scene_id: scene.scene_id.clone(),
            location_id: scene.location_id.clone(),
            capture_date: scene.capture_date,
            aoi_name: aoi.name().to_owned(),
            count: analytics::count_in_aoi(&detections, aoi),
        })
        .collect();
    Ok(SceneResult { detections, records })
}

fn group_by_scene(records: Vec<SceneDetection>) -> HashMap<String, Vec<Detection<f64>>> {
    let mut map: HashMap<String, Vec<Detection<f64>>> = HashMap::new();
    for r in records {
        map.entry(r.scene_id).or_default().push(r.detection);
    }
    map
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn cmd_count(args: &CountArgs, cfg: &RunConfig) -> Result<CountOutcome> {
    let scenes = load_scenes(&args.manifest, args.locations.as_deref())?;
    let features = match &args.aoi {
        Some(p) => geometry::read_aoi_file(p)?,
        None => Vec::new(),
    };
    let source = match args.detector {
        DetectorKind::Blob => DetectorSource::Blob(BlobDetector {
            config: cfg.blob.clone(),
        }),
        DetectorKind::Oracle => DetectorSource::Oracle(
            args.annotations
                .clone()
                .context("--detector oracle requires --annotations")?,
        ),
        DetectorKind::File => {
            let path = args
                .detections_in
                .as_deref()
                .context("--detector file requires --detections-in")?;
            DetectorSource::File(group_by_scene(detection::read_detections(path)?))
        }
    };
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;

    let (scenes, grayscale) = ingestion::exclude_grayscale(scenes);
    let skipped: Vec<SceneFailure> = grayscale
        .into_iter()
        .map(|s| SceneFailure {
            scene_id: s.scene_id,
            message: "grayscale scene excluded".into(),
        })
        .collect();
    let base_dir = manifest_dir(&args.manifest);
    let results: Vec<Result<SceneResult>> = cfg.pool()?.install(|| {
        scenes
            .par_iter()
            .map(|s| process_scene(s, &source, &features, &base_dir, cfg))
            .collect()
    });

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut jsonl = String::new();
    for (scene, result) in scenes.iter().zip(results) {
        match result {
            Ok(r) => {
                jsonl.push_str(&detection::write_detections(
                    r.detections.iter().map(|d| (scene.scene_id.as_str(), d)),
                ));
                records.extend(r.records);
            }
            Err(e) => failures.push(SceneFailure {
                scene_id: scene.scene_id.clone(),
                message: format!("{e:#}"),
            }),
        }
    }

    let mut meta = vec![("detector", args.detector.name().to_owned())];
    meta.push(("manifest_sha", file_hash(&args.manifest)?));
    if let Some(p) = &args.aoi {
        meta.push(("aoi_sha", file_hash(p)?));
    }
    if let Some(p) = &args.detections_in {
        meta.push(("detections_sha", file_hash(p)?));
    }
    meta.extend(cfg.metadata());
    let mut out = metadata_block("count", meta);
    out.push_str(&analytics::write_counts(&records));
    for s in &skipped {
        let _ = writeln!(out, "# skipped {}: {}", s.scene_id, s.message);
    }
    if !failures.is_empty() {
        out.push_str("# errors\n");
        for f in &failures {
            let _ = writeln!(out, "# error {}: {}", f.scene_id, f.message.replace('\n', " "));
        }
    }
    let counts_path = args.out_dir.join("counts.csv");
    let detections_path = args.out_dir.join("detections.jsonl");
    write_file(&counts_path, &out)?;
    write_file(&detections_path, &jsonl)?;
    Ok(CountOutcome {
        records,
        failures,
        skipped,
        scenes_attempted: scenes.len(),
        counts_path,
        detections_path,
    })
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub locations: Option<PathBuf>,
    /// Directory of `<scene_id>.txt` COWC point files.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub detections_in: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: Settings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub rows: Vec<EvalRow>,
    pub aggregate: EvalRow,
    pub skipped: Vec<SceneFailure>,
    pub report_path: PathBuf,
}

pub const AGGREGATE_ROW_ID: &str = "ALL";

pub fn cmd_eval(args: &EvalArgs, cfg: &RunConfig) -> Result<EvalOutcome> {
    let scenes = load_scenes(&args.manifest, args.locations.as_deref())?;
    let by_scene = group_by_scene(detection::read_detections(&args.detections_in)?);
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for scene in scenes.iter().filter(|s| !s.grayscale) {
        let path = annotation_path(&args.annotations, &scene.scene_id);
        if !path.exists() {
            skipped.push(SceneFailure {
                scene_id: scene.scene_id.clone(),
                message: format!("no annotations at {}", path.display()),
            });
            continue;
        }
        let truth: AnnotationSet = match ingestion::read_cowc_annotations(&path, scene, cfg.box_size) {
            Ok(t) => t,
            Err(e) => {
                skipped.push(SceneFailure {
                    scene_id: scene.scene_id.clone(),
                    message: e.to_string(),
                });
                continue;
            }
        };
        let preds = by_scene.get(&scene.scene_id).map(Vec::as_slice).unwrap_or(&[]);
        let m = evaluation::match_detections(preds, &truth.boxes, cfg.match_iou);
        rows.push(EvalRow::from_match(&scene.scene_id, &m));
    }
    let aggregate = EvalRow::aggregate(AGGREGATE_ROW_ID, &rows);

    let mut meta = vec![
        ("manifest_sha", file_hash(&args.manifest)?),
        ("detections_sha", file_hash(&args.detections_in)?),
    ];
    meta.extend(cfg.metadata());
    let mut out = metadata_block("eval", meta);
    out.push_str(evaluation::REPORT_HEADER);
    out.push('\n');
    for r in rows.iter().chain(std::iter::once(&aggregate)) {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    if let Some(mean) = evaluation::mean_count_accuracy(&rows) {
        let _ = writeln!(out, "# mean_scene_count_accuracy={mean:.6}");
    }
    for s in &skipped {
        let _ = writeln!(out, "# skipped {}: {}", s.scene_id, s.message);
    }
    let report_path = args.out_dir.join("evaluation.csv");
    write_file(&report_path, &out)?;
    Ok(EvalOutcome {
        rows,
        aggregate,
        skipped,
        report_path,
    })
}

#[derive(Debug, Clone, Args)]
pub struct TrendArgs {
    /// Counts CSV written by `count`.
    #[arg(long)]
    pub counts: PathBuf,
    #[arg(long, default_value_t = 2019)]
    pub year_a: i32,
    #[arg(long, default_value_t = 2020)]
    pub year_b: i32,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn cmd_trend(args: &TrendArgs) -> Result<analytics::TrendReport> {
    let file = fs::File::open(&args.counts).with_context(|| format!("reading {}", args.counts.display()))?;
    let records = analytics::parse_counts(file)?;
    let report = analytics::change_report(&records, args.year_a, args.year_b)?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    write_file(&args.out_dir.join("trend.csv"), &analytics::write_trend_csv(&report))?;
    write_file(&args.out_dir.join("trend.json"), &analytics::write_trend_json(&report))?;
    Ok(report)
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn cmd_split(args: &SplitArgs) -> Result<(usize, usize)> {
    let scenes = ingestion::read_manifest(&args.manifest, None)?;
    let (train, test) = ingestion::split_scenes(&scenes, args.train_fraction, args.seed)?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    write_file(&args.out_dir.join("train.csv"), &ingestion::write_manifest(&train)?)?;
    write_file(&args.out_dir.join("test.csv"), &ingestion::write_manifest(&test)?)?;
    Ok((train.len(), test.len()))
}
