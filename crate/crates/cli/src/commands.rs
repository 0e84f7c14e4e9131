use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use advdet_core::attack::{
    prepare_views, run_attack_with, single_image_attack, AttackConfig, RunDirectory, SingleImageRegion,
};
use advdet_core::data::{generate_synthetic, training_samples, RegisteredDataset, Split, SyntheticSceneSpec, TrainingSetSpec};
use advdet_core::defenses::DefenseSpec;
use advdet_core::detector::{
    default_classes, detect, load_checkpoint, save_checkpoint, train_toy_detector, Architecture,
    Detector, DetectorConfig, DetectorModel, TrainOptions,
};
use advdet_core::evaluation::{
    draw_boxes, evaluate, fit_success_factors, render_report, transfer_evaluate, DetectionRateReport,
    EvaluationSpec, FactorRecord, FrameEvaluation, LogisticOptions, CLEAN_ATTACK_ID,
};
use advdet_core::geometry::Rect;
use advdet_core::image::{Image, Mask};
use advdet_core::registration::{Frame, TextureMap, ViewMap};

use crate::config;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAINING_REPORT_FILE: &str = "training.json";
pub const RECORDS_FILE: &str = "records.json";
pub const SINGLE_IMAGE_FILE: &str = "single_image.json";
pub const SINGLE_IMAGE_DIR: &str = "frames";
pub const ANNOTATED_DIR: &str = "annotated";
pub const COEFFICIENTS_FILE: &str = "coefficients.json";
pub const RANKING_FILE: &str = "ranking.csv";

fn require_path(path: &Path, what: &str) -> Result<()> {
    ensure!(!path.as_os_str().is_empty(), "configuration is missing `{what}`");
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<RegisteredDataset> {
    require_path(path, "dataset")?;
    RegisteredDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_detector(path: &Path) -> Result<DetectorModel> {
    require_path(path, "detector")?;
    let path = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    load_checkpoint(&path).with_context(|| format!("loading detector {}", path.display()))
}

/// The dataset's root texture with its pixels replaced by the PNG at `path`
/// (a run directory resolves to its final texture).
fn load_texture(dataset: &RegisteredDataset, path: &Path) -> Result<TextureMap> {
    let path = if path.is_dir() {
        path.join(advdet_core::attack::FINAL_TEXTURE_FILE)
    } else {
        path.to_path_buf()
    };
    let mut texture = dataset.texture.texture_map()?;
    let pixels = Image::load(&path).with_context(|| format!("loading texture {}", path.display()))?;
    ensure!(
        pixels.same_shape(&texture.pixels),
        "texture {} is {:?}, dataset pattern is {:?}",
        path.display(),
        pixels.shape(),
        texture.pixels.shape()
    );
    texture.pixels = pixels;
    Ok(texture)
}

fn frames_of(dataset: &RegisteredDataset, splits: &[Split]) -> (Vec<Frame>, Vec<ViewMap>) {
    let mut frames = Vec::new();
    let mut views = Vec::new();
    for &s in splits {
        let (f, v) = dataset.split(s);
        frames.extend(f);
        views.extend(v);
    }
    (frames, views)
}

fn write_report(dir: &Path, report: &DetectionRateReport) -> Result<()> {
    write_json(&dir.join(RECORDS_FILE), report)?;
    let rendered = render_report(report, dir)?;
    println!("{}", std::fs::read_to_string(&rendered.grid)?);
    Ok(())
}

// ---------------------------------------------------------------- generate

pub fn generate_data(spec: SyntheticSceneSpec, out: &Path) -> Result<()> {
    config::snapshot(out, &spec)?;
    let generated = generate_synthetic(&spec, Some(out))?;
    let frames: usize = generated.frames.iter().map(Vec::len).sum();
    println!("wrote {} sequences, {frames} frames to {}", generated.manifests.len(), out.display());
    Ok(())
}

// ------------------------------------------------------------------- train

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureKind {
    #[default]
    Grid,
    TwoStage,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub architecture: ArchitectureKind,
    /// Dataset whose test split is used to report the clean detection rate.
    pub dataset: Option<PathBuf>,
    pub options: TrainOptions,
    pub training: TrainingSetSpec,
}

pub fn train_detector(cfg: TrainConfig, out: &Path) -> Result<()> {
    config::snapshot(out, &cfg)?;
    let samples = training_samples(&cfg.training)?;
    let arch = match cfg.architecture {
        ArchitectureKind::Grid => Architecture::grid(),
        ArchitectureKind::TwoStage => Architecture::two_stage(),
    };
    let mut options = cfg.options.clone();
    // The default identifier names the default architecture.
    if cfg.architecture == ArchitectureKind::TwoStage && options.id == TrainOptions::default().id {
        options.id = "two_stage".into();
    }
    let (model, report) = train_toy_detector(&samples, arch, default_classes(), &options)?;
    save_checkpoint(&model, out.join(CHECKPOINT_FILE))?;
    write_json(&out.join(TRAINING_REPORT_FILE), &report)?;
    println!(
        "{}: {} parameters, training detection rate {:.3}",
        model.id(),
        report.parameter_count,
        report.train_detection_rate
    );
    if let Some(path) = &cfg.dataset {
        let dataset = load_dataset(path)?;
        let (frames, _) = dataset.split(Split::Test);
        let detected = frames
            .iter()
            .map(|f| detect(&model, &f.image, &cfg.options.config).map(|d| !d.is_empty()))
            .collect::<advdet_core::Result<Vec<_>>>()?;
        let hits = detected.iter().filter(|d| **d).count();
        println!("clean test detection {hits}/{}", frames.len());
    }
    Ok(())
}

// ------------------------------------------------------------------ attack

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    #[default]
    CrossView,
    SingleImage,
}

/// Axis-aligned region in root texture coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionRect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl RegionRect {
    fn mask(&self, texture: &TextureMap) -> Mask {
        Mask::from_fn(texture.width(), texture.height(), |x, y| {
            let (x, y) = (x as f64, y as f64);
            x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max && texture.mask.get(x as usize, y as usize)
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SingleImageConfig {
    pub split: Split,
    pub frames: usize,
    pub region: SingleImageRegion,
}

impl Default for SingleImageConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            frames: 10,
            region: SingleImageRegion::WholeImage,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackRunConfig {
    pub dataset: PathBuf,
    pub detector: PathBuf,
    pub mode: AttackMode,
    /// Texture checkpoint interval in steps; 0 disables checkpoints.
    pub checkpoint_every: usize,
    /// Restricts the perturbation to a rectangle of the root texture.
    pub region: Option<RegionRect>,
    pub single_image: SingleImageConfig,
    pub attack: AttackConfig,
}

impl Default for AttackRunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            detector: PathBuf::new(),
            mode: AttackMode::CrossView,
            checkpoint_every: 50,
            region: None,
            single_image: SingleImageConfig::default(),
            attack: AttackConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleImageEntry {
    pub sequence_id: String,
    pub index: usize,
    pub image: String,
    pub success: bool,
    pub linf: f64,
    pub iterations: usize,
}

pub fn attack(cfg: AttackRunConfig, out: &Path) -> Result<()> {
    let dataset = load_dataset(&cfg.dataset)?;
    let model = load_detector(&cfg.detector)?;
    match cfg.mode {
        AttackMode::CrossView => cross_view_attack(&cfg, &dataset, &model, out),
        AttackMode::SingleImage => single_image_run(&cfg, &dataset, &model, out),
    }
}

fn cross_view_attack(cfg: &AttackRunConfig, dataset: &RegisteredDataset, model: &DetectorModel, out: &Path) -> Result<()> {
    let texture = dataset.texture.texture_map()?;
    let mut attack_cfg = cfg.attack.clone();
    if let Some(r) = &cfg.region {
        let mask = r.mask(&texture);
        ensure!(!mask.is_empty(), "attack region covers no texel of the pattern");
        attack_cfg.region_mask = Some(mask);
    }
    let (train_frames, train_views) = dataset.split(Split::Train);
    let (val_frames, val_views) = dataset.split(Split::Val);
    ensure!(!train_frames.is_empty(), "dataset has no training frames");
    let train = prepare_views(&train_frames, &train_views, &texture)?;
    let val = prepare_views(&val_frames, &val_views, &texture)?;

    config::snapshot(out, cfg)?;
    let mut run = RunDirectory::create(out, cfg, cfg.checkpoint_every)?;
    let result = run_attack_with(&train, &val, model, &texture, &attack_cfg, &mut |record, t| {
        if record.iteration % 10 == 0 {
            println!(
                "iter {:5}  phi {:.5}  boxes {:4}  val fooled {}",
                record.iteration,
                record.objective,
                record.boxes,
                record.val_fool_rate.map_or("-".into(), |f| format!("{f:.2}"))
            );
        }
        run.record(record, t)
    })?;
    run.finish(&result)?;
    let last = result.history.last();
    println!(
        "stopped after {} iterations ({:?}); linf {:.4}",
        result.history.len(),
        result.termination,
        last.map_or(0.0, |r| r.linf_distance)
    );
    Ok(())
}

fn single_image_run(cfg: &AttackRunConfig, dataset: &RegisteredDataset, model: &DetectorModel, out: &Path) -> Result<()> {
    let (frames, _) = dataset.split(cfg.single_image.split);
    let dir = out.join(SINGLE_IMAGE_DIR);
    std::fs::create_dir_all(&dir)?;
    config::snapshot(out, cfg)?;
    let mut entries = Vec::new();
    for frame in frames.iter().take(cfg.single_image.frames) {
        let outcome = single_image_attack(frame, model, &cfg.attack, cfg.single_image.region)?;
        let name = format!("{}_{:04}.png", frame.meta.sequence_id, frame.meta.index);
        outcome.image.save_png(dir.join(&name))?;
        println!(
            "{} frame {}: {} after {} iterations, linf {:.4}",
            frame.meta.sequence_id,
            frame.meta.index,
            if outcome.success { "fooled" } else { "still detected" },
            outcome.iterations,
            outcome.linf
        );
        entries.push(SingleImageEntry {
            sequence_id: frame.meta.sequence_id.clone(),
            index: frame.meta.index,
            image: format!("{SINGLE_IMAGE_DIR}/{name}"),
            success: outcome.success,
            linf: outcome.linf,
            iterations: outcome.iterations,
        });
    }
    let fooled = entries.iter().filter(|e| e.success).count();
    println!("fooled {fooled}/{}", entries.len());
    write_json(&out.join(SINGLE_IMAGE_FILE), &entries)
}

// ---------------------------------------------------------------- evaluate

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub dataset: PathBuf,
    pub detectors: Vec<PathBuf>,
    /// Attacked texture (PNG or attack run directory); clean frames when absent.
    pub texture: Option<PathBuf>,
    /// Single-image attack run whose attacked frames are evaluated instead.
    pub single_image_run: Option<PathBuf>,
    pub attack_id: Option<String>,
    pub splits: Vec<Split>,
    pub defenses: Option<Vec<DefenseSpec>>,
    pub detector: DetectorConfig,
    /// Number of frames written with their detections drawn.
    pub annotate: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            detectors: Vec::new(),
            texture: None,
            single_image_run: None,
            attack_id: None,
            splits: Split::ALL.to_vec(),
            defenses: None,
            detector: DetectorConfig::default(),
            annotate: 0,
        }
    }
}

pub fn default_defenses() -> Vec<DefenseSpec> {
    vec![DefenseSpec::None, DefenseSpec::DownUp, DefenseSpec::tv()]
}

pub fn run_evaluate(mut cfg: EvaluateConfig, out: &Path, defend: bool) -> Result<()> {
    ensure!(!cfg.detectors.is_empty(), "configuration lists no detectors");
    ensure!(
        !(cfg.texture.is_some() && cfg.single_image_run.is_some()),
        "`texture` and `single_image_run` are exclusive"
    );
    let defenses = cfg
        .defenses
        .clone()
        .unwrap_or_else(|| if defend { default_defenses() } else { vec![DefenseSpec::None] });
    cfg.defenses = Some(defenses.clone());
    let attack_id = cfg.attack_id.clone().unwrap_or_else(|| {
        if cfg.texture.is_some() {
            "cross_view".into()
        } else if cfg.single_image_run.is_some() {
            "single_image".into()
        } else {
            CLEAN_ATTACK_ID.into()
        }
    });
    cfg.attack_id = Some(attack_id.clone());
    config::snapshot(out, &cfg)?;

    let dataset = load_dataset(&cfg.dataset)?;
    let models = cfg.detectors.iter().map(|p| load_detector(p)).collect::<Result<Vec<_>>>()?;
    let detectors: Vec<&dyn Detector> = models.iter().map(|m| m as &dyn Detector).collect();
    let spec = EvaluationSpec {
        detector: cfg.detector,
        attack_id,
    };

    let (report, frames) = if let Some(run) = &cfg.single_image_run {
        let frames = single_image_frames(&dataset, run)?;
        (evaluate(None, &frames, &[], &detectors, &defenses, &spec)?, frames)
    } else {
        let (frames, views) = frames_of(&dataset, &cfg.splits);
        let texture = cfg.texture.as_ref().map(|p| load_texture(&dataset, p)).transpose()?;
        let report = evaluate(texture.as_ref(), &frames, &views, &detectors, &defenses, &spec)?;
        let shown = match &texture {
            Some(t) => frames
                .iter()
                .zip(&views)
                .take(cfg.annotate)
                .map(|(f, v)| {
                    Ok(Frame {
                        image: advdet_core::registration::composite(&f.image, t, v)?,
                        ..f.clone()
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            None => frames.iter().take(cfg.annotate).cloned().collect(),
        };
        (report, shown)
    };
    write_report(out, &report)?;
    annotate(out, &frames[..cfg.annotate.min(frames.len())], &detectors, &defenses, &cfg.detector)
}

/// Attacked frames of a single-image run, with annotations from the dataset.
fn single_image_frames(dataset: &RegisteredDataset, run: &Path) -> Result<Vec<Frame>> {
    let entries: Vec<SingleImageEntry> = read_json(&run.join(SINGLE_IMAGE_FILE))?;
    let (all, _) = dataset.all();
    entries
        .iter()
        .map(|e| {
            let base = all
                .iter()
                .find(|f| f.meta.sequence_id == e.sequence_id && f.meta.index == e.index)
                .with_context(|| format!("frame {} of {} not in dataset", e.index, e.sequence_id))?;
            let image = Image::load(run.join(&e.image))?;
            Ok(Frame { image, ..base.clone() })
        })
        .collect()
}

fn annotate(
    out: &Path,
    frames: &[Frame],
    detectors: &[&dyn Detector],
    defenses: &[DefenseSpec],
    config: &DetectorConfig,
) -> Result<()> {
    if frames.is_empty() {
        return Ok(());
    }
    let dir = out.join(ANNOTATED_DIR);
    std::fs::create_dir_all(&dir)?;
    for frame in frames {
        for defense in defenses {
            let input = defense.apply(&frame.image)?;
            for model in detectors {
                let mut boxes: Vec<(Rect, [f64; 3])> = Vec::new();
                if let Some(r) = Rect::bounding(&frame.object_polygon) {
                    boxes.push((r, [0.1, 0.9, 0.2]));
                }
                let pass = model.forward(&input)?;
                for d in advdet_core::detector::detections_from(pass.proposals(), config) {
                    boxes.push((d.rect, [0.95, 0.1, 0.1]));
                }
                let name = format!(
                    "{}_{:04}_{}_{}.png",
                    frame.meta.sequence_id,
                    frame.meta.index,
                    model.id(),
                    defense.label()
                );
                draw_boxes(&input, &boxes).save_png(dir.join(name))?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- transfer

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub dataset: PathBuf,
    pub texture: PathBuf,
    /// Detector the texture was optimized against.
    pub source: PathBuf,
    pub target: PathBuf,
    pub splits: Vec<Split>,
    pub defense: DefenseSpec,
    pub attack_id: String,
    pub detector: DetectorConfig,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            texture: PathBuf::new(),
            source: PathBuf::new(),
            target: PathBuf::new(),
            splits: Split::ALL.to_vec(),
            defense: DefenseSpec::None,
            attack_id: "cross_view".into(),
            detector: DetectorConfig::default(),
        }
    }
}

pub fn transfer(cfg: TransferConfig, out: &Path) -> Result<()> {
    require_path(&cfg.texture, "texture")?;
    config::snapshot(out, &cfg)?;
    let dataset = load_dataset(&cfg.dataset)?;
    let source = load_detector(&cfg.source)?;
    let target = load_detector(&cfg.target)?;
    let texture = load_texture(&dataset, &cfg.texture)?;
    let (frames, views) = frames_of(&dataset, &cfg.splits);
    let spec = EvaluationSpec {
        detector: cfg.detector,
        attack_id: cfg.attack_id.clone(),
    };
    let report = transfer_evaluate(&texture, &frames, &views, &source, &target, cfg.defense, &spec)?;
    write_report(out, &report)
}

// ----------------------------------------------------------------- regress

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressConfig {
    /// `records.json` files, or directories containing one.
    pub reports: Vec<PathBuf>,
    /// Cross-validated when absent.
    pub l1_strength: Option<f64>,
    /// Perturbation tier per attack id; the attack id itself otherwise.
    pub tiers: BTreeMap<String, String>,
    /// Keep unattacked records as their own tier.
    pub include_clean: bool,
    pub options: LogisticOptions,
}

fn read_records(path: &Path) -> Result<DetectionRateReport> {
    let path = if path.is_dir() { path.join(RECORDS_FILE) } else { path.to_path_buf() };
    read_json(&path)
}

pub fn factor_records(records: &[FrameEvaluation], tiers: &BTreeMap<String, String>, include_clean: bool) -> Vec<FactorRecord> {
    records
        .iter()
        .filter(|r| include_clean || r.key.attack != CLEAN_ATTACK_ID)
        .map(|r| FactorRecord {
            detector: r.key.detector.clone(),
            physical: false,
            distance: r.key.distance,
            condition: r.key.condition.clone(),
            tier: tiers.get(&r.key.attack).cloned().unwrap_or_else(|| r.key.attack.clone()),
            success: r.fooled(),
        })
        .collect()
}

pub fn regress(cfg: RegressConfig, out: &Path) -> Result<()> {
    ensure!(!cfg.reports.is_empty(), "configuration lists no reports");
    config::snapshot(out, &cfg)?;
    let mut merged = DetectionRateReport::default();
    for p in &cfg.reports {
        merged.merge(read_records(p)?);
    }
    let records = factor_records(&merged.records, &cfg.tiers, cfg.include_clean);
    let successes = records.iter().filter(|r| r.success).count();
    if successes == 0 || successes == records.len() {
        bail!("regression needs both outcomes; {successes} of {} records are successes", records.len());
    }
    let factors = fit_success_factors(&records, cfg.l1_strength, &cfg.options)?;
    write_json(&out.join(COEFFICIENTS_FILE), &factors)?;
    let mut csv = String::from("rank,feature,coefficient\n");
    for (i, (name, w)) in factors.ranking.iter().enumerate() {
        csv.push_str(&format!("{},{name},{w}\n", i + 1));
    }
    std::fs::write(out.join(RANKING_FILE), &csv)?;
    println!(
        "{} records, strength {}, converged {}",
        records.len(),
        factors.fit.strength,
        factors.fit.converged
    );
    print!("{csv}");
    Ok(())
}

// ------------------------------------------------------------------ report

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub reports: Vec<PathBuf>,
}

pub fn report(cfg: ReportConfig, out: &Path) -> Result<()> {
    ensure!(!cfg.reports.is_empty(), "configuration lists no reports");
    config::snapshot(out, &cfg)?;
    let mut merged = DetectionRateReport::default();
    for p in &cfg.reports {
        merged.merge(read_records(p)?);
    }
    write_report(out, &merged)
}
