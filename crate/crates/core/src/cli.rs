//! Command-line front end. Exit codes: 0 success, 2 input or contract
//! error, 3 numerical failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::feat::{downsample_mask, FeatureMap, FeaturePipeline};
use crate::fixtures::{self, StyleKind};
use crate::image::LabelMask;
use crate::io::{self, Bundle, LabelEntry, TaskFile, Tensor};
use crate::maskgen::{self, LabelEmbeddingSet};
use crate::par;
use crate::render::{render_view, RenderOptions};
use crate::stylize::{self, PretrainConfig, TaskMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_INPUT,
    }
}

#[derive(Debug, Parser)]
#[command(name = "stylefield", version, about = "Controllable style transfer on voxel radiance fields")]
pub struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit density and radiance to a view bundle.
    Pretrain(PretrainArgs),
    /// Fine-tune radiance of a pretrained grid under a task file.
    Stylize(StylizeArgs),
    /// Render a checkpoint from a cameras.json file.
    Render(RenderArgs),
    /// Extract label masks from a bundle's semantic features.
    Mask(MaskArgs),
    /// Report per-view gradient contributions at a world point as JSON.
    Audit(AuditArgs),
    /// Write a synthetic scene as a view bundle.
    Fixture(FixtureArgs),
}

fn parse_list<T: std::str::FromStr, const N: usize>(s: &str) -> std::result::Result<[T; N], String> {
    let parts: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| format!("cannot parse {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    parts.try_into().map_err(|_| format!("expected {N} comma-separated values"))
}

fn parse_vec3(s: &str) -> std::result::Result<[f64; 3], String> {
    parse_list::<f64, 3>(s)
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    parse_list::<usize, 3>(s)
}

/// `x,y,view` or `x,y,view,label`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelQuery {
    pub x: usize,
    pub y: usize,
    pub view: usize,
    pub label: Option<u32>,
}

fn parse_query(s: &str) -> std::result::Result<PixelQuery, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("cannot parse {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [x, y, view] => Ok(PixelQuery { x, y, view, label: None }),
        [x, y, view, label] => Ok(PixelQuery {
            x,
            y,
            view,
            label: Some(label as u32),
        }),
        _ => Err("expected x,y,view or x,y,view,label".into()),
    }
}

#[derive(Debug, clap::Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, value_parser = parse_dims, default_value = "24,24,24")]
    pub dims: [usize; 3],
    #[arg(long, value_parser = parse_vec3, default_value = "-1,-1,-1", allow_hyphen_values = true)]
    pub bbox_min: [f64; 3],
    #[arg(long, value_parser = parse_vec3, default_value = "1,1,1", allow_hyphen_values = true)]
    pub bbox_max: [f64; 3],
    #[arg(long, default_value_t = 1)]
    pub sh_degree: usize,
    /// Weight of the harmonics smoothness term during pretraining.
    #[arg(long, default_value_t = 0.0)]
    pub tv_weight: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, clap::Args)]
pub struct StylizeArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub task: PathBuf,
    /// Output directory: checkpoint, log.jsonl and preview renders.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<TaskMode>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lambda_tv: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip colour transfer of the ground-truth images.
    #[arg(long)]
    pub no_color_transfer: bool,
}

fn parse_mode(s: &str) -> std::result::Result<TaskMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, clap::Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub cameras: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct MaskArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Query pixel `x,y,view[,label]`; repeat for several labels.
    #[arg(long = "pixel", value_parser = parse_query, conflicts_with = "embeddings")]
    pub pixels: Vec<PixelQuery>,
    /// CTNS `[M, C]` label embeddings; row `i` becomes label `i`.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Threshold for single-pixel queries.
    #[arg(long, default_value_t = maskgen::DEFAULT_TAU)]
    pub tau: f64,
    /// Semantic feature set to use when the bundle stores several.
    #[arg(long)]
    pub features: Option<String>,
}

#[derive(Debug, clap::Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    pub point: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FixtureScene {
    Box,
    TwoObject,
    SingleBox,
    Occlusion,
    OcclusionOpen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FixtureStyle {
    Stripes,
    Dots,
    TwoRegion,
}

#[derive(Debug, clap::Args)]
pub struct FixtureArgs {
    #[arg(long, value_enum)]
    pub scene: FixtureScene,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the ground-truth grid checkpoint here.
    #[arg(long)]
    pub grid_out: Option<PathBuf>,
    /// Also write a style image and an object-selection task.json.
    #[arg(long, value_enum)]
    pub style: Option<FixtureStyle>,
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.sequential {
        par::sequential(|| dispatch(cli.command))
    } else {
        dispatch(cli.command)
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Stylize(a) => cmd_stylize(&a),
        Command::Render(a) => cmd_render(&a),
        Command::Mask(a) => cmd_mask(&a),
        Command::Audit(a) => cmd_audit(&a),
        Command::Fixture(a) => cmd_fixture(&a),
    }
}

#[derive(serde::Serialize)]
struct PretrainLogRow {
    step: usize,
    loss: f64,
}

pub fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let bundle = Bundle::read(&a.bundle)?;
    let views = bundle.views()?;
    let init = stylize::initial_grid(a.dims, a.bbox_min, a.bbox_max, a.sh_degree, stylize::INITIAL_DENSITY, a.seed)?;
    let cfg = PretrainConfig {
        steps: a.steps,
        tv_weight: a.tv_weight,
        ..PretrainConfig::default()
    };
    let out = stylize::pretrain(init, &views, &cfg, &RenderOptions::default())?;
    io::save_grid(&a.out, &out.grid)?;
    let rows: Vec<PretrainLogRow> = out.losses.iter().enumerate().map(|(step, &loss)| PretrainLogRow { step, loss }).collect();
    io::write_json_lines(&a.out.join("pretrain_log.jsonl"), &rows)?;
    log::info!("pretrained {} steps, final loss {:?}", rows.len(), out.losses.last());
    Ok(())
}

/// Texture extractor is always the synthetic conv bank; semantic features come
/// from the bundle when it stores any.
pub fn pipeline_for(bundle: &Bundle) -> FeaturePipeline {
    let mut p = FeaturePipeline::default();
    if let Some((name, _)) = bundle.semantic_features() {
        if name != "color-quantize" {
            p.semantic = bundle.precomputed(name);
        }
    }
    p
}

fn load_task(path: &Path, pipeline: &FeaturePipeline, override_with: impl FnOnce(&mut TaskFile)) -> Result<crate::stylize::TaskSpec> {
    let mut file = TaskFile::read(path)?;
    override_with(&mut file);
    file.resolve(path.parent().unwrap_or(Path::new(".")), pipeline)
}

pub fn cmd_stylize(a: &StylizeArgs) -> Result<()> {
    let bundle = Bundle::read(&a.bundle)?;
    let grid = io::load_grid(&a.grid)?;
    let pipeline = pipeline_for(&bundle);
    let task = load_task(&a.task, &pipeline, |f| {
        if let Some(m) = a.mode {
            f.mode = m;
        }
        if let Some(v) = a.alpha {
            f.alpha = v;
        }
        if let Some(v) = a.lambda {
            f.lambda = v;
        }
        if let Some(v) = a.lambda_tv {
            f.lambda_tv = v;
        }
        if let Some(v) = a.steps {
            f.steps = v;
        }
        if let Some(v) = a.step_size {
            f.step_size = v;
        }
        if let Some(v) = a.seed {
            f.seed = v;
        }
    })?;
    let mut views = bundle.views()?;
    for l in stylize::labels_in(&views) {
        if !task.bindings.contains_key(&l) {
            return Err(Error::UnboundLabel(l));
        }
    }
    let maps = if a.no_color_transfer {
        views.iter_mut().try_for_each(|v| v.cache_content_features(&pipeline))?;
        BTreeMap::new()
    } else {
        stylize::apply_task_color_transfer(&mut views, &task, &pipeline)?
    };
    let opts = RenderOptions::default();
    let preview = a.out.join("preview");
    fs::create_dir_all(&preview)?;
    for (i, v) in views.iter().enumerate() {
        let (img, _) = render_view(&grid, &v.camera, &opts)?;
        io::write_png(&preview.join(format!("before_{i:03}.png")), &img)?;
    }
    let (grid, state) = stylize::finetune(grid, &views, &task, &pipeline, &opts)?;
    io::save_grid(&a.out, &grid)?;
    io::write_json_lines(&a.out.join("log.jsonl"), &state.records)?;
    fs::write(a.out.join("color_maps.json"), serde_json::to_string_pretty(&maps)? + "\n")?;
    for (i, v) in views.iter().enumerate() {
        let (img, _) = render_view(&grid, &v.camera, &opts)?;
        io::write_png(&preview.join(format!("after_{i:03}.png")), &img)?;
    }
    Ok(())
}

pub fn cmd_render(a: &RenderArgs) -> Result<()> {
    let grid = io::load_grid(&a.grid)?;
    let cameras = io::read_cameras(&a.cameras)?;
    if cameras.is_empty() {
        return Ok(());
    }
    fs::create_dir_all(&a.out)?;
    let opts = RenderOptions::default();
    for (i, c) in cameras.iter().enumerate() {
        let (img, _) = render_view(&grid, c, &opts)?;
        io::write_png(&a.out.join(format!("{i:03}.png")), &img)?;
    }
    Ok(())
}

fn semantic_set<'a>(bundle: &'a Bundle, name: Option<&str>) -> Result<&'a [FeatureMap]> {
    match name {
        Some(n) => bundle
            .features
            .get(n)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingFeature(format!("bundle has no {n} features"))),
        None => bundle
            .semantic_features()
            .map(|(_, m)| m)
            .ok_or_else(|| Error::MissingFeature("bundle has no semantic features".into())),
    }
}

pub fn cmd_mask(a: &MaskArgs) -> Result<()> {
    let bundle = Bundle::read(&a.bundle)?;
    let sem = semantic_set(&bundle, a.features.as_deref())?;
    let masks: Vec<LabelMask> = if let Some(path) = &a.embeddings {
        let t = io::read_ctns(path)?;
        let [rows, cols] = t.dims[..] else {
            return Err(Error::Format("embeddings must be a [M, C] tensor".into()));
        };
        let set = LabelEmbeddingSet::from_rows(rows, cols, &t.to_f64(), None)?;
        sem.iter().map(|s| maskgen::mask_from_embeddings(s, &set)).collect::<Result<_>>()?
    } else {
        if a.pixels.is_empty() {
            return Err(Error::Config("give --pixel queries or --embeddings".into()));
        }
        let mut refs = Vec::with_capacity(a.pixels.len());
        for (i, q) in a.pixels.iter().enumerate() {
            let (Some(map), Some(img)) = (sem.get(q.view), bundle.images.get(q.view)) else {
                return Err(Error::invalid("query", format!("view {} does not exist", q.view)));
            };
            if q.x >= img.width || q.y >= img.height {
                return Err(Error::invalid("query", format!("pixel ({}, {}) outside view {}", q.x, q.y, q.view)));
            }
            let fx = q.x * map.width / img.width;
            let fy = q.y * map.height / img.height;
            let label = q.label.unwrap_or(if a.pixels.len() == 1 { 1 } else { i as u32 });
            let mut r = maskgen::query_features(map, &[(fx, fy, label)])?;
            refs.append(&mut r);
        }
        sem.iter().map(|s| maskgen::mask_from_query_features(s, &refs, a.tau)).collect::<Result<_>>()?
    };
    let dir = a.out.join("masks");
    fs::create_dir_all(&dir)?;
    for (i, (m, img)) in masks.iter().zip(&bundle.images).enumerate() {
        let m = if (m.width, m.height) == (img.width, img.height) {
            m.clone()
        } else {
            downsample_mask(m, img.height, img.width)
        };
        io::write_mask_png(&dir.join(format!("{i:03}.png")), &m)?;
    }
    Ok(())
}

pub fn cmd_audit(a: &AuditArgs) -> Result<()> {
    let bundle = Bundle::read(&a.bundle)?;
    let grid = io::load_grid(&a.grid)?;
    let pipeline = pipeline_for(&bundle);
    let task = load_task(&a.task, &pipeline, |_| {})?;
    let mut views = bundle.views()?;
    views.iter_mut().try_for_each(|v| v.cache_content_features(&pipeline))?;
    let report = stylize::gradient_audit(&grid, &views, &task, &pipeline, &RenderOptions::default(), a.point)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

/// Bundle for a synthetic scene, with conv-bank texture and colour-quantised
/// semantic features stored alongside.
pub fn fixture_bundle(scene: &fixtures::Scene) -> Result<Bundle> {
    let pipeline = FeaturePipeline::default();
    let mut features = BTreeMap::new();
    for ex in [Some(&pipeline.texture), pipeline.semantic.as_ref()].into_iter().flatten() {
        let maps = scene.images.iter().map(|i| ex.extract(i)).collect::<Result<Vec<_>>>()?;
        features.insert(ex.name().to_string(), maps);
    }
    Ok(Bundle {
        cameras: scene.cameras.clone(),
        images: scene.images.clone(),
        masks: Some(scene.masks.clone()),
        features,
    })
}

pub fn cmd_fixture(a: &FixtureArgs) -> Result<()> {
    let scene = match a.scene {
        FixtureScene::Box => fixtures::build_scene(&fixtures::box_scene_spec(a.seed))?,
        FixtureScene::TwoObject => fixtures::build_scene(&fixtures::two_object_spec(a.seed))?,
        FixtureScene::SingleBox => fixtures::build_scene(&fixtures::single_box_spec(a.seed))?,
        FixtureScene::Occlusion => fixtures::build_occlusion_scene()?.scene,
        FixtureScene::OcclusionOpen => fixtures::build_occlusion_scene_with(false)?.scene,
    };
    fixture_bundle(&scene)?.write(&a.out)?;
    if let Some(dir) = &a.grid_out {
        let mut g = scene.grid.clone();
        g.freeze_density();
        io::save_grid(dir, &g)?;
    }
    if let Some(style) = a.style {
        let kind = match style {
            FixtureStyle::Stripes => StyleKind::Stripes,
            FixtureStyle::Dots => StyleKind::Dots,
            FixtureStyle::TwoRegion => StyleKind::TwoRegion,
        };
        let s = fixtures::build_style_image(kind, a.seed, 32);
        io::write_png(&a.out.join("style.png"), &s.image)?;
        io::write_mask_png(&a.out.join("style_mask.png"), &s.mask)?;
        let labels = scene
            .masks
            .iter()
            .flat_map(|m| m.distinct_labels())
            .chain([0, 1])
            .collect::<std::collections::BTreeSet<u32>>();
        let task = TaskFile {
            mode: TaskMode::ObjectSelect,
            labels: labels
                .into_iter()
                .map(|l| LabelEntry {
                    label: l,
                    preserve: l == 0,
                    style: (l != 0).then(|| PathBuf::from("style.png")),
                    style_mask: None,
                    style_semantic: None,
                })
                .collect(),
            alpha: 0.5,
            lambda: crate::loss::LossConfig::default().lambda,
            lambda_tv: crate::loss::LossConfig::default().lambda_tv,
            steps: 100,
            step_size: 1e-2,
            views_per_step: None,
            seed: a.seed,
        };
        task.write(&a.out.join("task.json"))?;
    }
    Ok(())
}

/// Writes label embeddings as a `[M, C]` CTNS file.
pub fn write_embeddings(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let cols = rows.first().map_or(0, Vec::len);
    let data = rows.iter().flat_map(|r| r.iter().map(|&v| v as f32)).collect();
    io::write_ctns(path, &Tensor::f32(vec![rows.len(), cols], data)?)
}
