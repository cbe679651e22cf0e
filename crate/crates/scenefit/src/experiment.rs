//! Batch experiment runner and the fast invariant self-check.
//!
//! An experiment spec names scene configs and sweeps (K values, depth
//! ordering, auto-masking, seeds); every combination becomes one *cell*,
//! fitted independently and written into its own directory. The run
//! directory is self-describing (spec copy, version, seeds) and all CSV/JSON
//! outputs are byte-deterministic for a fixed spec; timing goes to a plain
//! text file so it cannot perturb them.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::field::Image;
use crate::formats::{self, KvFile};
use crate::losses::{LossBreakdown, LossConfig};
use crate::masks::composite_image;
use crate::metrics::{depth_metrics, mask_iou, DepthMetrics, MaskIouReport};
use crate::optim::{fit_scene, BlockLr, FitConfig, FitResult, InitConfig, LrSchedule, PoseInit};
use crate::scene::{generate_scene, SyntheticScene};
use crate::{Error, Result};

pub const ENV_WORKERS: &str = "SCENEFIT_WORKERS";
pub const ENV_SEED: &str = "SCENEFIT_SEED";
pub const ENV_FIXTURES: &str = "SCENEFIT_FIXTURES";

/// Frozen digests of the shipped fixture scenes; `selfcheck` regenerates each
/// scene from its config and compares. Refresh with the ignored test
/// `print_fixture_checksums` after an intentional generator change.
pub const FIXTURE_CHECKSUMS: &[(&str, u64)] = &[
    ("static-v1", 0x462dd7df536a799a),
    ("static-v2", 0x5968adbe4a9074a7),
    ("one-mover-v1", 0x305474f023a32193),
    ("two-movers-v1", 0x53ac3c25daef2b47),
    ("two-movers-v2", 0xdd8e5eeb5cf82a86),
    ("movers-a", 0x1490848053cf5a21),
    ("movers-b", 0x60d09543c580f1f7),
    ("movers-c", 0x5d230acd8447a828),
    ("movers-d", 0xb083dbe71895708b),
    ("movers-e", 0xf5fb1d8c06eee750),
];

/// Fixture directory resolution: `SCENEFIT_FIXTURES`, then `./fixtures`, then
/// the crate-local copy (useful under `cargo test` from any directory).
pub fn default_fixture_dir() -> PathBuf {
    if let Ok(dir) = std::env::var(ENV_FIXTURES) {
        return PathBuf::from(dir);
    }
    let cwd = PathBuf::from("fixtures");
    if cwd.is_dir() {
        return cwd;
    }
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn load_fixture(dir: &Path, name: &str) -> Result<SyntheticScene> {
    let path = dir.join(format!("{name}.scene"));
    let cfg = formats::read_scene_config(&path)?;
    generate_scene(&cfg)
}

// ---------------------------------------------------------------------------
// Experiment specs

#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    /// Scene config paths, resolved relative to the spec file.
    pub scenes: Vec<PathBuf>,
    pub k_list: Vec<usize>,
    pub steps: usize,
    pub ordering: Vec<bool>,
    pub auto_mask: Vec<bool>,
    pub seeds: Vec<u64>,
    pub lr: LrSchedule,
    pub block_lr: BlockLr,
    pub init_depth: f64,
    pub logit_noise: f64,
}

fn parse_switch(value: &str, key: &str, path: &str) -> Result<Vec<bool>> {
    match value {
        "on" => Ok(vec![true]),
        "off" => Ok(vec![false]),
        "both" => Ok(vec![true, false]),
        other => Err(Error::Parse {
            path: path.to_string(),
            line: 0,
            msg: format!("key `{key}`: expected on|off|both, got `{other}`"),
        }),
    }
}

/// Spec keys: repeated `scene = path`, `k = 1,3,5`, `steps`, `ordering =
/// on|off|both`, `auto_mask = on|off|both`, `seeds = 7,8`, optional
/// `lr_initial`, `lr_drop_to`, `lr_drop_at`, `init_depth`, `logit_noise`.
pub fn load_spec(path: &Path) -> Result<ExperimentSpec> {
    let kv = KvFile::load(path)?;
    let display = path.display().to_string();
    let base = path.parent().unwrap_or(Path::new("."));
    let scenes: Vec<PathBuf> = kv.get_all("scene").iter().map(|s| base.join(s)).collect();
    if scenes.is_empty() {
        return Err(Error::Config(format!("{display}: no `scene` entries")));
    }
    for s in &scenes {
        if !s.is_file() {
            return Err(Error::Config(format!("scene config {} does not exist", s.display())));
        }
    }
    let k_list: Vec<usize> = kv
        .require("k")?
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse {
            path: display.clone(),
            line: 0,
            msg: format!("key `k`: {e}"),
        })?;
    if k_list.is_empty() || k_list.contains(&0) {
        return Err(Error::Config(format!("{display}: K list must be non-empty and positive")));
    }
    let seeds: Vec<u64> = match kv.get("seeds") {
        None => vec![0],
        Some(raw) => raw
            .split(',')
            .map(|t| t.trim().parse::<u64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                path: display.clone(),
                line: 0,
                msg: format!("key `seeds`: {e}"),
            })?,
    };
    let get_or = |key: &str, default: f64| -> Result<f64> {
        match kv.get(key) {
            None => Ok(default),
            Some(_) => kv.require_f64(key),
        }
    };
    Ok(ExperimentSpec {
        scenes,
        k_list,
        steps: kv.require_usize("steps")?,
        ordering: parse_switch(kv.get("ordering").unwrap_or("on"), "ordering", &display)?,
        auto_mask: parse_switch(kv.get("auto_mask").unwrap_or("off"), "auto_mask", &display)?,
        seeds,
        lr: LrSchedule {
            initial: get_or("lr_initial", 8e-3)?,
            drop_to: get_or("lr_drop_to", 8e-4)?,
            drop_at: get_or("lr_drop_at", 0.75)?,
        },
        block_lr: BlockLr {
            depth: get_or("lr_scale_depth", BlockLr::default().depth)?,
            logits: get_or("lr_scale_logits", BlockLr::default().logits)?,
            pose: get_or("lr_scale_pose", BlockLr::default().pose)?,
        },
        init_depth: get_or("init_depth", 8.0)?,
        logit_noise: get_or("logit_noise", 1e-3)?,
    })
}

// ---------------------------------------------------------------------------
// Cells

#[derive(Clone, Debug, Serialize)]
pub struct CellId {
    pub scene: String,
    pub k: usize,
    pub ordering: bool,
    pub auto_mask: bool,
    pub seed: u64,
}

impl CellId {
    pub fn dir_name(&self) -> String {
        format!(
            "{}_k{}_{}{}_s{}",
            self.scene,
            self.k,
            if self.ordering { "ord" } else { "noord" },
            if self.auto_mask { "_am" } else { "" },
            self.seed
        )
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CellSummary {
    #[serde(flatten)]
    pub id: CellId,
    pub status: String,
    pub overall: Option<DepthMetrics>,
    pub moving: Option<DepthMetrics>,
    pub mask_iou: Option<MaskIouReport>,
    pub final_loss: Option<LossBreakdown>,
}

#[derive(Serialize)]
struct StepRecord<'a> {
    step: usize,
    #[serde(flatten)]
    loss: &'a LossBreakdown,
}

#[derive(Debug)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub cells: Vec<CellSummary>,
    pub seconds: Vec<f64>,
    pub dry_run: bool,
}

impl RunReport {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.status != "ok" && c.status != "planned").count()
    }
}

fn fit_config_for(spec: &ExperimentSpec, id: &CellId) -> FitConfig {
    FitConfig {
        k: id.k,
        steps: spec.steps,
        lr: spec.lr,
        block_lr: spec.block_lr,
        loss: LossConfig {
            use_depth_ordering: id.ordering,
            auto_mask: id.auto_mask,
            ..LossConfig::default()
        },
        init: InitConfig {
            depth: spec.init_depth,
            logit_noise: spec.logit_noise,
            pose: PoseInit::Identity,
        },
        seed: id.seed,
        checkpoint_every: None,
    }
}

/// Fit one cell and score it against the scene's ground truth.
pub fn evaluate_fit(scene: &SyntheticScene, fit: &FitResult) -> Result<(DepthMetrics, Option<DepthMetrics>, Option<MaskIouReport>)> {
    let overall = depth_metrics(&fit.depth, &scene.gt_depth, None, true)?;
    let moving_region = scene.moving_region();
    let (moving, iou) = if moving_region.count() > 0 {
        (
            Some(depth_metrics(&fit.depth, &scene.gt_depth, Some(&moving_region), true)?),
            Some(mask_iou(&fit.masks, &moving_region, 0.5)?),
        )
    } else {
        (None, None)
    };
    Ok((overall, moving, iou))
}

fn write_cell_artifacts(dir: &Path, fit: &FitResult, summary: &CellSummary) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut jsonl = String::new();
    for (step, loss) in fit.loss_history.iter().enumerate() {
        jsonl.push_str(&serde_json::to_string(&StepRecord { step, loss })?);
        jsonl.push('\n');
    }
    fs::write(dir.join("steps.jsonl"), jsonl)?;
    formats::write_pfm_depth(&fit.depth, &dir.join("depth.pfm"))?;
    formats::write_mask_bundle(&fit.masks, &dir.join("masks.pgm"))?;
    formats::write_ppm(&composite_image(&fit.masks, MASK_PALETTE_SEED), &dir.join("masks_composite.ppm"))?;
    formats::write_poses(
        &[("prev", &fit.poses[0]), ("next", &fit.poses[1])],
        &dir.join("poses.txt"),
    )?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(summary)?)?;

    let mut csv = String::from("scope,");
    csv.push_str(DepthMetrics::CSV_HEADER);
    csv.push('\n');
    if let Some(m) = &summary.overall {
        csv.push_str(&format!("overall,{}\n", m.csv_row()));
    }
    if let Some(m) = &summary.moving {
        csv.push_str(&format!("moving,{}\n", m.csv_row()));
    }
    fs::write(dir.join("metrics.csv"), csv)?;
    Ok(())
}

const MASK_PALETTE_SEED: u64 = 0xC0FFEE;

fn summary_csv(cells: &[CellSummary]) -> String {
    let mut out = String::from(
        "scene,k,ordering,auto_mask,seed,status,\
         abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3,\
         mov_abs_rel,mov_sq_rel,mov_rmse,mov_rmse_log,mov_delta1,mov_delta2,mov_delta3,\
         mask_iou,final_total,final_photometric,valid_pixels\n",
    );
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for cell in cells {
        let m = cell.overall;
        let mv = cell.moving;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            cell.id.scene,
            cell.id.k,
            if cell.id.ordering { "on" } else { "off" },
            if cell.id.auto_mask { "on" } else { "off" },
            cell.id.seed,
            cell.status,
            opt(m.map(|m| m.abs_rel)),
            opt(m.map(|m| m.sq_rel)),
            opt(m.map(|m| m.rmse)),
            opt(m.map(|m| m.rmse_log)),
            opt(m.map(|m| m.delta1)),
            opt(m.map(|m| m.delta2)),
            opt(m.map(|m| m.delta3)),
            opt(mv.map(|m| m.abs_rel)),
            opt(mv.map(|m| m.sq_rel)),
            opt(mv.map(|m| m.rmse)),
            opt(mv.map(|m| m.rmse_log)),
            opt(mv.map(|m| m.delta1)),
            opt(mv.map(|m| m.delta2)),
            opt(mv.map(|m| m.delta3)),
            opt(cell.mask_iou.map(|i| i.best_iou)),
            opt(cell.final_loss.map(|l| l.total)),
            opt(cell.final_loss.map(|l| l.photometric)),
            cell.final_loss.map_or(String::new(), |l| l.valid_pixel_count.to_string()),
        ));
    }
    out
}

struct CellJob {
    id: CellId,
    scene_index: usize,
}

fn execute_cell(
    job: &CellJob,
    scenes: &[SyntheticScene],
    spec: &ExperimentSpec,
    out_dir: &Path,
) -> (CellSummary, f64) {
    let started = Instant::now();
    let scene = &scenes[job.scene_index];
    let cfg = fit_config_for(spec, &job.id);
    let outcome = fit_scene(scene, &cfg).and_then(|fit| {
        let (overall, moving, iou) = evaluate_fit(scene, &fit)?;
        let summary = CellSummary {
            id: job.id.clone(),
            status: "ok".into(),
            overall: Some(overall),
            moving,
            mask_iou: iou,
            final_loss: fit.loss_history.last().copied(),
        };
        write_cell_artifacts(&out_dir.join(job.id.dir_name()), &fit, &summary)?;
        Ok(summary)
    });
    let summary = outcome.unwrap_or_else(|err| CellSummary {
        id: job.id.clone(),
        status: format!("error: {err}"),
        overall: None,
        moving: None,
        mask_iou: None,
        final_loss: None,
    });
    (summary, started.elapsed().as_secs_f64())
}

#[cfg(feature = "parallel")]
fn run_jobs(
    jobs: &[CellJob],
    scenes: &[SyntheticScene],
    spec: &ExperimentSpec,
    out_dir: &Path,
    workers: usize,
) -> Result<Vec<(CellSummary, f64)>> {
    use rayon::prelude::*;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if workers > 0 {
        builder = builder.num_threads(workers);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        jobs.par_iter()
            .map(|job| execute_cell(job, scenes, spec, out_dir))
            .collect()
    }))
}

#[cfg(not(feature = "parallel"))]
fn run_jobs(
    jobs: &[CellJob],
    scenes: &[SyntheticScene],
    spec: &ExperimentSpec,
    out_dir: &Path,
    _workers: usize,
) -> Result<Vec<(CellSummary, f64)>> {
    Ok(jobs
        .iter()
        .map(|job| execute_cell(job, scenes, spec, out_dir))
        .collect())
}

/// Runs every (scene, K, ordering, auto-mask, seed) cell of the spec.
/// `workers = 0` uses the default thread count. Honors the `SCENEFIT_SEED`
/// and `SCENEFIT_WORKERS` environment overrides.
pub fn run(spec: &ExperimentSpec, spec_path: &Path, out_dir: &Path, workers: usize, dry_run: bool) -> Result<RunReport> {
    let mut spec = spec.clone();
    if let Ok(seed) = std::env::var(ENV_SEED) {
        let seed = seed.parse::<u64>().map_err(|e| Error::Config(format!("{ENV_SEED}: {e}")))?;
        spec.seeds = vec![seed];
    }
    let workers = match std::env::var(ENV_WORKERS) {
        Ok(w) => w.parse::<usize>().map_err(|e| Error::Config(format!("{ENV_WORKERS}: {e}")))?,
        Err(_) => workers,
    };

    let mut jobs = Vec::new();
    for (scene_index, scene_path) in spec.scenes.iter().enumerate() {
        let stem = scene_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("scene{scene_index}"));
        for &k in &spec.k_list {
            for &ordering in &spec.ordering {
                for &auto_mask in &spec.auto_mask {
                    for &seed in &spec.seeds {
                        jobs.push(CellJob {
                            id: CellId {
                                scene: stem.clone(),
                                k,
                                ordering,
                                auto_mask,
                                seed,
                            },
                            scene_index,
                        });
                    }
                }
            }
        }
    }

    if dry_run {
        let cells = jobs
            .iter()
            .map(|j| CellSummary {
                id: j.id.clone(),
                status: "planned".into(),
                overall: None,
                moving: None,
                mask_iou: None,
                final_loss: None,
            })
            .collect();
        return Ok(RunReport {
            out_dir: out_dir.to_path_buf(),
            cells,
            seconds: Vec::new(),
            dry_run: true,
        });
    }

    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("spec.espec"), fs::read(spec_path)?)?;
    let meta = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "scenes": spec.scenes.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "k": spec.k_list,
        "steps": spec.steps,
        "seeds": spec.seeds,
        "lr": {"initial": spec.lr.initial, "drop_to": spec.lr.drop_to, "drop_at": spec.lr.drop_at},
        "init_depth": spec.init_depth,
        "logit_noise": spec.logit_noise,
    });
    fs::write(out_dir.join("run_meta.json"), serde_json::to_string_pretty(&meta)?)?;

    let scenes: Result<Vec<SyntheticScene>> = spec
        .scenes
        .iter()
        .map(|p| formats::read_scene_config(p).and_then(|cfg| generate_scene(&cfg)))
        .collect();
    let scenes = scenes?;

    let outcomes = run_jobs(&jobs, &scenes, &spec, out_dir, workers)?;
    let (cells, seconds): (Vec<CellSummary>, Vec<f64>) = outcomes.into_iter().unzip();

    fs::write(out_dir.join("summary.csv"), summary_csv(&cells))?;
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&cells)?)?;
    let mut timing = String::from("# cell seconds (excluded from deterministic outputs)\n");
    for (cell, secs) in cells.iter().zip(&seconds) {
        timing.push_str(&format!("{} {:.3}\n", cell.id.dir_name(), secs));
    }
    fs::write(out_dir.join("timings.txt"), timing)?;

    Ok(RunReport {
        out_dir: out_dir.to_path_buf(),
        cells,
        seconds,
        dry_run: false,
    })
}

/// Rebuilds the color composite from a fit directory's mask bundle.
pub fn render_masks(fit_dir: &Path, out: &Path) -> Result<()> {
    let masks = formats::read_mask_bundle(&fit_dir.join("masks.pgm"))?;
    formats::write_ppm(&composite_image(&masks, MASK_PALETTE_SEED), out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Selfcheck

#[derive(Clone, Debug)]
pub struct GroupResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct SelfcheckReport {
    pub groups: Vec<GroupResult>,
}

impl SelfcheckReport {
    pub fn all_passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn failed_groups(&self) -> Vec<&'static str> {
        self.groups.iter().filter(|g| !g.passed).map(|g| g.name).collect()
    }
}

fn group<F>(name: &'static str, f: F) -> GroupResult
where
    F: FnOnce() -> std::result::Result<(), String>,
{
    let started = Instant::now();
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f));
    let (passed, detail) = match outcome {
        Ok(Ok(())) => (true, String::from("ok")),
        Ok(Err(msg)) => (false, msg),
        Err(_) => (false, String::from("panicked")),
    };
    GroupResult {
        name,
        passed,
        detail,
        seconds: started.elapsed().as_secs_f64(),
    }
}

/// Runs the fast invariant suite; aims well under a minute.
pub fn selfcheck(fixtures_dir: &Path) -> SelfcheckReport {
    let groups = vec![
        group("grad-core", checks::grad_core),
        group("grad-sensitivity", checks::grad_sensitivity),
        group("warp-oracle", checks::warp_oracle),
        group("mask-invariants", checks::mask_invariants),
        group("loss-identities", checks::loss_identities),
        group("metric-identities", checks::metric_identities),
        group("formats", checks::formats_roundtrip),
        group("fixtures", || checks::fixtures(fixtures_dir)),
    ];
    SelfcheckReport { groups }
}

mod checks {
    use super::*;
    use crate::autodiff::{grad_check, record, Scalar, Tape, Var};
    use crate::field::{DepthMap, Validity, ValidityMask};
    use crate::geometry::{
        apply_transform, backproject_s, project_s, CameraIntrinsics, PixelCoord, Point3,
        Projection, RigidTransform,
    };
    use crate::losses::{photometric_loss_s, smoothness_loss, ssim_map, total_loss};
    use crate::masks::{blend_transform, normalize_masks, MaskLogits, MaskStack, OrderingWeights, TransformSet};
    use crate::metrics::RegionMask;
    use crate::scene::{oracle_warp, ObjectConfig, SceneConfig, TextureStyle};
    use crate::warp::{synthesize_view, Warped};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Check = std::result::Result<(), String>;

    fn ensure(cond: bool, msg: &str) -> Check {
        if cond {
            Ok(())
        } else {
            Err(msg.to_string())
        }
    }

    pub fn grad_core() -> Check {
        let sq = record(&[3.0], |_, v| v[0] * v[0]).map_err(|e| e.to_string())?;
        ensure(sq.gradient(1.0).map_err(|e| e.to_string())?[0] == 6.0, "d(x^2)/dx at 3")?;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let x = [rng.gen_range(0.3..2.0), rng.gen_range(0.3..2.0), rng.gen_range(0.3..2.0)];
            let report = grad_check(
                |_: &Tape, v: &[Var<'_>]| ((v[0] * v[1]).sin() + v[2].ln()).exp() / (v[2] + 0.7),
                &x,
                1e-6,
            )
            .map_err(|e| e.to_string())?;
            if report.max_rel_error >= 1e-4 {
                return Err(format!("composite gradient off: {report:?}"));
            }
            let k = CameraIntrinsics::new(50.0, 48.0, 16.0, 12.0).unwrap();
            let geo = grad_check(
                move |_: &Tape, v: &[Var<'_>]| {
                    let p = backproject_s(9.3, 6.1, v[0] + 2.0, &k);
                    let t = RigidTransform {
                        axis_angle: [v[1] * 0.2, v[2] * 0.1, v[1] * -0.05],
                        translation: [v[2], v[0] * 0.1, v[1] * 0.05],
                    };
                    let moved = crate::geometry::apply_transform_s(&t, &p);
                    match project_s(&moved, &k) {
                        Projection::Valid(q) => q.u + q.v * 0.5,
                        Projection::BehindCamera => unreachable!(),
                    }
                },
                &x,
                1e-6,
            )
            .map_err(|e| e.to_string())?;
            if geo.max_rel_error >= 1e-4 {
                return Err(format!("geometry gradient off: {geo:?}"));
            }
        }
        Ok(())
    }

    pub fn grad_sensitivity() -> Check {
        // A sign-flipped derivative must be flagged by the comparison logic.
        let rec = record(&[1.3], |_, v| v[0] * v[0]).map_err(|e| e.to_string())?;
        let flipped = -rec.gradient(1.0).map_err(|e| e.to_string())?[0];
        let h = 1e-5;
        let plus = record(&[1.3 + h], |_, v| v[0] * v[0]).unwrap().value();
        let minus = record(&[1.3 - h], |_, v| v[0] * v[0]).unwrap().value();
        let fd = (plus - minus) / (2.0 * h);
        let rel = (flipped - fd).abs() / flipped.abs().max(fd.abs()).max(1e-6);
        ensure(rel > 1e-3, "sign-flipped gradient went undetected")
    }

    pub fn warp_oracle() -> Check {
        for seed in 0..5u64 {
            let cfg = SceneConfig {
                width: 40,
                height: 30,
                intrinsics: CameraIntrinsics::new(38.0, 38.0, 19.5, 14.5).unwrap(),
                background_depth: 10.0,
                ego_to_prev: RigidTransform::new([0.001, -0.002, 0.0005], [0.1, 0.01, 0.02]),
                ego_to_next: RigidTransform::new([-0.001, 0.002, -0.0005], [-0.1, -0.01, -0.02]),
                objects: vec![ObjectConfig {
                    rect: [9.0, 8.0, 20.0, 17.0],
                    depth: 5.0,
                    motion: [0.1, 0.0, 0.0],
                }],
                texture_seed: seed,
                texture_style: TextureStyle::SmoothNoise,
                texture_detail: Default::default(),
            };
            let scene = crate::scene::generate_scene(&cfg).map_err(|e| e.to_string())?;
            let fast = synthesize_view(
                &scene.gt_depth,
                &scene.gt_masks,
                &scene.gt_transforms[1],
                &scene.next,
                &cfg.intrinsics,
            )
            .map_err(|e| e.to_string())?;
            let slow = oracle_warp(
                &scene.gt_depth,
                &scene.gt_masks,
                &scene.gt_transforms[1],
                &scene.next,
                &cfg.intrinsics,
            )
            .map_err(|e| e.to_string())?;
            if fast.1 != slow.1 {
                return Err(format!("validity mismatch on seed {seed}"));
            }
            for (a, b) in fast.0.data().iter().zip(slow.0.data()) {
                if (a - b).abs() > 1e-12 {
                    return Err(format!("warp mismatch {a} vs {b} on seed {seed}"));
                }
            }
        }
        Ok(())
    }

    pub fn mask_invariants() -> Check {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let k = rng.gen_range(1..5usize);
            let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-1e3..1e3)).collect();
            let stack = normalize_masks(
                &MaskLogits::new(1, 1, k, logits).unwrap(),
                &OrderingWeights::ordered(k),
            )
            .map_err(|e| e.to_string())?;
            let sum: f64 = stack.data.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || stack.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err("mask normalization broke the probability invariant".into());
            }
        }
        // One-hot blending is exactly the selected rigid transform.
        let ts = TransformSet::new(vec![
            RigidTransform::new([0.1, 0.2, -0.1], [1.0, -0.5, 0.25]),
            RigidTransform::new([-0.2, 0.1, 0.3], [0.0, 1.0, -1.0]),
        ]);
        let masks = MaskStack::one_hot(1, 1, 2, &[1]).unwrap();
        let x = Point3 { x: 0.5, y: -0.25, z: 2.0 };
        let blended = blend_transform(&masks, &ts, PixelCoord { u: 0.0, v: 0.0 }, &x).unwrap();
        ensure(blended == apply_transform(&ts.0[1], &x), "one-hot blend differs from rigid map")?;
        // Blended 50/50 distinct motions change a pairwise distance.
        let ts = TransformSet::new(vec![
            RigidTransform::identity(),
            RigidTransform::new([0.0, 0.0, std::f64::consts::PI / 2.0], [0.0; 3]),
        ]);
        let even = MaskStack::validated(1, 1, 2, vec![0.5, 0.5]).unwrap();
        let a = Point3 { x: 1.0, y: 0.0, z: 0.0 };
        let b = Point3 { x: 0.0, y: 0.0, z: 0.0 };
        let d = blend_transform(&even, &ts, PixelCoord { u: 0.0, v: 0.0 }, &a)
            .unwrap()
            .dist(&blend_transform(&even, &ts, PixelCoord { u: 0.0, v: 0.0 }, &b).unwrap());
        ensure((d - 1.0).abs() > 0.25, "blended map unexpectedly preserved distances")
    }

    pub fn loss_identities() -> Check {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let img = |seed: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            Image::new(6, 5, 1, (0..30).map(|_| r.gen_range(0.05..0.95)).collect()).unwrap()
        };
        let a = img(1);
        let b = img(2);
        let ab = ssim_map(&a, &b).unwrap();
        let ba = ssim_map(&b, &a).unwrap();
        for (x, y) in ab.iter().zip(&ba) {
            if x.to_bits() != y.to_bits() {
                return Err("ssim is not symmetric".into());
            }
        }
        let aa = ssim_map(&a, &a).unwrap();
        ensure(aa.iter().all(|&v| v == 1.0), "ssim(a, a) != 1")?;

        let depth_data: Vec<f64> = (0..30).map(|_| rng.gen_range(1.0..9.0)).collect();
        let depth = DepthMap::new(6, 5, depth_data.clone()).unwrap();
        let scaled = DepthMap::new(6, 5, depth_data.iter().map(|d| d * 7.3).collect()).unwrap();
        let s1 = smoothness_loss(&depth, &a).unwrap();
        let s2 = smoothness_loss(&scaled, &a).unwrap();
        ensure((s1 - s2).abs() < 1e-10, "smoothness is not scale invariant")?;

        let w1 = Warped::fully_valid(&b);
        let w2 = Warped::fully_valid(&img(3));
        let one = photometric_loss_s(&a, &[&w1], 0.85, None).map_err(|e| e.to_string())?;
        let two = photometric_loss_s(&a, &[&w1, &w2], 0.85, None).map_err(|e| e.to_string())?;
        for (x, y) in one.loss.iter().zip(&two.loss) {
            if *y > *x + 1e-15 {
                return Err("adding a source increased the photometric minimum".into());
            }
        }

        let dm = DepthMap::new(6, 5, depth_data).unwrap();
        let validity = ValidityMask::new(6, 5, vec![Validity::Valid; 30]);
        let breakdown = total_loss(&a, &[(b, validity)], &dm, None, &crate::losses::LossConfig::default())
            .map_err(|e| e.to_string())?;
        let recomposed = breakdown.photometric + breakdown.smoothness * 0.001 + breakdown.mask_smoothness * 0.0;
        ensure(breakdown.total.to_bits() == recomposed.to_bits(), "loss breakdown does not recompose")
    }

    pub fn metric_identities() -> Check {
        let gt = DepthMap::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let m = depth_metrics(&gt, &gt, None, false).map_err(|e| e.to_string())?;
        ensure(
            m.abs_rel == 0.0 && m.rmse == 0.0 && m.delta1 == 1.0 && m.delta3 == 1.0,
            "identity metrics not zeros/ones",
        )?;
        let pred = DepthMap::new(3, 2, gt.data().iter().map(|v| v * 1.25).collect()).unwrap();
        let strict = depth_metrics(&pred, &gt, None, false).map_err(|e| e.to_string())?;
        ensure(strict.delta1 == 0.0 && strict.delta2 == 1.0, "delta boundary not strict")?;
        let region = RegionMask::new(3, 2, vec![true, false, true, false, true, false]);
        let restricted = depth_metrics(&pred, &gt, Some(&region), false).map_err(|e| e.to_string())?;
        ensure((restricted.abs_rel - 0.25).abs() < 1e-12, "region restriction wrong")
    }

    pub fn formats_roundtrip() -> Check {
        let dir = std::env::temp_dir().join(format!("scenefit-selfcheck-{}", std::process::id()));
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let img = Image::new(4, 3, 3, (0..36).map(|i| (i as f64) / 35.0).collect()).unwrap();
        let p = dir.join("roundtrip.ppm");
        formats::write_ppm(&img, &p).map_err(|e| e.to_string())?;
        let back = formats::read_ppm(&p).map_err(|e| e.to_string())?;
        let p2 = dir.join("roundtrip2.ppm");
        formats::write_ppm(&back, &p2).map_err(|e| e.to_string())?;
        let same = std::fs::read(&p).unwrap() == std::fs::read(&p2).unwrap();
        let depth = DepthMap::new(4, 3, (1..=12).map(|v| v as f64 * 0.5).collect()).unwrap();
        let dp = dir.join("roundtrip.pfm");
        formats::write_pfm_depth(&depth, &dp).map_err(|e| e.to_string())?;
        let dback = formats::read_pfm_depth(&dp).map_err(|e| e.to_string())?;
        let depth_ok = depth
            .data()
            .iter()
            .zip(dback.data())
            .all(|(a, b)| (*a as f32) == (*b as f32));
        let _ = std::fs::remove_dir_all(&dir);
        ensure(same && depth_ok, "image roundtrip failed")
    }

    pub fn fixtures(dir: &Path) -> Check {
        if FIXTURE_CHECKSUMS.is_empty() {
            return Err("no frozen fixture checksums".into());
        }
        for (name, expected) in FIXTURE_CHECKSUMS {
            let scene = load_fixture(dir, name).map_err(|e| format!("fixture {name}: {e}"))?;
            let got = scene.checksum();
            if got != *expected {
                return Err(format!(
                    "fixture {name}: checksum {got:016x} != frozen {expected:016x}"
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_tiny_scene(dir: &Path) -> PathBuf {
        let cfg = crate::scene::SceneConfig {
            width: 24,
            height: 18,
            intrinsics: crate::geometry::CameraIntrinsics::new(22.0, 22.0, 11.5, 8.5).unwrap(),
            background_depth: 10.0,
            ego_to_prev: crate::geometry::RigidTransform::new([0.0, -0.002, 0.0], [0.08, 0.0, 0.02]),
            ego_to_next: crate::geometry::RigidTransform::new([0.0, 0.002, 0.0], [-0.08, 0.0, -0.02]),
            objects: vec![crate::scene::ObjectConfig {
                rect: [7.0, 6.0, 14.0, 12.0],
                depth: 5.0,
                motion: [0.08, 0.0, 0.0],
            }],
            texture_seed: 3,
            texture_style: crate::scene::TextureStyle::SmoothNoise,
            texture_detail: Default::default(),
        };
        let path = dir.join("tiny.scene");
        std::fs::write(&path, formats::write_scene_config(&cfg)).unwrap();
        path
    }

    fn write_spec(dir: &Path, scene: &Path, extra: &str) -> PathBuf {
        let spec = format!(
            "scene = {}\nk = 1,2\nsteps = 6\nseeds = 1\n{extra}",
            scene.file_name().unwrap().to_string_lossy()
        );
        let path = dir.join("exp.espec");
        std::fs::write(&path, spec).unwrap();
        path
    }

    #[test]
    fn spec_requires_nonempty_k() {
        let dir = tempdir().unwrap();
        let scene = write_tiny_scene(dir.path());
        let path = dir.path().join("bad.espec");
        std::fs::write(
            &path,
            format!("scene = {}\nk = \nsteps = 5\n", scene.file_name().unwrap().to_string_lossy()),
        )
        .unwrap();
        assert!(load_spec(&path).is_err());
    }

    #[test]
    fn dry_run_touches_nothing() {
        let dir = tempdir().unwrap();
        let scene = write_tiny_scene(dir.path());
        let spec_path = write_spec(dir.path(), &scene, "");
        let spec = load_spec(&spec_path).unwrap();
        let out = dir.path().join("out");
        let report = run(&spec, &spec_path, &out, 1, true).unwrap();
        assert!(report.dry_run);
        assert_eq!(report.cells.len(), 2);
        assert!(report.cells.iter().all(|c| c.status == "planned"));
        assert!(!out.exists());
    }

    #[test]
    fn run_writes_cells_and_summary() {
        let dir = tempdir().unwrap();
        let scene = write_tiny_scene(dir.path());
        let spec_path = write_spec(dir.path(), &scene, "");
        let spec = load_spec(&spec_path).unwrap();
        let out = dir.path().join("out");
        let report = run(&spec, &spec_path, &out, 1, false).unwrap();
        assert_eq!(report.failures(), 0);
        assert!(out.join("summary.csv").exists());
        assert!(out.join("summary.json").exists());
        assert!(out.join("run_meta.json").exists());
        assert!(out.join("spec.espec").exists());
        let cell_dir = out.join(report.cells[0].id.dir_name());
        for artifact in [
            "steps.jsonl",
            "depth.pfm",
            "masks.pgm",
            "masks_composite.ppm",
            "poses.txt",
            "metrics.json",
            "metrics.csv",
        ] {
            assert!(cell_dir.join(artifact).exists(), "missing {artifact}");
        }
        // render-masks consumes a fit directory.
        let composite = dir.path().join("composite.ppm");
        render_masks(&cell_dir, &composite).unwrap();
        assert!(composite.exists());
    }

    #[test]
    fn fixtures_generate_and_match_frozen_checksums() {
        let dir = default_fixture_dir();
        for (name, expected) in FIXTURE_CHECKSUMS {
            let scene = load_fixture(&dir, name).unwrap_or_else(|e| panic!("fixture {name}: {e}"));
            assert_eq!(
                scene.checksum(),
                *expected,
                "fixture {name} drifted from its frozen checksum"
            );
        }
    }

    /// Prints the current fixture digests; run after an intentional generator
    /// change and paste the output into `FIXTURE_CHECKSUMS`.
    #[test]
    #[ignore]
    fn print_fixture_checksums() {
        let dir = default_fixture_dir();
        for (name, _) in FIXTURE_CHECKSUMS {
            match load_fixture(&dir, name) {
                Ok(scene) => println!("    (\"{name}\", 0x{:016x}),", scene.checksum()),
                Err(e) => println!("    // {name}: ERROR {e}"),
            }
        }
    }

    #[test]
    fn runs_are_byte_identical() {
        let dir = tempdir().unwrap();
        let scene = write_tiny_scene(dir.path());
        let spec_path = write_spec(dir.path(), &scene, "");
        let spec = load_spec(&spec_path).unwrap();
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        run(&spec, &spec_path, &out_a, 1, false).unwrap();
        run(&spec, &spec_path, &out_b, 2, false).unwrap();
        for file in ["summary.csv", "summary.json"] {
            let a = std::fs::read(out_a.join(file)).unwrap();
            let b = std::fs::read(out_b.join(file)).unwrap();
            assert_eq!(a, b, "{file} differs between runs");
        }
    }
}
