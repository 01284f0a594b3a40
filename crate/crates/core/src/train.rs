//! Coarse-to-fine training of the head field and training of the torso
//! field.
//!
//! Randomness (ray picks, stratification jitter, occupancy jitter) is drawn
//! on the calling thread in a fixed order. Ray batches are split into
//! [`GRAD_CHUNKS`] fixed chunks whose gradients land in separate buffers and
//! are summed in chunk order, so results are independent of the worker
//! count.

use std::io::Write;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::{masked_mse, psnr};
use crate::fieldrepr::{OccupancyGrid, DEFAULT_OCCUPANCY_THRESHOLD};
use crate::geom::{normalize_to_unit_cube, ray_for_pixel, CameraIntrinsics, FrameBuffer, HeadPose};
use crate::nets::{
    FrameCondition, GateOverride, HeadBatch, HeadField, HeadFieldConfig, HeadTape, TorsoBatch, TorsoField,
    TorsoFieldConfig,
};
use crate::optim::{GroupRates, OptimizerState};
use crate::params::Parameters;
use crate::perceptual::{fine_loss_grad, PerceptualMetric};
use crate::render::{
    composite, composite_backward, render_frame, render_torso, sample_positions, torso_pixel, Composite,
    ConditionedHead, RaySamples, RenderOptions, WHITE,
};
use crate::scene::{Dataset, Frame, Region};

pub const GRAD_CHUNKS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Fine,
    Torso,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Coarse => "coarse",
            Stage::Fine => "fine",
            Stage::Torso => "torso",
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iter: usize,
    pub stage: Stage,
    pub loss: f64,
    pub psnr_val: Option<f64>,
    /// Milliseconds since the start of the run; `None` in deterministic mode.
    pub wall_ms: Option<f64>,
}

pub fn write_log(log: &[MetricRecord], mut w: impl Write) -> std::io::Result<()> {
    for r in log {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median loss of the last tenth of a stage below that of the first tenth.
/// `None` if the stage has fewer than 10 records.
pub fn loss_trend_ok(log: &[MetricRecord], stage: Stage) -> Option<bool> {
    let losses: Vec<f64> = log.iter().filter(|r| r.stage == stage).map(|r| r.loss).collect();
    let k = losses.len() / 10;
    if k == 0 {
        return None;
    }
    Some(median(losses[losses.len() - k..].to_vec()) < median(losses[..k].to_vec()))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    /// Drop wall-clock times from the log.
    pub deterministic: bool,
}

pub fn head_config(cfg: &TrainConfig) -> HeadFieldConfig {
    HeadFieldConfig {
        detach_attention: cfg.detach_attention,
        ..HeadFieldConfig::with_budget(cfg.backbone, cfg.attention, cfg.table_size_log2)
    }
}

pub fn rates(cfg: &TrainConfig) -> GroupRates {
    GroupRates {
        grid: cfg.lr_grid,
        network: cfg.lr_mlp,
    }
}

/// Samples of one training ray in normalized coordinates.
struct RayJob {
    pairs: Vec<(f64, f64)>,
    points: Vec<[f64; 3]>,
    dir: [f64; 3],
    cond: u32,
}

fn ray_job(
    cam: &CameraIntrinsics,
    view: &HeadPose,
    px: (f64, f64),
    ds: &Dataset,
    samples: usize,
    occupancy: &OccupancyGrid,
    cond: u32,
    rng: &mut ChaCha8Rng,
) -> RayJob {
    match ray_for_pixel(cam, view, px, &ds.aabb) {
        Some(ray) => {
            let pairs = sample_positions(&ray, samples, Some(occupancy), Some(rng));
            let points = pairs
                .iter()
                .map(|&(t, _)| {
                    let u = normalize_to_unit_cube(&ray.at(t), &ds.aabb).coords;
                    [u.x, u.y, u.z]
                })
                .collect();
            RayJob {
                pairs,
                points,
                dir: [ray.dir.x, ray.dir.y, ray.dir.z],
                cond,
            }
        }
        None => RayJob {
            pairs: Vec::new(),
            points: Vec::new(),
            dir: [0.0, 0.0, 1.0],
            cond,
        },
    }
}

/// Forward state of one chunk of rays.
struct ChunkForward {
    batch: HeadBatch,
    tape: Option<HeadTape>,
    samples: Vec<RaySamples>,
    composites: Vec<Composite>,
}

fn forward_chunk(field: &HeadField, rays: &[RayJob], conditions: &[FrameCondition]) -> Result<ChunkForward> {
    let mut batch = HeadBatch {
        conditions: conditions.to_vec(),
        ..Default::default()
    };
    for r in rays {
        for p in &r.points {
            batch.push(*p, r.dir, r.cond);
        }
    }
    let tape = if batch.is_empty() {
        None
    } else {
        Some(field.forward(&batch, GateOverride::None)?)
    };
    let mut samples = Vec::with_capacity(rays.len());
    let mut composites = Vec::with_capacity(rays.len());
    let mut off = 0;
    for r in rays {
        let mut s = RaySamples::from_pairs(&r.pairs);
        if let Some(t) = &tape {
            for i in 0..s.len() {
                s.rgb[i] = t.rgb(off + i);
                s.sigma[i] = t.sigma[off + i];
            }
        }
        off += s.len();
        composites.push(composite(&s, WHITE)?);
        samples.push(s);
    }
    Ok(ChunkForward {
        batch,
        tape,
        samples,
        composites,
    })
}

fn backward_chunk(field: &HeadField, fwd: &ChunkForward, upstream: &[[f64; 3]], grads: &mut HeadField) {
    let Some(tape) = &fwd.tape else { return };
    let n = fwd.batch.len();
    let mut d_rgb = Array2::zeros((n, 3));
    let mut d_sigma = vec![0.0; n];
    let mut off = 0;
    for ((s, c), up) in fwd.samples.iter().zip(&fwd.composites).zip(upstream) {
        let g = composite_backward(s, WHITE, c, *up);
        for i in 0..s.len() {
            for k in 0..3 {
                d_rgb[(off + i, k)] = g.d_rgb[i][k];
            }
            d_sigma[off + i] = g.d_sigma[i];
        }
        off += s.len();
    }
    field.backward(&fwd.batch, tape, &d_rgb, &d_sigma, grads);
}

fn training_error(stage: Stage, iteration: usize, e: Error) -> Error {
    match e {
        Error::Training { .. } => e,
        e => Error::Training {
            stage: stage.name(),
            iteration,
            reason: e.to_string(),
        },
    }
}

/// Head-field optimizer state shared by both stages.
struct HeadTrainer<'a> {
    ds: &'a Dataset,
    cfg: &'a TrainConfig,
    train: Vec<&'a Frame>,
    conditions: Vec<FrameCondition>,
    views: Vec<HeadPose>,
    foreground: Vec<Vec<u32>>,
    field: HeadField,
    occupancy: OccupancyGrid,
    opt: OptimizerState,
    grads: Vec<HeadField>,
    rng: ChaCha8Rng,
}

/// Pixels that differ from the white background.
fn foreground_pixels(fb: &FrameBuffer) -> Vec<u32> {
    (0..fb.pixels() as u32)
        .filter(|&i| fb.rgb[i as usize].iter().any(|&v| v < 0.99))
        .collect()
}

impl<'a> HeadTrainer<'a> {
    fn new(ds: &'a Dataset, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let train: Vec<&Frame> = ds.train_frames().collect();
        if train.is_empty() {
            return Err(Error::Dataset("no training frames".into()));
        }
        let field = HeadField::new(&head_config(cfg), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let occupancy = OccupancyGrid::new(cfg.occupancy_resolution, DEFAULT_OCCUPANCY_THRESHOLD, ds.aabb)?;
        let opt = OptimizerState::new(cfg.adam, field.param_count());
        let grads = (0..GRAD_CHUNKS).map(|_| field.zeros_like()).collect();
        Ok(HeadTrainer {
            ds,
            cfg,
            conditions: train.iter().map(|f| f.condition).collect(),
            views: train.iter().map(|f| f.view()).collect(),
            foreground: train.iter().map(|f| foreground_pixels(&f.head_image)).collect(),
            train,
            field,
            occupancy,
            opt,
            grads,
            rng,
        })
    }

    fn refresh_occupancy(&mut self, iteration: usize) -> Result<()> {
        let cond = self.conditions[(iteration / self.cfg.occupancy_refresh) % self.conditions.len()];
        let field = &self.field;
        let mut failure = None;
        self.occupancy.update(Some(&mut self.rng), |points| {
            let parts = crate::parallel::map_chunks(points, points.len().div_ceil(GRAD_CHUNKS).max(1), |_, pts| {
                let mut batch = HeadBatch {
                    conditions: vec![cond],
                    ..Default::default()
                };
                for p in pts {
                    batch.push(*p, [0.0, 0.0, 1.0], 0);
                }
                field.density(&batch)
            });
            let mut out = Vec::with_capacity(points.len());
            for p in parts {
                match p {
                    Ok(v) => out.extend(v),
                    Err(e) => {
                        failure.get_or_insert(e);
                        out.resize(points.len(), 0.0);
                        break;
                    }
                }
            }
            out.resize(points.len(), 0.0);
            out
        });
        failure.map_or(Ok(()), Err)
    }

    fn job(&mut self, frame: usize, px: (f64, f64)) -> RayJob {
        ray_job(
            &self.ds.intrinsics,
            &self.views[frame],
            px,
            self.ds,
            self.cfg.samples_per_ray,
            &self.occupancy,
            frame as u32,
            &mut self.rng,
        )
    }

    fn forward(&self, rays: &[RayJob]) -> Result<Vec<ChunkForward>> {
        let ranges = crate::parallel::fixed_ranges(rays.len(), GRAD_CHUNKS);
        ranges
            .into_par_iter()
            .map(|r| forward_chunk(&self.field, &rays[r], &self.conditions))
            .collect()
    }

    /// Backward through every chunk, then one optimizer step.
    fn step(&mut self, chunks: &[ChunkForward], upstream: &[[f64; 3]]) {
        let mut offsets = Vec::with_capacity(chunks.len());
        let mut off = 0;
        for c in chunks {
            offsets.push(off);
            off += c.samples.len();
        }
        let field = &self.field;
        self.grads
            .par_iter_mut()
            .zip(chunks.par_iter().zip(offsets))
            .for_each(|(g, (c, off))| {
                g.fill(0.0);
                backward_chunk(field, c, &upstream[off..off + c.samples.len()], g);
            });
        for g in &mut self.grads[chunks.len()..] {
            g.fill(0.0);
        }
        let (first, rest) = self.grads.split_first_mut().expect("chunk buffers");
        for g in rest.iter() {
            first.accumulate(g);
        }
        let rates = rates(self.cfg);
        if !self.opt.step(&mut self.field, &self.grads[0], rates) {
            log::warn!("non-finite gradient; step skipped ({} so far)", self.opt.skipped);
        }
    }

    fn coarse_iteration(&mut self) -> Result<f64> {
        let cam = self.ds.intrinsics;
        let n = self.cfg.rays_per_batch;
        let mut rays = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for _ in 0..n {
            let f = self.rng.random_range(0..self.train.len());
            let col = self.rng.random_range(0..cam.width);
            let row = self.rng.random_range(0..cam.height);
            targets.push(self.train[f].head_image.get(col, row));
            rays.push(self.job(f, cam.pixel_center(col, row)));
        }
        let chunks = self.forward(&rays)?;
        let mut loss = 0.0;
        let mut upstream = Vec::with_capacity(n);
        for (c, t) in chunks.iter().flat_map(|c| &c.composites).zip(&targets) {
            let d: [f64; 3] = std::array::from_fn(|k| c.color[k] - t[k]);
            loss += d.iter().map(|v| v * v).sum::<f64>();
            upstream.push(d.map(|v| 2.0 * v / n as f64));
        }
        let loss = loss / n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite { stage: "coarse loss" });
        }
        self.step(&chunks, &upstream);
        Ok(loss)
    }

    fn fine_iteration(&mut self, metric: &PerceptualMetric) -> Result<f64> {
        let cam = self.ds.intrinsics;
        let p = self.cfg.patch_size.min(cam.width).min(cam.height);
        let mut rays = Vec::new();
        let mut patches = Vec::new();
        for _ in 0..self.cfg.patches_per_batch {
            let f = self.rng.random_range(0..self.train.len());
            let center = match self.foreground[f].len() {
                0 => self.rng.random_range(0..cam.width * cam.height),
                k => self.foreground[f][self.rng.random_range(0..k)],
            };
            let (cx, cy) = (center % cam.width, center / cam.width);
            let x0 = cx.saturating_sub(p / 2).min(cam.width - p);
            let y0 = cy.saturating_sub(p / 2).min(cam.height - p);
            let mut target = FrameBuffer::new(p, p, WHITE);
            for y in 0..p {
                for x in 0..p {
                    target.set(x, y, self.train[f].head_image.get(x0 + x, y0 + y));
                    rays.push(self.job(f, cam.pixel_center(x0 + x, y0 + y)));
                }
            }
            patches.push(target);
        }
        let chunks = self.forward(&rays)?;
        let colors: Vec<[f64; 3]> = chunks.iter().flat_map(|c| &c.composites).map(|c| c.color).collect();
        let total_px = colors.len() as f64;
        let per = (p * p) as usize;
        let mut loss = 0.0;
        let mut upstream = Vec::with_capacity(colors.len());
        for (target, pred) in patches.iter().zip(colors.chunks(per)) {
            let pred = FrameBuffer {
                width: p,
                height: p,
                rgb: pred.to_vec(),
            };
            let (l, g) = fine_loss_grad(&pred, target, self.cfg.lambda, metric)?;
            loss += l;
            upstream.extend(g.into_iter().map(|v| v.map(|x| x / total_px)));
        }
        let loss = loss / total_px;
        if !loss.is_finite() {
            return Err(Error::NonFinite { stage: "fine loss" });
        }
        self.step(&chunks, &upstream);
        Ok(loss)
    }
}

/// Validation scores of a head field against the head-only images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadScores {
    pub psnr: f64,
    /// MSE over pixels inside the projected mouth region.
    pub mouth_mse: f64,
}

/// Mean PSNR and mouth-region MSE over the validation frames (at most
/// `limit` of them; 0 means all).
pub fn head_scores(field: &HeadField, occupancy: Option<&OccupancyGrid>, ds: &Dataset, samples: usize, limit: usize) -> Result<HeadScores> {
    let frames: Vec<&Frame> = ds.val_frames().take(if limit == 0 { usize::MAX } else { limit }).collect();
    if frames.is_empty() {
        return Err(Error::Dataset("no validation frames".into()));
    }
    let mut opts = RenderOptions::new(ds.aabb);
    opts.samples = samples;
    opts.occupancy = occupancy;
    let (mut total, mut mouth, mut mouth_frames) = (0.0, 0.0, 0);
    for f in &frames {
        let head = ConditionedHead {
            field,
            condition: f.condition,
            gates: GateOverride::None,
        };
        let view = f.view();
        let img = render_frame(&head, &ds.intrinsics, &view, &opts)?;
        total += psnr(&img, &f.head_image)?;
        let mask = ds.scene.projected_region_mask(&ds.intrinsics, &view, Region::Mouth, 0);
        if let Some(m) = masked_mse(&img, &f.head_image, &mask)? {
            mouth += m;
            mouth_frames += 1;
        }
    }
    Ok(HeadScores {
        psnr: total / frames.len() as f64,
        mouth_mse: if mouth_frames == 0 { 0.0 } else { mouth / mouth_frames as f64 },
    })
}

/// Mean validation PSNR, see [`head_scores`].
pub fn validate_head(field: &HeadField, occupancy: Option<&OccupancyGrid>, ds: &Dataset, samples: usize, limit: usize) -> Result<f64> {
    Ok(head_scores(field, occupancy, ds, samples, limit)?.psnr)
}

#[derive(Clone, Debug)]
pub struct HeadTrainResult {
    pub field: HeadField,
    pub occupancy: OccupancyGrid,
    pub log: Vec<MetricRecord>,
    pub skipped_steps: u64,
}

impl HeadTrainResult {
    pub fn checkpoint(&self, ds: &Dataset) -> Checkpoint {
        Checkpoint {
            aabb: ds.aabb,
            head: Some(self.field.clone()),
            occupancy: Some(self.occupancy.clone()),
            torso: None,
        }
    }

    pub fn final_psnr(&self) -> Option<f64> {
        self.log.iter().rev().find_map(|r| r.psnr_val)
    }
}

/// Pixel-loss stage followed by the patch stage.
pub fn train_head(ds: &Dataset, cfg: &TrainConfig, opts: TrainOptions) -> Result<HeadTrainResult> {
    let start = Instant::now();
    let mut tr = HeadTrainer::new(ds, cfg)?;
    let metric = PerceptualMetric::default();
    let mut log = Vec::with_capacity(cfg.coarse_iters + cfg.fine_iters);
    let total = cfg.coarse_iters + cfg.fine_iters;
    for iter in 0..total {
        let stage = if iter < cfg.coarse_iters { Stage::Coarse } else { Stage::Fine };
        if iter % cfg.occupancy_refresh == 0 {
            tr.refresh_occupancy(iter).map_err(|e| training_error(stage, iter, e))?;
        }
        let loss = match stage {
            Stage::Coarse => tr.coarse_iteration(),
            _ => tr.fine_iteration(&metric),
        }
        .map_err(|e| training_error(stage, iter, e))?;
        let stage_end = iter + 1 == cfg.coarse_iters || iter + 1 == total;
        let psnr_val = if (iter + 1) % cfg.val_every == 0 || stage_end {
            let p = validate_head(&tr.field, Some(&tr.occupancy), ds, cfg.samples_per_ray, cfg.val_frames)
                .map_err(|e| training_error(stage, iter, e))?;
            log::info!("{} iteration {}: loss {loss:.5}, validation PSNR {p:.2} dB", stage.name(), iter + 1);
            Some(p)
        } else {
            None
        };
        log.push(MetricRecord {
            iter,
            stage,
            loss,
            psnr_val,
            wall_ms: (!opts.deterministic).then(|| start.elapsed().as_secs_f64() * 1e3),
        });
    }
    tr.refresh_occupancy(total).map_err(|e| training_error(Stage::Fine, total, e))?;
    Ok(HeadTrainResult {
        skipped_steps: tr.opt.skipped,
        field: tr.field,
        occupancy: tr.occupancy,
        log,
    })
}

#[derive(Clone, Debug)]
pub struct TorsoTrainResult {
    pub field: TorsoField,
    pub log: Vec<MetricRecord>,
    /// Frames dropped at least once because a key point reached zero depth.
    pub degenerate_frames: Vec<usize>,
    pub skipped_steps: u64,
}

/// Head layer behind the torso: rendered from a trained head field when one
/// is given, otherwise the dataset's head-only images.
pub fn head_backgrounds(ds: &Dataset, head: Option<(&HeadField, Option<&OccupancyGrid>)>, samples: usize) -> Result<Vec<FrameBuffer>> {
    ds.frames
        .iter()
        .map(|f| match head {
            Some((field, occ)) => {
                let mut opts = RenderOptions::new(ds.aabb);
                opts.samples = samples;
                opts.occupancy = occ;
                let h = ConditionedHead {
                    field,
                    condition: f.condition,
                    gates: GateOverride::None,
                };
                render_frame(&h, &ds.intrinsics, &f.view(), &opts)
            }
            None => Ok(f.head_image.clone()),
        })
        .collect()
}

/// Mean PSNR of torso-over-head composites against the full validation
/// frames.
pub fn validate_torso(torso: &TorsoField, ds: &Dataset, backgrounds: &[FrameBuffer], limit: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for (f, bg) in ds.frames.iter().zip(backgrounds) {
        if f.split != crate::scene::Split::Val || (limit > 0 && n == limit) {
            continue;
        }
        let (img, _) = render_torso(torso, &ds.intrinsics, &f.view(), bg)?;
        total += psnr(&img, &f.image)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Dataset("no validation frames".into()));
    }
    Ok(total / n as f64)
}

/// Trains the torso field on full frames, composited over `backgrounds`
/// (one per dataset frame, see [`head_backgrounds`]).
pub fn train_torso(ds: &Dataset, backgrounds: &[FrameBuffer], cfg: &TrainConfig, opts: TrainOptions) -> Result<TorsoTrainResult> {
    cfg.validate()?;
    if backgrounds.len() != ds.frames.len() {
        return Err(Error::Dimension {
            context: "torso backgrounds".into(),
            expected: ds.frames.len(),
            actual: backgrounds.len(),
        });
    }
    let start = Instant::now();
    let train: Vec<usize> = (0..ds.frames.len()).filter(|&i| ds.frames[i].split == crate::scene::Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Dataset("no training frames".into()));
    }
    let views: Vec<HeadPose> = train.iter().map(|&i| ds.frames[i].view()).collect();
    let mut field = TorsoField::new(&TorsoFieldConfig::default(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut opt = OptimizerState::new(cfg.adam, field.param_count());
    let mut grads = field.zeros_like();
    let mut degenerate = vec![false; train.len()];
    let mut log = Vec::with_capacity(cfg.torso_iters);
    let cam = ds.intrinsics;
    let n = cfg.rays_per_batch;
    for iter in 0..cfg.torso_iters {
        let fail = |e: Error| training_error(Stage::Torso, iter, e);
        // Pose codes of this step; frames whose keys degenerate are dropped.
        let mut pose_slot = vec![None; train.len()];
        let mut batch = TorsoBatch::default();
        let mut picks = Vec::with_capacity(n);
        for _ in 0..n {
            let k = rng.random_range(0..train.len());
            let col = rng.random_range(0..cam.width);
            let row = rng.random_range(0..cam.height);
            picks.push((k, col, row));
        }
        let mut codes = Vec::new();
        for &(k, col, row) in &picks {
            if pose_slot[k].is_none() {
                match crate::nets::pose::adaptive_pose_encoding(&field.keys, &views[k]) {
                    Ok(c) => {
                        pose_slot[k] = Some(Some(batch.poses.len() as u32));
                        batch.poses.push(views[k]);
                        codes.push(c);
                    }
                    Err(e @ Error::DegeneratePose { .. }) => {
                        if !degenerate[k] {
                            log::warn!("frame {}: {e}; skipped", ds.frames[train[k]].index);
                            degenerate[k] = true;
                        }
                        pose_slot[k] = Some(None);
                    }
                    Err(e) => return Err(fail(e)),
                }
            }
            if let Some(Some(slot)) = pose_slot[k] {
                batch.pixels.push(torso_pixel(&cam, col, row));
                batch.cond.push(slot);
            }
        }
        let mut loss = 0.0;
        if !batch.is_empty() {
            let tape = field.forward_with_codes(&batch, codes).map_err(fail)?;
            let m = batch.len();
            let mut d_out = Array2::zeros((m, 4));
            let mut i = 0;
            for &(k, col, row) in &picks {
                if !matches!(pose_slot[k], Some(Some(_))) {
                    continue;
                }
                let frame = train[k];
                let (c, a) = tape.output(i);
                let h = backgrounds[frame].get(col, row);
                let t = ds.frames[frame].image.get(col, row);
                let mut d_alpha = 0.0;
                for ch in 0..3 {
                    let pred = a * c[ch] + (1.0 - a) * h[ch];
                    let d = pred - t[ch];
                    loss += d * d;
                    let g = 2.0 * d / m as f64;
                    d_out[(i, ch)] = g * a;
                    d_alpha += g * (c[ch] - h[ch]);
                }
                d_out[(i, 3)] = d_alpha;
                i += 1;
            }
            loss /= m as f64;
            if !loss.is_finite() {
                return Err(fail(Error::NonFinite { stage: "torso loss" }));
            }
            grads.fill(0.0);
            field.backward(&batch, &tape, &d_out, &mut grads);
            if !opt.step(&mut field, &grads, rates(cfg)) {
                log::warn!("non-finite torso gradient; step skipped");
            }
        }
        let psnr_val = if (iter + 1) % cfg.val_every == 0 || iter + 1 == cfg.torso_iters {
            let p = validate_torso(&field, ds, backgrounds, cfg.val_frames).map_err(fail)?;
            log::info!("torso iteration {}: loss {loss:.5}, validation PSNR {p:.2} dB", iter + 1);
            Some(p)
        } else {
            None
        };
        log.push(MetricRecord {
            iter,
            stage: Stage::Torso,
            loss,
            psnr_val,
            wall_ms: (!opts.deterministic).then(|| start.elapsed().as_secs_f64() * 1e3),
        });
    }
    Ok(TorsoTrainResult {
        field,
        log,
        degenerate_frames: train
            .iter()
            .zip(&degenerate)
            .filter(|(_, &d)| d)
            .map(|(&i, _)| ds.frames[i].index)
            .collect(),
        skipped_steps: opt.skipped,
    })
}
