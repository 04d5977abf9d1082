//! Synthetic scenes with planted descriptors, plus brute-force oracles.
//!
//! Every generator draws from ChaCha8 streams addressed by `(seed, stream,
//! index)`, so output is fixed by the seed and independent of the number of
//! worker threads.

use nalgebra::{Rotation3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{bearing, project, Intrinsics, Landmark, PixelPoint, Pose};
use crate::matching::{grid_to_image, CorrelationMap};
use crate::pipeline::{QueryInput, ReferenceEntry};
use crate::pose::Correspondence2D3D;
use crate::retrieval::GlobalDescriptor;
use crate::tensor::{
    nearest_cell, normalize_in_place, rescale_coord, sample_sparse, FeatureGrid, SampleMode, SparseDescriptor,
};

/// Landmarks a camera must see for the scene to be accepted.
pub const MIN_VISIBLE: usize = 20;
/// Pose resamples per camera before giving up.
pub const MAX_ATTEMPTS: usize = 1000;
/// Minimum camera-frame depth for a landmark to count as visible, meters.
const MIN_VISIBLE_DEPTH: f64 = 0.1;

const STREAM_LANDMARKS: u64 = 1;
const STREAM_CAMERAS: u64 = 2;
const STREAM_DESCRIPTORS: u64 = 3;
const STREAM_CELLS: u64 = 4;
const STREAM_PLANTS: u64 = 5;
const STREAM_DROP: u64 = 6;
const STREAM_RANDOM_GRID: u64 = 7;
const STREAM_RANDOM_DESC: u64 = 8;
const STREAM_PNP: u64 = 9;

/// Generator seeded at `(seed, stream)` and positioned at sub-sequence
/// `index`; sub-sequences are 2³⁶ words apart.
pub(crate) fn substream(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((index as u128) << 36);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub image_dims: (u32, u32),
}

impl Camera {
    /// Pixel of `landmark` if it lies in front of the camera and inside the
    /// image, with its depth.
    pub fn observe(&self, landmark: &Landmark) -> Option<(PixelPoint, f64)> {
        let depth = self.pose.transform(&landmark.position).z;
        if depth < MIN_VISIBLE_DEPTH {
            return None;
        }
        let px = project(&self.pose, &self.intrinsics, landmark).ok()?;
        let (w, h) = self.image_dims;
        let inside = px.x >= 0.0 && px.y >= 0.0 && px.x < w as f64 && px.y < h as f64;
        inside.then_some((px, depth))
    }

    pub fn visible_count(&self, landmarks: &[Landmark]) -> usize {
        landmarks.iter().filter(|l| self.observe(l).is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub num_landmarks: usize,
    pub num_refs: usize,
    pub num_queries: usize,
    /// Box dimensions in meters, centered on the origin; z is up.
    pub extent: [f64; 3],
    pub image_dims: (u32, u32),
    pub focal_px: f64,
    /// Ring radius as a multiple of the larger horizontal box side.
    pub ring_scale: f64,
    pub min_visible: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            num_landmarks: 200,
            num_refs: 20,
            num_queries: 10,
            extent: [10.0, 10.0, 10.0],
            image_dims: (512, 512),
            focal_px: 400.0,
            ring_scale: 0.45,
            min_visible: MIN_VISIBLE,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_landmarks == 0 || self.num_refs == 0 || self.num_queries == 0 {
            return Err(Error::InvalidSceneParams("counts must be at least 1".into()));
        }
        if !self.extent.iter().all(|e| e.is_finite() && *e > 0.0) {
            return Err(Error::InvalidSceneParams(format!(
                "extent must be positive, got {:?}",
                self.extent
            )));
        }
        if self.image_dims.0 == 0 || self.image_dims.1 == 0 {
            return Err(Error::InvalidSceneParams("image dimensions must be positive".into()));
        }
        if !(self.focal_px > 0.0 && self.ring_scale > 0.0) {
            return Err(Error::InvalidSceneParams(
                "focal length and ring scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub landmarks: Vec<Landmark>,
    pub references: Vec<Camera>,
    pub queries: Vec<Camera>,
}

/// Scene with default camera settings and the given counts and box size.
pub fn gen_scene(
    seed: u64,
    num_landmarks: usize,
    num_refs: usize,
    num_queries: usize,
    extent: [f64; 3],
) -> Result<SyntheticScene> {
    gen_scene_with(
        seed,
        &SceneParams {
            num_landmarks,
            num_refs,
            num_queries,
            extent,
            ..SceneParams::default()
        },
    )
}

pub fn gen_scene_with(seed: u64, params: &SceneParams) -> Result<SyntheticScene> {
    params.validate()?;
    let [ex, ey, ez] = params.extent;
    let mut rng = substream(seed, STREAM_LANDMARKS, 0);
    let landmarks: Vec<Landmark> = (0..params.num_landmarks)
        .map(|_| {
            Landmark::new(
                (rng.random::<f64>() - 0.5) * ex,
                (rng.random::<f64>() - 0.5) * ey,
                (rng.random::<f64>() - 0.5) * ez,
            )
        })
        .collect();

    let (w, h) = params.image_dims;
    let intrinsics = Intrinsics::new(
        params.focal_px,
        params.focal_px,
        (w as f64 - 1.0) / 2.0,
        (h as f64 - 1.0) / 2.0,
    )?;
    let radius = params.ring_scale * ex.max(ey);

    let ring = |kind: u64, count: usize, phase: f64| -> Result<Vec<Camera>> {
        (0..count)
            .map(|i| {
                let mut rng = substream(seed, STREAM_CAMERAS, (kind << 24) | i as u64);
                for _ in 0..MAX_ATTEMPTS {
                    let slot = i as f64 + phase + rng.random_range(-0.35..0.35);
                    let theta = std::f64::consts::TAU * slot / count as f64;
                    let r = radius * rng.random_range(0.9..1.1);
                    let center = Vector3::new(r * theta.cos(), r * theta.sin(), rng.random_range(-0.2..0.2) * ez);
                    let target = Vector3::new(
                        rng.random_range(-0.1..0.1) * ex,
                        rng.random_range(-0.1..0.1) * ey,
                        rng.random_range(-0.1..0.1) * ez,
                    );
                    let Ok(pose) = Pose::look_at(center, target, Vector3::z()) else {
                        continue;
                    };
                    let cam = Camera {
                        intrinsics,
                        pose,
                        image_dims: params.image_dims,
                    };
                    if cam.visible_count(&landmarks) >= params.min_visible {
                        return Ok(cam);
                    }
                }
                Err(Error::UnsatisfiableVisibility { attempts: MAX_ATTEMPTS })
            })
            .collect()
    };
    let references = ring(0, params.num_refs, 0.0)?;
    let queries = ring(1, params.num_queries, 0.5)?;
    Ok(SyntheticScene {
        seed,
        landmarks,
        references,
        queries,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum BackgroundMode {
    /// Background cells live in channels no planted descriptor uses.
    #[default]
    Orthogonal,
    /// Background cells are random unit vectors over all channels.
    RandomUnit,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NoiseSpec {
    /// Per-channel Gaussian σ, relative to the unit-variance channels of the
    /// raw landmark descriptor (before normalization).
    pub descriptor_noise_sigma: f64,
    /// Probability that a query keypoint's planted cell is moved to a
    /// uniformly random cell.
    pub outlier_fraction: f64,
    pub background_mode: BackgroundMode,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.descriptor_noise_sigma >= 0.0 && self.descriptor_noise_sigma.is_finite()) {
            return Err(Error::InvalidSceneParams(format!(
                "noise sigma must be non-negative, got {}",
                self.descriptor_noise_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(Error::InvalidSceneParams(format!(
                "outlier fraction must lie in [0, 1], got {}",
                self.outlier_fraction
            )));
        }
        Ok(())
    }
}

/// Everything generated for one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraTensors {
    pub camera: Camera,
    pub grid: FeatureGrid,
    /// Observed keypoints in image coordinates, one per planted landmark.
    pub keypoints: Vec<PixelPoint>,
    /// Sparse descriptors read from `grid` at `keypoints`.
    pub descriptors: Vec<SparseDescriptor>,
    pub landmarks: Vec<Landmark>,
    /// Scene landmark index for each keypoint.
    pub landmark_ids: Vec<usize>,
    /// Whether each keypoint's planted cell was moved away from its projection.
    pub displaced: Vec<bool>,
    pub global: GlobalDescriptor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTensors {
    pub stride: u32,
    pub channels: usize,
    pub references: Vec<CameraTensors>,
    pub queries: Vec<CameraTensors>,
}

impl SyntheticTensors {
    pub fn reference_entries(&self) -> Vec<ReferenceEntry> {
        self.references
            .iter()
            .enumerate()
            .map(|(i, c)| ReferenceEntry {
                id: reference_id(i),
                global: c.global.clone(),
                intrinsics: c.camera.intrinsics,
                pose: c.camera.pose,
                keypoints: c.keypoints.clone(),
                descriptors: c.descriptors.clone(),
                landmarks: c.landmarks.clone(),
                image_dims: c.camera.image_dims,
            })
            .collect()
    }

    pub fn query_inputs(&self) -> Vec<QueryInput> {
        self.queries
            .iter()
            .enumerate()
            .map(|(i, c)| QueryInput {
                id: query_id(i),
                intrinsics: c.camera.intrinsics,
                dense: c.grid.clone(),
                global: c.global.clone(),
                image_dims: c.camera.image_dims,
            })
            .collect()
    }
}

pub fn reference_id(i: usize) -> String {
    format!("ref_{i:04}")
}

pub fn query_id(i: usize) -> String {
    format!("query_{i:04}")
}

/// Channels reserved for planted landmark descriptors; the rest hold the
/// orthogonal background.
pub fn planted_channels(channels: usize) -> usize {
    channels - (channels / 4).max(1)
}

/// Raw (unnormalized, unit-variance) descriptor of each landmark.
fn landmark_descriptors(seed: u64, count: usize, channels: usize) -> Vec<Vec<f32>> {
    let cp = planted_channels(channels);
    (0..count)
        .map(|j| {
            let mut rng = substream(seed, STREAM_DESCRIPTORS, j as u64);
            let mut v = vec![0.0f32; channels];
            for x in v.iter_mut().take(cp) {
                *x = rng.sample::<f64, _>(StandardNormal) as f32;
            }
            v
        })
        .collect()
}

fn unit(mut v: Vec<f32>) -> Vec<f32> {
    crate::tensor::normalize_in_place(&mut v);
    v
}

/// Dense grids, keypoints and sparse descriptors for every camera.
pub fn gen_feature_tensors(
    scene: &SyntheticScene,
    grid_stride: u32,
    channels: usize,
    noise: &NoiseSpec,
) -> Result<SyntheticTensors> {
    noise.validate()?;
    if channels < 8 {
        return Err(Error::InvalidSceneParams(format!(
            "need at least 8 channels, got {channels}"
        )));
    }
    if grid_stride == 0 {
        return Err(Error::InvalidSceneParams("stride must be positive".into()));
    }
    for cam in scene.references.iter().chain(&scene.queries) {
        let (w, h) = cam.image_dims;
        if w % grid_stride != 0 || h % grid_stride != 0 {
            return Err(Error::InvalidSceneParams(format!(
                "stride {grid_stride} does not divide image size {w}x{h}"
            )));
        }
    }
    let raw = landmark_descriptors(scene.seed, scene.landmarks.len(), channels);
    let clean: Vec<Vec<f32>> = raw.iter().map(|v| unit(v.clone())).collect();
    let nr = scene.references.len();
    let build = |index: usize, cam: &Camera, is_query: bool| {
        camera_tensors(scene, &raw, &clean, index, cam, grid_stride, channels, noise, is_query)
    };
    let references = scene
        .references
        .iter()
        .enumerate()
        .map(|(i, c)| build(i, c, false))
        .collect::<Result<Vec<_>>>()?;
    let queries = scene
        .queries
        .iter()
        .enumerate()
        .map(|(i, c)| build(nr + i, c, true))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticTensors {
        stride: grid_stride,
        channels,
        references,
        queries,
    })
}

#[allow(clippy::too_many_arguments)]
fn camera_tensors(
    scene: &SyntheticScene,
    raw: &[Vec<f32>],
    clean: &[Vec<f32>],
    index: usize,
    cam: &Camera,
    stride: u32,
    channels: usize,
    noise: &NoiseSpec,
    is_query: bool,
) -> Result<CameraTensors> {
    let (iw, ih) = cam.image_dims;
    let (gw, gh) = ((iw / stride) as usize, (ih / stride) as usize);
    let cp = planted_channels(channels);
    let seed = scene.seed;
    let cam_key = (index as u64) << 32;

    let mut data = vec![0.0f32; gw * gh * channels];
    data.par_chunks_mut(gw * channels).enumerate().for_each(|(y, row)| {
        let mut rng = substream(seed, STREAM_CELLS, cam_key | y as u64);
        for cell in row.chunks_mut(channels) {
            let range = match noise.background_mode {
                BackgroundMode::Orthogonal => cp..channels,
                BackgroundMode::RandomUnit => 0..channels,
            };
            for x in &mut cell[range] {
                *x = rng.sample::<f64, _>(StandardNormal) as f32;
            }
            crate::tensor::normalize_in_place(cell);
        }
    });
    let mut grid = FeatureGrid::new(gw, gh, channels, data)?;

    // Visible landmarks, nearest first; a cell keeps the first landmark
    // planted in it.
    let mut seen: Vec<(usize, PixelPoint, f64)> = scene
        .landmarks
        .iter()
        .enumerate()
        .filter_map(|(j, l)| cam.observe(l).map(|(px, d)| (j, px, d)))
        .collect();
    seen.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));

    let mut rng = substream(seed, STREAM_PLANTS, index as u64);
    let mut owner = vec![false; gw * gh];
    let mut planted: Vec<(usize, PixelPoint, bool)> = Vec::with_capacity(seen.len());
    for &(j, px, _) in &seen {
        let gx = rescale_coord(px.x, iw as usize, gw).clamp(0.0, (gw - 1) as f64);
        let gy = rescale_coord(px.y, ih as usize, gh).clamp(0.0, (gh - 1) as f64);
        let (mut cx, mut cy) = nearest_cell(gx, gy, gw, gh);
        let displaced = is_query && noise.outlier_fraction > 0.0 && rng.random::<f64>() < noise.outlier_fraction;
        if displaced {
            cx = rng.random_range(0..gw);
            cy = rng.random_range(0..gh);
        }
        let mut value = raw[j].clone();
        if noise.descriptor_noise_sigma > 0.0 {
            for x in value.iter_mut() {
                *x += (noise.descriptor_noise_sigma * rng.sample::<f64, _>(StandardNormal)) as f32;
            }
        }
        if owner[cy * gw + cx] {
            continue;
        }
        owner[cy * gw + cx] = true;
        grid.cell_mut(cx, cy).copy_from_slice(&unit(value));
        let keypoint = if displaced {
            grid_to_image(cx as f64, cy as f64, (gw, gh), cam.image_dims)
        } else {
            px
        };
        planted.push((j, keypoint, displaced));
    }
    planted.sort_by_key(|p| p.0);

    let keypoints: Vec<PixelPoint> = planted.iter().map(|p| p.1).collect();
    let descriptors = sample_sparse(&grid, &keypoints, cam.image_dims, SampleMode::Nearest)?;

    let mut mean = vec![0.0f64; channels];
    for &(j, _, _) in &seen {
        for (m, v) in mean.iter_mut().zip(&clean[j]) {
            *m += *v as f64;
        }
    }
    let global = GlobalDescriptor::from_raw(mean.into_iter().map(|v| v as f32).collect())?;

    Ok(CameraTensors {
        camera: *cam,
        grid,
        keypoints,
        descriptors,
        landmarks: planted.iter().map(|p| scene.landmarks[p.0]).collect(),
        landmark_ids: planted.iter().map(|p| p.0).collect(),
        displaced: planted.iter().map(|p| p.2).collect(),
        global,
    })
}

fn random_unit(rng: &mut ChaCha8Rng, channels: usize) -> Vec<f32> {
    let mut v: Vec<f32> = (0..channels).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    normalize_in_place(&mut v);
    v
}

/// Grid of independent, uniformly oriented unit cells.
pub fn random_unit_grid(seed: u64, width: usize, height: usize, channels: usize) -> Result<FeatureGrid> {
    let mut data = vec![0.0f32; width * height * channels];
    data.par_chunks_mut(width * channels.max(1))
        .enumerate()
        .for_each(|(y, row)| {
            let mut rng = substream(seed, STREAM_RANDOM_GRID, y as u64);
            for cell in row.chunks_mut(channels) {
                cell.copy_from_slice(&random_unit(&mut rng, channels));
            }
        });
    FeatureGrid::new(width, height, channels, data)
}

/// `count` independent, uniformly oriented unit descriptors.
pub fn random_unit_descriptors(seed: u64, count: usize, channels: usize) -> Vec<SparseDescriptor> {
    (0..count)
        .map(|i| SparseDescriptor {
            values: random_unit(&mut substream(seed, STREAM_RANDOM_DESC, i as u64), channels),
            keypoint: i,
        })
        .collect()
}

/// Correspondences seen from a known pose, some replaced by outliers.
#[derive(Debug, Clone, PartialEq)]
pub struct PnpProblem {
    pub intrinsics: Intrinsics,
    pub image_dims: (u32, u32),
    pub pose: Pose,
    pub correspondences: Vec<Correspondence2D3D>,
    /// `true` where the pixel was redrawn uniformly over the image.
    pub outlier: Vec<bool>,
}

/// Random pose (any rotation, translation in `[-1, 1]³`), landmarks 3–12 m
/// deep behind uniformly drawn pixels of a 512×512 image, Gaussian pixel
/// noise on inliers, and `round(outlier_fraction · count)` outliers.
pub fn gen_pnp_problem(seed: u64, count: usize, outlier_fraction: f64, pixel_noise: f64) -> Result<PnpProblem> {
    if !(0.0..=1.0).contains(&outlier_fraction) || !(pixel_noise >= 0.0) {
        return Err(Error::InvalidSceneParams(format!(
            "outlier_fraction {outlier_fraction} and pixel_noise {pixel_noise} must be in [0, 1] and >= 0"
        )));
    }
    let (w, h) = (512u32, 512u32);
    let k = Intrinsics::new(500.0, 500.0, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)?;
    let mut rng = substream(seed, STREAM_PNP, 0);
    let axis = Vector3::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    )
    .normalize();
    let rot = Rotation3::new(axis * rng.random_range(0.0..std::f64::consts::PI));
    let t = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let pose = Pose::from_rotation(rot, t);
    let inv = pose.inverse();
    let pixel =
        |rng: &mut ChaCha8Rng| PixelPoint::new(rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
    let mut correspondences: Vec<Correspondence2D3D> = (0..count)
        .map(|_| {
            let px = pixel(&mut rng);
            let ray = bearing(&k, &px);
            let cam = ray / ray.z * rng.random_range(3.0..12.0);
            let noisy = PixelPoint::new(
                px.x + pixel_noise * rng.sample::<f64, _>(StandardNormal),
                px.y + pixel_noise * rng.sample::<f64, _>(StandardNormal),
            );
            Correspondence2D3D::new(noisy, Landmark::from(inv.transform(&cam)))
        })
        .collect();
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    let mut outlier = vec![false; count];
    for &i in &order[..(outlier_fraction * count as f64).round() as usize] {
        outlier[i] = true;
        correspondences[i].pixel = pixel(&mut rng);
    }
    Ok(PnpProblem {
        intrinsics: k,
        image_dims: (w, h),
        pose,
        correspondences,
        outlier,
    })
}

/// Naive per-cell dot products accumulated in f64.
pub fn oracle_correlate(dense: &FeatureGrid, d: &SparseDescriptor) -> Result<CorrelationMap> {
    if dense.channels() != d.dim() {
        return Err(Error::ChannelMismatch {
            dense: dense.channels(),
            sparse: d.dim(),
        });
    }
    let mut values = Vec::with_capacity(dense.num_cells());
    for y in 0..dense.height() {
        for x in 0..dense.width() {
            let mut acc = 0.0f64;
            for (a, b) in dense.cell(x, y).iter().zip(&d.values) {
                acc += *a as f64 * *b as f64;
            }
            values.push(acc as f32);
        }
    }
    CorrelationMap::new(dense.width(), dense.height(), values)
}

/// Element at descending rank `⌊f·n⌋` (clamped) after a full sort.
pub fn oracle_quantile(values: &[f32], fraction: f64) -> f32 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let rank = ((fraction * sorted.len() as f64).floor() as usize).min(sorted.len() - 1);
    sorted[rank]
}

/// Mutual nearest neighbors under the dot product: pairs `(i, j)` such that
/// `b[j]` is the best match of `a[i]` and vice versa. Ties go to the lower
/// index.
pub fn mutual_nearest_neighbors(a: &[SparseDescriptor], b: &[SparseDescriptor]) -> Vec<(usize, usize)> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let dot = |x: &SparseDescriptor, y: &SparseDescriptor| -> f64 {
        x.values.iter().zip(&y.values).map(|(p, q)| *p as f64 * *q as f64).sum()
    };
    let best = |from: &[SparseDescriptor], to: &[SparseDescriptor]| -> Vec<usize> {
        from.par_iter()
            .map(|x| {
                let mut bi = 0;
                let mut bv = f64::NEG_INFINITY;
                for (i, y) in to.iter().enumerate() {
                    let v = dot(x, y);
                    if v > bv {
                        bv = v;
                        bi = i;
                    }
                }
                bi
            })
            .collect()
    };
    let ab = best(a, b);
    let ba = best(b, a);
    ab.iter()
        .enumerate()
        .filter(|(i, j)| ba[**j] == *i)
        .map(|(i, j)| (i, *j))
        .collect()
}

/// Keeps each keypoint of `cam` independently with probability `1 - drop`.
pub fn drop_detections(cam: &CameraTensors, drop: f64, seed: u64) -> CameraTensors {
    let mut rng = substream(seed, STREAM_DROP, 0);
    let keep: Vec<bool> = (0..cam.keypoints.len()).map(|_| rng.random::<f64>() >= drop).collect();
    let pick = |i: usize| keep[i];
    let mut out = cam.clone();
    out.keypoints = (0..keep.len()).filter(|&i| pick(i)).map(|i| cam.keypoints[i]).collect();
    out.descriptors = (0..keep.len())
        .filter(|&i| pick(i))
        .enumerate()
        .map(|(k, i)| SparseDescriptor {
            values: cam.descriptors[i].values.clone(),
            keypoint: k,
        })
        .collect();
    out.landmarks = (0..keep.len()).filter(|&i| pick(i)).map(|i| cam.landmarks[i]).collect();
    out.landmark_ids = (0..keep.len())
        .filter(|&i| pick(i))
        .map(|i| cam.landmark_ids[i])
        .collect();
    out.displaced = (0..keep.len()).filter(|&i| pick(i)).map(|i| cam.displaced[i]).collect();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::{argmax_peak, correlate};

    fn small() -> SceneParams {
        SceneParams {
            num_landmarks: 120,
            num_refs: 4,
            num_queries: 3,
            image_dims: (128, 128),
            focal_px: 100.0,
            ..SceneParams::default()
        }
    }

    #[test]
    fn scene_is_deterministic() {
        let a = gen_scene_with(5, &small()).unwrap();
        let b = gen_scene_with(5, &small()).unwrap();
        assert_eq!(a, b);
        let c = gen_scene_with(6, &small()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_landmark_is_unsatisfiable() {
        let err = gen_scene(1, 1, 2, 2, [10.0; 3]).unwrap_err();
        assert!(matches!(err, Error::UnsatisfiableVisibility { attempts: MAX_ATTEMPTS }));
    }

    #[test]
    fn every_camera_sees_enough() {
        let s = gen_scene(3, 200, 20, 10, [10.0; 3]).unwrap();
        for cam in s.references.iter().chain(&s.queries) {
            let n = s
                .landmarks
                .iter()
                .filter(|l| match project(&cam.pose, &cam.intrinsics, l) {
                    Ok(p) => p.x >= 0.0 && p.y >= 0.0 && p.x < 512.0 && p.y < 512.0,
                    Err(_) => false,
                })
                .count();
            assert!(n >= MIN_VISIBLE);
        }
    }

    #[test]
    fn planted_peaks_are_exact() {
        let s = gen_scene_with(9, &small()).unwrap();
        let t = gen_feature_tensors(&s, 4, 32, &NoiseSpec::default()).unwrap();
        let q = &t.queries[0];
        for (d, &j) in q.descriptors.iter().zip(&q.landmark_ids) {
            let m = correlate(&q.grid, d).unwrap();
            let p = argmax_peak(&m);
            assert!((p.value - 1.0).abs() < 1e-6);
            let kp = q.keypoints[q.landmark_ids.iter().position(|&k| k == j).unwrap()];
            let gx = rescale_coord(kp.x, 128, 32).clamp(0.0, 31.0);
            let gy = rescale_coord(kp.y, 128, 32).clamp(0.0, 31.0);
            assert_eq!((p.x, p.y), nearest_cell(gx, gy, 32, 32));
        }
        // background is exactly orthogonal to planted descriptors
        let d = &t.references[0].descriptors[0];
        let m = correlate(&q.grid, d).unwrap();
        let zeros = m.values().iter().filter(|v| **v == 0.0).count();
        assert!(zeros >= q.grid.num_cells() - q.keypoints.len());
    }

    #[test]
    fn tensors_are_deterministic_and_unit() {
        let s = gen_scene_with(2, &small()).unwrap();
        let noise = NoiseSpec {
            descriptor_noise_sigma: 0.3,
            outlier_fraction: 0.3,
            background_mode: BackgroundMode::RandomUnit,
        };
        let a = gen_feature_tensors(&s, 4, 16, &noise).unwrap();
        let b = gen_feature_tensors(&s, 4, 16, &noise).unwrap();
        assert_eq!(a, b);
        for c in a.references.iter().chain(&a.queries) {
            for d in &c.descriptors {
                assert!((d.norm() - 1.0).abs() < 1e-6);
            }
            assert!((crate::tensor::l2_norm(c.global.values()) - 1.0).abs() < 1e-6);
        }
        assert!(a.references.iter().all(|c| c.displaced.iter().all(|d| !d)));
        assert!(a.queries.iter().any(|c| c.displaced.iter().any(|d| *d)));
    }

    #[test]
    fn tensor_preconditions() {
        let s = gen_scene_with(2, &small()).unwrap();
        assert!(gen_feature_tensors(&s, 4, 4, &NoiseSpec::default()).is_err());
        assert!(gen_feature_tensors(&s, 3, 16, &NoiseSpec::default()).is_err());
        let bad = NoiseSpec {
            outlier_fraction: 1.5,
            ..NoiseSpec::default()
        };
        assert!(gen_feature_tensors(&s, 4, 16, &bad).is_err());
    }

    #[test]
    fn oracle_edge_cases() {
        let g = FeatureGrid::new(1, 1, 2, vec![0.6, 0.8]).unwrap();
        let d = SparseDescriptor::normalized(vec![0.6, 0.8], 0);
        assert!((oracle_correlate(&g, &d).unwrap().values()[0] - 1.0).abs() < 1e-7);
        let z = SparseDescriptor {
            values: vec![0.0, 0.0],
            keypoint: 0,
        };
        assert_eq!(oracle_correlate(&g, &z).unwrap().values(), &[0.0]);
        let bad = SparseDescriptor::normalized(vec![1.0, 0.0, 0.0], 0);
        assert!(matches!(oracle_correlate(&g, &bad), Err(Error::ChannelMismatch { .. })));
        assert_eq!(oracle_quantile(&[4.0, 1.0, 3.0, 2.0], 0.5), 2.0);
    }

    #[test]
    fn mutual_nn_pairs_identical_sets() {
        let s = gen_scene_with(4, &small()).unwrap();
        let t = gen_feature_tensors(&s, 4, 32, &NoiseSpec::default()).unwrap();
        let r = &t.references[0];
        let pairs = mutual_nearest_neighbors(&r.descriptors, &r.descriptors);
        assert_eq!(pairs.len(), r.descriptors.len());
        assert!(pairs.iter().all(|(i, j)| i == j));
    }

    #[test]
    fn dropping_detections_keeps_alignment() {
        let s = gen_scene_with(4, &small()).unwrap();
        let t = gen_feature_tensors(&s, 4, 32, &NoiseSpec::default()).unwrap();
        let q = &t.queries[0];
        let d = drop_detections(q, 0.5, 1);
        assert!(d.keypoints.len() < q.keypoints.len());
        assert_eq!(d.keypoints.len(), d.descriptors.len());
        assert_eq!(d.keypoints.len(), d.landmark_ids.len());
        for (k, id) in d.landmark_ids.iter().enumerate() {
            let i = q.landmark_ids.iter().position(|x| x == id).unwrap();
            assert_eq!(d.descriptors[k].values, q.descriptors[i].values);
        }
    }

    #[test]
    fn random_grids_are_unit_and_seeded() {
        let g = random_unit_grid(3, 5, 4, 16).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                assert!((crate::tensor::l2_norm(g.cell(x, y)) - 1.0).abs() < 1e-6);
            }
        }
        assert_eq!(g, random_unit_grid(3, 5, 4, 16).unwrap());
        assert_ne!(g, random_unit_grid(4, 5, 4, 16).unwrap());
        let d = random_unit_descriptors(3, 6, 16);
        assert_eq!(d.len(), 6);
        assert!(d.iter().all(|d| (d.norm() - 1.0).abs() < 1e-6));
        assert_eq!(random_unit_descriptors(3, 2, 16), d[..2].to_vec());
    }

    #[test]
    fn pnp_problem_marks_its_outliers() {
        let p = gen_pnp_problem(8, 100, 0.4, 0.0).unwrap();
        assert_eq!(p.outlier.iter().filter(|&&o| o).count(), 40);
        for (c, &o) in p.correspondences.iter().zip(&p.outlier) {
            if !o {
                let px = project(&p.pose, &p.intrinsics, &c.landmark).unwrap();
                assert!(px.distance(&c.pixel) < 1e-6);
            }
        }
        assert_eq!(p, gen_pnp_problem(8, 100, 0.4, 0.0).unwrap());
        assert!(gen_pnp_problem(8, 10, 1.5, 0.0).is_err());
    }
}
