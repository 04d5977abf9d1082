//! Sparse-to-dense matching: each reference descriptor is correlated with
//! every cell of the query's dense grid, the global peak becomes the match,
//! and a peak-to-quantile ratio test decides whether to keep it.

mod kernel;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Landmark, PixelPoint};
use crate::tensor::{rescale_coord, FeatureGrid, SparseDescriptor};

/// Quantiles with smaller magnitude are treated as zero by the ratio test.
pub const ZERO_QUANTILE: f64 = 1e-12;

/// Descriptors per parallel work item. Chunking never changes the values.
fn desc_chunk(n: usize) -> usize {
    n.div_ceil(rayon::current_num_threads()).clamp(8, 256)
}

thread_local! {
    /// Per-thread correlation maps reused across `match_reference` calls.
    static SCRATCH: std::cell::RefCell<Vec<f32>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Scalar correlation scores over the dense grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl CorrelationMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::InvalidGrid(format!(
                "correlation map {width}x{height} with {} values",
                values.len()
            )));
        }
        Ok(Self { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }
}

/// Ratio test parameters: keep a match when
/// `peak / value_at_rank(fraction) > alpha`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioTestConfig {
    pub alpha: f64,
    pub fraction: f64,
}

impl Default for RatioTestConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            fraction: 0.006,
        }
    }
}

impl RatioTestConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidRatioConfig(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::InvalidRatioConfig(format!(
                "fraction must lie in [0, 1], got {}",
                self.fraction
            )));
        }
        Ok(())
    }
}

/// Extra matching behavior beyond the ratio test.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchOptions {
    /// Refine the integer peak with a 1D parabola fit along each axis.
    pub subpixel: bool,
}

fn check_channels(dense: &FeatureGrid, dim: usize) -> Result<()> {
    if dense.channels() != dim {
        return Err(Error::ChannelMismatch {
            dense: dense.channels(),
            sparse: dim,
        });
    }
    Ok(())
}

/// Dot product of `d` with every cell of `dense` (a 1×1 convolution).
pub fn correlate(dense: &FeatureGrid, d: &SparseDescriptor) -> Result<CorrelationMap> {
    check_channels(dense, d.dim())?;
    let mut out = vec![0.0f32; dense.num_cells()];
    kernel::correlate_into(dense, &[&d.values], &mut [&mut out]);
    CorrelationMap::new(dense.width(), dense.height(), out)
}

/// Correlates many descriptors at once, in parallel over descriptor chunks.
/// `result[i]` equals `correlate(dense, &descs[i])` bit for bit.
pub fn correlate_batch(dense: &FeatureGrid, descs: &[SparseDescriptor]) -> Result<Vec<CorrelationMap>> {
    for d in descs {
        check_channels(dense, d.dim())?;
    }
    let mut maps = vec![vec![0.0f32; dense.num_cells()]; descs.len()];
    let chunk = desc_chunk(descs.len());
    maps.par_chunks_mut(chunk)
        .zip(descs.par_chunks(chunk))
        .for_each(|(out, ds)| {
            let mut out: Vec<&mut [f32]> = out.iter_mut().map(|m| m.as_mut_slice()).collect();
            correlate_chunk(dense, ds, &mut out);
        });
    maps.into_iter()
        .map(|v| CorrelationMap::new(dense.width(), dense.height(), v))
        .collect()
}

fn correlate_chunk(dense: &FeatureGrid, chunk: &[SparseDescriptor], out: &mut [&mut [f32]]) {
    let refs: Vec<&[f32]> = chunk.iter().map(|d| d.values.as_slice()).collect();
    kernel::correlate_into(dense, &refs, out);
}

/// Location and value of a map's maximum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub x: usize,
    pub y: usize,
    pub value: f32,
}

/// Global maximum; ties go to the lowest row-major index.
pub fn argmax_peak(map: &CorrelationMap) -> Peak {
    peak_of(&map.values, map.width)
}

fn peak_of(values: &[f32], width: usize) -> Peak {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    Peak {
        x: best % width,
        y: best / width,
        value: values[best],
    }
}

/// Descending-order rank used for the ratio test denominator.
pub fn quantile_rank(len: usize, fraction: f64) -> usize {
    ((fraction * len as f64).floor() as usize).min(len - 1)
}

/// Value at descending rank `⌊fraction · len⌋` (rank 0 is the maximum),
/// found by partial selection.
pub fn quantile_value(map: &CorrelationMap, fraction: f64) -> f32 {
    let mut scratch = map.values.clone();
    select_descending(&mut scratch, quantile_rank(map.values.len(), fraction))
}

const SAMPLE_STRIDE: usize = 16;

/// Exact descending selection. For small ranks a strided sample supplies a
/// threshold, and only values at or above it are selected among; if too few
/// pass, the whole slice is selected instead.
fn select_descending(values: &mut [f32], rank: usize) -> f32 {
    let desc = |a: &f32, b: &f32| b.total_cmp(a);
    let n = values.len();
    if n >= 64 * SAMPLE_STRIDE && rank < n / (4 * SAMPLE_STRIDE) {
        let mut sample: Vec<f32> = values.iter().step_by(SAMPLE_STRIDE).copied().collect();
        let srank = (2 * (rank + 1) / SAMPLE_STRIDE + 4).min(sample.len() - 1);
        let t = *sample.select_nth_unstable_by(srank, desc).1;
        let mut top: Vec<f32> = values.iter().copied().filter(|&v| v >= t).collect();
        if top.len() > rank {
            return *top.select_nth_unstable_by(rank, desc).1;
        }
    }
    *values.select_nth_unstable_by(rank, desc).1
}

/// Result of the ratio test on one correlation map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioOutcome {
    pub accepted: bool,
    pub ratio: f64,
    pub peak: f32,
    pub quantile: f32,
}

/// `peak / quantile > alpha`. A quantile within `ZERO_QUANTILE` of zero gives
/// an infinite ratio with the sign of the peak (zero for a zero peak).
pub fn ratio_test(map: &CorrelationMap, cfg: &RatioTestConfig) -> RatioOutcome {
    let peak = argmax_peak(map).value;
    let quantile = quantile_value(map, cfg.fraction);
    decide(peak, quantile, cfg)
}

fn decide(peak: f32, quantile: f32, cfg: &RatioTestConfig) -> RatioOutcome {
    let (p, q) = (peak as f64, quantile as f64);
    let ratio = if q.abs() < ZERO_QUANTILE {
        if p > ZERO_QUANTILE {
            f64::INFINITY
        } else if p < -ZERO_QUANTILE {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    } else {
        p / q
    };
    RatioOutcome {
        accepted: ratio > cfg.alpha,
        ratio,
        peak,
        quantile,
    }
}

/// One sparse-to-dense match.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchCandidate {
    /// Index of the reference keypoint.
    pub keypoint: usize,
    /// Matched location in the query image.
    pub pixel: PixelPoint,
    pub peak: f32,
    pub ratio: f64,
    pub accepted: bool,
    pub landmark: Landmark,
}

/// Matches every reference descriptor against the dense query grid.
/// Returns exactly one candidate per descriptor, in input order.
pub fn match_reference(
    dense: &FeatureGrid,
    sparse: &[SparseDescriptor],
    landmarks: &[Landmark],
    image_dims: (u32, u32),
    cfg: &RatioTestConfig,
) -> Result<Vec<MatchCandidate>> {
    match_reference_with(dense, sparse, landmarks, image_dims, cfg, MatchOptions::default())
}

pub fn match_reference_with(
    dense: &FeatureGrid,
    sparse: &[SparseDescriptor],
    landmarks: &[Landmark],
    image_dims: (u32, u32),
    cfg: &RatioTestConfig,
    opts: MatchOptions,
) -> Result<Vec<MatchCandidate>> {
    if sparse.len() != landmarks.len() {
        return Err(Error::LengthMismatch {
            what: "sparse descriptors vs landmarks",
            left: sparse.len(),
            right: landmarks.len(),
        });
    }
    cfg.validate()?;
    for d in sparse {
        check_channels(dense, d.dim())?;
    }
    let (w, h) = (dense.width(), dense.height());
    let rank = quantile_rank(dense.num_cells(), cfg.fraction);

    let chunk_len = desc_chunk(sparse.len());
    let n = dense.num_cells();
    let out = sparse
        .par_chunks(chunk_len)
        .enumerate()
        .flat_map_iter(|(c, chunk)| {
            SCRATCH.with_borrow_mut(|scratch| {
                if scratch.len() < chunk.len() * n {
                    scratch.resize(chunk.len() * n, 0.0);
                }
                let mut maps: Vec<&mut [f32]> = scratch.chunks_mut(n).take(chunk.len()).collect();
                correlate_chunk(dense, chunk, &mut maps);
                maps.into_iter()
                    .enumerate()
                    .map(|(k, values)| {
                        let j = c * chunk_len + k;
                        let peak = peak_of(values, w);
                        let (gx, gy) = if opts.subpixel {
                            subpixel_peak(values, (w, h), &peak)
                        } else {
                            (peak.x as f64, peak.y as f64)
                        };
                        let quantile = select_descending(values, rank);
                        let outcome = decide(peak.value, quantile, cfg);
                        MatchCandidate {
                            keypoint: j,
                            pixel: grid_to_image(gx, gy, (w, h), image_dims),
                            peak: peak.value,
                            ratio: outcome.ratio,
                            accepted: outcome.accepted,
                            landmark: landmarks[j],
                        }
                    })
                    .collect::<Vec<_>>()
            })
        })
        .collect();
    Ok(out)
}

/// Maps a grid coordinate to image coordinates, kept inside the image.
pub fn grid_to_image(gx: f64, gy: f64, grid_dims: (usize, usize), image_dims: (u32, u32)) -> PixelPoint {
    let (iw, ih) = (image_dims.0 as usize, image_dims.1 as usize);
    PixelPoint::new(
        rescale_coord(gx, grid_dims.0, iw).clamp(0.0, (iw - 1) as f64),
        rescale_coord(gy, grid_dims.1, ih).clamp(0.0, (ih - 1) as f64),
    )
}

/// Vertex of the parabola through the peak and its two neighbors, per axis.
fn subpixel_peak(values: &[f32], dims: (usize, usize), peak: &Peak) -> (f64, f64) {
    let offset = |lo: Option<f32>, mid: f32, hi: Option<f32>| -> f64 {
        match (lo, hi) {
            (Some(l), Some(r)) => {
                let (l, m, r) = (l as f64, mid as f64, r as f64);
                let denom = l - 2.0 * m + r;
                if denom < 0.0 {
                    (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
                } else {
                    0.0
                }
            }
            _ => 0.0,
        }
    };
    let (x, y, w) = (peak.x, peak.y, dims.0);
    let at = |x: usize, y: usize| values[y * w + x];
    let left = (x > 0).then(|| at(x - 1, y));
    let right = (x + 1 < w).then(|| at(x + 1, y));
    let up = (y > 0).then(|| at(x, y - 1));
    let down = (y + 1 < dims.1).then(|| at(x, y + 1));
    (
        x as f64 + offset(left, peak.value, right),
        y as f64 + offset(up, peak.value, down),
    )
}
