//! Dense feature grids, bilinear resampling, hypercolumn assembly and sparse
//! descriptor sampling.
//!
//! All resampling uses the center-sampling convention: cell `i` of a grid of
//! length `n` covers the continuous interval `[i - 0.5, i + 0.5)`, and a grid
//! of length `n` mapped onto length `m` sends coordinate `u` to
//! `(u + 0.5) * m / n - 0.5`. Samples outside the grid are clamped to the edge.

use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::PixelPoint;

/// Cells per group in the channel-interleaved copy used by batch correlation.
pub(crate) const PANEL_LANES: usize = 16;

/// Dense `width × height × channels` grid, row-major and channel-last.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
    panel: OnceLock<Vec<f32>>,
}

impl PartialEq for FeatureGrid {
    fn eq(&self, other: &Self) -> bool {
        (self.width, self.height, self.channels) == (other.width, other.height, other.channels)
            && self.data == other.data
    }
}

impl FeatureGrid {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::InvalidGrid(format!(
                "dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::InvalidGrid("dimensions overflow".into()))?;
        if data.len() != expected {
            return Err(Error::InvalidGrid(format!(
                "data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
            panel: OnceLock::new(),
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::new(width, height, channels, vec![0.0; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Descriptor stored at cell `(x, y)`.
    pub fn cell(&self, x: usize, y: usize) -> &[f32] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn cell_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        self.panel = OnceLock::new();
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// L2-normalizes every cell in place; all-zero cells stay zero.
    pub fn normalize_cells(&mut self) {
        self.panel = OnceLock::new();
        let c = self.channels;
        self.data.par_chunks_mut(c).for_each(normalize_in_place);
    }

    /// Cells regrouped `PANEL_LANES` at a time as `[group][channel][lane]`,
    /// zero-padded past the last cell. Built on first use and kept.
    pub(crate) fn panel(&self) -> &[f32] {
        self.panel.get_or_init(|| {
            let (c, n) = (self.channels, self.num_cells());
            let mut p = vec![0.0f32; n.div_ceil(PANEL_LANES) * c * PANEL_LANES];
            for (g, dst) in p.chunks_mut(c * PANEL_LANES).enumerate() {
                let first = g * PANEL_LANES;
                for l in 0..PANEL_LANES.min(n - first) {
                    let src = &self.data[(first + l) * c..(first + l + 1) * c];
                    for (ch, &v) in src.iter().enumerate() {
                        dst[ch * PANEL_LANES + l] = v;
                    }
                }
            }
            p
        })
    }
}

/// Normalizes a vector to unit L2 norm (accumulated in f64). Zero vectors
/// are left untouched.
pub fn normalize_in_place(v: &mut [f32]) {
    let norm = l2_norm(v);
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Maps a coordinate on an axis of length `from_len` to an axis of length
/// `to_len` under the center-sampling convention.
#[inline]
pub fn rescale_coord(u: f64, from_len: usize, to_len: usize) -> f64 {
    (u + 0.5) * (to_len as f64 / from_len as f64) - 0.5
}

/// Ordered layer tensors (highest resolution first) and the source image size.
#[derive(Debug, Clone)]
pub struct LayerStack {
    layers: Vec<FeatureGrid>,
    image_dims: (u32, u32),
}

impl LayerStack {
    pub fn new(layers: Vec<FeatureGrid>, image_dims: (u32, u32)) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidGrid("layer stack is empty".into()))?;
        let (w0, h0) = (first.width, first.height);
        if let Some(i) = layers.iter().position(|l| l.width > w0 || l.height > h0) {
            return Err(Error::InvalidGrid(format!(
                "layer {i} exceeds the resolution of the first layer ({w0}x{h0})"
            )));
        }
        Ok(Self { layers, image_dims })
    }

    pub fn layers(&self) -> &[FeatureGrid] {
        &self.layers
    }

    pub fn image_dims(&self) -> (u32, u32) {
        self.image_dims
    }
}

/// Bilinear resampling with edge clamping; channels are interpolated
/// independently.
pub fn bilinear_resize(grid: &FeatureGrid, new_w: usize, new_h: usize) -> FeatureGrid {
    assert!(new_w >= 1 && new_h >= 1, "target size must be positive");
    if new_w == grid.width && new_h == grid.height {
        return grid.clone();
    }
    let c = grid.channels;
    let xs: Vec<Tap> = (0..new_w).map(|x| Tap::new(x, new_w, grid.width)).collect();
    let ys: Vec<Tap> = (0..new_h).map(|y| Tap::new(y, new_h, grid.height)).collect();

    let mut data = vec![0.0f32; new_w * new_h * c];
    data.par_chunks_mut(new_w * c).zip(ys.par_iter()).for_each(|(row, ty)| {
        for (xo, tx) in xs.iter().enumerate() {
            let v00 = grid.cell(tx.lo, ty.lo);
            let v10 = grid.cell(tx.hi, ty.lo);
            let v01 = grid.cell(tx.lo, ty.hi);
            let v11 = grid.cell(tx.hi, ty.hi);
            let out = &mut row[xo * c..(xo + 1) * c];
            for ch in 0..c {
                let top = lerp(v00[ch] as f64, v10[ch] as f64, tx.frac);
                let bottom = lerp(v01[ch] as f64, v11[ch] as f64, tx.frac);
                out[ch] = lerp(top, bottom, ty.frac) as f32;
            }
        }
    });
    FeatureGrid {
        width: new_w,
        height: new_h,
        channels: c,
        data,
        panel: OnceLock::new(),
    }
}

/// Resizes every layer to the first layer's resolution, concatenates along
/// channels in stack order and L2-normalizes each cell.
pub fn assemble_hypercolumn(stack: &LayerStack) -> FeatureGrid {
    let first = &stack.layers[0];
    let (w, h) = (first.width, first.height);
    let resized: Vec<FeatureGrid> = stack.layers.iter().map(|l| bilinear_resize(l, w, h)).collect();
    let total: usize = resized.iter().map(|l| l.channels).sum();

    let mut data = vec![0.0f32; w * h * total];
    data.par_chunks_mut(total).enumerate().for_each(|(i, out)| {
        let mut offset = 0;
        for layer in &resized {
            let c = layer.channels;
            out[offset..offset + c].copy_from_slice(&layer.data[i * c..(i + 1) * c]);
            offset += c;
        }
        normalize_in_place(out);
    });
    FeatureGrid {
        width: w,
        height: h,
        channels: total,
        data,
        panel: OnceLock::new(),
    }
}

/// How sparse descriptors are read from a grid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum SampleMode {
    #[default]
    Bilinear,
    /// Value of the cell containing the keypoint, no interpolation.
    Nearest,
}

/// Unit-norm (or all-zero) descriptor sampled at one keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDescriptor {
    pub values: Vec<f32>,
    pub keypoint: usize,
}

impl SparseDescriptor {
    /// Wraps raw values, normalizing them to unit length.
    pub fn normalized(mut values: Vec<f32>, keypoint: usize) -> Self {
        normalize_in_place(&mut values);
        Self { values, keypoint }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

/// Samples descriptors from `grid` at image-space keypoints.
pub fn sample_sparse(
    grid: &FeatureGrid,
    keypoints: &[PixelPoint],
    image_dims: (u32, u32),
    mode: SampleMode,
) -> Result<Vec<SparseDescriptor>> {
    let (iw, ih) = image_dims;
    for (index, kp) in keypoints.iter().enumerate() {
        let inside = kp.x >= 0.0 && kp.y >= 0.0 && kp.x < iw as f64 && kp.y < ih as f64;
        if !inside {
            return Err(Error::KeypointOutOfBounds {
                index,
                x: kp.x,
                y: kp.y,
                width: iw,
                height: ih,
            });
        }
    }
    let out = keypoints
        .par_iter()
        .enumerate()
        .map(|(index, kp)| {
            let gx = rescale_coord(kp.x, iw as usize, grid.width).clamp(0.0, (grid.width - 1) as f64);
            let gy = rescale_coord(kp.y, ih as usize, grid.height).clamp(0.0, (grid.height - 1) as f64);
            let values = match mode {
                SampleMode::Nearest => {
                    let (cx, cy) = nearest_cell(gx, gy, grid.width, grid.height);
                    grid.cell(cx, cy).to_vec()
                }
                SampleMode::Bilinear => bilinear_sample(grid, gx, gy),
            };
            SparseDescriptor::normalized(values, index)
        })
        .collect();
    Ok(out)
}

/// Cell containing the continuous grid coordinate `(gx, gy)`.
pub fn nearest_cell(gx: f64, gy: f64, width: usize, height: usize) -> (usize, usize) {
    let cx = (gx + 0.5).floor().clamp(0.0, (width - 1) as f64) as usize;
    let cy = (gy + 0.5).floor().clamp(0.0, (height - 1) as f64) as usize;
    (cx, cy)
}

fn bilinear_sample(grid: &FeatureGrid, gx: f64, gy: f64) -> Vec<f32> {
    let tx = Tap::at(gx, grid.width);
    let ty = Tap::at(gy, grid.height);
    let v00 = grid.cell(tx.lo, ty.lo);
    let v10 = grid.cell(tx.hi, ty.lo);
    let v01 = grid.cell(tx.lo, ty.hi);
    let v11 = grid.cell(tx.hi, ty.hi);
    (0..grid.channels)
        .map(|ch| {
            let top = lerp(v00[ch] as f64, v10[ch] as f64, tx.frac);
            let bottom = lerp(v01[ch] as f64, v11[ch] as f64, tx.frac);
            lerp(top, bottom, ty.frac) as f32
        })
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Interpolation taps along one axis.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

impl Tap {
    fn new(out_index: usize, out_len: usize, in_len: usize) -> Self {
        Self::at(rescale_coord(out_index as f64, out_len, in_len), in_len)
    }

    fn at(u: f64, len: usize) -> Self {
        let u = u.clamp(0.0, (len - 1) as f64);
        let lo = u.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        Self {
            lo,
            hi,
            frac: u - lo as f64,
        }
    }
}
