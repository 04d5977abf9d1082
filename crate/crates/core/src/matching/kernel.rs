//! Dot-product kernel behind `correlate`.
//!
//! Every (cell, descriptor) pair is reduced the same way on every path: a
//! single f32 fused multiply-add chain runs over each block of at most
//! `BLOCK` consecutive channels, block sums are added in order into an f64
//! total, and the total is rounded to f32 once. SIMD paths vectorize across
//! cells, never across channels, so batch and single-descriptor calls,
//! tile shapes, chunking and thread counts all give identical bits.

use std::sync::OnceLock;

use crate::tensor::{FeatureGrid, PANEL_LANES};

/// Channels per f32 partial sum.
pub(crate) const BLOCK: usize = 64;

/// Batches at least this large go through the interleaved panel.
const PANEL_MIN_DESCS: usize = 4;

/// Panel bytes kept resident per pass over a descriptor chunk.
const PASS_BYTES: usize = 256 * 1024;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Isa {
    Portable,
    #[cfg(target_arch = "x86_64")]
    Avx2Fma,
    #[cfg(target_arch = "x86_64")]
    Avx512,
}

fn detect() -> Isa {
    static ISA: OnceLock<Isa> = OnceLock::new();
    *ISA.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            if is_x86_feature_detected!("avx512f") && is_x86_feature_detected!("fma") {
                return Isa::Avx512;
            }
            if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                return Isa::Avx2Fma;
            }
        }
        Isa::Portable
    })
}

/// Correlates `descs` (each of length `grid.channels()`) against every cell
/// of `grid`. `out[q]` receives the map for `descs[q]`.
pub(crate) fn correlate_into(grid: &FeatureGrid, descs: &[&[f32]], out: &mut [&mut [f32]]) {
    debug_assert_eq!(descs.len(), out.len());
    let (c, n) = (grid.channels(), grid.num_cells());
    match detect() {
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 if descs.len() >= PANEL_MIN_DESCS => unsafe { x86::panel_avx512(grid.panel(), c, n, descs, out) },
        #[cfg(target_arch = "x86_64")]
        Isa::Avx2Fma if descs.len() >= PANEL_MIN_DESCS => unsafe { x86::panel_avx2(grid.panel(), c, n, descs, out) },
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 | Isa::Avx2Fma => unsafe { x86::rows_fma(grid.data(), c, descs, out) },
        Isa::Portable => rows(grid.data(), c, descs, out),
    }
}

/// Groups per pass, a multiple of the tile height `g`.
fn pass_groups(channels: usize, g: usize) -> usize {
    let fit = PASS_BYTES / (PANEL_LANES * channels * 4);
    (fit / g).max(1) * g
}

const ROW_ILP: usize = 8;

/// Row-major path: `ROW_ILP` cells advance together, one scalar chain each.
#[inline(always)]
fn rows(cells: &[f32], channels: usize, descs: &[&[f32]], out: &mut [&mut [f32]]) {
    let n = cells.len() / channels;
    let mut i = 0;
    while i < n {
        let m = (n - i).min(ROW_ILP);
        let r: [&[f32]; ROW_ILP] = std::array::from_fn(|k| {
            let row = i + k.min(m - 1);
            &cells[row * channels..(row + 1) * channels]
        });
        for (d, o) in descs.iter().zip(out.iter_mut()) {
            let mut wide = [0.0f64; ROW_ILP];
            let mut b0 = 0;
            while b0 < channels {
                let b1 = (b0 + BLOCK).min(channels);
                let mut acc = [0.0f32; ROW_ILP];
                for c in b0..b1 {
                    let dc = d[c];
                    for k in 0..ROW_ILP {
                        acc[k] = r[k][c].mul_add(dc, acc[k]);
                    }
                }
                for k in 0..ROW_ILP {
                    wide[k] += acc[k] as f64;
                }
                b0 = b1;
            }
            for k in 0..m {
                o[i + k] = wide[k] as f32;
            }
        }
        i += m;
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use super::{pass_groups, rows, BLOCK, PANEL_LANES as L};
    use std::arch::x86_64::*;

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn rows_fma(cells: &[f32], channels: usize, descs: &[&[f32]], out: &mut [&mut [f32]]) {
        rows(cells, channels, descs, out)
    }

    /// Copies the valid cells of one tile row from `buf` into `out`.
    #[inline(always)]
    fn emit(out: &mut [f32], first: usize, buf: &[f32]) {
        let m = buf.len().min(out.len() - first);
        out[first..first + m].copy_from_slice(&buf[..m]);
    }

    /// Walks passes of panel groups, then descriptor chunks of `qmax`, then
    /// tiles of `gmax` groups.
    #[inline(always)]
    fn sweep<F>(channels: usize, n_cells: usize, n_desc: usize, gmax: usize, qmax: usize, mut tile: F)
    where
        F: FnMut(usize, usize, usize, usize),
    {
        let groups = n_cells.div_ceil(L);
        let pass = pass_groups(channels, gmax);
        let mut g0 = 0;
        while g0 < groups {
            let g1 = (g0 + pass).min(groups);
            let mut q = 0;
            while q < n_desc {
                let nq = (n_desc - q).min(qmax);
                let mut g = g0;
                while g < g1 {
                    let ng = (g1 - g).min(gmax);
                    tile(g, ng, q, nq);
                    g += ng;
                }
                q += nq;
            }
            g0 = g1;
        }
    }

    #[target_feature(enable = "avx512f,avx2,fma")]
    pub(super) unsafe fn panel_avx512(
        panel: &[f32],
        channels: usize,
        n_cells: usize,
        descs: &[&[f32]],
        out: &mut [&mut [f32]],
    ) {
        let gstride = channels * L;
        sweep(channels, n_cells, descs.len(), 2, 8, |g, ng, q, nq| {
            let p = panel.as_ptr().add(g * gstride);
            let ds = &descs[q..q + nq];
            let os = &mut out[q..q + nq];
            macro_rules! go {
                ($G:literal, $Q:literal) => {{
                    let mut buf = [[[0.0f32; L]; $G]; $Q];
                    tile512::<$G, $Q>(
                        p,
                        gstride,
                        channels,
                        std::array::from_fn(|j| ds[j].as_ptr()),
                        &mut buf,
                    );
                    for j in 0..$Q {
                        for h in 0..$G {
                            emit(&mut os[j], (g + h) * L, &buf[j][h]);
                        }
                    }
                }};
            }
            match (ng, nq) {
                (2, 8) => go!(2, 8),
                (2, 7) => go!(2, 7),
                (2, 6) => go!(2, 6),
                (2, 5) => go!(2, 5),
                (2, 4) => go!(2, 4),
                (2, 3) => go!(2, 3),
                (2, 2) => go!(2, 2),
                (2, 1) => go!(2, 1),
                (1, 8) => go!(1, 8),
                (1, 7) => go!(1, 7),
                (1, 6) => go!(1, 6),
                (1, 5) => go!(1, 5),
                (1, 4) => go!(1, 4),
                (1, 3) => go!(1, 3),
                (1, 2) => go!(1, 2),
                (1, 1) => go!(1, 1),
                _ => unreachable!("tile shape out of range"),
            }
        })
    }

    #[inline(always)]
    unsafe fn tile512<const G: usize, const Q: usize>(
        panel: *const f32,
        gstride: usize,
        channels: usize,
        descs: [*const f32; Q],
        buf: &mut [[[f32; L]; G]; Q],
    ) {
        // f64 sums per group: cells 0..8 and 8..16
        let mut wide = [[[_mm512_setzero_pd(); 2]; G]; Q];
        let mut b0 = 0;
        while b0 < channels {
            let b1 = (b0 + BLOCK).min(channels);
            let mut acc = [[_mm512_setzero_ps(); G]; Q];
            for c in b0..b1 {
                let pv: [__m512; G] = std::array::from_fn(|g| _mm512_loadu_ps(panel.add(g * gstride + c * L)));
                for j in 0..Q {
                    let dv = _mm512_set1_ps(*descs[j].add(c));
                    for g in 0..G {
                        acc[j][g] = _mm512_fmadd_ps(pv[g], dv, acc[j][g]);
                    }
                }
            }
            for j in 0..Q {
                for g in 0..G {
                    let lo = _mm512_castps512_ps256(acc[j][g]);
                    let hi = _mm256_castpd_ps(_mm512_extractf64x4_pd::<1>(_mm512_castps_pd(acc[j][g])));
                    wide[j][g][0] = _mm512_add_pd(wide[j][g][0], _mm512_cvtps_pd(lo));
                    wide[j][g][1] = _mm512_add_pd(wide[j][g][1], _mm512_cvtps_pd(hi));
                }
            }
            b0 = b1;
        }
        for j in 0..Q {
            for g in 0..G {
                for h in 0..2 {
                    _mm256_storeu_ps(buf[j][g].as_mut_ptr().add(h * 8), _mm512_cvtpd_ps(wide[j][g][h]));
                }
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn panel_avx2(
        panel: &[f32],
        channels: usize,
        n_cells: usize,
        descs: &[&[f32]],
        out: &mut [&mut [f32]],
    ) {
        let gstride = channels * L;
        sweep(channels, n_cells, descs.len(), 1, 6, |g, _, q, nq| {
            let p = panel.as_ptr().add(g * gstride);
            let ds = &descs[q..q + nq];
            let os = &mut out[q..q + nq];
            macro_rules! go {
                ($Q:literal) => {{
                    let mut buf = [[0.0f32; L]; $Q];
                    tile256::<$Q>(p, channels, std::array::from_fn(|j| ds[j].as_ptr()), &mut buf);
                    for j in 0..$Q {
                        emit(&mut os[j], g * L, &buf[j]);
                    }
                }};
            }
            match nq {
                6 => go!(6),
                5 => go!(5),
                4 => go!(4),
                3 => go!(3),
                2 => go!(2),
                1 => go!(1),
                _ => unreachable!("tile shape out of range"),
            }
        })
    }

    #[inline(always)]
    unsafe fn tile256<const Q: usize>(
        panel: *const f32,
        channels: usize,
        descs: [*const f32; Q],
        buf: &mut [[f32; L]; Q],
    ) {
        // f64 sums for cells 0..4, 4..8, 8..12, 12..16
        let mut wide = [[_mm256_setzero_pd(); 4]; Q];
        let mut b0 = 0;
        while b0 < channels {
            let b1 = (b0 + BLOCK).min(channels);
            let mut acc = [[_mm256_setzero_ps(); 2]; Q];
            for c in b0..b1 {
                let p0 = _mm256_loadu_ps(panel.add(c * L));
                let p1 = _mm256_loadu_ps(panel.add(c * L + 8));
                for j in 0..Q {
                    let dv = _mm256_set1_ps(*descs[j].add(c));
                    acc[j][0] = _mm256_fmadd_ps(p0, dv, acc[j][0]);
                    acc[j][1] = _mm256_fmadd_ps(p1, dv, acc[j][1]);
                }
            }
            for j in 0..Q {
                for h in 0..2 {
                    let lo = _mm256_cvtps_pd(_mm256_castps256_ps128(acc[j][h]));
                    let hi = _mm256_cvtps_pd(_mm256_extractf128_ps::<1>(acc[j][h]));
                    wide[j][2 * h] = _mm256_add_pd(wide[j][2 * h], lo);
                    wide[j][2 * h + 1] = _mm256_add_pd(wide[j][2 * h + 1], hi);
                }
            }
            b0 = b1;
        }
        for j in 0..Q {
            for k in 0..4 {
                _mm_storeu_ps(buf[j].as_mut_ptr().add(4 * k), _mm256_cvtpd_ps(wide[j][k]));
            }
        }
    }
}
