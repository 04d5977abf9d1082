//! On-disk formats. Binary files are little-endian with a four-byte magic;
//! text files are ASCII, whitespace separated, `#` starts a comment.
//!
//! | magic  | layout |
//! |--------|--------|
//! | `FGRD` | u32 width, height, channels; f32 × w·h·c, row-major, channel-last |
//! | `GDSC` | u32 dim; f32 × dim |
//! | `SDSC` | u32 count, dim; f32 × count·dim |
//! | `KPLM` | u32 count; per record f32 x, y, X, Y, Z |
//! | `PCAM` | u32 in_dim, out_dim; u8 whiten; f64 mean × in, eigenvalues × out, basis × out·in |
//!
//! Decoders check the payload length against the header before allocating.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Landmark, PixelPoint, Pose};
use crate::pipeline::{LocalizationResult, RecallReport};
use crate::retrieval::{GlobalDescriptor, PcaModel};
use crate::tensor::{FeatureGrid, SparseDescriptor};

pub const MAGIC_GRID: [u8; 4] = *b"FGRD";
pub const MAGIC_GLOBAL: [u8; 4] = *b"GDSC";
pub const MAGIC_SPARSE: [u8; 4] = *b"SDSC";
pub const MAGIC_KEYPOINTS: [u8; 4] = *b"KPLM";
pub const MAGIC_PCA: [u8; 4] = *b"PCAM";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], magic: [u8; 4]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::TruncatedPayload {
                expected: 4,
                found: bytes.len() as u64,
            });
        }
        let found: [u8; 4] = bytes[..4].try_into().unwrap();
        if found != magic {
            return Err(Error::BadMagic { expected: magic, found });
        }
        Ok(Self { bytes, pos: 4 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::TruncatedPayload {
                expected: (self.pos as u64).saturating_add(n as u64),
                found: self.bytes.len() as u64,
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    /// Requires exactly `count` elements of `width` bytes to remain.
    fn expect_rest(&self, count: u64, width: u64, what: &str) -> Result<()> {
        let expected = count
            .checked_mul(width)
            .and_then(|n| n.checked_add(self.pos as u64))
            .ok_or_else(|| Error::DimOverflow(format!("{what}: {count} elements")))?;
        if expected != self.bytes.len() as u64 {
            return Err(Error::TruncatedPayload {
                expected,
                found: self.bytes.len() as u64,
            });
        }
        Ok(())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn product(dims: &[u32], what: &str) -> Result<u64> {
    dims.iter()
        .try_fold(1u64, |acc, d| acc.checked_mul(*d as u64))
        .filter(|n| usize::try_from(*n).is_ok())
        .ok_or_else(|| Error::DimOverflow(format!("{what} dimensions {dims:?}")))
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::DimOverflow(format!("{what} = {n} does not fit in u32")))
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_f64s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_feature_grid(grid: &FeatureGrid) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + grid.data().len() * 4);
    out.extend_from_slice(&MAGIC_GRID);
    for (n, what) in [
        (grid.width(), "width"),
        (grid.height(), "height"),
        (grid.channels(), "channels"),
    ] {
        out.extend_from_slice(&to_u32(n, what)?.to_le_bytes());
    }
    push_f32s(&mut out, grid.data());
    Ok(out)
}

pub fn decode_feature_grid(bytes: &[u8]) -> Result<FeatureGrid> {
    let mut r = Reader::new(bytes, MAGIC_GRID)?;
    let (w, h, c) = (r.u32()?, r.u32()?, r.u32()?);
    let n = product(&[w, h, c], "grid")?;
    r.expect_rest(n, 4, "grid")?;
    let data = r.f32s(n as usize)?;
    FeatureGrid::new(w as usize, h as usize, c as usize, data)
}

pub fn encode_global(desc: &GlobalDescriptor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + desc.dim() * 4);
    out.extend_from_slice(&MAGIC_GLOBAL);
    out.extend_from_slice(&to_u32(desc.dim(), "dim")?.to_le_bytes());
    push_f32s(&mut out, desc.values());
    Ok(out)
}

/// Raw values; callers normalize (or project) them.
pub fn decode_global(bytes: &[u8]) -> Result<Vec<f32>> {
    let mut r = Reader::new(bytes, MAGIC_GLOBAL)?;
    let d = r.u32()?;
    r.expect_rest(d as u64, 4, "global descriptor")?;
    let v = r.f32s(d as usize)?;
    check_finite(&v, "global descriptor")?;
    Ok(v)
}

pub fn encode_sparse(descs: &[SparseDescriptor]) -> Result<Vec<u8>> {
    let dim = descs.first().map_or(0, |d| d.dim());
    if let Some(bad) = descs.iter().find(|d| d.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: bad.dim(),
        });
    }
    let mut out = Vec::with_capacity(12 + descs.len() * dim * 4);
    out.extend_from_slice(&MAGIC_SPARSE);
    out.extend_from_slice(&to_u32(descs.len(), "count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(dim, "dim")?.to_le_bytes());
    for d in descs {
        push_f32s(&mut out, &d.values);
    }
    Ok(out)
}

/// Descriptors are stored as written; keypoint indices follow file order.
pub fn decode_sparse(bytes: &[u8]) -> Result<Vec<SparseDescriptor>> {
    let mut r = Reader::new(bytes, MAGIC_SPARSE)?;
    let (count, dim) = (r.u32()?, r.u32()?);
    let n = product(&[count, dim], "sparse descriptors")?;
    r.expect_rest(n, 4, "sparse descriptors")?;
    (0..count as usize)
        .map(|k| {
            let values = r.f32s(dim as usize)?;
            check_finite(&values, "sparse descriptor")?;
            Ok(SparseDescriptor { values, keypoint: k })
        })
        .collect()
}

pub fn encode_keypoints(keypoints: &[PixelPoint], landmarks: &[Landmark]) -> Result<Vec<u8>> {
    if keypoints.len() != landmarks.len() {
        return Err(Error::LengthMismatch {
            what: "keypoints vs landmarks",
            left: keypoints.len(),
            right: landmarks.len(),
        });
    }
    let mut out = Vec::with_capacity(8 + keypoints.len() * 20);
    out.extend_from_slice(&MAGIC_KEYPOINTS);
    out.extend_from_slice(&to_u32(keypoints.len(), "count")?.to_le_bytes());
    for (k, l) in keypoints.iter().zip(landmarks) {
        let p = l.position;
        push_f32s(&mut out, &[k.x as f32, k.y as f32, p.x as f32, p.y as f32, p.z as f32]);
    }
    Ok(out)
}

pub fn decode_keypoints(bytes: &[u8]) -> Result<(Vec<PixelPoint>, Vec<Landmark>)> {
    let mut r = Reader::new(bytes, MAGIC_KEYPOINTS)?;
    let count = r.u32()?;
    r.expect_rest(count as u64, 20, "keypoints")?;
    let mut kps = Vec::with_capacity(count as usize);
    let mut lms = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let v = r.f32s(5)?;
        check_finite(&v, "keypoint record")?;
        kps.push(PixelPoint::new(v[0] as f64, v[1] as f64));
        lms.push(Landmark::new(v[2] as f64, v[3] as f64, v[4] as f64));
    }
    Ok((kps, lms))
}

pub fn encode_pca(model: &PcaModel) -> Result<Vec<u8>> {
    let (i, o) = (model.in_dim(), model.out_dim());
    let mut out = Vec::with_capacity(13 + 8 * (i + o + i * o));
    out.extend_from_slice(&MAGIC_PCA);
    out.extend_from_slice(&to_u32(i, "in_dim")?.to_le_bytes());
    out.extend_from_slice(&to_u32(o, "out_dim")?.to_le_bytes());
    out.push(model.whiten() as u8);
    push_f64s(&mut out, model.mean().iter().copied());
    push_f64s(&mut out, model.eigenvalues().iter().copied());
    for r in 0..o {
        push_f64s(&mut out, model.basis().row(r).iter().copied());
    }
    Ok(out)
}

pub fn decode_pca(bytes: &[u8]) -> Result<PcaModel> {
    let mut r = Reader::new(bytes, MAGIC_PCA)?;
    let (i, o) = (r.u32()?, r.u32()?);
    let whiten = r.u8()? != 0;
    let io = product(&[i, o], "PCA basis")?;
    let n = io
        .checked_add(i as u64)
        .and_then(|n| n.checked_add(o as u64))
        .ok_or_else(|| Error::DimOverflow("PCA model".into()))?;
    r.expect_rest(n, 8, "PCA model")?;
    let mean = r.f64s(i as usize)?;
    let eig = r.f64s(o as usize)?;
    let basis = r.f64s(io as usize)?;
    let rows = basis
        .chunks(i.max(1) as usize)
        .take(o as usize)
        .map(|r| r.to_vec())
        .collect();
    PcaModel::from_parts(mean, rows, eig, whiten)
}

fn check_finite(v: &[f32], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidGrid(format!("{what} contains non-finite values")))
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_feature_grid(path: &Path) -> Result<FeatureGrid> {
    decode_feature_grid(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// text formats

/// Non-empty, non-comment lines with their 1-based numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then(|| (i + 1, l.split_whitespace().collect()))
    })
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn num<T: std::str::FromStr>(path: &Path, line: usize, field: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| parse_err(path, line, format!("cannot parse {field} from {s:?}")))
}

fn pose_fields(path: &Path, line: usize, f: &[&str]) -> Result<Pose> {
    let v: Vec<f64> = f
        .iter()
        .map(|s| num(path, line, "pose value", s))
        .collect::<Result<_>>()?;
    Pose::from_quaternion([v[0], v[1], v[2], v[3]], Vector3::new(v[4], v[5], v[6]))
        .map_err(|e| parse_err(path, line, e.to_string()))
}

fn pose_text(p: &Pose) -> String {
    let q = p.quaternion();
    let t = p.translation();
    format!("{} {} {} {} {} {} {}", q[0], q[1], q[2], q[3], t.x, t.y, t.z)
}

fn intrinsics_fields(path: &Path, line: usize, f: &[&str]) -> Result<Intrinsics> {
    let v: Vec<f64> = f
        .iter()
        .map(|s| num(path, line, "intrinsics", s))
        .collect::<Result<_>>()?;
    Intrinsics::new(v[0], v[1], v[2], v[3]).map_err(|e| parse_err(path, line, e.to_string()))
}

fn intrinsics_text(k: &Intrinsics) -> String {
    format!("{} {} {} {}", k.fx, k.fy, k.cx, k.cy)
}

/// `id qw qx qy qz tx ty tz` per line; world→camera.
pub fn format_poses<'a>(poses: impl IntoIterator<Item = (&'a str, &'a Pose)>) -> String {
    let mut s = String::from("# id qw qx qy qz tx ty tz (world to camera)\n");
    for (id, p) in poses {
        let _ = writeln!(s, "{id} {}", pose_text(p));
    }
    s
}

pub fn parse_poses(path: &Path, text: &str) -> Result<Vec<(String, Pose)>> {
    content_lines(text)
        .map(|(line, f)| {
            if f.len() != 8 {
                return Err(parse_err(path, line, format!("expected 8 fields, found {}", f.len())));
            }
            Ok((f[0].to_string(), pose_fields(path, line, &f[1..])?))
        })
        .collect()
}

pub fn read_poses(path: &Path) -> Result<Vec<(String, Pose)>> {
    parse_poses(path, &fs::read_to_string(path)?)
}

/// One reference image in a manifest; file paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub image_dims: (u32, u32),
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub global: PathBuf,
    pub sparse: PathBuf,
    pub keypoints: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub pca: Option<PathBuf>,
    pub entries: Vec<ManifestEntry>,
}

/// ```text
/// pca <path>
/// ref <id> <w> <h> <fx> <fy> <cx> <cy> <qw> <qx> <qy> <qz> <tx> <ty> <tz> <global> <sparse> <keypoints>
/// ```
pub fn format_manifest(m: &Manifest) -> String {
    let mut s = String::from("# s2dloc reference manifest\n");
    if let Some(p) = &m.pca {
        let _ = writeln!(s, "pca {}", p.display());
    }
    for e in &m.entries {
        let _ = writeln!(
            s,
            "ref {} {} {} {} {} {} {} {}",
            e.id,
            e.image_dims.0,
            e.image_dims.1,
            intrinsics_text(&e.intrinsics),
            pose_text(&e.pose),
            e.global.display(),
            e.sparse.display(),
            e.keypoints.display()
        );
    }
    s
}

pub fn parse_manifest(path: &Path, text: &str) -> Result<Manifest> {
    let mut m = Manifest::default();
    for (line, f) in content_lines(text) {
        match f[0] {
            "pca" if f.len() == 2 => m.pca = Some(PathBuf::from(f[1])),
            "ref" if f.len() == 18 => m.entries.push(ManifestEntry {
                id: f[1].to_string(),
                image_dims: (num(path, line, "width", f[2])?, num(path, line, "height", f[3])?),
                intrinsics: intrinsics_fields(path, line, &f[4..8])?,
                pose: pose_fields(path, line, &f[8..15])?,
                global: PathBuf::from(f[15]),
                sparse: PathBuf::from(f[16]),
                keypoints: PathBuf::from(f[17]),
            }),
            other => {
                return Err(parse_err(
                    path,
                    line,
                    format!("unrecognized record {other:?} with {} fields", f.len()),
                ))
            }
        }
    }
    Ok(m)
}

/// One query in a query list; paths relative to the list's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryListEntry {
    pub id: String,
    pub image_dims: (u32, u32),
    pub intrinsics: Intrinsics,
    pub dense: PathBuf,
    pub global: PathBuf,
}

/// `<id> <w> <h> <fx> <fy> <cx> <cy> <dense> <global>` per line.
pub fn format_query_list(entries: &[QueryListEntry]) -> String {
    let mut s = String::from("# id width height fx fy cx cy dense global\n");
    for e in entries {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {}",
            e.id,
            e.image_dims.0,
            e.image_dims.1,
            intrinsics_text(&e.intrinsics),
            e.dense.display(),
            e.global.display()
        );
    }
    s
}

pub fn parse_query_list(path: &Path, text: &str) -> Result<Vec<QueryListEntry>> {
    content_lines(text)
        .map(|(line, f)| {
            if f.len() != 9 {
                return Err(parse_err(path, line, format!("expected 9 fields, found {}", f.len())));
            }
            Ok(QueryListEntry {
                id: f[0].to_string(),
                image_dims: (num(path, line, "width", f[1])?, num(path, line, "height", f[2])?),
                intrinsics: intrinsics_fields(path, line, &f[3..7])?,
                dense: PathBuf::from(f[7]),
                global: PathBuf::from(f[8]),
            })
        })
        .collect()
}

pub const RESULTS_HEADER: [&str; 12] = [
    "query_id",
    "localized",
    "qw",
    "qx",
    "qy",
    "qz",
    "tx",
    "ty",
    "tz",
    "inliers",
    "best_ref",
    "neighbors_tried",
];

pub fn format_results(results: &[LocalizationResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULTS_HEADER).map_err(csv_err)?;
    for r in results {
        let mut rec: Vec<String> = vec![r.query_id.clone(), (r.pose.is_some() as u8).to_string()];
        match &r.pose {
            Some(p) => {
                let q = p.quaternion();
                let t = p.translation();
                rec.extend([q[0], q[1], q[2], q[3], t.x, t.y, t.z].iter().map(|v| v.to_string()));
            }
            None => rec.extend(std::iter::repeat_n(String::new(), 7)),
        }
        rec.push(r.inlier_count.to_string());
        rec.push(r.best_reference_id.clone().unwrap_or_default());
        rec.push(r.neighbors_tried.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Reads a results file. Only the fields stored in it are restored.
pub fn parse_results(path: &Path, text: &str) -> Result<Vec<LocalizationResult>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header = rd.headers().map_err(csv_err)?.clone();
    if header.iter().ne(RESULTS_HEADER) {
        return Err(parse_err(path, 1, "unexpected header"));
    }
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(path, line, e.to_string()))?;
        let f: Vec<&str> = rec.iter().collect();
        let pose = match f[1] {
            "1" => Some(pose_fields(path, line, &f[2..9])?),
            "0" => None,
            other => return Err(parse_err(path, line, format!("bad localized flag {other:?}"))),
        };
        out.push(LocalizationResult {
            query_id: f[0].to_string(),
            pose,
            inlier_count: num(path, line, "inliers", f[9])?,
            best_reference_id: (!f[10].is_empty()).then(|| f[10].to_string()),
            accepted_match_count: 0,
            neighbors_tried: num(path, line, "neighbors_tried", f[11])?,
            fallback: false,
        });
    }
    Ok(out)
}

fn threshold_label(m: f64, d: f64) -> String {
    format!("{m}m, {d}deg")
}

/// Aligned table: one row per threshold, then the localized count.
pub fn format_recall_table(r: &RecallReport) -> String {
    let labels: Vec<String> = r.thresholds.iter().map(|(m, d)| threshold_label(*m, *d)).collect();
    let width = labels.iter().map(|l| l.len()).max().unwrap_or(0).max("threshold".len());
    let mut s = format!("{:<width$}  {:>7}\n", "threshold", "recall");
    for (l, v) in labels.iter().zip(&r.recalls) {
        let _ = writeln!(s, "{l:<width$}  {v:>7.1}");
    }
    let _ = writeln!(s, "localized {}/{}", r.localized, r.total);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(w: usize, h: usize, c: usize, seed: u64) -> FeatureGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureGrid::new(w, h, c, (0..w * h * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn grid_round_trip_is_bit_exact() {
        let g = random_grid(7, 5, 3, 1);
        let bytes = encode_feature_grid(&g).unwrap();
        assert_eq!(bytes.len(), 16 + 7 * 5 * 3 * 4);
        let back = decode_feature_grid(&bytes).unwrap();
        assert_eq!(
            back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!((back.width(), back.height(), back.channels()), (7, 5, 3));
    }

    #[test]
    fn grid_header_errors() {
        let mut bytes = encode_feature_grid(&random_grid(2, 2, 2, 2)).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_feature_grid(&bytes), Err(Error::BadMagic { .. })));

        let mut huge = b"FGRD".to_vec();
        huge.extend_from_slice(&(1u32 << 30).to_le_bytes());
        huge.extend_from_slice(&(1u32 << 30).to_le_bytes());
        huge.extend_from_slice(&1u32.to_le_bytes());
        huge.extend_from_slice(&[0u8; 64]);
        assert!(matches!(
            decode_feature_grid(&huge),
            Err(Error::TruncatedPayload { .. })
        ));

        let mut over = b"FGRD".to_vec();
        for _ in 0..3 {
            over.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(
            decode_feature_grid(&over),
            Err(Error::DimOverflow(_)) | Err(Error::TruncatedPayload { .. })
        ));
        assert!(matches!(
            decode_feature_grid(b"FG"),
            Err(Error::TruncatedPayload { .. })
        ));
        let ok = encode_feature_grid(&random_grid(2, 2, 2, 3)).unwrap();
        assert!(matches!(
            decode_feature_grid(&ok[..ok.len() - 1]),
            Err(Error::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn sparse_keypoint_global_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let descs: Vec<SparseDescriptor> = (0..6)
            .map(|k| SparseDescriptor::normalized((0..9).map(|_| rng.random_range(-1.0..1.0)).collect(), k))
            .collect();
        assert_eq!(decode_sparse(&encode_sparse(&descs).unwrap()).unwrap(), descs);
        assert!(decode_sparse(&encode_sparse(&[]).unwrap()).unwrap().is_empty());

        let kps: Vec<PixelPoint> = (0..4)
            .map(|i| PixelPoint::new(i as f64 + 0.5, 2.0 * i as f64))
            .collect();
        let lms: Vec<Landmark> = (0..4).map(|i| Landmark::new(i as f64, -0.25, 3.0)).collect();
        let (k2, l2) = decode_keypoints(&encode_keypoints(&kps, &lms).unwrap()).unwrap();
        assert_eq!((k2, l2), (kps, lms));

        let g = GlobalDescriptor::from_raw(vec![3.0, 4.0]).unwrap();
        assert_eq!(decode_global(&encode_global(&g).unwrap()).unwrap(), g.values());
        assert!(matches!(decode_global(b"SDSC\0\0\0\0"), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn pca_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<Vec<f32>> = (0..10)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let m = crate::retrieval::fit_pca(&data, 4).unwrap().with_whitening(true);
        let back = decode_pca(&encode_pca(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn text_round_trips() {
        let p = Pose::from_quaternion([0.9, 0.1, -0.3, 0.2], Vector3::new(1.5, -2.0, 0.125)).unwrap();
        let text = format_poses([("a", &p), ("b", &Pose::identity())]);
        let back = parse_poses(Path::new("x"), &text).unwrap();
        assert_eq!(back[0].0, "a");
        assert_eq!(back[0].1.quaternion(), p.quaternion());
        assert_eq!(back[0].1.translation(), p.translation());
        assert!(matches!(
            parse_poses(Path::new("x"), "a 1 0 0\n"),
            Err(Error::Parse { line: 1, .. })
        ));

        let k = Intrinsics::new(400.0, 400.0, 255.5, 255.5).unwrap();
        let m = Manifest {
            pca: Some("pca.pcam".into()),
            entries: vec![ManifestEntry {
                id: "r0".into(),
                image_dims: (512, 512),
                intrinsics: k,
                pose: p,
                global: "r0.gdsc".into(),
                sparse: "r0.sdsc".into(),
                keypoints: "r0.kplm".into(),
            }],
        };
        let back = parse_manifest(Path::new("m"), &format_manifest(&m)).unwrap();
        assert_eq!(back.entries[0].pose.quaternion(), p.quaternion());
        assert_eq!(back.pca, m.pca);
        assert_eq!(back.entries[0].intrinsics, k);

        let q = vec![QueryListEntry {
            id: "q0".into(),
            image_dims: (64, 32),
            intrinsics: k,
            dense: "q0.fgrd".into(),
            global: "q0.gdsc".into(),
        }];
        assert_eq!(parse_query_list(Path::new("q"), &format_query_list(&q)).unwrap(), q);
    }

    #[test]
    fn results_csv_round_trip() {
        let p = Pose::from_quaternion([0.5, 0.5, -0.5, 0.5], Vector3::new(0.1, 0.2, 0.3)).unwrap();
        let rs = vec![
            LocalizationResult {
                query_id: "q0".into(),
                pose: Some(p),
                inlier_count: 42,
                best_reference_id: Some("r3".into()),
                accepted_match_count: 0,
                neighbors_tried: 15,
                fallback: false,
            },
            LocalizationResult {
                query_id: "q1".into(),
                pose: None,
                inlier_count: 3,
                best_reference_id: None,
                accepted_match_count: 0,
                neighbors_tried: 15,
                fallback: false,
            },
        ];
        let text = format_results(&rs).unwrap();
        assert!(text.starts_with("query_id,localized,qw,qx,qy,qz,tx,ty,tz,inliers,best_ref,neighbors_tried\n"));
        let back = parse_results(Path::new("r"), &text).unwrap();
        assert_eq!(back[1], rs[1]);
        assert_eq!(back[0].pose.unwrap().quaternion(), p.quaternion());
        assert_eq!(back[0].inlier_count, 42);
    }

    #[test]
    fn recall_table_layout() {
        let r = RecallReport {
            thresholds: crate::pipeline::DEFAULT_THRESHOLDS.to_vec(),
            recalls: vec![50.0, 75.0, 100.0],
            localized: 4,
            total: 4,
        };
        let t = format_recall_table(&r);
        assert!(t.contains("0.25m, 2deg     50.0"), "{t}");
        assert!(t.ends_with("localized 4/4\n"));
    }
}
