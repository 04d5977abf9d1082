//! Reading and writing scene, database and query directories.

use std::fs;
use std::path::{Path, PathBuf};

use s2dloc::io::{
    decode_global, decode_keypoints, decode_pca, decode_sparse, encode_feature_grid, encode_global, encode_keypoints,
    encode_sparse, format_manifest, format_poses, format_query_list, parse_manifest, parse_query_list,
    read_feature_grid, write_bytes, Manifest, ManifestEntry, QueryListEntry,
};
use s2dloc::pipeline::{QueryInput, ReferenceDatabase, ReferenceEntry};
use s2dloc::retrieval::{apply_pca, GlobalDescriptor, PcaModel};
use s2dloc::synth::{query_id, reference_id, SyntheticTensors};
use s2dloc::{Error, Result};

pub const REFERENCES_MANIFEST: &str = "references.txt";
pub const QUERY_LIST: &str = "queries.txt";
pub const GT_POSES: &str = "gt_poses.txt";
pub const DB_MANIFEST: &str = "manifest.txt";
pub const PCA_FILE: &str = "pca.pcam";
pub const RUN_CONFIG: &str = "run_config.txt";

fn base_dir(file: &Path) -> &Path {
    file.parent().unwrap_or(Path::new(""))
}

/// Accepts ids usable as file names.
pub fn check_id(id: &str) -> Result<()> {
    let ok =
        !id.is_empty() && id != "." && id != ".." && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "id {id:?} is not a plain file-name token"
        )))
    }
}

/// A reference as stored on disk: global descriptor not yet normalized or
/// projected.
pub struct StoredReference {
    pub entry: ReferenceEntry,
    pub raw_global: Vec<f32>,
}

pub struct LoadedManifest {
    pub references: Vec<StoredReference>,
    pub pca: Option<PcaModel>,
}

pub fn load_manifest(path: &Path) -> Result<LoadedManifest> {
    let manifest = parse_manifest(path, &fs::read_to_string(path)?)?;
    let dir = base_dir(path);
    let pca = match &manifest.pca {
        Some(p) => Some(decode_pca(&fs::read(dir.join(p))?)?),
        None => None,
    };
    let mut references = Vec::with_capacity(manifest.entries.len());
    for m in &manifest.entries {
        let raw_global = decode_global(&fs::read(dir.join(&m.global))?)?;
        let descriptors = decode_sparse(&fs::read(dir.join(&m.sparse))?)?;
        let (keypoints, landmarks) = decode_keypoints(&fs::read(dir.join(&m.keypoints))?)?;
        let entry = ReferenceEntry {
            id: m.id.clone(),
            global: GlobalDescriptor::from_raw(raw_global.clone())?,
            intrinsics: m.intrinsics,
            pose: m.pose,
            keypoints,
            descriptors,
            landmarks,
            image_dims: m.image_dims,
        };
        entry.validate()?;
        references.push(StoredReference { entry, raw_global });
    }
    if let (Some(p), Some(r)) = (&pca, references.first()) {
        if r.raw_global.len() != p.out_dim() {
            return Err(Error::DimensionMismatch {
                expected: p.out_dim(),
                found: r.raw_global.len(),
            });
        }
    }
    Ok(LoadedManifest { references, pca })
}

pub struct Database {
    pub db: ReferenceDatabase,
    pub pca: Option<PcaModel>,
}

pub fn load_database(path: &Path) -> Result<Database> {
    let m = load_manifest(path)?;
    let db = ReferenceDatabase::new(m.references.into_iter().map(|r| r.entry).collect())?;
    Ok(Database { db, pca: m.pca })
}

/// Queries with their global descriptors mapped into the database space.
pub fn load_queries(path: &Path, pca: Option<&PcaModel>) -> Result<Vec<QueryInput>> {
    let list = parse_query_list(path, &fs::read_to_string(path)?)?;
    let dir = base_dir(path);
    list.iter()
        .map(|q| {
            let raw = decode_global(&fs::read(dir.join(&q.global))?)?;
            let global = match pca {
                Some(p) => apply_pca(p, &raw)?,
                None => GlobalDescriptor::from_raw(raw)?,
            };
            q.intrinsics.validate()?;
            Ok(QueryInput {
                id: q.id.clone(),
                intrinsics: q.intrinsics,
                dense: read_feature_grid(&dir.join(&q.dense))?,
                global,
                image_dims: q.image_dims,
            })
        })
        .collect()
}

fn global_bytes(values: &[f32]) -> Result<Vec<u8>> {
    encode_global(&GlobalDescriptor::from_raw(values.to_vec())?)
}

/// Writes a synthetic scene directory: per-image tensors, the reference
/// manifest, the query list and the query ground-truth poses.
pub fn write_scene(out: &Path, t: &SyntheticTensors) -> Result<()> {
    let mut manifest = Manifest::default();
    for (i, r) in t.references.iter().enumerate() {
        let id = reference_id(i);
        let rel = |ext: &str| PathBuf::from("references").join(format!("{id}.{ext}"));
        write_bytes(&out.join(rel("gdsc")), &global_bytes(r.global.values())?)?;
        write_bytes(&out.join(rel("sdsc")), &encode_sparse(&r.descriptors)?)?;
        write_bytes(&out.join(rel("kplm")), &encode_keypoints(&r.keypoints, &r.landmarks)?)?;
        manifest.entries.push(ManifestEntry {
            id: id.clone(),
            image_dims: r.camera.image_dims,
            intrinsics: r.camera.intrinsics,
            pose: r.camera.pose,
            global: rel("gdsc"),
            sparse: rel("sdsc"),
            keypoints: rel("kplm"),
        });
    }
    let mut queries = Vec::new();
    let mut gt = Vec::new();
    for (i, q) in t.queries.iter().enumerate() {
        let id = query_id(i);
        let rel = |ext: &str| PathBuf::from("queries").join(format!("{id}.{ext}"));
        write_bytes(&out.join(rel("fgrd")), &encode_feature_grid(&q.grid)?)?;
        write_bytes(&out.join(rel("gdsc")), &global_bytes(q.global.values())?)?;
        queries.push(QueryListEntry {
            id: id.clone(),
            image_dims: q.camera.image_dims,
            intrinsics: q.camera.intrinsics,
            dense: rel("fgrd"),
            global: rel("gdsc"),
        });
        gt.push((id, q.camera.pose));
    }
    write_bytes(&out.join(REFERENCES_MANIFEST), format_manifest(&manifest).as_bytes())?;
    write_bytes(&out.join(QUERY_LIST), format_query_list(&queries).as_bytes())?;
    let poses = format_poses(gt.iter().map(|(id, p)| (id.as_str(), p)));
    write_bytes(&out.join(GT_POSES), poses.as_bytes())
}

/// Writes a self-contained database directory with projected globals.
pub fn write_database(
    out: &Path,
    refs: &[StoredReference],
    pca: &PcaModel,
    projected: &[GlobalDescriptor],
) -> Result<()> {
    let mut manifest = Manifest {
        pca: Some(PathBuf::from(PCA_FILE)),
        entries: Vec::with_capacity(refs.len()),
    };
    write_bytes(&out.join(PCA_FILE), &s2dloc::io::encode_pca(pca)?)?;
    for (r, g) in refs.iter().zip(projected) {
        let e = &r.entry;
        check_id(&e.id)?;
        let rel = |dir: &str, ext: &str| PathBuf::from(dir).join(format!("{}.{ext}", e.id));
        write_bytes(&out.join(rel("globals", "gdsc")), &encode_global(g)?)?;
        write_bytes(&out.join(rel("sparse", "sdsc")), &encode_sparse(&e.descriptors)?)?;
        write_bytes(
            &out.join(rel("keypoints", "kplm")),
            &encode_keypoints(&e.keypoints, &e.landmarks)?,
        )?;
        manifest.entries.push(ManifestEntry {
            id: e.id.clone(),
            image_dims: e.image_dims,
            intrinsics: e.intrinsics,
            pose: e.pose,
            global: rel("globals", "gdsc"),
            sparse: rel("sparse", "sdsc"),
            keypoints: rel("keypoints", "kplm"),
        });
    }
    write_bytes(&out.join(DB_MANIFEST), format_manifest(&manifest).as_bytes())
}
