//! Retrieval, per-neighbor sparse-to-dense matching and P3P-RANSAC, and the
//! three-threshold recall benchmark.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{pose_error, Intrinsics, Landmark, PixelPoint, Pose};
use crate::matching::{match_reference_with, MatchOptions, RatioTestConfig};
use crate::pose::{ransac_pnp, Correspondence2D3D, RansacConfig, RansacResult};
use crate::retrieval::{rank, DescriptorDatabase, GlobalDescriptor};
use crate::tensor::{FeatureGrid, SparseDescriptor};

/// High, medium and coarse (meters, degrees).
pub const DEFAULT_THRESHOLDS: [(f64, f64); 3] = [(0.25, 2.0), (0.5, 5.0), (5.0, 10.0)];

/// One registered image.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEntry {
    pub id: String,
    pub global: GlobalDescriptor,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub keypoints: Vec<PixelPoint>,
    pub descriptors: Vec<SparseDescriptor>,
    pub landmarks: Vec<Landmark>,
    pub image_dims: (u32, u32),
}

impl ReferenceEntry {
    pub fn validate(&self) -> Result<()> {
        if self.keypoints.len() != self.descriptors.len() {
            return Err(Error::LengthMismatch {
                what: "keypoints vs descriptors",
                left: self.keypoints.len(),
                right: self.descriptors.len(),
            });
        }
        if self.keypoints.len() != self.landmarks.len() {
            return Err(Error::LengthMismatch {
                what: "keypoints vs landmarks",
                left: self.keypoints.len(),
                right: self.landmarks.len(),
            });
        }
        self.intrinsics.validate()?;
        let (w, h) = self.image_dims;
        for (index, kp) in self.keypoints.iter().enumerate() {
            if !(kp.x >= 0.0 && kp.y >= 0.0 && kp.x < w as f64 && kp.y < h as f64) {
                return Err(Error::KeypointOutOfBounds {
                    index,
                    x: kp.x,
                    y: kp.y,
                    width: w,
                    height: h,
                });
            }
        }
        if let Some(d) = self.descriptors.first() {
            if let Some(bad) = self.descriptors.iter().find(|x| x.dim() != d.dim()) {
                return Err(Error::DimensionMismatch {
                    expected: d.dim(),
                    found: bad.dim(),
                });
            }
        }
        Ok(())
    }

    pub fn descriptor_dim(&self) -> Option<usize> {
        self.descriptors.first().map(|d| d.dim())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryInput {
    pub id: String,
    pub intrinsics: Intrinsics,
    pub dense: FeatureGrid,
    pub global: GlobalDescriptor,
    pub image_dims: (u32, u32),
}

/// Validated references plus their global-descriptor index.
#[derive(Debug, Clone)]
pub struct ReferenceDatabase {
    entries: Vec<ReferenceEntry>,
    globals: DescriptorDatabase,
    local_dim: Option<usize>,
}

impl ReferenceDatabase {
    pub fn new(entries: Vec<ReferenceEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        let mut local_dim: Option<usize> = None;
        for e in &entries {
            e.validate()?;
            if let Some(d) = e.descriptor_dim() {
                match local_dim {
                    None => local_dim = Some(d),
                    Some(x) if x != d => return Err(Error::DimensionMismatch { expected: x, found: d }),
                    _ => {}
                }
            }
        }
        let globals = DescriptorDatabase::new(entries.iter().map(|e| (e.id.clone(), e.global.clone())).collect())?;
        Ok(Self {
            entries,
            globals,
            local_dim,
        })
    }

    pub fn entries(&self) -> &[ReferenceEntry] {
        &self.entries
    }

    pub fn globals(&self) -> &DescriptorDatabase {
        &self.globals
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizerConfig {
    pub n_neighbors: usize,
    pub ratio: RatioTestConfig,
    pub ransac: RansacConfig,
    pub matching: MatchOptions,
    /// Report the top-ranked reference pose when nothing reaches
    /// `min_inliers`.
    pub fallback_retrieval_pose: bool,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            n_neighbors: 15,
            ratio: RatioTestConfig::default(),
            ransac: RansacConfig::default(),
            matching: MatchOptions::default(),
            fallback_retrieval_pose: false,
        }
    }
}

impl LocalizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_neighbors == 0 {
            return Err(Error::InvalidConfig("n_neighbors must be at least 1".into()));
        }
        self.ratio.validate()?;
        self.ransac.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub query_id: String,
    pub pose: Option<Pose>,
    pub inlier_count: usize,
    pub best_reference_id: Option<String>,
    /// Ratio-test survivors summed over all neighbors tried.
    pub accepted_match_count: usize,
    pub neighbors_tried: usize,
    /// The pose is the top-ranked reference's, not an estimate.
    pub fallback: bool,
}

impl LocalizationResult {
    pub fn is_localized(&self) -> bool {
        self.pose.is_some()
    }
}

/// Outcome of matching and RANSAC against one retrieved neighbor.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborOutcome {
    pub rank: usize,
    pub reference: usize,
    pub accepted: usize,
    pub ransac: Option<RansacResult>,
}

impl NeighborOutcome {
    fn inliers(&self) -> usize {
        self.ransac.as_ref().map_or(0, |r| r.inlier_count())
    }
}

/// Matches `query` against one reference and runs RANSAC on the accepted
/// correspondences.
pub fn match_neighbor(
    query: &QueryInput,
    entry: &ReferenceEntry,
    cfg: &LocalizerConfig,
) -> Result<(usize, Option<RansacResult>)> {
    let candidates = match_reference_with(
        &query.dense,
        &entry.descriptors,
        &entry.landmarks,
        query.image_dims,
        &cfg.ratio,
        cfg.matching,
    )?;
    let corrs: Vec<Correspondence2D3D> = candidates
        .iter()
        .filter(|c| c.accepted)
        .map(|c| Correspondence2D3D::new(c.pixel, c.landmark))
        .collect();
    let accepted = corrs.len();
    if accepted < cfg.ransac.min_inliers.max(4) {
        return Ok((accepted, None));
    }
    Ok((accepted, Some(ransac_pnp(&corrs, &query.intrinsics, &cfg.ransac)?)))
}

/// Per-neighbor outcomes in retrieval order.
pub fn localize_detailed(
    query: &QueryInput,
    db: &ReferenceDatabase,
    cfg: &LocalizerConfig,
) -> Result<Vec<NeighborOutcome>> {
    cfg.validate()?;
    if let Some(d) = db.local_dim {
        if d != query.dense.channels() {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: query.dense.channels(),
            });
        }
    }
    let ranked = rank(&query.global, &db.globals, cfg.n_neighbors)?;
    ranked
        .par_iter()
        .enumerate()
        .map(|(r, hit)| {
            let (accepted, ransac) = match_neighbor(query, &db.entries[hit.index], cfg)?;
            Ok(NeighborOutcome {
                rank: r,
                reference: hit.index,
                accepted,
                ransac,
            })
        })
        .collect()
}

pub fn localize(query: &QueryInput, db: &ReferenceDatabase, cfg: &LocalizerConfig) -> Result<LocalizationResult> {
    let outcomes = localize_detailed(query, db, cfg)?;
    for o in &outcomes {
        log::debug!(
            "{}: rank {} {} accepted {} inliers {}",
            query.id,
            o.rank,
            db.entries[o.reference].id,
            o.accepted,
            o.inliers()
        );
    }
    let result = select(query, db, cfg, &outcomes);
    log::info!(
        "{}: {} ({} inliers)",
        query.id,
        match (&result.best_reference_id, result.fallback) {
            (Some(r), false) => format!("localized via {r}"),
            (Some(r), true) => format!("fell back to {r}"),
            (None, _) => "not localized".into(),
        },
        result.inlier_count
    );
    Ok(result)
}

/// Picks the neighbor with the most inliers; earlier-ranked neighbors win
/// ties.
fn select(
    query: &QueryInput,
    db: &ReferenceDatabase,
    cfg: &LocalizerConfig,
    outcomes: &[NeighborOutcome],
) -> LocalizationResult {
    let mut best: Option<(&NeighborOutcome, &crate::pose::PoseEstimate)> = None;
    for o in outcomes {
        let Some(e) = o.ransac.as_ref().and_then(|r| r.estimate()) else {
            continue;
        };
        // outcomes arrive in rank order, so only a strict gain displaces
        let better = best.is_none_or(|(_, b)| e.inliers.len() > b.inliers.len());
        if better {
            best = Some((o, e));
        }
    }
    let accepted_match_count = outcomes.iter().map(|o| o.accepted).sum();
    let mut result = LocalizationResult {
        query_id: query.id.clone(),
        pose: None,
        inlier_count: outcomes.iter().map(|o| o.inliers()).max().unwrap_or(0),
        best_reference_id: None,
        accepted_match_count,
        neighbors_tried: outcomes.len(),
        fallback: false,
    };
    match best {
        Some((o, e)) => {
            result.pose = Some(e.pose);
            result.inlier_count = e.inliers.len();
            result.best_reference_id = Some(db.entries[o.reference].id.clone());
        }
        None if cfg.fallback_retrieval_pose => {
            if let Some(top) = outcomes.first() {
                let entry = &db.entries[top.reference];
                result.pose = Some(entry.pose);
                result.best_reference_id = Some(entry.id.clone());
                result.fallback = true;
            }
        }
        None => {}
    }
    result
}

/// Localizes every query; queries run in parallel, results keep input order.
pub fn localize_all(
    queries: &[QueryInput],
    db: &ReferenceDatabase,
    cfg: &LocalizerConfig,
) -> Result<Vec<LocalizationResult>> {
    queries.par_iter().map(|q| localize(q, db, cfg)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    pub thresholds: Vec<(f64, f64)>,
    /// Percentages, one per threshold.
    pub recalls: Vec<f64>,
    pub localized: usize,
    pub total: usize,
}

pub fn evaluate_recall(
    results: &[LocalizationResult],
    gt: &HashMap<String, Pose>,
    thresholds: &[(f64, f64)],
) -> Result<RecallReport> {
    let mut hits = vec![0usize; thresholds.len()];
    let mut localized = 0;
    let mut seen = HashSet::new();
    for r in results {
        let truth = gt
            .get(&r.query_id)
            .ok_or_else(|| Error::MissingGroundTruth(r.query_id.clone()))?;
        if !seen.insert(r.query_id.as_str()) {
            return Err(Error::DuplicateId(r.query_id.clone()));
        }
        let Some(pose) = r.pose else { continue };
        localized += 1;
        let e = pose_error(&pose, truth);
        for (h, (tm, td)) in hits.iter_mut().zip(thresholds) {
            if e.position_m <= *tm && e.rotation_deg <= *td {
                *h += 1;
            }
        }
    }
    let total = results.len();
    let recalls = hits
        .iter()
        .map(|h| {
            if total == 0 {
                0.0
            } else {
                100.0 * *h as f64 / total as f64
            }
        })
        .collect();
    Ok(RecallReport {
        thresholds: thresholds.to_vec(),
        recalls,
        localized,
        total,
    })
}
