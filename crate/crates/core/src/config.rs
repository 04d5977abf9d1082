//! Run configuration in a `key = value` text format.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matching::{MatchOptions, RatioTestConfig};
use crate::pipeline::LocalizerConfig;
use crate::pose::RansacConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub n_neighbors: usize,
    pub alpha: f64,
    pub fraction: f64,
    pub inlier_threshold_px: f64,
    pub min_inliers: usize,
    pub confidence: f64,
    pub max_iterations: usize,
    pub seed: u64,
    pub refinement: bool,
    pub pca_dim: usize,
    pub fallback_retrieval_pose: bool,
    pub subpixel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ratio = RatioTestConfig::default();
        let ransac = RansacConfig::default();
        Self {
            n_neighbors: 15,
            alpha: ratio.alpha,
            fraction: ratio.fraction,
            inlier_threshold_px: ransac.inlier_threshold_px,
            min_inliers: ransac.min_inliers,
            confidence: ransac.confidence,
            max_iterations: ransac.max_iterations,
            seed: ransac.seed,
            refinement: ransac.refine,
            pca_dim: 1024,
            fallback_retrieval_pose: false,
            subpixel: false,
        }
    }
}

pub const KEYS: [&str; 12] = [
    "n_neighbors",
    "alpha",
    "fraction",
    "inlier_threshold_px",
    "min_inliers",
    "confidence",
    "max_iterations",
    "seed",
    "refinement",
    "pca_dim",
    "fallback_retrieval_pose",
    "subpixel",
];

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "1" | "on" | "yes" => Some(true),
        "false" | "0" | "off" | "no" => Some(false),
        _ => None,
    }
}

impl RunConfig {
    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("cannot parse {key} from {value:?}")))
        }
        let b = |key: &str| {
            parse_bool(value).ok_or_else(|| Error::InvalidConfig(format!("{key} expects a boolean, got {value:?}")))
        };
        match key {
            "n_neighbors" => self.n_neighbors = p(key, value)?,
            "alpha" => self.alpha = p(key, value)?,
            "fraction" => self.fraction = p(key, value)?,
            "inlier_threshold_px" => self.inlier_threshold_px = p(key, value)?,
            "min_inliers" => self.min_inliers = p(key, value)?,
            "confidence" => self.confidence = p(key, value)?,
            "max_iterations" => self.max_iterations = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "refinement" => self.refinement = b(key)?,
            "pca_dim" => self.pca_dim = p(key, value)?,
            "fallback_retrieval_pose" => self.fallback_retrieval_pose = b(key)?,
            "subpixel" => self.subpixel = b(key)?,
            other => return Err(Error::InvalidConfig(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, path: &Path, text: &str) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(err(format!("duplicate key {k:?}")));
            }
            self.set(k, v).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(path, &std::fs::read_to_string(path)?)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.localizer().validate()?;
        if self.pca_dim == 0 {
            return Err(Error::InvalidConfig("pca_dim must be at least 1".into()));
        }
        Ok(())
    }

    pub fn localizer(&self) -> LocalizerConfig {
        LocalizerConfig {
            n_neighbors: self.n_neighbors,
            ratio: RatioTestConfig {
                alpha: self.alpha,
                fraction: self.fraction,
            },
            ransac: RansacConfig {
                inlier_threshold_px: self.inlier_threshold_px,
                max_iterations: self.max_iterations,
                confidence: self.confidence,
                min_inliers: self.min_inliers,
                seed: self.seed,
                refine: self.refinement,
            },
            matching: MatchOptions {
                subpixel: self.subpixel,
            },
            fallback_retrieval_pose: self.fallback_retrieval_pose,
        }
    }

    /// Every field, defaults included, in the file format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let vals: [String; 12] = [
            self.n_neighbors.to_string(),
            self.alpha.to_string(),
            self.fraction.to_string(),
            self.inlier_threshold_px.to_string(),
            self.min_inliers.to_string(),
            self.confidence.to_string(),
            self.max_iterations.to_string(),
            self.seed.to_string(),
            self.refinement.to_string(),
            self.pca_dim.to_string(),
            self.fallback_retrieval_pose.to_string(),
            self.subpixel.to_string(),
        ];
        for (k, v) in KEYS.iter().zip(vals) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_operating_point() {
        let c = RunConfig::default();
        assert_eq!(
            (c.n_neighbors, c.min_inliers, c.alpha, c.fraction),
            (15, 15, 0.9, 0.006)
        );
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text(
            Path::new("c"),
            "# comment\nalpha = 1.5\nrefinement = off\n\nseed=42 # trailing\n",
        )
        .unwrap();
        assert_eq!((c.alpha, c.refinement, c.seed), (1.5, false, 42));
        let mut d = RunConfig::default();
        d.apply_text(Path::new("c"), &c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn rejects_bad_input() {
        let mut c = RunConfig::default();
        assert!(matches!(
            c.apply_text(Path::new("c"), "bogus = 1"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(c.apply_text(Path::new("c"), "alpha = x").is_err());
        assert!(c.apply_text(Path::new("c"), "alpha 1").is_err());
        assert!(c.apply_text(Path::new("c"), "seed = 1\nseed = 2").is_err());
        c.min_inliers = 2;
        assert!(c.validate().is_err());
    }
}
