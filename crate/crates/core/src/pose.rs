//! Absolute pose from 2D-3D correspondences: a P3P minimal solver, a seeded
//! RANSAC loop over it, and damped least-squares refinement on the inliers.

use nalgebra::{Matrix2x6, Matrix3, Matrix4, Matrix6, Rotation3, SymmetricEigen, Vector2, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{bearing, project, Intrinsics, Landmark, PixelPoint, Pose, MIN_DEPTH};

/// Minimum triangle area (m²) for a non-degenerate P3P sample.
pub const MIN_TRIANGLE_AREA: f64 = 1e-9;

/// Self-reprojection tolerance for P3P candidates, pixels.
pub const P3P_REPROJECTION_TOL: f64 = 1e-6;

/// RANSAC iterations evaluated together before the stopping rule is checked.
const ITERATION_BATCH: usize = 32;

/// Refine / re-select rounds after RANSAC.
const REFINE_ROUNDS: usize = 4;

/// An observed query pixel paired with a world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence2D3D {
    pub pixel: PixelPoint,
    pub landmark: Landmark,
}

impl Correspondence2D3D {
    pub fn new(pixel: PixelPoint, landmark: Landmark) -> Self {
        Self { pixel, landmark }
    }
}

/// Pixel distance between the projected landmark and the observation, or
/// `+∞` when the landmark is behind the camera.
pub fn reprojection_error(pose: &Pose, k: &Intrinsics, c: &Correspondence2D3D) -> f64 {
    match project(pose, k, &c.landmark) {
        Ok(p) => p.distance(&c.pixel),
        Err(_) => f64::INFINITY,
    }
}

// ---------------------------------------------------------------------------
// P3P

/// All poses (up to four) consistent with three correspondences.
pub fn solve_p3p(
    c1: &Correspondence2D3D,
    c2: &Correspondence2D3D,
    c3: &Correspondence2D3D,
    k: &Intrinsics,
) -> Result<Vec<Pose>> {
    let corrs = [c1, c2, c3];
    let world = corrs.map(|c| c.landmark.position);
    let rays = corrs.map(|c| bearing(k, &c.pixel));
    let poses = solve_p3p_bearings(&world, &rays)?;
    let poses: Vec<Pose> = poses
        .into_iter()
        .filter(|p| {
            corrs
                .iter()
                .all(|c| reprojection_error(p, k, c) <= P3P_REPROJECTION_TOL)
        })
        .collect();
    if poses.is_empty() {
        return Err(Error::NoRealSolution);
    }
    Ok(poses)
}

/// P3P on unit bearing vectors. The three camera-to-point distances are
/// written as `s1`, `s2 = u·s1`, `s3 = v·s1`; eliminating `u` from the law of
/// cosines leaves a quartic in `v`. Each real root is polished, then the
/// camera-frame triangle is aligned with the world triangle.
pub fn solve_p3p_bearings(world: &[Vector3<f64>; 3], rays: &[Vector3<f64>; 3]) -> Result<Vec<Pose>> {
    let [p1, p2, p3] = world;
    let area = 0.5 * (p2 - p1).cross(&(p3 - p1)).norm();
    if !(area > MIN_TRIANGLE_AREA) {
        return Err(Error::DegenerateConfiguration("landmarks are collinear or coincident"));
    }
    let a2 = (p2 - p3).norm_squared();
    let b2 = (p1 - p3).norm_squared();
    let c2 = (p1 - p2).norm_squared();
    let cos_a = rays[1].dot(&rays[2]);
    let cos_b = rays[0].dot(&rays[2]);
    let cos_g = rays[0].dot(&rays[1]);

    // u = n(v) / d(v)
    let kk = (a2 - c2) / b2;
    let n = [1.0 + kk, -2.0 * kk * cos_b, kk - 1.0];
    let d = [2.0 * cos_g, -2.0 * cos_a];
    // 1 + v² - 2 v cos_b
    let q = [1.0, -2.0 * cos_b, 1.0];
    // d² + n² - 2 cos_g n d - (c²/b²) q d² = 0
    let d2 = poly_mul(&d, &d);
    let n2 = poly_mul(&n, &n);
    let nd = poly_mul(&n, &d);
    let qd2 = poly_mul(&q, &d2);
    let mut quartic = [0.0f64; 5];
    for (i, c) in quartic.iter_mut().enumerate() {
        *c = coef(&d2, i) + coef(&n2, i) - 2.0 * cos_g * coef(&nd, i) - (c2 / b2) * coef(&qd2, i);
    }

    let mut poses: Vec<Pose> = Vec::with_capacity(4);
    for v in real_roots(&quartic) {
        if v <= 0.0 {
            continue;
        }
        let qv = 1.0 + v * v - 2.0 * v * cos_b;
        if qv <= 0.0 {
            continue;
        }
        let s1 = (b2 / qv).sqrt();
        for u in u_candidates(v, &n, &d, qv, c2 / b2, cos_g) {
            if u <= 0.0 {
                continue;
            }
            let dist = polish_distances(Vector3::new(s1, u * s1, v * s1), [a2, b2, c2], [cos_a, cos_b, cos_g]);
            if dist.iter().any(|s| !(*s > 0.0)) {
                continue;
            }
            let cam = [rays[0] * dist[0], rays[1] * dist[1], rays[2] * dist[2]];
            if let Some(pose) = align_triangles(world, &cam) {
                let duplicate = poses.iter().any(|p| {
                    (p.rotation() - pose.rotation()).abs().max() < 1e-9
                        && (p.translation() - pose.translation()).abs().max() < 1e-9
                });
                if !duplicate {
                    poses.push(pose);
                }
            }
        }
    }
    if poses.is_empty() {
        return Err(Error::NoRealSolution);
    }
    Ok(poses)
}

/// Candidate values of `u` for a root `v`: the rational expression when its
/// denominator is well away from zero, otherwise both roots of the
/// `c²` distance equation.
fn u_candidates(v: f64, n: &[f64; 3], d: &[f64; 2], qv: f64, c2_b2: f64, cos_g: f64) -> Vec<f64> {
    let den = d[0] + d[1] * v;
    if den.abs() > 1e-8 {
        return vec![(n[0] + n[1] * v + n[2] * v * v) / den];
    }
    // u² - 2 u cos_g + 1 - (c²/b²) qv = 0
    let disc = cos_g * cos_g - 1.0 + c2_b2 * qv;
    if disc < 0.0 {
        return vec![];
    }
    let r = disc.sqrt();
    vec![cos_g + r, cos_g - r]
}

fn coef(p: &[f64], i: usize) -> f64 {
    p.get(i).copied().unwrap_or(0.0)
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_eval(p: &[f64], x: f64) -> (f64, f64) {
    // Horner for value and derivative; coefficients in ascending order.
    let mut val = 0.0;
    let mut der = 0.0;
    for &c in p.iter().rev() {
        der = der * x + val;
        val = val * x + c;
    }
    (val, der)
}

/// Real roots of a polynomial of degree ≤ 4 (ascending coefficients) from
/// the eigenvalues of its companion matrix, each polished by Newton steps.
pub(crate) fn real_roots(p: &[f64; 5]) -> Vec<f64> {
    let scale = p.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return vec![];
    }
    let mut deg = 4;
    while deg > 0 && p[deg].abs() <= 1e-14 * scale {
        deg -= 1;
    }
    let mut roots = match deg {
        0 => vec![],
        1 => vec![-p[0] / p[1]],
        _ => {
            let lead = p[deg];
            let mut comp = Matrix4::<f64>::zeros();
            for i in 1..deg {
                comp[(i, i - 1)] = 1.0;
            }
            for i in 0..deg {
                comp[(i, deg - 1)] = -p[i] / lead;
            }
            let sub = comp.view((0, 0), (deg, deg)).into_owned();
            sub.complex_eigenvalues()
                .iter()
                .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
                .map(|z| z.re)
                .collect()
        }
    };
    let poly = &p[..=deg];
    for r in roots.iter_mut() {
        for _ in 0..8 {
            let (f, df) = poly_eval(poly, *r);
            if df == 0.0 {
                break;
            }
            let step = f / df;
            let next = *r - step;
            if !next.is_finite() || poly_eval(poly, next).0.abs() > f.abs() {
                break;
            }
            *r = next;
            if step.abs() <= 1e-12 * (1.0 + r.abs()) {
                break;
            }
        }
    }
    roots
}

/// Gauss-Newton on the three law-of-cosines equations.
fn polish_distances(mut s: Vector3<f64>, sq: [f64; 3], cos: [f64; 3]) -> Vector3<f64> {
    let [a2, b2, c2] = sq;
    let [ca, cb, cg] = cos;
    let residual = |s: &Vector3<f64>| {
        Vector3::new(
            s[1] * s[1] + s[2] * s[2] - 2.0 * s[1] * s[2] * ca - a2,
            s[0] * s[0] + s[2] * s[2] - 2.0 * s[0] * s[2] * cb - b2,
            s[0] * s[0] + s[1] * s[1] - 2.0 * s[0] * s[1] * cg - c2,
        )
    };
    let mut r = residual(&s);
    for _ in 0..6 {
        let j = Matrix3::new(
            0.0,
            2.0 * (s[1] - s[2] * ca),
            2.0 * (s[2] - s[1] * ca),
            2.0 * (s[0] - s[2] * cb),
            0.0,
            2.0 * (s[2] - s[0] * cb),
            2.0 * (s[0] - s[1] * cg),
            2.0 * (s[1] - s[0] * cg),
            0.0,
        );
        let Some(step) = j.lu().solve(&r) else { break };
        let next = s - step;
        let rn = residual(&next);
        if !(rn.norm() < r.norm()) {
            break;
        }
        s = next;
        r = rn;
    }
    s
}

/// Rigid transform taking the world triangle onto the camera-frame triangle.
fn align_triangles(world: &[Vector3<f64>; 3], cam: &[Vector3<f64>; 3]) -> Option<Pose> {
    let frame = |p: &[Vector3<f64>; 3]| -> Option<Matrix3<f64>> {
        let e1 = (p[1] - p[0]).try_normalize(1e-15)?;
        let e3 = e1.cross(&(p[2] - p[0])).try_normalize(1e-15)?;
        let e2 = e3.cross(&e1);
        Some(Matrix3::from_columns(&[e1, e2, e3]))
    };
    let fw = frame(world)?;
    let fc = frame(cam)?;
    let r = fc * fw.transpose();
    // re-orthonormalize away rounding
    let r = nalgebra::UnitQuaternion::from_matrix(&r).to_rotation_matrix();
    let cw = (world[0] + world[1] + world[2]) / 3.0;
    let cc = (cam[0] + cam[1] + cam[2]) / 3.0;
    let t = cc - r * cw;
    Some(Pose::from_rotation(r, t))
}

// ---------------------------------------------------------------------------
// Refinement

/// Applies a 6-vector increment `(ω, δt)`: `R ← exp(ω)·R`, `t ← t + δt`.
pub fn perturb(pose: &Pose, delta: &Vector6<f64>) -> Pose {
    let omega = Vector3::new(delta[0], delta[1], delta[2]);
    let dt = Vector3::new(delta[3], delta[4], delta[5]);
    let r = Rotation3::new(omega) * Rotation3::from_matrix_unchecked(*pose.rotation());
    let r = nalgebra::UnitQuaternion::from_rotation_matrix(&r).to_rotation_matrix();
    Pose::from_rotation(r, pose.translation() + dt)
}

/// Signed reprojection residual `project(pose, landmark) - pixel`.
pub fn reprojection_residual(pose: &Pose, k: &Intrinsics, c: &Correspondence2D3D) -> Option<Vector2<f64>> {
    let p = project(pose, k, &c.landmark).ok()?;
    Some(Vector2::new(p.x - c.pixel.x, p.y - c.pixel.y))
}

/// Analytic Jacobian of the residual with respect to the increment used by
/// [`perturb`], evaluated at zero.
pub fn reprojection_jacobian(pose: &Pose, k: &Intrinsics, landmark: &Landmark) -> Option<Matrix2x6<f64>> {
    let rp = pose.rotation() * landmark.position;
    let x = rp + pose.translation();
    if x.z <= MIN_DEPTH {
        return None;
    }
    let iz = 1.0 / x.z;
    let dpi = nalgebra::Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * x.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * x.y * iz * iz,
    );
    // d(exp(ω) R p + t + δt) / d(ω, δt) = [-[Rp]x | I]
    let mut dx = nalgebra::Matrix3x6::zeros();
    dx.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-crate::geometry::skew(&rp)));
    dx.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    Some(dpi * dx)
}

/// Sum of squared reprojection errors; `+∞` if any point is behind the camera.
pub fn total_squared_error(pose: &Pose, k: &Intrinsics, corrs: &[Correspondence2D3D]) -> f64 {
    corrs
        .iter()
        .map(|c| match reprojection_residual(pose, k, c) {
            Some(r) => r.norm_squared(),
            None => f64::INFINITY,
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefineStatus {
    /// Cost decrease fell below the tolerance.
    Converged,
    /// Iteration or damping limit reached.
    Stopped,
    /// The normal equations were rank deficient; the initial pose is returned.
    SingularNormalEquations,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refinement {
    pub pose: Pose,
    pub status: RefineStatus,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
}

const REFINE_MAX_ITERATIONS: usize = 100;
const REFINE_MIN_DECREASE: f64 = 1e-10;

/// Levenberg-Marquardt on the total squared reprojection error. Only
/// cost-decreasing steps are taken, so the returned cost never exceeds the
/// initial one.
pub fn refine_pose(init: &Pose, inliers: &[Correspondence2D3D], k: &Intrinsics) -> Result<Refinement> {
    if inliers.len() < 4 {
        return Err(Error::TooFewCorrespondences { count: inliers.len() });
    }
    let initial_cost = total_squared_error(init, k, inliers);
    let mut out = Refinement {
        pose: *init,
        status: RefineStatus::Stopped,
        initial_cost,
        final_cost: initial_cost,
        iterations: 0,
    };
    if !initial_cost.is_finite() {
        return Ok(out);
    }

    let mut pose = *init;
    let mut cost = initial_cost;
    let mut lambda = 1e-3;
    for iter in 0..REFINE_MAX_ITERATIONS {
        out.iterations = iter + 1;
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for c in inliers {
            let (Some(j), Some(r)) = (
                reprojection_jacobian(&pose, k, &c.landmark),
                reprojection_residual(&pose, k, c),
            ) else {
                continue;
            };
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        if iter == 0 && is_rank_deficient(&h) {
            out.status = RefineStatus::SingularNormalEquations;
            return Ok(out);
        }
        if g.iter().all(|v| *v == 0.0) {
            out.status = RefineStatus::Converged;
            break;
        }

        let mut improved = false;
        while lambda < 1e12 {
            let mut a = h;
            for i in 0..6 {
                a[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let Some(chol) = a.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = -chol.solve(&g);
            let candidate = perturb(&pose, &delta);
            let new_cost = total_squared_error(&candidate, k, inliers);
            if new_cost < cost {
                let decrease = cost - new_cost;
                pose = candidate;
                cost = new_cost;
                lambda = (lambda * 0.1).max(1e-12);
                improved = true;
                if decrease < REFINE_MIN_DECREASE {
                    out.status = RefineStatus::Converged;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            out.status = RefineStatus::Converged;
            break;
        }
        if out.status == RefineStatus::Converged {
            break;
        }
    }
    out.pose = pose;
    out.final_cost = cost;
    Ok(out)
}

fn is_rank_deficient(h: &Matrix6<f64>) -> bool {
    if !h.iter().all(|v| v.is_finite()) {
        return true;
    }
    let ev = SymmetricEigen::new(*h).eigenvalues;
    let max = ev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = ev.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    max == 0.0 || min <= 1e-14 * max
}

// ---------------------------------------------------------------------------
// RANSAC

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub inlier_threshold_px: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub min_inliers: usize,
    pub seed: u64,
    /// Re-estimate the winning pose on its inliers with [`refine_pose`].
    pub refine: bool,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            inlier_threshold_px: 12.0,
            max_iterations: 5000,
            confidence: 0.99,
            min_inliers: 15,
            seed: 0,
            refine: true,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inlier_threshold_px > 0.0 && self.inlier_threshold_px.is_finite()) {
            return Err(Error::InvalidRansacConfig(format!(
                "inlier threshold must be positive, got {}",
                self.inlier_threshold_px
            )));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::InvalidRansacConfig(format!(
                "confidence must lie in (0, 1), got {}",
                self.confidence
            )));
        }
        if self.min_inliers < 4 {
            return Err(Error::InvalidRansacConfig(format!(
                "min_inliers must be at least 4, got {}",
                self.min_inliers
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidRansacConfig("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    /// Indices into the input correspondences, ascending.
    pub inliers: Vec<usize>,
    /// Sum of inlier reprojection errors, pixels.
    pub inlier_error: f64,
    pub iterations_run: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RansacResult {
    Pose(PoseEstimate),
    /// No hypothesis reached `min_inliers`.
    NoPose {
        best_inliers: usize,
        iterations_run: usize,
    },
}

impl RansacResult {
    pub fn estimate(&self) -> Option<&PoseEstimate> {
        match self {
            RansacResult::Pose(e) => Some(e),
            RansacResult::NoPose { .. } => None,
        }
    }

    pub fn inlier_count(&self) -> usize {
        match self {
            RansacResult::Pose(e) => e.inliers.len(),
            RansacResult::NoPose { best_inliers, .. } => *best_inliers,
        }
    }
}

/// Indices of the 3-subset drawn at iteration `i`; a pure function of
/// `(seed, i)`.
pub fn sample_indices(seed: u64, iteration: u64, n: usize) -> [usize; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    let s = rand::seq::index::sample(&mut rng, n, 3);
    [s.index(0), s.index(1), s.index(2)]
}

#[derive(Debug, Clone)]
struct Hypothesis {
    pose: Pose,
    inliers: Vec<usize>,
    error: f64,
}

impl Hypothesis {
    fn beats(&self, other: &Hypothesis) -> bool {
        self.inliers.len() > other.inliers.len()
            || (self.inliers.len() == other.inliers.len() && self.error < other.error)
    }
}

fn score(pose: Pose, corrs: &[Correspondence2D3D], k: &Intrinsics, threshold: f64) -> Hypothesis {
    let mut inliers = Vec::new();
    let mut error = 0.0;
    for (i, c) in corrs.iter().enumerate() {
        let e = reprojection_error(&pose, k, c);
        if e <= threshold {
            inliers.push(i);
            error += e;
        }
    }
    Hypothesis { pose, inliers, error }
}

fn run_iteration(i: usize, corrs: &[Correspondence2D3D], k: &Intrinsics, cfg: &RansacConfig) -> Option<Hypothesis> {
    let [a, b, c] = sample_indices(cfg.seed, i as u64, corrs.len());
    let poses = solve_p3p(&corrs[a], &corrs[b], &corrs[c], k).ok()?;
    let mut best: Option<Hypothesis> = None;
    for pose in poses {
        let h = score(pose, corrs, k, cfg.inlier_threshold_px);
        if best.as_ref().is_none_or(|b| h.beats(b)) {
            best = Some(h);
        }
    }
    best
}

/// Iterations needed to draw one all-inlier sample with the given confidence.
pub fn required_iterations(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    let w3 = inlier_ratio.powi(3);
    if w3 >= 1.0 {
        return 0;
    }
    if w3 <= 0.0 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - w3).ln();
    if n.is_finite() {
        (n.ceil().max(0.0) as usize).min(cap)
    } else {
        cap
    }
}

/// P3P-RANSAC. Iterations are evaluated in parallel batches but reduced in
/// iteration order, so the result does not depend on the thread count.
pub fn ransac_pnp(corrs: &[Correspondence2D3D], k: &Intrinsics, cfg: &RansacConfig) -> Result<RansacResult> {
    cfg.validate()?;
    let n = corrs.len();
    if n < 4 {
        return Err(Error::TooFewCorrespondences { count: n });
    }

    let mut best: Option<Hypothesis> = None;
    let mut needed = cfg.max_iterations;
    let mut done = 0;
    'outer: while done < needed {
        let end = (done + ITERATION_BATCH).min(cfg.max_iterations);
        let batch: Vec<Option<Hypothesis>> = (done..end)
            .into_par_iter()
            .map(|i| run_iteration(i, corrs, k, cfg))
            .collect();
        for h in batch {
            done += 1;
            if let Some(h) = h {
                if best.as_ref().is_none_or(|b| h.beats(b)) {
                    let ratio = h.inliers.len() as f64 / n as f64;
                    needed = required_iterations(ratio, cfg.confidence, cfg.max_iterations);
                    best = Some(h);
                }
            }
            if done >= needed {
                break 'outer;
            }
        }
    }

    let Some(mut best) = best else {
        return Ok(RansacResult::NoPose {
            best_inliers: 0,
            iterations_run: done,
        });
    };
    if best.inliers.len() < cfg.min_inliers {
        return Ok(RansacResult::NoPose {
            best_inliers: best.inliers.len(),
            iterations_run: done,
        });
    }
    if cfg.refine {
        // refine on the inliers, re-select inliers under the refined pose,
        // repeat while the set changes
        for _ in 0..REFINE_ROUNDS {
            let inlier_corrs: Vec<_> = best.inliers.iter().map(|&i| corrs[i]).collect();
            let refined = refine_pose(&best.pose, &inlier_corrs, k)?;
            if refined.status == RefineStatus::SingularNormalEquations {
                break;
            }
            let rescored = score(refined.pose, corrs, k, cfg.inlier_threshold_px);
            if rescored.inliers.len() < cfg.min_inliers {
                break;
            }
            let same = rescored.inliers == best.inliers;
            best = rescored;
            if same {
                break;
            }
        }
    }
    Ok(RansacResult::Pose(PoseEstimate {
        pose: best.pose,
        inliers: best.inliers,
        inlier_error: best.error,
        iterations_run: done,
    }))
}
