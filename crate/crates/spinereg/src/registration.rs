//! Rigid point-set registration by expectation maximization over a Gaussian
//! mixture.
//!
//! The baseline surface vertices act as mixture centroids and the follow-up
//! vertices as data points. Each EM iteration computes soft correspondence
//! posteriors (E-step), then solves the weighted Procrustes subproblem in
//! closed form for rotation, translation, optional uniform scale, and the
//! shared isotropic variance (M-step). An optional uniform outlier component
//! with mass `w` absorbs unmatched points such as surface lost to lytic
//! lesions; at `w = 0` the model reduces to the plain mixture objective.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3, SVD};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Tolerance on rotation orthonormality and determinant.
pub const ROTATION_TOL: f64 = 1e-9;

/// Number of data-point columns processed per parallel work unit in
/// [`register`]. Fixed chunking keeps the reduction order independent of the
/// thread count, so results are bit-identical for any `--threads` value.
const ESTEP_CHUNK: usize = 512;

/// Similarity transform `p -> s * R * p + t` with `R` a proper rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    scale: f64,
}

impl RigidTransform {
    /// Validates that `rotation` is orthonormal with determinant +1 (within
    /// [`ROTATION_TOL`]) and that `scale` is positive.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, scale: f64) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if !(ortho <= ROTATION_TOL) {
            return Err(Error::Precondition(format!(
                "rotation is not orthonormal (||R^T R - I|| = {ortho:.3e})"
            )));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= ROTATION_TOL) {
            return Err(Error::Precondition(format!(
                "rotation determinant {det} is not +1"
            )));
        }
        if !(scale > 0.0) {
            return Err(Error::Precondition(format!("scale {scale} must be positive")));
        }
        Ok(Self {
            rotation,
            translation,
            scale,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
            scale: 1.0,
        }
    }

    /// Rotation by `angle_rad` about the (not necessarily unit) `axis`.
    pub fn rotation_about_axis(axis: Vector3<f64>, angle_rad: f64) -> Self {
        let rotation = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(axis),
            angle_rad,
        )
        .into_inner();
        Self {
            rotation,
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn rotation_matrix(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation_vector(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    #[inline]
    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.scale * (self.rotation * p.coords) + self.translation)
    }

    /// `invert(T)` satisfies `invert(T).apply(T.apply(p)) == p`.
    pub fn invert(&self) -> Self {
        let rotation = self.rotation.transpose();
        let scale = 1.0 / self.scale;
        let translation = -(scale * (rotation * self.translation));
        Self {
            rotation,
            translation,
            scale,
        }
    }

    /// `second ∘ first`: apply `first`, then `second`.
    pub fn compose(second: &Self, first: &Self) -> Self {
        Self {
            rotation: second.rotation * first.rotation,
            translation: second.scale * (second.rotation * first.translation)
                + second.translation,
            scale: second.scale * first.scale,
        }
    }

    /// Geodesic distance (radians) between the rotation parts.
    pub fn rotation_angle_to(&self, other: &Self) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Serialize as a structured text record.
    ///
    /// Fields: `R` (row-major 9 reals), `t` (3 reals), `s`, `frame_from`,
    /// `frame_to`. Numbers use shortest round-trip formatting, so parsing the
    /// record reproduces the transform exactly.
    pub fn to_record(&self, frame_from: &str, frame_to: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "frame_from {frame_from}");
        let _ = writeln!(s, "frame_to {frame_to}");
        let r = &self.rotation;
        let _ = writeln!(
            s,
            "R {} {} {} {} {} {} {} {} {}",
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)]
        );
        let _ = writeln!(
            s,
            "t {} {} {}",
            self.translation.x, self.translation.y, self.translation.z
        );
        let _ = writeln!(s, "s {}", self.scale);
        s
    }

    /// Parse one record produced by [`to_record`]. Returns the transform and
    /// its `(frame_from, frame_to)` tags.
    pub fn from_record(text: &str, path: &Path) -> Result<(Self, String, String)> {
        let mut rotation: Option<Matrix3<f64>> = None;
        let mut translation: Option<Vector3<f64>> = None;
        let mut scale: Option<f64> = None;
        let mut frame_from = String::new();
        let mut frame_to = String::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, rest) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| Error::format(path, format!("bad record line {line:?}")))?;
            let nums = || -> Result<Vec<f64>> {
                rest.split_whitespace()
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|_| Error::format(path, format!("bad number {t:?}")))
                    })
                    .collect()
            };
            match key {
                "R" => {
                    let v = nums()?;
                    if v.len() != 9 {
                        return Err(Error::format(path, "R needs 9 reals"));
                    }
                    rotation = Some(Matrix3::from_row_slice(&v));
                }
                "t" => {
                    let v = nums()?;
                    if v.len() != 3 {
                        return Err(Error::format(path, "t needs 3 reals"));
                    }
                    translation = Some(Vector3::new(v[0], v[1], v[2]));
                }
                "s" => {
                    let v = nums()?;
                    if v.len() != 1 {
                        return Err(Error::format(path, "s needs 1 real"));
                    }
                    scale = Some(v[0]);
                }
                "frame_from" => frame_from = rest.trim().to_string(),
                "frame_to" => frame_to = rest.trim().to_string(),
                other => {
                    return Err(Error::format(path, format!("unknown record key {other:?}")));
                }
            }
        }
        let rotation = rotation.ok_or_else(|| Error::format(path, "missing R"))?;
        let translation = translation.ok_or_else(|| Error::format(path, "missing t"))?;
        let scale = scale.ok_or_else(|| Error::format(path, "missing s"))?;
        Ok((Self::new(rotation, translation, scale)?, frame_from, frame_to))
    }
}

/// Settings for [`register`].
#[derive(Debug, Clone)]
pub struct GmmConfig {
    /// Mass of the uniform outlier component, in `[0, 1)`. Zero reduces to
    /// the plain mixture objective.
    pub outlier_weight: f64,
    pub max_iterations: usize,
    /// Relative change of the objective below which EM stops.
    pub rel_tolerance: f64,
    /// Estimate the uniform scale `s`; when false, `s` stays exactly 1.
    pub estimate_scale: bool,
    /// Fold a centroid-mean alignment into the initial translation.
    pub prealign_centroids: bool,
    /// Lower clamp for the mixture variance (mm^2).
    pub sigma2_floor: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            outlier_weight: 0.1,
            max_iterations: 150,
            rel_tolerance: 1e-6,
            estimate_scale: false,
            prealign_centroids: true,
            sigma2_floor: 1e-10,
        }
    }
}

impl GmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.outlier_weight) {
            return Err(Error::Precondition(format!(
                "outlier weight {} not in [0, 1)",
                self.outlier_weight
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::Precondition("max_iterations must be positive".into()));
        }
        if !(self.rel_tolerance > 0.0) {
            return Err(Error::Precondition("rel_tolerance must be positive".into()));
        }
        if !(self.sigma2_floor > 0.0) {
            return Err(Error::Precondition("sigma2_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Correspondence posteriors `P(y_m | x_n)`, stored column-major: the entry
/// for centroid `m` and data point `n` sits at `p[n * m_count + m]`.
#[derive(Debug, Clone)]
pub struct Posteriors {
    p: Vec<f64>,
    m_count: usize,
    n_count: usize,
    /// Total posterior mass `Σ_{m,n} P(m, n)`.
    pub n_p: f64,
}

impl Posteriors {
    pub fn m_count(&self) -> usize {
        self.m_count
    }

    pub fn n_count(&self) -> usize {
        self.n_count
    }

    #[inline]
    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.p[n * self.m_count + m]
    }

    /// Build from an explicit column-major matrix; used by tests and small
    /// hand-constructed cases.
    pub fn from_column_major(p: Vec<f64>, m_count: usize, n_count: usize) -> Result<Self> {
        if p.len() != m_count * n_count {
            return Err(Error::Precondition(format!(
                "posterior matrix length {} != {m_count} x {n_count}",
                p.len()
            )));
        }
        let n_p = p.iter().sum();
        Ok(Self {
            p,
            m_count,
            n_count,
            n_p,
        })
    }
}

/// Outcome of [`register`].
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Maps centroid (baseline) space into data (follow-up) space.
    pub transform: RigidTransform,
    /// Final mixture variance (mm^2).
    pub sigma2: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value after each EM iteration; non-increasing.
    pub objective_history: Vec<f64>,
}

/// Initial variance `(1 / 3MN) Σ_{m,n} ||x_n - y_m||²`.
pub fn init_sigma2(data: &[Point3<f64>], centroids: &[Point3<f64>]) -> Result<f64> {
    if data.is_empty() || centroids.is_empty() {
        return Err(Error::Precondition(
            "init_sigma2 requires non-empty point sets".into(),
        ));
    }
    let mut sum = 0.0;
    for x in data {
        for y in centroids {
            sum += (x - y).norm_squared();
        }
    }
    Ok(sum / (3.0 * data.len() as f64 * centroids.len() as f64))
}

/// Uniform-outlier constant `c = (2πσ²)^{3/2} · w/(1-w) · M/N` added to each
/// posterior denominator.
fn outlier_constant(sigma2: f64, w: f64, m_count: usize, n_count: usize) -> f64 {
    if w == 0.0 {
        0.0
    } else {
        (2.0 * std::f64::consts::PI * sigma2).powf(1.5) * (w / (1.0 - w))
            * (m_count as f64 / n_count as f64)
    }
}

/// Posterior column for one data point, shifted by the minimum squared
/// distance before exponentiation so small variances cannot underflow the
/// numerator of the best match.
///
/// `dist2` holds `||x_n - T(y_m)||²` for every m on entry; on exit `col`
/// holds the posteriors. Returns the column sum.
fn posterior_column(dist2: &[f64], two_sigma2: f64, c: f64, col: &mut [f64]) -> f64 {
    let d_min = dist2.iter().copied().fold(f64::INFINITY, f64::min);
    let mut denom = c * (d_min / two_sigma2).exp();
    if !denom.is_finite() {
        // The outlier term dwarfs every Gaussian: the whole column is outlier.
        col.fill(0.0);
        return 0.0;
    }
    for (e, &d) in col.iter_mut().zip(dist2) {
        let v = (-(d - d_min) / two_sigma2).exp();
        *e = v;
        denom += v;
    }
    let inv = 1.0 / denom;
    let mut sum = 0.0;
    for e in col.iter_mut() {
        *e *= inv;
        sum += *e;
    }
    sum
}

/// E-step: correspondence posteriors of every (centroid, data) pair under the
/// current transform and variance.
pub fn e_step(
    data: &[Point3<f64>],
    centroids: &[Point3<f64>],
    transform: &RigidTransform,
    sigma2: f64,
    outlier_weight: f64,
) -> Result<Posteriors> {
    if !(sigma2 > 0.0) {
        return Err(Error::Precondition(format!(
            "sigma2 must be positive, got {sigma2}"
        )));
    }
    if !(0.0..1.0).contains(&outlier_weight) {
        return Err(Error::Precondition(format!(
            "outlier weight {outlier_weight} not in [0, 1)"
        )));
    }
    let m_count = centroids.len();
    let n_count = data.len();
    let moved: Vec<Point3<f64>> = centroids.iter().map(|y| transform.apply(y)).collect();
    let c = outlier_constant(sigma2, outlier_weight, m_count, n_count);
    let two_sigma2 = 2.0 * sigma2;

    let mut p = vec![0.0; m_count * n_count];
    let sums: Vec<f64> = p
        .par_chunks_mut(m_count)
        .enumerate()
        .map(|(n, col)| {
            let x = &data[n];
            let mut dist2 = vec![0.0; m_count];
            for (d, ty) in dist2.iter_mut().zip(&moved) {
                *d = (x - ty).norm_squared();
            }
            posterior_column(&dist2, two_sigma2, c, col)
        })
        .collect();
    let n_p = sums.iter().sum();
    Ok(Posteriors {
        p,
        m_count,
        n_count,
        n_p,
    })
}

/// Sufficient statistics the M-step needs from a posterior matrix.
#[derive(Debug, Clone)]
struct MStepStats {
    n_p: f64,
    /// `Σ_n p_n x_n` where `p_n` is the column sum.
    bx: Vector3<f64>,
    /// `Σ_m q_m y_m` where `q_m` is the row sum.
    by: Vector3<f64>,
    /// `Σ_{m,n} P(m,n) x_n y_m^T`.
    sxy: Matrix3<f64>,
    /// `Σ_n p_n ||x_n||²`.
    sx2: f64,
    /// `Σ_m q_m ||y_m||²`.
    sy2: f64,
}

impl MStepStats {
    fn from_posteriors(data: &[Point3<f64>], centroids: &[Point3<f64>], p: &Posteriors) -> Self {
        let m_count = centroids.len();
        let mut q = vec![0.0; m_count];
        let mut bx = Vector3::zeros();
        let mut sxy = Matrix3::zeros();
        let mut sx2 = 0.0;
        for (n, x) in data.iter().enumerate() {
            let col = &p.p[n * m_count..(n + 1) * m_count];
            let mut p_n = 0.0;
            let mut w = Vector3::zeros();
            for (m, (&pmn, y)) in col.iter().zip(centroids).enumerate() {
                p_n += pmn;
                w += pmn * y.coords;
                q[m] += pmn;
            }
            bx += p_n * x.coords;
            sx2 += p_n * x.coords.norm_squared();
            sxy += x.coords * w.transpose();
        }
        let mut by = Vector3::zeros();
        let mut sy2 = 0.0;
        for (qm, y) in q.iter().zip(centroids) {
            by += *qm * y.coords;
            sy2 += *qm * y.coords.norm_squared();
        }
        Self {
            n_p: p.n_p,
            bx,
            by,
            sxy,
            sx2,
            sy2,
        }
    }

    /// Closed-form weighted Procrustes solution. Returns the transform, the
    /// clamped variance, and the weighted sum of squared residuals at the
    /// optimum (used for the objective).
    fn solve(
        &self,
        estimate_scale: bool,
        sigma2_floor: f64,
    ) -> Result<(RigidTransform, f64, f64)> {
        let n_p = self.n_p;
        if !(n_p > f64::MIN_POSITIVE) {
            return Err(Error::Degenerate(
                "total posterior mass is zero (all points classified as outliers)".into(),
            ));
        }
        let mu_x = self.bx / n_p;
        let mu_y = self.by / n_p;
        // Centered second moments from raw sums.
        let a = self.sxy - self.bx * self.by.transpose() / n_p;
        let spread_x = (self.sx2 - self.bx.norm_squared() / n_p).max(0.0);
        let spread_y = (self.sy2 - self.by.norm_squared() / n_p).max(0.0);
        if spread_x <= 0.0 || spread_y <= 0.0 {
            return Err(Error::Degenerate(
                "posterior mass concentrated on a single point".into(),
            ));
        }

        let svd = SVD::new(a, true, true);
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v_t)) => (u, v_t),
            _ => return Err(Error::Degenerate("SVD of correlation matrix failed".into())),
        };
        // Kabsch sign correction, applied unconditionally.
        let det = (u * v_t).determinant();
        let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum()));
        let rotation = u * correction * v_t;

        let tr_ar = (a.transpose() * rotation).trace();
        let scale = if estimate_scale { tr_ar / spread_y } else { 1.0 };
        if !(scale > 0.0) {
            return Err(Error::Degenerate(format!(
                "estimated scale {scale} is not positive"
            )));
        }
        let translation = mu_x - scale * (rotation * mu_y);

        let sigma2 = ((spread_x - scale * tr_ar) / (3.0 * n_p)).max(sigma2_floor);
        // Residual at the optimal translation, from the same moments.
        let sse = (spread_x - 2.0 * scale * tr_ar + scale * scale * spread_y).max(0.0);

        let transform = RigidTransform::new(rotation, translation, scale)?;
        Ok((transform, sigma2, sse))
    }
}

/// M-step: weighted Procrustes update minimizing the mixture objective for
/// fixed posteriors. Returns the transform and the clamped variance.
pub fn m_step(
    data: &[Point3<f64>],
    centroids: &[Point3<f64>],
    posteriors: &Posteriors,
    estimate_scale: bool,
    sigma2_floor: f64,
) -> Result<(RigidTransform, f64)> {
    if posteriors.m_count != centroids.len() || posteriors.n_count != data.len() {
        return Err(Error::Precondition(format!(
            "posterior matrix is {}x{} but point sets are {}x{}",
            posteriors.m_count,
            posteriors.n_count,
            centroids.len(),
            data.len()
        )));
    }
    let stats = MStepStats::from_posteriors(data, centroids, posteriors);
    let (transform, sigma2, _) = stats.solve(estimate_scale, sigma2_floor)?;
    Ok((transform, sigma2))
}

/// Mixture objective
/// `E = 1/(2σ²) Σ P(m,n) ||x_n - sR y_m - t||² + (3 N_P / 2) ln σ²`
/// evaluated with the supplied posteriors.
pub fn objective(
    data: &[Point3<f64>],
    centroids: &[Point3<f64>],
    transform: &RigidTransform,
    sigma2: f64,
    posteriors: &Posteriors,
) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::Precondition(format!(
            "sigma2 must be positive, got {sigma2}"
        )));
    }
    if posteriors.m_count != centroids.len() || posteriors.n_count != data.len() {
        return Err(Error::Precondition(format!(
            "posterior matrix is {}x{} but point sets are {}x{}",
            posteriors.m_count,
            posteriors.n_count,
            centroids.len(),
            data.len()
        )));
    }
    let moved: Vec<Point3<f64>> = centroids.iter().map(|y| transform.apply(y)).collect();
    let mut quad = 0.0;
    for (n, x) in data.iter().enumerate() {
        let col = &posteriors.p[n * posteriors.m_count..(n + 1) * posteriors.m_count];
        for (pmn, ty) in col.iter().zip(&moved) {
            quad += pmn * (x - ty).norm_squared();
        }
    }
    Ok(quad / (2.0 * sigma2) + 1.5 * posteriors.n_p * sigma2.ln())
}

/// Register `data` (follow-up vertices) against `centroids` (baseline
/// vertices). The result transform maps centroid space into data space.
///
/// Iterates the E- and M-steps from the identity transform (plus optional
/// centroid-mean pre-alignment) until the relative objective change drops
/// below `rel_tolerance`, the variance reaches its floor, or the iteration
/// cap is hit. The E-step runs in parallel over fixed-size column chunks, so
/// output is bit-identical for any thread count.
pub fn register(
    data: &[Point3<f64>],
    centroids: &[Point3<f64>],
    config: &GmmConfig,
) -> Result<RegistrationResult> {
    config.validate()?;
    if data.len() < 4 || centroids.len() < 4 {
        return Err(Error::Precondition(format!(
            "registration needs at least 4 points per set, got {} data / {} centroids",
            data.len(),
            centroids.len()
        )));
    }

    let m_count = centroids.len();
    let n_count = data.len();

    let mut transform = if config.prealign_centroids {
        let mean = |pts: &[Point3<f64>]| {
            pts.iter().map(|p| p.coords).sum::<Vector3<f64>>() / pts.len() as f64
        };
        RigidTransform::translation(mean(data) - mean(centroids))
    } else {
        RigidTransform::identity()
    };

    let moved: Vec<Point3<f64>> = centroids.iter().map(|y| transform.apply(y)).collect();
    let mut sigma2 = init_sigma2(data, &moved)?.max(config.sigma2_floor);

    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..config.max_iterations {
        iterations += 1;
        let moved: Vec<Point3<f64>> = centroids.iter().map(|y| transform.apply(y)).collect();
        let c = outlier_constant(sigma2, config.outlier_weight, m_count, n_count);
        let two_sigma2 = 2.0 * sigma2;

        // Fused E-step + M-step sufficient statistics over fixed-size column
        // chunks; chunk results are merged sequentially in index order.
        let chunks: Vec<MStepStats> = data
            .par_chunks(ESTEP_CHUNK)
            .enumerate()
            .map(|(_chunk_idx, xs)| {
                let mut q = vec![0.0; m_count];
                let mut bx = Vector3::zeros();
                let mut sxy = Matrix3::zeros();
                let mut sx2 = 0.0;
                let mut n_p = 0.0;
                let mut dist2 = vec![0.0; m_count];
                let mut col = vec![0.0; m_count];
                for x in xs {
                    for (d, ty) in dist2.iter_mut().zip(&moved) {
                        *d = (x - ty).norm_squared();
                    }
                    let p_n = posterior_column(&dist2, two_sigma2, c, &mut col);
                    n_p += p_n;
                    bx += p_n * x.coords;
                    sx2 += p_n * x.coords.norm_squared();
                    let mut w = Vector3::zeros();
                    for (m, (&pmn, y)) in col.iter().zip(centroids).enumerate() {
                        w += pmn * y.coords;
                        q[m] += pmn;
                    }
                    sxy += x.coords * w.transpose();
                }
                let mut by = Vector3::zeros();
                let mut sy2 = 0.0;
                for (qm, y) in q.iter().zip(centroids) {
                    by += *qm * y.coords;
                    sy2 += *qm * y.coords.norm_squared();
                }
                MStepStats {
                    n_p,
                    bx,
                    by,
                    sxy,
                    sx2,
                    sy2,
                }
            })
            .collect();

        let mut stats = MStepStats {
            n_p: 0.0,
            bx: Vector3::zeros(),
            by: Vector3::zeros(),
            sxy: Matrix3::zeros(),
            sx2: 0.0,
            sy2: 0.0,
        };
        for chunk in &chunks {
            stats.n_p += chunk.n_p;
            stats.bx += chunk.bx;
            stats.by += chunk.by;
            stats.sxy += chunk.sxy;
            stats.sx2 += chunk.sx2;
            stats.sy2 += chunk.sy2;
        }

        let (new_transform, new_sigma2, sse) =
            stats.solve(config.estimate_scale, config.sigma2_floor)?;

        // Objective after this M-step with the posteriors that drove it.
        let obj = sse / (2.0 * new_sigma2) + 1.5 * stats.n_p * new_sigma2.ln();

        transform = new_transform;
        sigma2 = new_sigma2;

        let stop = match history.last() {
            Some(&prev) => {
                let change: f64 = prev - obj;
                change.abs() <= config.rel_tolerance * prev.abs().max(f64::MIN_POSITIVE)
            }
            None => false,
        };
        history.push(obj);

        if stop || sigma2 <= config.sigma2_floor {
            converged = true;
            break;
        }
    }

    Ok(RegistrationResult {
        transform,
        sigma2,
        iterations,
        converged,
        objective_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pts(coords: &[[f64; 3]]) -> Vec<Point3<f64>> {
        coords.iter().map(|c| Point3::new(c[0], c[1], c[2])).collect()
    }

    /// Naive scalar-arithmetic posterior computation, kept independent of the
    /// library path it checks.
    fn brute_posteriors(
        data: &[Point3<f64>],
        centroids: &[Point3<f64>],
        t: &RigidTransform,
        sigma2: f64,
        w: f64,
    ) -> Vec<Vec<f64>> {
        let m = centroids.len();
        let n = data.len();
        let c = if w == 0.0 {
            0.0
        } else {
            (2.0 * std::f64::consts::PI * sigma2).powf(1.5) * (w / (1.0 - w)) * (m as f64 / n as f64)
        };
        let mut out = vec![vec![0.0; n]; m];
        for (nj, x) in data.iter().enumerate() {
            let mut denom = c;
            let mut nums = vec![0.0; m];
            for (mi, y) in centroids.iter().enumerate() {
                let ty = t.apply(y);
                let d2 = (x.x - ty.x).powi(2) + (x.y - ty.y).powi(2) + (x.z - ty.z).powi(2);
                nums[mi] = (-d2 / (2.0 * sigma2)).exp();
                denom += nums[mi];
            }
            for mi in 0..m {
                out[mi][nj] = nums[mi] / denom;
            }
        }
        out
    }

    #[test]
    fn init_sigma2_simple_cases() {
        let p = pts(&[[0.0, 0.0, 0.0]]);
        assert_eq!(init_sigma2(&p, &p).unwrap(), 0.0);

        let x = pts(&[[1.0, 0.0, 0.0]]);
        let y = pts(&[[0.0, 0.0, 0.0]]);
        assert_relative_eq!(init_sigma2(&x, &y).unwrap(), 1.0 / 3.0);

        assert!(init_sigma2(&[], &y).is_err());
    }

    #[test]
    fn init_sigma2_matches_brute_force() {
        let x = pts(&[
            [0.4, -1.0, 2.0],
            [3.0, 0.5, -0.25],
            [1.0, 1.0, 1.0],
            [-2.0, 0.0, 0.5],
            [0.0, 2.5, -1.5],
        ]);
        let y = pts(&[
            [1.0, 0.0, 0.0],
            [0.0, -1.0, 1.0],
            [2.0, 2.0, 2.0],
            [-0.5, 0.25, 0.75],
        ]);
        let mut sum = 0.0;
        for a in &x {
            for b in &y {
                sum += (a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2);
            }
        }
        let expect = sum / (3.0 * 5.0 * 4.0);
        assert_relative_eq!(init_sigma2(&x, &y).unwrap(), expect, max_relative = 1e-15);
    }

    #[test]
    fn e_step_identity_single_pair() {
        let p = pts(&[[1.0, 2.0, 3.0]]);
        let post = e_step(&p, &p, &RigidTransform::identity(), 1.0, 0.0).unwrap();
        assert_relative_eq!(post.get(0, 0), 1.0, max_relative = 1e-15);
        assert_relative_eq!(post.n_p, 1.0, max_relative = 1e-15);
    }

    #[test]
    fn e_step_equidistant_centroids_split_evenly() {
        let x = pts(&[[0.0, 0.0, 0.0]]);
        let y = pts(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
        let post = e_step(&x, &y, &RigidTransform::identity(), 0.7, 0.0).unwrap();
        assert_relative_eq!(post.get(0, 0), 0.5, max_relative = 1e-15);
        assert_relative_eq!(post.get(1, 0), 0.5, max_relative = 1e-15);
    }

    #[test]
    fn e_step_matches_brute_force_with_outliers() {
        let x = pts(&[[0.2, 0.1, -0.3], [1.5, -0.5, 0.75]]);
        let y = pts(&[[0.0, 0.0, 0.0], [1.0, 0.0, 1.0]]);
        let t = RigidTransform::identity();
        let post = e_step(&x, &y, &t, 1.0, 0.1).unwrap();
        let brute = brute_posteriors(&x, &y, &t, 1.0, 0.1);
        for m in 0..2 {
            for n in 0..2 {
                assert_relative_eq!(post.get(m, n), brute[m][n], max_relative = 1e-12);
            }
        }
        // Column sums strictly inside (0, 1) when w > 0.
        for n in 0..2 {
            let s = post.get(0, n) + post.get(1, n);
            assert!(s > 0.0 && s < 1.0);
        }
    }

    #[test]
    fn e_step_rejects_bad_sigma() {
        let p = pts(&[[0.0; 3]]);
        assert!(e_step(&p, &p, &RigidTransform::identity(), 0.0, 0.0).is_err());
    }

    #[test]
    fn m_step_self_match_gives_identity() {
        let x = pts(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [1.0, 1.0, 1.0],
        ]);
        let n = x.len();
        let mut p = vec![0.0; n * n];
        for i in 0..n {
            p[i * n + i] = 1.0;
        }
        let post = Posteriors::from_column_major(p, n, n).unwrap();
        let (t, sigma2) = m_step(&x, &x, &post, false, 1e-10).unwrap();
        assert!((t.rotation_matrix() - Matrix3::identity()).norm() < 1e-12);
        assert!(t.translation_vector().norm() < 1e-12);
        assert_eq!(t.scale(), 1.0);
        assert_eq!(sigma2, 1e-10); // clamped to the floor
    }

    #[test]
    fn m_step_recovers_known_motion_exactly() {
        let y = pts(&[
            [0.0, 0.0, 0.0],
            [10.0, 0.0, 0.0],
            [0.0, 8.0, 0.0],
            [0.0, 0.0, 6.0],
            [5.0, 5.0, 5.0],
            [-3.0, 2.0, 7.0],
        ]);
        let angle = 20_f64.to_radians();
        let truth = RigidTransform::compose(
            &RigidTransform::translation(Vector3::new(5.0, -3.0, 2.0)),
            &RigidTransform::rotation_about_axis(Vector3::z(), angle),
        );
        let x: Vec<_> = y.iter().map(|p| truth.apply(p)).collect();
        let n = y.len();
        let mut p = vec![0.0; n * n];
        for i in 0..n {
            p[i * n + i] = 1.0;
        }
        let post = Posteriors::from_column_major(p, n, n).unwrap();
        let (t, sigma2) = m_step(&x, &y, &post, false, 1e-10).unwrap();
        assert!((t.rotation_matrix() - truth.rotation_matrix()).norm() < 1e-9);
        assert!((t.translation_vector() - truth.translation_vector()).norm() < 1e-9);
        assert_eq!(sigma2, 1e-10);
    }

    #[test]
    fn m_step_near_planar_mirror_keeps_proper_rotation() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            // Nearly planar cloud mirrored through z: the unconstrained
            // Procrustes optimum is a reflection; the sign correction must
            // keep det(R) = +1.
            let y: Vec<Point3<f64>> = (0..12)
                .map(|_| {
                    Point3::new(
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-0.01..0.01),
                    )
                })
                .collect();
            let x: Vec<Point3<f64>> =
                y.iter().map(|p| Point3::new(p.x, p.y, -p.z + 0.001)).collect();
            let n = y.len();
            let mut p = vec![0.0; n * n];
            for i in 0..n {
                p[i * n + i] = 1.0;
            }
            let post = Posteriors::from_column_major(p, n, n).unwrap();
            let (t, _) = m_step(&x, &y, &post, false, 1e-10).unwrap();
            let det = t.rotation_matrix().determinant();
            assert!((det - 1.0).abs() < 1e-9, "det = {det}");
        }
    }

    #[test]
    fn objective_trivial_values() {
        let x = pts(&[[3.0, 0.0, 0.0]]);
        let y = pts(&[[0.0, 0.0, 0.0]]);
        let zero = Posteriors::from_column_major(vec![0.0], 1, 1).unwrap();
        assert_eq!(
            objective(&x, &y, &RigidTransform::identity(), 2.0, &zero).unwrap(),
            0.0
        );
        let one = Posteriors::from_column_major(vec![1.0], 1, 1).unwrap();
        // Single pair at distance 3, sigma2 = 1: d²/2 = 4.5.
        assert_relative_eq!(
            objective(&x, &y, &RigidTransform::identity(), 1.0, &one).unwrap(),
            4.5
        );
    }

    #[test]
    fn objective_matches_brute_force() {
        let x = pts(&[[0.5, 1.0, -1.0], [2.0, 0.0, 0.5], [1.0, 1.0, 1.0]]);
        let y = pts(&[[0.0, 0.0, 0.0], [1.0, 1.0, 0.0]]);
        let t = RigidTransform::rotation_about_axis(Vector3::y(), 0.3);
        let sigma2 = 0.8;
        let post = e_step(&x, &y, &t, sigma2, 0.05).unwrap();
        let got = objective(&x, &y, &t, sigma2, &post).unwrap();

        let mut quad = 0.0;
        let mut n_p = 0.0;
        for (nj, xp) in x.iter().enumerate() {
            for (mi, yp) in y.iter().enumerate() {
                let ty = t.apply(yp);
                let d2 =
                    (xp.x - ty.x).powi(2) + (xp.y - ty.y).powi(2) + (xp.z - ty.z).powi(2);
                quad += post.get(mi, nj) * d2;
                n_p += post.get(mi, nj);
            }
        }
        let expect = quad / (2.0 * sigma2) + 1.5 * n_p * sigma2.ln();
        assert_relative_eq!(got, expect, max_relative = 1e-12);
    }

    #[test]
    fn transform_apply_invert_compose() {
        let t = RigidTransform::compose(
            &RigidTransform::translation(Vector3::new(1.0, -2.0, 0.5)),
            &RigidTransform::rotation_about_axis(Vector3::new(1.0, 1.0, 0.2), 0.7),
        );
        let p = Point3::new(0.3, -1.2, 4.0);
        let roundtrip = t.invert().apply(&t.apply(&p));
        assert!((roundtrip - p).norm() < 1e-9);

        let t2 = RigidTransform::rotation_about_axis(Vector3::x(), -0.4);
        let composed = RigidTransform::compose(&t2, &t);
        let direct = t2.apply(&t.apply(&p));
        assert!((composed.apply(&p) - direct).norm() < 1e-12);

        // Pure translation inverts to its negation.
        let tr = RigidTransform::translation(Vector3::new(3.0, 4.0, -5.0));
        assert!((tr.invert().translation_vector() + tr.translation_vector()).norm() < 1e-15);
    }

    #[test]
    fn register_self_is_identity() {
        let y = pts(&[
            [0.0, 0.0, 0.0],
            [10.0, 0.0, 0.0],
            [0.0, 8.0, 0.0],
            [0.0, 0.0, 6.0],
            [5.0, 5.0, 5.0],
            [-3.0, 2.0, 7.0],
            [4.0, -4.0, 1.0],
        ]);
        let result = register(&y, &y, &GmmConfig::default()).unwrap();
        assert!(result.converged);
        assert!(
            (result.transform.rotation_matrix() - Matrix3::identity()).norm() < 1e-6
        );
        assert!(result.transform.translation_vector().norm() < 1e-6);
    }

    #[test]
    fn register_recovers_known_rigid_motion() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let y: Vec<Point3<f64>> = (0..80)
            .map(|_| {
                Point3::new(
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-15.0..15.0),
                    rng.random_range(-10.0..10.0),
                )
            })
            .collect();
        let truth = RigidTransform::compose(
            &RigidTransform::translation(Vector3::new(8.0, -14.0, 3.0)),
            &RigidTransform::rotation_about_axis(Vector3::new(0.2, 1.0, -0.3), 25_f64.to_radians()),
        );
        let x: Vec<_> = y.iter().map(|p| truth.apply(p)).collect();
        let result = register(&x, &y, &GmmConfig::default()).unwrap();
        let angle = result.transform.rotation_angle_to(&truth);
        assert!(angle < 1e-3, "rotation error {angle}");
        let dt = (result.transform.translation_vector() - truth.translation_vector()).norm();
        assert!(dt < 1e-2, "translation error {dt}");
        assert!(result.converged);
    }

    #[test]
    fn register_objective_history_non_increasing() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let y: Vec<Point3<f64>> = (0..40)
            .map(|_| {
                Point3::new(
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                )
            })
            .collect();
        let truth = RigidTransform::compose(
            &RigidTransform::translation(Vector3::new(2.0, 1.0, -3.0)),
            &RigidTransform::rotation_about_axis(Vector3::z(), 0.3),
        );
        let x: Vec<_> = y.iter().map(|p| truth.apply(p)).collect();
        for w in [0.0, 0.1] {
            let config = GmmConfig {
                outlier_weight: w,
                ..GmmConfig::default()
            };
            let result = register(&x, &y, &config).unwrap();
            for pair in result.objective_history.windows(2) {
                assert!(
                    pair[1] <= pair[0] + 1e-9 * pair[0].abs(),
                    "objective increased: {} -> {} (w = {w})",
                    pair[0],
                    pair[1]
                );
            }
        }
    }

    #[test]
    fn register_matches_explicit_em_loop() {
        // The fused streaming path must agree with composing the public
        // e_step / m_step operations.
        let x = pts(&[
            [0.5, 1.0, -1.0],
            [2.0, 0.0, 0.5],
            [1.0, 1.0, 1.0],
            [-1.0, 0.5, 2.0],
            [0.0, -1.5, 0.0],
        ]);
        let y = pts(&[
            [0.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [2.0, -0.5, 0.5],
            [-0.5, 1.5, 1.0],
        ]);
        let config = GmmConfig {
            outlier_weight: 0.1,
            max_iterations: 5,
            rel_tolerance: 1e-30, // force the full 5 iterations
            ..GmmConfig::default()
        };
        let result = register(&x, &y, &config).unwrap();

        let mean = |pts: &[Point3<f64>]| {
            pts.iter().map(|p| p.coords).sum::<Vector3<f64>>() / pts.len() as f64
        };
        let mut t = RigidTransform::translation(mean(&x) - mean(&y));
        let moved: Vec<_> = y.iter().map(|p| t.apply(p)).collect();
        let mut sigma2 = init_sigma2(&x, &moved).unwrap();
        let mut last_obj = 0.0;
        for _ in 0..5 {
            let post = e_step(&x, &y, &t, sigma2, config.outlier_weight).unwrap();
            let (nt, ns) = m_step(&x, &y, &post, false, config.sigma2_floor).unwrap();
            last_obj = objective(&x, &y, &nt, ns, &post).unwrap();
            t = nt;
            sigma2 = ns;
        }
        assert_relative_eq!(result.sigma2, sigma2, max_relative = 1e-12);
        assert!(
            (result.transform.rotation_matrix() - t.rotation_matrix()).norm() < 1e-12
        );
        assert!(
            (result.transform.translation_vector() - t.translation_vector()).norm() < 1e-12
        );
        assert_relative_eq!(
            *result.objective_history.last().unwrap(),
            last_obj,
            max_relative = 1e-12
        );
    }

    #[test]
    fn scale_lock_keeps_scale_exactly_one() {
        let y = pts(&[
            [0.0, 0.0, 0.0],
            [10.0, 0.0, 0.0],
            [0.0, 8.0, 0.0],
            [0.0, 0.0, 6.0],
            [5.0, 5.0, 5.0],
        ]);
        let x: Vec<_> = y.iter().map(|p| Point3::from(p.coords * 1.3)).collect();
        let locked = register(&x, &y, &GmmConfig::default()).unwrap();
        assert_eq!(locked.transform.scale(), 1.0);

        let config = GmmConfig {
            estimate_scale: true,
            ..GmmConfig::default()
        };
        let scaled = register(&x, &y, &config).unwrap();
        assert_relative_eq!(scaled.transform.scale(), 1.3, max_relative = 1e-6);
    }

    #[test]
    fn register_rejects_tiny_sets() {
        let p = pts(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert!(register(&p, &p, &GmmConfig::default()).is_err());
    }

    #[test]
    fn transform_record_round_trip() {
        let t = RigidTransform::compose(
            &RigidTransform::translation(Vector3::new(0.1, -2.25, 17.0)),
            &RigidTransform::rotation_about_axis(Vector3::new(0.3, -1.0, 0.9), 0.41),
        );
        let record = t.to_record("baseline", "3mo");
        let (back, from, to) =
            RigidTransform::from_record(&record, Path::new("test")).unwrap();
        assert_eq!(from, "baseline");
        assert_eq!(to, "3mo");
        assert_eq!(back.rotation_matrix(), t.rotation_matrix());
        assert_eq!(back.translation_vector(), t.translation_vector());
        assert_eq!(back.scale(), t.scale());
    }
}
