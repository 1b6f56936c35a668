//! Planar homographies: representations, conversions, sampling and warping.
//!
//! Points are `(x, y)` pixel coordinates with `x` along columns and `y` along
//! rows. Image corners are the extreme pixel centers, always listed in the
//! order top-left, top-right, bottom-right, bottom-left.

use nalgebra::{DMatrix, Matrix3, Point2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Border, GrayImage, ImageDims};

/// Tag recorded in checkpoints and label files for the corner convention.
pub const CORNER_ORDER: &str = "tl-tr-br-bl";

const SINGULAR_EPS: f64 = 1e-12;
const MAX_SAMPLE_ATTEMPTS: usize = 16;

/// A planar projective transform stored in canonical scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 9]", into = "[f64; 9]")]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    /// Canonicalize and validate `m`.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let m = canonicalize(m)
            .ok_or_else(|| Error::DegenerateHomography("matrix is zero or non-finite".into()))?;
        if !(m.determinant().abs() > SINGULAR_EPS) {
            return Err(Error::DegenerateHomography(format!(
                "|det| = {:e}",
                m.determinant().abs()
            )));
        }
        Ok(Self { m })
    }

    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0),
        }
    }

    pub fn from_row_major(v: [f64; 9]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(&v))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.m[(r, c)];
            }
        }
        out
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .m
            .try_inverse()
            .ok_or_else(|| Error::DegenerateHomography("matrix is not invertible".into()))?;
        Self::new(inv)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::new(self.m * other.m)
    }

    /// Map one point; `None` if it lands at infinity.
    pub fn apply(&self, p: Point2<f64>) -> Option<Point2<f64>> {
        let h = self.m * Vector3::new(p.x, p.y, 1.0);
        if h.z.abs() <= SINGULAR_EPS || !h.z.is_finite() {
            return None;
        }
        let q = Point2::new(h.x / h.z, h.y / h.z);
        (q.x.is_finite() && q.y.is_finite()).then_some(q)
    }
}

impl From<Homography> for [f64; 9] {
    fn from(h: Homography) -> Self {
        h.to_row_major()
    }
}

impl TryFrom<[f64; 9]> for Homography {
    type Error = Error;

    fn try_from(v: [f64; 9]) -> Result<Self> {
        Self::from_row_major(v)
    }
}

fn canonicalize(m: Matrix3<f64>) -> Option<Matrix3<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    if m[(2, 2)].abs() > SINGULAR_EPS {
        return Some(m / m[(2, 2)]);
    }
    let norm = m.norm();
    (norm > 0.0).then(|| m / norm)
}

/// The four image corners in the global corner order.
pub fn image_corners(dims: ImageDims) -> [Point2<f64>; 4] {
    let w = (dims.width.max(1) - 1) as f64;
    let h = (dims.height.max(1) - 1) as f64;
    [
        Point2::new(0.0, 0.0),
        Point2::new(w, 0.0),
        Point2::new(w, h),
        Point2::new(0.0, h),
    ]
}

/// Map every point through `h`.
pub fn warp_points(pts: &[Point2<f64>], h: &Homography) -> Result<Vec<Point2<f64>>> {
    pts.iter()
        .enumerate()
        .map(|(index, p)| h.apply(*p).ok_or(Error::PointAtInfinity { index }))
        .collect()
}

/// Inverse-mapped bilinear resampling; the output has the input's dims.
pub fn warp_image(img: &GrayImage, h: &Homography, border: Border) -> Result<GrayImage> {
    let inv = h.inverse()?;
    let m = inv.matrix();
    let mut out = GrayImage::new(img.width(), img.height());
    for r in 0..img.height() {
        let y = r as f64;
        for c in 0..img.width() {
            let x = c as f64;
            let hx = m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)];
            let hy = m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)];
            let hz = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
            if hz.abs() <= SINGULAR_EPS {
                continue;
            }
            let (sx, sy) = (hx / hz, hy / hz);
            if !(sx.is_finite() && sy.is_finite()) {
                continue;
            }
            if border == Border::Reflect && (sx.abs() > 1e7 || sy.abs() > 1e7) {
                continue;
            }
            out.set(r, c, img.sample_bilinear(sx, sy, border));
        }
    }
    Ok(out)
}

/// Corner displacements in the global corner order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 8]", into = "[f64; 8]")]
pub struct FourPointDelta {
    pub deltas: [[f64; 2]; 4],
}

impl FourPointDelta {
    pub fn zero() -> Self {
        Self {
            deltas: [[0.0; 2]; 4],
        }
    }

    pub fn from_flat(v: [f64; 8]) -> Result<Self> {
        if v.iter().any(|d| !d.is_finite()) {
            return Err(Error::DegenerateCorrespondences(
                "non-finite corner displacement".into(),
            ));
        }
        let mut deltas = [[0.0; 2]; 4];
        for (i, d) in deltas.iter_mut().enumerate() {
            *d = [v[2 * i], v[2 * i + 1]];
        }
        Ok(Self { deltas })
    }

    pub fn to_flat(&self) -> [f64; 8] {
        let mut out = [0.0; 8];
        for (i, d) in self.deltas.iter().enumerate() {
            out[2 * i] = d[0];
            out[2 * i + 1] = d[1];
        }
        out
    }

    /// Displaced corner positions.
    pub fn displaced_corners(&self, dims: ImageDims) -> [Point2<f64>; 4] {
        let mut c = image_corners(dims);
        for (p, d) in c.iter_mut().zip(&self.deltas) {
            p.x += d[0];
            p.y += d[1];
        }
        c
    }
}

impl From<FourPointDelta> for [f64; 8] {
    fn from(d: FourPointDelta) -> Self {
        d.to_flat()
    }
}

impl TryFrom<[f64; 8]> for FourPointDelta {
    type Error = Error;

    fn try_from(v: [f64; 8]) -> Result<Self> {
        Self::from_flat(v)
    }
}

pub fn four_point_from_matrix(h: &Homography, dims: ImageDims) -> Result<FourPointDelta> {
    let corners = image_corners(dims);
    let warped = warp_points(&corners, h)?;
    let mut deltas = [[0.0; 2]; 4];
    for i in 0..4 {
        deltas[i] = [warped[i].x - corners[i].x, warped[i].y - corners[i].y];
    }
    Ok(FourPointDelta { deltas })
}

pub fn matrix_from_four_point(d: &FourPointDelta, dims: ImageDims) -> Result<Homography> {
    let src = image_corners(dims);
    let dst = d.displaced_corners(dims);
    if has_collinear_triple(&dst) || has_collinear_triple(&src) {
        return Err(Error::DegenerateCorrespondences(
            "three corners are collinear".into(),
        ));
    }
    dlt_homography(&src, &dst)
}

/// True if any three of the four points are (numerically) collinear.
pub fn has_collinear_triple(p: &[Point2<f64>; 4]) -> bool {
    let scale = p
        .iter()
        .flat_map(|q| [q.x.abs(), q.y.abs()])
        .fold(1.0_f64, f64::max);
    let tol = 1e-9 * scale * scale;
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES.iter().any(|&[a, b, c]| {
        let cross = (p[b].x - p[a].x) * (p[c].y - p[a].y) - (p[b].y - p[a].y) * (p[c].x - p[a].x);
        cross.abs() <= tol
    })
}

/// Similarity transform that moves the centroid to the origin and sets the
/// mean distance to it to sqrt(2).
fn hartley_normalization(pts: &[Point2<f64>]) -> Option<Matrix3<f64>> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_dist = pts
        .iter()
        .map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if !(mean_dist > 0.0) {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

/// Normalized DLT over `n >= 4` correspondences `src[i] -> dst[i]`.
pub fn dlt_homography(src: &[Point2<f64>], dst: &[Point2<f64>]) -> Result<Homography> {
    dlt_impl(src, dst, None)
}

/// Normalized DLT where each correspondence's algebraic residual is weighted
/// by `weights[i]` (non-negative).
pub fn weighted_dlt_homography(src: &[Point2<f64>], dst: &[Point2<f64>], weights: &[f64]) -> Result<Homography> {
    if weights.len() != src.len() || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} correspondences, all must be >= 0",
            weights.len(),
            src.len()
        )));
    }
    dlt_impl(src, dst, Some(weights))
}

fn dlt_impl(src: &[Point2<f64>], dst: &[Point2<f64>], weights: Option<&[f64]>) -> Result<Homography> {
    if src.len() != dst.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} source vs {} destination points",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 4 {
        return Err(Error::DegenerateCorrespondences(format!(
            "{} correspondences, need 4",
            src.len()
        )));
    }
    let degenerate = || Error::DegenerateCorrespondences("points are coincident".into());
    let ts = hartley_normalization(src).ok_or_else(degenerate)?;
    let td = hartley_normalization(dst).ok_or_else(degenerate)?;

    let rows = (2 * src.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (p, q)) in src.iter().zip(dst).enumerate() {
        let ps = ts * Vector3::new(p.x, p.y, 1.0);
        let qs = td * Vector3::new(q.x, q.y, 1.0);
        let (x, y) = (ps.x, ps.y);
        let (u, v) = (qs.x, qs.y);
        let r0 = 2 * i;
        let r1 = r0 + 1;
        let w = weights.map_or(1.0, |w| w[i].sqrt());
        a.row_mut(r0)
            .copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u].map(|e| e * w));
        a.row_mut(r1)
            .copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v].map(|e| e * w));
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::DegenerateCorrespondences("SVD failed".into()))?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    let h = v_t.row(imin);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td.try_inverse().ok_or_else(degenerate)?;
    Homography::new(td_inv * hn * ts).map_err(|_| {
        Error::DegenerateCorrespondences("correspondences yield a singular homography".into())
    })
}

/// Ranges for random homography sampling. Fractions are relative to the
/// image width/height; each parameter is drawn from a zero-mean normal with
/// `sigma = range / truncation`, truncated at `±range`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HomographySampleConfig {
    pub translation_frac: f64,
    pub scale_frac: f64,
    pub rotation_deg: f64,
    pub perspective_frac: f64,
    pub center_crop_frac: f64,
    pub truncation: f64,
}

impl Default for HomographySampleConfig {
    fn default() -> Self {
        Self::training()
    }
}

impl HomographySampleConfig {
    /// Ranges used for pseudo-labeling and training pairs.
    pub fn training() -> Self {
        Self {
            translation_frac: 0.05,
            scale_frac: 0.20,
            rotation_deg: 90.0,
            perspective_frac: 0.20,
            center_crop_frac: 0.1,
            truncation: 2.0,
        }
    }

    /// Ranges used to build warped evaluation sets.
    pub fn evaluation() -> Self {
        Self {
            translation_frac: 0.05,
            scale_frac: 0.10,
            rotation_deg: 90.0,
            perspective_frac: 0.05,
            center_crop_frac: 0.0,
            truncation: 2.0,
        }
    }

    pub fn none() -> Self {
        Self {
            translation_frac: 0.0,
            scale_frac: 0.0,
            rotation_deg: 0.0,
            perspective_frac: 0.0,
            center_crop_frac: 0.0,
            truncation: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fracs = [
            ("translation_frac", self.translation_frac),
            ("scale_frac", self.scale_frac),
            ("perspective_frac", self.perspective_frac),
            ("center_crop_frac", self.center_crop_frac),
        ];
        for (name, v) in fracs {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} = {v} not in [0, 1)")));
            }
        }
        if !(0.0..=180.0).contains(&self.rotation_deg) {
            return Err(Error::InvalidConfig(format!(
                "rotation_deg = {} not in [0, 180]",
                self.rotation_deg
            )));
        }
        if !(self.truncation > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "truncation = {} must be positive",
                self.truncation
            )));
        }
        Ok(())
    }
}

/// Zero-mean normal with `sigma = range / truncation`, rejected outside `±range`.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, range: f64, truncation: f64) -> f64 {
    if range <= 0.0 {
        return 0.0;
    }
    let normal = Normal::new(0.0, range / truncation).expect("positive sigma");
    loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= range {
            return x;
        }
    }
}

/// Draw a random homography for an image of `dims`.
///
/// In coordinates centered on the image, the transform is
/// `crop ∘ perspective ∘ rotation ∘ scale ∘ translation`: translation is
/// applied first and the root center crop (a zoom by `1 / (1 - crop)`) last.
/// Parameters are drawn in the order tx, ty, scale, angle, keystone-x,
/// keystone-y.
pub fn sample_homography<R: Rng + ?Sized>(
    cfg: &HomographySampleConfig,
    dims: ImageDims,
    rng: &mut R,
) -> Result<Homography> {
    cfg.validate()?;
    if dims.is_empty() {
        return Err(Error::InvalidConfig("image dims must be positive".into()));
    }
    let (w, h) = (dims.width as f64, dims.height as f64);
    let corners = image_corners(dims);
    for _ in 0..MAX_SAMPLE_ATTEMPTS {
        let tx = truncated_normal(rng, cfg.translation_frac, cfg.truncation) * w;
        let ty = truncated_normal(rng, cfg.translation_frac, cfg.truncation) * h;
        let s = 1.0 + truncated_normal(rng, cfg.scale_frac, cfg.truncation);
        let theta = truncated_normal(rng, cfg.rotation_deg, cfg.truncation).to_radians();
        let kx = truncated_normal(rng, cfg.perspective_frac, cfg.truncation);
        let ky = truncated_normal(rng, cfg.perspective_frac, cfg.truncation);

        let translate = Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0);
        let scale = Matrix3::new(s, 0.0, 0.0, 0.0, s, 0.0, 0.0, 0.0, 1.0);
        let (sin, cos) = theta.sin_cos();
        let rotate = Matrix3::new(cos, -sin, 0.0, sin, cos, 0.0, 0.0, 0.0, 1.0);
        let Some(perspective) = keystone(kx, ky, w, h) else {
            continue;
        };
        let zoom = 1.0 / (1.0 - cfg.center_crop_frac);
        let crop = Matrix3::new(zoom, 0.0, 0.0, 0.0, zoom, 0.0, 0.0, 0.0, 1.0);
        let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
        let to_center = Matrix3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
        let from_center = Matrix3::new(1.0, 0.0, cx, 0.0, 1.0, cy, 0.0, 0.0, 1.0);

        let m = from_center * crop * perspective * rotate * scale * translate * to_center;
        let Ok(hom) = Homography::new(m) else {
            continue;
        };
        if warp_points(&corners, &hom).is_ok() {
            return Ok(hom);
        }
    }
    Err(Error::DegenerateHomography(format!(
        "no valid sample after {MAX_SAMPLE_ATTEMPTS} attempts"
    )))
}

/// Symmetric keystone in centered coordinates: the top and bottom edges are
/// narrowed/widened by `kx` of the width, the left and right edges by `ky` of
/// the height.
fn keystone(kx: f64, ky: f64, w: f64, h: f64) -> Option<Matrix3<f64>> {
    if kx == 0.0 && ky == 0.0 {
        return Some(Matrix3::identity());
    }
    let (hx, hy) = (w / 2.0, h / 2.0);
    let src = [
        Point2::new(-hx, -hy),
        Point2::new(hx, -hy),
        Point2::new(hx, hy),
        Point2::new(-hx, hy),
    ];
    let dst = [
        Point2::new(-hx + kx * hx, -hy + ky * hy),
        Point2::new(hx - kx * hx, -hy - ky * hy),
        Point2::new(hx + kx * hx, hy + ky * hy),
        Point2::new(-hx - kx * hx, hy - ky * hy),
    ];
    if has_collinear_triple(&dst) {
        return None;
    }
    dlt_homography(&src, &dst).ok().map(|hm| *hm.matrix())
}
