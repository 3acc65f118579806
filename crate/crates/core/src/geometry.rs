//! Line directions and the perpendicularity/parallelism loss.
//!
//! Each line group is fitted by total least squares: the direction is the
//! principal axis of the centered second-moment matrix
//! `S = [[Sxx, Sxy], [Sxy, Syy]]`, i.e. `theta = atan2(2 Sxy, Sxx - Syy) / 2`.
//! This is rotation-equivariant and well-behaved for near-vertical lines such
//! as the tooth axis, where ordinate-on-abscissa regression breaks down.
//!
//! Fitted lines carry no sign, so directions are canonicalized to
//! `cos(theta) >= 0` (and `sin(theta) = 1` when `cos(theta) = 0`). This makes the
//! raw perpendicularity dot product a function of the landmarks.
//!
//! With `v_a` the axis direction and `v_1..v_3` the level lines:
//!
//! ```text
//! L = ( sum_j f(v_a . v_j) + sum_{j<k} (1 - |v_j . v_k|) ) / 6
//! ```
//!
//! where `f` is the identity, `|.|` or `(.)^2` depending on [`LossMode`].

use crate::error::{Error, Result};
use crate::schema::{LandmarkId, LandmarkSet, LineGroupSchema, LossMode, Point, NUM_LANDMARKS};

/// Canonical unit direction of an unsigned line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitDirection {
    theta: f64,
    vector: [f64; 2],
}

impl UnitDirection {
    /// Canonical direction for an arbitrary angle.
    pub fn from_angle(theta: f64) -> UnitDirection {
        let (s, c) = theta.sin_cos();
        UnitDirection::from_components(c, s)
    }

    /// Canonicalizes a (not necessarily unit) vector.
    pub fn from_vector(x: f64, y: f64) -> UnitDirection {
        let n = x.hypot(y);
        UnitDirection::from_components(x / n, y / n)
    }

    fn from_components(mut c: f64, mut s: f64) -> UnitDirection {
        if c < 0.0 || (c == 0.0 && s < 0.0) {
            c = -c;
            s = -s;
        }
        if c == 0.0 {
            s = 1.0;
        }
        UnitDirection {
            theta: s.atan2(c),
            vector: [c, s],
        }
    }

    /// Angle in `(-pi/2, pi/2]`.
    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn vector(&self) -> [f64; 2] {
        self.vector
    }

    pub fn dot(&self, other: &UnitDirection) -> f64 {
        self.vector[0] * other.vector[0] + self.vector[1] * other.vector[1]
    }

    /// `sin(theta_self - theta_other)`.
    pub fn sin_between(&self, other: &UnitDirection) -> f64 {
        self.vector[1] * other.vector[0] - self.vector[0] * other.vector[1]
    }
}

/// Thresholds below which a point set has no well-defined principal axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegeneracyTolerance {
    /// Relative anisotropy `|(Sxx - Syy, 2 Sxy)| / trace(S)`.
    pub iso: f64,
    /// Absolute floor on `trace(S)`, px^2.
    pub abs: f64,
}

impl Default for DegeneracyTolerance {
    fn default() -> Self {
        DegeneracyTolerance {
            iso: 1e-9,
            abs: 1e-12,
        }
    }
}

/// Result of a total-least-squares fit, with the moments needed to
/// differentiate it.
#[derive(Clone, Debug, PartialEq)]
pub struct LineFit {
    pub direction: UnitDirection,
    pub centroid: Point,
    /// `Sxx - Syy`.
    anisotropy_cos: f64,
    /// `2 Sxy`.
    anisotropy_sin: f64,
}

pub fn fit_line(points: &[Point], tol: DegeneracyTolerance) -> Result<LineFit> {
    if points.len() < 2 {
        return Err(Error::Arity(points.len()));
    }
    if points.iter().any(|p| !p.is_finite()) {
        return Err(Error::Input("non-finite point in line fit".into()));
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p.x - cx, p.y - cy);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let a = sxx - syy;
    let b = 2.0 * sxy;
    let r = a.hypot(b);
    let trace = sxx + syy;
    if trace <= tol.abs || r <= tol.iso * trace {
        return Err(Error::Degenerate {
            anisotropy: r,
            trace,
        });
    }
    // Half-angle of (a, b), taking whichever branch avoids cancellation.
    let (c, s) = if a >= 0.0 {
        let c = ((r + a) / (2.0 * r)).sqrt();
        (c, b / (2.0 * r * c))
    } else {
        let s = ((r - a) / (2.0 * r)).sqrt();
        let s = if b < 0.0 { -s } else { s };
        (b / (2.0 * r * s), s)
    };
    Ok(LineFit {
        direction: UnitDirection::from_components(c, s),
        centroid: Point::new(cx, cy),
        anisotropy_cos: a,
        anisotropy_sin: b,
    })
}

/// Principal direction of the points, with default degeneracy thresholds.
pub fn fit_direction(points: &[Point]) -> Result<UnitDirection> {
    fit_line(points, DegeneracyTolerance::default()).map(|f| f.direction)
}

impl LineFit {
    /// `d theta / d (x_i, y_i)` for each fitted point, in input order.
    pub fn theta_gradient(&self, points: &[Point]) -> Vec<Point> {
        let (a, b) = (self.anisotropy_cos, self.anisotropy_sin);
        let r2 = a * a + b * b;
        points
            .iter()
            .map(|p| {
                let dx = p.x - self.centroid.x;
                let dy = p.y - self.centroid.y;
                Point::new((a * dy - b * dx) / r2, (a * dx + b * dy) / r2)
            })
            .collect()
    }
}

/// A value of the geometric loss with its individual terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoLossValue {
    pub total: f64,
    /// Raw dot products `v_axis . v_j` for the three level lines.
    pub perpendicular_terms: [f64; 3],
    /// `1 - |v_j . v_k|` for the pairs (1,2), (1,3), (2,3).
    pub parallel_terms: [f64; 3],
}

const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

fn perpendicular_contribution(dot: f64, mode: LossMode) -> f64 {
    match mode {
        LossMode::PaperLiteral => dot,
        LossMode::Absolute => dot.abs(),
        LossMode::Squared => dot * dot,
    }
}

fn perpendicular_slope(dot: f64, mode: LossMode) -> f64 {
    match mode {
        LossMode::PaperLiteral => 1.0,
        LossMode::Absolute => sign(dot),
        LossMode::Squared => 2.0 * dot,
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// The loss on already fitted directions.
pub fn geometric_loss_from_directions(
    axis: &UnitDirection,
    levels: &[UnitDirection; 3],
    mode: LossMode,
) -> GeoLossValue {
    let perpendicular_terms = levels.map(|v| axis.dot(&v));
    let parallel_terms = PAIRS.map(|(j, k)| 1.0 - levels[j].dot(&levels[k]).abs());
    let perp: f64 = perpendicular_terms
        .iter()
        .map(|&d| perpendicular_contribution(d, mode))
        .sum();
    let par: f64 = parallel_terms.iter().sum();
    GeoLossValue {
        total: (perp + par) / 6.0,
        perpendicular_terms,
        parallel_terms,
    }
}

fn group_points(landmarks: &LandmarkSet, ids: &[LandmarkId]) -> Vec<Point> {
    ids.iter().map(|&id| landmarks[id]).collect()
}

struct Fits {
    axis_ids: [LandmarkId; 2],
    axis_points: Vec<Point>,
    axis: LineFit,
    level_points: [Vec<Point>; 3],
    levels: [LineFit; 3],
}

fn fit_groups(landmarks: &LandmarkSet, schema: &LineGroupSchema, tol: DegeneracyTolerance) -> Result<Fits> {
    let (a0, a1) = schema.axis();
    let axis_points = vec![landmarks[a0], landmarks[a1]];
    let axis = fit_line(&axis_points, tol)?;
    let lines = schema.level_lines();
    let level_points = [
        group_points(landmarks, &lines[0]),
        group_points(landmarks, &lines[1]),
        group_points(landmarks, &lines[2]),
    ];
    let levels = [
        fit_line(&level_points[0], tol)?,
        fit_line(&level_points[1], tol)?,
        fit_line(&level_points[2], tol)?,
    ];
    Ok(Fits {
        axis_ids: [a0, a1],
        axis_points,
        axis,
        level_points,
        levels,
    })
}

pub fn geometric_loss(landmarks: &LandmarkSet, schema: &LineGroupSchema) -> Result<GeoLossValue> {
    geometric_loss_with(landmarks, schema, DegeneracyTolerance::default())
}

pub fn geometric_loss_with(
    landmarks: &LandmarkSet,
    schema: &LineGroupSchema,
    tol: DegeneracyTolerance,
) -> Result<GeoLossValue> {
    let fits = fit_groups(landmarks, schema, tol)?;
    let levels = fits.levels.clone().map(|f| f.direction);
    Ok(geometric_loss_from_directions(&fits.axis.direction, &levels, schema.loss_mode))
}

/// `dL/dx`, `dL/dy` for each landmark, indexed like a [`LandmarkSet`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LandmarkGradient(pub [Point; NUM_LANDMARKS]);

impl LandmarkGradient {
    pub fn get(&self, id: LandmarkId) -> Point {
        self.0[id.index()]
    }

    fn add(&mut self, id: LandmarkId, g: Point) {
        let e = &mut self.0[id.index()];
        e.x += g.x;
        e.y += g.y;
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g.x * g.x + g.y * g.y).sum::<f64>().sqrt()
    }
}

/// Loss value and its exact gradient with respect to every landmark.
///
/// Landmarks outside all line groups get exactly zero gradient. The loss is
/// not differentiable where a fitted line crosses the canonicalization
/// boundary (vertical) or, in absolute mode, where a dot product is zero;
/// there the one-sided slope chosen by the canonical form (resp. 0) is used.
pub fn geometric_loss_grad(
    landmarks: &LandmarkSet,
    schema: &LineGroupSchema,
) -> Result<(GeoLossValue, LandmarkGradient)> {
    geometric_loss_grad_with(landmarks, schema, DegeneracyTolerance::default())
}

pub fn geometric_loss_grad_with(
    landmarks: &LandmarkSet,
    schema: &LineGroupSchema,
    tol: DegeneracyTolerance,
) -> Result<(GeoLossValue, LandmarkGradient)> {
    let fits = fit_groups(landmarks, schema, tol)?;
    let axis = fits.axis.direction;
    let levels = fits.levels.clone().map(|f| f.direction);
    let mode = schema.loss_mode;
    let value = geometric_loss_from_directions(&axis, &levels, mode);

    // dL/dtheta for the axis and each level line.
    let mut d_axis = 0.0;
    let mut d_level = [0.0; 3];
    for j in 0..3 {
        let slope = perpendicular_slope(value.perpendicular_terms[j], mode);
        let s = axis.sin_between(&levels[j]);
        d_axis -= slope * s;
        d_level[j] += slope * s;
    }
    for (j, k) in PAIRS {
        let e = levels[j].dot(&levels[k]);
        let s = levels[j].sin_between(&levels[k]);
        d_level[j] += sign(e) * s;
        d_level[k] -= sign(e) * s;
    }
    d_axis /= 6.0;
    d_level.iter_mut().for_each(|d| *d /= 6.0);

    let mut grad = LandmarkGradient::default();
    for (id, g) in fits
        .axis_ids
        .iter()
        .zip(fits.axis.theta_gradient(&fits.axis_points))
    {
        grad.add(*id, Point::new(d_axis * g.x, d_axis * g.y));
    }
    for j in 0..3 {
        let ids = &schema.level_lines()[j];
        for (id, g) in ids.iter().zip(fits.levels[j].theta_gradient(&fits.level_points[j])) {
            grad.add(*id, Point::new(d_level[j] * g.x, d_level[j] * g.y));
        }
    }
    Ok((value, grad))
}
