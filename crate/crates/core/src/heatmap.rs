//! Heatmaps and the coordinate codecs that map to and from them.
//!
//! Lattice coordinates follow the landmark convention: `x` is the column,
//! `y` the row, pixel centers sit at integer coordinates and values are
//! stored row-major (`index = y * width + x`).

use crate::error::{Error, Result};
use crate::schema::{LandmarkSet, Point, NUM_LANDMARKS};

/// Default softmax temperature for soft-argmax decoding.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
/// Default standard deviation of Gaussian targets, in lattice pixels.
pub const DEFAULT_SIGMA: f64 = 2.0;
/// Tolerance on the unit sum of a probability map.
pub const PROBABILITY_SUM_TOL: f64 = 1e-12;

/// What the values of a heatmap stack mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Logits,
    Probabilities,
    Target,
}

impl Role {
    pub fn code(self) -> u8 {
        match self {
            Role::Logits => 0,
            Role::Probabilities => 1,
            Role::Target => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Role> {
        match code {
            0 => Some(Role::Logits),
            1 => Some(Role::Probabilities),
            2 => Some(Role::Target),
            _ => None,
        }
    }
}

/// One scalar grid of finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl Heatmap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::dim(format!("empty lattice {width}x{height}")));
        }
        if values.len() != width * height {
            return Err(Error::dim(format!(
                "{} values for a {width}x{height} lattice",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite heatmap value at x={}, y={}",
                i % width,
                i / width
            )));
        }
        Ok(Heatmap {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Heatmap::new(width, height, vec![0.0; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Heatmap::new(width, height, values)
    }

    /// Caller guarantees `values.len() == width * height` and finiteness.
    pub(crate) fn from_raw(width: usize, height: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), width * height);
        Heatmap {
            width,
            height,
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Pixel-center coordinates of flat index `i`.
    pub fn coords(&self, i: usize) -> Point {
        Point::new((i % self.width) as f64, (i / self.width) as f64)
    }
}

/// Channels sharing one lattice and one role, ordered by landmark index when
/// they encode a landmark set.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    width: usize,
    height: usize,
    role: Role,
    channels: Vec<Heatmap>,
}

impl HeatmapStack {
    pub fn new(role: Role, channels: Vec<Heatmap>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::dim("heatmap stack needs at least one channel"))?;
        let (width, height) = (first.width, first.height);
        if let Some(k) = channels
            .iter()
            .position(|c| c.width != width || c.height != height)
        {
            return Err(Error::dim(format!(
                "channel {k} is {}x{}, expected {width}x{height}",
                channels[k].width, channels[k].height
            )));
        }
        if role == Role::Probabilities {
            for (k, c) in channels.iter().enumerate() {
                let sum: f64 = c.values.iter().sum();
                if c.values.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > PROBABILITY_SUM_TOL {
                    return Err(Error::Input(format!(
                        "channel {k} is not a probability map (sum {sum})"
                    )));
                }
            }
        }
        Ok(HeatmapStack {
            width,
            height,
            role,
            channels,
        })
    }

    pub fn zeros(role: Role, channels: usize, width: usize, height: usize) -> Result<Self> {
        let c = (0..channels)
            .map(|_| Heatmap::zeros(width, height))
            .collect::<Result<Vec<_>>>()?;
        HeatmapStack::new(role, c)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channels(&self) -> &[Heatmap] {
        &self.channels
    }

    pub fn channel(&self, k: usize) -> &Heatmap {
        &self.channels[k]
    }

    pub fn into_channels(self) -> Vec<Heatmap> {
        self.channels
    }

    /// Total number of values across channels.
    pub fn len(&self) -> usize {
        self.channels.len() * self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_shape(&self, other: &HeatmapStack) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.channels.len() == other.channels.len()
    }

    /// All values, channel after channel.
    pub fn flat_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.channels.iter().flat_map(|c| c.values.iter().copied())
    }

    /// Rebuilds a stack of the same shape from channel-major flat values.
    pub fn with_flat_values(&self, role: Role, flat: &[f64]) -> Result<HeatmapStack> {
        if flat.len() != self.len() {
            return Err(Error::dim(format!("{} values for stack of {}", flat.len(), self.len())));
        }
        let n = self.width * self.height;
        let channels = flat
            .chunks(n)
            .map(|c| Heatmap::new(self.width, self.height, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        HeatmapStack::new(role, channels)
    }
}

/// Temperature-scaled softmax over one heatmap.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    width: usize,
    height: usize,
    temperature: f64,
    probs: Vec<f64>,
}

impl ProbabilityMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_heatmap(self) -> Heatmap {
        Heatmap::from_raw(self.width, self.height, self.probs)
    }

    /// Expected lattice coordinate under the map, unclamped.
    fn expectation(&self) -> Point {
        let (mut sx, mut sy) = (0.0, 0.0);
        for (y, row) in self.probs.chunks_exact(self.width).enumerate() {
            let mut row_mass = 0.0;
            for (x, &m) in row.iter().enumerate() {
                sx += m * x as f64;
                row_mass += m;
            }
            sy += row_mass * y as f64;
        }
        Point::new(sx, sy)
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!(
            "temperature must be positive and finite, got {temperature}"
        )))
    }
}

/// `M(p) = exp(H(p)/T) / sum_q exp(H(q)/T)`, evaluated after subtracting the
/// maximum logit so large logits at small `T` do not overflow.
pub fn softmax_probabilities(h: &Heatmap, temperature: f64) -> Result<ProbabilityMap> {
    check_temperature(temperature)?;
    let max = h.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = h
        .values
        .iter()
        .map(|&v| ((v - max) / temperature).exp())
        .collect();
    let sum: f64 = probs.iter().sum();
    let inv = 1.0 / sum;
    probs.iter_mut().for_each(|m| *m *= inv);
    Ok(ProbabilityMap {
        width: h.width,
        height: h.height,
        temperature,
        probs,
    })
}

fn clamp_to_lattice(p: Point, width: usize, height: usize) -> Point {
    Point::new(
        p.x.clamp(0.0, (width - 1) as f64),
        p.y.clamp(0.0, (height - 1) as f64),
    )
}

/// Expected pixel coordinate under the temperature softmax of `h`.
pub fn soft_argmax(h: &Heatmap, temperature: f64) -> Result<Point> {
    let m = softmax_probabilities(h, temperature)?;
    Ok(clamp_to_lattice(m.expectation(), h.width, h.height))
}

/// Soft-argmax point together with the probability map it came from, for
/// callers that back-propagate through the decode.
pub fn soft_argmax_with_probs(h: &Heatmap, temperature: f64) -> Result<(Point, ProbabilityMap)> {
    let m = softmax_probabilities(h, temperature)?;
    Ok((m.expectation(), m))
}

/// Per-pixel partial derivatives of the soft-argmax point.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftArgmaxJacobian {
    pub point: Point,
    /// `d x_hat / d H(q)` for every pixel `q`.
    pub d_x: Vec<f64>,
    /// `d y_hat / d H(q)` for every pixel `q`.
    pub d_y: Vec<f64>,
}

/// `d p_hat / d H(q) = M(q) (q - p_hat) / T`.
pub fn soft_argmax_jacobian(h: &Heatmap, temperature: f64) -> Result<SoftArgmaxJacobian> {
    let (point, m) = soft_argmax_with_probs(h, temperature)?;
    let inv_t = 1.0 / temperature;
    let n = m.probs.len();
    let mut d_x = Vec::with_capacity(n);
    let mut d_y = Vec::with_capacity(n);
    for (i, &mq) in m.probs.iter().enumerate() {
        let q = h.coords(i);
        d_x.push(inv_t * mq * (q.x - point.x));
        d_y.push(inv_t * mq * (q.y - point.y));
    }
    Ok(SoftArgmaxJacobian { point, d_x, d_y })
}

/// Vector-Jacobian product: gradient of `upstream.x * x_hat + upstream.y * y_hat`
/// with respect to the logits, accumulated into `out`.
pub fn soft_argmax_vjp_into(m: &ProbabilityMap, point: Point, upstream: Point, scale: f64, out: &mut [f64]) {
    let k = scale / m.temperature;
    let rows = m.probs.chunks_exact(m.width).zip(out.chunks_exact_mut(m.width));
    for (y, (prow, orow)) in rows.enumerate() {
        let dy = upstream.y * (y as f64 - point.y);
        for (x, (&mq, o)) in prow.iter().zip(orow.iter_mut()).enumerate() {
            *o += k * mq * (upstream.x * (x as f64 - point.x) + dy);
        }
    }
}

/// Pixel with the maximum value; ties go to the lowest row, then the lowest
/// column.
pub fn argmax_point(h: &Heatmap) -> Point {
    let mut best = 0;
    for (i, &v) in h.values.iter().enumerate() {
        if v > h.values[best] {
            best = i;
        }
    }
    h.coords(best)
}

fn require_landmark_channels(stack: &HeatmapStack) -> Result<()> {
    if stack.num_channels() != NUM_LANDMARKS {
        return Err(Error::dim(format!(
            "landmark decoding needs {NUM_LANDMARKS} channels, got {}",
            stack.num_channels()
        )));
    }
    Ok(())
}

/// Hard argmax decode of a 16-channel stack.
pub fn decode_argmax(stack: &HeatmapStack) -> Result<LandmarkSet> {
    require_landmark_channels(stack)?;
    let mut out = LandmarkSet::default();
    for (p, c) in out.0.iter_mut().zip(stack.channels()) {
        *p = argmax_point(c);
    }
    Ok(out)
}

/// Soft-argmax decode of a 16-channel stack.
pub fn decode_soft_argmax(stack: &HeatmapStack, temperature: f64) -> Result<LandmarkSet> {
    require_landmark_channels(stack)?;
    let mut out = LandmarkSet::default();
    for (p, c) in out.0.iter_mut().zip(stack.channels()) {
        *p = soft_argmax(c, temperature)?;
    }
    Ok(out)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!("sigma must be positive and finite, got {sigma}")))
    }
}

/// Unnormalized Gaussian `exp(-|p - c|^2 / (2 sigma^2))` around `center`.
pub fn gaussian_heatmap(center: Point, width: usize, height: usize, sigma: f64) -> Result<Heatmap> {
    check_sigma(sigma)?;
    if !center.is_finite() {
        return Err(Error::Input("non-finite Gaussian center".into()));
    }
    let k = -0.5 / (sigma * sigma);
    Heatmap::from_fn(width, height, |x, y| {
        let dx = x as f64 - center.x;
        let dy = y as f64 - center.y;
        (k * (dx * dx + dy * dy)).exp()
    })
}

/// Gaussian target stack, one channel per point.
pub fn encode_points(points: &[Point], width: usize, height: usize, sigma: f64) -> Result<HeatmapStack> {
    let channels = points
        .iter()
        .map(|&p| gaussian_heatmap(p, width, height, sigma))
        .collect::<Result<Vec<_>>>()?;
    HeatmapStack::new(Role::Target, channels)
}

/// Gaussian target stack for a landmark set.
pub fn encode_gaussian(coords: &LandmarkSet, width: usize, height: usize, sigma: f64) -> Result<HeatmapStack> {
    encode_points(coords.points(), width, height, sigma)
}
