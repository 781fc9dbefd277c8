//! Hand-designed diffusion processes on heat maps: heat flow, edge-stopped
//! (Perona-Malik-like) diffusion, tensor-driven anisotropic diffusion and
//! geodesic active contours.
//!
//! All schemes are explicit in time. Spatial fluxes use face-averaged
//! coefficients and zero flux across the grid border.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::ScoreStack;
use crate::ops;
use crate::tensor::Tensor;

/// Explicit 2-D diffusion is stable (and monotone) up to this step.
pub const MAX_EXPLICIT_DT: f32 = 0.25;
/// Regularizer of `|∇u|` in the geodesic active contour flow.
pub const GAC_EPSILON: f32 = 1e-3;
/// Gaussian scale at which structure tensor entries are averaged.
pub const STRUCTURE_INTEGRATION_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeStopKind {
    /// `1 / (1 + (s / lambda)^2)`
    Rational,
    /// `exp(-(s / lambda)^2)`
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeStopParams {
    pub kind: EdgeStopKind,
    pub lambda: f32,
    pub presmooth_sigma: f64,
}

impl EdgeStopParams {
    pub fn new(kind: EdgeStopKind, lambda: f32, presmooth_sigma: f64) -> Result<Self> {
        let p = EdgeStopParams {
            kind,
            lambda,
            presmooth_sigma,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.presmooth_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "presmooth sigma must be >= 0, got {}",
                self.presmooth_sigma
            )));
        }
        Ok(())
    }

    /// Rational edge-stop with `lambda` set to the 90th percentile of the
    /// image gradient magnitude.
    pub fn for_image(image: &Tensor, kind: EdgeStopKind, presmooth_sigma: f64) -> Result<Self> {
        let lambda = default_lambda(image, presmooth_sigma)?;
        EdgeStopParams::new(kind, lambda, presmooth_sigma)
    }

    pub fn apply(&self, magnitude: f32) -> f32 {
        let r = magnitude / self.lambda;
        match self.kind {
            EdgeStopKind::Rational => 1.0 / (1.0 + r * r),
            EdgeStopKind::Exponential => (-r * r).exp(),
        }
    }
}

/// `|∇L|` of the (optionally presmoothed) luminance `L = (R + G + B) / 3`.
pub fn image_gradient(image: &Tensor, presmooth_sigma: f64) -> Result<(Tensor, Tensor)> {
    let lum = ops::luminance(image)?;
    let smooth = ops::gaussian_smooth(&lum, presmooth_sigma)?;
    ops::grad_xy(&smooth)
}

pub fn gradient_magnitude(image: &Tensor, presmooth_sigma: f64) -> Result<Tensor> {
    let (gx, gy) = image_gradient(image, presmooth_sigma)?;
    gx.zip_map(&gy, |a, b| (a * a + b * b).sqrt())
}

/// 90th percentile (nearest rank) of the gradient magnitude, floored at
/// `1e-3` so that flat images still yield a valid parameter.
pub fn default_lambda(image: &Tensor, presmooth_sigma: f64) -> Result<f32> {
    let mag = gradient_magnitude(image, presmooth_sigma)?;
    let mut v = mag.into_data();
    v.sort_by(f32::total_cmp);
    let rank = ((0.9 * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Ok(v[rank - 1].max(1e-3))
}

/// Edge-stopping field `g(I, x)` in `(0, 1]`, `[H, W, 1]`.
pub fn edge_stop(image: &Tensor, params: &EdgeStopParams) -> Result<Tensor> {
    params.validate()?;
    let mag = gradient_magnitude(image, params.presmooth_sigma)?;
    Ok(mag.map(|s| params.apply(s)))
}

fn check_dt(dt: f32, limit: f32) -> Result<()> {
    if !(dt > 0.0 && dt <= limit) {
        return Err(Error::InvalidArgument(format!("time step {dt} outside (0, {limit}]")));
    }
    Ok(())
}

fn single_channel(u: &Tensor) -> Result<(usize, usize)> {
    let g = u.grid()?;
    if g.channels != 1 {
        return Err(Error::Shape(format!("expected an [H, W, 1] map, got {:?}", u.shape())));
    }
    Ok((g.height, g.width))
}

/// Explicit 5-point diffusion with face conductivities `cond(p, q)`.
///
/// The update is clamped to the range of the 5-point neighbourhood; in exact
/// arithmetic it is a convex combination of those values already, so this
/// only removes rounding excursions.
fn diffuse5(u: &Tensor, dt: f32, cond: impl Fn(usize, usize) -> f32) -> Tensor {
    let (h, w) = (u.shape()[0], u.shape()[1]);
    let d = u.data();
    let mut out = Vec::with_capacity(d.len());
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let c = d[p];
            let nbrs = [
                y * w + (x + 1).min(w - 1),
                y * w + x.saturating_sub(1),
                (y + 1).min(h - 1) * w + x,
                y.saturating_sub(1) * w + x,
            ];
            let mut acc = 0.0f32;
            let (mut lo, mut hi) = (c, c);
            for q in nbrs {
                acc += cond(p, q) * (d[q] - c);
                lo = lo.min(d[q]);
                hi = hi.max(d[q]);
            }
            out.push((c + dt * acc).clamp(lo, hi));
        }
    }
    Tensor::new(u.shape(), out).expect("same shape")
}

/// `u + dt * Δu` with the 5-point Laplacian and zero-flux border.
pub fn heat_step(u: &Tensor, dt: f32) -> Result<Tensor> {
    check_dt(dt, MAX_EXPLICIT_DT)?;
    single_channel(u)?;
    Ok(diffuse5(u, dt, |_, _| 1.0))
}

/// `u + dt * div(g ∇u)` with `g` averaged onto cell faces.
pub fn perona_malik_step(u: &Tensor, g: &Tensor, dt: f32) -> Result<Tensor> {
    check_dt(dt, MAX_EXPLICIT_DT)?;
    single_channel(u)?;
    u.expect_same_shape(g)?;
    let gd = g.data();
    if let Some(bad) = gd.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("edge-stop value {bad} outside [0, 1]")));
    }
    Ok(diffuse5(u, dt, |p, q| 0.5 * (gd[p] + gd[q])))
}

/// Per-pixel symmetric 2x2 diffusion tensors `[[dxx, dxy], [dxy, dyy]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionTensorField {
    height: usize,
    width: usize,
    dxx: Vec<f32>,
    dxy: Vec<f32>,
    dyy: Vec<f32>,
}

impl DiffusionTensorField {
    /// Fails unless every tensor is positive semi-definite (to 1e-6).
    pub fn new(height: usize, width: usize, dxx: Vec<f32>, dxy: Vec<f32>, dyy: Vec<f32>) -> Result<Self> {
        let n = height * width;
        if dxx.len() != n || dxy.len() != n || dyy.len() != n {
            return Err(Error::Shape(format!("diffusion field components must have {n} entries")));
        }
        for i in 0..n {
            let (a, b, c) = (dxx[i], dxy[i], dyy[i]);
            if !(a >= 0.0 && c >= 0.0 && a * c - b * b >= -1e-6) {
                return Err(Error::NotPsd {
                    x: i % width,
                    y: i / width,
                });
            }
        }
        Ok(DiffusionTensorField {
            height,
            width,
            dxx,
            dxy,
            dyy,
        })
    }

    pub fn identity(height: usize, width: usize) -> Self {
        let n = height * width;
        DiffusionTensorField {
            height,
            width,
            dxx: vec![1.0; n],
            dxy: vec![0.0; n],
            dyy: vec![1.0; n],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(dxx, dxy, dyy)` at a pixel.
    pub fn at(&self, y: usize, x: usize) -> (f32, f32, f32) {
        let i = y * self.width + x;
        (self.dxx[i], self.dxy[i], self.dyy[i])
    }

    pub fn max_eigenvalue(&self) -> f32 {
        (0..self.dxx.len())
            .map(|i| {
                let (a, b, c) = (self.dxx[i], self.dxy[i], self.dyy[i]);
                0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt()
            })
            .fold(0.0, f32::max)
    }
}

/// `u + dt * div(D ∇u)`.
///
/// Fluxes live on cell faces: the normal component uses the face difference
/// and the tangential component the average of the two adjacent central
/// differences, giving a 9-point stencil that conserves the mean.
pub fn anisotropic_step(u: &Tensor, field: &DiffusionTensorField, dt: f32) -> Result<Tensor> {
    let (h, w) = single_channel(u)?;
    if (h, w) != (field.height, field.width) {
        return Err(Error::Shape(format!(
            "map {h}x{w} vs diffusion field {}x{}",
            field.height, field.width
        )));
    }
    let lmax = field.max_eigenvalue().max(f32::MIN_POSITIVE);
    // Eigenvalues of unit-bounded fields come out a few ulps above 1 in f32.
    check_dt(dt, MAX_EXPLICIT_DT / lmax * (1.0 + 1e-5))?;
    let d = u.data();
    let at = |y: usize, x: usize| d[y * w + x];
    let mut div = vec![0.0f32; h * w];

    for y in 0..h {
        let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
        let span = (yd - yu).max(1) as f32;
        for x in 0..w.saturating_sub(1) {
            let (p, q) = (y * w + x, y * w + x + 1);
            let a = 0.5 * (field.dxx[p] + field.dxx[q]);
            let b = 0.5 * (field.dxy[p] + field.dxy[q]);
            let ux = at(y, x + 1) - at(y, x);
            let uy = 0.5 * (at(yd, x) + at(yd, x + 1) - at(yu, x) - at(yu, x + 1)) / span;
            let flux = a * ux + b * uy;
            div[p] += flux;
            div[q] -= flux;
        }
    }
    for y in 0..h.saturating_sub(1) {
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let span = (xr - xl).max(1) as f32;
            let (p, q) = (y * w + x, (y + 1) * w + x);
            let c = 0.5 * (field.dyy[p] + field.dyy[q]);
            let b = 0.5 * (field.dxy[p] + field.dxy[q]);
            let uy = at(y + 1, x) - at(y, x);
            let ux = 0.5 * (at(y, xr) + at(y + 1, xr) - at(y, xl) - at(y + 1, xl)) / span;
            let flux = c * uy + b * ux;
            div[p] += flux;
            div[q] -= flux;
        }
    }
    let out = d.iter().zip(&div).map(|(&v, &dv)| v + dt * dv).collect();
    Tensor::new(u.shape(), out)
}

/// Diffusion tensors aligned with local image structure: eigenvalue `g` of
/// the edge-stop function across edges (along the dominant gradient
/// direction of the smoothed structure tensor) and 1 along them.
pub fn structure_tensor_field(image: &Tensor, params: &EdgeStopParams) -> Result<DiffusionTensorField> {
    params.validate()?;
    let (gx, gy) = image_gradient(image, params.presmooth_sigma)?;
    let g = gx.grid()?;
    let jxx = ops::gaussian_smooth(&gx.zip_map(&gx, |a, b| a * b)?, STRUCTURE_INTEGRATION_SIGMA)?;
    let jxy = ops::gaussian_smooth(&gx.zip_map(&gy, |a, b| a * b)?, STRUCTURE_INTEGRATION_SIGMA)?;
    let jyy = ops::gaussian_smooth(&gy.zip_map(&gy, |a, b| a * b)?, STRUCTURE_INTEGRATION_SIGMA)?;
    let n = g.pixels();
    let (mut dxx, mut dxy, mut dyy) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let (a, b, c) = (jxx.data()[i] as f64, jxy.data()[i] as f64, jyy.data()[i] as f64);
        let mu1 = 0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt();
        let (mut vx, mut vy) = if b.abs() > 1e-12 {
            (mu1 - c, b)
        } else if a >= c {
            (1.0, 0.0)
        } else {
            (0.0, 1.0)
        };
        let norm = (vx * vx + vy * vy).sqrt();
        vx /= norm;
        vy /= norm;
        let (sx, sy) = (gx.data()[i], gy.data()[i]);
        let across = params.apply((sx * sx + sy * sy).sqrt()) as f64;
        // D = across * v vᵀ + 1 * v⊥ v⊥ᵀ
        dxx.push((across * vx * vx + vy * vy) as f32);
        dxy.push(((across - 1.0) * vx * vy) as f32);
        dyy.push((across * vy * vy + vx * vx) as f32);
    }
    DiffusionTensorField::new(g.height, g.width, dxx, dxy, dyy)
}

/// `u + dt * |∇u| * div(g ∇u / sqrt(|∇u|² + ε²))` with central differences.
pub fn gac_step(u: &Tensor, g: &Tensor, dt: f32, epsilon_norm: f32) -> Result<Tensor> {
    single_channel(u)?;
    u.expect_same_shape(g)?;
    if !(epsilon_norm > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon_norm}")));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step {dt} must be > 0")));
    }
    let (ux, uy) = ops::grad_xy(u)?;
    let eps2 = epsilon_norm * epsilon_norm;
    let n = u.len();
    let (mut nx, mut ny, mut mag) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let (a, b) = (ux.data()[i], uy.data()[i]);
        let m2 = a * a + b * b;
        let s = g.data()[i] / (m2 + eps2).sqrt();
        nx.push(a * s);
        ny.push(b * s);
        mag.push(m2.sqrt());
    }
    let (dnx, _) = ops::grad_xy(&Tensor::new(u.shape(), nx)?)?;
    let (_, dny) = ops::grad_xy(&Tensor::new(u.shape(), ny)?)?;
    let out = (0..n)
        .map(|i| u.data()[i] + dt * mag[i] * (dnx.data()[i] + dny.data()[i]))
        .collect();
    Tensor::new(u.shape(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Heat,
    PeronaMalik,
    Anisotropic,
    Gac,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Heat, Scheme::PeronaMalik, Scheme::Anisotropic, Scheme::Gac];

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Heat => "heat",
            Scheme::PeronaMalik => "perona_malik",
            Scheme::Anisotropic => "anisotropic",
            Scheme::Gac => "gac",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s || k.name().replace('_', "-") == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scheme `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionConfig {
    pub dt: f32,
    pub steps: usize,
    pub scheme: Scheme,
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        match self.scheme {
            Scheme::Heat | Scheme::PeronaMalik => check_dt(self.dt, MAX_EXPLICIT_DT),
            Scheme::Anisotropic | Scheme::Gac => check_dt(self.dt, f32::MAX),
        }
    }
}

/// Runs the configured scheme on every class channel independently and
/// returns all `steps + 1` states (index 0 is the input).
///
/// Channels are expected to hold per-class probabilities. For geodesic
/// active contours each channel is shifted by -0.5 so that the `P = 0.5`
/// decision boundary is the zero level set, and shifted back afterwards.
pub fn evolve_trajectory(
    scores: &ScoreStack,
    image: &Tensor,
    config: &EvolutionConfig,
    params: &EdgeStopParams,
) -> Result<Vec<ScoreStack>> {
    config.validate()?;
    let grid = scores.grid();
    let ig = image.grid()?;
    if (ig.height, ig.width) != (grid.height, grid.width) {
        return Err(Error::Shape(format!(
            "scores {}x{} vs image {}x{}",
            grid.height, grid.width, ig.height, ig.width
        )));
    }
    let mut states = vec![scores.clone()];
    if config.steps == 0 {
        return Ok(states);
    }
    let g = match config.scheme {
        Scheme::PeronaMalik | Scheme::Gac => Some(edge_stop(image, params)?),
        _ => None,
    };
    let field = match config.scheme {
        Scheme::Anisotropic => Some(structure_tensor_field(image, params)?),
        _ => None,
    };
    let shift = if config.scheme == Scheme::Gac { 0.5 } else { 0.0 };
    let mut channels: Vec<Tensor> = (0..grid.channels)
        .map(|k| Ok(scores.tensor().channel(k)?.map(|v| v - shift)))
        .collect::<Result<_>>()?;
    for _ in 0..config.steps {
        for u in channels.iter_mut() {
            *u = match config.scheme {
                Scheme::Heat => heat_step(u, config.dt)?,
                Scheme::PeronaMalik => perona_malik_step(u, g.as_ref().expect("built above"), config.dt)?,
                Scheme::Anisotropic => anisotropic_step(u, field.as_ref().expect("built above"), config.dt)?,
                Scheme::Gac => gac_step(u, g.as_ref().expect("built above"), config.dt, GAC_EPSILON)?,
            };
        }
        let restored: Vec<Tensor> = channels.iter().map(|u| u.map(|v| v + shift)).collect();
        states.push(ScoreStack::new(Tensor::stack_channels(&restored)?)?);
    }
    Ok(states)
}

/// Final state of [`evolve_trajectory`].
pub fn evolve(
    scores: &ScoreStack,
    image: &Tensor,
    config: &EvolutionConfig,
    params: &EdgeStopParams,
) -> Result<ScoreStack> {
    Ok(evolve_trajectory(scores, image, config, params)?
        .pop()
        .expect("trajectory holds the input"))
}
