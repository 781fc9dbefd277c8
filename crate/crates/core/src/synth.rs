//! Synthetic aerial-like scenes with exact ground truth, and imperfect
//! map-style reference labels derived from them (per-object shifts,
//! omissions, fixed-width road rasterization).

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::LabelMap;
use crate::netpbm;
use crate::ops;
use crate::tensor::Tensor;
use crate::{seeded_rng, Rng};

pub const BACKGROUND: u8 = 0;
pub const BUILDING: u8 = 1;
pub const ROAD: u8 = 2;
pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "building", "road"];
pub const MIN_SCENE_SIZE: usize = 64;

const ROOF_COLORS: [[f32; 3]; 5] = [
    [0.72, 0.32, 0.22],
    [0.82, 0.48, 0.30],
    [0.36, 0.34, 0.42],
    [0.88, 0.86, 0.80],
    [0.56, 0.20, 0.22],
];
const SOIL: [f32; 3] = [0.56, 0.50, 0.38];
const VEGETATION: [f32; 3] = [0.24, 0.42, 0.18];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneStyle {
    /// Target fraction of pixels covered by buildings.
    pub building_density: f64,
    /// Range of building half-extents in pixels.
    pub building_half_size: [f64; 2],
    /// Probability that a building is rotated (otherwise axis-aligned).
    pub rotated_fraction: f64,
    /// Inclusive range of road counts per scene.
    pub roads: [usize; 2],
    /// Inclusive range of true road widths in pixels.
    pub road_width: [usize; 2],
    pub vegetation_patches: usize,
    /// Standard deviation of per-pixel colour noise.
    pub noise: f32,
}

impl Default for SceneStyle {
    fn default() -> Self {
        SceneStyle {
            building_density: 0.12,
            building_half_size: [4.0, 11.0],
            rotated_fraction: 0.5,
            roads: [2, 3],
            road_width: [5, 9],
            vegetation_patches: 6,
            noise: 0.03,
        }
    }
}

impl SceneStyle {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.building_density) {
            return bad(format!("building_density {} outside [0, 1)", self.building_density));
        }
        let [lo, hi] = self.building_half_size;
        if !(lo >= 1.0 && hi >= lo) {
            return bad(format!("building_half_size [{lo}, {hi}] invalid"));
        }
        if !(0.0..=1.0).contains(&self.rotated_fraction) {
            return bad(format!("rotated_fraction {} outside [0, 1]", self.rotated_fraction));
        }
        if self.roads[0] > self.roads[1] {
            return bad(format!("roads range {:?} invalid", self.roads));
        }
        if self.road_width[0] < 1 || self.road_width[0] > self.road_width[1] {
            return bad(format!("road_width range {:?} invalid", self.road_width));
        }
        if !(self.noise >= 0.0) {
            return bad(format!("noise {} must be >= 0", self.noise));
        }
        Ok(())
    }
}

/// A (possibly rotated) rectangle. Coordinates are continuous with pixel
/// `(y, x)` covering `[y, y+1) x [x, x+1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub center: [f64; 2],
    pub half_extent: [f64; 2],
    /// Rotation in radians.
    pub angle: f64,
    pub roof: [f32; 3],
}

impl Building {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.center[0], x - self.center[1]);
        let (s, c) = self.angle.sin_cos();
        let v = c * dy - s * dx;
        let u = s * dy + c * dx;
        v.abs() <= self.half_extent[0] && u.abs() <= self.half_extent[1]
    }

    pub fn radius(&self) -> f64 {
        self.half_extent[0].hypot(self.half_extent[1])
    }

    pub fn translated(&self, dy: f64, dx: f64) -> Building {
        Building {
            center: [self.center[0] + dy, self.center[1] + dx],
            ..self.clone()
        }
    }
}

/// A road centerline with its true width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Road {
    /// Polyline vertices as `[y, x]`.
    pub points: Vec<[f64; 2]>,
    pub width: f64,
    pub tone: f32,
}

impl Road {
    pub fn distance(&self, y: f64, x: f64) -> f64 {
        distance_to_polyline([y, x], &self.points)
    }
}

pub fn distance_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dy, dx) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dy * dy + dx * dx;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dy + (p[1] - a[1]) * dx) / len2).clamp(0.0, 1.0)
    };
    (p[0] - a[0] - t * dy).hypot(p[1] - a[1] - t * dx)
}

pub fn distance_to_polyline(p: [f64; 2], points: &[[f64; 2]]) -> f64 {
    match points {
        [] => f64::INFINITY,
        [only] => (p[0] - only[0]).hypot(p[1] - only[1]),
        _ => points
            .windows(2)
            .map(|s| distance_to_segment(p, s[0], s[1]))
            .fold(f64::INFINITY, f64::min),
    }
}

/// Object-level description of a scene.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub buildings: Vec<Building>,
    pub roads: Vec<Road>,
}

/// Rasterizes roads (pixel centre within half the width of the centerline)
/// and then buildings on top. `road_width` overrides every road's width.
pub fn rasterize(height: usize, width: usize, layout: &Layout, road_width: Option<f64>) -> LabelMap {
    let mut labels = LabelMap::filled(height, width, BACKGROUND);
    for road in &layout.roads {
        let half = road_width.unwrap_or(road.width) / 2.0;
        let (y0, y1, x0, x1) = polyline_bounds(&road.points, half, height, width);
        for y in y0..y1 {
            for x in x0..x1 {
                if road.distance(y as f64 + 0.5, x as f64 + 0.5) <= half {
                    labels.set(y, x, ROAD);
                }
            }
        }
    }
    for b in &layout.buildings {
        for_building_pixels(b, height, width, |y, x| labels.set(y, x, BUILDING));
    }
    labels
}

fn polyline_bounds(points: &[[f64; 2]], pad: f64, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let (mut ylo, mut yhi, mut xlo, mut xhi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        ylo = ylo.min(p[0]);
        yhi = yhi.max(p[0]);
        xlo = xlo.min(p[1]);
        xhi = xhi.max(p[1]);
    }
    let clip = |v: f64, n: usize| v.clamp(0.0, n as f64) as usize;
    (
        clip((ylo - pad - 1.0).floor(), h),
        clip((yhi + pad + 1.0).ceil(), h),
        clip((xlo - pad - 1.0).floor(), w),
        clip((xhi + pad + 1.0).ceil(), w),
    )
}

fn for_building_pixels(b: &Building, h: usize, w: usize, mut f: impl FnMut(usize, usize)) {
    let r = b.radius();
    let clip = |v: f64, n: usize| v.clamp(0.0, n as f64) as usize;
    for y in clip((b.center[0] - r).floor(), h)..clip((b.center[0] + r).ceil() + 1.0, h) {
        for x in clip((b.center[1] - r).floor(), w)..clip((b.center[1] + r).ceil() + 1.0, w) {
            if b.contains(y as f64 + 0.5, x as f64 + 0.5) {
                f(y, x);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `[H, W, 3]` in `[0, 1]`.
    pub image: Tensor,
    pub truth: LabelMap,
    /// Imperfect reference labels; equal to `truth` until degraded.
    pub noisy_ref: LabelMap,
    pub layout: Layout,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.truth.height()
    }

    pub fn width(&self) -> usize {
        self.truth.width()
    }

    pub fn labels(&self, source: LabelSource) -> &LabelMap {
        match source {
            LabelSource::Truth => &self.truth,
            LabelSource::Reference => &self.noisy_ref,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Truth,
    Reference,
}

fn random_road(h: f64, w: f64, style: &SceneStyle, rng: &mut Rng) -> Road {
    // endpoints on opposite borders, one or two jittered interior vertices
    let vertical = rng.gen_bool(0.5);
    let (len, across) = if vertical { (h, w) } else { (w, h) };
    let interior = rng.gen_range(1..=2usize);
    let mut points = Vec::with_capacity(interior + 2);
    let mut c = rng.gen_range(0.15 * across..0.85 * across);
    for i in 0..interior + 2 {
        let t = i as f64 / (interior + 1) as f64;
        let along = if i == 0 {
            -2.0
        } else if i == interior + 1 {
            len + 2.0
        } else {
            t * len
        };
        if i > 0 {
            c = (c + rng.gen_range(-0.15 * across..0.15 * across)).clamp(0.05 * across, 0.95 * across);
        }
        points.push(if vertical { [along, c] } else { [c, along] });
    }
    Road {
        points,
        width: rng.gen_range(style.road_width[0]..=style.road_width[1]) as f64,
        tone: rng.gen_range(0.45..0.65),
    }
}

fn place_buildings(h: usize, w: usize, style: &SceneStyle, roads: &[Road], rng: &mut Rng) -> Vec<Building> {
    let target = style.building_density * (h * w) as f64;
    let mut covered = 0.0;
    let mut buildings: Vec<Building> = Vec::new();
    let [lo, hi] = style.building_half_size;
    for _ in 0..4000 {
        if covered >= target {
            break;
        }
        let half_extent = [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)];
        let angle = if rng.gen_bool(style.rotated_fraction) {
            rng.gen_range(0.0..FRAC_PI_2)
        } else {
            0.0
        };
        let b = Building {
            center: [rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64)],
            half_extent,
            angle,
            roof: ROOF_COLORS[rng.gen_range(0..ROOF_COLORS.len())],
        };
        let r = b.radius();
        let clear_of_roads = roads
            .iter()
            .all(|road| road.distance(b.center[0], b.center[1]) > r + road.width / 2.0 + 2.0);
        let clear_of_buildings = buildings.iter().all(|o| {
            (o.center[0] - b.center[0]).hypot(o.center[1] - b.center[1]) > r + o.radius() + 2.0
        });
        if clear_of_roads && clear_of_buildings {
            // area inside the scene
            let mut px = 0usize;
            for_building_pixels(&b, h, w, |_, _| px += 1);
            covered += px as f64;
            buildings.push(b);
        }
    }
    buildings
}

fn render(h: usize, w: usize, layout: &Layout, style: &SceneStyle, rng: &mut Rng) -> Result<Tensor> {
    let unit = Normal::new(0.0f32, 1.0).expect("unit normal");
    // smooth low-frequency brightness variation of the ground
    let field = Tensor::from_fn3(h, w, 1, |_, _, _| unit.sample(rng));
    let field = ops::gaussian_smooth(&field, 8.0)?;
    let (lo, hi) = field.min_max();
    let span = (hi - lo).max(1e-6);
    let mut image = Tensor::from_fn3(h, w, 3, |y, x, c| {
        SOIL[c] + 0.08 * ((field.at3(y, x, 0) - lo) / span - 0.5)
    });

    for _ in 0..style.vegetation_patches {
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let ry = rng.gen_range(8.0..28.0);
        let rx = rng.gen_range(8.0..28.0);
        let shade = rng.gen_range(0.85f32..1.15);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                if dy * dy + dx * dx <= 1.0 {
                    for c in 0..3 {
                        image.set3(y, x, c, VEGETATION[c] * shade);
                    }
                }
            }
        }
    }

    for road in &layout.roads {
        let half = road.width / 2.0;
        let (y0, y1, x0, x1) = polyline_bounds(&road.points, half, h, w);
        for y in y0..y1 {
            for x in x0..x1 {
                if road.distance(y as f64 + 0.5, x as f64 + 0.5) <= half {
                    for c in 0..3 {
                        image.set3(y, x, c, road.tone);
                    }
                }
            }
        }
    }

    for b in &layout.buildings {
        let mut mask = vec![false; h * w];
        for_building_pixels(b, h, w, |y, x| mask[y * w + x] = true);
        for y in 0..h {
            for x in 0..w {
                if !mask[y * w + x] {
                    continue;
                }
                let edge = (y == 0 || !mask[(y - 1) * w + x])
                    || (y + 1 == h || !mask[(y + 1) * w + x])
                    || (x == 0 || !mask[y * w + x - 1])
                    || (x + 1 == w || !mask[y * w + x + 1]);
                let k = if edge { 0.6 } else { 1.0 };
                for c in 0..3 {
                    image.set3(y, x, c, b.roof[c] * k);
                }
            }
        }
    }

    if style.noise > 0.0 {
        let noise = Normal::new(0.0f32, style.noise).expect("finite noise");
        for v in image.data_mut() {
            *v += noise.sample(rng);
        }
    }
    Ok(image.map(|v| v.clamp(0.0, 1.0)))
}

/// Draws a random scene: soil with low-frequency variation, vegetation
/// patches, gray polyline roads and rectangular buildings with distinct roof
/// colours and a darker 1-px outline. Deterministic given the generator
/// state.
pub fn generate_scene(height: usize, width: usize, style: &SceneStyle, rng: &mut Rng) -> Result<Scene> {
    if height < MIN_SCENE_SIZE || width < MIN_SCENE_SIZE {
        return Err(Error::InvalidArgument(format!(
            "scene must be at least {MIN_SCENE_SIZE}x{MIN_SCENE_SIZE}, got {height}x{width}"
        )));
    }
    style.validate()?;
    let road_count = rng.gen_range(style.roads[0]..=style.roads[1]);
    let roads: Vec<Road> = (0..road_count)
        .map(|_| random_road(height as f64, width as f64, style, rng))
        .collect();
    let buildings = place_buildings(height, width, style, &roads, rng);
    let layout = Layout { buildings, roads };
    let image = render(height, width, &layout, style, rng)?;
    let truth = rasterize(height, width, &layout, None);
    Ok(Scene {
        image,
        noisy_ref: truth.clone(),
        truth,
        layout,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    /// Each building is shifted by an independent integer offset drawn
    /// uniformly from `[-max_shift, max_shift]^2`.
    pub max_shift: u32,
    /// Probability that an object is missing from the reference.
    pub omit_prob: f64,
    /// Width at which every road is re-rasterized.
    pub road_width_px: f64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        DegradationSpec {
            max_shift: 6,
            omit_prob: 0.15,
            road_width_px: 7.0,
        }
    }
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omit_prob) {
            return Err(Error::Config(format!("omit_prob {} outside [0, 1]", self.omit_prob)));
        }
        if !(self.road_width_px >= 1.0) {
            return Err(Error::Config(format!("road_width_px {} must be >= 1", self.road_width_px)));
        }
        Ok(())
    }
}

/// What happened to each object of a layout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DegradationEdits {
    /// `Some((dy, dx))` for kept buildings, `None` for omitted ones.
    pub buildings: Vec<Option<(i32, i32)>>,
    pub roads_kept: Vec<bool>,
}

impl DegradationEdits {
    pub fn draw(layout: &Layout, spec: &DegradationSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let s = spec.max_shift as i32;
        let buildings = layout
            .buildings
            .iter()
            .map(|_| {
                let omit = rng.gen_bool(spec.omit_prob);
                let shift = (rng.gen_range(-s..=s), rng.gen_range(-s..=s));
                (!omit).then_some(shift)
            })
            .collect();
        let roads_kept = layout.roads.iter().map(|_| !rng.gen_bool(spec.omit_prob)).collect();
        Ok(DegradationEdits { buildings, roads_kept })
    }

    /// Layout as it appears in the reference.
    pub fn apply(&self, layout: &Layout) -> Result<Layout> {
        if self.buildings.len() != layout.buildings.len() || self.roads_kept.len() != layout.roads.len() {
            return Err(Error::InvalidArgument("edits do not match the layout".into()));
        }
        Ok(Layout {
            buildings: layout
                .buildings
                .iter()
                .zip(&self.buildings)
                .filter_map(|(b, e)| e.map(|(dy, dx)| b.translated(dy as f64, dx as f64)))
                .collect(),
            roads: layout
                .roads
                .iter()
                .zip(&self.roads_kept)
                .filter(|(_, &k)| k)
                .map(|(r, _)| r.clone())
                .collect(),
        })
    }
}

/// Reference labels for a scene layout: buildings shifted and omitted
/// independently, roads omitted or redrawn at the fixed reference width.
pub fn degrade_reference(
    height: usize,
    width: usize,
    layout: &Layout,
    spec: &DegradationSpec,
    rng: &mut Rng,
) -> Result<LabelMap> {
    let edits = DegradationEdits::draw(layout, spec, rng)?;
    Ok(rasterize(height, width, &edits.apply(layout)?, Some(spec.road_width_px)))
}

/// Generates a scene and its degraded reference from one seed.
pub fn generate_with_reference(
    height: usize,
    width: usize,
    style: &SceneStyle,
    spec: &DegradationSpec,
    seed: u64,
) -> Result<Scene> {
    let mut rng = seeded_rng(seed);
    let mut scene = generate_scene(height, width, style, &mut rng)?;
    let mut drng = seeded_rng(seed ^ 0x5eed_dec0_de00_0000);
    scene.noisy_ref = degrade_reference(height, width, &scene.layout, spec, &mut drng)?;
    Ok(scene)
}

/// Uniform top-left corners of `patch x patch` windows inside a
/// `height x width` grid.
pub fn sample_corners(height: usize, width: usize, patch: usize, count: usize, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
    if patch == 0 || patch > height || patch > width {
        return Err(Error::InvalidArgument(format!(
            "patch {patch} does not fit a {height}x{width} scene"
        )));
    }
    Ok((0..count)
        .map(|_| (rng.gen_range(0..=height - patch), rng.gen_range(0..=width - patch)))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub scene: usize,
    pub y: usize,
    pub x: usize,
    pub image: Tensor,
    pub labels: LabelMap,
}

/// `count` random patches: a uniformly chosen scene, then a uniform corner.
pub fn sample_patches(
    scenes: &[Scene],
    patch: usize,
    count: usize,
    source: LabelSource,
    rng: &mut Rng,
) -> Result<Vec<Patch>> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("no scenes to sample from".into()));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let s = rng.gen_range(0..scenes.len());
        let scene = &scenes[s];
        let (y, x) = sample_corners(scene.height(), scene.width(), patch, 1, rng)?[0];
        out.push(Patch {
            scene: s,
            y,
            x,
            image: scene.image.crop(y, x, patch, patch)?,
            labels: scene.labels(source).crop(y, x, patch, patch)?,
        });
    }
    Ok(out)
}

/// Sidecar written next to a scene's rasters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSidecar {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub style: SceneStyle,
    pub degradation: DegradationSpec,
    pub layout: Layout,
}

pub struct ScenePaths {
    pub image: PathBuf,
    pub truth: PathBuf,
    pub reference: PathBuf,
    pub sidecar: PathBuf,
}

impl ScenePaths {
    pub fn new(dir: &Path, stem: &str) -> Self {
        ScenePaths {
            image: dir.join(format!("{stem}.ppm")),
            truth: dir.join(format!("{stem}_truth.pgm")),
            reference: dir.join(format!("{stem}_ref.pgm")),
            sidecar: dir.join(format!("{stem}.json")),
        }
    }
}

pub fn save_scene(dir: &Path, stem: &str, scene: &Scene, sidecar: &SceneSidecar) -> Result<ScenePaths> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = ScenePaths::new(dir, stem);
    netpbm::save_image(&paths.image, &scene.image)?;
    netpbm::save_labels(&paths.truth, &scene.truth)?;
    netpbm::save_labels(&paths.reference, &scene.noisy_ref)?;
    let json = serde_json::to_string_pretty(sidecar)?;
    fs::write(&paths.sidecar, json + "\n").map_err(|e| Error::io(&paths.sidecar, e))?;
    Ok(paths)
}

pub fn load_scene(dir: &Path, stem: &str) -> Result<(Scene, SceneSidecar)> {
    let paths = ScenePaths::new(dir, stem);
    let text = fs::read_to_string(&paths.sidecar).map_err(|e| Error::io(&paths.sidecar, e))?;
    let sidecar: SceneSidecar = serde_json::from_str(&text)?;
    let image = netpbm::load_image(&paths.image)?;
    let truth = netpbm::load_labels(&paths.truth)?;
    let noisy_ref = netpbm::load_labels(&paths.reference)?;
    truth.check_classes(NUM_CLASSES)?;
    noisy_ref.check_classes(NUM_CLASSES)?;
    let g = image.grid()?;
    if (g.height, g.width) != (truth.height(), truth.width())
        || (truth.height(), truth.width()) != (noisy_ref.height(), noisy_ref.width())
    {
        return Err(Error::Shape(format!("scene `{stem}` rasters disagree in size")));
    }
    Ok((
        Scene {
            image,
            truth,
            noisy_ref,
            layout: sidecar.layout.clone(),
        },
        sidecar,
    ))
}

/// Which part of the three-way split a scene belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Coarse-stage training scenes (reference labels only are used).
    Train,
    /// Scene with accurate labels used to train the enhancer.
    Enhancement,
    /// Held-out evaluation scene.
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Enhancement => "enhancement",
            Split::Test => "test",
        }
    }

    /// Seed of scene `index`; different splits never share a seed for
    /// `index < 2^20`.
    pub fn scene_seed(&self, base: u64, index: usize) -> u64 {
        let tag = match self {
            Split::Train => 1u64,
            Split::Enhancement => 2,
            Split::Test => 3,
        };
        base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add((tag << 20) | index as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct DatasetSpec {
    pub scene_size: usize,
    pub train_scenes: usize,
    pub style: SceneStyle,
    pub degradation: DegradationSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            scene_size: 256,
            train_scenes: 8,
            style: SceneStyle::default(),
            degradation: DegradationSpec::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub enhancement: Scene,
    pub test: Scene,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scene_size < MIN_SCENE_SIZE {
            return Err(Error::Config(format!("scene_size must be >= {MIN_SCENE_SIZE}")));
        }
        self.style.validate()?;
        self.degradation.validate()
    }

    pub fn sidecar(&self, seed: u64, split: Split, index: usize, layout: &Layout) -> SceneSidecar {
        SceneSidecar {
            seed: split.scene_seed(seed, index),
            height: self.scene_size,
            width: self.scene_size,
            style: self.style.clone(),
            degradation: self.degradation,
            layout: layout.clone(),
        }
    }

    pub fn scene(&self, seed: u64, split: Split, index: usize) -> Result<Scene> {
        generate_with_reference(
            self.scene_size,
            self.scene_size,
            &self.style,
            &self.degradation,
            split.scene_seed(seed, index),
        )
    }

    /// All scenes of the three-way split; every scene has its own seed
    /// derived from `seed`, its split and its index.
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        self.validate()?;
        Ok(Dataset {
            train: (0..self.train_scenes)
                .map(|i| self.scene(seed, Split::Train, i))
                .collect::<Result<_>>()?,
            enhancement: self.scene(seed, Split::Enhancement, 0)?,
            test: self.scene(seed, Split::Test, 0)?,
        })
    }

    /// Writes `train/scene_NNN.*`, `enhancement/scene_000.*` and
    /// `test/scene_000.*` under `root`.
    pub fn write(&self, seed: u64, dataset: &Dataset, root: &Path) -> Result<()> {
        for (i, scene) in dataset.train.iter().enumerate() {
            let side = self.sidecar(seed, Split::Train, i, &scene.layout);
            save_scene(&root.join(Split::Train.name()), &format!("scene_{i:03}"), scene, &side)?;
        }
        for (split, scene) in [(Split::Enhancement, &dataset.enhancement), (Split::Test, &dataset.test)] {
            let side = self.sidecar(seed, split, 0, &scene.layout);
            save_scene(&root.join(split.name()), "scene_000", scene, &side)?;
        }
        Ok(())
    }
}

/// Loads every `scene_NNN` of a split directory, in index order.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<Scene>> {
    let dir = root.join(split.name());
    let mut stems: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let stem = name.strip_suffix(".json")?;
            stem.starts_with("scene_").then(|| stem.to_string())
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::InvalidArgument(format!("no scenes in {}", dir.display())));
    }
    stems.iter().map(|s| Ok(load_scene(&dir, s)?.0)).collect()
}
