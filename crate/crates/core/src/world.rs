//! Procedural street world.
//!
//! Each place is a fixed layout of sky, road, buildings, trees and vehicles.
//! Traversals of a place shift objects by at most two pixels. Conditions are
//! closed-form photometric maps applied on top of a reference render, so the
//! mask and place id of a sample never change with its appearance.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Rng, Tensor};

pub const NUM_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["sky", "road", "building", "vehicle", "vegetation"];

pub const SKY: u8 = 0;
pub const ROAD: u8 = 1;
pub const BUILDING: u8 = 2;
pub const VEHICLE: u8 = 3;
pub const VEGETATION: u8 = 4;

pub const REFERENCE_ID: u32 = 0;

const MAX_JITTER: i32 = 2;
const TEXTURE_AMPLITUDE: f32 = 0.025;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    pub places: u32,
    pub layout_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            height: 48,
            width: 48,
            places: 32,
            layout_seed: 2019,
        }
    }
}

/// One rendered frame: a `3 x H x W` image in `[0, 1]` and its exact mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Vec<u8>,
    pub place_id: u32,
    pub condition_id: u32,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Geometry {
    Rect { x0: i32, y0: i32, x1: i32, y1: i32 },
    Ellipse { cx: i32, cy: i32, rx: i32, ry: i32 },
}

impl Geometry {
    fn contains(&self, x: i32, y: i32) -> bool {
        match *self {
            Geometry::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Geometry::Ellipse { cx, cy, rx, ry } => {
                let dx = (x - cx) as f32 / rx as f32;
                let dy = (y - cy) as f32 / ry as f32;
                dx * dx + dy * dy <= 1.0
            }
        }
    }

    fn shifted(&self, dx: i32, dy: i32) -> Geometry {
        match *self {
            Geometry::Rect { x0, y0, x1, y1 } => Geometry::Rect {
                x0: x0 + dx,
                y0: y0 + dy,
                x1: x1 + dx,
                y1: y1 + dy,
            },
            Geometry::Ellipse { cx, cy, rx, ry } => Geometry::Ellipse {
                cx: cx + dx,
                cy: cy + dy,
                rx,
                ry,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub class: u8,
    geometry: Geometry,
    pub color: [f32; 3],
    windows: bool,
}

/// Fixed layout of one place.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub place_id: u32,
    pub layout_seed: u64,
    pub horizon: i32,
    road_top: (i32, i32),
    road_bottom: (i32, i32),
    ground_color: [f32; 3],
    pub objects: Vec<SceneObject>,
}

const BUILDING_PALETTE: [[f32; 3]; 4] = [
    [0.62, 0.36, 0.28],
    [0.78, 0.70, 0.55],
    [0.58, 0.56, 0.64],
    [0.70, 0.52, 0.40],
];

const VEHICLE_PALETTE: [[f32; 3]; 4] = [
    [0.86, 0.14, 0.12],
    [0.14, 0.24, 0.82],
    [0.92, 0.80, 0.14],
    [0.10, 0.62, 0.66],
];

fn vary(rng: &mut Rng, color: [f32; 3], amount: f32) -> [f32; 3] {
    let s = 1.0 + rng.uniform_in(-amount, amount);
    [
        (color[0] * s).clamp(0.0, 1.0),
        (color[1] * s).clamp(0.0, 1.0),
        (color[2] * s).clamp(0.0, 1.0),
    ]
}

/// Deterministic value in `[-1, 1)` for texture.
fn hash_unit(a: u64, b: u64, c: u64) -> f32 {
    let mut z = a
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f))
        .wrapping_add(c.wrapping_mul(0x1656_67b1_9e37_79f9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 40) as f32 / (1u64 << 23) as f32 - 1.0
}

impl Scene {
    pub fn generate(place_id: u32, layout_seed: u64, cfg: &WorldConfig) -> Result<Scene> {
        if place_id >= cfg.places {
            return Err(Error::contract(format!("place {place_id} outside 0..{}", cfg.places)));
        }
        let (h, w) = (cfg.height as i32, cfg.width as i32);
        if h < 24 || w < 24 {
            return Err(Error::Config(format!("image {h}x{w} too small, need at least 24x24")));
        }
        let mut rng = Rng::new(layout_seed).split(u64::from(place_id));
        let horizon = h * 3 / 8 + rng.int_in(-h / 12, h / 12);
        let road_top = (w / 2 + rng.int_in(-w / 12, w / 12), rng.int_in(1, 3));
        let road_bottom = (w / 2 + rng.int_in(-w / 6, w / 6), rng.int_in(w * 5 / 16, w * 7 / 16));
        let ground_color = vary(&mut rng, [0.27, 0.50, 0.20], 0.12);

        let mut objects = Vec::new();
        for _ in 0..rng.int_in(2, 4) {
            let bw = rng.int_in(w / 8, w * 5 / 16);
            let bh = rng.int_in(h / 8, horizon - 3);
            let x0 = rng.int_in(-2, w - bw + 2);
            let base = BUILDING_PALETTE[rng.below(BUILDING_PALETTE.len())];
            let color = vary(&mut rng, base, 0.08);
            objects.push(SceneObject {
                class: BUILDING,
                geometry: Geometry::Rect { x0, y0: horizon - bh, x1: x0 + bw, y1: horizon + 2 },
                color,
                windows: bw >= 8,
            });
        }
        for _ in 0..rng.int_in(1, 3) {
            let rx = rng.int_in(3, 6);
            let ry = rng.int_in(3, 5);
            let cx = rng.int_in(2, w - 3);
            let cy = horizon - rng.int_in(1, 6);
            objects.push(SceneObject {
                class: VEGETATION,
                geometry: Geometry::Ellipse { cx, cy, rx, ry },
                color: vary(&mut rng, [0.14, 0.40, 0.14], 0.15),
                windows: false,
            });
        }
        for _ in 0..rng.int_in(1, 3) {
            let y = rng.int_in(horizon + 6, h - 6);
            let t = (y - horizon) as f32 / (h - 1 - horizon) as f32;
            let centre = road_top.0 as f32 + (road_bottom.0 - road_top.0) as f32 * t;
            let half = road_top.1 as f32 + (road_bottom.1 - road_top.1) as f32 * t;
            let vw = 4 + (y - horizon) / 3;
            let vh = (vw * 3 / 5).max(3);
            let x = (centre + half * rng.uniform_in(-0.6, 0.6)) as i32 - vw / 2;
            let base = VEHICLE_PALETTE[rng.below(VEHICLE_PALETTE.len())];
            let color = vary(&mut rng, base, 0.08);
            objects.push(SceneObject {
                class: VEHICLE,
                geometry: Geometry::Rect { x0: x, y0: y - vh, x1: x + vw, y1: y },
                color,
                windows: false,
            });
        }
        Ok(Scene {
            place_id,
            layout_seed,
            horizon,
            road_top,
            road_bottom,
            ground_color,
            objects,
        })
    }

    /// Reference-condition render of one traversal.
    pub fn render(&self, jitter_seed: u64, cfg: &WorldConfig) -> Result<Sample> {
        let (h, w) = (cfg.height as i32, cfg.width as i32);
        let mut jitter = Rng::new(self.layout_seed)
            .split(0x6a17_0000 | u64::from(self.place_id))
            .split(jitter_seed);
        let horizon = self.horizon + jitter.int_in(-1, 1);
        let road_dx = jitter.int_in(-MAX_JITTER, MAX_JITTER);
        let shifts: Vec<(i32, i32)> = self
            .objects
            .iter()
            .map(|_| (jitter.int_in(-MAX_JITTER, MAX_JITTER), jitter.int_in(-MAX_JITTER, MAX_JITTER)))
            .collect();

        let plane = cfg.height * cfg.width;
        let mut image = vec![0.0f32; 3 * plane];
        let mut mask = vec![SKY; plane];
        let tex_key = self.layout_seed ^ u64::from(self.place_id) << 32;
        for y in 0..h {
            for x in 0..w {
                let (mut class, mut color, mut tex_id) = if y < horizon {
                    let t = y as f32 / horizon.max(1) as f32;
                    (SKY, [0.42 + 0.30 * t, 0.60 + 0.22 * t, 0.88 + 0.05 * t], 0u64)
                } else {
                    (VEGETATION, self.ground_color, 1)
                };
                if y > horizon {
                    let t = (y - horizon) as f32 / (h - 1 - horizon).max(1) as f32;
                    let centre = (self.road_top.0 + road_dx) as f32
                        + (self.road_bottom.0 - self.road_top.0) as f32 * t;
                    let half = self.road_top.1 as f32 + (self.road_bottom.1 - self.road_top.1) as f32 * t;
                    if (x as f32 - centre).abs() <= half {
                        class = ROAD;
                        color = [0.38, 0.38, 0.40];
                        tex_id = 2;
                    }
                }
                for (i, (obj, &(dx, dy))) in self.objects.iter().zip(&shifts).enumerate() {
                    let geo = obj.geometry.shifted(dx, dy);
                    if geo.contains(x, y) {
                        class = obj.class;
                        color = obj.color;
                        tex_id = 3 + i as u64;
                        if obj.windows {
                            if let Geometry::Rect { x0, y0, .. } = geo {
                                if (x - x0) % 3 == 1 && (y - y0) % 4 == 2 {
                                    color = [color[0] * 0.6, color[1] * 0.6, color[2] * 0.65];
                                }
                            }
                        }
                    }
                }
                let idx = y as usize * cfg.width + x as usize;
                mask[idx] = class;
                let noise = TEXTURE_AMPLITUDE * hash_unit(tex_key, tex_id, (y as u64) << 16 | x as u64);
                for c in 0..3 {
                    image[c * plane + idx] = (color[c] + noise).clamp(0.0, 1.0);
                }
            }
        }
        Ok(Sample {
            image: Tensor::new(&[3, cfg.height, cfg.width], image)?,
            mask,
            place_id: self.place_id,
            condition_id: REFERENCE_ID,
        })
    }
}

/// Renders place `place_id` of world `layout_seed` for traversal `jitter_seed`
/// under the reference condition.
pub fn render_scene(place_id: u32, layout_seed: u64, jitter_seed: u64, cfg: &WorldConfig) -> Result<Sample> {
    Scene::generate(place_id, layout_seed, cfg)?.render(jitter_seed, cfg)
}

/// Additive Gaussian light (or shadow, with negative intensity).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    /// Centre as a fraction of width and height.
    pub cx: f32,
    pub cy: f32,
    /// Radius as a fraction of the image width.
    pub radius: f32,
    pub intensity: [f32; 3],
}

/// Closed-form photometric condition, applied per pixel in this order:
/// contrast fade towards `fade_color`, gamma, brightness and tint, additive
/// blob, box blur, Gaussian noise, clipping to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub id: u32,
    pub name: String,
    pub gamma: f32,
    pub brightness: f32,
    pub tint: [f32; 3],
    pub fade: f32,
    pub fade_color: [f32; 3],
    pub blob: Option<Blob>,
    pub blur_radius: usize,
    pub noise_std: f32,
}

impl ConditionSpec {
    pub fn reference() -> Self {
        ConditionSpec {
            id: REFERENCE_ID,
            name: "reference".into(),
            gamma: 1.0,
            brightness: 1.0,
            tint: [1.0; 3],
            fade: 0.0,
            fade_color: [0.0; 3],
            blob: None,
            blur_radius: 0,
            noise_std: 0.0,
        }
    }

    fn named(name: &str) -> Self {
        ConditionSpec {
            name: name.into(),
            ..ConditionSpec::reference()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.gamma == 1.0
            && self.brightness == 1.0
            && self.tint == [1.0; 3]
            && self.fade == 0.0
            && self.blob.is_none()
            && self.blur_radius == 0
            && self.noise_std == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma > 0.0
            && self.brightness >= 0.0
            && self.tint.iter().all(|&t| t >= 0.0)
            && (0.0..=1.0).contains(&self.fade)
            && self.noise_std >= 0.0
            && self.blob.as_ref().is_none_or(|b| b.radius > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid condition `{}`", self.name)))
        }
    }

    /// Value of the per-pixel part of the map (everything except blob, blur
    /// and noise) for channel `c`.
    pub fn pointwise(&self, value: f32, c: usize) -> f32 {
        let faded = value * (1.0 - self.fade) + self.fade * self.fade_color[c];
        libm::powf(faded.max(0.0), self.gamma) * self.brightness * self.tint[c]
    }
}

/// Night: dark, high gamma, blue tint.
pub fn night() -> ConditionSpec {
    ConditionSpec {
        gamma: 2.2,
        brightness: 0.35,
        tint: [0.8, 0.9, 1.25],
        ..ConditionSpec::named("night")
    }
}

/// The initial conditions in the order they are enabled; the default
/// configuration uses the first four.
pub fn condition_catalog() -> Vec<ConditionSpec> {
    vec![
        night(),
        ConditionSpec {
            gamma: 0.9,
            fade: 0.5,
            fade_color: [0.92, 0.94, 0.97],
            noise_std: 0.02,
            ..ConditionSpec::named("snow")
        },
        ConditionSpec {
            gamma: 1.4,
            brightness: 0.75,
            tint: [1.2, 0.82, 0.55],
            ..ConditionSpec::named("dusk")
        },
        ConditionSpec {
            brightness: 1.1,
            tint: [1.05, 1.0, 0.88],
            blob: Some(Blob {
                cx: 0.7,
                cy: 0.15,
                radius: 0.3,
                intensity: [0.55, 0.5, 0.35],
            }),
            ..ConditionSpec::named("sun_glare")
        },
        ConditionSpec {
            gamma: 2.0,
            brightness: 0.4,
            tint: [0.85, 0.9, 1.2],
            blur_radius: 1,
            noise_std: 0.03,
            ..ConditionSpec::named("night_rain")
        },
        ConditionSpec {
            gamma: 2.4,
            brightness: 0.2,
            tint: [0.9, 0.9, 1.1],
            ..ConditionSpec::named("night_low_exposure")
        },
        ConditionSpec {
            brightness: 0.9,
            blob: Some(Blob {
                cx: 0.25,
                cy: 0.75,
                radius: 0.35,
                intensity: [-0.3, -0.3, -0.25],
            }),
            ..ConditionSpec::named("shadows")
        },
    ]
}

/// The condition reserved for online learning.
pub fn held_out_condition() -> ConditionSpec {
    ConditionSpec {
        gamma: 0.55,
        brightness: 1.35,
        tint: [1.05, 1.0, 0.92],
        blob: Some(Blob {
            cx: 0.7,
            cy: 0.15,
            radius: 0.3,
            intensity: [0.3, 0.28, 0.2],
        }),
        ..ConditionSpec::named("sun_ultrahigh_exposure")
    }
}

/// The first `n` catalog conditions with ids `1..=n`, and the held-out
/// condition with id `n + 1`.
pub fn conditions(n: usize) -> Result<(Vec<ConditionSpec>, ConditionSpec)> {
    let catalog = condition_catalog();
    if n == 0 || n > catalog.len() {
        return Err(Error::Config(format!("initial condition count must be 1..={}", catalog.len())));
    }
    let initial = catalog
        .into_iter()
        .take(n)
        .enumerate()
        .map(|(i, c)| ConditionSpec { id: i as u32 + 1, ..c })
        .collect();
    let held = ConditionSpec {
        id: n as u32 + 1,
        ..held_out_condition()
    };
    Ok((initial, held))
}

fn box_blur(image: &mut [f32], channels: usize, h: usize, w: usize, radius: usize) {
    let plane = h * w;
    let mut tmp = vec![0.0f32; plane];
    for c in 0..channels {
        let img = &mut image[c * plane..(c + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for d in -(radius as isize)..=radius as isize {
                    let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                    acc += img[y * w + xx];
                }
                tmp[y * w + x] = acc / (2 * radius + 1) as f32;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for d in -(radius as isize)..=radius as isize {
                    let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                    acc += tmp[yy * w + x];
                }
                img[y * w + x] = acc / (2 * radius + 1) as f32;
            }
        }
    }
}

/// Applies a condition to a `3 x H x W` image.
pub fn apply_condition_image(image: &Tensor, spec: &ConditionSpec, noise_seed: u64) -> Result<Tensor> {
    spec.validate()?;
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        other => return Err(Error::dim("apply_condition", format!("expected CHW image, got {other:?}"))),
    };
    if spec.is_identity() {
        return Ok(image.clone());
    }
    let plane = h * w;
    let mut out = image.clone();
    let data = out.data_mut();
    for ch in 0..c {
        for v in &mut data[ch * plane..(ch + 1) * plane] {
            *v = spec.pointwise(*v, ch.min(2));
        }
    }
    if let Some(blob) = &spec.blob {
        let (cx, cy) = (blob.cx * w as f32, blob.cy * h as f32);
        let r = blob.radius * w as f32;
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f32 - cx, y as f32 - cy);
                let d2 = dx * dx + dy * dy;
                let fall = libm::expf(-d2 / (2.0 * r * r));
                for ch in 0..c {
                    data[ch * plane + y * w + x] += blob.intensity[ch.min(2)] * fall;
                }
            }
        }
    }
    if spec.blur_radius > 0 {
        box_blur(data, c, h, w, spec.blur_radius);
    }
    if spec.noise_std > 0.0 {
        let mut rng = Rng::new(noise_seed);
        for v in data.iter_mut() {
            *v += spec.noise_std * rng.normal();
        }
    }
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Re-renders `sample` under `spec`; mask and place id are copied verbatim.
pub fn apply_condition(sample: &Sample, spec: &ConditionSpec, noise_seed: u64) -> Result<Sample> {
    Ok(Sample {
        image: apply_condition_image(&sample.image, spec, noise_seed)?,
        mask: sample.mask.clone(),
        place_id: sample.place_id,
        condition_id: spec.id,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Traversal (jitter seed) range of one split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRange {
    pub start: u64,
    pub count: u64,
}

impl SeedRange {
    pub fn overlaps(&self, other: &SeedRange) -> bool {
        self.start < other.start + other.count && other.start < self.start + self.count
    }

    pub fn seeds(&self) -> core::ops::Range<u64> {
        self.start..self.start + self.count
    }
}

/// Traversals per split. Test traversals are shared by every condition so
/// that evaluation compares the same scenes; train and validation
/// traversals are offset per condition so that no two conditions see aligned
/// pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_per_place: u64,
    pub val_per_place: u64,
    pub test_per_place: u64,
    /// Offset between the train/val traversals of consecutive conditions.
    pub condition_stride: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan {
            train_per_place: 16,
            val_per_place: 2,
            test_per_place: 4,
            condition_stride: 1000,
        }
    }
}

impl SplitPlan {
    pub fn range(&self, split: Split, condition_id: u32) -> SeedRange {
        let base = 100 + self.condition_stride * u64::from(condition_id);
        match split {
            Split::Train => SeedRange { start: base, count: self.train_per_place },
            Split::Val => SeedRange { start: base + self.train_per_place, count: self.val_per_place },
            Split::Test => SeedRange { start: 0, count: self.test_per_place },
        }
    }

    pub fn validate(&self, conditions: &[u32]) -> Result<()> {
        if self.test_per_place < 2 {
            return Err(Error::Config("test split needs at least two traversals per place".into()));
        }
        if self.train_per_place == 0 || self.val_per_place == 0 {
            return Err(Error::Config("train and val splits must be non-empty".into()));
        }
        let mut ids = conditions.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let mut ranges = Vec::new();
        for c in ids {
            for split in Split::ALL {
                if split == Split::Test && !ranges.is_empty() {
                    continue;
                }
                ranges.push((c, split, self.range(split, c)));
            }
        }
        for (i, a) in ranges.iter().enumerate() {
            for b in &ranges[i + 1..] {
                if a.2.overlaps(&b.2) {
                    return Err(Error::Config(format!(
                        "traversal seeds of {} (condition {}) overlap {} (condition {})",
                        a.1.name(),
                        a.0,
                        b.1.name(),
                        b.0
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Noise seed of one rendered frame.
pub fn noise_seed(layout_seed: u64, condition_id: u32, place_id: u32, jitter: u64) -> u64 {
    Rng::new(layout_seed)
        .split(0x4e01_0000 | u64::from(condition_id))
        .split(u64::from(place_id) << 32 | jitter)
        .seed()
}

/// Frames of `route` under `condition` for one split.
///
/// Frames come in traversal order (all places of the first traversal, then
/// the next). The training split is additionally shuffled with a seed
/// specific to the condition, so training sets of different conditions are
/// never aligned.
pub fn build_split(
    route: &[u32],
    condition: &ConditionSpec,
    split: Split,
    plan: &SplitPlan,
    cfg: &WorldConfig,
) -> Result<Vec<Sample>> {
    plan.validate(&[REFERENCE_ID, condition.id])?;
    let scenes = route
        .iter()
        .map(|&p| Scene::generate(p, cfg.layout_seed, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(route.len() * plan.range(split, condition.id).count as usize);
    for jitter in plan.range(split, condition.id).seeds() {
        for scene in &scenes {
            let reference = scene.render(jitter, cfg)?;
            let seed = noise_seed(cfg.layout_seed, condition.id, scene.place_id, jitter);
            out.push(apply_condition(&reference, condition, seed)?);
        }
    }
    if split == Split::Train {
        Rng::new(cfg.layout_seed)
            .split(0x5_4aff_1e00 | u64::from(condition.id))
            .shuffle(&mut out);
    }
    Ok(out)
}

/// Stacks sample images into an `N x 3 x H x W` batch.
pub fn batch_images(samples: &[&Sample]) -> Result<Tensor> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    Tensor::stack(&images)
}
