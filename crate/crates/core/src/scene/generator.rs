//! Deterministic synthetic rooms built from primitive point-cloud objects.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::Aabb;
use crate::mix_seed;

use super::rules::{derive_predicates, resolve_context_labels, PredicateRules};
use super::taxonomy::fine;
use super::{Instance, SceneError, SceneSample, Taxonomy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    /// Closed box surface.
    Box,
    /// Thin top plate on four corner legs, resting on the floor.
    Slab,
    /// Vertical cylinder shell inscribed in the footprint.
    Cylinder,
}

/// An object to be sampled, given by its noise-free bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectSpec {
    pub fine: usize,
    pub shape: Shape,
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl ObjectSpec {
    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|d| self.max[d] - self.min[d])
    }

    fn translated(&self, min: [f64; 3]) -> Self {
        let e = self.extent();
        Self {
            min,
            max: [0, 1, 2].map(|d| min[d] + e[d]),
            ..*self
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub min_entities: usize,
    pub max_entities: usize,
    /// Floor size along x and y, meters.
    pub room_extent: [f64; 2],
    pub room_height: f64,
    /// Standard deviation of the per-coordinate Gaussian surface noise.
    pub noise_sigma: f64,
    pub min_points: usize,
    pub max_points: usize,
    pub rules: PredicateRules,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            min_entities: 3,
            max_entities: 6,
            room_extent: [4.0, 4.0],
            room_height: 2.5,
            noise_sigma: 0.004,
            min_points: 200,
            max_points: 500,
            rules: PredicateRules::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::Config(m.into()));
        if self.min_entities == 0 {
            return bad("min_entities must be at least 1");
        }
        if self.max_entities < self.min_entities {
            return bad("max_entities is below min_entities");
        }
        if !self.room_extent.iter().all(|&e| e.is_finite() && e >= 2.0) {
            return bad("room_extent must be at least 2 m on both axes");
        }
        if !(self.room_height.is_finite() && self.room_height >= 2.0) {
            return bad("room_height must be at least 2 m");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        if self.min_points == 0 || self.max_points < self.min_points {
            return bad("point count range is empty");
        }
        let r = &self.rules;
        let tols = [r.contact_tol, r.near_radius, r.directional_ratio, r.same_tol, r.seat_adjacency];
        if !tols.iter().all(|t| t.is_finite() && *t >= 0.0) {
            return bad("rule thresholds must be non-negative");
        }
        Ok(())
    }
}

/// Seed of scene `index` in a corpus generated from `seed`.
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    mix_seed(seed, index)
}

/// Samples objects into a labelled scene. Objects added with
/// [`SceneBuilder::add_clone`] reuse the noise-free surface samples of
/// their template, so their clouds differ only by placement and noise.
#[derive(Clone, Debug, Default)]
pub struct SceneBuilder {
    objects: Vec<ObjectSpec>,
    template: Vec<usize>,
}

impl SceneBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn objects(&self) -> &[ObjectSpec] {
        &self.objects
    }

    pub fn add(&mut self, spec: ObjectSpec) -> usize {
        self.objects.push(spec);
        self.template.push(self.objects.len() - 1);
        self.objects.len() - 1
    }

    /// Copies object `of` with its lower corner moved to `min`.
    pub fn add_clone(&mut self, of: usize, min: [f64; 3]) -> usize {
        let spec = self.objects[of].translated(min);
        self.objects.push(spec);
        self.template.push(self.template[of]);
        self.objects.len() - 1
    }

    pub fn build(&self, config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<SceneSample, SceneError> {
        if self.objects.is_empty() {
            return Err(SceneError::Config("scene has no objects".into()));
        }
        let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| SceneError::Config(e.to_string()))?;
        let mut local: Vec<Option<Vec<[f64; 3]>>> = vec![None; self.objects.len()];
        let mut instances = Vec::with_capacity(self.objects.len());
        for (k, spec) in self.objects.iter().enumerate() {
            let t = self.template[k];
            if local[t].is_none() {
                let count = rng.random_range(config.min_points..=config.max_points);
                let tspec = &self.objects[t];
                local[t] = Some(sample_surface(tspec.shape, tspec.extent(), count, rng));
            }
            let pts = local[t]
                .as_ref()
                .expect("template sampled")
                .iter()
                .map(|p| {
                    [0, 1, 2].map(|d| {
                        let jitter = if config.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                        spec.min[d] + p[d] + jitter
                    })
                })
                .collect();
            instances.push(Instance::new(k as u32, pts)?);
        }
        let boxes: Vec<Aabb<f64>> = instances.iter().map(|i| i.aabb).collect();
        let mut fine_ids: Vec<usize> = self.objects.iter().map(|o| o.fine).collect();
        resolve_context_labels(&boxes, &mut fine_ids, &config.rules);
        let predicates = derive_predicates(&boxes, &fine_ids, &config.rules);
        SceneSample::new(instances, fine_ids, predicates, &Taxonomy::synthetic())
    }
}

/// Points on the surface of a shape occupying `[0, extent]`.
fn sample_surface(shape: Shape, e: [f64; 3], count: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    match shape {
        Shape::Box => (0..count).map(|_| box_point([0.0; 3], e, rng)).collect(),
        Shape::Slab => {
            let thickness = 0.04f64.min(e[2]);
            let legs = count / 4;
            let mut pts: Vec<_> = (0..count - legs)
                .map(|_| box_point([0.0, 0.0, e[2] - thickness], e, rng))
                .collect();
            let inset = 0.03f64.min(e[0] / 4.0).min(e[1] / 4.0);
            let corners = [
                [inset, inset],
                [e[0] - inset, inset],
                [inset, e[1] - inset],
                [e[0] - inset, e[1] - inset],
            ];
            for k in 0..legs {
                let c = corners[k % 4];
                pts.push([c[0], c[1], rng.random_range(0.0..=e[2] - thickness)]);
            }
            pts
        }
        Shape::Cylinder => {
            let r = 0.5 * e[0].min(e[1]);
            let (cx, cy) = (0.5 * e[0], 0.5 * e[1]);
            let side = std::f64::consts::TAU * r * e[2];
            let cap = std::f64::consts::PI * r * r;
            (0..count)
                .map(|_| {
                    let u = rng.random_range(0.0..side + 2.0 * cap);
                    let theta = rng.random_range(0.0..std::f64::consts::TAU);
                    if u < side {
                        [cx + r * theta.cos(), cy + r * theta.sin(), rng.random_range(0.0..=e[2])]
                    } else {
                        let rho = r * rng.random_range(0.0f64..=1.0).sqrt();
                        let z = if u < side + cap { 0.0 } else { e[2] };
                        [cx + rho * theta.cos(), cy + rho * theta.sin(), z]
                    }
                })
                .collect()
        }
    }
}

/// Uniform point on the surface of the box `[lo, hi]`, faces weighted by
/// area.
fn box_point(lo: [f64; 3], hi: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    let e = [0, 1, 2].map(|d| hi[d] - lo[d]);
    let areas = [e[1] * e[2], e[0] * e[2], e[0] * e[1]];
    let total = 2.0 * (areas[0] + areas[1] + areas[2]);
    let mut u = rng.random_range(0.0..total.max(f64::MIN_POSITIVE));
    let mut axis = 2;
    for (d, a) in areas.iter().enumerate() {
        if u < 2.0 * a {
            axis = d;
            break;
        }
        u -= 2.0 * a;
    }
    let mut p = [0, 1, 2].map(|d| rng.random_range(lo[d]..=hi[d]));
    p[axis] = if rng.random_bool(0.5) { lo[axis] } else { hi[axis] };
    p
}

/// Floor rectangle `[x0, y0, x1, y1]`.
type Rect = [f64; 4];

fn rects_clear(a: &Rect, b: &Rect, clearance: f64) -> bool {
    a[2] + clearance <= b[0] || b[2] + clearance <= a[0] || a[3] + clearance <= b[1] || b[3] + clearance <= a[1]
}

const CLEARANCE: f64 = 0.3;
const MARGIN: f64 = 0.1;
const WALL_THICKNESS: f64 = 0.2;
/// Minimum extent difference between same-class objects that are not clones.
const DISTINCT: f64 = 0.1;

struct Layout<'a> {
    config: &'a GeneratorConfig,
    builder: SceneBuilder,
    floor: Vec<Rect>,
    wall: Option<usize>,
}

fn range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..=hi)
}

fn same_family(a: usize, b: usize) -> bool {
    let table = |f| f == fine::TABLE || f == fine::DINING_TABLE;
    a == b || (table(a) && table(b))
}

impl<'a> Layout<'a> {
    fn new(config: &'a GeneratorConfig) -> Self {
        Self {
            config,
            builder: SceneBuilder::new(),
            floor: Vec::new(),
            wall: None,
        }
    }

    fn distinct(&self, fine_id: usize, e: [f64; 3]) -> bool {
        self.builder.objects().iter().all(|o| {
            !same_family(o.fine, fine_id) || (0..3).any(|d| (o.extent()[d] - e[d]).abs() >= DISTINCT)
        })
    }

    /// Draws extents until they differ from every same-class object.
    fn dims(&self, rng: &mut ChaCha8Rng, fine_id: usize, draw: impl Fn(&mut ChaCha8Rng) -> [f64; 3]) -> Option<[f64; 3]> {
        (0..30).map(|_| draw(rng)).find(|&e| self.distinct(fine_id, e))
    }

    /// Free floor position for a footprint of size `w x d`.
    fn spot(&self, rng: &mut ChaCha8Rng, w: f64, d: f64) -> Option<[f64; 2]> {
        let [rx, mut ry] = self.config.room_extent;
        if self.wall.is_some() {
            ry -= WALL_THICKNESS;
        }
        if w + 2.0 * MARGIN > rx || d + 2.0 * MARGIN > ry {
            return None;
        }
        for _ in 0..200 {
            let x = range(rng, MARGIN, rx - MARGIN - w);
            let y = range(rng, MARGIN, ry - MARGIN - d);
            let r = [x, y, x + w, y + d];
            if self.floor.iter().all(|o| rects_clear(o, &r, CLEARANCE)) {
                return Some([x, y]);
            }
        }
        None
    }

    /// Position flush against the wall, if there is one with room left.
    fn wall_spot(&self, rng: &mut ChaCha8Rng, w: f64, d: f64) -> Option<[f64; 2]> {
        let wall = self.builder.objects()[self.wall?];
        let y = wall.min[1] - d;
        for _ in 0..100 {
            let x = range(rng, wall.min[0], wall.max[0] - w);
            let r = [x, y, x + w, y + d];
            if self.floor.iter().all(|o| rects_clear(o, &r, CLEARANCE)) {
                return Some([x, y]);
            }
        }
        None
    }

    fn place(&mut self, spec: ObjectSpec) -> usize {
        self.floor.push([spec.min[0], spec.min[1], spec.max[0], spec.max[1]]);
        self.builder.add(spec)
    }

    fn add_wall(&mut self) {
        let [rx, ry] = self.config.room_extent;
        let id = self.builder.add(ObjectSpec {
            fine: fine::WALL,
            shape: Shape::Box,
            min: [0.2, ry - WALL_THICKNESS, 0.0],
            max: [rx - 0.2, ry, self.config.room_height],
        });
        self.wall = Some(id);
    }

    /// A small item standing on `host`, centered somewhere on its top.
    fn add_on_top(&mut self, rng: &mut ChaCha8Rng, host: usize, fine_id: usize) -> bool {
        let h = self.builder.objects()[host];
        let draw = |rng: &mut ChaCha8Rng| match fine_id {
            fine::CUP => {
                let r = range(rng, 0.035, 0.05);
                [2.0 * r, 2.0 * r, range(rng, 0.09, 0.13)]
            }
            fine::BOOK => [range(rng, 0.15, 0.25), range(rng, 0.1, 0.2), range(rng, 0.02, 0.05)],
            _ => {
                let hw = h.extent()[0];
                [range(rng, 0.4f64.min(hw), hw.min(1.0)), range(rng, 0.06, 0.1), range(rng, 0.35, 0.6)]
            }
        };
        let Some(e) = self.dims(rng, fine_id, draw) else {
            return false;
        };
        let he = h.extent();
        if e[0] + 0.1 > he[0] + 1e-9 && fine_id != fine::TV || e[1] > he[1] {
            return false;
        }
        let x = if fine_id == fine::TV {
            h.min[0] + 0.5 * (he[0] - e[0])
        } else {
            range(rng, h.min[0] + 0.05, h.max[0] - 0.05 - e[0])
        };
        let y = if fine_id == fine::TV {
            h.min[1] + 0.5 * (he[1] - e[1])
        } else {
            range(rng, h.min[1] + 0.05, (h.max[1] - 0.05 - e[1]).max(h.min[1] + 0.05))
        };
        let shape = if fine_id == fine::CUP { Shape::Cylinder } else { Shape::Box };
        self.builder.add(ObjectSpec {
            fine: fine_id,
            shape,
            min: [x, y, h.max[2]],
            max: [x + e[0], y + e[1], h.max[2] + e[2]],
        });
        true
    }

    /// A table with up to `chairs` identical chairs around it.
    fn add_table_group(&mut self, rng: &mut ChaCha8Rng, chairs: usize) -> Option<usize> {
        let te = self.dims(rng, fine::TABLE, |rng| {
            [range(rng, 0.8, 1.4), range(rng, 0.6, 0.9), range(rng, 0.72, 0.78)]
        })?;
        let ce = self.dims(rng, fine::CHAIR, |rng| {
            [range(rng, 0.42, 0.5), range(rng, 0.42, 0.5), range(rng, 0.8, 0.95)]
        })?;
        // Chair lower corners relative to the table's lower corner.
        let mut slots = Vec::new();
        for s in 0..4 {
            let gap = range(rng, 0.10, 0.25);
            let along = |rng: &mut ChaCha8Rng, len: f64, c: f64| range(rng, 0.0, (len - c).max(0.0));
            slots.push(match s {
                0 => [along(rng, te[0], ce[0]), -gap - ce[1]],
                1 => [along(rng, te[0], ce[0]), te[1] + gap],
                2 => [-gap - ce[0], along(rng, te[1], ce[1])],
                _ => [te[0] + gap, along(rng, te[1], ce[1])],
            });
        }
        let mut order = [0usize, 1, 2, 3];
        for k in (1..4).rev() {
            order.swap(k, rng.random_range(0..=k));
        }
        let used: Vec<[f64; 2]> = order[..chairs].iter().map(|&s| slots[s]).collect();
        let mut lo = [0.0f64, 0.0];
        let mut hi = [te[0], te[1]];
        for c in &used {
            for d in 0..2 {
                lo[d] = lo[d].min(c[d]);
                hi[d] = hi[d].max(c[d] + ce[d]);
            }
        }
        let [gx, gy] = self.spot(rng, hi[0] - lo[0], hi[1] - lo[1])?;
        let (ox, oy) = (gx - lo[0], gy - lo[1]);
        let table = self.builder.add(ObjectSpec {
            fine: fine::TABLE,
            shape: Shape::Slab,
            min: [ox, oy, 0.0],
            max: [ox + te[0], oy + te[1], te[2]],
        });
        let mut template = None;
        for c in &used {
            let min = [ox + c[0], oy + c[1], 0.0];
            match template {
                None => {
                    template = Some(self.builder.add(ObjectSpec {
                        fine: fine::CHAIR,
                        shape: Shape::Box,
                        min,
                        max: [min[0] + ce[0], min[1] + ce[1], ce[2]],
                    }))
                }
                Some(t) => {
                    self.builder.add_clone(t, min);
                }
            }
        }
        self.floor.push([gx, gy, gx + hi[0] - lo[0], gy + hi[1] - lo[1]]);
        Some(table)
    }

    /// A floor-standing object, flush to the wall when `against_wall`.
    fn add_floor_object(
        &mut self,
        rng: &mut ChaCha8Rng,
        fine_id: usize,
        shape: Shape,
        against_wall: bool,
        draw: impl Fn(&mut ChaCha8Rng) -> [f64; 3],
    ) -> Option<usize> {
        let e = self.dims(rng, fine_id, draw)?;
        let [x, y] = if against_wall {
            self.wall_spot(rng, e[0], e[1]).or_else(|| self.spot(rng, e[0], e[1]))?
        } else {
            self.spot(rng, e[0], e[1])?
        };
        Some(self.place(ObjectSpec {
            fine: fine_id,
            shape,
            min: [x, y, 0.0],
            max: [x + e[0], y + e[1], e[2]],
        }))
    }

    /// Adds one group using at most `budget` objects; returns how many
    /// objects were added.
    fn add_group(&mut self, rng: &mut ChaCha8Rng, budget: usize) -> usize {
        let before = self.builder.len();
        let wall = self.wall.is_some();
        let height = self.config.room_height;
        match rng.random_range(0..7) {
            0 | 1 => {
                let chairs = rng.random_range(0..=3usize).min(budget - 1);
                if let Some(t) = self.add_table_group(rng, chairs) {
                    if self.builder.len() - before < budget && rng.random_bool(0.5) {
                        let item = if rng.random_bool(0.5) { fine::CUP } else { fine::BOOK };
                        self.add_on_top(rng, t, item);
                    }
                }
            }
            2 => {
                let flush = wall && rng.random_bool(0.6);
                let cab = self.add_floor_object(rng, fine::CABINET, Shape::Box, flush, |rng| {
                    [range(rng, 0.5, 0.9), range(rng, 0.4, 0.6), range(rng, 0.8, 1.2)]
                });
                if let Some(c) = cab {
                    if budget > 1 && rng.random_bool(0.6) {
                        let item = [fine::TV, fine::CUP, fine::BOOK][rng.random_range(0..3)];
                        self.add_on_top(rng, c, item);
                    }
                }
            }
            3 => {
                let flush = wall && rng.random_bool(0.7);
                self.add_floor_object(rng, fine::REFRIGERATOR, Shape::Box, flush, |rng| {
                    [range(rng, 0.6, 0.8), range(rng, 0.6, 0.75), range(rng, 1.7, 1.9)]
                });
            }
            4 => {
                self.add_floor_object(rng, fine::PILLAR, Shape::Cylinder, false, |rng| {
                    let d = 2.0 * range(rng, 0.15, 0.3);
                    [d, d, height]
                });
            }
            5 => {
                self.add_floor_object(rng, fine::LAMP, Shape::Cylinder, false, |rng| {
                    let d = 2.0 * range(rng, 0.1, 0.2);
                    [d, d, range(rng, 1.3, 1.8)]
                });
            }
            _ => {
                self.add_floor_object(rng, fine::BOX, Shape::Box, false, |rng| {
                    [range(rng, 0.25, 0.6), range(rng, 0.25, 0.6), range(rng, 0.25, 0.6)]
                });
            }
        }
        self.builder.len() - before
    }
}

/// Generates one labelled room. Identical `(seed, config)` pairs give
/// identical scenes.
pub fn generate_scene(seed: u64, config: &GeneratorConfig) -> Result<SceneSample, SceneError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<SceneBuilder> = None;
    for _ in 0..16 {
        let target = rng.random_range(config.min_entities..=config.max_entities);
        let mut layout = Layout::new(config);
        if target >= 2 && rng.random_bool(0.5) {
            layout.add_wall();
        }
        let mut stalls = 0;
        while layout.builder.len() < target && stalls < 40 {
            if layout.add_group(&mut rng, target - layout.builder.len()) == 0 {
                stalls += 1;
            }
        }
        let n = layout.builder.len();
        let keep = best.as_ref().is_none_or(|b| n > b.len());
        if keep {
            best = Some(layout.builder);
        }
        if n >= config.min_entities {
            break;
        }
    }
    let builder = best.filter(|b| !b.is_empty()).ok_or_else(|| {
        SceneError::Config("room too small for any object".into())
    })?;
    builder.build(config, &mut rng)
}
