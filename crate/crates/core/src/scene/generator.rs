use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{canonicalize_instances, featurize, PointCloud, RoomBounds, SemanticClass};
use crate::error::{Error, Result};

/// Parameters of one synthetic room.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: f64,
    pub depth: f64,
    pub height: f64,
    pub num_objects: usize,
    /// Classes objects are drawn from.
    pub palette: Vec<SemanticClass>,
    pub seed: u64,
    /// Surface sampling density in points per m².
    pub density: f64,
    pub ceiling: bool,
    pub position_noise: f64,
    pub color_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 5.0,
            depth: 4.0,
            height: 2.6,
            num_objects: 3,
            palette: vec![
                SemanticClass::Table,
                SemanticClass::Chair,
                SemanticClass::Sofa,
                SemanticClass::Board,
                SemanticClass::Clutter,
            ],
            seed: 0,
            density: 100.0,
            ceiling: true,
            position_noise: 0.005,
            color_noise: 0.02,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("width", self.width), ("depth", self.depth), ("height", self.height)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("room {name} must be positive, got {v}")));
            }
        }
        if !(self.density > 0.0) {
            return Err(Error::InvalidArgument("density must be positive".into()));
        }
        if self.num_objects > 0 && self.palette.is_empty() {
            return Err(Error::InvalidArgument("objects requested with an empty palette".into()));
        }
        if self.palette.iter().any(|c| c.is_structure()) {
            return Err(Error::InvalidArgument("palette may only hold object classes".into()));
        }
        Ok(())
    }
}

/// Footprint and height of a placed box.
#[derive(Debug, Clone, Copy)]
struct PlacedBox {
    class: SemanticClass,
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    top: f64,
}

impl PlacedBox {
    fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

// (width, depth, height) ranges
fn size_range(class: SemanticClass) -> [(f64, f64); 3] {
    match class {
        SemanticClass::Table => [(1.0, 1.6), (0.6, 0.9), (0.72, 0.78)],
        SemanticClass::Chair => [(0.45, 0.55), (0.45, 0.55), (0.8, 0.95)],
        SemanticClass::Sofa => [(1.6, 2.0), (0.8, 0.95), (0.75, 0.9)],
        SemanticClass::Board => [(1.0, 1.5), (0.05, 0.08), (1.6, 2.0)],
        SemanticClass::Clutter => [(0.3, 0.5), (0.3, 0.5), (0.3, 0.6)],
        _ => unreachable!("structure classes are not boxes"),
    }
}

const WALL_MARGIN: f64 = 0.2;
const OBJECT_GAP: f64 = 0.3;
const MAX_PLACEMENT_TRIES: usize = 2000;

fn place_objects(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<PlacedBox>> {
    let mut placed: Vec<PlacedBox> = Vec::with_capacity(spec.num_objects);
    for n in 0..spec.num_objects {
        let class = spec.palette[rng.random_range(0..spec.palette.len())];
        let [wr, dr, hr] = size_range(class);
        let mut w = rng.random_range(wr.0..=wr.1);
        let mut d = rng.random_range(dr.0..=dr.1);
        let h = rng.random_range(hr.0..=hr.1);
        if rng.random_bool(0.5) {
            std::mem::swap(&mut w, &mut d);
        }
        let free_x = spec.width - 2.0 * WALL_MARGIN - w;
        let free_y = spec.depth - 2.0 * WALL_MARGIN - d;
        if free_x <= 0.0 || free_y <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "object {n} ({}) does not fit in a {}x{} room",
                class.name(),
                spec.width,
                spec.depth
            )));
        }
        let mut ok = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let x0 = WALL_MARGIN + rng.random_range(0.0..free_x);
            let y0 = WALL_MARGIN + rng.random_range(0.0..free_y);
            let cand = PlacedBox {
                class,
                x0,
                y0,
                x1: x0 + w,
                y1: y0 + d,
                top: h,
            };
            let clear = placed.iter().all(|p| {
                cand.x0 >= p.x1 + OBJECT_GAP
                    || p.x0 >= cand.x1 + OBJECT_GAP
                    || cand.y0 >= p.y1 + OBJECT_GAP
                    || p.y0 >= cand.y1 + OBJECT_GAP
            });
            if clear {
                ok = Some(cand);
                break;
            }
        }
        placed.push(ok.ok_or_else(|| {
            Error::InvalidArgument(format!(
                "could not place {} objects in a {}x{} room",
                spec.num_objects, spec.width, spec.depth
            ))
        })?);
    }
    Ok(placed)
}

struct Sampler<'a> {
    rng: &'a mut ChaCha8Rng,
    density: f64,
    pos_noise: Normal<f64>,
    col_noise: Normal<f64>,
    raw: Vec<f64>,
    semantic: Vec<u32>,
    instance: Vec<u32>,
}

impl Sampler<'_> {
    /// Uniform samples on the rectangle `origin + s·u + t·v`, s,t ∈ [0,1].
    fn rect(
        &mut self,
        origin: [f64; 3],
        u: [f64; 3],
        v: [f64; 3],
        class: SemanticClass,
        instance: u32,
        keep: &dyn Fn(f64, f64) -> bool,
    ) {
        let area = norm(cross(u, v));
        let count = (area * self.density).round() as usize;
        let base = class.color();
        for _ in 0..count {
            let s: f64 = self.rng.random();
            let t: f64 = self.rng.random();
            let p = [
                origin[0] + s * u[0] + t * v[0],
                origin[1] + s * u[1] + t * v[1],
                origin[2] + s * u[2] + t * v[2],
            ];
            if !keep(p[0], p[1]) {
                continue;
            }
            for a in p {
                let noise = self.pos_noise.sample(self.rng);
                self.raw.push(a + noise);
            }
            for c in base {
                let noise = self.col_noise.sample(self.rng);
                self.raw.push((c + noise).clamp(0.0, 1.0));
            }
            self.semantic.push(class.id());
            self.instance.push(instance);
        }
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Sample a labeled room: floor, four walls, an optional ceiling and
/// `num_objects` non-overlapping boxes. Instance ids are canonical
/// (`0..I` in the order floor, walls, ceiling, objects).
pub fn generate_scene(spec: &SceneSpec) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let boxes = place_objects(spec, &mut rng)?;
    let (w, d, h) = (spec.width, spec.depth, spec.height);
    let mut s = Sampler {
        rng: &mut rng,
        density: spec.density,
        pos_noise: Normal::new(0.0, spec.position_noise.max(0.0)).expect("finite"),
        col_noise: Normal::new(0.0, spec.color_noise.max(0.0)).expect("finite"),
        raw: Vec::new(),
        semantic: Vec::new(),
        instance: Vec::new(),
    };
    let always = |_: f64, _: f64| true;

    let mut next_instance = 0u32;
    let mut new_instance = || {
        next_instance += 1;
        next_instance - 1
    };

    let floor = new_instance();
    let outside_boxes = |x: f64, y: f64| !boxes.iter().any(|b| b.contains_xy(x, y));
    s.rect([0.0, 0.0, 0.0], [w, 0.0, 0.0], [0.0, d, 0.0], SemanticClass::Floor, floor, &outside_boxes);

    let walls = [
        ([0.0, 0.0, 0.0], [w, 0.0, 0.0]),
        ([0.0, d, 0.0], [w, 0.0, 0.0]),
        ([0.0, 0.0, 0.0], [0.0, d, 0.0]),
        ([w, 0.0, 0.0], [0.0, d, 0.0]),
    ];
    for (origin, u) in walls {
        let id = new_instance();
        s.rect(origin, u, [0.0, 0.0, h], SemanticClass::Wall, id, &always);
    }
    if spec.ceiling {
        let id = new_instance();
        s.rect([0.0, 0.0, h], [w, 0.0, 0.0], [0.0, d, 0.0], SemanticClass::Ceiling, id, &always);
    }
    for b in &boxes {
        let id = new_instance();
        let (bw, bd, top) = (b.x1 - b.x0, b.y1 - b.y0, b.top);
        s.rect([b.x0, b.y0, top], [bw, 0.0, 0.0], [0.0, bd, 0.0], b.class, id, &always);
        s.rect([b.x0, b.y0, 0.0], [bw, 0.0, 0.0], [0.0, 0.0, top], b.class, id, &always);
        s.rect([b.x0, b.y1, 0.0], [bw, 0.0, 0.0], [0.0, 0.0, top], b.class, id, &always);
        s.rect([b.x0, b.y0, 0.0], [0.0, bd, 0.0], [0.0, 0.0, top], b.class, id, &always);
        s.rect([b.x1, b.y0, 0.0], [0.0, bd, 0.0], [0.0, 0.0, top], b.class, id, &always);
    }

    let Sampler {
        raw,
        semantic,
        instance,
        ..
    } = s;
    let bounds = RoomBounds::of_points(&raw, 6).ok_or_else(|| Error::InvalidArgument("scene has no points".into()))?;
    let cloud = featurize(&raw, &bounds)?;
    cloud.with_labels(semantic, canonicalize_instances(&instance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeSet, HashMap};

    fn spec(num_objects: usize, seed: u64) -> SceneSpec {
        SceneSpec {
            num_objects,
            seed,
            width: 6.0,
            depth: 5.0,
            density: 40.0,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn instance_count_fixed_by_construction() {
        let pc = generate_scene(&spec(3, 42)).unwrap();
        let ids: BTreeSet<u32> = pc.gt_instance.as_ref().unwrap().iter().copied().collect();
        // floor + 4 walls + ceiling + 3 objects
        assert_eq!(ids, (0..9).collect());
    }

    #[test]
    fn same_seed_same_cloud() {
        assert_eq!(generate_scene(&spec(4, 7)).unwrap(), generate_scene(&spec(4, 7)).unwrap());
        assert_ne!(generate_scene(&spec(4, 7)).unwrap(), generate_scene(&spec(4, 8)).unwrap());
    }

    #[test]
    fn no_objects_means_structure_only() {
        let pc = generate_scene(&spec(0, 1)).unwrap();
        assert!(pc
            .gt_semantic
            .unwrap()
            .iter()
            .all(|&c| SemanticClass::from_id(c).unwrap().is_structure()));
    }

    #[test]
    fn every_instance_has_one_class() {
        for seed in 0..5 {
            let pc = generate_scene(&spec(6, seed)).unwrap();
            let mut class_of = HashMap::new();
            for (&s, &i) in pc.gt_semantic.as_ref().unwrap().iter().zip(pc.gt_instance.as_ref().unwrap()) {
                assert_eq!(*class_of.entry(i).or_insert(s), s);
            }
            for i in 0..pc.len() {
                assert!(pc.point(i)[6..].iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn degenerate_room_rejected() {
        let s = SceneSpec {
            width: 0.0,
            ..SceneSpec::default()
        };
        assert!(generate_scene(&s).is_err());
        let s = SceneSpec {
            height: -1.0,
            ..SceneSpec::default()
        };
        assert!(generate_scene(&s).is_err());
    }
}
