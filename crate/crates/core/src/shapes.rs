//! Procedural shape scenes.
//!
//! Two generators share one renderer: a broad "foundation" corpus in which
//! every shape kind is its own class, and a small target task with three
//! classes (background, round shapes, boxy shapes) where triangles appear as
//! unlabelled distractors. The foundation corpus plays the role of the broad
//! pretraining data a vision foundation model has seen; the target task is
//! what the teacher is adapted to and the student is evaluated on.

use rand::Rng as _;

use crate::data::{Image, LabeledDataset, Mask, SegmentationSample};
use crate::error::Result;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Ellipse,
    Square,
    Rectangle,
    Triangle,
    Ring,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 7] = [
        ShapeKind::Disk,
        ShapeKind::Ellipse,
        ShapeKind::Square,
        ShapeKind::Rectangle,
        ShapeKind::Triangle,
        ShapeKind::Ring,
        ShapeKind::Cross,
    ];

    fn foundation_class(self) -> u8 {
        Self::ALL.iter().position(|&k| k == self).unwrap() as u8 + 1
    }

    /// Intensity range of the kind. Round and boxy kinds do not overlap;
    /// triangles span both, so rejecting them needs shape.
    fn intensity_range(self) -> (f64, f64) {
        match self {
            ShapeKind::Disk | ShapeKind::Ellipse => (0.72, 0.95),
            ShapeKind::Square | ShapeKind::Rectangle => (0.42, 0.65),
            ShapeKind::Triangle => (0.5, 0.9),
            ShapeKind::Ring | ShapeKind::Cross => (0.45, 0.95),
        }
    }

    fn target_class(self) -> u8 {
        match self {
            ShapeKind::Disk | ShapeKind::Ellipse => 1,
            ShapeKind::Square | ShapeKind::Rectangle => 2,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Placed {
    kind: ShapeKind,
    cy: f64,
    cx: f64,
    radius: f64,
    aspect: f64,
    angle: f64,
    intensity: f64,
}

impl Placed {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let r = self.radius;
        match self.kind {
            ShapeKind::Disk => u * u + v * v <= r * r,
            ShapeKind::Ellipse => {
                let b = r * self.aspect;
                (u / r).powi(2) + (v / b).powi(2) <= 1.0
            }
            ShapeKind::Square => u.abs() <= r * 0.85 && v.abs() <= r * 0.85,
            ShapeKind::Rectangle => u.abs() <= r && v.abs() <= r * self.aspect,
            ShapeKind::Triangle => {
                // equilateral, circumradius r
                let h = r * 1.5;
                let top = -r;
                let vv = v - top;
                vv >= 0.0 && vv <= h && u.abs() <= vv / 3f64.sqrt()
            }
            ShapeKind::Ring => {
                let d2 = u * u + v * v;
                d2 <= r * r && d2 >= (0.55 * r).powi(2)
            }
            ShapeKind::Cross => {
                let w = r * 0.35;
                (u.abs() <= r && v.abs() <= w) || (v.abs() <= r && u.abs() <= w)
            }
        }
    }
}

/// Rendering parameters.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub noise_std: f64,
    pub kinds: Vec<ShapeKind>,
    /// The first objects of every scene are drawn from these groups in
    /// order; the rest from `kinds`.
    pub required: Vec<Vec<ShapeKind>>,
}

impl SceneSpec {
    pub fn target(size: usize) -> Self {
        let s = size as f64 / 64.0;
        Self {
            size,
            min_objects: 2,
            max_objects: 4,
            min_radius: 7.0 * s,
            max_radius: 13.0 * s,
            noise_std: 0.06,
            kinds: vec![
                ShapeKind::Disk,
                ShapeKind::Ellipse,
                ShapeKind::Square,
                ShapeKind::Rectangle,
                ShapeKind::Triangle,
            ],
            required: vec![
                vec![ShapeKind::Disk, ShapeKind::Ellipse],
                vec![ShapeKind::Square, ShapeKind::Rectangle],
            ],
        }
    }

    pub fn foundation(size: usize) -> Self {
        Self {
            kinds: ShapeKind::ALL.to_vec(),
            required: Vec::new(),
            ..Self::target(size)
        }
    }
}

fn render(spec: &SceneSpec, rng: &mut Rng) -> (Image, Vec<Placed>, Vec<Option<usize>>) {
    let n = spec.size;
    let count = rng
        .random_range(spec.min_objects..=spec.max_objects)
        .max(spec.required.len());
    let mut placed: Vec<Placed> = Vec::with_capacity(count);
    let mut attempts = 0;
    while placed.len() < count && attempts < 200 {
        attempts += 1;
        let radius = rng.random_range(spec.min_radius..=spec.max_radius);
        let margin = radius + 1.0;
        let cy = rng.random_range(margin..(n as f64 - margin));
        let cx = rng.random_range(margin..(n as f64 - margin));
        if placed
            .iter()
            .any(|p| ((p.cy - cy).powi(2) + (p.cx - cx).powi(2)).sqrt() < p.radius + radius + 2.0)
        {
            continue;
        }
        let pool = spec.required.get(placed.len()).unwrap_or(&spec.kinds);
        let kind = pool[rng.random_range(0..pool.len())];
        placed.push(Placed {
            kind,
            cy,
            cx,
            radius,
            aspect: rng.random_range(0.45..0.75),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            intensity: {
                let (lo, hi) = kind.intensity_range();
                rng.random_range(lo..hi)
            },
        });
    }

    // smooth background: base level plus a random linear gradient
    let base = rng.random_range(0.1..0.35);
    let gy = rng.random_range(-0.15..0.15);
    let gx = rng.random_range(-0.15..0.15);
    let mut img = Image::zeros(n, n, 1);
    let mut owner = vec![None; n * n];
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut v = base + gy * (fy / n as f64 - 0.5) + gx * (fx / n as f64 - 0.5);
            for (k, p) in placed.iter().enumerate() {
                if p.contains(fy, fx) {
                    v = p.intensity;
                    owner[y * n + x] = Some(k);
                }
            }
            v += rng::normal(rng) * spec.noise_std;
            img.set(y, x, 0, v.clamp(0.0, 1.0));
        }
    }
    (img, placed, owner)
}

fn build(
    spec: &SceneSpec,
    count: usize,
    seed: u64,
    stream: &str,
    prefix: &str,
    label: impl Fn(ShapeKind) -> u8,
) -> Vec<SegmentationSample> {
    let mut rng = rng::stream(seed, stream);
    (0..count)
        .map(|i| {
            let (img, placed, owner) = render(spec, &mut rng);
            let data = owner
                .iter()
                .map(|o| o.map_or(0, |k| label(placed[k].kind)))
                .collect();
            let mask = Mask::new(spec.size, spec.size, data).expect("mask size");
            SegmentationSample::new(format!("{prefix}{i:05}"), img, mask).expect("sample")
        })
        .collect()
}

/// Three-class target task: background, round, boxy.
pub fn target_dataset(
    size: usize,
    count: usize,
    seed: u64,
    prefix: &str,
) -> Result<LabeledDataset> {
    let spec = SceneSpec::target(size);
    let samples = build(
        &spec,
        count,
        seed,
        &format!("shapes-target-{prefix}"),
        prefix,
        ShapeKind::target_class,
    );
    LabeledDataset::new(samples, 3)?.with_class_names(vec![
        "background".into(),
        "round".into(),
        "boxy".into(),
    ])
}

/// Broad corpus: each of the seven shape kinds is its own class.
pub fn foundation_dataset(size: usize, count: usize, seed: u64) -> Result<LabeledDataset> {
    let spec = SceneSpec::foundation(size);
    let samples = build(
        &spec,
        count,
        seed,
        "shapes-foundation",
        "f",
        ShapeKind::foundation_class,
    );
    LabeledDataset::new(samples, ShapeKind::ALL.len() + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_scenes_are_deterministic_and_labelled() {
        let a = target_dataset(32, 4, 3, "t").unwrap();
        let b = target_dataset(32, 4, 3, "t").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_count(), 3);
        let labelled: usize = a
            .samples()
            .iter()
            .map(|s| s.mask.data.iter().filter(|&&v| v > 0).count())
            .sum();
        assert!(labelled > 0);
    }

    #[test]
    fn foundation_uses_all_kinds() {
        let ds = foundation_dataset(32, 40, 1).unwrap();
        let mut seen = [false; 8];
        for s in ds.samples() {
            for &v in &s.mask.data {
                seen[v as usize] = true;
            }
        }
        assert!(seen.iter().all(|&x| x));
    }

    #[test]
    fn shape_membership() {
        let disk = Placed {
            kind: ShapeKind::Disk,
            cy: 10.0,
            cx: 10.0,
            radius: 3.0,
            aspect: 0.5,
            angle: 0.0,
            intensity: 1.0,
        };
        assert!(disk.contains(10.0, 12.9));
        assert!(!disk.contains(10.0, 13.1));
    }
}
