use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Image, Provenance, TransferSet};
use crate::error::{CoreError, Result};
use crate::rng;

/// Ranges from which each augmented copy draws its transform uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub rotation_deg: (f64, f64),
    pub scale: (f64, f64),
    pub shear_deg: (f64, f64),
    /// Translation as a fraction of the image side.
    pub translate: (f64, f64),
    /// Number of images to emit.
    pub count: usize,
}

impl AugmentationSpec {
    pub fn identity(count: usize) -> Self {
        Self {
            rotation_deg: (0.0, 0.0),
            scale: (1.0, 1.0),
            shear_deg: (0.0, 0.0),
            translate: (0.0, 0.0),
            count,
        }
    }

    /// Moderate geometric jitter.
    pub fn standard(count: usize) -> Self {
        Self {
            rotation_deg: (-180.0, 180.0),
            scale: (0.8, 1.2),
            shear_deg: (-10.0, 10.0),
            translate: (-0.1, 0.1),
            count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("rotation", self.rotation_deg),
            ("scale", self.scale),
            ("shear", self.shear_deg),
            ("translate", self.translate),
        ] {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(CoreError::Config(format!(
                    "{name} range [{lo}, {hi}] is degenerate"
                )));
            }
        }
        if self.scale.0 <= 0.0 {
            return Err(CoreError::Config("scale must be positive".into()));
        }
        Ok(())
    }
}

/// Forward affine map about the image centre: `p' = M (p - c) + c + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub m: [[f64; 2]; 2],
    pub t: (f64, f64),
}

impl Affine {
    pub fn new(rotation_deg: f64, scale: f64, shear_deg: f64, translate: (f64, f64)) -> Self {
        let (s, c) = rotation_deg.to_radians().sin_cos();
        let sh = shear_deg.to_radians().tan();
        // rotation · shear · scale, in (y, x) coordinates
        let r = [[c, -s], [s, c]];
        let k = [[1.0, 0.0], [sh, 1.0]];
        let mut m = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                m[i][j] = (r[i][0] * k[0][j] + r[i][1] * k[1][j]) * scale;
            }
        }
        Self { m, t: translate }
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Resamples `img` under `a` with bilinear interpolation and edge
/// replication. Right-angle rotations of square images are exact.
pub fn warp(img: &Image, a: &Affine) -> Image {
    let (h, w, ch) = img.shape();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let [[a00, a01], [a10, a11]] = a.m;
    let det = a00 * a11 - a01 * a10;
    let inv = [[a11 / det, -a01 / det], [-a10 / det, a00 / det]];
    let mut out = Image::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy - a.t.0;
            let dx = x as f64 - cx - a.t.1;
            let sy = snap(inv[0][0] * dy + inv[0][1] * dx + cy).clamp(0.0, (h - 1) as f64);
            let sx = snap(inv[1][0] * dy + inv[1][1] * dx + cx).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for c in 0..ch {
                let v = img.get(y0, x0, c) * (1.0 - fy) * (1.0 - fx)
                    + img.get(y0, x1, c) * (1.0 - fy) * fx
                    + img.get(y1, x0, c) * fy * (1.0 - fx)
                    + img.get(y1, x1, c) * fy * fx;
                out.set(y, x, c, v);
            }
        }
    }
    out
}

pub fn rotate(img: &Image, degrees: f64) -> Image {
    warp(img, &Affine::new(degrees, 1.0, 0.0, (0.0, 0.0)))
}

/// Emits `spec.count` transformed copies, cycling through the sources in
/// order and drawing each transform from the spec's ranges.
pub fn augment_base_set(
    images: &[Image],
    spec: &AugmentationSpec,
    seed: u64,
) -> Result<TransferSet> {
    spec.validate()?;
    if images.is_empty() {
        return Err(CoreError::Dataset("no source images to augment".into()));
    }
    let mut r = rng::stream(seed, "augment");
    let mut draw = |(lo, hi): (f64, f64)| if lo == hi { lo } else { r.random_range(lo..hi) };
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let src = &images[i % images.len()];
        let rot = draw(spec.rotation_deg);
        let scale = draw(spec.scale);
        let shear = draw(spec.shear_deg);
        let ty = draw(spec.translate) * src.height as f64;
        let tx = draw(spec.translate) * src.width as f64;
        let a = Affine::new(rot, scale, shear, (ty, tx));
        out.push(warp(src, &a));
    }
    TransferSet::new(out, Provenance::Augmented)
}
