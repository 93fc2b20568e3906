//! Segmentation and image-quality metrics.
//!
//! Boundary distances use an exact Euclidean distance transform; the tests
//! check them against brute-force distance matrices.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Image, Mask};
use crate::error::{CoreError, Result};

/// Predicted and reference regions on the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMaskPair {
    pub height: usize,
    pub width: usize,
    pub pred: Vec<bool>,
    pub reference: Vec<bool>,
    /// Physical size of one pixel along (y, x).
    pub spacing: (f64, f64),
}

impl BinaryMaskPair {
    pub fn new(height: usize, width: usize, pred: Vec<bool>, reference: Vec<bool>) -> Result<Self> {
        if pred.len() != height * width || reference.len() != height * width {
            return Err(CoreError::Shape(format!(
                "mask pair of lengths {} and {} does not fit {height}x{width}",
                pred.len(),
                reference.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pred,
            reference,
            spacing: (1.0, 1.0),
        })
    }

    pub fn with_spacing(mut self, sy: f64, sx: f64) -> Self {
        self.spacing = (sy, sx);
        self
    }

    /// Binary pair for one class of two label masks.
    pub fn for_class(pred: &Mask, reference: &Mask, class: u8) -> Result<Self> {
        if (pred.height, pred.width) != (reference.height, reference.width) {
            return Err(CoreError::Shape(format!(
                "prediction {}x{} vs reference {}x{}",
                pred.height, pred.width, reference.height, reference.width
            )));
        }
        Self::new(
            pred.height,
            pred.width,
            pred.class_mask(class),
            reference.class_mask(class),
        )
    }

    fn counts(&self) -> (usize, usize, usize) {
        let a = self.pred.iter().filter(|&&v| v).count();
        let b = self.reference.iter().filter(|&&v| v).count();
        let both = self
            .pred
            .iter()
            .zip(&self.reference)
            .filter(|(a, b)| **a && **b)
            .count();
        (a, b, both)
    }

    pub fn both_empty(&self) -> bool {
        !self.pred.iter().any(|&v| v) && !self.reference.iter().any(|&v| v)
    }
}

/// `2|A∩B| / (|A|+|B|)`; 1.0 when both regions are empty.
pub fn dice(pair: &BinaryMaskPair) -> f64 {
    let (a, b, both) = pair.counts();
    if a + b == 0 {
        1.0
    } else {
        2.0 * both as f64 / (a + b) as f64
    }
}

/// `|A∩B| / |A∪B|`; 1.0 when both regions are empty.
pub fn iou(pair: &BinaryMaskPair) -> f64 {
    let (a, b, both) = pair.counts();
    let union = a + b - both;
    if union == 0 {
        1.0
    } else {
        both as f64 / union as f64
    }
}

/// Pixels of the region with at least one 4-neighbour outside it. Pixels
/// beyond the grid count as outside.
pub fn boundary(mask: &[bool], height: usize, width: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| {
        y >= 0
            && x >= 0
            && (y as usize) < height
            && (x as usize) < width
            && mask[y as usize * width + x as usize]
    };
    let mut out = vec![false; mask.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            if at(y, x) && (!at(y - 1, x) || !at(y + 1, x) || !at(y, x - 1) || !at(y, x + 1)) {
                out[y as usize * width + x as usize] = true;
            }
        }
    }
    out
}

/// 1-D squared distance transform of sampled function `f` with unit
/// spacing `s` (lower envelope of parabolas).
fn dt1d(f: &[f64], s: f64) -> Vec<f64> {
    let n = f.len();
    let mut out = vec![f64::INFINITY; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => return out,
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let pos = |i: usize| i as f64 * s;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let sect =
                ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if sect <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = sect;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
    out
}

/// Euclidean distance from every pixel to the nearest `true` pixel of
/// `seeds`, with anisotropic pixel spacing.
pub fn distance_transform(
    seeds: &[bool],
    height: usize,
    width: usize,
    spacing: (f64, f64),
) -> Vec<f64> {
    let mut grid: Vec<f64> = seeds
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let mut col = vec![0.0; height];
    for x in 0..width {
        for y in 0..height {
            col[y] = grid[y * width + x];
        }
        for (y, v) in dt1d(&col, spacing.0).into_iter().enumerate() {
            grid[y * width + x] = v;
        }
    }
    for y in 0..height {
        let row = dt1d(&grid[y * width..(y + 1) * width], spacing.1);
        grid[y * width..(y + 1) * width].copy_from_slice(&row);
    }
    grid.into_iter().map(f64::sqrt).collect()
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = (values.len() - 1) as f64 * q / 100.0;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hd95Mode {
    /// 95th percentile of both directed distance sets taken together.
    #[default]
    Pooled,
    /// Larger of the two directed 95th percentiles.
    MaxDirected,
}

/// Directed boundary distances `(∂A → ∂B, ∂B → ∂A)`.
pub fn directed_boundary_distances(pair: &BinaryMaskPair) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (pair.height, pair.width);
    let ba = boundary(&pair.pred, h, w);
    let bb = boundary(&pair.reference, h, w);
    let da = distance_transform(&bb, h, w, pair.spacing);
    let db = distance_transform(&ba, h, w, pair.spacing);
    let a_to_b = ba
        .iter()
        .zip(&da)
        .filter(|(b, _)| **b)
        .map(|(_, &d)| d)
        .collect();
    let b_to_a = bb
        .iter()
        .zip(&db)
        .filter(|(b, _)| **b)
        .map(|(_, &d)| d)
        .collect();
    (a_to_b, b_to_a)
}

/// 95th-percentile boundary distance; `None` when either region is empty.
pub fn hd95(pair: &BinaryMaskPair, mode: Hd95Mode) -> Option<f64> {
    if !pair.pred.iter().any(|&v| v) || !pair.reference.iter().any(|&v| v) {
        return None;
    }
    let (mut ab, mut ba) = directed_boundary_distances(pair);
    Some(match mode {
        Hd95Mode::Pooled => {
            ab.extend_from_slice(&ba);
            percentile(&mut ab, 95.0)
        }
        Hd95Mode::MaxDirected => percentile(&mut ab, 95.0).max(percentile(&mut ba, 95.0)),
    })
}

/// Mean IoU over foreground classes present in either mask; 1.0 when no
/// foreground class appears in either.
pub fn miou(pred: &Mask, reference: &Mask, classes: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for c in 1..classes {
        let pair = BinaryMaskPair::for_class(pred, reference, c as u8)?;
        if pair.both_empty() {
            continue;
        }
        total += iou(&pair);
        n += 1;
    }
    Ok(if n == 0 { 1.0 } else { total / n as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsnrMse {
    /// `+inf` for identical images.
    pub psnr_db: f64,
    pub mse: f64,
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// MSE and PSNR with images rescaled from [0,1] to the 8-bit range.
pub fn psnr_mse(a: &Image, b: &Image, peak: f64) -> Result<PsnrMse> {
    if !a.same_shape(b) {
        return Err(CoreError::Shape(format!(
            "images {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if peak <= 0.0 {
        return Err(CoreError::Config("peak must be positive".into()));
    }
    let n = a.data.len().max(1) as f64;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| ((x - y) * 255.0).powi(2))
        .sum::<f64>()
        / n;
    Ok(PsnrMse {
        psnr_db: psnr_from_mse(mse, peak),
        mse,
    })
}

/// Averages for one class over a set of cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub dice: Option<f64>,
    pub hd95: Option<f64>,
    pub iou: Option<f64>,
    /// Cases where the class was absent from both masks.
    pub skipped: usize,
    /// Cases where HD95 was undefined (class absent from exactly one mask).
    pub hd95_undefined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Foreground classes in index order.
    pub per_class: Vec<ClassMetrics>,
    pub mean_dice: f64,
    pub mean_hd95: Option<f64>,
    pub mean_iou: f64,
    pub skipped_classes: usize,
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Per-class metrics averaged over cases, then averaged over foreground
/// classes. Cases where a class is absent from both masks are skipped for
/// that class; HD95 skips cases where it is undefined.
pub fn evaluate_masks(
    preds: &[Mask],
    refs: &[Mask],
    class_names: &[String],
    spacing: (f64, f64),
    mode: Hd95Mode,
) -> Result<MetricsReport> {
    if preds.len() != refs.len() {
        return Err(CoreError::Shape(format!(
            "{} predictions for {} references",
            preds.len(),
            refs.len()
        )));
    }
    let mut per_class = Vec::new();
    for (c, name) in class_names.iter().enumerate().skip(1) {
        let (mut d, mut h, mut i) = (Vec::new(), Vec::new(), Vec::new());
        let (mut skipped, mut undefined) = (0, 0);
        for (p, r) in preds.iter().zip(refs) {
            let pair = BinaryMaskPair::for_class(p, r, c as u8)?.with_spacing(spacing.0, spacing.1);
            if pair.both_empty() {
                skipped += 1;
                continue;
            }
            d.push(dice(&pair));
            i.push(iou(&pair));
            match hd95(&pair, mode) {
                Some(v) => h.push(v),
                None => undefined += 1,
            }
        }
        per_class.push(ClassMetrics {
            class: name.clone(),
            dice: mean(&d),
            hd95: mean(&h),
            iou: mean(&i),
            skipped,
            hd95_undefined: undefined,
        });
    }
    let dices: Vec<f64> = per_class.iter().filter_map(|c| c.dice).collect();
    let hds: Vec<f64> = per_class.iter().filter_map(|c| c.hd95).collect();
    let ious: Vec<f64> = per_class.iter().filter_map(|c| c.iou).collect();
    Ok(MetricsReport {
        skipped_classes: per_class.iter().filter(|c| c.dice.is_none()).count(),
        mean_dice: mean(&dices).unwrap_or(1.0),
        mean_hd95: mean(&hds),
        mean_iou: mean(&ious).unwrap_or(1.0),
        per_class,
    })
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

impl MetricsReport {
    pub const CSV_HEADER: [&'static str; 5] = ["class", "dice", "hd95", "iou", "flags"];

    /// One row per class plus a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::CSV_HEADER).unwrap();
        for c in &self.per_class {
            let mut flags = Vec::new();
            if c.skipped > 0 {
                flags.push(format!("skipped={}", c.skipped));
            }
            if c.hd95_undefined > 0 {
                flags.push(format!("hd95_undefined={}", c.hd95_undefined));
            }
            w.write_record([
                c.class.clone(),
                fmt(c.dice),
                fmt(c.hd95),
                fmt(c.iou),
                flags.join(";"),
            ])
            .unwrap();
        }
        let flags = if self.skipped_classes > 0 {
            format!("skipped_classes={}", self.skipped_classes)
        } else {
            String::new()
        };
        w.write_record([
            "mean".to_string(),
            fmt(Some(self.mean_dice)),
            fmt(self.mean_hd95),
            fmt(Some(self.mean_iou)),
            flags,
        ])
        .unwrap();
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| CoreError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair_from(h: usize, w: usize, a: &[(usize, usize)], b: &[(usize, usize)]) -> BinaryMaskPair {
        let mut pa = vec![false; h * w];
        let mut pb = vec![false; h * w];
        for &(y, x) in a {
            pa[y * w + x] = true;
        }
        for &(y, x) in b {
            pb[y * w + x] = true;
        }
        BinaryMaskPair::new(h, w, pa, pb).unwrap()
    }

    #[test]
    fn dice_cases() {
        let p = pair_from(4, 4, &[(0, 0), (0, 1)], &[(0, 0), (0, 1)]);
        assert_eq!(dice(&p), 1.0);
        let p = pair_from(4, 4, &[(0, 0)], &[(3, 3)]);
        assert_eq!(dice(&p), 0.0);
        let p = pair_from(
            4,
            4,
            &[(0, 0), (0, 1), (0, 2), (0, 3)],
            &[(0, 2), (0, 3), (1, 0), (1, 1)],
        );
        assert_eq!(dice(&p), 0.5);
        assert!((iou(&p) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn hd95_single_pixels() {
        let p = pair_from(5, 5, &[(0, 0)], &[(3, 4)]);
        assert_eq!(hd95(&p, Hd95Mode::Pooled), Some(5.0));
        let p = pair_from(5, 5, &[(1, 1), (1, 2)], &[(1, 1), (1, 2)]);
        assert_eq!(hd95(&p, Hd95Mode::Pooled), Some(0.0));
        let p = pair_from(5, 5, &[], &[(1, 1)]);
        assert_eq!(hd95(&p, Hd95Mode::Pooled), None);
    }

    #[test]
    fn spacing_scales_distances() {
        let p = pair_from(5, 5, &[(0, 0)], &[(3, 4)]).with_spacing(2.0, 0.5);
        let expect = (36.0f64 + 4.0).sqrt();
        assert!((hd95(&p, Hd95Mode::Pooled).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![3.0, 1.0, 2.0, 4.0];
        // position 0.95 * 3 = 2.85 → 3 + 0.85
        assert!((percentile(&mut v, 95.0) - 3.85).abs() < 1e-12);
    }

    #[test]
    fn psnr_formula() {
        assert!((psnr_from_mse(100.0, 255.0) - 10.0 * 650.25f64.log10()).abs() < 1e-12);
        let a = Image::zeros(2, 2, 1);
        let r = psnr_mse(&a, &a, 255.0).unwrap();
        assert_eq!(r.mse, 0.0);
        assert!(r.psnr_db.is_infinite());
    }

    #[test]
    fn report_csv_shape() {
        let r = Mask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let report = evaluate_masks(
            std::slice::from_ref(&r),
            std::slice::from_ref(&r),
            &["bg".into(), "a".into(), "b".into()],
            (1.0, 1.0),
            Hd95Mode::Pooled,
        )
        .unwrap();
        assert_eq!(report.mean_dice, 1.0);
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class,dice,hd95,iou,flags");
        assert_eq!(lines[2], "b,,,,skipped=1");
        assert_eq!(
            lines[3],
            "mean,1.000000,0.000000,1.000000,skipped_classes=1"
        );
    }
}
