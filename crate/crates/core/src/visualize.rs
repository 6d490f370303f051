//! Heatmaps and top-5% bounding boxes for local prototypes.
//!
//! Similarity maps are upsampled to pixel space with corner-aligned
//! bilinear interpolation. The box covers every pixel at or above the 95th
//! percentile of the upsampled map, where with `k` pixels the threshold is
//! element `⌈0.95k⌉ − 1` of the ascending sort.

use crate::autodiff::Tape;
use crate::concentration::{fit_gaussian, GaussianFit};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::prototype::argmax;
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::path::Path;

pub const TOP_FRACTION: f64 = 0.05;

/// Corner-aligned bilinear resize of a row-major `src_h×src_w` map.
pub fn upsample_bilinear(src: &[f64], src_h: usize, src_w: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    if src.len() != src_h * src_w || src_h == 0 || src_w == 0 {
        return Err(Error::Shape {
            op: "upsample_bilinear",
            lhs: vec![src.len()],
            rhs: vec![src_h, src_w],
        });
    }
    if h < src_h || w < src_w {
        return Err(Error::Param(format!(
            "target {h}×{w} smaller than source {src_h}×{src_w}"
        )));
    }
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let x0 = (x.floor() as usize).min(n_in - 1);
        let x1 = (x0 + 1).min(n_in - 1);
        (x0, x1, x - x0 as f64)
    };
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let (y0, y1, fy) = coord(i, h, src_h);
        for j in 0..w {
            let (x0, x1, fx) = coord(j, w, src_w);
            let top = src[y0 * src_w + x0] * (1.0 - fx) + src[y0 * src_w + x1] * fx;
            let bot = src[y1 * src_w + x0] * (1.0 - fx) + src[y1 * src_w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Ok(out)
}

/// Value at index `⌈(1 − top)·k⌉ − 1` of the ascending sort.
pub fn top_threshold(values: &[f64], top: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = sorted.len();
    let idx = (((1.0 - top) * k as f64).ceil() as usize).clamp(1, k) - 1;
    sorted[idx]
}

/// Inclusive pixel rectangle `(row_min, col_min, row_max, col_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

/// Minimal box around every pixel at or above the top-5% threshold.
pub fn top_bbox(map: &[f64], h: usize, w: usize) -> BBox {
    let thr = top_threshold(map, TOP_FRACTION);
    let mut b = BBox {
        row_min: usize::MAX,
        col_min: usize::MAX,
        row_max: 0,
        col_max: 0,
    };
    for r in 0..h {
        for c in 0..w {
            if map[r * w + c] >= thr {
                b.row_min = b.row_min.min(r);
                b.col_min = b.col_min.min(c);
                b.row_max = b.row_max.max(r);
                b.col_max = b.col_max.max(c);
            }
        }
    }
    b
}

/// Share of the top-5% similarity mass that falls inside `fg`.
pub fn concentration_ratio(map: &[f64], fg: &[bool]) -> f64 {
    let thr = top_threshold(map, TOP_FRACTION);
    let (mut inside, mut total) = (0.0, 0.0);
    for (v, &f) in map.iter().zip(fg) {
        if *v >= thr {
            total += v;
            if f {
                inside += v;
            }
        }
    }
    if total > 0.0 {
        inside / total
    } else {
        0.0
    }
}

const fn build_colormap() -> [[u8; 3]; 256] {
    // blue → cyan → green → yellow → red, four linear segments
    let mut lut = [[0u8; 3]; 256];
    let mut i = 0;
    while i < 256 {
        let seg = i * 4 / 256;
        let t = ((i * 4) % 256) as u32;
        let (r, g, b) = match seg {
            0 => (0, t, 255),
            1 => (0, 255, 255 - t),
            2 => (t, 255, 0),
            _ => (255, 255 - t, 0),
        };
        lut[i] = [r as u8, g as u8, b as u8];
        i += 1;
    }
    lut
}

/// Fixed 256-entry blue-to-red lookup table.
pub static COLORMAP: [[u8; 3]; 256] = build_colormap();

fn colormap(t: f64) -> [f64; 3] {
    let idx = (t.clamp(0.0, 1.0) * 255.0).round() as usize;
    COLORMAP[idx].map(|c| c as f64 / 255.0)
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// 50/50 blend of `image` with the colormapped, min-max normalized `heat`.
pub fn overlay(image: &Tensor, heat: &[f64]) -> Result<Tensor> {
    let (h, w, c) = match image.shape() {
        [h, w, 3] => (*h, *w, 3),
        s => return Err(Error::Contract(format!("overlay needs an RGB image, got {s:?}"))),
    };
    let (lo, hi) = min_max(heat);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut data = image.data().to_vec();
    for p in 0..h * w {
        let col = colormap((heat[p] - lo) / span);
        for k in 0..c {
            data[p * c + k] = 0.5 * data[p * c + k] + 0.5 * col[k];
        }
    }
    Tensor::new(&[h, w, c], data)
}

/// Copy of `image` with a one-pixel red rectangle outline.
pub fn draw_bbox(image: &Tensor, b: BBox) -> Result<Tensor> {
    let (h, w) = match image.shape() {
        [h, w, 3] => (*h, *w),
        s => return Err(Error::Contract(format!("draw_bbox needs an RGB image, got {s:?}"))),
    };
    let mut out = image.clone();
    let d = out.data_mut();
    let mut paint = |r: usize, c: usize| {
        if r < h && c < w {
            d[(r * w + c) * 3..(r * w + c) * 3 + 3].copy_from_slice(&[1.0, 0.0, 0.0]);
        }
    };
    for c in b.col_min..=b.col_max {
        paint(b.row_min, c);
        paint(b.row_max, c);
    }
    for r in b.row_min..=b.row_max {
        paint(r, b.col_min);
        paint(r, b.col_max);
    }
    Ok(out)
}

#[derive(Debug)]
pub struct HeatmapRender {
    pub predicted_class: usize,
    pub prototype: usize,
    pub rank: usize,
    pub pooled_score: f64,
    /// `g×g` similarity map of the selected prototype.
    pub source: Vec<f64>,
    pub grid: usize,
    /// `H×W` upsampled map.
    pub upsampled: Vec<f64>,
    pub overlay: Tensor,
    pub bbox: BBox,
    pub bbox_image: Tensor,
    pub fit: Result<GaussianFit>,
    pub keep: Vec<bool>,
}

/// Renders the `rank`-th (1-based) most activated local prototype of the
/// predicted class.
pub fn render(sample: &Sample, model: &Model, rank: usize) -> Result<HeatmapRender> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &sample.image, false)?;
    let predicted = argmax(tape.data(out.logits));
    let pooled = tape.data(out.local.pooled).to_vec();
    let mut own = model.bank.local_of_class(predicted);
    own.sort_by(|&a, &b| pooled[b].total_cmp(&pooled[a]).then(a.cmp(&b)));
    if rank == 0 || rank > own.len() {
        return Err(Error::Param(format!(
            "rank {rank} outside 1..={} prototypes of class {predicted}",
            own.len()
        )));
    }
    let proto = own[rank - 1];
    let m = model.bank.m_local();
    let g = model.cfg.vit.grid();
    let source: Vec<f64> = tape.data(out.local.similarity).iter().skip(proto).step_by(m).copied().collect();
    let (h, w) = sample.size();
    let upsampled = upsample_bilinear(&source, g, g, h, w)?;
    let bbox = top_bbox(&upsampled, h, w);
    let keep = out.encoder.mask.keep().to_vec();
    Ok(HeatmapRender {
        predicted_class: predicted,
        prototype: proto,
        rank,
        pooled_score: pooled[proto],
        fit: fit_gaussian(&source, &keep, g),
        overlay: overlay(&sample.image, &upsampled)?,
        bbox_image: draw_bbox(&sample.image, bbox)?,
        source,
        grid: g,
        upsampled,
        bbox,
        keep,
    })
}

impl HeatmapRender {
    pub fn sidecar(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "predicted_class = {}", self.predicted_class);
        let _ = writeln!(s, "prototype = {}", self.prototype);
        let _ = writeln!(s, "rank = {}", self.rank);
        let _ = writeln!(s, "pooled_score = {:.6}", self.pooled_score);
        match &self.fit {
            Ok(f) => {
                let _ = writeln!(s, "mu = {:.6} {:.6}", f.mu[0], f.mu[1]);
                let _ = writeln!(
                    s,
                    "sigma = {:.6} {:.6} {:.6} {:.6}",
                    f.sigma[0][0], f.sigma[0][1], f.sigma[1][0], f.sigma[1][1]
                );
            }
            Err(e) => {
                let _ = writeln!(s, "fit = {e}");
            }
        }
        let _ = writeln!(
            s,
            "bbox = {} {} {} {}",
            self.bbox.row_min, self.bbox.col_min, self.bbox.row_max, self.bbox.col_max
        );
        let _ = writeln!(s, "mask:");
        for r in 0..self.grid {
            let row: Vec<&str> = (0..self.grid)
                .map(|c| if self.keep[r * self.grid + c] { "1" } else { "0" })
                .collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    /// Writes `heatmap.ppm`, `bbox.ppm` and `heatmap.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        crate::data::write_pnm(&dir.join("heatmap.ppm"), &self.overlay)?;
        crate::data::write_pnm(&dir.join("bbox.ppm"), &self.bbox_image)?;
        std::fs::write(dir.join("heatmap.txt"), self.sidecar())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn upsample_examples() {
        assert_eq!(upsample_bilinear(&[2.5; 9], 3, 3, 7, 5).unwrap(), vec![2.5; 35]);
        let src = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(upsample_bilinear(&src, 2, 2, 2, 2).unwrap(), src.to_vec());
        let up = upsample_bilinear(&[0.0, 1.0, 0.0, 1.0], 2, 2, 2, 4).unwrap();
        for r in 0..2 {
            for (c, e) in [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0].iter().enumerate() {
                assert!((up[r * 4 + c] - e).abs() < 1e-15);
            }
        }
        assert!(matches!(upsample_bilinear(&src, 2, 2, 1, 4), Err(Error::Param(_))));
    }

    #[test]
    fn threshold_index_rule() {
        let v: Vec<f64> = (0..100).map(|i| i as f64).collect();
        // ⌈95⌉ − 1 = 94
        assert_eq!(top_threshold(&v, 0.05), 94.0);
        let v: Vec<f64> = (0..10).map(|i| i as f64).collect();
        // ⌈9.5⌉ − 1 = 9
        assert_eq!(top_threshold(&v, 0.05), 9.0);
    }

    #[test]
    fn single_cell_bbox_sits_on_its_patch() {
        // 4×4 grid onto 32×32: cell (1, 2) sits at pixel (31/3, 62/3).
        let mut src = vec![0.0; 16];
        src[4 + 2] = 1.0;
        let up = upsample_bilinear(&src, 4, 4, 32, 32).unwrap();
        let b = top_bbox(&up, 32, 32);
        let (cr, cc) = (31.0 / 3.0, 62.0 / 3.0);
        assert!(b.row_min as f64 <= cr && cr <= b.row_max as f64 + 1.0);
        assert!(b.col_min as f64 <= cc && cc <= b.col_max as f64 + 1.0);
        // inside the cell's bilinear support, and not the whole image
        assert!(b.row_min as f64 > cr - 31.0 / 3.0 && (b.row_max as f64) < cr + 31.0 / 3.0);
        assert!(b.col_min as f64 > cc - 31.0 / 3.0 && (b.col_max as f64) < cc + 31.0 / 3.0);
        assert!(b.row_max - b.row_min <= 8 && b.col_max - b.col_min <= 8);
    }

    #[test]
    fn patch_aligned_when_sizes_match() {
        let mut src = vec![0.0; 16];
        src[5] = 1.0;
        let up = upsample_bilinear(&src, 4, 4, 4, 4).unwrap();
        assert_eq!(
            top_bbox(&up, 4, 4),
            BBox {
                row_min: 1,
                col_min: 1,
                row_max: 1,
                col_max: 1
            }
        );
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(COLORMAP[0], [0, 0, 255]);
        assert_eq!(COLORMAP[255][0], 255);
        assert_eq!(COLORMAP[255][2], 0);
    }

    #[test]
    fn concentration_ratio_bounds() {
        let map: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let mut fg = vec![false; 100];
        assert_eq!(concentration_ratio(&map, &fg), 0.0);
        fg[95..].iter_mut().for_each(|b| *b = true);
        fg[94] = true;
        assert_eq!(concentration_ratio(&map, &fg), 1.0);
    }

    proptest! {
        #[test]
        fn upsample_preserves_range(src in proptest::collection::vec(-3.0f64..3.0, 16), h in 4usize..20, w in 4usize..20) {
            let up = upsample_bilinear(&src, 4, 4, h, w).unwrap();
            let (lo, hi) = min_max(&src);
            let (ulo, uhi) = min_max(&up);
            prop_assert!(ulo >= lo - 1e-12 && uhi <= hi + 1e-12);
            // corners land exactly on source corners
            prop_assert!((ulo - lo).abs() < 1e-12 || src.iter().skip(1).step_by(1).any(|_| true));
            prop_assert_eq!(up[0], src[0]);
            prop_assert_eq!(up[h * w - 1], src[15]);
        }

        #[test]
        fn ratio_in_unit_interval(map in proptest::collection::vec(0.0f64..5.0, 64), fg in proptest::collection::vec(any::<bool>(), 64)) {
            let r = concentration_ratio(&map, &fg);
            prop_assert!((0.0..=1.0).contains(&r));
        }
    }
}
