//! Synthetic foreground/background dataset and binary PGM/PPM I/O.
//!
//! Each generated image places one class-determined shape, split into two
//! differently colored and textured parts, on a smooth noise background.
//! The foreground mask is the exact set of pixels the shape was drawn on.
//!
//! On-disk layout: `images/NNNNN.ppm`, `masks/NNNNN.pgm`, and `labels.txt`
//! with one `index class` pair per line.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `H×W×C` with values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    /// Row-major `H×W` ground-truth foreground, when known.
    pub fg_mask: Option<Vec<bool>>,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[0], self.image.shape()[1])
    }

    pub fn fg_fraction(&self) -> Option<f64> {
        self.fg_mask
            .as_ref()
            .map(|m| m.iter().filter(|&&b| b).count() as f64 / m.len() as f64)
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Square,
    Disc,
    Triangle,
    Diamond,
    Cross,
    Ring,
    Ellipse,
    Ell,
}

#[derive(Clone, Copy, Debug)]
enum Texture {
    Stripes,
    Checker,
    Dots,
    Solid,
}

#[derive(Clone, Copy, Debug)]
struct Template {
    shape: Shape,
    colors: [[f64; 3]; 2],
    textures: [Texture; 2],
}

const TEMPLATES: [Template; 8] = [
    Template {
        shape: Shape::Square,
        colors: [[0.95, 0.15, 0.1], [0.95, 0.85, 0.1]],
        textures: [Texture::Stripes, Texture::Checker],
    },
    Template {
        shape: Shape::Disc,
        colors: [[0.1, 0.25, 0.95], [0.1, 0.9, 0.9]],
        textures: [Texture::Checker, Texture::Dots],
    },
    Template {
        shape: Shape::Triangle,
        colors: [[0.1, 0.85, 0.15], [0.9, 0.1, 0.85]],
        textures: [Texture::Solid, Texture::Stripes],
    },
    Template {
        shape: Shape::Diamond,
        colors: [[1.0, 0.55, 0.0], [0.5, 0.1, 0.8]],
        textures: [Texture::Dots, Texture::Solid],
    },
    Template {
        shape: Shape::Cross,
        colors: [[0.95, 0.95, 0.95], [0.8, 0.05, 0.3]],
        textures: [Texture::Checker, Texture::Solid],
    },
    Template {
        shape: Shape::Ring,
        colors: [[0.05, 0.05, 0.05], [0.2, 0.95, 0.5]],
        textures: [Texture::Solid, Texture::Dots],
    },
    Template {
        shape: Shape::Ellipse,
        colors: [[0.6, 0.3, 0.05], [0.3, 0.6, 1.0]],
        textures: [Texture::Stripes, Texture::Solid],
    },
    Template {
        shape: Shape::Ell,
        colors: [[1.0, 0.7, 0.8], [0.05, 0.4, 0.2]],
        textures: [Texture::Dots, Texture::Checker],
    },
];

/// Number of distinct class templates available to [`generate`].
pub const N_TEMPLATES: usize = TEMPLATES.len();

impl Shape {
    /// Membership and part index at normalized box coordinates `u, v ∈ [-1, 1]`
    /// (`v` grows downward).
    fn part_at(self, u: f64, v: f64) -> Option<usize> {
        let r2 = u * u + v * v;
        match self {
            Shape::Square => (u.abs() <= 0.9 && v.abs() <= 0.9).then_some((v > 0.0) as usize),
            Shape::Disc => (r2 <= 1.0).then_some((u > 0.0) as usize),
            Shape::Triangle => (v <= 1.0 && u.abs() <= (1.0 + v) / 2.0).then_some((v > 0.2) as usize),
            Shape::Diamond => (u.abs() + v.abs() <= 1.0).then_some((u > 0.0) as usize),
            Shape::Cross => (u.abs() <= 0.35 || v.abs() <= 0.35).then_some((u.abs() < v.abs()) as usize),
            Shape::Ring => (r2 <= 1.0 && r2 >= 0.2).then_some((v > 0.0) as usize),
            Shape::Ellipse => (u * u + (v / 0.65) * (v / 0.65) <= 1.0).then_some((u > 0.0) as usize),
            Shape::Ell => {
                let vertical = u <= -0.2;
                let horizontal = v >= 0.2;
                (vertical || horizontal).then_some(horizontal as usize)
            }
        }
    }
}

impl Texture {
    fn shade(self, x: usize, y: usize) -> f64 {
        match self {
            Texture::Stripes => [1.0, 0.6][(y / 2) % 2],
            Texture::Checker => [1.0, 0.55][((x / 2) + (y / 2)) % 2],
            Texture::Dots => {
                if x % 3 == 1 && y % 3 == 1 {
                    0.45
                } else {
                    1.0
                }
            }
            Texture::Solid => 0.9,
        }
    }
}

/// Smooth background: a few random low-frequency gratings per channel,
/// muted toward gray, plus mild pixel noise.
fn background<R: Rng>(rng: &mut R, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size * 3];
    let base = 0.35 + 0.2 * rng.gen::<f64>();
    for c in 0..3 {
        let tint = 0.06 * (rng.gen::<f64>() - 0.5);
        let waves: Vec<[f64; 4]> = (0..3)
            .map(|_| {
                [
                    rng.gen_range(0.5..2.5) * std::f64::consts::TAU / size as f64,
                    rng.gen_range(0.5..2.5) * std::f64::consts::TAU / size as f64,
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.03..0.08),
                ]
            })
            .collect();
        for y in 0..size {
            for x in 0..size {
                let mut v = base + tint;
                for w in &waves {
                    v += w[3] * (w[0] * x as f64 + w[1] * y as f64 + w[2]).sin();
                }
                out[(y * size + x) * 3 + c] = v;
            }
        }
    }
    for v in out.iter_mut() {
        *v += 0.04 * (rng.gen::<f64>() - 0.5);
    }
    out
}

fn render_sample<R: Rng>(rng: &mut R, template: &Template, label: usize, size: usize) -> Sample {
    let area = (size * size) as f64;
    loop {
        let mut pix = background(rng, size);
        let lo = (size as f64 * 0.42).round() as usize;
        let hi = (size as f64 * 0.7).round() as usize;
        let side = rng.gen_range(lo..=hi).min(size);
        let top = rng.gen_range(0..=size - side);
        let left = rng.gen_range(0..=size - side);
        let mut mask = vec![false; size * size];
        for y in top..top + side {
            for x in left..left + side {
                let u = 2.0 * ((x - left) as f64 + 0.5) / side as f64 - 1.0;
                let v = 2.0 * ((y - top) as f64 + 0.5) / side as f64 - 1.0;
                if let Some(part) = template.shape.part_at(u, v) {
                    mask[y * size + x] = true;
                    let shade = template.textures[part].shade(x - left, y - top);
                    for c in 0..3 {
                        let noise = 0.04 * (rng.gen::<f64>() - 0.5);
                        pix[(y * size + x) * 3 + c] = template.colors[part][c] * shade + noise;
                    }
                }
            }
        }
        let frac = mask.iter().filter(|&&b| b).count() as f64 / area;
        if !(0.10..=0.60).contains(&frac) {
            continue;
        }
        for v in pix.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        return Sample {
            image: Tensor::new(&[size, size, 3], pix).unwrap(),
            label,
            fg_mask: Some(mask),
        };
    }
}

/// Generates `n_samples` RGB images of side `image_size`; sample `i` has
/// label `i mod n_classes`. Deterministic in `seed`.
pub fn generate(seed: u64, n_samples: usize, n_classes: usize, image_size: usize) -> Result<Vec<Sample>> {
    if n_classes < 1 || n_classes > N_TEMPLATES {
        return Err(Error::Param(format!(
            "{n_classes} classes requested, {N_TEMPLATES} templates available"
        )));
    }
    if image_size < 8 {
        return Err(Error::Param(format!("image_size {image_size} too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_samples)
        .map(|i| {
            let label = i % n_classes;
            render_sample(&mut rng, &TEMPLATES[label], label, image_size)
        })
        .collect())
}

// --- PNM ---------------------------------------------------------------

/// Encodes `H×W×1` as P5 or `H×W×3` as P6, quantizing `[0,1]` to 0..=255.
pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = match image.shape() {
        [h, w, c] if *c == 1 || *c == 3 => (*h, *w, *c),
        s => {
            return Err(Error::Contract(format!(
                "PNM needs H×W×1 or H×W×3, got {s:?}"
            )))
        }
    };
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Decodes binary P5/P6 with maxval 255 into `H×W×C` values in `[0,1]`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;
    let fail = |offset: usize, msg: &str| Error::Format {
        offset: offset as u64,
        msg: msg.to_string(),
    };
    if bytes.len() < 2 || bytes[0] != b'P' || !(bytes[1] == b'5' || bytes[1] == b'6') {
        return Err(fail(0, "expected binary PNM magic P5 or P6"));
    }
    let channels = if bytes[1] == b'5' { 1 } else { 3 };
    pos += 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(fail(pos, "expected a header number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| fail(start, "header number out of range"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(fail(pos, "only maxval 255 is supported"));
    }
    if w == 0 || h == 0 {
        return Err(fail(pos, "zero image dimension"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(fail(pos, "expected whitespace after header")),
    }
    let need = w * h * channels;
    if bytes.len() - pos < need {
        return Err(fail(bytes.len(), &format!("truncated pixel data: need {need} bytes")));
    }
    let data = bytes[pos..pos + need].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(&[h, w, channels], data)
}

/// Loads a PNM image, replicating grayscale to `channels` when needed.
pub fn load_pgm_ppm(path: &Path, channels: usize) -> Result<Sample> {
    let raw = decode_pnm(&fs::read(path)?)?;
    let image = match (raw.shape()[2], channels) {
        (a, b) if a == b => raw,
        (1, c) => {
            let (h, w) = (raw.shape()[0], raw.shape()[1]);
            let data = raw.data().iter().flat_map(|&v| std::iter::repeat(v).take(c)).collect();
            Tensor::new(&[h, w, c], data)?
        }
        (a, b) => {
            return Err(Error::Param(format!(
                "{} has {a} channels, model expects {b}",
                path.display()
            )))
        }
    };
    Ok(Sample {
        image,
        label: 0,
        fg_mask: None,
    })
}

pub fn write_pnm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_pnm(image)?)?;
    Ok(())
}

/// Writes the standard dataset directory layout.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut labels = String::new();
    for (i, s) in samples.iter().enumerate() {
        write_pnm(&dir.join(format!("images/{i:05}.ppm")), &s.image)?;
        if let Some(m) = &s.fg_mask {
            let (h, w) = s.size();
            let t = Tensor::new(&[h, w, 1], m.iter().map(|&b| b as u8 as f64).collect())?;
            write_pnm(&dir.join(format!("masks/{i:05}.pgm")), &t)?;
        }
        labels.push_str(&format!("{i} {}\n", s.label));
    }
    fs::write(dir.join("labels.txt"), labels)?;
    Ok(())
}

/// Reads a dataset directory; masks are optional per sample.
pub fn load_dataset(dir: &Path, channels: usize) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(dir.join("labels.txt"))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |s: Option<&str>| -> Result<usize> {
            s.and_then(|v| v.parse().ok()).ok_or_else(|| Error::Config {
                line: ln + 1,
                msg: format!("expected `index class`, got `{line}`"),
            })
        };
        let index = parse(it.next())?;
        let label = parse(it.next())?;
        let mut sample = load_pgm_ppm(&dir.join(format!("images/{index:05}.ppm")), channels)?;
        sample.label = label;
        let mask_path = dir.join(format!("masks/{index:05}.pgm"));
        if mask_path.exists() {
            let m = decode_pnm(&fs::read(&mask_path)?)?;
            sample.fg_mask = Some(m.data().iter().map(|&v| v > 0.5).collect());
        }
        out.push(sample);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let a = generate(7, 12, 4, 32).unwrap();
        let b = generate(7, 12, 4, 32).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate(8, 12, 4, 32).unwrap());
    }

    #[test]
    fn labels_are_balanced() {
        let d = generate(1, 40, 4, 32).unwrap();
        for c in 0..4 {
            assert_eq!(d.iter().filter(|s| s.label == c).count(), 10);
        }
    }

    #[test]
    fn too_many_classes() {
        assert!(matches!(generate(1, 4, 9, 32), Err(Error::Param(_))));
    }

    #[test]
    fn foreground_fraction_contract() {
        let d = generate(3, 1000, 8, 32).unwrap();
        for s in &d {
            let f = s.fg_fraction().unwrap();
            assert!((0.10..=0.60).contains(&f), "fraction {f}");
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn p5_values() {
        let bytes = b"P5\n2 2\n255\n\x00\xff\x00\xff";
        let t = decode_pnm(bytes).unwrap();
        assert_eq!(t.shape(), &[2, 2, 1]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn p6_keeps_channel_order() {
        let bytes = b"P6\n# comment\n1 1\n255\n\x0a\x14\x1e";
        let t = decode_pnm(bytes).unwrap();
        assert_eq!(t.data(), &[10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0]);
    }

    #[test]
    fn bad_inputs_report_offsets() {
        match decode_pnm(b"P3\n1 1\n255\n") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        match decode_pnm(b"P5\n2 2\n255\n\x00") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("{other:?}"),
        }
        assert!(decode_pnm(b"P5\n2 2\n65535\n\x00\x00").is_err());
    }

    #[test]
    fn roundtrip_within_quantization() {
        let s = &generate(5, 1, 4, 32).unwrap()[0];
        let back = decode_pnm(&encode_pnm(&s.image).unwrap()).unwrap();
        for (a, b) in s.image.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
