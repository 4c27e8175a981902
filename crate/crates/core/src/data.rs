//! Segmentation samples, binary PPM/PGM IO, and the synthetic shape dataset.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IGNORE_LABEL: u8 = 255;

/// An 8-bit raster with one (PGM) or three (PPM) interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

fn parse_pnm(bytes: &[u8], magic: &str, channels: usize) -> Result<Raster> {
    let kind = if channels == 3 { "ppm" } else { "pgm" };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(kind, "truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::format(kind, "non-ASCII header"))?);
    }
    if fields[0] != magic {
        return Err(Error::format(kind, format!("expected magic {magic}, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format(kind, format!("bad header field {s:?}")));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(Error::format(kind, format!("only maxval 255 is supported, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(kind, "zero extent"));
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let need = width * height * channels;
    let payload = bytes.get(pos..pos + need).ok_or_else(|| Error::format(kind, "truncated payload"))?;
    Ok(Raster {
        width,
        height,
        channels,
        data: payload.to_vec(),
    })
}

impl Raster {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        match bytes.get(..2) {
            Some(b"P6") => parse_pnm(&bytes, "P6", 3),
            Some(b"P5") => parse_pnm(&bytes, "P5", 1),
            _ => Err(Error::format("pnm", format!("{} is not a binary PPM/PGM file", path.display()))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }
}

/// Writes to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Invalid(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)?;
    Ok(())
}

/// One image with per-pixel class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    /// `[3, H, W]`, scaled to `[-1, 1]`.
    pub image: Tensor,
    /// Row-major `H × W` class ids; [`IGNORE_LABEL`] marks unlabelled pixels.
    pub labels: Vec<u8>,
}

impl Sample {
    pub fn from_rasters(name: impl Into<String>, image: &Raster, labels: &Raster) -> Result<Self> {
        let name = name.into();
        if image.channels != 3 || labels.channels != 1 {
            return Err(Error::Invalid(format!("{name}: expected an RGB image and a grey label map")));
        }
        if (image.width, image.height) != (labels.width, labels.height) {
            return Err(Error::Invalid(format!(
                "{name}: image is {}x{} but labels are {}x{}",
                image.width, image.height, labels.width, labels.height
            )));
        }
        let (h, w) = (image.height, image.width);
        let img = Tensor::from_fn(&[3, h, w], |i| image.data[(i[1] * w + i[2]) * 3 + i[0]] as f64 / 127.5 - 1.0);
        Ok(Sample {
            name,
            image: img,
            labels: labels.data.clone(),
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn to_rasters(&self) -> (Raster, Raster) {
        let (h, w) = (self.height(), self.width());
        let mut rgb = vec![0u8; h * w * 3];
        for (i, px) in rgb.iter_mut().enumerate() {
            let (pos, c) = (i / 3, i % 3);
            let v = self.image.data()[c * h * w + pos];
            *px = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        }
        let image = Raster {
            width: w,
            height: h,
            channels: 3,
            data: rgb,
        };
        let labels = Raster {
            width: w,
            height: h,
            channels: 1,
            data: self.labels.clone(),
        };
        (image, labels)
    }

    /// Checks every label against the class count.
    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        let w = self.width();
        for (i, &l) in self.labels.iter().enumerate() {
            if l != IGNORE_LABEL && l as usize >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: l as usize,
                    row: i / w,
                    col: i % w,
                    num_classes,
                });
            }
        }
        Ok(())
    }

    /// Nearest-neighbour downsample of the labels to `(h, w)`
    /// (align-corners = false: output cell `i` reads input `⌊(i + ½)·H/h⌋`).
    pub fn labels_at(&self, h: usize, w: usize) -> Vec<usize> {
        let (sh, sw) = (self.height(), self.width());
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            let sy = ((2 * y + 1) * sh / (2 * h)).min(sh - 1);
            for x in 0..w {
                let sx = ((2 * x + 1) * sw / (2 * w)).min(sw - 1);
                out.push(self.labels[sy * sw + sx] as usize);
            }
        }
        out
    }

    /// Left-right mirror image of the sample.
    pub fn flipped(&self) -> Sample {
        let w = self.width();
        let image = Tensor::from_fn(self.image.shape(), |i| self.image.at(&[i[0], i[1], w - 1 - i[2]]));
        let labels = self.labels.chunks(w).flat_map(|row| row.iter().rev().copied()).collect();
        Sample {
            name: self.name.clone(),
            image,
            labels,
        }
    }
}

/// Samples sharing a class count.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
}

impl Dataset {
    /// Loads every `<stem>.ppm` with a matching `<stem>.pgm` from `dir`, in
    /// name order.
    pub fn load(dir: &Path, num_classes: usize) -> Result<Self> {
        let mut stems: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
            .collect();
        stems.sort();
        if stems.is_empty() {
            return Err(Error::Invalid(format!("no .ppm images in {}", dir.display())));
        }
        let mut samples = Vec::with_capacity(stems.len());
        for img_path in stems {
            let label_path = img_path.with_extension("pgm");
            let name = img_path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            if !label_path.exists() {
                return Err(Error::Invalid(format!("{name}: missing label map {}", label_path.display())));
            }
            let sample = Sample::from_rasters(name, &Raster::read(&img_path)?, &Raster::read(&label_path)?)?;
            sample.check_labels(num_classes)?;
            samples.push(sample);
        }
        Ok(Dataset { samples, num_classes })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for s in &self.samples {
            let (img, labels) = s.to_rasters();
            img.write(&dir.join(format!("{}.ppm", s.name)))?;
            labels.write(&dir.join(format!("{}.pgm", s.name)))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Parameters of [`synthesize`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    /// Image side in pixels; a multiple of 32.
    pub size: usize,
    /// Class 0 is background; classes `1..` are shape kinds.
    pub num_classes: usize,
    pub seed: u64,
}

/// Lattice cell side; shape outlines follow this grid so that the labels are
/// exact at output stride 4.
const CELL: usize = 4;

/// Dark backgrounds and bright fills keep figure/ground separable from
/// colour alone, whatever colours a given image draws.
fn color(rng: &mut ChaCha8Rng, bright: bool) -> [u8; 3] {
    let range = if bright { 130..=255u8 } else { 0..=70u8 };
    [0; 3].map(|_| rng.gen_range(range.clone()))
}

/// Whether lattice cell `(cy, cx)` lies in shape `kind` (1-based) with
/// centre `(y, x)` and half extents `(ry, rx)`, all in cells.
fn covers(kind: usize, cy: f64, cx: f64, y: f64, x: f64, ry: f64, rx: f64) -> bool {
    let (dy, dx) = ((cy - y) / ry, (cx - x) / rx);
    match (kind - 1) % 3 {
        0 => dy.abs() <= 1.0 && dx.abs() <= 1.0,
        1 => dy * dy + dx * dx <= 1.0,
        _ => dy.abs() + dx.abs() <= 1.0,
    }
}

/// Random rectangles, disks and diamonds (cycling over classes `1..K`) on a
/// dark background, drawn on a 4-pixel lattice and kept inside the image.
/// Shape colours are random and independent of class, so the class is
/// carried by the outline alone.
pub fn synthesize(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.size == 0 || !cfg.size.is_multiple_of(32) {
        return Err(Error::Config(format!("image size must be a positive multiple of 32, got {}", cfg.size)));
    }
    if !(2..=255).contains(&cfg.num_classes) {
        return Err(Error::Config(format!("need 2 to 255 classes, got {}", cfg.num_classes)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.size;
    let cells = s / CELL;
    let mut samples = Vec::with_capacity(cfg.count);
    for n in 0..cfg.count {
        let bg = color(&mut rng, false);
        let mut rgb: Vec<[u8; 3]> = vec![bg; s * s];
        let mut labels = vec![0u8; s * s];
        let shapes = rng.gen_range(1..=3);
        for _ in 0..shapes {
            let kind = rng.gen_range(1..cfg.num_classes);
            let fill = color(&mut rng, true);
            let (ry, rx) = (rng.gen_range(1.5..3.0f64), rng.gen_range(1.5..3.0f64));
            let n = cells as f64;
            let (y, x) = (rng.gen_range(ry..=n - ry), rng.gen_range(rx..=n - rx));
            for cy in 0..cells {
                for cx in 0..cells {
                    if !covers(kind, cy as f64 + 0.5, cx as f64 + 0.5, y, x, ry, rx) {
                        continue;
                    }
                    for py in cy * CELL..(cy + 1) * CELL {
                        for px in cx * CELL..(cx + 1) * CELL {
                            rgb[py * s + px] = fill;
                            labels[py * s + px] = kind as u8;
                        }
                    }
                }
            }
        }
        let mut data = Vec::with_capacity(s * s * 3);
        for px in &rgb {
            for &c in px {
                let noise: i16 = rng.gen_range(-12..=12);
                data.push((c as i16 + noise).clamp(0, 255) as u8);
            }
        }
        let image = Raster {
            width: s,
            height: s,
            channels: 3,
            data,
        };
        let label_map = Raster {
            width: s,
            height: s,
            channels: 1,
            data: labels,
        };
        samples.push(Sample::from_rasters(format!("{n:05}"), &image, &label_map)?);
    }
    Ok(Dataset {
        samples,
        num_classes: cfg.num_classes,
    })
}
