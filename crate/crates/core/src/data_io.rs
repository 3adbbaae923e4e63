//! Datasets and image files.
//!
//! Every ingestion path yields `[N, 1, H, W]` tensors with values in `[-1, 1]`
//! and a deterministic 80/20 train/test split.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fft::{self, ComplexGrid};
use crate::tensor::Tensor;

pub const TRAIN_FRACTION: f64 = 0.8;
/// Canonical side length for ingested images.
pub const CANONICAL_SIZE: usize = 32;
const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
/// Standard deviation of the 1/w² field added by the texture preset.
const TEXTURE_STD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapePreset {
    Edges,
    Texture,
}

impl std::str::FromStr for ShapePreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edges" => Ok(Self::Edges),
            "texture" => Ok(Self::Texture),
            _ => Err(Error::Config(format!("unknown preset {s:?} (edges, texture)"))),
        }
    }
}

impl fmt::Display for ShapePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Edges => "edges",
            Self::Texture => "texture",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    Synthetic { seed: u64, preset: ShapePreset },
    Idx { path: PathBuf },
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Synthetic { seed, preset } => write!(f, "synthetic:{preset}:seed={seed}"),
            Self::Idx { path } => write!(f, "idx:{}", path.display()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[N, 1, H, W]`.
    pub images: Tensor,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(images: Tensor, split_seed: u64, provenance: Provenance) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::invalid(format!(
                "dataset tensor must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::invalid("dataset values must lie in [-1, 1]"));
        }
        let (train, test) = split_indices(images.shape()[0], split_seed);
        Ok(Self {
            images,
            train,
            test,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let s = self.images.shape();
        let n = s[1] * s[2] * s[3];
        &self.images.data()[i * n..(i + 1) * n]
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Tensor> {
        self.images.gather_outer(idx)
    }

    pub fn train_images(&self) -> Result<Tensor> {
        self.batch(&self.train)
    }

    pub fn test_images(&self) -> Result<Tensor> {
        self.batch(&self.test)
    }

    /// `index,split,provenance` rows.
    pub fn manifest_csv(&self) -> String {
        let mut split = vec![""; self.len()];
        for &i in &self.train {
            split[i] = "train";
        }
        for &i in &self.test {
            split[i] = "test";
        }
        let mut out = String::from("index,split,provenance\n");
        for (i, s) in split.iter().enumerate() {
            out.push_str(&format!("{i},{s},{}\n", self.provenance));
        }
        out
    }
}

/// Sorted, disjoint train/test index lists covering `0..n`.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5b17);
    idx.shuffle(&mut rng);
    let cut = ((n as f64) * TRAIN_FRACTION).round() as usize;
    let cut = if n >= 2 { cut.clamp(1, n - 1) } else { n };
    let (mut train, mut test) = (idx[..cut].to_vec(), idx[cut..].to_vec());
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn shape_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let base = rng.random_range(-0.6..0.6);
    let gx = rng.random_range(-0.3..0.3);
    let gy = rng.random_range(-0.3..0.3);
    let mut img: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            base + gx * (x / (w - 1).max(1) as f64 - 0.5) + gy * (y / (h - 1).max(1) as f64 - 0.5)
        })
        .collect();
    let count = rng.random_range(3..=8);
    for _ in 0..count {
        let v = rng.random_range(-1.0..1.0);
        match rng.random_range(0..3) {
            0 => {
                let (mut x0, mut x1) = (rng.random_range(0..w), rng.random_range(0..w));
                let (mut y0, mut y1) = (rng.random_range(0..h), rng.random_range(0..h));
                if x0 > x1 {
                    std::mem::swap(&mut x0, &mut x1);
                }
                if y0 > y1 {
                    std::mem::swap(&mut y0, &mut y1);
                }
                for y in y0..=y1 {
                    img[y * w + x0..=y * w + x1].fill(v);
                }
            }
            1 => {
                let cx = rng.random_range(0.0..w as f64);
                let cy = rng.random_range(0.0..h as f64);
                let r = rng.random_range(2.0..(w.min(h) as f64 / 4.0).max(2.5));
                for (i, p) in img.iter_mut().enumerate() {
                    let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
                    if (x - cx).powi(2) + (y - cy).powi(2) <= r * r {
                        *p = v;
                    }
                }
            }
            _ => {
                if rng.random_bool(0.5) {
                    let y = rng.random_range(0..h);
                    img[y * w..(y + 1) * w].fill(v);
                } else {
                    let x = rng.random_range(0..w);
                    for y in 0..h {
                        img[y * w + x] = v;
                    }
                }
            }
        }
    }
    img
}

/// Zero-mean field with power spectrum ∝ 1/w², scaled to standard deviation `std`.
fn power_law_field(rng: &mut ChaCha8Rng, h: usize, w: usize, std: f64) -> Result<Vec<f64>> {
    let mut g = ComplexGrid::zeros(h, w);
    for u in 0..h {
        for v in 0..w {
            let i = u * w + v;
            let j = ((h - u) % h) * w + (w - v) % w;
            if j < i {
                continue;
            }
            let fu = if u <= h / 2 { u as f64 } else { u as f64 - h as f64 };
            let fv = if v <= w / 2 { v as f64 } else { v as f64 - w as f64 };
            let r = (fu * fu + fv * fv).sqrt();
            if r == 0.0 {
                continue;
            }
            let phase = if i == j {
                0.0
            } else {
                rng.random_range(0.0..std::f64::consts::TAU)
            };
            g.re[i] = phase.cos() / r;
            g.im[i] = phase.sin() / r;
            g.re[j] = g.re[i];
            g.im[j] = -g.im[i];
        }
    }
    let mut x = fft::ifft2(&g)?;
    let s = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if s > 0.0 {
        x.iter_mut().for_each(|v| *v *= std / s);
    }
    Ok(x)
}

/// Synthetic images of crisp rectangles, discs and 1-px lines on graded backgrounds.
pub fn gen_shapes(n: usize, height: usize, width: usize, seed: u64, preset: ShapePreset) -> Result<Dataset> {
    if !height.is_power_of_two() {
        return Err(Error::NotPowerOfTwo {
            dim: "height",
            size: height,
        });
    }
    if !width.is_power_of_two() {
        return Err(Error::NotPowerOfTwo {
            dim: "width",
            size: width,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * height * width);
    for _ in 0..n {
        let mut img = shape_image(&mut rng, height, width);
        if preset == ShapePreset::Texture {
            let field = power_law_field(&mut rng, height, width, TEXTURE_STD)?;
            img.iter_mut().zip(field).for_each(|(p, f)| *p += f);
        }
        data.extend(img.into_iter().map(|v| v.clamp(-1.0, 1.0)));
    }
    let images = Tensor::new(vec![n, 1, height, width], data)?;
    Dataset::new(images, seed, Provenance::Synthetic { seed, preset })
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::Format {
            offset: offset as u64,
            msg: "truncated header".into(),
        })
}

/// Parses an IDX `u8` image tensor into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad IDX magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or(Error::Format {
            offset: 4,
            msg: "dimensions overflow".into(),
        })?;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Format {
            offset: (16 + body.len()) as u64,
            msg: format!("truncated: {need} pixel bytes declared, {} present", body.len()),
        });
    }
    Ok((n, rows, cols, &body[..need]))
}

/// Parses an IDX `u8` label vector.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad IDX label magic {magic:#010x}"),
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Format {
            offset: (8 + body.len()) as u64,
            msg: format!("truncated: {n} labels declared, {} present", body.len()),
        });
    }
    Ok(&body[..n])
}

/// Centers a `rows × cols` image inside `size × size`, padding with −1 or cropping.
fn fit_canvas(src: &[f64], rows: usize, cols: usize, size: usize) -> Vec<f64> {
    let mut out = vec![-1.0; size * size];
    let oy = size as isize / 2 - rows as isize / 2;
    let ox = size as isize / 2 - cols as isize / 2;
    for r in 0..rows {
        let y = r as isize + oy;
        if y < 0 || y >= size as isize {
            continue;
        }
        for c in 0..cols {
            let x = c as isize + ox;
            if x >= 0 && x < size as isize {
                out[y as usize * size + x as usize] = src[r * cols + c];
            }
        }
    }
    out
}

/// Reads an IDX image file (values `0..=255` mapped to `[-1, 1]`) onto a
/// `size × size` canvas. Labels, when given, are validated but unused.
pub fn read_idx(images: &Path, labels: Option<&Path>, size: usize, split_seed: u64) -> Result<Dataset> {
    let bytes = fs::read(images)?;
    let (n, rows, cols, pix) = parse_idx_images(&bytes)?;
    if let Some(lp) = labels {
        let lb = fs::read(lp)?;
        let l = parse_idx_labels(&lb)?;
        if l.len() != n {
            return Err(Error::Format {
                offset: 4,
                msg: format!("{} labels for {n} images", l.len()),
            });
        }
    }
    let mut data = Vec::with_capacity(n * size * size);
    for i in 0..n {
        let img: Vec<f64> = pix[i * rows * cols..(i + 1) * rows * cols]
            .iter()
            .map(|&p| p as f64 / 127.5 - 1.0)
            .collect();
        data.extend(fit_canvas(&img, rows, cols, size));
    }
    let t = Tensor::new(vec![n, 1, size, size], data)?;
    Dataset::new(
        t,
        split_seed,
        Provenance::Idx {
            path: images.to_path_buf(),
        },
    )
}

fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Binary PGM bytes for a `[-1, 1]` image.
pub fn encode_pgm(image: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if image.len() != height * width {
        return Err(Error::shape(&[image.len()], &[height, width]));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(image.iter().map(|v| to_byte(*v)));
    Ok(out)
}

pub fn pgm_write(path: &Path, image: &[f64], height: usize, width: usize) -> Result<()> {
    let bytes = encode_pgm(image, height, width)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Decodes a binary PGM into `(height, width, values in [-1, 1])`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<String> {
        loop {
            match bytes.get(*pos) {
                Some(b'#') => {
                    while bytes.get(*pos).is_some_and(|b| *b != b'\n') {
                        *pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => *pos += 1,
                Some(_) => break,
                None => {
                    return Err(Error::Format {
                        offset: *pos as u64,
                        msg: "truncated PGM header".into(),
                    })
                }
            }
        }
        let start = *pos;
        while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            *pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos)?;
    if magic != "P5" {
        return Err(Error::Format {
            offset: 0,
            msg: format!("expected P5, found {magic:?}"),
        });
    }
    let num = |pos: &mut usize| -> Result<usize> {
        let at = *pos;
        token(pos)?.parse().map_err(|_| Error::Format {
            offset: at as u64,
            msg: "malformed PGM header number".into(),
        })
    };
    let width = num(&mut pos)?;
    let height = num(&mut pos)?;
    let maxval = num(&mut pos)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format {
            offset: pos as u64,
            msg: format!("unsupported maxval {maxval}"),
        });
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height;
    let raster = bytes.get(pos..pos + need).ok_or(Error::Format {
        offset: bytes.len() as u64,
        msg: format!("raster needs {need} bytes"),
    })?;
    let m = maxval as f64;
    Ok((
        height,
        width,
        raster.iter().map(|&b| b as f64 / m * 2.0 - 1.0).collect(),
    ))
}

pub fn pgm_read(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    decode_pgm(&fs::read(path)?)
}

/// Tiles images into a grid with 1-px separators at −1.
pub fn tile_grid(images: &[&[f64]], height: usize, width: usize, cols: usize) -> (usize, usize, Vec<f64>) {
    let cols = cols.max(1).min(images.len().max(1));
    let rows = images.len().div_ceil(cols).max(1);
    let gh = rows * (height + 1) - 1;
    let gw = cols * (width + 1) - 1;
    let mut out = vec![-1.0; gh * gw];
    for (k, img) in images.iter().enumerate() {
        let (r, c) = (k / cols, k % cols);
        for y in 0..height {
            let dst = (r * (height + 1) + y) * gw + c * (width + 1);
            out[dst..dst + width].copy_from_slice(&img[y * width..(y + 1) * width]);
        }
    }
    (gh, gw, out)
}

pub fn pgm_write_grid(path: &Path, images: &[&[f64]], height: usize, width: usize, cols: usize) -> Result<()> {
    let (gh, gw, data) = tile_grid(images, height, width, cols);
    pgm_write(path, &data, gh, gw)
}

/// Affinely maps `[min, max]` of `v` onto `[-1, 1]` (constant input maps to −1).
pub fn rescale_signed(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![-1.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo) * 2.0 - 1.0).collect()
}
