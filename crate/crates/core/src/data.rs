//! Image sets: seeded synthetic generators, PNG/PPM files and random crops.
//!
//! Images are (3, H, W) tensors with values in [0, 1].

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Image = Tensor<f32>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    Gradients,
    GaussianBlobs,
    BandLimitedNoise,
}

impl SyntheticKind {
    pub const ALL: [SyntheticKind; 3] = [
        SyntheticKind::Gradients,
        SyntheticKind::GaussianBlobs,
        SyntheticKind::BandLimitedNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::Gradients => "gradients",
            SyntheticKind::GaussianBlobs => "gaussian-blobs",
            SyntheticKind::BandLimitedNoise => "band-limited-noise",
        }
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Param(format!("unknown synthetic kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub count: usize,
    pub size: usize,
    /// Kinds cycle over the set in order.
    pub kinds: Vec<SyntheticKind>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 16,
            size: 64,
            kinds: SyntheticKind::ALL.to_vec(),
            seed: 0,
        }
    }
}

/// Deterministic image set for `spec`. Image `i` depends only on the seed,
/// `i`, the size and its kind.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Vec<Image>> {
    if spec.size == 0 || spec.size % 8 != 0 {
        return Err(Error::Param(format!(
            "synthetic image size must be a positive multiple of 8, got {}",
            spec.size
        )));
    }
    if spec.kinds.is_empty() && spec.count > 0 {
        return Err(Error::Param("synthetic spec lists no kinds".into()));
    }
    (0..spec.count)
        .map(|i| {
            let kind = spec.kinds[i % spec.kinds.len()];
            let seed = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(match kind {
                SyntheticKind::Gradients => gradient_image(spec.size, &mut rng),
                SyntheticKind::GaussianBlobs => blob_image(spec.size, &mut rng),
                SyntheticKind::BandLimitedNoise => noise_image(spec.size, &mut rng),
            })
        })
        .collect()
}

fn from_fn(size: usize, f: impl Fn(usize, f64, f64) -> f64) -> Image {
    let n = size as f64;
    let mut data = Vec::with_capacity(3 * size * size);
    for ch in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let v = f(ch, (x as f64 + 0.5) / n, (y as f64 + 0.5) / n);
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Tensor::new(&[3, size, size], data).expect("square image")
}

/// Smooth linear ramps, spanning at most half the value range.
fn gradient_image<R: Rng>(size: usize, rng: &mut R) -> Image {
    let params: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let span = rng.random_range(0.1..0.5);
            let base = rng.random_range(0.0..1.0 - span);
            (angle.cos(), angle.sin(), span, base)
        })
        .collect();
    from_fn(size, |ch, u, v| {
        let (dx, dy, span, base) = params[ch];
        // projection onto the direction, rescaled to [0, 1]
        let t = ((u - 0.5) * dx + (v - 0.5) * dy) / std::f64::consts::SQRT_2 + 0.5;
        base + span * t
    })
}

fn blob_image<R: Rng>(size: usize, rng: &mut R) -> Image {
    let bg: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..0.5)).collect();
    let blobs: Vec<([f64; 3], f64, f64, f64)> = (0..rng.random_range(3..8))
        .map(|_| {
            let color = [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ];
            let (cx, cy) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let r = rng.random_range(0.05..0.25);
            (color, cx, cy, r)
        })
        .collect();
    from_fn(size, |ch, u, v| {
        bg[ch]
            + blobs
                .iter()
                .map(|(col, cx, cy, r)| {
                    let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                    col[ch] * (-d2 / (2.0 * r * r)).exp()
                })
                .sum::<f64>()
    })
}

/// Sum of random plane waves with mid-to-high spatial frequencies, scaled
/// to a standard deviation of 0.25 around mid-grey.
fn noise_image<R: Rng>(size: usize, rng: &mut R) -> Image {
    let n = size as f64;
    let waves: Vec<Vec<(f64, f64, f64)>> = (0..3)
        .map(|_| {
            (0..24)
                .map(|_| {
                    let f = rng.random_range(n / 8.0..n / 3.0);
                    let a = rng.random_range(0.0..std::f64::consts::TAU);
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    (f * a.cos(), f * a.sin(), phase)
                })
                .collect()
        })
        .collect();
    // each wave has variance 1/2, so the sum has variance 12
    let norm = 0.25 / (24.0f64 / 2.0).sqrt();
    from_fn(size, |ch, u, v| {
        let s: f64 = waves[ch]
            .iter()
            .map(|(fx, fy, p)| (std::f64::consts::TAU * (fx * u + fy * v) + p).sin())
            .sum();
        0.5 + norm * s
    })
}

/// Variance of all pixel values of an image.
pub fn pixel_variance(img: &Image) -> f64 {
    let n = img.len() as f64;
    let mean = img.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    img.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n
}

/// `batch` random `crop`×`crop` windows from random images, as (B, 3, crop, crop).
pub fn sample_batch<R: Rng + ?Sized>(
    images: &[Image],
    batch: usize,
    crop: usize,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    if images.is_empty() {
        return Err(Error::Data("cannot sample from an empty image set".into()));
    }
    if batch == 0 || crop == 0 {
        return Err(Error::Param("batch size and crop size must be positive".into()));
    }
    let mut data = Vec::with_capacity(batch * 3 * crop * crop);
    for _ in 0..batch {
        let img = &images[rng.random_range(0..images.len())];
        let (h, w) = (img.shape()[1], img.shape()[2]);
        if h < crop || w < crop {
            return Err(Error::Data(format!("image {h}x{w} is smaller than crop {crop}")));
        }
        let y0 = rng.random_range(0..=h - crop);
        let x0 = rng.random_range(0..=w - crop);
        for ch in 0..3 {
            for y in y0..y0 + crop {
                let row = ch * h * w + y * w + x0;
                data.extend_from_slice(&img.data()[row..row + crop]);
            }
        }
    }
    Tensor::new(&[batch, 3, crop, crop], data)
}

/// Stacks same-sized images into a (B, 3, H, W) batch.
pub fn stack(images: &[Image]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Data("cannot stack an empty image set".into()))?;
    let (h, w) = (first.shape()[1], first.shape()[2]);
    if images.iter().any(|i| i.shape() != first.shape()) {
        return Err(Error::Data("images in a batch must share one size".into()));
    }
    let data = images.iter().flat_map(|i| i.data().iter().copied()).collect();
    Tensor::new(&[images.len(), 3, h, w], data)
}

/// A random shuffle of `0..n`, for epoch-style iteration.
pub fn permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

fn interleaved_to_image(rgb: &[u8], w: usize, h: usize) -> Result<Image> {
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = px[ch] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

fn image_to_interleaved(img: &Image) -> Result<(Vec<u8>, usize, usize)> {
    let (h, w) = match *img.shape() {
        [3, h, w] => (h, w),
        _ => {
            return Err(Error::shape(
                "save image",
                format!("expected (3, H, W), got {:?}", img.shape()),
            ))
        }
    };
    let plane = h * w;
    let mut out = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            let v = img.data()[ch * plane + i].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok((out, w, h))
}

/// Reads an 8-bit PNG (RGB, RGBA, grey or grey+alpha; alpha dropped).
pub fn read_png(path: &Path) -> Result<Image> {
    let bad = |e: png::DecodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Data(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf.to_vec(),
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => {
            return Err(Error::Data(format!("{}: unsupported color type {other:?}", path.display())))
        }
    };
    interleaved_to_image(&rgb, w, h)
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let (rgb, w, h) = image_to_interleaved(img)?;
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let err = |e: png::EncodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(err)?;
    writer.write_image_data(&rgb).map_err(err)?;
    writer.finish().map_err(err)
}

/// Parses a binary PPM (P6) with maxval 255.
pub fn parse_ppm(bytes: &[u8]) -> Result<Image> {
    let bad = |m: &str| Error::Data(format!("PPM: {m}"));
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(bad("not a binary P6 file"));
    }
    let mut num = || -> Result<usize> { token()?.parse().map_err(|_| bad("bad header number")) };
    let (w, h, maxval) = (num()?, num()?, num()?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    if w == 0 || h == 0 {
        return Err(bad("zero extent"));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let raster = bytes
        .get(start..start + 3 * w * h)
        .ok_or_else(|| bad("truncated raster"))?;
    interleaved_to_image(raster, w, h)
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let (rgb, w, h) = image_to_interleaved(img)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&rgb);
    fs::write(path, out)?;
    Ok(())
}

/// Loads a PNG or PPM by extension.
pub fn read_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => read_png(path),
        Some("ppm") => {
            let mut bytes = Vec::new();
            File::open(path)?.read_to_end(&mut bytes)?;
            parse_ppm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
        }
        _ => Err(Error::Data(format!("{}: not a .png or .ppm file", path.display()))),
    }
}

/// Images found in a directory, sorted by file name.
#[derive(Debug, Default)]
pub struct LoadedImages {
    pub images: Vec<(PathBuf, Image)>,
    /// Files with an image extension that failed to decode.
    pub skipped: Vec<(PathBuf, String)>,
}

pub fn read_image_dir(dir: &Path) -> Result<LoadedImages> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", dir.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "ppm")
            )
        })
        .collect();
    paths.sort();
    let mut out = LoadedImages::default();
    for p in paths {
        match read_image(&p) {
            Ok(img) => out.images.push((p, img)),
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                out.skipped.push((p, e.to_string()));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_bounded() {
        let spec = SyntheticSpec { count: 6, size: 16, ..SyntheticSpec::default() };
        let a = synthetic_dataset(&spec).unwrap();
        let b = synthetic_dataset(&spec).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|i| i.data().iter().all(|v| (0.0..=1.0).contains(v))));
        let other = synthetic_dataset(&SyntheticSpec { seed: 1, ..spec.clone() }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn zero_count_and_bad_size() {
        let spec = SyntheticSpec { count: 0, ..SyntheticSpec::default() };
        assert!(synthetic_dataset(&spec).unwrap().is_empty());
        assert!(synthetic_dataset(&SyntheticSpec { size: 12, ..SyntheticSpec::default() }).is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in SyntheticKind::ALL {
            assert_eq!(k.name().parse::<SyntheticKind>().unwrap(), k);
        }
        assert!("plasma".parse::<SyntheticKind>().is_err());
    }

    #[test]
    fn crops_have_requested_shape() {
        let imgs = synthetic_dataset(&SyntheticSpec { count: 3, size: 16, ..SyntheticSpec::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_batch(&imgs, 4, 8, &mut rng).unwrap();
        assert_eq!(b.shape(), &[4, 3, 8, 8]);
        assert!(sample_batch(&imgs, 1, 32, &mut rng).is_err());
        assert!(sample_batch(&[], 1, 8, &mut rng).is_err());
    }

    #[test]
    fn ppm_parse_with_comment() {
        let mut bytes = b"P6\n# c\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let img = parse_ppm(&bytes).unwrap();
        assert_eq!(img.shape(), &[3, 1, 2]);
        assert_eq!(img.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(parse_ppm(&bytes[..bytes.len() - 1]).is_err());
        assert!(parse_ppm(b"P3\n1 1\n255\n0 0 0").is_err());
    }
}
