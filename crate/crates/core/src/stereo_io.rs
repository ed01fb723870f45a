//! Stereo samples: images, ground truth, PFM/PGM codecs, manifests and the
//! random-dot generator used for desk-scale training data.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::correlation::Sign;
use crate::error::{dim_err, fmt_err, Result};

/// Multi-channel image stored as channel planes, each plane row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// Dense per-pixel feature vectors. Same layout as [`Image`]: feature `f` of
/// pixel `(r, c)` lives at `data[f * h * w + r * w + c]`.
pub type FeatureMap = Image;

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(dim_err(format!("empty image {height}x{width}x{channels}")));
        }
        if data.len() != height * width * channels {
            return Err(dim_err(format!(
                "expected {} values for {height}x{width}x{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, ch: usize, r: usize, c: usize) -> f64 {
        self.data[(ch * self.height + r) * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, ch: usize, r: usize, c: usize, v: f64) {
        self.data[(ch * self.height + r) * self.width + c] = v;
    }

    pub fn plane(&self, ch: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn plane_mut(&mut self, ch: usize) -> &mut [f64] {
        let n = self.pixels();
        &mut self.data[ch * n..(ch + 1) * n]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

/// Ground-truth disparities. Invalid pixels hold `f64::INFINITY` and are
/// flagged in `valid`; consumers read the mask, never the sentinel.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub height: usize,
    pub width: usize,
    pub disparity: Vec<f64>,
    pub valid: Vec<bool>,
}

impl GroundTruth {
    /// Builds ground truth from raw values; non-finite or negative entries
    /// become invalid.
    pub fn from_disparity(height: usize, width: usize, raw: Vec<f64>) -> Result<Self> {
        if raw.len() != height * width {
            return Err(dim_err("ground truth size does not match dimensions"));
        }
        let mut disparity = raw;
        let valid: Vec<bool> = disparity.iter().map(|d| d.is_finite() && *d >= 0.0).collect();
        for (d, ok) in disparity.iter_mut().zip(&valid) {
            if !ok {
                *d = f64::INFINITY;
            }
        }
        Ok(GroundTruth {
            height,
            width,
            disparity,
            valid,
        })
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

#[derive(Clone, Debug)]
pub struct StereoSample {
    pub left: Image,
    pub right: Image,
    /// Non-occluded ground truth.
    pub gt: Option<GroundTruth>,
    /// Ground truth including occluded pixels, when the source provides it.
    pub gt_all: Option<GroundTruth>,
    pub label_count: usize,
}

impl StereoSample {
    pub fn new(left: Image, right: Image, gt: Option<GroundTruth>, label_count: usize) -> Result<Self> {
        if left.height != right.height || left.width != right.width || left.channels != right.channels {
            return Err(dim_err("left and right images differ in shape"));
        }
        if label_count < 2 {
            return Err(dim_err("label count must be at least 2"));
        }
        if let Some(g) = &gt {
            if g.height != left.height || g.width != left.width {
                return Err(dim_err("ground truth shape differs from images"));
            }
        }
        Ok(StereoSample {
            left,
            right,
            gt,
            gt_all: None,
            label_count,
        })
    }
}

/// Zero mean, unit variance over all pixels and channels jointly.
pub fn normalize_image(img: &Image) -> Image {
    const VARIANCE_FLOOR: f64 = 1e-12;
    let n = img.data.len() as f64;
    let mean = img.data.iter().sum::<f64>() / n;
    let var = img.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut out = img.clone();
    if var < VARIANCE_FLOOR {
        out.data.iter_mut().for_each(|v| *v = 0.0);
        return out;
    }
    let inv_std = 1.0 / var.sqrt();
    out.data.iter_mut().for_each(|v| *v = (*v - mean) * inv_std);
    out
}

/// Appends two channels holding `x / width` and `y / height`.
pub fn append_coordinate_features(img: &Image) -> Image {
    let (h, w) = (img.height, img.width);
    let mut data = img.data.clone();
    data.reserve(2 * h * w);
    for _r in 0..h {
        for c in 0..w {
            data.push(c as f64 / w as f64);
        }
    }
    for r in 0..h {
        for _c in 0..w {
            data.push(r as f64 / h as f64);
        }
    }
    Image {
        height: h,
        width: w,
        channels: img.channels + 2,
        data,
    }
}

// ---------------------------------------------------------------------------
// PFM
// ---------------------------------------------------------------------------

/// Grayscale PFM contents with rows already flipped to top-down order.
#[derive(Clone, Debug, PartialEq)]
pub struct PfmMap {
    pub width: usize,
    pub height: usize,
    /// Header scale. Negative means little-endian payload.
    pub scale: f64,
    pub data: Vec<f32>,
}

impl PfmMap {
    pub fn from_ground_truth(gt: &GroundTruth) -> Self {
        let data = gt
            .disparity
            .iter()
            .zip(&gt.valid)
            .map(|(d, ok)| if *ok { *d as f32 } else { f32::INFINITY })
            .collect();
        PfmMap {
            width: gt.width,
            height: gt.height,
            scale: -1.0,
            data,
        }
    }

    pub fn from_values(height: usize, width: usize, values: &[f64]) -> Self {
        PfmMap {
            width,
            height,
            scale: -1.0,
            data: values.iter().map(|v| *v as f32).collect(),
        }
    }

    pub fn to_ground_truth(&self) -> GroundTruth {
        let raw = self.data.iter().map(|v| *v as f64).collect();
        GroundTruth::from_disparity(self.height, self.width, raw).expect("sizes checked by reader")
    }

    pub fn to_image(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.iter().map(|v| *v as f64).collect(),
        }
    }
}

/// Splits off `count` whitespace-separated ASCII header tokens. Returns the
/// tokens and the payload offset (one whitespace byte after the last token).
fn header_tokens(bytes: &[u8], count: usize, allow_comments: bool) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut pos = 0;
    while tokens.len() < count {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if allow_comments && pos < bytes.len() && bytes[pos] == b'#' {
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
            return Err(fmt_err("truncated header"));
        }
        let tok = std::str::from_utf8(&bytes[start..pos]).map_err(|_| fmt_err("non-ASCII header"))?;
        tokens.push(tok.to_string());
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fmt_err("missing whitespace after header"));
    }
    Ok((tokens, pos + 1))
}

fn parse_dim(tok: &str, what: &str) -> Result<usize> {
    let v: usize = tok.parse().map_err(|_| fmt_err(format!("bad {what}: {tok:?}")))?;
    if v == 0 {
        return Err(fmt_err(format!("{what} must be positive")));
    }
    Ok(v)
}

pub fn read_pfm(bytes: &[u8]) -> Result<PfmMap> {
    let (tokens, offset) = header_tokens(bytes, 4, false)?;
    match tokens[0].as_str() {
        "Pf" => {}
        "PF" => return Err(fmt_err("color PFM is not supported")),
        other => return Err(fmt_err(format!("bad PFM magic {other:?}"))),
    }
    let width = parse_dim(&tokens[1], "width")?;
    let height = parse_dim(&tokens[2], "height")?;
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| fmt_err(format!("bad scale {:?}", tokens[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(fmt_err("scale must be finite and non-zero"));
    }
    let payload = &bytes[offset..];
    let need = width * height * 4;
    if payload.len() < need {
        return Err(fmt_err(format!("truncated payload: {} of {need} bytes", payload.len())));
    }
    let little = scale < 0.0;
    let mut data = vec![0f32; width * height];
    for (i, chunk) in payload[..need].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        // stored bottom-to-top
        let (r, c) = (height - 1 - i / width, i % width);
        data[r * width + c] = v;
    }
    Ok(PfmMap {
        width,
        height,
        scale,
        data,
    })
}

pub fn write_pfm(map: &PfmMap) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n{:?}\n", map.width, map.height, map.scale).into_bytes();
    out.reserve(map.data.len() * 4);
    let little = map.scale < 0.0;
    for r in (0..map.height).rev() {
        for v in &map.data[r * map.width..(r + 1) * map.width] {
            if little {
                out.extend_from_slice(&v.to_le_bytes());
            } else {
                out.extend_from_slice(&v.to_be_bytes());
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// PGM / PPM
// ---------------------------------------------------------------------------

/// Binary P5 reader; values are scaled to [0, 1] by maxval.
pub fn read_pgm(bytes: &[u8]) -> Result<Image> {
    let (tokens, offset) = header_tokens(bytes, 4, true)?;
    if tokens[0] != "P5" {
        return Err(fmt_err(format!("bad PGM magic {:?}", tokens[0])));
    }
    let width = parse_dim(&tokens[1], "width")?;
    let height = parse_dim(&tokens[2], "height")?;
    let maxval: u32 = tokens[3]
        .parse()
        .map_err(|_| fmt_err(format!("bad maxval {:?}", tokens[3])))?;
    if maxval == 0 || maxval > 65535 {
        return Err(fmt_err(format!("maxval {maxval} outside 1..=65535")));
    }
    let bpp = if maxval > 255 { 2 } else { 1 };
    let payload = &bytes[offset..];
    let need = width * height * bpp;
    if payload.len() < need {
        return Err(fmt_err("truncated PGM payload"));
    }
    let scale = maxval as f64;
    let data = if bpp == 1 {
        payload[..need].iter().map(|b| *b as f64 / scale).collect()
    } else {
        payload[..need]
            .chunks_exact(2)
            .map(|p| u16::from_be_bytes([p[0], p[1]]) as f64 / scale)
            .collect()
    };
    Image::from_vec(height, width, 1, data)
}

fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes the first channel as an 8-bit binary PGM.
pub fn write_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.plane(0).iter().map(|v| quantize8(*v)));
    out
}

/// Writes a 3-channel image as an 8-bit binary PPM.
pub fn write_ppm(img: &Image) -> Result<Vec<u8>> {
    if img.channels != 3 {
        return Err(dim_err(format!("PPM needs 3 channels, got {}", img.channels)));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    for i in 0..img.pixels() {
        for ch in 0..3 {
            out.push(quantize8(img.plane(ch)[i]));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub left: PathBuf,
    pub right: PathBuf,
    pub gt: Option<PathBuf>,
    /// Optional fourth column: ground truth including occluded pixels.
    pub gt_all: Option<PathBuf>,
}

/// Parses a manifest: one sample per line, whitespace-separated
/// `left right [gt [gt_all]]`. Relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < 2 || cols.len() > 4 {
            return Err(fmt_err(format!(
                "manifest line {}: expected 2 to 4 paths, got {}",
                lineno + 1,
                cols.len()
            )));
        }
        let p = |s: &str| base.join(s);
        entries.push(ManifestEntry {
            left: p(cols[0]),
            right: p(cols[1]),
            gt: cols.get(2).map(|s| p(s)),
            gt_all: cols.get(3).map(|s| p(s)),
        });
    }
    Ok(entries)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base)
}

fn read_image_file(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P5") {
        read_pgm(&bytes)
    } else if bytes.starts_with(b"Pf") || bytes.starts_with(b"PF") {
        Ok(read_pfm(&bytes)?.to_image())
    } else {
        Err(fmt_err(format!("{}: unsupported image format", path.display())))
    }
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    Ok(read_pfm(&fs::read(path)?)?.to_ground_truth())
}

pub fn load_sample(entry: &ManifestEntry, label_count: usize) -> Result<StereoSample> {
    let left = read_image_file(&entry.left)?;
    let right = read_image_file(&entry.right)?;
    let gt = entry.gt.as_deref().map(read_ground_truth).transpose()?;
    let mut sample = StereoSample::new(left, right, gt, label_count)?;
    sample.gt_all = entry.gt_all.as_deref().map(read_ground_truth).transpose()?;
    Ok(sample)
}

// ---------------------------------------------------------------------------
// Random-dot generator
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SynthParams {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub labels: usize,
    pub shapes: usize,
    pub sign: Sign,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            seed: 0,
            height: 32,
            width: 48,
            labels: 8,
            shapes: 3,
            sign: Sign::Positive,
        }
    }
}

/// Random-dot stereo pair over a piecewise-constant disparity map: a
/// background plane plus axis-aligned rectangles. The right image is the left
/// image forward-warped by the disparity with z-buffering (larger disparity is
/// nearer); uncovered right pixels get fresh noise. Left pixels that are
/// hidden in the right view or warp outside it are invalid in `gt`.
pub fn synth_random_dot(params: &SynthParams) -> Result<StereoSample> {
    let SynthParams {
        seed,
        height: h,
        width: w,
        labels,
        shapes,
        sign,
    } = *params;
    if h == 0 || w == 0 {
        return Err(dim_err("empty synthetic image"));
    }
    if labels < 2 || labels > w / 4 {
        return Err(dim_err(format!("label count {labels} must be in 2..={}", w / 4)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_d = labels - 1;
    let background = rng.gen_range(0..=max_d / 2);
    let mut disp = vec![background; h * w];

    let mut rects: Vec<(usize, usize, usize, usize, usize)> = (0..shapes)
        .map(|_| {
            let rh = rng.gen_range((h / 6).max(1)..=(h / 2).max(1));
            let rw = rng.gen_range((w / 6).max(1)..=(w / 2).max(1));
            let r0 = rng.gen_range(0..=h - rh);
            let c0 = rng.gen_range(0..=w - rw);
            let d = rng.gen_range(background.min(max_d - 1) + 1..=max_d);
            (r0, c0, rh, rw, d)
        })
        .collect();
    // nearer surfaces are painted last so they occlude farther ones
    rects.sort_by_key(|r| r.4);
    for &(r0, c0, rh, rw, d) in &rects {
        for r in r0..r0 + rh {
            disp[r * w + c0..r * w + c0 + rw].fill(d);
        }
    }

    let noise = |rng: &mut ChaCha8Rng| rng.gen_range(0..=255u32) as f64 / 255.0;
    let left_data: Vec<f64> = (0..h * w).map(|_| noise(&mut rng)).collect();
    let mut right_data: Vec<f64> = (0..h * w).map(|_| noise(&mut rng)).collect();

    // z-buffer over right pixels: owning left column per right pixel
    let target = |c: usize, d: usize| -> Option<usize> {
        let t = c as isize + sign.offset(d);
        (t >= 0 && (t as usize) < w).then_some(t as usize)
    };
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    for r in 0..h {
        for c in 0..w {
            let d = disp[r * w + c];
            if let Some(t) = target(c, d) {
                let slot = &mut owner[r * w + t];
                match *slot {
                    Some(oc) if disp[r * w + oc] >= d => {}
                    _ => *slot = Some(c),
                }
            }
        }
    }
    let mut gt_noc = vec![f64::INFINITY; h * w];
    let mut gt_all = vec![f64::INFINITY; h * w];
    for r in 0..h {
        for t in 0..w {
            if let Some(c) = owner[r * w + t] {
                right_data[r * w + t] = left_data[r * w + c];
            }
        }
        for c in 0..w {
            let d = disp[r * w + c];
            if let Some(t) = target(c, d) {
                gt_all[r * w + c] = d as f64;
                if owner[r * w + t] == Some(c) {
                    gt_noc[r * w + c] = d as f64;
                }
            }
        }
    }

    let left = Image::from_vec(h, w, 1, left_data)?;
    let right = Image::from_vec(h, w, 1, right_data)?;
    let gt = GroundTruth::from_disparity(h, w, gt_noc)?;
    let mut sample = StereoSample::new(left, right, Some(gt), labels)?;
    sample.gt_all = Some(GroundTruth::from_disparity(h, w, gt_all)?);
    Ok(sample)
}
