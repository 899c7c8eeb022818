//! Image representation, antialiased resampling, and file I/O.
//!
//! Pixels are `f32` in `[0,1]`, row-major and channel-interleaved.
//! Downscaling is area averaging (box filter over each destination pixel's
//! source footprint), upscaling is bilinear; the two are chosen per axis, so
//! aspect ratio is never preserved — a 100x50 source stretches to fill any
//! requested target.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Image(format!("zero dimension: {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Image(format!("channels must be 1 or 3, got {channels}")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::Image(format!(
                "pixel buffer holds {} values, expected {}",
                pixels.len(),
                width * height * channels
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Image("pixel value outside [0,1]".to_string()));
        }
        Ok(Image {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Result<Self> {
        Image::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, ch: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + ch]
    }

    /// Planar channel-major copy (CHW), the layout the CNN ingests.
    pub fn to_chw(&self) -> Vec<f32> {
        let mut out = vec![0.0f32; self.pixels.len()];
        let plane = self.width * self.height;
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out[c * plane + y * self.width + x] = self.get(x, y, c);
                }
            }
        }
        out
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// One-axis resample plan: either a box average or a bilinear lerp per
/// destination index.
enum AxisPlan {
    Identity,
    /// Per destination index: (first source index, weights).
    Box(Vec<(usize, Vec<f64>)>),
    /// Per destination index: (i0, i1, fraction toward i1).
    Bilinear(Vec<(usize, usize, f64)>),
}

fn plan_axis(src: usize, dst: usize) -> AxisPlan {
    if src == dst {
        return AxisPlan::Identity;
    }
    if dst < src {
        // Area averaging: destination pixel j covers [j*scale, (j+1)*scale).
        let scale = src as f64 / dst as f64;
        let mut plan = Vec::with_capacity(dst);
        for j in 0..dst {
            let lo = j as f64 * scale;
            let hi = (j as f64 + 1.0) * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            let mut weights = Vec::with_capacity(last - first);
            for i in first..last {
                let overlap = hi.min((i + 1) as f64) - lo.max(i as f64);
                weights.push(overlap.max(0.0) / scale);
            }
            plan.push((first, weights));
        }
        AxisPlan::Box(plan)
    } else {
        // Bilinear: sample centers map through (j+0.5)*scale - 0.5.
        let scale = src as f64 / dst as f64;
        let mut plan = Vec::with_capacity(dst);
        for j in 0..dst {
            let x = (j as f64 + 0.5) * scale - 0.5;
            let clamped = x.max(0.0).min((src - 1) as f64);
            let i0 = clamped.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            plan.push((i0, i1, clamped - i0 as f64));
        }
        AxisPlan::Bilinear(plan)
    }
}

/// Resample the horizontal axis of an interleaved buffer.
fn resample_rows(
    src: &[f32],
    src_w: usize,
    rows: usize,
    channels: usize,
    plan: &AxisPlan,
    dst_w: usize,
) -> Vec<f32> {
    match plan {
        AxisPlan::Identity => src.to_vec(),
        AxisPlan::Box(cells) => {
            let mut out = vec![0.0f32; rows * dst_w * channels];
            for r in 0..rows {
                let row = &src[r * src_w * channels..(r + 1) * src_w * channels];
                let orow = &mut out[r * dst_w * channels..(r + 1) * dst_w * channels];
                for (j, (first, weights)) in cells.iter().enumerate() {
                    for c in 0..channels {
                        let mut acc = 0.0f64;
                        for (k, &w) in weights.iter().enumerate() {
                            acc += w * row[(first + k) * channels + c] as f64;
                        }
                        orow[j * channels + c] = acc as f32;
                    }
                }
            }
            out
        }
        AxisPlan::Bilinear(cells) => {
            let mut out = vec![0.0f32; rows * dst_w * channels];
            for r in 0..rows {
                let row = &src[r * src_w * channels..(r + 1) * src_w * channels];
                let orow = &mut out[r * dst_w * channels..(r + 1) * dst_w * channels];
                for (j, &(i0, i1, f)) in cells.iter().enumerate() {
                    for c in 0..channels {
                        let a = row[i0 * channels + c] as f64;
                        let b = row[i1 * channels + c] as f64;
                        orow[j * channels + c] = (a + f * (b - a)) as f32;
                    }
                }
            }
            out
        }
    }
}

/// Transpose an interleaved buffer (swap x and y).
fn transpose_interleaved(src: &[f32], w: usize, h: usize, channels: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                out[(x * h + y) * channels + c] = src[(y * w + x) * channels + c];
            }
        }
    }
    out
}

/// Resize to exactly `target_w` × `target_h` (aspect ratio is not preserved).
pub fn resize(img: &Image, target_w: usize, target_h: usize) -> Result<Image> {
    if target_w == 0 || target_h == 0 {
        return Err(Error::Image(format!(
            "resize target has zero dimension: {target_w}x{target_h}"
        )));
    }
    if target_w == img.width && target_h == img.height {
        return Ok(img.clone());
    }
    // Horizontal pass, then vertical pass via transpose.
    let x_plan = plan_axis(img.width, target_w);
    let horiz = resample_rows(
        &img.pixels,
        img.width,
        img.height,
        img.channels,
        &x_plan,
        target_w,
    );
    let y_plan = plan_axis(img.height, target_h);
    let transposed = transpose_interleaved(&horiz, target_w, img.height, img.channels);
    let vert = resample_rows(
        &transposed,
        img.height,
        target_w,
        img.channels,
        &y_plan,
        target_h,
    );
    let mut pixels = transpose_interleaved(&vert, target_h, target_w, img.channels);
    for v in &mut pixels {
        *v = v.clamp(0.0, 1.0);
    }
    Image::new(target_w, target_h, img.channels, pixels)
}

/// Exact pixel copy of the rectangle at `(x0, y0)` with size `w` × `h`.
/// The rectangle must lie fully inside the image; no clamping here.
pub fn crop(img: &Image, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
    if w == 0 || h == 0 {
        return Err(Error::Image(format!("crop has zero dimension: {w}x{h}")));
    }
    if x0 + w > img.width || y0 + h > img.height {
        return Err(Error::Image(format!(
            "crop ({x0},{y0}) {w}x{h} exceeds image {}x{}",
            img.width, img.height
        )));
    }
    let ch = img.channels;
    let mut pixels = Vec::with_capacity(w * h * ch);
    for y in y0..y0 + h {
        let start = (y * img.width + x0) * ch;
        pixels.extend_from_slice(&img.pixels[start..start + w * ch]);
    }
    Image::new(w, h, ch, pixels)
}

// ---------------------------------------------------------------------------
// File I/O: PPM (P6) / PGM (P5) and PNG
// ---------------------------------------------------------------------------

fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 255.0
}

fn unit_to_byte(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn parse_netpbm(path: &Path, bytes: &[u8]) -> Result<Image> {
    let bad = |msg: &str| Error::format(path, msg);
    if bytes.len() < 2 {
        return Err(bad("file too short for a netpbm header"));
    }
    let magic = &bytes[..2];
    let channels = match magic {
        b"P6" => 3,
        b"P5" => 1,
        _ => return Err(bad("expected P6 or P5 magic")),
    };
    // Header: magic, width, height, maxval — whitespace separated, with
    // optional '#' comments; a single whitespace byte then binary data.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| bad("non-utf8 header"))?
            .parse()
            .map_err(|_| bad("bad header number"))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing separator before pixel data"));
    }
    pos += 1;
    let expected = w * h * channels;
    let data = &bytes[pos..];
    if data.len() < expected {
        return Err(bad("truncated pixel data"));
    }
    let pixels = data[..expected].iter().map(|&b| byte_to_unit(b)).collect();
    Image::new(w, h, channels, pixels)
}

fn write_netpbm(img: &Image) -> Vec<u8> {
    let magic: &[u8] = if img.channels == 3 { b"P6" } else { b"P5" };
    let mut out = Vec::with_capacity(img.pixels.len() + 32);
    out.extend_from_slice(magic);
    out.extend_from_slice(format!("\n{} {}\n255\n", img.width, img.height).as_bytes());
    out.extend(img.pixels.iter().map(|&v| unit_to_byte(v)));
    out
}

fn load_png(path: &Path) -> Result<Image> {
    let decoded = image::open(path).map_err(|e| Error::io(path, e))?;
    match decoded {
        image::DynamicImage::ImageLuma8(gray) => {
            let (w, h) = (gray.width() as usize, gray.height() as usize);
            let pixels = gray.into_raw().iter().map(|&b| byte_to_unit(b)).collect();
            Image::new(w, h, 1, pixels)
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let pixels = rgb.into_raw().iter().map(|&b| byte_to_unit(b)).collect();
            Image::new(w, h, 3, pixels)
        }
    }
}

fn save_png(img: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.pixels.iter().map(|&v| unit_to_byte(v)).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let result = if img.channels == 1 {
        image::GrayImage::from_raw(w, h, bytes)
            .expect("buffer sized from image")
            .save_with_format(path, image::ImageFormat::Png)
    } else {
        image::RgbImage::from_raw(w, h, bytes)
            .expect("buffer sized from image")
            .save_with_format(path, image::ImageFormat::Png)
    };
    result.map_err(|e| Error::io(path, e))
}

/// Load a PNG, PPM (P6), or PGM (P5) image; the extension selects the codec.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    match extension_of(path)?.as_str() {
        "png" => load_png(path),
        "ppm" | "pgm" => {
            let mut bytes = Vec::new();
            fs::File::open(path)
                .map_err(|e| Error::io(path, e))?
                .read_to_end(&mut bytes)
                .map_err(|e| Error::io(path, e))?;
            parse_netpbm(path, &bytes)
        }
        other => Err(Error::io(path, format!("unsupported extension .{other}"))),
    }
}

/// Save as PNG, PPM (3-channel), or PGM (1-channel) based on the extension.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match extension_of(path)?.as_str() {
        "png" => save_png(img, path),
        "ppm" => {
            if img.channels != 3 {
                return Err(Error::Image(
                    "PPM P6 stores 3 channels; use .pgm for grayscale".to_string(),
                ));
            }
            fs::write(path, write_netpbm(img)).map_err(|e| Error::io(path, e))
        }
        "pgm" => {
            if img.channels != 1 {
                return Err(Error::Image(
                    "PGM P5 stores 1 channel; use .ppm for color".to_string(),
                ));
            }
            fs::write(path, write_netpbm(img)).map_err(|e| Error::io(path, e))
        }
        other => Err(Error::io(path, format!("unsupported extension .{other}"))),
    }
}

fn extension_of(path: &Path) -> Result<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .ok_or_else(|| Error::io(path, "missing file extension"))
}
