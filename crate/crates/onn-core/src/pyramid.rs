//! Zoom-level geometry: the exponential level schedule, focal-point crop
//! placement with boundary clamping, and reverse-cascade pyramid construction.
//!
//! A pyramid turns one `C`×`C` base image into `L` views of size `c`×`c`.
//! Level `l` lives at resolution `r = round(c·z^(l−1))`; level 1 is the whole
//! image shrunk to `c`, level `L` is a native-resolution crop of the base.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{crop, resize, Image};

/// Normalized position on the image; both coordinates in `[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalPoint {
    pub x: f64,
    pub y: f64,
}

impl FocalPoint {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(Error::invalid(format!(
                "focal point ({x}, {y}) outside [0,1] x [0,1]"
            )));
        }
        Ok(FocalPoint { x, y })
    }
}

/// The five focal positions used throughout the experiments: the center plus
/// the four quarter points.
pub fn default_focal_set() -> Vec<FocalPoint> {
    [(0.5, 0.5), (0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)]
        .into_iter()
        .map(|(x, y)| FocalPoint { x, y })
        .collect()
}

/// Pyramid hyperparameters. The zoom coefficient is validated against the
/// closure condition `round(c·z^(L−1)) == C` at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub base_size: usize,
    pub crop_size: usize,
    pub levels: usize,
    pub zoom: f64,
    pub focal_set: Vec<FocalPoint>,
}

impl PyramidConfig {
    pub fn new(
        base_size: usize,
        crop_size: usize,
        levels: usize,
        zoom: f64,
        focal_set: Vec<FocalPoint>,
    ) -> Result<Self> {
        if crop_size == 0 || crop_size >= base_size {
            return Err(Error::invalid(format!(
                "need 0 < crop size < base size, got c={crop_size}, C={base_size}"
            )));
        }
        if levels < 2 {
            return Err(Error::invalid(format!("need at least 2 levels, got {levels}")));
        }
        if !(zoom > 1.0) {
            return Err(Error::invalid(format!("zoom must exceed 1, got {zoom}")));
        }
        if focal_set.is_empty() {
            return Err(Error::invalid("focal set must be non-empty".to_string()));
        }
        for f in &focal_set {
            FocalPoint::new(f.x, f.y)?;
        }
        let top = level_resolution(crop_size, zoom, levels);
        if top != base_size {
            return Err(Error::invalid(format!(
                "zoom {zoom} is not calibrated: round(c·z^(L−1)) = {top}, expected C = {base_size}"
            )));
        }
        Ok(PyramidConfig {
            base_size,
            crop_size,
            levels,
            zoom,
            focal_set,
        })
    }

    /// Construct with `z = (C/c)^(1/(L−1))`.
    pub fn calibrated(
        base_size: usize,
        crop_size: usize,
        levels: usize,
        focal_set: Vec<FocalPoint>,
    ) -> Result<Self> {
        let zoom = calibrate_zoom(base_size, crop_size, levels)?;
        PyramidConfig::new(base_size, crop_size, levels, zoom, focal_set)
    }

    /// Level resolutions for `l = 1..=L`.
    pub fn resolutions(&self) -> Vec<usize> {
        (1..=self.levels)
            .map(|l| level_resolution(self.crop_size, self.zoom, l))
            .collect()
    }
}

/// The zoom coefficient that makes level `L` land exactly on the base image:
/// `z = (C/c)^(1/(L−1))`.
pub fn calibrate_zoom(base_size: usize, crop_size: usize, levels: usize) -> Result<f64> {
    if crop_size < 1 || base_size <= crop_size {
        return Err(Error::invalid(format!(
            "need C > c >= 1, got C={base_size}, c={crop_size}"
        )));
    }
    if levels < 2 {
        return Err(Error::invalid(format!("need L >= 2, got {levels}")));
    }
    Ok((base_size as f64 / crop_size as f64).powf(1.0 / (levels - 1) as f64))
}

/// `r = round(c·z^(l−1))`, rounding half away from zero.
pub fn level_resolution(crop_size: usize, zoom: f64, level: usize) -> usize {
    assert!(level >= 1, "levels are 1-based");
    (crop_size as f64 * zoom.powi(level as i32 - 1)).round() as usize
}

/// Top-left corner of the `c`×`c` extraction centered on the focal point in
/// an `r`×`r` image, shifted back in bounds when the centered box overflows.
pub fn extraction_origin(focal: FocalPoint, resolution: usize, crop_size: usize) -> Result<(usize, usize)> {
    if resolution < crop_size {
        return Err(Error::invalid(format!(
            "extraction needs r >= c, got r={resolution}, c={crop_size}"
        )));
    }
    let max = (resolution - crop_size) as i64;
    let half = (crop_size / 2) as i64;
    let place = |coord: f64| -> usize {
        let centered = (coord * resolution as f64).round() as i64 - half;
        centered.clamp(0, max) as usize
    };
    Ok((place(focal.x), place(focal.y)))
}

/// One extracted view with its provenance.
#[derive(Debug, Clone)]
pub struct LevelView {
    /// 1-based level number.
    pub level: usize,
    /// Resolution of the resampled image this view was cropped from.
    pub resolution: usize,
    /// Crop origin within that image.
    pub origin: (usize, usize),
    pub view: Image,
}

/// All `L` views of one focal point, ordered `l = 1..=L`.
#[derive(Debug, Clone)]
pub struct FocalPyramid {
    pub focal: FocalPoint,
    pub views: Vec<LevelView>,
}

thread_local! {
    static BUILD_COUNT: Cell<u64> = const { Cell::new(0) };
}

/// Number of pyramid constructions performed by the current thread.
/// Pyramids are always assembled on the calling thread, so this makes
/// "stage X performs no pyramid builds" directly observable in tests.
pub fn build_count() -> u64 {
    BUILD_COUNT.with(|c| c.get())
}

/// Resample the base through every level, top-down: level `L` is the base
/// itself, and each lower level is produced from the level above it.
/// Returns images ordered `l = 1..=L`; reusable across focal points.
pub fn cache_resized_levels(base: &Image, cfg: &PyramidConfig) -> Result<Vec<Image>> {
    if base.width() != cfg.base_size || base.height() != cfg.base_size {
        return Err(Error::Image(format!(
            "base image is {}x{}, config expects {}x{}",
            base.width(),
            base.height(),
            cfg.base_size,
            cfg.base_size
        )));
    }
    let mut levels = vec![base.clone()];
    for l in (1..cfg.levels).rev() {
        let r = level_resolution(cfg.crop_size, cfg.zoom, l);
        let next = resize(levels.last().unwrap(), r, r)?;
        levels.push(next);
    }
    levels.reverse();
    Ok(levels)
}

/// Crop the focal point's view out of every cached level.
pub fn pyramid_from_cache(
    levels: &[Image],
    focal: FocalPoint,
    cfg: &PyramidConfig,
) -> Result<FocalPyramid> {
    if levels.len() != cfg.levels {
        return Err(Error::invalid(format!(
            "level cache holds {} images, config expects {}",
            levels.len(),
            cfg.levels
        )));
    }
    let c = cfg.crop_size;
    let mut views = Vec::with_capacity(cfg.levels);
    for (i, img) in levels.iter().enumerate() {
        let level = i + 1;
        let r = level_resolution(c, cfg.zoom, level);
        if img.width() != r || img.height() != r {
            return Err(Error::Image(format!(
                "cached level {level} is {}x{}, expected {r}x{r}",
                img.width(),
                img.height()
            )));
        }
        let origin = extraction_origin(focal, r, c)?;
        let view = crop(img, origin.0, origin.1, c, c)?;
        views.push(LevelView {
            level,
            resolution: r,
            origin,
            view,
        });
    }
    BUILD_COUNT.with(|count| count.set(count.get() + 1));
    Ok(FocalPyramid { focal, views })
}

/// Build the full pyramid for one focal point from the base image.
pub fn build_pyramid(base: &Image, focal: FocalPoint, cfg: &PyramidConfig) -> Result<FocalPyramid> {
    let levels = cache_resized_levels(base, cfg)?;
    pyramid_from_cache(&levels, focal, cfg)
}
