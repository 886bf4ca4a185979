//! Dense 2-D deformation fields.
//!
//! A field stores one displacement vector per pixel in normalized units:
//! a displacement component of ±1 moves the sample position by half the
//! image extent along that axis. The zero field is the identity warp.
//!
//! Fields produced at several resolutions compose additively: each level is
//! upsampled to the final resolution and summed. Upsampling by a power of
//! two is performed as a chain of cell-centered bilinear doublings so that
//! running (upsample, add) level by level matches summing the individually
//! upsampled levels exactly, up to float associativity.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array3, ArrayView3};

use crate::autodiff::{bilinear_sample, BilinearTap};
use crate::error::{Error, Result};

/// Per-pixel displacement grid, shape `[H, W, 2]` with components `(dx, dy)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    data: Array3<f64>,
}

impl DeformationField {
    /// Wrap an `[H, W, 2]` displacement grid. Rejects non-finite entries.
    pub fn from_array(data: Array3<f64>) -> Result<Self> {
        let s = data.shape();
        if s[0] == 0 || s[1] == 0 {
            return Err(Error::Dimension("field dimensions must be positive".into()));
        }
        if s[2] != 2 {
            return Err(Error::Shape(format!("field last axis must be 2, got {}", s[2])));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("field contains non-finite displacements".into()));
        }
        Ok(DeformationField { data })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn data(&self) -> ArrayView3<'_, f64> {
        self.data.view()
    }

    pub fn into_array(self) -> Array3<f64> {
        self.data
    }

    /// Displacement at a pixel, `(dx, dy)` in normalized units.
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        (self.data[[y, x, 0]], self.data[[y, x, 1]])
    }

    /// Pixel-unit displacement at a pixel: `(dx·W/2, dy·H/2)`.
    pub fn at_pixels(&self, y: usize, x: usize) -> (f64, f64) {
        let (dx, dy) = self.at(y, x);
        (dx * self.width() as f64 / 2.0, dy * self.height() as f64 / 2.0)
    }
}

/// All-zero displacements: the identity warp.
pub fn identity_field(height: usize, width: usize) -> Result<DeformationField> {
    if height == 0 || width == 0 {
        return Err(Error::Dimension(format!(
            "identity_field dimensions must be >= 1, got {height}x{width}"
        )));
    }
    Ok(DeformationField { data: Array3::zeros((height, width, 2)) })
}

/// Bilinear upsampling of each displacement component. Normalized units mean
/// no magnitude rescale. When the target is the source scaled by a power of
/// two on both axes, the resize runs as a chain of 2x doublings (see the
/// module docs); otherwise a single general bilinear resize is used.
pub fn upsample_field(
    field: &DeformationField,
    target_h: usize,
    target_w: usize,
) -> Result<DeformationField> {
    let (h, w) = (field.height(), field.width());
    if target_h < h || target_w < w {
        return Err(Error::Dimension(format!(
            "upsample_field cannot downsample: {h}x{w} -> {target_h}x{target_w}"
        )));
    }
    if target_h == h && target_w == w {
        return Ok(field.clone());
    }
    let mut planes = split_components(field);
    let (mut ch, mut cw) = (h, w);
    if is_pow2_multiple(h, target_h) && is_pow2_multiple(w, target_w) && target_h / h == target_w / w
    {
        while ch < target_h {
            for p in planes.iter_mut() {
                *p = crate::autodiff::resize_plane(p, ch, cw, ch * 2, cw * 2);
            }
            ch *= 2;
            cw *= 2;
        }
    } else {
        for p in planes.iter_mut() {
            *p = crate::autodiff::resize_plane(p, ch, cw, target_h, target_w);
        }
    }
    Ok(join_components(planes, target_h, target_w))
}

fn is_pow2_multiple(from: usize, to: usize) -> bool {
    to >= from && to % from == 0 && (to / from).is_power_of_two()
}

fn split_components(field: &DeformationField) -> [Vec<f64>; 2] {
    let (h, w) = (field.height(), field.width());
    let mut dx = vec![0.0; h * w];
    let mut dy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            dx[y * w + x] = field.data[[y, x, 0]];
            dy[y * w + x] = field.data[[y, x, 1]];
        }
    }
    [dx, dy]
}

fn join_components(planes: [Vec<f64>; 2], h: usize, w: usize) -> DeformationField {
    let mut data = Array3::zeros((h, w, 2));
    for y in 0..h {
        for x in 0..w {
            data[[y, x, 0]] = planes[0][y * w + x];
            data[[y, x, 1]] = planes[1][y * w + x];
        }
    }
    DeformationField { data }
}

/// Sum a coarse-to-fine pyramid into one field at the finest resolution.
///
/// Levels must double in resolution (4x4, 8x8, ... RxR). Composition runs as
/// the generator does: upsample the running sum by 2x and add the next level.
pub fn compose_pyramid(levels: &[DeformationField]) -> Result<DeformationField> {
    let first = levels
        .first()
        .ok_or_else(|| Error::Argument("compose_pyramid needs at least one level".into()))?;
    for lv in levels {
        if lv.height() != lv.width() {
            return Err(Error::Shape(format!(
                "pyramid levels must be square, got {}x{}",
                lv.height(),
                lv.width()
            )));
        }
    }
    let mut running = first.clone();
    for lv in &levels[1..] {
        if lv.height() != running.height() * 2 {
            return Err(Error::Shape(format!(
                "pyramid resolutions must double: {} then {}",
                running.height(),
                lv.height()
            )));
        }
        let up = upsample_field(&running, lv.height(), lv.width())?;
        let data = &up.data + &lv.data;
        running = DeformationField { data };
    }
    Ok(running)
}

/// Mean squared forward difference of the displacement grid.
///
/// Every interior pair of horizontally or vertically adjacent pixels
/// contributes the squared norm of the displacement difference (both
/// components); the sum is divided by the number of pairs,
/// `H·(W−1) + (H−1)·W`. Zero iff the field is constant, and invariant to
/// adding a constant displacement everywhere.
pub fn smoothness_loss(field: &DeformationField) -> f64 {
    let (h, w) = (field.height(), field.width());
    let d = &field.data;
    let mut acc = 0.0;
    for y in 0..h {
        for x in 0..w.saturating_sub(1) {
            for c in 0..2 {
                let diff = d[[y, x + 1, c]] - d[[y, x, c]];
                acc += diff * diff;
            }
        }
    }
    for y in 0..h.saturating_sub(1) {
        for x in 0..w {
            for c in 0..2 {
                let diff = d[[y + 1, x, c]] - d[[y, x, c]];
                acc += diff * diff;
            }
        }
    }
    let pairs = h * (w - 1) + (h - 1) * w;
    if pairs == 0 {
        return 0.0;
    }
    acc / pairs as f64
}

/// Analytic gradient of [`smoothness_loss`] w.r.t. every displacement entry.
pub fn smoothness_loss_grad(field: &DeformationField) -> Array3<f64> {
    let (h, w) = (field.height(), field.width());
    let d = &field.data;
    let mut g = Array3::<f64>::zeros((h, w, 2));
    let pairs = h * (w - 1) + (h - 1) * w;
    if pairs == 0 {
        return g;
    }
    let scale = 2.0 / pairs as f64;
    for y in 0..h {
        for x in 0..w.saturating_sub(1) {
            for c in 0..2 {
                let diff = d[[y, x + 1, c]] - d[[y, x, c]];
                g[[y, x + 1, c]] += scale * diff;
                g[[y, x, c]] -= scale * diff;
            }
        }
    }
    for y in 0..h.saturating_sub(1) {
        for x in 0..w {
            for c in 0..2 {
                let diff = d[[y + 1, x, c]] - d[[y, x, c]];
                g[[y + 1, x, c]] += scale * diff;
                g[[y, x, c]] -= scale * diff;
            }
        }
    }
    g
}

/// Summary statistics used in reports: mean and max displacement magnitude
/// (normalized units) and the smoothness energy.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FieldStatistics {
    pub mean_displacement: f64,
    pub max_displacement: f64,
    pub smoothness_energy: f64,
}

pub fn field_statistics(field: &DeformationField) -> FieldStatistics {
    let (h, w) = (field.height(), field.width());
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = field.at(y, x);
            let m = (dx * dx + dy * dy).sqrt();
            sum += m;
            max = max.max(m);
        }
    }
    FieldStatistics {
        mean_displacement: sum / (h * w) as f64,
        max_displacement: max,
        smoothness_energy: smoothness_loss(field),
    }
}

/// Sample the field's displacement at a continuous position (pixel units in,
/// normalized displacement out). Used by warp visualizations and tests.
pub fn sample_displacement(field: &DeformationField, px: f64, py: f64) -> (f64, f64) {
    let [dx, dy] = split_components(field);
    let (h, w) = (field.height(), field.width());
    (bilinear_sample(&dx, h, w, px, py), bilinear_sample(&dy, h, w, px, py))
}

const DFIELD_MAGIC: usize = 8; // H, W as little-endian u32s

/// Write the field as `.dfield`: an 8-byte header (H then W as 32-bit
/// little-endian integers) followed by row-major `(dx, dy)` pairs as
/// little-endian f32.
pub fn save_dfield(field: &DeformationField, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(DFIELD_MAGIC + field.data.len() * 4);
    buf.extend_from_slice(&(field.height() as u32).to_le_bytes());
    buf.extend_from_slice(&(field.width() as u32).to_le_bytes());
    for v in field.data.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read a `.dfield` file written by [`save_dfield`].
pub fn load_dfield(path: &Path) -> Result<DeformationField> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < DFIELD_MAGIC {
        return Err(Error::Format(format!("{}: truncated .dfield header", path.display())));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = DFIELD_MAGIC + h * w * 2 * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: expected {} bytes for a {}x{} field, found {}",
            path.display(),
            expected,
            h,
            w,
            bytes.len()
        )));
    }
    let mut data = Array3::zeros((h, w, 2));
    let mut off = DFIELD_MAGIC;
    for y in 0..h {
        for x in 0..w {
            for c in 0..2 {
                let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
                data[[y, x, c]] = v as f64;
                off += 4;
            }
        }
    }
    DeformationField::from_array(data)
}

/// Tap into the shared bilinear kernel for a field position; exposed for the
/// warp module.
pub(crate) fn field_tap(h: usize, w: usize, px: f64, py: f64) -> BilinearTap<f64> {
    BilinearTap::at(h, w, px, py)
}
