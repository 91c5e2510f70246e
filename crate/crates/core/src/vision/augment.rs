//! Random sub-volume views for the self-supervised vision tasks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::preprocess::resize_axis;
use super::volume::Volume;
use crate::error::{Result, VelvetError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Edge of the random cubic crop.
    pub crop: usize,
    /// Edge the crop is zoomed back to.
    pub out_side: usize,
    pub shift_prob: f64,
    pub shift_max: f32,
    pub scale_prob: f64,
    pub scale_range: (f32, f32),
    pub flip_prob: f64,
}

impl AugmentConfig {
    /// Crop two thirds of the edge (64 of 96), zoom back to full size.
    pub fn for_side(side: usize) -> Self {
        Self {
            crop: (2 * side / 3).max(1),
            out_side: side,
            shift_prob: 0.5,
            shift_max: 0.1,
            scale_prob: 0.5,
            scale_range: (0.9, 1.1),
            flip_prob: 0.5,
        }
    }

    pub fn identity(side: usize) -> Self {
        Self {
            crop: side,
            out_side: side,
            shift_prob: 0.0,
            shift_max: 0.0,
            scale_prob: 0.0,
            scale_range: (1.0, 1.0),
            flip_prob: 0.0,
        }
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::for_side(96)
    }
}

fn crop(vol: &Volume, origin: [usize; 3], size: usize) -> Volume {
    let mut out = Volume::zeros([size; 3]);
    for z in 0..size {
        for y in 0..size {
            let src = vol.idx(origin[0] + z, origin[1] + y, origin[2]);
            let dst = out.idx(z, y, 0);
            out.data[dst..dst + size].copy_from_slice(&vol.data[src..src + size]);
        }
    }
    out
}

pub fn flip_axis(vol: &Volume, axis: usize) -> Volume {
    let [d0, d1, d2] = vol.dims;
    let mut out = Volume::zeros(vol.dims);
    for z in 0..d0 {
        for y in 0..d1 {
            for x in 0..d2 {
                let mut s = [z, y, x];
                s[axis] = vol.dims[axis] - 1 - s[axis];
                let i = out.idx(z, y, x);
                out.data[i] = vol.at(s[0], s[1], s[2]);
            }
        }
    }
    out
}

/// Random crop, trilinear zoom, intensity shift/scale and per-axis flips,
/// in that order. The draw sequence is fixed so a seeded RNG reproduces the
/// output bit for bit.
pub fn extract_subvolume<R: Rng + ?Sized>(
    vol: &Volume,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Volume> {
    let side = *vol.dims.iter().min().unwrap();
    if cfg.crop > side || cfg.crop == 0 {
        return Err(VelvetError::CropLargerThanVolume { crop: cfg.crop, side });
    }
    let mut origin = [0usize; 3];
    for (a, o) in origin.iter_mut().enumerate() {
        *o = rng.gen_range(0..=vol.dims[a] - cfg.crop);
    }
    let shift = rng.gen_bool(cfg.shift_prob.clamp(0.0, 1.0));
    let shift_v = rng.gen::<f32>() * 2.0 * cfg.shift_max - cfg.shift_max;
    let scale = rng.gen_bool(cfg.scale_prob.clamp(0.0, 1.0));
    let (lo, hi) = cfg.scale_range;
    let scale_v = lo + rng.gen::<f32>() * (hi - lo);
    let flips: [bool; 3] = std::array::from_fn(|_| rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0)));

    let mut out = crop(vol, origin, cfg.crop);
    for axis in 0..3 {
        out = resize_axis(&out, axis, cfg.out_side);
    }
    if shift || scale {
        for v in out.data.iter_mut() {
            if shift {
                *v += shift_v;
            }
            if scale {
                *v *= scale_v;
            }
        }
    }
    for (axis, &f) in flips.iter().enumerate() {
        if f {
            out = flip_axis(&out, axis);
        }
    }
    Ok(out)
}
