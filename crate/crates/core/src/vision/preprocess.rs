//! Scan filtering and resampling to the encoder's cubic input.

use serde::{Deserialize, Serialize};

use super::volume::{Volume, VolumeRecord};
use crate::error::{Result, VelvetError};

pub const MIN_SLICES: usize = 48;
pub const DEFAULT_SIDE: usize = 96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepConfig {
    pub min_slices: usize,
    pub side: usize,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self { min_slices: MIN_SLICES, side: DEFAULT_SIDE }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterDecision {
    Accept,
    Reject { reason: RejectReason },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    TooFewSlices,
    EmptyFrame,
    Excluded,
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::TooFewSlices => "too_few_slices",
            RejectReason::EmptyFrame => "empty_frame",
            RejectReason::Excluded => "excluded",
        }
    }
}

impl FilterDecision {
    pub fn is_accept(&self) -> bool {
        matches!(self, FilterDecision::Accept)
    }
}

pub fn filter_record(rec: &VolumeRecord, cfg: &PrepConfig) -> FilterDecision {
    if rec.slices.dims[1] == 0 || rec.slices.dims[2] == 0 {
        return FilterDecision::Reject { reason: RejectReason::EmptyFrame };
    }
    if rec.num_slices() < cfg.min_slices {
        return FilterDecision::Reject { reason: RejectReason::TooFewSlices };
    }
    FilterDecision::Accept
}

/// `round(linspace(0, depth - 1, target))` as slice indices.
pub fn z_sample_indices(depth: usize, target: usize) -> Vec<usize> {
    if target == 1 {
        return vec![0];
    }
    let step = (depth - 1) as f64 / (target - 1) as f64;
    (0..target).map(|k| (k as f64 * step).round() as usize).collect()
}

/// Linear interpolation along one axis with aligned corners.
pub(crate) fn resize_axis(vol: &Volume, axis: usize, out_len: usize) -> Volume {
    let in_len = vol.dims[axis];
    if in_len == out_len {
        return vol.clone();
    }
    let mut dims = vol.dims;
    dims[axis] = out_len;
    let mut out = Volume::zeros(dims);
    // source position o * (in - 1) / (out - 1) kept as an exact fraction
    let den = (out_len - 1).max(1);
    for o in 0..out_len {
        let num = o * (in_len - 1);
        let lo = (num / den).min(in_len - 1);
        let hi = (lo + 1).min(in_len - 1);
        let t = ((num % den) as f64 / den as f64) as f32;
        for a in 0..dims[(axis + 1) % 3] {
            for b in 0..dims[(axis + 2) % 3] {
                let coord = |i: usize| -> [usize; 3] {
                    let mut c = [0; 3];
                    c[axis] = i;
                    c[(axis + 1) % 3] = a;
                    c[(axis + 2) % 3] = b;
                    c
                };
                let [z0, y0, x0] = coord(lo);
                let [z1, y1, x1] = coord(hi);
                let a = vol.at(z0, y0, x0);
                let v = a + (vol.at(z1, y1, x1) - a) * t;
                let [z, y, x] = coord(o);
                let i = out.idx(z, y, x);
                out.data[i] = v;
            }
        }
    }
    out
}

fn select_slices(vol: &Volume, idx: &[usize]) -> Volume {
    let plane = vol.dims[1] * vol.dims[2];
    let mut data = Vec::with_capacity(idx.len() * plane);
    for &z in idx {
        data.extend_from_slice(&vol.data[z * plane..(z + 1) * plane]);
    }
    Volume { dims: [idx.len(), vol.dims[1], vol.dims[2]], data }
}

/// Per-volume min-max scaling to `[0, 1]`; constant volumes become 0.
pub fn minmax_normalize(vol: &mut Volume) {
    let (lo, hi) = vol
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    for v in vol.data.iter_mut() {
        *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
    }
}

/// Depth handling only: sample when too deep, upsample by two then sample
/// when too shallow, keep when exact.
pub fn resample_depth(slices: &Volume, side: usize) -> Volume {
    let s = slices.dims[0];
    if s == side {
        return slices.clone();
    }
    if s > side {
        return select_slices(slices, &z_sample_indices(s, side));
    }
    let doubled = resize_axis(slices, 0, 2 * s);
    if 2 * s >= side {
        select_slices(&doubled, &z_sample_indices(2 * s, side))
    } else {
        resize_axis(&doubled, 0, side)
    }
}

pub fn resample_to_volume(rec: &VolumeRecord, cfg: &PrepConfig) -> Result<Volume> {
    if let FilterDecision::Reject { reason } = filter_record(rec, cfg) {
        return Err(VelvetError::RejectedRecord { id: rec.id.clone(), reason: reason.code().into() });
    }
    let z = resample_depth(&rec.slices, cfg.side);
    let mut out = resize_axis(&resize_axis(&z, 1, cfg.side), 2, cfg.side);
    minmax_normalize(&mut out);
    Ok(out)
}
