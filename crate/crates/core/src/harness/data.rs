//! Paired scan/report samples: synthetic generation and on-disk datasets.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VelvetError};
use crate::report_prep::{
    prepare_report, read_reports_jsonl, segment_report, write_reports_jsonl, RawReport, TextCaps,
    TokenizedReport, Vocabulary,
};
use crate::vision::preprocess::{filter_record, resample_to_volume, FilterDecision, PrepConfig, RejectReason};
use crate::vision::{list_volume_dirs, read_volume_dir, write_volume_dir, Volume};

/// One prepared scan/report pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub volume: Volume,
    pub report: TokenizedReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Ellipsoid,
    Box,
    Tube,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    /// 0 small, 1 medium, 2 large.
    pub size: usize,
    /// 0 faint, 1 moderate, 2 bright.
    pub brightness: usize,
    /// 0 upper, 1 middle, 2 lower (y axis).
    pub vertical: usize,
    /// 0 left, 1 central, 2 right (x axis).
    pub horizontal: usize,
    /// Centre in voxels, `[z, y, x]`.
    pub center: [f64; 3],
    /// Half extent in voxels.
    pub radius: f64,
}

const SIZES: [&str; 3] = ["small", "medium", "large"];
const BRIGHTNESS: [&str; 3] = ["faint", "moderate", "bright"];
const VERTICAL: [&str; 3] = ["upper", "middle", "lower"];
const HORIZONTAL: [&str; 3] = ["left", "central", "right"];
const COUNTS: [&str; 4] = ["one", "two", "three", "four"];
const SIZE_FRAC: [f64; 3] = [0.07, 0.11, 0.15];
const INTENSITY: [f32; 3] = [0.35, 0.65, 1.0];

impl Primitive {
    pub fn sentence(&self) -> String {
        let shape = match self.shape {
            Shape::Ellipsoid => "ellipsoid",
            Shape::Box => "box",
            Shape::Tube => "tube",
        };
        format!(
            "There is a {} {} {} in the {} {} region.",
            SIZES[self.size], BRIGHTNESS[self.brightness], shape, VERTICAL[self.vertical], HORIZONTAL[self.horizontal]
        )
    }

    fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let [cz, cy, cx] = self.center;
        let (dz, dy, dx) = (z - cz, y - cy, x - cx);
        let r = self.radius;
        match self.shape {
            Shape::Ellipsoid => (dz / r).powi(2) + (dy / (0.8 * r)).powi(2) + (dx / (1.2 * r)).powi(2) <= 1.0,
            Shape::Box => dz.abs() <= r && dy.abs() <= r && dx.abs() <= r,
            Shape::Tube => dz.abs() <= 2.0 * r && dy * dy + dx * dx <= (0.5 * r).powi(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub id: String,
    pub volume: Volume,
    pub text: String,
    pub primitives: Vec<Primitive>,
}

fn draw_primitive<R: Rng>(rng: &mut R, side: usize) -> Primitive {
    let s = side as f64;
    let shape = [Shape::Ellipsoid, Shape::Box, Shape::Tube][rng.gen_range(0..3)];
    let (size, brightness) = (rng.gen_range(0..3), rng.gen_range(0..3));
    let (vertical, horizontal) = (rng.gen_range(0..3), rng.gen_range(0..3));
    let jitter = |rng: &mut R| rng.gen_range(-0.05..0.05) * s;
    let center = [
        rng.gen_range(0.35..0.65) * s,
        (0.2 + 0.3 * vertical as f64) * s + jitter(rng),
        (0.2 + 0.3 * horizontal as f64) * s + jitter(rng),
    ];
    Primitive { shape, size, brightness, vertical, horizontal, center, radius: (SIZE_FRAC[size] * s).max(1.0) }
}

fn render(prims: &[Primitive], side: usize, rng: &mut impl Rng) -> Volume {
    let mut vol = Volume::zeros([side; 3]);
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                let i = vol.idx(z, y, x);
                let (zf, yf, xf) = (z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5);
                let mut v = 0.02 * rng.gen::<f32>();
                for p in prims {
                    if p.contains(zf, yf, xf) {
                        v = v.max(INTENSITY[p.brightness]);
                    }
                }
                vol.data[i] = v;
            }
        }
    }
    vol
}

/// `n` volumes of `side³` with 1–4 primitives each and a templated report:
/// one sentence per primitive plus a closing count sentence. Reports are
/// distinct within a dataset.
pub fn synth_dataset(n: usize, seed: u64, side: usize) -> Result<Vec<SynthSample>> {
    if n < 2 {
        return Err(VelvetError::BatchTooSmall(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let k = rng.gen_range(1..=4);
        let prims: Vec<Primitive> = (0..k).map(|_| draw_primitive(&mut rng, side)).collect();
        let mut text: Vec<String> = prims.iter().map(Primitive::sentence).collect();
        text.push(format!("Total number of findings is {}.", COUNTS[k - 1]));
        let text = text.join(" ");
        if !seen.insert(text.clone()) {
            continue;
        }
        let volume = render(&prims, side, &mut rng);
        out.push(SynthSample { id: format!("synth_{:05}", out.len()), volume, text, primitives: prims });
    }
    Ok(out)
}

/// Layout: `dir/volumes/<id>/{meta.json,volume.raw}` and `dir/reports.jsonl`.
pub fn write_dataset(dir: &Path, items: &[(String, Volume, String)]) -> Result<()> {
    let vdir = dir.join("volumes");
    std::fs::create_dir_all(&vdir)?;
    let mut reports = Vec::with_capacity(items.len());
    for (id, vol, text) in items {
        write_volume_dir(&vdir.join(id), id, vol)?;
        reports.push(RawReport { id: id.clone(), text: text.clone() });
    }
    write_reports_jsonl(&dir.join("reports.jsonl"), &reports)
}

pub fn write_synth(dir: &Path, samples: &[SynthSample]) -> Result<()> {
    let items: Vec<_> = samples.iter().map(|s| (s.id.clone(), s.volume.clone(), s.text.clone())).collect();
    write_dataset(dir, &items)
}

/// Raw pairs in id order, matched by id; unpaired entries are skipped.
pub fn read_raw_pairs(dir: &Path) -> Result<Vec<(crate::vision::VolumeRecord, RawReport)>> {
    let mut reports: BTreeMap<String, RawReport> =
        read_reports_jsonl(&dir.join("reports.jsonl"))?.into_iter().map(|r| (r.id.clone(), r)).collect();
    let mut out = Vec::new();
    for d in list_volume_dirs(&dir.join("volumes"))? {
        let rec = read_volume_dir(&d)?;
        if let Some(r) = reports.remove(&rec.id) {
            out.push((rec, r));
        }
    }
    Ok(out)
}

/// Load a prepared dataset whose volumes are already `side³`.
pub fn load_samples(dir: &Path, vocab: &Vocabulary, caps: &TextCaps, side: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (rec, r) in read_raw_pairs(dir)? {
        if rec.slices.dims != [side; 3] {
            return Err(VelvetError::Data(format!(
                "{}: volume {:?} is not {side}³; run prep first",
                rec.id, rec.slices.dims
            )));
        }
        out.push(Sample { id: rec.id, volume: rec.slices, report: prepare_report(&r.text, vocab, caps)? });
    }
    if out.is_empty() {
        return Err(VelvetError::EmptyCorpus);
    }
    Ok(out)
}

pub fn samples_from_synth(synth: &[SynthSample], vocab: &Vocabulary, caps: &TextCaps) -> Result<Vec<Sample>> {
    synth
        .iter()
        .map(|s| {
            Ok(Sample { id: s.id.clone(), volume: s.volume.clone(), report: prepare_report(&s.text, vocab, caps)? })
        })
        .collect()
}

/// Outcome of [`prep_dataset`]: kept ids and `(id, reason code)` rejections.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrepSummary {
    pub accepted: Vec<String>,
    pub rejected: Vec<(String, String)>,
}

/// Filter raw pairs, resample kept scans to `side³` and write them with
/// their reports under `output`. Reports with no usable sentence are
/// rejected as `empty_report`.
pub fn prep_dataset(input: &Path, output: &Path, exclude: &HashSet<String>, cfg: &PrepConfig) -> Result<PrepSummary> {
    let mut summary = PrepSummary::default();
    let mut kept = Vec::new();
    for (rec, report) in read_raw_pairs(input)? {
        let decision = if exclude.contains(&rec.id) {
            FilterDecision::Reject { reason: RejectReason::Excluded }
        } else {
            filter_record(&rec, cfg)
        };
        if let FilterDecision::Reject { reason } = decision {
            summary.rejected.push((rec.id, reason.code().into()));
            continue;
        }
        if segment_report(&report.text).is_err() {
            summary.rejected.push((rec.id, "empty_report".into()));
            continue;
        }
        kept.push((rec.id.clone(), resample_to_volume(&rec, cfg)?, report.text));
        summary.accepted.push(rec.id);
    }
    write_dataset(output, &kept)?;
    Ok(summary)
}

/// Deterministic train/validation split.
pub fn split_validation(samples: Vec<Sample>, fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let n_val = (fraction * samples.len() as f64).round() as usize;
    if n_val == 0 {
        return (samples, Vec::new());
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0a11));
    let val: HashSet<usize> = idx[..n_val].iter().copied().collect();
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for (i, s) in samples.into_iter().enumerate() {
        if val.contains(&i) {
            valid.push(s);
        } else {
            train.push(s);
        }
    }
    (train, valid)
}
