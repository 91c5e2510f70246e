use candle_core::{DType, Device, Tensor};
use rand::Rng;

use super::config::RunConfig;
use super::data::Sample;
use super::losses::{composite_loss, Components, LossBundle, LossFlags};
use crate::error::Result;
use crate::nn::{l2_normalize, to_f64_vec, Linear, ParamStore};
use crate::objectives::cm::{CmFlags, LocalPooling, ProjectionHeads};
use crate::objectives::mm::{build_match_batch, take_rows, MiningDirection, MultiModalEncoder};
use crate::objectives::uni::{
    loss_con, loss_inp, loss_mlm, loss_rot, make_inpainting, make_rotation, mask_tokens, mask_tensor,
    ContrastHead, MaskedTextBatch, MlmHead, ReconHead, RotationAxis, VisionSslHeads,
};
use crate::objectives::bce_with_logits;
use crate::report_prep::{TokenizedReport, Vocabulary};
use crate::tribert::{build_tri_batch, TriBatch, TriBert};
use crate::vision::{extract_subvolume, AugmentConfig, SwinEncoder3d, Volume};

/// Every trainable module. Parameter names are prefixed by owner:
/// `text.`, `vision.`, `cm.`, `lan.`, `mm.`, `vis.inp.`, `vis.rot.`, `vis.con.`.
pub struct VelvetModel {
    pub ps: ParamStore,
    pub text: TriBert,
    pub vision: SwinEncoder3d,
    pub cm: ProjectionHeads,
    pub lan: MlmHead,
    pub mm: MultiModalEncoder,
    pub vis: VisionSslHeads,
    pub vocab: Vocabulary,
}

/// Rotated, block-dropped sub-volume views for the vision tasks.
#[derive(Debug, Clone)]
pub struct ViewBatch {
    /// `[2N, side³]`: views 1 of every scan, then views 2.
    pub inputs: Tensor,
    pub targets: Tensor,
    pub drop_mask: Tensor,
    pub rot_labels: Vec<u32>,
}

/// All randomness of one step drawn up front, except negative mining.
#[derive(Debug, Clone)]
pub struct StepInputs {
    pub batch: TriBatch,
    /// `[N, side³]`
    pub volumes: Tensor,
    pub masked_uni: Option<MaskedTextBatch>,
    pub masked_mm: Option<MaskedTextBatch>,
    pub views: Option<ViewBatch>,
}

/// Task settings that shape the forward pass.
#[derive(Debug, Clone)]
pub struct TaskSettings {
    pub flags: LossFlags,
    pub weights: [f64; 9],
    pub pooling: LocalPooling,
    pub mining: MiningDirection,
    pub mask_ratio: f64,
    pub drop_ratio: f64,
    pub drop_block: usize,
    pub rotation_axis: RotationAxis,
    pub augment: AugmentConfig,
}

impl TaskSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            flags: cfg.flags(),
            weights: cfg.weights(),
            pooling: cfg.local_pooling,
            mining: cfg.mining,
            mask_ratio: cfg.mask_ratio,
            drop_ratio: cfg.drop_ratio,
            drop_block: cfg.drop_block,
            rotation_axis: cfg.rotation_axis,
            augment: cfg.augment(),
        }
    }
}

/// Forward results kept for inspection and gradient checks.
pub struct StepOutput {
    pub total: Tensor,
    pub bundle: LossBundle,
    pub components: Components,
    /// `(text index, vision index, label)` rows used by the matching loss.
    pub match_rows: Option<(Vec<usize>, Vec<usize>)>,
}

impl VelvetModel {
    pub fn new(cfg: &RunConfig, vocab: Vocabulary) -> Result<Self> {
        let mut ps = ParamStore::new(cfg.dtype()?, cfg.seed);
        let tcfg = cfg.text_config(vocab.len())?;
        let vcfg = cfg.vision_config()?;
        let text = TriBert::new(&mut ps, "text", tcfg)?;
        let vision = SwinEncoder3d::new(&mut ps, "vision", vcfg.clone())?;
        let c_t = tcfg.feature_dim;
        let cm = ProjectionHeads::new(&mut ps, "cm", vcfg.c_top(), vcfg.c_mid(), vcfg.c_bot(), c_t, cfg.shared_dim)?;
        let lan = MlmHead::new(&mut ps, "lan.mlm_head", c_t, vocab.len())?;
        let mm_cfg = cfg.mm_config(&tcfg);
        let mm = MultiModalEncoder::new(&mut ps, "mm", &mm_cfg, c_t, mm_cfg.memory.channels(&vcfg), vocab.len())?;
        let res_top = vcfg.stage_res(vcfg.num_stages() - 1);
        let vis = VisionSslHeads {
            inp: ReconHead::new(&mut ps, "vis.inp", vcfg.c_top(), res_top, vcfg.in_side)?,
            rot: Linear::new(&mut ps, "vis.rot.head", vcfg.c_top(), 4, true)?,
            con: ContrastHead::new(&mut ps, "vis.con", vcfg.c_top(), cfg.shared_dim)?,
        };
        Ok(Self { ps, text, vision, cm, lan, mm, vis, vocab })
    }

    pub fn dtype(&self) -> DType {
        self.ps.dtype()
    }

    pub fn device(&self) -> Device {
        self.ps.device().clone()
    }

    pub fn volume_tensor(&self, vols: &[&Volume]) -> Result<Tensor> {
        self.vision.batch_volumes(vols, self.dtype(), &self.device())
    }

    pub fn tri_batch(&self, reports: &[&TokenizedReport]) -> Result<TriBatch> {
        let owned: Vec<TokenizedReport> = reports.iter().map(|&r| r.clone()).collect();
        build_tri_batch(&owned, &self.vocab, &self.text.cfg)
    }

    /// Draw masks and sub-volume views for a batch. `rng_aug`, `rng_uni`
    /// and `rng_mm` are independent streams.
    pub fn prepare<R: Rng>(
        &self,
        samples: &[&Sample],
        tasks: &TaskSettings,
        rng_aug: &mut R,
        rng_uni: &mut R,
        rng_mm: &mut R,
    ) -> Result<StepInputs> {
        let reports: Vec<&TokenizedReport> = samples.iter().map(|s| &s.report).collect();
        let batch = self.tri_batch(&reports)?;
        let vols: Vec<&Volume> = samples.iter().map(|s| &s.volume).collect();
        let volumes = self.volume_tensor(&vols)?;
        let f = &tasks.flags;
        let masked_uni = f.get("lan_mlm").then(|| mask_tokens(&batch, &self.vocab, tasks.mask_ratio, rng_uni));
        let masked_mm = f.get("mm_mlm").then(|| mask_tokens(&batch, &self.vocab, tasks.mask_ratio, rng_mm));
        let views = if f.any_vis() { Some(self.make_views(&vols, tasks, rng_aug)?) } else { None };
        Ok(StepInputs { batch, volumes, masked_uni, masked_mm, views })
    }

    fn make_views<R: Rng>(&self, vols: &[&Volume], tasks: &TaskSettings, rng: &mut R) -> Result<ViewBatch> {
        let n = vols.len();
        let side = self.vision.cfg.in_side;
        let mut inputs = Vec::with_capacity(2 * n);
        let mut targets = Vec::with_capacity(2 * n);
        let mut drops = Vec::with_capacity(2 * n * side.pow(3));
        let mut labels = Vec::with_capacity(2 * n);
        let mut views = vec![Vec::new(), Vec::new()];
        for v in vols {
            for view in views.iter_mut() {
                view.push(extract_subvolume(v, &tasks.augment, rng)?);
            }
        }
        for view in views.into_iter() {
            for sub in view {
                let (rotated, label) = if tasks.flags.get("vis_rot") {
                    let r = make_rotation(&sub, tasks.rotation_axis, rng)?;
                    (r.rotated, r.label)
                } else {
                    (sub, 0)
                };
                let (input, dropped) = if tasks.flags.get("vis_inp") {
                    let t = make_inpainting(&rotated, tasks.drop_block, tasks.drop_ratio, rng)?;
                    (t.corrupted, t.dropped)
                } else {
                    (rotated.clone(), vec![false; rotated.len()])
                };
                inputs.push(input);
                targets.push(rotated);
                drops.extend(dropped);
                labels.push(label as u32);
            }
        }
        let dt = self.dtype();
        let dev = self.device();
        Ok(ViewBatch {
            inputs: self.vision.batch_volumes(&inputs.iter().collect::<Vec<_>>(), dt, &dev)?,
            targets: self.vision.batch_volumes(&targets.iter().collect::<Vec<_>>(), dt, &dev)?,
            drop_mask: mask_tensor(&drops, &[2 * n, side.pow(3)], dt, &dev)?,
            rot_labels: labels,
        })
    }

    /// Run every enabled objective and combine them.
    pub fn forward<R: Rng>(
        &self,
        inp: &StepInputs,
        tasks: &TaskSettings,
        step: u64,
        rng_mine: &mut R,
    ) -> Result<StepOutput> {
        let f = &tasks.flags;
        let n = inp.batch.n;
        let mut parts = Components::default();
        let mut match_rows = None;
        let need_text = f.any_cm() || f.get("mm_match");
        let need_vision = f.any_cm() || f.get("mm_match") || f.get("mm_mlm");
        let text = if need_text { Some(self.text.encode(&inp.batch)?) } else { None };
        let pyr = if need_vision { Some(self.vision.forward(&inp.volumes)?) } else { None };
        let bias = inp.batch.attn_bias(self.dtype(), &self.device())?;

        if f.any_cm() {
            let cm = self.cm.loss_cm(
                pyr.as_ref().unwrap(),
                text.as_ref().unwrap(),
                CmFlags { top: f.get("cm_top"), mid: f.get("cm_mid"), bot: f.get("cm_bot") },
                tasks.pooling,
            )?;
            for (name, t) in [("cm_top", cm.top), ("cm_mid", cm.mid), ("cm_bot", cm.bot)] {
                if let Some(t) = t {
                    parts.set(name, t);
                }
            }
        }

        if let (true, Some(m)) = (f.get("lan_mlm"), &inp.masked_uni) {
            let loss = if m.positions.is_empty() {
                Tensor::zeros((), self.dtype(), &self.device())?
            } else {
                let feats = self.text.encode_ids(&inp.batch, &m.input_ids, false)?;
                loss_mlm(&self.lan.logits_at(&feats.token_states, &m.positions)?, &m.targets())?
            };
            parts.set("lan_mlm", loss);
        }

        if f.get("mm_match") {
            let pyr = pyr.as_ref().unwrap();
            let text = text.as_ref().unwrap();
            let (gv, gt) = self.cm.global(pyr, text)?;
            let sim = l2_normalize(&gv.detach())?.matmul(&l2_normalize(&gt.detach())?.t()?)?;
            let sim = to_f64_vec(&sim)?;
            let mb = build_match_batch(&sim, n, tasks.mining, step, rng_mine)?;
            let states = take_rows(&text.token_states, &mb.text_idx)?;
            let b = take_rows(&bias, &mb.text_idx)?;
            let vis = take_rows(self.mm.memory.tokens(pyr), &mb.vis_idx)?;
            let (fused, _) = self.mm.mm_encode(&states, &b, &vis)?;
            parts.set("mm_match", bce_with_logits(&self.mm.match_logits(&fused)?, &mb.labels)?);
            match_rows = Some((mb.text_idx, mb.vis_idx));
        }

        if let (true, Some(m)) = (f.get("mm_mlm"), &inp.masked_mm) {
            let loss = if m.positions.is_empty() {
                Tensor::zeros((), self.dtype(), &self.device())?
            } else {
                let feats = self.text.encode_ids(&inp.batch, &m.input_ids, false)?;
                let (fused, _) = self.mm.mm_encode(&feats.token_states, &bias, self.mm.memory.tokens(pyr.as_ref().unwrap()))?;
                loss_mlm(&self.mm.mlm_head.logits_at(&fused, &m.positions)?, &m.targets())?
            };
            parts.set("mm_mlm", loss);
        }

        if let Some(v) = &inp.views {
            let sub = self.vision.forward(&v.inputs)?;
            if f.get("vis_inp") {
                let recon = self.vis.inp.forward(&sub.f_top)?;
                parts.set("vis_inp", loss_inp(&recon, &v.targets, &v.drop_mask)?);
            }
            if f.get("vis_rot") {
                parts.set("vis_rot", loss_rot(&self.vis.rot.forward(&sub.pooled_top)?, &v.rot_labels)?);
            }
            if f.get("vis_con") {
                let z = self.vis.con.forward(&sub.pooled_top)?;
                let z1 = z.narrow(0, 0, n)?;
                let z2 = z.narrow(0, n, n)?;
                parts.set("vis_con", loss_con(&z1, &z2, &self.vis.con.tau.tau()?)?);
            }
        }

        let (total, bundle) = composite_loss(&parts, f, &tasks.weights)?;
        Ok(StepOutput { total, bundle, components: parts, match_rows })
    }

    /// Shared-space retrieval embeddings for scans and reports.
    pub fn embed_pairs(&self, samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
        let vols: Vec<&Volume> = samples.iter().map(|s| &s.volume).collect();
        let reports: Vec<&TokenizedReport> = samples.iter().map(|s| &s.report).collect();
        let pyr = self.vision.forward(&self.volume_tensor(&vols)?)?;
        let text = self.text.encode(&self.tri_batch(&reports)?)?;
        let (gv, gt) = self.cm.global(&pyr, &text)?;
        Ok((gv.detach(), gt.detach()))
    }
}

