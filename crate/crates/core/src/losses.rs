//! Training losses: parameter L1, three coordinate L1 terms and box L1.
//! Every L1 uses mean reduction.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::body_model::{perspective_project_op, ModelParams, NUM_JOINTS, PELVIS};
use crate::error::{shape_err, Error, Result};
use crate::grid_ops::BoundingBox;
use crate::pipeline::{PipelineConfig, PipelineOutput, LHAND_BOX, RHAND_BOX};
use crate::synth::{body_coord_targets, hand_coord_targets, GroundTruth};

/// Stride and offset mapping backbone grid cells to input pixels.
const GRID_STRIDE: f64 = 4.0;
const GRID_OFFSET: f64 = 1.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_param: f64,
    pub l_coord: f64,
    pub l_box: f64,
    pub total: f64,
    /// Pose2Pose coordinates, root-relative joints, projected joints.
    pub coord_terms: [f64; 3],
}

impl LossBreakdown {
    /// Element-wise mean.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            l_param: sum(|b| b.l_param),
            l_coord: sum(|b| b.l_coord),
            l_box: sum(|b| b.l_box),
            total: sum(|b| b.total),
            coord_terms: std::array::from_fn(|k| items.iter().map(|b| b.coord_terms[k]).sum::<f64>() / n),
        }
    }
}

/// Annotations available to the losses; a missing field fails every term
/// that needs it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Targets {
    pub params: Option<ModelParams>,
    /// Model-frame joints `[53, 3]`.
    pub joints_3d: Option<Tensor>,
    /// Full-image pixels `[53, 2]`.
    pub joints_2d: Option<Tensor>,
    pub boxes: Option<[BoundingBox; 3]>,
}

impl From<&GroundTruth> for Targets {
    fn from(gt: &GroundTruth) -> Self {
        Self {
            params: Some(gt.params.clone()),
            joints_3d: Some(gt.joints_3d.clone()),
            joints_2d: Some(gt.joints_2d.clone()),
            boxes: Some(gt.boxes),
        }
    }
}

/// Which coordinate terms contribute.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoordMask {
    pub pose: bool,
    pub joints_3d: bool,
    pub joints_2d: bool,
}

impl Default for CoordMask {
    fn default() -> Self {
        Self {
            pose: true,
            joints_3d: true,
            joints_2d: true,
        }
    }
}

impl CoordMask {
    pub const NONE: CoordMask = CoordMask {
        pose: false,
        joints_3d: false,
        joints_2d: false,
    };
}

/// Loss nodes of one sample.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_param: Var,
    pub l_coord: Var,
    pub l_box: Var,
    pub total: Var,
    /// Pose2Pose coordinates, root-relative joints, projected joints.
    pub coord_terms: [Option<Var>; 3],
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let v = |x: Var| tape.value(x).data()[0];
        LossBreakdown {
            l_param: v(self.l_param),
            l_coord: v(self.l_coord),
            l_box: v(self.l_box),
            total: v(self.total),
            coord_terms: self.coord_terms.map(|t| t.map_or(0.0, v)),
        }
    }
}

/// Mean absolute difference over [`ModelParams::loss_vector`].
pub fn loss_param(pred: &ModelParams, gt: &ModelParams) -> Result<f64> {
    pred.validate()?;
    gt.validate()?;
    let (a, b) = (pred.loss_vector(), gt.loss_vector());
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

pub fn loss_param_op(tape: &Tape, out: &PipelineOutput, gt: &ModelParams) -> Result<Var> {
    gt.validate()?;
    let parts = [
        out.phase2.theta_body,
        out.hands.right.theta,
        out.hands.left.theta,
        out.face.theta_jaw,
        out.phase2.beta,
        out.face.psi,
    ];
    let flat: Vec<Var> = parts.iter().map(|v| tape.flatten(*v)).collect::<Result<_>>()?;
    let pred = tape.concat(&flat, 0)?;
    let target = tape.constant(Tensor::vector(gt.loss_vector()));
    tape.l1_loss(pred, target)
}

fn box_scale(image_size: [usize; 2]) -> [f64; 4] {
    let [h, w] = image_size;
    [1.0 / w as f64, 1.0 / h as f64, 1.0 / w as f64, 1.0 / h as f64]
}

/// Mean absolute difference of the 12 box numbers, centers and sizes
/// divided by the image width or height.
pub fn loss_box(pred: &[BoundingBox; 3], gt: &[BoundingBox; 3], image_size: [usize; 2]) -> f64 {
    let s = box_scale(image_size);
    let mut acc = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        for (k, (a, b)) in p.to_array().iter().zip(g.to_array()).enumerate() {
            acc += ((a - b) * s[k]).abs();
        }
    }
    acc / 12.0
}

/// `boxes` is the `[3, 4]` prediction in image pixels.
pub fn loss_box_op(tape: &Tape, boxes: Var, gt: &[BoundingBox; 3], image_size: [usize; 2]) -> Result<Var> {
    let shape = tape.shape(boxes);
    if shape != [3, 4] {
        return Err(shape_err("loss_box", format!("boxes {shape:?}, expected [3, 4]")));
    }
    let s = box_scale(image_size);
    let scale = Tensor::from_fn(&[3, 4], |i| s[i % 4]);
    let pred = tape.mul_const(boxes, &scale)?;
    let target = Tensor::from_fn(&[3, 4], |i| gt[i / 4].to_array()[i % 4] * s[i % 4]);
    tape.l1_loss(pred, tape.constant(target))
}

/// Grid coordinates `[j, 3]` to input pixels; depth is left in bins.
fn grid_to_pixels(tape: &Tape, coords: Var) -> Result<Var> {
    let j = tape.shape(coords)[0];
    let scale = Tensor::from_fn(&[j, 3], |i| if i % 3 == 2 { 1.0 } else { GRID_STRIDE });
    let scaled = tape.mul_const(coords, &scale)?;
    tape.add_row(scaled, tape.constant(Tensor::vector(vec![GRID_OFFSET, GRID_OFFSET, 0.0])))
}

/// Targets of the first coordinate term: body joints in body-input pixels,
/// then right and left finger joints in their crop pixels, all with depth
/// bins.
pub fn pose_coord_targets(cfg: &PipelineConfig, gt: &GroundTruth, crop_boxes: &[BoundingBox; 3]) -> Tensor {
    let body = body_coord_targets(cfg, gt);
    let r = hand_coord_targets(cfg, gt, &crop_boxes[RHAND_BOX], true);
    let l = hand_coord_targets(cfg, gt, &crop_boxes[LHAND_BOX], false);
    let data: Vec<f64> = body.data().iter().chain(r.data()).chain(l.data()).copied().collect();
    let n = data.len() / 3;
    Tensor::new(&[n, 3], data).expect("sized")
}

/// Joints minus the pelvis row.
pub fn root_relative(joints: &Tensor) -> Tensor {
    let root = joints.row(PELVIS).to_vec();
    Tensor::from_fn(joints.shape(), |i| joints.data()[i] - root[i % 3])
}

/// Full-image pixels to body-input pixels.
pub fn to_body_pixels(joints_2d: &Tensor) -> Tensor {
    Tensor::from_fn(joints_2d.shape(), |i| (joints_2d.data()[i] - 0.5) / 2.0)
}

/// Sum of the enabled coordinate terms and the terms themselves.
pub fn loss_coord_op(
    tape: &Tape,
    cfg: &PipelineConfig,
    out: &PipelineOutput,
    targets: &Targets,
    mask: CoordMask,
) -> Result<(Var, [Option<Var>; 3])> {
    let j3 = || targets.joints_3d.as_ref().ok_or(Error::MissingGt("joints_3d"));
    let j2 = || targets.joints_2d.as_ref().ok_or(Error::MissingGt("joints_2d"));
    let mut terms = [None; 3];
    if mask.pose {
        let gt = GroundTruth {
            params: ModelParams::default(),
            joints_3d: j3()?.clone(),
            joints_2d: j2()?.clone(),
            boxes: out.crop_boxes,
        };
        let pred = tape.concat(
            &[
                grid_to_pixels(tape, out.phase1.pose.coords)?,
                grid_to_pixels(tape, out.hands.right.pose.coords)?,
                grid_to_pixels(tape, out.hands.left.pose.coords)?,
            ],
            0,
        )?;
        let target = tape.constant(pose_coord_targets(cfg, &gt, &out.crop_boxes));
        terms[0] = Some(tape.l1_loss(pred, target)?);
    }
    if mask.joints_3d {
        let target = tape.constant(root_relative(j3()?));
        let root = tape.gather_rows(out.joints, &[PELVIS; NUM_JOINTS])?;
        let rel = tape.sub(out.joints, root)?;
        terms[1] = Some(tape.l1_loss(rel, target)?);
    }
    if mask.joints_2d {
        let target = tape.constant(to_body_pixels(j2()?));
        let proj = perspective_project_op(tape, out.joints, cfg.focal, cfg.body_princpt())?;
        terms[2] = Some(tape.l1_loss(proj, target)?);
    }
    let mut sum: Option<Var> = None;
    for t in terms.iter().flatten() {
        sum = Some(match sum {
            Some(s) => tape.add(s, *t)?,
            None => *t,
        });
    }
    let total = match sum {
        Some(s) => s,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok((total, terms))
}

/// Weighted sum `param + coord + box` of one sample.
pub fn total_loss_op(
    tape: &Tape,
    cfg: &PipelineConfig,
    out: &PipelineOutput,
    targets: &Targets,
    mask: CoordMask,
) -> Result<LossVars> {
    let params = targets.params.as_ref().ok_or(Error::MissingGt("params"))?;
    let boxes = targets.boxes.as_ref().ok_or(Error::MissingGt("boxes"))?;
    let l_param = loss_param_op(tape, out, params)?;
    let (l_coord, coord_terms) = loss_coord_op(tape, cfg, out, targets, mask)?;
    let l_box = loss_box_op(tape, out.phase1.boxes, boxes, cfg.image_size)?;
    let w = cfg.loss_weights;
    let total = tape.add(
        tape.add(tape.scale(l_param, w.param)?, tape.scale(l_coord, w.coord)?)?,
        tape.scale(l_box, w.bbox)?,
    )?;
    Ok(LossVars {
        l_param,
        l_coord,
        l_box,
        total,
        coord_terms,
    })
}
