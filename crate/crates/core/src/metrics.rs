//! Position errors in millimeters, with and without similarity alignment.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::body_model::{BodyModel, Part, LEFT_WRIST, NECK, PELVIS, RIGHT_WRIST};
use crate::error::{shape_err, Error, Result};
use crate::synth::{hand_joint_indices, FACE_JOINTS};

fn points(t: &Tensor, op: &'static str) -> Result<Vec<Vector3<f64>>> {
    if t.shape().len() != 2 || t.shape()[1] != 3 || t.shape()[0] == 0 {
        return Err(shape_err(op, format!("expected [n>=1, 3], got {:?}", t.shape())));
    }
    Ok(t.data().chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect())
}

fn check_pair(pred: &Tensor, gt: &Tensor, op: &'static str) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
    if pred.shape() != gt.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", pred.shape(), gt.shape())));
    }
    Ok((points(pred, op)?, points(gt, op)?))
}

fn mean_dist_mm(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    1000.0 * a.iter().zip(b).map(|(p, q)| (p - q).norm()).sum::<f64>() / a.len() as f64
}

/// Mean distance in mm after moving both roots to the origin.
pub fn mpjpe(pred: &Tensor, gt: &Tensor, root: usize) -> Result<f64> {
    let (p, g) = check_pair(pred, gt, "mpjpe")?;
    if root >= p.len() {
        return Err(shape_err("mpjpe", format!("root {root} out of {} points", p.len())));
    }
    Ok(rooted_error(&p, &g, p[root], g[root]))
}

fn rooted_error(p: &[Vector3<f64>], g: &[Vector3<f64>], pr: Vector3<f64>, gr: Vector3<f64>) -> f64 {
    let a: Vec<_> = p.iter().map(|v| v - pr).collect();
    let b: Vec<_> = g.iter().map(|v| v - gr).collect();
    mean_dist_mm(&a, &b)
}

/// Similarity transform `s * R * x + t` with `det R = +1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * x + self.translation
    }
}

/// Least-squares similarity mapping `pred` onto `gt`.
pub fn fit_similarity(pred: &Tensor, gt: &Tensor) -> Result<Similarity> {
    let (p, g) = check_pair(pred, gt, "pa_align")?;
    if p.len() < 3 {
        return Err(Error::Degenerate(format!("{} points; alignment needs at least 3", p.len())));
    }
    let n = p.len() as f64;
    let mp = p.iter().sum::<Vector3<f64>>() / n;
    let mg = g.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    for (a, b) in p.iter().zip(&g) {
        let (da, db) = (a - mp, b - mg);
        cov += db * da.transpose();
        var_p += da.norm_squared();
    }
    let svd = cov.svd(true, true);
    let (u, v_t, sv) = (svd.u.expect("requested"), svd.v_t.expect("requested"), svd.singular_values);
    let largest = sv.max();
    let smallest = (0..3).min_by(|a, b| sv[*a].total_cmp(&sv[*b])).expect("3");
    let middle = (0..3).filter(|&i| i != smallest).map(|i| sv[i]).fold(f64::INFINITY, f64::min);
    if var_p <= f64::EPSILON * n || middle <= 1e-12 * largest.max(f64::MIN_POSITIVE) {
        return Err(Error::Degenerate("cross-covariance has rank below 2".into()));
    }
    // a reflection is traded for flipping the weakest singular direction
    let mut signs = Vector3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        signs[smallest] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&signs) * v_t;
    let trace = sv.dot(&signs);
    let scale = trace / var_p;
    Ok(Similarity {
        scale,
        rotation,
        translation: mg - scale * rotation * mp,
    })
}

/// `pred` mapped by its least-squares similarity onto `gt`.
pub fn pa_align(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let s = fit_similarity(pred, gt)?;
    let p = points(pred, "pa_align")?;
    Ok(Tensor::new(pred.shape(), p.iter().flat_map(|x| s.apply(x).iter().copied().collect::<Vec<_>>()).collect())?)
}

/// Mean distance in mm after similarity alignment.
pub fn pa_mpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let aligned = pa_align(pred, gt)?;
    let (p, g) = check_pair(&aligned, gt, "pa_mpjpe")?;
    Ok(mean_dist_mm(&p, &g))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PartMetrics {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpvpe: f64,
    pub pa_mpvpe: f64,
}

impl PartMetrics {
    fn average(a: &PartMetrics, b: &PartMetrics) -> PartMetrics {
        PartMetrics {
            mpjpe: (a.mpjpe + b.mpjpe) / 2.0,
            pa_mpjpe: (a.pa_mpjpe + b.pa_mpjpe) / 2.0,
            mpvpe: (a.mpvpe + b.mpvpe) / 2.0,
            pa_mpvpe: (a.pa_mpvpe + b.pa_mpvpe) / 2.0,
        }
    }

    fn mean(items: &[PartMetrics]) -> PartMetrics {
        let n = items.len().max(1) as f64;
        let f = |g: fn(&PartMetrics) -> f64| items.iter().map(g).sum::<f64>() / n;
        PartMetrics {
            mpjpe: f(|m| m.mpjpe),
            pa_mpjpe: f(|m| m.pa_mpjpe),
            mpvpe: f(|m| m.mpvpe),
            pa_mpvpe: f(|m| m.pa_mpvpe),
        }
    }
}

/// Per-part errors. Hands are rooted at their wrists, face at the neck,
/// the rest at the pelvis; `hands_pelvis_mpvpe` is the left/right average
/// hand vertex error with the pelvis as root.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub all: PartMetrics,
    pub body: PartMetrics,
    pub lhand: PartMetrics,
    pub rhand: PartMetrics,
    pub hands_avg: PartMetrics,
    pub face: PartMetrics,
    pub hands_pelvis_mpvpe: f64,
}

impl MetricReport {
    /// Field-wise mean over samples.
    pub fn mean(items: &[MetricReport]) -> MetricReport {
        let col = |f: fn(&MetricReport) -> PartMetrics| PartMetrics::mean(&items.iter().map(f).collect::<Vec<_>>());
        MetricReport {
            all: col(|r| r.all),
            body: col(|r| r.body),
            lhand: col(|r| r.lhand),
            rhand: col(|r| r.rhand),
            hands_avg: col(|r| r.hands_avg),
            face: col(|r| r.face),
            hands_pelvis_mpvpe: items.iter().map(|r| r.hands_pelvis_mpvpe).sum::<f64>() / items.len().max(1) as f64,
        }
    }
}

fn select(p: &[Vector3<f64>], idx: &[usize]) -> Vec<Vector3<f64>> {
    idx.iter().map(|&i| p[i]).collect()
}

fn to_tensor(p: &[Vector3<f64>]) -> Tensor {
    Tensor::new(&[p.len(), 3], p.iter().flat_map(|v| [v.x, v.y, v.z]).collect()).expect("sized")
}

fn pa_error(p: &[Vector3<f64>], g: &[Vector3<f64>]) -> Result<f64> {
    pa_mpjpe(&to_tensor(p), &to_tensor(g))
}

struct Sets<'a> {
    pv: &'a [Vector3<f64>],
    pj: &'a [Vector3<f64>],
    gv: &'a [Vector3<f64>],
    gj: &'a [Vector3<f64>],
}

impl Sets<'_> {
    fn part(&self, joints: &[usize], verts: &[usize], root: usize) -> Result<PartMetrics> {
        let (pj, gj) = (select(self.pj, joints), select(self.gj, joints));
        let (pv, gv) = (select(self.pv, verts), select(self.gv, verts));
        let (pr, gr) = (self.pj[root], self.gj[root]);
        Ok(PartMetrics {
            mpjpe: rooted_error(&pj, &gj, pr, gr),
            pa_mpjpe: pa_error(&pj, &gj)?,
            mpvpe: rooted_error(&pv, &gv, pr, gr),
            pa_mpvpe: pa_error(&pv, &gv)?,
        })
    }
}

/// Errors of one predicted mesh and its regressed joints against the
/// ground truth.
pub fn evaluate(
    model: &BodyModel,
    pred_vertices: &Tensor,
    pred_joints: &Tensor,
    gt_vertices: &Tensor,
    gt_joints: &Tensor,
) -> Result<MetricReport> {
    let (pv, gv) = check_pair(pred_vertices, gt_vertices, "evaluate")?;
    let (pj, gj) = check_pair(pred_joints, gt_joints, "evaluate")?;
    if pv.len() != model.num_vertices() || pj.len() != model.num_joints() {
        return Err(shape_err("evaluate", format!("{} vertices / {} joints do not match the model", pv.len(), pj.len())));
    }
    let s = Sets {
        pv: &pv,
        pj: &pj,
        gv: &gv,
        gj: &gj,
    };
    let all_j: Vec<usize> = (0..pj.len()).collect();
    let all_v: Vec<usize> = (0..pv.len()).collect();
    let body_j: Vec<usize> = (0..crate::body_model::NUM_BODY_JOINTS).collect();
    let lh_v = model.part_vertices(Part::LeftHand);
    let rh_v = model.part_vertices(Part::RightHand);
    let lhand = s.part(&hand_joint_indices(false), &lh_v, LEFT_WRIST)?;
    let rhand = s.part(&hand_joint_indices(true), &rh_v, RIGHT_WRIST)?;
    let face_j = [NECK, FACE_JOINTS[0], FACE_JOINTS[1]];
    let (pp, gp) = (pj[PELVIS], gj[PELVIS]);
    let hands_pelvis_mpvpe =
        (rooted_error(&select(&pv, &lh_v), &select(&gv, &lh_v), pp, gp) + rooted_error(&select(&pv, &rh_v), &select(&gv, &rh_v), pp, gp)) / 2.0;
    Ok(MetricReport {
        all: s.part(&all_j, &all_v, PELVIS)?,
        body: s.part(&body_j, &model.part_vertices(Part::Body), PELVIS)?,
        hands_avg: PartMetrics::average(&lhand, &rhand),
        lhand,
        rhand,
        face: s.part(&face_j, &model.part_vertices(Part::Face), NECK)?,
        hands_pelvis_mpvpe,
    })
}
