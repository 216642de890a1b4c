//! Finite-difference gradient checks of every differentiable stage, run as
//! one suite.

use rand::Rng;

use crate::autodiff::{GradCheck, GradCheckReport, Tensor};
use crate::body_model::{build_toy_model, ParamVars, NUM_BETAS, NUM_EXPRESSIONS, NUM_JOINTS};
use crate::error::Result;
use crate::grid_ops::{bilinear_sample_op, roi_align_op, soft_argmax_3d_op};
use crate::nn::named_rng;
use crate::pipeline::Pipeline;
use crate::rotations::{axis_angle_to_matrix_op, matrix_to_axis_angle_op, rot6d_to_matrix_op};
use crate::synth::sample_scene;
use crate::train::{weight_gradcheck, RunConfig};

/// Tolerance of the whole-pipeline check; single operations use `OP_TOL`.
pub const PIPELINE_TOL: f64 = 1e-3;
pub const OP_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn uniform(seed: u64, name: &str, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut rng = named_rng(seed, name);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Runs every check; each reduces its output to a scalar with fixed random
/// weights so all output entries contribute.
pub fn gradient_suite(cfg: &RunConfig, seed: u64) -> Result<Vec<SuiteCase>> {
    let mut cases = Vec::new();
    let op = GradCheck::new(1e-5, OP_TOL);
    let rot = GradCheck::new(1e-6, OP_TOL);

    let w = uniform(seed, "w/soft_argmax", &[2, 3], -1.0, 1.0);
    let report = op.run(
        |t, v| t.sum(t.mul_const(soft_argmax_3d_op(t, v[0])?, &w)?),
        &[uniform(seed, "soft_argmax", &[2, 3, 4, 5], -2.0, 2.0)],
    )?;
    cases.push(SuiteCase { name: "soft_argmax_3d", report });

    let w = uniform(seed, "w/bilinear", &[3, 2], -1.0, 1.0);
    let points = Tensor::new(&[3, 2], vec![1.3, 2.7, 4.6, 0.2, 0.45, 5.5])?;
    let report = op.run(
        |t, v| t.sum(t.mul_const(bilinear_sample_op(t, v[0], v[1])?, &w)?),
        &[uniform(seed, "bilinear", &[2, 7, 6], 0.0, 1.0), points],
    )?;
    cases.push(SuiteCase { name: "bilinear_sample", report });

    let w = uniform(seed, "w/roi", &[2, 3, 4], -1.0, 1.0);
    let report = op.run(
        |t, v| t.sum(t.mul_const(roi_align_op(t, v[0], v[1], 3, 4)?, &w)?),
        &[uniform(seed, "roi", &[2, 9, 8], 0.0, 1.0), Tensor::vector(vec![3.77, 4.21, 4.13, 3.37])],
    )?;
    cases.push(SuiteCase { name: "roi_align", report });

    let w = uniform(seed, "w/rot6d", &[4, 9], -1.0, 1.0);
    let report = rot.run(
        |t, v| t.sum(t.mul_const(rot6d_to_matrix_op(t, v[0])?, &w)?),
        &[uniform(seed, "rot6d", &[4, 6], -1.5, 1.5)],
    )?;
    cases.push(SuiteCase { name: "rot6d_to_matrix", report });

    let report = rot.run(
        |t, v| t.sum(t.mul_const(axis_angle_to_matrix_op(t, v[0])?, &w)?),
        &[uniform(seed, "axis_angle", &[4, 3], -2.0, 2.0)],
    )?;
    cases.push(SuiteCase { name: "axis_angle_to_matrix", report });

    // through the 6D map so every probe is an exact rotation
    let w3 = uniform(seed, "w/log", &[4, 3], -1.0, 1.0);
    let report = rot.run(
        |t, v| t.sum(t.mul_const(matrix_to_axis_angle_op(t, rot6d_to_matrix_op(t, v[0])?)?, &w3)?),
        &[uniform(seed, "log", &[4, 6], -1.5, 1.5)],
    )?;
    cases.push(SuiteCase { name: "matrix_to_axis_angle", report });

    let model = build_toy_model(&cfg.pipeline.model);
    let nv = model.num_vertices();
    let (wv, wj) = (uniform(seed, "w/verts", &[nv, 3], -1.0, 1.0), uniform(seed, "w/joints", &[NUM_JOINTS, 3], -1.0, 1.0));
    let inputs = [
        uniform(seed, "pose", &[NUM_JOINTS, 3], -0.7, 0.7),
        uniform(seed, "beta", &[NUM_BETAS], -1.0, 1.0),
        uniform(seed, "psi", &[NUM_EXPRESSIONS], -1.0, 1.0),
        Tensor::vector(vec![0.05, -0.1, 2.0]),
    ];
    let report = op.run(
        |t, x| {
            let out = model.forward_op(
                t,
                &ParamVars {
                    pose: x[0],
                    beta: x[1],
                    psi: x[2],
                    trans: x[3],
                },
            )?;
            let a = t.sum(t.mul_const(out.vertices, &wv)?)?;
            let b = t.sum(t.mul_const(out.joints, &wj)?)?;
            t.add(a, b)
        },
        &inputs,
    )?;
    cases.push(SuiteCase { name: "forward_model", report });

    let pipe = Pipeline::new(cfg.pipeline.clone(), seed)?;
    let sample = sample_scene(&pipe.model, &cfg.pipeline, &cfg.synth, seed.wrapping_add(1))?;
    let report = weight_gradcheck(&pipe, &sample, true, 8, seed, 1e-6, PIPELINE_TOL)?;
    cases.push(SuiteCase { name: "full_pipeline_loss", report });
    Ok(cases)
}
