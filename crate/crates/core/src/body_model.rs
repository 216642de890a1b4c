//! Simplified whole-body parametric model: a 53-joint kinematic tree (22
//! body joints, 15 per hand, jaw), shape and expression blend shapes,
//! linear blend skinning, a vertex-to-joint regressor and pinhole
//! projection.
//!
//! Coordinates are meters in a camera-aligned frame: x to the image right
//! (the subject's left), y down, z away from the camera. The subject faces
//! the camera, so the sagittal mirror is `x -> -x`.
//!
//! Joint layout: body `0..22` (pelvis is 0 and its rotation is the global
//! orientation), jaw `22`, left hand `23..38`, right hand `38..53`. Each
//! hand lists index, middle, pinky, ring and thumb chains of three joints.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::rotations::axis_angle_to_matrix_op;

pub const NUM_BODY_JOINTS: usize = 22;
pub const NUM_HAND_JOINTS: usize = 15;
pub const NUM_JOINTS: usize = NUM_BODY_JOINTS + 2 * NUM_HAND_JOINTS + 1;
pub const NUM_BETAS: usize = 10;
pub const NUM_EXPRESSIONS: usize = 10;

pub const PELVIS: usize = 0;
pub const NECK: usize = 12;
pub const HEAD: usize = 15;
pub const LEFT_WRIST: usize = 20;
pub const RIGHT_WRIST: usize = 21;
pub const JAW: usize = 22;
pub const LEFT_HAND_START: usize = 23;
pub const RIGHT_HAND_START: usize = LEFT_HAND_START + NUM_HAND_JOINTS;

/// Hand-local indices of the index, middle, pinky and ring knuckles.
pub const MCP_LOCAL: [usize; 4] = [0, 3, 6, 9];

pub const MODEL_SCHEMA_VERSION: u32 = 1;

const BODY_PARENTS: [i32; NUM_BODY_JOINTS] = [
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19,
];

const BODY_MIRROR_PAIRS: [(usize, usize); 8] = [
    (1, 2),
    (4, 5),
    (7, 8),
    (10, 11),
    (13, 14),
    (16, 17),
    (18, 19),
    (20, 21),
];

/// Which region a vertex belongs to, for per-part errors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Part {
    Body,
    LeftHand,
    RightHand,
    Face,
}

/// Immutable model definition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyModel {
    pub schema_version: u32,
    /// `[v, 3]`
    pub template_vertices: Tensor,
    pub parents: Vec<Option<usize>>,
    /// `[k, 3]`
    pub rest_joints: Tensor,
    /// `[v, k]`, rows sum to one.
    pub skin_weights: Tensor,
    /// `[v * 3, NUM_BETAS]`
    pub shape_dirs: Tensor,
    /// `[v * 3, NUM_EXPRESSIONS]`
    pub expr_dirs: Tensor,
    /// `[k, v]`, rows sum to one.
    pub joint_regressor: Tensor,
    /// Left/right joint permutation (self-paired on the midline).
    pub joint_mirror: Vec<usize>,
    pub vertex_mirror: Vec<usize>,
    pub vertex_parts: Vec<Part>,
    /// Knuckle joints as global indices, `[left, right]`.
    pub mcp_indices: [[usize; 4]; 2],
}

/// Full pose/shape parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub theta_body: Vec<[f64; 3]>,
    pub theta_rhand: Vec<[f64; 3]>,
    pub theta_lhand: Vec<[f64; 3]>,
    pub theta_jaw: [f64; 3],
    pub beta: Vec<f64>,
    pub psi: Vec<f64>,
    pub trans: [f64; 3],
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            theta_body: vec![[0.0; 3]; NUM_BODY_JOINTS],
            theta_rhand: vec![[0.0; 3]; NUM_HAND_JOINTS],
            theta_lhand: vec![[0.0; 3]; NUM_HAND_JOINTS],
            theta_jaw: [0.0; 3],
            beta: vec![0.0; NUM_BETAS],
            psi: vec![0.0; NUM_EXPRESSIONS],
            trans: [0.0; 3],
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("theta_body", self.theta_body.len(), NUM_BODY_JOINTS),
            ("theta_rhand", self.theta_rhand.len(), NUM_HAND_JOINTS),
            ("theta_lhand", self.theta_lhand.len(), NUM_HAND_JOINTS),
            ("beta", self.beta.len(), NUM_BETAS),
            ("psi", self.psi.len(), NUM_EXPRESSIONS),
        ];
        for (name, got, want) in dims {
            if got != want {
                return Err(shape_err("model_params", format!("{name} has {got}, expected {want}")));
            }
        }
        if !self.flat_pose().iter().chain(&self.beta).chain(&self.psi).chain(&self.trans).all(|v| v.is_finite()) {
            return Err(Error::DegenerateInput("non-finite model parameter".into()));
        }
        Ok(())
    }

    /// Per-joint axis-angle in kinematic order, `[NUM_JOINTS, 3]` flattened.
    pub fn flat_pose(&self) -> Vec<f64> {
        self.theta_body
            .iter()
            .chain(std::iter::once(&self.theta_jaw))
            .chain(&self.theta_lhand)
            .chain(&self.theta_rhand)
            .flatten()
            .copied()
            .collect()
    }

    pub fn from_flat_pose(pose: &[f64], beta: &[f64], psi: &[f64], trans: [f64; 3]) -> Self {
        let rows: Vec<[f64; 3]> = pose.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self {
            theta_body: rows[..NUM_BODY_JOINTS].to_vec(),
            theta_jaw: rows[JAW],
            theta_lhand: rows[LEFT_HAND_START..RIGHT_HAND_START].to_vec(),
            theta_rhand: rows[RIGHT_HAND_START..NUM_JOINTS].to_vec(),
            beta: beta.to_vec(),
            psi: psi.to_vec(),
            trans,
        }
    }

    /// Every entry compared by the parameter loss, in a fixed order:
    /// body, right hand, left hand, jaw, shape, expression.
    pub fn loss_vector(&self) -> Vec<f64> {
        self.theta_body
            .iter()
            .chain(&self.theta_rhand)
            .chain(&self.theta_lhand)
            .chain(std::iter::once(&self.theta_jaw))
            .flatten()
            .chain(&self.beta)
            .chain(&self.psi)
            .copied()
            .collect()
    }

    /// Parameters of the left/right mirrored subject.
    pub fn mirrored(&self, model: &BodyModel) -> Self {
        let pose = self.flat_pose();
        let mut out = vec![0.0; pose.len()];
        for (i, &src) in model.joint_mirror.iter().enumerate() {
            out[3 * i] = pose[3 * src];
            out[3 * i + 1] = -pose[3 * src + 1];
            out[3 * i + 2] = -pose[3 * src + 2];
        }
        let t = self.trans;
        Self::from_flat_pose(&out, &self.beta, &self.psi, [-t[0], t[1], t[2]])
    }
}

/// Posed mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshOutput {
    /// `[v, 3]`
    pub vertices: Tensor,
    /// `[NUM_JOINTS, 3]`
    pub joints: Tensor,
}

/// Tape-side model inputs.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    /// `[NUM_JOINTS, 3]` in kinematic order.
    pub pose: Var,
    pub beta: Var,
    pub psi: Var,
    pub trans: Var,
}

impl ParamVars {
    pub fn constant(tape: &Tape, p: &ModelParams) -> Result<Self> {
        Ok(Self {
            pose: tape.constant(Tensor::new(&[NUM_JOINTS, 3], p.flat_pose())?),
            beta: tape.constant(Tensor::vector(p.beta.clone())),
            psi: tape.constant(Tensor::vector(p.psi.clone())),
            trans: tape.constant(Tensor::vector(p.trans.to_vec())),
        })
    }

    pub fn leaves(tape: &Tape, p: &ModelParams) -> Result<Self> {
        Ok(Self {
            pose: tape.leaf(Tensor::new(&[NUM_JOINTS, 3], p.flat_pose())?),
            beta: tape.leaf(Tensor::vector(p.beta.clone())),
            psi: tape.leaf(Tensor::vector(p.psi.clone())),
            trans: tape.leaf(Tensor::vector(p.trans.to_vec())),
        })
    }
}

/// Tape-side posed mesh.
#[derive(Clone, Copy, Debug)]
pub struct MeshVars {
    pub vertices: Var,
    pub joints: Var,
}

impl BodyModel {
    pub fn num_vertices(&self) -> usize {
        self.template_vertices.shape()[0]
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    /// Parent-before-child order, or `InvalidTree` for cycles, several
    /// roots or dangling parents.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let k = self.parents.len();
        let roots: Vec<usize> = (0..k).filter(|&j| self.parents[j].is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::InvalidTree(format!("{} roots", roots.len())));
        }
        let mut children = vec![Vec::new(); k];
        for (j, p) in self.parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= k {
                    return Err(Error::InvalidTree(format!("joint {j} has parent {p}")));
                }
                children[p].push(j);
            }
        }
        let mut order = Vec::with_capacity(k);
        let mut stack = roots;
        while let Some(j) = stack.pop() {
            order.push(j);
            stack.extend(children[j].iter().rev());
        }
        if order.len() != k {
            return Err(Error::InvalidTree("cycle detected".into()));
        }
        Ok(order)
    }

    /// Structural invariants; returns a description of the first violation.
    pub fn check_invariants(&self) -> Result<()> {
        let (v, k) = (self.num_vertices(), self.num_joints());
        self.topological_order()?;
        if self.parents[PELVIS].is_some() {
            return Err(Error::InvalidTree("pelvis is not the root".into()));
        }
        let expect = |t: &Tensor, shape: &[usize], name: &str| -> Result<()> {
            if t.shape() != shape {
                return Err(shape_err("body_model", format!("{name} is {:?}, expected {shape:?}", t.shape())));
            }
            Ok(())
        };
        expect(&self.rest_joints, &[k, 3], "rest_joints")?;
        expect(&self.skin_weights, &[v, k], "skin_weights")?;
        expect(&self.shape_dirs, &[v * 3, NUM_BETAS], "shape_dirs")?;
        expect(&self.expr_dirs, &[v * 3, NUM_EXPRESSIONS], "expr_dirs")?;
        expect(&self.joint_regressor, &[k, v], "joint_regressor")?;
        for (name, t) in [("skin_weights", &self.skin_weights), ("joint_regressor", &self.joint_regressor)] {
            for (r, row) in t.data().chunks(t.shape()[1]).enumerate() {
                let s: f64 = row.iter().sum();
                if row.iter().any(|w| *w < 0.0) || (s - 1.0).abs() > 1e-9 {
                    return Err(Error::Format(format!("{name} row {r} sums to {s}")));
                }
            }
        }
        for hand in 0..2 {
            let wrist = [LEFT_WRIST, RIGHT_WRIST][hand];
            for &m in &self.mcp_indices[hand] {
                if self.parents[m] != Some(wrist) {
                    return Err(Error::InvalidTree(format!("knuckle {m} is not a child of wrist {wrist}")));
                }
            }
        }
        let involution = |p: &[usize]| p.iter().enumerate().all(|(i, &j)| j < p.len() && p[j] == i);
        if self.joint_mirror.len() != k || !involution(&self.joint_mirror) {
            return Err(Error::Format("joint mirror table is not an involution".into()));
        }
        if self.vertex_mirror.len() != v || !involution(&self.vertex_mirror) || self.vertex_parts.len() != v {
            return Err(Error::Format("vertex tables are inconsistent".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let model: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if model.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "model schema version {} (expected {MODEL_SCHEMA_VERSION})",
                model.schema_version
            )));
        }
        model.check_invariants()?;
        Ok(model)
    }

    /// Indices of the vertices in `part`.
    pub fn part_vertices(&self, part: Part) -> Vec<usize> {
        (0..self.num_vertices()).filter(|&i| self.vertex_parts[i] == part).collect()
    }

    /// Differentiable forward pass.
    pub fn forward_op(&self, tape: &Tape, p: &ParamVars) -> Result<MeshVars> {
        let order = self.topological_order()?;
        let (v, k) = (self.num_vertices(), self.num_joints());
        if tape.shape(p.pose) != [k, 3] {
            return Err(shape_err("forward_model", format!("pose {:?}", tape.shape(p.pose))));
        }

        // shaped template
        let template = tape.constant(self.template_vertices.clone().reshaped(&[v * 3, 1])?);
        let beta = tape.reshape(p.beta, &[NUM_BETAS, 1])?;
        let psi = tape.reshape(p.psi, &[NUM_EXPRESSIONS, 1])?;
        let shape_off = tape.matmul(tape.constant(self.shape_dirs.clone()), beta)?;
        let expr_off = tape.matmul(tape.constant(self.expr_dirs.clone()), psi)?;
        let shaped = tape.add(tape.add(template, shape_off)?, expr_off)?;
        let shaped = tape.reshape(shaped, &[v, 3])?;
        let rest = tape.matmul(tape.constant(self.joint_regressor.clone()), shaped)?;

        // forward kinematics
        let local = axis_angle_to_matrix_op(tape, p.pose)?;
        let mut world_rot: Vec<Option<Var>> = vec![None; k];
        let mut world_pos: Vec<Option<Var>> = vec![None; k];
        for &j in &order {
            let r_local = tape.reshape(tape.slice(local, 0, j, 1)?, &[3, 3])?;
            let rest_j = tape.reshape(tape.slice(rest, 0, j, 1)?, &[3, 1])?;
            let (rot, pos) = match self.parents[j] {
                None => (r_local, rest_j),
                Some(parent) => {
                    let (rp, tp) = (world_rot[parent].expect("parent first"), world_pos[parent].expect("parent first"));
                    let rest_p = tape.reshape(tape.slice(rest, 0, parent, 1)?, &[3, 1])?;
                    let bone = tape.sub(rest_j, rest_p)?;
                    (tape.matmul(rp, r_local)?, tape.add(tape.matmul(rp, bone)?, tp)?)
                }
            };
            world_rot[j] = Some(rot);
            world_pos[j] = Some(pos);
        }

        // per-joint affine transforms [k, 12] mapping rest points to posed points
        let mut rows = Vec::with_capacity(k);
        let mut joints = Vec::with_capacity(k);
        for j in 0..k {
            let (rot, pos) = (world_rot[j].expect("visited"), world_pos[j].expect("visited"));
            let rest_j = tape.reshape(tape.slice(rest, 0, j, 1)?, &[3, 1])?;
            let offset = tape.sub(pos, tape.matmul(rot, rest_j)?)?;
            rows.push(tape.reshape(tape.concat(&[rot, offset], 1)?, &[1, 12])?);
            joints.push(tape.reshape(pos, &[1, 3])?);
        }
        let transforms = tape.concat(&rows, 0)?;
        let blended = tape.matmul(tape.constant(self.skin_weights.clone()), transforms)?;
        let posed = apply_affine_rows(tape, blended, shaped)?;
        let joints = tape.concat(&joints, 0)?;

        Ok(MeshVars {
            vertices: tape.add_row(posed, p.trans)?,
            joints: tape.add_row(joints, p.trans)?,
        })
    }

    /// Plain forward pass.
    pub fn forward(&self, params: &ModelParams) -> Result<MeshOutput> {
        params.validate()?;
        let tape = Tape::new();
        let vars = ParamVars::constant(&tape, params)?;
        let out = self.forward_op(&tape, &vars)?;
        let vertices = tape.value(out.vertices).clone();
        let joints = tape.value(out.joints).clone();
        Ok(MeshOutput { vertices, joints })
    }

    /// `joint_regressor * vertices`.
    pub fn regress_joints(&self, vertices: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let v = tape.constant(vertices.clone());
        let j = self.regress_joints_op(&tape, v)?;
        let out = tape.value(j).clone();
        Ok(out)
    }

    pub fn regress_joints_op(&self, tape: &Tape, vertices: Var) -> Result<Var> {
        let shape = tape.shape(vertices);
        if shape != [self.num_vertices(), 3] {
            return Err(shape_err(
                "regress_joints",
                format!("{shape:?} against a regressor over {} vertices", self.num_vertices()),
            ));
        }
        tape.matmul(tape.constant(self.joint_regressor.clone()), vertices)
    }
}

/// Row-wise `T[i] (3x4) * [p_i; 1]` for `T: [n, 12]`, `p: [n, 3]`.
fn apply_affine_rows(tape: &Tape, transforms: Var, points: Var) -> Result<Var> {
    let value = {
        let t = tape.value(transforms);
        let p = tape.value(points);
        let n = p.shape()[0];
        if t.shape() != [n, 12] {
            return Err(shape_err("apply_affine_rows", format!("{:?} vs {:?}", t.shape(), p.shape())));
        }
        let mut out = Vec::with_capacity(n * 3);
        for (m, q) in t.data().chunks(12).zip(p.data().chunks(3)) {
            for r in 0..3 {
                out.push(m[4 * r] * q[0] + m[4 * r + 1] * q[1] + m[4 * r + 2] * q[2] + m[4 * r + 3]);
            }
        }
        Tensor::new(&[n, 3], out)?
    };
    tape.custom(&[transforms, points], value, Box::new(AffineRows))
}

struct AffineRows;

impl CustomOp for AffineRows {
    fn name(&self) -> &'static str {
        "apply_affine_rows"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (t, p) = (inputs[0], inputs[1]);
        let mut gt = vec![0.0; t.numel()];
        let mut gp = vec![0.0; p.numel()];
        for (i, (m, q)) in t.data().chunks(12).zip(p.data().chunks(3)).enumerate() {
            for r in 0..3 {
                let gr = g[3 * i + r];
                for c in 0..3 {
                    gt[12 * i + 4 * r + c] = gr * q[c];
                    gp[3 * i + c] += gr * m[4 * r + c];
                }
                gt[12 * i + 4 * r + 3] = gr;
            }
        }
        vec![Some(gt), Some(gp)]
    }
}

/// Pinhole projection `u = fx x / z + cx`, `v = fy y / z + cy` of `[n, 3]`.
pub fn perspective_project(points: &Tensor, focal: [f64; 2], princpt: [f64; 2]) -> Result<Tensor> {
    let tape = Tape::new();
    let p = tape.constant(points.clone());
    let uv = perspective_project_op(&tape, p, focal, princpt)?;
    let out = tape.value(uv).clone();
    Ok(out)
}

pub fn perspective_project_op(tape: &Tape, points: Var, focal: [f64; 2], princpt: [f64; 2]) -> Result<Var> {
    let n = {
        let v = tape.value(points);
        if v.shape().len() != 2 || v.shape()[1] != 3 {
            return Err(shape_err("perspective_project", format!("{:?}", v.shape())));
        }
        for (index, row) in v.data().chunks(3).enumerate() {
            if !(row[2] > 1e-6) {
                return Err(Error::BehindCamera { index, z: row[2] });
            }
        }
        v.shape()[0]
    };
    let xy = tape.slice(points, 1, 0, 2)?;
    let z = tape.slice(points, 1, 2, 1)?;
    let ratio = tape.div(xy, tape.concat(&[z, z], 1)?)?;
    let f = Tensor::from_fn(&[n, 2], |i| focal[i % 2]);
    tape.add_row(tape.mul_const(ratio, &f)?, tape.constant(Tensor::vector(princpt.to_vec())))
}

/// Construction parameters for [`build_toy_model`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub vertex_budget: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            vertex_budget: 600,
            seed: 0,
        }
    }
}

fn mirror_point(p: [f64; 3]) -> [f64; 3] {
    [-p[0], p[1], p[2]]
}

fn toy_rest_joints() -> (Vec<[f64; 3]>, Vec<Option<usize>>) {
    let mut j = vec![[0.0; 3]; NUM_JOINTS];
    let left: [(usize, [f64; 3]); 11] = [
        (1, [0.09, 0.07, 0.0]),
        (4, [0.10, 0.45, 0.0]),
        (7, [0.10, 0.85, 0.02]),
        (10, [0.11, 0.90, -0.10]),
        (13, [0.07, -0.44, 0.0]),
        (16, [0.17, -0.46, 0.0]),
        (18, [0.42, -0.46, 0.0]),
        (20, [0.66, -0.46, 0.0]),
        (3, [0.0, -0.11, 0.0]),
        (6, [0.0, -0.24, 0.0]),
        (9, [0.0, -0.30, 0.0]),
    ];
    for (i, p) in left {
        j[i] = p;
    }
    j[NECK] = [0.0, -0.52, 0.0];
    j[HEAD] = [0.0, -0.62, 0.0];
    j[JAW] = [0.0, -0.57, -0.06];
    for (l, r) in BODY_MIRROR_PAIRS {
        j[r] = mirror_point(j[l]);
    }

    // Palm faces the camera; fingers point along +x, spread along y.
    let fingers: [([f64; 3], [f64; 3]); 5] = [
        ([0.140, -0.042, 0.0], [1.0, 0.0, 0.0]),
        ([0.147, -0.014, 0.0], [1.0, 0.0, 0.0]),
        ([0.126, 0.048, 0.0], [1.0, 0.1, 0.0]),
        ([0.140, 0.017, 0.0], [1.0, 0.05, 0.0]),
        ([0.049, -0.063, -0.021], [0.6, -0.7, -0.3]),
    ];
    let wrist = j[LEFT_WRIST];
    for (f, (base, dir)) in fingers.iter().enumerate() {
        let d = Vector3::from(*dir).normalize();
        let b = Vector3::from(wrist) + Vector3::from(*base);
        let seg = [0.0, 0.05, 0.09];
        for (s, len) in seg.iter().enumerate() {
            let p = b + d * *len;
            let l = LEFT_HAND_START + 3 * f + s;
            j[l] = [p.x, p.y, p.z];
            j[l + NUM_HAND_JOINTS] = mirror_point(j[l]);
        }
    }

    let mut parents: Vec<Option<usize>> = BODY_PARENTS
        .iter()
        .map(|&p| (p >= 0).then_some(p as usize))
        .collect();
    parents.push(Some(NECK));
    for (start, wrist) in [(LEFT_HAND_START, LEFT_WRIST), (RIGHT_HAND_START, RIGHT_WRIST)] {
        for f in 0..5 {
            parents.push(Some(wrist));
            parents.push(Some(start + 3 * f));
            parents.push(Some(start + 3 * f + 1));
        }
    }
    (j, parents)
}

fn toy_joint_mirror() -> Vec<usize> {
    let mut m: Vec<usize> = (0..NUM_JOINTS).collect();
    for (l, r) in BODY_MIRROR_PAIRS {
        m[l] = r;
        m[r] = l;
    }
    for i in 0..NUM_HAND_JOINTS {
        m[LEFT_HAND_START + i] = RIGHT_HAND_START + i;
        m[RIGHT_HAND_START + i] = LEFT_HAND_START + i;
    }
    m
}

fn joint_part(j: usize) -> Part {
    match j {
        HEAD | JAW => Part::Face,
        _ if (LEFT_HAND_START..RIGHT_HAND_START).contains(&j) => Part::LeftHand,
        _ if j >= RIGHT_HAND_START => Part::RightHand,
        _ => Part::Body,
    }
}

fn joint_radius(j: usize) -> f64 {
    match j {
        _ if j >= LEFT_HAND_START => 0.01,
        HEAD => 0.07,
        JAW => 0.03,
        0 | 3 | 6 | 9 => 0.09,
        _ => 0.04,
    }
}

/// Deterministic low-poly humanoid, bilaterally symmetric at rest.
///
/// Every joint gets an octahedron of six vertices centred on it (the joint
/// regressor averages them) and every bone gets rings of four vertices.
/// Vertices are generated on the left half and the midline, then mirrored.
pub fn build_toy_model(cfg: &ToyModelConfig) -> BodyModel {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (joints, parents) = toy_rest_joints();
    let joint_mirror = toy_joint_mirror();
    let k = NUM_JOINTS;

    let octa = 6 * k;
    let bones = k - 1;
    let rings = cfg.vertex_budget.saturating_sub(octa) / (4 * bones);
    let rings = rings.max(1);

    // canonical half: joints that are midline or on the subject's left
    let canonical: Vec<usize> = (0..k).filter(|&j| joint_mirror[j] == j || joints[j][0] > 0.0).collect();

    struct Proto {
        pos: [f64; 3],
        owner: usize,
        octa_of: Option<usize>,
    }
    let mut protos = Vec::new();
    for &j in &canonical {
        let midline = joint_mirror[j] == j;
        let r = joint_radius(j) * rng.random_range(0.9..1.1);
        let c = joints[j];
        let mut offsets = vec![[r, 0.0, 0.0], [0.0, r, 0.0], [0.0, -r, 0.0], [0.0, 0.0, r], [0.0, 0.0, -r]];
        if !midline {
            offsets.push([-r, 0.0, 0.0]);
        }
        for o in offsets {
            protos.push(Proto {
                pos: [c[0] + o[0], c[1] + o[1], c[2] + o[2]],
                owner: j,
                octa_of: Some(j),
            });
        }
        if let Some(p) = parents[j] {
            let a = Vector3::from(joints[p]);
            let b = Vector3::from(c);
            let d = (b - a).normalize();
            let helper = if d.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
            let p1 = d.cross(&helper).normalize();
            let p2 = d.cross(&p1);
            let rb = joint_radius(j).min(joint_radius(p)) * rng.random_range(0.8..1.0);
            for s in 0..rings {
                let t = (s + 1) as f64 / (rings + 1) as f64;
                let m = a + (b - a) * t;
                for q in [p1 * rb, -p1 * rb, p2 * rb, -p2 * rb] {
                    let pos = m + q;
                    if midline && pos.x < -1e-12 {
                        continue;
                    }
                    protos.push(Proto {
                        pos: [pos.x, pos.y, if pos.z.abs() < 1e-15 { 0.0 } else { pos.z }],
                        owner: j,
                        octa_of: None,
                    });
                }
            }
        }
    }

    // expand with mirrors
    let mut positions: Vec<[f64; 3]> = Vec::new();
    let mut owners = Vec::new();
    let mut octa_of = Vec::new();
    let mut vertex_mirror = Vec::new();
    let mut canonical_of = Vec::new();
    for (ci, p) in protos.iter().enumerate() {
        let i = positions.len();
        positions.push(p.pos);
        owners.push(p.owner);
        octa_of.push(p.octa_of);
        canonical_of.push((ci, false));
        if p.pos[0].abs() < 1e-12 {
            vertex_mirror.push(i);
        } else {
            positions.push(mirror_point(p.pos));
            owners.push(joint_mirror[p.owner]);
            octa_of.push(p.octa_of.map(|j| joint_mirror[j]));
            canonical_of.push((ci, true));
            vertex_mirror.push(i + 1);
            vertex_mirror.push(i);
        }
    }
    let v = positions.len();

    // skinning: up to four nearest joints; midline vertices take mirror pairs together
    let weights_for = |pos: [f64; 3], midline: bool| -> Vec<(usize, f64)> {
        let p = Vector3::from(pos);
        let mut order: Vec<(f64, usize)> = (0..k).map(|j| ((p - Vector3::from(joints[j])).norm(), j)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut chosen: Vec<usize> = Vec::new();
        for &(_, j) in &order {
            if chosen.contains(&j) {
                continue;
            }
            let group: Vec<usize> = if midline && joint_mirror[j] != j { vec![j, joint_mirror[j]] } else { vec![j] };
            if chosen.len() + group.len() > 4 {
                if chosen.is_empty() {
                    chosen.push(j);
                }
                break;
            }
            chosen.extend(group);
            if chosen.len() == 4 {
                break;
            }
        }
        let raw: Vec<(usize, f64)> = chosen
            .iter()
            .map(|&j| {
                let d = (p - Vector3::from(joints[j])).norm();
                (j, 1.0 / (d * d + 1e-4))
            })
            .collect();
        let total: f64 = raw.iter().map(|(_, w)| w).sum();
        raw.into_iter().map(|(j, w)| (j, w / total)).collect()
    };
    let mut skin = vec![0.0; v * k];
    for i in 0..v {
        let (ci, mirrored) = canonical_of[i];
        let midline = protos[ci].pos[0].abs() < 1e-12;
        for (j, w) in weights_for(protos[ci].pos, midline) {
            let j = if mirrored { joint_mirror[j] } else { j };
            skin[i * k + j] = w;
        }
    }

    // joint regressor: mean of each joint's octahedron
    let mut regressor = vec![0.0; k * v];
    for j in 0..k {
        let members: Vec<usize> = (0..v).filter(|&i| octa_of[i] == Some(j)).collect();
        for &i in &members {
            regressor[j * v + i] = 1.0 / members.len() as f64;
        }
    }

    // Smooth seeded blend shapes: beta_0 scales about the pelvis, the rest are
    // low-frequency sinusoidal fields. Expression only moves face vertices.
    struct Field {
        amp: [f64; 3],
        freq: [[f64; 3]; 3],
        phase: [f64; 3],
    }
    let mut field = |amp: f64| Field {
        amp: std::array::from_fn(|_| amp * rng.random_range(0.5..1.0)),
        freq: std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-3.0..3.0))),
        phase: std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU)),
    };
    let shape_fields: Vec<Field> = (0..NUM_BETAS).map(|_| field(0.01)).collect();
    let expr_fields: Vec<Field> = (0..NUM_EXPRESSIONS).map(|_| field(0.004)).collect();
    let eval = |f: &Field, p: [f64; 3]| -> [f64; 3] {
        std::array::from_fn(|c| {
            let arg: f64 = (0..3).map(|d| f.freq[c][d] * p[d]).sum::<f64>() + f.phase[c];
            f.amp[c] * arg.sin()
        })
    };
    let mut shape_dirs = vec![0.0; v * 3 * NUM_BETAS];
    let mut expr_dirs = vec![0.0; v * 3 * NUM_EXPRESSIONS];
    for i in 0..v {
        let (ci, mirrored) = canonical_of[i];
        let p = protos[ci].pos;
        let midline = p[0].abs() < 1e-12;
        let face = joint_part(protos[ci].owner) == Part::Face;
        for b in 0..NUM_BETAS {
            let mut d = if b == 0 { [0.05 * p[0], 0.05 * p[1], 0.05 * p[2]] } else { eval(&shape_fields[b], p) };
            if midline {
                d[0] = 0.0;
            }
            if mirrored {
                d[0] = -d[0];
            }
            for c in 0..3 {
                shape_dirs[(i * 3 + c) * NUM_BETAS + b] = d[c];
            }
        }
        if face {
            for e in 0..NUM_EXPRESSIONS {
                let mut d = eval(&expr_fields[e], p);
                if midline {
                    d[0] = 0.0;
                }
                if mirrored {
                    d[0] = -d[0];
                }
                for c in 0..3 {
                    expr_dirs[(i * 3 + c) * NUM_EXPRESSIONS + e] = d[c];
                }
            }
        }
    }

    let left_mcp = MCP_LOCAL.map(|m| LEFT_HAND_START + m);
    let right_mcp = MCP_LOCAL.map(|m| RIGHT_HAND_START + m);
    BodyModel {
        schema_version: MODEL_SCHEMA_VERSION,
        template_vertices: Tensor::new(&[v, 3], positions.concat()).expect("sized"),
        parents,
        rest_joints: Tensor::new(&[k, 3], joints.concat()).expect("sized"),
        skin_weights: Tensor::new(&[v, k], skin).expect("sized"),
        shape_dirs: Tensor::new(&[v * 3, NUM_BETAS], shape_dirs).expect("sized"),
        expr_dirs: Tensor::new(&[v * 3, NUM_EXPRESSIONS], expr_dirs).expect("sized"),
        joint_regressor: Tensor::new(&[k, v], regressor).expect("sized"),
        joint_mirror,
        vertex_mirror,
        vertex_parts: owners.iter().map(|&j| joint_part(j)).collect(),
        mcp_indices: [left_mcp, right_mcp],
    }
}

/// Rotation matrix of every joint in the world frame, computed with plain
/// 3x3 algebra (used by tests and the renderer).
pub fn world_rotations(model: &BodyModel, params: &ModelParams) -> Result<Vec<Matrix3<f64>>> {
    let pose = params.flat_pose();
    let order = model.topological_order()?;
    let mut out = vec![Matrix3::identity(); model.num_joints()];
    for j in order {
        let local = crate::rotations::axis_angle_to_matrix(&crate::rotations::AxisAngle::new(
            pose[3 * j],
            pose[3 * j + 1],
            pose[3 * j + 2],
        ))
        .0;
        out[j] = match model.parents[j] {
            Some(p) => out[p] * local,
            None => local,
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GradCheck;
    use crate::rotations::{axis_angle_to_matrix, AxisAngle};
    use nalgebra::Matrix4;

    fn random_params(seed: u64, scale: f64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose: Vec<f64> = (0..NUM_JOINTS * 3).map(|_| rng.random_range(-scale..scale)).collect();
        let beta: Vec<f64> = (0..NUM_BETAS).map(|_| rng.random_range(-1.0..1.0)).collect();
        let psi: Vec<f64> = (0..NUM_EXPRESSIONS).map(|_| rng.random_range(-1.0..1.0)).collect();
        let trans = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(5.0..9.0)];
        ModelParams::from_flat_pose(&pose, &beta, &psi, trans)
    }

    fn row3(t: &Tensor, i: usize) -> Vector3<f64> {
        let r = t.row(i);
        Vector3::new(r[0], r[1], r[2])
    }

    #[test]
    fn toy_model_satisfies_invariants() {
        let m = build_toy_model(&ToyModelConfig::default());
        m.check_invariants().unwrap();
        assert_eq!(m.num_joints(), 53);
        assert!((450..=750).contains(&m.num_vertices()), "{}", m.num_vertices());
        // max four influences per vertex
        for row in m.skin_weights.data().chunks(53) {
            assert!(row.iter().filter(|w| **w > 0.0).count() <= 4);
        }
        // jaw hangs off the neck; thumb bases hang off the wrists as well
        assert_eq!(m.parents[JAW], Some(NECK));
        assert_eq!(m.parents[LEFT_HAND_START + 12], Some(LEFT_WRIST));
    }

    #[test]
    fn rest_pose_is_mirror_symmetric() {
        let m = build_toy_model(&ToyModelConfig::default());
        for j in 0..NUM_JOINTS {
            let a = row3(&m.rest_joints, j);
            let b = row3(&m.rest_joints, m.joint_mirror[j]);
            assert!((a - Vector3::new(-b.x, b.y, b.z)).norm() < 1e-12);
        }
        for i in 0..m.num_vertices() {
            let a = row3(&m.template_vertices, i);
            let b = row3(&m.template_vertices, m.vertex_mirror[i]);
            assert!((a - Vector3::new(-b.x, b.y, b.z)).norm() < 1e-12);
        }
    }

    #[test]
    fn same_seed_gives_identical_model() {
        let cfg = ToyModelConfig { vertex_budget: 600, seed: 42 };
        assert_eq!(build_toy_model(&cfg), build_toy_model(&cfg));
        let other = build_toy_model(&ToyModelConfig { seed: 43, ..cfg });
        assert_ne!(build_toy_model(&cfg), other);
    }

    #[test]
    fn rest_pose_reproduces_template() {
        let m = build_toy_model(&ToyModelConfig::default());
        let out = m.forward(&ModelParams::default()).unwrap();
        assert!(out.vertices.max_abs_diff(&m.template_vertices) < 1e-12);
        assert!(out.joints.max_abs_diff(&m.rest_joints) < 1e-12);
    }

    #[test]
    fn root_rotation_is_rigid_about_root() {
        let m = build_toy_model(&ToyModelConfig::default());
        let mut p = ModelParams::default();
        p.theta_body[0] = [0.3, -0.7, 0.2];
        let r = axis_angle_to_matrix(&AxisAngle::new(0.3, -0.7, 0.2)).0;
        let out = m.forward(&p).unwrap();
        let root = row3(&m.rest_joints, 0);
        for j in 0..NUM_JOINTS {
            let expect = r * (row3(&m.rest_joints, j) - root) + root;
            assert!((row3(&out.joints, j) - expect).norm() < 1e-12);
        }
    }

    fn chain_oracle(m: &BodyModel, p: &ModelParams) -> Vec<Vector3<f64>> {
        // rest joints from the shaped template, then 4x4 transforms down each chain
        let v = m.num_vertices();
        let mut shaped = m.template_vertices.data().to_vec();
        for i in 0..v * 3 {
            for b in 0..NUM_BETAS {
                shaped[i] += m.shape_dirs.data()[i * NUM_BETAS + b] * p.beta[b];
            }
            for e in 0..NUM_EXPRESSIONS {
                shaped[i] += m.expr_dirs.data()[i * NUM_EXPRESSIONS + e] * p.psi[e];
            }
        }
        let rest: Vec<Vector3<f64>> = (0..NUM_JOINTS)
            .map(|j| {
                let mut acc = Vector3::zeros();
                for i in 0..v {
                    let w = m.joint_regressor.data()[j * v + i];
                    acc += Vector3::new(shaped[3 * i], shaped[3 * i + 1], shaped[3 * i + 2]) * w;
                }
                acc
            })
            .collect();
        let pose = p.flat_pose();
        let mut global: Vec<Option<Matrix4<f64>>> = vec![None; NUM_JOINTS];
        fn resolve(
            j: usize,
            m: &BodyModel,
            rest: &[Vector3<f64>],
            pose: &[f64],
            global: &mut Vec<Option<Matrix4<f64>>>,
        ) -> Matrix4<f64> {
            if let Some(g) = global[j] {
                return g;
            }
            let r = axis_angle_to_matrix(&AxisAngle::new(pose[3 * j], pose[3 * j + 1], pose[3 * j + 2])).0;
            let offset = match m.parents[j] {
                Some(p) => rest[j] - rest[p],
                None => rest[j],
            };
            let mut local = Matrix4::identity();
            local.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
            local.fixed_view_mut::<3, 1>(0, 3).copy_from(&offset);
            let g = match m.parents[j] {
                Some(p) => resolve(p, m, rest, pose, global) * local,
                None => local,
            };
            global[j] = Some(g);
            g
        }
        (0..NUM_JOINTS)
            .map(|j| {
                let g = resolve(j, m, &rest, &pose, &mut global);
                Vector3::new(g[(0, 3)], g[(1, 3)], g[(2, 3)]) + Vector3::from(p.trans)
            })
            .collect()
    }

    #[test]
    fn joints_match_transform_chain_oracle() {
        let m = build_toy_model(&ToyModelConfig::default());
        for seed in 0..5 {
            let p = random_params(seed, 1.0);
            let out = m.forward(&p).unwrap();
            let oracle = chain_oracle(&m, &p);
            for j in 0..NUM_JOINTS {
                assert!((row3(&out.joints, j) - oracle[j]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn global_rigid_motion_equivariance() {
        let m = build_toy_model(&ToyModelConfig::default());
        let mut p = random_params(3, 0.5);
        p.theta_body[0] = [0.0; 3];
        p.trans = [0.0; 3];
        let base = m.forward(&p).unwrap();
        let g = [0.4, 1.1, -0.6];
        let t = Vector3::new(0.2, -0.3, 4.0);
        let mut q = p.clone();
        q.theta_body[0] = g;
        q.trans = [t.x, t.y, t.z];
        let moved = m.forward(&q).unwrap();
        let r = axis_angle_to_matrix(&AxisAngle::new(g[0], g[1], g[2])).0;
        let root = row3(&base.joints, 0);
        for i in 0..m.num_vertices() {
            let expect = r * (row3(&base.vertices, i) - root) + root + t;
            assert!((row3(&moved.vertices, i) - expect).norm() < 1e-9);
        }
    }

    #[test]
    fn mirrored_params_give_mirrored_mesh() {
        let m = build_toy_model(&ToyModelConfig::default());
        let p = random_params(9, 0.8);
        let a = m.forward(&p).unwrap();
        let b = m.forward(&p.mirrored(&m)).unwrap();
        for i in 0..m.num_vertices() {
            let x = row3(&a.vertices, m.vertex_mirror[i]);
            assert!((row3(&b.vertices, i) - Vector3::new(-x.x, x.y, x.z)).norm() < 1e-9);
        }
    }

    #[test]
    fn cyclic_parents_are_rejected() {
        let mut m = build_toy_model(&ToyModelConfig::default());
        m.parents[1] = Some(4);
        assert!(matches!(m.forward(&ModelParams::default()), Err(Error::InvalidTree(_))));
    }

    #[test]
    fn regressor_cases() {
        let mut m = build_toy_model(&ToyModelConfig::default());
        let v = m.num_vertices();
        let verts = Tensor::from_fn(&[v, 3], |i| (i as f64 * 0.37).sin());
        let mut reg = vec![0.0; NUM_JOINTS * v];
        reg[17] = 1.0; // row 0 one-hot at vertex 17
        for i in 0..v {
            reg[v + i] = 1.0 / v as f64; // row 1 uniform
        }
        m.joint_regressor = Tensor::new(&[NUM_JOINTS, v], reg).unwrap();
        let j = m.regress_joints(&verts).unwrap();
        assert_eq!(j.row(0), verts.row(17));
        for c in 0..3 {
            let mean: f64 = (0..v).map(|i| verts.data()[3 * i + c]).sum::<f64>() / v as f64;
            assert!((j.row(1)[c] - mean).abs() < 1e-12);
        }
        // naive double loop against the built-in regressor
        let m = build_toy_model(&ToyModelConfig::default());
        let j = m.regress_joints(&verts).unwrap();
        for r in 0..NUM_JOINTS {
            for c in 0..3 {
                let mut s = 0.0;
                for i in 0..v {
                    s += m.joint_regressor.data()[r * v + i] * verts.data()[3 * i + c];
                }
                assert!((j.row(r)[c] - s).abs() < 1e-12);
            }
        }
        assert!(m.regress_joints(&Tensor::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn projection_cases() {
        let pts = Tensor::new(&[2, 3], vec![0.0, 0.0, 5.0, 1.0, 0.0, 5000.0]).unwrap();
        let uv = perspective_project(&pts, [5000.0, 5000.0], [96.0, 128.0]).unwrap();
        assert_eq!(uv.data(), &[96.0, 128.0, 97.0, 128.0]);
        let behind = Tensor::new(&[1, 3], vec![0.0, 0.0, -1.0]).unwrap();
        assert!(matches!(
            perspective_project(&behind, [1.0, 1.0], [0.0, 0.0]),
            Err(Error::BehindCamera { index: 0, .. })
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = Tensor::from_fn(&[20, 3], |i| if i % 3 == 2 { rng.random_range(1.0..10.0) } else { rng.random_range(-2.0..2.0) });
        let uv = perspective_project(&pts, [500.0, 480.0], [32.0, 24.0]).unwrap();
        for i in 0..20 {
            let p = pts.row(i);
            assert!((uv.row(i)[0] - (500.0 * p[0] / p[2] + 32.0)).abs() < 1e-12);
            assert!((uv.row(i)[1] - (480.0 * p[1] / p[2] + 24.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_gradients_match_finite_differences() {
        let m = build_toy_model(&ToyModelConfig::default());
        let p = random_params(2, 0.7);
        let v = m.num_vertices();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let wv = Tensor::from_fn(&[v, 3], |_| rng.random_range(-1.0..1.0));
        let wj = Tensor::from_fn(&[NUM_JOINTS, 3], |_| rng.random_range(-1.0..1.0));
        let inputs = [
            Tensor::new(&[NUM_JOINTS, 3], p.flat_pose()).unwrap(),
            Tensor::vector(p.beta.clone()),
            Tensor::vector(p.psi.clone()),
            Tensor::vector(p.trans.to_vec()),
        ];
        let r = GradCheck::new(1e-5, 1e-4)
            .run(
                |t, x| {
                    let out = m.forward_op(t, &ParamVars { pose: x[0], beta: x[1], psi: x[2], trans: x[3] })?;
                    let a = t.sum(t.mul_const(out.vertices, &wv)?)?;
                    let b = t.sum(t.mul_const(out.joints, &wj)?)?;
                    t.add(a, b)
                },
                &inputs,
            )
            .unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn save_and_load_roundtrip() {
        let m = build_toy_model(&ToyModelConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        assert_eq!(BodyModel::load(&path).unwrap(), m);
    }
}
