//! Rotation representations: the continuous 6D parameterization predicted
//! by the regressors, axis-angle (the model's pose format), rotation
//! matrices, and the left/right mirror used when hands are flipped.
//!
//! Matrices are flattened row-major when they live on a tape, so a batch of
//! `n` rotations is an `[n, 9]` tensor.

use nalgebra::{Matrix3, Vector3};

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Below this angle Rodrigues switches to its Taylor expansion.
pub const SMALL_ANGLE: f64 = 1e-8;
/// Below this norm a 6D column (or its cross product) counts as collapsed.
pub const DEGENERATE_6D: f64 = 1e-12;
const ORTHONORMAL_TOL: f64 = 1e-6;

/// Two unnormalized 3-vectors `(a1, a2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rot6D(pub [f64; 6]);

/// Axis scaled by angle in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisAngle(pub Vector3<f64>);

/// Proper rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotMat(pub Matrix3<f64>);

impl AxisAngle {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self(Vector3::new(x, y, z))
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }
}

impl RotMat {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Row-major flattening.
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn from_row_major(r: &[f64]) -> Self {
        Self(Matrix3::from_row_slice(&r[..9]))
    }
}

/// Gram-Schmidt on `(a1, a2)`; the third column is `b1 x b2`.
pub fn rot6d_to_matrix(r: &Rot6D) -> Result<RotMat> {
    let a1 = Vector3::new(r.0[0], r.0[1], r.0[2]);
    let a2 = Vector3::new(r.0[3], r.0[4], r.0[5]);
    let (b1, b2, b3, _, _) = gram_schmidt(&a1, &a2)?;
    Ok(RotMat(Matrix3::from_columns(&[b1, b2, b3])))
}

type Frame = (Vector3<f64>, Vector3<f64>, Vector3<f64>, f64, f64);

fn gram_schmidt(a1: &Vector3<f64>, a2: &Vector3<f64>) -> Result<Frame> {
    let n1 = a1.norm();
    if !(n1 >= DEGENERATE_6D) {
        return Err(Error::DegenerateInput(format!("|a1| = {n1:e}")));
    }
    if !(a1.cross(a2).norm() >= DEGENERATE_6D) {
        return Err(Error::DegenerateInput("a2 is parallel to a1".into()));
    }
    let b1 = a1 / n1;
    let u = a2 - b1 * b1.dot(a2);
    let nu = u.norm();
    let b2 = u / nu;
    let b3 = b1.cross(&b2);
    Ok((b1, b2, b3, n1, nu))
}

/// Rodrigues' formula. Total on finite input.
pub fn axis_angle_to_matrix(v: &AxisAngle) -> RotMat {
    let (a, b) = rodrigues_coeffs(v.0.norm_squared());
    let k = v.0.cross_matrix();
    RotMat(Matrix3::identity() + k * a + k * k * b)
}

/// `(sin t / t, (1 - cos t) / t^2)` as functions of `s = t^2`.
fn rodrigues_coeffs(s: f64) -> (f64, f64) {
    let t = s.sqrt();
    if t < SMALL_ANGLE {
        (1.0 - s / 6.0, 0.5 - s / 24.0)
    } else {
        let half = (0.5 * t).sin();
        (t.sin() / t, 2.0 * half * half / s)
    }
}

/// Derivatives of the Rodrigues coefficients with respect to `s = t^2`.
fn rodrigues_coeff_derivs(s: f64) -> (f64, f64) {
    let t = s.sqrt();
    if t < 1e-2 {
        (
            -1.0 / 6.0 + s / 60.0 - s * s / 1680.0,
            -1.0 / 24.0 + s / 360.0 - s * s / 13440.0,
        )
    } else {
        let (sn, cs) = t.sin_cos();
        let half = (0.5 * t).sin();
        let one_minus_cos = 2.0 * half * half;
        (
            (t * cs - sn) / (2.0 * t * s),
            (t * sn - 2.0 * one_minus_cos) / (2.0 * s * s),
        )
    }
}

/// Inverse of Rodrigues with the angle in `[0, pi]`.
///
/// At exactly `pi` the axis sign is chosen so that its largest-magnitude
/// component is positive.
pub fn matrix_to_axis_angle(m: &RotMat) -> Result<AxisAngle> {
    let r = &m.0;
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if !(err <= ORTHONORMAL_TOL) || !((det - 1.0).abs() <= ORTHONORMAL_TOL) {
        return Err(Error::NotARotation(format!(
            "|R^T R - I| = {err:e}, det = {det}"
        )));
    }
    Ok(AxisAngle(log_map(r)))
}

fn skew_part(r: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    )
}

const NEAR_PI: f64 = 1e-3;

fn log_map(r: &Matrix3<f64>) -> Vector3<f64> {
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = c.acos();
    let w = skew_part(r);
    if theta < 1e-6 {
        return w * (0.5 + theta * theta / 12.0);
    }
    if theta < std::f64::consts::PI - NEAR_PI {
        return w * (theta / (2.0 * theta.sin()));
    }
    // Near pi the skew part vanishes; read the axis off k k^T instead.
    let kkt = (r + r.transpose() - Matrix3::identity() * (2.0 * c)) / (2.0 * (1.0 - c));
    let i = (0..3)
        .max_by(|&a, &b| kkt[(a, a)].total_cmp(&kkt[(b, b)]))
        .unwrap_or(0);
    let ki = kkt[(i, i)].max(0.0).sqrt();
    let mut k = Vector3::new(kkt[(0, i)], kkt[(1, i)], kkt[(2, i)]) / ki;
    k[i] = ki;
    k /= k.norm();
    if w.norm() > 1e-9 {
        if k.dot(&w) < 0.0 {
            k = -k;
        }
    } else {
        let j = (0..3)
            .max_by(|&a, &b| k[a].abs().total_cmp(&k[b].abs()))
            .unwrap_or(0);
        if k[j] < 0.0 {
            k = -k;
        }
    }
    k * theta
}

/// Conjugation by the sagittal mirror `diag(-1, 1, 1)`.
pub fn mirror_rotation(v: &AxisAngle) -> AxisAngle {
    AxisAngle::new(v.0.x, -v.0.y, -v.0.z)
}

fn rows(tape: &Tape, x: Var, width: usize, op: &'static str) -> Result<usize> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != width {
        return Err(shape_err(op, format!("expected [n, {width}], got {shape:?}")));
    }
    Ok(shape[0])
}

/// `[n, 6] -> [n, 9]` on the tape.
pub fn rot6d_to_matrix_op(tape: &Tape, x: Var) -> Result<Var> {
    let n = rows(tape, x, 6, "rot6d_to_matrix")?;
    let mut out = Vec::with_capacity(n * 9);
    {
        let v = tape.value(x);
        for r in v.data().chunks(6) {
            let m = rot6d_to_matrix(&Rot6D(r.try_into().expect("chunk of 6")))?;
            out.extend_from_slice(&m.to_row_major());
        }
    }
    tape.custom(&[x], Tensor::new(&[n, 9], out)?, Box::new(Rot6dToMatrix))
}

struct Rot6dToMatrix;

impl CustomOp for Rot6dToMatrix {
    fn name(&self) -> &'static str {
        "rot6d_to_matrix"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut gx = Vec::with_capacity(inputs[0].numel());
        for (r, gm) in inputs[0].data().chunks(6).zip(g.chunks(9)) {
            let a1 = Vector3::new(r[0], r[1], r[2]);
            let a2 = Vector3::new(r[3], r[4], r[5]);
            let (b1, b2, _, n1, nu) = gram_schmidt(&a1, &a2).expect("validated in forward");
            let gm = Matrix3::from_row_slice(gm);
            let (gc1, gc2, gc3) = (gm.column(0), gm.column(1), gm.column(2));
            let mut gb1 = gc1 + b2.cross(&gc3);
            let gb2 = gc2 + gc3.cross(&b1);
            let gu = (gb2 - b2 * b2.dot(&gb2)) / nu;
            let ga2 = gu - b1 * b1.dot(&gu);
            gb1 -= gu * b1.dot(&a2) + a2 * b1.dot(&gu);
            let ga1 = (gb1 - b1 * b1.dot(&gb1)) / n1;
            gx.extend_from_slice(&[ga1.x, ga1.y, ga1.z, ga2.x, ga2.y, ga2.z]);
        }
        vec![Some(gx)]
    }
}

/// `[n, 3] -> [n, 9]` on the tape.
pub fn axis_angle_to_matrix_op(tape: &Tape, x: Var) -> Result<Var> {
    let n = rows(tape, x, 3, "axis_angle_to_matrix")?;
    let mut out = Vec::with_capacity(n * 9);
    {
        let v = tape.value(x);
        for r in v.data().chunks(3) {
            let m = axis_angle_to_matrix(&AxisAngle::new(r[0], r[1], r[2]));
            out.extend_from_slice(&m.to_row_major());
        }
    }
    tape.custom(&[x], Tensor::new(&[n, 9], out)?, Box::new(AxisAngleToMatrix))
}

struct AxisAngleToMatrix;

impl CustomOp for AxisAngleToMatrix {
    fn name(&self) -> &'static str {
        "axis_angle_to_matrix"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut gx = Vec::with_capacity(inputs[0].numel());
        for (r, gm) in inputs[0].data().chunks(3).zip(g.chunks(9)) {
            let v = Vector3::new(r[0], r[1], r[2]);
            let s = v.norm_squared();
            let (a, b) = rodrigues_coeffs(s);
            let (da, db) = rodrigues_coeff_derivs(s);
            let k = v.cross_matrix();
            let k2 = k * k;
            let gm = Matrix3::from_row_slice(gm);
            let radial = 2.0 * (da * gm.dot(&k) + db * gm.dot(&k2));
            let gv = v * radial
                + skew_part(&gm) * a
                + skew_part(&(gm * k.transpose() + k.transpose() * gm)) * b;
            gx.extend_from_slice(&[gv.x, gv.y, gv.z]);
        }
        vec![Some(gx)]
    }
}

/// `[n, 9] -> [n, 3]` on the tape.
pub fn matrix_to_axis_angle_op(tape: &Tape, x: Var) -> Result<Var> {
    let n = rows(tape, x, 9, "matrix_to_axis_angle")?;
    let mut out = Vec::with_capacity(n * 3);
    {
        let v = tape.value(x);
        for r in v.data().chunks(9) {
            let aa = matrix_to_axis_angle(&RotMat::from_row_major(r))?;
            out.extend_from_slice(aa.0.as_slice());
        }
    }
    tape.custom(&[x], Tensor::new(&[n, 3], out)?, Box::new(MatrixToAxisAngle))
}

struct MatrixToAxisAngle;

impl CustomOp for MatrixToAxisAngle {
    fn name(&self) -> &'static str {
        "matrix_to_axis_angle"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut gx = Vec::with_capacity(inputs[0].numel());
        for (r, gv) in inputs[0].data().chunks(9).zip(g.chunks(3)) {
            let m = Matrix3::from_row_slice(r);
            let gv = Vector3::new(gv[0], gv[1], gv[2]);
            let c = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
            let theta = c.acos();
            let mut gm = Matrix3::zeros();
            if theta >= std::f64::consts::PI - NEAR_PI {
                // The closed form divides by sin(theta) here; differentiate
                // the forward branch numerically instead.
                let h = 1e-7;
                let mut probe = m;
                for i in 0..3 {
                    for j in 0..3 {
                        let orig = probe[(i, j)];
                        probe[(i, j)] = orig + h;
                        let plus = log_map(&probe);
                        probe[(i, j)] = orig - h;
                        let minus = log_map(&probe);
                        probe[(i, j)] = orig;
                        gm[(i, j)] = gv.dot(&(plus - minus)) / (2.0 * h);
                    }
                }
            } else {
                let w = skew_part(&m);
                let (f, trace_coeff) = if theta < 1e-3 {
                    let t2 = theta * theta;
                    // f'(t) / sin(t) = 1/6 + t^2/15 + O(t^4)
                    (0.5 + t2 / 12.0, -(1.0 / 6.0 + t2 / 15.0) * 0.5)
                } else {
                    let (sn, cs) = theta.sin_cos();
                    (
                        theta / (2.0 * sn),
                        -(sn - theta * cs) / (4.0 * sn * sn * sn),
                    )
                };
                let gw = gv * f;
                gm[(2, 1)] += gw.x;
                gm[(1, 2)] -= gw.x;
                gm[(0, 2)] += gw.y;
                gm[(2, 0)] -= gw.y;
                gm[(1, 0)] += gw.z;
                gm[(0, 1)] -= gw.z;
                let diag = gv.dot(&w) * trace_coeff;
                for i in 0..3 {
                    gm[(i, i)] += diag;
                }
            }
            gx.extend_from_slice(&RotMat(gm).to_row_major());
        }
        vec![Some(gx)]
    }
}

/// Applies [`mirror_rotation`] to every row of an `[n, 3]` axis-angle batch.
pub fn mirror_axis_angle_op(tape: &Tape, x: Var) -> Result<Var> {
    let n = rows(tape, x, 3, "mirror_rotation")?;
    let signs = Tensor::from_fn(&[n, 3], |i| if i % 3 == 0 { 1.0 } else { -1.0 });
    tape.mul_const(x, &signs)
}
