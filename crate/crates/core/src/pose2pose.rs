//! Joint-centric rotation regression: a feature map is turned into per-joint
//! 3D heatmaps, soft-argmax gives joint coordinates, features are pooled at
//! those coordinates, and one dense layer maps the result to 6D rotations.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::grid_ops::{bilinear_sample_op, reshape_to_volume_op, soft_argmax_3d_op};
use crate::nn::{mlp_forward, Bound, Conv, Linear, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2PoseConfig {
    pub joints: usize,
    pub depth_bins: usize,
    pub in_channels: usize,
    pub joint_channels: usize,
    /// Inverse temperature applied to the heatmap logits.
    pub heat_scale: f64,
}

impl Pose2PoseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 || self.depth_bins == 0 || self.in_channels == 0 || self.joint_channels == 0 || !(self.heat_scale > 0.0) {
            return Err(Error::Config(format!("pose2pose dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// `(joint_channels + 3) * joints`
    pub fn flat_len(&self) -> usize {
        (self.joint_channels + 3) * self.joints
    }

    /// Adds `prefix.heat` and `prefix.feat` 1x1 convolutions.
    pub fn init(&self, store: &mut ParamStore, seed: u64, prefix: &str) {
        store.add_conv(seed, &format!("{prefix}.heat"), self.in_channels, self.joints * self.depth_bins, 1, 1.0);
        store.add_conv(seed, &format!("{prefix}.feat"), self.in_channels, self.joint_channels, 1, 1.0);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Pose2PoseWeights {
    pub heat: Conv,
    pub feat: Conv,
}

impl Pose2PoseWeights {
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            heat: bound.conv(&format!("{prefix}.heat"))?,
            feat: bound.conv(&format!("{prefix}.feat"))?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Pose2PoseOutput {
    /// `[j, 3]` in grid units: column, row, depth bin.
    pub coords: Var,
    /// `[j, depth, h, w]` logits.
    pub heatmap: Var,
    /// `[j, joint_channels]`
    pub joint_features: Var,
    /// `[j, joint_channels + 3]`, rows are `(features, coords)`.
    pub joint_rows: Var,
    /// Row-major flattening of `joint_rows`.
    pub flat: Var,
}

pub fn pose2pose_forward(tape: &Tape, f: Var, w: &Pose2PoseWeights, cfg: &Pose2PoseConfig) -> Result<Pose2PoseOutput> {
    let shape = tape.shape(f);
    if shape.len() != 3 || shape[0] != cfg.in_channels {
        return Err(shape_err(
            "pose2pose_forward",
            format!("feature map {shape:?}, expected {} channels", cfg.in_channels),
        ));
    }
    let heat = w.heat.apply(tape, f, 1)?;
    let heat = tape.scale(heat, cfg.heat_scale)?;
    let heatmap = reshape_to_volume_op(tape, heat, cfg.depth_bins)?;
    let coords = soft_argmax_3d_op(tape, heatmap)?;
    let feat = w.feat.apply(tape, f, 1)?;
    let xy = tape.slice(coords, 1, 0, 2)?;
    let joint_features = bilinear_sample_op(tape, feat, xy)?;
    let joint_rows = tape.concat(&[joint_features, coords], 1)?;
    let flat = tape.flatten(joint_rows)?;
    Ok(Pose2PoseOutput {
        coords,
        heatmap,
        joint_features,
        joint_rows,
        flat,
    })
}

/// Dense rotation head: `prefix.0 ... prefix.{hidden}`; the last layer emits
/// `6 * n_out` values and its bias starts at the identity rotation.
pub fn init_rotation_head(store: &mut ParamStore, seed: u64, prefix: &str, inp: usize, hidden: &[usize], n_out: usize) {
    let mut dims = vec![inp];
    dims.extend_from_slice(hidden);
    dims.push(6 * n_out);
    let last = dims.len() - 2;
    for l in 0..dims.len() - 1 {
        let gain = if l == last { 0.1 } else { 1.0 };
        store.add_linear(seed, &format!("{prefix}.{l}"), dims[l], dims[l + 1], gain);
    }
    let bias = store.get_mut(&format!("{prefix}.{last}.b")).expect("just inserted");
    for (i, b) in bias.data_mut().iter_mut().enumerate() {
        *b = if i % 6 == 0 || i % 6 == 4 { 1.0 } else { 0.0 };
    }
}

/// `[n_out, 6]` rotations from `v` (optionally followed by `extra`).
pub fn regress_rotations(tape: &Tape, v: Var, extra: Option<Var>, head: &[Linear], n_out: usize) -> Result<Var> {
    let input = match extra {
        Some(e) => tape.concat(&[v, e], 0)?,
        None => v,
    };
    let (expect_in, expect_out) = {
        let first = tape.value(head.first().ok_or_else(|| shape_err("regress_rotations", String::from("empty head")))?.w);
        let last = tape.value(head.last().expect("non-empty").w);
        (first.shape()[1], last.shape()[0])
    };
    let len = tape.value(input).numel();
    if len != expect_in || expect_out != 6 * n_out {
        return Err(shape_err(
            "regress_rotations",
            format!("input {len} / output {} against head {expect_in} -> {expect_out}", 6 * n_out),
        ));
    }
    let out = mlp_forward(tape, head, input)?;
    tape.reshape(out, &[n_out, 6])
}

/// What the rotation regressor sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressorInput {
    Gap,
    JointFeat,
    Coord2d,
    Coord3d,
    Coord3dPlusFeat,
}

impl RegressorInput {
    pub const ALL: [RegressorInput; 5] = [
        RegressorInput::Gap,
        RegressorInput::JointFeat,
        RegressorInput::Coord2d,
        RegressorInput::Coord3d,
        RegressorInput::Coord3dPlusFeat,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Gap => "gap",
            Self::JointFeat => "joint_feat",
            Self::Coord2d => "coord2d",
            Self::Coord3d => "coord3d",
            Self::Coord3dPlusFeat => "coord3d_plus_feat",
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Gap => "GAP feat.",
            Self::JointFeat => "Joint feat.",
            Self::Coord2d => "2D joint coord.",
            Self::Coord3d => "3D joint coord.",
            Self::Coord3dPlusFeat => "3D joint coord. + joint feat.",
        }
    }

    pub fn input_len(&self, cfg: &Pose2PoseConfig) -> usize {
        match self {
            Self::Gap => cfg.in_channels,
            Self::JointFeat => cfg.joint_channels * cfg.joints,
            Self::Coord2d => 2 * cfg.joints,
            Self::Coord3d => 3 * cfg.joints,
            Self::Coord3dPlusFeat => cfg.flat_len(),
        }
    }
}

impl FromStr for RegressorInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnknownMode(s.to_string()))
    }
}

/// Regressor input for `mode` built from a Pose2Pose pass over `f`.
pub fn variant_inputs(tape: &Tape, mode: RegressorInput, out: &Pose2PoseOutput, f: Var) -> Result<Var> {
    match mode {
        RegressorInput::Gap => tape.mean_pool_spatial(f),
        RegressorInput::JointFeat => tape.flatten(out.joint_features),
        RegressorInput::Coord2d => tape.flatten(tape.slice(out.coords, 1, 0, 2)?),
        RegressorInput::Coord3d => tape.flatten(out.coords),
        RegressorInput::Coord3dPlusFeat => Ok(out.flat),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{GradCheck, Tensor};
    use crate::grid_ops::bilinear_sample;
    use crate::rotations::rot6d_to_matrix_op;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const CFG: Pose2PoseConfig = Pose2PoseConfig {
        joints: 3,
        depth_bins: 4,
        in_channels: 5,
        joint_channels: 2,
        heat_scale: 1.0,
    };

    fn setup(seed: u64) -> (ParamStore, Tensor) {
        let mut store = ParamStore::new();
        CFG.init(&mut store, seed, "p2p");
        init_rotation_head(&mut store, seed, "rot", CFG.flat_len(), &[], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Tensor::from_fn(&[CFG.in_channels, 6, 5], |_| rng.random_range(-1.0..1.0));
        (store, f)
    }

    #[test]
    fn output_shapes_and_hull() {
        let (store, f) = setup(1);
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let fv = tape.constant(f);
        let out = pose2pose_forward(&tape, fv, &Pose2PoseWeights::bind(&b, "p2p").unwrap(), &CFG).unwrap();
        assert_eq!(tape.shape(out.coords), [3, 3]);
        assert_eq!(tape.shape(out.joint_features), [3, 2]);
        assert_eq!(tape.shape(out.flat), [15]);
        assert_eq!(tape.shape(out.heatmap), [3, 4, 6, 5]);
        for r in tape.value(out.coords).data().chunks(3) {
            assert!((0.0..=4.0).contains(&r[0]) && (0.0..=5.0).contains(&r[1]) && (0.0..=3.0).contains(&r[2]));
        }
    }

    #[test]
    fn joint_features_match_independent_sampling() {
        let (store, f) = setup(2);
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let w = Pose2PoseWeights::bind(&b, "p2p").unwrap();
        let fv = tape.constant(f);
        let out = pose2pose_forward(&tape, fv, &w, &CFG).unwrap();
        let feat = tape.value(w.feat.apply(&tape, fv, 1).unwrap()).clone();
        let coords = tape.value(out.coords).clone();
        let jf = tape.value(out.joint_features).clone();
        for j in 0..3 {
            let expect = bilinear_sample(&feat, coords.row(j)[0], coords.row(j)[1]).unwrap();
            for c in 0..2 {
                assert!((jf.row(j)[c] - expect[c]).abs() < 1e-12);
            }
        }
        let flat = tape.value(out.flat).clone();
        for j in 0..3 {
            assert_eq!(&flat.data()[5 * j..5 * j + 2], jf.row(j));
            assert_eq!(&flat.data()[5 * j + 2..5 * j + 5], coords.row(j));
        }
    }

    #[test]
    fn variant_lengths_and_gap() {
        let (store, f) = setup(3);
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let fv = tape.constant(f.clone());
        let out = pose2pose_forward(&tape, fv, &Pose2PoseWeights::bind(&b, "p2p").unwrap(), &CFG).unwrap();
        for mode in RegressorInput::ALL {
            let v = variant_inputs(&tape, mode, &out, fv).unwrap();
            assert_eq!(tape.value(v).numel(), mode.input_len(&CFG), "{mode:?}");
        }
        let v = variant_inputs(&tape, RegressorInput::Coord3dPlusFeat, &out, fv).unwrap();
        assert_eq!(tape.value(v).data(), tape.value(out.flat).data());
        let gap = variant_inputs(&tape, RegressorInput::Gap, &out, fv).unwrap();
        for c in 0..5 {
            let mut s = 0.0;
            for i in 0..30 {
                s += f.data()[c * 30 + i];
            }
            assert!((tape.value(gap).data()[c] - s / 30.0).abs() < 1e-12);
        }
        assert!(matches!("bogus".parse::<RegressorInput>(), Err(Error::UnknownMode(_))));
        assert_eq!("coord3d".parse::<RegressorInput>().unwrap(), RegressorInput::Coord3d);
    }

    #[test]
    fn rotation_head_contract() {
        let mut store = ParamStore::new();
        init_rotation_head(&mut store, 0, "rot", 4, &[], 3);
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let head = b.mlp("rot").unwrap();
        let v = tape.constant(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]));
        let r = regress_rotations(&tape, v, None, &head, 3).unwrap();
        assert_eq!(tape.shape(r), [3, 6]);
        assert!(regress_rotations(&tape, v, None, &head, 2).is_err());
        let extra = tape.constant(Tensor::vector(vec![1.0]));
        assert!(regress_rotations(&tape, v, Some(extra), &head, 3).is_err());

        // zero weights and bias give zero 6D vectors
        let mut zero = store.clone();
        for (_, t) in zero.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let tape = Tape::new();
        let b = zero.bind(&tape, false);
        let v = tape.constant(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]));
        let r = regress_rotations(&tape, v, None, &b.mlp("rot").unwrap(), 3).unwrap();
        assert!(tape.value(r).data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn regressor_gradient_wrt_input() {
        let mut store = ParamStore::new();
        init_rotation_head(&mut store, 5, "rot", 6, &[4], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = Tensor::from_fn(&[6], |_| rng.random_range(-1.0..1.0));
        let wts = Tensor::from_fn(&[2, 6], |_| rng.random_range(-1.0..1.0));
        let r = GradCheck::new(1e-6, 1e-4)
            .run(
                |t, x| {
                    let b = store.bind(t, false);
                    let out = regress_rotations(t, x[0], None, &b.mlp("rot")?, 2)?;
                    t.sum(t.mul_const(out, &wts)?)
                },
                &[v],
            )
            .unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn end_to_end_gradient_wrt_feature_map() {
        let (mut store, f) = setup(4);
        // larger heat weights give peaked, position-sensitive distributions
        for x in store.get_mut("p2p.heat.w").unwrap().data_mut() {
            *x *= 3.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let wts = Tensor::from_fn(&[2, 9], |_| rng.random_range(-1.0..1.0));
        let r = GradCheck::new(1e-6, 1e-3)
            .run(
                |t, x| {
                    let b = store.bind(t, false);
                    let out = pose2pose_forward(t, x[0], &Pose2PoseWeights::bind(&b, "p2p")?, &CFG)?;
                    let six = regress_rotations(t, out.flat, None, &b.mlp("rot")?, 2)?;
                    let m = rot6d_to_matrix_op(t, six)?;
                    t.sum(t.mul_const(m, &wts)?)
                },
                &[f],
            )
            .unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn heatmap_shift_moves_coordinates_by_one_cell() {
        // logits supported away from the border, shifted one column right
        let mut logits = Tensor::full(&[1, 3, 6, 7], -30.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in 0..3 {
            for y in 2..4 {
                for x in 1..4 {
                    logits.data_mut()[(d * 6 + y) * 7 + x] = rng.random_range(-1.0..1.0);
                }
            }
        }
        let mut shifted = Tensor::full(&[1, 3, 6, 7], -30.0);
        for d in 0..3 {
            for y in 0..6 {
                for x in 1..7 {
                    shifted.data_mut()[(d * 6 + y) * 7 + x] = logits.data()[(d * 6 + y) * 7 + x - 1];
                }
            }
        }
        let a = crate::grid_ops::soft_argmax_3d(&logits).unwrap();
        let b = crate::grid_ops::soft_argmax_3d(&shifted).unwrap();
        assert!((b.data()[0] - a.data()[0] - 1.0).abs() < 1e-6);
        assert!((b.data()[1] - a.data()[1]).abs() < 1e-6);
        assert!((b.data()[2] - a.data()[2]).abs() < 1e-6);
    }
}
