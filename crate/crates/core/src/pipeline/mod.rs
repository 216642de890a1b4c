//! Body, hand and face networks wired into one differentiable graph.
//!
//! Phase one of the body network predicts body joints and the hand/face
//! boxes. Hands are cropped from the full-resolution image (the left one
//! mirrored so a single network serves both), their knuckle features are
//! handed back to the body rotation regressor, and the face network works
//! on its own crop. All outputs feed the body model.

mod config;

pub use config::{LossWeights, PipelineConfig, Profile, WristInputMode};

use crate::autodiff::{Tape, Tensor, Var};
use crate::body_model::{BodyModel, MeshVars, ModelParams, ParamVars, NUM_BETAS, NUM_BODY_JOINTS, NUM_EXPRESSIONS, NUM_HAND_JOINTS};
use crate::error::{shape_err, Error, Result};
use crate::grid_ops::{bilinear_sample_op, hflip_image_op, roi_align_op, soft_argmax_2d_op, BoundingBox};
use crate::nn::{Bound, ParamStore};
use crate::pose2pose::{
    init_rotation_head, pose2pose_forward, regress_rotations, variant_inputs, Pose2PoseConfig, Pose2PoseOutput,
    Pose2PoseWeights,
};
use crate::rotations::{matrix_to_axis_angle_op, mirror_axis_angle_op, rot6d_to_matrix_op};

/// Row order of the box tensor.
pub const LHAND_BOX: usize = 0;
pub const RHAND_BOX: usize = 1;
pub const FACE_BOX: usize = 2;

pub fn body_pose2pose(cfg: &PipelineConfig) -> Pose2PoseConfig {
    Pose2PoseConfig {
        joints: NUM_BODY_JOINTS,
        depth_bins: cfg.depth_bins,
        in_channels: cfg.backbone_channels[2],
        joint_channels: cfg.joint_channels,
        heat_scale: cfg.heatmap_scale,
    }
}

pub fn hand_pose2pose(cfg: &PipelineConfig) -> Pose2PoseConfig {
    Pose2PoseConfig {
        joints: NUM_HAND_JOINTS,
        ..body_pose2pose(cfg)
    }
}

/// Length of the hand features appended to the body regressor input.
pub fn wrist_extra_len(cfg: &PipelineConfig) -> usize {
    match cfg.wrist_input_mode {
        WristInputMode::BodyOnly => 0,
        WristInputMode::BodyPlusHandGap => 2 * cfg.backbone_channels[2],
        WristInputMode::BodyPlusAllJoints => 2 * hand_pose2pose(cfg).flat_len(),
        WristInputMode::BodyPlusMcp => 8 * (cfg.joint_channels + 3),
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn init_backbone(s: &mut ParamStore, seed: u64, prefix: &str, cfg: &PipelineConfig) {
    let c = cfg.backbone_channels;
    s.add_conv(seed, &format!("{prefix}.conv0"), 3, c[0], 3, 1.0);
    s.add_conv(seed, &format!("{prefix}.conv1"), c[0], c[1], 3, 1.0);
    s.add_conv(seed, &format!("{prefix}.conv2"), c[1], c[2], 3, 1.0);
}

/// Fresh weights for `cfg`; a weight shared by two configurations gets the
/// same initial value in both.
pub fn init_weights(cfg: &PipelineConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    let (body, hand) = (body_pose2pose(cfg), hand_pose2pose(cfg));
    let c2 = cfg.backbone_channels[2];
    for prefix in ["body.backbone", "hand.backbone", "face.backbone"] {
        init_backbone(&mut s, seed, prefix, cfg);
    }
    body.init(&mut s, seed, "body.p2p");
    hand.init(&mut s, seed, "hand.p2p");

    s.add_conv(seed, "body.box.conv0", c2 + body.joints * body.depth_bins, cfg.box_channels, 1, 1.0);
    s.add_conv(seed, "body.box.conv1", cfg.box_channels, 3, 3, 1.0);
    for (prefix, frac) in [("body.box.hand_size", 0.2), ("body.box.face_size", 0.15)] {
        s.add_linear(seed, &format!("{prefix}.0"), c2, cfg.box_hidden, 1.0);
        s.add_linear(seed, &format!("{prefix}.1"), cfg.box_hidden, 2, 0.1);
        s.get_mut(&format!("{prefix}.1.b"))?.data_mut().fill(logit(frac));
    }

    let body_in = cfg.regressor_input.input_len(&body) + wrist_extra_len(cfg);
    init_rotation_head(&mut s, seed, "body.rot", body_in, &cfg.regressor_hidden, NUM_BODY_JOINTS);
    init_rotation_head(&mut s, seed, "hand.rot", cfg.regressor_input.input_len(&hand), &cfg.regressor_hidden, NUM_HAND_JOINTS);
    s.add_linear(seed, "body.cam", c2, NUM_BETAS + 3, 0.1);

    s.add_linear(seed, "face.head", c2, 6 + NUM_EXPRESSIONS, 0.1);
    let b = s.get_mut("face.head.b")?.data_mut();
    b[0] = 1.0;
    b[4] = 1.0;
    Ok(s)
}

#[derive(Clone, Copy, Debug)]
pub struct BackboneOutput {
    /// Output of the first stage, before any injected features.
    pub block1: Var,
    pub features: Var,
}

/// Three 3x3 convolutions with ReLU; 2x2 average pooling after the first
/// two gives an overall stride of 4. `inject` is added to the first-stage
/// output.
pub fn backbone_forward(tape: &Tape, bound: &Bound, prefix: &str, x: Var, inject: Option<Var>) -> Result<BackboneOutput> {
    let h = tape.relu(bound.conv(&format!("{prefix}.conv0"))?.apply(tape, x, 1)?)?;
    let block1 = tape.avg_pool2(h)?;
    let h = match inject {
        Some(extra) => tape.add(block1, extra)?,
        None => block1,
    };
    let h = tape.relu(bound.conv(&format!("{prefix}.conv1"))?.apply(tape, h, 1)?)?;
    let h = tape.avg_pool2(h)?;
    let features = tape.relu(bound.conv(&format!("{prefix}.conv2"))?.apply(tape, h, 1)?)?;
    Ok(BackboneOutput { block1, features })
}

#[derive(Clone, Copy, Debug)]
pub struct Phase1 {
    pub backbone: BackboneOutput,
    pub pose: Pose2PoseOutput,
    /// Box-center heatmap logits `[3, gh, gw]`.
    pub box_maps: Var,
    /// `[3, 4]` rows `(cx, cy, w, h)` in full-image pixels; see [`LHAND_BOX`].
    pub boxes: Var,
}

fn size_head(tape: &Tape, bound: &Bound, prefix: &str, rows: Var) -> Result<Var> {
    let layers = bound.mlp(prefix)?;
    let mut h = rows;
    for (i, l) in layers.iter().enumerate() {
        h = l.apply_rows(tape, h)?;
        h = if i + 1 < layers.len() { tape.relu(h)? } else { tape.sigmoid(h)? };
    }
    Ok(h)
}

/// Body backbone, body joints and hand/face boxes from the half-resolution image.
pub fn bodynet_phase1(tape: &Tape, bound: &Bound, cfg: &PipelineConfig, body_image: Var) -> Result<Phase1> {
    let [hb, wb] = cfg.body_size();
    let shape = tape.shape(body_image);
    if shape != [3, hb, wb] {
        return Err(shape_err("bodynet_phase1", format!("body image {shape:?}, expected [3, {hb}, {wb}]")));
    }
    let p2p = body_pose2pose(cfg);
    let backbone = backbone_forward(tape, bound, "body.backbone", body_image, None)?;
    let pose = pose2pose_forward(tape, backbone.features, &Pose2PoseWeights::bind(bound, "body.p2p")?, &p2p)?;

    let [gh, gw] = cfg.body_grid();
    let heat = tape.reshape(pose.heatmap, &[p2p.joints * p2p.depth_bins, gh, gw])?;
    let x = tape.concat(&[backbone.features, heat], 0)?;
    let h = tape.relu(bound.conv("body.box.conv0")?.apply(tape, x, 1)?)?;
    let box_maps = bound.conv("body.box.conv1")?.apply(tape, h, 1)?;
    let centers_grid = soft_argmax_2d_op(tape, box_maps)?;
    let stride = (cfg.image_size[0] / gh) as f64;
    let centers = tape.offset(tape.scale(centers_grid, stride)?, (stride - 1.0) / 2.0)?;

    let pooled = bilinear_sample_op(tape, backbone.features, centers_grid)?;
    let hand_sizes = size_head(tape, bound, "body.box.hand_size", tape.slice(pooled, 0, 0, 2)?)?;
    let face_size = size_head(tape, bound, "body.box.face_size", tape.slice(pooled, 0, 2, 1)?)?;
    let sizes = tape.concat(&[hand_sizes, face_size], 0)?;
    let [h_img, w_img] = cfg.image_size;
    let sizes = tape.mul_const(sizes, &Tensor::from_fn(&[3, 2], |i| if i % 2 == 0 { w_img as f64 } else { h_img as f64 }))?;
    let boxes = tape.concat(&[centers, sizes], 1)?;
    Ok(Phase1 {
        backbone,
        pose,
        box_maps,
        boxes,
    })
}

/// Body first-stage features under `hand_box`, resampled to the hand
/// network's first-stage resolution (mirrored for the left hand).
pub fn body_feature_injection(
    tape: &Tape,
    cfg: &PipelineConfig,
    body_block1: Var,
    hand_box: Var,
    mirror: bool,
) -> Result<Var> {
    let shape = tape.shape(body_block1);
    let [hb, wb] = cfg.body_size();
    if shape != [cfg.backbone_channels[0], hb / 2, wb / 2] {
        return Err(shape_err("body_feature_injection", format!("body features {shape:?}")));
    }
    // first-stage cells are 4 full-image pixels wide
    let scaled = tape.mul_const(hand_box, &Tensor::vector(vec![0.25; 4]))?;
    let shift = tape.constant(Tensor::vector(vec![-0.375, -0.375, 0.0, 0.0]));
    let grid_box = tape.add(scaled, shift)?;
    let side = cfg.hand_size / 2;
    let crop = roi_align_op(tape, body_block1, grid_box, side, side)?;
    if mirror {
        hflip_image_op(tape, crop)
    } else {
        Ok(crop)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HandBranch {
    pub crop: Var,
    pub backbone: BackboneOutput,
    pub pose: Pose2PoseOutput,
    /// `[15, 3]` axis-angle in the subject's frame.
    pub theta: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct HandOutput {
    pub right: HandBranch,
    /// Left hand, processed as a mirrored right hand; its coordinates are
    /// in the mirrored crop.
    pub left: HandBranch,
    /// Knuckle rows `(features, coords)` of the right then the left hand.
    pub v_m: Var,
}

fn rotations_to_axis_angle(tape: &Tape, six: Var) -> Result<Var> {
    matrix_to_axis_angle_op(tape, rot6d_to_matrix_op(tape, six)?)
}

/// Finger rotations of both hands from crops of the full-resolution image.
pub fn handnet_forward(
    tape: &Tape,
    bound: &Bound,
    cfg: &PipelineConfig,
    image: Var,
    rhand_box: Var,
    lhand_box: Var,
    body_block1: Option<Var>,
) -> Result<HandOutput> {
    let p2p = hand_pose2pose(cfg);
    let weights = Pose2PoseWeights::bind(bound, "hand.p2p")?;
    let head = bound.mlp("hand.rot")?;
    let branch = |hand_box: Var, mirror: bool| -> Result<HandBranch> {
        let crop = roi_align_op(tape, image, hand_box, cfg.hand_size, cfg.hand_size)?;
        let crop = if mirror { hflip_image_op(tape, crop)? } else { crop };
        let inject = if cfg.finger_body_feature {
            let block1 = body_block1.ok_or_else(|| Error::Config("body features required for injection".into()))?;
            Some(body_feature_injection(tape, cfg, block1, hand_box, mirror)?)
        } else {
            None
        };
        let backbone = backbone_forward(tape, bound, "hand.backbone", crop, inject)?;
        let pose = pose2pose_forward(tape, backbone.features, &weights, &p2p)?;
        let input = variant_inputs(tape, cfg.regressor_input, &pose, backbone.features)?;
        let six = regress_rotations(tape, input, None, &head, NUM_HAND_JOINTS)?;
        let theta = rotations_to_axis_angle(tape, six)?;
        let theta = if mirror { mirror_axis_angle_op(tape, theta)? } else { theta };
        Ok(HandBranch {
            crop,
            backbone,
            pose,
            theta,
        })
    };
    let right = branch(rhand_box, false)?;
    let left = branch(lhand_box, true)?;
    let mcp = cfg.mcp_local;
    let r = tape.gather_rows(right.pose.joint_rows, &mcp)?;
    let l = tape.gather_rows(left.pose.joint_rows, &mcp)?;
    let v_m = tape.flatten(tape.concat(&[r, l], 0)?)?;
    Ok(HandOutput { right, left, v_m })
}

#[derive(Clone, Copy, Debug)]
pub struct Phase2 {
    /// `[22, 3]`
    pub theta_body: Var,
    pub beta: Var,
    pub trans: Var,
    /// Input of the body rotation regressor.
    pub regressor_input: Var,
}

/// Hand features appended to the body regressor input for `mode`.
pub fn wrist_extra(tape: &Tape, cfg: &PipelineConfig, hands: &HandOutput) -> Result<Option<Var>> {
    let extra = match cfg.wrist_input_mode {
        WristInputMode::BodyOnly => return Ok(None),
        WristInputMode::BodyPlusHandGap => tape.concat(
            &[
                tape.mean_pool_spatial(hands.right.backbone.features)?,
                tape.mean_pool_spatial(hands.left.backbone.features)?,
            ],
            0,
        )?,
        WristInputMode::BodyPlusAllJoints => tape.concat(&[hands.right.pose.flat, hands.left.pose.flat], 0)?,
        WristInputMode::BodyPlusMcp => hands.v_m,
    };
    if cfg.detach_mcp {
        let value = tape.value(extra).clone();
        return Ok(Some(tape.constant(value)));
    }
    Ok(Some(extra))
}

/// Body rotations (with hand features per `wrist_input_mode`), shape and
/// camera translation.
pub fn bodynet_phase2(tape: &Tape, bound: &Bound, cfg: &PipelineConfig, phase1: &Phase1, hands: &HandOutput) -> Result<Phase2> {
    let v_b = variant_inputs(tape, cfg.regressor_input, &phase1.pose, phase1.backbone.features)?;
    let extra = wrist_extra(tape, cfg, hands)?;
    let regressor_input = match extra {
        Some(e) => tape.concat(&[v_b, e], 0)?,
        None => v_b,
    };
    let six = regress_rotations(tape, regressor_input, None, &bound.mlp("body.rot")?, NUM_BODY_JOINTS)?;
    let theta_body = rotations_to_axis_angle(tape, six)?;

    let gap = tape.mean_pool_spatial(phase1.backbone.features)?;
    let cam = bound.linear("body.cam")?.apply(tape, gap)?;
    let beta = tape.slice(cam, 0, 0, NUM_BETAS)?;
    let xy = tape.slice(cam, 0, NUM_BETAS, 2)?;
    let z = tape.scale(tape.sigmoid(tape.slice(cam, 0, NUM_BETAS + 2, 1)?)?, cfg.depth_scale())?;
    let trans = tape.concat(&[xy, z], 0)?;
    Ok(Phase2 {
        theta_body,
        beta,
        trans,
        regressor_input,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct FaceOutput {
    pub crop: Var,
    /// `[1, 3]`
    pub theta_jaw: Var,
    pub psi: Var,
}

/// Jaw rotation and expression from the face crop.
pub fn facenet_forward(tape: &Tape, bound: &Bound, cfg: &PipelineConfig, image: Var, face_box: Var) -> Result<FaceOutput> {
    let crop = roi_align_op(tape, image, face_box, cfg.face_size, cfg.face_size)?;
    let backbone = backbone_forward(tape, bound, "face.backbone", crop, None)?;
    let gap = tape.mean_pool_spatial(backbone.features)?;
    let out = bound.linear("face.head")?.apply(tape, gap)?;
    let six = tape.reshape(tape.slice(out, 0, 0, 6)?, &[1, 6])?;
    let theta_jaw = rotations_to_axis_angle(tape, six)?;
    let psi = tape.slice(out, 0, 6, NUM_EXPRESSIONS)?;
    Ok(FaceOutput { crop, theta_jaw, psi })
}

#[derive(Clone, Copy, Debug)]
pub struct PipelineOutput {
    pub phase1: Phase1,
    pub hands: HandOutput,
    pub phase2: Phase2,
    pub face: FaceOutput,
    /// `[53, 3]` in kinematic order.
    pub pose: Var,
    pub mesh: MeshVars,
    /// `joint_regressor * vertices`, translation included.
    pub joints: Var,
    /// Boxes the crops were taken from.
    pub crop_boxes: [BoundingBox; 3],
}

impl PipelineOutput {
    pub fn params(&self, tape: &Tape) -> ModelParams {
        let pose = tape.value(self.pose).data().to_vec();
        let beta = tape.value(self.phase2.beta).data().to_vec();
        let psi = tape.value(self.face.psi).data().to_vec();
        let t = tape.value(self.phase2.trans).data().to_vec();
        ModelParams::from_flat_pose(&pose, &beta, &psi, [t[0], t[1], t[2]])
    }

    pub fn boxes(&self, tape: &Tape) -> [BoundingBox; 3] {
        let b = tape.value(self.phase1.boxes);
        std::array::from_fn(|i| BoundingBox::from_slice(b.row(i)))
    }
}

/// 2x2 average pooling of a `[c, h, w]` image.
pub fn downsample2(image: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let x = tape.constant(image.clone());
    let y = tape.avg_pool2(x)?;
    let out = tape.value(y).clone();
    Ok(out)
}

/// Every stage on one tape. `crop_boxes` replaces the predicted boxes for
/// cropping (the predicted ones are still reported).
pub fn full_forward(
    tape: &Tape,
    bound: &Bound,
    cfg: &PipelineConfig,
    model: &BodyModel,
    image: Var,
    crop_boxes: Option<&[BoundingBox; 3]>,
) -> Result<PipelineOutput> {
    let [h, w] = cfg.image_size;
    let shape = tape.shape(image);
    if shape != [3, h, w] {
        return Err(shape_err("full_forward", format!("image {shape:?}, expected [3, {h}, {w}]")));
    }
    let body_image = tape.avg_pool2(image)?;
    let phase1 = bodynet_phase1(tape, bound, cfg, body_image)?;
    let box_var = |i: usize| -> Result<Var> {
        match crop_boxes {
            Some(b) => Ok(tape.constant(Tensor::vector(b[i].to_array().to_vec()))),
            None => tape.reshape(tape.slice(phase1.boxes, 0, i, 1)?, &[4]),
        }
    };
    let (rbox, lbox, fbox) = (box_var(RHAND_BOX)?, box_var(LHAND_BOX)?, box_var(FACE_BOX)?);
    let crop_boxes = [lbox, rbox, fbox].map(|b| BoundingBox::from_slice(tape.value(b).data()));

    let hands = handnet_forward(tape, bound, cfg, image, rbox, lbox, Some(phase1.backbone.block1))?;
    let phase2 = bodynet_phase2(tape, bound, cfg, &phase1, &hands)?;
    let face = facenet_forward(tape, bound, cfg, image, fbox)?;

    let pose = tape.concat(&[phase2.theta_body, face.theta_jaw, hands.left.theta, hands.right.theta], 0)?;
    let mesh = model.forward_op(
        tape,
        &ParamVars {
            pose,
            beta: phase2.beta,
            psi: face.psi,
            trans: phase2.trans,
        },
    )?;
    let joints = model.regress_joints_op(tape, mesh.vertices)?;
    Ok(PipelineOutput {
        phase1,
        hands,
        phase2,
        face,
        pose,
        mesh,
        joints,
        crop_boxes,
    })
}

/// Plain-value results of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub params: ModelParams,
    pub boxes: [BoundingBox; 3],
    pub vertices: Tensor,
    pub joints: Tensor,
}

/// Configuration, body model and weights.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub model: BodyModel,
    pub weights: ParamStore,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, seed: u64) -> Result<Self> {
        let weights = init_weights(&cfg, seed)?;
        Self::with_weights(cfg, weights)
    }

    pub fn with_weights(cfg: PipelineConfig, weights: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let model = crate::body_model::build_toy_model(&cfg.model);
        let expected = init_weights(&cfg, 0)?;
        for (name, t) in expected.iter() {
            let got = weights.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Config(format!("weight `{name}` is {:?}, expected {:?}", got.shape(), t.shape())));
            }
        }
        if weights.len() != expected.len() {
            return Err(Error::Config(format!("{} weights, expected {}", weights.len(), expected.len())));
        }
        Ok(Self { cfg, model, weights })
    }

    pub fn forward(
        &self,
        tape: &Tape,
        bound: &Bound,
        image: &Tensor,
        crop_boxes: Option<&[BoundingBox; 3]>,
    ) -> Result<PipelineOutput> {
        let img = tape.constant(image.clone());
        full_forward(tape, bound, &self.cfg, &self.model, img, crop_boxes)
    }

    pub fn predict(&self, image: &Tensor, crop_boxes: Option<&[BoundingBox; 3]>) -> Result<Prediction> {
        let tape = Tape::new();
        let bound = self.weights.bind(&tape, false);
        let out = self.forward(&tape, &bound, image, crop_boxes)?;
        let params = out.params(&tape);
        let boxes = out.boxes(&tape);
        let vertices = tape.value(out.mesh.vertices).clone();
        let joints = tape.value(out.joints).clone();
        Ok(Prediction {
            params,
            boxes,
            vertices,
            joints,
        })
    }
}
