use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::body_model::{ToyModelConfig, NUM_HAND_JOINTS};
use crate::error::{Error, Result};
use crate::pose2pose::RegressorInput;

/// Extra features the body rotation regressor receives next to its own.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WristInputMode {
    BodyOnly,
    BodyPlusHandGap,
    BodyPlusAllJoints,
    BodyPlusMcp,
}

impl WristInputMode {
    pub const ALL: [WristInputMode; 4] = [
        WristInputMode::BodyOnly,
        WristInputMode::BodyPlusHandGap,
        WristInputMode::BodyPlusAllJoints,
        WristInputMode::BodyPlusMcp,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::BodyOnly => "body_only",
            Self::BodyPlusHandGap => "body_plus_hand_gap",
            Self::BodyPlusAllJoints => "body_plus_all_joints",
            Self::BodyPlusMcp => "body_plus_mcp",
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::BodyOnly => "Body",
            Self::BodyPlusHandGap => "Body + Hand GAP",
            Self::BodyPlusAllJoints => "Body + All hand joints",
            Self::BodyPlusMcp => "Body + MCP joints",
        }
    }
}

impl FromStr for WristInputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnknownMode(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Toy,
    Reference,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            "reference" => Ok(Self::Reference),
            _ => Err(Error::UnknownMode(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub param: f64,
    pub coord: f64,
    #[serde(rename = "box")]
    pub bbox: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            param: 1.0,
            coord: 1.0,
            bbox: 1.0,
        }
    }
}

/// Network geometry and ablation switches.
///
/// The body network sees `image_size / 2`; every backbone divides its
/// input by four. Hand and face crops are square.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// `[h, w]` of the full-resolution image.
    pub image_size: [usize; 2],
    pub hand_size: usize,
    pub face_size: usize,
    pub backbone_channels: [usize; 3],
    pub joint_channels: usize,
    pub depth_bins: usize,
    /// Inverse temperature of the Pose2Pose heatmaps.
    pub heatmap_scale: f64,
    pub box_channels: usize,
    pub box_hidden: usize,
    /// Hidden widths of the rotation regressors; empty is a single linear map.
    pub regressor_hidden: Vec<usize>,
    pub wrist_input_mode: WristInputMode,
    pub finger_body_feature: bool,
    pub regressor_input: RegressorInput,
    /// Stop gradients from the body regressor into the hand network.
    pub detach_mcp: bool,
    /// Hand-local indices of the four knuckles fed to the body regressor.
    pub mcp_local: [usize; 4],
    /// Focal length in body-input pixels.
    pub focal: [f64; 2],
    /// Subject extent in meters used to scale the depth output.
    pub camera_size: f64,
    /// Root-relative depth covered by the heatmap depth axis, in meters (±).
    pub body_depth_range: f64,
    pub hand_depth_range: f64,
    pub loss_weights: LossWeights,
    /// Probability of cropping hands and face with ground-truth boxes during training.
    pub teacher_forcing: f64,
    pub model: ToyModelConfig,
}

impl PipelineConfig {
    pub fn toy() -> Self {
        Self {
            image_size: [128, 96],
            hand_size: 64,
            face_size: 48,
            backbone_channels: [8, 16, 32],
            joint_channels: 16,
            depth_bins: 8,
            heatmap_scale: 10.0,
            box_channels: 16,
            box_hidden: 32,
            regressor_hidden: Vec::new(),
            wrist_input_mode: WristInputMode::BodyPlusMcp,
            finger_body_feature: false,
            regressor_input: RegressorInput::Coord3dPlusFeat,
            detach_mcp: false,
            mcp_local: crate::body_model::MCP_LOCAL,
            focal: [5000.0, 5000.0],
            camera_size: 5.0,
            body_depth_range: 0.9,
            hand_depth_range: 0.25,
            loss_weights: LossWeights::default(),
            teacher_forcing: 0.5,
            model: ToyModelConfig::default(),
        }
    }

    pub fn reference() -> Self {
        Self {
            image_size: [512, 384],
            hand_size: 256,
            face_size: 192,
            backbone_channels: [64, 256, 2048],
            joint_channels: 512,
            box_channels: 256,
            box_hidden: 256,
            camera_size: 2.5,
            body_depth_range: 0.4,
            hand_depth_range: 0.1,
            ..Self::toy()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Toy => Self::toy(),
            Profile::Reference => Self::reference(),
        }
    }

    pub fn body_size(&self) -> [usize; 2] {
        [self.image_size[0] / 2, self.image_size[1] / 2]
    }

    pub fn body_grid(&self) -> [usize; 2] {
        [self.image_size[0] / 8, self.image_size[1] / 8]
    }

    pub fn hand_grid(&self) -> usize {
        self.hand_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        let bad = |m: String| Err(Error::Config(m));
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return bad(format!("image size {h}x{w} must be positive multiples of 8"));
        }
        if 3 * h != 4 * w {
            return bad(format!("image size {h}x{w} is not 4:3"));
        }
        if self.hand_size == 0 || self.hand_size % 4 != 0 || self.face_size == 0 || self.face_size % 4 != 0 {
            return bad("crop sizes must be positive multiples of 4".into());
        }
        let dims = [
            self.joint_channels,
            self.depth_bins,
            self.box_channels,
            self.box_hidden,
            self.backbone_channels[0],
            self.backbone_channels[1],
            self.backbone_channels[2],
        ];
        if dims.contains(&0) || self.regressor_hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if self.mcp_local.iter().any(|&m| m >= NUM_HAND_JOINTS || m % 3 != 0) {
            return bad(format!("mcp_local {:?} must name first joints of finger chains", self.mcp_local));
        }
        let positive = [self.focal[0], self.focal[1], self.camera_size, self.body_depth_range, self.hand_depth_range, self.heatmap_scale];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("focal, camera_size, depth ranges and heatmap_scale must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing) {
            return bad(format!("teacher_forcing {} outside [0, 1]", self.teacher_forcing));
        }
        let lw = self.loss_weights;
        if [lw.param, lw.coord, lw.bbox].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("loss weights must be non-negative".into());
        }
        Ok(())
    }

    /// Translation depth scale: `sqrt(fx fy size^2 / (w_b h_b))`.
    pub fn depth_scale(&self) -> f64 {
        let [hb, wb] = self.body_size();
        (self.focal[0] * self.focal[1] * self.camera_size * self.camera_size / (wb * hb) as f64).sqrt()
    }

    /// Principal point of the body input: its center under pixel-center
    /// coordinates.
    pub fn body_princpt(&self) -> [f64; 2] {
        let [hb, wb] = self.body_size();
        [(wb as f64 - 1.0) / 2.0, (hb as f64 - 1.0) / 2.0]
    }
}
