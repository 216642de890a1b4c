//! Synthetic scenes: random model parameters rendered as coloured Gaussian
//! blobs at the projected joints, with full annotations.
//!
//! The full-resolution camera has focal length `2 * focal` and its
//! principal point at the image center, which makes it the exact 2x
//! upsampling of the body-input camera used by the losses.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::body_model::{
    perspective_project, BodyModel, ModelParams, HEAD, JAW, LEFT_HAND_START, LEFT_WRIST, NUM_BETAS, NUM_BODY_JOINTS,
    NUM_EXPRESSIONS, NUM_HAND_JOINTS, NUM_JOINTS, PELVIS, RIGHT_HAND_START, RIGHT_WRIST,
};
use crate::error::{Error, Result};
use crate::grid_ops::{hflip_image, BoundingBox};
use crate::nn::named_rng;
use crate::pipeline::{PipelineConfig, FACE_BOX, LHAND_BOX, RHAND_BOX};

/// Uniform sampling half-widths (radians for rotations).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRanges {
    pub body: f64,
    pub wrist: f64,
    pub finger: f64,
    pub jaw: f64,
    pub beta: f64,
    pub psi: f64,
    pub trans_x: [f64; 2],
    pub trans_y: [f64; 2],
    pub depth: [f64; 2],
}

impl Default for PoseRanges {
    fn default() -> Self {
        Self {
            body: 0.6,
            wrist: 1.2,
            finger: 1.0,
            jaw: 0.3,
            beta: 1.0,
            psi: 1.0,
            trans_x: [-0.1, 0.1],
            trans_y: [-0.15, -0.05],
            depth: [200.0, 250.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    /// Blob standard deviation in full-image pixels.
    pub sigma: f64,
    /// Half-width of the uniform pixel noise.
    pub noise: f64,
    /// Probability of dropping each finger blob.
    pub hand_dropout: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            sigma: 2.0,
            noise: 0.02,
            hand_dropout: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub ranges: PoseRanges,
    pub render: RenderConfig,
}

/// Annotations of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub params: ModelParams,
    /// Regressed joints `[53, 3]` in the model frame (translation excluded).
    pub joints_3d: Tensor,
    /// Projections of `joints_3d + trans` in full-image pixels, `[53, 2]`.
    pub joints_2d: Tensor,
    /// Left hand, right hand, face.
    pub boxes: [BoundingBox; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, h, w]` in `[0, 1]`.
    pub image: Tensor,
    pub gt: GroundTruth,
}

/// Full-image intrinsics `(focal, principal point)`.
pub fn image_camera(cfg: &PipelineConfig) -> ([f64; 2], [f64; 2]) {
    let [h, w] = cfg.image_size;
    (
        [2.0 * cfg.focal[0], 2.0 * cfg.focal[1]],
        [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0],
    )
}

/// Colour of joint `j`; left/right partners share a colour. Body keys
/// (midline joints and one side) and finger keys each spread evenly around
/// the hue circle, the finger set offset by half a step.
pub fn joint_color(model: &BodyModel, j: usize) -> [f64; 3] {
    let key = j.min(model.joint_mirror[j]);
    let body_keys: Vec<usize> = (0..LEFT_HAND_START).filter(|&k| k <= model.joint_mirror[k]).collect();
    let hue = match body_keys.iter().position(|&k| k == key) {
        Some(p) => p as f64 / body_keys.len() as f64,
        None => ((key - LEFT_HAND_START) as f64 + 0.5) / NUM_HAND_JOINTS as f64,
    };
    hsv_to_rgb(hue, 1.0, 1.0)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Square box around `points` with a margin of a quarter of the extent
/// (at least `min_margin` pixels) on each side.
pub fn enclosing_box(points: &[[f64; 2]], min_margin: f64) -> BoundingBox {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let side = extent + 2.0 * (0.25 * extent).max(min_margin);
    BoundingBox::new((lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, side, side)
}

pub fn hand_joint_indices(right: bool) -> Vec<usize> {
    let (wrist, start) = if right { (RIGHT_WRIST, RIGHT_HAND_START) } else { (LEFT_WRIST, LEFT_HAND_START) };
    std::iter::once(wrist).chain(start..start + NUM_HAND_JOINTS).collect()
}

pub const FACE_JOINTS: [usize; 2] = [HEAD, JAW];

/// Hand and face boxes from projected joints.
pub fn gt_boxes(joints_2d: &Tensor) -> [BoundingBox; 3] {
    let pts = |idx: &[usize]| -> Vec<[f64; 2]> { idx.iter().map(|&j| [joints_2d.row(j)[0], joints_2d.row(j)[1]]).collect() };
    let mut boxes = [BoundingBox::new(0.0, 0.0, 1.0, 1.0); 3];
    boxes[LHAND_BOX] = enclosing_box(&pts(&hand_joint_indices(false)), 3.0);
    boxes[RHAND_BOX] = enclosing_box(&pts(&hand_joint_indices(true)), 3.0);
    boxes[FACE_BOX] = enclosing_box(&pts(&FACE_JOINTS), 4.0);
    boxes
}

fn sample_params(rng: &mut ChaCha8Rng, r: &PoseRanges) -> ModelParams {
    let mut u = |a: f64| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
    let mut p = ModelParams::default();
    for (j, row) in p.theta_body.iter_mut().enumerate() {
        let a = if j == LEFT_WRIST || j == RIGHT_WRIST { r.wrist } else { r.body };
        *row = [u(a), u(a), u(a)];
    }
    for row in p.theta_lhand.iter_mut().chain(p.theta_rhand.iter_mut()) {
        *row = [u(r.finger), u(r.finger), u(r.finger)];
    }
    p.theta_jaw = [u(r.jaw), u(r.jaw), u(r.jaw)];
    p.beta = (0..NUM_BETAS).map(|_| u(r.beta)).collect();
    p.psi = (0..NUM_EXPRESSIONS).map(|_| u(r.psi)).collect();
    let mut span = |lim: [f64; 2]| if lim[1] > lim[0] { rng.random_range(lim[0]..=lim[1]) } else { lim[0] };
    p.trans = [span(r.trans_x), span(r.trans_y), span(r.depth)];
    p
}

/// Annotations for `params`.
pub fn annotate(model: &BodyModel, cfg: &PipelineConfig, params: &ModelParams) -> Result<GroundTruth> {
    let mut rel = params.clone();
    rel.trans = [0.0; 3];
    let mesh = model.forward(&rel)?;
    let joints_3d = model.regress_joints(&mesh.vertices)?;
    let t = params.trans;
    let cam = Tensor::from_fn(&[NUM_JOINTS, 3], |i| joints_3d.data()[i] + t[i % 3]);
    let (focal, princpt) = image_camera(cfg);
    let joints_2d = perspective_project(&cam, focal, princpt)?;
    let boxes = gt_boxes(&joints_2d);
    Ok(GroundTruth {
        params: params.clone(),
        joints_3d,
        joints_2d,
        boxes,
    })
}

/// Blob rendering of the annotated joints. `noise_rng` drives pixel noise
/// and blob dropout; `None` renders neither.
pub fn render(
    model: &BodyModel,
    cfg: &PipelineConfig,
    gt: &GroundTruth,
    rc: &RenderConfig,
    noise_rng: Option<&mut ChaCha8Rng>,
) -> Tensor {
    let [h, w] = cfg.image_size;
    let mut img = vec![0.0f64; 3 * h * w];
    let root_z = gt.joints_3d.row(PELVIS)[2];
    let radius = (3.0 * rc.sigma).ceil() as i64;
    let mut rng = noise_rng;
    for j in 0..NUM_JOINTS {
        let finger = j >= LEFT_HAND_START;
        if finger && rc.hand_dropout > 0.0 {
            if let Some(r) = rng.as_deref_mut() {
                if r.random::<f64>() < rc.hand_dropout {
                    continue;
                }
            }
        }
        let (u, v) = (gt.joints_2d.row(j)[0], gt.joints_2d.row(j)[1]);
        // nearer joints are brighter
        let amp = (0.65 - 0.4 * (gt.joints_3d.row(j)[2] - root_z)).clamp(0.25, 1.0);
        let color = joint_color(model, j);
        let (cu, cv) = (u.round() as i64, v.round() as i64);
        for y in (cv - radius).max(0)..=(cv + radius).min(h as i64 - 1) {
            for x in (cu - radius).max(0)..=(cu + radius).min(w as i64 - 1) {
                let d2 = (x as f64 - u).powi(2) + (y as f64 - v).powi(2);
                let g = amp * (-d2 / (2.0 * rc.sigma * rc.sigma)).exp();
                for c in 0..3 {
                    let px = &mut img[(c * h + y as usize) * w + x as usize];
                    *px = px.max(g * color[c]);
                }
            }
        }
    }
    if let Some(r) = rng {
        if rc.noise > 0.0 {
            for px in img.iter_mut() {
                *px = (*px + r.random_range(-rc.noise..=rc.noise)).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[3, h, w], img).expect("sized")
}

/// One scene from `seed`. Draws are repeated (up to 100 times) while any
/// joint lands behind the camera.
pub fn sample_scene(model: &BodyModel, cfg: &PipelineConfig, sc: &SynthConfig, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..100 {
        let params = sample_params(&mut rng, &sc.ranges);
        let gt = match annotate(model, cfg, &params) {
            Ok(gt) => gt,
            Err(Error::BehindCamera { .. }) => continue,
            Err(e) => return Err(e),
        };
        let image = render(model, cfg, &gt, &sc.render, Some(&mut rng));
        return Ok(Sample { image, gt });
    }
    Err(Error::Degenerate("no scene in front of the camera after 100 draws".into()))
}

impl GroundTruth {
    /// Annotations of the horizontally flipped image.
    pub fn mirrored(&self, model: &BodyModel, image_width: usize) -> Self {
        let wm1 = image_width as f64 - 1.0;
        let perm = &model.joint_mirror;
        let joints_3d = Tensor::from_fn(&[NUM_JOINTS, 3], |i| {
            let v = self.joints_3d.row(perm[i / 3])[i % 3];
            if i % 3 == 0 {
                -v
            } else {
                v
            }
        });
        let joints_2d = Tensor::from_fn(&[NUM_JOINTS, 2], |i| {
            let v = self.joints_2d.row(perm[i / 2])[i % 2];
            if i % 2 == 0 {
                wm1 - v
            } else {
                v
            }
        });
        let flip = |b: &BoundingBox| BoundingBox::new(wm1 - b.center[0], b.center[1], b.size[0], b.size[1]);
        let mut boxes = self.boxes;
        boxes[LHAND_BOX] = flip(&self.boxes[RHAND_BOX]);
        boxes[RHAND_BOX] = flip(&self.boxes[LHAND_BOX]);
        boxes[FACE_BOX] = flip(&self.boxes[FACE_BOX]);
        Self {
            params: self.params.mirrored(model),
            joints_3d,
            joints_2d,
            boxes,
        }
    }
}

impl Sample {
    /// Horizontally flipped image with matching annotations.
    pub fn mirrored(&self, model: &BodyModel) -> Self {
        let w = self.image.shape()[2];
        Self {
            image: hflip_image(&self.image),
            gt: self.gt.mirrored(model, w),
        }
    }
}

/// Seed of sample `index` under a master seed.
pub fn sample_seed(master: u64, index: usize) -> u64 {
    named_rng(master, &format!("sample/{index}")).random()
}

/// `n` scenes from `seed`; generation runs on up to `workers` threads and
/// does not depend on their number.
pub fn make_split(model: &BodyModel, cfg: &PipelineConfig, sc: &SynthConfig, n: usize, seed: u64, workers: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Config("a split needs at least one sample".into()));
    }
    let workers = workers.clamp(1, n);
    if workers == 1 {
        return (0..n).map(|i| sample_scene(model, cfg, sc, sample_seed(seed, i))).collect();
    }
    let chunk = n.div_ceil(workers);
    let mut parts: Vec<Result<Vec<Sample>>> = Vec::new();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|wkr| {
                s.spawn(move || {
                    (wkr * chunk..((wkr + 1) * chunk).min(n))
                        .map(|i| sample_scene(model, cfg, sc, sample_seed(seed, i)))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        parts = handles.into_iter().map(|h| h.join().expect("generator thread panicked")).collect();
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Dataset file layout (all integers little-endian):
///
/// ```text
/// magic    b"WBDSET\0\0"
/// version  u32
/// count    u64
/// index    count x (offset u64, length u64), offsets from the file start
/// records  count x record
/// ```
///
/// A record is a u64 byte length followed by: image `c, h, w` as u32 and
/// `c*h*w` f64 values, then f64 blocks for the pose (53x3), shape (10),
/// expression (10), translation (3), model-frame joints (53x3), projected
/// joints (53x2) and boxes (3x4).
pub const DATASET_MAGIC: &[u8; 8] = b"WBDSET\0\0";
pub const DATASET_VERSION: u32 = 1;

fn encode_sample(s: &Sample) -> Vec<u8> {
    let mut b = Vec::new();
    for d in s.image.shape() {
        b.extend((*d as u32).to_le_bytes());
    }
    let gt = &s.gt;
    let floats = s
        .image
        .data()
        .iter()
        .copied()
        .chain(gt.params.flat_pose())
        .chain(gt.params.beta.iter().copied())
        .chain(gt.params.psi.iter().copied())
        .chain(gt.params.trans)
        .chain(gt.joints_3d.data().iter().copied())
        .chain(gt.joints_2d.data().iter().copied())
        .chain(gt.boxes.iter().flat_map(|b| b.to_array()));
    for f in floats {
        b.extend(f.to_le_bytes());
    }
    b
}

fn decode_sample(bytes: &[u8]) -> Result<Sample> {
    let bad = || Error::Format("truncated dataset record".into());
    if bytes.len() < 12 {
        return Err(bad());
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
    let shape = [dim(0), dim(1), dim(2)];
    let n_img = shape.iter().product::<usize>();
    let n = n_img + NUM_JOINTS * 3 + NUM_BETAS + NUM_EXPRESSIONS + 3 + NUM_JOINTS * 5 + 12;
    if bytes.len() != 12 + 8 * n {
        return Err(bad());
    }
    let f: Vec<f64> = bytes[12..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut at = 0;
    let mut take = |k: usize| {
        let s = &f[at..at + k];
        at += k;
        s.to_vec()
    };
    let image = Tensor::new(&shape, take(n_img))?;
    let pose = take(NUM_JOINTS * 3);
    let beta = take(NUM_BETAS);
    let psi = take(NUM_EXPRESSIONS);
    let t = take(3);
    let params = ModelParams::from_flat_pose(&pose, &beta, &psi, [t[0], t[1], t[2]]);
    let joints_3d = Tensor::new(&[NUM_JOINTS, 3], take(NUM_JOINTS * 3))?;
    let joints_2d = Tensor::new(&[NUM_JOINTS, 2], take(NUM_JOINTS * 2))?;
    let b = take(12);
    let boxes = std::array::from_fn(|i| BoundingBox::from_slice(&b[4 * i..4 * i + 4]));
    Ok(Sample {
        image,
        gt: GroundTruth {
            params,
            joints_3d,
            joints_2d,
            boxes,
        },
    })
}

pub fn save_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let records: Vec<Vec<u8>> = samples.iter().map(encode_sample).collect();
    let header = 8 + 4 + 8 + 16 * records.len();
    let mut out = Vec::with_capacity(header + records.iter().map(|r| r.len() + 8).sum::<usize>());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend(DATASET_VERSION.to_le_bytes());
    out.extend((records.len() as u64).to_le_bytes());
    let mut offset = header as u64;
    for r in &records {
        out.extend(offset.to_le_bytes());
        out.extend((r.len() as u64).to_le_bytes());
        offset += 8 + r.len() as u64;
    }
    for r in &records {
        out.extend((r.len() as u64).to_le_bytes());
        out.extend_from_slice(r);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != DATASET_MAGIC {
        return Err(bad("not a dataset file"));
    }
    let u64_at = |i: usize| -> Result<u64> {
        bytes
            .get(i..i + 8)
            .map(|s| u64::from_le_bytes(s.try_into().expect("8 bytes")))
            .ok_or_else(|| bad("truncated header"))
    };
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != DATASET_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u64_at(12)? as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let offset = u64_at(20 + 16 * i)? as usize;
        let len = u64_at(20 + 16 * i + 8)? as usize;
        if u64_at(offset)? as usize != len {
            return Err(bad("record length mismatch"));
        }
        let rec = bytes.get(offset + 8..offset + 8 + len).ok_or_else(|| bad("truncated record"))?;
        out.push(decode_sample(rec)?);
    }
    Ok(out)
}

/// SHA-256 of a sample's encoded record, hex.
pub fn content_hash(s: &Sample) -> String {
    Sha256::digest(encode_sample(s)).iter().map(|b| format!("{b:02x}")).collect()
}

/// Body joints of the ground truth as seen by the body network:
/// `(x, y)` in body-input pixels and `z` in depth bins.
pub fn body_coord_targets(cfg: &PipelineConfig, gt: &GroundTruth) -> Tensor {
    let root = gt.joints_3d.row(PELVIS)[2];
    Tensor::from_fn(&[NUM_BODY_JOINTS, 3], |i| {
        let (j, a) = (i / 3, i % 3);
        match a {
            2 => depth_to_bin(gt.joints_3d.row(j)[2] - root, cfg.body_depth_range, cfg.depth_bins),
            _ => (gt.joints_2d.row(j)[a] - 0.5) / 2.0,
        }
    })
}

/// Maps a root-relative depth in `[-range, range]` onto `[0, bins - 1]`.
pub fn depth_to_bin(dz: f64, range: f64, bins: usize) -> f64 {
    ((dz / range + 1.0) / 2.0 * (bins as f64 - 1.0)).clamp(0.0, bins as f64 - 1.0)
}

/// Finger joints of one hand in the pixel frame of its crop (mirrored for
/// the left hand) with wrist-relative depth bins.
pub fn hand_coord_targets(cfg: &PipelineConfig, gt: &GroundTruth, crop: &BoundingBox, right: bool) -> Tensor {
    let idx = hand_joint_indices(right);
    let wrist_z = gt.joints_3d.row(idx[0])[2];
    let s = cfg.hand_size;
    Tensor::from_fn(&[NUM_HAND_JOINTS, 3], |i| {
        let j = idx[1 + i / 3];
        let [x, y] = crop.to_crop(gt.joints_2d.row(j)[0], gt.joints_2d.row(j)[1], s, s);
        match i % 3 {
            0 if right => x,
            0 => s as f64 - 1.0 - x,
            1 => y,
            _ => depth_to_bin(gt.joints_3d.row(j)[2] - wrist_z, cfg.hand_depth_range, cfg.depth_bins),
        }
    })
}
