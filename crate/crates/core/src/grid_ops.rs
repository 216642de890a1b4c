//! Heatmap and sampling primitives.
//!
//! Grid coordinates are `(x = column, y = row, z = depth bin)` with integer
//! values at cell centers. Feature maps are `[c, h, w]`; heatmap volumes are
//! `[j, d, h, w]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Axis-aligned box in pixel coordinates (pixel centers at integers).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub center: [f64; 2],
    pub size: [f64; 2],
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            center: [cx, cy],
            size: [w, h],
        }
    }

    /// `(cx, cy, w, h)`.
    pub fn to_array(&self) -> [f64; 4] {
        [self.center[0], self.center[1], self.size[0], self.size[1]]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// Continuous source location sampled by output cell `(row, col)` when
    /// the box is resampled onto an `out_h x out_w` grid.
    pub fn sample_point(&self, row: usize, col: usize, out_h: usize, out_w: usize) -> [f64; 2] {
        [
            self.center[0] + self.size[0] * ((col as f64 + 0.5) / out_w as f64 - 0.5),
            self.center[1] + self.size[1] * ((row as f64 + 0.5) / out_h as f64 - 0.5),
        ]
    }

    /// Inverse of [`sample_point`](Self::sample_point): source pixel to
    /// crop-grid coordinates.
    pub fn to_crop(&self, x: f64, y: f64, out_h: usize, out_w: usize) -> [f64; 2] {
        [
            ((x - self.center[0]) / self.size[0] + 0.5) * out_w as f64 - 0.5,
            ((y - self.center[1]) / self.size[1] + 0.5) * out_h as f64 - 0.5,
        ]
    }

    fn validate(&self) -> Result<()> {
        let [w, h] = self.size;
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::DegenerateBox { w, h });
        }
        Ok(())
    }
}

fn dims3(t: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match t {
        [c, h, w] if *c > 0 && *h > 0 && *w > 0 => Ok((*c, *h, *w)),
        _ => Err(shape_err(op, format!("expected [c, h, w], got {t:?}"))),
    }
}

/// Views `[j * depth, h, w]` as `[j, depth, h, w]`: channel `j * depth + d`
/// becomes joint `j`, depth bin `d`.
pub fn reshape_to_volume(f: &Tensor, depth: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(f.shape(), "reshape_to_volume")?;
    if depth == 0 || c % depth != 0 {
        return Err(shape_err(
            "reshape_to_volume",
            format!("{c} channels do not split into depth {depth}"),
        ));
    }
    f.clone().reshaped(&[c / depth, depth, h, w])
}

/// Tape version of [`reshape_to_volume`].
pub fn reshape_to_volume_op(tape: &Tape, f: Var, depth: usize) -> Result<Var> {
    let shape = tape.shape(f);
    let (c, h, w) = dims3(&shape, "reshape_to_volume")?;
    if depth == 0 || c % depth != 0 {
        return Err(shape_err(
            "reshape_to_volume",
            format!("{c} channels do not split into depth {depth}"),
        ));
    }
    tape.reshape(f, &[c / depth, depth, h, w])
}

/// `[d * h * w, 3]` table of voxel index coordinates `(x, y, z)` in the
/// flattening order of a `[d, h, w]` block.
fn voxel_coords(d: usize, h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(d * h * w * 3);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                data.extend_from_slice(&[x as f64, y as f64, z as f64]);
            }
        }
    }
    Tensor::new(&[d * h * w, 3], data).expect("consistent size")
}

/// Softmax over every voxel of each joint followed by the expected voxel
/// index. `[j, d, h, w] -> [j, 3]`.
pub fn soft_argmax_3d_op(tape: &Tape, heat: Var) -> Result<Var> {
    let shape = tape.shape(heat);
    let [j, d, h, w] = shape[..] else {
        return Err(shape_err("soft_argmax_3d", format!("expected [j, d, h, w], got {shape:?}")));
    };
    let flat = tape.reshape(heat, &[j, d * h * w])?;
    let prob = tape.softmax(flat)?;
    let coords = tape.constant(voxel_coords(d, h, w));
    tape.matmul(prob, coords)
}

/// 2D soft-argmax over `[n, h, w]` maps. Returns `[n, 2]` as `(x, y)`.
pub fn soft_argmax_2d_op(tape: &Tape, maps: Var) -> Result<Var> {
    let shape = tape.shape(maps);
    let (n, h, w) = dims3(&shape, "soft_argmax_2d")?;
    let flat = tape.reshape(maps, &[n, h * w])?;
    let prob = tape.softmax(flat)?;
    let coords = voxel_coords(1, h, w);
    let xy = Tensor::from_fn(&[h * w, 2], |i| coords.data()[(i / 2) * 3 + i % 2]);
    let xy = tape.constant(xy);
    tape.matmul(prob, xy)
}

/// Plain evaluation of [`soft_argmax_3d_op`].
pub fn soft_argmax_3d(heat: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let h = tape.constant(heat.clone());
    let p = soft_argmax_3d_op(&tape, h)?;
    let out = tape.value(p).clone();
    Ok(out)
}

struct Bilinear {
    idx: [usize; 4],
    wts: [f64; 4],
    fx: f64,
    fy: f64,
    x_free: bool,
    y_free: bool,
}

fn bilinear_setup(h: usize, w: usize, x: f64, y: f64) -> Bilinear {
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = (xc.floor() as usize).min(w - 1);
    let y0 = (yc.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    Bilinear {
        idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        wts: [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
        fx,
        fy,
        x_free: x > 0.0 && x < (w - 1) as f64,
        y_free: y > 0.0 && y < (h - 1) as f64,
    }
}

/// Four-neighbor bilinear interpolation of every channel at `(x, y)`.
/// Coordinates outside the map are clamped to its border.
pub fn bilinear_sample(f: &Tensor, x: f64, y: f64) -> Result<Vec<f64>> {
    let (c, h, w) = dims3(f.shape(), "bilinear_sample")?;
    let b = bilinear_setup(h, w, x, y);
    let hw = h * w;
    Ok((0..c)
        .map(|ch| {
            let m = &f.data()[ch * hw..(ch + 1) * hw];
            b.idx.iter().zip(&b.wts).map(|(i, wt)| m[*i] * wt).sum()
        })
        .collect())
}

/// Samples `f: [c, h, w]` at `points: [n, 2]` giving `[n, c]`.
/// Differentiable in both the map and the points.
pub fn bilinear_sample_op(tape: &Tape, f: Var, points: Var) -> Result<Var> {
    let value = {
        let fv = tape.value(f);
        let pv = tape.value(points);
        let (c, _, _) = dims3(fv.shape(), "bilinear_sample")?;
        if pv.shape().len() != 2 || pv.shape()[1] != 2 {
            return Err(shape_err("bilinear_sample", format!("points {:?}", pv.shape())));
        }
        let n = pv.shape()[0];
        let mut out = Vec::with_capacity(n * c);
        for p in pv.data().chunks(2) {
            out.extend(bilinear_sample(&fv, p[0], p[1])?);
        }
        Tensor::new(&[n, c], out)?
    };
    tape.custom(&[f, points], value, Box::new(BilinearSample))
}

struct BilinearSample;

impl CustomOp for BilinearSample {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (f, pts) = (inputs[0], inputs[1]);
        let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
        let hw = h * w;
        let mut gf = vec![0.0; f.numel()];
        let mut gp = vec![0.0; pts.numel()];
        for (n, (p, gn)) in pts.data().chunks(2).zip(g.chunks(c)).enumerate() {
            let b = bilinear_setup(h, w, p[0], p[1]);
            let (mut gx, mut gy) = (0.0, 0.0);
            for (ch, gv) in gn.iter().enumerate() {
                let base = ch * hw;
                for (i, wt) in b.idx.iter().zip(&b.wts) {
                    gf[base + i] += gv * wt;
                }
                let m = &f.data()[base..base + hw];
                let [v00, v01, v10, v11] = b.idx.map(|i| m[i]);
                gx += gv * ((1.0 - b.fy) * (v01 - v00) + b.fy * (v11 - v10));
                gy += gv * ((1.0 - b.fx) * (v10 - v00) + b.fx * (v11 - v01));
            }
            if b.x_free {
                gp[2 * n] = gx;
            }
            if b.y_free {
                gp[2 * n + 1] = gy;
            }
        }
        vec![Some(gf), Some(gp)]
    }
}

/// Resamples the box region of `img` onto an `out_h x out_w` grid with one
/// bilinear sample per output cell.
pub fn roi_align(img: &Tensor, bbox: &BoundingBox, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, _, _) = dims3(img.shape(), "roi_align")?;
    bbox.validate()?;
    if out_h == 0 || out_w == 0 {
        return Err(shape_err("roi_align", format!("output {out_h}x{out_w}")));
    }
    let mut out = vec![0.0; c * out_h * out_w];
    let p = out_h * out_w;
    for r in 0..out_h {
        for col in 0..out_w {
            let [x, y] = bbox.sample_point(r, col, out_h, out_w);
            for (ch, v) in bilinear_sample(img, x, y)?.into_iter().enumerate() {
                out[ch * p + r * out_w + col] = v;
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Tape version of [`roi_align`]; `bbox` is a `[4]` var `(cx, cy, w, h)`.
pub fn roi_align_op(tape: &Tape, img: Var, bbox: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let c = dims3(&tape.shape(img), "roi_align")?.0;
    let b = {
        let v = tape.value(bbox);
        if v.numel() != 4 {
            return Err(shape_err("roi_align", format!("box {:?}", v.shape())));
        }
        BoundingBox::from_slice(v.data())
    };
    b.validate()?;
    if out_h == 0 || out_w == 0 {
        return Err(shape_err("roi_align", format!("output {out_h}x{out_w}")));
    }
    let n = out_h * out_w;
    let mut offsets = Vec::with_capacity(n * 2);
    for r in 0..out_h {
        for col in 0..out_w {
            offsets.push((col as f64 + 0.5) / out_w as f64 - 0.5);
            offsets.push((r as f64 + 0.5) / out_h as f64 - 0.5);
        }
    }
    let offsets = Tensor::new(&[n, 2], offsets)?;
    let center = tape.slice(bbox, 0, 0, 2)?;
    let size = tape.reshape(tape.slice(bbox, 0, 2, 2)?, &[1, 2])?;
    let ones = tape.constant(Tensor::full(&[n, 1], 1.0));
    let spread = tape.mul_const(tape.matmul(ones, size)?, &offsets)?;
    let points = tape.add_row(spread, center)?;
    let samples = bilinear_sample_op(tape, img, points)?;
    tape.reshape(tape.transpose(samples)?, &[c, out_h, out_w])
}

/// Mirrors the last axis (columns): `col -> w - 1 - col`.
pub fn hflip_image(f: &Tensor) -> Tensor {
    let w = *f.shape().last().expect("non-empty shape");
    let mut data = f.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    Tensor::new(f.shape(), data).expect("same shape")
}

/// Tape version of [`hflip_image`]; works for any rank.
pub fn hflip_image_op(tape: &Tape, f: Var) -> Result<Var> {
    let value = hflip_image(&tape.value(f));
    tape.custom(&[f], value, Box::new(HFlip))
}

struct HFlip;

impl CustomOp for HFlip {
    fn name(&self) -> &'static str {
        "hflip"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let g = Tensor::new(inputs[0].shape(), g.to_vec()).expect("same shape");
        vec![Some(hflip_image(&g).into_data())]
    }
}

/// Mirrors `[j, 3]` grid coordinates on a grid of width `w` and relabels
/// joints with `perm` (output row `i` takes input row `perm[i]`).
pub fn hflip_coords(p: &Tensor, w: usize, perm: &[usize]) -> Result<Tensor> {
    let tape = Tape::new();
    let v = tape.constant(p.clone());
    let out = hflip_coords_op(&tape, v, w, perm)?;
    let t = tape.value(out).clone();
    Ok(t)
}

pub fn hflip_coords_op(tape: &Tape, p: Var, w: usize, perm: &[usize]) -> Result<Var> {
    let shape = tape.shape(p);
    if shape.len() != 2 || shape[1] != 3 || perm.len() != shape[0] {
        return Err(shape_err(
            "hflip_coords",
            format!("coords {shape:?} with permutation of {}", perm.len()),
        ));
    }
    let signs = Tensor::from_fn(&shape, |i| if i % 3 == 0 { -1.0 } else { 1.0 });
    let shift = tape.constant(Tensor::vector(vec![w as f64 - 1.0, 0.0, 0.0]));
    let flipped = tape.add_row(tape.mul_const(p, &signs)?, shift)?;
    tape.gather_rows(flipped, perm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GradCheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn volume_layout_is_joint_major() {
        let f = Tensor::from_fn(&[16, 2, 3], |i| i as f64);
        let v = reshape_to_volume(&f, 8).unwrap();
        assert_eq!(v.shape(), &[2, 8, 2, 3]);
        // channel 9 -> joint 1, depth 1
        let hw = 6;
        assert_eq!(&v.data()[(8 + 1) * hw..(8 + 2) * hw], &f.data()[9 * hw..10 * hw]);
        let back = v.reshaped(&[16, 2, 3]).unwrap();
        assert_eq!(back, f);
        assert!(reshape_to_volume(&Tensor::zeros(&[15, 2, 2]), 8).is_err());
    }

    #[test]
    fn uniform_logits_give_grid_center() {
        let p = soft_argmax_3d(&Tensor::zeros(&[2, 8, 8, 6])).unwrap();
        for j in 0..2 {
            let r = p.row(j);
            assert!((r[0] - 2.5).abs() < 1e-12 && (r[1] - 3.5).abs() < 1e-12);
            assert!((r[2] - 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn peaked_logit_matches_weighted_sum_oracle() {
        let (d, h, w) = (4, 5, 6);
        let mut heat = Tensor::zeros(&[1, d, h, w]);
        let (x0, y0, z0) = (4usize, 1usize, 2usize);
        heat.data_mut()[(z0 * h + y0) * w + x0] = 1e3;
        let p = soft_argmax_3d(&heat).unwrap();
        // brute force: explicit softmax and expectation
        let logits = heat.data();
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let mut sum = 0.0;
        let mut acc = [0.0; 3];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let e = (logits[(z * h + y) * w + x] - max).exp();
                    sum += e;
                    acc[0] += e * x as f64;
                    acc[1] += e * y as f64;
                    acc[2] += e * z as f64;
                }
            }
        }
        for k in 0..3 {
            assert!((p.data()[k] - acc[k] / sum).abs() < 1e-12);
        }
        assert!((p.data()[0] - 4.0).abs() < 1e-6);
        assert!((p.data()[1] - 1.0).abs() < 1e-6);
        assert!((p.data()[2] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn symmetric_logits_give_center_voxel() {
        let (d, h, w) = (5, 5, 5);
        let heat = Tensor::from_fn(&[1, d, h, w], |i| {
            let (z, y, x) = (i / 25, (i / 5) % 5, i % 5);
            let r2 = (x as f64 - 2.0).powi(2) + (y as f64 - 2.0).powi(2) + (z as f64 - 2.0).powi(2);
            -0.7 * r2
        });
        let p = soft_argmax_3d(&heat).unwrap();
        for v in p.data() {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_basics() {
        let f = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(bilinear_sample(&f, 0.0, 0.0).unwrap(), vec![1.0]);
        assert_eq!(bilinear_sample(&f, 0.5, 0.5).unwrap(), vec![2.5]);
        assert_eq!(bilinear_sample(&f, 1.0, 1.0).unwrap(), vec![4.0]);
        // clamped
        assert_eq!(bilinear_sample(&f, -3.0, 7.0).unwrap(), vec![3.0]);
    }

    #[test]
    fn bilinear_matches_four_weight_oracle() {
        let f = random(&[3, 7, 9], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let x: f64 = rng.random_range(0.0..8.0);
            let y: f64 = rng.random_range(0.0..6.0);
            let got = bilinear_sample(&f, x, y).unwrap();
            let (xi, yi) = (x.floor() as usize, y.floor() as usize);
            let (ax, ay) = (x - xi as f64, y - yi as f64);
            for (c, g) in got.iter().enumerate() {
                let at = |r: usize, col: usize| f.data()[(c * 7 + r) * 9 + col];
                let expect = at(yi, xi) * (1.0 - ax) * (1.0 - ay)
                    + at(yi, xi + 1) * ax * (1.0 - ay)
                    + at(yi + 1, xi) * (1.0 - ax) * ay
                    + at(yi + 1, xi + 1) * ax * ay;
                assert!((g - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn roi_align_identity_and_constant() {
        let img = random(&[2, 6, 5], 3);
        let full = BoundingBox::new(2.0, 2.5, 5.0, 6.0);
        let out = roi_align(&img, &full, 6, 5).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-12);

        let flat = Tensor::full(&[1, 8, 8], 0.375);
        let out = roi_align(&flat, &BoundingBox::new(3.1, 4.7, 2.3, 5.9), 4, 3).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.375).abs() < 1e-15));

        assert!(matches!(
            roi_align(&img, &BoundingBox::new(1.0, 1.0, 0.0, 2.0), 2, 2),
            Err(Error::DegenerateBox { .. })
        ));
    }

    #[test]
    fn roi_align_op_matches_per_pixel_sampling() {
        let img = random(&[2, 10, 12], 4);
        let b = BoundingBox::new(5.3, 4.1, 6.2, 4.7);
        let tape = Tape::new();
        let iv = tape.constant(img.clone());
        let bv = tape.constant(Tensor::vector(b.to_array().to_vec()));
        let out = roi_align_op(&tape, iv, bv, 5, 4).unwrap();
        let out = tape.value(out).clone();
        for r in 0..5 {
            for c in 0..4 {
                let [x, y] = b.sample_point(r, c, 5, 4);
                let s = bilinear_sample(&img, x, y).unwrap();
                for ch in 0..2 {
                    assert!((out.data()[(ch * 5 + r) * 4 + c] - s[ch]).abs() < 1e-14);
                }
            }
        }
        assert!(out.max_abs_diff(&roi_align(&img, &b, 5, 4).unwrap()) < 1e-14);
    }

    #[test]
    fn crop_coordinates_invert_sampling() {
        let b = BoundingBox::new(40.3, 20.2, 13.0, 9.5);
        let [x, y] = b.sample_point(3, 7, 16, 16);
        let [c, r] = b.to_crop(x, y, 16, 16);
        assert!((c - 7.0).abs() < 1e-12 && (r - 3.0).abs() < 1e-12);
    }

    #[test]
    fn flips() {
        let img = random(&[2, 3, 4], 5);
        assert_eq!(hflip_image(&hflip_image(&img)), img);
        let p = Tensor::new(&[2, 3], vec![1.0, 2.0, 0.5, 3.0, 0.0, 1.0]).unwrap();
        let q = hflip_coords(&p, 4, &[0, 1]).unwrap();
        assert_eq!(q.data()[0], 2.0);
        let swapped = hflip_coords(&p, 4, &[1, 0]).unwrap();
        assert_eq!(swapped.row(0), &[0.0, 0.0, 1.0]);
        assert_eq!(hflip_coords(&swapped, 4, &[1, 0]).unwrap(), p);
    }

    #[test]
    fn soft_argmax_commutes_with_flip() {
        let heat = random(&[3, 4, 5, 6], 6);
        let perm = [2usize, 1, 0];
        // flipping the volume and relabelling joints
        let flipped = hflip_image(&heat);
        let mut relabelled = Vec::new();
        for &j in &perm {
            relabelled.extend_from_slice(&flipped.data()[j * 120..(j + 1) * 120]);
        }
        let flipped = Tensor::new(heat.shape(), relabelled).unwrap();
        let lhs = hflip_coords(&soft_argmax_3d(&heat).unwrap(), 6, &perm).unwrap();
        let rhs = soft_argmax_3d(&flipped).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-9);
    }

    #[test]
    fn soft_argmax_shift_invariance_and_hull() {
        let heat = random(&[2, 3, 4, 5], 7).reshaped(&[2, 3, 4, 5]).unwrap();
        let shifted = Tensor::from_fn(heat.shape(), |i| heat.data()[i] + if i < 60 { 3.0 } else { -11.0 });
        let a = soft_argmax_3d(&heat).unwrap();
        let b = soft_argmax_3d(&shifted).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        for r in a.data().chunks(3) {
            assert!(r[0] >= 0.0 && r[0] <= 4.0 && r[1] >= 0.0 && r[1] <= 3.0);
            assert!(r[2] >= 0.0 && r[2] <= 2.0);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let weights = random(&[2, 3], 9);
        let r = GradCheck::new(1e-5, 1e-4)
            .run(
                |t, v| {
                    let p = soft_argmax_3d_op(t, v[0])?;
                    t.sum(t.mul_const(p, &weights)?)
                },
                &[random(&[2, 3, 4, 5], 8)],
            )
            .unwrap();
        assert!(r.passed(), "{r}");

        let pts = Tensor::new(&[3, 2], vec![1.3, 2.7, 4.6, 0.2, 0.45, 5.5]).unwrap();
        let w = random(&[3, 2], 10);
        let r = GradCheck::new(1e-5, 1e-4)
            .run(
                |t, v| {
                    let s = bilinear_sample_op(t, v[0], v[1])?;
                    t.sum(t.mul_const(s, &w)?)
                },
                &[random(&[2, 7, 6], 11), pts],
            )
            .unwrap();
        assert!(r.passed(), "{r}");

        let w = random(&[2, 3, 4], 12);
        let r = GradCheck::new(1e-5, 1e-4)
            .run(
                |t, v| {
                    let s = roi_align_op(t, v[0], v[1], 3, 4)?;
                    t.sum(t.mul_const(s, &w)?)
                },
                &[random(&[2, 9, 8], 13), Tensor::vector(vec![3.77, 4.21, 4.13, 3.37])],
            )
            .unwrap();
        assert!(r.passed(), "{r}");
    }
}
