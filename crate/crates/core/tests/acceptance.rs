//! Acceptance criteria, one test each. Every test writes a single
//! `criterion N: PASS|FAIL ...` line to stderr, outside the test harness's
//! output capture.

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wholebody::ablation::{run_ablation, Study};
use wholebody::autodiff::{Tape, Tensor};
use wholebody::body_model::{build_toy_model, BodyModel, ModelParams, NUM_BETAS, NUM_EXPRESSIONS, NUM_JOINTS};
use wholebody::diagnostics::gradient_suite;
use wholebody::grid_ops::{hflip_image, soft_argmax_3d};
use wholebody::metrics::{evaluate, fit_similarity, mpjpe, pa_mpjpe};
use wholebody::pipeline::{full_forward, handnet_forward, init_weights, PipelineConfig, WristInputMode};
use wholebody::rotations::{axis_angle_to_matrix, mirror_axis_angle_op, mirror_rotation, AxisAngle};
use wholebody::synth::make_split;
use wholebody::train::{dataset_loss, train, RunConfig};

fn report(n: usize, passed: bool, detail: &str) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} {detail}");
}

fn row3(t: &Tensor, i: usize) -> Vector3<f64> {
    let r = t.row(i);
    Vector3::new(r[0], r[1], r[2])
}

fn random_params(rng: &mut ChaCha8Rng, scale: f64) -> ModelParams {
    let pose: Vec<f64> = (0..NUM_JOINTS * 3).map(|_| rng.random_range(-scale..scale)).collect();
    let beta: Vec<f64> = (0..NUM_BETAS).map(|_| rng.random_range(-1.0..1.0)).collect();
    let psi: Vec<f64> = (0..NUM_EXPRESSIONS).map(|_| rng.random_range(-1.0..1.0)).collect();
    let trans = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(3.0..6.0)];
    ModelParams::from_flat_pose(&pose, &beta, &psi, trans)
}

/// Joints and vertices by composing 4x4 transforms down the tree and
/// blending them per vertex.
fn transform_chain(m: &BodyModel, p: &ModelParams) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let nv = m.template_vertices.shape()[0];
    let shaped: Vec<Vector3<f64>> = (0..nv)
        .map(|i| {
            let mut v = row3(&m.template_vertices, i);
            for a in 0..3 {
                let r = 3 * i + a;
                v[a] += (0..NUM_BETAS).map(|b| m.shape_dirs.data()[r * NUM_BETAS + b] * p.beta[b]).sum::<f64>();
                v[a] += (0..NUM_EXPRESSIONS).map(|e| m.expr_dirs.data()[r * NUM_EXPRESSIONS + e] * p.psi[e]).sum::<f64>();
            }
            v
        })
        .collect();
    let rest: Vec<Vector3<f64>> = (0..NUM_JOINTS)
        .map(|j| (0..nv).map(|i| shaped[i] * m.joint_regressor.data()[j * nv + i]).sum())
        .collect();
    let pose = p.flat_pose();
    let mut global = vec![Matrix4::<f64>::identity(); NUM_JOINTS];
    let mut done = vec![false; NUM_JOINTS];
    while done.iter().any(|d| !d) {
        for j in 0..NUM_JOINTS {
            let parent = m.parents[j];
            if done[j] || parent.is_some_and(|q| !done[q]) {
                continue;
            }
            let r = axis_angle_to_matrix(&AxisAngle::new(pose[3 * j], pose[3 * j + 1], pose[3 * j + 2])).0;
            let offset = parent.map_or(rest[j], |q| rest[j] - rest[q]);
            let mut local = Matrix4::identity();
            local.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
            local.fixed_view_mut::<3, 1>(0, 3).copy_from(&offset);
            global[j] = parent.map_or(local, |q| global[q] * local);
            done[j] = true;
        }
    }
    let t = Vector3::from(p.trans);
    let joints = global.iter().map(|g| Vector3::new(g[(0, 3)], g[(1, 3)], g[(2, 3)]) + t).collect();
    let k = m.skin_weights.shape()[1];
    let verts = (0..nv)
        .map(|i| {
            let mut acc = Vector3::zeros();
            for j in 0..k {
                let w = m.skin_weights.data()[i * k + j];
                if w != 0.0 {
                    let g = global[j];
                    let rot: Matrix3<f64> = g.fixed_view::<3, 3>(0, 0).into();
                    let tr: Vector3<f64> = g.fixed_view::<3, 1>(0, 3).into();
                    acc += (rot * (shaped[i] - rest[j]) + tr) * w;
                }
            }
            acc + t
        })
        .collect();
    (joints, verts)
}

#[test]
fn criterion_1_gradient_suite() {
    let t0 = Instant::now();
    let cases = gradient_suite(&RunConfig::toy(), 0).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let failed: Vec<String> = cases.iter().filter(|c| !c.report.passed()).map(|c| c.name.to_string()).collect();
    let worst = cases.iter().map(|c| format!("{} {:.1e}", c.name, c.report.max_rel_error())).collect::<Vec<_>>().join(", ");
    let ok = failed.is_empty() && secs < 300.0;
    report(1, ok, &format!("{} cases in {secs:.1}s; {worst}", cases.len()));
    assert!(ok, "failed: {failed:?}");
}

#[test]
fn criterion_2_oracle_equivalence() {
    let m = build_toy_model(&PipelineConfig::toy().model);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut model_err: f64 = 0.0;
    for _ in 0..5 {
        let p = random_params(&mut rng, 1.0);
        let out = m.forward(&p).unwrap();
        let (joints, verts) = transform_chain(&m, &p);
        for (j, o) in joints.iter().enumerate() {
            model_err = model_err.max((row3(&out.joints, j) - o).norm());
        }
        for (i, o) in verts.iter().enumerate() {
            model_err = model_err.max((row3(&out.vertices, i) - o).norm());
        }
    }

    let mut argmax_err: f64 = 0.0;
    let (j, d, h, w) = (3, 4, 5, 6);
    for _ in 0..20 {
        let heat = Tensor::from_fn(&[j, d, h, w], |_| rng.random_range(-4.0..4.0));
        let got = soft_argmax_3d(&heat).unwrap();
        for jj in 0..j {
            let logits = &heat.data()[jj * d * h * w..(jj + 1) * d * h * w];
            let max = logits.iter().cloned().fold(f64::MIN, f64::max);
            let (mut sum, mut acc) = (0.0, [0.0; 3]);
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
                argmax_err = argmax_err.max((got.row(jj)[k] - acc[k] / sum).abs());
            }
        }
    }

    let mut pa_err: f64 = 0.0;
    for _ in 0..20 {
        let gt = Tensor::from_fn(&[30, 3], |_| rng.random_range(-1.0..1.0));
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let rot = Rotation3::new(axis * 1.3).into_inner();
        let (s, t) = (rng.random_range(0.5..2.0), Vector3::new(0.3, -1.2, 2.0));
        // pred = (rot^T (gt - t)) / s, so aligning pred onto gt recovers (s, rot, t)
        let pred = Tensor::from_fn(&[30, 3], |i| {
            let g = row3(&gt, i / 3);
            (rot.transpose() * (g - t) / s)[i % 3]
        });
        let sim = fit_similarity(&pred, &gt).unwrap();
        pa_err = pa_err
            .max((sim.scale - s).abs())
            .max((sim.rotation - rot).abs().max())
            .max((sim.translation - t).abs().max());
    }
    let ok = model_err < 1e-10 && argmax_err < 1e-9 && pa_err < 1e-9;
    report(
        2,
        ok,
        &format!("forward_model {model_err:.1e} (< 1e-10), soft-argmax {argmax_err:.1e} (< 1e-9), similarity {pa_err:.1e} (< 1e-9)"),
    );
    assert!(ok);
}

#[test]
fn criterion_3_metric_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    for case in 0..1000 {
        let n = rng.random_range(5..40);
        let gt = Tensor::from_fn(&[n, 3], |_| rng.random_range(-1.0..1.0));
        let sigma = rng.random_range(0.001..0.2);
        let moved = case % 2 == 1;
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let rot = Rotation3::new(axis).into_inner();
        let pred = Tensor::from_fn(&[n, 3], |i| {
            let g = row3(&gt, i / 3);
            let p = if moved { rot * g * 1.1 + Vector3::new(0.1, 0.2, -0.3) } else { g };
            p[i % 3] + rng.random_range(-sigma..sigma)
        });
        if pa_mpjpe(&pred, &gt).unwrap() > mpjpe(&pred, &gt, 0).unwrap() {
            violations += 1;
        }
    }

    let m = build_toy_model(&PipelineConfig::toy().model);
    let p = random_params(&mut rng, 0.6);
    let out = m.forward(&p).unwrap();
    let rot = Rotation3::new(Vector3::new(0.4, -0.9, 0.3)).into_inner();
    let shift = Vector3::new(0.2, 0.1, -0.4);
    let rigid = |t: &Tensor| Tensor::from_fn(t.shape(), |i| (rot * row3(t, i / 3) + shift)[i % 3]);
    let r = evaluate(&m, &rigid(&out.vertices), &rigid(&out.joints), &out.vertices, &out.joints).unwrap();
    let parts = [r.all, r.body, r.lhand, r.rhand, r.face];
    let pa_max = parts.iter().map(|q| q.pa_mpjpe.max(q.pa_mpvpe)).fold(0.0, f64::max);
    let non_pa_min = parts.iter().map(|q| q.mpjpe.min(q.mpvpe)).fold(f64::MAX, f64::min);
    let ok = violations == 0 && pa_max < 1e-9 && non_pa_min > 1.0;
    report(
        3,
        ok,
        &format!("pa > non-pa in {violations}/1000 cases; rigid motion: pa max {pa_max:.1e} mm, non-pa min {non_pa_min:.1} mm"),
    );
    assert!(ok);
}

#[test]
fn criterion_4_overfit() {
    let mut cfg = RunConfig::toy();
    cfg.optim.lr = 1e-4;
    cfg.optim.batch_size = 8;
    cfg.optim.epochs = 3000;
    cfg.optim.max_steps = Some(3000);
    cfg.optim.decay_epoch = None;
    cfg.optim.flip_augment = false;
    cfg.optim.eval_every = 100;
    cfg.optim.early_stop_ratio = Some(0.01);
    let model = build_toy_model(&cfg.pipeline.model);
    let samples = make_split(&model, &cfg.pipeline, &cfg.synth, 8, 1, 1).unwrap();
    let t0 = Instant::now();
    let (pipe, tr) = train(&cfg, init_weights(&cfg.pipeline, 0).unwrap(), &samples, |_| {}).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let fin = dataset_loss(&pipe, &samples, true).unwrap().total;
    let ratio = fin / tr.initial_loss;
    let ok = ratio < 0.01 && secs < 900.0;
    report(
        4,
        ok,
        &format!("loss {:.4} -> {fin:.4} ({:.2}% of initial, target < 1%) after {} steps in {secs:.0}s", tr.initial_loss, 100.0 * ratio, tr.steps),
    );
    assert!(ok);
}

/// Training budget of the wrist-input ablation.
const ABLATION_EPOCHS: usize = 4;
const ABLATION_LR: f64 = 1e-3;

#[test]
fn criterion_5_wrist_input_ablation() {
    let mut cfg = RunConfig::toy();
    cfg.synth.render.hand_dropout = 0.0;
    cfg.optim.lr = ABLATION_LR;
    cfg.optim.epochs = ABLATION_EPOCHS;
    cfg.optim.decay_epoch = None;
    cfg.optim.eval_every = 1_000_000;
    let model = build_toy_model(&cfg.pipeline.model);
    let train_set = make_split(&model, &cfg.pipeline, &cfg.synth, 512, 11, 1).unwrap();
    let test_set = make_split(&model, &cfg.pipeline, &cfg.synth, 128, 12, 1).unwrap();
    let r = run_ablation(&cfg, &[Study::WristInput], &[0, 1, 2], &train_set, &test_set, |_| {}).unwrap();
    let mean = |setting: &str| r.rows.iter().find(|row| row.setting == setting).unwrap().mean;
    let (mcp, body) = (mean("body_plus_mcp"), mean("body_only"));
    let rows = r.rows.iter().map(|row| format!("{} {:.2}", row.label, row.mean)).collect::<Vec<_>>().join(", ");
    let ok = r.rows.len() == 4 && mcp <= body;
    report(5, ok, &format!("hand MPVPE (mm): {rows}"));
    let _ = write!(std::io::stderr(), "{}", r.to_table());
    assert!(ok);
}

#[test]
fn criterion_6_ablation_isolation() {
    let base = PipelineConfig::toy();
    let model = build_toy_model(&base.model);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let [h, w] = base.image_size;
    let img = Tensor::from_fn(&[3, h, w], |_| rng.random_range(0.0..1.0));

    let fingers = |cfg: &PipelineConfig| -> (Vec<f64>, Vec<f64>) {
        let weights = init_weights(cfg, 0).unwrap();
        let tape = Tape::new();
        let bound = weights.bind(&tape, false);
        let out = full_forward(&tape, &bound, cfg, &model, tape.constant(img.clone()), None).unwrap();
        let r = tape.value(out.hands.right.theta).data().to_vec();
        let l = tape.value(out.hands.left.theta).data().to_vec();
        (r, l)
    };
    let mut identical = true;
    for fbf in [false, true] {
        let reference = fingers(&PipelineConfig {
            finger_body_feature: fbf,
            ..base.clone()
        });
        for mode in WristInputMode::ALL {
            identical &= fingers(&PipelineConfig {
                wrist_input_mode: mode,
                finger_body_feature: fbf,
                ..base.clone()
            }) == reference;
        }
    }

    // injection off versus a graph built without body features at all
    let off = PipelineConfig {
        finger_body_feature: false,
        ..base.clone()
    };
    let weights = init_weights(&off, 0).unwrap();
    let tape = Tape::new();
    let bound = weights.bind(&tape, false);
    let out = full_forward(&tape, &bound, &off, &model, tape.constant(img.clone()), None).unwrap();
    let b = |i: usize| tape.constant(Tensor::vector(out.crop_boxes[i].to_array().to_vec()));
    let bare = handnet_forward(&tape, &bound, &off, tape.constant(img.clone()), b(1), b(0), None).unwrap();
    let same = |x, y| *tape.value(x) == *tape.value(y);
    let exact = same(out.hands.right.theta, bare.right.theta)
        && same(out.hands.left.theta, bare.left.theta)
        && same(out.hands.v_m, bare.v_m)
        && same(out.hands.right.backbone.features, bare.right.backbone.features);
    let ok = identical && exact;
    report(6, ok, &format!("fingers bit-identical across wrist modes: {identical}; injection off equals injection-free graph: {exact}"));
    assert!(ok);
}

#[test]
fn criterion_7_flip_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut involution: f64 = 0.0;
    for _ in 0..1000 {
        let v = AxisAngle::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let twice = mirror_rotation(&mirror_rotation(&v));
        involution = involution.max((twice.0 - v.0).abs().max());
    }
    let img = Tensor::from_fn(&[3, 17, 23], |_| rng.random_range(-1.0..1.0));
    let double_flip = hflip_image(&hflip_image(&img)) == img;

    let cfg = PipelineConfig {
        finger_body_feature: false,
        ..PipelineConfig::toy()
    };
    let weights = init_weights(&cfg, 1).unwrap();
    let [h, w] = cfg.image_size;
    let wm1 = (w - 1) as f64;
    let mut pair_err: f64 = 0.0;
    for _ in 0..3 {
        let image = Tensor::from_fn(&[3, h, w], |_| rng.random_range(0.0..1.0));
        let flipped = hflip_image(&image);
        let side = rng.random_range(20.0..36.0);
        let bx = [rng.random_range(30.0..100.0), rng.random_range(30.0..70.0), side, side];
        let mirrored = [wm1 - bx[0], bx[1], bx[2], bx[3]];
        let tape = Tape::new();
        let bound = weights.bind(&tape, false);
        let var = |b: [f64; 4]| tape.constant(Tensor::vector(b.to_vec()));
        let a = handnet_forward(&tape, &bound, &cfg, tape.constant(image), var(bx), var(mirrored), None).unwrap();
        let b = handnet_forward(&tape, &bound, &cfg, tape.constant(flipped), var(bx), var(mirrored), None).unwrap();
        let diff = |x, y| tape.value(x).max_abs_diff(&tape.value(y));
        let r_mirrored = mirror_axis_angle_op(&tape, a.right.theta).unwrap();
        pair_err = pair_err.max(diff(r_mirrored, b.left.theta));
        pair_err = pair_err.max(diff(a.right.pose.coords, b.left.pose.coords));
    }
    let ok = involution == 0.0 && double_flip && pair_err < 1e-6;
    report(
        7,
        ok,
        &format!("mirror involution err {involution:.1e}, double hflip identity {double_flip}, hand mirror pair err {pair_err:.1e} (< 1e-6)"),
    );
    assert!(ok);
}

#[test]
fn criterion_8_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::toy();
    cfg.optim.batch_size = 4;
    cfg.optim.epochs = 2;
    cfg.optim.decay_epoch = Some(1);
    cfg.optim.eval_every = 2;
    cfg.data.train_size = 8;
    cfg.data.test_size = 4;
    let config = dir.path().join("config.json");
    std::fs::write(&config, cfg.to_json()).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_wholebody"))
            .args(["--config", config.to_str().unwrap(), "--seed", "5", "--out-dir", out.to_str().unwrap(), "train"])
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    let files = ["checkpoint.json", "loss_curve.json", "report.json"];
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    let same: Vec<bool> = files.iter().map(|f| read(&a, f) == read(&b, f)).collect();
    let ok = same.iter().all(|s| *s);
    report(8, ok, &format!("byte-identical {}", files.iter().zip(&same).map(|(f, s)| format!("{f}={s}")).collect::<Vec<_>>().join(" ")));
    assert!(ok);
}
