//! Benchmarks for the per-pixel pipelines: row-parallel vs sequential view
//! synthesis, scene generation, and one tape forward/backward step.

use criterion::{criterion_group, criterion_main, Criterion};

use scenefit::autodiff::Tape;
use scenefit::field::Field;
use scenefit::geometry::{CameraIntrinsics, RigidTransform};
use scenefit::losses::{total_loss_s, LossConfig};
use scenefit::masks::{normalize_pixel, MaskStack, OrderingWeights, TransformSet};
use scenefit::scene::{generate_scene, ObjectConfig, SceneConfig, SourceFrame, TextureStyle};
use scenefit::warp::{synthesize_view, synthesize_view_s, synthesize_view_sequential};

fn bench_scene() -> scenefit::scene::SyntheticScene {
    let cfg = SceneConfig {
        width: 128,
        height: 96,
        intrinsics: CameraIntrinsics::new(120.0, 120.0, 63.5, 47.5).unwrap(),
        background_depth: 10.0,
        ego_to_prev: RigidTransform::new([0.001, -0.003, 0.0], [0.15, 0.01, 0.04]),
        ego_to_next: RigidTransform::new([-0.001, 0.003, 0.0], [-0.15, -0.01, -0.04]),
        objects: vec![
            ObjectConfig {
                rect: [20.0, 50.0, 50.0, 78.0],
                depth: 5.5,
                motion: [0.2, 0.0, 0.0],
            },
            ObjectConfig {
                rect: [75.0, 15.0, 108.0, 40.0],
                depth: 6.5,
                motion: [-0.18, 0.04, 0.0],
            },
        ],
        texture_seed: 9,
        texture_style: TextureStyle::SmoothNoise,
        texture_detail: Default::default(),
    };
    generate_scene(&cfg).unwrap()
}

fn warp_benches(c: &mut Criterion) {
    let scene = bench_scene();
    let intr = scene.meta.config.intrinsics;
    let mut group = c.benchmark_group("warp_128x96_k3");
    group.bench_function("parallel", |b| {
        b.iter(|| {
            synthesize_view(
                &scene.gt_depth,
                &scene.gt_masks,
                &scene.gt_transforms[1],
                &scene.next,
                &intr,
            )
            .unwrap()
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            synthesize_view_sequential(
                &scene.gt_depth,
                &scene.gt_masks,
                &scene.gt_transforms[1],
                &scene.next,
                &intr,
            )
            .unwrap()
        })
    });
    group.finish();
}

fn scene_generation(c: &mut Criterion) {
    c.bench_function("generate_scene_128x96", |b| b.iter(bench_scene));
}

fn tape_step(c: &mut Criterion) {
    // One forward/backward pass of the full objective at fitting resolution.
    let scene = {
        let mut cfg = bench_scene().meta.config;
        cfg.width = 64;
        cfg.height = 48;
        cfg.intrinsics = CameraIntrinsics::new(60.0, 60.0, 31.5, 23.5).unwrap();
        cfg.objects = vec![ObjectConfig {
            rect: [12.0, 24.0, 28.0, 38.0],
            depth: 5.5,
            motion: [0.2, 0.0, 0.0],
        }];
        generate_scene(&cfg).unwrap()
    };
    let (w, h) = (scene.width(), scene.height());
    let k = 3usize;
    let n = w * h;
    let params: Vec<f64> = (0..n * (1 + k) + 12 * k)
        .map(|i| match i {
            i if i < n => (8.0f64).ln(),
            _ => 0.01,
        })
        .collect();
    let tape = Tape::with_capacity(1 << 21);
    let d = OrderingWeights::ordered(k);
    let mut grads = Vec::new();
    c.bench_function("fit_step_64x48_k3", |b| {
        b.iter(|| {
            tape.clear();
            let vars: Vec<_> = params.iter().map(|&p| tape.var(p)).collect();
            let depth = Field::from_data(w, h, vars[..n].iter().map(|v| {
                use scenefit::autodiff::Scalar;
                v.exp()
            }).collect());
            let mut mask_data = Vec::with_capacity(n * k);
            let mut px = Vec::new();
            for pixel in vars[n..n * (1 + k)].chunks_exact(k) {
                normalize_pixel(pixel, d.as_slice(), &mut px);
                mask_data.extend_from_slice(&px);
            }
            let masks = MaskStack {
                width: w,
                height: h,
                k,
                data: mask_data,
            };
            let mut warped = Vec::new();
            for (s, _) in [SourceFrame::Prev, SourceFrame::Next].iter().enumerate() {
                let base = n * (1 + k) + s * 6 * k;
                let ts: Vec<_> = (0..k)
                    .map(|i| {
                        let raw = &vars[base + 6 * i..base + 6 * i + 6];
                        scenefit::geometry::decode_pose_s(&[
                            raw[0], raw[1], raw[2], raw[3], raw[4], raw[5],
                        ])
                    })
                    .collect();
                let src = if s == 0 { &scene.prev } else { &scene.next };
                warped.push(
                    synthesize_view_s(
                        &depth,
                        &masks,
                        &TransformSet::new(ts),
                        src,
                        &scene.meta.config.intrinsics,
                    )
                    .unwrap(),
                );
            }
            let refs: Vec<_> = warped.iter().collect();
            let terms = total_loss_s(
                &scene.target,
                &refs,
                &depth,
                Some(&masks),
                None,
                &LossConfig::default(),
            )
            .unwrap();
            tape.backward_into(terms.total, 1.0, &mut grads).unwrap();
            grads[0]
        })
    });
}

criterion_group!(benches, warp_benches, scene_generation, tape_step);
criterion_main!(benches);
