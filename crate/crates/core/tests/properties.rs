mod common;

use anchorflow::flowmatch::{
    cfg_velocity, fm_loss, make_uncond_condition, masked_path, sample, sample_source_noise, KnownMask, LatentCodec,
    NoiseSpec, SamplerConfig,
};
use anchorflow::metrics::{chunk_world_metrics, jitter, mpjpe, pa_mpjpe, procrustes_align, regional_breakdown};
use anchorflow::motion::ConditionSet;
use anchorflow::nn::rope_rotate;
use anchorflow::rotation::{exp_so3, log_so3, Vec3};
use anchorflow::skeleton::{forward_kinematics, BodyShape, Skeleton, JOINT_NAMES, NUM_BETAS};
use anchorflow::worldmotion::{encode_gv, recover_world, WorldTrajectory};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vec3(s: f64) -> impl Strategy<Value = Vec3> {
    (-s..s, -s..s, -s..s).prop_map(|(a, b, c)| Vec3::new(a, b, c))
}

fn frames_of(rng: &mut ChaCha8Rng, n: usize, j: usize) -> Vec<Vec<Vec3>> {
    (0..n).map(|_| common::random_cloud(rng, j, 1.0)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn log_inverts_exp(v in vec3(3.0)) {
        let back = exp_so3(&log_so3(&exp_so3(&v)));
        prop_assert!((back - exp_so3(&v)).norm() < 1e-9);
    }

    #[test]
    fn log_inverts_exp_near_half_turn(v in vec3(1.0), gap in 0.0..1e-2f64) {
        prop_assume!(v.norm() > 1e-3);
        let aa = v.normalize() * (std::f64::consts::PI - gap);
        let back = exp_so3(&log_so3(&exp_so3(&aa)));
        prop_assert!((back - exp_so3(&aa)).norm() < 1e-9);
    }

    #[test]
    fn fk_matches_chain_oracle(seed in any::<u64>(), scale in 0.0..2.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let skel = Skeleton::template();
        let pose = common::random_pose(&mut rng, scale);
        let mut beta = [0.0; NUM_BETAS];
        beta.iter_mut().for_each(|b| *b = rng.random_range(-2.0..2.0));
        let shape = BodyShape::new(beta);
        let got = forward_kinematics(&pose, &shape, &skel).unwrap();
        for (a, b) in got.iter().zip(common::fk_oracle(&pose, &shape, &skel)) {
            prop_assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn gravity_view_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 120;
        let mut heading = rng.random_range(-3.0..3.0);
        let mut pos = Vec3::new(rng.random_range(-2.0..2.0), 0.9, rng.random_range(-2.0..2.0));
        let (mut gw, mut tw) = (Vec::new(), Vec::new());
        for _ in 0..n {
            let tilt = Vec3::new(rng.random_range(-0.2..0.2), 0.0, rng.random_range(-0.2..0.2));
            gw.push(log_so3(&(exp_so3(&Vec3::new(0.0, heading, 0.0)) * exp_so3(&tilt))));
            tw.push(pos);
            heading += rng.random_range(-0.05..0.05);
            pos += Vec3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.01..0.01), rng.random_range(-0.05..0.05));
        }
        let traj = WorldTrajectory { gamma_w: gw, tau_w: tw, fps: 30.0 };
        let enc = encode_gv(&traj, &Vec3::new(0.0, -9.81, 0.0)).unwrap();
        let back = recover_world(&enc.gamma_gv, &enc.v_root, &enc.frame, &traj.tau_w[0], 30.0).unwrap();
        for t in 0..n {
            prop_assert!((back.tau_w[t] - traj.tau_w[t]).norm() < 1e-6);
            prop_assert!((exp_so3(&back.gamma_w[t]) - exp_so3(&traj.gamma_w[t])).norm() < 1e-6);
        }
    }

    #[test]
    fn rope_depends_on_relative_position(seed in any::<u64>(), m in -50.0..50.0f64, n in -50.0..50.0f64, shift in -20.0..20.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let base = dot(&rope_rotate(&q, m, 10_000.0).unwrap(), &rope_rotate(&k, n, 10_000.0).unwrap());
        let moved = dot(&rope_rotate(&q, m + shift, 10_000.0).unwrap(), &rope_rotate(&k, n + shift, 10_000.0).unwrap());
        prop_assert!((base - moved).abs() < 1e-9);
    }

    #[test]
    fn masked_path_keeps_known_coordinates(seed in any::<u64>(), t in 0.0..=1.0f64) {
        let codec = LatentCodec::default();
        let mask = KnownMask::new(&codec.layout);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Array2::from_shape_fn((6, 148), |_| rng.random_range(-2.0..2.0));
        let eps = sample_source_noise(&mut rng, 6, &codec.layout, &NoiseSpec::default()).unwrap();
        let zt = masked_path(&z, &eps, &mask, t).unwrap();
        for c in 0..148 {
            for r in 0..6 {
                if mask.is_unknown(c) {
                    prop_assert!((zt[[r, c]] - ((1.0 - t) * eps[[r, c]] + t * z[[r, c]])).abs() < 1e-12);
                } else {
                    prop_assert_eq!(zt[[r, c]].to_bits(), z[[r, c]].to_bits());
                }
            }
        }
    }

    #[test]
    fn fm_loss_ignores_known_coordinates(seed in any::<u64>()) {
        let codec = LatentCodec::default();
        let mask = KnownMask::new(&codec.layout);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Array2::from_shape_fn((4, 148), |_| rng.random_range(-2.0..2.0));
        let eps = Array2::from_shape_fn((4, 148), |_| rng.random_range(-2.0..2.0));
        let v = Array2::from_shape_fn((4, 148), |_| rng.random_range(-2.0..2.0));
        let mut w = v.clone();
        for c in (0..148).filter(|&c| !mask.is_unknown(c)) {
            w.column_mut(c).mapv_inplace(|x| x + rng.random_range(-100.0..100.0));
        }
        prop_assert_eq!(fm_loss(&v, &z, &eps, &mask).unwrap(), fm_loss(&w, &z, &eps, &mask).unwrap());
    }

    #[test]
    fn sampler_reimposes_anchor(seed in any::<u64>(), steps in 1usize..12, scale in 0.5..2.0f64) {
        let codec = LatentCodec::default();
        let mask = KnownMask::new(&codec.layout);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut anchor = anchorflow::flowmatch::CompositeLatent::zeros(5, codec.layout.clone());
        anchor.data.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let field = |z: &Array2<f64>, t: f64, _: &ConditionSet| z.mapv(|x| (x * 3.1 + t).sin());
        let cfg = SamplerConfig { steps, cfg_scale: scale };
        let out = sample(&field, &anchor, &mask, &ConditionSet::zeros(5), &cfg, &NoiseSpec::default(), &mut rng).unwrap();
        for c in (0..148).filter(|&c| !mask.is_unknown(c)) {
            for r in 0..5 {
                prop_assert_eq!(out.data[[r, c]].to_bits(), anchor.data[[r, c]].to_bits());
            }
        }
    }

    #[test]
    fn guidance_is_affine(seed in any::<u64>(), s in 0.0..3.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Array2::from_shape_fn((3, 148), |_| rng.random_range(-1.0..1.0));
        let b = Array2::from_shape_fn((3, 148), |_| rng.random_range(-1.0..1.0));
        let g = cfg_velocity(&a, &b, s).unwrap();
        let want = &b + &((&a - &b) * s);
        prop_assert!((&g - &want).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn uncond_keeps_anchor_channels(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = ConditionSet::zeros(3);
        for m in [&mut c.bbox, &mut c.rays, &mut c.image, &mut c.camera, &mut c.torso] {
            m.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
        let u = make_uncond_condition(&c);
        prop_assert_eq!(&u.bbox, &c.bbox);
        prop_assert_eq!(&u.camera, &c.camera);
        prop_assert_eq!(&u.torso, &c.torso);
        prop_assert!(u.rays.iter().chain(u.image.iter()).all(|x| *x == 0.0));
        prop_assert_eq!(make_uncond_condition(&u), u);
    }

    #[test]
    fn alignment_only_reduces_error(seed in any::<u64>(), frames in 10usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let body = common::random_cloud(&mut rng, 22, 0.5);
        let walk = Vec3::new(rng.random_range(-0.05..0.05), 0.0, rng.random_range(-0.05..0.05));
        let drift = common::random_cloud(&mut rng, 1, 0.01)[0];
        let r = common::random_rotation(&mut rng);
        let gt: Vec<Vec<Vec3>> = (0..frames).map(|t| body.iter().map(|p| p + walk * t as f64).collect()).collect();
        let pred: Vec<Vec<Vec3>> = gt
            .iter()
            .enumerate()
            .map(|(t, f)| f.iter().map(|p| r * (p + drift * t as f64) + common::random_cloud(&mut rng, 1, 0.03)[0]).collect())
            .collect();
        prop_assert!(pa_mpjpe(&pred, &gt).unwrap() <= mpjpe(&pred, &gt).unwrap() + 1e-9);
        let (wa, w) = chunk_world_metrics(&pred, &gt, 100, false).unwrap();
        prop_assert!(wa <= w + 1e-9);
    }

    #[test]
    fn metrics_invariant_to_shared_rigid_motion(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = frames_of(&mut rng, 5, 22);
        let pred: Vec<Vec<Vec3>> = gt.iter().map(|f| f.iter().map(|p| p * 1.05 + Vec3::new(0.02, 0.0, 0.01)).collect()).collect();
        let r = common::random_rotation(&mut rng);
        let t = Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let mv = |s: &[Vec<Vec3>]| s.iter().map(|f| f.iter().map(|p| r * p + t).collect()).collect::<Vec<Vec<Vec3>>>();
        let (pm, gm) = (mv(&pred), mv(&gt));
        prop_assert!((mpjpe(&pred, &gt).unwrap() - mpjpe(&pm, &gm).unwrap()).abs() < 1e-7);
        prop_assert!((pa_mpjpe(&pred, &gt).unwrap() - pa_mpjpe(&pm, &gm).unwrap()).abs() < 1e-7);
        let (a, b) = chunk_world_metrics(&pred, &gt, 100, false).unwrap();
        let (c, d) = chunk_world_metrics(&pm, &gm, 100, false).unwrap();
        prop_assert!((a - c).abs() < 1e-6 && (b - d).abs() < 1e-6);
        prop_assert!((jitter(&pred, 30.0).unwrap() - jitter(&pm, 30.0).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn jitter_vanishes_on_quadratics(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c: Vec<[Vec3; 3]> = (0..3).map(|_| [0, 1, 2].map(|_| common::random_cloud(&mut rng, 1, 1.0)[0])).collect();
        let joints: Vec<Vec<Vec3>> = (0..20)
            .map(|t| {
                let s = t as f64 / 30.0;
                c.iter().map(|k| k[0] + k[1] * s + k[2] * s * s).collect()
            })
            .collect();
        prop_assert!(jitter(&joints, 30.0).unwrap() < 1e-6);
    }

    #[test]
    fn regional_means_recompute(vals in proptest::collection::vec(0.0..200.0f64, 22)) {
        let per: std::collections::BTreeMap<String, f64> = JOINT_NAMES.iter().map(|n| n.to_string()).zip(vals.iter().copied()).collect();
        let (a, d) = (&JOINT_NAMES[..8], &JOINT_NAMES[8..]);
        let r = regional_breakdown(&per, a, d).unwrap();
        let ma = vals[..8].iter().sum::<f64>() / 8.0;
        let md = vals[8..].iter().sum::<f64>() / 14.0;
        prop_assert!((r.anchor_mean - ma).abs() < 1e-9);
        prop_assert!((r.distal_mean - md).abs() < 1e-9);
        prop_assert!((r.gap - (md - ma)).abs() < 1e-9);
    }
}

#[test]
fn procrustes_beats_random_probes() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let y = common::random_cloud(&mut rng, 12, 1.0);
    let r0 = common::random_rotation(&mut rng);
    let x: Vec<Vec3> = y
        .iter()
        .map(|p| r0 * p * 1.3 + Vec3::new(0.2, -0.1, 0.4) + common::random_cloud(&mut rng, 1, 0.05)[0])
        .collect();
    let res = |s: f64, r: &nalgebra::Rotation3<f64>, t: &Vec3| x.iter().zip(&y).map(|(a, b)| (r * b * s + t - a).norm_squared()).sum::<f64>();
    let a = procrustes_align(&x, &y, true).unwrap();
    let best = x.iter().zip(&y).map(|(p, q)| (a.apply(q) - p).norm_squared()).sum::<f64>();
    for _ in 0..10_000 {
        let r = common::random_rotation(&mut rng);
        let s = rng.random_range(0.5..2.0);
        let t = common::random_cloud(&mut rng, 1, 1.0)[0];
        assert!(res(s, &r, &t) >= best - 1e-12);
    }
}

#[test]
fn w_mpjpe_matches_search_oracle_on_drift() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let body = common::random_cloud(&mut rng, 22, 0.5);
    let gt: Vec<Vec<Vec3>> = (0..100)
        .map(|t| body.iter().map(|p| p + Vec3::new(0.03 * t as f64, 0.0, 0.0)).collect())
        .collect();
    let drift = Vec3::new(0.0, 0.0, 0.001);
    let pred: Vec<Vec<Vec3>> = gt
        .iter()
        .enumerate()
        .map(|(t, f)| f.iter().map(|p| p + drift * t as f64).collect())
        .collect();
    let (_, w) = chunk_world_metrics(&pred, &gt, 100, false).unwrap();
    let oracle = common::w_mpjpe_search(&pred, &gt);
    assert!((w - oracle).abs() / oracle < 0.02, "{w} vs {oracle}");
}

#[test]
fn source_noise_has_block_std() {
    let codec = LatentCodec::default();
    let spec = NoiseSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let eps = sample_source_noise(&mut rng, 700, &codec.layout, &spec).unwrap();
    for (b, off, width) in codec.layout.blocks() {
        let vals: Vec<f64> = eps.slice(ndarray::s![.., off..off + width]).iter().copied().collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let want = spec.sigma_of(b);
        assert!((std - want).abs() < 0.02 * want.max(1e-12), "{}: {std} vs {want}", b.name());
    }
}

#[test]
fn dropout_rate_matches_visible_fraction() {
    let mut spec = anchorflow::synthdata::MotionSpec::default();
    spec.n_frames = 20;
    spec.occlusion = anchorflow::synthdata::OcclusionSpec { dropout: 0.3, occluders: 0, occluder_size: (0.0, 0.0) };
    let skel = Skeleton::template();
    let fracs: Vec<f64> = (0..1000)
        .map(|s| anchorflow::synthdata::generate_record(s, "v", &spec, &skel).unwrap().obs.visible_fraction())
        .collect();
    let mean = fracs.iter().sum::<f64>() / fracs.len() as f64;
    assert!((mean - 0.7).abs() < 0.03, "visible fraction {mean}");
}

#[test]
fn invisible_keypoints_carry_no_signal() {
    let mut spec = anchorflow::synthdata::MotionSpec::default();
    spec.occlusion.dropout = 0.5;
    let skel = Skeleton::template();
    let mut blank: Option<Vec<f64>> = None;
    for s in 0..10 {
        let r = anchorflow::synthdata::generate_record(s, "v", &spec, &skel).unwrap();
        let width = r.obs.cond.rays.ncols() / r.obs.visible[0].len();
        for (t, vis) in r.obs.visible.iter().enumerate() {
            for (j, v) in vis.iter().enumerate() {
                if *v {
                    continue;
                }
                assert_eq!(r.obs.keypoints[t][j], [0.0, 0.0]);
                let block: Vec<f64> = (0..width).map(|i| r.obs.cond.rays[[t, j * width + i]]).collect();
                assert_eq!(blank.get_or_insert_with(|| block.clone()), &block);
            }
        }
    }
    assert!(blank.is_some());
}
