use proptest::prelude::*;
use sidepth::align::{align_mean_scale, fit_scale_shift};
use sidepth::geometry::{normals_from_depth, point_cloud_from_depth, project_point};
use sidepth::io::{read_pfm_from, write_pfm_to, PfmImage};
use sidepth::losses::{ordinal_pair_loss, ranking_pair_loss, ssi_loss, ssi_stage_loss, LossWeights, SsiStageConfig};
use sidepth::pipeline::select_high_resolution;
use sidepth::sampling::PairSampleConfig;
use sidepth::synth::{render_scene, SceneSpec};
use sidepth::{MultiGrid, ScalarGrid, ValidMask};

fn grid(w: usize, h: usize, seed: u64) -> ScalarGrid {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    ScalarGrid::from_fn(w, h, |_, _| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 11) as f64 / (1u64 << 53) as f64
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn joint_affine_commutes_with_mean_scale_alignment(seed in 0u64..10_000, a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let lo = grid(12, 9, seed);
        let hi = lo.zip_map(&grid(12, 9, seed ^ 0xabc), |l, n| 2.0 * l + 0.3 * n).unwrap();
        let all = ValidMask::for_grid(&hi);
        let t = |g: &ScalarGrid| g.map(|v| a * v + b).unwrap();
        let lhs = align_mean_scale(&t(&hi), &t(&lo), &all).unwrap();
        let rhs = t(&align_mean_scale(&hi, &lo, &all).unwrap());
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()), "{x} vs {y}");
        }
        // Idempotence needs an unclamped slope, hence the correlated inputs.
        let once = align_mean_scale(&hi, &lo, &all).unwrap();
        let twice = align_mean_scale(&once, &lo, &all).unwrap();
        for (x, y) in once.data().iter().zip(twice.data()) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn resolution_targets_are_multiples_of_32_within_bounds(seed in 0u64..1000, w in 33usize..140, h in 33usize..140, max in 1.0f64..3.0) {
        let g = grid(w, h, seed);
        let img = MultiGrid::from_channels(&[g.clone(), g.clone(), g]).unwrap();
        let r = select_high_resolution(&img, 64, max).unwrap();
        for (native, got) in [(w, r.width), (h, r.height)] {
            let lo = native.div_ceil(32) * 32;
            let hi = (max * native as f64).floor() as usize / 32 * 32;
            if lo <= hi {
                prop_assert!(got % 32 == 0 && got >= native && got as f64 <= max * native as f64, "{native} -> {got}");
            } else {
                prop_assert_eq!(got, native);
            }
        }
    }

    #[test]
    fn ssi_losses_ignore_affine_maps_of_the_prediction(seed in 0u64..500, a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let scene = render_scene(&SceneSpec::new(seed, 32, 32)).unwrap();
        let gt = scene.disparity();
        let pred = gt.zip_map(&grid(32, 32, seed), |g, n| g + 0.05 * n).unwrap();
        let moved = pred.map(|v| a * v + b).unwrap();
        let l0 = ssi_loss(&pred, &gt, &scene.mask).unwrap().value;
        let l1 = ssi_loss(&moved, &gt, &scene.mask).unwrap().value;
        prop_assert!((l0 - l1).abs() <= 1e-9 * (1.0 + l0));
        let exact = ssi_loss(&gt.map(|v| a * v + b).unwrap(), &gt, &scene.mask).unwrap().value;
        prop_assert!(exact < 1e-9);
        let cfg = SsiStageConfig { pair_weight: 0.0, ..SsiStageConfig::new(&LossWeights::default(), PairSampleConfig::default()) };
        let s0 = ssi_stage_loss(&pred, &gt, &scene.mask, &cfg).unwrap().value;
        let s1 = ssi_stage_loss(&moved, &gt, &scene.mask, &cfg).unwrap().value;
        prop_assert!((s0 - s1).abs() <= 1e-8 * (1.0 + s0));
    }

    #[test]
    fn correctly_ordered_pairs_cost_nothing_under_the_ordinal_loss(pi in -5.0f64..5.0, gap in 1e-6f64..5.0, gi in -5.0f64..5.0, ggap in 0.01f64..5.0) {
        let o = ordinal_pair_loss(pi + gap, pi, gi + ggap, gi, 0.01);
        prop_assert_eq!(o.value, 0.0);
        prop_assert_eq!((o.d_pred_i, o.d_pred_j), (0.0, 0.0));
        let r = ranking_pair_loss(pi + gap, pi, gi + ggap, gi, 0.01);
        prop_assert!(r.value > 0.0 && r.d_pred_i != 0.0);
    }

    #[test]
    fn scene_normals_are_unit_and_points_reproject(seed in 0u64..300) {
        let scene = render_scene(&SceneSpec::new(seed, 40, 30)).unwrap();
        for n in scene.normals.vectors() {
            prop_assert!(((n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt() - 1.0).abs() < 1e-6);
        }
        let field = normals_from_depth(&scene.depth, &scene.intrinsics, &scene.mask).unwrap();
        for (n, ok) in field.normals.vectors().iter().zip(field.valid.flags()) {
            if *ok {
                prop_assert!(((n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt() - 1.0).abs() < 1e-6);
            }
        }
        let cloud = point_cloud_from_depth(&scene.depth, &scene.intrinsics, &scene.mask, None).unwrap();
        for (k, p) in cloud.points.iter().enumerate() {
            let (u, v, z) = project_point(&scene.intrinsics, *p);
            prop_assert!((u - (k % 40) as f64).abs() < 1e-9 && (v - (k / 40) as f64).abs() < 1e-9);
            prop_assert!((z - scene.depth.data()[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn pfm_round_trip_is_lossless_for_f32_values(seed in 0u64..1000, w in 1usize..20, h in 1usize..20) {
        let g = grid(w, h, seed).map(|v| (v * 100.0 - 50.0) as f32 as f64).unwrap();
        let mut buf = Vec::new();
        write_pfm_to(&mut buf, &PfmImage::from_grid(&g)).unwrap();
        let back = read_pfm_from(&mut buf.as_slice()).unwrap().into_grid().unwrap();
        prop_assert_eq!(back, g);
    }
}

#[test]
fn exact_affine_fit_recovers_parameters() {
    let g = grid(16, 16, 3);
    let t = g.map(|v| 2.5 * v - 0.75).unwrap();
    let fit = fit_scale_shift(&g, &t, &ValidMask::for_grid(&g)).unwrap();
    assert!((fit.a - 2.5).abs() < 1e-12 && (fit.b + 0.75).abs() < 1e-12);
    assert!(fit.residual_sse < 1e-20);
}
