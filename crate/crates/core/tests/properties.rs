mod common;

use proptest::prelude::*;

use mvsc_core::checks::fill_zero_params;
use mvsc_core::config::ModelConfig;
use mvsc_core::cvtr::{CrossViewTransformer, CvtrShape, EncoderShape, FusionScheme, TokenMixing};
use mvsc_core::kernel::{
    apply_row, build_lattice, build_rotation, det, mat_mul, orthogonality_error, rotate_kernel,
    RotationSpec,
};
use mvsc_core::metrics::{sc_metrics, ssc_metrics};
use mvsc_core::model::Model;
use mvsc_core::mvfs::{corner_weights, synth_view_conv, FeatureVolume, MvfsLayer, VolumeRole};
use mvsc_core::nn::Module;
use mvsc_core::rng::SeededRng;
use mvsc_core::scene::generate_scene;
use mvsc_core::tensor::{cross_entropy, read_tensor_from, softmax, write_tensor_to};
use mvsc_core::Tensor;

fn angle() -> impl Strategy<Value = f64> {
    -360.0f64..360.0
}

fn quarter() -> impl Strategy<Value = f64> {
    (0i32..4).prop_map(|q| 90.0 * q as f64)
}

fn layer(angles: [f64; 3], cin: usize, cout: usize, rng: &mut SeededRng) -> MvfsLayer {
    let view = rotate_kernel(
        &build_lattice(3).unwrap(),
        &RotationSpec::from_angles(angles),
    );
    MvfsLayer::from_parts(vec![view], vec![Tensor::randn(&[27, cin, cout], 1.0, rng)]).unwrap()
}

fn small_cvtr(scheme: FusionScheme, seed: u64) -> CrossViewTransformer {
    let mut rng = SeededRng::new(seed);
    let mut t = CrossViewTransformer::new(
        CvtrShape {
            views: 3,
            encoder: EncoderShape {
                token_rows: 4,
                voxels: 8,
                channels: 4,
                depth: 1,
                heads: 2,
            },
        },
        scheme,
        TokenMixing::Concat,
        true,
        &mut rng,
    )
    .unwrap();
    fill_zero_params(&mut t, 0.3, &mut rng);
    t
}

fn schemes() -> impl Strategy<Value = FusionScheme> {
    prop_oneof![
        Just(FusionScheme::AllForOneTokens),
        Just(FusionScheme::AllForOneFeatures),
        Just(FusionScheme::All)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let x = Tensor::randn(&[rows, cols], scale, &mut SeededRng::new(seed));
        let y = softmax(&x, 1).unwrap();
        for r in 0..rows {
            let row = &y.data()[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_give_log_n(rows in 1usize..8, n in 2usize..12, c in -5.0f64..5.0) {
        let logits = Tensor::full(&[rows, n], c);
        let labels: Vec<usize> = (0..rows).map(|i| i % n).collect();
        let ce = cross_entropy(&logits, &labels, None).unwrap();
        prop_assert!((ce - (n as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn rotations_are_proper(ax in angle(), ay in angle(), az in angle()) {
        let r = build_rotation(ax, ay, az);
        prop_assert!(orthogonality_error(&r.matrix) < 1e-12);
        prop_assert!((det(&r.matrix) - 1.0).abs() < 1e-12);
        let oracle = common::rotation(ax, ay, az);
        for i in 0..3 {
            for j in 0..3 {
                prop_assert!((r.matrix[i][j] - oracle[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rotation_preserves_distances(ax in angle(), ay in angle(), az in angle(), i in 0usize..27, j in 0usize..27) {
        let lattice = build_lattice(3).unwrap();
        let rk = rotate_kernel(&lattice, &RotationSpec::from_angles([ax, ay, az]));
        let d = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
        let (p, q) = (&lattice.points()[i], &lattice.points()[j]);
        let (pr, qr) = (&rk.points()[i], &rk.points()[j]);
        prop_assert!((d(p, q) - d(pr, qr)).abs() < 1e-10);
        prop_assert!(rk.points()[rk.center_index()].iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn quarter_turns_close_the_lattice(ax in quarter(), ay in quarter(), az in quarter(), k in prop_oneof![Just(3usize), Just(5)]) {
        let lattice = build_lattice(k).unwrap();
        let rk = rotate_kernel(&lattice, &RotationSpec::from_angles([ax, ay, az]));
        prop_assert!(rk.lattice_exact());
        let mut hit = vec![false; lattice.len()];
        for p in rk.points() {
            let idx = lattice.points().iter().position(|q| q == p);
            prop_assert!(idx.is_some());
            hit[idx.unwrap()] = true;
        }
        prop_assert!(hit.iter().all(|&h| h));
    }

    #[test]
    fn rotated_points_match_matrix_product(ax in angle(), ay in angle(), az in angle()) {
        let lattice = build_lattice(3).unwrap();
        let spec = RotationSpec::from_angles([ax, ay, az]);
        let rk = rotate_kernel(&lattice, &spec);
        let composed = mat_mul(&mat_mul(&mvsc_core::kernel::factor_x(ax), &mvsc_core::kernel::factor_y(ay)), &mvsc_core::kernel::factor_z(az));
        for (p, q) in lattice.points().iter().zip(rk.points()) {
            let want = apply_row(p, &composed);
            let oracle = common::rotate(p, &common::rotation(ax, ay, az));
            for a in 0..3 {
                prop_assert!((q[a] - want[a]).abs() < 1e-12);
                prop_assert!((q[a] - oracle[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn corner_weights_partition_unity(x in 0.0f64..4.0, y in 0.0f64..3.0, z in 0.0f64..5.0) {
        let w = corner_weights([5, 4, 6], &[x, y, z]).unwrap();
        prop_assert!(w.iter().all(|&(_, v)| v >= 0.0));
        prop_assert!((w.iter().map(|&(_, v)| v).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn synthesis_is_linear(ax in angle(), seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = SeededRng::new(seed);
        let l = layer([ax, 0.0, 0.0], 2, 2, &mut rng);
        let u = Tensor::randn(&[3, 4, 3, 2], 1.0, &mut rng);
        let v = Tensor::randn(&[3, 4, 3, 2], 1.0, &mut rng);
        let mix = u.scale(a).add(&v.scale(b)).unwrap();
        let run = |t: &Tensor| synth_view_conv(&FeatureVolume::new(t.clone(), VolumeRole::Original).unwrap(), &l, 0).unwrap().into_tensor();
        let want = run(&u).scale(a).add(&run(&v).scale(b)).unwrap();
        prop_assert!(run(&mix).max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn synthesis_commutes_with_shifts(ax in quarter(), ay in quarter(), seed in any::<u64>(), dx in 0usize..2, dy in 0usize..2, dz in 0usize..2) {
        // Shifting the input shifts the output wherever no tap reaches padding.
        let mut rng = SeededRng::new(seed);
        let l = layer([ax, ay, 0.0], 1, 1, &mut rng);
        let n = 7;
        let big = Tensor::randn(&[n, n, n, 1], 1.0, &mut rng);
        let shifted = Tensor::from_fn(&[n, n, n, 1], |i| {
            let (x, y, z) = (i / (n * n), (i / n) % n, i % n);
            if x + dx < n && y + dy < n && z + dz < n {
                big.data()[((x + dx) * n + y + dy) * n + z + dz]
            } else {
                0.0
            }
        });
        let run = |t: &Tensor| synth_view_conv(&FeatureVolume::new(t.clone(), VolumeRole::Original).unwrap(), &l, 0).unwrap().into_tensor();
        let (a, b) = (run(&big), run(&shifted));
        for x in 1..n - 2 {
            for y in 1..n - 2 {
                for z in 1..n - 2 {
                    let lhs = b.data()[(x * n + y) * n + z];
                    let rhs = a.data()[((x + dx) * n + y + dy) * n + z + dz];
                    prop_assert!((lhs - rhs).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one(nq in 1usize..6, nk in 1usize..7, heads in 1usize..3, seed in any::<u64>(), scaled in any::<bool>()) {
        let mut rng = SeededRng::new(seed);
        let c = 2 * heads;
        let q = Tensor::randn(&[nq, c], 2.0, &mut rng);
        let k = Tensor::randn(&[nk, c], 2.0, &mut rng);
        let w = mvsc_core::attention::attention_weights(&q, &k, heads, scaled).unwrap();
        prop_assert_eq!(w.shape(), &[heads, nq, nk][..]);
        for row in w.data().chunks(nk) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_ignore_voxel_order(seed in any::<u64>(), n in 1usize..200) {
        let mut rng = SeededRng::new(seed);
        let pred: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
        let gt: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
        let mask: Vec<bool> = (0..n).map(|_| rng.chance(0.8)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        let p = |v: &[usize]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let pm: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
        let a = ssc_metrics(&pred, &gt, &mask, 4).unwrap();
        let b = ssc_metrics(&p(&pred), &p(&gt), &pm, 4).unwrap();
        prop_assert_eq!(a, b);
        let occ = |v: &[usize]| v.iter().map(|&c| c != 0).collect::<Vec<_>>();
        let sa = sc_metrics(&occ(&pred), &occ(&gt), &mask).unwrap();
        let sb = sc_metrics(&occ(&p(&pred)), &occ(&p(&gt)), &pm).unwrap();
        prop_assert_eq!(sa, sb);
    }

    #[test]
    fn cvst_round_trip(shape in prop::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
        let mut t = Tensor::randn(&shape, 1e3, &mut SeededRng::new(seed));
        t.data_mut()[0] = -0.0;
        let mut buf = Vec::new();
        write_tensor_to(&t, &mut buf).unwrap();
        let back = read_tensor_from(buf.as_slice()).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_view_sees_every_other(scheme in schemes(), seed in any::<u64>(), src in 0usize..3, dst in 0usize..3) {
        prop_assume!(src != dst);
        let t = small_cvtr(scheme, seed);
        let mut rng = SeededRng::derive(seed, 1);
        let views: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[2, 2, 2, 4], 1.0, &mut rng)).collect();
        let (base, _) = t.forward(&views).unwrap();
        let mut bumped = views.clone();
        bumped[src] = bumped[src].add(&Tensor::randn(&[2, 2, 2, 4], 0.5, &mut rng)).unwrap();
        let (out, _) = t.forward(&bumped).unwrap();
        prop_assert!(out[dst].max_abs_diff(&base[dst]) > 1e-9);
    }

    #[test]
    fn permuting_views_permutes_outputs(scheme in schemes(), seed in any::<u64>(), rot in 1usize..3) {
        let t = small_cvtr(scheme, seed);
        let perm: Vec<usize> = (0..3).map(|i| (i + rot) % 3).collect();
        let mut p = t.clone();
        p.encoders = perm.iter().map(|&i| t.encoders[i].clone()).collect();
        if scheme != FusionScheme::All {
            // `All` is one shared self-attention and keeps its parameters.
            p.fusions = perm.iter().map(|&i| t.fusions[i].clone()).collect();
        }
        let mut rng = SeededRng::derive(seed, 2);
        let views: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[2, 2, 2, 4], 1.0, &mut rng)).collect();
        let pv: Vec<Tensor> = perm.iter().map(|&i| views[i].clone()).collect();
        let (a, _) = t.forward(&views).unwrap();
        let (b, _) = p.forward(&pv).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!(b[j].max_abs_diff(&a[i]) < 1e-10);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn zeroed_network_loss_is_log_classes(seed in any::<u64>()) {
        let cfg = ModelConfig { channels: 8, seed, ..ModelConfig::toy() };
        let mut model = Model::new(&cfg).unwrap();
        model.visit_mut("", &mut |_, t| t.data_mut().fill(0.0));
        let scene = generate_scene(seed, cfg.volume, cfg.num_classes, 3).unwrap();
        let loss = model.loss(&scene).unwrap();
        prop_assert!((loss - (cfg.num_classes as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn generated_scenes_are_valid() {
    let cfg = ModelConfig::toy();
    for seed in 0..100 {
        let s = generate_scene(seed, cfg.volume, cfg.num_classes, 3).unwrap();
        s.check().unwrap();
        assert!(
            s.has_occluded_occupied(),
            "seed {seed} has no occluded occupied voxel"
        );
        assert_eq!(
            s,
            generate_scene(seed, cfg.volume, cfg.num_classes, 3).unwrap()
        );
    }
}
