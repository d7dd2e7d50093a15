//! Randomized invariants checked against independent oracles.

use proptest::prelude::*;
use srde_core::autotune::{expected_improvement, feasible_configs};
use srde_core::dictionary::{apply_filters, assemble_filters, Dictionary};
use srde_core::engine::{run_filtering, BlockConfig, HardwareSpec, VolumeDims};
use srde_core::metrics::{psnr, ssim};
use srde_core::ops::{bilinear_upsample, conv2d, extract_patches, pixel_shuffle, Activation};
use srde_core::predictor::{predict_coefficients, random_init, scale_output_channels};
use srde_core::pruning::{build_regression, lasso, LassoOptions};
use srde_core::{PredictorWeights, RegressionProblem, Rng, Tensor};

fn tensor(seed: u64, n: usize, c: usize, h: usize, w: usize) -> Tensor {
    let mut rng = Rng::new(seed);
    let data = (0..n * c * h * w).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
    Tensor::new(n, c, h, w, data).unwrap()
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn upsample_is_linear(seed in any::<u64>(), h in 1usize..7, w in 1usize..7, s in 1usize..5, a in -2.0f32..2.0) {
        let x = tensor(seed, 1, 1, h, w);
        let y = tensor(seed ^ 1, 1, 1, h, w);
        let combo = Tensor::new(1, 1, h, w, x.data().iter().zip(y.data()).map(|(p, q)| a * p + q).collect()).unwrap();
        let lhs = bilinear_upsample(&combo, s).unwrap();
        let (ux, uy) = (bilinear_upsample(&x, s).unwrap(), bilinear_upsample(&y, s).unwrap());
        for ((l, p), q) in lhs.data().iter().zip(ux.data()).zip(uy.data()) {
            prop_assert!((l - (a * p + q)).abs() <= 1e-5);
        }
    }

    #[test]
    fn upsample_preserves_constants(h in 1usize..7, w in 1usize..7, s in 1usize..5, v in -3.0f32..3.0) {
        let x = Tensor::filled(1, 1, h, w, v);
        let up = bilinear_upsample(&x, s).unwrap();
        prop_assert_eq!(up.dims(), [1, 1, h * s, w * s]);
        prop_assert!(up.data().iter().all(|&u| (u - v).abs() <= 1e-6 * v.abs().max(1.0)));
    }

    #[test]
    fn conv_matches_naive(
        seed in any::<u64>(),
        c_in in 1usize..5,
        c_out in 1usize..5,
        h in 1usize..9,
        w in 1usize..9,
        kh in prop::sample::select(vec![1usize, 3, 5]),
        kw in prop::sample::select(vec![1usize, 3]),
        relu in any::<bool>(),
    ) {
        let x = tensor(seed, 1, c_in, h, w);
        let wt = tensor(seed.wrapping_add(1), c_out, c_in, kh, kw);
        let bias: Vec<f32> = tensor(seed.wrapping_add(2), 1, 1, 1, c_out).data().to_vec();
        let act = if relu { Activation::Relu } else { Activation::None };
        let got = conv2d(&x, &wt, &bias, act).unwrap();
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        for (oc, &b) in bias.iter().enumerate() {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = b;
                    for ic in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let yi = clamp(i as isize + ky as isize - (kh / 2) as isize, h);
                                let xj = clamp(j as isize + kx as isize - (kw / 2) as isize, w);
                                acc += wt.at(oc, ic, ky, kx) * x.at(0, ic, yi, xj);
                            }
                        }
                    }
                    if relu {
                        acc = acc.max(0.0);
                    }
                    prop_assert_eq!(got.at(0, oc, i, j).to_bits(), acc.to_bits());
                }
            }
        }
    }

    #[test]
    fn pixel_shuffle_is_a_permutation(seed in any::<u64>(), c in 1usize..3, h in 1usize..5, w in 1usize..5, s in 1usize..4) {
        let x = tensor(seed, 1, c * s * s, h, w);
        let y = pixel_shuffle(&x, s).unwrap();
        prop_assert_eq!(y.dims(), [1, c, h * s, w * s]);
        let mut seen = vec![false; y.len()];
        for ch in 0..c * s * s {
            let (oc, a, b) = (ch / (s * s), (ch % (s * s)) / s, ch % s);
            for i in 0..h {
                for j in 0..w {
                    let dst = y.index(0, oc, i * s + a, j * s + b);
                    prop_assert!(!seen[dst]);
                    seen[dst] = true;
                    prop_assert_eq!(y.data()[dst].to_bits(), x.at(0, ch, i, j).to_bits());
                }
            }
        }
    }

    #[test]
    fn metrics_are_symmetric(seed in any::<u64>(), h in 11usize..16, w in 11usize..16) {
        let a = tensor(seed, 1, 1, h, w).map(|v| 0.5 + 0.5 * v);
        let b = tensor(seed ^ 7, 1, 1, h, w).map(|v| 0.5 + 0.5 * v);
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        let (s1, s2) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((s1 - s2).abs() <= 1e-12);
        prop_assert!(s1 <= 1.0);
    }

    #[test]
    fn engine_matches_reference_for_any_tiling(
        seed in any::<u64>(),
        h in 1usize..13,
        w in 1usize..13,
        k in prop::sample::select(vec![3usize, 5]),
        nx in 1usize..13,
        ny in 1usize..13,
        nz in 1usize..26,
        workers in 1usize..9,
    ) {
        let c = k * k;
        let cfg = BlockConfig::new(nx.min(h), ny.min(w), nz.min(c));
        let f = tensor(seed, 1, c, h, w);
        let b = tensor(seed ^ 3, 1, c, h, w);
        let spec = HardwareSpec::default().with_workers(workers);
        let out = run_filtering(&f, &b, cfg, &spec).unwrap();
        prop_assert_eq!(bits(&out), bits(&apply_filters(&f, &b).unwrap()));
    }

    #[test]
    fn feasible_set_is_sound_and_complete(
        h in 1usize..10, w in 1usize..10, c in 1usize..6,
        s in 1usize..5, p in 1usize..5, r in 1usize..50, ws in 1usize..9, tsm in 1usize..5,
    ) {
        let spec = HardwareSpec { sm_count: s, blocks_per_sm: p, register_file: r, warp_size: ws, max_warps: tsm, workers: 1 };
        let set = feasible_configs(VolumeDims::new(h, w, c), &spec).unwrap();
        let t = ((h * w * c) as f64 / (s * p * r) as f64).min(tsm as f64).max(1.0);
        let bound = (ws as f64 * p as f64 * t).floor() as usize;
        let expected = (1..=h)
            .flat_map(|x| (1..=w).flat_map(move |y| (1..=c).map(move |z| (x, y, z))))
            .filter(|(x, y, z)| x * y * z <= bound)
            .count();
        prop_assert_eq!(set.len(), expected);
        prop_assert!(set.configs.windows(2).all(|p| p[0] < p[1]));
        prop_assert!(set.configs.iter().all(|c| c.threads() <= bound));
    }

    #[test]
    fn expected_improvement_is_nonnegative(mean in -1e3f64..1e3, var in 0.0f64..1e3, best in -1e3f64..1e3) {
        let ei = expected_improvement(mean, var, best);
        prop_assert!(ei >= 0.0);
        prop_assert!(ei >= (best - mean).max(0.0) - 1e-9);
    }

    #[test]
    fn lasso_satisfies_kkt(seed in any::<u64>(), m in 20usize..60, l in 2usize..8, frac in 0.0f64..0.9) {
        let mut rng = Rng::new(seed);
        let a: Vec<f64> = (0..m * l).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let t: Vec<f64> = (0..m).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let prob = RegressionProblem::from_columns(m, l, a.clone(), t.clone()).unwrap();
        let max_corr = (0..l).map(|i| prob.corr(i).abs()).fold(0.0, f64::max);
        let lambda = frac * 2.0 * max_corr;
        let beta = lasso(&prob, lambda, &LassoOptions::default()).unwrap().beta;
        let resid: Vec<f64> = (0..m)
            .map(|r| t[r] - (0..l).map(|i| a[i * m + r] * beta[i]).sum::<f64>())
            .collect();
        for i in 0..l {
            let g = 2.0 / m as f64 * (0..m).map(|r| a[i * m + r] * resid[r]).sum::<f64>();
            if beta[i] == 0.0 {
                prop_assert!(g.abs() <= lambda + 1e-4);
            } else {
                prop_assert!((g - lambda * beta[i].signum()).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn regression_predicts_pruned_pipeline(seed in any::<u64>(), keep_mask in 1u8..16) {
        let mut rng = Rng::new(seed);
        let rows: Vec<f32> = (0..4 * 9).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let dict = Dictionary::custom(3, rows).unwrap();
        let weights = random_init(seed, 2, 4, 4, 1).unwrap();
        let lr = tensor(seed ^ 5, 1, 1, 6, 5);
        let patches = extract_patches(&bilinear_upsample(&lr, 2).unwrap(), 3).unwrap();
        let phi = predict_coefficients(&lr, &weights).unwrap();
        let hgt = tensor(seed ^ 9, 1, 1, 12, 10);
        let prob = build_regression(&hgt, &phi, &dict, &patches, 60, &mut rng).unwrap();

        let keep: Vec<usize> = (0..4).filter(|i| keep_mask & (1 << i) != 0).collect();
        let gamma: Vec<f64> = (0..4)
            .map(|i| if keep.contains(&i) { rng.uniform(0.5, 2.0) } else { 0.0 })
            .collect();
        let pruned_w = scale_output_channels(&weights, &gamma, &keep).unwrap();
        let pruned_d = dict.select(&keep).unwrap();
        let pruned_phi = predict_coefficients(&lr, &pruned_w).unwrap();
        let y = apply_filters(&assemble_filters(&pruned_phi, &pruned_d).unwrap(), &patches).unwrap();
        let predicted = prob.predict(&gamma);
        for (&(_, p), &v) in prob.pixel_ids().iter().zip(&predicted) {
            prop_assert!((y.data()[p] as f64 - v).abs() <= 1e-4 * v.abs().max(1.0), "{} vs {}", y.data()[p], v);
        }
    }

    #[test]
    fn containers_round_trip(seed in any::<u64>(), l in 1usize..6) {
        let mut rng = Rng::new(seed);
        let rows: Vec<f32> = (0..l * 25).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let dict = Dictionary::custom(5, rows).unwrap();
        prop_assert_eq!(Dictionary::from_bytes(&dict.to_bytes()).unwrap(), dict);
        let w = random_init(seed, 3, l, 3, 1).unwrap();
        prop_assert_eq!(PredictorWeights::from_bytes(&w.to_bytes()).unwrap(), w);
        let t = tensor(seed, 2, 3, 4, 5);
        prop_assert_eq!(Tensor::from_bytes(&t.to_bytes()).unwrap(), t);
    }
}
