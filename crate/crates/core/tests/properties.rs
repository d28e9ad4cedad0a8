//! Property tests over the pure building blocks.

use proptest::collection::vec;
use proptest::prelude::*;

use formcast_core::fqt::Container;
use formcast_core::metrics::{histogram_kld, mae_max, masked_mse, mre, KLD_BINS, KLD_EPSILON};
use formcast_core::params::{lhs_sample, Param, ParameterBounds};
use formcast_core::raster_target::{detect_and_clip, percentile_sorted, undeform, ClipThresholds};
use formcast_core::reconstruct::wrinkle_height;
use formcast_core::tensor::Tensor;
use formcast_core::train::split;

fn coord() -> impl Strategy<Value = [f64; 3]> {
    (-800.0..800.0f64, -800.0..800.0f64, -200.0..200.0f64).prop_map(|(a, b, c)| [a, b, c])
}

proptest! {
    #[test]
    fn split_partitions_indices(n in 2usize..400, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let (train, test) = split(n, frac, seed).unwrap();
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(test.len(), (frac * n as f64).round() as usize);
    }

    #[test]
    fn redeform_recovers_positions(pairs in vec((coord(), coord()), 1..200)) {
        let (d, delta): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let d0 = undeform(&d, &delta).unwrap();
        for ((a, q), p) in d0.iter().zip(&delta).zip(&d) {
            for k in 0..3 {
                prop_assert!((a[k] + q[k] - p[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn divergence_of_a_sample_with_itself_is_zero(x in vec(-1.0f64..1.0, 2..100)) {
        prop_assume!(x.iter().any(|&v| v != x[0]));
        prop_assert_eq!(histogram_kld(&x, &x, KLD_BINS, KLD_EPSILON).unwrap(), 0.0);
    }

    #[test]
    fn divergence_is_non_negative(x in vec(-1.0f64..1.0, 2..60), y in vec(-1.0f64..1.0, 2..60)) {
        prop_assume!(x.iter().chain(&y).any(|&v| v != x[0]));
        prop_assert!(histogram_kld(&x, &y, KLD_BINS, KLD_EPSILON).unwrap() >= -1e-12);
    }

    #[test]
    fn relative_error_is_scale_free(
        data in vec((-1.0f64..1.0, -1.0f64..1.0, prop::bool::ANY), 4..200),
        k in 0.01f64..100.0,
    ) {
        let pd: Vec<f64> = data.iter().map(|d| d.0).collect();
        let gt: Vec<f64> = data.iter().map(|d| d.1).collect();
        let mask: Vec<f64> = data.iter().map(|d| if d.2 { 1.0 } else { 0.0 }).collect();
        prop_assume!(gt.iter().zip(&mask).any(|(g, m)| *m > 0.0 && *g != 0.0));
        let base = mre(&pd, &gt, &mask).unwrap();
        let scaled = mre(
            &pd.iter().map(|v| v * k).collect::<Vec<_>>(),
            &gt.iter().map(|v| v * k).collect::<Vec<_>>(),
            &mask,
        )
        .unwrap();
        prop_assert!((base - scaled).abs() <= 1e-9 * base.max(1.0));
    }

    #[test]
    fn symmetric_errors(data in vec((-1.0f64..1.0, -1.0f64..1.0), 1..200)) {
        let a: Vec<f64> = data.iter().map(|d| d.0).collect();
        let b: Vec<f64> = data.iter().map(|d| d.1).collect();
        let mask = vec![1.0; a.len()];
        prop_assert_eq!(mae_max(&a, &b, &mask).unwrap(), mae_max(&b, &a, &mask).unwrap());
        prop_assert_eq!(masked_mse(&a, &b, &mask).unwrap(), masked_mse(&b, &a, &mask).unwrap());
        prop_assert_eq!(masked_mse(&a, &a, &mask).unwrap(), 0.0);
    }

    #[test]
    fn fqt_round_trip(
        tensors in vec((vec(1usize..5, 1..5), "[a-z_/0-9]{1,12}"), 1..5),
        fill in any::<u32>(),
        with_json in prop::bool::ANY,
    ) {
        let mut c = Container::new();
        for (i, (dims, name)) in tensors.iter().enumerate() {
            let t = Tensor::from_fn(dims, |j| f32::from_bits(fill.wrapping_add((i * 97 + j) as u32) & 0x7f7f_ffff));
            c.push(format!("{name}{i}"), t);
        }
        if with_json {
            c.json = Some(serde_json::json!({ "fill": fill }));
        }
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.tensors.len(), c.tensors.len());
        for ((na, ta), (nb, tb)) in back.tensors.iter().zip(&c.tensors) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(ta.dims(), tb.dims());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(ta), bits(tb));
        }
        prop_assert_eq!(back.json, c.json);
    }

    #[test]
    fn clipping_bounds(field in vec(-0.9f64..0.9, 1000)) {
        let th = ClipThresholds::default();
        let (out, flagged) = detect_and_clip(&field, &th).unwrap();
        let max = field.iter().cloned().fold(f64::MIN, f64::max);
        let min = field.iter().cloned().fold(f64::MAX, f64::min);
        prop_assert_eq!(flagged, max > th.c1 || min < th.c2);
        let changed = out.iter().zip(&field).filter(|(a, b)| a != b).count();
        prop_assert!(changed <= 10);
        if flagged {
            let mut sorted = field.clone();
            sorted.sort_by(f64::total_cmp);
            let top = out.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert!((top - percentile_sorted(&sorted, 99.5)).abs() < 1e-12);
        } else {
            prop_assert_eq!(out, field);
        }
    }

    #[test]
    fn lhs_fills_every_stratum(n in 1usize..80, seed in any::<u64>()) {
        let b = ParameterBounds::default();
        let s = lhs_sample(n, &b, seed).unwrap();
        prop_assert_eq!(s.len(), n);
        for p in Param::ALL {
            let (lo, hi) = b.get(p);
            let mut seen = vec![false; n];
            for pv in &s {
                let k = (((pv.get(p) - lo) / (hi - lo)) * n as f64).floor() as usize;
                prop_assert!(!seen[k.min(n - 1)]);
                seen[k.min(n - 1)] = true;
            }
        }
        prop_assert!(s.iter().all(|pv| pv.validate(&b).is_ok()));
    }

    #[test]
    fn wrinkle_height_is_centred_on_the_band(
        z in vec(-5.0f64..5.0, 256),
        band in vec(prop::bool::ANY, 256),
        half in 1usize..7,
    ) {
        let n = 16;
        let out = wrinkle_height(&z, &band, n, 2 * half + 1).unwrap();
        let members: Vec<f64> = out.iter().zip(&band).filter(|(_, &b)| b).map(|(v, _)| *v).collect();
        if !members.is_empty() {
            prop_assert!((members.iter().sum::<f64>() / members.len() as f64).abs() < 1e-9);
        }
        prop_assert!(out.iter().zip(&band).all(|(v, &b)| b || *v == 0.0));
    }
}
