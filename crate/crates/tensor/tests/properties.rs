use mstat_tensor::{counter, measure_macs, with_mac_kind, MacKind, Tensor};
use proptest::prelude::*;

fn vec_and_shape() -> impl Strategy<Value = (Vec<f64>, usize, usize)> {
    (1usize..6, 1usize..7).prop_flat_map(|(r, c)| {
        (prop::collection::vec(-30.0f64..30.0, r * c), Just(r), Just(c))
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_stochastic((v, r, c) in vec_and_shape()) {
        let y = Tensor::from_vec(v, &[r, c]).unwrap().softmax(1).unwrap();
        for row in y.data().chunks(c) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn l1_norm_of_nonnegative_row((v, r, c) in vec_and_shape()) {
        let v: Vec<f64> = v.into_iter().map(f64::abs).collect();
        let eps = 1e-6;
        let y = Tensor::from_vec(v.clone(), &[r, c]).unwrap().l1_normalize(1, eps).unwrap();
        for (row_in, row_out) in v.chunks(c).zip(y.data().chunks(c)) {
            let l1: f64 = row_in.iter().sum();
            let got: f64 = row_out.iter().sum();
            prop_assert!((got - l1 / (l1 + eps)).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_moments((v, r, c) in vec_and_shape()) {
        prop_assume!(c >= 2);
        // ensure spread within each row
        let v: Vec<f64> = v.iter().enumerate().map(|(i, x)| x + (i % c) as f64).collect();
        let ones = Tensor::from_vec(vec![1.0; c], &[c]).unwrap();
        let zeros = Tensor::zeros(&[c]);
        let y = Tensor::from_vec(v, &[r, c]).unwrap().layer_norm(&ones, &zeros, 0.0).unwrap();
        for row in y.data().chunks(c) {
            let mean: f64 = row.iter().sum::<f64>() / c as f64;
            let var: f64 = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
            prop_assert!(mean.abs() <= 1e-10);
            prop_assert!((var - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn permute_then_inverse_is_identity(dims in prop::collection::vec(1usize..4, 1..5), seed in any::<u64>()) {
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mut axes: Vec<usize> = (0..dims.len()).collect();
        // deterministic shuffle from the seed
        let mut s = seed;
        for i in (1..axes.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            axes.swap(i, (s >> 33) as usize % (i + 1));
        }
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() { inverse[a] = i; }
        let t = Tensor::from_vec(data.clone(), &dims).unwrap();
        let back = t.permute(&axes).unwrap().permute(&inverse).unwrap();
        prop_assert_eq!(back.data(), &data[..]);
    }
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let run = || {
        let x = Tensor::<f32>::from_vec((0..24).map(|i| (i as f32 * 0.37).sin()).collect(), &[2, 3, 4]).unwrap();
        let w = Tensor::from_vec((0..20).map(|i| (i as f32 * 0.11).cos()).collect(), &[4, 5]).unwrap();
        x.matmul(&w).unwrap().softmax(2).unwrap().to_vec()
    };
    let a: Vec<u32> = run().iter().map(|v| v.to_bits()).collect();
    let b: Vec<u32> = run().iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);
}

#[test]
fn mac_counter_attributes_by_kind() {
    let a = Tensor::<f64>::zeros(&[3, 4]);
    let w = Tensor::zeros(&[4, 5]);
    let (_, counts) = measure_macs(|| {
        with_mac_kind(MacKind::Projection, || a.matmul(&w).unwrap());
        with_mac_kind(MacKind::Attention, || {
            let q = Tensor::<f64>::zeros(&[2, 3, 4]);
            q.bmm(&q, false, true).unwrap()
        });
    });
    assert_eq!(counts.projection, 3 * 4 * 5);
    assert_eq!(counts.attention, 2 * 3 * 4 * 3);
    assert_eq!(counts.other, 0);
    let _ = counter::MacCounts::default();
}
