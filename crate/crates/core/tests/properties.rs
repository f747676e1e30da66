use ndarray::Array2;
use proptest::prelude::*;

use ssda::config::RunConfig;
use ssda::data::TimeSeriesWindow;
use ssda::forecaster::{clamp_beta, fuse};
use ssda::ntf::{decode, encode, Dtype, Entry};
use ssda::rendering::{fold_to_grid, pad_left_replicate, resize_bilinear, resize_bilinear_adjoint, unfold_grid};

fn grid(h: usize, w: usize, seed: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |(i, j)| seed[(i * w + j) % seed.len()] + (i * 7 + j * 3) as f64 * 0.01)
}

proptest! {
    #[test]
    fn fold_unfold_inverse(x in prop::collection::vec(-1e3f64..1e3, 1..200), period in 1usize..30) {
        let padded = pad_left_replicate(&x, period);
        prop_assert_eq!(padded.len() % period, 0);
        prop_assert_eq!(&padded[padded.len() - x.len()..], &x[..]);
        let g = fold_to_grid(&padded, period).unwrap();
        prop_assert_eq!(g.nrows(), period);
        prop_assert_eq!(unfold_grid(g.view()), padded);
    }

    #[test]
    fn bilinear_adjoint_pairing(
        h in 1usize..12, w in 1usize..12, oh in 1usize..12, ow in 1usize..12,
        a in prop::collection::vec(-1.0f64..1.0, 1..20),
        b in prop::collection::vec(-1.0f64..1.0, 1..20),
    ) {
        let x = grid(h, w, &a);
        let y = grid(oh, ow, &b);
        let lhs = (&resize_bilinear(x.view(), oh, ow) * &y).sum();
        let rhs = (&x * &resize_bilinear_adjoint(y.view(), h, w)).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn bilinear_preserves_constants(h in 1usize..16, w in 1usize..16, oh in 1usize..16, ow in 1usize..16, c in -5.0f64..5.0) {
        let out = resize_bilinear(Array2::from_elem((h, w), c).view(), oh, ow);
        prop_assert!(out.iter().all(|v| (v - c).abs() <= 1e-12));
    }

    #[test]
    fn fused_forecast_lies_between_branches(
        st in prop::collection::vec(-10.0f64..10.0, 1..16),
        sp in prop::collection::vec(-10.0f64..10.0, 1..16),
        beta in -0.5f64..1.5,
    ) {
        let n = st.len().min(sp.len());
        let a = Array2::from_shape_vec((n, 1), st[..n].to_vec()).unwrap();
        let b = Array2::from_shape_vec((n, 1), sp[..n].to_vec()).unwrap();
        let beta = clamp_beta(beta);
        prop_assert!((0.0..=1.0).contains(&beta));
        let y = fuse(a.view(), b.view(), beta).unwrap();
        for i in 0..n {
            let (lo, hi) = (a[[i, 0]].min(b[[i, 0]]), a[[i, 0]].max(b[[i, 0]]));
            prop_assert!(y[[i, 0]] >= lo - 1e-12 && y[[i, 0]] <= hi + 1e-12);
        }
    }

    #[test]
    fn normalization_roundtrip(
        vals in prop::collection::vec(-1e3f64..1e3, 8..64),
        k in 0.1f64..2.0,
    ) {
        let t = vals.len() / 2;
        let ctx = Array2::from_shape_vec((t, 1), vals[..t].to_vec()).unwrap();
        let tgt = Array2::from_shape_vec((vals.len() - t, 1), vals[t..].to_vec()).unwrap();
        let w = TimeSeriesWindow::new(0, ctx, tgt.clone(), k);
        let back = w.denormalize(w.normalized_target().view());
        for (a, b) in back.iter().zip(tgt.iter()) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn tensor_file_roundtrip(shapes in prop::collection::vec(prop::collection::vec(1usize..5, 0..3), 1..5)) {
        let entries: Vec<Entry> = shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                let n: usize = shape.iter().product();
                Entry {
                    name: format!("t{i}"),
                    shape: shape.clone(),
                    dtype: Dtype::F64,
                    data: (0..n).map(|v| v as f64 * 0.25 - i as f64).collect(),
                }
            })
            .collect();
        let bytes = encode(&entries).unwrap();
        prop_assert_eq!(decode(&bytes).unwrap(), entries);
        prop_assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn config_text_roundtrip(lr in 1e-6f64..1.0, epochs in 1usize..50, lambda in 0.0f64..1.0, tga: bool) {
        let cfg = RunConfig { lr, epochs, lambda, tga, ..RunConfig::default() };
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text(), "snapshot").unwrap();
        prop_assert_eq!(back.to_text(), cfg.to_text());
        prop_assert_eq!(back.lr, lr);
    }
}
