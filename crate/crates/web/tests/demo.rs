use dynaquant_web::{fake_quant_curve_impl, gumbel_histogram_impl, proxy_curve_impl};

#[test]
fn proxy_curve_rows() {
    let v = proxy_curve_impl(5.0, 10).unwrap();
    assert_eq!(v.len(), 3 * 31);
    let row = |i: usize| &v[3 * i..3 * i + 3];
    assert_eq!(row(5), &[0.5, 0.5, row(5)[2]]);
    assert!(row(5)[2] > row(0)[2]);
    assert!(proxy_curve_impl(0.0, 10).is_err());
}

#[test]
fn fake_quant_curve_is_a_staircase() {
    let v = fake_quant_curve_impl(2, 0.5, 0.0, 5.0, -0.5, 2.5, 61).unwrap();
    assert_eq!(v.len(), 4 * 61);
    let mut levels: Vec<f64> = v.chunks(4).map(|r| r[1]).collect();
    levels.dedup();
    assert_eq!(levels, [0.0, 0.5, 1.0, 1.5]);
    for r in v.chunks(4) {
        let inside = r[0] >= 0.0 && r[0] <= 1.5;
        assert_eq!(r[2], if inside { 1.0 } else { 0.0 });
        assert_eq!(r[3] > 0.0, inside);
    }
    assert!(fake_quant_curve_impl(8, -1.0, 0.0, 5.0, 0.0, 1.0, 10).is_err());
}

#[test]
fn gumbel_histogram_tracks_the_softmax() {
    let logits = [0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()];
    let v = gumbel_histogram_impl(&logits, 1.0, 5000, 1).unwrap();
    assert_eq!(v.len(), 6);
    assert!((v[..3].iter().sum::<f64>() - 1.0).abs() < 1e-9);
    for (f, p) in v[..3].iter().zip([0.7, 0.2, 0.1]) {
        assert!((f - p).abs() < 0.03, "{v:?}");
    }
    assert_eq!(v, gumbel_histogram_impl(&logits, 1.0, 5000, 1).unwrap());
}
