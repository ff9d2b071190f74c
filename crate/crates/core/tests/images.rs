use std::fs;

use dynaquant::data::{
    parse_ppm, pixel_variance, read_image, read_image_dir, synthetic_dataset, write_png, write_ppm, SyntheticKind,
    SyntheticSpec,
};

fn spec(kinds: Vec<SyntheticKind>, count: usize) -> SyntheticSpec {
    SyntheticSpec {
        count,
        size: 64,
        kinds,
        seed: 3,
    }
}

#[test]
fn noise_is_busier_than_gradients() {
    let mean_var = |kind| {
        let imgs = synthetic_dataset(&spec(vec![kind], 12)).unwrap();
        imgs.iter().map(pixel_variance).sum::<f64>() / imgs.len() as f64
    };
    let noise = mean_var(SyntheticKind::BandLimitedNoise);
    let grad = mean_var(SyntheticKind::Gradients);
    assert!(noise > grad, "noise {noise} vs gradients {grad}");
}

#[test]
fn seeds_and_kinds_change_content() {
    let a = synthetic_dataset(&spec(SyntheticKind::ALL.to_vec(), 3)).unwrap();
    let b = synthetic_dataset(&SyntheticSpec {
        seed: 4,
        ..spec(SyntheticKind::ALL.to_vec(), 3)
    })
    .unwrap();
    assert_ne!(a, b);
    assert_eq!(a, synthetic_dataset(&spec(SyntheticKind::ALL.to_vec(), 3)).unwrap());
    assert!(a.iter().all(|i| i.data().iter().all(|v| (0.0..=1.0).contains(v))));
}

#[test]
fn png_and_ppm_round_trip_at_8_bits() {
    let dir = tempfile::tempdir().unwrap();
    let img = synthetic_dataset(&spec(vec![SyntheticKind::GaussianBlobs], 1)).unwrap().remove(0);
    let png = dir.path().join("a.png");
    let ppm = dir.path().join("b.ppm");
    write_png(&png, &img).unwrap();
    write_ppm(&ppm, &img).unwrap();
    let from_png = read_image(&png).unwrap();
    let from_ppm = read_image(&ppm).unwrap();
    assert_eq!(from_png, from_ppm);
    for (a, b) in img.data().iter().zip(from_png.data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn ppm_header_errors_are_data_errors() {
    assert!(parse_ppm(b"P3\n1 1\n255\n\x00\x00\x00").is_err());
    assert!(parse_ppm(b"P6\n2 2\n255\n\x00\x00").is_err());
    assert!(parse_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
    let ok = parse_ppm(b"P6\n# comment\n1 1\n255\n\xff\x00\x80").unwrap();
    assert_eq!(ok.shape(), &[3, 1, 1]);
    assert_eq!(ok.data()[0], 1.0);
}

#[test]
fn directory_reader_skips_broken_files_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = synthetic_dataset(&SyntheticSpec {
        count: 2,
        size: 16,
        ..SyntheticSpec::default()
    })
    .unwrap();
    write_png(&dir.path().join("b.png"), &imgs[1]).unwrap();
    write_ppm(&dir.path().join("a.ppm"), &imgs[0]).unwrap();
    fs::write(dir.path().join("c.png"), b"not a png").unwrap();
    fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
    let loaded = read_image_dir(dir.path()).unwrap();
    let names: Vec<_> = loaded
        .images
        .iter()
        .map(|(p, _)| p.file_name().unwrap().to_str().unwrap().to_string())
        .collect();
    assert_eq!(names, ["a.ppm", "b.png"]);
    assert_eq!(loaded.skipped.len(), 1);
    assert!(loaded.skipped[0].0.ends_with("c.png"));
}
