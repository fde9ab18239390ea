mod common;

use std::io::Write;

use btcnn::data::*;
use btcnn::{Error, Tensor};
use flate2::write::GzEncoder;
use flate2::Compression;

fn line(label: &str, value: &str) -> String {
    let mut s = label.to_string();
    for _ in 0..PIXELS {
        s.push(' ');
        s.push_str(value);
    }
    s.push('\n');
    s
}

fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn zero_line_maps_to_mid_grey() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(&dir, "a.txt", &line("0", "0"));
    let ds = load_usps_file(&p, Split::Test).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.labels(), &[0]);
    assert!(ds.image(0).iter().all(|&v| v == 0.5));
    assert_eq!(ds.images().shape(), &[1, 1, 16, 16]);
}

#[test]
fn float_labels_and_extremes() {
    let dir = tempfile::tempdir().unwrap();
    let body = line("6.0000", "-1") + &line("9", "1.0000");
    let ds = load_usps_file(write(&dir, "b.txt", &body), Split::Train).unwrap();
    assert_eq!(ds.labels(), &[6, 9]);
    assert!(ds.image(0).iter().all(|&v| v == 0.0));
    assert!(ds.image(1).iter().all(|&v| v == 1.0));
}

#[test]
fn truncated_line_names_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = line("1", "0.5");
    body.push_str("2 0.1 0.2 0.3\n");
    match load_usps_file(write(&dir, "c.txt", &body), Split::Train) {
        Err(Error::Parse { line, msg, .. }) => {
            assert_eq!(line, 2);
            assert!(msg.contains("257"), "{msg}");
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn bad_label_is_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    for label in ["10", "-1", "2.5", "x"] {
        let r = load_usps_file(write(&dir, "d.txt", &line(label, "0")), Split::Train);
        assert!(matches!(r, Err(Error::Parse { line: 1, .. })), "{label}: {r:?}");
    }
}

#[test]
fn gzip_and_plain_agree() {
    let dir = tempfile::tempdir().unwrap();
    let body = line("3", "0.25") + &line("4", "-0.5");
    let plain = write(&dir, "e.txt", &body);
    let gz_path = dir.path().join("e.txt.gz");
    let mut enc = GzEncoder::new(std::fs::File::create(&gz_path).unwrap(), Compression::default());
    enc.write_all(body.as_bytes()).unwrap();
    enc.finish().unwrap();
    assert_eq!(
        load_usps_file(&plain, Split::Train).unwrap(),
        load_usps_file(&gz_path, Split::Train).unwrap()
    );
}

#[test]
fn cache_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = load_usps_file(write(&dir, "f.txt", &(line("7", "0.3") + &line("1", "-0.9"))), Split::Test).unwrap();
    let cache = dir.path().join("f.bin");
    write_cache(&cache, &ds).unwrap();
    assert_eq!(read_cache(&cache).unwrap(), ds);
    assert_eq!(load_dataset(&cache, Split::Test).unwrap(), ds);

    let mut bytes = std::fs::read(&cache).unwrap();
    bytes[8] = 99;
    std::fs::write(&cache, &bytes).unwrap();
    assert!(matches!(read_cache(&cache), Err(Error::Parse { .. })));
    bytes[8] = 1;
    bytes.pop();
    std::fs::write(&cache, &bytes).unwrap();
    assert!(read_cache(&cache).is_err());
}

#[test]
fn bundled_files_have_canonical_sizes() {
    let dir = common::data_dir();
    let (tr, te) = load_usps(dir.join("zip.train.gz"), dir.join("zip.test.gz")).unwrap();
    assert_eq!((tr.len(), te.len()), (USPS_TRAIN_SIZE, USPS_TEST_SIZE));
    assert_eq!(tr.len() + te.len(), 9298);
    assert!(tr.class_counts().iter().all(|&c| c > 0));
    assert!(te.class_counts().iter().all(|&c| c > 0));
}

fn toy(n: usize) -> Dataset {
    let pixels = (0..n * PIXELS).map(|i| (i % 17) as f64 / 16.0).collect();
    let labels = (0..n).map(|i| i % CLASSES).collect();
    Dataset::new(Tensor::new([n, 1, 16, 16], pixels).unwrap(), labels, Split::Train).unwrap()
}

#[test]
fn starvation_sizes() {
    let ds = toy(7291);
    assert_eq!(starve(&ds, 0.25, 3).unwrap().len(), 1823);
    assert_eq!(starve(&ds, 1.0, 3).unwrap(), ds);
    assert_eq!(starve(&ds, 0.5, 8).unwrap(), starve(&ds, 0.5, 8).unwrap());
    assert_ne!(starve(&ds, 0.5, 8).unwrap(), starve(&ds, 0.5, 9).unwrap());
    for bad in [0.0, -0.1, 1.01, f64::NAN] {
        assert!(starve(&ds, bad, 0).is_err());
    }
}

#[test]
fn blur_keeps_constants_and_range() {
    let pixels = vec![0.37; 3 * PIXELS];
    let ds = Dataset::new(Tensor::new([3, 1, 16, 16], pixels).unwrap(), vec![0, 5, 9], Split::Test).unwrap();
    let out = apply_class_blur(&ds, &BlurPolicy::default(), 1).unwrap();
    for v in out.images().data() {
        assert!((v - 0.37).abs() < 1e-12);
    }
    let out = apply_class_blur(&toy(40), &BlurPolicy::default(), 2).unwrap();
    assert!(out.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn blur_preserves_mass_of_centred_blob() {
    let mut img = vec![0.0; PIXELS];
    for y in 6..10 {
        for x in 5..11 {
            img[y * 16 + x] = 0.8;
        }
    }
    let before: f64 = img.iter().sum();
    let k = gaussian_kernel(1.0, 5).unwrap();
    let after: f64 = blur_image(&img, 16, 16, &k, 5).iter().sum();
    assert!((before - after).abs() < 1e-9, "{before} vs {after}");
}

#[test]
fn later_classes_get_more_blur() {
    let ds = toy(500);
    let (_, sigmas) = apply_class_blur_with_sigmas(&ds, &BlurPolicy::default(), 4).unwrap();
    let mean_for = |c: usize| {
        let v: Vec<f64> = sigmas.iter().zip(ds.labels()).filter(|(_, &y)| y == c).map(|(s, _)| *s).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    for c in 0..9 {
        assert!(mean_for(c + 1) > mean_for(c));
    }
    let p = BlurPolicy::default();
    for (s, &y) in sigmas.iter().zip(ds.labels()) {
        assert!(*s >= p.intervals[y].0 && *s <= p.intervals[y].1);
    }
    assert_eq!(
        apply_class_blur(&ds, &p, 4).unwrap(),
        apply_class_blur(&ds, &p, 4).unwrap()
    );
}

#[test]
fn probe_endpoints_are_exact() {
    let ds = toy(2);
    let imgs = convex_probe(ds.image(0), ds.image(1), &default_alphas()).unwrap();
    assert_eq!(imgs.len(), 10);
    assert_eq!(imgs[0], ds.image(0));
    assert_eq!(imgs[9], ds.image(1));
    assert!(convex_probe(ds.image(0), ds.image(1), &[0.2, 1.0]).is_err());
    assert!(convex_probe(ds.image(0), ds.image(1), &[0.0, 0.7, 0.5, 1.0]).is_err());
}
