use caricature_core::data::{
    export_grid, load_dataset, preprocess, read_png_labels, sample_unpaired_batch, RawDomain, Split, SplitProtocol,
};
use caricature_core::diffcore::{Shape4, Tensor4};
use std::fs;
use std::path::Path;

fn tiny_png(path: &Path, v: u8) {
    image::RgbImage::from_pixel(2, 2, image::Rgb([v, v / 2, 255 - v])).save(path).unwrap();
}

fn tree(root: &Path, train: usize, test: usize) {
    for split in Split::ALL {
        let dir = root.join(split.dir_name());
        fs::create_dir_all(&dir).unwrap();
        let n = match split {
            Split::TrainA | Split::TrainB => train,
            Split::TestA | Split::TestB => test,
        };
        for i in 0..n {
            tiny_png(&dir.join(format!("{i:05}.png")), (i % 256) as u8);
        }
    }
}

#[test]
fn reference_split_conventions() {
    for (train, test, protocol) in [(800, 371, SplitProtocol::IiitCfwP2c), (995, 199, SplitProtocol::PhotoSketch)] {
        let dir = tempfile::tempdir().unwrap();
        tree(dir.path(), train, test);
        let ds = load_dataset(dir.path()).unwrap();
        let s = ds.summary();
        assert_eq!((s.train_a, s.train_b, s.test_a, s.test_b), (train, train, test, test));
        assert_eq!(s.protocol(), protocol);
        assert_eq!(train + test, protocol.counts().map(|(a, b)| a + b).unwrap());
        let ids: Vec<_> = ds.train_a.records.iter().map(|r| r.id.clone()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }
}

#[test]
fn malformed_trees_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_dataset(&dir.path().join("nope")).unwrap_err().to_string();
    assert!(err.contains("not a directory"), "{err}");

    tree(dir.path(), 3, 2);
    fs::remove_dir_all(dir.path().join("testB")).unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("missing or empty domain") && err.contains("testB"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    tree(dir.path(), 3, 2);
    let bad = dir.path().join("trainB").join("00001.png");
    fs::write(&bad, b"not an image").unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("00001.png"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    tree(dir.path(), 3, 2);
    for e in fs::read_dir(dir.path().join("trainA")).unwrap() {
        fs::remove_file(e.unwrap().path()).unwrap();
    }
    fs::write(dir.path().join("trainA").join("notes.txt"), b"x").unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("missing or empty domain") && err.contains("trainA"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    tree(dir.path(), 3, 2);
    tiny_png(&dir.path().join("testA").join("00000.jpg"), 5);
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("duplicate id") && err.contains("testA"), "{err}");
}

#[test]
fn custom_counts_are_reported_as_custom() {
    let dir = tempfile::tempdir().unwrap();
    tree(dir.path(), 4, 2);
    let s = load_dataset(dir.path()).unwrap().summary();
    assert_eq!(s.protocol(), SplitProtocol::Custom);
    assert!(s.to_string().contains("trainA=4"));
}

#[test]
fn export_then_preprocess_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("photo.png");
    caricature_core::data::toy_face(3, false, 32).save(&src).unwrap();
    let t = preprocess(&src, 32).unwrap();
    let out = dir.path().join("out.png");
    export_grid(std::slice::from_ref(&t), 1, &out).unwrap();
    let back = preprocess(&out, 32).unwrap();
    let worst = t.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    // Both sides are exact multiples of 1/127.5; the round trip is exact.
    assert!(worst <= 1.0 / 255.0, "{worst}");
    assert!(read_png_labels(&out).unwrap().is_empty());

    let img = Tensor4::full(Shape4::new(1, 3, 4, 4), 0.3);
    let p = dir.path().join("one.png");
    export_grid(std::slice::from_ref(&img), 1, &p).unwrap();
    let again = preprocess(&p, 4).unwrap();
    assert!(again.data().iter().all(|v| (v - 0.3).abs() <= 1.0 / 255.0));
}

#[test]
fn batches_are_seeded_and_unpaired() {
    let imgs = |n: usize, v: f64| (0..n).map(|i| Tensor4::full(Shape4::new(1, 3, 4, 4), v + i as f64)).collect();
    let a = RawDomain::from_images((0..5).map(|i| format!("a{i}")).collect(), imgs(5, 0.0)).unwrap();
    let b = RawDomain::from_images((0..7).map(|i| format!("b{i}")).collect(), imgs(7, 100.0)).unwrap();
    let one = sample_unpaired_batch(&a, &b, 5, 3, 0).unwrap();
    assert_eq!(one, sample_unpaired_batch(&a, &b, 5, 3, 0).unwrap());
    let mut ids = one.x_ids.clone();
    ids.sort();
    assert_eq!(ids, a.ids);
    assert_eq!(one.size(), 5);
    assert_ne!(one.x_ids, sample_unpaired_batch(&a, &b, 5, 4, 0).unwrap().x_ids);
}
