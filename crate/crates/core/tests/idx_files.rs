use std::fs::File;
use std::io::Write;

use flate2::write::GzEncoder;
use flate2::Compression;
use pacmeta::envs::{load_idx_images, write_idx_images, write_idx_labels, EnvKind, Environment, EnvironmentSpec};

const N: usize = 30;
const SIDE: usize = 4;

fn fixture() -> (Vec<u8>, Vec<u8>) {
    let pixels = (0..N * SIDE * SIDE).map(|i| (i * 37 % 256) as u8).collect();
    let labels = (0..N).map(|i| (i % 10) as u8).collect();
    (pixels, labels)
}

#[test]
fn plain_and_gzip_files_load_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (pixels, labels) = fixture();
    let paths = |ext: &str| (dir.path().join(format!("img{ext}")), dir.path().join(format!("lbl{ext}")));

    let (img, lbl) = paths(".idx");
    write_idx_images(File::create(&img).unwrap(), N, SIDE, SIDE, &pixels).unwrap();
    write_idx_labels(File::create(&lbl).unwrap(), &labels).unwrap();

    let (img_gz, lbl_gz) = paths(".idx.gz");
    let mut enc = GzEncoder::new(File::create(&img_gz).unwrap(), Compression::default());
    write_idx_images(&mut enc, N, SIDE, SIDE, &pixels).unwrap();
    enc.finish().unwrap().flush().unwrap();
    let mut enc = GzEncoder::new(File::create(&lbl_gz).unwrap(), Compression::default());
    write_idx_labels(&mut enc, &labels).unwrap();
    enc.finish().unwrap().flush().unwrap();

    let plain = load_idx_images(&img, &lbl).unwrap();
    let gz = load_idx_images(&img_gz, &lbl_gz).unwrap();
    assert_eq!(plain.x, gz.x);
    assert_eq!(plain.y, gz.y);
    assert_eq!(plain.dim(), SIDE * SIDE);
    assert_eq!(plain.x.data()[1], 37.0 / 255.0);
    assert_eq!(plain.y, labels.iter().map(|&l| l as usize).collect::<Vec<_>>());

    let spec = EnvironmentSpec {
        kind: EnvKind::ShuffledPixels,
        n_train_tasks: 2,
        n_test_tasks: 1,
        samples_per_task: 10,
        test_samples_per_task: 5,
        idx_images: Some(img_gz),
        idx_labels: Some(lbl_gz),
        ..EnvironmentSpec::default()
    };
    let env = Environment::build(&spec).unwrap();
    assert_eq!(env.train_tasks[0].x.cols(), SIDE * SIDE);
}
