use std::collections::BTreeSet;
use std::path::Path;

use super::*;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        samples_train: 400,
        samples_val: 100,
        seed: 3,
        ..SyntheticSpec::default()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn prototypes_are_unit_and_separated() {
    let data = generate_synthetic(&small_spec()).unwrap();
    let p = &data.prototypes;
    assert_eq!(p.len(), 16);
    for (i, a) in p.iter().enumerate() {
        assert!((dot(a, a) - 1.0).abs() < 1e-6);
        for b in &p[i + 1..] {
            assert!(dot(a, b) <= 30f64.to_radians().cos());
        }
    }
}

#[test]
fn separation_can_be_unattainable() {
    let spec = SyntheticSpec {
        num_components: 40,
        num_classes: 4,
        token_dim: 2,
        ..small_spec()
    };
    assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
}

#[test]
fn noiseless_majority_is_recovered_by_nearest_prototype() {
    for rule in [LabelRule::MajorityComponent, LabelRule::ComponentPairParity] {
        let spec = SyntheticSpec {
            noise_sigma: 0.0,
            label_rule: rule,
            ..small_spec()
        };
        let data = generate_synthetic(&spec).unwrap();
        let c = spec.num_classes;
        for i in 0..data.train.len() {
            let comps: Vec<usize> = data
                .train
                .sample(i)
                .chunks(spec.token_dim)
                .map(|tok| {
                    (0..spec.num_components)
                        .max_by(|&a, &b| dot(tok, &data.prototypes[a]).total_cmp(&dot(tok, &data.prototypes[b])))
                        .unwrap()
                })
                .collect();
            let predicted = match rule {
                LabelRule::MajorityComponent => {
                    let mut counts = vec![0; c];
                    comps.iter().for_each(|m| counts[m % c] += 1);
                    (0..c).max_by_key(|&k| counts[k]).unwrap()
                }
                LabelRule::ComponentPairParity => (comps[0] % c + comps[1] % c) % c,
            };
            assert_eq!(predicted, data.train.labels()[i]);
        }
    }
}

#[test]
fn class_histogram_is_near_uniform() {
    let spec = SyntheticSpec {
        samples_train: 10_000,
        samples_val: 1,
        ..small_spec()
    };
    let data = generate_synthetic(&spec).unwrap();
    let mut counts = [0usize; 8];
    data.train.labels().iter().for_each(|&y| counts[y] += 1);
    for k in counts {
        let frac = k as f64 / 10_000.0;
        assert!((frac - 0.125).abs() / 0.125 < 0.05, "{counts:?}");
    }
}

#[test]
fn shards_are_reproducible_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let a = generate_synthetic(&spec).unwrap();
    a.write(&dir.path().join("a")).unwrap();
    generate_synthetic(&spec).unwrap().write(&dir.path().join("b")).unwrap();
    for f in ["train.tgrd", "val.tgrd", "spec.json"] {
        let x = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let y = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
    let loaded = load_synthetic(&dir.path().join("a")).unwrap();
    assert_eq!(loaded, a);
    let other = generate_synthetic(&SyntheticSpec { seed: 4, ..spec }).unwrap();
    assert_ne!(other.train, a.train);
}

#[test]
fn shard_errors_are_explicit() {
    let d = Dataset::new(vec![0.5; 12], vec![0, 1], 2, 3, 2).unwrap();
    let bytes = d.to_shard_bytes().unwrap();
    assert_eq!(&bytes[..4], b"TGRD");
    let p = Path::new("x.tgrd");
    assert_eq!(Dataset::from_shard_bytes(&bytes, p).unwrap(), d);
    assert!(matches!(
        Dataset::from_shard_bytes(&bytes[..bytes.len() - 1], p),
        Err(Error::Format { .. })
    ));
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    assert!(Dataset::from_shard_bytes(&wrong, p).is_err());
    let mut bad_label = bytes.clone();
    let n = bad_label.len();
    bad_label[n - 2] = 9;
    assert!(Dataset::from_shard_bytes(&bad_label, p).is_err());
}

fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = 0x0000_0803u32.to_be_bytes().to_vec();
    for v in [count, rows, cols] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = 0x0000_0801u32.to_be_bytes().to_vec();
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

#[test]
fn idx_round_trip_by_hand() {
    let pixels: Vec<u8> = (0..32).map(|i| (i * 8) as u8).collect();
    let bytes = idx_images(2, 4, 4, &pixels);
    let img = parse_idx_images(&bytes, Path::new("img")).unwrap();
    assert_eq!((img.count, img.rows, img.cols), (2, 4, 4));
    for (v, p) in img.pixels.iter().zip(&pixels) {
        assert_eq!(*v, *p as f64 / 255.0);
    }
    let zeros = parse_idx_images(&idx_images(1, 2, 2, &[0; 4]), Path::new("z")).unwrap();
    assert!(zeros.pixels.iter().all(|&v| v == 0.0));

    let dir = tempfile::tempdir().unwrap();
    let ip = dir.path().join("images.idx");
    let lp = dir.path().join("labels.idx");
    std::fs::write(&ip, &bytes).unwrap();
    std::fs::write(&lp, idx_labels(&[1, 0, 2])).unwrap();
    assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
    std::fs::write(&lp, idx_labels(&[1, 0])).unwrap();
    let (img, labels) = load_idx(&ip, &lp).unwrap();
    assert_eq!(labels, vec![1, 0]);
    let ds = Dataset::from_idx(&img, &labels, 2, 2).unwrap();
    assert_eq!((ds.len(), ds.tokens_per_sample(), ds.token_dim()), (2, 4, 4));

    let mut bad = bytes.clone();
    bad[3] = 0x01;
    assert!(parse_idx_images(&bad, Path::new("b")).is_err());
    assert!(parse_idx_images(&bytes[..bytes.len() - 3], Path::new("t")).is_err());
    assert!(parse_idx_labels(&bytes, Path::new("l")).is_err());
}

#[test]
fn patchify_index_arithmetic() {
    let img = Tensor::new(vec![1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
    let t = patchify(&img, 2).unwrap();
    assert_eq!(t.shape(), &[1, 4, 4]);
    // token (ty, tx) holds pixel (2ty + py, 2tx + px) at position 2py + px
    for ty in 0..2 {
        for tx in 0..2 {
            for py in 0..2 {
                for px in 0..2 {
                    let want = ((2 * ty + py) * 4 + 2 * tx + px) as f64;
                    assert_eq!(t.data()[(ty * 2 + tx) * 4 + py * 2 + px], want);
                }
            }
        }
    }
    assert_eq!(&t.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
    let whole = patchify(&img, 4).unwrap();
    assert_eq!(whole.shape(), &[1, 1, 16]);
    assert_eq!(whole.data(), img.data());
    let flat = patchify(&Tensor::full(&[2, 4, 6], 0.3), 2).unwrap();
    assert!(flat.data().iter().all(|&v| v == 0.3));
    assert!(patchify(&img, 3).is_err());
}

#[test]
fn batching_is_deterministic_and_complete() {
    let a = epoch_batches(23, 5, 9, 0, true);
    assert_eq!(a, epoch_batches(23, 5, 9, 0, true));
    assert_ne!(a, epoch_batches(23, 5, 9, 1, true));
    assert_eq!(a.len(), 5);
    assert_eq!(a.last().unwrap().len(), 3);
    let all: BTreeSet<usize> = a.iter().flatten().copied().collect();
    assert_eq!(all, (0..23).collect());
    let plain: Vec<usize> = epoch_batches(23, 5, 9, 3, false).concat();
    assert_eq!(plain, (0..23).collect::<Vec<_>>());

    let data = generate_synthetic(&small_spec()).unwrap();
    let batches: Vec<TokenBatch> = BatchIter::new(&data.val, 32, 1, 0, true).collect();
    assert_eq!(batches.iter().map(|b| b.labels.len()).sum::<usize>(), 100);
    let b = &batches[0];
    assert_eq!(b.tokens.shape(), &[32, 16, 16]);
    assert_eq!(&b.tokens.data()[..256], data.val.sample(b.ids[0]));
    assert_eq!(b.labels[0], data.val.labels()[b.ids[0]]);
}
