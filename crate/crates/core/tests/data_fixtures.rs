use mixdefense::data::{
    self, load_cifar_binary, load_mnist_idx, parse_mnist_idx, Image, LabeledDataset, LabeledExample, Split,
};
use mixdefense::Error;
use proptest::prelude::*;

// Hand-rolled IDX writer, independent of the crate's serialiser.
fn idx_images(n: u32, h: u32, w: u32, px: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 3];
    for v in [n, h, w] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(px);
    b
}

fn idx_labels(l: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 1];
    b.extend_from_slice(&(l.len() as u32).to_be_bytes());
    b.extend_from_slice(l);
    b
}

fn three_image_fixture() -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let px: Vec<u8> = (0..3 * 4 * 5).map(|i| (i * 37 % 256) as u8).collect();
    (idx_images(3, 4, 5, &px), idx_labels(&[0, 1, 2]), px)
}

#[test]
fn idx_fixture_loads_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (im, lb, px) = three_image_fixture();
    let (ip, lp) = (dir.path().join("train-images-idx3-ubyte"), dir.path().join("train-labels-idx1-ubyte"));
    std::fs::write(&ip, &im).unwrap();
    std::fs::write(&lp, &lb).unwrap();
    let ds = load_mnist_idx(&ip, &lp).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.shape(), [1, 4, 5]);
    assert_eq!(ds.labels(), &[0, 1, 2]);
    assert_eq!(ds.split, Split::Train);
    for i in 0..3 {
        let bytes: Vec<u8> = ds.pixels(i).iter().map(|&v| (v * 255.0).round() as u8).collect();
        assert_eq!(bytes, &px[i * 20..(i + 1) * 20]);
    }
    let (im2, lb2) = ds.to_idx_bytes();
    assert_eq!((im2, lb2), (im, lb));
}

#[test]
fn idx_errors_are_distinct() {
    let (im, lb, _) = three_image_fixture();
    let swapped = parse_mnist_idx(&lb, &im, Split::Test).unwrap_err();
    assert!(matches!(swapped, Error::BadMagic { expected: 2051, found: 2049 }), "{swapped:?}");
    let short = parse_mnist_idx(&im[..im.len() - 1], &lb, Split::Test).unwrap_err();
    assert!(matches!(short, Error::Truncated { .. }), "{short:?}");
    let mismatch = parse_mnist_idx(&im, &idx_labels(&[0, 1]), Split::Test).unwrap_err();
    assert!(matches!(mismatch, Error::CountMismatch { images: 3, labels: 2 }), "{mismatch:?}");
    let bad_label = parse_mnist_idx(&im, &idx_labels(&[0, 1, 12]), Split::Test).unwrap_err();
    assert!(matches!(bad_label, Error::InvalidClass { label: 12, .. }), "{bad_label:?}");
}

#[test]
fn test_split_inferred_from_name() {
    let dir = tempfile::tempdir().unwrap();
    let (im, lb, _) = three_image_fixture();
    let (ip, lp) = (dir.path().join("t10k-images-idx3-ubyte"), dir.path().join("t10k-labels-idx1-ubyte"));
    std::fs::write(&ip, im).unwrap();
    std::fs::write(&lp, lb).unwrap();
    assert_eq!(load_mnist_idx(&ip, &lp).unwrap().split, Split::Test);
    let missing = load_mnist_idx(&dir.path().join("nope"), &lp).unwrap_err();
    assert!(missing.to_string().contains("nope"), "{missing}");
}

#[test]
fn cifar_fixture_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut raw = Vec::new();
    for (label, salt) in [(3u8, 11usize), (9, 5)] {
        raw.push(label);
        raw.extend((0..3072).map(|i| ((i * salt + label as usize) % 256) as u8));
    }
    let p = dir.path().join("data_batch_1.bin");
    std::fs::write(&p, &raw).unwrap();
    let ds = load_cifar_binary(&[&p]).unwrap();
    assert_eq!((ds.len(), ds.shape(), ds.class_count), (2, [3, 32, 32], 10));
    assert_eq!(ds.labels(), &[3, 9]);
    // planar storage: channel 0 is the first 1024 bytes after the label
    assert_eq!((ds.image(0).channel(1)[0] * 255.0).round() as u8, raw[1 + 1024]);
    assert_eq!(ds.to_cifar_bytes(), raw);

    std::fs::write(&p, &raw[..3000]).unwrap();
    assert!(matches!(load_cifar_binary(&[&p]).unwrap_err(), Error::Format(_)));
    let none: [&std::path::Path; 0] = [];
    assert!(matches!(load_cifar_binary(&none).unwrap_err(), Error::Precondition(_)));
}

fn tiny(n: usize) -> LabeledDataset {
    let ex = (0..n)
        .map(|i| LabeledExample { image: Image::new(1, 2, 2, vec![i as f32 / n as f32; 4]).unwrap(), label: i % 10 })
        .collect();
    LabeledDataset::from_examples("tiny", Split::Train, 10, ex).unwrap()
}

#[test]
fn unshuffled_batches_of_ten_by_three() {
    let b = data::batches(&tiny(10), 3, 0, false).unwrap();
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
    assert_eq!(b.concat(), (0..10).collect::<Vec<_>>());
    assert!(data::batches(&tiny(10), 0, 0, true).is_err());
    assert!(data::batches(&tiny(10), 11, 0, true).is_err());
}

#[test]
fn seeds_change_order_but_not_content() {
    let ds = tiny(100);
    let a = data::batches(&ds, 7, 1, true).unwrap().concat();
    let b = data::batches(&ds, 7, 2, true).unwrap().concat();
    assert_ne!(a, b);
    let (mut sa, mut sb) = (a.clone(), b);
    sa.sort_unstable();
    sb.sort_unstable();
    assert_eq!(sa, sb);
    assert_eq!(data::batches(&ds, 7, 1, true).unwrap().concat(), a);
}

proptest! {
    #[test]
    fn batching_is_a_partition(n in 1usize..200, bs_frac in 0.0f64..1.0, seed: u64, shuffle: bool) {
        let bs = 1 + ((n - 1) as f64 * bs_frac) as usize;
        let batches = data::index_batches(n, bs, seed, shuffle).unwrap();
        prop_assert_eq!(batches.len(), n.div_ceil(bs));
        prop_assert!(batches[..batches.len() - 1].iter().all(|b| b.len() == bs));
        let mut all = batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn idx_bytes_round_trip(bytes in proptest::collection::vec(any::<u8>(), 2 * 3 * 3), l0 in 0u8..10, l1 in 0u8..10) {
        let im = idx_images(2, 3, 3, &bytes);
        let lb = idx_labels(&[l0, l1]);
        let ds = parse_mnist_idx(&im, &lb, Split::Train).unwrap();
        prop_assert!(ds.examples().all(|e| e.image.pixels().iter().all(|&v| (0.0..=1.0).contains(&v))));
        prop_assert_eq!(ds.to_idx_bytes(), (im, lb));
    }
}
