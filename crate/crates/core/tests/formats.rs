mod common;

use std::path::PathBuf;

use owm_lab::data::{decode_cifar, decode_idx, encode_cifar, encode_idx_images, encode_idx_labels, load_cifar, load_idx, CifarVariant};
use owm_lab::nn::{decode_network, encode_network, load_network, save_network, Architecture, ConvBlock, Network};
use owm_lab::owm::{decode_snapshot, encode_snapshot, OwmOptimizerState};
use owm_lab::{Error, RngState};
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    common::crate_dir().join("tests/fixtures/formats").join(name)
}

fn read(name: &str) -> Vec<u8> {
    std::fs::read(fixture(name)).unwrap()
}

fn is_format(e: &Error) -> bool {
    matches!(e, Error::Format { .. })
}

#[test]
fn digits_idx_round_trip_is_bitwise() {
    for split in ["train", "test"] {
        let dir = common::digits_dir();
        let images = std::fs::read(dir.join(format!("{split}-images.idx3-ubyte"))).unwrap();
        let labels = std::fs::read(dir.join(format!("{split}-labels.idx1-ubyte"))).unwrap();
        let set = decode_idx(&images, &labels).unwrap();
        assert_eq!(set.image_shape(), &[1, 8, 8]);
        assert_eq!(set.class_count(), 10);
        assert_eq!(encode_idx_images(&set), images);
        assert_eq!(encode_idx_labels(&set), labels);
    }
}

#[test]
fn colour_idx_round_trip_is_bitwise() {
    let images = read("colour-images.idx4-ubyte");
    let labels = read("colour-labels.idx1-ubyte");
    let set = load_idx(&fixture("colour-images.idx4-ubyte"), &fixture("colour-labels.idx1-ubyte")).unwrap();
    assert_eq!(set.image_shape(), &[3, 4, 5]);
    assert_eq!(set.labels(), &[2, 0, 1]);
    assert_eq!(encode_idx_images(&set), images);
    assert_eq!(encode_idx_labels(&set), labels);
}

#[test]
fn cifar10_round_trip_is_bitwise() {
    let bytes = read("cifar10.bin");
    let set = decode_cifar(&bytes, CifarVariant::Cifar10).unwrap();
    assert_eq!(set.len(), 6);
    assert_eq!(set.labels(), &[0, 9, 3, 3, 7, 1]);
    assert_eq!(set.image_shape(), &[3, 32, 32]);
    assert_eq!(encode_cifar(&set, CifarVariant::Cifar10, None).unwrap(), bytes);
}

#[test]
fn cifar100_round_trip_keeps_fine_labels() {
    let bytes = read("cifar100.bin");
    let set = decode_cifar(&bytes, CifarVariant::Cifar100).unwrap();
    assert_eq!(set.labels(), &[99, 0, 42, 57]);
    let coarse: Vec<u8> = bytes.chunks(3074).map(|r| r[0]).collect();
    assert_eq!(encode_cifar(&set, CifarVariant::Cifar100, Some(&coarse)).unwrap(), bytes);
}

#[test]
fn cifar_batches_concatenate() {
    let path = fixture("cifar10.bin");
    let (set, stats) = load_cifar(&[path.clone(), path], CifarVariant::Cifar10).unwrap();
    assert_eq!(set.len(), 12);
    assert_eq!(stats.mean.len(), 3);
    assert!(stats.std.iter().all(|s| *s > 0.0));
}

#[test]
fn malformed_idx_files_are_format_errors() {
    let good_labels = read("good-labels.idx1-ubyte");
    let good_images = read("good-images.idx3-ubyte");
    assert!(decode_idx(&good_images, &good_labels).is_ok());
    for bad in ["bad-idx-magic.idx3-ubyte", "bad-idx-truncated.idx3-ubyte", "bad-idx-header.idx3-ubyte"] {
        let e = decode_idx(&read(bad), &good_labels).unwrap_err();
        assert!(is_format(&e), "{bad}: {e}");
    }
    for bad in ["short-labels.idx1-ubyte", "mismatch-labels.idx1-ubyte"] {
        let e = decode_idx(&good_images, &read(bad)).unwrap_err();
        assert!(is_format(&e), "{bad}: {e}");
    }
    let e = decode_idx(&good_images, &good_images).unwrap_err();
    assert!(is_format(&e), "{e}");
}

#[test]
fn malformed_cifar_files_are_format_errors() {
    for bad in ["bad-cifar10-truncated.bin", "bad-cifar10-label.bin"] {
        let e = decode_cifar(&read(bad), CifarVariant::Cifar10).unwrap_err();
        assert!(is_format(&e), "{bad}: {e}");
        let e = load_cifar(&[fixture(bad)], CifarVariant::Cifar10).unwrap_err();
        assert!(e.to_string().contains(bad), "{e}");
    }
    // A CIFAR-100 file read as CIFAR-10 has the wrong record length.
    assert!(is_format(&decode_cifar(&read("cifar100.bin"), CifarVariant::Cifar10).unwrap_err()));
    assert!(is_format(&decode_cifar(&[], CifarVariant::Cifar10).unwrap_err()));
}

#[test]
fn missing_files_are_io_errors() {
    let e = load_idx(&fixture("nope.idx3-ubyte"), &fixture("good-labels.idx1-ubyte")).unwrap_err();
    assert!(matches!(e, Error::Io { .. }));
}

fn conv_net(seed: u64) -> Network {
    let spec = Architecture {
        input: [3, 6, 6],
        conv: vec![ConvBlock {
            out_channels: 3,
            kernel: 2,
            stride: 1,
            padding: 0,
            pool: 2,
        }],
        hidden: vec![7],
        classes: 5,
        proxy_outputs: 4,
    }
    .network_spec()
    .unwrap();
    Network::init(&spec, &mut RngState::new(seed)).unwrap()
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let net = conv_net(3);
    let bytes = encode_network(&net);
    assert!(bytes.starts_with(b"OWMCKPT1"));
    let (back, end) = decode_network(&bytes).unwrap();
    assert_eq!(end, bytes.len());
    assert_eq!(back.spec(), net.spec());
    assert_eq!(encode_network(&back), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    save_network(&net, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(encode_network(&load_network(&path).unwrap()), bytes);
}

#[test]
fn snapshot_round_trip_keeps_projectors() {
    let mut net = conv_net(4);
    let mut state = OwmOptimizerState::new(&net, 0.1).unwrap();
    let mut rng = RngState::new(9);
    for _ in 0..3 {
        let x = common::random_images(&[4, 3, 6, 6], &mut rng);
        net.forward(&x).unwrap();
        state.absorb_batch(&mut net).unwrap();
    }
    let bytes = encode_snapshot(&net, &state);
    let (back_net, back_state) = decode_snapshot(&bytes).unwrap();
    assert_eq!(back_state, state);
    assert_eq!(encode_snapshot(&back_net, &back_state), bytes);
    // A snapshot is still a readable network checkpoint.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("snap.ckpt");
    std::fs::write(&path, &bytes).unwrap();
    assert_eq!(load_network(&path).unwrap().flat_params(), net.flat_params());
}

#[test]
fn damaged_checkpoints_are_format_errors() {
    let bytes = encode_network(&conv_net(5));
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(is_format(&decode_network(&bad_magic).unwrap_err()));
    for cut in [4, 12, 30, bytes.len() / 2, bytes.len() - 1] {
        let e = decode_network(&bytes[..cut]).unwrap_err();
        assert!(is_format(&e), "cut {cut}: {e}");
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trailing.ckpt");
    let mut trailing = bytes.clone();
    trailing.extend_from_slice(b"junk");
    std::fs::write(&path, trailing).unwrap();
    assert!(is_format(&load_network(&path).unwrap_err()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn arbitrary_bytes_never_panic(data in prop::collection::vec(any::<u8>(), 0..256), labels in prop::collection::vec(any::<u8>(), 0..32)) {
        let _ = decode_idx(&data, &labels);
        let _ = decode_cifar(&data, CifarVariant::Cifar10);
        let _ = decode_cifar(&data, CifarVariant::Cifar100);
        let _ = decode_network(&data);
        let _ = decode_snapshot(&data);
    }

    #[test]
    fn corrupted_checkpoints_never_panic(at in 0usize..2000, byte in any::<u8>(), cut in 0usize..2000) {
        let mut bytes = encode_network(&conv_net(6));
        let n = bytes.len();
        bytes[at % n] = byte;
        bytes.truncate(cut.max(1).min(n));
        let _ = decode_network(&bytes);
    }

    #[test]
    fn corrupted_idx_headers_never_panic(at in 0usize..16, byte in any::<u8>()) {
        let mut images = read("good-images.idx3-ubyte");
        images[at] = byte;
        let _ = decode_idx(&images, &read("good-labels.idx1-ubyte"));
    }
}

#[test]
fn oversized_headers_are_format_errors() {
    let mut images = vec![0, 0, 8, 4];
    for d in [u32::MAX; 4] {
        images.extend_from_slice(&d.to_be_bytes());
    }
    assert!(is_format(&decode_idx(&images, &read("good-labels.idx1-ubyte")).unwrap_err()));

    let mut ckpt = encode_network(&conv_net(7));
    let desc_len = u64::from_le_bytes(ckpt[8..16].try_into().unwrap()) as usize;
    let at = 16 + desc_len;
    ckpt.truncate(at);
    ckpt.extend_from_slice(&4u32.to_le_bytes());
    for _ in 0..4 {
        ckpt.extend_from_slice(&(1u64 << 32).to_le_bytes());
    }
    assert!(is_format(&decode_network(&ckpt).unwrap_err()));
}
