use sddpm_core::data::{
    decode_checkpoint, encode_image_grid, grid_dims, load_checkpoint, load_idx, parse_idx_images, save_checkpoint,
    synth_dataset, to_byte, two_mode_templates, Checkpoint, Dataset, SynthKind,
};
use sddpm_core::diffusion::make_schedule;
use sddpm_core::lif::LifParams;
use sddpm_core::optim::AdamConfig;
use sddpm_core::train::Trainer;
use sddpm_core::unet::{SpikingUNet, UNetConfig};
use sddpm_core::{Error, RngStream, Tensor};

/// Writes an IDX file field by field, independently of the parser.
fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

#[test]
fn idx_images_parse_and_normalize() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..3 * 28 * 28).map(|i| (i * 7 % 256) as u8).collect();
    let img = dir.path().join("img.idx");
    std::fs::write(&img, idx_bytes(0x803, &[3, 28, 28], &pixels)).unwrap();
    let lab = dir.path().join("lab.idx");
    std::fs::write(&lab, idx_bytes(0x801, &[3], &[4, 1, 9])).unwrap();

    let d = load_idx(&img, Some(&lab)).unwrap();
    assert_eq!(d.images.shape(), &[3, 1, 28, 28]);
    assert_eq!(d.labels.as_deref(), Some(&[4u8, 1, 9][..]));
    for (v, &p) in d.images.data().iter().zip(&pixels) {
        assert_eq!(*v, p as f32 / 127.5 - 1.0);
    }
    let padded = d.fit_to(32).unwrap();
    assert_eq!(padded.images.shape(), &[3, 1, 32, 32]);
    assert_eq!(padded.images.data()[0], -1.0);
}

#[test]
fn idx_endpoints_map_to_unit_interval() {
    let raw = parse_idx_images(&idx_bytes(0x803, &[1, 1, 2], &[0, 255])).unwrap();
    assert_eq!((raw.count, raw.rows, raw.cols), (1, 1, 2));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x");
    std::fs::write(&p, idx_bytes(0x803, &[1, 1, 2], &[0, 255])).unwrap();
    assert_eq!(load_idx(&p, None).unwrap().images.data(), &[-1.0, 1.0]);
}

#[test]
fn idx_errors_are_distinct() {
    let good = idx_bytes(0x803, &[2, 2, 2], &[0; 8]);
    assert!(matches!(parse_idx_images(&good[..good.len() - 1]), Err(Error::Truncated { .. })));
    assert!(matches!(parse_idx_images(&good[..10]), Err(Error::Truncated { .. })));
    let mut bad = good.clone();
    bad[3] = 0x01;
    assert!(matches!(parse_idx_images(&bad), Err(Error::BadMagic { .. })));
    let mut long = good.clone();
    long.push(0);
    assert!(matches!(parse_idx_images(&long), Err(Error::DimMismatch(_))));

    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("i"), dir.path().join("l"));
    std::fs::write(&img, &good).unwrap();
    std::fs::write(&lab, idx_bytes(0x801, &[3], &[0, 0, 0])).unwrap();
    assert!(matches!(load_idx(&img, Some(&lab)), Err(Error::DimMismatch(_))));
    assert!(matches!(load_idx(&dir.path().join("missing"), None), Err(Error::Io { .. })));
}

#[test]
fn synthetic_datasets_are_deterministic_and_bounded() {
    for kind in [SynthKind::Blobs, SynthKind::TwoMode] {
        let a = synth_dataset(kind, 50, 8, 3, 0.1).unwrap();
        let b = synth_dataset(kind, 50, 8, 3, 0.1).unwrap();
        assert_eq!(a, b);
        assert!(a.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_ne!(a, synth_dataset(kind, 50, 8, 4, 0.1).unwrap());
    }
    let clean = synth_dataset(SynthKind::TwoMode, 100, 8, 1, 0.0).unwrap();
    let templates = two_mode_templates(8);
    let mut hits = [0; 2];
    for img in clean.images.data().chunks(64) {
        let k = templates.iter().position(|t| t.as_slice() == img).expect("matches a template");
        hits[k] += 1;
    }
    assert!(hits[0] > 0 && hits[1] > 0);
    assert!(synth_dataset(SynthKind::Blobs, 0, 8, 0, 0.0).is_err());
    assert!(synth_dataset(SynthKind::Blobs, 1, 3, 0, 0.0).is_err());
}

#[test]
fn grid_layout_matches_closed_form() {
    let samples = Tensor::<f32>::full(&[4, 1, 5, 3], -1.0);
    let bytes = encode_image_grid(&samples, 2).unwrap();
    // 2 tiles of width 3 plus one 2px separator; same vertically with height 5.
    let (w, h) = (2 * 3 + 2, 2 * 5 + 2);
    assert_eq!(grid_dims(4, 2, 5, 3), (w, h));
    let header = format!("P5\n{w} {h}\n255\n");
    assert!(bytes.starts_with(header.as_bytes()));
    let px = &bytes[header.len()..];
    assert_eq!(px.len(), w * h);
    assert_eq!(px.iter().filter(|&&p| p == 0).count(), 4 * 15);

    let single = encode_image_grid(&Tensor::<f32>::full(&[1, 1, 4, 4], -1.0), 3).unwrap();
    let header = "P5\n4 4\n255\n";
    assert!(single[header.len()..].iter().all(|&p| p == 0));

    let rgb = encode_image_grid(&Tensor::<f32>::zeros(&[3, 3, 2, 2]), 2).unwrap();
    assert!(rgb.starts_with(b"P6\n6 6\n255\n"));
    assert!(encode_image_grid(&Tensor::<f32>::zeros(&[1, 2, 2, 2]), 1).is_err());
}

#[test]
fn pixel_values_clamp_instead_of_wrapping() {
    assert_eq!(to_byte(-7.0), 0);
    assert_eq!(to_byte(3.5), 255);
    assert_eq!(to_byte(-1.0), 0);
    assert_eq!(to_byte(1.0), 255);
    assert_eq!(to_byte(f64::NAN), 0);
    // byte → [-1,1] → byte is the identity
    for b in 0..=255u8 {
        assert_eq!(to_byte(b as f64 / 127.5 - 1.0), b);
    }
}

fn small_config() -> UNetConfig {
    UNetConfig {
        in_channels: 1,
        base_channels: 4,
        channel_mults: vec![1, 2],
        blocks_per_level: 1,
        time_steps: 2,
        lif: LifParams::default(),
        temb_dim: 8,
        image_size: 8,
    }
}

fn trainer(seed: u64) -> Trainer<f32> {
    let model = SpikingUNet::new(small_config(), seed).unwrap();
    let sched = make_schedule(100, 1e-4, 0.02).unwrap();
    Trainer::new(model, sched, AdamConfig { lr: 1e-3, ..AdamConfig::default() }, 4, seed).unwrap()
}

fn bits(ck: &Checkpoint<f32>) -> Vec<(String, Vec<usize>, Vec<u32>)> {
    ck.tensors
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let data = synth_dataset(SynthKind::TwoMode, 16, 8, 0, 0.05).unwrap();
    let mut tr = trainer(1);
    for _ in 0..3 {
        tr.train_step(&data).unwrap();
    }
    let ck = tr.checkpoint();
    assert!(ck.tensors.iter().any(|(n, _)| n.starts_with("adam.m.")));
    assert!(ck.tensors.iter().any(|(n, _)| n.ends_with(".running_var")));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.sdpm");
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(back.config, ck.config);
    assert_eq!((back.step, back.rng, back.adam_step), (3, ck.rng, 3));
    assert_eq!(bits(&back), bits(&ck));
    let (model, adam) = back.restore().unwrap();
    assert_eq!(adam.step_count, 3);
    let mut model = model;
    let again = Checkpoint::capture(&mut model, &adam, 3, &ck.rng.stream());
    assert_eq!(bits(&again), bits(&ck));
    assert_eq!(std::fs::read(&path).unwrap(), {
        save_checkpoint(&again, &dir.path().join("b")).unwrap();
        std::fs::read(dir.path().join("b")).unwrap()
    });
}

#[test]
fn corrupt_checkpoints_are_rejected_with_context() {
    let mut model = SpikingUNet::<f32>::new(small_config(), 0).unwrap();
    let ck = Checkpoint::capture(&mut model, &Default::default(), 0, &RngStream::new(0, 1));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck");
    save_checkpoint(&ck, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let mut flipped = bytes.clone();
    flipped[0] ^= 0xff;
    assert!(matches!(decode_checkpoint::<f32>(&flipped), Err(Error::BadMagic { .. })));

    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(decode_checkpoint::<f32>(&version), Err(Error::UnsupportedVersion(9))));

    let last = &ck.tensors.last().unwrap().0;
    match decode_checkpoint::<f32>(&bytes[..bytes.len() - 3]) {
        Err(Error::Truncated { what, .. }) => assert!(what.contains(last.as_str()), "{what}"),
        other => panic!("expected truncation, got {other:?}"),
    }

    // Corrupt the declared byte length of the first tensor.
    let cfg_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let first = 12 + cfg_len + 5 * 8 + 4;
    let name_len = u16::from_le_bytes(bytes[first..first + 2].try_into().unwrap()) as usize;
    let name = std::str::from_utf8(&bytes[first + 2..first + 2 + name_len]).unwrap().to_string();
    let ndim = bytes[first + 2 + name_len + 1] as usize;
    let len_at = first + 2 + name_len + 2 + 8 * ndim;
    let mut bad_len = bytes.clone();
    bad_len[len_at] ^= 0x04;
    match decode_checkpoint::<f32>(&bad_len) {
        Err(Error::CorruptTensor { name: n, .. }) => assert_eq!(n, name),
        other => panic!("expected corrupt tensor, got {other:?}"),
    }

    assert!(matches!(decode_checkpoint::<f64>(&bytes), Err(Error::CorruptTensor { .. })));
    assert!(!dir.path().join("ck.tmp").exists());
}

#[test]
fn f64_checkpoints_round_trip() {
    let mut model = SpikingUNet::<f64>::new(small_config(), 2).unwrap();
    let ck = Checkpoint::capture(&mut model, &Default::default(), 7, &RngStream::new(5, 1));
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&ck, &dir.path().join("c")).unwrap();
    let back = load_checkpoint::<f64>(&dir.path().join("c")).unwrap();
    assert_eq!(back, ck);
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let data = synth_dataset(SynthKind::TwoMode, 32, 8, 0, 0.05).unwrap();
    let mut straight = trainer(4);
    let full: Vec<u64> = (0..8).map(|_| straight.train_step(&data).unwrap().to_bits()).collect();

    let mut first = trainer(4);
    let mut log: Vec<u64> = (0..3).map(|_| first.train_step(&data).unwrap().to_bits()).collect();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&first.checkpoint(), &dir.path().join("mid")).unwrap();
    drop(first);
    let ck = load_checkpoint::<f32>(&dir.path().join("mid")).unwrap();
    let mut resumed = Trainer::resume(&ck, make_schedule(100, 1e-4, 0.02).unwrap(), AdamConfig { lr: 1e-3, ..AdamConfig::default() }, 4).unwrap();
    log.extend((3..8).map(|_| resumed.train_step(&data).unwrap().to_bits()));
    assert_eq!(log, full);
    assert_eq!(bits(&resumed.checkpoint()), bits(&straight.checkpoint()));
}

#[test]
fn dataset_gather_and_bounds() {
    let d = Dataset::new(Tensor::from_vec(&[3, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), None, "t").unwrap();
    assert_eq!(d.gather(&[2, 0, 2]).unwrap().data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    assert!(d.gather(&[3]).is_err());
}
