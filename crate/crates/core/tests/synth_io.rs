mod common;

use common::*;
use sonoseg::io::*;
use sonoseg::model::{load_checkpoint, save_checkpoint, PromptSegModel};
use sonoseg::synth::*;
use sonoseg::{Error, ImageGrid};

#[test]
fn generated_dataset_loads_back_as_the_same_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        seed: 4,
        ..SynthConfig::default()
    };
    generate_dataset(&cfg, 5, dir.path(), Split::Test, "toy").unwrap();
    let manifest = load_manifest(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(manifest.dataset_id, "toy");
    assert_eq!(manifest.records.len(), 5);

    let loaded = load_samples(&dir.path().join("manifest.json"), None).unwrap();
    let direct = generate_samples(&cfg, 5).unwrap();
    assert_eq!(loaded.len(), direct.len());
    for (a, b) in loaded.iter().zip(&direct) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.gt, b.gt);
        // Images pass through 8-bit PNG.
        assert_eq!(a.image.to_u8(), b.image.to_u8());
    }
    assert!(matches!(
        load_samples(&dir.path().join("manifest.json"), Some(Split::Train)),
        Err(Error::Data { .. })
    ));
}

#[test]
fn missing_mask_file_is_a_data_error_naming_the_record() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&SynthConfig::default(), 2, dir.path(), Split::Train, "toy").unwrap();
    let manifest = load_manifest(&dir.path().join("manifest.json")).unwrap();
    std::fs::remove_file(dir.path().join(&manifest.records[1].masks[0].path)).unwrap();
    match load_manifest(&dir.path().join("manifest.json")) {
        Err(Error::Data { message, .. }) => assert!(message.contains(&manifest.records[1].id)),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn empty_and_malformed_manifests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.json");
    std::fs::write(&path, "").unwrap();
    assert!(matches!(load_manifest(&path), Err(Error::Data { .. })));
    std::fs::write(&path, "{\"dataset_id\": 3}").unwrap();
    assert!(matches!(load_manifest(&path), Err(Error::Data { .. })));
    assert!(matches!(
        load_manifest(&dir.path().join("absent.json")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn png_round_trips_are_lossless_for_8_bit_data() {
    let image = ImageGrid::from_u8(3, 4, &[0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 255]).unwrap();
    let bytes = encode_gray_png(3, 4, &image.to_u8()).unwrap();
    assert_eq!(image_from_png(&bytes, "x".as_ref()).unwrap(), image);
    let mask = rect_mask(5, 7, 1, 1, 4, 3);
    let png = mask_to_png(&mask).unwrap();
    assert_eq!(mask_from_png(&png, "m".as_ref()).unwrap(), mask);
}

#[test]
fn samples_have_objects_within_configured_radii() {
    let cfg = SynthConfig::default();
    for i in 0..20 {
        let s = generate_sample(&cfg, i).unwrap();
        assert!((1..=2).contains(&s.objects.len()));
        for o in &s.objects {
            let (x0, y0, x1, y1) = tight_bbox(&o.mask);
            assert!(x1 - x0 <= 2 * 14 + 2 && y1 - y0 <= 2 * 14 + 2);
            assert!(o.mask.count() >= 64);
        }
    }
}

#[test]
fn checkpoints_preserve_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    let model = PromptSegModel::init(tiny_config(), 8).unwrap();
    save_checkpoint(&model, &path, None).unwrap();
    let (back, manifest) = load_checkpoint(&path).unwrap();
    assert_eq!(manifest.seed, 8);
    assert_eq!(back.checksum().unwrap(), model.checksum().unwrap());
    let s = &tiny_samples(1, 1)[0];
    let prompts = sonoseg::PromptSet::from_point(sonoseg::Point::positive(30, 30));
    assert_eq!(
        model.predict(&s.image, &prompts).unwrap().1,
        back.predict(&s.image, &prompts).unwrap().1
    );

    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
}
