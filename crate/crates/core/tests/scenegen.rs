mod common;

use common::{read_tree, tiny_gen};
use proptest::prelude::*;
use relumix_core::scenegen::{
    generate_dataset, lighting_presets, object_masks, render_clip, render_frame, sample_scene,
    DatasetManifest, GenConfig, Split,
};

#[test]
fn regeneration_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_dataset(&tiny_gen(5), a.path(), 1).unwrap();
    generate_dataset(&tiny_gen(5), b.path(), 2).unwrap();
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);
}

#[test]
fn stored_clips_replay_the_recorded_scene() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        lightings_per_scene: 4,
        ..tiny_gen(2)
    };
    let m = generate_dataset(&cfg, dir.path(), 1).unwrap();
    let presets = lighting_presets();
    for scene in m.scenes.iter().take(3) {
        let spec = m.load_scene_spec(scene.id).unwrap();
        for &l in &scene.lightings {
            let stored = m.load_clip(scene.id, l).unwrap();
            let fresh = render_clip(&spec, &presets[l]).unwrap();
            for (s, f) in stored.data.iter().zip(&fresh.data) {
                assert!((s - f).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }
}

#[test]
fn manifest_splits_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&tiny_gen(3), dir.path(), 1).unwrap();
    assert_eq!(m.split_counts, [7, 2, 1]);
    assert_eq!(m.scenes_in(Split::Test).count(), 1);
    let loaded = DatasetManifest::load(dir.path()).unwrap();
    assert_eq!(loaded.scenes, m.scenes);
    for s in &m.scenes {
        let mut l = s.lightings.clone();
        l.sort();
        l.dedup();
        assert_eq!(l.len(), 2);
    }
}

#[test]
fn invalid_config_names_key() {
    let dir = tempfile::tempdir().unwrap();
    let e = generate_dataset(
        &GenConfig {
            lightings_per_scene: 40,
            ..tiny_gen(0)
        },
        dir.path(),
        1,
    )
    .unwrap_err();
    assert!(e.to_string().contains("data.lightings_per_scene"), "{e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn masks_do_not_depend_on_lighting(seed in 0u64..10_000, t in 0usize..8) {
        let spec = sample_scene(seed, 8, 32, 32).unwrap();
        let masks = object_masks(&spec, t);
        prop_assert_eq!(masks.len(), 32 * 32);
        for preset in lighting_presets() {
            let frame = render_frame(&spec, &preset, t).unwrap();
            prop_assert!(frame.data.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(&object_masks(&spec, t), &masks);
        }
    }

    #[test]
    fn scene_sampling_is_deterministic(seed in 0u64..10_000) {
        prop_assert_eq!(sample_scene(seed, 8, 32, 32).unwrap(), sample_scene(seed, 8, 32, 32).unwrap());
    }
}
