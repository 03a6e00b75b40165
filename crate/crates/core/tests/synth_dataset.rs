use std::collections::HashSet;
use std::fs;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rankforge_core::synth::{
    epoch_batches, generate, generate_in_memory, sample_batch, CAPTION_EMBEDDINGS_FILE,
    CAPTION_FEATURES_FILE, IMAGE_FEATURES_FILE, MANIFEST_FILE,
};
use rankforge_core::tensorio::load_manifest;
use rankforge_core::{Error, Split, SynthSpec};

#[test]
fn ten_thousand_batches_never_repeat_an_image() {
    let (m, _) = generate_in_memory(&SynthSpec::default(), PathBuf::from("mem")).unwrap();
    let train: HashSet<usize> = m.images_in(Split::Train).into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10_000 {
        let batch = sample_batch(&m, 32, &mut rng).unwrap();
        assert_eq!(batch.len(), 32);
        let images: HashSet<usize> = batch.iter().map(|&(i, _)| i).collect();
        assert_eq!(images.len(), 32);
        for &(i, c) in &batch {
            assert!(train.contains(&i));
            assert!(m.pairs.iter().any(|p| p.image == i && p.caption == c));
        }
    }
}

#[test]
fn oversized_batch_is_a_sampling_error() {
    let (m, _) = generate_in_memory(&SynthSpec::default(), PathBuf::from("mem")).unwrap();
    let n_train = m.images_in(Split::Train).len();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        sample_batch(&m, n_train + 1, &mut rng),
        Err(Error::Sampling { requested, available }) if requested == n_train + 1 && available == n_train
    ));
}

#[test]
fn epoch_covers_every_training_image_once() {
    let (m, _) = generate_in_memory(&SynthSpec::default(), PathBuf::from("mem")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batches = epoch_batches(&m, 32, &mut rng).unwrap();
    let mut seen: Vec<usize> = batches.iter().flatten().map(|&(i, _)| i).collect();
    seen.sort_unstable();
    assert_eq!(seen, m.images_in(Split::Train));
}

#[test]
fn generated_files_load_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_images: 40,
        seed: 12,
        ..SynthSpec::default()
    };
    let (made, summary) = generate(&spec, dir.path()).unwrap();
    for f in [
        IMAGE_FEATURES_FILE,
        CAPTION_FEATURES_FILE,
        CAPTION_EMBEDDINGS_FILE,
        MANIFEST_FILE,
    ] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let loaded = load_manifest(dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded.image_features, made.image_features);
    assert_eq!(loaded.caption_features, made.caption_features);
    assert_eq!(loaded.caption_embeddings, made.caption_embeddings);
    assert_eq!(loaded.pairs, made.pairs);
    assert_eq!(loaded.image_clusters, made.image_clusters);
    assert!(summary.same_image_relevance.unwrap() > summary.cross_image_relevance.unwrap());

    let again = tempfile::tempdir().unwrap();
    generate(&spec, again.path()).unwrap();
    for f in [IMAGE_FEATURES_FILE, CAPTION_EMBEDDINGS_FILE, MANIFEST_FILE] {
        assert_eq!(
            fs::read(dir.path().join(f)).unwrap(),
            fs::read(again.path().join(f)).unwrap()
        );
    }
}

#[test]
fn low_noise_self_check_separates_same_image_captions() {
    for seed in 0..5 {
        let spec = SynthSpec {
            noise_sigma: 0.05,
            seed,
            ..SynthSpec::default()
        };
        let (_, s) = generate_in_memory(&spec, PathBuf::from("mem")).unwrap();
        assert!(s.same_image_relevance.unwrap() > s.cross_image_relevance.unwrap());
    }
}
