use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zsar_core::dataio::{load_checkpoint, read_fvec, read_fvec_shape, save_checkpoint, write_fvec};
use zsar_core::embedder::{Architecture, ModelParams};
use zsar_core::trainer::{from_checkpoint, to_checkpoint};
use zsar_core::Matrix;

#[test]
fn full_size_feature_matrix_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.fvec");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data: Vec<f32> = (0..480 * 4096)
        .map(|_| rng.random_range(-10.0f32..10.0))
        .collect();
    let m = Matrix::new(480, 4096, data).unwrap();
    write_fvec(&path, &m).unwrap();
    assert_eq!(read_fvec_shape(&path).unwrap(), (480, 4096));
    let back = read_fvec(&path).unwrap();
    assert_eq!(back.shape(), (480, 4096));
    assert!(m
        .as_slice()
        .iter()
        .zip(back.as_slice())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn default_model_checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let arch = Architecture::default();
    let params = ModelParams::<f32>::init(&arch, 17).unwrap();
    let ckpt = to_checkpoint(&params, "{\"note\":\"round trip\"}".into());
    save_checkpoint(&path, &ckpt).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.config_echo, ckpt.config_echo);
    let back = from_checkpoint(&loaded, &arch).unwrap();
    assert_eq!(back.flatten(), params.flatten());
    save_checkpoint(dir.path().join("again.ckpt"), &loaded).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(dir.path().join("again.ckpt")).unwrap()
    );
}

#[test]
fn checkpoint_for_another_architecture_is_rejected() {
    let arch = Architecture::default();
    let params = ModelParams::<f32>::init(&arch, 1).unwrap();
    let ckpt = to_checkpoint(&params, String::new());
    let other = Architecture { d_emb: 64, ..arch };
    assert!(from_checkpoint(&ckpt, &other).is_err());
}
