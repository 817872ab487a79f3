use dckd_core::data::gen_blobs;
use dckd_core::models::{load_checkpoint, save_checkpoint};
use dckd_core::trainer::{train_dckd, train_teacher, DistillConfig};

#[test]
fn trained_models_survive_a_file_round_trip() {
    let (train, val) = gen_blobs(4, 30, 3, 0.3, 2).unwrap().split(0.25, 2).unwrap();
    let cfg = DistillConfig { epochs: 3, t0: 2, batch_size: 16, ..Default::default() };
    let (teacher, _) = train_teacher(&train, &val, &[3, 12, 4], &cfg).unwrap();
    let (students, _) = train_dckd(&teacher, &[3, 6, 4], &cfg, &train, &val).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (i, m) in std::iter::once(&teacher).chain(&students).enumerate() {
        let path = dir.path().join(format!("m{i}.ckpt"));
        save_checkpoint(m, 3, 0xfeed, &path).unwrap();
        let (back, ckpt) = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt.config_hash, 0xfeed);
        assert_eq!(ckpt.epoch, 3);
        assert_eq!(back.seed(), m.seed());
        assert_eq!(back.flat_params(), m.flat_params());
        assert_eq!(back.predict(&val.features).unwrap(), m.predict(&val.features).unwrap());
    }
}
