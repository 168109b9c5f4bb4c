use hazeforge_core::io::ppm::{read_ppm, write_ppm};
use hazeforge_core::io::parse_config;
use hazeforge_core::rng::SplitMix64;
use hazeforge_core::train::{load_model, Checkpoint, Trainer};
use hazeforge_core::{Shape, Tensor};

#[test]
fn ppm_files_round_trip_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = SplitMix64::new(4);
    let (w, h) = (7, 5);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend((0..w * h * 3).map(|_| rng.below(256) as u8));
    let src = dir.path().join("src.ppm");
    std::fs::write(&src, &bytes).unwrap();

    let img: Tensor<f32> = read_ppm(&src).unwrap();
    assert_eq!(img.shape(), Shape::new(1, 3, h, w));
    assert_eq!(img.at(0, 1, 0, 0), bytes[11 + 1] as f32 / 255.0);
    let dst = dir.path().join("dst.ppm");
    write_ppm(&dst, &img).unwrap();
    assert_eq!(std::fs::read(&dst).unwrap(), bytes);
}

#[test]
fn checkpoint_on_disk_restores_the_model() {
    let cfg = parse_config("epochs = 2\nbatch = 2\nimage_size = 32\ndataset_count = 2\neval_count = 0\n").unwrap();
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    trainer.run_epoch().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    trainer.checkpoint().save(&path).unwrap();

    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, trainer.checkpoint());
    let model = load_model(cfg.net, &loaded).unwrap();
    let x = &trainer.train_set.samples[0].hazy;
    assert_eq!(model.run(x).unwrap(), trainer.model.run(x).unwrap());
}

#[test]
fn reconstruction_loss_falls_over_the_first_hundred_steps() {
    // The overfit set: 8 samples, batch 4, so 50 epochs are 100 steps.
    let cfg = parse_config("epochs = 300\nbatch = 4\nlr0 = 3e-3\nimage_size = 64\ndataset_count = 8\neval_count = 0\n").unwrap();
    let mut trainer = Trainer::new(cfg).unwrap();
    let mut rec = Vec::new();
    for _ in 0..50 {
        rec.push(trainer.run_epoch().unwrap().losses.l_rec);
    }
    assert!(rec[49] < rec[0], "l_rec {} -> {}", rec[0], rec[49]);
}
