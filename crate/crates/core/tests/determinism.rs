use autohr::backbone::{NetworkConfig, RppgNet};
use autohr::dataset::{load_dataset, save_dataset, Sample};
use autohr::exec::Exec;
use autohr::harness::train::{train, TrainConfig};
use autohr::optim::AdamConfig;
use autohr::signal::Region;
use autohr::synth::{gen_dataset, DatasetSpec};

fn tiny(n: usize, frames: usize, exec: Exec) -> Vec<Sample> {
    let mut spec = DatasetSpec::new(n, (60.0, 120.0), 2, 5);
    spec.template.frames = frames;
    spec.template.fps = 16.0;
    spec.template.height = 8;
    spec.template.width = 8;
    spec.template.skin_region = Region {
        top: 1,
        left: 1,
        height: 6,
        width: 6,
    };
    gen_dataset(&spec, exec).unwrap()
}

#[test]
fn synthesis_is_identical_across_exec_modes() {
    assert_eq!(tiny(4, 48, Exec::Sequential), tiny(4, 48, Exec::Parallel));
}

#[test]
fn training_is_identical_across_exec_modes() {
    let data = tiny(4, 48, Exec::Sequential);
    let refs: Vec<&Sample> = data.iter().collect();
    let run = |exec| {
        let mut cfg = TrainConfig::new(NetworkConfig::preset("autohr_v1", 2).unwrap().with_seed(1));
        cfg.epochs = 2;
        cfg.batch_size = 2;
        cfg.clip_len = 32;
        cfg.optimizer = AdamConfig::new(1e-3, 5e-5);
        cfg.da1 = true;
        cfg.da2 = true;
        cfg.exec = exec;
        let mut out = train(&refs, &cfg, None, None).unwrap();
        let y = out.net.forward(&data[0].clip.window(0, 32).unwrap()).unwrap();
        (out.log, y)
    };
    assert_eq!(run(Exec::Sequential), run(Exec::Parallel));
}

#[test]
fn dataset_and_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny(3, 40, Exec::default());
    save_dataset(dir.path(), &data, Exec::default()).unwrap();
    let back = load_dataset(dir.path(), Exec::default()).unwrap();
    assert_eq!(back.len(), data.len());
    for (a, b) in data.iter().zip(&back) {
        assert_eq!((&a.id, &a.subject, a.hr), (&b.id, &b.subject, b.hr));
        assert_eq!(a.ppg, b.ppg);
        // Frames are stored as 8-bit PNG.
        let worst = a.clip.data().data().iter().zip(b.clip.data().data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 0.5 / 255.0 + 1e-12, "{worst}");
    }

    let mut net = RppgNet::build(NetworkConfig::preset("autohr_v1", 2).unwrap().with_seed(3)).unwrap();
    let ckpt = dir.path().join("ckpt");
    net.save(&ckpt).unwrap();
    let mut loaded = RppgNet::load(&ckpt).unwrap();
    let clip = back[0].clip.window(0, 32).unwrap();
    assert_eq!(net.forward(&clip).unwrap(), loaded.forward(&clip).unwrap());
}
