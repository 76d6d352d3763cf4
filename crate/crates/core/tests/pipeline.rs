//! End-to-end use of the public API: recordings on disk to a trained,
//! reloaded model.

use efv_core::cache::{read_cache_file, write_cache_file};
use efv_core::checkpoint::{load_checkpoint, save_checkpoint};
use efv_core::config::RunConfig;
use efv_core::event_io::{parse_nmnist_bin, write_nmnist_bin};
use efv_core::model::Mode;
use efv_core::representations::{prepare_sample, Sample};
use efv_core::synthetic::{saccade_digits, SaccadeConfig};
use efv_core::training::{evaluate, train_epoch, ModelState, TrainConfig};

const CONFIG: &str = r#"
[representation]
frames = 4
frame_height = 16
frame_width = 16
top_k = 64
t_span = 16.0

[model]
grid = [2, 2]
width = 16
heads = 2
st_depth = 1
stem_channels = [8]
gmm_hidden = 16
gmm_kernels = 2
head_hidden = 32

[train]
batch_size = 8
"#;

fn samples(cfg: &RunConfig, n: usize, seed: u64) -> Vec<Sample> {
    let prep = cfg.model_config(0).preprocess;
    saccade_digits(n, seed, &SaccadeConfig::default())
        .unwrap()
        .into_iter()
        .map(|s| {
            // through the on-disk encoding, as the CLI does
            let back = parse_nmnist_bin(&write_nmnist_bin(&s).unwrap(), 34, 34).unwrap();
            assert_eq!(back.events(), s.events());
            prepare_sample(&back.with_label(s.label.unwrap()), &prep).unwrap()
        })
        .collect()
}

#[test]
fn train_save_reload_for_every_mode() {
    let cfg = RunConfig::from_toml(CONFIG).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("train.efvc");
    write_cache_file(&cache, &samples(&cfg, 24, 1)).unwrap();
    let data = read_cache_file(&cache).unwrap();
    assert_eq!(data.len(), 24);

    for mode in Mode::ALL {
        let tc = TrainConfig {
            mode,
            ..cfg.train_config(4)
        };
        let mut state = ModelState::new(cfg.model_config(4), &tc).unwrap();
        let first = train_epoch(&mut state, &data, &tc, 0).unwrap();
        let mut last = first.clone();
        for epoch in 1..8 {
            last = train_epoch(&mut state, &data, &tc, epoch).unwrap();
        }
        assert!(last.train_loss < first.train_loss, "{mode}: {} -> {}", first.train_loss, last.train_loss);

        let path = dir.path().join(format!("{mode}.efvw"));
        save_checkpoint(&state, &path).unwrap();
        let reloaded = load_checkpoint(&path, &cfg.model_config(0), mode).unwrap();
        assert_eq!(reloaded.epochs_done, 8);
        assert_eq!(evaluate(&reloaded, &data).unwrap(), evaluate(&state, &data).unwrap());
    }
}

#[test]
fn checkpoint_of_one_mode_does_not_load_as_another() {
    let cfg = RunConfig::from_toml(CONFIG).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let state = ModelState::new(cfg.model_config(0), &cfg.train_config(0)).unwrap();
    let path = dir.path().join("fused.efvw");
    save_checkpoint(&state, &path).unwrap();
    assert!(load_checkpoint(&path, &cfg.model_config(0), Mode::ImageOnly).is_err());
    assert!(load_checkpoint(&path, &cfg.model_config(0), Mode::Fused).is_ok());
}
