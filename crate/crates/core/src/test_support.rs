use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::event_io::{EventRecord, EventStream, Polarity};
use crate::model::EfvConfig;
use crate::representations::{prepare_sample, CellSize, PreprocessConfig, Sample};

pub fn micro_config() -> EfvConfig {
    EfvConfig {
        preprocess: PreprocessConfig {
            frames: 2,
            frame_height: 8,
            frame_width: 8,
            cell: CellSize::new(2.0, 2.0, 4.0),
            t_span: 8.0,
            top_k: 12,
        },
        grid: (2, 2),
        width: 8,
        heads: 2,
        st_depth: 1,
        fusion_depth: 1,
        stem_channels: vec![4],
        gmm_hidden: 6,
        gmm_kernels: 2,
        radius: 2.0,
        head_hidden: 8,
        classes: 3,
        seed: 5,
    }
}

pub fn random_sample(cfg: &EfvConfig, seed: u64, label: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = &cfg.preprocess;
    let events = (0..60)
        .map(|_| {
            EventRecord::new(
                rng.random_range(0..p.frame_width as u32),
                rng.random_range(0..p.frame_height as u32),
                rng.random_range(0..1000),
                Polarity::from_bit(rng.random()),
            )
        })
        .collect();
    let stream = EventStream::new(events, p.frame_width as u32, p.frame_height as u32)
        .unwrap()
        .with_label(label);
    prepare_sample(&stream, p).unwrap()
}

#[allow(dead_code)]
pub fn random_dataset(cfg: &EfvConfig, n: usize, seed: u64) -> Vec<Sample> {
    (0..n).map(|i| random_sample(cfg, seed * 1000 + i as u64, i % cfg.classes)).collect()
}
