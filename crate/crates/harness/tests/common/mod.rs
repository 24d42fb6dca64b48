#![allow(dead_code)]

use vtg_harness::config::RunConfig;

/// A model and synthetic dataset small enough to train in seconds.
pub fn tiny_config(train: usize, val: usize, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.dim = 16;
    cfg.model.dropout = 0.1;
    cfg.interaction.heads = 2;
    cfg.interaction.layers = 1;
    cfg.encoder.layers = 1;
    cfg.decoder.layers = 1;
    cfg.decoder.queries = 4;
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 4;
    cfg.train.lr = 1e-3;
    cfg.train.checkpoint_every = 1;
    let s = &mut cfg.data.synthetic;
    s.generator.n_samples = train + val;
    s.generator.video_len = (10, 14);
    s.generator.text_len = (3, 5);
    s.generator.video_dim = 12;
    s.generator.text_dim = 8;
    s.generator.moment_width = (0.2, 0.4);
    s.train = train;
    s.val = val;
    s.test = 0;
    cfg
}
