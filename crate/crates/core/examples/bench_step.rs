use headforge_core::causal::synth;
use headforge_core::model::ModelConfig;
use headforge_core::train::{Corpus, TrainConfig, Trainer};
use std::time::Instant;

fn main() {
    let tokens = synth::training_corpus(11, 400_000);
    let corpus = Corpus::from_tokens(tokens, synth::VOCAB, 0.05).unwrap();
    let cfg = ModelConfig {
        layers: 6,
        heads: 6,
        dim: 48,
        ffn_dim: 192,
        vocab: synth::VOCAB,
        max_seq: 64,
        dropout: 0.1,
        lambda: 0.1,
        pls_enabled: true,
        mode: headforge_core::model::StreamMode::Cascade,
    };
    let tcfg = TrainConfig {
        lr: 3e-4,
        weight_decay: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        clip: 1.0,
        warmup_steps: 100,
        total_steps: 1500,
        batch_size: 16,
        seq_len: 48,
        val_fraction: 0.05,
        seed: 7,
    };
    let model = headforge_core::model::Model::<f32>::init(cfg, 1).unwrap();
    let mut tr = Trainer::new(model, tcfg).unwrap();
    let t0 = Instant::now();
    let n = 10;
    for _ in 0..n {
        let s = tr.step(&corpus).unwrap();
        eprintln!("step {} loss {:.4}", s.step, s.loss);
    }
    let dt = t0.elapsed().as_secs_f64() / n as f64;
    eprintln!("avg step: {dt:.3}s -> 1500 steps ~ {:.1} min", dt * 1500.0 / 60.0);
}
