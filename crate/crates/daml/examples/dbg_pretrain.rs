use daml::config::{HyperParams, TrainConfig};
use daml::data::{generate_benchmark, SyntheticSpec};
use daml::encoders::{Encoder, EncoderConfig};
use daml::training::{pretrain, Role};
use std::time::Instant;

fn main() {
    let spec = SyntheticSpec::default();
    let bench = generate_benchmark(&spec).unwrap();
    let source = bench.source_train.materialize((32, 16)).unwrap();
    let hp = HyperParams::default();
    for seed in [0u64, 1, 2, 3, 4] {
        let cfg = TrainConfig { seed, ..TrainConfig::desk_scale() };
        let t0 = Instant::now();
        let mut teacher = Encoder::new(EncoderConfig::conv_teacher((32, 16)), seed * 2 + 1).unwrap();
        let t = pretrain(&mut teacher, Role::Teacher, &source, &cfg, &hp).unwrap();
        let mut student = Encoder::new(EncoderConfig::attention_student((32, 16)), seed * 2 + 2).unwrap();
        let s = pretrain(&mut student, Role::Student, &source, &cfg, &hp).unwrap();
        println!("seed {seed}: teacher {:.3}, student {:.3} ({:.0}s)", t.train_top1, s.train_top1, t0.elapsed().as_secs_f64());
    }
}
