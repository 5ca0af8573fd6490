use daml::classifiers::ClassifierState;
use daml::config::{HyperParams, TrainConfig};
use daml::data::{generate_benchmark, SyntheticSpec};
use daml::encoders::{Encoder, EncoderConfig};
use daml::evaluation::EvalOptions;
use daml::training::{adapt_epoch, evaluate_encoder, pretrain, AdaptOptions, Role, RunState};

fn main() {
    let spec = SyntheticSpec { query_per_id: 4, gallery_per_id: 6, ..SyntheticSpec::default() };
    let bench = generate_benchmark(&spec).unwrap();
    let source = bench.source_train.materialize((32, 16)).unwrap();
    let target = bench.target_train.materialize((32, 16)).unwrap();
    let query = bench.target_query.materialize((32, 16)).unwrap();
    let gallery = bench.target_gallery.materialize((32, 16)).unwrap();
    let hp = HyperParams::desk_scale();
    for mult in [10.0f64, 30.0] {
        let mut sums = [0.0f64; 2];
        for seed in [0u64, 1, 2] {
            let cfg = TrainConfig {
                seed, eval_every: 0, adapt_epochs: 15,
                adapt_classifier_lr_mult: mult,
                ..TrainConfig::desk_scale()
            };
            let mut teacher = Encoder::new(EncoderConfig::conv_teacher((32, 16)), seed * 2 + 1).unwrap();
            let mut student = Encoder::new(EncoderConfig::attention_student((32, 16)), seed * 2 + 2).unwrap();
            let t_out = pretrain(&mut teacher, Role::Teacher, &source, &cfg, &hp).unwrap();
            let _ = pretrain(&mut student, Role::Student, &source, &cfg, &hp).unwrap();
            for (i, options) in [AdaptOptions::default(), AdaptOptions::without_scu()].iter().enumerate() {
                let mut state = RunState {
                    teacher: teacher.clone(), student: student.clone(),
                    classifiers: ClassifierState::new(t_out.classifier.clone()),
                    pseudo: None, epoch: 0, history: Vec::new(),
                };
                let mut last_ce = 0.0;
                for _ in 0..cfg.adapt_epochs {
                    let o = adapt_epoch(&mut state, &source, &target, &cfg, &hp, options).unwrap();
                    if !o.reports.is_empty() {
                        last_ce = o.reports.iter().map(|r| r.teacher_target_ce).sum::<f64>() / o.reports.len() as f64;
                    }
                }
                let r = evaluate_encoder(&state.student, &query, &gallery, &EvalOptions::default()).unwrap();
                sums[i] += r.map;
                print!(" s{seed}{}={:.3}(ce{last_ce:.1})", if i == 0 {"full"} else {"noscu"}, r.map);
            }
        }
        println!("\n  mult {mult}: full={:.3} w/o scu={:.3}", sums[0] / 3.0, sums[1] / 3.0);
    }
}
