use daml::classifiers::ClassifierState;
use daml::config::{HyperParams, TrainConfig};
use daml::data::{generate_benchmark, SyntheticSpec};
use daml::encoders::{default_pair, EncoderConfig};
use daml::evaluation::EvalOptions;
use daml::training::{adapt_epoch, evaluate_encoder, pretrain, AdaptOptions, Role, RunState};
use daml::encoders::Encoder;
use std::time::Instant;

fn main() {
    let spec = SyntheticSpec { query_per_id: 4, gallery_per_id: 6, ..SyntheticSpec::default() };
    let bench = generate_benchmark(&spec).unwrap();
    let source = bench.source_train.materialize((32, 16)).unwrap();
    let target = bench.target_train.materialize((32, 16)).unwrap();
    let query = bench.target_query.materialize((32, 16)).unwrap();
    let gallery = bench.target_gallery.materialize((32, 16)).unwrap();
    let hp = HyperParams::desk_scale();
    let arms: [(&str, AdaptOptions); 5] = [
        ("full", AdaptOptions::default()),
        ("w/o source", AdaptOptions::without_source_terms()),
        ("w/o distill_id", AdaptOptions::without_distill_id()),
        ("w/o distill_dom", AdaptOptions::without_distill_dom()),
        ("w/o scu", AdaptOptions::without_scu()),
    ];
    let mut sums = [0.0f64; 5];
    for seed in [0u64, 1, 2] {
        let cfg = TrainConfig { seed, eval_every: 0, adapt_epochs: 15, ..TrainConfig::desk_scale() };
        let t0 = Instant::now();
        let (mut teacher, mut student) = default_pair((32, 16), seed).unwrap();
        // match run(): encoder init seeds derived from cfg.seed
        teacher = Encoder::new(EncoderConfig::conv_teacher((32, 16)), seed * 2 + 1).unwrap();
        student = Encoder::new(EncoderConfig::attention_student((32, 16)), seed * 2 + 2).unwrap();
        let t_out = pretrain(&mut teacher, Role::Teacher, &source, &cfg, &hp).unwrap();
        let _s_out = pretrain(&mut student, Role::Student, &source, &cfg, &hp).unwrap();
        print!("seed {seed}:");
        for (i, (name, options)) in arms.iter().enumerate() {
            let mut state = RunState {
                teacher: teacher.clone(),
                student: student.clone(),
                classifiers: ClassifierState::new(t_out.classifier.clone()),
                pseudo: None,
                epoch: 0,
                history: Vec::new(),
            };
            for _ in 0..cfg.adapt_epochs {
                adapt_epoch(&mut state, &source, &target, &cfg, &hp, options).unwrap();
            }
            let r = evaluate_encoder(&state.student, &query, &gallery, &EvalOptions::default()).unwrap();
            sums[i] += r.map;
            print!(" {name}={:.3}", r.map);
        }
        println!(" ({:.0}s)", t0.elapsed().as_secs_f64());
    }
    println!("means:");
    for (i, (name, _)) in arms.iter().enumerate() {
        println!("  {name}: {:.3}", sums[i] / 3.0);
    }
}
