use daml::config::{HyperParams, TrainConfig};
use daml::data::{generate_benchmark, SyntheticSpec};
use daml::encoders::EncoderConfig;
use daml::training::{run, AdaptOptions, RunDatasets};
use std::time::Instant;

fn main() {
    let spec = SyntheticSpec::default();
    let bench = generate_benchmark(&spec).unwrap();
    let datasets = RunDatasets {
        source_train: bench.source_train.clone(),
        target_train: bench.target_train.clone(),
        target_query: Some(bench.target_query.clone()),
        target_gallery: Some(bench.target_gallery.clone()),
    };
    let hp = HyperParams::desk_scale();
    for seed in [0u64, 1, 2] {
        let cfg = TrainConfig { seed, eval_every: 0, ..TrainConfig::desk_scale() };
        let t0 = Instant::now();
        let (_state, report) = run(
            &EncoderConfig::conv_teacher((32, 16)),
            &EncoderConfig::attention_student((32, 16)),
            &datasets, &cfg, &hp, &AdaptOptions::default(), None,
        ).unwrap();
        let dt = report.direct_transfer.unwrap();
        let ad = report.adapted.unwrap();
        println!(
            "seed {seed}: direct mAP {:.3} r1 {:.3} | daml mAP {:.3} r1 {:.3} | K {:?} ({:.0}s)",
            dt.map, dt.rank1, ad.map, ad.rank1,
            report.epochs.iter().map(|e| e.clusters).collect::<Vec<_>>(),
            t0.elapsed().as_secs_f64()
        );
    }
}
