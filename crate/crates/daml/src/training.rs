//! Orchestration: supervised source pretraining of both encoders, the
//! per-epoch adaptation loop (cluster, smooth classifier update, batched
//! optimization of the weighted objective), and the end-to-end driver.
//!
//! Every stochastic draw comes from a generator derived from
//! (seed, stage, epoch, stream), so resuming from an epoch-boundary
//! checkpoint reproduces the uninterrupted trajectory exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ArrD, Grads, Tape, Var};
use crate::checkpoint;
use crate::classifiers::{Block, ClassifierState};
use crate::config::{HyperParams, TrainConfig};
use crate::data::{augment, AugmentPolicy, ClassAssignment, Dataset, Image};
use crate::encoders::{validate_pair, Encoder, EncoderConfig, Mode};
use crate::error::{Error, Result};
use crate::evaluation::{cmc_map, cluster_quality, EvalOptions, RetrievalMeta, RetrievalResult};
use crate::losses::{
    ce_loss, kl_distill_dom, kl_distill_id, total_loss, triplet_loss, LossReport, LossTerms,
};
use crate::nn::SgdConfig;
use crate::pseudo_labels::{clustering_features, generate_pseudo_labels, PseudoLabelState};

/// Which network is being optimized; selects schedule and weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

/// Stage tags for RNG stream derivation.
mod stage {
    pub const PRETRAIN_TEACHER: u64 = 1;
    pub const PRETRAIN_STUDENT: u64 = 2;
    pub const ADAPT: u64 = 3;
}

/// Deterministic per-(stage, epoch, stream) generator.
pub fn stream_rng(seed: u64, stage: u64, epoch: u64, stream: u64) -> ChaCha8Rng {
    let mut state = seed ^ 0x6a09_e667_f3bc_c908;
    for w in [stage, epoch, stream] {
        state ^= w.wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_mul(0xbf58_476d_1ce4_e5b9);
        state ^= state >> 29;
        state = state.wrapping_mul(0x94d0_49bb_1331_11eb);
    }
    let mut key = [0u8; 32];
    for chunk in 0..4 {
        state ^= state >> 33;
        state = state.wrapping_mul(0xff51_afd7_ed55_8ccd);
        key[chunk * 8..(chunk + 1) * 8].copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Term toggles for the ablation arms. Everything on is the full method.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdaptOptions {
    /// Teacher's source-domain cross-entropy and triplet (the lambda1 group).
    pub use_source_terms: bool,
    /// Teacher-to-student identity distillation (lambda2).
    pub use_distill_id: bool,
    /// Student-to-teacher domain distillation (lambda3).
    pub use_distill_dom: bool,
    /// Smooth classifier update; off replaces target blocks with the
    /// new centers every epoch.
    pub use_scu: bool,
}

impl Default for AdaptOptions {
    fn default() -> Self {
        Self {
            use_source_terms: true,
            use_distill_id: true,
            use_distill_dom: true,
            use_scu: true,
        }
    }
}

impl AdaptOptions {
    pub fn without_source_terms() -> Self {
        Self {
            use_source_terms: false,
            ..Self::default()
        }
    }

    pub fn without_distill_id() -> Self {
        Self {
            use_distill_id: false,
            ..Self::default()
        }
    }

    pub fn without_distill_dom() -> Self {
        Self {
            use_distill_dom: false,
            ..Self::default()
        }
    }

    pub fn without_scu() -> Self {
        Self {
            use_scu: false,
            ..Self::default()
        }
    }
}

/// Metrics recorded at an adaptation epoch boundary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub skipped: bool,
    pub clusters: usize,
    pub outliers: usize,
    pub mean_total_loss: Option<f64>,
    pub map: Option<f64>,
    pub rank1: Option<f64>,
}

/// Mutable state of one adaptation run.
pub struct RunState {
    pub teacher: Encoder,
    pub student: Encoder,
    pub classifiers: ClassifierState,
    pub pseudo: Option<PseudoLabelState>,
    /// Completed adaptation epochs.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
}

/// Result of supervised pretraining of one encoder.
pub struct PretrainOutcome {
    /// Classifier over the source identities, trained jointly.
    pub classifier: Block,
    /// Top-1 accuracy on the (unaugmented) training images.
    pub train_top1: f64,
}

fn sgd_for(role: Role, lr: f64, cfg: &TrainConfig) -> SgdConfig {
    SgdConfig {
        lr,
        momentum: cfg.momentum,
        weight_decay: match role {
            Role::Teacher => cfg.weight_decay_teacher,
            Role::Student => cfg.weight_decay_student,
        },
        grad_clip: cfg.grad_clip,
    }
}

fn load_batch(
    ds: &Dataset,
    indices: &[usize],
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Image>> {
    indices
        .iter()
        .map(|&i| Ok(augment(&ds.load_image(i, policy.image_size)?, policy, rng)))
        .collect()
}

/// Supervised pretraining with cross-entropy plus triplet on PK batches.
/// The teacher follows step decay, the student cosine decay.
pub fn pretrain(
    encoder: &mut Encoder,
    role: Role,
    source: &Dataset,
    cfg: &TrainConfig,
    hp: &HyperParams,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    hp.validate()?;
    let assignment = source.ground_truth_assignment();
    if assignment.num_classes < 2 {
        return Err(Error::InvalidConfig(
            "pretraining needs at least two labeled identities".into(),
        ));
    }
    let input_size = encoder.config.input_size;
    let policy = AugmentPolicy::training_default(input_size);
    // classifier rows start at small random values
    let mut init_rng = stream_rng(cfg.seed, stage_of(role), u64::MAX, 0);
    let mut classifier = Block::new(
        crate::nn::uniform(
            &mut init_rng,
            &[assignment.num_classes, encoder.config.feature_dim],
            -0.05,
            0.05,
        )
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap(),
    );

    let steps = assignment
        .labeled_count()
        .div_ceil(hp.p * hp.k_per_id)
        .max(1);
    encoder.set_mode(Mode::Train);
    for epoch in 0..cfg.pretrain_epochs {
        let lr = match role {
            Role::Teacher => cfg.teacher_pretrain_lr(epoch),
            Role::Student => cfg.student_pretrain_lr(epoch),
        };
        let opt = sgd_for(role, lr, cfg);
        let cls_opt = sgd_for(role, lr * cfg.pretrain_classifier_lr_mult, cfg);
        let tri_weight = cfg.triplet_weight(epoch);
        let mut rng_batch = stream_rng(cfg.seed, stage_of(role), epoch as u64, 0);
        let mut rng_aug = stream_rng(cfg.seed, stage_of(role), epoch as u64, 1);
        for _ in 0..steps {
            let idx = crate::data::pk_sample(&assignment, hp.p, hp.k_per_id, &mut rng_batch)?;
            let labels: Vec<usize> = idx.iter().map(|&i| assignment.labels[i].unwrap()).collect();
            let images = load_batch(source, &idx, &policy, &mut rng_aug)?;
            let batch = encoder.batch_tensor(&images)?;

            let tape = Tape::new();
            let leaves = encoder.params.leaves(&tape);
            let cls_leaf = tape.leaf(classifier.weight.clone().into_dyn());
            let feats = encoder.forward(&leaves, &tape.constant(batch));
            let logits = feats.matmul(&cls_leaf.transpose2());
            let mut loss = ce_loss(&logits, &labels)?;
            if tri_weight > 0.0 {
                loss = loss.add(&triplet_loss(&feats, &labels, hp.rho)?.mul_scalar(tri_weight));
            }
            let grads = tape.backward(&loss)?;
            encoder.params.sgd_step(&leaves, &grads, &opt);
            apply_block_grad(&mut classifier, &grads, &cls_leaf, &cls_opt);
        }
    }
    encoder.set_mode(Mode::Eval);

    // top-1 training accuracy on clean images
    let feats = features_of(encoder, source)?;
    let logits = feats.dot(&classifier.weight.t());
    let mut correct = 0usize;
    let mut counted = 0usize;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let Some(label) = assignment.labels[i] else { continue };
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        counted += 1;
        if pred == label {
            correct += 1;
        }
    }
    Ok(PretrainOutcome {
        classifier,
        train_top1: correct as f64 / counted.max(1) as f64,
    })
}

fn stage_of(role: Role) -> u64 {
    match role {
        Role::Teacher => stage::PRETRAIN_TEACHER,
        Role::Student => stage::PRETRAIN_STUDENT,
    }
}

fn apply_block_grad(block: &mut Block, grads: &Grads, leaf: &Var, opt: &SgdConfig) {
    if let Some(g) = grads.get(leaf) {
        let g2 = g
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("classifier grad is 2-D")
            .to_owned();
        block.sgd_step(&g2, opt);
    }
}

/// Clean eval-mode features of every sample.
pub fn features_of(encoder: &Encoder, ds: &Dataset) -> Result<Array2<f64>> {
    let size = encoder.config.input_size;
    let images: Vec<Image> = (0..ds.len())
        .map(|i| ds.load_image(i, size))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Array2::zeros((ds.len(), encoder.config.feature_dim));
    for (start, chunk) in images.chunks(64).enumerate().map(|(c, ch)| (c * 64, ch)) {
        let feats = encoder.extract_features(chunk)?;
        out.slice_mut(ndarray::s![start..start + chunk.len(), ..])
            .assign(&feats);
    }
    Ok(out)
}

/// Retrieval metrics of an encoder over a query/gallery pair.
pub fn evaluate_encoder(
    encoder: &Encoder,
    query: &Dataset,
    gallery: &Dataset,
    options: &EvalOptions,
) -> Result<RetrievalResult> {
    let qf = features_of(encoder, query)?;
    let gf = features_of(encoder, gallery)?;
    cmc_map(
        &qf,
        &gf,
        &RetrievalMeta::from_dataset(query),
        &RetrievalMeta::from_dataset(gallery),
        options,
    )
}

/// Outcome of one adaptation epoch.
pub struct EpochOutcome {
    pub skipped: Option<String>,
    pub clusters: usize,
    pub outliers: usize,
    pub reports: Vec<LossReport>,
}

/// One adaptation epoch: extract clustering features with both encoders,
/// generate pseudo labels in the joint subspace, refresh the target
/// classifiers, then optimize the full objective over paired source/target
/// PK batches.
pub fn adapt_epoch(
    state: &mut RunState,
    source: &Dataset,
    target: &Dataset,
    cfg: &TrainConfig,
    hp: &HyperParams,
    options: &AdaptOptions,
) -> Result<EpochOutcome> {
    let epoch = state.epoch;
    let input_size = state.teacher.config.input_size;
    let cluster_policy = hp.cluster_policy(input_size);

    // (1) clustering features from both subspaces
    let mut rng_cluster = stream_rng(cfg.seed, stage::ADAPT, epoch as u64, 0);
    state.teacher.set_mode(Mode::Eval);
    state.student.set_mode(Mode::Eval);
    let feats_t = clustering_features(
        &state.teacher,
        target,
        &cluster_policy,
        hp.cluster_repeat,
        &mut rng_cluster,
    )?;
    let feats_s = clustering_features(
        &state.student,
        target,
        &cluster_policy,
        hp.cluster_repeat,
        &mut rng_cluster,
    )?;

    // (2) joint-subspace pseudo labels
    let pseudo = generate_pseudo_labels(&feats_t, &feats_s, hp)?;
    let clusters = pseudo.labels.k;
    let outliers = pseudo.labels.outlier_count();
    if clusters == 0 {
        state.epoch += 1;
        state.pseudo = Some(pseudo);
        return Ok(EpochOutcome {
            skipped: Some("no clusters found".into()),
            clusters,
            outliers,
            reports: Vec::new(),
        });
    }

    // (3) smooth classifier update (or plain replacement without SCU)
    state.classifiers.update_for_epoch(
        &pseudo.centers_teacher,
        &pseudo.centers_student,
        options.use_scu,
    )?;

    if clusters < hp.p {
        state.epoch += 1;
        state.pseudo = Some(pseudo);
        return Ok(EpochOutcome {
            skipped: Some(format!(
                "only {clusters} clusters, need {} for a PK batch",
                hp.p
            )),
            clusters,
            outliers,
            reports: Vec::new(),
        });
    }

    // (4) batched optimization
    let target_assignment = ClassAssignment::new(pseudo.labels.labels.clone(), clusters);
    let source_assignment = source.ground_truth_assignment();
    let num_source_classes = source_assignment.num_classes;
    let steps = target_assignment
        .labeled_count()
        .div_ceil(hp.p * hp.k_per_id)
        .max(1);
    let policy = AugmentPolicy::training_default(input_size);
    let opt_teacher = sgd_for(Role::Teacher, cfg.lr_teacher_adapt, cfg);
    let opt_student = sgd_for(Role::Student, cfg.lr_student_adapt, cfg);
    let mult = cfg.adapt_classifier_lr_mult;
    let opt_teacher_cls = sgd_for(Role::Teacher, cfg.lr_teacher_adapt * mult, cfg);
    let opt_student_cls = sgd_for(Role::Student, cfg.lr_student_adapt * mult, cfg);
    let need_source = options.use_source_terms || options.use_distill_dom;

    let mut rng_batch = stream_rng(cfg.seed, stage::ADAPT, epoch as u64, 1);
    let mut rng_aug = stream_rng(cfg.seed, stage::ADAPT, epoch as u64, 2);
    let mut reports = Vec::with_capacity(steps);

    state.teacher.set_mode(Mode::Train);
    state.student.set_mode(Mode::Train);
    for _ in 0..steps {
        let tgt_idx = crate::data::pk_sample(&target_assignment, hp.p, hp.k_per_id, &mut rng_batch)?;
        let tgt_labels: Vec<usize> = tgt_idx
            .iter()
            .map(|&i| target_assignment.labels[i].unwrap())
            .collect();
        let tgt_images = load_batch(target, &tgt_idx, &policy, &mut rng_aug)?;

        let src = if need_source {
            let src_idx =
                crate::data::pk_sample(&source_assignment, hp.p, hp.k_per_id, &mut rng_batch)?;
            let src_labels: Vec<usize> = src_idx
                .iter()
                .map(|&i| source_assignment.labels[i].unwrap())
                .collect();
            let src_images = load_batch(source, &src_idx, &policy, &mut rng_aug)?;
            Some((src_labels, src_images))
        } else {
            None
        };

        let tape = Tape::new();
        let leaves_t = state.teacher.params.leaves(&tape);
        let leaves_s = state.student.params.leaves(&tape);
        let w_source = tape.leaf(state.classifiers.source_teacher.weight.clone().into_dyn());
        let w_target_t = tape.leaf(
            state
                .classifiers
                .target_teacher
                .as_ref()
                .expect("target blocks exist after the epoch update")
                .weight
                .clone()
                .into_dyn(),
        );
        let w_target_s = tape.leaf(
            state
                .classifiers
                .target_student
                .as_ref()
                .expect("target blocks exist after the epoch update")
                .weight
                .clone()
                .into_dyn(),
        );
        let w_joint = Var::concat(0, &[w_source.clone(), w_target_t.clone()]);

        // target batch through both encoders
        let tgt_batch = state.teacher.batch_tensor(&tgt_images)?;
        let t_feat_t = state
            .teacher
            .forward(&leaves_t, &tape.constant(tgt_batch.clone()));
        let t_feat_s = state.student.forward(&leaves_s, &tape.constant(tgt_batch));

        // teacher classifies target samples over [source | target] classes
        let shifted: Vec<usize> = tgt_labels.iter().map(|&l| l + num_source_classes).collect();
        let teacher_target_ce = ce_loss(&t_feat_t.matmul(&w_joint.transpose2()), &shifted)?;
        let triplet_teacher_target = triplet_loss(&t_feat_t, &tgt_labels, hp.rho)?;
        let student_logits_target = t_feat_s.matmul(&w_target_s.transpose2());
        let student_target_ce = ce_loss(&student_logits_target, &tgt_labels)?;
        let triplet_student_target = triplet_loss(&t_feat_s, &tgt_labels, hp.rho)?;

        let distill_id = options.use_distill_id.then(|| {
            let teacher_logits_target = t_feat_t.matmul(&w_target_t.transpose2());
            kl_distill_id(&teacher_logits_target, &student_logits_target, hp.temperature)
        });
        let distill_id = distill_id.transpose()?;

        // source batch terms
        let mut teacher_source = None;
        let mut distill_dom = None;
        if let Some((src_labels, src_images)) = &src {
            let src_batch = state.teacher.batch_tensor(src_images)?;
            let s_feat_t = state
                .teacher
                .forward(&leaves_t, &tape.constant(src_batch.clone()));
            if options.use_source_terms {
                let ce = ce_loss(&s_feat_t.matmul(&w_joint.transpose2()), src_labels)?;
                let tri = triplet_loss(&s_feat_t, src_labels, hp.rho)?;
                teacher_source = Some((ce, tri));
            }
            if options.use_distill_dom {
                let s_feat_s = state.student.forward(&leaves_s, &tape.constant(src_batch));
                let student_logits_source = s_feat_s.matmul(&w_target_s.transpose2());
                let teacher_logits_source = s_feat_t.matmul(&w_target_t.transpose2());
                distill_dom = Some(kl_distill_dom(
                    &student_logits_source,
                    &teacher_logits_source,
                    hp.temperature,
                )?);
            }
        }

        let terms = LossTerms {
            teacher_target_ce,
            triplet_teacher_target,
            student_target_ce,
            triplet_student_target,
            teacher_source,
            distill_id,
            distill_dom,
        };
        let (total, report) = total_loss(&terms, hp);
        let grads = tape.backward(&total)?;

        state.teacher.params.sgd_step(&leaves_t, &grads, &opt_teacher);
        state.student.params.sgd_step(&leaves_s, &grads, &opt_student);
        apply_block_grad(
            &mut state.classifiers.source_teacher,
            &grads,
            &w_source,
            &opt_teacher,
        );
        apply_block_grad(
            state.classifiers.target_teacher.as_mut().unwrap(),
            &grads,
            &w_target_t,
            &opt_teacher_cls,
        );
        apply_block_grad(
            state.classifiers.target_student.as_mut().unwrap(),
            &grads,
            &w_target_s,
            &opt_student_cls,
        );
        reports.push(report);
    }

    state.epoch += 1;
    state.pseudo = Some(pseudo);
    Ok(EpochOutcome {
        skipped: None,
        clusters,
        outliers,
        reports,
    })
}

/// Datasets of one run. Query/gallery are optional; without them the run
/// trains but reports no retrieval metrics.
#[derive(Debug, Clone)]
pub struct RunDatasets {
    pub source_train: Dataset,
    pub target_train: Dataset,
    pub target_query: Option<Dataset>,
    pub target_gallery: Option<Dataset>,
}

/// Everything a finished run reports.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    /// Student retrieval metrics before adaptation.
    pub direct_transfer: Option<MetricsSnapshot>,
    /// Student retrieval metrics after the final epoch.
    pub adapted: Option<MetricsSnapshot>,
    pub teacher_pretrain_top1: f64,
    pub student_pretrain_top1: f64,
    pub epochs: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsSnapshot {
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
}

impl MetricsSnapshot {
    pub fn from_result(r: &RetrievalResult) -> Self {
        Self {
            map: r.map,
            rank1: r.rank(1),
            rank5: r.rank(5),
            rank10: r.rank(10),
        }
    }
}

/// Filesystem layout of a run directory.
pub struct RunArtifacts {
    pub dir: PathBuf,
}

impl RunArtifacts {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    fn checkpoint_path(&self, epoch: usize) -> (PathBuf, PathBuf) {
        let base = self.dir.join("checkpoints");
        (
            base.join(format!("epoch{epoch:04}.bin")),
            base.join(format!("epoch{epoch:04}.json")),
        )
    }
}

/// Sidecar metadata stored next to the tensor blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub teacher_config: EncoderConfig,
    pub student_config: EncoderConfig,
    pub train_config: TrainConfig,
    pub hyper_params: HyperParams,
    pub epoch: usize,
    pub k: usize,
    pub k_prev: usize,
    pub history: Vec<EpochMetrics>,
}

/// Save the full run state (both encoders, classifier blocks, momenta).
pub fn save_run_state(
    state: &RunState,
    cfg: &TrainConfig,
    hp: &HyperParams,
    blob_path: &Path,
    meta_path: &Path,
) -> Result<()> {
    let mut tensors: BTreeMap<String, ArrD> = BTreeMap::new();
    let mut put_store = |prefix: &str, store: &crate::nn::ParamStore| {
        for entry in store.entries() {
            tensors.insert(format!("{prefix}.{}.value", entry.name), entry.value.clone());
            tensors.insert(
                format!("{prefix}.{}.momentum", entry.name),
                entry.momentum.clone(),
            );
        }
    };
    put_store("teacher", &state.teacher.params);
    put_store("student", &state.student.params);
    let mut put_block = |name: &str, block: &Block| {
        tensors.insert(format!("{name}.weight"), block.weight.clone().into_dyn());
        tensors.insert(format!("{name}.momentum"), block.momentum.clone().into_dyn());
    };
    put_block("classifier.source_teacher", &state.classifiers.source_teacher);
    if let Some(b) = &state.classifiers.target_teacher {
        put_block("classifier.target_teacher", b);
    }
    if let Some(b) = &state.classifiers.target_student {
        put_block("classifier.target_student", b);
    }
    checkpoint::write_tensors(blob_path, &tensors)?;

    let meta = CheckpointMeta {
        teacher_config: state.teacher.config.clone(),
        student_config: state.student.config.clone(),
        train_config: cfg.clone(),
        hyper_params: hp.clone(),
        epoch: state.epoch,
        k: state.classifiers.k,
        k_prev: state.classifiers.k_prev,
        history: state.history.clone(),
    };
    std::fs::write(meta_path, serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Restore a run state saved by [`save_run_state`].
pub fn load_run_state(blob_path: &Path, meta_path: &Path) -> Result<(RunState, CheckpointMeta)> {
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(meta_path)?)?;
    let tensors = checkpoint::read_tensors(blob_path)?;
    let missing = |name: &str| Error::InvalidState(format!("checkpoint missing tensor {name}"));

    let mut teacher = Encoder::new(meta.teacher_config.clone(), 0)?;
    let mut student = Encoder::new(meta.student_config.clone(), 0)?;
    for (prefix, encoder) in [("teacher", &mut teacher), ("student", &mut student)] {
        for entry in encoder.params.entries_mut() {
            let value = tensors
                .get(&format!("{prefix}.{}.value", entry.name))
                .ok_or_else(|| missing(&entry.name))?;
            let momentum = tensors
                .get(&format!("{prefix}.{}.momentum", entry.name))
                .ok_or_else(|| missing(&entry.name))?;
            if value.shape() != entry.value.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "checkpoint tensor {} has shape {:?}, expected {:?}",
                    entry.name,
                    value.shape(),
                    entry.value.shape()
                )));
            }
            entry.value = value.clone();
            entry.momentum = momentum.clone();
        }
        encoder.set_mode(Mode::Eval);
    }

    let get_block = |name: &str| -> Result<Option<Block>> {
        let (Some(w), Some(m)) = (
            tensors.get(&format!("{name}.weight")),
            tensors.get(&format!("{name}.momentum")),
        ) else {
            return Ok(None);
        };
        let weight = w
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| Error::InvalidState(format!("{name} is not 2-D")))?
            .to_owned();
        let momentum = m
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| Error::InvalidState(format!("{name} is not 2-D")))?
            .to_owned();
        Ok(Some(Block { weight, momentum }))
    };
    let source_teacher = get_block("classifier.source_teacher")?
        .ok_or_else(|| missing("classifier.source_teacher"))?;
    let mut classifiers = ClassifierState::new(source_teacher);
    classifiers.target_teacher = get_block("classifier.target_teacher")?;
    classifiers.target_student = get_block("classifier.target_student")?;
    classifiers.k = meta.k;
    classifiers.k_prev = meta.k_prev;

    let state = RunState {
        teacher,
        student,
        classifiers,
        pseudo: None,
        epoch: meta.epoch,
        history: meta.history.clone(),
    };
    Ok((state, meta))
}

/// End-to-end driver: pretrain both encoders on the source split, measure
/// direct transfer, adapt for the configured number of epochs, and evaluate
/// the student (only the student's features are ever used for retrieval).
#[allow(clippy::too_many_arguments)]
pub fn run(
    teacher_config: &EncoderConfig,
    student_config: &EncoderConfig,
    datasets: &RunDatasets,
    cfg: &TrainConfig,
    hp: &HyperParams,
    options: &AdaptOptions,
    artifacts: Option<&RunArtifacts>,
) -> Result<(RunState, RunReport)> {
    validate_pair(teacher_config, student_config)?;
    cfg.validate()?;
    hp.validate()?;
    let input_size = teacher_config.input_size;

    let source = datasets.source_train.materialize(input_size)?;
    let target = datasets.target_train.materialize(input_size)?;
    let eval_pair = match (&datasets.target_query, &datasets.target_gallery) {
        (Some(q), Some(g)) => Some((q.materialize(input_size)?, g.materialize(input_size)?)),
        _ => None,
    };

    let mut teacher = Encoder::new(
        teacher_config.clone(),
        cfg.seed.wrapping_mul(2).wrapping_add(1),
    )?;
    let mut student = Encoder::new(
        student_config.clone(),
        cfg.seed.wrapping_mul(2).wrapping_add(2),
    )?;

    let teacher_out = pretrain(&mut teacher, Role::Teacher, &source, cfg, hp)?;
    let student_out = pretrain(&mut student, Role::Student, &source, cfg, hp)?;

    let eval_options = EvalOptions::default();
    let direct_transfer = eval_pair
        .as_ref()
        .map(|(q, g)| -> Result<MetricsSnapshot> {
            Ok(MetricsSnapshot::from_result(&evaluate_encoder(
                &student,
                q,
                g,
                &eval_options,
            )?))
        })
        .transpose()?;

    let mut state = RunState {
        teacher,
        student,
        classifiers: ClassifierState::new(teacher_out.classifier.clone()),
        pseudo: None,
        epoch: 0,
        history: Vec::new(),
    };

    let mut log = artifacts
        .map(|a| -> Result<csv::Writer<std::fs::File>> {
            let mut w = csv::Writer::from_path(a.dir.join("training_log.csv"))?;
            let mut header = vec!["epoch".to_string(), "step".to_string()];
            header.extend(LossReport::CSV_HEADER.iter().map(|s| s.to_string()));
            w.write_record(&header)?;
            Ok(w)
        })
        .transpose()?;

    for _ in 0..cfg.adapt_epochs {
        let epoch = state.epoch;
        let outcome = adapt_epoch(&mut state, &source, &target, cfg, hp, options)?;
        if let Some(reason) = &outcome.skipped {
            eprintln!("epoch {epoch}: skipped ({reason})");
        }
        if let Some(w) = &mut log {
            for (step, report) in outcome.reports.iter().enumerate() {
                let mut row = vec![epoch.to_string(), step.to_string()];
                row.extend(report.csv_row().iter().map(|v| format!("{v:.6}")));
                w.write_record(&row)?;
            }
            w.flush()?;
        }

        let evaluate_now = eval_pair.is_some()
            && cfg.eval_every > 0
            && (state.epoch % cfg.eval_every == 0 || state.epoch == cfg.adapt_epochs);
        let snapshot = if evaluate_now {
            let (q, g) = eval_pair.as_ref().unwrap();
            Some(evaluate_encoder(&state.student, q, g, &eval_options)?)
        } else {
            None
        };
        let mean_total = (!outcome.reports.is_empty()).then(|| {
            outcome.reports.iter().map(|r| r.total).sum::<f64>() / outcome.reports.len() as f64
        });
        state.history.push(EpochMetrics {
            epoch,
            skipped: outcome.skipped.is_some(),
            clusters: outcome.clusters,
            outliers: outcome.outliers,
            mean_total_loss: mean_total,
            map: snapshot.as_ref().map(|r| r.map),
            rank1: snapshot.as_ref().map(|r| r.rank(1)),
        });
        if let Some(a) = artifacts {
            let (blob, meta) = a.checkpoint_path(state.epoch);
            save_run_state(&state, cfg, hp, &blob, &meta)?;
        }
    }

    let adapted = eval_pair
        .as_ref()
        .map(|(q, g)| -> Result<MetricsSnapshot> {
            Ok(MetricsSnapshot::from_result(&evaluate_encoder(
                &state.student,
                q,
                g,
                &eval_options,
            )?))
        })
        .transpose()?;

    let report = RunReport {
        direct_transfer,
        adapted,
        teacher_pretrain_top1: teacher_out.train_top1,
        student_pretrain_top1: student_out.train_top1,
        epochs: state.history.clone(),
    };
    if let Some(a) = artifacts {
        std::fs::write(
            a.dir.join("metrics.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
    }
    Ok((state, report))
}

/// NMI of the current pseudo labels against hidden identities, if available.
pub fn pseudo_label_quality(state: &RunState, target: &Dataset) -> Option<f64> {
    let pseudo = state.pseudo.as_ref()?;
    let truth: Vec<i32> = target.samples().iter().map(|s| s.person_id).collect();
    Some(cluster_quality(&pseudo.labels, &truth).nmi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_benchmark;
    use crate::data::SyntheticSpec;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_ids: 6,
            per_id: 4,
            domain_shift: 0.5,
            seed: 11,
            ..SyntheticSpec::default()
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            pretrain_epochs: 2,
            adapt_epochs: 2,
            lr_milestones: vec![1],
            eval_every: 0,
            seed: 3,
            ..TrainConfig::desk_scale()
        }
    }

    fn tiny_hp() -> HyperParams {
        HyperParams {
            p: 4,
            k_per_id: 2,
            min_samples: 2,
            ..HyperParams::default()
        }
    }

    #[test]
    fn stream_rng_is_stable_and_distinct() {
        use rand::Rng;
        let mut a = stream_rng(1, 2, 3, 4);
        let mut b = stream_rng(1, 2, 3, 4);
        assert_eq!(a.random::<u64>(), b.random::<u64>());
        let mut c = stream_rng(1, 2, 3, 5);
        let _ = c;
        let va: Vec<u64> = (0..4).map(|_| stream_rng(1, 2, 3, 4).random()).collect();
        assert!(va.windows(2).all(|w| w[0] == w[1]));
        assert_ne!(
            stream_rng(1, 2, 3, 4).random::<u64>(),
            stream_rng(1, 2, 4, 4).random::<u64>()
        );
    }

    #[test]
    fn pretrain_learns_the_tiny_source() {
        let bench = generate_benchmark(&tiny_spec()).unwrap();
        let source = bench.source_train.materialize((32, 16)).unwrap();
        let mut cfg = tiny_cfg();
        cfg.pretrain_epochs = 6;
        let hp = tiny_hp();
        let mut teacher =
            Encoder::new(EncoderConfig::conv_teacher((32, 16)), 1).unwrap();
        let out = pretrain(&mut teacher, Role::Teacher, &source, &cfg, &hp).unwrap();
        assert!(
            out.train_top1 > 0.5,
            "teacher should fit a 6-identity toy set, got {}",
            out.train_top1
        );
    }

    #[test]
    fn pretrain_is_deterministic() {
        let bench = generate_benchmark(&tiny_spec()).unwrap();
        let source = bench.source_train.materialize((32, 16)).unwrap();
        let cfg = tiny_cfg();
        let hp = tiny_hp();
        let run_once = || {
            let mut enc = Encoder::new(EncoderConfig::conv_teacher((32, 16)), 1).unwrap();
            pretrain(&mut enc, Role::Teacher, &source, &cfg, &hp).unwrap();
            enc.params.entries()[0].value.clone()
        };
        assert_eq!(run_once(), run_once());
    }

    #[test]
    fn adapt_epoch_shapes_and_asymmetry() {
        let bench = generate_benchmark(&tiny_spec()).unwrap();
        let source = bench.source_train.materialize((32, 16)).unwrap();
        let target = bench.target_train.materialize((32, 16)).unwrap();
        let cfg = tiny_cfg();
        let hp = tiny_hp();
        let (mut teacher, mut student) = crate::encoders::default_pair((32, 16), 5).unwrap();
        let t_out = pretrain(&mut teacher, Role::Teacher, &source, &cfg, &hp).unwrap();
        let _ = pretrain(&mut student, Role::Student, &source, &cfg, &hp).unwrap();
        let student_before: Vec<ArrD> = student
            .params
            .entries()
            .iter()
            .map(|e| e.value.clone())
            .collect();

        let mut state = RunState {
            teacher,
            student,
            classifiers: ClassifierState::new(t_out.classifier),
            pseudo: None,
            epoch: 0,
            history: Vec::new(),
        };
        let outcome = adapt_epoch(&mut state, &source, &target, &cfg, &hp, &AdaptOptions::default())
            .unwrap();
        assert_eq!(state.epoch, 1);
        if outcome.skipped.is_none() {
            let k = state.classifiers.k;
            assert!(k >= hp.p);
            assert_eq!(
                state.classifiers.target_teacher.as_ref().unwrap().classes(),
                k
            );
            assert_eq!(
                state.classifiers.target_student.as_ref().unwrap().classes(),
                k
            );
            assert!(!outcome.reports.is_empty());
            for r in &outcome.reports {
                assert!(r.total.is_finite());
                assert!(r.distill_id >= -1e-12);
                assert!(r.distill_dom >= -1e-12);
            }
            // training moved the student
            let moved = state
                .params_changed(&student_before);
            assert!(moved, "student parameters should change during adaptation");
        }
    }

    impl RunState {
        fn params_changed(&self, before: &[ArrD]) -> bool {
            self.student
                .params
                .entries()
                .iter()
                .zip(before)
                .any(|(e, b)| &e.value != b)
        }
    }

    #[test]
    fn student_gets_no_gradient_from_source_only_terms() {
        // build a step where ONLY the lambda1 source group is active and
        // check the student parameter gradients are absent
        let bench = generate_benchmark(&tiny_spec()).unwrap();
        let source = bench.source_train.materialize((32, 16)).unwrap();
        let (teacher, student) = crate::encoders::default_pair((32, 16), 7).unwrap();

        let assignment = source.ground_truth_assignment();
        let mut rng = stream_rng(0, 9, 0, 0);
        let idx = crate::data::pk_sample(&assignment, 4, 2, &mut rng).unwrap();
        let labels: Vec<usize> = idx.iter().map(|&i| assignment.labels[i].unwrap()).collect();
        let policy = AugmentPolicy::identity((32, 16));
        let images = load_batch(&source, &idx, &policy, &mut rng).unwrap();

        let tape = Tape::new();
        let leaves_t = teacher.params.leaves(&tape);
        let leaves_s = student.params.leaves(&tape);
        let batch = teacher.batch_tensor(&images).unwrap();
        let s_feat_t = teacher.forward(&leaves_t, &tape.constant(batch.clone()));
        // student forward exists on the tape but only source terms are used
        let _s_feat_s = student.forward(&leaves_s, &tape.constant(batch));
        let w = tape.leaf(
            crate::nn::uniform(&mut rng, &[assignment.num_classes, 64], -0.1, 0.1),
        );
        let loss = ce_loss(&s_feat_t.matmul(&w.transpose2()), &labels)
            .unwrap()
            .add(&triplet_loss(&s_feat_t, &labels, 1.2).unwrap());
        let grads = tape.backward(&loss).unwrap();

        for leaf in &leaves_s {
            assert!(
                grads.get(leaf).is_none(),
                "student must receive no gradient from source-only terms"
            );
        }
        assert!(leaves_t.iter().any(|l| grads.get(l).is_some()));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_state() {
        let bench = generate_benchmark(&tiny_spec()).unwrap();
        let source = bench.source_train.materialize((32, 16)).unwrap();
        let cfg = tiny_cfg();
        let hp = tiny_hp();
        let (mut teacher, student) = crate::encoders::default_pair((32, 16), 2).unwrap();
        let t_out = pretrain(&mut teacher, Role::Teacher, &source, &cfg, &hp).unwrap();
        let state = RunState {
            teacher,
            student,
            classifiers: ClassifierState::new(t_out.classifier),
            pseudo: None,
            epoch: 3,
            history: vec![EpochMetrics {
                epoch: 0,
                skipped: false,
                clusters: 5,
                outliers: 1,
                mean_total_loss: Some(2.5),
                map: None,
                rank1: None,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let blob = dir.path().join("state.bin");
        let meta = dir.path().join("state.json");
        save_run_state(&state, &cfg, &hp, &blob, &meta).unwrap();
        let (loaded, meta) = load_run_state(&blob, &meta).unwrap();
        assert_eq!(loaded.epoch, 3);
        assert_eq!(meta.epoch, 3);
        assert_eq!(loaded.history.len(), 1);
        for (a, b) in loaded
            .teacher
            .params
            .entries()
            .iter()
            .zip(state.teacher.params.entries())
        {
            assert_eq!(a.value, b.value);
            assert_eq!(a.momentum, b.momentum);
        }
        assert_eq!(
            loaded.classifiers.source_teacher.weight,
            state.classifiers.source_teacher.weight
        );
    }
}
