//! Method and training hyperparameters with their documented defaults.

use serde::{Deserialize, Serialize};

use crate::data::AugmentPolicy;
use crate::error::{Error, Result};

/// Method hyperparameters.
///
/// Defaults: alpha 0.5, (lambda1, lambda2, lambda3) = (0.1, 0.7, 1.2),
/// triplet margin rho 1.2, DBSCAN eps 0.6 with min_samples 4 (use 2 for
/// datasets with very few images per identity), PK batch shape 16x4.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HyperParams {
    /// Neighbor gate: cosine-distance threshold applied in both subspaces.
    pub alpha: f64,
    /// Weight of the teacher's source-domain identity terms.
    pub lambda1: f64,
    /// Weight of the teacher-to-student identity distillation term.
    pub lambda2: f64,
    /// Weight of the student-to-teacher domain distillation term.
    pub lambda3: f64,
    /// Triplet margin.
    pub rho: f64,
    /// DBSCAN neighborhood radius on the joint distance matrix.
    pub eps: f64,
    /// DBSCAN core-point threshold (neighborhood size, self included).
    pub min_samples: usize,
    /// Identities per batch.
    pub p: usize,
    /// Samples per identity per batch.
    pub k_per_id: usize,
    /// Softmax temperature of both distillation terms.
    pub temperature: f64,
    /// L2-normalize each subspace before concatenating for the joint
    /// distance (off reproduces the plain concatenation).
    pub normalize_subspaces: bool,
    /// Augmented copies averaged into each clustering feature (0 disables).
    pub cluster_repeat: usize,
    /// Use random erase in the clustering-time augmentation.
    pub cluster_erase: bool,
    /// Use pad-and-random-crop in the clustering-time augmentation.
    pub cluster_crop: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            lambda1: 0.1,
            lambda2: 0.7,
            lambda3: 1.2,
            rho: 1.2,
            eps: 0.6,
            min_samples: 4,
            p: 16,
            k_per_id: 4,
            temperature: 1.0,
            normalize_subspaces: false,
            cluster_repeat: 0,
            cluster_erase: true,
            cluster_crop: false,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            (self.alpha, "alpha"),
            (self.rho, "rho"),
            (self.eps, "eps"),
            (self.temperature, "temperature"),
        ];
        for (v, name) in positive {
            if !(v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        for (v, name) in [
            (self.lambda1, "lambda1"),
            (self.lambda2, "lambda2"),
            (self.lambda3, "lambda3"),
        ] {
            if v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.min_samples == 0 || self.p == 0 || self.k_per_id == 0 {
            return Err(Error::InvalidConfig(
                "min_samples, p and k_per_id must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Values tuned for the synthetic desk-scale benchmark. Miniature
    /// from-scratch encoders spread identities over much smaller cosine
    /// distances than full-scale pretrained backbones, so the neighbor gate
    /// and DBSCAN radius shrink accordingly, and the batch uses fewer
    /// identities than clusters typically found so no epoch is skipped.
    pub fn desk_scale() -> Self {
        Self {
            alpha: 0.06,
            eps: 0.045,
            min_samples: 4,
            p: 8,
            k_per_id: 4,
            ..Self::default()
        }
    }

    /// Augmentation used when extracting clustering features.
    pub fn cluster_policy(&self, image_size: (usize, usize)) -> AugmentPolicy {
        AugmentPolicy {
            flip_prob: 0.0,
            erase_prob: if self.cluster_erase { 1.0 } else { 0.0 },
            crop_enabled: self.cluster_crop,
            crop_pad: 2,
            image_size,
        }
    }
}

/// Optimization schedule configuration for both stages.
///
/// The teacher uses SGD (momentum 0.9, weight decay 5e-4) with step decay;
/// the student uses SGD (momentum 0.9, weight decay 1e-4) with cosine decay.
/// Adaptation runs at half the pretraining learning rates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub adapt_epochs: usize,
    pub lr_teacher_pretrain: f64,
    pub lr_student_pretrain: f64,
    pub lr_teacher_adapt: f64,
    pub lr_student_adapt: f64,
    /// Epochs at which the teacher's pretraining rate is multiplied by
    /// `lr_decay_factor`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Pretraining epochs over which the triplet weight ramps from 0 to 1.
    /// From-scratch encoders collapse under batch-hard triplet pressure
    /// before the classifier separates the identities; 0 disables the ramp.
    pub triplet_warmup_epochs: usize,
    /// Learning-rate multiplier of the source classifier during
    /// pretraining. A fast classifier gives the encoder a strong
    /// identity-separating gradient from the first steps.
    pub pretrain_classifier_lr_mult: f64,
    /// Epochs of linear learning-rate warmup at the start of the student's
    /// cosine schedule (0 disables).
    pub lr_warmup_epochs: usize,
    /// Global gradient-norm clip per network and step (0 disables).
    pub grad_clip: f64,
    /// Learning-rate multiplier of the target classifier blocks during
    /// adaptation, so they re-converge quickly after each epoch's update.
    pub adapt_classifier_lr_mult: f64,
    pub momentum: f64,
    pub weight_decay_teacher: f64,
    pub weight_decay_student: f64,
    pub seed: u64,
    /// Evaluate the student every this many adaptation epochs (0 = only at
    /// the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl TrainConfig {
    /// Full-scale schedule: 120 pretraining epochs with decay at 40/70,
    /// 60 adaptation epochs, published learning rates.
    pub fn paper_scale() -> Self {
        Self {
            pretrain_epochs: 120,
            adapt_epochs: 60,
            lr_teacher_pretrain: 1e-2,
            lr_student_pretrain: 8e-3,
            lr_teacher_adapt: 5e-3,
            lr_student_adapt: 4e-3,
            lr_milestones: vec![40, 70],
            lr_decay_factor: 0.1,
            triplet_warmup_epochs: 0,
            pretrain_classifier_lr_mult: 1.0,
            lr_warmup_epochs: 0,
            grad_clip: 0.0,
            adapt_classifier_lr_mult: 1.0,
            momentum: 0.9,
            weight_decay_teacher: 5e-4,
            weight_decay_student: 1e-4,
            seed: 0,
            eval_every: 10,
        }
    }

    /// Laptop-friendly schedule. The miniature encoders train from scratch,
    /// so the rates are higher than the full-scale ones (which assume
    /// pretrained backbones), the decay milestones sit late enough to leave
    /// a long high-rate phase, and the triplet term warms up while the
    /// classifier learns to separate the identities.
    pub fn desk_scale() -> Self {
        Self {
            pretrain_epochs: 15,
            adapt_epochs: 10,
            lr_teacher_pretrain: 1e-1,
            lr_student_pretrain: 6e-2,
            lr_teacher_adapt: 5e-2,
            lr_student_adapt: 3e-2,
            lr_milestones: vec![10, 13],
            triplet_warmup_epochs: 5,
            pretrain_classifier_lr_mult: 10.0,
            lr_warmup_epochs: 3,
            grad_clip: 1.0,
            adapt_classifier_lr_mult: 10.0,
            eval_every: 5,
            ..Self::paper_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (v, name) in [
            (self.lr_teacher_pretrain, "lr_teacher_pretrain"),
            (self.lr_student_pretrain, "lr_student_pretrain"),
            (self.lr_teacher_adapt, "lr_teacher_adapt"),
            (self.lr_student_adapt, "lr_student_adapt"),
            (self.lr_decay_factor, "lr_decay_factor"),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.pretrain_epochs == 0 || self.adapt_epochs == 0 {
            return Err(Error::InvalidConfig("epoch counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must be in [0,1)".into()));
        }
        Ok(())
    }

    /// Teacher pretraining rate: step decay at the milestones.
    pub fn teacher_pretrain_lr(&self, epoch: usize) -> f64 {
        let hits = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr_teacher_pretrain * self.lr_decay_factor.powi(hits as i32)
    }

    /// Student pretraining rate: cosine decay over the pretraining epochs,
    /// with an optional linear warmup at the start.
    pub fn student_pretrain_lr(&self, epoch: usize) -> f64 {
        let t = epoch as f64 / self.pretrain_epochs as f64;
        let cosine = 0.5 * self.lr_student_pretrain * (1.0 + (std::f64::consts::PI * t).cos());
        if epoch < self.lr_warmup_epochs {
            cosine * (epoch + 1) as f64 / self.lr_warmup_epochs as f64
        } else {
            cosine
        }
    }

    /// Triplet weight during pretraining: 0 at epoch 0, ramping linearly to
    /// 1 at the end of the warmup.
    pub fn triplet_weight(&self, epoch: usize) -> f64 {
        if self.triplet_warmup_epochs == 0 {
            1.0
        } else {
            (epoch as f64 / self.triplet_warmup_epochs as f64).min(1.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_values() {
        let hp = HyperParams::default();
        assert_eq!(hp.alpha, 0.5);
        assert_eq!((hp.lambda1, hp.lambda2, hp.lambda3), (0.1, 0.7, 1.2));
        assert_eq!(hp.rho, 1.2);
        assert_eq!(hp.eps, 0.6);
        assert_eq!((hp.p, hp.k_per_id), (16, 4));
        hp.validate().unwrap();
    }

    #[test]
    fn teacher_step_decay_at_milestones() {
        let cfg = TrainConfig::paper_scale();
        assert!((cfg.teacher_pretrain_lr(0) - 1e-2).abs() < 1e-15);
        assert!((cfg.teacher_pretrain_lr(39) - 1e-2).abs() < 1e-15);
        assert!((cfg.teacher_pretrain_lr(40) - 1e-3).abs() < 1e-15);
        assert!((cfg.teacher_pretrain_lr(69) - 1e-3).abs() < 1e-15);
        assert!((cfg.teacher_pretrain_lr(70) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn student_cosine_decay_endpoints() {
        let cfg = TrainConfig::paper_scale();
        assert!((cfg.student_pretrain_lr(0) - 8e-3).abs() < 1e-15);
        let last = cfg.student_pretrain_lr(cfg.pretrain_epochs - 1);
        assert!(last > 0.0 && last < 1e-4);
    }

    #[test]
    fn adapt_rates_are_half_the_pretrain_rates() {
        let cfg = TrainConfig::paper_scale();
        assert!((cfg.lr_teacher_adapt - cfg.lr_teacher_pretrain / 2.0).abs() < 1e-15);
        assert!((cfg.lr_student_adapt - cfg.lr_student_pretrain / 2.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_values() {
        let mut hp = HyperParams::default();
        hp.alpha = 0.0;
        assert!(hp.validate().is_err());
        let mut cfg = TrainConfig::desk_scale();
        cfg.pretrain_epochs = 0;
        assert!(cfg.validate().is_err());
    }
}
