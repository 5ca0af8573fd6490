//! Classifier weight blocks and the smooth classifier update (SCU).
//!
//! All classifiers are bias-free linear maps: `logits = features . W^T`.
//! The teacher classifies over the concatenation of a fixed-width source
//! block and a per-epoch target block; the student carries a target block
//! only. When a new epoch changes the target class count from K_hat to K,
//! each new class row is rebuilt as the softmax-weighted convex combination
//! of the previous epoch's rows, predicted from the new class center; the
//! SGD momentum rows are carried through the same combination.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::SgdConfig;

/// One classifier weight block with its SGD momentum buffer.
#[derive(Debug, Clone)]
pub struct Block {
    pub weight: Array2<f64>,
    pub momentum: Array2<f64>,
}

impl Block {
    pub fn new(weight: Array2<f64>) -> Self {
        let momentum = Array2::zeros(weight.raw_dim());
        Self { weight, momentum }
    }

    pub fn classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weight.ncols()
    }

    /// SGD step mirroring `ParamStore::sgd_step`.
    pub fn sgd_step(&mut self, grad: &Array2<f64>, opt: &SgdConfig) {
        let mut scale = 1.0;
        if opt.grad_clip > 0.0 {
            let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > opt.grad_clip {
                scale = opt.grad_clip / norm;
            }
        }
        let step = grad * scale + &(&self.weight * opt.weight_decay);
        self.momentum = &self.momentum * opt.momentum + &step;
        self.weight = &self.weight - &(&self.momentum * opt.lr);
    }
}

/// Bias-free linear prediction: `(n, d) x (classes, d) -> (n, classes)`.
pub fn predict(features: &Array2<f64>, weights: &Array2<f64>) -> Result<Array2<f64>> {
    if features.ncols() != weights.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "feature dim {} vs classifier dim {}",
            features.ncols(),
            weights.ncols()
        )));
    }
    Ok(features.dot(&weights.t()))
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - m).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    p
}

/// Smooth classifier update: every new class row is a convex combination of
/// the previous rows, with coefficients softmax(centers . old_W^T). The
/// momentum buffer is combined with the same coefficients.
pub fn smooth_update(old: &Block, centers: &Array2<f64>) -> Result<Block> {
    if old.classes() == 0 {
        return Err(Error::NoPreviousClassifier);
    }
    let logits = predict(centers, &old.weight)?; // (K_new, K_hat)
    let coeffs = softmax_rows(&logits);
    Ok(Block {
        weight: coeffs.dot(&old.weight),
        momentum: coeffs.dot(&old.momentum),
    })
}

/// First-epoch target blocks: weights start at the cluster centers, momentum
/// zeroed.
pub fn initialize_target_blocks(
    centers_teacher: &Array2<f64>,
    centers_student: &Array2<f64>,
) -> Result<(Block, Block)> {
    if centers_teacher.nrows() == 0 || centers_student.nrows() == 0 {
        return Err(Error::InvalidState(
            "no clusters available to initialize target classifiers".into(),
        ));
    }
    if centers_teacher.nrows() != centers_student.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "center counts differ: {} vs {}",
            centers_teacher.nrows(),
            centers_student.nrows()
        )));
    }
    Ok((
        Block::new(centers_teacher.clone()),
        Block::new(centers_student.clone()),
    ))
}

/// All classifier blocks of the pair, refreshed at each epoch boundary.
#[derive(Debug, Clone)]
pub struct ClassifierState {
    /// Teacher block over the source classes; its width never changes.
    pub source_teacher: Block,
    /// Teacher block over the current target pseudo classes.
    pub target_teacher: Option<Block>,
    /// Student block over the current target pseudo classes.
    pub target_student: Option<Block>,
    /// Current target class count K.
    pub k: usize,
    /// Previous epoch's class count K_hat.
    pub k_prev: usize,
}

impl ClassifierState {
    pub fn new(source_teacher: Block) -> Self {
        Self {
            source_teacher,
            target_teacher: None,
            target_student: None,
            k: 0,
            k_prev: 0,
        }
    }

    /// Refresh the target blocks for a new epoch. Teacher-subspace centers
    /// feed the teacher block and student-subspace centers the student block
    /// (the dimensions admit nothing else). With `use_scu` the previous rows
    /// are convexly recombined; without it the centers replace the blocks
    /// outright and momentum restarts, the plain baseline behavior.
    /// The source block is never touched.
    pub fn update_for_epoch(
        &mut self,
        centers_teacher: &Array2<f64>,
        centers_student: &Array2<f64>,
        use_scu: bool,
    ) -> Result<()> {
        let (new_t, new_s) = match (&self.target_teacher, &self.target_student) {
            (Some(t), Some(s)) if use_scu => {
                (smooth_update(t, centers_teacher)?, smooth_update(s, centers_student)?)
            }
            _ => initialize_target_blocks(centers_teacher, centers_student)?,
        };
        self.k_prev = self.k;
        self.k = new_t.classes();
        self.target_teacher = Some(new_t);
        self.target_student = Some(new_s);
        Ok(())
    }
}
