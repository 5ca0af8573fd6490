//! The full training objective: batch-hard triplet, identity cross-entropies,
//! two direction-asymmetric KL distillation terms, and their weighted total.
//!
//! Both distillation terms are proper (nonnegative) KL divergences with the
//! reference distribution outside the logarithm and detached from the graph:
//! the identity term pulls the student toward the teacher on target batches,
//! the domain term pulls the teacher toward the student on source batches.
//! The detach is what makes the mutual learning asymmetric.

use crate::autodiff::Var;
use crate::config::HyperParams;
use crate::error::{Error, Result};

/// Per-term scalar values of one optimization step.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct LossReport {
    /// Teacher cross-entropy on target batches over [source | target] classes.
    pub teacher_target_ce: f64,
    /// Student cross-entropy on target batches over target classes.
    pub student_target_ce: f64,
    /// Teacher cross-entropy on source batches over [source | target] classes.
    pub teacher_source_ce: f64,
    /// Batch-hard triplet on teacher features of the target batch.
    pub triplet_teacher_target: f64,
    /// Batch-hard triplet on student features of the target batch.
    pub triplet_student_target: f64,
    /// Batch-hard triplet on teacher features of the source batch.
    pub triplet_teacher_source: f64,
    /// KL(teacher || student) on target logits; updates the student.
    pub distill_id: f64,
    /// KL(student || teacher) on source logits; updates the teacher.
    pub distill_dom: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static [&'static str] = &[
        "teacher_target_ce",
        "student_target_ce",
        "teacher_source_ce",
        "triplet_teacher_target",
        "triplet_student_target",
        "triplet_teacher_source",
        "distill_id",
        "distill_dom",
        "total",
    ];

    pub fn csv_row(&self) -> Vec<f64> {
        vec![
            self.teacher_target_ce,
            self.student_target_ce,
            self.teacher_source_ce,
            self.triplet_teacher_target,
            self.triplet_student_target,
            self.triplet_teacher_source,
            self.distill_id,
            self.distill_dom,
            self.total,
        ]
    }
}

/// Batch-hard triplet loss with Euclidean distances on unnormalized features:
/// per anchor, margin plus the distance to its farthest same-class sample
/// minus the distance to its nearest other-class sample, hinged at zero,
/// averaged over the batch.
pub fn triplet_loss(features: &Var, labels: &[usize], rho: f64) -> Result<Var> {
    let n = features.shape()[0];
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} feature rows vs {} labels",
            labels.len()
        )));
    }
    // pairwise Euclidean distances via the Gram matrix
    let sq = features.mul(features).sum_axis(1, true); // (n, 1)
    let gram = features.matmul(&features.transpose2());
    let d2 = sq.add(&sq.transpose2()).sub(&gram.mul_scalar(2.0)).relu();
    let dist = d2.add_scalar(1e-12).sqrt();

    // hard selection on the forward values; ties resolve to the lowest index
    let dv = dist.value();
    let mut hardest_pos = Vec::with_capacity(n);
    let mut hardest_neg = Vec::with_capacity(n);
    for i in 0..n {
        let mut hp: Option<usize> = None;
        let mut hn: Option<usize> = None;
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = dv[[i, j]];
            if labels[j] == labels[i] {
                if hp.is_none_or(|p| d > dv[[i, p]]) {
                    hp = Some(j);
                }
            } else if hn.is_none_or(|p| d < dv[[i, p]]) {
                hn = Some(j);
            }
        }
        let hp = hp.ok_or_else(|| {
            Error::DegenerateBatch(format!("anchor {i} has no positive in batch"))
        })?;
        let hn = hn.ok_or_else(|| {
            Error::DegenerateBatch(format!("anchor {i} has no negative in batch"))
        })?;
        hardest_pos.push(hp);
        hardest_neg.push(hn);
    }
    let anchors: Vec<usize> = (0..n).collect();
    let d_p = dist.gather_pairs(&anchors, &hardest_pos);
    let d_n = dist.gather_pairs(&anchors, &hardest_neg);
    Ok(d_p.sub(&d_n).add_scalar(rho).relu().mean_all())
}

/// Mean negative log-softmax probability of the labeled class.
pub fn ce_loss(logits: &Var, labels: &[usize]) -> Result<Var> {
    let shape = logits.shape();
    let (n, classes) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} logit rows vs {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    let rows: Vec<usize> = (0..n).collect();
    let picked = logits.log_softmax_rows().gather_pairs(&rows, labels);
    Ok(picked.mean_all().neg())
}

fn check_class_counts(a: &Var, b: &Var) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::ClassCountMismatch(sa[1], sb[1]));
    }
    Ok(())
}

/// Mean KL(softmax(reference) || softmax(learner)) over the batch, with the
/// reference logits detached so no gradient reaches their network.
fn kl_reference_to_learner(reference: &Var, learner: &Var, temperature: f64) -> Var {
    let r = reference.detach().mul_scalar(1.0 / temperature);
    let l = learner.mul_scalar(1.0 / temperature);
    let p_ref = r.softmax_rows();
    let gap = r.log_softmax_rows().sub(&l.log_softmax_rows());
    p_ref.mul(&gap).sum_axis(1, false).mean_all()
}

/// Identity distillation on a target-domain batch: the teacher's
/// distribution over the K target classes is the constant reference, the
/// student moves toward it.
pub fn kl_distill_id(teacher_logits: &Var, student_logits: &Var, temperature: f64) -> Result<Var> {
    check_class_counts(teacher_logits, student_logits)?;
    Ok(kl_reference_to_learner(teacher_logits, student_logits, temperature))
}

/// Domain distillation on a source-domain batch: the student's distribution
/// over the K target classes is the constant reference, the teacher moves
/// toward it.
pub fn kl_distill_dom(student_logits: &Var, teacher_logits: &Var, temperature: f64) -> Result<Var> {
    check_class_counts(student_logits, teacher_logits)?;
    Ok(kl_reference_to_learner(student_logits, teacher_logits, temperature))
}

/// The component terms of one step, before weighting. Optional terms are
/// absent in the corresponding ablation arms.
pub struct LossTerms {
    pub teacher_target_ce: Var,
    pub triplet_teacher_target: Var,
    pub student_target_ce: Var,
    pub triplet_student_target: Var,
    /// (cross-entropy, triplet) of the teacher on the source batch.
    pub teacher_source: Option<(Var, Var)>,
    pub distill_id: Option<Var>,
    pub distill_dom: Option<Var>,
}

/// Weighted total:
/// (teacher target ce + triplet) + (student target ce + triplet)
/// + lambda1 * (teacher source ce + triplet) + lambda2 * identity distill
/// + lambda3 * domain distill.
pub fn total_loss(terms: &LossTerms, hp: &HyperParams) -> (Var, LossReport) {
    let mut total = terms
        .teacher_target_ce
        .add(&terms.triplet_teacher_target)
        .add(&terms.student_target_ce)
        .add(&terms.triplet_student_target);
    let mut report = LossReport {
        teacher_target_ce: terms.teacher_target_ce.scalar(),
        triplet_teacher_target: terms.triplet_teacher_target.scalar(),
        student_target_ce: terms.student_target_ce.scalar(),
        triplet_student_target: terms.triplet_student_target.scalar(),
        ..LossReport::default()
    };
    if let Some((ce, tri)) = &terms.teacher_source {
        total = total.add(&ce.add(tri).mul_scalar(hp.lambda1));
        report.teacher_source_ce = ce.scalar();
        report.triplet_teacher_source = tri.scalar();
    }
    if let Some(kl) = &terms.distill_id {
        total = total.add(&kl.mul_scalar(hp.lambda2));
        report.distill_id = kl.scalar();
    }
    if let Some(kl) = &terms.distill_dom {
        total = total.add(&kl.mul_scalar(hp.lambda3));
        report.distill_dom = kl.scalar();
    }
    report.total = total.scalar();
    (total, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ArrD, Tape};
    use ndarray::{arr2, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn leaf(tape: &Tape, rows: &[&[f64]]) -> Var {
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        tape.leaf(ArrD::from_shape_vec(IxDyn(&[rows.len(), rows[0].len()]), data).unwrap())
    }

    #[test]
    fn triplet_identical_features_equal_margin() {
        let tape = Tape::new();
        let row: &[f64] = &[1.0, 2.0];
        let f = leaf(&tape, &[row, row, row, row]);
        let loss = triplet_loss(&f, &[0, 0, 1, 1], 1.2).unwrap();
        assert!((loss.scalar() - 1.2).abs() < 1e-9);
    }

    #[test]
    fn triplet_inactive_hinge_is_zero() {
        let tape = Tape::new();
        // two tight clusters far apart: d_n - d_p >= rho for every anchor
        let f = leaf(&tape, &[&[0.0, 0.0], &[0.1, 0.0], &[10.0, 0.0], &[10.1, 0.0]]);
        let loss = triplet_loss(&f, &[0, 0, 1, 1], 1.2).unwrap();
        assert_eq!(loss.scalar(), 0.0);
    }

    #[test]
    fn triplet_hand_computed_anchor_term() {
        // anchor (0,0) with hardest positive (3,4) at distance 5 and nearest
        // negative (0,1) at distance 1: term = max(1.2 + 5 - 1, 0) = 5.2
        let pts = [[0.0, 0.0], [3.0, 4.0], [0.0, 1.0], [-6.0, -8.0]];
        let labels = [0usize, 0, 1, 1];
        let tape = Tape::new();
        let f = leaf(&tape, &[&pts[0], &pts[1], &pts[2], &pts[3]]);
        let loss = triplet_loss(&f, &labels, 1.2).unwrap();
        let expected = brute_force_triplet(&arr2(&pts), &labels, 1.2).unwrap();
        assert!((loss.scalar() - expected).abs() < 1e-9);
        // anchor 0's term inside the mean
        let term0 = (1.2f64 + 5.0 - 1.0).max(0.0);
        assert!((term0 - 5.2).abs() < 1e-12);
        assert!(loss.scalar() >= term0 / 4.0);
    }

    #[test]
    fn triplet_degenerate_batches_error() {
        let tape = Tape::new();
        let f = leaf(&tape, &[&[0.0], &[1.0]]);
        assert!(matches!(
            triplet_loss(&f, &[0, 1], 1.2),
            Err(Error::DegenerateBatch(_))
        ));
        assert!(matches!(
            triplet_loss(&f, &[0, 0], 1.2),
            Err(Error::DegenerateBatch(_))
        ));
    }

    /// Exhaustive hardest-triplet reference: max over positives, min over
    /// negatives, by definition.
    fn brute_force_triplet(
        feats: &ndarray::Array2<f64>,
        labels: &[usize],
        rho: f64,
    ) -> Option<f64> {
        let n = feats.nrows();
        let dist = |i: usize, j: usize| -> f64 {
            let d = &feats.row(i) - &feats.row(j);
            (d.dot(&d) + 1e-12).sqrt()
        };
        let mut total = 0.0;
        for a in 0..n {
            let mut dp: Option<f64> = None;
            let mut dn: Option<f64> = None;
            for j in 0..n {
                if j == a {
                    continue;
                }
                if labels[j] == labels[a] {
                    dp = Some(dp.map_or(dist(a, j), |v| v.max(dist(a, j))));
                } else {
                    dn = Some(dn.map_or(dist(a, j), |v| v.min(dist(a, j))));
                }
            }
            total += (rho + dp? - dn?).max(0.0);
        }
        Some(total / n as f64)
    }

    #[test]
    fn triplet_matches_brute_force_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..50 {
            let classes = rng.random_range(2..5);
            let per = rng.random_range(2..5);
            let n = classes * per;
            if n > 16 {
                continue;
            }
            let labels: Vec<usize> = (0..n).map(|i| i / per).collect();
            let feats = ndarray::Array2::from_shape_fn((n, 6), |_| rng.random_range(-2.0..2.0));
            let tape = Tape::new();
            let f = tape.leaf(feats.clone().into_dyn());
            let loss = triplet_loss(&f, &labels, 1.2).unwrap().scalar();
            let expected = brute_force_triplet(&feats, &labels, 1.2).unwrap();
            assert!(
                (loss - expected).abs() < 1e-10,
                "trial {trial}: {loss} vs {expected}"
            );
        }
    }

    #[test]
    fn ce_uniform_two_class() {
        let tape = Tape::new();
        let logits = leaf(&tape, &[&[0.0, 0.0]]);
        let loss = ce_loss(&logits, &[0]).unwrap();
        assert!((loss.scalar() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_confident_and_wrong_cases() {
        let tape = Tape::new();
        let logits = leaf(&tape, &[&[10.0, -10.0]]);
        let right = ce_loss(&logits, &[0]).unwrap().scalar();
        // softplus(-20)
        let expected = (1.0 + (-20.0f64).exp()).ln();
        assert!((right - expected).abs() < 1e-15);
        assert!(right < 3e-9);

        let wrong = ce_loss(&logits, &[1]).unwrap().scalar();
        assert!((wrong - (20.0 + expected)).abs() < 1e-12);
    }

    #[test]
    fn ce_label_out_of_range() {
        let tape = Tape::new();
        let logits = leaf(&tape, &[&[0.0, 0.0]]);
        assert!(matches!(
            ce_loss(&logits, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    // logits (ln 3, 0) give softmax (0.75, 0.25)
    fn p75_logits(tape: &Tape) -> Var {
        leaf(tape, &[&[3.0f64.ln(), 0.0]])
    }

    fn uniform_logits(tape: &Tape) -> Var {
        leaf(tape, &[&[0.0, 0.0]])
    }

    #[test]
    fn kl_identical_distributions_vanish() {
        let tape = Tape::new();
        let a = p75_logits(&tape);
        let b = leaf(&tape, &[&[3.0f64.ln() + 5.0, 5.0]]); // shifted, same softmax
        let kl = kl_distill_id(&a, &b, 1.0).unwrap().scalar();
        assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn kl_hand_computed_values_and_asymmetry() {
        let tape = Tape::new();
        let t = p75_logits(&tape);
        let s = uniform_logits(&tape);
        // KL((0.75, 0.25) || (0.5, 0.5)) = 0.75 ln 1.5 + 0.25 ln 0.5
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        let kl = kl_distill_id(&t, &s, 1.0).unwrap().scalar();
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 0.1308).abs() < 5e-5);

        // swapped arguments witness the asymmetry
        let swapped = kl_distill_id(&s, &t, 1.0).unwrap().scalar();
        let expected_swapped = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((swapped - expected_swapped).abs() < 1e-12);
        assert!((swapped - 0.1438).abs() < 5e-5);
        assert!((kl - swapped).abs() > 1e-3);

        // the domain direction computes the same divergence
        let dom = kl_distill_dom(&t, &s, 1.0).unwrap().scalar();
        assert!((dom - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_class_count_mismatch() {
        let tape = Tape::new();
        let a = leaf(&tape, &[&[0.0, 0.0]]);
        let b = leaf(&tape, &[&[0.0, 0.0, 0.0]]);
        assert!(matches!(
            kl_distill_id(&a, &b, 1.0),
            Err(Error::ClassCountMismatch(2, 3))
        ));
    }

    #[test]
    fn kl_reference_side_gets_no_gradient() {
        let tape = Tape::new();
        let t = p75_logits(&tape);
        let s = uniform_logits(&tape);
        let kl = kl_distill_id(&t, &s, 1.0).unwrap();
        let grads = tape.backward(&kl).unwrap();
        assert!(grads.get(&t).is_none(), "teacher side must be constant");
        assert!(grads.get(&s).is_some(), "student side must learn");

        let tape = Tape::new();
        let t = p75_logits(&tape);
        let s = uniform_logits(&tape);
        let kl = kl_distill_dom(&s, &t, 1.0).unwrap();
        let grads = tape.backward(&kl).unwrap();
        assert!(grads.get(&s).is_none(), "student side must be constant");
        assert!(grads.get(&t).is_some(), "teacher side must learn");
    }

    #[test]
    fn total_with_unit_terms_and_published_weights() {
        let tape = Tape::new();
        let one = || tape.leaf(ndarray::arr0(1.0).into_dyn());
        let terms = LossTerms {
            teacher_target_ce: one(),
            triplet_teacher_target: one(),
            student_target_ce: one(),
            triplet_student_target: one(),
            teacher_source: Some((one(), one())),
            distill_id: Some(one()),
            distill_dom: Some(one()),
        };
        let (_, report) = total_loss(&terms, &HyperParams::default());
        assert!((report.total - 6.1).abs() < 1e-12);
    }

    #[test]
    fn lambda_scaling_is_linear() {
        let tape = Tape::new();
        let c = |v: f64| tape.leaf(ndarray::arr0(v).into_dyn());
        let terms = LossTerms {
            teacher_target_ce: c(0.3),
            triplet_teacher_target: c(0.7),
            student_target_ce: c(0.2),
            triplet_student_target: c(0.5),
            teacher_source: Some((c(0.9), c(0.1))),
            distill_id: Some(c(0.4)),
            distill_dom: Some(c(0.6)),
        };
        let mut hp = HyperParams::default();
        let (_, r1) = total_loss(&terms, &hp);
        hp.lambda3 *= 2.0;
        let (_, r2) = total_loss(&terms, &hp);
        assert!((r2.total - r1.total - 0.6 * HyperParams::default().lambda3).abs() < 1e-12);

        // removing the mutual terms reduces to independent supervised training
        hp.lambda2 = 0.0;
        hp.lambda3 = 0.0;
        hp.lambda1 = 0.0;
        let (_, r3) = total_loss(&terms, &hp);
        assert!((r3.total - (0.3 + 0.7 + 0.2 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn all_terms_nonnegative_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..20 {
            let tape = Tape::new();
            let n = 8;
            let k = 5;
            let mk = |rng: &mut ChaCha8Rng| {
                let data: Vec<f64> = (0..n * k).map(|_| rng.random_range(-3.0..3.0)).collect();
                tape.leaf(ArrD::from_shape_vec(IxDyn(&[n, k]), data).unwrap())
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            assert!(ce_loss(&a, &labels).unwrap().scalar() >= 0.0);
            assert!(kl_distill_id(&a, &b, 1.0).unwrap().scalar() >= -1e-12);
            assert!(kl_distill_dom(&a, &b, 1.0).unwrap().scalar() >= -1e-12);
            let tri_labels: Vec<usize> = (0..n).map(|i| i / 4).collect();
            assert!(triplet_loss(&a, &tri_labels, 1.2).unwrap().scalar() >= 0.0);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let n = 6;
        let k = 4;
        let base: Vec<f64> = (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let shifts: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let shifted: Vec<f64> = base
            .iter()
            .enumerate()
            .map(|(i, v)| v + shifts[i / k])
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();

        let tape = Tape::new();
        let a = tape.leaf(ArrD::from_shape_vec(IxDyn(&[n, k]), base).unwrap());
        let b = tape.leaf(ArrD::from_shape_vec(IxDyn(&[n, k]), shifted).unwrap());
        let other = {
            let data: Vec<f64> = (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect();
            tape.leaf(ArrD::from_shape_vec(IxDyn(&[n, k]), data).unwrap())
        };

        let ce_a = ce_loss(&a, &labels).unwrap().scalar();
        let ce_b = ce_loss(&b, &labels).unwrap().scalar();
        assert!((ce_a - ce_b).abs() < 1e-9);

        let kl_a = kl_distill_id(&a, &other, 1.0).unwrap().scalar();
        let kl_b = kl_distill_id(&b, &other, 1.0).unwrap().scalar();
        assert!((kl_a - kl_b).abs() < 1e-9);

        let kl_a = kl_distill_dom(&other, &a, 1.0).unwrap().scalar();
        let kl_b = kl_distill_dom(&other, &b, 1.0).unwrap().scalar();
        assert!((kl_a - kl_b).abs() < 1e-9);
    }

    /// Central finite differences on every input coordinate.
    fn fd_grad_check(build: impl Fn(&Tape, &Var) -> Var, x: &ArrD, rtol: f64) {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let loss = build(&tape, &xv);
        let grads = tape.backward(&loss).unwrap();
        let g = grads.get(&xv).expect("input grad").clone();
        let h = 1e-4;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[i] -= h;
            let t1 = Tape::new();
            let v1 = t1.leaf(xp);
            let f1 = build(&t1, &v1).scalar();
            let t2 = Tape::new();
            let v2 = t2.leaf(xm);
            let f2 = build(&t2, &v2).scalar();
            let fd = (f1 - f2) / (2.0 * h);
            let an = g.as_slice().unwrap()[i];
            assert!(
                (fd - an).abs() <= 1e-8 + rtol * fd.abs().max(an.abs()),
                "coord {i}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..5 {
            let n = 6;
            let d = 4;
            let feats = ArrD::from_shape_vec(
                IxDyn(&[n, d]),
                (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect(),
            )
            .unwrap();
            let labels: Vec<usize> = (0..n).map(|i| i / 2).collect();
            fd_grad_check(
                |_, x| triplet_loss(x, &labels, 1.2).unwrap(),
                &feats,
                1e-4,
            );

            let ce_labels: Vec<usize> = (0..n).map(|i| (i + trial) % d).collect();
            fd_grad_check(|_, x| ce_loss(x, &ce_labels).unwrap(), &feats, 1e-4);

            let other = ArrD::from_shape_vec(
                IxDyn(&[n, d]),
                (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect(),
            )
            .unwrap();
            // learner-side gradient of the identity distillation
            fd_grad_check(
                |t, x| kl_distill_id(&t.constant(other.clone()), x, 1.0).unwrap(),
                &feats,
                1e-4,
            );
            // learner-side gradient of the domain distillation
            fd_grad_check(
                |t, x| kl_distill_dom(&t.constant(other.clone()), x, 1.0).unwrap(),
                &feats,
                1e-4,
            );
        }
    }
}
