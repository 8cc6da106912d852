//! Training objectives. Each returns its value and the gradient with respect
//! to the student features; the caller seeds the autograd tape with it.

use crate::guidance::{HierGuidance, HierarchyLevel};
use crate::tensor::{dot, norm, Mat};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LossToggles {
    pub visual: bool,
    pub text: bool,
    /// Semantic, instance, part.
    pub levels: [bool; 3],
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            visual: true,
            text: true,
            levels: [true; 3],
        }
    }
}

impl LossToggles {
    pub fn level_enabled(&self, l: HierarchyLevel) -> bool {
        self.levels[l.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillLoss {
    pub value: f64,
    /// Gradient per level, same shape as the student input.
    pub grads: Vec<Mat>,
    /// `[level][visual, text]` contributions.
    pub terms: [[f64; 2]; 3],
    /// Student rows with zero norm.
    pub dead_features: usize,
}

/// `1 − cos(x, t)` and its gradient in `x`. A zero `x` or `t` counts as
/// cosine 0 with zero gradient.
pub fn cosine_distance(x: &[f64], t: &[f64]) -> (f64, Vec<f64>, bool) {
    let (nx, nt) = (norm(x), norm(t));
    if nx == 0.0 || nt == 0.0 {
        return (1.0, vec![0.0; x.len()], nx == 0.0);
    }
    let c = dot(x, t) / (nx * nt);
    let grad = x
        .iter()
        .zip(t)
        .map(|(&xi, &ti)| -(ti / (nx * nt) - c * xi / (nx * nx)))
        .collect();
    (1.0 - c, grad, false)
}

/// Hierarchical distillation loss: for every enabled level, the mean over its
/// masks of `1 − cos(M̂_k, v_k)` plus the mean of `1 − cos(M̂_k, t_k)`,
/// summed over levels. `student[l]` holds one row per mask of level `l`.
pub fn distill_loss(student: &[Mat], guidance: &HierGuidance, toggles: &LossToggles) -> Result<DistillLoss> {
    if student.len() != 3 {
        return Err(Error::Validation(format!("expected 3 student levels, got {}", student.len())));
    }
    let mut value = 0.0;
    let mut terms = [[0.0; 2]; 3];
    let mut dead = 0;
    let mut grads = Vec::with_capacity(3);
    for level in HierarchyLevel::ALL {
        let li = level.index();
        let x = &student[li];
        let lg = guidance.level(level);
        let mut grad = Mat::zeros(x.rows, x.cols);
        if !toggles.level_enabled(level) || lg.is_empty() {
            grads.push(grad);
            continue;
        }
        if x.rows != lg.len() {
            return Err(Error::Validation(format!(
                "level {}: {} student rows for {} guidance records",
                level.name(),
                x.rows,
                lg.len()
            )));
        }
        let inv_k = 1.0 / x.rows as f64;
        for (k, rec) in lg.records.iter().enumerate() {
            let row = x.row(k);
            if norm(row) == 0.0 {
                dead += 1;
            }
            for (term, on, target) in [(0, toggles.visual, &rec.visual), (1, toggles.text, &rec.text)] {
                if !on {
                    continue;
                }
                if target.len() != x.cols {
                    return Err(Error::Validation(format!(
                        "level {} mask {k}: guidance has {} dims, student {}",
                        level.name(),
                        target.len(),
                        x.cols
                    )));
                }
                let (d, g, _) = cosine_distance(row, target);
                terms[li][term] += d * inv_k;
                for (acc, gi) in grad.row_mut(k).iter_mut().zip(g) {
                    *acc += gi * inv_k;
                }
            }
        }
        value += terms[li][0] + terms[li][1];
        grads.push(grad);
    }
    Ok(DistillLoss {
        value,
        grads,
        terms,
        dead_features: dead,
    })
}

/// Mean over cells of `1 − cos(student_cell, teacher_cell)`; returns the loss,
/// its gradient in `student` and the number of zero-norm student cells.
pub fn stage1_align_loss(student: &Mat, teacher: &Mat) -> Result<(f64, Mat, usize)> {
    if student.shape() != teacher.shape() {
        return Err(Error::Validation(format!(
            "student map {:?} and teacher map {:?} differ",
            student.shape(),
            teacher.shape()
        )));
    }
    let n = student.rows.max(1) as f64;
    let mut grad = Mat::zeros(student.rows, student.cols);
    let mut loss = 0.0;
    let mut dead = 0;
    for r in 0..student.rows {
        let (d, g, z) = cosine_distance(student.row(r), teacher.row(r));
        loss += d / n;
        dead += z as usize;
        for (acc, gi) in grad.row_mut(r).iter_mut().zip(g) {
            *acc = gi / n;
        }
    }
    Ok((loss, grad, dead))
}

/// Mean binary cross-entropy with logits and its gradient.
pub fn bce_with_logits(logits: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    let n = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(targets) {
        // log(1 + e^z) − y z, computed stably
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        let s = 1.0 / (1.0 + (-z).exp());
        grad.push((s - y) / n);
    }
    (loss / n, grad)
}

/// Soft Dice loss `1 − (2Σpt + 1) / (Σp + Σt + 1)` on sigmoid probabilities,
/// with its gradient with respect to the logits.
pub fn dice_with_logits(logits: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    let p: Vec<f64> = logits.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
    let inter: f64 = p.iter().zip(targets).map(|(a, b)| a * b).sum();
    let union: f64 = p.iter().sum::<f64>() + targets.iter().sum::<f64>() + 1.0;
    let num = 2.0 * inter + 1.0;
    let grad = p
        .iter()
        .zip(targets)
        .map(|(&pi, &ti)| -(2.0 * ti * union - num) / (union * union) * pi * (1.0 - pi))
        .collect();
    (1.0 - num / union, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{GuidanceRecord, LevelGuidance, MaskSet};
    use crate::mask::BinaryMask;
    use proptest::prelude::*;

    fn guidance(levels: [Vec<(Vec<f64>, Vec<f64>)>; 3]) -> HierGuidance {
        let levels = HierarchyLevel::ALL
            .iter()
            .zip(levels)
            .map(|(&level, recs)| LevelGuidance {
                masks: MaskSet {
                    level,
                    masks: recs.iter().map(|_| BinaryMask::from_fn(2, 2, |_, _| true)).collect(),
                    frame_id: "f".into(),
                },
                records: recs
                    .into_iter()
                    .enumerate()
                    .map(|(k, (v, t))| GuidanceRecord {
                        mask_index: k,
                        visual: v,
                        text: t,
                        caption_short: String::new(),
                        caption_long: String::new(),
                    })
                    .collect(),
            })
            .collect();
        HierGuidance {
            frame_id: "f".into(),
            levels,
        }
    }

    fn e(i: usize, d: usize) -> Vec<f64> {
        (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn identical_features_give_zero() {
        let recs = || vec![(e(0, 4), e(0, 4)), (e(1, 4), e(1, 4))];
        let g = guidance([recs(), recs(), recs()]);
        let s = Mat::from_vec(2, 4, [e(0, 4), e(1, 4)].concat());
        let l = distill_loss(&[s.clone(), s.clone(), s], &g, &LossToggles::default()).unwrap();
        assert!(l.value.abs() < 1e-12);
    }

    #[test]
    fn orthogonal_features_give_six() {
        let recs = || vec![(e(0, 4), e(1, 4))];
        let g = guidance([recs(), recs(), recs()]);
        let s = Mat::row_vector(e(2, 4));
        let l = distill_loss(&[s.clone(), s.clone(), s], &g, &LossToggles::default()).unwrap();
        assert!((l.value - 6.0).abs() < 1e-12);
    }

    #[test]
    fn half_and_minus_half_give_two() {
        // cos(x, v) = 0.5, cos(x, t) = -0.5
        let x = vec![1.0, 0.0];
        let v = vec![0.5, 0.75f64.sqrt()];
        let t = vec![-0.5, 0.75f64.sqrt()];
        let g = guidance([vec![(v, t)], vec![], vec![]]);
        let l = distill_loss(
            &[Mat::row_vector(x), Mat::zeros(0, 2), Mat::zeros(0, 2)],
            &g,
            &LossToggles::default(),
        )
        .unwrap();
        assert!((l.value - 2.0).abs() < 1e-12);
        assert!((l.terms[0][0] - 0.5).abs() < 1e-12);
        assert!((l.terms[0][1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn zero_student_counts_as_dead() {
        let g = guidance([vec![(e(0, 3), e(1, 3))], vec![], vec![]]);
        let l = distill_loss(
            &[Mat::zeros(1, 3), Mat::zeros(0, 3), Mat::zeros(0, 3)],
            &g,
            &LossToggles::default(),
        )
        .unwrap();
        assert_eq!(l.dead_features, 1);
        assert_eq!(l.value, 2.0);
        assert!(l.grads[0].all_finite());
    }

    #[test]
    fn misaligned_student_is_rejected() {
        let g = guidance([vec![(e(0, 3), e(1, 3))], vec![], vec![]]);
        assert!(distill_loss(
            &[Mat::zeros(2, 3), Mat::zeros(0, 3), Mat::zeros(0, 3)],
            &g,
            &LossToggles::default()
        )
        .is_err());
    }

    #[test]
    fn align_loss_examples() {
        let a = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert!(stage1_align_loss(&a, &a).unwrap().0.abs() < 1e-12);
        let b = Mat::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        assert!((stage1_align_loss(&a, &b).unwrap().0 - 1.0).abs() < 1e-12);
        let c = Mat::from_vec(2, 2, vec![1.0, 0.0, 1.0, 0.0]);
        assert!((stage1_align_loss(&a, &c).unwrap().0 - 0.5).abs() < 1e-12);
        assert!(stage1_align_loss(&a, &Mat::zeros(3, 2)).is_err());
    }

    #[test]
    fn bce_matches_direct_formula() {
        let (l, g) = bce_with_logits(&[0.3, -2.0], &[1.0, 0.25]);
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        let direct = -((s(0.3)).ln() + 0.25 * s(-2.0).ln() + 0.75 * (1.0 - s(-2.0)).ln()) / 2.0;
        assert!((l - direct).abs() < 1e-12);
        assert!((g[0] - (s(0.3) - 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn dice_values_and_gradient() {
        let (perfect, _) = dice_with_logits(&[30.0, -30.0], &[1.0, 0.0]);
        assert!(perfect < 1e-9);
        let (miss, _) = dice_with_logits(&[-30.0, 30.0], &[1.0, 0.0]);
        assert!((miss - (1.0 - 1.0 / 3.0)).abs() < 1e-9);
        let z = [0.3, -1.2, 2.0, 0.0];
        let t = [1.0, 0.0, 0.5, 1.0];
        let (_, g) = dice_with_logits(&z, &t);
        for i in 0..z.len() {
            let mut a = z;
            a[i] += 1e-6;
            let mut b = z;
            b[i] -= 1e-6;
            let num = (dice_with_logits(&a, &t).0 - dice_with_logits(&b, &t).0) / 2e-6;
            assert!((num - g[i]).abs() < 1e-8, "{i}: {num} vs {}", g[i]);
        }
    }

    fn random_vec(seed: u64, d: usize) -> Vec<f64> {
        crate::guidance::gaussian_vector(seed, d)
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(seed in 0u64..500) {
            let d = 8;
            let recs = |o: u64| vec![(random_vec(seed + o, d), random_vec(seed + o + 1, d)), (random_vec(seed + o + 2, d), random_vec(seed + o + 3, d))];
            let g = guidance([recs(10), recs(20), recs(30)]);
            let student: Vec<Mat> = (0..3).map(|l| Mat::from_vec(2, d, [random_vec(seed + 100 + l, d), random_vec(seed + 200 + l, d)].concat())).collect();
            let t = LossToggles::default();
            let base = distill_loss(&student, &g, &t).unwrap();
            let eps = 1e-6;
            for l in 0..3 {
                for i in 0..2 * d {
                    let mut p = student.clone();
                    p[l].data[i] += eps;
                    let mut m = student.clone();
                    m[l].data[i] -= eps;
                    let num = (distill_loss(&p, &g, &t).unwrap().value - distill_loss(&m, &g, &t).unwrap().value) / (2.0 * eps);
                    let ana = base.grads[l].data[i];
                    let rel = (num - ana).abs() / ana.abs().max(num.abs()).max(1e-4);
                    prop_assert!(rel < 1e-4, "rel {rel} num {num} ana {ana}");
                }
            }
        }

        #[test]
        fn loss_bounded_and_scale_invariant(seed in 0u64..500, s in 0.01f64..100.0) {
            let d = 6;
            let g = guidance([
                vec![(random_vec(seed, d), random_vec(seed + 1, d))],
                vec![(random_vec(seed + 2, d), random_vec(seed + 3, d))],
                vec![(random_vec(seed + 4, d), random_vec(seed + 5, d))],
            ]);
            let student: Vec<Mat> = (0..3).map(|l| Mat::row_vector(random_vec(seed + 50 + l, d))).collect();
            let t = LossToggles::default();
            let l = distill_loss(&student, &g, &t).unwrap();
            prop_assert!(l.value >= 0.0 && l.value <= 12.0, "value {}", l.value);
            for lv in &l.terms {
                for &c in lv {
                    prop_assert!((0.0..=2.0).contains(&c));
                }
            }
            let mut g2 = g.clone();
            for lv in &mut g2.levels {
                for r in &mut lv.records {
                    r.visual.iter_mut().for_each(|v| *v *= s);
                }
            }
            let l2 = distill_loss(&student, &g2, &t).unwrap();
            prop_assert!((l.value - l2.value).abs() < 1e-9);
            // the text-off loss is exactly the visual sum
            let vg = distill_loss(&student, &g, &LossToggles { text: false, ..t }).unwrap();
            let first: f64 = l.terms.iter().map(|lv| lv[0]).sum();
            prop_assert_eq!(vg.value, first);
        }
    }
}
