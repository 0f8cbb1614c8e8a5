//! Self-learning objectives.
//!
//! * [`loss_pl`]: flipped cross-entropy against soft pseudo-labels minus the
//!   entropy of the batch-marginal prediction.
//! * [`loss_kd`]: KL divergence from a pseudo-label to the student's
//!   prediction on an augmented view.
//! * [`loss_total`]: `loss_pl + lambda2 * mean(loss_kd)`.
//!
//! Every loss comes with a gradient w.r.t. the student's probabilities; the
//! network's softmax backward turns those into logit gradients. Pseudo-labels
//! are constants. All logarithms are floored at [`EPS`].

use crate::error::{Error, Result};

/// Floor applied to every probability inside a logarithm.
pub const EPS: f64 = 1e-8;

#[inline]
pub fn flog(p: f64) -> f64 {
    p.max(EPS).ln()
}

/// Derivative of `p * flog(p)`.
#[inline]
pub fn d_plogp(p: f64) -> f64 {
    if p > EPS {
        p.ln() + 1.0
    } else {
        EPS.ln()
    }
}

/// Derivative of `flog(p)`.
#[inline]
fn d_flog(p: f64) -> f64 {
    if p > EPS {
        1.0 / p
    } else {
        0.0
    }
}

/// Student predictions on clean and augmented views plus the refined
/// pseudo-labels, aligned by index.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPredictions {
    pub student_probs: Vec<Vec<f64>>,
    pub pseudo_labels: Vec<Vec<f64>>,
    pub student_probs_aug: Vec<Vec<f64>>,
}

impl BatchPredictions {
    pub fn validate(&self) -> Result<()> {
        let b = self.student_probs.len();
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        if self.pseudo_labels.len() != b || self.student_probs_aug.len() != b {
            return Err(Error::Shape(format!(
                "prediction blocks have sizes {}, {}, {}",
                b,
                self.pseudo_labels.len(),
                self.student_probs_aug.len()
            )));
        }
        Ok(())
    }
}

fn check_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} predictions vs {} pseudo-labels", a.len(), b.len())));
    }
    let k = a[0].len();
    if a.iter().chain(b).any(|r| r.len() != k) {
        return Err(Error::Shape("rows have inconsistent class counts".into()));
    }
    Ok(k)
}

/// Batch-marginal class distribution.
pub fn marginal(probs: &[Vec<f64>]) -> Vec<f64> {
    let b = probs.len() as f64;
    let k = probs.first().map_or(0, Vec::len);
    let mut m = vec![0.0; k];
    for row in probs {
        for (acc, p) in m.iter_mut().zip(row) {
            *acc += p;
        }
    }
    m.iter_mut().for_each(|v| *v /= b);
    m
}

/// `loss_pl` and its gradient w.r.t. the student probabilities.
pub fn loss_pl_with_grad(student: &[Vec<f64>], pseudo: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    let k = check_rows(student, pseudo)?;
    let b = student.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![vec![0.0; k]; student.len()];
    for ((p, y), g) in student.iter().zip(pseudo).zip(grad.iter_mut()) {
        for c in 0..k {
            let ly = flog(y[c]);
            value -= p[c] * ly / b;
            g[c] = -ly / b;
        }
    }
    let m = marginal(student);
    for c in 0..k {
        value += m[c] * flog(m[c]);
        let dm = d_plogp(m[c]) / b;
        for g in grad.iter_mut() {
            g[c] += dm;
        }
    }
    Ok((value, grad))
}

pub fn loss_pl(student: &[Vec<f64>], pseudo: &[Vec<f64>]) -> Result<f64> {
    loss_pl_with_grad(student, pseudo).map(|(v, _)| v)
}

/// `KL(pseudo || student_aug)` and its gradient w.r.t. `student_aug`.
pub fn loss_kd_with_grad(student_aug: &[f64], pseudo: &[f64]) -> Result<(f64, Vec<f64>)> {
    if student_aug.len() != pseudo.len() {
        return Err(Error::Shape(format!(
            "KL between {} and {} classes",
            pseudo.len(),
            student_aug.len()
        )));
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; pseudo.len()];
    for ((p, y), g) in student_aug.iter().zip(pseudo).zip(grad.iter_mut()) {
        if *y > 0.0 {
            value += y * (flog(*y) - flog(*p));
        }
        *g = -y * d_flog(*p);
    }
    Ok((value, grad))
}

pub fn loss_kd(student_aug: &[f64], pseudo: &[f64]) -> Result<f64> {
    loss_kd_with_grad(student_aug, pseudo).map(|(v, _)| v)
}

/// Value and gradients of the combined objective. Returns
/// `(value, d/d student_probs, d/d student_probs_aug)`.
pub fn loss_total_with_grad(batch: &BatchPredictions, lambda2: f64) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    batch.validate()?;
    let (pl, g_clean) = loss_pl_with_grad(&batch.student_probs, &batch.pseudo_labels)?;
    let b = batch.student_probs.len() as f64;
    let mut kd = 0.0;
    let mut g_aug = Vec::with_capacity(batch.student_probs_aug.len());
    for (p, y) in batch.student_probs_aug.iter().zip(&batch.pseudo_labels) {
        let (v, g) = loss_kd_with_grad(p, y)?;
        kd += v;
        g_aug.push(g.into_iter().map(|x| lambda2 * x / b).collect());
    }
    Ok((pl + lambda2 * kd / b, g_clean, g_aug))
}

pub fn loss_total(batch: &BatchPredictions, lambda2: f64) -> Result<f64> {
    loss_total_with_grad(batch, lambda2).map(|(v, _, _)| v)
}

/// Shannon entropy with floored logarithm.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| v * flog(v)).sum::<f64>()
}

/// Mean prediction entropy over a batch and its gradient.
pub fn mean_entropy_with_grad(probs: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    if probs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let b = probs.len() as f64;
    let value = probs.iter().map(|p| entropy(p)).sum::<f64>() / b;
    let grad = probs
        .iter()
        .map(|p| p.iter().map(|&v| -d_plogp(v) / b).collect())
        .collect();
    Ok((value, grad))
}

/// Mean cross-entropy against hard labels and its gradient.
pub fn hard_cross_entropy_with_grad(probs: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    if probs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions vs {} labels", probs.len(), labels.len())));
    }
    let b = probs.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![vec![0.0; probs[0].len()]; probs.len()];
    for ((p, &y), g) in probs.iter().zip(labels).zip(grad.iter_mut()) {
        value -= flog(p[y]) / b;
        g[y] = -d_flog(p[y]) / b;
    }
    Ok((value, grad))
}

/// A finite population of test points with, for each point, the student's
/// predictive distribution and the pseudo-label distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteInstance {
    /// Probability of each test point; uniform when built with [`DiscreteInstance::uniform`].
    pub weights: Vec<f64>,
    pub student: Vec<Vec<f64>>,
    pub pseudo: Vec<Vec<f64>>,
}

impl DiscreteInstance {
    pub fn uniform(student: Vec<Vec<f64>>, pseudo: Vec<Vec<f64>>) -> Self {
        let n = student.len();
        Self {
            weights: vec![1.0 / n as f64; n],
            student,
            pseudo,
        }
    }
}

/// The information-theoretic terms of the flipped cross-entropy
/// decomposition, each computed from its own definition (natural log,
/// no flooring).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InformationTerms {
    /// `H(Y; Ŷ | X)`
    pub flipped_ce: f64,
    /// `H(Y)`
    pub marginal_entropy: f64,
    /// `I(Y; X)`
    pub mutual_information: f64,
    /// `KL(Y || Ŷ | X)`
    pub conditional_kl: f64,
}

pub fn information_terms(inst: &DiscreteInstance) -> Result<InformationTerms> {
    let n = inst.weights.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if inst.student.len() != n || inst.pseudo.len() != n {
        return Err(Error::Shape("instance rows do not match the number of test points".into()));
    }
    let k = inst.student[0].len();
    let mut marg = vec![0.0; k];
    for (w, p) in inst.weights.iter().zip(&inst.student) {
        for (m, v) in marg.iter_mut().zip(p) {
            *m += w * v;
        }
    }
    let mut flipped_ce = 0.0;
    let mut mutual_information = 0.0;
    let mut conditional_kl = 0.0;
    for ((w, p), q) in inst.weights.iter().zip(&inst.student).zip(&inst.pseudo) {
        for c in 0..k {
            if p[c] <= 0.0 || *w <= 0.0 {
                continue;
            }
            let joint = w * p[c];
            flipped_ce -= joint * q[c].ln();
            mutual_information += joint * (joint / (w * marg[c])).ln();
            conditional_kl += joint * (p[c] / q[c]).ln();
        }
    }
    let marginal_entropy = -marg.iter().filter(|&&m| m > 0.0).map(|m| m * m.ln()).sum::<f64>();
    Ok(InformationTerms {
        flipped_ce,
        marginal_entropy,
        mutual_information,
        conditional_kl,
    })
}

/// `|(H(Y;Ŷ|X) - H(Y)) - (-I(Y;X) + KL(Y||Ŷ|X))|`.
pub fn verify_mi_identity(inst: &DiscreteInstance) -> Result<f64> {
    let t = information_terms(inst)?;
    let lhs = t.flipped_ce - t.marginal_entropy;
    let rhs = -t.mutual_information + t.conditional_kl;
    Ok((lhs - rhs).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{softmax, softmax_backward};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
        let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        softmax(&logits)
    }

    /// Double-loop evaluation straight from the formula.
    fn loss_pl_oracle(p: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
        let b = p.len();
        let k = p[0].len();
        let mut fce = 0.0;
        for i in 0..b {
            for c in 0..k {
                fce += p[i][c] * y[i][c].max(1e-8).ln();
            }
        }
        let mut marg_term = 0.0;
        for c in 0..k {
            let mut m = 0.0;
            for row in p {
                m += row[c];
            }
            m /= b as f64;
            marg_term += m * m.max(1e-8).ln();
        }
        -fce / b as f64 + marg_term
    }

    #[test]
    fn loss_pl_examples() {
        let onehot = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((loss_pl(&onehot, &onehot).unwrap() + LN2).abs() < 1e-12);
        let uniform = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        assert!(loss_pl(&uniform, &uniform).unwrap().abs() < 1e-12);
        assert!(matches!(loss_pl(&[], &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn loss_pl_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: Vec<_> = (0..4).map(|_| random_simplex(&mut rng, 3)).collect();
        let y: Vec<_> = (0..4).map(|_| random_simplex(&mut rng, 3)).collect();
        assert!((loss_pl(&p, &y).unwrap() - loss_pl_oracle(&p, &y)).abs() < 1e-10);
    }

    #[test]
    fn loss_kd_examples() {
        let p = vec![0.2, 0.3, 0.5];
        assert!(loss_kd(&p, &p).unwrap().abs() < 1e-15);
        assert!((loss_kd(&[0.5, 0.5], &[1.0, 0.0]).unwrap() - LN2).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_simplex(&mut rng, 5);
        let y = random_simplex(&mut rng, 5);
        let oracle: f64 = (0..5).map(|c| y[c] * (y[c] / p[c]).ln()).sum();
        assert!((loss_kd(&p, &y).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn total_reduces_to_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = BatchPredictions {
            student_probs: vec![random_simplex(&mut rng, 4)],
            pseudo_labels: vec![random_simplex(&mut rng, 4)],
            student_probs_aug: vec![random_simplex(&mut rng, 4)],
        };
        let pl = loss_pl(&batch.student_probs, &batch.pseudo_labels).unwrap();
        let kd = loss_kd(&batch.student_probs_aug[0], &batch.pseudo_labels[0]).unwrap();
        assert_eq!(loss_total(&batch, 0.0).unwrap(), pl);
        assert!((loss_total(&batch, 1.0).unwrap() - (pl + kd)).abs() < 1e-14);
        let mut bad = batch.clone();
        bad.student_probs_aug.push(vec![0.25; 4]);
        assert!(matches!(loss_total(&bad, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn loss_pl_with_self_labels_is_conditional_minus_marginal_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p: Vec<_> = (0..8).map(|_| random_simplex(&mut rng, 5)).collect();
        let cond: f64 = p.iter().map(|r| entropy(r)).sum::<f64>() / 8.0;
        let marg = entropy(&marginal(&p));
        assert!((loss_pl(&p, &p).unwrap() - (cond - marg)).abs() < 1e-8);
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn logit_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let y: Vec<_> = (0..3).map(|_| random_simplex(&mut rng, 4)).collect();
        let f = |l: &[Vec<f64>]| {
            let p: Vec<_> = l.iter().map(|r| softmax(r)).collect();
            loss_pl(&p, &y).unwrap()
        };
        let p: Vec<_> = logits.iter().map(|r| softmax(r)).collect();
        let (_, gp) = loss_pl_with_grad(&p, &y).unwrap();
        let h = 1e-5;
        for i in 0..3 {
            let gl = softmax_backward(&p[i], &gp[i]);
            for c in 0..4 {
                let mut a = logits.clone();
                a[i][c] += h;
                let mut b = logits.clone();
                b[i][c] -= h;
                let fd = (f(&a) - f(&b)) / (2.0 * h);
                assert!(rel_err(fd, gl[c]) < 1e-4, "pl {i},{c}: {fd} vs {}", gl[c]);
            }
        }
        let l: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y = random_simplex(&mut rng, 5);
        let p = softmax(&l);
        let (_, gp) = loss_kd_with_grad(&p, &y).unwrap();
        let gl = softmax_backward(&p, &gp);
        for c in 0..5 {
            let mut a = l.clone();
            a[c] += h;
            let mut b = l.clone();
            b[c] -= h;
            let fd = (loss_kd(&softmax(&a), &y).unwrap() - loss_kd(&softmax(&b), &y).unwrap()) / (2.0 * h);
            assert!(rel_err(fd, gl[c]) < 1e-4);
            // KL gradient w.r.t. logits is p - y.
            assert!((gl[c] - (p[c] - y[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn mi_identity_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p: Vec<_> = (0..6).map(|_| random_simplex(&mut rng, 3)).collect();
        let same = DiscreteInstance::uniform(p.clone(), p.clone());
        let t = information_terms(&same).unwrap();
        assert!(t.conditional_kl.abs() < 1e-12);
        assert!(verify_mi_identity(&same).unwrap() < 1e-10);

        let row = random_simplex(&mut rng, 3);
        let indep = DiscreteInstance::uniform(vec![row.clone(); 5], (0..5).map(|_| random_simplex(&mut rng, 3)).collect());
        let t = information_terms(&indep).unwrap();
        assert!(t.mutual_information.abs() < 1e-12);
        assert!(verify_mi_identity(&indep).unwrap() < 1e-10);
    }

    #[test]
    fn mi_identity_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let inst = DiscreteInstance::uniform(
                (0..8).map(|_| random_simplex(&mut rng, 4)).collect(),
                (0..8).map(|_| random_simplex(&mut rng, 4)).collect(),
            );
            assert!(verify_mi_identity(&inst).unwrap() < 1e-9);
        }
    }

    fn simplex_rows(b: usize, k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-4.0f64..4.0, k), b)
            .prop_map(|rows| rows.iter().map(|r| softmax(r)).collect())
    }

    proptest! {
        #[test]
        fn kd_is_nonnegative(rows in simplex_rows(2, 6)) {
            let v = loss_kd(&rows[0], &rows[1]).unwrap();
            prop_assert!(v >= -1e-12);
            prop_assert!(loss_kd(&rows[0], &rows[0]).unwrap().abs() < 1e-12);
        }

        #[test]
        fn pl_bounded_below_by_neg_log_k(rows in simplex_rows(5, 4)) {
            // One-hot rows give a zero flipped cross-entropy term.
            let hard: Vec<Vec<f64>> = rows.iter().map(|r| {
                let k = crate::tensor::argmax(r);
                (0..4).map(|c| if c == k { 1.0 } else { 0.0 }).collect()
            }).collect();
            let v = loss_pl(&hard, &hard).unwrap();
            prop_assert!(v >= -(4.0f64).ln() - 1e-12);
        }
    }
}
