//! Training objectives: source cross-entropy, temperature distillation, the
//! adversarial discriminator/generator pair, their combinations for target
//! adaptation, and the MMD / CORAL / gradient-reversal alignment losses used
//! by the baselines.
//!
//! Every batch expectation is reduced with a per-example mean.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Arguments of `log` are floored here so saturated probabilities stay finite.
pub const LOG_FLOOR: f64 = 1e-12;

/// A scalar loss still attached to its graph, plus its finite value.
#[derive(Clone, Debug)]
pub struct LossValue {
    tensor: Tensor,
    value: f64,
}

impl LossValue {
    pub fn new(name: &str, tensor: Tensor) -> Result<Self> {
        if tensor.numel() != 1 {
            return Err(Error::NonScalarLoss(tensor.shape().to_vec()));
        }
        let value = tensor.item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                what: format!("{name} loss ({value})"),
                at: "forward".into(),
            });
        }
        Ok(LossValue { tensor, value })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn backward(&self) -> Result<()> {
        self.tensor.backward()
    }

    /// Unweighted sum of two losses.
    pub fn plus(&self, other: &LossValue, name: &str) -> Result<LossValue> {
        LossValue::new(name, self.tensor.add(&other.tensor)?)
    }

    pub fn scaled(&self, weight: f64, name: &str) -> Result<LossValue> {
        LossValue::new(name, self.tensor.scale(weight))
    }
}

/// Distillation temperature, strictly positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(t: f64) -> Result<Self> {
        if t > 0.0 && t.is_finite() {
            Ok(Temperature(t))
        } else {
            Err(Error::invalid(format!(
                "temperature must be positive and finite, got {t}"
            )))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

fn batch_logits(logits: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *logits.shape() {
        [b, k] if b > 0 && k > 0 => Ok((b, k)),
        _ => Err(Error::Shape {
            op,
            shapes: vec![logits.shape().to_vec()],
        }),
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut v = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid(format!(
                "label {y} at row {i} is outside [0, {classes})"
            )));
        }
        v[i * classes + y] = 1.0;
    }
    Tensor::new([labels.len(), classes], v)
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn source_ce(logits: &Tensor, labels: &[usize]) -> Result<LossValue> {
    let (b, k) = batch_logits(logits, "source_ce")?;
    if labels.len() != b {
        return Err(Error::invalid(format!(
            "source_ce: {} labels for {b} rows of logits",
            labels.len()
        )));
    }
    let target = one_hot(labels, k)?;
    let picked = logits.log_softmax(1)?.mul(&target)?.sum_axis(1)?;
    LossValue::new("source_ce", picked.mean()?.neg())
}

/// `t^2 * mean_b sum_k -softmax(teacher/t)_k * log softmax(student/t)_k`.
///
/// The teacher logits are detached: only the student receives gradient.
pub fn kd_loss(teacher: &Tensor, student: &Tensor, t: Temperature) -> Result<LossValue> {
    batch_logits(student, "kd_loss")?;
    if teacher.shape() != student.shape() {
        return Err(Error::Shape {
            op: "kd_loss",
            shapes: vec![teacher.shape().to_vec(), student.shape().to_vec()],
        });
    }
    let t = t.get();
    let soft_teacher = teacher.detach().scale(1.0 / t).softmax(1)?;
    let log_student = student.scale(1.0 / t).log_softmax(1)?;
    let cross = soft_teacher.mul(&log_student)?.sum_axis(1)?.mean()?.neg();
    LossValue::new("kd", cross.scale(t * t))
}

fn check_probabilities(p: &Tensor, op: &'static str) -> Result<()> {
    if p.shape().len() != 1 || p.numel() == 0 {
        return Err(Error::Shape {
            op,
            shapes: vec![p.shape().to_vec()],
        });
    }
    if let Some(bad) = p.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("{op}: {bad} is not a probability")));
    }
    Ok(())
}

fn neg_log_mean(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp_min(LOG_FLOOR).log()?.mean()?.neg())
}

/// Discriminator objective with source labelled 1 and target labelled 0:
/// `mean(-log D(src)) + mean(-log(1 - D(tgt)))`.
pub fn dis_loss(d_on_source: &Tensor, d_on_target: &Tensor) -> Result<LossValue> {
    check_probabilities(d_on_source, "dis_loss")?;
    check_probabilities(d_on_target, "dis_loss")?;
    let src = neg_log_mean(d_on_source)?;
    let tgt = neg_log_mean(&d_on_target.neg().add_scalar(1.0))?;
    LossValue::new("dis", src.add(&tgt)?)
}

/// Generator objective with inverted labels: `mean(-log D(tgt))`.
pub fn gen_loss(d_on_target: &Tensor) -> Result<LossValue> {
    check_probabilities(d_on_target, "gen_loss")?;
    LossValue::new("gen", neg_log_mean(d_on_target)?)
}

/// Target-encoder objective: adversarial term plus distillation, unweighted.
pub fn target_objective(gen: &LossValue, kd: &LossValue) -> Result<LossValue> {
    gen.plus(kd, "target")
}

/// Supervised alternative: adversarial term plus source cross-entropy
/// computed through the target encoder.
pub fn target_objective_supervised(
    gen: &LossValue,
    source_logits_via_target: &Tensor,
    labels: &[usize],
) -> Result<LossValue> {
    let ce = source_ce(source_logits_via_target, labels)?;
    gen.plus(&ce, "target_supervised")
}

fn check_reps(a: &Tensor, b: &Tensor, op: &'static str, min_rows: usize) -> Result<()> {
    match (a.shape(), b.shape()) {
        ([n, d], [m, d2]) if d == d2 => {
            if *n < min_rows || *m < min_rows {
                Err(Error::invalid(format!(
                    "{op}: batches need at least {min_rows} rows, got {n} and {m}"
                )))
            } else {
                Ok(())
            }
        }
        _ => Err(Error::Shape {
            op,
            shapes: vec![a.shape().to_vec(), b.shape().to_vec()],
        }),
    }
}

/// Median of pairwise squared distances over the joint batch (distinct
/// pairs), returned as a bandwidth `sigma = sqrt(median)`. Falls back to 1.0
/// when every point coincides.
pub fn median_bandwidth(source: &Tensor, target: &Tensor) -> Result<f64> {
    let joint = Tensor::concat(&[source.detach(), target.detach()], 0)?;
    let n = joint.shape()[0];
    let d = joint.pairwise_sq_dist(&joint)?.to_vec();
    let mut off_diag: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| d[i * n + j])
        .collect();
    if off_diag.is_empty() {
        return Ok(1.0);
    }
    off_diag.sort_by(f64::total_cmp);
    let m = off_diag.len();
    let median = if m % 2 == 1 {
        off_diag[m / 2]
    } else {
        0.5 * (off_diag[m / 2 - 1] + off_diag[m / 2])
    };
    Ok(if median > 0.0 { median.sqrt() } else { 1.0 })
}

/// Biased MMD^2 estimate with Gaussian kernels
/// `k(a, b) = exp(-|a - b|^2 / (2 sigma^2))`, summed over `sigmas`.
pub fn mmd_gaussian(source: &Tensor, target: &Tensor, sigmas: &[f64]) -> Result<LossValue> {
    check_reps(source, target, "mmd_gaussian", 1)?;
    if sigmas.is_empty() || sigmas.iter().any(|s| s.is_nan() || *s <= 0.0) {
        return Err(Error::invalid(
            "mmd_gaussian: bandwidths must be positive and non-empty",
        ));
    }
    let dss = source.pairwise_sq_dist(source)?;
    let dtt = target.pairwise_sq_dist(target)?;
    let dst = source.pairwise_sq_dist(target)?;
    let mut total: Option<Tensor> = None;
    for &sigma in sigmas {
        let c = -1.0 / (2.0 * sigma * sigma);
        let kss = dss.scale(c).exp().mean()?;
        let ktt = dtt.scale(c).exp().mean()?;
        let kst = dst.scale(c).exp().mean()?;
        let term = kss.add(&ktt)?.sub(&kst.scale(2.0))?;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    LossValue::new("mmd", total.expect("at least one bandwidth"))
}

/// Sample covariance `[h, h]` with `1/(n-1)` normalisation.
pub fn covariance(x: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    let centered = x.add_bias(&x.mean_axis(0)?.neg())?;
    Ok(centered.transpose()?.matmul(&centered)?.scale(1.0 / (n as f64 - 1.0)))
}

/// `|C_s - C_t|_F^2 / (4 h^2)`.
pub fn coral_loss(source: &Tensor, target: &Tensor) -> Result<LossValue> {
    check_reps(source, target, "coral_loss", 2)?;
    let h = source.shape()[1] as f64;
    let diff = covariance(source)?.sub(&covariance(target)?)?;
    LossValue::new("coral", diff.mul(&diff)?.sum().scale(1.0 / (4.0 * h * h)))
}

/// Identity forward; backward multiplies the gradient by `-lambda`. Insert
/// between the encoder output and the domain classifier.
pub fn reverse_gradient(rep: &Tensor, lambda: f64) -> Result<Tensor> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::invalid(format!(
            "gradient reversal lambda must be >= 0, got {lambda}"
        )));
    }
    Ok(rep.grad_reverse(lambda))
}

/// Classification loss plus a domain loss computed on reversed
/// representations (see [`reverse_gradient`]).
pub fn dann_objective(class_loss: &LossValue, domain_loss: &LossValue) -> Result<LossValue> {
    class_loss.plus(domain_loss, "dann")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn logits(rows: &[[f64; 2]]) -> Tensor {
        Tensor::new([rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn cross_entropy_values() {
        assert_abs_diff_eq!(
            source_ce(&logits(&[[0.0, 0.0]]), &[0]).unwrap().value(),
            std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        let sat = source_ce(&logits(&[[10.0, -10.0]]), &[0]).unwrap().value();
        assert_abs_diff_eq!(sat, 2.061153622e-9, epsilon = 1e-15);
        let both = source_ce(&logits(&[[0.0, 0.0], [10.0, -10.0]]), &[0, 0])
            .unwrap()
            .value();
        assert_abs_diff_eq!(both, 0.346574, epsilon = 1e-6);
        assert!(source_ce(&logits(&[[0.0, 0.0]]), &[2]).is_err());
        assert!(source_ce(&logits(&[[0.0, 0.0]]), &[0, 1]).is_err());
    }

    #[test]
    fn distillation_values() {
        let z = logits(&[[0.0, 0.0]]);
        let t1 = Temperature::new(1.0).unwrap();
        let t2 = Temperature::new(2.0).unwrap();
        assert_abs_diff_eq!(
            kd_loss(&z, &z, t1).unwrap().value(),
            std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(kd_loss(&z, &z, t2).unwrap().value(), 2.772589, epsilon = 1e-6);
        let kd = kd_loss(&logits(&[[2.0, 0.0]]), &logits(&[[0.0, 2.0]]), t1).unwrap();
        // p = softmax([2,0]), log q = log_softmax([0,2]), -sum p log q
        assert_abs_diff_eq!(kd.value(), 1.888_522_166_998_737, epsilon = 1e-12);
        assert!(kd_loss(&z, &logits(&[[0.0, 0.0], [1.0, 1.0]]), t1).is_err());
        assert!(Temperature::new(0.0).is_err());
    }

    #[test]
    fn distillation_detaches_teacher() {
        let teacher = Tensor::param([1, 2], vec![2.0, 0.0]).unwrap();
        let student = Tensor::param([1, 2], vec![0.0, 2.0]).unwrap();
        kd_loss(&teacher, &student, Temperature::new(3.0).unwrap())
            .unwrap()
            .backward()
            .unwrap();
        assert!(teacher.grad().is_none());
        assert!(student.grad().is_some());
    }

    #[test]
    fn adversarial_values() {
        let half = Tensor::vector(vec![0.5; 4]);
        assert_abs_diff_eq!(
            dis_loss(&half, &half).unwrap().value(),
            2.0 * 2f64.ln(),
            epsilon = 1e-12
        );
        let good = dis_loss(&Tensor::vector(vec![0.99]), &Tensor::vector(vec![0.01])).unwrap();
        assert_abs_diff_eq!(good.value(), -2.0 * 0.99f64.ln(), epsilon = 1e-12);
        let bad = dis_loss(&Tensor::vector(vec![0.01]), &Tensor::vector(vec![0.99])).unwrap();
        assert_abs_diff_eq!(bad.value(), -2.0 * 0.01f64.ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(gen_loss(&half).unwrap().value(), 2f64.ln(), epsilon = 1e-12);
        assert!(gen_loss(&Tensor::vector(vec![1.0 - 1e-15])).unwrap().value() < 1e-12);
        assert!(gen_loss(&Tensor::vector(vec![1e-6])).unwrap().value() > 13.0);
        assert!(gen_loss(&Tensor::vector(vec![1.5])).is_err());
    }

    #[test]
    fn saturated_probabilities_stay_finite() {
        let v = dis_loss(&Tensor::vector(vec![0.0]), &Tensor::vector(vec![1.0])).unwrap();
        assert_abs_diff_eq!(v.value(), -2.0 * LOG_FLOOR.ln(), epsilon = 1e-9);
    }

    #[test]
    fn combined_objectives() {
        let gen = gen_loss(&Tensor::vector(vec![0.5])).unwrap();
        let z = logits(&[[0.0, 0.0]]);
        let zero_kd = LossValue::new("kd", Tensor::scalar(0.0)).unwrap();
        assert_abs_diff_eq!(
            target_objective(&gen, &zero_kd).unwrap().value(),
            std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        let kd = kd_loss(&z, &z, Temperature::new(2.0).unwrap()).unwrap();
        assert_abs_diff_eq!(target_objective(&gen, &kd).unwrap().value(), 3.465736, epsilon = 1e-6);
        let perfect = logits(&[[40.0, -40.0]]);
        let sup = target_objective_supervised(&gen, &perfect, &[0]).unwrap();
        assert_abs_diff_eq!(sup.value(), gen.value(), epsilon = 1e-12);
    }

    #[test]
    fn mmd_values() {
        let x = Tensor::new([1, 1], vec![0.0]).unwrap();
        let y = Tensor::new([1, 1], vec![1.0]).unwrap();
        let v = mmd_gaussian(&x, &y, &[1.0]).unwrap().value();
        assert_abs_diff_eq!(v, 2.0 - 2.0 * (-0.5f64).exp(), epsilon = 1e-12);
        let b = Tensor::new([3, 2], vec![0.1, 0.2, -0.3, 0.4, 1.0, 0.0]).unwrap();
        assert!(mmd_gaussian(&b, &b, &[0.5, 2.0]).unwrap().value().abs() < 1e-12);
        assert!(mmd_gaussian(&Tensor::zeros([0, 2]), &b, &[1.0]).is_err());
    }

    #[test]
    fn coral_values() {
        let s = Tensor::new([2, 1], vec![-1.0, 1.0]).unwrap();
        let t = Tensor::new([2, 1], vec![0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(coral_loss(&s, &t).unwrap().value(), 1.0, epsilon = 1e-12);
        let s2 = Tensor::new([2, 1], vec![-2.0, 2.0]).unwrap();
        assert_abs_diff_eq!(coral_loss(&s2, &t).unwrap().value(), 16.0, epsilon = 1e-12);
        assert!(coral_loss(&s, &s).unwrap().value().abs() < 1e-12);
        let one = Tensor::new([1, 1], vec![0.0]).unwrap();
        assert!(coral_loss(&one, &t).is_err());
    }

    #[test]
    fn median_bandwidth_of_line() {
        let s = Tensor::new([2, 1], vec![0.0, 1.0]).unwrap();
        let t = Tensor::new([1, 1], vec![3.0]).unwrap();
        // distances^2: 1, 9, 4 -> median 4
        assert_abs_diff_eq!(median_bandwidth(&s, &t).unwrap(), 2.0, epsilon = 1e-15);
        let same = Tensor::new([2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(median_bandwidth(&same, &same).unwrap(), 1.0);
    }

    #[test]
    fn reversal_rejects_negative_lambda() {
        assert!(reverse_gradient(&Tensor::scalar(1.0), -0.5).is_err());
    }
}
