//! Central finite-difference checks of every differentiable primitive and
//! loss. Each case builds random `f64` inputs, reduces the output to a
//! scalar through a fixed random weighting, and compares the analytic
//! gradient with `(f(x + h) - f(x - h)) / 2h` for every input element.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::Result;
use crate::losses::{
    coral_loss, dis_loss, gen_loss, kd_loss, mmd_gaussian, reverse_gradient, source_ce, target_objective,
    target_objective_supervised, Temperature,
};
use crate::rng::stream;

/// Finite-difference step.
pub const STEP: f64 = 1e-6;

/// How input values are drawn.
#[derive(Clone, Copy, Debug)]
pub enum Domain {
    /// Uniform on `[-1, 1]`.
    Symmetric,
    /// Uniform on `[0.5, 2]`, for logarithms.
    Positive,
    /// Uniform on `[-1, 1]` but at least 0.05 away from 0, so kinks at zero
    /// are never straddled by the difference stencil.
    AwayFromZero,
}

impl Domain {
    fn draw(self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Domain::Symmetric => rng.gen_range(-1.0..1.0),
            Domain::Positive => rng.gen_range(0.5..2.0),
            Domain::AwayFromZero => {
                let m = rng.gen_range(0.05..1.0);
                if rng.gen::<bool>() {
                    m
                } else {
                    -m
                }
            }
        }
    }
}

type Build = fn(&[Tensor]) -> Result<Tensor>;

/// A named differentiable function of some input tensors.
pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<(Vec<usize>, Domain)>,
    pub build: Build,
    /// The analytic gradient should equal this multiple of the numerical
    /// one (1 everywhere except gradient reversal).
    pub expected_ratio: f64,
}

fn case(name: &'static str, inputs: &[(&[usize], Domain)], build: Build) -> Case {
    Case {
        name,
        inputs: inputs.iter().map(|(s, d)| (s.to_vec(), *d)).collect(),
        build,
        expected_ratio: 1.0,
    }
}

#[derive(Clone, Debug)]
pub struct Report {
    pub name: &'static str,
    pub points: usize,
    /// Largest `|analytic - ratio * numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
}

fn weighted_scalar(out: &Tensor, weights: &Tensor) -> Result<Tensor> {
    Ok(out.mul(weights)?.sum())
}

/// Checks `case` at `points` random inputs drawn from `seed`.
pub fn check(case: &Case, points: usize, seed: u64) -> Result<Report> {
    let mut rng = stream(seed, &[case.name.len() as u64, case.name.bytes().map(u64::from).sum()]);
    let mut worst = 0.0f64;
    for _ in 0..points {
        let inputs: Vec<Tensor> = case
            .inputs
            .iter()
            .map(|(shape, dom)| {
                let n = shape.iter().product();
                Tensor::param(shape.clone(), (0..n).map(|_| dom.draw(&mut rng)).collect())
            })
            .collect::<Result<_>>()?;
        let out = (case.build)(&inputs)?;
        let weights = Tensor::new(
            out.shape().to_vec(),
            (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?;
        weighted_scalar(&out, &weights)?.backward()?;
        for x in &inputs {
            let analytic = x.grad_or_zeros();
            for (i, &a) in analytic.iter().enumerate() {
                let orig = x.values()[i];
                x.values_mut()[i] = orig + STEP;
                let up = weighted_scalar(&(case.build)(&inputs)?, &weights)?.item();
                x.values_mut()[i] = orig - STEP;
                let down = weighted_scalar(&(case.build)(&inputs)?, &weights)?.item();
                x.values_mut()[i] = orig;
                let numeric = case.expected_ratio * (up - down) / (2.0 * STEP);
                let scale = a.abs().max(numeric.abs()).max(1.0);
                worst = worst.max((a - numeric).abs() / scale);
            }
        }
    }
    Ok(Report {
        name: case.name,
        points,
        max_rel_error: worst,
    })
}

use Domain::{AwayFromZero as Kinked, Positive as Pos, Symmetric as Sym};

fn teacher() -> Result<Tensor> {
    Tensor::new(
        [4, 3],
        vec![1.5, -0.5, 0.2, -2.0, 0.3, 1.1, 0.0, 0.0, 0.4, 2.5, -1.0, -1.5],
    )
}

fn ids() -> Vec<usize> {
    vec![2, 0, 3, 2, 1, 4, 0]
}

/// Every primitive and loss the training code differentiates through.
pub fn suite() -> Vec<Case> {
    let mut cases = vec![
        case("add", &[(&[2, 3], Sym), (&[2, 3], Sym)], |x| x[0].add(&x[1])),
        case("sub", &[(&[2, 3], Sym), (&[2, 3], Sym)], |x| x[0].sub(&x[1])),
        case("mul", &[(&[2, 3], Sym), (&[2, 3], Sym)], |x| x[0].mul(&x[1])),
        case("add_bias", &[(&[3, 4], Sym), (&[4], Sym)], |x| x[0].add_bias(&x[1])),
        case("matmul", &[(&[3, 4], Sym), (&[4, 2], Sym)], |x| x[0].matmul(&x[1])),
        case("transpose", &[(&[2, 3], Sym)], |x| x[0].transpose()),
        case("reshape", &[(&[2, 3], Sym)], |x| x[0].reshape([3, 2])),
        case("scale", &[(&[5], Sym)], |x| Ok(x[0].scale(-2.5))),
        case("add_scalar", &[(&[5], Sym)], |x| Ok(x[0].add_scalar(0.7))),
        case("relu", &[(&[6], Kinked)], |x| Ok(x[0].relu())),
        case("leaky_relu", &[(&[6], Kinked)], |x| Ok(x[0].leaky_relu(0.01))),
        case("sigmoid", &[(&[6], Sym)], |x| Ok(x[0].scale(4.0).sigmoid())),
        case("exp", &[(&[6], Sym)], |x| Ok(x[0].exp())),
        case("log", &[(&[6], Pos)], |x| x[0].log()),
        case("clamp_min", &[(&[6], Kinked)], |x| Ok(x[0].clamp_min(0.0))),
        case("sum", &[(&[2, 3], Sym)], |x| Ok(x[0].sum())),
        case("mean", &[(&[2, 3], Sym)], |x| x[0].mean()),
        case("sum_axis0", &[(&[3, 4], Sym)], |x| x[0].sum_axis(0)),
        case("sum_axis1", &[(&[3, 4], Sym)], |x| x[0].sum_axis(1)),
        case("mean_axis0", &[(&[3, 4], Sym)], |x| x[0].mean_axis(0)),
        case("mean_axis1", &[(&[3, 4], Sym)], |x| x[0].mean_axis(1)),
        case("softmax", &[(&[3, 4], Sym)], |x| x[0].scale(3.0).softmax(1)),
        case("softmax_axis0", &[(&[3, 4], Sym)], |x| x[0].softmax(0)),
        case("log_softmax", &[(&[3, 4], Sym)], |x| x[0].scale(3.0).log_softmax(1)),
        case("gather_rows", &[(&[5, 3], Sym)], |x| x[0].gather_rows(&ids())),
        case("segment_mean", &[(&[7, 3], Sym)], |x| x[0].segment_mean(&[0, 2, 3, 7])),
        case("embedding_bag", &[(&[5, 3], Sym)], |x| {
            x[0].gather_rows(&ids())?.segment_mean(&[0, 3, 7])
        }),
        case("concat_rows", &[(&[2, 3], Sym), (&[1, 3], Sym)], |x| {
            Tensor::concat(&[x[0].clone(), x[1].clone()], 0)
        }),
        case("concat_cols", &[(&[2, 3], Sym), (&[2, 1], Sym)], |x| {
            Tensor::concat(&[x[0].clone(), x[1].clone()], 1)
        }),
        case("pairwise_sq_dist", &[(&[3, 2], Sym), (&[4, 2], Sym)], |x| {
            x[0].pairwise_sq_dist(&x[1])
        }),
        case("source_ce", &[(&[4, 3], Sym)], |x| {
            Ok(source_ce(&x[0].scale(3.0), &[0, 2, 1, 2])?.tensor().clone())
        }),
        // The teacher side is detached by design, so it is a constant here.
        case("kd_loss_t1", &[(&[4, 3], Sym)], |x| {
            Ok(kd_loss(&teacher()?, &x[0].scale(3.0), Temperature::new(1.0)?)?
                .tensor()
                .clone())
        }),
        case("kd_loss_t20", &[(&[4, 3], Sym)], |x| {
            let t = Temperature::new(20.0)?;
            Ok(kd_loss(&teacher()?.scale(10.0), &x[0].scale(10.0), t)?.tensor().clone())
        }),
        case("dis_loss", &[(&[4], Sym), (&[3], Sym)], |x| {
            Ok(dis_loss(&x[0].scale(3.0).sigmoid(), &x[1].scale(3.0).sigmoid())?
                .tensor()
                .clone())
        }),
        case("gen_loss", &[(&[4], Sym)], |x| {
            Ok(gen_loss(&x[0].scale(3.0).sigmoid())?.tensor().clone())
        }),
        case("target_objective", &[(&[3], Sym), (&[4, 3], Sym)], |x| {
            let gen = gen_loss(&x[0].sigmoid())?;
            let kd = kd_loss(&teacher()?, &x[1], Temperature::new(2.0)?)?;
            Ok(target_objective(&gen, &kd)?.tensor().clone())
        }),
        case("target_objective_supervised", &[(&[3], Sym), (&[3, 2], Sym)], |x| {
            let gen = gen_loss(&x[0].sigmoid())?;
            Ok(target_objective_supervised(&gen, &x[1].scale(2.0), &[1, 0, 1])?
                .tensor()
                .clone())
        }),
        case("mmd_gaussian", &[(&[3, 2], Sym), (&[4, 2], Sym)], |x| {
            Ok(mmd_gaussian(&x[0], &x[1], &[0.7, 1.5])?.tensor().clone())
        }),
        case("coral_loss", &[(&[4, 3], Sym), (&[5, 3], Sym)], |x| {
            Ok(coral_loss(&x[0].scale(2.0), &x[1])?.tensor().clone())
        }),
    ];
    let mut reversal = case("dann_reversal", &[(&[3, 2], Sym)], |x| {
        // domain loss of a fixed linear domain classifier on reversed features
        let w = Tensor::new([2, 1], vec![0.9, -1.3])?;
        let p = reverse_gradient(&x[0], 0.5)?.matmul(&w)?.reshape([3])?.sigmoid();
        Ok(gen_loss(&p)?.tensor().clone())
    });
    // Only the feature gradient is reversed; the classifier weights keep the
    // ordinary gradient. Check the features here and the weights below.
    reversal.expected_ratio = -0.5;
    cases.push(reversal);
    cases.push(case("dann_classifier_side", &[(&[2, 1], Sym)], |x| {
        let rep = Tensor::new([3, 2], vec![0.3, -0.2, 0.8, 0.1, -0.5, 0.4])?;
        let p = reverse_gradient(&rep, 0.5)?.matmul(&x[0])?.reshape([3])?.sigmoid();
        Ok(gen_loss(&p)?.tensor().clone())
    }));
    cases
}

/// Runs the whole suite.
pub fn run_suite(points: usize, seed: u64) -> Result<Vec<Report>> {
    suite().iter().map(|c| check(c, points, seed)).collect()
}
