//! Independent reference computations: finite-difference gradients, a
//! Jacobi eigenvalue solver, and the projector and stability suites run by
//! the `oracle` subcommand and the test suite.

use crate::data::synthetic::{gaussian_blobs, ring_centres};
use crate::data::{TaskSequence, TaskView};
use crate::distill::{fd_loss_and_grads, TeacherExtractor};
use crate::error::{Error, Result};
use crate::harness::{train_task, AbsorbMode, Method, Optimizer, TaskContext};
use crate::nn::{softmax_cross_entropy, Architecture, ConvBlock, Gradients, Network, NetworkSpec};
use crate::objective::{plain_loss_and_grads, LossComponents};
use crate::owm::{projector_direct_from_columns, Projector};
use crate::rng::RngState;
use crate::ssl::{saa_loss_and_grads, ssl_loss_and_grads, SslConfig, Strategy, TransformSet};
use crate::tensor::{matvec, Tensor};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
const FD_FLOOR: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, 1e-4)`, maximised over entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `params`.
pub fn numeric_gradient(params: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p)?;
        p[i] = orig - h;
        let down = f(&p)?;
        p[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Compares the gradients returned by `objective` with central differences
/// of its total loss over every network parameter.
pub fn check_network_gradient(
    net: &Network,
    mut objective: impl FnMut(&mut Network) -> Result<(LossComponents, Gradients)>,
) -> Result<f64> {
    let mut work = net.clone();
    let analytic = objective(&mut work)?.1.flatten();
    let params = net.flat_params();
    let numeric = numeric_gradient(&params, FD_STEP, |p| {
        work.set_flat_params(p)?;
        Ok(objective(&mut work)?.0.total)
    })?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(a: &Tensor) -> Result<Vec<f64>> {
    let (n, m) = a.dims2()?;
    if n != m {
        return Err(Error::dim("symmetric_eigenvalues", a.shape(), &[n, n]));
    }
    let mut s: Vec<f64> = a.data().to_vec();
    let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| s[i * n + j] * s[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = s[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (s[q * n + q] - s[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = s[k * n + p];
                    let akq = s[k * n + q];
                    s[k * n + p] = c * akp - sn * akq;
                    s[k * n + q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = s[p * n + k];
                    let aqk = s[q * n + k];
                    s[p * n + k] = c * apk - sn * aqk;
                    s[q * n + k] = sn * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| s[i * n + i]).collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorSuiteOutcome {
    pub cases: usize,
    /// Worst relative Frobenius error between recursion and direct formula.
    pub max_equivalence_error: f64,
    /// Worst `|P − Pᵀ|` entry seen after any update.
    pub max_asymmetry: f64,
    /// Most negative eigenvalue and largest eigenvalue seen.
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
}

/// Random cases of dimension ≤ `max_dim` with ≤ `max_means` batch means:
/// the recursion from `I` against the direct formula with `ε = 1`.
pub fn projector_suite(cases: usize, max_dim: usize, max_means: usize, seed: u64) -> Result<ProjectorSuiteOutcome> {
    let mut rng = RngState::new(seed);
    let mut out = ProjectorSuiteOutcome {
        cases,
        max_equivalence_error: 0.0,
        max_asymmetry: 0.0,
        min_eigenvalue: f64::INFINITY,
        max_eigenvalue: f64::NEG_INFINITY,
    };
    for case in 0..cases {
        let dim = 1 + (rng.next_u64() % max_dim as u64) as usize;
        let count = (rng.next_u64() % (max_means as u64 + 1)) as usize;
        let scale = 0.1 + 2.0 * rng.uniform();
        let means: Vec<Vec<f64>> = (0..count)
            .map(|_| (0..dim).map(|_| scale * rng.normal()).collect())
            .collect();
        let mut proj = Projector::identity(dim);
        for m in &means {
            proj.update(m)?;
        }
        let direct = projector_direct_from_columns(dim, &means, 1.0)?;
        let err = proj.matrix().sub(&direct)?.frobenius_norm() / direct.frobenius_norm();
        out.max_equivalence_error = out.max_equivalence_error.max(err);
        out.max_asymmetry = out.max_asymmetry.max(proj.matrix().asymmetry()?);
        // Spectrum checks are the costly part; sample every fourth case.
        if case % 4 == 0 {
            let eig = symmetric_eigenvalues(proj.matrix())?;
            out.min_eigenvalue = out.min_eigenvalue.min(eig[0]);
            out.max_eigenvalue = out.max_eigenvalue.max(eig[dim - 1]);
        }
    }
    Ok(out)
}

/// One named finite-difference check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientCase {
    pub name: &'static str,
    pub params: usize,
    pub max_relative_error: f64,
}

fn random_batch(shape: &[usize], batch: usize, rng: &mut RngState) -> Tensor {
    let mut full = vec![batch];
    full.extend_from_slice(shape);
    let n: usize = full.iter().product();
    Tensor::new(full, (0..n).map(|_| rng.normal()).collect()).expect("finite draws")
}

fn conv_spec(input: [usize; 3], block: ConvBlock, hidden: usize, classes: usize, proxy: usize) -> Result<NetworkSpec> {
    Architecture {
        input,
        conv: vec![block],
        hidden: vec![hidden],
        classes,
        proxy_outputs: proxy,
    }
    .network_spec()
}

/// Finite-difference checks for every layer kind and every training loss.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradientCase>> {
    let mut rng = RngState::new(seed);
    let mut cases = Vec::new();
    let batch = 3;

    // conv (k=2) → ReLU → avg-pool → FC → ReLU, 3×5×5 input.
    let pooled = conv_spec(
        [3, 5, 5],
        ConvBlock {
            out_channels: 2,
            kernel: 2,
            stride: 1,
            padding: 0,
            pool: 2,
        },
        4,
        3,
        4,
    )?;
    // Padded, strided conv without pooling; six proxy outputs for channel
    // permutations.
    let strided = conv_spec(
        [3, 4, 4],
        ConvBlock {
            out_channels: 2,
            kernel: 3,
            stride: 2,
            padding: 1,
            pool: 0,
        },
        3,
        3,
        6,
    )?;
    let mlp = Architecture {
        input: [1, 2, 2],
        conv: Vec::new(),
        hidden: vec![5, 4],
        classes: 3,
        proxy_outputs: 4,
    }
    .network_spec()?;

    let mut record = |name: &'static str, net: &Network, err: f64| {
        cases.push(GradientCase {
            name,
            params: net.num_params(),
            max_relative_error: err,
        })
    };

    for (name, spec) in [("fc+relu, class CE", &mlp), ("conv+relu+avgpool, class CE", &pooled), ("strided padded conv, class CE", &strided)] {
        let net = Network::init(spec, &mut rng)?;
        let x = random_batch(&spec.input, batch, &mut rng);
        let y = vec![0, 2, 1];
        let err = check_network_gradient(&net, |n| plain_loss_and_grads(n, &x, &y, None))?;
        record(name, &net, err);
    }

    let net = Network::init(&pooled, &mut rng)?;
    let x = random_batch(&pooled.input, batch, &mut rng);
    let y = vec![1, 0, 1];
    let err = check_network_gradient(&net, |n| plain_loss_and_grads(n, &x, &y, Some(&[0, 1])))?;
    record("masked class CE", &net, err);

    let targets = vec![3, 0, 2];
    let err = check_network_gradient(&net, |n| {
        let out = n.forward(&x)?;
        let (loss, dproxy) = softmax_cross_entropy(&out.proxy_logits, &targets, None)?;
        let zero = Tensor::zeros(out.class_logits.shape());
        let grads = n.backward(&zero, Some(&dproxy), None)?;
        Ok((
            LossComponents {
                total: loss,
                ..Default::default()
            },
            grads,
        ))
    })?;
    record("proxy CE", &net, err);

    let teacher = TeacherExtractor::new(Network::init(&pooled, &mut rng)?);
    let err = check_network_gradient(&net, |n| {
        let out = n.forward(&x)?;
        let target = teacher.features(&x)?;
        let (loss, dfeat) = crate::nn::mse(&out.features, &target)?;
        let zero = Tensor::zeros(out.class_logits.shape());
        let grads = n.backward(&zero, None, Some(&dfeat))?;
        Ok((
            LossComponents {
                total: loss,
                feature_mse: loss,
                ..Default::default()
            },
            grads,
        ))
    })?;
    record("feature MSE", &net, err);

    let ssl = SslConfig::new(Strategy::Ssl, TransformSet::rotation(), 2.0)?;
    let err = check_network_gradient(&net, |n| ssl_loss_and_grads(n, &x, &y, &ssl, 1.5, None))?;
    record("owm+ssl loss (rotation)", &net, err);

    let mut saa = SslConfig::new(Strategy::Saa, TransformSet::rotation(), 2.0)?;
    let err = check_network_gradient(&net, |n| saa_loss_and_grads(n, &x, &y, &saa, 0.7, None))?;
    record("owm+saa loss", &net, err);
    saa.saa_normalize = true;
    let err = check_network_gradient(&net, |n| saa_loss_and_grads(n, &x, &y, &saa, 0.7, Some(&[0, 1])))?;
    record("owm+saa loss, normalised and masked", &net, err);

    let err = check_network_gradient(&net, |n| fd_loss_and_grads(n, &teacher, &x, &y, 3.0, None))?;
    record("owm+fd loss", &net, err);

    let net6 = Network::init(&strided, &mut rng)?;
    let x6 = random_batch(&strided.input, batch, &mut rng);
    let perm = SslConfig::new(Strategy::Ssl, TransformSet::channel_permutation(), 1.0)?;
    let err = check_network_gradient(&net6, |n| ssl_loss_and_grads(n, &x6, &y, &perm, 1.0, None))?;
    record("owm+ssl loss (channel permutation)", &net6, err);

    Ok(cases)
}

/// Settings of the two-task stability experiment on 2-D blobs.
#[derive(Clone, Debug, PartialEq)]
pub struct StabilitySetup {
    pub seed: u64,
    pub hidden: usize,
    pub train_per_class: usize,
    pub spread: f64,
    pub task1_epochs: usize,
    pub task1_batch: usize,
    pub task2_steps: usize,
    pub task2_batch: usize,
    pub learning_rate: f64,
}

impl Default for StabilitySetup {
    fn default() -> Self {
        StabilitySetup {
            seed: 1,
            hidden: 16,
            train_per_class: 200,
            spread: 1.0,
            task1_epochs: 20,
            task1_batch: 1,
            task2_steps: 100,
            task2_batch: 8,
            learning_rate: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftSummary {
    /// Largest set-level relative change over the projected layers.
    pub layer: f64,
    /// Set-level relative change of the class logits.
    pub output: f64,
    /// Largest relative change for any single input, layer or logits.
    pub worst_input: f64,
}

impl DriftSummary {
    /// The figure compared against the stability bound.
    pub fn headline(&self) -> f64 {
        self.layer.max(self.output)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityOutcome {
    pub owm: DriftSummary,
    pub sgd: DriftSummary,
}

/// Per-layer outputs `W·a + b` of the projected layers and the class logits,
/// for every sample of `x`, evaluated with `net`'s weights on inputs `a`
/// recorded from `reference`.
fn layer_responses(net: &Network, reference: &Network, x: &Tensor) -> Result<Vec<Vec<Vec<f64>>>> {
    let hidden = reference.features(x)?;
    let batch = x.shape()[0];
    let flat = x.reshape(&[batch, x.len() / batch])?;
    let first = net
        .extractor()
        .iter()
        .find(|l| l.kind().has_params())
        .ok_or_else(|| Error::Config("stability net needs a parameter layer".into()))?;
    let layers = [(first, &flat), (net.classifier(), &hidden)];
    let mut out = Vec::new();
    for (layer, inputs) in layers {
        let (w, b) = (layer.weight().expect("weights"), layer.bias().expect("bias"));
        out.push(
            (0..batch)
                .map(|i| {
                    let mut y = matvec(w, inputs.row(i))?;
                    y.iter_mut().zip(b.data()).for_each(|(v, bb)| *v += bb);
                    Ok(y)
                })
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let logits = net.infer(x)?.class_logits;
    out.push((0..batch).map(|i| logits.row(i).to_vec()).collect());
    Ok(out)
}

/// Relative drift between response sets: `(set-level, worst single input)`.
/// The set-level value is `‖after − before‖_F / ‖before‖_F` over all inputs.
fn drift(before: &[Vec<f64>], after: &[Vec<f64>]) -> (f64, f64) {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut worst: f64 = 0.0;
    for (b, a) in before.iter().zip(after) {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        let n: f64 = b.iter().map(|v| v * v).sum();
        num += d;
        den += n;
        worst = worst.max((d / n.max(1e-24)).sqrt());
    }
    ((num / den.max(1e-24)).sqrt(), worst)
}

fn summarize(before: &[Vec<Vec<f64>>], after: &[Vec<Vec<f64>>]) -> DriftSummary {
    let k = before.len() - 1;
    let layers: Vec<(f64, f64)> = (0..k).map(|i| drift(&before[i], &after[i])).collect();
    let (output, output_worst) = drift(&before[k], &after[k]);
    DriftSummary {
        layer: layers.iter().map(|d| d.0).fold(0.0, f64::max),
        output,
        worst_input: layers.iter().map(|d| d.1).fold(output_worst, f64::max),
    }
}

/// Task 1 (two blob classes) is learned under OWM with per-batch absorption;
/// from that common state, task 2 is trained once with projected and once
/// with plain gradients using the same batches.
pub fn stability_experiment(setup: &StabilitySetup) -> Result<StabilityOutcome> {
    let root = RngState::new(setup.seed);
    let centres = ring_centres(4, 3.0);
    let train = gaussian_blobs(&centres, setup.train_per_class, setup.spread, &mut root.derive(&[1]))?;
    let train = std::sync::Arc::new(train);
    let seq = TaskSequence::new(train.clone(), train, vec![vec![0, 1], vec![2, 3]])?;
    let spec = Architecture {
        input: [2, 1, 1],
        conv: Vec::new(),
        hidden: vec![setup.hidden],
        classes: 4,
        proxy_outputs: 4,
    }
    .network_spec()?;
    let mut net = Network::init(&spec, &mut root.derive(&[2]))?;
    let mut owm = Optimizer::for_method(Method::Owm, &net, setup.learning_rate)?;
    let ctx = TaskContext {
        method: Method::Owm,
        epochs: setup.task1_epochs,
        batch_size: setup.task1_batch,
        mask: Some(vec![0, 1]),
        absorb: AbsorbMode::PerBatch,
        alpha_t: 0.0,
        ssl: None,
        teacher: None,
        task: 0,
    };
    train_task(&mut net, &mut owm, &seq.train_view(0), &ctx, &root)?;

    let task1: TaskView = seq.train_view(0);
    let (x1, _) = task1.gather(&(0..task1.len()).collect::<Vec<_>>())?;
    let before = layer_responses(&net, &net, &x1)?;

    let view2 = seq.train_view(1);
    let mut plan = Vec::new();
    let mut epoch = 0;
    while plan.len() < setup.task2_steps {
        plan.extend(view2.batches(setup.task2_batch, &root, epoch)?);
        epoch += 1;
    }
    plan.truncate(setup.task2_steps);

    let sgd = Optimizer::Sgd {
        learning_rate: setup.learning_rate,
    };
    let mut drifts = Vec::new();
    for opt in [&owm, &sgd] {
        let mut n = net.clone();
        for batch in &plan {
            let (x, y) = view2.gather(batch)?;
            let (_, grads) = plain_loss_and_grads(&mut n, &x, &y, Some(&[0, 1, 2, 3]))?;
            opt.step(&mut n, &grads)?;
        }
        drifts.push(summarize(&before, &layer_responses(&n, &net, &x1)?));
    }
    let sgd = drifts.pop().expect("two runs");
    let owm = drifts.pop().expect("two runs");
    Ok(StabilityOutcome { owm, sgd })
}

/// Outcome of one suite of the `oracle` subcommand.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Projector equivalence and spectrum, gradient checks and the stability
/// experiment, each reported as a pass/fail line.
pub fn run_all(seed: u64) -> Vec<Check> {
    let mut checks = Vec::new();
    let mut push = |name: &str, r: Result<(bool, String)>| {
        let (passed, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
        checks.push(Check {
            name: name.into(),
            passed,
            detail,
        });
    };
    push(
        "projector recursion equals direct formula",
        projector_suite(200, 30, 20, seed).map(|o| {
            (
                o.max_equivalence_error <= 1e-6,
                format!("{} cases, max relative error {:.2e}", o.cases, o.max_equivalence_error),
            )
        }),
    );
    push(
        "projector symmetric contraction",
        projector_suite(100, 30, 20, seed ^ 0x5a).map(|o| {
            (
                o.max_asymmetry <= 1e-9 && o.min_eigenvalue >= -1e-9 && o.max_eigenvalue <= 1.0 + 1e-9,
                format!(
                    "asymmetry {:.1e}, eigenvalues in [{:.3e}, {:.6}]",
                    o.max_asymmetry, o.min_eigenvalue, o.max_eigenvalue
                ),
            )
        }),
    );
    push(
        "finite-difference gradients",
        gradient_suite(seed).map(|cases| {
            let worst = cases.iter().map(|c| c.max_relative_error).fold(0.0, f64::max);
            let largest = cases.iter().map(|c| c.params).max().unwrap_or(0);
            (
                worst <= 1e-4 && largest <= 500,
                format!("{} cases (≤{largest} params), max relative error {worst:.2e}", cases.len()),
            )
        }),
    );
    push(
        "stability on old inputs",
        stability_experiment(&StabilitySetup::default()).map(|o| {
            let (owm, sgd) = (o.owm.headline(), o.sgd.headline());
            (
                owm <= 1e-2 && sgd >= 10.0 * owm.max(1e-2),
                format!(
                    "relative drift owm {owm:.2e} vs sgd {sgd:.2e} (worst single input {:.2e} vs {:.2e})",
                    o.owm.worst_input, o.sgd.worst_input
                ),
            )
        }),
    );
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_matches_known_spectrum() {
        let a = Tensor::from_rows(&[vec![2.0, 1.0, 0.0], vec![1.0, 2.0, 0.0], vec![0.0, 0.0, 5.0]]).unwrap();
        let eig = symmetric_eigenvalues(&a).unwrap();
        for (got, want) in eig.iter().zip([1.0, 3.0, 5.0]) {
            assert!((got - want).abs() < 1e-12, "{eig:?}");
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(max_relative_error(&[1.0], &[1.0]), 0.0);
        assert!((max_relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
        assert!(max_relative_error(&[1e-9], &[0.0]) < 1e-4);
    }
}
