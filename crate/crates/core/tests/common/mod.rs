#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use xpert::data::Batch;
use xpert::hard_concrete::{draw_uniform, sample_mask_var, HardConcrete};
use xpert::nn::{cross_entropy, kl_divergence, one_hot, Activation, Classifier, DenseLayer, Parameterized};
use xpert::perturb::{xadv_objective, Method, PerturbationSpec};
use xpert::train::{combined_loss, consistency_rows, Regularizer};
use xpert::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 20;

/// A scalar function of some tensors: its value and analytic gradients.
pub type Eval<'a> = dyn Fn(&[Tensor]) -> (f64, Vec<Tensor>) + 'a;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal)).unwrap()
}

/// Normal draws nudged at least `gap` away from every point in `kinks`.
pub fn away_from(shape: &[usize], kinks: &[f64], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = rng.sample(StandardNormal);
        if kinks.iter().all(|k| (v - k).abs() > gap) {
            break v;
        }
    })
    .unwrap()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)` over all inputs jointly.
pub fn relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (x, y) in a.data().iter().zip(n.data()) {
            diff += (x - y).powi(2);
            na += x * x;
            nn += y * y;
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-10)
}

/// Central differences of `eval`'s value.
pub fn numeric_grads(inputs: &[Tensor], eval: &Eval) -> Vec<Tensor> {
    let mut work = inputs.to_vec();
    let mut grads = Vec::new();
    for t in 0..inputs.len() {
        let mut g = vec![0.0; inputs[t].len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = inputs[t].data()[i];
            work[t].data_mut()[i] = orig + FD_STEP;
            let up = eval(&work).0;
            work[t].data_mut()[i] = orig - FD_STEP;
            let down = eval(&work).0;
            work[t].data_mut()[i] = orig;
            *gi = (up - down) / (2.0 * FD_STEP);
        }
        grads.push(Tensor::new(inputs[t].shape().to_vec(), g).unwrap());
    }
    grads
}

/// Relative error between `eval`'s analytic gradients, scaled by `factor`,
/// and central differences.
pub fn check(inputs: &[Tensor], eval: &Eval, factor: f64) -> f64 {
    let analytic: Vec<Tensor> = eval(inputs).1.iter().map(|g| g.scaled(factor)).collect();
    relative_error(&analytic, &numeric_grads(inputs, eval))
}

/// Wraps a tape expression over parameter leaves as an [`Eval`].
pub fn tape_eval<F>(f: F) -> impl Fn(&[Tensor]) -> (f64, Vec<Tensor>)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    move |inputs| {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars);
        let value = out.item().unwrap();
        out.backward().unwrap();
        let grads = vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape()).unwrap()))
            .collect();
        (value, grads)
    }
}

/// Reduces a tensor to a scalar with fixed random weights.
pub fn weighted_sum<'t>(tape: &'t Tape, x: Var<'t>, weights: &Tensor) -> Var<'t> {
    x.mul(tape.constant(weights.clone())).unwrap().sum().unwrap()
}

pub struct GradCase {
    pub name: &'static str,
    /// Worst relative error over the instances.
    pub worst: f64,
}

fn classifier_from(widths: &[usize], params: &[Tensor]) -> Classifier {
    let n = widths.len() - 1;
    let layers = (0..n)
        .map(|i| {
            let act = if i + 1 == n { Activation::Identity } else { Activation::Relu };
            DenseLayer::new(params[2 * i].clone(), params[2 * i + 1].clone(), act).unwrap()
        })
        .collect();
    Classifier::new(layers).unwrap()
}

fn classifier_params(widths: &[usize], rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let c = Classifier::mlp(widths, rng).unwrap();
    let mut params: Vec<Tensor> = c.named_parameters().into_iter().map(|(_, t)| t.clone()).collect();
    for b in params.iter_mut().skip(1).step_by(2) {
        *b = gaussian(b.shape(), rng).scaled(0.1);
    }
    params
}

fn elementwise(seed: u64, op: fn(Var<'_>) -> Var<'_>, kinks: &[f64], positive: bool) -> f64 {
    let mut r = rng(seed);
    let shape = [3, 4];
    let mut x = away_from(&shape, kinks, 1e-3, &mut r);
    if positive {
        x = x.map(|v| v.abs() + 0.1);
    }
    let w = gaussian(&shape, &mut r);
    let eval = tape_eval(move |t, v| weighted_sum(t, op(v[0]), &w));
    check(&[x], &eval, 1.0)
}

fn binary(seed: u64, op: for<'t> fn(Var<'t>, Var<'t>) -> Var<'t>) -> f64 {
    let mut r = rng(seed);
    let a = gaussian(&[3, 4], &mut r);
    let b = gaussian(&[3, 4], &mut r);
    let w = gaussian(&[3, 4], &mut r);
    let eval = tape_eval(move |t, v| weighted_sum(t, op(v[0], v[1]), &w));
    check(&[a, b], &eval, 1.0)
}

fn with_weights(seed: u64, shapes: &[&[usize]], out_shape: &[usize], op: for<'t> fn(&[Var<'t>]) -> Var<'t>) -> f64 {
    let mut r = rng(seed);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| gaussian(s, &mut r)).collect();
    let w = gaussian(out_shape, &mut r);
    let eval = tape_eval(move |t, v| weighted_sum(t, op(v), &w));
    check(&inputs, &eval, 1.0)
}

fn worst_over(mut f: impl FnMut(u64) -> f64) -> f64 {
    (0..INSTANCES).map(|s| f(1000 + s)).fold(0.0, f64::max)
}

/// Every tape op, one case per op, each over [`INSTANCES`] seeds.
pub fn op_cases() -> Vec<GradCase> {
    let mut cases = Vec::new();
    let mut push = |name, worst| cases.push(GradCase { name, worst });
    push("add", worst_over(|s| binary(s, |a, b| a.add(b).unwrap())));
    push("sub", worst_over(|s| binary(s, |a, b| a.sub(b).unwrap())));
    push("mul", worst_over(|s| binary(s, |a, b| a.mul(b).unwrap())));
    push("scale", worst_over(|s| elementwise(s, |x| x.scale(-2.5).unwrap(), &[], false)));
    push("neg", worst_over(|s| elementwise(s, |x| x.neg().unwrap(), &[], false)));
    push("offset", worst_over(|s| elementwise(s, |x| x.offset(0.7).unwrap(), &[], false)));
    push("sigmoid", worst_over(|s| elementwise(s, |x| x.sigmoid().unwrap(), &[], false)));
    push("exp", worst_over(|s| elementwise(s, |x| x.exp().unwrap(), &[], false)));
    push("log", worst_over(|s| elementwise(s, |x| x.log().unwrap(), &[], true)));
    push("relu", worst_over(|s| elementwise(s, |x| x.relu().unwrap(), &[0.0], false)));
    push(
        "clamp",
        worst_over(|s| elementwise(s, |x| x.clamp(-0.5, 0.8).unwrap(), &[-0.5, 0.8], false)),
    );
    push(
        "matmul",
        worst_over(|s| with_weights(s, &[&[3, 4], &[4, 5]], &[3, 5], |v| v[0].matmul(v[1]).unwrap())),
    );
    push(
        "linear",
        worst_over(|s| {
            with_weights(s, &[&[3, 4], &[5, 4], &[5]], &[3, 5], |v| v[0].linear(v[1], v[2]).unwrap())
        }),
    );
    push(
        "add_channel_bias",
        worst_over(|s| {
            with_weights(s, &[&[2, 3, 2, 2], &[3]], &[2, 3, 2, 2], |v| v[0].add_channel_bias(v[1]).unwrap())
        }),
    );
    push(
        "conv2d_3x3",
        worst_over(|s| {
            with_weights(s, &[&[2, 2, 4, 5], &[3, 2, 3, 3]], &[2, 3, 4, 5], |v| v[0].conv2d_3x3(v[1]).unwrap())
        }),
    );
    push(
        "softmax",
        worst_over(|s| with_weights(s, &[&[3, 4]], &[3, 4], |v| v[0].softmax().unwrap())),
    );
    push("sum", worst_over(|s| with_weights(s, &[&[3, 4]], &[], |v| v[0].sum().unwrap())));
    push("mean", worst_over(|s| with_weights(s, &[&[3, 4]], &[], |v| v[0].mean().unwrap())));
    push(
        "reshape",
        worst_over(|s| with_weights(s, &[&[3, 4]], &[2, 6], |v| v[0].reshape(&[2, 6]).unwrap())),
    );
    push(
        "slice_rows",
        worst_over(|s| with_weights(s, &[&[5, 3]], &[2, 3], |v| v[0].slice_rows(1, 3).unwrap())),
    );
    push(
        "repeat_cols",
        worst_over(|s| with_weights(s, &[&[2, 3]], &[2, 9], |v| v[0].repeat_cols(3).unwrap())),
    );
    push(
        "reverse_grad",
        worst_over(|s| {
            let mut r = rng(s);
            let x = gaussian(&[3, 4], &mut r);
            let w = gaussian(&[3, 4], &mut r);
            let eval = tape_eval(move |t, v| weighted_sum(t, v[0].reverse_grad(0.3).unwrap(), &w));
            // Forward is the identity, so the analytic gradient is −0.3× the numeric one.
            check(&[x], &eval, -1.0 / 0.3)
        }),
    );
    cases
}

fn labels(n: usize, classes: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| r.gen_range(0..classes)).collect()
}

fn ce_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let logits = gaussian(&[4, 3], &mut r);
    let h = one_hot(&labels(4, 3, &mut r), 3).unwrap();
    let eval = tape_eval(move |_, v| cross_entropy(&h, v[0].softmax().unwrap()).unwrap());
    check(&[logits], &eval, 1.0)
}

fn kl_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = gaussian(&[4, 3], &mut r);
    let b = gaussian(&[4, 3], &mut r);
    let eval = tape_eval(|_, v| kl_divergence(v[0].softmax().unwrap(), v[1].softmax().unwrap()).unwrap());
    check(&[a, b], &eval, 1.0)
}

/// Compares a library gradient with central differences of an independent
/// value oracle; also folds in the relative gap between the two values.
fn check_against(inputs: &[Tensor], library: &Eval, oracle: &dyn Fn(&[Tensor]) -> f64) -> f64 {
    let (value, analytic) = library(inputs);
    let reference = oracle(inputs);
    let value_gap = (value - reference).abs() / reference.abs().max(1e-10);
    let numeric = numeric_grads(inputs, &|t: &[Tensor]| (oracle(t), Vec::new()));
    relative_error(&analytic, &numeric).max(value_gap)
}

/// Row-mean `Σ p log(p/q)` with `p` held fixed.
fn kl_fixed(p: &Tensor, q: &Tensor) -> f64 {
    let terms: f64 = p
        .data()
        .iter()
        .zip(q.data())
        .map(|(&a, &b)| if a > 0.0 { a * (a.ln() - b.max(1e-12).ln()) } else { 0.0 })
        .sum();
    terms / p.rows() as f64
}

fn ce_plain(labels: &[usize], q: &Tensor) -> f64 {
    let terms: f64 = labels.iter().enumerate().map(|(i, &y)| -q.row(i)[y].max(1e-12).ln()).sum();
    terms / labels.len() as f64
}

fn l0_plain(log_alpha: &Tensor, hc: &HardConcrete) -> f64 {
    log_alpha.data().iter().map(|&la| hc.active_probability(la)).sum()
}

/// Uniform noise whose stretched gates stay clear of the clip points 0 and 1.
fn noise_off_clip(log_alpha: &Tensor, hc: &HardConcrete, r: &mut ChaCha8Rng) -> Tensor {
    let data = log_alpha
        .data()
        .iter()
        .map(|&la| loop {
            let u: f64 = r.gen();
            let s = hc.stretched(la, u);
            if s.abs() > 1e-3 && (s - 1.0).abs() > 1e-3 {
                break u;
            }
        })
        .collect();
    Tensor::new(log_alpha.shape().to_vec(), data).unwrap()
}

fn masked_plain(x: &Tensor, log_alpha: &Tensor, u: &Tensor, eps: f64, hc: &HardConcrete) -> Tensor {
    let z = log_alpha.zip_map(u, |la, u| hc.gate(la, u)).unwrap();
    x.zip_map(&z, |a, g| a * eps * g).unwrap()
}

/// Mask objective, differentiated in the classifier parameters and `log α`.
/// The clean prediction is a fixed target.
fn xadv_case(seed: u64, method: Method) -> f64 {
    let mut r = rng(seed);
    let widths = [5, 6, 3];
    let mut inputs = classifier_params(&widths, &mut r);
    let n_params = inputs.len();
    let (n, p) = (4, widths[0]);
    inputs.push(gaussian(&[n, p], &mut r));
    let x = gaussian(&[n, p], &mut r);
    let u = noise_off_clip(&inputs[n_params], &HardConcrete::default(), &mut r);
    let ys = labels(n, 3, &mut r);
    let h = one_hot(&ys, 3).unwrap();
    let mut spec = PerturbationSpec::new(method, 1.3);
    spec.lambda = 0.7;
    let library = |t: &[Tensor]| {
        let tape = Tape::new();
        let model = classifier_from(&widths, &t[..n_params]);
        let bound = model.bind(&tape, true);
        let la = tape.param(t[n_params].clone());
        let y = (method == Method::Xat).then_some(&h);
        let obj = xadv_objective(&x, &bound, la, &u, &spec, y).unwrap();
        let value = obj.item().unwrap();
        obj.backward().unwrap();
        let mut grads = bound.grads();
        grads.push(la.grad().unwrap());
        (value, grads)
    };
    let clean = classifier_from(&widths, &inputs[..n_params]).predict_proba(&x).unwrap();
    let oracle = |t: &[Tensor]| {
        let model = classifier_from(&widths, &t[..n_params]);
        let hc = spec.hard_concrete;
        let q = model.predict_proba(&masked_plain(&x, &t[n_params], &u, spec.epsilon, &hc)).unwrap();
        let d = match method {
            Method::Xat => ce_plain(&ys, &q),
            _ => kl_fixed(&clean, &q),
        };
        d + spec.lambda * l0_plain(&t[n_params], &hc) / n as f64
    };
    check_against(&inputs, &library, &oracle)
}

fn batch(n_labeled: usize, n_unlabeled: usize, p: usize, classes: usize, r: &mut ChaCha8Rng) -> Batch {
    Batch {
        labeled_x: gaussian(&[n_labeled, p], r),
        labels: labels(n_labeled, classes, r),
        unlabeled_x: (n_unlabeled > 0).then(|| gaussian(&[n_unlabeled, p], r)),
        labeled_ids: (0..n_labeled).collect(),
        unlabeled_ids: (0..n_unlabeled).collect(),
    }
}

/// The training loss `CE + η·(D + L0 term)`. Its value leaves the L0 term
/// out while its `log α` gradient keeps it, so the oracle includes the term.
/// The clean prediction is a fixed target.
fn training_loss_case(seed: u64, method: Method) -> f64 {
    let mut r = rng(seed);
    let widths = [5, 6, 3];
    let mut inputs = classifier_params(&widths, &mut r);
    let n_params = inputs.len();
    let b = batch(3, 4, widths[0], 3, &mut r);
    let mut spec = PerturbationSpec::new(method, 1.2);
    spec.lambda = 0.6;
    let eta = 0.8;
    let rows = consistency_rows(&b, method).unwrap();
    let multiplicative = method.is_multiplicative();
    let u = if multiplicative {
        inputs.push(gaussian(rows.shape(), &mut r));
        noise_off_clip(&inputs[n_params], &spec.hard_concrete, &mut r)
    } else {
        draw_uniform(rows.shape(), &mut r).unwrap()
    };
    let additive = gaussian(rows.shape(), &mut r).scaled(0.3);
    let library = |t: &[Tensor]| {
        let tape = Tape::new();
        let model = classifier_from(&widths, &t[..n_params]);
        let bound = model.bind(&tape, true);
        let la = multiplicative.then(|| tape.param(t[n_params].clone()));
        let reg = match la {
            Some(log_alpha) => Regularizer::Multiplicative { log_alpha, u: &u },
            None => Regularizer::Additive { r: &additive },
        };
        let terms = combined_loss(&tape, &bound, &b, Some(&spec), reg, eta).unwrap();
        let mut value = terms.total.item().unwrap();
        if multiplicative {
            value += eta * spec.lambda * l0_plain(&t[n_params], &spec.hard_concrete) / rows.rows() as f64;
        }
        terms.total.backward().unwrap();
        let mut grads = bound.grads();
        if let Some(log_alpha) = la {
            grads.push(log_alpha.grad().unwrap());
        }
        (value, grads)
    };
    let clean = classifier_from(&widths, &inputs[..n_params]).predict_proba(&rows).unwrap();
    let oracle = |t: &[Tensor]| {
        let model = classifier_from(&widths, &t[..n_params]);
        let hc = spec.hard_concrete;
        let ce = ce_plain(&b.labels, &model.predict_proba(&b.labeled_x).unwrap());
        let (x_pert, l0) = if multiplicative {
            let la = &t[n_params];
            let l0 = spec.lambda * l0_plain(la, &hc) / rows.rows() as f64;
            (masked_plain(&rows, la, &u, spec.epsilon, &hc), l0)
        } else {
            (rows.zip_map(&additive, |a, d| a + d).unwrap(), 0.0)
        };
        let q = model.predict_proba(&x_pert).unwrap();
        let d = if method.is_supervised() {
            ce_plain(&b.labels, &q)
        } else {
            kl_fixed(&clean, &q)
        };
        ce + eta * (d + l0)
    };
    check_against(&inputs, &library, &oracle)
}

/// Gate sampling alone, away from the clip points.
fn gate_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let la = gaussian(&[3, 4], &mut r);
    let u = Tensor::from_fn(&[3, 4], |_| r.gen_range(0.2..0.8)).unwrap();
    let w = gaussian(&[3, 4], &mut r);
    let hc = HardConcrete::default();
    let eval = tape_eval(move |t, v| weighted_sum(t, sample_mask_var(v[0], &u, &hc).unwrap(), &w));
    check(&[la], &eval, 1.0)
}

/// Composed losses, each over [`INSTANCES`] seeds.
pub fn loss_cases() -> Vec<GradCase> {
    vec![
        GradCase { name: "cross_entropy", worst: worst_over(ce_case) },
        GradCase { name: "kl_divergence", worst: worst_over(kl_case) },
        GradCase { name: "hard_concrete_gate", worst: worst_over(gate_case) },
        GradCase { name: "mask_objective_xvat", worst: worst_over(|s| xadv_case(s, Method::Xvat)) },
        GradCase { name: "mask_objective_xat", worst: worst_over(|s| xadv_case(s, Method::Xat)) },
        GradCase { name: "training_loss_xvat", worst: worst_over(|s| training_loss_case(s, Method::Xvat)) },
        GradCase { name: "training_loss_xat", worst: worst_over(|s| training_loss_case(s, Method::Xat)) },
        GradCase { name: "training_loss_vat", worst: worst_over(|s| training_loss_case(s, Method::Vat)) },
        GradCase { name: "training_loss_at", worst: worst_over(|s| training_loss_case(s, Method::AtL2)) },
    ]
}

pub struct OracleOutcome {
    pub pixels: usize,
    /// Objective of the ascended `log α`, estimated by Monte Carlo.
    pub attained: f64,
    /// Exact maximum of `ΔD(z) + λ‖z‖₀` over all binary masks.
    pub exact: f64,
    /// Zeros in the best binary mask.
    pub zeros_in_best: usize,
}

fn exact_mask_maximum(x: &Tensor, model: &Classifier, lambda: f64) -> (f64, usize) {
    let p = x.len();
    let clean = model.predict_proba(x).unwrap();
    let mut best = (f64::NEG_INFINITY, 0);
    for bits in 0u32..(1 << p) {
        let z = Tensor::from_fn(&[1, p], |j| f64::from((bits >> j) & 1)).unwrap();
        let q = model.predict_proba(&x.zip_map(&z, |a, b| a * b).unwrap()).unwrap();
        let ones = bits.count_ones() as usize;
        let value = kl_fixed(&clean, &q) + lambda * ones as f64;
        if value > best.0 {
            best = (value, p - ones);
        }
    }
    best
}

/// A tiny two-class problem: ascend `log α` for 500 steps and compare with
/// exhaustive search over every binary mask.
pub fn oracle_case(seed: u64) -> OracleOutcome {
    use xpert::train::{ascend_log_alpha, mask_objective, OptimizerConfig};
    let lambda = 0.01;
    let mut r = rng(seed);
    let pixels = 8 + (seed % 5) as usize;
    let model = Classifier::mlp(&[pixels, 8, 2], &mut r).unwrap();
    let x = gaussian(&[1, pixels], &mut r);
    let mut spec = PerturbationSpec::new(Method::Xvat, 1.0);
    spec.lambda = lambda;
    let init = Tensor::zeros(&[1, pixels]).unwrap();
    let (log_alpha, _) =
        ascend_log_alpha(&x, &model, &spec, None, init, 500, OptimizerConfig::adam(0.05), 16, &mut r).unwrap();
    let attained = mask_objective(&x, &model, &log_alpha, &spec, None, 4000, &mut r).unwrap();
    let (exact, zeros_in_best) = exact_mask_maximum(&x, &model, lambda);
    OracleOutcome { pixels, attained, exact, zeros_in_best }
}
