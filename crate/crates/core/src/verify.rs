//! Property suites over the routing and capsule-layer math.
//!
//! Each suite returns a [`SuiteOutcome`]; [`run_all`] runs every one of them.
//! Suites that exercise pairwise agreement take the implementation as a
//! function pointer so a deliberately broken variant can be checked to fail.
//!
//! Errors are measured as `|a − b| / (1 + |b|)` against the reference `b`
//! unless a suite says otherwise.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{finite_difference_check, AutodiffError, GradCheckReport, Tape, Var};
use crate::capsnet::{
    capsule_layer_backward, capsule_layer_forward, margin_loss, BatchNorm, CapsuleSet, DeskModel,
    DeskModelConfig, LossMode, MarginLossParams, RoutingAlgorithm, TransformWeights,
};
use crate::data::{gen_agreement_instance, random_predictions, rng, SeededRng};
use crate::math;
use crate::routing::{
    dynamic_routing_traced, fm_activation_closed_form, fm_activation_jacobian, fm_agreement,
    fm_agreement_bruteforce, l2_normalize_predictions, squash, DynamicRoutingConfig, PairScaling,
    PredictionTensor, RoutingCotangent, RoutingError, RoutingResult,
};
use crate::tensor::Tensor;

/// A pairwise-agreement implementation under test.
pub type FmFn = fn(&PredictionTensor) -> Result<RoutingResult, RoutingError>;

pub const ORACLE_TOL: f64 = 1e-10;
pub const INVARIANCE_TOL: f64 = 1e-12;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;
pub const GOLDEN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutcome {
    pub name: String,
    pub passed: bool,
    pub worst_error: f64,
    pub instances: usize,
    pub detail: String,
}

impl SuiteOutcome {
    fn new(name: &str, passed: bool, worst_error: f64, instances: usize, detail: String) -> Self {
        SuiteOutcome {
            name: String::from(name),
            passed,
            worst_error,
            instances,
            detail,
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + b.abs())
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

fn random_shape(rng: &mut SeededRng) -> (usize, usize, usize) {
    let n = rng.random_range(1..=64);
    let m = rng.random_range(1..=10);
    let k = [4, 9, 16][rng.random_range(0..3)];
    (n, m, k)
}

/// Linearized agreement against pair enumeration on random instances with
/// `n ∈ [1, 64]`, `m ∈ [1, 10]`, `k ∈ {4, 9, 16}`.
pub fn oracle_equivalence(fm: FmFn, instances: usize, seed: u64) -> SuiteOutcome {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut failure = String::new();
    for t in 0..instances {
        let (n, m, k) = random_shape(&mut r);
        let u = random_predictions(&mut r, n, m, k).expect("valid shape");
        let (fast, slow) = match (fm(&u), fm_agreement_bruteforce(&u)) {
            (Ok(a), Ok(b)) => (a, b),
            (a, b) => {
                failure = format!("instance {t}: {:?} / {:?}", a.err(), b.err());
                worst = f64::INFINITY;
                break;
            }
        };
        let err = max_rel_err(&fast.s_hat, &slow.s_hat)
            .max(max_rel_err(&fast.activation, &slow.activation));
        if err > worst {
            worst = err;
            if err > ORACLE_TOL && failure.is_empty() {
                failure = format!("instance {t} (n={n}, m={m}, k={k}) err {err:e}");
            }
        }
    }
    SuiteOutcome::new(
        "oracle_equivalence",
        worst <= ORACLE_TOL,
        worst,
        instances,
        failure,
    )
}

/// Activation against `(‖Σû‖² − n) / (2n)` on normalized random instances.
pub fn closed_form_equivalence(fm: FmFn, instances: usize, seed: u64) -> SuiteOutcome {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (n, m, k) = random_shape(&mut r);
        let u = random_predictions(&mut r, n, m, k).expect("valid shape");
        let v = l2_normalize_predictions(&u).expect("nonzero");
        let closed = fm_activation_closed_form(&v).expect("normalized");
        let err = match fm(&u) {
            Ok(res) => max_rel_err(&res.activation, &closed),
            Err(_) => f64::INFINITY,
        };
        worst = worst.max(err);
    }
    SuiteOutcome::new(
        "closed_form_activation",
        worst <= ORACLE_TOL,
        worst,
        instances,
        String::new(),
    )
}

fn result_err(a: &RoutingResult, b: &RoutingResult) -> f64 {
    max_rel_err(&a.s_hat, &b.s_hat)
        .max(max_rel_err(&a.pose, &b.pose))
        .max(max_rel_err(&a.activation, &b.activation))
}

/// Shuffling the input-capsule axis leaves the result unchanged.
pub fn permutation_invariance(fm: FmFn, instances: usize, seed: u64) -> SuiteOutcome {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (n, m, k) = random_shape(&mut r);
        let u = random_predictions(&mut r, n, m, k).expect("valid shape");
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let mut values = Vec::with_capacity(n * m * k);
        for &i in &order {
            for j in 0..m {
                values.extend_from_slice(u.vector(i, j));
            }
        }
        let permuted = PredictionTensor::new(n, m, k, values).expect("valid shape");
        let err = match (fm(&u), fm(&permuted)) {
            (Ok(a), Ok(b)) => result_err(&b, &a),
            _ => f64::INFINITY,
        };
        worst = worst.max(err);
    }
    SuiteOutcome::new(
        "permutation_invariance",
        worst <= INVARIANCE_TOL,
        worst,
        instances,
        String::new(),
    )
}

/// Rescaling any prediction by a positive factor leaves the result unchanged.
pub fn scale_invariance(fm: FmFn, instances: usize, seed: u64) -> SuiteOutcome {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (n, m, k) = random_shape(&mut r);
        let u = random_predictions(&mut r, n, m, k).expect("valid shape");
        let mut values = u.values().to_vec();
        for chunk in values.chunks_mut(k) {
            let factor = libm::exp(r.random_range(-3.0..3.0));
            for x in chunk.iter_mut() {
                *x *= factor;
            }
        }
        let scaled = PredictionTensor::new(n, m, k, values).expect("valid shape");
        let err = match (fm(&u), fm(&scaled)) {
            (Ok(a), Ok(b)) => result_err(&b, &a),
            _ => f64::INFINITY,
        };
        worst = worst.max(err);
    }
    SuiteOutcome::new(
        "scale_invariance",
        worst <= INVARIANCE_TOL,
        worst,
        instances,
        String::new(),
    )
}

/// `â ∈ [−1/2, (n−1)/2]` on random instances, with both ends attained: all
/// identical votes give `(n−1)/2`, an antipodal pair gives `−1/2`.
pub fn activation_bound(fm: FmFn, instances: usize, seed: u64) -> SuiteOutcome {
    let mut r = rng(seed);
    let mut violations = 0usize;
    let mut worst_boundary = 0.0f64;
    let slack = 1e-12;
    for _ in 0..instances {
        let (n, m, k) = random_shape(&mut r);
        let u = random_predictions(&mut r, n, m, k).expect("valid shape");
        let hi = (n as f64 - 1.0) / 2.0;
        match fm(&u) {
            Ok(res) => {
                violations += res
                    .activation
                    .iter()
                    .filter(|&&a| a < -0.5 - slack || a > hi + slack)
                    .count()
            }
            Err(_) => violations += 1,
        }
    }
    for n in [1usize, 2, 8, 64] {
        let unit = crate::data::unit_sphere(&mut r, 16);
        let u = PredictionTensor::new(n, 1, 16, unit.repeat(n)).expect("valid shape");
        let want = (n as f64 - 1.0) / 2.0;
        worst_boundary = worst_boundary.max(match fm(&u) {
            Ok(res) => rel_err(res.activation[0], want),
            Err(_) => f64::INFINITY,
        });
    }
    let unit = crate::data::unit_sphere(&mut r, 9);
    let neg: Vec<f64> = unit.iter().map(|x| -x).collect();
    let pair = PredictionTensor::new(2, 1, 9, [unit, neg].concat()).expect("valid shape");
    worst_boundary = worst_boundary.max(match fm(&pair) {
        Ok(res) => rel_err(res.activation[0], -0.5),
        Err(_) => f64::INFINITY,
    });
    SuiteOutcome::new(
        "activation_bound",
        violations == 0 && worst_boundary <= INVARIANCE_TOL,
        worst_boundary,
        instances + 5,
        format!("{violations} bound violations"),
    )
}

/// Largest `|∂â/∂û|` for `n` identical unit votes along a basis vector, with
/// and without the `1/n` scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplosionRow {
    pub n: usize,
    pub scaled_max: f64,
    pub unscaled_max: f64,
}

pub fn gradient_explosion_rows(ns: &[usize]) -> Vec<ExplosionRow> {
    let k = 16;
    let mut e1 = vec![0.0; k];
    e1[0] = 1.0;
    ns.iter()
        .map(|&n| {
            let u = PredictionTensor::new(n, 1, k, e1.repeat(n)).expect("valid shape");
            let max_abs = |s| {
                fm_activation_jacobian(&u, s)
                    .expect("finite")
                    .values()
                    .iter()
                    .fold(0.0f64, |m, x| m.max(x.abs()))
            };
            ExplosionRow {
                n,
                scaled_max: max_abs(PairScaling::Mean),
                unscaled_max: max_abs(PairScaling::Unscaled),
            }
        })
        .collect()
}

/// Scaled Jacobian entries stay ≤ 1 while the unscaled ones reach `n − 1`.
pub fn gradient_explosion() -> SuiteOutcome {
    let rows = gradient_explosion_rows(&[2, 8, 64]);
    let passed = rows
        .iter()
        .all(|r| r.scaled_max <= 1.0 && r.unscaled_max >= r.n as f64 - 1.0 - 1e-6);
    let worst = rows.iter().map(|r| r.scaled_max).fold(0.0, f64::max);
    let detail = rows
        .iter()
        .map(|r| {
            format!(
                "n={}: scaled {} unscaled {}",
                r.n, r.scaled_max, r.unscaled_max
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    SuiteOutcome::new("gradient_explosion", passed, worst, rows.len(), detail)
}

/// Margin loss with default parameters at the three reference points.
pub fn margin_goldens() -> SuiteOutcome {
    let p = MarginLossParams::default();
    let cases = [(true, 0.9, 0.0), (true, 0.0, 0.81), (false, 0.9, 0.32)];
    let worst = cases
        .iter()
        .map(|&(t, a, want)| (margin_loss(&[a], &[t], &p) - want).abs())
        .fold(0.0, f64::max);
    SuiteOutcome::new(
        "margin_loss_goldens",
        worst <= GOLDEN_TOL,
        worst,
        cases.len(),
        String::new(),
    )
}

/// On seeded clustered instances the clustered output must out-activate every
/// noise output in at least `min_wins` trials.
pub fn agreement_semantics(
    trials: usize,
    n: usize,
    m: usize,
    k: usize,
    concentration: f64,
    min_wins: usize,
) -> SuiteOutcome {
    let mut wins = 0;
    for seed in 0..trials as u64 {
        let inst = gen_agreement_instance(n, m, k, concentration, seed).expect("valid instance");
        let res = fm_agreement(&inst.predictions).expect("nonzero predictions");
        let star = res.activation[inst.agreeing];
        let beaten = res
            .activation
            .iter()
            .enumerate()
            .all(|(j, &a)| j == inst.agreeing || star > a);
        if beaten {
            wins += 1;
        }
    }
    SuiteOutcome::new(
        "agreement_semantics",
        wins >= min_wins,
        (trials - wins) as f64,
        trials,
        format!("{wins}/{trials} clustered outputs won"),
    )
}

/// Squash norm increases strictly with input norm and stays below one.
pub fn squash_monotone() -> SuiteOutcome {
    let dir = [0.48, -0.6, 0.64];
    let mut prev = -1.0;
    let mut ok = true;
    let mut count = 0;
    let mut r = 0.0;
    while r <= 1e4 {
        let s: Vec<f64> = dir.iter().map(|x| x * r).collect();
        let len = math::norm(&squash(&s));
        ok &= len > prev && len < 1.0;
        prev = len;
        count += 1;
        r = if r == 0.0 { 1e-4 } else { r * 1.25 };
    }
    SuiteOutcome::new("squash_monotone", ok, 0.0, count, String::new())
}

/// Coupling coefficients of dynamic routing sum to one per input at every
/// iteration and start uniform.
pub fn dynamic_couplings(instances: usize, seed: u64) -> SuiteOutcome {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (n, m, k) = random_shape(&mut r);
        let u = random_predictions(&mut r, n, m, k).expect("valid shape");
        let (res, trace) =
            dynamic_routing_traced(&u, DynamicRoutingConfig::default()).expect("finite");
        for c in &trace.couplings {
            for row in c.chunks(m) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        for &c in &trace.couplings[0] {
            worst = worst.max((c - 1.0 / m as f64).abs());
        }
        if res.activation.iter().any(|&a| !(0.0..1.0).contains(&a)) {
            worst = f64::INFINITY;
        }
    }
    SuiteOutcome::new(
        "dynamic_couplings",
        worst <= 1e-12,
        worst,
        instances,
        String::new(),
    )
}

fn random_tensor(r: &mut SeededRng, shape: Vec<usize>) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| r.random_range(-1.0..1.0)).collect())
        .expect("positive shape")
}

/// Records `build` on a fresh tape with `inputs` as parameters, differentiates
/// it, and compares against central differences over all inputs jointly.
fn check_tape<F>(
    name: &str,
    inputs: &[Tensor],
    build: F,
    h: f64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let run = |values: &[Tensor]| -> Result<(Tape, Var, Vec<Var>), AutodiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(&format!("p{i:02}"), t.clone()))
            .collect();
        let loss = build(&mut tape, &vars)?;
        Ok((tape, loss, vars))
    };
    let (tape, loss, _) = run(inputs)?;
    let grads = tape.backward(loss)?;
    let mut analytic = Vec::new();
    for (_, g) in grads.params() {
        analytic.extend_from_slice(g.data());
    }
    let flat: Vec<f64> = inputs
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    let split = |x: &[f64]| -> Vec<Tensor> {
        let mut offset = 0;
        inputs
            .iter()
            .map(|t| {
                let part = &x[offset..offset + t.len()];
                offset += t.len();
                Tensor::new(t.shape().to_vec(), part.to_vec()).expect("same shape")
            })
            .collect()
    };
    let f = |x: &[f64]| -> f64 {
        match run(&split(x)) {
            Ok((tape, loss, _)) => tape.value(loss).data()[0],
            Err(_) => f64::NAN,
        }
    };
    finite_difference_check(name, f, &flat, &analytic, h)
}

/// Adds `Σ weights ⊙ value` to the tape, a random linear read-out of `value`.
fn project(tape: &mut Tape, value: Var, weights: Tensor) -> Result<Var, AutodiffError> {
    let w = tape.leaf(weights);
    let p = tape.mul(value, w)?;
    Ok(tape.sum_all(p))
}

fn projected_sum(tape: &mut Tape, parts: &[(Var, Tensor)]) -> Result<Var, AutodiffError> {
    let mut acc: Option<Var> = None;
    for (v, w) in parts {
        let p = project(tape, *v, w.clone())?;
        acc = Some(match acc {
            None => p,
            Some(a) => tape.add(a, p)?,
        });
    }
    acc.ok_or(AutodiffError::Shape("nothing to project"))
}

/// Nudges activations away from the margin-loss hinges at `m⁺` and `m⁻`.
fn nudge_off_hinges(t: &mut Tensor, params: &MarginLossParams) {
    for a in t.data_mut() {
        for hinge in [params.m_plus, params.m_minus] {
            if (*a - hinge).abs() < 1e-3 {
                *a = hinge + if *a >= hinge { 1e-3 } else { -1e-3 };
            }
        }
    }
}

/// Nudges vectors along the last axis whose norm is below `1e-3` (the squash
/// zero point) out to norm `1e-3`.
fn nudge_off_origin(t: &mut Tensor, k: usize) {
    for v in t.data_mut().chunks_mut(k) {
        let n = math::norm(v);
        if n < 1e-3 {
            if n == 0.0 {
                v[0] = 1e-3;
            } else {
                for x in v.iter_mut() {
                    *x *= 1e-3 / n;
                }
            }
        }
    }
}

/// Every primitive's backward rule against central differences at `seed`.
pub fn gradient_reports(seed: u64, h: f64) -> Result<Vec<GradCheckReport>, AutodiffError> {
    let mut r = rng(seed);
    let mut out = Vec::new();

    let (a, b) = (
        random_tensor(&mut r, vec![3, 4]),
        random_tensor(&mut r, vec![3, 4]),
    );
    let w = random_tensor(&mut r, vec![3, 4]);
    out.push(check_tape(
        "elementwise_mul",
        &[a, b],
        |t, v| {
            let p = t.mul(v[0], v[1])?;
            project(t, p, w.clone())
        },
        h,
    )?);

    let x = random_tensor(&mut r, vec![3, 4, 5]);
    let w = random_tensor(&mut r, vec![3, 5]);
    out.push(check_tape(
        "reduce_sum",
        &[x],
        |t, v| {
            let s = t.reduce_sum(v[0], 1)?;
            project(t, s, w.clone())
        },
        h,
    )?);

    let (a, b) = (
        random_tensor(&mut r, vec![4, 4]),
        random_tensor(&mut r, vec![4, 4]),
    );
    let w = random_tensor(&mut r, vec![4, 4]);
    out.push(check_tape(
        "matmul_small",
        &[a, b],
        |t, v| {
            let p = t.matmul(v[0], v[1])?;
            project(t, p, w.clone())
        },
        h,
    )?);

    let x = random_tensor(&mut r, vec![3, 5]);
    let w = random_tensor(&mut r, vec![3, 5]);
    out.push(check_tape(
        "l2_normalize",
        &[x],
        |t, v| {
            let p = t.l2_normalize(v[0])?;
            project(t, p, w.clone())
        },
        h,
    )?);

    let mut x = random_tensor(&mut r, vec![4, 6]);
    nudge_off_origin(&mut x, 6);
    let w = random_tensor(&mut r, vec![4, 6]);
    out.push(check_tape(
        "squash",
        &[x],
        |t, v| {
            let p = t.squash(v[0]);
            project(t, p, w.clone())
        },
        h,
    )?);

    for (name, algorithm, shape) in [
        ("fm_agreement", RoutingAlgorithm::Fm, [2usize, 4, 2, 9]),
        (
            "dynamic_routing",
            RoutingAlgorithm::Dynamic(DynamicRoutingConfig::default()),
            [2, 4, 3, 4],
        ),
    ] {
        let [batch, n, m, k] = shape;
        let u = random_tensor(&mut r, vec![batch, n, m, k]);
        let ws = random_tensor(&mut r, vec![batch, m, k]);
        let wp = random_tensor(&mut r, vec![batch, m, k]);
        let wa = random_tensor(&mut r, vec![batch, m]);
        out.push(check_tape(
            name,
            &[u],
            |t, v| {
                let res = t.routing(v[0], algorithm)?;
                projected_sum(
                    t,
                    &[
                        (res.s_hat, ws.clone()),
                        (res.pose, wp.clone()),
                        (res.activation, wa.clone()),
                    ],
                )
            },
            h,
        )?);
    }

    let x = random_tensor(&mut r, vec![8, 12]);
    let gamma = random_tensor(&mut r, vec![12]);
    let beta = random_tensor(&mut r, vec![12]);
    let w = random_tensor(&mut r, vec![8, 12]);
    out.push(check_tape(
        "batch_norm",
        &[x, gamma, beta],
        |t, v| {
            let mut state = BatchNorm::new(12);
            let y = t.batch_norm(v[0], v[1], v[2], &mut state, true)?;
            project(t, y, w.clone())
        },
        h,
    )?);

    let params = MarginLossParams::default();
    let mut acts = random_tensor(&mut r, vec![4, 10]);
    nudge_off_hinges(&mut acts, &params);
    let targets: Vec<bool> = (0..40).map(|_| r.random_bool(0.3)).collect();
    out.push(check_tape(
        "margin_loss",
        &[acts],
        |t, v| t.margin_loss(v[0], targets.clone(), params),
        h,
    )?);

    let logits = random_tensor(&mut r, vec![4, 10]).map(|x| 3.0 * x);
    let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..10)).collect();
    out.push(check_tape(
        "softmax_cross_entropy",
        &[logits],
        |t, v| t.softmax_cross_entropy(v[0], labels.clone()),
        h,
    )?);

    let poses = random_tensor(&mut r, vec![2, 3, 4]);
    let mats = random_tensor(&mut r, vec![3, 2, 4]);
    let w = random_tensor(&mut r, vec![2, 3, 2, 4]);
    out.push(check_tape(
        "matrix_transform",
        &[poses, mats],
        |t, v| {
            let p = t.caps_transform(v[0], v[1])?;
            project(t, p, w.clone())
        },
        h,
    )?);

    out.push(capsule_layer_report(
        &mut r,
        RoutingAlgorithm::Fm,
        "capsule_layer_fm",
        h,
    )?);
    out.push(capsule_layer_report(
        &mut r,
        RoutingAlgorithm::Dynamic(DynamicRoutingConfig::default()),
        "capsule_layer_dynamic",
        h,
    )?);
    out.push(desk_model_report(&mut r, h)?);
    Ok(out)
}

/// Composed transform + batch norm + routing layer (batch 2, n=5, m=3, k=4)
/// through the direct layer API, not the tape.
fn capsule_layer_report(
    r: &mut SeededRng,
    algorithm: RoutingAlgorithm,
    name: &str,
    h: f64,
) -> Result<GradCheckReport, AutodiffError> {
    let (batch, n, m, k) = (2, 5, 3, 4);
    let poses = random_tensor(r, vec![batch * n * k]).into_data();
    let mut weights = TransformWeights::init(n, m, k, r)?;
    weights.bn.gamma = random_tensor(r, vec![m * k]).into_data();
    weights.bn.beta = random_tensor(r, vec![m * k]).into_data();
    let cots: Vec<RoutingCotangent> = (0..batch)
        .map(|_| {
            let mut c = RoutingCotangent::zeros(m, k);
            c.s_hat = random_tensor(r, vec![m * k]).into_data();
            c.pose = random_tensor(r, vec![m * k]).into_data();
            c.activation = random_tensor(r, vec![m]).into_data();
            c
        })
        .collect();

    let sizes = [poses.len(), weights.matrices.len(), m * k, m * k];
    let pack = |p: &[f64], w: &TransformWeights| -> Vec<f64> {
        [p, &w.matrices[..], &w.bn.gamma[..], &w.bn.beta[..]].concat()
    };
    let unpack = |x: &[f64]| -> (Vec<f64>, TransformWeights) {
        let mut w = weights.clone();
        let mut o = 0;
        let p = x[o..o + sizes[0]].to_vec();
        o += sizes[0];
        w.matrices = x[o..o + sizes[1]].to_vec();
        o += sizes[1];
        w.bn.gamma = x[o..o + sizes[2]].to_vec();
        o += sizes[2];
        w.bn.beta = x[o..o + sizes[3]].to_vec();
        (p, w)
    };
    let objective = |results: &[RoutingResult]| -> f64 {
        let mut acc = 0.0;
        for (res, c) in results.iter().zip(&cots) {
            acc += math::dot(&res.s_hat, &c.s_hat)
                + math::dot(&res.pose, &c.pose)
                + math::dot(&res.activation, &c.activation);
        }
        acc
    };

    let u = CapsuleSet::new(batch, n, k, poses.clone())?;
    let mut w = weights.clone();
    let (_, cache) = capsule_layer_forward(&u, &mut w, algorithm, true)?;
    let g = capsule_layer_backward(&u, &weights, &cache, &cots)?;
    let analytic = [g.poses, g.matrices, g.gamma, g.beta].concat();

    let f = |x: &[f64]| -> f64 {
        let (p, mut w) = unpack(x);
        let u = match CapsuleSet::new(batch, n, k, p) {
            Ok(u) => u,
            Err(_) => return f64::NAN,
        };
        match capsule_layer_forward(&u, &mut w, algorithm, true) {
            Ok((res, _)) => objective(&res),
            Err(_) => f64::NAN,
        }
    };
    finite_difference_check(name, f, &pack(&poses, &weights), &analytic, h)
}

/// The training model end to end through the tape.
fn desk_model_report(r: &mut SeededRng, h: f64) -> Result<GradCheckReport, AutodiffError> {
    let cfg = DeskModelConfig {
        input_dim: 6,
        primary_caps: 3,
        k: 4,
        classes: 3,
        algorithm: RoutingAlgorithm::Fm,
        loss: LossMode::Softmax,
    };
    let model = DeskModel::init(cfg, r)?;
    let images = random_tensor(r, vec![4 * 6]).into_data();
    let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..3)).collect();
    let mut m = model.clone();
    let (_, _, grads) = m.loss_and_grads(&images, &labels, true)?;
    let mut analytic = Vec::new();
    for name in ["feature", "caps.matrices"] {
        analytic.extend_from_slice(grads.param(name).expect("param").data());
    }
    let x0 = [model.feature.data(), &model.caps.matrices[..]].concat();
    let split = model.feature.len();
    let f = |x: &[f64]| -> f64 {
        let mut m = model.clone();
        m.feature.data_mut().copy_from_slice(&x[..split]);
        m.caps.matrices.copy_from_slice(&x[split..]);
        match m.loss_and_grads(&images, &labels, true) {
            Ok((loss, _, _)) => loss,
            Err(_) => f64::NAN,
        }
    };
    finite_difference_check("desk_model", f, &x0, &analytic, h)
}

/// Gradient reports over `seeds`, folded to the worst error per op.
pub fn gradient_table(
    seeds: core::ops::Range<u64>,
    h: f64,
) -> Result<Vec<GradCheckReport>, AutodiffError> {
    let mut per_seed = Vec::new();
    for seed in seeds {
        per_seed.push(gradient_reports(seed, h)?);
    }
    let ops = per_seed[0].len();
    Ok((0..ops)
        .map(|i| {
            let op = per_seed[0][i].op.clone();
            GradCheckReport::worst_of(&op, per_seed.iter().map(|s| s[i].clone()))
        })
        .collect())
}

pub fn gradient_suite(seeds: core::ops::Range<u64>, h: f64) -> SuiteOutcome {
    let count = (seeds.end - seeds.start) as usize;
    match gradient_table(seeds, h) {
        Ok(table) => {
            let worst = table.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
            let failing: Vec<&str> = table
                .iter()
                .filter(|r| !r.passes(GRAD_TOL))
                .map(|r| r.op.as_str())
                .collect();
            SuiteOutcome::new(
                "gradient_check",
                failing.is_empty(),
                worst,
                count * table.len(),
                if failing.is_empty() {
                    String::new()
                } else {
                    format!("failing: {}", failing.join(", "))
                },
            )
        }
        Err(e) => SuiteOutcome::new(
            "gradient_check",
            false,
            f64::INFINITY,
            count,
            format!("{e}"),
        ),
    }
}

/// Every suite, with pairwise agreement provided by `fm`.
pub fn run_all_with(fm: FmFn, seed: u64) -> Vec<SuiteOutcome> {
    vec![
        oracle_equivalence(fm, 1000, seed),
        closed_form_equivalence(fm, 1000, seed),
        permutation_invariance(fm, 200, seed.wrapping_add(1)),
        scale_invariance(fm, 200, seed.wrapping_add(2)),
        activation_bound(fm, 200, seed.wrapping_add(3)),
        gradient_explosion(),
        gradient_suite(seed..seed + 10, GRAD_STEP),
        margin_goldens(),
        agreement_semantics(100, 16, 10, 16, 10.0, 99),
        squash_monotone(),
        dynamic_couplings(100, seed.wrapping_add(4)),
    ]
}

pub fn run_all(seed: u64) -> Vec<SuiteOutcome> {
    run_all_with(fm_agreement, seed)
}
