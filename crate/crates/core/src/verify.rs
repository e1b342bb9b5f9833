//! Self-check suites runnable from the command line.
//!
//! Each suite draws seeded random instances, checks one property, and on
//! failure keeps the first offending instance as JSON so it can be replayed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::json;

use crate::decomp::GradientBundle;
use crate::error::Result;
use crate::linalg::{
    apply_projection, dot, modified_gram_schmidt, norm, ColumnMatrix, FlatVector, DEFAULT_RANK_TOL,
};
use crate::model::{Batch, LayerGranularity, MlpModel};
use crate::solver::{qp_oracle, solve_update, Branch, Feasibility, UpdateResult};

/// The closed-form solver under test.
pub type SolverFn = fn(&[f64], &[f64], &ColumnMatrix) -> Result<UpdateResult>;

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Instances per suite.
    pub instances: usize,
    pub solver: SolverFn,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 2024,
            instances: 500,
            solver: solve_update,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checked: usize,
    pub passed: bool,
    /// Worst observed value of the suite's error measure.
    pub worst: f64,
    pub tolerance: f64,
    /// First failing instance.
    pub failure: Option<serde_json::Value>,
}

/// Random old-task gradients plus a new-task gradient that conflicts with
/// their mean about half of the time.
#[derive(Clone, Debug, Serialize)]
pub struct RandomInstance {
    pub g: FlatVector,
    pub old: Vec<FlatVector>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> FlatVector {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect::<Vec<_>>()
        .into()
}

pub fn random_instance(rng: &mut ChaCha8Rng, dim: usize, memories: usize) -> RandomInstance {
    let old: Vec<FlatVector> = (0..memories).map(|_| gaussian(rng, dim)).collect();
    let mut g = gaussian(rng, dim);
    if rng.random_bool(0.5) {
        let mut mean = FlatVector::zeros(dim);
        for o in &old {
            mean.axpy(1.0 / memories as f64, o);
        }
        g.axpy(-rng.random_range(1.0..4.0), &mean);
    }
    RandomInstance { g, old }
}

struct Tracker {
    report: SuiteReport,
}

impl Tracker {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Tracker {
            report: SuiteReport {
                name,
                checked: 0,
                passed: true,
                worst: 0.0,
                tolerance,
                failure: None,
            },
        }
    }

    /// Records an error measure where larger is worse.
    fn record(&mut self, err: f64, instance: impl FnOnce() -> serde_json::Value) {
        self.report.checked += 1;
        if err > self.report.worst || err.is_nan() {
            self.report.worst = err;
        }
        if !(err <= self.report.tolerance) && self.report.failure.is_none() {
            self.report.passed = false;
            self.report.failure = Some(instance());
        }
    }

    fn fail(&mut self, instance: serde_json::Value) {
        self.report.checked += 1;
        self.report.passed = false;
        self.report.failure.get_or_insert(instance);
    }

    fn finish(self) -> SuiteReport {
        self.report
    }
}

fn instance_json(inst: &RandomInstance, extra: serde_json::Value) -> serde_json::Value {
    json!({ "g": inst.g, "old_grads": inst.old, "detail": extra })
}

/// Closed form against the KKT-enumeration oracle, relative 2-norm gap.
pub fn solver_vs_oracle(opts: &VerifyOptions) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut t = Tracker::new("solver-vs-oracle", 1e-6);
    let mut reflect = 0;
    for _ in 0..opts.instances {
        let dim = rng.random_range(4..=64);
        let memories = rng.random_range(2..=8);
        let inst = random_instance(&mut rng, dim, memories);
        let outcome = (|| -> Result<(UpdateResult, FlatVector)> {
            let bundle = GradientBundle::new(inst.g.clone(), inst.old.clone())?;
            let shared = bundle.shared.as_ref().expect("memories present");
            let basis = modified_gram_schmidt(&bundle.specific, DEFAULT_RANK_TOL);
            let got = (opts.solver)(&inst.g, shared, &basis)?;
            let want = qp_oracle(&inst.g, shared, &basis)?;
            Ok((got, want))
        })();
        match outcome {
            Ok((got, want)) => {
                reflect += usize::from(got.branch == Branch::ProjectAndReflect);
                // an exactly-zero optimum leaves only round-off; measure it against g
                let scale = norm(&want).max(1e-6 * norm(&inst.g)).max(f64::MIN_POSITIVE);
                let gap = norm(&got.w.sub(&want)) / scale;
                t.record(gap, || instance_json(&inst, json!({ "relative_gap": gap })));
            }
            Err(e) => t.fail(instance_json(&inst, json!({ "error": e.to_string() }))),
        }
    }
    if opts.instances >= 20 && (reflect == 0 || reflect == opts.instances) {
        t.fail(json!({ "detail": "instances did not exercise both branches" }));
    }
    t.finish()
}

/// Equality and inequality residuals of the closed form.
pub fn feasibility(opts: &VerifyOptions) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut t = Tracker::new("feasibility", 1e-8);
    for _ in 0..opts.instances {
        let dim = rng.random_range(4..=64);
        let memories = rng.random_range(2..=8);
        let inst = random_instance(&mut rng, dim, memories);
        let outcome = (|| -> Result<Feasibility> {
            let bundle = GradientBundle::new(inst.g.clone(), inst.old.clone())?;
            let shared = bundle.shared.as_ref().expect("memories present");
            let basis = modified_gram_schmidt(&bundle.specific, DEFAULT_RANK_TOL);
            let got = (opts.solver)(&inst.g, shared, &basis)?;
            Feasibility::measure(&inst.g, shared, &basis, &got.w)
        })();
        match outcome {
            Ok(f) => {
                let err = f.equality.max(-f.inequality);
                t.record(err, || instance_json(&inst, json!({ "feasibility": f })));
            }
            Err(e) => t.fail(instance_json(&inst, json!({ "error": e.to_string() }))),
        }
    }
    t.finish()
}

/// `vᵀPv ≥ 0` for the null-space projector of a random basis.
pub fn psd(opts: &VerifyOptions) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(2));
    let mut t = Tracker::new("psd", 1e-10);
    for _ in 0..opts.instances {
        let dim = rng.random_range(2..=48);
        let cols = rng.random_range(0..=dim.min(10));
        let raw: Vec<FlatVector> = (0..cols).map(|_| gaussian(&mut rng, dim)).collect();
        let basis = modified_gram_schmidt(
            &ColumnMatrix::from_columns(dim, &raw).expect("sizes match"),
            DEFAULT_RANK_TOL,
        );
        let v = gaussian(&mut rng, dim);
        let pv = apply_projection(&basis, &v).expect("sizes match");
        let err = -dot(&v, &pv) / dot(&v, &v);
        t.record(
            err,
            || json!({ "basis_columns": raw, "v": v, "vPv": dot(&v, &pv) }),
        );
    }
    t.finish()
}

/// Task-specific columns sum to zero and span at most `t - 1` directions.
pub fn zero_sum(opts: &VerifyOptions) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(3));
    let mut t = Tracker::new("zero-sum", 1e-10);
    for _ in 0..opts.instances {
        let dim = rng.random_range(4..=64);
        let memories = rng.random_range(1..=8);
        let inst = random_instance(&mut rng, dim, memories);
        let bundle = match GradientBundle::new(inst.g.clone(), inst.old.clone()) {
            Ok(b) => b,
            Err(e) => {
                t.fail(instance_json(&inst, json!({ "error": e.to_string() })));
                continue;
            }
        };
        let mut sum = FlatVector::zeros(dim);
        let mut scale: f64 = 0.0;
        for c in bundle.specific.columns() {
            sum.axpy(1.0, c);
            scale = scale.max(norm(c));
        }
        for o in &inst.old {
            scale = scale.max(norm(o));
        }
        let rank = modified_gram_schmidt(&bundle.specific, DEFAULT_RANK_TOL).cols();
        let mut err = norm(&sum) / scale.max(f64::MIN_POSITIVE);
        if rank + 1 > inst.old.len() {
            err = f64::INFINITY;
        }
        t.record(err, || {
            instance_json(&inst, json!({ "residual": norm(&sum), "rank": rank }))
        });
    }
    t.finish()
}

/// Backprop against central finite differences.
pub fn gradient_check(opts: &VerifyOptions) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(4));
    let mut t = Tracker::new("gradient-check", 1e-4);
    let count = opts.instances.clamp(1, 20);
    for _ in 0..count {
        let depth = rng.random_range(1..=3);
        let mut sizes = vec![rng.random_range(2..=5)];
        for _ in 0..depth {
            sizes.push(rng.random_range(2..=6));
        }
        let classes = *sizes.last().expect("nonempty");
        let seed = rng.random::<u64>();
        let n = rng.random_range(1..=4);
        let inputs: Vec<f64> = (0..n * sizes[0])
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let batch = Batch::new(inputs, sizes[0], labels).expect("consistent batch");
        let err = finite_difference_error(&sizes, seed, &batch).unwrap_or(f64::INFINITY);
        t.record(err, || json!({ "layer_sizes": sizes, "seed": seed, "batch": batch.inputs(), "labels": batch.labels() }));
    }
    t.finish()
}

/// Largest entrywise relative error between backprop and central differences.
pub fn finite_difference_error(sizes: &[usize], seed: u64, batch: &Batch) -> Result<f64> {
    let mut model = MlpModel::new(sizes, seed, LayerGranularity::Fused)?;
    // nonzero biases keep hidden units off the ReLU kink, where central
    // differences and the subgradient convention disagree
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for p in model.params_mut().iter_mut() {
        *p += 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    let (_, grad) = model.loss_and_grad(batch, None)?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for i in 0..grad.len() {
        let orig = model.params()[i];
        probe.params_mut()[i] = orig + h;
        let up = probe.loss(batch, None)?;
        probe.params_mut()[i] = orig - h;
        let down = probe.loss(batch, None)?;
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-7);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// A vector is orthogonal to the columns of `X` exactly when it is orthogonal
/// to the basis built from them.
pub fn lemma_equivalence(opts: &VerifyOptions) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(5));
    let mut t = Tracker::new("orthogonality-equivalence", 1e-9);
    for _ in 0..opts.instances {
        let dim = rng.random_range(3..=40);
        let rank = rng.random_range(1..dim.min(8));
        // columns of X are random combinations of `rank` directions
        let dirs: Vec<FlatVector> = (0..rank).map(|_| gaussian(&mut rng, dim)).collect();
        let cols = rng.random_range(rank..=rank + 4);
        let x: Vec<FlatVector> = (0..cols)
            .map(|_| {
                let mut c = FlatVector::zeros(dim);
                for d in &dirs {
                    c.axpy(rng.sample(StandardNormal), d);
                }
                c
            })
            .collect();
        let xm = ColumnMatrix::from_columns(dim, &x).expect("sizes match");
        let basis = modified_gram_schmidt(&xm, DEFAULT_RANK_TOL);
        let v = apply_projection(&basis, &gaussian(&mut rng, dim)).expect("sizes match");
        let scale = norm(&v) * xm.max_column_norm();
        let lhs =
            xm.transpose_mul(&v).expect("sizes match").max_abs() / scale.max(f64::MIN_POSITIVE);
        let mut err = lhs;
        if basis.cols() != rank {
            err = f64::INFINITY;
        }
        t.record(
            err,
            || json!({ "x": x, "v": v, "basis_rank": basis.cols(), "expected_rank": rank }),
        );
    }
    t.finish()
}

pub fn run_all(opts: &VerifyOptions) -> Vec<SuiteReport> {
    vec![
        solver_vs_oracle(opts),
        feasibility(opts),
        psd(opts),
        zero_sum(opts),
        gradient_check(opts),
        lemma_equivalence(opts),
    ]
}

/// The closed form with the sign of the reflection term flipped. Used to show
/// the suites catch a broken solver.
#[doc(hidden)]
pub fn sign_flipped_solver(
    g: &[f64],
    shared: &[f64],
    basis: &ColumnMatrix,
) -> Result<UpdateResult> {
    let mut r = solve_update(g, shared, basis)?;
    if r.branch == Branch::ProjectAndReflect && !r.degenerate {
        let p_shared = apply_projection(basis, shared)?;
        let pg = apply_projection(basis, g)?;
        let mut w = pg;
        w.axpy(r.shared_alignment / dot(shared, &p_shared), &p_shared);
        r.w = w;
    }
    Ok(r)
}
