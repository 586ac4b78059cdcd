//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with a
//! failure status if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use epsmooth::model::benchmark;
use epsmooth::verify::{random_instance, InstanceSpec, RandomInstance};
use epsmooth::{
    check_kkt, eps_predict, eps_smooth, eps_smooth_constrained, h2_smooth, primal_brute_force,
    ConstraintSet, EstimateResult, SystemModel, WeightSpec,
};
use nalgebra::DVector;

const KKT_TOL: f64 = 1e-6;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn state_gap(a: &EstimateResult, b: &EstimateResult) -> f64 {
    a.xhat
        .iter()
        .zip(&b.xhat)
        .map(|(x, y)| (x - y).amax())
        .fold(0.0, f64::max)
}

/// Audit shared by criteria 1-3.
#[derive(Default)]
struct KktLog {
    audited: usize,
    failed: Vec<String>,
    worst: f64,
}

impl KktLog {
    fn audit(
        &mut self,
        label: &str,
        model: &SystemModel,
        weights: &WeightSpec,
        measurements: &[DVector<f64>],
        constraints: Option<&ConstraintSet>,
        result: &EstimateResult,
    ) {
        if !result.converged() {
            return;
        }
        let report = check_kkt(model, weights, measurements, constraints, result, KKT_TOL)
            .expect("estimate carries dual variables");
        self.audited += 1;
        self.worst = self.worst.max(report.worst());
        let dual = result.dual.as_ref().unwrap();
        let zeta_gap = dual
            .zeta
            .iter()
            .zip(dual.theta.iter())
            .map(|(z, t)| (z - t.abs()).abs())
            .fold(0.0, f64::max);
        let split = dual
            .gamma
            .iter()
            .zip(dual.beta.iter())
            .map(|(g, b)| g * b)
            .fold(0.0, f64::max);
        if !report.passed || zeta_gap > KKT_TOL || split > KKT_TOL {
            self.failed.push(format!("{label}: worst {:.2e}", report.worst()));
        }
    }
}

fn unconstrained_spec() -> InstanceSpec {
    InstanceSpec {
        max_meas: 10,
        ..InstanceSpec::default()
    }
}

fn criterion_1(kkt: &mut KktLog) -> Outcome {
    let mut worst = 0.0f64;
    let mut check = |label: &str, model: &SystemModel, weights: &WeightSpec, ys: &[DVector<f64>], kkt: &mut KktLog| {
        let weights = weights.with_uniform_eps(1e-12);
        let eps = eps_smooth(model, &weights, ys).expect("eps_smooth");
        let h2 = h2_smooth(model, &weights, ys).expect("h2_smooth");
        kkt.audit(label, model, &weights, ys, None, &eps);
        kkt.audit(label, model, &weights, ys, None, &h2);
        worst = worst.max(state_gap(&eps, &h2));
    };
    for seed in 0..50 {
        let inst = random_instance(1000 + seed, &unconstrained_spec());
        check(&format!("c1 seed {seed}"), &inst.model, &inst.weights, &inst.measurements, kkt);
    }
    let run = benchmark::replay(0, benchmark::HORIZON);
    check("c1 benchmark", &benchmark::model(), &benchmark::weights(), &run.measurements, kkt);
    Outcome::new(worst <= 1e-7, format!("max state gap {worst:.2e} (tol 1e-7)"))
}

enum Case {
    Smooth,
    Constrained,
    Predict(usize),
}

fn criterion_2(kkt: &mut KktLog) -> Outcome {
    let mut worst_state = 0.0f64;
    let mut worst_objective = 0.0f64;
    let mut active = 0;
    let mut errors = Vec::new();
    for seed in 0..100u64 {
        let (case, rows) = match seed % 5 {
            0 => (Case::Smooth, 0),
            1 | 2 => (Case::Constrained, 4),
            3 => (Case::Predict(1 + (seed as usize / 5) % 3), 0),
            _ => (Case::Predict(1 + (seed as usize / 5) % 3), 3),
        };
        let spec = InstanceSpec {
            constraint_rows: rows,
            predict_ahead: match case {
                Case::Predict(j) => j,
                _ => 0,
            },
            ..InstanceSpec::default()
        };
        let RandomInstance {
            model,
            weights,
            measurements: ys,
            constraints,
            ..
        } = random_instance(2000 + seed, &spec);
        let cs = constraints.as_ref();
        let est = match case {
            Case::Smooth => eps_smooth(&model, &weights, &ys),
            Case::Constrained => eps_smooth_constrained(&model, &weights, &ys, cs.unwrap()),
            Case::Predict(j) => eps_predict(&model, &weights, &ys, cs, j),
        };
        let est = match est {
            Ok(e) => e,
            Err(e) => {
                errors.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        let j = match case {
            Case::Predict(j) => j,
            _ => 0,
        };
        let oracle = match primal_brute_force(&model, &weights, &ys, cs, j) {
            Ok(o) => o,
            Err(e) => {
                errors.push(format!("seed {seed} oracle: {e}"));
                continue;
            }
        };
        let label = format!("c2 seed {seed}");
        let horizon = est.horizon();
        let audit_cs = cs.cloned().unwrap_or_else(|| ConstraintSet::empty(horizon, model.n(), model.l()));
        kkt.audit(&label, &model, &weights, &ys, Some(&audit_cs), &est);
        kkt.audit(&format!("{label} oracle"), &model, &weights, &ys, Some(&audit_cs), &oracle);
        if est.dual.as_ref().unwrap().xi.iter().any(|&x| x > 1e-6) {
            active += 1;
        }
        worst_state = worst_state.max(state_gap(&est, &oracle));
        let dual_value = est.dual.as_ref().unwrap().dual_objective;
        let rel = (dual_value - est.primal_objective).abs() / (1.0 + est.primal_objective.abs());
        worst_objective = worst_objective.max(rel);
    }
    Outcome::new(
        errors.is_empty() && worst_state <= 1e-5 && worst_objective <= 1e-6,
        format!(
            "max state gap {worst_state:.2e} (tol 1e-5), max dual/primal rel gap {worst_objective:.2e} (tol 1e-6), {active} instances with active constraints, errors {errors:?}"
        ),
    )
}

fn criterion_3(kkt: &KktLog) -> Outcome {
    Outcome::new(
        kkt.failed.is_empty() && kkt.audited > 0,
        format!(
            "{} converged solves audited, worst residual {:.2e} (tol 1e-6), failures {:?}",
            kkt.audited, kkt.worst, kkt.failed
        ),
    )
}

fn criterion_4() -> Outcome {
    let (model, weights) = (benchmark::model(), benchmark::weights());
    let mut checked = 0;
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let run = benchmark::replay(seed, benchmark::HORIZON);
        let est = eps_smooth(&model, &weights, &run.measurements).expect("eps_smooth");
        let dual = est.dual.as_ref().unwrap();
        for (i, v) in est.vhat.iter().enumerate() {
            if v[0].abs() < weights.eps[0] - 1e-6 {
                checked += 1;
                worst = worst.max(dual.theta[i].abs());
            }
        }
    }
    Outcome::new(
        worst <= 1e-8,
        format!("{checked} in-tube residuals, max |theta| {worst:.2e} (tol 1e-8)"),
    )
}

fn criterion_5() -> Outcome {
    let (model, weights) = (benchmark::model(), benchmark::weights());
    let cs = benchmark::saturation_constraints(benchmark::HORIZON);
    let mut worst = f64::MIN;
    let mut errors = Vec::new();
    for seed in 0..100 {
        let run = benchmark::replay(seed, benchmark::HORIZON);
        match eps_smooth_constrained(&model, &weights, &run.measurements, &cs) {
            Ok(est) => {
                for x in &est.xhat {
                    worst = worst.max(x[1]);
                }
            }
            Err(e) => errors.push(format!("seed {seed}: {e}")),
        }
    }
    Outcome::new(
        errors.is_empty() && worst <= benchmark::SATURATION_LIMIT + 1e-6,
        format!("max second state {worst:.9} (limit 4 + 1e-6), errors {errors:?}"),
    )
}

fn criterion_6() -> Outcome {
    let (model, weights) = (benchmark::model(), benchmark::weights());
    let cs = benchmark::saturation_constraints(benchmark::HORIZON);
    let replays = 200;
    let mut h2_worse = 0;
    let mut gap_sum = 0.0;
    let mut near_total = 0;
    let mut constrained_better = 0;
    for seed in 0..replays {
        let run = benchmark::replay(seed, benchmark::HORIZON);
        let ys = &run.measurements;
        let h2 = h2_smooth(&model, &weights, ys).expect("h2_smooth");
        let eps = eps_smooth(&model, &weights, ys).expect("eps_smooth");
        let cons = eps_smooth_constrained(&model, &weights, ys, &cs).expect("constrained");
        let mae = |est: &EstimateResult| {
            (1..=benchmark::HORIZON)
                .map(|k| (est.xhat[k][0] - run.states[k][0]).abs())
                .sum::<f64>()
                / benchmark::HORIZON as f64
        };
        let (h2_mae, eps_mae) = (mae(&h2), mae(&eps));
        if h2_mae > eps_mae {
            h2_worse += 1;
        }
        gap_sum += h2_mae - eps_mae;

        let near: Vec<usize> = (1..=benchmark::HORIZON)
            .filter(|&k| run.states[k][1] >= benchmark::SATURATION_LIMIT - 0.5)
            .collect();
        if !near.is_empty() {
            near_total += 1;
            let err = |est: &EstimateResult| {
                near.iter()
                    .map(|&k| (est.xhat[k][1] - run.states[k][1]).abs())
                    .sum::<f64>()
            };
            if err(&cons) < err(&h2) {
                constrained_better += 1;
            }
        }
    }
    let share_a = h2_worse as f64 / replays as f64;
    let gap = gap_sum / replays as f64;
    let share_b = constrained_better as f64 / near_total.max(1) as f64;
    Outcome::new(
        share_a >= 0.6 && (0.2..=2.0).contains(&gap) && near_total > 0 && share_b >= 0.6,
        format!(
            "(a) h2 worse in {:.1}% of {replays}, mean first-state MAE gap {gap:.3} (need >= 60%, gap in [0.2, 2.0]); (b) constrained better near saturation in {:.1}% of {near_total} (need >= 60%)",
            100.0 * share_a,
            100.0 * share_b
        ),
    )
}

fn criterion_7() -> Outcome {
    let grid = [1e-12, 0.5, 1.0, 2.0, 5.0];
    let mut scaling = 0.0f64;
    let mut monotone_breaks = Vec::new();
    let mut open_loop = 0.0f64;
    let mut terminal = 0.0f64;
    let mut recursion = 0.0f64;
    for seed in 0..50u64 {
        let spec = InstanceSpec {
            constraint_rows: if seed % 2 == 0 { 0 } else { 3 },
            ..unconstrained_spec()
        };
        let inst = random_instance(3000 + seed, &spec);
        let (model, ys) = (&inst.model, &inst.measurements);
        let solve = |w: &WeightSpec| match &inst.constraints {
            Some(cs) => eps_smooth_constrained(model, w, ys, cs),
            None => eps_smooth(model, w, ys),
        };
        let base = solve(&inst.weights).expect("base solve");
        for c in [0.25, 3.7] {
            let scaled = solve(&inst.weights.scaled(c)).expect("scaled solve");
            scaling = scaling.max(state_gap(&base, &scaled));
        }

        let mut prev_rss = f64::NEG_INFINITY;
        for &e in &grid {
            let est = eps_smooth(model, &inst.weights.with_uniform_eps(e), ys).expect("grid solve");
            let rss = est.residual_sum_of_squares();
            if rss < prev_rss - 1e-9 * (1.0 + prev_rss) {
                monotone_breaks.push(format!("seed {seed} eps {e}: {rss} < {prev_rss}"));
            }
            prev_rss = rss;
            for est in [&est, &base] {
                terminal = terminal.max(est.lambda.last().unwrap().amax());
                for k in 0..est.horizon() {
                    let gap = &est.xhat[k + 1] - &model.a * &est.xhat[k] - &model.b * &est.what[k];
                    recursion = recursion.max(gap.amax());
                }
            }
        }

        let max_y = (1..=ys.len())
            .map(|k| (&ys[k - 1] - &model.c * model.open_loop_state(k)).amax())
            .fold(0.0, f64::max);
        let wide = eps_smooth(model, &inst.weights.with_uniform_eps(max_y), ys).expect("wide solve");
        open_loop = open_loop.max(wide.dual.as_ref().unwrap().theta.amax());
        for k in 0..wide.xhat.len() {
            open_loop = open_loop.max((&wide.xhat[k] - model.open_loop_state(k)).amax());
        }
    }
    Outcome::new(
        scaling <= 1e-7 && monotone_breaks.is_empty() && open_loop <= 1e-9 && terminal == 0.0 && recursion <= 1e-9,
        format!(
            "scaling gap {scaling:.2e} (1e-7), rss decreases on {} grid steps (need 0; first {:?}), open-loop deviation {open_loop:.2e} (1e-9), terminal costate {terminal:.1e} (exact 0), recursion {recursion:.2e} (1e-9)",
            monotone_breaks.len(),
            monotone_breaks.iter().take(3).collect::<Vec<_>>()
        ),
    )
}

fn criterion_8() -> Outcome {
    let mut worst = 0.0f64;
    let mut check = |model: &SystemModel, weights: &WeightSpec, ys: &[DVector<f64>], j: usize| {
        let est = eps_predict(model, weights, ys, None, j).expect("eps_predict");
        let n = ys.len();
        let mut x = est.xhat[n].clone();
        for _ in 0..j {
            x = &model.a * x;
        }
        worst = worst.max((est.terminal() - x).amax());
    };
    for seed in 0..50u64 {
        let j = 1 + (seed as usize % 3);
        let inst = random_instance(4000 + seed, &InstanceSpec::default());
        check(&inst.model, &inst.weights, &inst.measurements, j);
    }
    let run = benchmark::replay(0, benchmark::HORIZON);
    for j in 1..=3 {
        check(&benchmark::model(), &benchmark::weights(), &run.measurements, j);
    }
    Outcome::new(worst <= 1e-8, format!("max |x_(N+j) - A^j x_N| {worst:.2e} (tol 1e-8)"))
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let start = Instant::now();
    let mut out = f();
    let elapsed = start.elapsed();
    if let Some(limit) = limit {
        if elapsed > limit {
            out.passed = false;
            out.detail.push_str(&format!("; runtime {elapsed:.2?} exceeds {limit:?}"));
        }
    }
    (out, elapsed)
}

fn main() -> ExitCode {
    let mut kkt = KktLog::default();
    let mut results = Vec::new();
    results.push(("1 eps -> 0 reduction to h2", timed(Some(Duration::from_secs(5)), || criterion_1(&mut kkt))));
    results.push(("2 dual/primal route equivalence", timed(Some(Duration::from_secs(60)), || criterion_2(&mut kkt))));
    results.push(("3 KKT audit", timed(None, || criterion_3(&kkt))));
    results.push(("4 tube support sparsity", timed(None, criterion_4)));
    results.push(("5 saturation constraint satisfaction", timed(None, criterion_5)));
    results.push(("6 benchmark statistics", timed(Some(Duration::from_secs(600)), criterion_6)));
    results.push(("7 property suite", timed(None, criterion_7)));
    results.push(("8 prediction structure", timed(None, criterion_8)));

    let mut all = true;
    for (name, (out, elapsed)) in &results {
        all &= out.passed;
        let tag = if out.passed { "PASS" } else { "FAIL" };
        println!("{tag} criterion {name} [{elapsed:.2?}]: {}", out.detail);
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
