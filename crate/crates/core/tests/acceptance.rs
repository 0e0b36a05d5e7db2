//! One line per acceptance criterion. Exits non-zero if any criterion fails.

use std::time::Instant;

use disslab::analysis::*;
use disslab::dissipativity::*;
use disslab::nlp::NlpOptions;
use disslab::ocp::{check_semigroup, validate_derivatives, OcpProblem};
use disslab::par::Execution;
use disslab::problems::*;
use disslab::sop::{shift_cost, solve_sop_default, SteadyStateSolution};
use disslab::transcription::*;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn solve(problem: &OcpProblem, x0: f64, horizon: f64, intervals: usize) -> Result<OcpSolution, String> {
    solve_ocp(problem, &[x0], &TranscriptionConfig::new(intervals + 1, horizon)).map_err(fail)
}

fn steady_of(problem: &OcpProblem) -> Result<SteadyStateSolution, String> {
    solve_sop_default(problem, 0, Execution::Parallel).map_err(fail)
}

fn infinite(problem: &OcpProblem, steady: &SteadyStateSolution, x0: f64, step: f64) -> Result<InfiniteHorizonSolution, String> {
    let shifted = shift_cost(problem, steady);
    approx_infinite_horizon(&shifted, &[x0], &SteadyTarget::from(steady), 1e-6, step, NlpOptions::default()).map_err(fail)
}

/// Strict x-only certificate for fish with the differential rows on a grid.
fn fish_certificate(fish: &BenchmarkProblem, steady: &SteadyStateSolution) -> Result<StorageCertificate, String> {
    let sols: Vec<OcpSolution> =
        [0.3, 0.7, 0.95, 1.05, 1.5, 2.5].iter().map(|x| solve(&fish.problem, *x, 10.0, 400)).collect::<Result<_, _>>()?;
    let mut options = FitOptions::new(4, StrictnessMode::Maximize { p_ell: 2.0, x_only: true });
    options.hjb_grid = Some((fish.problem.initial_set.grid(50), fish.problem.input_set.grid(50)));
    fit_storage(&fish.problem, steady, &sols, &options).map_err(fail)
}

fn c1_halkin_value() -> Outcome {
    let h = make_halkin();
    let mut worst: f64 = 0.0;
    for x0 in [0.1, 0.5, 0.9] {
        let sol = solve(&h.problem, x0, 20.0, 400)?;
        worst = worst.max((sol.value - (x0 - 1.0)).abs());
    }
    ensure(worst <= 1e-3, format!("max |V_T - (x0 - 1)| = {worst:.2e} (tol 1e-3)"))
}

fn c2_halkin_storage() -> Outcome {
    let h = make_halkin();
    let steady = steady_of(&h.problem)?;
    let config = TranscriptionConfig::new(401, 20.0);
    let sols: Vec<OcpSolution> =
        [0.1, 0.3, 0.5, 0.7, 0.9].iter().map(|x| solve_ocp(&h.problem, &[*x], &config).map_err(fail)).collect::<Result<_, _>>()?;
    let cert = fit_storage(&h.problem, &steady, &sols, &FitOptions::new(1, StrictnessMode::None)).map_err(fail)?;
    // S(x) = 1 - x in the basis {1, x - x_bar} with x_bar = 1
    let err = (cert.coefficients[0] - 0.0).abs().max((cert.coefficients[1] + 1.0).abs());
    let mut options = FitOptions::new(1, StrictnessMode::Maximize { p_ell: 2.0, x_only: false });
    options.steady_pairs = optimal_steady_alternatives(&h.problem, &steady, &config);
    options.hjb_grid = Some((h.problem.initial_set.grid(50), h.problem.input_set.grid(50)));
    let strict = fit_storage(&h.problem, &steady, &sols, &options).map_err(fail)?;
    ensure(
        err <= 1e-4 && strict.c_ell <= 1e-6,
        format!("coefficient error {err:.2e} (tol 1e-4), strict c_l = {:.2e} (tol 1e-6)", strict.c_ell),
    )
}

fn c3_fish_steady() -> Outcome {
    let fish = make_fish(FishParams::default()).map_err(fail)?;
    let s = steady_of(&fish.problem)?;
    // minimization convention: lambda_bar = -1 is the maximizing +1
    let err = (s.x_bar[0] - 1.0).abs().max((s.u_bar[0] - 1.0).abs()).max((s.lambda_bar[0] + 1.0).abs());
    let det_err = (s.det_hess + 1.0).abs();
    ensure(
        err <= 1e-6 && s.licq && det_err <= 1e-6,
        format!(
            "(x, u, -lambda) = ({:.8}, {:.8}, {:.8}), licq {}, det {:.8} (tol 1e-6)",
            s.x_bar[0], s.u_bar[0], -s.lambda_bar[0], s.licq, s.det_hess
        ),
    )
}

fn c4_transversality() -> Outcome {
    let fish = make_fish(FishParams::default()).map_err(fail)?;
    let steady = steady_of(&fish.problem)?;
    let ih = infinite(&fish.problem, &steady, 0.5, 0.05)?;
    let r = transversality_check(&fish.problem, &ih, &steady).map_err(fail)?;
    ensure(
        r.mid_gap <= 1e-2 && r.stationarity_residual <= 1e-4,
        format!("mid-horizon gap {:.2e} (tol 1e-2), final-node residual {:.2e} (tol 1e-4), T = {}", r.mid_gap, r.stationarity_residual, r.horizon),
    )
}

fn c5_lq() -> Outcome {
    let lq = make_lq(1.0, 1.0, 1.0, 1.0).map_err(fail)?;
    let p = lq.refs.riccati.ok_or("lq without Riccati reference")?;
    let steady = steady_of(&lq.problem)?;
    let settings = SurrogateSettings { step: 0.005, ..Default::default() };
    let sur = ValueSurrogate::build(&lq.problem, &steady, 11, settings, Execution::Parallel).map_err(fail)?;
    let mut v_err: f64 = 0.0;
    for i in 0..11 {
        let x = -1.0 + 0.2 * i as f64;
        v_err = v_err.max((sur.value(&[x]).ok_or("surrogate undefined")? - p * x * x).abs());
    }
    let ih = infinite(&lq.problem, &steady, 1.0, 0.01)?;
    let l_err = (ih.solution.dual.adjoints[0][0] - 2.0 * p).abs();
    let x0: Vec<Vec<f64>> = [-1.0, -0.5, 0.5, 1.0].iter().map(|x| vec![*x]).collect();
    let b = equivalence_battery(&lq.problem, &x0, &BatteryOptions::default()).map_err(fail)?;
    let triple = (b.strictly_dissipative, b.primal_stable, b.adjoint_convergent);
    ensure(
        v_err <= 1e-4 && l_err <= 1e-3 && triple == (true, true, true),
        format!("|V - P x^2| = {v_err:.2e} (tol 1e-4), |lambda(0) - 2 P x0| = {l_err:.2e} (tol 1e-3), battery {triple:?}"),
    )
}

fn c6_gradients() -> Outcome {
    let lq = make_lq(1.0, 1.0, 1.0, 1.0).map_err(fail)?;
    let steady = steady_of(&lq.problem)?;
    let direct = DirectValue::new(&lq.problem, &steady, SurrogateSettings::default());
    let x0: Vec<Vec<f64>> = [-1.0, -0.5, 0.5, 1.0].iter().map(|x| vec![*x]).collect();
    let b = equivalence_battery(&lq.problem, &x0, &BatteryOptions::default()).map_err(fail)?;
    let gi_lq = gradient_identities(&steady, b.certificate.as_ref(), &direct, 1e-3).map_err(fail)?;

    let fish = make_fish(FishParams::default()).map_err(fail)?;
    let steady = steady_of(&fish.problem)?;
    let cert = fish_certificate(&fish, &steady)?;
    let direct = DirectValue::new(&fish.problem, &steady, SurrogateSettings::default());
    let gi_fish = gradient_identities(&steady, Some(&cert), &direct, 1e-3).map_err(fail)?;

    let value = gi_lq.value_residual.max(gi_fish.value_residual);
    let storage = gi_lq.storage_residual.unwrap_or(f64::INFINITY).max(gi_fish.storage_residual.unwrap_or(f64::INFINITY));
    ensure(
        value <= 1e-2 && storage <= 1e-2,
        format!("|grad V - lambda_bar| = {value:.2e}, |grad S + lambda_bar| = {storage:.2e} (tol 1e-2)"),
    )
}

fn c7_hamiltonian() -> Outcome {
    let mut cases: Vec<(String, OcpSolution)> = Vec::new();
    let h = make_halkin();
    for x0 in [0.1, 0.5, 0.9] {
        cases.push((format!("halkin {x0}"), solve(&h.problem, x0, 20.0, 400)?));
    }
    let fish = make_fish(FishParams::default()).map_err(fail)?;
    for x0 in [0.5, 1.5, 2.5] {
        cases.push((format!("fish {x0}"), solve(&fish.problem, x0, 20.0, 800)?));
    }
    let lq = make_lq(1.0, 1.0, 1.0, 1.0).map_err(fail)?;
    for x0 in [-1.0, 0.5, 1.0] {
        cases.push((format!("lq {x0}"), solve(&lq.problem, x0, 10.0, 400)?));
    }
    let (mut std_worst, mut std_at) = (0.0, String::new());
    let mut lam_worst: f64 = 0.0;
    for (name, sol) in &cases {
        let s = sol.hamiltonian_scaled_std();
        if s > std_worst {
            std_worst = s;
            std_at = name.clone();
        }
        let last = &sol.dual.adjoints[sol.intervals];
        lam_worst = lam_worst.max(last.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    ensure(
        std_worst <= 1e-4 && lam_worst <= 1e-8,
        format!("worst scaled std {std_worst:.2e} ({std_at}) (tol 1e-4), max |lambda_N| = {lam_worst:.2e} (tol 1e-8)"),
    )
}

fn c8_turnpike() -> Outcome {
    let fish = make_fish(FishParams::default()).map_err(fail)?;
    let h = 0.05;
    let sols: Vec<OcpSolution> =
        [10.0, 20.0, 40.0].iter().map(|t: &f64| solve(&fish.problem, 0.5, *t, (t / h).round() as usize)).collect::<Result<_, _>>()?;
    let r = &turnpike_metrics(&sols, &[1.0], &[0.05], None)[0];
    ensure(r.spread() <= 2.0 * h, format!("time outside {:?}, spread {:.3} (tol {:.2})", r.time_outside, r.spread(), 2.0 * h))
}

fn c9_properties() -> Outcome {
    let fish = make_fish(FishParams::default()).map_err(fail)?;
    let lq = make_lq(1.0, 1.0, 1.0, 1.0).map_err(fail)?;
    let h = make_halkin();

    let deriv = [&h, &fish, &lq].iter().map(|b| validate_derivatives(&b.problem, 50, 0).max_error()).fold(0.0, f64::max);

    // the junction input sees one interval in the tail problem, so the gap is O(h^2)
    let semigroup = |b: &BenchmarkProblem, x0: f64, horizon: f64, step: f64| {
        let solve_traj = |x: &[f64], t: f64| {
            let config = TranscriptionConfig::new((t / step).round() as usize + 1, t);
            solve_ocp(&b.problem, x, &config).map(|s| s.primal)
        };
        check_semigroup(&solve_traj, &[x0], 1.0, horizon).map_err(fail)
    };
    let semi = semigroup(&lq, 1.0, 10.0, 0.01)?.max(semigroup(&h, 0.5, 6.0, 0.05)?);

    // fresh initial states, none of them used for fitting
    let steady = steady_of(&fish.problem)?;
    let cert = fish_certificate(&fish, &steady)?;
    let fresh: Vec<OcpSolution> =
        [0.4, 0.85, 1.2, 2.0, 2.8].iter().map(|x| solve(&fish.problem, *x, 10.0, 400)).collect::<Result<_, _>>()?;
    let mut residual = dissipation_residual(&fish.problem, &steady, &cert, &fresh);
    let hs = steady_of(&h.problem)?;
    let fit: Vec<OcpSolution> = [0.1, 0.5, 0.9].iter().map(|x| solve(&h.problem, *x, 20.0, 400)).collect::<Result<_, _>>()?;
    let hcert = fit_storage(&h.problem, &hs, &fit, &FitOptions::new(1, StrictnessMode::None)).map_err(fail)?;
    let fresh: Vec<OcpSolution> = [0.2, 0.45, 0.8].iter().map(|x| solve(&h.problem, *x, 20.0, 400)).collect::<Result<_, _>>()?;
    residual = residual.max(dissipation_residual(&h.problem, &hs, &hcert, &fresh));

    let x0: Vec<Vec<f64>> = [0.3, 0.7, 1.5, 2.5].iter().map(|x| vec![*x]).collect();
    let run = |exec| {
        let options = BatteryOptions { exec, ..Default::default() };
        equivalence_battery(&fish.problem, &x0, &options).and_then(|r| r.to_json()).map_err(fail)
    };
    let first = run(Execution::Parallel)?;
    let identical = first == run(Execution::Parallel)? && first == run(Execution::Sequential)?;

    ensure(
        deriv <= 1e-5 && semi <= 1e-4 && residual <= DI_TOL && identical,
        format!(
            "derivatives {deriv:.2e} (tol 1e-5), semigroup {semi:.2e} (tol 1e-4), out-of-sample residual {residual:.2e} (tol 1e-6), identical reruns {identical}"
        ),
    )
}

fn c10_halkin_negative() -> Outcome {
    let h = make_halkin();
    let x0: Vec<Vec<f64>> = [0.1, 0.5, 0.9].iter().map(|x| vec![*x]).collect();
    let r = equivalence_battery(&h.problem, &x0, &BatteryOptions::default()).map_err(fail)?;
    let dichotomy = r.state_converges && !r.strictly_dissipative && !r.steady.xu_regular && (r.steady.lambda_bar[0] - 1.0).abs() <= 1e-6;
    ensure(
        dichotomy && !r.agree,
        format!(
            "state converges {}, strict certificate {}, x-u regular {}, lambda_bar {:.6}, violated: {}",
            r.state_converges,
            r.strictly_dissipative,
            r.steady.xu_regular,
            r.steady.lambda_bar[0],
            r.violated_preconditions.join("; ")
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("halkin value function", c1_halkin_value),
        ("halkin storage recovery", c2_halkin_storage),
        ("fish steady state", c3_fish_steady),
        ("transversality", c4_transversality),
        ("lq cross-validation", c5_lq),
        ("gradient identities", c6_gradients),
        ("hamiltonian constancy", c7_hamiltonian),
        ("turnpike boundedness", c8_turnpike),
        ("property suites", c9_properties),
        ("halkin negative control", c10_halkin_negative),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {tag} {name}: {detail} [{secs:.1}s]", i + 1);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
