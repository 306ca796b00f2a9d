//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on failure.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use fbsee::experiment::{
    fractional_operator_checks, ibp_mittag_leffler, ibp_test_pair, lq_verification, parse_config, resolvent_checks, smp_experiment, special_function_checks, CheckRow, SmpResults,
};
use fbsee::smp::{ScalingReport, SlopeFit};
use fbsee::special::FracOrder;

const ALPHA: f64 = 0.75;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn table_outcome(rows: &[CheckRow]) -> Outcome {
    let failed: Vec<String> = rows.iter().filter(|r| !r.pass).map(|r| format!("{} {} err={:.2e}", r.suite, r.case, r.error)).collect();
    let worst = rows.iter().filter(|r| r.tolerance > 0.0 && r.tolerance.is_finite()).map(|r| r.error / r.tolerance).fold(0.0, f64::max);
    outcome(failed.is_empty(), format!("{} checks, worst error/tolerance {worst:.2e}{}", rows.len(), if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join("; ")) }))
}

fn slope(s: &SlopeFit) -> Option<f64> {
    s.slope()
}

fn fmt_slope(s: &SlopeFit) -> String {
    match s {
        SlopeFit::Fitted { slope, half_width, points } => format!("{slope:.3}±{half_width:.3} ({points} pts)"),
        SlopeFit::Inconclusive { points } => format!("inconclusive ({points} pts)"),
    }
}

fn criterion_1() -> Outcome {
    table_outcome(&special_function_checks().expect("special-function checks run"))
}

fn criterion_2() -> Outcome {
    table_outcome(&fractional_operator_checks(ALPHA).expect("operator checks run"))
}

fn criterion_3() -> Outcome {
    table_outcome(&resolvent_checks(64).expect("resolvent checks run"))
}

fn lq_remainder_is_exact(r: &ScalingReport) -> bool {
    r.rows.iter().all(|row| row.flags[2].roundoff)
}

fn criterion_4(res: &SmpResults) -> Outcome {
    let lq = &res.lq;
    let p2 = slope(&lq.second_slope).is_some_and(|s| (s - 2.0 * ALPHA).abs() <= 0.15);
    let p4 = slope(&lq.fourth_slope).is_some_and(|s| (s - 4.0 * ALPHA).abs() <= 0.3);
    let lq_rem = match slope(&lq.remainder_slope) {
        Some(r) => slope(&lq.second_slope).is_some_and(|s| r >= s + 0.1),
        None => lq_remainder_is_exact(lq),
    };
    let (nl_rem, nl_detail) = match &res.nonlinear {
        Some(nl) => {
            let ok = matches!((slope(&nl.remainder_slope), slope(&nl.second_slope)), (Some(r), Some(s)) if r >= s + 0.1);
            (ok, format!("; nonlinear p2 {} rem {}", fmt_slope(&nl.second_slope), fmt_slope(&nl.remainder_slope)))
        }
        None => (false, "; nonlinear variant missing".into()),
    };
    let lq_rem_text = if lq_remainder_is_exact(lq) { "identically zero (roundoff)".to_string() } else { fmt_slope(&lq.remainder_slope) };
    outcome(
        p2 && p4 && lq_rem && nl_rem,
        format!("p2 {} p4 {} LQ remainder {lq_rem_text}{nl_detail}", fmt_slope(&lq.second_slope), fmt_slope(&lq.fourth_slope)),
    )
}

fn criterion_5(res: &SmpResults) -> Outcome {
    let gap = slope(&res.lq.gap_slope);
    let row = res.lq.rows.iter().min_by(|a, b| (a.epsilon - 0.05).abs().total_cmp(&(b.epsilon - 0.05).abs())).expect("rows");
    let rel = row.variation.gap.value.abs() / row.variation.rhs.value.abs();
    let golden: serde_json::Value = serde_json::from_str(include_str!("data/golden.json")).unwrap();
    let limit = golden["first_variation"]["max_gap_over_rhs"].as_f64().unwrap();
    outcome(
        gap.is_some_and(|g| g > ALPHA + 0.05) && rel <= limit,
        format!("gap slope {} (need > {:.2}); at eps={:.4} gap/|rhs| = {rel:.3e} (limit {limit})", fmt_slope(&res.lq.gap_slope), ALPHA + 0.05, row.epsilon),
    )
}

fn criterion_6(res: &SmpResults) -> Outcome {
    let m = &res.margin.worst;
    let s = &res.shifted_margin.worst;
    outcome(
        m.value >= -3.0 * m.standard_error && s.value < -10.0 * s.standard_error,
        format!(
            "worst margin {:.3e} (SE {:.1e}) over {} pairs; shifted control margin {:.3e} (SE {:.1e})",
            m.value, m.standard_error, res.margin.pairs, s.value, s.standard_error
        ),
    )
}

fn criterion_7() -> Outcome {
    let cfg = parse_config(&std::fs::read_to_string(config_dir().join("lq_verify.json")).unwrap()).unwrap();
    let r = lq_verification(&cfg).expect("verification runs");
    let j = &r.solution.cost;
    let bf = r.brute_force.cost.value >= j.value - 3.0 * j.standard_error;
    let one_block = r.one_block.cost.value > j.value;
    let worst = r.perturbations.iter().map(|p| p.increase.value / p.increase.standard_error.max(f64::MIN_POSITIVE)).fold(f64::INFINITY, f64::min);
    let perturb = r.perturbations.iter().all(|p| p.increase.value >= -3.0 * p.increase.standard_error);
    let directions = r.perturbations.iter().map(|p| p.direction).max().map_or(0, |d| d + 1);
    let x0_gap = (r.solution.x0_mean[0] - r.alternative.x0_mean[0]).abs();
    let unique = x0_gap <= 10.0 * cfg.numerics.tol;
    outcome(
        bf && one_block && perturb && unique && directions >= 20,
        format!(
            "J={:.5}±{:.1e}; brute force {:.5} (one block {:.5}); {} perturbations over {directions} directions, min increase/SE {worst:.1}; start gap {x0_gap:.1e}",
            j.value,
            j.standard_error,
            r.brute_force.cost.value,
            r.one_block.cost.value,
            r.perturbations.len()
        ),
    )
}

fn criterion_8() -> Outcome {
    let alpha = FracOrder::new(ALPHA).unwrap();
    let levels: Vec<_> = [256, 512, 1024].iter().map(|&n| ibp_test_pair(alpha, 1.0, n).unwrap()).collect();
    let ratios: Vec<f64> = levels.windows(2).map(|w| w[0].gap / w[1].gap).collect();
    let rate_ok = ratios.iter().all(|r| *r >= 2.0 && (r.log2() - (2.0 - ALPHA)).abs() <= 0.1);
    let ml = ibp_mittag_leffler(alpha, -1.0, 2.0, 1.0, 1024).unwrap();
    let ml_rel = ml.gap / ml.lhs.abs().max(ml.rhs.abs());
    outcome(
        rate_ok && ml_rel <= 0.02,
        format!(
            "gaps {:.3e} {:.3e} {:.3e}, ratios {:.3} {:.3} (order {:.2} expected); closed-form adjoint gap {ml_rel:.2e} of the larger side",
            levels[0].gap,
            levels[1].gap,
            levels[2].gap,
            ratios[0],
            ratios[1],
            2.0 - ALPHA
        ),
    )
}

fn config_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

const REPRO_CONFIGS: [&str; 5] = [
    r#"{"experiment": "operators-check"}"#,
    r#"{"experiment": "smp-scaling", "numerics": {"n_steps": 32, "n_paths": 400, "epsilons": [0.5, 0.35, 0.25, 0.16, 0.09, 0.045]}, "smp": {"n_test_controls": 10}}"#,
    r#"{"experiment": "lq-solve", "numerics": {"n_steps": 32, "n_paths": 500}}"#,
    r#"{"experiment": "lq-verify", "numerics": {"n_steps": 16, "n_paths": 200}, "verify": {"blocks": 2, "n_directions": 3, "fd_directions": 1}}"#,
    r#"{"experiment": "ibp-check", "ibp": {"levels": [64, 128]}}"#,
];

fn run_lab(config: &Path, out: &Path, threads: usize) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_fbsee-lab"))
        .args(["run", "--config", config.to_str().unwrap(), "--output-dir", out.to_str().unwrap(), "--threads", &threads.to_string(), "--seed", "31"])
        .output()
        .map_err(|e| e.to_string())?;
    if status.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&status.stderr).into_owned())
    }
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut compared = 0;
    let mut problems = Vec::new();
    for (k, body) in REPRO_CONFIGS.iter().enumerate() {
        let cfg = dir.path().join(format!("c{k}.json"));
        std::fs::write(&cfg, body).unwrap();
        let (a, b) = (dir.path().join(format!("a{k}")), dir.path().join(format!("b{k}")));
        if let Err(e) = run_lab(&cfg, &a, 1).and_then(|_| run_lab(&cfg, &b, 3)) {
            problems.push(format!("config {k}: {e}"));
            continue;
        }
        let mut names: Vec<String> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).filter(|n| n != "manifest.json").collect();
        names.sort();
        for name in names {
            let (x, y) = (std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).ok());
            if Some(&x) != y.as_ref() {
                problems.push(format!("{name} differs"));
            }
            compared += 1;
        }
    }
    outcome(problems.is_empty() && compared >= 12, format!("{compared} result files byte-identical across --threads 1 and 3{}", if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }))
}

fn main() {
    let mut lines = Vec::new();
    let mut timed = |id: usize, name: &str, limit: Duration, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        let took = start.elapsed();
        let pass = o.pass && took <= limit;
        let line = format!("{} criterion {id} {name}: {} [{:.1} s, limit {} s]", if pass { "PASS" } else { "FAIL" }, o.detail, took.as_secs_f64(), limit.as_secs());
        println!("{line}");
        lines.push(pass);
    };
    timed(1, "special functions", Duration::from_secs(10), &mut criterion_1);
    timed(2, "fractional operators", Duration::from_secs(30), &mut criterion_2);
    timed(3, "resolvent bounds", Duration::from_secs(60), &mut criterion_3);
    let start = Instant::now();
    let cfg = parse_config(&std::fs::read_to_string(config_dir().join("smp_scaling.json")).unwrap()).unwrap();
    let smp = smp_experiment(&cfg).expect("maximum-principle experiment runs");
    let shared = start.elapsed();
    println!("     (moment scaling, variation and Hamiltonian runs took {:.1} s)", shared.as_secs_f64());
    let within = |limit: u64| shared <= Duration::from_secs(limit);
    timed(4, "moment rates", Duration::from_secs(900), &mut || {
        let o = criterion_4(&smp);
        outcome(o.pass && within(900), o.detail)
    });
    timed(5, "first variation", Duration::from_secs(900), &mut || {
        let o = criterion_5(&smp);
        outcome(o.pass && within(900), o.detail)
    });
    timed(6, "Hamiltonian inequality", Duration::from_secs(300), &mut || {
        let o = criterion_6(&smp);
        outcome(o.pass && within(900), o.detail)
    });
    timed(7, "LQ optimality", Duration::from_secs(600), &mut criterion_7);
    timed(8, "integration by parts", Duration::from_secs(120), &mut criterion_8);
    timed(9, "reproducibility", Duration::from_secs(600), &mut criterion_9);
    let failed = lines.iter().filter(|p| !**p).count();
    println!("acceptance: {} of {} criteria passed", lines.len() - failed, lines.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
