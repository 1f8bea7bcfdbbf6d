//! Task execution and reports.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use subrq::curve::CurveJet;
use subrq::dynamics::{flow, is_supercritical, HamiltonianSpec};
use subrq::formulas::formula_battery;
use subrq::geometry::{classify_curve, integrate_horizontal, FrameSpec, Verdict};
use subrq::lifts::{abnormal_search, lift_normal, ControlLagrangian, LiftOptions};
use subrq::mane::{bracket_family, genericity_scan, random_null_direction, sample_curve, span_test, SamplerConfig, ScanStats};
use subrq::normal_form::{normal_form, NormalFormOptions};
use subrq::variational::{endpoint_differential, linearized_poincare, nondegeneracy, EndpointConfig, SubmersionVerdict};

use crate::scenario::*;

pub const SCHEMA: &str = "subrq-report/1";

/// Run-wide defaults that tasks may override.
#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    /// Largest power checked for roots of unity.
    pub n_max: usize,
    /// Distance below which `λⁿ` counts as `1`.
    pub root_tol: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            n_max: 12,
            root_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskReport {
    pub index: usize,
    pub kind: &'static str,
    pub label: Option<String>,
    pub pass: bool,
    pub expected: Option<String>,
    pub observed: Option<String>,
    pub notes: Vec<String>,
    pub error: Option<String>,
    pub files: Vec<String>,
    pub result: Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct Generated {
    pub unix_seconds: u64,
    pub version: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub schema: &'static str,
    pub scenario: String,
    pub description: Option<String>,
    pub pass: bool,
    pub passed: usize,
    pub failed: usize,
    pub tasks: Vec<TaskReport>,
    /// Everything that varies between identical runs lives here.
    pub generated: Generated,
}

/// A finished run: the report plus CSV/JSON side files, not yet on disk.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: Report,
    pub files: Vec<(String, String)>,
}

#[derive(Default)]
struct Outcome {
    pass: bool,
    expected: Option<String>,
    observed: Option<String>,
    notes: Vec<String>,
    result: Value,
    files: Vec<(String, String)>,
}

type TaskResult = Result<Outcome, String>;

fn e2s(e: subrq::Error) -> String {
    e.to_string()
}

pub fn run_scenario(sc: &Scenario, opts: &RunOptions) -> RunOutput {
    let mut tasks = vec![];
    let mut files = vec![];
    for (i, task) in sc.tasks.iter().enumerate() {
        let out = run_task(sc, task, i, opts);
        let mut rep = TaskReport {
            index: i,
            kind: task.kind(),
            label: task.label().map(str::to_string),
            pass: false,
            expected: None,
            observed: None,
            notes: vec![],
            error: None,
            files: vec![],
            result: Value::Null,
        };
        match out {
            Ok(o) => {
                rep.pass = o.pass;
                rep.expected = o.expected;
                rep.observed = o.observed;
                rep.notes = o.notes;
                rep.result = o.result;
                rep.files = o.files.iter().map(|(n, _)| n.clone()).collect();
                files.extend(o.files);
            }
            Err(msg) => rep.error = Some(msg),
        }
        tasks.push(rep);
    }
    let passed = tasks.iter().filter(|t| t.pass).count();
    let unix_seconds = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    RunOutput {
        report: Report {
            schema: SCHEMA,
            scenario: sc.name.clone(),
            description: sc.description.clone(),
            pass: passed == tasks.len(),
            passed,
            failed: tasks.len() - passed,
            tasks,
            generated: Generated {
                unix_seconds,
                version: env!("CARGO_PKG_VERSION"),
            },
        },
        files,
    }
}

fn run_task(sc: &Scenario, task: &Task, i: usize, opts: &RunOptions) -> TaskResult {
    // validation guarantees these exist for the tasks that use them
    let h = || sc.hamiltonian.as_ref().ok_or_else(|| "no Hamiltonian".to_string());
    let frame = || sc.frame.as_ref().ok_or_else(|| "no frame".to_string());
    match task {
        Task::Flow(t) => run_flow(h()?, t, i),
        Task::Regularity(t) => run_regularity(frame()?, t, i),
        Task::NormalForm(t) => run_normal_form(h()?, t, i),
        Task::Poincare(t) => run_poincare(h()?, t, opts),
        Task::ManeCheck(t) => run_mane(sc, t),
        Task::FormulaVerify(t) => run_formulas(t),
        Task::Lifts(t) => run_lifts(sc, frame()?, t, i),
        Task::Scan(t) => run_scan(t),
    }
}

fn run_flow(h: &HamiltonianSpec, t: &FlowTask, i: usize) -> TaskResult {
    let orbit = flow(h, &t.x0, t.t).map_err(e2s)?;
    let tol = t.drift_tol.unwrap_or(1e-8 * t.t.max(1.0));
    let sup = match &h.sample_box {
        Some(_) => Some(is_supercritical(h).map_err(e2s)?),
        None => None,
    };
    let pass = orbit.energy_drift <= tol;
    let name = format!("orbit-{i}.csv");
    Ok(Outcome {
        pass,
        expected: Some(format!("drift ≤ {tol:.1e}")),
        observed: Some(format!("drift {:.2e}", orbit.energy_drift)),
        result: json!({
            "t": t.t,
            "steps": orbit.times.len(),
            "energy": orbit.energies.first(),
            "energy_drift": orbit.energy_drift,
            "drift_tol": tol,
            "period": orbit.period,
            "end": orbit.state(orbit.t1()),
            "supercritical": sup,
        }),
        files: vec![(name, orbit.to_csv())],
        ..Default::default()
    })
}

fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::RegularEverywhere => "regular_everywhere",
        Verdict::SingularCurve => "singular_curve",
        Verdict::Mixed => "mixed",
    }
}

fn run_regularity(frame: &FrameSpec, t: &RegularityTask, i: usize) -> TaskResult {
    let curve = integrate_horizontal(frame, &t.q0, &t.control.control(), t.t).map_err(e2s)?;
    let rep = classify_curve(frame, &curve).map_err(e2s)?;
    let ab = abnormal_search(frame, &curve, t.abnormal_samples).map_err(e2s)?;
    let expected = t.expect.verdict.unwrap_or(RegularityVerdict::RegularEverywhere);
    let singular = rep.verdict == Verdict::SingularCurve;
    let full_rank = rep.endpoint.rank == rep.endpoint.dim;
    let mut notes = vec![];
    if ab.covector.is_some() != singular {
        notes.push("abnormal covector search disagrees with the form test".to_string());
    }
    if full_rank == singular {
        notes.push("end-point rank disagrees with the form test".to_string());
    }
    let agree = notes.is_empty();
    let min_r = rep.r.iter().copied().fold(f64::INFINITY, f64::min);
    let max_r = rep.r.iter().copied().fold(0.0, f64::max);
    let sv = &rep.endpoint.singular_values;
    let mut files = vec![];
    if let Some(c) = &ab.covector {
        files.push((format!("covector-{i}.csv"), c.to_csv()));
    }
    Ok(Outcome {
        pass: expected.matches(rep.verdict) && agree,
        expected: Some(expected.name().into()),
        observed: Some(verdict_name(rep.verdict).into()),
        notes,
        result: json!({
            "verdict": rep.verdict,
            "threshold": rep.threshold,
            "min_form_norm": min_r,
            "max_form_norm": max_r,
            "nonregular_samples": rep.nonregular_times.len(),
            "first_nonregular": rep.nonregular_times.first(),
            "endpoint": {
                "rank": rep.endpoint.rank,
                "dim": rep.endpoint.dim,
                "level": rep.endpoint.level,
                "sigma_ratio": sv.last().zip(sv.first()).map(|(l, f)| l / f),
            },
            "abnormal": {
                "found": ab.covector.is_some(),
                "max_constraint": ab.max_constraint,
                "first_violation": ab.first_violation,
                "degenerate": ab.degenerate,
            },
            "end": curve.end(),
        }),
        files,
    })
}

fn nf_options(tol: Option<f64>, degree: Option<usize>) -> NormalFormOptions {
    let mut o = NormalFormOptions::default();
    if let Some(t) = tol {
        o.tol = t;
    }
    if let Some(d) = degree {
        o.degree = d;
    }
    o
}

fn run_normal_form(h: &HamiltonianSpec, t: &NormalFormTask, i: usize) -> TaskResult {
    let orbit = flow(h, &t.x0, t.t).map_err(e2s)?;
    let opts = nf_options(t.tol, t.degree);
    let nf = match normal_form(h, &orbit, t.delta, &opts) {
        Ok(nf) => nf,
        Err(e @ subrq::Error::Certification(_)) => {
            return Ok(Outcome {
                expected: Some("certified".into()),
                observed: Some("not certified".into()),
                notes: vec![e.to_string()],
                ..Default::default()
            })
        }
        Err(e) => return Err(e.to_string()),
    };
    let record = nf.to_record();
    let ndot = nf.n_dot0();
    let a0 = nf.a_node(0);
    let a0: Vec<Vec<f64>> = a0.row_iter().map(|r| r.iter().copied().collect()).collect();
    let name = format!("normal-form-{i}.json");
    let body = serde_json::to_string_pretty(&record).map_err(|e| e.to_string())?;
    Ok(Outcome {
        pass: true,
        expected: Some("certified".into()),
        observed: Some(format!("certified at δ = {}", nf.delta)),
        result: json!({
            "delta": nf.delta,
            "halvings": nf.halvings,
            "energy": nf.energy,
            "d": nf.d,
            "residuals": nf.residuals,
            "n_dot0": ndot.as_slice(),
            "n_dot0_norm": ndot.norm(),
            "a0": a0,
        }),
        files: vec![(name, body)],
        ..Default::default()
    })
}

fn run_poincare(h: &HamiltonianSpec, t: &PoincareTask, opts: &RunOptions) -> TaskResult {
    let pm = linearized_poincare(h, &t.x0, t.period).map_err(e2s)?;
    let n_max = t.n_max.unwrap_or(opts.n_max);
    let tol = t.tol.unwrap_or(opts.root_tol);
    let rep = nondegeneracy(&pm.matrix, n_max, tol).map_err(e2s)?;
    let expected = t.expect.verdict.unwrap_or(PoincareVerdict::Nondegenerate);
    let observed = if rep.degenerate { PoincareVerdict::Degenerate } else { PoincareVerdict::Nondegenerate };
    let name = |v: PoincareVerdict| match v {
        PoincareVerdict::Nondegenerate => "nondegenerate",
        PoincareVerdict::Degenerate => "degenerate",
    };
    Ok(Outcome {
        pass: observed == expected,
        expected: Some(name(expected).into()),
        observed: Some(format!("{} (min |λⁿ−1| = {:.2e} at n = {})", name(observed), rep.min_distance, rep.worst_power)),
        result: json!({
            "period": pm.period,
            "closure": pm.closure,
            "symplectic_defect": pm.symplectic_defect,
            "matrix": pm.rows,
            "n_max": n_max,
            "tol": tol,
            "spectrum": rep,
        }),
        ..Default::default()
    })
}

fn mane_curve(sc: &Scenario, t: &ManeCheckTask) -> Result<(CurveJet, Value), String> {
    if let Some(o) = &t.orbit {
        let h = sc.hamiltonian.as_ref().ok_or("no Hamiltonian")?;
        let orbit = flow(h, &o.x0, o.t).map_err(e2s)?;
        let nf = normal_form(h, &orbit, o.delta, &NormalFormOptions::default()).map_err(e2s)?;
        let info = json!({"source": "orbit", "delta": nf.delta, "n_dot0_norm": nf.n_dot0().norm()});
        Ok((nf.curve.clone(), info))
    } else if let Some(s) = &t.sample {
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        let cfg = SamplerConfig {
            order: s.order,
            delta: s.delta,
            depth: t.depth,
            scale: s.scale,
        };
        let n = random_null_direction(s.d, s.order, s.flat, &mut rng).map_err(e2s)?;
        let a = sample_curve(&n, &cfg, &mut rng).map_err(e2s)?;
        let info = json!({"source": "sample", "d": s.d, "seed": s.seed, "flat": s.flat, "delta": s.delta});
        Ok((a, info))
    } else {
        Err("no curve source".into())
    }
}

fn run_mane(sc: &Scenario, t: &ManeCheckTask) -> TaskResult {
    let (a, source) = mane_curve(sc, t)?;
    let fam = bracket_family(&a, t.depth, t.t0).map_err(e2s)?;
    let cert = span_test(&fam).map_err(e2s)?;
    let mut notes = vec![];
    let sub = if t.endpoint {
        let sub = endpoint_differential(&a, &EndpointConfig::default()).map_err(e2s)?;
        if cert.pass && sub.verdict != SubmersionVerdict::Pass {
            notes.push(format!("span test passes but the end-point map is {:?}", sub.verdict).to_lowercase());
        }
        Some(sub)
    } else {
        None
    };
    let consistent = notes.is_empty();
    let expected = t.expect.verdict.unwrap_or(SpanVerdict::Pass);
    let observed = if cert.pass { SpanVerdict::Pass } else { SpanVerdict::Fail };
    let name = |v: SpanVerdict| if v == SpanVerdict::Pass { "pass" } else { "fail" };
    Ok(Outcome {
        pass: observed == expected && consistent,
        expected: Some(format!("span {}", name(expected))),
        observed: Some(format!("span {} (rank {}/{})", name(observed), cert.rank, cert.target)),
        notes,
        result: json!({
            "curve": source,
            "span": cert,
            "endpoint": sub,
        }),
        ..Default::default()
    })
}

fn run_formulas(t: &FormulaTask) -> TaskResult {
    let mut checks = vec![];
    for &d in &t.dims {
        checks.extend(formula_battery(d, t.trials, t.seed).map_err(e2s)?);
    }
    let failed: Vec<String> = checks.iter().filter(|c| !c.pass).map(|c| format!("{} (d = {})", c.name, c.dim)).collect();
    let worst = checks.iter().map(|c| c.max_error).fold(0.0, f64::max);
    Ok(Outcome {
        pass: failed.is_empty(),
        expected: Some("all closed forms match".into()),
        observed: Some(format!("{}/{} match, worst error {worst:.2e}", checks.len() - failed.len(), checks.len())),
        notes: failed,
        result: json!({ "checks": checks }),
        ..Default::default()
    })
}

fn run_lifts(sc: &Scenario, frame: &FrameSpec, t: &LiftsTask, i: usize) -> TaskResult {
    let curve = integrate_horizontal(frame, &t.q0, &t.control.control(), t.t).map_err(e2s)?;
    let ab = abnormal_search(frame, &curve, t.abnormal_samples).map_err(e2s)?;
    let mut files = vec![];
    let mut notes = vec![];
    let mut ok = true;
    let normal = match &t.p0 {
        Some(p0) => {
            let lag = match &sc.metric {
                Some(m) => ControlLagrangian::new(m.clone(), sc.potential.clone()).map_err(e2s)?,
                None => ControlLagrangian::flat(frame.rank()),
            };
            match lift_normal(frame, &lag, &curve, p0, &LiftOptions::default()) {
                Ok(lift) => {
                    files.push((format!("lift-{i}.csv"), lift.to_csv()));
                    json!({
                        "identity_residual": lift.identity_residual,
                        "drift": lift.drift,
                        "p_end": lift.p.last(),
                    })
                }
                Err(e) => {
                    ok = false;
                    notes.push(format!("normal lift rejected: {e}"));
                    Value::Null
                }
            }
        }
        None => Value::Null,
    };
    let found = ab.covector.is_some();
    if let Some(c) = &ab.covector {
        files.push((format!("covector-{i}.csv"), c.to_csv()));
    }
    if let Some(want) = t.expect.abnormal {
        if want != found {
            ok = false;
        }
    }
    let describe = |b: bool| if b { "abnormal covector" } else { "no abnormal covector" };
    Ok(Outcome {
        pass: ok,
        expected: t.expect.abnormal.map(|b| describe(b).to_string()),
        observed: Some(describe(found).into()),
        notes,
        result: json!({
            "normal": normal,
            "abnormal": {
                "found": found,
                "max_constraint": ab.max_constraint,
                "first_violation": ab.first_violation,
                "degenerate": ab.degenerate,
            },
        }),
        files,
    })
}

/// Genericity scan of random curves sharing one random null direction.
pub fn scan_stats(d: usize, samples: usize, seed: u64, cfg: &SamplerConfig, flat: bool) -> subrq::Result<ScanStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = random_null_direction(d, cfg.order, flat, &mut rng)?;
    Ok(genericity_scan(&n, samples, cfg, seed))
}

fn run_scan(t: &ScanTask) -> TaskResult {
    let cfg = SamplerConfig {
        order: t.order,
        delta: t.delta,
        depth: t.depth,
        scale: t.scale,
    };
    let stats = scan_stats(t.d, t.samples, t.seed, &cfg, t.flat).map_err(e2s)?;
    let pass = t.samples == 0 || t.min_pass_rate.is_none_or(|m| stats.pass_rate >= m);
    Ok(Outcome {
        pass,
        expected: t.min_pass_rate.map(|m| format!("pass rate ≥ {m}")),
        observed: Some(format!("{}/{} pass", stats.passes, stats.samples)),
        result: serde_json::to_value(&stats).map_err(|e| e.to_string())?,
        ..Default::default()
    })
}

pub fn report_json(r: &Report) -> String {
    let mut s = serde_json::to_string_pretty(r).expect("report serializes");
    s.push('\n');
    s
}

/// Human-readable pass/fail table.
pub fn report_text(r: &Report) -> String {
    let mut s = format!("scenario {}\n", r.scenario);
    if let Some(d) = &r.description {
        s += &format!("  {d}\n");
    }
    s += &format!("\n{:>3}  {:<15} {:<28} {:<6} detail\n", "#", "kind", "label", "result");
    for t in &r.tasks {
        let detail = match (&t.error, &t.observed, &t.expected) {
            (Some(e), _, _) => format!("error: {e}"),
            (None, Some(o), Some(e)) => format!("{o} (expected {e})"),
            (None, Some(o), None) => o.clone(),
            (None, None, _) => String::new(),
        };
        s += &format!(
            "{:>3}  {:<15} {:<28} {:<6} {}\n",
            t.index,
            t.kind,
            t.label.as_deref().unwrap_or("-"),
            if t.pass { "PASS" } else { "FAIL" },
            detail
        );
        for n in &t.notes {
            s += &format!("{:>51}  note: {n}\n", "");
        }
    }
    s += &format!(
        "\n{}: {} of {} tasks passed\n",
        if r.pass { "PASS" } else { "FAIL" },
        r.passed,
        r.tasks.len()
    );
    s
}

/// Writes `report.json`, `report.txt` and the side files into `dir`.
pub fn write_outputs(dir: &Path, out: &RunOutput) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, body) in &out.files {
        std::fs::write(dir.join(name), body)?;
    }
    std::fs::write(dir.join("report.txt"), report_text(&out.report))?;
    std::fs::write(dir.join("report.json"), report_json(&out.report))?;
    Ok(())
}
