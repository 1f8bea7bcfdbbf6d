//! Scenario files.
//!
//! A scenario is TOML with an optional geometry (`[chart]`, `[frame]`,
//! `[hamiltonian]`) and an ordered list of `[[task]]` tables. Expressions are
//! strings in the `q1..qN` grammar of [`subrq::expr`]. Everything is parsed and
//! checked up front so a bad file never produces a partial report.

use std::fmt;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use subrq::dynamics::{legendre_dual_quadratic, HamiltonianSpec, Kinetic, KineticClass};
use subrq::expr::{parse_in_dim, Expr};
use subrq::geometry::{Chart, Control, FrameSpec, Verdict};

/// Schema violation, located by a dotted path into the document.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemaError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for SchemaError {}

fn err(path: impl Into<String>, message: impl Into<String>) -> SchemaError {
    SchemaError {
        path: path.into(),
        message: message.into(),
    }
}

type Res<T> = std::result::Result<T, SchemaError>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    #[serde(default)]
    description: Option<String>,
    #[serde(default)]
    chart: Option<ChartSection>,
    #[serde(default)]
    frame: Option<FrameSection>,
    #[serde(default)]
    hamiltonian: Option<HamiltonianSection>,
    #[serde(default)]
    task: Vec<toml::Table>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChartSection {
    dim: usize,
    #[serde(default)]
    bounds: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameSection {
    fields: Vec<Vec<String>>,
    eta: Vec<String>,
}

#[derive(Debug, Clone, Copy, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
enum ClassName {
    #[default]
    Quad,
    Rf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct HamiltonianSection {
    #[serde(default)]
    class: ClassName,
    /// Metric on the distribution in frame coordinates.
    #[serde(default)]
    metric: Option<Vec<Vec<String>>>,
    /// Full cometric `B(q)`, as an alternative to `metric`.
    #[serde(default)]
    b: Option<Vec<Vec<String>>>,
    #[serde(default = "zero_src")]
    potential: String,
    energy: f64,
    #[serde(default, rename = "box")]
    sample_box: Option<Vec<[f64; 2]>>,
}

fn zero_src() -> String {
    "0".into()
}

/// Control of a horizontal curve: a constant vector or per-component
/// polynomial coefficients in `t`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ControlSpec {
    Constant(Vec<f64>),
    Polynomial { poly: Vec<Vec<f64>> },
}

impl ControlSpec {
    fn width(&self) -> usize {
        match self {
            ControlSpec::Constant(c) => c.len(),
            ControlSpec::Polynomial { poly } => poly.len(),
        }
    }

    pub fn control(&self) -> Control {
        match self {
            ControlSpec::Constant(c) => Control::Constant(c.clone()),
            ControlSpec::Polynomial { poly } => Control::polynomial(poly.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularityVerdict {
    RegularEverywhere,
    SingularCurve,
    Mixed,
}

impl RegularityVerdict {
    pub fn matches(self, v: Verdict) -> bool {
        matches!(
            (self, v),
            (RegularityVerdict::RegularEverywhere, Verdict::RegularEverywhere)
                | (RegularityVerdict::SingularCurve, Verdict::SingularCurve)
                | (RegularityVerdict::Mixed, Verdict::Mixed)
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            RegularityVerdict::RegularEverywhere => "regular_everywhere",
            RegularityVerdict::SingularCurve => "singular_curve",
            RegularityVerdict::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoincareVerdict {
    Nondegenerate,
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanVerdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularityExpect {
    pub verdict: Option<RegularityVerdict>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoincareExpect {
    pub verdict: Option<PoincareVerdict>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpanExpect {
    pub verdict: Option<SpanVerdict>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiftsExpect {
    pub abnormal: Option<bool>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowTask {
    #[serde(default)]
    pub label: Option<String>,
    pub x0: Vec<f64>,
    pub t: f64,
    /// Default `1e-8 · max(1, t)`.
    #[serde(default)]
    pub drift_tol: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularityTask {
    #[serde(default)]
    pub label: Option<String>,
    pub q0: Vec<f64>,
    pub control: ControlSpec,
    pub t: f64,
    #[serde(default = "default_samples")]
    pub abnormal_samples: usize,
    #[serde(default)]
    pub expect: RegularityExpect,
}

fn default_samples() -> usize {
    200
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalFormTask {
    #[serde(default)]
    pub label: Option<String>,
    pub x0: Vec<f64>,
    /// Length of the integrated orbit; must exceed `delta`.
    pub t: f64,
    pub delta: f64,
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub degree: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoincareTask {
    #[serde(default)]
    pub label: Option<String>,
    pub x0: Vec<f64>,
    pub period: f64,
    #[serde(default)]
    pub n_max: Option<usize>,
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub expect: PoincareExpect,
}

/// Curve family taken from the normal form of an orbit of the scenario.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitSource {
    pub x0: Vec<f64>,
    pub t: f64,
    pub delta: f64,
}

/// Random curve family with a random null direction.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSource {
    pub d: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "one")]
    pub scale: f64,
    /// Constant null direction, for the degenerate case.
    #[serde(default)]
    pub flat: bool,
}

fn default_order() -> usize {
    5
}

fn default_delta() -> f64 {
    0.1
}

fn one() -> f64 {
    1.0
}

fn default_depth() -> usize {
    5
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManeCheckTask {
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub orbit: Option<OrbitSource>,
    #[serde(default)]
    pub sample: Option<SampleSource>,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default)]
    pub t0: f64,
    /// Also certify the end-point map and compare.
    #[serde(default = "yes")]
    pub endpoint: bool,
    #[serde(default)]
    pub expect: SpanExpect,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormulaTask {
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default = "default_dims")]
    pub dims: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_dims() -> Vec<usize> {
    (2..=6).collect()
}

fn default_trials() -> usize {
    20
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiftsTask {
    #[serde(default)]
    pub label: Option<String>,
    pub q0: Vec<f64>,
    pub control: ControlSpec,
    pub t: f64,
    /// Initial covector of the normal lift; omitted means abnormal search only.
    #[serde(default)]
    pub p0: Option<Vec<f64>>,
    #[serde(default = "default_samples")]
    pub abnormal_samples: usize,
    #[serde(default)]
    pub expect: LiftsExpect,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanTask {
    #[serde(default)]
    pub label: Option<String>,
    pub d: usize,
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub flat: bool,
    #[serde(default)]
    pub min_pass_rate: Option<f64>,
}

#[derive(Debug, Clone)]
pub enum Task {
    Flow(FlowTask),
    Regularity(RegularityTask),
    NormalForm(NormalFormTask),
    Poincare(PoincareTask),
    ManeCheck(ManeCheckTask),
    FormulaVerify(FormulaTask),
    Lifts(LiftsTask),
    Scan(ScanTask),
}

pub const TASK_KINDS: [&str; 8] = [
    "flow",
    "regularity",
    "normal-form",
    "poincare",
    "mane-check",
    "formula-verify",
    "lifts",
    "scan",
];

impl Task {
    pub fn kind(&self) -> &'static str {
        match self {
            Task::Flow(_) => "flow",
            Task::Regularity(_) => "regularity",
            Task::NormalForm(_) => "normal-form",
            Task::Poincare(_) => "poincare",
            Task::ManeCheck(_) => "mane-check",
            Task::FormulaVerify(_) => "formula-verify",
            Task::Lifts(_) => "lifts",
            Task::Scan(_) => "scan",
        }
    }

    pub fn label(&self) -> Option<&str> {
        match self {
            Task::Flow(t) => t.label.as_deref(),
            Task::Regularity(t) => t.label.as_deref(),
            Task::NormalForm(t) => t.label.as_deref(),
            Task::Poincare(t) => t.label.as_deref(),
            Task::ManeCheck(t) => t.label.as_deref(),
            Task::FormulaVerify(t) => t.label.as_deref(),
            Task::Lifts(t) => t.label.as_deref(),
            Task::Scan(t) => t.label.as_deref(),
        }
    }
}

/// A parsed and validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub description: Option<String>,
    pub frame: Option<FrameSpec>,
    pub hamiltonian: Option<HamiltonianSpec>,
    /// Metric on the distribution, when given; lifts use it.
    pub metric: Option<Vec<Vec<Expr>>>,
    pub potential: Expr,
    pub tasks: Vec<Task>,
}

fn path_of<E: fmt::Display>(e: &serde_path_to_error::Error<E>, prefix: &str) -> (String, String) {
    let inner = e.path().to_string();
    let path = match (prefix.is_empty(), inner == ".") {
        (true, _) => inner,
        (false, true) => prefix.to_string(),
        (false, false) => format!("{prefix}.{inner}"),
    };
    // toml appends its own "in `key`" context on later lines
    let msg = e.inner().to_string();
    (path, msg.lines().next().unwrap_or_default().to_string())
}

fn decode<T: DeserializeOwned>(table: toml::Table, prefix: &str) -> Res<T> {
    serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let (p, m) = path_of(&e, prefix);
        err(p, m)
    })
}

fn expr_at(src: &str, dim: usize, path: String) -> Res<Expr> {
    parse_in_dim(src, dim).map_err(|e| err(path, e.to_string()))
}

fn bounds_of(b: &[[f64; 2]], dim: usize, path: &str) -> Res<Vec<(f64, f64)>> {
    if b.len() != dim {
        return Err(err(path, format!("expected {dim} intervals, got {}", b.len())));
    }
    for (i, [lo, hi]) in b.iter().enumerate() {
        if !(lo < hi) {
            return Err(err(format!("{path}[{i}]"), "lower bound must be below upper bound"));
        }
    }
    Ok(b.iter().map(|[a, c]| (*a, *c)).collect())
}

fn check_len(v: &[f64], want: usize, path: String) -> Res<()> {
    if v.len() != want {
        return Err(err(path, format!("expected {want} entries, got {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(err(path, "entries must be finite"));
    }
    Ok(())
}

fn check_positive(x: f64, path: String) -> Res<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(err(path, "must be positive"))
    }
}

impl Scenario {
    pub fn from_path(path: &Path) -> Res<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| err("", format!("cannot read {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Res<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| err("", e.to_string().trim_end().to_string()))?;
        let raw: RawScenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let (p, m) = path_of(&e, "");
            err(p, m)
        })?;
        Self::build(raw)
    }

    fn build(raw: RawScenario) -> Res<Self> {
        let chart = match &raw.chart {
            Some(c) => {
                if c.dim < 2 {
                    return Err(err("chart.dim", "need at least two dimensions"));
                }
                let mut chart = Chart::new(c.dim).map_err(|e| err("chart.dim", e.to_string()))?;
                if let Some(b) = &c.bounds {
                    chart = chart
                        .with_bounds(bounds_of(b, c.dim, "chart.bounds")?)
                        .map_err(|e| err("chart.bounds", e.to_string()))?;
                }
                Some(chart)
            }
            None => None,
        };
        let dim = chart.as_ref().map(|c| c.dim);

        let frame = match (&raw.frame, &chart) {
            (Some(f), Some(chart)) => {
                let n = chart.dim;
                if f.fields.len() + 1 != n {
                    return Err(err(
                        "frame.fields",
                        format!("a co-rank-one frame on a {n}-dimensional chart needs {} fields, got {}", n - 1, f.fields.len()),
                    ));
                }
                let mut fields = vec![];
                for (i, row) in f.fields.iter().enumerate() {
                    if row.len() != n {
                        return Err(err(format!("frame.fields[{i}]"), format!("expected {n} components, got {}", row.len())));
                    }
                    fields.push(
                        row.iter()
                            .enumerate()
                            .map(|(a, s)| expr_at(s, n, format!("frame.fields[{i}][{a}]")))
                            .collect::<Res<Vec<_>>>()?,
                    );
                }
                if f.eta.len() != n {
                    return Err(err("frame.eta", format!("expected {n} components, got {}", f.eta.len())));
                }
                let eta = f
                    .eta
                    .iter()
                    .enumerate()
                    .map(|(a, s)| expr_at(s, n, format!("frame.eta[{a}]")))
                    .collect::<Res<Vec<_>>>()?;
                let frame = FrameSpec::new(chart.clone(), fields, eta).map_err(|e| err("frame", e.to_string()))?;
                frame.validate_sampled(64, 0).map_err(|e| err("frame", e.to_string()))?;
                Some(frame)
            }
            (Some(_), None) => return Err(err("frame", "a frame needs a [chart]")),
            (None, _) => None,
        };

        let (hamiltonian, metric, potential) = match (&raw.hamiltonian, dim) {
            (Some(hs), Some(n)) => {
                let (h, metric, u) = build_hamiltonian(hs, n, frame.as_ref())?;
                (Some(h), metric, u)
            }
            (Some(_), None) => return Err(err("hamiltonian", "a Hamiltonian needs a [chart]")),
            (None, _) => (None, None, Expr::Num(0.0)),
        };

        let mut tasks = vec![];
        for (i, table) in raw.task.into_iter().enumerate() {
            let prefix = format!("task[{i}]");
            tasks.push(parse_task(table, &prefix, frame.as_ref(), hamiltonian.as_ref())?);
        }
        Ok(Scenario {
            name: raw.name,
            description: raw.description,
            frame,
            hamiltonian,
            metric,
            potential,
            tasks,
        })
    }
}

fn build_hamiltonian(
    hs: &HamiltonianSection,
    n: usize,
    frame: Option<&FrameSpec>,
) -> Res<(HamiltonianSpec, Option<Vec<Vec<Expr>>>, Expr)> {
    let u = expr_at(&hs.potential, n, "hamiltonian.potential".into())?;
    if !hs.energy.is_finite() {
        return Err(err("hamiltonian.energy", "must be finite"));
    }
    let class = match hs.class {
        ClassName::Quad => KineticClass::Quad,
        ClassName::Rf => KineticClass::Rf,
    };
    let (mut h, metric) = match (&hs.metric, &hs.b) {
        (Some(_), Some(_)) => return Err(err("hamiltonian", "give either `metric` or `b`, not both")),
        (None, None) => return Err(err("hamiltonian", "one of `metric` or `b` is required")),
        (Some(m), None) => {
            let frame = frame.ok_or_else(|| err("hamiltonian.metric", "a metric needs a [frame]"))?;
            let d = n - 1;
            if m.len() != d {
                return Err(err("hamiltonian.metric", format!("expected {d} rows, got {}", m.len())));
            }
            let mut metric = vec![];
            for (i, row) in m.iter().enumerate() {
                if row.len() != d {
                    return Err(err(format!("hamiltonian.metric[{i}]"), format!("expected {d} entries, got {}", row.len())));
                }
                metric.push(
                    row.iter()
                        .enumerate()
                        .map(|(j, s)| expr_at(s, n, format!("hamiltonian.metric[{i}][{j}]")))
                        .collect::<Res<Vec<_>>>()?,
                );
            }
            let h = legendre_dual_quadratic(metric.clone(), frame).map_err(|e| err("hamiltonian.metric", e.to_string()))?;
            (h, Some(metric))
        }
        (None, Some(b)) => {
            if b.len() != n {
                return Err(err("hamiltonian.b", format!("expected {n} rows, got {}", b.len())));
            }
            let mut rows = vec![];
            for (i, row) in b.iter().enumerate() {
                if row.len() != n {
                    return Err(err(format!("hamiltonian.b[{i}]"), format!("expected {n} entries, got {}", row.len())));
                }
                rows.push(
                    row.iter()
                        .enumerate()
                        .map(|(j, s)| expr_at(s, n, format!("hamiltonian.b[{i}][{j}]")))
                        .collect::<Res<Vec<_>>>()?,
                );
            }
            let mut h = HamiltonianSpec::new(class, Kinetic::Explicit { b: rows }, Expr::Num(0.0), 0.5, n);
            if let Some(f) = frame {
                h = h.with_eta(f.eta.clone());
                if let Some(bx) = &f.chart.bounds {
                    h = h.with_box(bx.clone());
                }
            }
            (h, None)
        }
    };
    h.class = class;
    h = h.with_potential(u.clone(), hs.energy);
    if let Some(b) = &hs.sample_box {
        h = h.with_box(bounds_of(b, n, "hamiltonian.box")?);
    }
    Ok((h, metric, u))
}

fn parse_task(
    mut table: toml::Table,
    prefix: &str,
    frame: Option<&FrameSpec>,
    h: Option<&HamiltonianSpec>,
) -> Res<Task> {
    let kind = match table.remove("kind") {
        Some(toml::Value::String(s)) => s,
        Some(_) => return Err(err(format!("{prefix}.kind"), "must be a string")),
        None => return Err(err(prefix, format!("missing `kind` (one of {})", TASK_KINDS.join(", ")))),
    };
    let need_h = || h.ok_or_else(|| err(prefix, format!("task `{kind}` needs a [hamiltonian]")));
    let need_frame = || frame.ok_or_else(|| err(prefix, format!("task `{kind}` needs a [frame]")));
    let at = |field: &str| format!("{prefix}.{field}");
    let task = match kind.as_str() {
        "flow" => {
            let t: FlowTask = decode(table, prefix)?;
            let h = need_h()?;
            check_len(&t.x0, 2 * h.dim, at("x0"))?;
            check_positive(t.t, at("t"))?;
            if let Some(tol) = t.drift_tol {
                check_positive(tol, at("drift_tol"))?;
            }
            Task::Flow(t)
        }
        "regularity" => {
            let t: RegularityTask = decode(table, prefix)?;
            let f = need_frame()?;
            check_len(&t.q0, f.dim(), at("q0"))?;
            check_control(&t.control, f.rank(), &at("control"))?;
            check_positive(t.t, at("t"))?;
            Task::Regularity(t)
        }
        "normal-form" => {
            let t: NormalFormTask = decode(table, prefix)?;
            let h = need_h()?;
            check_len(&t.x0, 2 * h.dim, at("x0"))?;
            check_positive(t.delta, at("delta"))?;
            if !(t.t >= t.delta) {
                return Err(err(at("t"), "orbit must be at least `delta` long"));
            }
            if let Some(tol) = t.tol {
                check_positive(tol, at("tol"))?;
            }
            Task::NormalForm(t)
        }
        "poincare" => {
            let t: PoincareTask = decode(table, prefix)?;
            let h = need_h()?;
            if h.dim < 2 {
                return Err(err(prefix, "return maps need at least two dimensions"));
            }
            check_len(&t.x0, 2 * h.dim, at("x0"))?;
            check_positive(t.period, at("period"))?;
            if let Some(tol) = t.tol {
                check_positive(tol, at("tol"))?;
            }
            Task::Poincare(t)
        }
        "mane-check" => {
            let t: ManeCheckTask = decode(table, prefix)?;
            match (&t.orbit, &t.sample) {
                (Some(o), None) => {
                    let h = need_h()?;
                    check_len(&o.x0, 2 * h.dim, at("orbit.x0"))?;
                    check_positive(o.delta, at("orbit.delta"))?;
                    if !(o.t >= o.delta) {
                        return Err(err(at("orbit.t"), "orbit must be at least `delta` long"));
                    }
                }
                (None, Some(s)) => {
                    if s.d < 2 {
                        return Err(err(at("sample.d"), "need d ≥ 2"));
                    }
                    check_positive(s.delta, at("sample.delta"))?;
                }
                _ => return Err(err(prefix, "give exactly one of `orbit` or `sample`")),
            }
            if t.depth == 0 {
                return Err(err(at("depth"), "must be at least 1"));
            }
            Task::ManeCheck(t)
        }
        "formula-verify" => {
            let t: FormulaTask = decode(table, prefix)?;
            if let Some(i) = t.dims.iter().position(|&d| d < 2) {
                return Err(err(format!("{prefix}.dims[{i}]"), "need d ≥ 2"));
            }
            Task::FormulaVerify(t)
        }
        "lifts" => {
            let t: LiftsTask = decode(table, prefix)?;
            let f = need_frame()?;
            check_len(&t.q0, f.dim(), at("q0"))?;
            check_control(&t.control, f.rank(), &at("control"))?;
            check_positive(t.t, at("t"))?;
            if let Some(p) = &t.p0 {
                check_len(p, f.dim(), at("p0"))?;
            }
            Task::Lifts(t)
        }
        "scan" => {
            let t: ScanTask = decode(table, prefix)?;
            if t.d < 2 {
                return Err(err(at("d"), "need d ≥ 2"));
            }
            check_positive(t.delta, at("delta"))?;
            Task::Scan(t)
        }
        other => {
            return Err(err(
                format!("{prefix}.kind"),
                format!("unknown task `{other}` (one of {})", TASK_KINDS.join(", ")),
            ))
        }
    };
    Ok(task)
}

fn check_control(c: &ControlSpec, d: usize, path: &str) -> Res<()> {
    if c.width() != d {
        return Err(err(path, format!("expected {d} components, got {}", c.width())));
    }
    if let ControlSpec::Polynomial { poly } = c {
        if poly.iter().any(|p| p.is_empty() || p.iter().any(|x| !x.is_finite())) {
            return Err(err(path, "polynomial components need finite coefficients"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const FRAME: &str = r#"
name = "t"
[chart]
dim = 3
[frame]
fields = [["1", "0", "-q2/2"], ["0", "1", "q1/2"]]
eta = ["q2/2", "-q1/2", "1"]
"#;

    fn path_of_error(body: &str) -> String {
        Scenario::from_str(body).unwrap_err().path
    }

    #[test]
    fn minimal_scenarios_parse() {
        let sc = Scenario::from_str("name = \"empty\"").unwrap();
        assert!(sc.tasks.is_empty() && sc.frame.is_none());
        let sc = Scenario::from_str(&format!("{FRAME}[[task]]\nkind = \"formula-verify\"\ndims = [2]\n")).unwrap();
        assert_eq!(sc.tasks[0].kind(), "formula-verify");
        assert!(sc.frame.is_some() && sc.hamiltonian.is_none());
    }

    #[test]
    fn errors_point_at_the_offending_entry() {
        assert_eq!(path_of_error("name = \"x\"\n[chart]\ndim = \"three\""), "chart.dim");
        assert_eq!(path_of_error("name = \"x\"\n[chart]\ndim = 3\nbounds = [[0, 1], [1, 0], [0, 1]]"), "chart.bounds[1]");
        assert_eq!(path_of_error(&FRAME.replace("\"1\"]", "\"1\", \"0\"]")), "frame.eta");
        assert_eq!(path_of_error(&FRAME.replace("-q2/2", "sin(")), "frame.fields[0][2]");
        let metric = format!("{FRAME}[hamiltonian]\nmetric = [[\"1\", \"0\"], [\"0\"]]\nenergy = 0.5\n");
        assert_eq!(path_of_error(&metric), "hamiltonian.metric[1]");
        let both = format!("{FRAME}[hamiltonian]\nmetric = [[\"1\", \"0\"], [\"0\", \"1\"]]\nb = []\nenergy = 0.5\n");
        assert_eq!(path_of_error(&both), "hamiltonian");
        let task = format!("{FRAME}[[task]]\nkind = \"regularity\"\nq0 = [0.0, 0.0, 0.0]\ncontrol = [1.0]\nt = 1.0\n");
        assert_eq!(path_of_error(&task), "task[0].control");
        let task = format!("{FRAME}[[task]]\nkind = \"lifts\"\nq0 = [0.0, 0.0, 0.0]\ncontrol = [1.0, 0.0]\nt = -1.0\n");
        assert_eq!(path_of_error(&task), "task[0].t");
        let task = format!("{FRAME}[[task]]\nkind = \"mane-check\"\n");
        assert_eq!(path_of_error(&task), "task[0]");
    }

    #[test]
    fn indefinite_metric_is_rejected() {
        let body = format!("{FRAME}[hamiltonian]\nmetric = [[\"1\", \"0\"], [\"0\", \"-1\"]]\nenergy = 0.5\n");
        let e = Scenario::from_str(&body).unwrap_err();
        assert_eq!(e.path, "hamiltonian.metric");
        assert!(e.message.contains("positive definite"), "{e}");
    }

    #[test]
    fn non_annihilating_eta_is_rejected() {
        let e = Scenario::from_str(&FRAME.replace("\"q2/2\", \"-q1/2\"", "\"1\", \"0\"")).unwrap_err();
        assert_eq!(e.path, "frame");
    }

    #[test]
    fn controls_accept_constants_and_polynomials() {
        let body = format!(
            "{FRAME}[[task]]\nkind = \"regularity\"\nq0 = [0.0, 0.0, 0.0]\ncontrol = {{ poly = [[1.0, 0.5], [0.0]] }}\nt = 1.0\n"
        );
        let sc = Scenario::from_str(&body).unwrap();
        let Task::Regularity(t) = &sc.tasks[0] else { panic!() };
        assert_eq!(t.control.control().eval(2.0), vec![2.0, 0.0]);
        assert_eq!(t.expect.verdict, None);
    }
}
