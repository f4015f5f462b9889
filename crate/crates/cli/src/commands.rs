use std::path::PathBuf;

use nalgebra::DVector;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use ehr_core::asymptotics::{huber_factor, population_k, sandwich_avar, ErrorDistribution};
use ehr_core::envelope::NaturalParams;
use ehr_core::gmm::FitOptions;
use ehr_core::linalg::SymMatrix;
use ehr_core::robust::{gee_solution_for, Dataset, Score};
use ehr_core::selection::{bootstrap_se, cv_select_u, sd_ratios, CvOptions, CvReport, RNG_NAME};
use ehr_core::sim::{run_scenario, SimScenario};
use ehr_core::Estimator;

use crate::args::{BootstrapArgs, Command, CvArgs, CvSettings, FitArgs, Format, HuberFactorArgs, SimulateArgs};
use crate::ingest::{load_table, Design, Table, NORMAL_SCENARIO};
use crate::json::{self, num, opt_num, vector};
use crate::{CliError, Emit, Z_CRIT};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub(crate) fn dispatch(command: &Command) -> Result<Vec<Emit>, CliError> {
    match command {
        Command::Fit(a) => fit(a),
        Command::Cv(a) => cv(a),
        Command::Bootstrap(a) => bootstrap(a),
        Command::Simulate(a) => simulate(a),
        Command::HuberFactor(a) => huber_table(a),
    }
}

/// SHA-256 of the compact JSON of `config` (object keys sorted).
pub fn config_hash(config: &Value) -> String {
    let canonical = serde_json::to_string(config).expect("JSON values serialize");
    format!("{:x}", Sha256::digest(canonical.as_bytes()))
}

fn meta(command: &str, seed: Option<u64>, config: Value) -> Value {
    json!({
        "command": command,
        "version": VERSION,
        "seed": seed,
        "rng": RNG_NAME,
        "config_hash": config_hash(&config),
        "config": config,
    })
}

fn config_of<A: Serialize>(command: &str, args: &A, table: Option<&Table>) -> Value {
    json!({
        "command": command,
        "args": serde_json::to_value(args).expect("arguments serialize"),
        "data_sha256": table.map(|t| t.sha256.clone()),
    })
}

fn data_info(table: &Table, design: &Design) -> Value {
    json!({
        "source": table.source,
        "n": design.data.n(),
        "p": design.data.p(),
        "response": design.response,
        "predictors": design.predictors,
        "standardized": design.scales.is_some(),
        "scales": design.scales.as_deref().map(json::slice),
    })
}

fn to_value<S: Serialize>(v: &S) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

fn emit_json(out: &Option<PathBuf>, report: &Value) -> Vec<Emit> {
    vec![Emit {
        path: out.clone(),
        text: json::to_string(report),
    }]
}

fn load(data: &crate::args::DataArgs) -> Result<(Table, Design), CliError> {
    let table = load_table(&data.data)?;
    let design = Design::from_table(&table, &data.response, data.standardize)?;
    Ok((table, design))
}

/// The envelope dimension: given, or selected by cross-validation.
struct Dimension {
    u: Option<usize>,
    source: Option<&'static str>,
    cv: Option<CvReport<f64>>,
}

fn choose_u(
    estimator: Estimator,
    given: Option<usize>,
    data: &Dataset<f64>,
    settings: &CvSettings,
    seed: u64,
    opts: &FitOptions,
) -> Result<Dimension, CliError> {
    if !estimator.is_envelope() {
        return Ok(Dimension {
            u: None,
            source: None,
            cv: None,
        });
    }
    if let Some(u) = given {
        if u == 0 || u > data.p() {
            return Err(CliError::Input(format!("--u {u} outside 1..={}", data.p())));
        }
        return Ok(Dimension {
            u: Some(u),
            source: Some("given"),
            cv: None,
        });
    }
    let report = cv_select_u(data, estimator, seed, &cv_options(settings, opts))?;
    Ok(Dimension {
        u: Some(report.u_hat),
        source: Some("cv"),
        cv: Some(report),
    })
}

fn cv_options(settings: &CvSettings, opts: &FitOptions) -> CvOptions {
    CvOptions {
        folds: settings.cv_folds,
        max_u: settings.max_u,
        fit: opts.clone(),
    }
}

fn sym(m: &SymMatrix<f64>) -> Value {
    json::matrix(m.matrix())
}

fn natural_json(t: &NaturalParams<f64>) -> Value {
    json!({
        "mu": num(t.mu),
        "beta": vector(&t.beta),
        "sigma_x": sym(&t.sigma_x),
        "mu_x": vector(&t.mu_x),
    })
}

fn fit(a: &FitArgs) -> Result<Vec<Emit>, CliError> {
    let (table, design) = load(&a.data)?;
    let data = &design.data;
    let opts = FitOptions::default();
    let dim = choose_u(a.estimator, a.u, data, &a.cv, a.seed, &opts)?;
    let est = a.estimator.fit(data, dim.u, &opts)?;
    let n = data.n();
    let mut warnings: Vec<String> = Vec::new();

    let (natural, avar) = match &est.envelope {
        Some(f) => (f.theta_hat.clone(), f.avar.clone()),
        None => {
            let score = est.k.map_or(Score::Identity, |k| Score::Huber { k });
            let gee = gee_solution_for(data, score)?;
            let avar = match sandwich_avar(data, &gee.fit, score) {
                Ok(v) => Some(v),
                Err(e) => {
                    warnings.push(format!("no standard errors: {e}"));
                    None
                }
            };
            (gee.theta, avar)
        }
    };
    let p = data.p();
    let nf = n as f64;
    let se = avar
        .as_ref()
        .map(|v| DVector::from_fn(p, |j, _| (v.matrix()[(1 + j, 1 + j)].max(0.0) / nf).sqrt()));
    let z = se.as_ref().map(|s| DVector::from_fn(p, |j, _| est.beta[j] / s[j]));
    let significant = z.as_ref().map(|z| z.iter().map(|v| v.abs() > Z_CRIT).collect::<Vec<bool>>());

    let envelope = est.envelope.as_ref().map(|f| {
        let e = &f.envelope;
        if f.weight.underdetermined {
            warnings.push(format!(
                "n = {n} is below the moment count {}; the weight matrix is ridge-regularized",
                f.weight.delta.matrix().nrows()
            ));
        }
        if !f.optimizer.converged {
            warnings.push("optimizer stopped at the iteration cap".into());
        }
        json!({
            "gamma": json::matrix(e.basis.gamma.matrix()),
            "gamma0": json::matrix(e.basis.gamma0.matrix()),
            "eta": vector(&e.eta),
            "omega": sym(&e.omega),
            "omega0": sym(&e.omega0),
            "objective": num(f.objective),
            "initial_objective": num(f.initial_objective),
            "init_padded": f.init_padded,
            "optimizer": to_value(&f.optimizer),
            "weight": {
                "ridge_applied": f.weight.ridge_applied,
                "ridge_value": num(f.weight.ridge_value),
                "condition": num(f.weight.condition),
                "underdetermined": f.weight.underdetermined,
            },
        })
    });
    let standardization = design.scales.as_ref().map(|scales| {
        json!({
            "scales": json::slice(scales),
            "beta": vector(&design.to_original(&est.beta)),
            "se": se.as_ref().map(|s| vector(&design.to_original(s))),
        })
    });

    let report = json!({
        "meta": meta("fit", Some(a.seed), config_of("fit", a, Some(&table))),
        "data": data_info(&table, &design),
        "estimator": a.estimator,
        "u": dim.u,
        "u_source": dim.source,
        "cv": dim.cv.as_ref().map(to_value),
        "k": opt_num(est.k),
        "mu": num(est.mu),
        "beta": vector(&est.beta),
        "se": se.as_ref().map(vector),
        "z": z.as_ref().map(vector),
        "significant": significant,
        "z_critical": num(Z_CRIT),
        "avar_diagonal": avar.as_ref().map(|v| vector(&v.matrix().diagonal())),
        "natural": natural_json(&natural),
        "envelope": envelope,
        "standardization": standardization,
        "warnings": warnings,
    });
    Ok(emit_json(&a.output.out, &report))
}

fn cv(a: &CvArgs) -> Result<Vec<Emit>, CliError> {
    if !a.estimator.is_envelope() {
        return Err(CliError::Input(format!(
            "{} has no envelope dimension; use ehr or env",
            a.estimator
        )));
    }
    let (table, design) = load(&a.data)?;
    let report = cv_select_u(&design.data, a.estimator, a.seed, &cv_options(&a.cv, &FitOptions::default()))?;
    let out = json!({
        "meta": meta("cv", Some(a.seed), config_of("cv", a, Some(&table))),
        "data": data_info(&table, &design),
        "cv": to_value(&report),
    });
    Ok(emit_json(&a.output.out, &out))
}

fn bootstrap(a: &BootstrapArgs) -> Result<Vec<Emit>, CliError> {
    let (table, design) = load(&a.data)?;
    let data = &design.data;
    let opts = FitOptions::default();
    let mut others: Vec<Estimator> = Vec::new();
    for &e in &a.compare {
        if e != a.estimator && !others.contains(&e) {
            others.push(e);
        }
    }
    // every estimator sees the same resamples
    let run = |e: Estimator| -> Result<(Dimension, ehr_core::selection::BootstrapReport<f64>), CliError> {
        let dim = choose_u(e, a.u, data, &a.cv, a.seed, &opts)?;
        let report = bootstrap_se(data, e, dim.u, a.bootstrap, a.seed, &opts)?;
        Ok((dim, report))
    };
    let (ref_dim, reference) = run(a.estimator)?;
    let section = |dim: &Dimension, report: &ehr_core::selection::BootstrapReport<f64>| {
        json!({
            "estimator": report.estimator,
            "u": dim.u,
            "u_source": dim.source,
            "cv": dim.cv.as_ref().map(to_value),
            "report": to_value(report),
            "sd_original_scale": design.scales.as_ref().map(|_| vector(&design.to_original(&DVector::from_vec(report.sd.clone())))),
        })
    };
    let mut comparisons = Vec::new();
    let mut table_rows = Vec::new();
    for e in others {
        let (dim, report) = run(e)?;
        let (ratios, average) = sd_ratios(&report, &reference)?;
        let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        table_rows.push(json!({
            "estimator": e,
            "ratios": json::slice(&ratios),
            "min": num(lo),
            "max": num(hi),
            "average": num(average),
        }));
        comparisons.push(section(&dim, &report));
    }
    let out = json!({
        "meta": meta("bootstrap", Some(a.seed), config_of("bootstrap", a, Some(&table))),
        "data": data_info(&table, &design),
        "reference": section(&ref_dim, &reference),
        "comparisons": comparisons,
        "sd_ratios": {
            "reference": a.estimator,
            "definition": "sd(other) / sd(reference), per coefficient",
            "rows": table_rows,
        },
    });
    Ok(emit_json(&a.output.out, &out))
}

fn simulate(a: &SimulateArgs) -> Result<Vec<Emit>, CliError> {
    let text = if a.scenario == "homoscedastic-normal" {
        NORMAL_SCENARIO.to_owned()
    } else {
        std::fs::read_to_string(&a.scenario)
            .map_err(|e| CliError::Input(format!("cannot read '{}': {e}", a.scenario)))?
    };
    let mut scenario =
        SimScenario::parse(&text).map_err(|e| CliError::Input(format!("{}: {e}", a.scenario)))?;
    if let Some(seed) = a.seed {
        scenario.seed = seed;
    }
    if let Some(reps) = a.reps {
        scenario.reps = reps;
    }
    scenario.validate().map_err(|e| CliError::Input(e.to_string()))?;
    let report = run_scenario(&scenario, &FitOptions::default())?;
    let config = json!({ "command": "simulate", "scenario": scenario.to_text() });
    let full = json!({
        "meta": meta("simulate", Some(scenario.seed), config),
        "report": to_value(&report),
    });
    let csv = report.to_csv();
    Ok(match &a.output.out {
        Some(prefix) => vec![
            Emit {
                path: Some(with_suffix(prefix, "csv")),
                text: csv,
            },
            Emit {
                path: Some(with_suffix(prefix, "json")),
                text: json::to_string(&full),
            },
        ],
        None => vec![Emit { path: None, text: csv }],
    })
}

fn with_suffix(prefix: &std::path::Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// One row per error law, in the published order.
pub struct FactorRow {
    pub distribution: ErrorDistribution,
    pub k: f64,
    pub factor: f64,
    pub variance: f64,
    pub ratio: f64,
}

pub fn factor_rows() -> Result<Vec<FactorRow>, CliError> {
    ErrorDistribution::ALL
        .iter()
        .map(|&d| {
            let k = population_k(d);
            let factor = huber_factor(d, k)?;
            let variance = d.variance();
            Ok(FactorRow {
                distribution: d,
                k,
                factor,
                variance,
                ratio: variance / factor,
            })
        })
        .collect()
}

fn csv_num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x > 0.0 {
        "inf".into()
    } else if x < 0.0 {
        "-inf".into()
    } else {
        "nan".into()
    }
}

fn huber_table(a: &HuberFactorArgs) -> Result<Vec<Emit>, CliError> {
    let rows = factor_rows()?;
    let text = match a.format {
        Format::Csv => {
            let mut s = String::from("distribution,k,factor,variance,ratio\n");
            for r in &rows {
                s.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.distribution.name(),
                    csv_num(r.k),
                    csv_num(r.factor),
                    csv_num(r.variance),
                    csv_num(r.ratio)
                ));
            }
            s
        }
        Format::Json => {
            let config = json!({ "command": "huber-factor" });
            json::to_string(&json!({
                "meta": meta("huber-factor", None, config),
                "rows": rows.iter().map(|r| json!({
                    "distribution": r.distribution.name(),
                    "k": num(r.k),
                    "factor": num(r.factor),
                    "variance": num(r.variance),
                    "ratio": num(r.ratio),
                })).collect::<Vec<_>>(),
            }))
        }
    };
    Ok(vec![Emit {
        path: a.output.out.clone(),
        text,
    }])
}
