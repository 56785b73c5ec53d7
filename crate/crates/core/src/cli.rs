//! Run configuration, dispatch and tabular output for the command-line tool.
//!
//! Config documents are TOML with flat dotted keys (`roof.c0 = 2.0`).
//! Every key is optional; unknown keys and constraint violations are
//! collected and reported together.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use toml::Value;

use crate::base::{
    heteroclinic_point_catmap, stable_leaf_point, unstable_leaf_point, BasePoint, BaseSystem, PeriodicOrbit, RatPoint,
    RoofFunction, SuspensionPoint,
};
use crate::cocycle::{
    field_eval, fundamental_solution, gronwall_check, induced_cocycle, verify_cocycle_identity, GeneratorField,
    Suspension, TrigTerm,
};
use crate::holonomy::{
    domination_check, history_ratio_bound, holonomy_axiom_check, stable_holonomy, unstable_holonomy, AxiomOptions,
    DominationParams, Side,
};
use crate::perturbation::{
    build_perturbation_with_budget, compute_k, genericity_probe, hyperbolic_generator, outside_box_difference,
    verify_realization, PerturbationBudget, ProbeConfig, K_SAMPLES,
};
use crate::spectrum::{spectrum_flow, spectrum_induced, SpectrumResult, STDERR_FLOOR};
use crate::symplectic::{algebra_defect, expm, make_standard_form, symplectic_inverse, HamGenerator, Mat, SympMatrix};
use crate::{Error, Result};

pub const DEFAULT_N: usize = 100_000;
pub const DEFAULT_H: f64 = 1e-3;

/// Column layouts, shown by `--help`.
pub const SCHEMA_HELP: &str = "\
CSV schemas (header row = column names, numbers with 17 significant digits):
  spectrum  mode,index,exponent,stderr
            mode is `induced` (exponent per iterate) or `flow` (per unit time)
  holonomy  side,quantity,value
            side is `stable`, `unstable` or `base`
  perturb   quantity,value
  probe     epsilon,trials,positive,fraction
  verify    check,value,bound,pass
A side-car `<out>.manifest.json` records the config hash, seed, version,
wall time, worker count, column units and a summary of the run.
Exit status: 0 success, 2 property violation detected, 1 error.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Spectrum,
    Holonomy,
    Perturb,
    Probe,
    Verify,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Spectrum => "spectrum",
            Command::Holonomy => "holonomy",
            Command::Perturb => "perturb",
            Command::Probe => "probe",
            Command::Verify => "verify",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        [Command::Spectrum, Command::Holonomy, Command::Perturb, Command::Probe, Command::Verify]
            .into_iter()
            .find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaseSpec {
    CatMap,
    FullShift { symbols: u8, depth: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum RoofSpec {
    Constant { c0: f64 },
    Cosine { c0: f64, a: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldSpec {
    Zero,
    /// Seeded by the run seed.
    Random { scale: f64, modes: usize },
    /// `diag(a, …, a, −a, …, −a)`.
    Diag { a: f64 },
    /// Constant rotation rate `a` in every canonical plane.
    Rotation { a: f64 },
    /// Constant field `J·Sym` with `Sym` given by its upper triangle, row-major.
    Constant { coeffs: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HolonomySpec {
    pub n_max: usize,
    pub block: usize,
    pub k_max: usize,
    /// `(θ, τ)`; defaults to the cat-map rates.
    pub rates: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbSpec {
    pub epsilon: f64,
    pub rho: f64,
    pub height: f64,
    /// `‖log S‖_F` as a fraction of `δ`.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSpec {
    pub trials: usize,
    pub epsilons: Vec<f64>,
    pub rho: f64,
    pub n_iter: usize,
    pub rotation: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    pub ell: usize,
    pub base: BaseSpec,
    pub roof: RoofSpec,
    pub field: FieldSpec,
    pub n: usize,
    pub h: f64,
    pub reorth: usize,
    pub tol: f64,
    /// Flow-time horizon for the flow spectrum, `0` to skip it.
    pub flow_time: f64,
    pub verify_t: f64,
    pub holonomy: HolonomySpec,
    pub perturb: PerturbSpec,
    pub probe: ProbeSpec,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: Command::Spectrum,
            seed: 0,
            ell: 1,
            base: BaseSpec::CatMap,
            roof: RoofSpec::Constant { c0: 1.0 },
            field: FieldSpec::Zero,
            n: DEFAULT_N,
            h: DEFAULT_H,
            reorth: 1,
            tol: crate::holonomy::DEFAULT_TOL,
            flow_time: 0.0,
            verify_t: 10.0,
            holonomy: HolonomySpec { n_max: crate::holonomy::DEFAULT_N_MAX, block: 1, k_max: 5, rates: None },
            perturb: PerturbSpec { epsilon: 0.1, rho: 0.05, height: 0.0, fraction: 0.5 },
            probe: ProbeSpec { trials: 20, epsilons: vec![0.0, 0.1], rho: 0.05, n_iter: 2000, rotation: (0.5, 1.5) },
            output: None,
        }
    }
}

/// Flattened key/value view of a document with per-key consumption.
struct Reader {
    keys: BTreeMap<String, Value>,
    errors: Vec<String>,
}

fn flatten(prefix: &str, table: toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other);
            }
        }
    }
}

impl Reader {
    fn take(&mut self, key: &str) -> Option<Value> {
        self.keys.remove(key)
    }

    fn bad(&mut self, key: &str, want: &str, got: &Value) {
        self.errors.push(format!("`{key}` must be {want}, got {got}"));
    }

    fn f64(&mut self, key: &str, default: f64) -> f64 {
        match self.take(key) {
            None => default,
            Some(Value::Float(x)) => x,
            Some(Value::Integer(i)) => i as f64,
            Some(v) => {
                self.bad(key, "a number", &v);
                default
            }
        }
    }

    fn u64(&mut self, key: &str, default: u64) -> u64 {
        match self.take(key) {
            None => default,
            Some(Value::Integer(i)) if i >= 0 => i as u64,
            Some(v) => {
                self.bad(key, "a nonnegative integer", &v);
                default
            }
        }
    }

    fn usize(&mut self, key: &str, default: usize) -> usize {
        self.u64(key, default as u64) as usize
    }

    fn string(&mut self, key: &str, default: &str) -> String {
        match self.take(key) {
            None => default.to_string(),
            Some(Value::String(s)) => s,
            Some(v) => {
                self.bad(key, "a string", &v);
                default.to_string()
            }
        }
    }

    fn f64_list(&mut self, key: &str, default: &[f64]) -> Vec<f64> {
        match self.take(key) {
            None => default.to_vec(),
            Some(Value::Array(a)) => {
                let mut out = Vec::with_capacity(a.len());
                for v in a {
                    match v {
                        Value::Float(x) => out.push(x),
                        Value::Integer(i) => out.push(i as f64),
                        other => {
                            self.bad(key, "an array of numbers", &other);
                            return default.to_vec();
                        }
                    }
                }
                out
            }
            Some(v) => {
                self.bad(key, "an array of numbers", &v);
                default.to_vec()
            }
        }
    }

    fn has(&self, key: &str) -> bool {
        self.keys.contains_key(key)
    }
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_for(text, None)
}

/// As [`parse_config`], for a command chosen outside the document. A
/// `command` key in the document must then agree with it.
pub fn parse_config_for(text: &str, command: Option<Command>) -> Result<RunConfig> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    let mut keys = BTreeMap::new();
    flatten("", table, &mut keys);
    let mut r = Reader { keys, errors: Vec::new() };
    let d = RunConfig::default();

    let doc_command = r.take("command");
    let command = match (doc_command, command) {
        (None, c) => c.unwrap_or(d.command),
        (Some(Value::String(s)), c) => match (Command::from_name(&s), c) {
            (None, c) => {
                r.errors.push(format!("`command` has unknown value \"{s}\""));
                c.unwrap_or(d.command)
            }
            (Some(doc), Some(c)) if doc != c => {
                r.errors.push(format!("`command` = \"{s}\" conflicts with the requested command {}", c.name()));
                c
            }
            (Some(doc), _) => doc,
        },
        (Some(v), c) => {
            r.bad("command", "a string", &v);
            c.unwrap_or(d.command)
        }
    };

    let seed = r.u64("seed", d.seed);
    let ell = r.usize("ell", d.ell);

    let base = match r.string("base.kind", "catmap").as_str() {
        "catmap" => BaseSpec::CatMap,
        "shift" => BaseSpec::FullShift {
            symbols: r.u64("base.symbols", 2).min(u8::MAX as u64) as u8,
            depth: r.usize("base.depth", crate::base::DEFAULT_SHIFT_DEPTH),
        },
        other => {
            r.errors.push(format!("`base.kind` must be \"catmap\" or \"shift\", got \"{other}\""));
            BaseSpec::CatMap
        }
    };

    let roof = match r.string("roof.kind", "constant").as_str() {
        "constant" => RoofSpec::Constant { c0: r.f64("roof.c0", 1.0) },
        "cosine" => RoofSpec::Cosine { c0: r.f64("roof.c0", 2.0), a: r.f64("roof.a", 0.5) },
        other => {
            r.errors.push(format!("`roof.kind` must be \"constant\" or \"cosine\", got \"{other}\""));
            d.roof.clone()
        }
    };

    let field = match r.string("field.kind", "zero").as_str() {
        "zero" => FieldSpec::Zero,
        "random" => FieldSpec::Random { scale: r.f64("field.scale", 0.1), modes: r.usize("field.modes", 1) },
        "diag" => FieldSpec::Diag { a: r.f64("field.a", 0.3) },
        "rotation" => FieldSpec::Rotation { a: r.f64("field.a", 1.0) },
        "constant" => FieldSpec::Constant { coeffs: r.f64_list("field.coeffs", &[]) },
        other => {
            r.errors.push(format!(
                "`field.kind` must be one of zero, random, diag, rotation, constant; got \"{other}\""
            ));
            FieldSpec::Zero
        }
    };

    let n = r.usize("n", d.n);
    let h = r.f64("h", d.h);
    let reorth = r.usize("reorth", d.reorth);
    let tol = r.f64("tol", d.tol);
    let flow_time = r.f64("flow_time", d.flow_time);
    let verify_t = r.f64("verify.t", d.verify_t);

    let rates = match (r.has("holonomy.theta"), r.has("holonomy.tau")) {
        (false, false) => None,
        (true, true) => Some((r.f64("holonomy.theta", 0.0), r.f64("holonomy.tau", 0.0))),
        _ => {
            r.errors.push("`holonomy.theta` and `holonomy.tau` must be given together".into());
            r.take("holonomy.theta");
            r.take("holonomy.tau");
            None
        }
    };
    let holonomy = HolonomySpec {
        n_max: r.usize("holonomy.n_max", d.holonomy.n_max),
        block: r.usize("holonomy.block", d.holonomy.block),
        k_max: r.usize("holonomy.k_max", d.holonomy.k_max),
        rates,
    };
    let perturb = PerturbSpec {
        epsilon: r.f64("perturb.epsilon", d.perturb.epsilon),
        rho: r.f64("perturb.rho", d.perturb.rho),
        height: r.f64("perturb.height", d.perturb.height),
        fraction: r.f64("perturb.fraction", d.perturb.fraction),
    };
    let probe = ProbeSpec {
        trials: r.usize("probe.trials", d.probe.trials),
        epsilons: r.f64_list("probe.epsilons", &d.probe.epsilons),
        rho: r.f64("probe.rho", d.probe.rho),
        n_iter: r.usize("probe.n_iter", d.probe.n_iter),
        rotation: (
            r.f64("probe.rotation_min", d.probe.rotation.0),
            r.f64("probe.rotation_max", d.probe.rotation.1),
        ),
    };
    let output = match r.take("output.path") {
        None => None,
        Some(Value::String(s)) => Some(PathBuf::from(s)),
        Some(v) => {
            r.bad("output.path", "a string", &v);
            None
        }
    };

    let leftover: Vec<String> = r.keys.keys().cloned().collect();
    for key in leftover {
        r.errors.push(format!("unknown key `{key}`"));
    }

    let cfg = RunConfig {
        command,
        seed,
        ell,
        base,
        roof,
        field,
        n,
        h,
        reorth,
        tol,
        flow_time,
        verify_t,
        holonomy,
        perturb,
        probe,
        output,
    };
    let mut errors = r.errors;
    errors.extend(validate(&cfg));
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(errors.join("; ")))
    }
}

fn value_text(v: Value) -> String {
    v.to_string()
}

fn float(x: f64) -> String {
    value_text(Value::Float(x))
}

fn int(x: u64) -> String {
    value_text(Value::Integer(x as i64))
}

fn string(s: &str) -> String {
    value_text(Value::String(s.to_string()))
}

/// Canonical document for `cfg`, listing every key.
pub fn emit(cfg: &RunConfig) -> String {
    let mut out = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(out, "{k} = {v}");
    };
    put("command", string(cfg.command.name()));
    put("seed", int(cfg.seed));
    put("ell", int(cfg.ell as u64));
    match &cfg.base {
        BaseSpec::CatMap => put("base.kind", string("catmap")),
        BaseSpec::FullShift { symbols, depth } => {
            put("base.kind", string("shift"));
            put("base.symbols", int(*symbols as u64));
            put("base.depth", int(*depth as u64));
        }
    }
    match cfg.roof {
        RoofSpec::Constant { c0 } => {
            put("roof.kind", string("constant"));
            put("roof.c0", float(c0));
        }
        RoofSpec::Cosine { c0, a } => {
            put("roof.kind", string("cosine"));
            put("roof.c0", float(c0));
            put("roof.a", float(a));
        }
    }
    match &cfg.field {
        FieldSpec::Zero => put("field.kind", string("zero")),
        FieldSpec::Random { scale, modes } => {
            put("field.kind", string("random"));
            put("field.scale", float(*scale));
            put("field.modes", int(*modes as u64));
        }
        FieldSpec::Diag { a } => {
            put("field.kind", string("diag"));
            put("field.a", float(*a));
        }
        FieldSpec::Rotation { a } => {
            put("field.kind", string("rotation"));
            put("field.a", float(*a));
        }
        FieldSpec::Constant { coeffs } => {
            put("field.kind", string("constant"));
            put("field.coeffs", value_text(Value::Array(coeffs.iter().map(|c| Value::Float(*c)).collect())));
        }
    }
    put("n", int(cfg.n as u64));
    put("h", float(cfg.h));
    put("reorth", int(cfg.reorth as u64));
    put("tol", float(cfg.tol));
    put("flow_time", float(cfg.flow_time));
    put("verify.t", float(cfg.verify_t));
    put("holonomy.n_max", int(cfg.holonomy.n_max as u64));
    put("holonomy.block", int(cfg.holonomy.block as u64));
    put("holonomy.k_max", int(cfg.holonomy.k_max as u64));
    if let Some((theta, tau)) = cfg.holonomy.rates {
        put("holonomy.theta", float(theta));
        put("holonomy.tau", float(tau));
    }
    put("perturb.epsilon", float(cfg.perturb.epsilon));
    put("perturb.rho", float(cfg.perturb.rho));
    put("perturb.height", float(cfg.perturb.height));
    put("perturb.fraction", float(cfg.perturb.fraction));
    put("probe.trials", int(cfg.probe.trials as u64));
    put(
        "probe.epsilons",
        value_text(Value::Array(cfg.probe.epsilons.iter().map(|c| Value::Float(*c)).collect())),
    );
    put("probe.rho", float(cfg.probe.rho));
    put("probe.n_iter", int(cfg.probe.n_iter as u64));
    put("probe.rotation_min", float(cfg.probe.rotation.0));
    put("probe.rotation_max", float(cfg.probe.rotation.1));
    if let Some(p) = &cfg.output {
        put("output.path", string(&p.to_string_lossy()));
    }
    out
}

fn positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

/// Every violated constraint of `cfg`.
pub fn validate(cfg: &RunConfig) -> Vec<String> {
    let mut v = Vec::new();
    if cfg.seed > i64::MAX as u64 {
        v.push(format!("`seed` must be <= {}, got {}", i64::MAX, cfg.seed));
    }
    if !(1..=4).contains(&cfg.ell) {
        v.push(format!("`ell` must be in 1..=4, got {}", cfg.ell));
    }
    if let BaseSpec::FullShift { symbols, depth } = cfg.base {
        if symbols < 2 {
            v.push(format!("`base.symbols` must be >= 2, got {symbols}"));
        }
        if depth < 8 {
            v.push(format!("`base.depth` must be >= 8, got {depth}"));
        }
    }
    let roof = match cfg.roof {
        RoofSpec::Constant { c0 } => RoofFunction::constant(c0),
        RoofSpec::Cosine { c0, a } => RoofFunction::cosine_bump(c0, a),
    };
    if let Err(e) = roof {
        v.push(format!("roof rejected: {e}"));
    }
    if !(positive(cfg.h) && cfg.h <= 0.5) {
        v.push(format!("`h` must be in (0, 0.5], got {}", cfg.h));
    }
    if cfg.n < 100 {
        v.push(format!("`n` must be >= 100, got {}", cfg.n));
    }
    if cfg.reorth == 0 {
        v.push("`reorth` must be >= 1".into());
    }
    if !positive(cfg.tol) {
        v.push(format!("`tol` must be positive, got {}", cfg.tol));
    }
    if !(cfg.flow_time == 0.0 || (cfg.flow_time.is_finite() && cfg.flow_time >= 100.0)) {
        v.push(format!("`flow_time` must be 0 or >= 100, got {}", cfg.flow_time));
    }
    if !(positive(cfg.verify_t) && cfg.verify_t <= 50.0) {
        v.push(format!("`verify.t` must be in (0, 50], got {}", cfg.verify_t));
    }
    match &cfg.field {
        FieldSpec::Random { scale, modes } => {
            if !positive(*scale) {
                v.push(format!("`field.scale` must be positive, got {scale}"));
            }
            if *modes > 8 {
                v.push(format!("`field.modes` must be <= 8, got {modes}"));
            }
        }
        FieldSpec::Diag { a } | FieldSpec::Rotation { a } => {
            if !a.is_finite() {
                v.push("`field.a` must be finite".into());
            }
        }
        FieldSpec::Constant { coeffs } => {
            let want = cfg.ell * (2 * cfg.ell + 1);
            if coeffs.len() != want {
                v.push(format!("`field.coeffs` needs {want} entries for ell={}, got {}", cfg.ell, coeffs.len()));
            }
            if coeffs.iter().any(|c| !c.is_finite()) {
                v.push("`field.coeffs` must be finite".into());
            }
        }
        FieldSpec::Zero => {}
    }
    if v.is_empty() {
        if let Ok(field) = build_field(cfg) {
            let product = cfg.h * field.sup_bound();
            if product >= 1.0 {
                v.push(format!("h·‖H‖_∞ must be < 1, got {product}"));
            }
        }
    }
    if let Some((theta, tau)) = cfg.holonomy.rates {
        if !(positive(theta) && positive(tau)) {
            v.push(format!("`holonomy.theta` and `holonomy.tau` must be positive, got θ={theta}, τ={tau}"));
        } else if 3.0 * theta >= tau {
            v.push(format!("fiber bunching needs 3θ<τ, got θ={theta}, τ={tau}"));
        }
    }
    match cfg.command {
        Command::Holonomy => {
            if cfg.base != BaseSpec::CatMap {
                v.push("holonomy runs need `base.kind` = \"catmap\"".into());
            }
            let hs = &cfg.holonomy;
            if hs.n_max == 0 || hs.block == 0 || hs.k_max == 0 {
                v.push("`holonomy.n_max`, `holonomy.block` and `holonomy.k_max` must be >= 1".into());
            }
        }
        Command::Perturb => {
            let p = &cfg.perturb;
            if !positive(p.epsilon) {
                v.push(format!("`perturb.epsilon` must be positive, got {}", p.epsilon));
            }
            if !(positive(p.rho) && p.rho < 0.5) {
                v.push(format!("`perturb.rho` must be in (0, 0.5), got {}", p.rho));
            }
            if !(p.height.is_finite() && p.height >= 0.0) {
                v.push(format!("`perturb.height` must be >= 0, got {}", p.height));
            }
            if !(positive(p.fraction) && p.fraction < 1.0) {
                v.push(format!("`perturb.fraction` must be in (0, 1), got {}", p.fraction));
            }
        }
        Command::Probe => {
            let p = &cfg.probe;
            if p.trials < 20 {
                v.push(format!("`probe.trials` must be >= 20, got {}", p.trials));
            }
            if p.epsilons.is_empty() || p.epsilons.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
                v.push("`probe.epsilons` must be a nonempty list of nonnegative numbers".into());
            }
            if !(positive(p.rho) && p.rho < 0.5) {
                v.push(format!("`probe.rho` must be in (0, 0.5), got {}", p.rho));
            }
            if p.n_iter < 100 {
                v.push(format!("`probe.n_iter` must be >= 100, got {}", p.n_iter));
            }
            if !(p.rotation.0.is_finite() && p.rotation.1.is_finite() && p.rotation.0 <= p.rotation.1) {
                v.push("`probe.rotation_min` must not exceed `probe.rotation_max`".into());
            }
        }
        Command::Spectrum | Command::Verify => {}
    }
    v
}

pub fn build_suspension(cfg: &RunConfig) -> Result<Suspension> {
    let sys = match cfg.base {
        BaseSpec::CatMap => BaseSystem::CatMap,
        BaseSpec::FullShift { symbols, depth } => BaseSystem::FullShift { symbols, depth },
    };
    let roof = match cfg.roof {
        RoofSpec::Constant { c0 } => RoofFunction::constant(c0)?,
        RoofSpec::Cosine { c0, a } => RoofFunction::cosine_bump(c0, a)?,
    };
    Suspension::new(sys, roof)
}

pub fn build_field(cfg: &RunConfig) -> Result<GeneratorField> {
    let ell = cfg.ell;
    match &cfg.field {
        FieldSpec::Zero => Ok(GeneratorField::zero(ell)),
        FieldSpec::Random { scale, modes } => GeneratorField::random(ell, cfg.seed, *scale, *modes),
        FieldSpec::Diag { a } => {
            let n = 2 * ell;
            let m = Mat::from_fn(n, n, |i, j| if i != j { 0.0 } else if i < ell { *a } else { -*a });
            Ok(GeneratorField::constant(&HamGenerator::new(m)?))
        }
        FieldSpec::Rotation { a } => GeneratorField::rotation(ell, vec![vec![TrigTerm::constant(*a)]; ell]),
        FieldSpec::Constant { coeffs } => GeneratorField::from_terms(
            ell,
            coeffs.iter().map(|&c| if c == 0.0 { Vec::new() } else { vec![TrigTerm::constant(c)] }).collect(),
        ),
    }
}

/// Seeded start point with `margin` known future symbols on shift bases.
fn start_point(cfg: &RunConfig, susp: &Suspension, margin: usize) -> BasePoint {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    susp.sys.sample_point(&mut rng, margin)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Column {
    pub name: &'static str,
    pub unit: &'static str,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
}

impl Cell {
    fn render(&self, out: &mut String) {
        match self {
            Cell::Num(x) if x.is_finite() => {
                let _ = write!(out, "{x:.16e}");
            }
            Cell::Num(x) => {
                let _ = write!(out, "{x}");
            }
            Cell::Int(i) => {
                let _ = write!(out, "{i}");
            }
            Cell::Text(s) => out.push_str(s),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Num(x) => Some(*x),
            Cell::Int(i) => Some(*i as f64),
            Cell::Text(_) => None,
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<usize> for Cell {
    fn from(i: usize) -> Self {
        Cell::Int(i as i64)
    }
}

impl From<bool> for Cell {
    fn from(b: bool) -> Self {
        Cell::Int(b as i64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub command: Command,
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<Cell>>,
}

impl ResultTable {
    fn new(command: Command, columns: &[(&'static str, &'static str)]) -> Self {
        Self {
            command,
            columns: columns.iter().map(|&(name, unit)| Column { name, unit }).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let names: Vec<&str> = self.columns.iter().map(|c| c.name).collect();
        out.push_str(&names.join(","));
        out.push('\n');
        for row in &self.rows {
            for (i, c) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                c.render(&mut out);
            }
            out.push('\n');
        }
        out
    }

    /// Numeric value in the last column of the first row whose leading
    /// cells are the given labels.
    pub fn lookup(&self, labels: &[&str]) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| labels.iter().zip(r.iter()).all(|(l, c)| matches!(c, Cell::Text(s) if s == l)))
            .and_then(|r| r.last())
            .and_then(Cell::as_f64)
    }
}

/// Table plus the property checks made while producing it.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub table: ResultTable,
    pub summary: BTreeMap<String, f64>,
    pub violations: Vec<String>,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.violations.is_empty() {
            0
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: Command,
    pub version: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub wall_time_s: f64,
    pub workers: usize,
    pub exit_code: i32,
    pub columns: Vec<Column>,
    pub summary: BTreeMap<String, f64>,
    pub violations: Vec<String>,
}

/// SHA-256 of the canonical document.
pub fn config_hash(cfg: &RunConfig) -> String {
    hex::encode(Sha256::digest(emit(cfg).as_bytes()))
}

pub fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    status: &'static str,
    kind: &'static str,
    message: &'a str,
}

/// One-line JSON record for a failed run.
pub fn error_record(e: &Error) -> String {
    let message = e.to_string();
    serde_json::to_string(&ErrorRecord { status: "error", kind: e.kind(), message: &message })
        .expect("record serializes")
}

/// Validates `cfg` and dispatches to the selected experiment.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    let errors = validate(cfg);
    if !errors.is_empty() {
        return Err(Error::Config(errors.join("; ")));
    }
    match cfg.command {
        Command::Spectrum => run_spectrum(cfg),
        Command::Holonomy => run_holonomy(cfg),
        Command::Perturb => run_perturb(cfg),
        Command::Probe => run_probe(cfg),
        Command::Verify => run_verify(cfg),
    }
}

/// Runs `cfg`, then writes the CSV to `out` and the manifest beside it.
pub fn run_to_files(cfg: &RunConfig, out: &Path) -> Result<(RunOutcome, Manifest)> {
    let start = Instant::now();
    let outcome = run(cfg)?;
    let manifest = Manifest {
        command: cfg.command,
        version: env!("CARGO_PKG_VERSION"),
        config_hash: config_hash(cfg),
        seed: cfg.seed,
        wall_time_s: start.elapsed().as_secs_f64(),
        workers: rayon::current_num_threads(),
        exit_code: outcome.exit_code(),
        columns: outcome.table.columns.clone(),
        summary: outcome.summary.clone(),
        violations: outcome.violations.clone(),
    };
    std::fs::write(out, outcome.table.to_csv())?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(manifest_path(out), json + "\n")?;
    Ok((outcome, manifest))
}

fn check_spectrum(
    res: &SpectrumResult,
    mode: &str,
    ell: usize,
    summary: &mut BTreeMap<String, f64>,
    violations: &mut Vec<String>,
) {
    let se = res.max_stderr().max(STDERR_FLOOR);
    summary.insert(format!("{mode}_pairing_residual"), res.pairing_residual);
    summary.insert(format!("{mode}_sum_residual"), res.sum_residual);
    summary.insert(format!("{mode}_max_stderr"), res.max_stderr());
    if res.pairing_residual > 3.0 * se {
        violations.push(format!("{mode}: pairing residual {:.3e} exceeds 3·stderr {:.3e}", res.pairing_residual, 3.0 * se));
    }
    let sum_bound = 2.0 * ell as f64 * se;
    if res.sum_residual > sum_bound {
        violations.push(format!("{mode}: |Σλ| = {:.3e} exceeds 2ℓ·stderr {sum_bound:.3e}", res.sum_residual));
    }
}

fn run_spectrum(cfg: &RunConfig) -> Result<RunOutcome> {
    let susp = build_suspension(cfg)?;
    let field = build_field(cfg)?;
    let flow_laps = (cfg.flow_time / susp.roof.min()).ceil() as usize + 2;
    let x0 = start_point(cfg, &susp, cfg.n.max(flow_laps));
    let mut table = ResultTable::new(
        Command::Spectrum,
        &[("mode", ""), ("index", ""), ("exponent", "1/iterate or 1/time"), ("stderr", "same as exponent")],
    );
    let mut summary = BTreeMap::new();
    let mut violations = Vec::new();
    let induced = spectrum_induced(&field, &susp, &x0, cfg.n, cfg.reorth, cfg.h)?;
    for (i, (e, s)) in induced.exponents.iter().zip(&induced.stderr).enumerate() {
        table.push(vec!["induced".into(), (i + 1).into(), (*e).into(), (*s).into()]);
    }
    check_spectrum(&induced, "induced", cfg.ell, &mut summary, &mut violations);
    if cfg.flow_time > 0.0 {
        let flow = spectrum_flow(&field, &susp, &SuspensionPoint::on_section(x0), cfg.flow_time, 1.0, cfg.h)?;
        for (i, (e, s)) in flow.exponents.iter().zip(&flow.stderr).enumerate() {
            table.push(vec!["flow".into(), (i + 1).into(), (*e).into(), (*s).into()]);
        }
        check_spectrum(&flow, "flow", cfg.ell, &mut summary, &mut violations);
    }
    Ok(RunOutcome { table, summary, violations })
}

fn run_holonomy(cfg: &RunConfig) -> Result<RunOutcome> {
    let susp = build_suspension(cfg)?;
    let field = build_field(cfg)?;
    let hs = &cfg.holonomy;
    let p = PeriodicOrbit { point: RatPoint::origin(), period: 1 };
    let z = heteroclinic_point_catmap(&p, &p)?;
    let params = match hs.rates {
        Some((theta, tau)) => DominationParams::new(hs.block, theta, tau, hs.k_max)?,
        None => DominationParams::for_cat_map(hs.block, hs.k_max),
    };
    let mut table = ResultTable::new(Command::Holonomy, &[("side", ""), ("quantity", ""), ("value", "")]);
    let mut summary = BTreeMap::new();
    let mut violations = Vec::new();

    let dom = domination_check(&field, &susp, &p.base_point(), &params, cfg.h)?;
    let min_margin = dom.margins.iter().cloned().fold(f64::INFINITY, f64::min);
    table.push(vec!["base".into(), "domination_holds".into(), dom.holds.into()]);
    table.push(vec!["base".into(), "domination_min_margin".into(), min_margin.into()]);
    if !dom.holds {
        violations.push(format!("fiber bunching fails: minimum margin {min_margin:.3e}"));
    }
    let ratio_bound = history_ratio_bound(&field, &susp, 1);

    for side in [Side::Stable, Side::Unstable] {
        let (label, hol, mid, j_range) = match side {
            Side::Stable => (
                "stable",
                stable_holonomy(&field, &susp, &p, &z.point, hs.n_max, cfg.tol, cfg.h)?,
                stable_leaf_point(p.point, 0.5 * z.t_stable),
                (-3, 10),
            ),
            Side::Unstable => (
                "unstable",
                unstable_holonomy(&field, &susp, &p, &z.point, hs.n_max, cfg.tol, cfg.h)?,
                unstable_leaf_point(p.point, 0.5 * z.s_unstable),
                (-10, 3),
            ),
        };
        let ratio = hol.history_ratio().unwrap_or(f64::NAN);
        let opts = AxiomOptions { side, block: 1, n_max: hs.n_max, tol: cfg.tol, h: cfg.h, j_range };
        let ax = holonomy_axiom_check(&field, &susp, &p.base_point(), &mid, &z.point, &opts)?;
        let rows: [(&str, Cell); 10] = [
            ("converged", hol.converged.into()),
            ("iterations", hol.history.len().into()),
            ("history_ratio", ratio.into()),
            ("history_ratio_bound", ratio_bound.into()),
            ("defect", hol.map.defect().into()),
            ("composition", ax.composition.into()),
            ("intertwining", ax.intertwining.into()),
            ("conjugation", ax.conjugation.into()),
            ("lipschitz_ratio", ax.lipschitz_ratio.into()),
            ("axiom_max_defect", ax.max_defect.into()),
        ];
        for (q, v) in rows {
            table.push(vec![label.into(), q.into(), v]);
        }
        summary.insert(format!("{label}_max_residual"), ax.max_residual());
        if !hol.converged || !ax.all_converged {
            violations.push(format!("{label} holonomy did not converge within {} blocks", hs.n_max));
        }
        if ax.max_residual() > 10.0 * cfg.tol {
            violations.push(format!("{label} axiom residual {:.3e} exceeds 10·tol", ax.max_residual()));
        }
        if hol.map.defect().max(ax.max_defect) > 1e-8 {
            violations.push(format!("{label} holonomy symplectic defect exceeds 1e-8"));
        }
        if ratio > ratio_bound {
            violations.push(format!("{label} history ratio {ratio:.3e} exceeds bound {ratio_bound:.3e}"));
        }
    }
    Ok(RunOutcome { table, summary, violations })
}

fn run_perturb(cfg: &RunConfig) -> Result<RunOutcome> {
    let susp = build_suspension(cfg)?;
    let field = build_field(cfg)?;
    let ps = &cfg.perturb;
    let x = SuspensionPoint { base: start_point(cfg, &susp, 8), height: ps.height };
    let k = compute_k(&field, &susp, K_SAMPLES, cfg.h)?;
    let budget = PerturbationBudget::new(ps.epsilon, k)?;
    let g = hyperbolic_generator(cfg.ell, ps.fraction * budget.delta);
    let s = SympMatrix::trusted(expm(g.matrix()));
    let pert = build_perturbation_with_budget(&field, &susp, &x, &s, ps.rho, &budget, cfg.h)?;
    let residuals = [
        verify_realization(&pert, &susp, cfg.h)?,
        verify_realization(&pert, &susp, cfg.h / 2.0)?,
        verify_realization(&pert, &susp, cfg.h / 4.0)?,
    ];
    let outside = outside_box_difference(&pert, &susp, 1000, cfg.seed)?;

    let mut table = ResultTable::new(Command::Perturb, &[("quantity", ""), ("value", "")]);
    let rows: [(&str, f64); 12] = [
        ("k", budget.k),
        ("delta", budget.delta),
        ("epsilon", budget.epsilon),
        ("generator_norm", pert.generator.norm()),
        ("measured_sup", pert.measured_sup),
        ("allowed_sup", budget.allowed_sup()),
        ("residual_h", residuals[0]),
        ("residual_h2", residuals[1]),
        ("residual_h4", residuals[2]),
        ("order_ratio_1", residuals[0] / residuals[1]),
        ("order_ratio_2", residuals[1] / residuals[2]),
        ("outside_max_difference", outside),
    ];
    let mut summary = BTreeMap::new();
    for (q, v) in rows {
        table.push(vec![q.into(), v.into()]);
        summary.insert(q.to_string(), v);
    }
    let mut violations = Vec::new();
    if pert.measured_sup > budget.allowed_sup() || budget.allowed_sup() >= budget.epsilon {
        violations.push("perturbation exceeds its C⁰ budget".into());
    }
    if residuals[0] > 1e-6 {
        violations.push(format!("realization residual {:.3e} exceeds 1e-6", residuals[0]));
    }
    if outside != 0.0 {
        violations.push(format!("field changed outside the box by {outside:.3e}"));
    }
    Ok(RunOutcome { table, summary, violations })
}

fn run_probe(cfg: &RunConfig) -> Result<RunOutcome> {
    let susp = build_suspension(cfg)?;
    let ps = &cfg.probe;
    let pc = ProbeConfig {
        n_trials: ps.trials,
        epsilon_grid: ps.epsilons.clone(),
        seed: cfg.seed,
        h: cfg.h,
        n_iter: ps.n_iter,
        rho: ps.rho,
        rotation_range: ps.rotation,
    };
    let rows = genericity_probe(cfg.ell, &susp, &pc)?;
    let mut table = ResultTable::new(
        Command::Probe,
        &[("epsilon", "C0 budget"), ("trials", ""), ("positive", ""), ("fraction", "")],
    );
    let mut summary = BTreeMap::new();
    for r in rows {
        summary.insert(format!("fraction_at_{}", r.epsilon), r.fraction);
        table.push(vec![r.epsilon.into(), r.trials.into(), r.positive.into(), r.fraction.into()]);
    }
    Ok(RunOutcome { table, summary, violations: Vec::new() })
}

fn run_verify(cfg: &RunConfig) -> Result<RunOutcome> {
    let susp = build_suspension(cfg)?;
    let field = build_field(cfg)?;
    let t = cfg.verify_t;
    let n = field.dim();
    let margin = (2.0 * t / susp.roof.min()).ceil() as usize + 4;
    let base = start_point(cfg, &susp, margin);
    let x = SuspensionPoint { base: base.clone(), height: 0.25 * susp.roof_at(&base) };
    let id = Mat::identity(n, n);
    let mut checks: Vec<(&str, f64, f64)> = Vec::new();

    let zero = fundamental_solution(&field, &susp, &x, 0.0, cfg.h)?;
    checks.push(("identity_at_zero", (zero.value.matrix() - &id).norm(), 0.0));
    let phi = fundamental_solution(&field, &susp, &x, t, cfg.h)?;
    checks.push(("symplectic_defect", phi.defect, 1e-10));
    checks.push(("cocycle_identity", verify_cocycle_identity(&field, &susp, &x, t / 2.0, t / 2.0, cfg.h)?, 1e-6));
    let back = fundamental_solution(&field, &susp, &susp.flow(&x, t)?, -t, cfg.h)?;
    checks.push(("inverse_relation", (back.value.matrix() * phi.value.matrix() - &id).norm(), 1e-9));
    let (lhs, rhs) = gronwall_check(&field, &susp, &x, t, cfg.h)?;
    checks.push(("gronwall_ratio", lhs / rhs, 1.0 + 1e-6));
    let psi = induced_cocycle(&field, &susp, &base, cfg.h)?;
    let lap = fundamental_solution(&field, &susp, &SuspensionPoint::on_section(base.clone()), susp.roof_at(&base), cfg.h)?;
    checks.push(("induced_vs_flow", (psi.value.matrix() - lap.value.matrix()).norm(), 1e-12));
    let form = make_standard_form(cfg.ell)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let b = susp.sys.sample_point(&mut rng, 0);
        let height = rand::Rng::random_range(&mut rng, 0.0..susp.roof_at(&b));
        let hval = field_eval(&field, &susp, &SuspensionPoint { base: b, height })?;
        worst = worst.max(algebra_defect(hval.matrix(), &form)?);
    }
    checks.push(("algebra_defect", worst, 1e-12));
    let inv = symplectic_inverse(phi.value.matrix());
    checks.push(("symplectic_inverse", (inv * phi.value.matrix() - &id).norm(), 1e-9));

    let mut table = ResultTable::new(Command::Verify, &[("check", ""), ("value", ""), ("bound", ""), ("pass", "")]);
    let mut summary = BTreeMap::new();
    let mut violations = Vec::new();
    for (name, value, bound) in checks {
        let pass = value <= bound;
        table.push(vec![name.into(), value.into(), bound.into(), pass.into()]);
        summary.insert(name.to_string(), value);
        if !pass {
            violations.push(format!("{name}: {value:.3e} exceeds {bound:.3e}"));
        }
    }
    Ok(RunOutcome { table, summary, violations })
}
