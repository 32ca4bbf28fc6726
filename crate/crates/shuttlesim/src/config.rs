//! Run configuration: a flat, sectioned key-value text format.
//!
//! All values are scalars, vectors (whitespace-separated) or small matrices
//! (semicolon-separated rows, row-major). `#` starts a comment. Unknown
//! sections and keys are rejected with their line number.

use crate::device::{CapacitanceBlocks, CapacitanceInput, ShuttleParams};
use crate::drive::DriveWaveform;
use crate::linalg::Mat;
use crate::master::MasterConfig;
use crate::moments::{ClosureConfig, Integrator, Tier};
use crate::monte_carlo::McConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: usize,
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(line: usize, field: &str, message: impl Into<String>) -> Self {
        ConfigError {
            line,
            field: field.to_string(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.field.is_empty() {
            write!(f, "config line {}: {}", self.line, self.message)
        } else {
            write!(
                f,
                "config line {}: field `{}`: {}",
                self.line, self.field, self.message
            )
        }
    }
}

impl std::error::Error for ConfigError {}

/// Which engine a run drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunTier {
    Circuit,
    Variance,
    Full,
}

impl RunTier {
    pub fn to_moment_tier(self) -> Tier {
        match self {
            RunTier::Circuit => Tier::Circuit,
            RunTier::Variance => Tier::Variance,
            RunTier::Full => Tier::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub cap: CapacitanceInput,
    pub params: ShuttleParams,
    pub drive: DriveWaveform,
    pub tier: RunTier,
    pub closure: ClosureConfig,
    pub mc: McConfig,
    pub master: MasterConfig,
    /// Lattice half-width for the reference solver; 0 means auto.
    pub lattice_halfwidth: i64,
    pub out_dir: Option<String>,
    pub plot: bool,
    /// FNV-1a hash of the raw config text.
    pub content_hash: u64,
}

fn fnv1a(text: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

struct RawEntry {
    line: usize,
    value: String,
    used: bool,
}

struct Sections {
    entries: Vec<(String, String, RawEntry)>, // (section, key, entry)
}

impl Sections {
    fn parse(text: &str) -> Result<Sections, ConfigError> {
        let mut entries = Vec::new();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::new(line_no, "", "unterminated section header"))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ConfigError::new(line_no, "", format!("expected `key = value`, got `{line}`"))
            })?;
            if section.is_empty() {
                return Err(ConfigError::new(
                    line_no,
                    key.trim(),
                    "key outside of any [section]",
                ));
            }
            entries.push((
                section.clone(),
                key.trim().to_string(),
                RawEntry {
                    line: line_no,
                    value: value.trim().to_string(),
                    used: false,
                },
            ));
        }
        Ok(Sections { entries })
    }

    fn take(&mut self, section: &str, key: &str) -> Option<&mut RawEntry> {
        self.entries
            .iter_mut()
            .find(|(s, k, e)| s == section && k == key && !e.used)
            .map(|(_, _, e)| {
                e.used = true;
                e
            })
    }

    fn take_all(&mut self, section: &str, key: &str) -> Vec<(usize, String)> {
        let mut out = Vec::new();
        for (s, k, e) in self.entries.iter_mut() {
            if s == section && k == key && !e.used {
                e.used = true;
                out.push((e.line, e.value.clone()));
            }
        }
        out
    }

    fn reject_unused(&self) -> Result<(), ConfigError> {
        for (s, k, e) in &self.entries {
            if !e.used {
                return Err(ConfigError::new(
                    e.line,
                    k,
                    format!("unknown key in section [{s}]"),
                ));
            }
        }
        Ok(())
    }
}

fn parse_f64(line: usize, field: &str, v: &str) -> Result<f64, ConfigError> {
    v.parse::<f64>()
        .map_err(|_| ConfigError::new(line, field, format!("`{v}` is not a number")))
}

fn parse_vec(line: usize, field: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split_whitespace()
        .map(|tok| parse_f64(line, field, tok))
        .collect()
}

fn parse_mat(
    line: usize,
    field: &str,
    v: &str,
    rows: usize,
    cols: usize,
) -> Result<Mat, ConfigError> {
    if v.is_empty() {
        if rows == 0 || cols == 0 {
            return Ok(Mat::zeros(rows, cols));
        }
        return Err(ConfigError::new(
            line,
            field,
            format!("expected a {rows}x{cols} matrix, got nothing"),
        ));
    }
    let mut data = Vec::new();
    for row in v.split(';') {
        data.push(parse_vec(line, field, row.trim())?);
    }
    if data.len() != rows || data.iter().any(|r| r.len() != cols) {
        return Err(ConfigError::new(
            line,
            field,
            format!("expected a {rows}x{cols} matrix"),
        ));
    }
    Ok(Mat::from_rows(&data))
}

fn parse_bool(line: usize, field: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::new(
            line,
            field,
            format!("`{v}` is not a boolean"),
        )),
    }
}

fn fixed<const N: usize>(line: usize, field: &str, v: Vec<f64>) -> Result<[f64; N], ConfigError> {
    v.try_into()
        .map_err(|bad: Vec<f64>| ConfigError::new(line, field, format!("expected {N} values, got {}", bad.len())))
}

macro_rules! scalar {
    ($sec:expr, $section:literal, $key:literal, $target:expr, $conv:path) => {
        if let Some(e) = $sec.take($section, $key) {
            $target = $conv(e.line, $key, &e.value)?;
        }
    };
}

fn parse_block(
    sec: &mut Sections,
    gates: usize,
    prefix: &str,
) -> Result<CapacitanceBlocks, ConfigError> {
    let key = |name: &str| {
        if prefix.is_empty() {
            name.to_string()
        } else {
            format!("{prefix}{name}")
        }
    };
    let mut b = CapacitanceBlocks::zeros(gates);
    let required = prefix.is_empty();
    let k = key("c_ss");
    match sec.take("device", &k) {
        Some(e) => b.c_ss = parse_mat(e.line, &k, &e.value, 2, 2)?,
        None if required => return Err(ConfigError::new(0, &k, "missing required key")),
        None => {}
    }
    let k = key("c_gs");
    if let Some(e) = sec.take("device", &k) {
        b.c_gs = parse_mat(e.line, &k, &e.value, gates, 2)?;
    }
    let k = key("c_gg");
    if let Some(e) = sec.take("device", &k) {
        b.c_gg = parse_mat(e.line, &k, &e.value, gates, gates)?;
    }
    let k = key("c_s");
    match sec.take("device", &k) {
        Some(e) => {
            b.c_s = parse_vec(e.line, &k, &e.value)?;
            if b.c_s.len() != 2 {
                return Err(ConfigError::new(e.line, &k, "expected 2 values"));
            }
        }
        None if required => return Err(ConfigError::new(0, &k, "missing required key")),
        None => {}
    }
    let k = key("c_g");
    if let Some(e) = sec.take("device", &k) {
        b.c_g = parse_vec(e.line, &k, &e.value)?;
        if b.c_g.len() != gates {
            return Err(ConfigError::new(
                e.line,
                &k,
                format!("expected {gates} values"),
            ));
        }
    }
    let k = key("c00");
    match sec.take("device", &k) {
        Some(e) => b.c00 = parse_f64(e.line, &k, &e.value)?,
        None if required => return Err(ConfigError::new(0, &k, "missing required key")),
        None => {}
    }
    Ok(b)
}

/// Parse a full run configuration.
pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
    let mut sec = Sections::parse(text)?;

    // [device]
    let gates = match sec.take("device", "gates") {
        Some(e) => {
            let g = parse_f64(e.line, "gates", &e.value)?;
            if g < 0.0 || g.fract() != 0.0 {
                return Err(ConfigError::new(
                    e.line,
                    "gates",
                    "must be a non-negative integer",
                ));
            }
            g as usize
        }
        None => 0,
    };
    let blocks = parse_block(&mut sec, gates, "")?;
    let d1 = parse_block(&mut sec, gates, "d1_")?;
    let d2 = parse_block(&mut sec, gates, "d2_")?;
    let cap = CapacitanceInput {
        blocks,
        d_dx: [d1, d2],
    };

    // [shuttle]
    let need = |sec: &mut Sections, key: &str| -> Result<(usize, String), ConfigError> {
        sec.take("shuttle", key)
            .map(|e| (e.line, e.value.clone()))
            .ok_or_else(|| ConfigError::new(0, key, "missing required key in [shuttle]"))
    };
    let (l, v) = need(&mut sec, "omega")?;
    let omega = fixed::<2>(l, "omega", parse_vec(l, "omega", &v)?)?;
    let (l, v) = need(&mut sec, "mass")?;
    let mass = fixed::<2>(l, "mass", parse_vec(l, "mass", &v)?)?;
    let (l, v) = need(&mut sec, "lambda")?;
    let lambda = fixed::<3>(l, "lambda", parse_vec(l, "lambda", &v)?)?;
    let (l, v) = need(&mut sec, "r0")?;
    let r0 = fixed::<3>(l, "r0", parse_vec(l, "r0", &v)?)?;
    let (l, v) = need(&mut sec, "temperature")?;
    let temperature = parse_f64(l, "temperature", &v)?;
    let gamma_entry = sec.take("shuttle", "gamma").map(|e| (e.line, e.value.clone()));
    let q_entry = sec
        .take("shuttle", "q_factor")
        .map(|e| (e.line, e.value.clone()));
    let gamma = match (gamma_entry, q_entry) {
        (Some((l, v)), None) => fixed::<2>(l, "gamma", parse_vec(l, "gamma", &v)?)?,
        (None, Some((l, v))) => {
            let q = parse_f64(l, "q_factor", &v)?;
            if q <= 0.0 {
                return Err(ConfigError::new(l, "q_factor", "must be positive"));
            }
            [omega[0] / q, omega[1] / q]
        }
        (Some((l, _)), Some(_)) => {
            return Err(ConfigError::new(
                l,
                "gamma",
                "give either `gamma` or `q_factor`, not both",
            ));
        }
        (None, None) => {
            return Err(ConfigError::new(
                0,
                "q_factor",
                "missing damping: give `gamma` or `q_factor` in [shuttle]",
            ));
        }
    };
    let mut params = ShuttleParams {
        omega,
        mass,
        gamma,
        lambda,
        r0,
        temperature,
        beta: None,
        k2: [0.0; 2],
        k3: [0.0; 2],
        n_gate: Vec::new(),
    };
    if let Some(e) = sec.take("shuttle", "beta") {
        let l = e.line;
        let val = e.value.clone();
        let b = fixed::<3>(l, "beta", parse_vec(l, "beta", &val)?)?;
        if b != [0.0; 3] {
            params.beta = Some(b);
        }
    }
    if let Some(e) = sec.take("shuttle", "k2") {
        let l = e.line;
        let val = e.value.clone();
        params.k2 = fixed::<2>(l, "k2", parse_vec(l, "k2", &val)?)?;
    }
    if let Some(e) = sec.take("shuttle", "k3") {
        let l = e.line;
        let val = e.value.clone();
        params.k3 = fixed::<2>(l, "k3", parse_vec(l, "k3", &val)?)?;
    }
    if let Some(e) = sec.take("shuttle", "n_gate") {
        let l = e.line;
        let val = e.value.clone();
        params.n_gate = parse_vec(l, "n_gate", &val)?;
        if params.n_gate.len() != gates {
            return Err(ConfigError::new(
                l,
                "n_gate",
                format!("expected {gates} values to match `gates`"),
            ));
        }
    }
    params
        .validate()
        .map_err(|e| ConfigError::new(0, "shuttle", e.to_string()))?;

    // [drive]
    let (l, v) = sec
        .take("drive", "v0")
        .map(|e| (e.line, e.value.clone()))
        .ok_or_else(|| ConfigError::new(0, "v0", "missing required key in [drive]"))?;
    let v0 = parse_f64(l, "v0", &v)?;
    let (l, v) = sec
        .take("drive", "omega")
        .map(|e| (e.line, e.value.clone()))
        .ok_or_else(|| ConfigError::new(0, "omega", "missing required key in [drive]"))?;
    let w = parse_f64(l, "omega", &v)?;
    if !(w > 0.0) {
        return Err(ConfigError::new(l, "omega", "must be positive"));
    }
    let mut drive = DriveWaveform::sine(v0, w);
    for (line, value) in sec.take_all("drive", "harmonic") {
        let vals = parse_vec(line, "harmonic", &value)?;
        if vals.len() != 3 {
            return Err(ConfigError::new(
                line,
                "harmonic",
                "expected `order amplitude phase`",
            ));
        }
        if vals[0] < 1.0 || vals[0].fract() != 0.0 {
            return Err(ConfigError::new(
                line,
                "harmonic",
                "order must be a positive integer",
            ));
        }
        drive = drive.with_harmonic(vals[0] as u32, vals[1], vals[2]);
    }

    // [model]
    let mut tier = RunTier::Full;
    if let Some(e) = sec.take("model", "tier") {
        tier = match e.value.as_str() {
            "circuit" => RunTier::Circuit,
            "variance" => RunTier::Variance,
            "full" => RunTier::Full,
            other => {
                return Err(ConfigError::new(
                    e.line,
                    "tier",
                    format!("`{other}` is not one of circuit|variance|full"),
                ))
            }
        };
    }
    let mut closure = ClosureConfig {
        tier: tier.to_moment_tier(),
        ..Default::default()
    };
    let mut mc = McConfig::default();
    let mut master = MasterConfig::default();
    let mut lattice_halfwidth: i64 = 0;

    if let Some(e) = sec.take("model", "order") {
        let o = parse_f64(e.line, "order", &e.value)?;
        if o.fract() != 0.0 || !(2.0..=8.0).contains(&o) || (o as usize) % 2 != 0 {
            return Err(ConfigError::new(
                e.line,
                "order",
                "must be an even integer in 2..=8",
            ));
        }
        closure.order = o as usize;
    }
    if let Some(e) = sec.take("model", "integrator") {
        closure.integrator = match e.value.as_str() {
            "euler" => Integrator::Euler,
            "heun" | "improved_euler" => Integrator::ImprovedEuler,
            "rk4" => Integrator::Rk4,
            other => {
                return Err(ConfigError::new(
                    e.line,
                    "integrator",
                    format!("`{other}` is not one of euler|heun|rk4"),
                ))
            }
        };
    }
    if let Some(e) = sec.take("model", "steps_per_period") {
        let v = parse_f64(e.line, "steps_per_period", &e.value)?;
        closure.steps_per_period = v as usize;
        master.steps_per_period = v as usize;
    }
    if let Some(e) = sec.take("model", "bins") {
        let v = parse_f64(e.line, "bins", &e.value)? as usize;
        closure.bins = v;
        master.bins = v;
        mc.bins = v;
        mc.hist_bins = vec![0, v / 4, v / 2, 3 * v / 4];
    }
    if let Some(e) = sec.take("model", "tol") {
        closure.tol = parse_f64(e.line, "tol", &e.value)?;
    }
    if let Some(e) = sec.take("model", "max_periods") {
        let v = parse_f64(e.line, "max_periods", &e.value)? as u32;
        closure.max_periods = v;
        master.max_periods = v;
    }
    if let Some(e) = sec.take("model", "samples") {
        mc.samples = parse_f64(e.line, "samples", &e.value)? as u64;
    }
    if let Some(e) = sec.take("model", "periods_burnin") {
        mc.periods_burnin = parse_f64(e.line, "periods_burnin", &e.value)? as u32;
    }
    if let Some(e) = sec.take("model", "periods_measure") {
        mc.periods_measure = parse_f64(e.line, "periods_measure", &e.value)? as u32;
    }
    if let Some(e) = sec.take("model", "seed") {
        mc.master_seed = parse_f64(e.line, "seed", &e.value)? as u64;
    }
    scalar!(sec, "model", "dt", mc.dt, parse_f64);
    scalar!(sec, "model", "event_budget", mc.event_budget, parse_f64);
    if let Some(e) = sec.take("model", "groups") {
        mc.groups = parse_f64(e.line, "groups", &e.value)? as u64;
    }
    if let Some(e) = sec.take("model", "workers") {
        mc.workers = parse_f64(e.line, "workers", &e.value)? as usize;
    }
    if let Some(e) = sec.take("model", "frozen_mechanics") {
        mc.frozen_mechanics = parse_bool(e.line, "frozen_mechanics", &e.value)?;
        master.frozen_mechanics = mc.frozen_mechanics;
    }
    if let Some(e) = sec.take("model", "perturbed_u") {
        mc.perturbed_u = parse_bool(e.line, "perturbed_u", &e.value)?;
        master.perturbed_u = mc.perturbed_u;
    }
    if let Some(e) = sec.take("model", "thermal_noise") {
        mc.thermal_noise = parse_bool(e.line, "thermal_noise", &e.value)?;
    }
    if let Some(e) = sec.take("model", "master_tol") {
        master.tol = parse_f64(e.line, "master_tol", &e.value)?;
    }
    if let Some(e) = sec.take("model", "lattice_halfwidth") {
        lattice_halfwidth = parse_f64(e.line, "lattice_halfwidth", &e.value)? as i64;
    }

    // [output]
    let mut out_dir = None;
    let mut plot = false;
    if let Some(e) = sec.take("output", "dir") {
        out_dir = Some(e.value.clone());
    }
    if let Some(e) = sec.take("output", "plot") {
        plot = parse_bool(e.line, "plot", &e.value)?;
    }

    sec.reject_unused()?;

    Ok(RunConfig {
        cap,
        params,
        drive,
        tier,
        closure,
        mc,
        master,
        lattice_halfwidth,
        out_dir,
        plot,
        content_hash: fnv1a(text),
    })
}

pub fn parse_file(path: &std::path::Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        line: 0,
        field: String::new(),
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    parse(&text)
}

/// A complete worked example: the symmetric two-shuttle chain used across
/// the documentation and tests.
pub fn example_config() -> String {
    let chain = crate::presets::SeriesChain {
        c_j: [8.0e-18, 1.6e-17, 8.0e-18],
        shuttle_ground: 0.0,
        drain_ground: 1.0e-17,
        gap: 2.5e-9,
        gate: None,
    };
    let input = chain.build();
    let fmt_mat = |m: &Mat| -> String {
        (0..m.rows())
            .map(|i| {
                (0..m.cols())
                    .map(|j| format!("{:e}", m[(i, j)]))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect::<Vec<_>>()
            .join("; ")
    };
    let fmt_vec =
        |v: &[f64]| -> String { v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ") };
    format!(
        "# Two coupled shuttles in a symmetric source-S1-S2-drain chain.\n\
         # Capacitances in farads, derivatives in farads/meter, SI throughout.\n\
         [device]\n\
         gates = 0\n\
         c_ss = {}\n\
         c_s = {}\n\
         c00 = {:e}\n\
         d1_c_ss = {}\n\
         d1_c_s = {}\n\
         d1_c00 = {:e}\n\
         d2_c_ss = {}\n\
         d2_c_s = {}\n\
         d2_c00 = {:e}\n\
         \n\
         [shuttle]\n\
         omega = 3.3e8 3.4e8\n\
         mass = 1e-18 1.05e-18\n\
         q_factor = 10\n\
         lambda = 1e-10 1e-10 1e-10\n\
         r0 = 2e8 2e8 2e8\n\
         temperature = 30\n\
         \n\
         [drive]\n\
         v0 = 0.035\n\
         omega = 1.2e8\n\
         \n\
         [model]\n\
         tier = full\n\
         order = 4\n\
         integrator = rk4\n\
         steps_per_period = 2000\n\
         bins = 64\n\
         samples = 20000\n\
         periods_burnin = 30\n\
         periods_measure = 8\n\
         seed = 1\n\
         \n\
         [output]\n\
         plot = true\n",
        fmt_mat(&input.blocks.c_ss),
        fmt_vec(&input.blocks.c_s),
        input.blocks.c00,
        fmt_mat(&input.d_dx[0].c_ss),
        fmt_vec(&input.d_dx[0].c_s),
        input.d_dx[0].c00,
        fmt_mat(&input.d_dx[1].c_ss),
        fmt_vec(&input.d_dx[1].c_s),
        input.d_dx[1].c00,
    )
}
