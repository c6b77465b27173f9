//! Run specifications, problem descriptors and the `key=value` config format.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use aqn::UpdateRule;

use crate::CliError;

/// Flat `key=value` settings, as read from a config file or from flags.
pub type Settings = BTreeMap<String, String>;

/// Keys accepted in config files. Flags use the same names with `--`.
pub const KEYS: &[&str] = &[
    "problem",
    "method",
    "methods",
    "rule",
    "n",
    "h",
    "kappa-max",
    "seed",
    "tol",
    "max-iter",
    "max-calls",
    "m0",
    "tau",
    "lbfgs-memory",
    "out",
    "out-dir",
];

/// Keys a compare method descriptor may override.
const METHOD_KEYS: &[&str] = &["rule", "n", "h", "kappa-max", "m0", "tau", "lbfgs-memory"];

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses config text: one `key=value` per line, `#` starts a comment.
pub fn parse_config(text: &str) -> Result<Settings, CliError> {
    let mut out = Settings::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected key=value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(usage(format!("config line {}: unknown key {k:?}", i + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(usage(format!("config line {}: duplicate key {k:?}", i + 1)));
        }
    }
    Ok(out)
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| usage(format!("invalid value for {key}: {v:?}")))
}

fn positive(key: &str, v: f64) -> Result<f64, CliError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(usage(format!("{key} must be positive and finite, got {v}")))
    }
}

fn nonnegative(key: &str, v: f64) -> Result<f64, CliError> {
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(usage(format!("{key} must be nonnegative and finite, got {v}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Logistic,
    /// Square loss with cubic regularization.
    Square,
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Loss::Logistic => "logistic",
            Loss::Square => "square",
        })
    }
}

/// Problem descriptor, written `name:key=value:...`.
///
/// Random instances use their own `seed` when given and otherwise a seed
/// derived from the run's master seed. For `libsvm` the `path` key must come
/// last and takes the rest of the descriptor, so paths may contain `:`.
#[derive(Debug, Clone, PartialEq)]
pub enum ProblemSpec {
    /// `½‖Ax − b‖²` with Gaussian `A` (`m × d`) and `b`.
    Quadratic { d: usize, m: usize, seed: Option<u64> },
    /// Synthetic regularized logistic regression; the preprocessed data has
    /// `d + 1` features.
    Logistic { n: usize, d: usize, reg: f64, seed: Option<u64> },
    Rosenbrock { d: usize },
    /// `½‖Ax − b‖² + (c/3)‖x‖³` with Gaussian data.
    CubicLs { d: usize, m: usize, c: f64, seed: Option<u64> },
    /// LIBSVM file. For the square loss `reg` is relative to `‖A‖²`.
    Libsvm { loss: Loss, reg: f64, path: PathBuf },
}

impl FromStr for ProblemSpec {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        let (name, mut rest) = match s.split_once(':') {
            Some((n, r)) => (n, r),
            None => (s, ""),
        };
        let mut kv = BTreeMap::new();
        while !rest.is_empty() {
            if let Some(p) = rest.strip_prefix("path=") {
                kv.insert("path", p);
                break;
            }
            let (item, tail) = rest.split_once(':').unwrap_or((rest, ""));
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| usage(format!("problem parameter {item:?} is not key=value")))?;
            if kv.insert(k, v).is_some() {
                return Err(usage(format!("duplicate problem parameter {k:?}")));
            }
            rest = tail;
        }
        let allowed: &[&str] = match name {
            "quadratic" => &["d", "m", "seed"],
            "logistic" => &["n", "d", "reg", "seed"],
            "rosenbrock" => &["d"],
            "cubic-ls" => &["d", "m", "c", "seed"],
            "libsvm" => &["loss", "reg", "path"],
            other => return Err(usage(format!("unknown problem {other:?}"))),
        };
        if let Some(k) = kv.keys().find(|k| !allowed.contains(k)) {
            return Err(usage(format!("problem {name} has no parameter {k:?}")));
        }
        let count = |key: &str, default: usize| -> Result<usize, CliError> {
            let v = kv.get(key).map_or(Ok(default), |v| parse_num(key, v))?;
            if v == 0 {
                return Err(usage(format!("{key} must be at least 1")));
            }
            Ok(v)
        };
        let real = |key: &str, default: f64| -> Result<f64, CliError> {
            nonnegative(key, kv.get(key).map_or(Ok(default), |v| parse_num(key, v))?)
        };
        let seed = kv.get("seed").map(|v| parse_num("seed", v)).transpose()?;
        Ok(match name {
            "quadratic" => {
                let d = count("d", 10)?;
                ProblemSpec::Quadratic { d, m: count("m", d + 5)?, seed }
            }
            "logistic" => ProblemSpec::Logistic {
                n: count("n", 200)?,
                d: count("d", 20)?,
                reg: real("reg", 1e-3)?,
                seed,
            },
            "rosenbrock" => {
                let d = count("d", 10)?;
                if d < 2 {
                    return Err(usage("rosenbrock needs d >= 2"));
                }
                ProblemSpec::Rosenbrock { d }
            }
            "cubic-ls" => {
                let d = count("d", 15)?;
                ProblemSpec::CubicLs { d, m: count("m", d + 5)?, c: real("c", 0.1)?, seed }
            }
            _ => {
                let loss = match kv.get("loss").copied().unwrap_or("logistic") {
                    "logistic" => Loss::Logistic,
                    "square" => Loss::Square,
                    other => return Err(usage(format!("unknown loss {other:?}"))),
                };
                let path = kv.get("path").filter(|p| !p.is_empty()).ok_or_else(|| usage("libsvm needs path="))?;
                ProblemSpec::Libsvm { loss, reg: real("reg", 1e-3)?, path: PathBuf::from(path) }
            }
        })
    }
}

impl fmt::Display for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let seed = |f: &mut fmt::Formatter<'_>, s: &Option<u64>| match s {
            Some(s) => write!(f, ":seed={s}"),
            None => Ok(()),
        };
        match self {
            ProblemSpec::Quadratic { d, m, seed: s } => {
                write!(f, "quadratic:d={d}:m={m}")?;
                seed(f, s)
            }
            ProblemSpec::Logistic { n, d, reg, seed: s } => {
                write!(f, "logistic:n={n}:d={d}:reg={reg:?}")?;
                seed(f, s)
            }
            ProblemSpec::Rosenbrock { d } => write!(f, "rosenbrock:d={d}"),
            ProblemSpec::CubicLs { d, m, c, seed: s } => {
                write!(f, "cubic-ls:d={d}:m={m}:c={c:?}")?;
                seed(f, s)
            }
            ProblemSpec::Libsvm { loss, reg, path } => {
                write!(f, "libsvm:loss={loss}:reg={reg:?}:path={}", path.display())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Type1,
    Type2,
    Accel,
    Gd,
    Nesterov,
    Lbfgs,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Type1, Method::Type2, Method::Accel, Method::Gd, Method::Nesterov, Method::Lbfgs];

    pub fn name(self) -> &'static str {
        match self {
            Method::Type1 => "type1",
            Method::Type2 => "type2",
            Method::Accel => "accel",
            Method::Gd => "gd",
            Method::Nesterov => "nesterov",
            Method::Lbfgs => "lbfgs",
        }
    }

    /// Whether the method uses a secant memory.
    pub fn uses_memory(self) -> bool {
        matches!(self, Method::Type1 | Method::Type2 | Method::Accel)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| usage(format!("unknown method {s:?}")))
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub problem: ProblemSpec,
    pub method: Method,
    pub rule: UpdateRule,
    pub n: usize,
    pub h: f64,
    pub kappa_max: f64,
    /// Master seed.
    pub seed: u64,
    /// Gradient-norm tolerance.
    pub tol: f64,
    pub max_iter: usize,
    pub max_calls: usize,
    /// Initial regularization (initial `L` for baselines); estimated when absent.
    pub m0: Option<f64>,
    pub tau: f64,
    pub lbfgs_memory: usize,
    pub out: Option<PathBuf>,
}

impl RunSpec {
    pub fn new(problem: ProblemSpec, method: Method) -> Self {
        Self {
            problem,
            method,
            rule: UpdateRule::ForwardEstimate,
            n: 25,
            h: 1e-9,
            kappa_max: 1e9,
            seed: 0,
            tol: 1e-8,
            max_iter: 1000,
            max_calls: 100_000,
            m0: None,
            tau: 10.0,
            lbfgs_memory: 25,
            out: None,
        }
    }

    /// Builds a spec from settings; `problem` and `method` are required and
    /// keys only meaningful to `compare` are ignored.
    pub fn from_settings(s: &Settings) -> Result<Self, CliError> {
        let problem = s.get("problem").ok_or_else(|| usage("missing problem"))?.parse()?;
        let method = s.get("method").ok_or_else(|| usage("missing method"))?.parse()?;
        let mut spec = RunSpec::new(problem, method);
        for (k, v) in s {
            match k.as_str() {
                "problem" | "method" | "methods" | "out-dir" => {}
                "rule" => spec.rule = v.parse().map_err(|_| usage(format!("unknown rule {v:?}")))?,
                "n" => spec.n = parse_num(k, v)?,
                "h" => spec.h = positive(k, parse_num(k, v)?)?,
                "kappa-max" => {
                    spec.kappa_max = parse_num(k, v)?;
                    if !(spec.kappa_max >= 1.0) {
                        return Err(usage(format!("kappa-max must be at least 1, got {v}")));
                    }
                }
                "seed" => spec.seed = parse_num(k, v)?,
                "tol" => spec.tol = nonnegative(k, parse_num(k, v)?)?,
                "max-iter" => spec.max_iter = parse_num(k, v)?,
                "max-calls" => spec.max_calls = parse_num(k, v)?,
                "m0" => spec.m0 = Some(positive(k, parse_num(k, v)?)?),
                "tau" => {
                    spec.tau = parse_num(k, v)?;
                    if !(spec.tau > 1.0 && spec.tau.is_finite()) {
                        return Err(usage(format!("tau must exceed 1, got {v}")));
                    }
                }
                "lbfgs-memory" => spec.lbfgs_memory = parse_num(k, v)?,
                "out" => spec.out = Some(PathBuf::from(v)),
                other => return Err(usage(format!("unknown key {other:?}"))),
            }
        }
        if spec.n == 0 {
            return Err(usage("n must be at least 1"));
        }
        if spec.lbfgs_memory == 0 {
            return Err(usage("lbfgs-memory must be at least 1"));
        }
        Ok(spec)
    }

    /// Parses the config text written by [`RunSpec::emit`].
    pub fn parse(text: &str) -> Result<Self, CliError> {
        Self::from_settings(&parse_config(text)?)
    }

    /// Config text with one `key=value` line per field.
    pub fn emit(&self) -> String {
        let mut s = format!(
            "problem={}\nmethod={}\nrule={}\nn={}\nh={:?}\nkappa-max={:?}\nseed={}\ntol={:?}\nmax-iter={}\nmax-calls={}\n",
            self.problem, self.method, self.rule, self.n, self.h, self.kappa_max, self.seed, self.tol,
            self.max_iter, self.max_calls
        );
        if let Some(m0) = self.m0 {
            s += &format!("m0={m0:?}\n");
        }
        s += &format!("tau={:?}\nlbfgs-memory={}\n", self.tau, self.lbfgs_memory);
        if let Some(out) = &self.out {
            s += &format!("out={}\n", out.display());
        }
        s
    }

    /// Name used for trace files and summaries, e.g. `type1-forward`.
    pub fn label(&self) -> String {
        if self.method.uses_memory() {
            format!("{}-{}", self.method, self.rule)
        } else {
            self.method.to_string()
        }
    }
}

/// Applies a compare method descriptor `name[:key=value...]` on top of the
/// shared settings.
pub fn apply_method_descriptor(base: &Settings, desc: &str) -> Result<Settings, CliError> {
    let mut parts = desc.split(':');
    let name = parts.next().unwrap_or_default();
    name.parse::<Method>()?;
    let mut s = base.clone();
    s.insert("method".into(), name.into());
    for item in parts {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| usage(format!("method parameter {item:?} is not key=value")))?;
        if !METHOD_KEYS.contains(&k) {
            return Err(usage(format!("method descriptor cannot set {k:?}")));
        }
        s.insert(k.into(), v.into());
    }
    Ok(s)
}

/// Deterministic seed for a named component: FNV-1a of the label mixed into
/// the master seed, finished with SplitMix64.
pub fn derive_seed(master: u64, component: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in component.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
