//! Run configuration: a flat `key = value` file overlaid by command-line
//! flags, resolved into typed values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bspcopula::em::FitConfig;
use bspcopula::fixtures::Fixture;
use bspcopula::select::{PseudoMode, SizeMethod};
use serde::Serialize;

use crate::error::CliError;

/// Keys accepted in a config file; each matches a long flag.
pub const KEYS: &[&str] = &[
    "input",
    "model",
    "out",
    "cols",
    "degree",
    "size",
    "alpha",
    "beta",
    "folds",
    "seed",
    "tol",
    "max-iters",
    "kkt-tol",
    "grid",
    "threads",
    "pseudo",
    "method",
    "count",
    "datasets",
    "sample-size",
    "fixtures",
];

/// Reads `key = value` lines. Blank lines and lines starting with `#` are
/// skipped; keys may use `_` or `-`.
pub fn parse_config_file(text: &str, path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("{}:{}: expected key = value", path.display(), i + 1))
        })?;
        let key = key.trim().replace('_', "-");
        if !KEYS.contains(&key.as_str()) {
            return Err(CliError::Usage(format!(
                "{}:{}: unknown key '{key}'",
                path.display(),
                i + 1
            )));
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

/// Fully resolved settings of one run. Fields a command does not use keep
/// their defaults and are echoed anyway.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub input: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: PathBuf,
    pub cols: Option<Vec<String>>,
    pub degree: Vec<usize>,
    pub size: Vec<Vec<usize>>,
    pub alpha: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    pub folds: usize,
    pub seed: u64,
    pub fit: FitConfig,
    pub grid: Option<usize>,
    pub threads: Option<usize>,
    pub pseudo: PseudoMode,
    pub method: SizeMethod,
    pub count: Option<usize>,
    pub datasets: Option<usize>,
    pub sample_size: Option<Vec<usize>>,
    pub fixtures: Vec<Fixture>,
}

fn parse_num<T: std::str::FromStr>(key: &str, s: &str) -> Result<T, CliError> {
    s.trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("--{key}: cannot parse '{s}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, s: &str) -> Result<Vec<T>, CliError> {
    s.split(',').map(|v| parse_num(key, v)).collect()
}

/// `m,n[,k]` with each entry either a count or an inclusive range `a-b`;
/// several sizes may be separated by `;`. Ranges expand to every
/// combination.
pub fn parse_sizes(s: &str) -> Result<Vec<Vec<usize>>, CliError> {
    let mut out = Vec::new();
    for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let mut combos: Vec<Vec<usize>> = vec![Vec::new()];
        for axis in part.split(',') {
            let (lo, hi) = match axis.split_once('-') {
                Some((a, b)) => (parse_num("size", a)?, parse_num("size", b)?),
                None => {
                    let v = parse_num("size", axis)?;
                    (v, v)
                }
            };
            if lo > hi {
                return Err(CliError::Usage(format!("--size: empty range '{axis}'")));
            }
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    (lo..=hi).map(move |v| {
                        let mut c = c.clone();
                        c.push(v);
                        c
                    })
                })
                .collect();
        }
        out.extend(combos);
    }
    if out.is_empty() {
        return Err(CliError::Usage("--size: no sizes given".into()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn resolve(command: &str, values: &BTreeMap<String, String>) -> Result<Self, CliError> {
        let get = |k: &str| values.get(k).map(String::as_str);
        let mut fit = FitConfig::default();
        if let Some(v) = get("tol") {
            fit.outer_tol = parse_num("tol", v)?;
        }
        if let Some(v) = get("max-iters") {
            fit.max_outer_iters = parse_num("max-iters", v)?;
        }
        if let Some(v) = get("kkt-tol") {
            fit.kkt_tol = Some(parse_num("kkt-tol", v)?);
        }
        fit.validate()?;
        let pseudo = match get("pseudo") {
            Some(v) => PseudoMode::parse(v)
                .ok_or_else(|| CliError::Usage(format!("--pseudo: expected rank or identity, got '{v}'")))?,
            None => PseudoMode::default(),
        };
        let method = match get("method") {
            Some(v) => SizeMethod::parse(v)
                .ok_or_else(|| CliError::Usage(format!("--method: expected cv, aic or both, got '{v}'")))?,
            None => SizeMethod::Both,
        };
        let fixtures = match get("fixtures") {
            Some(v) => v
                .split(',')
                .map(|f| Fixture::parse(f.trim()).ok_or_else(|| CliError::Usage(format!("--fixtures: unknown fixture '{f}'"))))
                .collect::<Result<Vec<_>, _>>()?,
            None => Fixture::ALL.to_vec(),
        };
        let positive = |key: &str, v: Option<usize>| -> Result<Option<usize>, CliError> {
            match v {
                Some(0) => Err(CliError::Usage(format!("--{key} must be positive"))),
                v => Ok(v),
            }
        };
        Ok(Self {
            command: command.to_string(),
            input: get("input").map(PathBuf::from),
            model: get("model").map(PathBuf::from),
            out: PathBuf::from(get("out").unwrap_or(".")),
            cols: get("cols").map(|v| v.split(',').map(|c| c.trim().to_string()).collect()),
            degree: get("degree").map_or(Ok(vec![3]), |v| parse_list("degree", v))?,
            size: get("size").map_or(Ok(Vec::new()), parse_sizes)?,
            alpha: get("alpha").map(|v| parse_list("alpha", v)).transpose()?,
            beta: get("beta").map(|v| parse_list("beta", v)).transpose()?,
            folds: get("folds").map_or(Ok(5), |v| parse_num("folds", v))?,
            seed: get("seed").map_or(Ok(0), |v| parse_num("seed", v))?,
            fit,
            grid: positive("grid", get("grid").map(|v| parse_num("grid", v)).transpose()?)?,
            threads: positive("threads", get("threads").map(|v| parse_num("threads", v)).transpose()?)?,
            pseudo,
            method,
            count: positive("count", get("count").map(|v| parse_num("count", v)).transpose()?)?,
            datasets: positive("datasets", get("datasets").map(|v| parse_num("datasets", v)).transpose()?)?,
            sample_size: get("sample-size").map(|v| parse_list("sample-size", v)).transpose()?,
            fixtures,
        })
    }

    /// Degrees for `dim` axes; a single value applies to every axis.
    pub fn degrees(&self, dim: usize) -> Result<Vec<usize>, CliError> {
        match self.degree.len() {
            1 => Ok(vec![self.degree[0]; dim]),
            n if n == dim => Ok(self.degree.clone()),
            n => Err(CliError::Usage(format!("--degree has {n} values for {dim} axes"))),
        }
    }

    pub fn single_size(&self) -> Result<&[usize], CliError> {
        match self.size.as_slice() {
            [one] => Ok(one),
            [] => Err(CliError::Usage("--size is required".into())),
            _ => Err(CliError::Usage("--size must name a single size here".into())),
        }
    }

    pub fn alphas_or(&self, default: &[f64]) -> Vec<f64> {
        self.alpha.clone().unwrap_or_else(|| default.to_vec())
    }

    pub fn betas_or(&self, default: &[f64]) -> Vec<f64> {
        self.beta.clone().unwrap_or_else(|| default.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_ranges_expand() {
        assert_eq!(parse_sizes("4,5").unwrap(), vec![vec![4, 5]]);
        assert_eq!(
            parse_sizes("4-5,6").unwrap(),
            vec![vec![4, 6], vec![5, 6]]
        );
        assert_eq!(parse_sizes("4,4;20,20,2").unwrap(), vec![vec![4, 4], vec![20, 20, 2]]);
        assert!(parse_sizes("5-4,4").is_err());
    }

    #[test]
    fn config_file_rejects_unknown_keys() {
        let p = Path::new("run.cfg");
        let map = parse_config_file("# comment\nalpha = 0.1\nmax_iters=10\n", p).unwrap();
        assert_eq!(map["alpha"], "0.1");
        assert_eq!(map["max-iters"], "10");
        assert!(parse_config_file("colour = red", p).is_err());
        assert!(parse_config_file("alpha 0.1", p).is_err());
    }
}
