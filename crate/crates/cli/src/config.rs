//! Optional TOML run file. Top-level keys set the common options; one table
//! per subcommand sets its parameters. Command-line flags win over the file.

use std::path::Path;

use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub out: Option<String>,
    pub format: Option<String>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    #[serde(default)]
    pub gamma: CurveSection,
    #[serde(default, rename = "amse-curve")]
    pub amse_curve: CurveSection,
    #[serde(default, rename = "linreg-amse")]
    pub linreg_amse: LinRegSection,
    #[serde(default)]
    pub simulate: SimulateSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveSection {
    pub p: Option<usize>,
    pub r: Option<usize>,
    pub alpha: Option<f64>,
    pub grid: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinRegSection {
    pub sigma_sq: Option<f64>,
    pub x_bar0: Option<f64>,
    pub s0: Option<f64>,
    pub alpha: Option<f64>,
    pub delta_grid: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub m: Option<usize>,
    pub n_i: Option<Vec<usize>>,
    #[serde(rename = "M")]
    pub reps: Option<usize>,
    pub alpha: Option<f64>,
    pub ells: Option<String>,
    pub scaling: Option<String>,
}

impl RunFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// Parses `start:stop:step` (inclusive of `stop`) or a comma-separated list.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, CliError> {
    let bad = |what: &str| CliError::Usage(format!("invalid grid {spec:?}: {what}"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad("not a number"));
    let parts: Vec<&str> = spec.split(':').collect();
    let grid = match parts.as_slice() {
        [start, stop, step] => {
            let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
            if !(step > 0.0) || !(stop >= start) || !start.is_finite() || !stop.is_finite() {
                return Err(bad("need start ≤ stop and a positive step"));
            }
            let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
            if count > 10_000_000 {
                return Err(bad("too many points"));
            }
            (0..count).map(|i| start + i as f64 * step).collect()
        }
        [list] => list.split(',').map(num).collect::<Result<Vec<_>, _>>()?,
        _ => return Err(bad("expected start:stop:step or a comma list")),
    };
    if grid.is_empty() {
        return Err(bad("empty"));
    }
    Ok(grid)
}

/// Like [`parse_grid`] but for nonnegative integer indices.
pub fn parse_indices(spec: &str) -> Result<Vec<u32>, CliError> {
    parse_grid(spec)?
        .into_iter()
        .map(|x| {
            if x >= 0.0 && x.fract() == 0.0 && x <= u32::MAX as f64 {
                Ok(x as u32)
            } else {
                Err(CliError::Usage(format!("invalid index {x} in {spec:?}")))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        let g = parse_grid("0:30:0.5").unwrap();
        assert_eq!(g.len(), 61);
        assert_eq!(g[60], 30.0);
        assert_eq!(parse_grid("1, 2.5,4").unwrap(), vec![1.0, 2.5, 4.0]);
        assert!(parse_grid("3:1:1").is_err());
        assert!(parse_grid("0:1:0").is_err());
        assert!(parse_grid("a").is_err());
        assert_eq!(parse_indices("0:9:1").unwrap(), (0..10).collect::<Vec<_>>());
        assert!(parse_indices("0.5").is_err());
    }

    #[test]
    fn run_file_sections() {
        let f: RunFile = toml::from_str(
            "seed = 7\n[simulate]\nM = 10\nn_i = [300, 300]\n[amse-curve]\np = 4\nr = 2\n",
        )
        .unwrap();
        assert_eq!(f.seed, Some(7));
        assert_eq!(f.simulate.reps, Some(10));
        assert_eq!(f.amse_curve.p, Some(4));
        assert!(toml::from_str::<RunFile>("bogus = 1").is_err());
    }
}
