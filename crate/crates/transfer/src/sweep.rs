//! Hyperparameter grids: `key=lo:hi:step`, `key=a,b,c` or `key=value`.

use crate::error::{CliError, Result};

/// One swept key and the values it takes, as config strings.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

/// Values are rounded to this many decimals so `0.4 + 3·0.1` prints as `0.7`.
const DECIMALS: i32 = 10;

fn tidy(v: f64) -> String {
    let scale = 10f64.powi(DECIMALS);
    let r = (v * scale).round() / scale;
    if r == 0.0 {
        "0".into()
    } else {
        r.to_string()
    }
}

fn number(spec: &str, part: &str) -> Result<f64> {
    part.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| CliError::Usage(format!("grid {spec:?}: {part:?} is not a number")))
}

pub fn parse_axis(spec: &str) -> Result<Axis> {
    let (key, range) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("grid {spec:?}: expected key=values")))?;
    let key = key.trim().to_string();
    if key.is_empty() || range.trim().is_empty() {
        return Err(CliError::Usage(format!("grid {spec:?}: expected key=values")));
    }
    let values = if range.contains(':') {
        let parts: Vec<&str> = range.split(':').collect();
        let [lo, hi, step] = parts[..] else {
            return Err(CliError::Usage(format!("grid {spec:?}: a range is lo:hi:step")));
        };
        let (lo, hi, step) = (number(spec, lo)?, number(spec, hi)?, number(spec, step)?);
        if step <= 0.0 || hi < lo {
            return Err(CliError::Usage(format!("grid {spec:?}: needs lo <= hi and step > 0")));
        }
        // a small slack keeps `hi` when the steps land on it up to rounding
        let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| tidy(lo + i as f64 * step)).collect()
    } else {
        range.split(',').map(|v| v.trim().to_string()).collect::<Vec<_>>()
    };
    if values.iter().any(String::is_empty) {
        return Err(CliError::Usage(format!("grid {spec:?}: empty value")));
    }
    Ok(Axis { key, values })
}

/// Cartesian product of the axes, first axis varying slowest.
pub fn points(axes: &[Axis]) -> Vec<Vec<(String, String)>> {
    let mut out = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push((axis.key.clone(), v.clone()));
                    p
                })
            })
            .collect();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_include_both_ends() {
        let a = parse_axis("p1=0.4:0.8:0.1").unwrap();
        assert_eq!(a.key, "p1");
        assert_eq!(a.values, ["0.4", "0.5", "0.6", "0.7", "0.8"]);
        assert_eq!(parse_axis("B=1:4:1").unwrap().values, ["1", "2", "3", "4"]);
        assert_eq!(parse_axis("p2=0:0.2:0.1").unwrap().values, ["0", "0.1", "0.2"]);
    }

    #[test]
    fn lists_and_single_values() {
        assert_eq!(parse_axis("B=1,2,4").unwrap().values, ["1", "2", "4"]);
        assert_eq!(parse_axis("p2=0.3").unwrap().values, ["0.3"]);
    }

    #[test]
    fn malformed_axes_are_usage_errors() {
        for bad in ["p1", "p1=", "=3", "p1=0.8:0.4:0.1", "p1=0:1:0", "p1=0:1", "p1=a:1:0.1", "p1=1,,2"] {
            assert!(matches!(parse_axis(bad), Err(CliError::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn product_order() {
        let axes = [parse_axis("a=1,2").unwrap(), parse_axis("b=x,y,z").unwrap()];
        let p = points(&axes);
        assert_eq!(p.len(), 6);
        assert_eq!(p[1], vec![("a".into(), "1".into()), ("b".into(), "y".into())]);
        assert_eq!(points(&[]), vec![Vec::new()]);
    }
}
