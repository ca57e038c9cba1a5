//! Output directories, number formatting and grid descriptions.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use kolmo::{KolmoError, Result};

/// An output directory that was empty (or absent) when the run started.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    /// Refuses a non-empty directory unless `force` is set.
    pub fn prepare(path: &Path, force: bool) -> Result<Self> {
        if path.exists() {
            if !path.is_dir() {
                return Err(KolmoError::Config(format!(
                    "{} exists and is not a directory",
                    path.display()
                )));
            }
            if !force && fs::read_dir(path)?.next().is_some() {
                return Err(KolmoError::Config(format!(
                    "{} is not empty; pass --force to write into it",
                    path.display()
                )));
            }
        } else {
            fs::create_dir_all(path)?;
        }
        Ok(OutDir {
            root: path.to_path_buf(),
        })
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.root.join(name), contents)?;
        Ok(())
    }

    pub fn write_json<T: serde::Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, &text)
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// A CSV table built row by row.
pub struct Csv {
    text: String,
    width: usize,
}

impl Csv {
    pub fn new(header: &[String]) -> Self {
        Csv {
            text: header.join(",") + "\n",
            width: header.len(),
        }
    }

    pub fn row(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len(), self.width);
        let mut line = String::new();
        for (k, v) in values.iter().enumerate() {
            if k > 0 {
                line.push(',');
            }
            let _ = write!(line, "{}", num(*v));
        }
        self.text.push_str(&line);
        self.text.push('\n');
    }

    pub fn raw_row(&mut self, cells: &[String]) {
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn finish(self) -> String {
        self.text
    }
}

/// `name_1, …, name_k`.
pub fn indexed(name: &str, k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("{name}_{i}")).collect()
}

/// `hess_11, hess_12, …` for a `d × d` block.
pub fn indexed_pairs(name: &str, d: usize) -> Vec<String> {
    (1..=d)
        .flat_map(|i| (1..=d).map(move |j| format!("{name}_{i}{j}")))
        .collect()
}

/// One axis of a grid: `lo:hi:n` (inclusive, evenly spaced) or a single value.
fn parse_axis(src: &str) -> Result<Vec<f64>> {
    let bad = || {
        KolmoError::Config(format!(
            "bad grid axis `{src}`; expected `lo:hi:n` or a number"
        ))
    };
    let parts: Vec<&str> = src.split(':').map(str::trim).collect();
    match parts.as_slice() {
        [v] => Ok(vec![v.parse().map_err(|_| bad())?]),
        [lo, hi, n] => {
            let lo: f64 = lo.parse().map_err(|_| bad())?;
            let hi: f64 = hi.parse().map_err(|_| bad())?;
            let n: usize = n.parse().map_err(|_| bad())?;
            if n == 0 || !lo.is_finite() || !hi.is_finite() {
                return Err(bad());
            }
            if n == 1 {
                return Ok(vec![lo]);
            }
            Ok((0..n)
                .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
                .collect())
        }
        _ => Err(bad()),
    }
}

/// `t0:t1:nt,x1…,xN`: the time axis followed by one axis per coordinate.
/// Points are listed with `t` slowest and the last coordinate fastest.
pub fn parse_grid(src: &str, n: usize) -> Result<Vec<(f64, Vec<f64>)>> {
    let axes = src.split(',').map(parse_axis).collect::<Result<Vec<_>>>()?;
    if axes.len() != n + 1 {
        return Err(KolmoError::Config(format!(
            "grid has {} axes; expected 1 + N = {}",
            axes.len(),
            n + 1
        )));
    }
    let mut points = vec![(0.0, Vec::new())];
    for (k, axis) in axes.iter().enumerate() {
        points = points
            .into_iter()
            .flat_map(|(t, x)| {
                axis.iter().map(move |&v| {
                    let mut x = x.clone();
                    if k == 0 {
                        (v, x)
                    } else {
                        x.push(v);
                        (t, x)
                    }
                })
            })
            .collect();
    }
    Ok(points)
}

/// A comma-separated list of `len` numbers.
pub fn parse_point(src: &str, len: usize, what: &str) -> Result<Vec<f64>> {
    let v = src
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| KolmoError::Config(format!("bad {what} `{src}`")))?;
    if v.len() != len {
        return Err(KolmoError::Config(format!(
            "{what} needs {len} numbers, got {}",
            v.len()
        )));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_a_tensor_product() {
        let g = parse_grid("0:0.5:2, -1:1:3, 0.25", 2).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g[0], (0.0, vec![-1.0, 0.25]));
        assert_eq!(g[4], (0.5, vec![0.0, 0.25]));
        assert!(parse_grid("0:1:2,0", 2).is_err());
        assert!(parse_grid("0:1,0,0", 2).is_err());
    }

    #[test]
    fn numbers_keep_seventeen_digits() {
        assert_eq!(num(0.1), "1.0000000000000001e-1");
        assert_eq!(num(0.1).parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn nonempty_directory_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x"), "1").unwrap();
        assert!(OutDir::prepare(dir.path(), false).is_err());
        assert!(OutDir::prepare(dir.path(), true).is_ok());
        assert!(OutDir::prepare(&dir.path().join("new"), false).is_ok());
    }
}
