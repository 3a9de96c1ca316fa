use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::svg::{Plot, Series};
use crate::{Error, Result};

/// One trained model scored on one evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub env: String,
    pub model: String,
    pub samples: usize,
    pub seed: u64,
    pub mpe: f64,
    /// Cumulative error at horizons `0..=H`; may be empty.
    pub cumulative: Vec<f64>,
}

/// Seed aggregate for one `(env, model, samples)` group.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub env: String,
    pub model: String,
    pub samples: usize,
    pub n_seeds: usize,
    pub mean: f64,
    /// Population standard deviation (divisor `n`).
    pub std: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub cells: Vec<Cell>,
}

const TABLE_COMMENT: &str = "# MPE mean and standard deviation over seeds; std uses the population divisor n";
const TABLE_HEADER: &str = "env,model,samples,n_seeds,mpe_mean,mpe_std,note";
const CELLS_HEADER: &str = "env,model,samples,seed,mpe";

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricReport {
    fn groups(&self) -> BTreeMap<(&str, &str, usize), Vec<&Cell>> {
        let mut g: BTreeMap<_, Vec<&Cell>> = BTreeMap::new();
        for c in &self.cells {
            g.entry((c.env.as_str(), c.model.as_str(), c.samples)).or_default().push(c);
        }
        g
    }

    /// Rows sorted by environment, model and budget.
    pub fn table(&self) -> Vec<TableRow> {
        self.groups()
            .into_iter()
            .map(|((env, model, samples), cells)| {
                let (mean, std) = mean_std(&cells.iter().map(|c| c.mpe).collect::<Vec<_>>());
                TableRow { env: env.into(), model: model.into(), samples, n_seeds: cells.len(), mean, std }
            })
            .collect()
    }

    pub fn table_csv(&self) -> String {
        let mut out = format!("{TABLE_COMMENT}\n{TABLE_HEADER}\n");
        for r in self.table() {
            let note = if r.n_seeds == 1 { "n=1" } else { "" };
            let _ = writeln!(out, "{},{},{},{},{},{},{}", r.env, r.model, r.samples, r.n_seeds, r.mean, r.std, note);
        }
        out
    }

    /// One row per cell, in insertion order.
    pub fn cells_csv(&self) -> String {
        let mut out = format!("{CELLS_HEADER}\n");
        for c in &self.cells {
            let _ = writeln!(out, "{},{},{},{},{}", c.env, c.model, c.samples, c.seed, c.mpe);
        }
        out
    }

    fn envs(&self) -> Vec<&str> {
        let mut e: Vec<&str> = self.cells.iter().map(|c| c.env.as_str()).collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    /// MPE against training budget, one line per model with std error bars.
    pub fn fig2_svg(&self, env: &str) -> String {
        let table = self.table();
        let mut per_model: BTreeMap<&str, Vec<(f64, f64, f64)>> = BTreeMap::new();
        for r in table.iter().filter(|r| r.env == env) {
            per_model.entry(&r.model).or_default().push((r.samples as f64, r.mean, r.std));
        }
        let mut plot = Plot::new(format!("{env}: prediction error vs training samples"), "training samples", "MPE");
        plot.log_x = true;
        for (model, mut pts) in per_model {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            plot.series.push(Series {
                name: model.to_string(),
                points: pts.iter().map(|p| (p.0, p.1)).collect(),
                errors: Some(pts.iter().map(|p| p.2).collect()),
                markers: true,
            });
        }
        plot.render()
    }

    /// Seed-mean cumulative curves at the largest budget for `env`.
    pub fn fig4_curves(&self, env: &str) -> Vec<(String, Vec<f64>)> {
        let Some(budget) = self.cells.iter().filter(|c| c.env == env && !c.cumulative.is_empty()).map(|c| c.samples).max() else {
            return Vec::new();
        };
        let mut per_model: BTreeMap<&str, Vec<&[f64]>> = BTreeMap::new();
        for c in self.cells.iter().filter(|c| c.env == env && c.samples == budget && !c.cumulative.is_empty()) {
            per_model.entry(&c.model).or_default().push(&c.cumulative);
        }
        per_model
            .into_iter()
            .map(|(model, curves)| {
                let len = curves.iter().map(|c| c.len()).min().unwrap_or(0);
                let mean = (0..len).map(|h| curves.iter().map(|c| c[h]).sum::<f64>() / curves.len() as f64).collect();
                (model.to_string(), mean)
            })
            .collect()
    }

    pub fn fig4_svg(&self, env: &str) -> String {
        let mut plot = Plot::new(format!("{env}: cumulative prediction error"), "horizon", "cumulative error");
        for (model, curve) in self.fig4_curves(env) {
            plot.series.push(Series::line(model, curve.iter().enumerate().map(|(h, v)| (h as f64, *v)).collect()));
        }
        plot.render()
    }

    pub fn fig4_csv(&self, env: &str) -> String {
        let curves = self.fig4_curves(env);
        let mut out = String::from("horizon");
        for (m, _) in &curves {
            let _ = write!(out, ",{m}");
        }
        out.push('\n');
        let len = curves.iter().map(|c| c.1.len()).min().unwrap_or(0);
        for h in 0..len {
            let _ = write!(out, "{h}");
            for (_, c) in &curves {
                let _ = write!(out, ",{}", c[h]);
            }
            out.push('\n');
        }
        out
    }

    /// Writes `table1.csv`, `cells.csv` and per-environment figures.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = vec![("table1.csv".to_string(), self.table_csv()), ("cells.csv".to_string(), self.cells_csv())];
        for env in self.envs() {
            files.push((format!("fig2_{env}.svg"), self.fig2_svg(env)));
            if !self.fig4_curves(env).is_empty() {
                files.push((format!("fig4_{env}.svg"), self.fig4_svg(env)));
                files.push((format!("fig4_{env}.csv"), self.fig4_csv(env)));
            }
        }
        files
            .into_iter()
            .map(|(name, text)| {
                let path = dir.join(name);
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
                Ok(path)
            })
            .collect()
    }
}

fn fields(line: &str, n: usize, lineno: usize) -> Result<Vec<&str>> {
    let f: Vec<&str> = line.split(',').collect();
    if f.len() != n {
        return Err(Error::format(PathBuf::new(), format!("line {lineno}: expected {n} fields, found {}", f.len())));
    }
    Ok(f)
}

fn num<T: std::str::FromStr>(s: &str, lineno: usize) -> Result<T> {
    s.parse().map_err(|_| Error::format(PathBuf::new(), format!("line {lineno}: cannot parse `{s}`")))
}

/// Inverse of [`MetricReport::table_csv`].
pub fn parse_table_csv(text: &str) -> Result<Vec<TableRow>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#'));
    if lines.next().map(|(_, l)| l) != Some(TABLE_HEADER) {
        return Err(Error::format(PathBuf::new(), "missing table header"));
    }
    lines
        .map(|(i, line)| {
            let f = fields(line, 7, i + 1)?;
            Ok(TableRow {
                env: f[0].into(),
                model: f[1].into(),
                samples: num(f[2], i + 1)?,
                n_seeds: num(f[3], i + 1)?,
                mean: num(f[4], i + 1)?,
                std: num(f[5], i + 1)?,
            })
        })
        .collect()
}

/// Inverse of [`MetricReport::cells_csv`]; cumulative curves are not stored.
pub fn parse_cells_csv(text: &str) -> Result<Vec<Cell>> {
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l) != Some(CELLS_HEADER) {
        return Err(Error::format(PathBuf::new(), "missing cells header"));
    }
    lines
        .map(|(i, line)| {
            let f = fields(line, 5, i + 1)?;
            Ok(Cell {
                env: f[0].into(),
                model: f[1].into(),
                samples: num(f[2], i + 1)?,
                seed: num(f[3], i + 1)?,
                mpe: num(f[4], i + 1)?,
                cumulative: Vec::new(),
            })
        })
        .collect()
}
