use std::path::PathBuf;

use xder::metrics::{faa, ff};

use crate::error::CliError;
use crate::run::RunDir;

pub const HEADER: &str = "method,seed_count,faa_mean,faa_std,ff_mean,ff_std,ece_mean,ece_std";

/// Mean and sample standard deviation; the deviation of a single value is 0.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

fn cells(v: &[Option<f64>]) -> String {
    if v.is_empty() || v.iter().any(Option::is_none) {
        return ",".into();
    }
    let v: Vec<f64> = v.iter().flatten().copied().collect();
    let (m, s) = mean_std(&v);
    format!("{m:.6},{s:.6}")
}

/// One row per method, in order of first appearance.
pub fn cmd_compare(dirs: &[PathBuf]) -> Result<String, CliError> {
    if dirs.is_empty() {
        return Err(CliError::Config("compare needs at least one run directory".into()));
    }
    let mut groups: Vec<(String, Vec<[Option<f64>; 3]>)> = Vec::new();
    for d in dirs {
        let run = RunDir::open(d)?;
        let matrix = run.matrix()?;
        let metrics = run.metrics()?;
        let ece = metrics.iter().find(|r| r.metric == "ece" && r.scope == "final").and_then(|r| r.value);
        let row = [Some(faa(&matrix)?), ff(&matrix).ok(), ece];
        match groups.iter_mut().find(|(m, _)| *m == run.manifest.method) {
            Some((_, rows)) => rows.push(row),
            None => groups.push((run.manifest.method.clone(), vec![row])),
        }
    }
    let mut out = String::from(HEADER);
    out.push('\n');
    for (method, rows) in &groups {
        let col = |i: usize| rows.iter().map(|r| r[i]).collect::<Vec<_>>();
        out.push_str(&format!("{method},{},{},{},{}\n", rows.len(), cells(&col(0)), cells(&col(1)), cells(&col(2))));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_cells() {
        assert_eq!(cells(&[Some(0.5)]), "0.500000,0.000000");
        assert_eq!(cells(&[Some(1.0), Some(3.0)]), "2.000000,1.414214");
        assert_eq!(cells(&[Some(1.0), None]), ",");
    }
}
