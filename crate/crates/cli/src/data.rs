//! Stage 1 cluster-period summaries for the interim analysis.
//!
//! One row per observed cell with columns `cluster`, `period`, `n` and either
//! `mean` or `sum`, plus an optional `sd` for Gaussian outcomes. Clusters and
//! periods are numbered from 1 in the order of the planned stage 1 layout.

use crate::error::{CliError, CliResult};
use serde::Deserialize;
use std::path::Path;
use twostage_core::model::{OutcomeFamily, TrialLayout};

const COLUMNS: [&str; 6] = ["cluster", "period", "n", "mean", "sum", "sd"];

#[derive(Debug, Deserialize)]
struct Row {
    cluster: usize,
    period: usize,
    n: u32,
    mean: Option<f64>,
    sum: Option<f64>,
    sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOneData {
    /// Planned layout with the observed cell sizes.
    pub layout: TrialLayout,
    /// Cell means or proportions in `layout.cells()` order.
    pub values: Vec<f64>,
    /// Pooled within-cell variance when every row has an `sd`.
    pub within_variance: Option<f64>,
}

pub fn read(path: &Path, planned: &TrialLayout, family: OutcomeFamily) -> CliResult<StageOneData> {
    let fail = |msg: String| CliError::Config(format!("{}: {msg}", path.display()));
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| fail(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| fail(e.to_string()))?.clone();
    for (i, h) in headers.iter().enumerate() {
        if !COLUMNS.contains(&h) {
            return Err(fail(format!("line 1, column {}: unknown column `{h}`", i + 1)));
        }
    }
    for required in ["cluster", "period", "n"] {
        if !headers.iter().any(|h| h == required) {
            return Err(fail(format!("line 1: missing column `{required}`")));
        }
    }
    if !headers.iter().any(|h| h == "mean" || h == "sum") {
        return Err(fail("line 1: need a `mean` or a `sum` column".into()));
    }

    let (k, t) = (planned.n_clusters(), planned.stage_boundary());
    let mut sizes = vec![0u32; k * t];
    let mut values = vec![f64::NAN; k * t];
    let mut sd_sum = 0.0;
    let mut sd_df = 0.0;
    let mut all_sd = true;
    for record in rdr.records() {
        let record = record.map_err(|e| fail(e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let row: Row = record.deserialize(Some(&headers)).map_err(|e| match e.kind() {
            csv::ErrorKind::Deserialize { err, .. } => {
                let column = err.field().map_or(0, |f| f as usize + 1);
                let name = err.field().and_then(|f| headers.get(f as usize)).unwrap_or("?");
                fail(format!("line {line}, column {column} (`{name}`): {}", err.kind()))
            }
            _ => fail(format!("line {line}: {e}")),
        })?;
        let at = |msg: String| fail(format!("line {line}: {msg}"));
        if row.cluster == 0 || row.cluster > k {
            return Err(at(format!("cluster {} outside 1..={k}", row.cluster)));
        }
        if row.period == 0 || row.period > t {
            return Err(at(format!("period {} outside the stage 1 periods 1..={t}", row.period)));
        }
        let (c, p) = (row.cluster - 1, row.period - 1);
        if planned.cell_size(c, p) == 0 {
            return Err(at(format!(
                "cluster {} is not observed in period {} of the stage 1 design",
                row.cluster, row.period
            )));
        }
        let idx = c * t + p;
        if sizes[idx] > 0 {
            return Err(at(format!("duplicate row for cluster {} period {}", row.cluster, row.period)));
        }
        if row.n == 0 {
            return Err(at("n must be positive".into()));
        }
        let n = row.n as f64;
        let mean = match (row.mean, row.sum) {
            (Some(m), None) => m,
            (None, Some(s)) => s / n,
            (Some(_), Some(_)) => return Err(at("give either mean or sum, not both".into())),
            (None, None) => return Err(at("missing outcome value".into())),
        };
        if !mean.is_finite() {
            return Err(at("outcome value is not finite".into()));
        }
        if family == OutcomeFamily::BinomialLogit && !(0.0..=1.0).contains(&mean) {
            return Err(at(format!("event proportion {mean} outside [0, 1]")));
        }
        match row.sd {
            Some(sd) if sd >= 0.0 && sd.is_finite() => {
                sd_sum += (n - 1.0) * sd * sd;
                sd_df += n - 1.0;
            }
            Some(sd) => return Err(at(format!("invalid sd {sd}"))),
            None => all_sd = false,
        }
        sizes[idx] = row.n;
        values[idx] = mean;
    }
    for c in 0..k {
        for p in 0..t {
            if planned.cell_size(c, p) > 0 && sizes[c * t + p] == 0 {
                return Err(fail(format!("no row for cluster {} period {}", c + 1, p + 1)));
            }
        }
    }
    let treat = (0..k).flat_map(|c| (0..t).map(move |p| (c, p))).map(|(c, p)| planned.treated(c, p)).collect();
    let layout = TrialLayout::new(k, t, sizes, treat, t)?;
    let values = layout.cells().iter().map(|&(c, p)| values[c * t + p]).collect();
    let within_variance = (all_sd && family == OutcomeFamily::GaussianIdentity && sd_df > 0.0).then(|| sd_sum / sd_df);
    Ok(StageOneData { layout, values, within_variance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use twostage_core::model::StageOneDesign;

    fn planned() -> TrialLayout {
        StageOneDesign::Parallel { k1: 2, m1: 10, t1: 1, baseline: None }.stage_one_layout().unwrap()
    }

    fn file(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn reads_complete_file() {
        let f = file("cluster,period,n,mean,sd\n1,1,10,0.5,1\n2,1,12,0.1,1\n3,1,10,0.0,1\n4,1,9,0.2,1\n");
        let d = read(f.path(), &planned(), OutcomeFamily::GaussianIdentity).unwrap();
        assert_eq!(d.values, vec![0.5, 0.1, 0.0, 0.2]);
        assert_eq!(d.layout.cell_size(1, 0), 12);
        assert_eq!(d.within_variance, Some(1.0));
    }

    #[test]
    fn bad_value_reports_line_and_column() {
        let f = file("cluster,period,n,mean\n1,1,10,0.5\n2,1,ten,0.1\n");
        let msg = read(f.path(), &planned(), OutcomeFamily::GaussianIdentity).unwrap_err().to_string();
        assert!(msg.contains("line 3") && msg.contains("column 3") && msg.contains("`n`"), "{msg}");
    }

    #[test]
    fn missing_cell_is_reported() {
        let f = file("cluster,period,n,mean\n1,1,10,0.5\n2,1,10,0.1\n3,1,10,0.0\n");
        let msg = read(f.path(), &planned(), OutcomeFamily::GaussianIdentity).unwrap_err().to_string();
        assert!(msg.contains("cluster 4 period 1"), "{msg}");
    }
}
