//! Cohort CSV reading and writing. Files may carry `# key=value` provenance
//! comment lines before the header; the reader skips them.

use std::path::Path;

use anyhow::{bail, Context, Result};
use bpr::CohortData;

use crate::config::{FileSchema, Provenance};

/// Read a cohort per the schema. Returns the data plus the raw strata
/// column values when the schema names one.
pub fn read_cohort(path: &Path, schema: &FileSchema) -> Result<(CohortData, Option<Vec<String>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let headers: Vec<String> = reader
        .headers()
        .context("reading CSV header")?
        .iter()
        .map(str::to_string)
        .collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("column '{name}' missing from {}", path.display()))
    };
    let mix_idx: Vec<usize> = schema
        .mixture
        .iter()
        .map(|n| col(n))
        .collect::<Result<_>>()?;
    let resp_idx: Vec<usize> = schema
        .response
        .iter()
        .map(|n| col(n))
        .collect::<Result<_>>()?;
    let out_idx = col(&schema.outcome)?;
    let strata_idx = schema.strata.as_deref().map(col).transpose()?;

    let p = mix_idx.len();
    let a = resp_idx.len();
    let mut x = Vec::new();
    let mut w = Vec::new();
    let mut y = Vec::new();
    let mut strata = strata_idx.map(|_| Vec::new());
    for (row_no, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("reading row {}", row_no + 1))?;
        let cell = |idx: usize, name: &str| -> Result<&str> {
            match record.get(idx).map(str::trim) {
                Some(v) if !v.is_empty() => Ok(v),
                _ => bail!("row {}, column '{}': missing value", row_no + 1, name),
            }
        };
        let binary = |idx: usize, name: &str| -> Result<u8> {
            match cell(idx, name)? {
                "0" => Ok(0),
                "1" => Ok(1),
                other => bail!(
                    "row {}, column '{}': expected 0/1, found '{}'",
                    row_no + 1,
                    name,
                    other
                ),
            }
        };
        for (&idx, name) in mix_idx.iter().zip(&schema.mixture) {
            x.push(binary(idx, name)?);
        }
        for (&idx, name) in resp_idx.iter().zip(&schema.response) {
            let v: f64 = cell(idx, name)?.parse().map_err(|_| {
                anyhow::anyhow!("row {}, column '{}': not a number", row_no + 1, name)
            })?;
            w.push(v);
        }
        y.push(binary(out_idx, &schema.outcome)?);
        if let (Some(values), Some(idx)) = (strata.as_mut(), strata_idx) {
            values.push(cell(idx, schema.strata.as_deref().unwrap())?.to_string());
        }
    }
    let n = y.len();
    if n == 0 {
        bail!("{} contains no data rows", path.display());
    }
    let data = CohortData::new(
        x,
        w,
        y,
        n,
        p,
        a,
        schema.mixture.clone(),
        schema.response.clone(),
        schema.outcome.clone(),
    )?;
    Ok((data, strata))
}

/// Write a cohort with an `id` column and provenance comments.
pub fn write_cohort(path: &Path, data: &CohortData, prov: &Provenance, force: bool) -> Result<()> {
    crate::config::refuse_overwrite(path, force)?;
    let mut out = String::new();
    out.push_str(&prov.csv_comments());
    out.push_str("id");
    for name in data.mixture_names() {
        out.push(',');
        out.push_str(name);
    }
    for name in data.response_names() {
        out.push(',');
        out.push_str(name);
    }
    out.push(',');
    out.push_str(data.outcome_name());
    out.push('\n');
    for i in 0..data.n() {
        out.push_str(&i.to_string());
        for &v in data.x_row(i) {
            out.push(',');
            out.push_str(if v == 1 { "1" } else { "0" });
        }
        for &v in data.w_row(i) {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push(',');
        out.push_str(if data.y(i) == 1 { "1" } else { "0" });
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Select a row subset of a cohort into an owned copy.
pub fn subset(data: &CohortData, rows: &[usize]) -> Result<CohortData> {
    let mut x = Vec::with_capacity(rows.len() * data.p());
    let mut w = Vec::with_capacity(rows.len() * data.a());
    let mut y = Vec::with_capacity(rows.len());
    for &i in rows {
        x.extend_from_slice(data.x_row(i));
        w.extend_from_slice(data.w_row(i));
        y.push(data.y(i));
    }
    Ok(CohortData::new(
        x,
        w,
        y,
        rows.len(),
        data.p(),
        data.a(),
        data.mixture_names().to_vec(),
        data.response_names().to_vec(),
        data.outcome_name().to_string(),
    )?)
}
