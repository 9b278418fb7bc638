//! Plain-CSV matrices and instance directories (`phi.csv`, `y.csv`,
//! `x_true.csv`, `meta.json`).

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MmvProblem;
use crate::synth::GroundTruth;

/// Write a matrix as headerless CSV. Values use the shortest representation
/// that parses back to the same `f64`.
pub fn write_matrix_csv(path: &Path, x: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for r in 0..x.nrows() {
        w.write_record(x.row(r).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for rec in rd.records() {
        let rec = rec?;
        match cols {
            None => cols = Some(rec.len()),
            Some(c) if c != rec.len() => {
                return Err(Error::Format(format!("{}: row {} has {} fields, expected {c}", path.display(), rows + 1, rec.len())))
            }
            _ => {}
        }
        for field in rec.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Format(format!("{}: bad number {field:?}", path.display())))?;
            data.push(v);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, cols.unwrap_or(0), &data))
}

/// Column vector as one value per line.
pub fn write_vector_csv(path: &Path, v: &[f64]) -> Result<()> {
    write_matrix_csv(path, &DMatrix::from_column_slice(v.len(), 1, v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub n: usize,
    pub m: usize,
    pub l: usize,
    pub lambda: f64,
    #[serde(default)]
    pub noise_var: f64,
    #[serde(default)]
    pub support: Vec<usize>,
    #[serde(default)]
    pub beta_per_row: Vec<f64>,
    /// Whatever produced the instance, kept verbatim.
    #[serde(default)]
    pub generator: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub problem: MmvProblem,
    pub truth: Option<GroundTruth>,
    pub meta: InstanceMeta,
}

impl Instance {
    pub fn new(problem: MmvProblem, truth: Option<GroundTruth>, generator: serde_json::Value) -> Self {
        let meta = InstanceMeta {
            n: problem.n(),
            m: problem.m(),
            l: problem.l(),
            lambda: problem.lambda,
            noise_var: truth.as_ref().map_or(0.0, |t| t.noise_var),
            support: truth.as_ref().map_or_else(Vec::new, |t| t.row_support()),
            beta_per_row: truth.as_ref().map_or_else(Vec::new, |t| t.beta_per_row.clone()),
            generator,
        };
        Self { problem, truth, meta }
    }
}

pub fn export_instance(dir: &Path, inst: &Instance) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_matrix_csv(&dir.join("phi.csv"), &inst.problem.phi)?;
    write_matrix_csv(&dir.join("y.csv"), &inst.problem.y)?;
    if let Some(t) = &inst.truth {
        write_matrix_csv(&dir.join("x_true.csv"), &t.x_true)?;
    }
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&inst.meta)? + "\n")?;
    Ok(())
}

/// Load an instance directory; `x_true.csv` is optional.
pub fn import_instance(dir: &Path) -> Result<Instance> {
    let need = |name: &str| {
        let p = dir.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingInput(p.display().to_string()))
        }
    };
    let meta: InstanceMeta = serde_json::from_str(&fs::read_to_string(need("meta.json")?)?)?;
    let phi = read_matrix_csv(&need("phi.csv")?)?;
    let y = read_matrix_csv(&need("y.csv")?)?;
    if (phi.nrows(), phi.ncols(), y.ncols()) != (meta.n, meta.m, meta.l) {
        return Err(Error::DimensionMismatch(format!(
            "meta.json says {}x{} with L = {}, files give {}x{} with L = {}",
            meta.n,
            meta.m,
            meta.l,
            phi.nrows(),
            phi.ncols(),
            y.ncols()
        )));
    }
    let problem = MmvProblem::new(phi, y, meta.lambda)?;
    let xt = dir.join("x_true.csv");
    let truth = if xt.is_file() {
        let x = read_matrix_csv(&xt)?;
        if x.shape() != (meta.m, meta.l) {
            return Err(Error::DimensionMismatch(format!("x_true.csv is {}x{}", x.nrows(), x.ncols())));
        }
        let betas = if meta.beta_per_row.is_empty() { vec![0.0; meta.m] } else { meta.beta_per_row.clone() };
        Some(GroundTruth::from_x(x, betas, meta.noise_var))
    } else {
        None
    };
    Ok(Instance { problem, truth, meta })
}
