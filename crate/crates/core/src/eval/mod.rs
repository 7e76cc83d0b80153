//! Volume scoring, correlation metrics and analysis of generated weights.

mod metrics;
mod pca;
mod weights;

use std::io::Write;
use std::path::Path;

use crate::data::{grid_patches, load_manifest, normalize, read_volume, stack_patches, Patch, Volume};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::parallel::map_indexed;
use crate::tensor::Scalar;

pub use metrics::{average_ranks, plcc, srocc, MetricReport};
pub use pca::{cluster_separation, pca_project, Pca, Separation, PCA_MAX_ITER, PCA_TOL};
pub use weights::weight_rows;

/// One prediction per patch, in input order.
pub fn predict_patches<T: Scalar>(model: &Model<T>, patches: &[Patch]) -> Result<Vec<f64>> {
    map_indexed(patches.len(), |i| {
        let x = stack_patches::<T>(&[&patches[i]])?;
        Ok(model.predict(&x)?[0])
    })
    .into_iter()
    .collect()
}

/// Mean prediction over the full `P`/`S` grid of `v`.
pub fn evaluate_volume<T: Scalar>(v: &Volume, model: &Model<T>, patch: usize, stride: usize) -> Result<f64> {
    let (_, patches) = grid_patches(v, patch, stride)?;
    let scores = predict_patches(model, &patches)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Per-volume predictions for every manifest record plus the metric report
/// against the manifest scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEvaluation {
    pub paths: Vec<String>,
    pub reference: Vec<f64>,
    pub predicted: Vec<f64>,
    pub report: MetricReport,
}

impl ManifestEvaluation {
    /// Writes `path,score,predicted` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
        w.write_record(["path", "score", "predicted"]).map_err(csv_err)?;
        for ((p, r), q) in self.paths.iter().zip(&self.reference).zip(&self.predicted) {
            w.write_record([p.as_str(), &r.to_string(), &q.to_string()])
                .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

pub fn evaluate_manifest<T: Scalar>(
    manifest: &Path,
    model: &Model<T>,
    patch: usize,
    stride: usize,
) -> Result<ManifestEvaluation> {
    let m = load_manifest(manifest)?;
    let mut predicted = Vec::with_capacity(m.len());
    for r in &m.records {
        let v = normalize(&read_volume(&r.path)?)?;
        predicted.push(evaluate_volume(&v, model, patch, stride)?);
    }
    let reference = m.scores();
    let report = MetricReport::compute(&predicted, &reference)?;
    Ok(ManifestEvaluation {
        paths: m.records.iter().map(|r| r.path.display().to_string()).collect(),
        reference,
        predicted,
        report,
    })
}

/// Writes the `label,pc1,pc2` weight-cloud CSV.
pub fn write_cloud_csv(path: &Path, labels: &[String], projection: &[Vec<f64>]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    writeln!(f, "label,pc1,pc2").map_err(io)?;
    for (l, p) in labels.iter().zip(projection) {
        let pc2 = p.get(1).copied().unwrap_or(0.0);
        writeln!(f, "{l},{},{pc2}", p[0]).map_err(io)?;
    }
    f.flush().map_err(io)
}
