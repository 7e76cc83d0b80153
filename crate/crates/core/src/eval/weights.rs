use crate::data::{center_grid_patch, stack_patches, Volume};
use crate::error::{Error, Result};
use crate::model::{Model, PredictorMode};
use crate::parallel::map_indexed;
use crate::tensor::Scalar;

/// Generated predictor parameters of each volume's grid-center patch, one
/// row per volume. `layer` keeps only that predictor layer's weight and
/// bias; `None` keeps the full concatenation.
pub fn weight_rows<T: Scalar>(
    model: &Model<T>,
    volumes: &[Volume],
    patch: usize,
    stride: usize,
    layer: Option<usize>,
) -> Result<Vec<Vec<f64>>> {
    if model.mode != PredictorMode::Hyper {
        return Err(Error::Config(
            "fixed-mode checkpoints have no generated weights to analyse".into(),
        ));
    }
    model.config.feature_extent(patch)?;
    let sizes = model.config.generated_layer_sizes();
    let range = match layer {
        None => 0..sizes.iter().sum(),
        Some(i) if i < sizes.len() => {
            let start: usize = sizes[..i].iter().sum();
            start..start + sizes[i]
        }
        Some(i) => {
            return Err(Error::Config(format!(
                "predictor layer {i} does not exist (layers 0..{})",
                sizes.len()
            )))
        }
    };
    map_indexed(volumes.len(), |i| {
        let p = center_grid_patch(&volumes[i], patch, stride)?;
        let mut rows = model.generate(&stack_patches::<T>(&[&p])?)?;
        let row = rows.pop().expect("one patch gives one row");
        Ok(row[range.clone()].to_vec())
    })
    .into_iter()
    .collect()
}
