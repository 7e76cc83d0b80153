//! WebAssembly bindings for the static demo page: phantom slices, rank and
//! linear correlation, and the predictor weights a model generates for a
//! phantom.

use hysnet::data::{center_grid_patch, generate_phantom, stack_patches, ContentClass, PhantomSpec};
use hysnet::eval::MetricReport;
use hysnet::model::{Model, ModelConfig, PredictorMode};
use wasm_bindgen::prelude::*;

const PATCH: usize = 16;
const STRIDE: usize = 8;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn spec(class: &str, sigma: f64, seed: u32, extent: usize) -> Result<PhantomSpec, JsError> {
    Ok(PhantomSpec {
        class: class.parse::<ContentClass>().map_err(js_err)?,
        dims: [extent; 3],
        amplitude: 1.0,
        sigma,
        seed: seed as u64,
    })
}

/// A generated phantom: normalized voxels (x fastest) and its score.
#[wasm_bindgen]
pub struct Phantom {
    extent: usize,
    voxels: Vec<f32>,
    score: f64,
}

#[wasm_bindgen]
impl Phantom {
    #[wasm_bindgen(constructor)]
    pub fn new(class: &str, sigma: f64, seed: u32, extent: usize) -> Result<Phantom, JsError> {
        let (v, score) = generate_phantom(&spec(class, sigma, seed, extent)?).map_err(js_err)?;
        Ok(Phantom { extent, voxels: v.voxels().to_vec(), score })
    }

    #[wasm_bindgen(getter)]
    pub fn extent(&self) -> usize {
        self.extent
    }

    /// Signal amplitude over noise level.
    #[wasm_bindgen(getter)]
    pub fn score(&self) -> f64 {
        self.score
    }

    /// Axial slice `z` as `extent * extent` values in `[0, 1]`, row `y`.
    pub fn slice(&self, z: usize) -> Result<Vec<f32>, JsError> {
        let n = self.extent;
        if z >= n {
            return Err(JsError::new(&format!("slice {z} outside 0..{n}")));
        }
        Ok(self.voxels[z * n * n..(z + 1) * n * n].to_vec())
    }
}

/// `[srocc, plcc]` of two equally long score lists.
#[wasm_bindgen]
pub fn correlations(predicted: &[f64], reference: &[f64]) -> Result<Vec<f64>, JsError> {
    let r = MetricReport::compute(predicted, reference).map_err(js_err)?;
    Ok(vec![r.srocc, r.plcc])
}

/// Untrained desk-scale hyper-network, seeded, used to show how generated
/// predictor weights change with image content.
#[wasm_bindgen]
pub struct WeightGenerator {
    model: Model<f32>,
}

#[wasm_bindgen]
impl WeightGenerator {
    #[wasm_bindgen(constructor)]
    pub fn new(init_seed: u32) -> Result<WeightGenerator, JsError> {
        let config = ModelConfig { init_seed: init_seed as u64, ..ModelConfig::desk() };
        let model = Model::init(config, PredictorMode::Hyper).map_err(js_err)?;
        Ok(WeightGenerator { model })
    }

    /// Parameter count of each generated predictor layer.
    pub fn layer_sizes(&self) -> Vec<u32> {
        self.model.config.generated_layer_sizes().into_iter().map(|s| s as u32).collect()
    }

    /// Generated predictor parameters for the center patch of a 32^3
    /// phantom, layers concatenated.
    pub fn generate(&self, class: &str, sigma: f64, seed: u32) -> Result<Vec<f64>, JsError> {
        let (v, _) = generate_phantom(&spec(class, sigma, seed, 32)?).map_err(js_err)?;
        let p = center_grid_patch(&v, PATCH, STRIDE).map_err(js_err)?;
        let x = stack_patches::<f32>(&[&p]).map_err(js_err)?;
        let mut rows = self.model.generate(&x).map_err(js_err)?;
        Ok(rows.pop().unwrap_or_default())
    }

    /// Score the untrained model assigns to the same patch.
    pub fn predict(&self, class: &str, sigma: f64, seed: u32) -> Result<f64, JsError> {
        let (v, _) = generate_phantom(&spec(class, sigma, seed, 32)?).map_err(js_err)?;
        let p = center_grid_patch(&v, PATCH, STRIDE).map_err(js_err)?;
        let x = stack_patches::<f32>(&[&p]).map_err(js_err)?;
        Ok(self.model.predict(&x).map_err(js_err)?[0])
    }
}
