use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::finite_diff_check;

fn tiny_config(norm: NormMode) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            stem: StemConfig { channels: 4, kernel: 3, stride: 1 },
            stages: vec![
                StageConfig { channels: 4, num_blocks: 1, stride: 1 },
                StageConfig { channels: 8, num_blocks: 1, stride: 2 },
            ],
        },
        norm_mode: norm,
        predictor_dims: vec![8, 4, 2, 1],
        hyper_branch: HyperBranchConfig { reduction: 2, hidden: 4 },
        dtype: crate::tensor::DType::F64,
        init_seed: 3,
    }
}

fn random_patches(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Tensor<f64> {
    let v: Vec<f64> = (0..n * p * p * p).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::from_f64(&[n, 1, p, p, p], &v).unwrap()
}

#[test]
fn desk_backbone_shapes_on_16_cube() {
    let model = Model::<f32>::init(ModelConfig::desk(), PredictorMode::Hyper).unwrap();
    let tape = Tape::new();
    let bound = model.bind_constants(&tape).unwrap();
    let x = tape.constant(Tensor::full(&[1, 1, 16, 16, 16], 0.5)).unwrap();
    let f = backbone_forward(x, &model.config, &bound).unwrap();
    assert_eq!(f.map.dims(), vec![1, 32, 4, 4, 4]);
    assert_eq!(f.pooled.dims(), vec![1, 32]);
}

#[test]
fn backbone_rejects_incompatible_patch() {
    let model = Model::<f32>::init(ModelConfig::desk(), PredictorMode::Hyper).unwrap();
    let tape = Tape::new();
    let bound = model.bind_constants(&tape).unwrap();
    let x = tape.constant(Tensor::full(&[1, 1, 6, 6, 6], 0.5)).unwrap();
    assert!(matches!(
        backbone_forward(x, &model.config, &bound),
        Err(Error::Config(_))
    ));
}

#[test]
fn zeroed_backbone_without_norm_pools_to_zero() {
    let mut model = Model::<f64>::init(tiny_config(NormMode::None), PredictorMode::Hyper).unwrap();
    for (name, t) in model.params.iter_mut() {
        if name.starts_with("backbone.") {
            *t = Tensor::zeros(t.dims());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tape = Tape::new();
    let bound = model.bind_constants(&tape).unwrap();
    let x = tape.constant(random_patches(&mut rng, 2, 4)).unwrap();
    let f = backbone_forward(x, &model.config, &bound).unwrap();
    assert!(f.pooled.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn identical_patches_give_identical_features_and_params() {
    let model = Model::<f32>::init(ModelConfig::desk(), PredictorMode::Hyper).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = random_patches(&mut rng, 1, 16).cast::<f32>();
    assert_eq!(model.generate(&p).unwrap(), model.generate(&p).unwrap());
    assert_eq!(model.predict(&p).unwrap(), model.predict(&p).unwrap());
}

#[test]
fn generated_sizes_match_layer_arithmetic() {
    let model = Model::<f64>::init(tiny_config(NormMode::Group), PredictorMode::Hyper).unwrap();
    for (i, expect) in [36, 10, 3].into_iter().enumerate() {
        let w = model.params.get(&format!("hyper.branch{i}.fc.weight")).unwrap();
        assert_eq!(w.dims()[0], expect);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 1..=8 {
        let rows = model.generate(&random_patches(&mut rng, n, 4)).unwrap();
        assert_eq!(rows.len(), n);
        assert!(rows.iter().all(|r| r.len() == 49));
        assert_eq!(model.predict(&random_patches(&mut rng, n, 4)).unwrap().len(), n);
    }
}

#[test]
fn zeroed_hyper_network_generates_zeros() {
    let mut model = Model::<f64>::init(tiny_config(NormMode::Group), PredictorMode::Hyper).unwrap();
    for (name, t) in model.params.iter_mut() {
        if name.starts_with("hyper.") {
            *t = Tensor::zeros(t.dims());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_patches(&mut rng, 3, 4);
    assert!(model.generate(&x).unwrap().iter().flatten().all(|&v| v == 0.0));
    assert_eq!(model.predict(&x).unwrap(), vec![0.0; 3]);
}

fn generated<'t>(tape: &'t Tape<f64>, dims: &[usize], flat: &[f64], n: usize) -> GeneratedParams<'t, f64> {
    let mut layers = Vec::new();
    let mut off = 0;
    for w in dims.windows(2) {
        let (fi, fo) = (w[0], w[1]);
        let mut wv = Vec::new();
        let mut bv = Vec::new();
        for _ in 0..n {
            wv.extend_from_slice(&flat[off..off + fo * fi]);
            bv.extend_from_slice(&flat[off + fo * fi..off + fo * (fi + 1)]);
        }
        off += fo * (fi + 1);
        layers.push((
            tape.constant(Tensor::from_f64(&[n, fo, fi], &wv).unwrap()).unwrap(),
            tape.constant(Tensor::from_f64(&[n, fo], &bv).unwrap()).unwrap(),
        ));
    }
    GeneratedParams { layers }
}

#[test]
fn predictor_bias_passes_through() {
    let dims = [3, 2, 2, 1];
    let mut flat = vec![0.0; 8 + 6 + 3];
    *flat.last_mut().unwrap() = 2.5;
    let tape = Tape::new();
    let theta = generated(&tape, &dims, &flat, 2);
    let x = tape.constant(Tensor::from_f64(&[2, 3], &[1.0, -4.0, 9.0, 0.3, 0.2, 0.1]).unwrap()).unwrap();
    assert_eq!(predictor_forward(x, &theta).unwrap().value().data(), &[2.5, 2.5]);
}

#[test]
fn predictor_hand_evaluated_chain() {
    // 2 -> 2 -> 2 -> 1, all weights 0.5, zero biases, input [1, 1]:
    // layer 0: 0.5 + 0.5 = 1 per unit; layer 1: 1; output 0.5 + 0.5 = 1.
    let dims = [2, 2, 2, 1];
    let mut flat = Vec::new();
    for w in dims.windows(2) {
        flat.extend(std::iter::repeat_n(0.5, w[0] * w[1]));
        flat.extend(std::iter::repeat_n(0.0, w[1]));
    }
    let tape = Tape::new();
    let theta = generated(&tape, &dims, &flat, 1);
    let x = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap()).unwrap();
    assert_eq!(predictor_forward(x, &theta).unwrap().value().data(), &[1.0]);
}

#[test]
fn predictor_batch_mismatch_is_contract_error() {
    let dims = [2, 2, 2, 1];
    let flat = vec![0.1; 6 + 6 + 3];
    let tape = Tape::new();
    let theta = generated(&tape, &dims, &flat, 2);
    let x = tape.constant(Tensor::from_f64(&[3, 2], &[1.0; 6]).unwrap()).unwrap();
    assert!(matches!(predictor_forward(x, &theta), Err(Error::Contract(_))));
}

/// Splits a flat parameter vector variable into per-layer generated params
/// on the tape, so gradients reach the flat vector.
fn split_theta<'t>(v: Var<'t, f64>, dims: &[usize]) -> Result<GeneratedParams<'t, f64>> {
    let mut layers = Vec::new();
    let mut off = 0;
    for w in dims.windows(2) {
        let (fi, fo) = (w[0], w[1]);
        let wt = v.narrow(1, off, fo * fi)?.reshape(&[1, fo, fi])?;
        let bt = v.narrow(1, off + fo * fi, fo)?;
        off += fo * (fi + 1);
        layers.push((wt, bt));
    }
    Ok(GeneratedParams { layers })
}

#[test]
fn predictor_gradient_wrt_generated_params() {
    let dims = [3, 4, 2, 1];
    let total: usize = dims.windows(2).map(|w| w[1] * (w[0] + 1)).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let theta: Vec<f64> = (0..total).map(|_| rng.random_range(-1.0..1.0)).collect();
    let theta = Tensor::from_f64(&[1, total], &theta).unwrap();
    let x = Tensor::from_f64(&[1, 3], &[0.7, -0.3, 1.1]).unwrap();
    let r = finite_diff_check(
        |v| {
            let g = split_theta(v, &dims)?;
            predictor_forward(v.tape().constant(x.clone())?, &g)?.sum()
        },
        &theta,
        1e-3,
        1e-4,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn end_to_end_gradients_reach_every_parameter() {
    for mode in [PredictorMode::Hyper, PredictorMode::Fixed] {
        let model = Model::<f64>::init(tiny_config(NormMode::Group), mode).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tape = Tape::new();
        let bound = model.bind(&tape).unwrap();
        let x = tape.constant(random_patches(&mut rng, 8, 4)).unwrap();
        let out = hysnet_forward(x, &bound, &model.config, mode).unwrap();
        out.scores.sum().unwrap().backward().unwrap();
        if let Some(g) = &out.generated {
            assert!(g.layers.iter().all(|(w, b)| w.grad().is_some() && b.grad().is_some()));
        }
        for (name, g) in bound.grads().iter() {
            assert!(g.data().iter().any(|&v| v != 0.0), "{mode:?}: no gradient for {name}");
        }
    }
}

#[test]
fn different_patches_generate_different_params() {
    let model = Model::<f64>::init(tiny_config(NormMode::Group), PredictorMode::Hyper).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rows = model.generate(&random_patches(&mut rng, 2, 4)).unwrap();
    let dist: f64 = rows[0].iter().zip(&rows[1]).map(|(a, b)| (a - b).powi(2)).sum();
    assert!(dist > 0.0);
}

#[test]
fn per_sample_isolation() {
    let model = Model::<f64>::init(tiny_config(NormMode::Group), PredictorMode::Hyper).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_patches(&mut rng, 1, 4);
    let b = random_patches(&mut rng, 1, 4);
    let cat = |xs: &[&Tensor<f64>]| {
        let data: Vec<f64> = xs.iter().flat_map(|t| t.to_f64_vec()).collect();
        Tensor::from_f64(&[xs.len(), 1, 4, 4, 4], &data).unwrap()
    };
    let dup = model.predict(&cat(&[&a, &a])).unwrap();
    assert_eq!(dup[0], dup[1]);
    let ab = model.predict(&cat(&[&a, &b])).unwrap();
    let ba = model.predict(&cat(&[&b, &a])).unwrap();
    assert_eq!(ab, vec![ba[1], ba[0]]);
    assert_eq!(ab[0], model.predict(&a).unwrap()[0]);
}

#[test]
fn fixed_predictor_matches_adaptive_with_same_params() {
    let model = Model::<f64>::init(tiny_config(NormMode::Group), PredictorMode::Hyper).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_patches(&mut rng, 1, 4);
    let theta = model.generate(&x).unwrap().remove(0);
    let adaptive = model.predict(&x).unwrap()[0];

    let tape = Tape::new();
    let bound = model.bind_constants(&tape).unwrap();
    let feature = backbone_forward(tape.constant(x).unwrap(), &model.config, &bound).unwrap();
    let dims = &model.config.predictor_dims;
    let mut layers = Vec::new();
    let mut off = 0;
    for w in dims.windows(2) {
        let (fi, fo) = (w[0], w[1]);
        layers.push(LayerParams {
            weight: tape.constant(Tensor::from_f64(&[fo, fi], &theta[off..off + fo * fi]).unwrap()).unwrap(),
            bias: Some(tape.constant(Tensor::from_f64(&[fo], &theta[off + fo * fi..off + fo * (fi + 1)]).unwrap()).unwrap()),
        });
        off += fo * (fi + 1);
    }
    let fixed = fixed_predictor_forward(feature.pooled, &layers).unwrap().value().data()[0];
    assert!((fixed - adaptive).abs() < 1e-12);

    let zero: Vec<_> = dims
        .windows(2)
        .map(|w| LayerParams {
            weight: tape.constant(Tensor::zeros(&[w[1], w[0]])).unwrap(),
            bias: Some(tape.constant(Tensor::zeros(&[w[1]])).unwrap()),
        })
        .collect();
    assert_eq!(fixed_predictor_forward(feature.pooled, &zero).unwrap().value().data(), &[0.0]);
}

#[test]
fn fixed_predictor_gradients() {
    let dims = [3usize, 4, 2, 1];
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let w0: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w0 = Tensor::from_f64(&[4, 3], &w0).unwrap();
    let rest: Vec<Tensor<f64>> = vec![
        Tensor::from_f64(&[4], &[0.1, 0.2, -0.1, 0.3]).unwrap(),
        Tensor::from_f64(&[2, 4], &[0.5, -0.4, 0.3, 0.2, -0.6, 0.7, 0.1, 0.4]).unwrap(),
        Tensor::from_f64(&[2], &[0.05, 0.1]).unwrap(),
        Tensor::from_f64(&[1, 2], &[0.9, -0.8]).unwrap(),
        Tensor::from_f64(&[1], &[0.2]).unwrap(),
    ];
    let x = Tensor::from_f64(&[2, 3], &[0.7, -0.3, 1.1, 0.2, 0.9, -0.5]).unwrap();
    let _ = dims;
    let r = finite_diff_check(
        |w| {
            let t = w.tape();
            let c = |i: usize| t.constant(rest[i].clone());
            let layers = [
                LayerParams { weight: w, bias: Some(c(0)?) },
                LayerParams { weight: c(1)?, bias: Some(c(2)?) },
                LayerParams { weight: c(3)?, bias: Some(c(4)?) },
            ];
            fixed_predictor_forward(t.constant(x.clone())?, &layers)?.sum()
        },
        &w0,
        1e-3,
        1e-4,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn from_params_rejects_mismatch() {
    let hyper = Model::<f32>::init(ModelConfig::desk(), PredictorMode::Hyper).unwrap();
    assert!(Model::from_params(ModelConfig::desk(), PredictorMode::Hyper, hyper.params.clone()).is_ok());
    assert!(matches!(
        Model::from_params(ModelConfig::desk(), PredictorMode::Fixed, hyper.params.clone()),
        Err(Error::Format(_))
    ));
    let mut bad = hyper.params.clone();
    *bad.get_mut("backbone.stem.conv.weight").unwrap() = Tensor::zeros(&[1]);
    assert!(Model::from_params(ModelConfig::desk(), PredictorMode::Hyper, bad).is_err());
}

#[test]
fn init_is_seeded() {
    let a = Model::<f32>::init(ModelConfig::desk(), PredictorMode::Hyper).unwrap();
    let b = Model::<f32>::init(ModelConfig::desk(), PredictorMode::Hyper).unwrap();
    assert_eq!(a, b);
    let c = Model::<f32>::init(
        ModelConfig { init_seed: 1, ..ModelConfig::desk() },
        PredictorMode::Hyper,
    )
    .unwrap();
    assert_ne!(a.params, c.params);
}
