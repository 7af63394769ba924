// The oracles below index on purpose to mirror the scalar formulas.
#![allow(clippy::needless_range_loop)]

use atc_core::caches::{
    adapt_textual_cache, build_textual_cache, build_visual_cache, effective_visual_cache, VisualMode,
};
use atc_core::dataio::{synth_dataset, zero_shot_predict, EmbeddingSet, Role, SynthConfig};
use atc_core::model::{branch_visual, Activation, AtcModel, ModelConfig, Sample, TextMode};
use atc_core::numerics::{argmax, dot, normalize_in_place, Matrix, Rng, NORM_EPS};

fn unit_rows(rng: &mut Rng, rows: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, dim);
    for r in 0..rows {
        let row = m.row_mut(r);
        row.iter_mut().for_each(|v| *v = rng.normal());
        normalize_in_place(row, NORM_EPS);
    }
    m
}

fn unit_vec(rng: &mut Rng, dim: usize) -> Vec<f64> {
    unit_rows(rng, 1, dim).into_vec()
}

/// Text rows plus `shots` class-major support rows per class.
fn instance(rng: &mut Rng, classes: usize, shots: usize, dim: usize) -> (EmbeddingSet, EmbeddingSet) {
    let names: Vec<String> = (0..classes).map(|i| format!("c{i}")).collect();
    let text = EmbeddingSet::new(
        unit_rows(rng, classes, dim),
        (0..classes).collect(),
        names.clone(),
        Role::Text,
    )
    .unwrap();
    let labels = (0..classes).flat_map(|c| std::iter::repeat_n(c, shots)).collect();
    let support = EmbeddingSet::new(unit_rows(rng, classes * shots, dim), labels, names, Role::Support).unwrap();
    (text, support)
}

fn small_config(renorm: bool, activation: Activation) -> ModelConfig {
    ModelConfig {
        renormalize_text: renorm,
        renormalize_visual: renorm,
        activation,
        chunks: 2,
        hidden: 4,
        ..ModelConfig::default()
    }
}

/// Random non-zero output head so the network actually produces a bias.
fn randomize_head(model: &mut AtcModel, rng: &mut Rng) {
    for v in model
        .net
        .out_w
        .as_mut_slice()
        .iter_mut()
        .chain(model.net.out_b.iter_mut())
    {
        *v = rng.uniform(-0.5, 0.5);
    }
}

#[test]
fn uniform_bias_shifts_every_class_equally_without_renormalization() {
    let mut rng = Rng::new(1);
    for _ in 0..20 {
        let (text, _) = instance(&mut rng, 5, 1, 8);
        let cache = build_textual_cache(&text, false).unwrap();
        let f = unit_vec(&mut rng, 8);
        let s: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let base = cache.p_txt().matvec(&f).unwrap();
        let shifted = adapt_textual_cache(&cache, &s).unwrap().matvec(&f).unwrap();
        let delta: Vec<f64> = shifted.iter().zip(&base).map(|(a, b)| a - b).collect();
        let expected = dot(&f, &s);
        for d in &delta {
            assert!((d - expected).abs() <= 1e-10, "{d} vs {expected}");
        }
        assert_eq!(argmax(&base), argmax(&shifted));
    }
}

#[test]
fn renormalization_lets_the_bias_change_the_prediction() {
    let text = EmbeddingSet::new(
        Matrix::identity(2),
        vec![0, 1],
        vec!["a".into(), "b".into()],
        Role::Text,
    )
    .unwrap();
    let f = [0.8, 0.6];
    let s = [-2.0, 0.0];
    let off = build_textual_cache(&text, false).unwrap();
    let on = build_textual_cache(&text, true).unwrap();
    let f2_off = adapt_textual_cache(&off, &s).unwrap().matvec(&f).unwrap();
    let f2_on = adapt_textual_cache(&on, &s).unwrap().matvec(&f).unwrap();
    // rows become (-1, 0) and (-2, 1); only the second shrinks under re-normalization
    assert!((f2_off[0] + 0.8).abs() < 1e-15 && (f2_off[1] + 1.0).abs() < 1e-15);
    assert!((f2_on[0] + 0.8).abs() < 1e-15);
    assert!((f2_on[1] + 1.0 / 5f64.sqrt()).abs() < 1e-15);
    assert_eq!(argmax(&[0.8, 0.6]), 0);
    assert_eq!(argmax(&f2_off), 0);
    assert_eq!(argmax(&f2_on), 1);
}

/// `f1[c] = sum_j phi(f . key_j) [label_j == c]` with keys rebuilt by hand.
fn f1_oracle(
    f: &[f64],
    p_img: &Matrix,
    biases: &Matrix,
    labels: &[usize],
    classes: usize,
    act: Activation,
) -> Vec<f64> {
    let mut out = vec![0.0; classes];
    for j in 0..p_img.rows() {
        let mut key: Vec<f64> = (0..p_img.cols()).map(|k| p_img.get(j, k) + biases.get(j, k)).collect();
        let n = key.iter().map(|v| v * v).sum::<f64>().sqrt();
        key.iter_mut().for_each(|v| *v /= n);
        let a: f64 = (0..key.len()).map(|k| f[k] * key[k]).sum();
        let phi = match act {
            Activation::Linear => a,
            Activation::TipExponential { sharpness } => (-sharpness * (1.0 - a)).exp(),
        };
        for c in 0..classes {
            if labels[j] == c {
                out[c] += phi;
            }
        }
    }
    out
}

#[test]
fn visual_branch_matches_double_loop_oracle() {
    let mut rng = Rng::new(2);
    for trial in 0..100 {
        let classes = 1 + trial % 5;
        let shots = 1 + trial % 4;
        let dim = 2 + trial % 15;
        let (_, support) = instance(&mut rng, classes, shots, dim);
        let act = if trial % 2 == 0 {
            Activation::Linear
        } else {
            Activation::TipExponential { sharpness: 3.0 }
        };
        let mut cache = build_visual_cache(&support, classes, VisualMode::Biases, true).unwrap();
        let biases = Matrix::from_vec(
            classes * shots,
            dim,
            (0..classes * shots * dim).map(|_| rng.uniform(-0.3, 0.3)).collect(),
        )
        .unwrap();
        cache.set_trainable(biases.clone()).unwrap();
        let f = unit_vec(&mut rng, dim);
        let got = branch_visual(&f, &cache, act).unwrap();
        let want = f1_oracle(&f, support.features(), &biases, support.labels(), classes, act);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12, "trial {trial}: {a} vs {b}");
        }
    }
}

#[test]
fn linear_keys_start_equal_to_fixed_keys() {
    let mut rng = Rng::new(3);
    let (_, support) = instance(&mut rng, 4, 3, 6);
    let fixed = build_visual_cache(&support, 4, VisualMode::Fixed, true).unwrap();
    let linear = build_visual_cache(&support, 4, VisualMode::Linear, true).unwrap();
    assert!(matches!(
        effective_visual_cache(&linear),
        Err(atc_core::Error::Contract(_))
    ));
    for act in [Activation::Linear, Activation::TipExponential { sharpness: 5.0 }] {
        let f = unit_vec(&mut rng, 6);
        let a = branch_visual(&f, &fixed, act).unwrap();
        let b = branch_visual(&f, &linear, act).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn zero_biases_reproduce_the_stored_rows_exactly() {
    let mut rng = Rng::new(4);
    let (_, support) = instance(&mut rng, 3, 2, 5);
    let cache = build_visual_cache(&support, 3, VisualMode::Biases, true).unwrap();
    let eff = effective_visual_cache(&cache).unwrap();
    assert!(eff.keys.bitwise_eq(support.features()));
    assert_eq!(eff.zero_rows, 0);
}

#[test]
fn untrained_text_only_model_is_the_zero_shot_classifier() {
    let data = synth_dataset(&SynthConfig::default()).unwrap();
    let cfg = ModelConfig {
        alpha: 0.0,
        beta: 1.0,
        ..ModelConfig::default()
    };
    let model = AtcModel::new(&data.text, &data.support, &cfg, &mut Rng::new(0)).unwrap();
    let prepared = model.prepare();
    for row in data.query.features().iter_rows() {
        assert_eq!(
            prepared.predict_class(row).unwrap(),
            zero_shot_predict(&data.text, row).unwrap()
        );
    }
}

#[test]
fn logit_scale_does_not_change_predictions() {
    let mut rng = Rng::new(5);
    let (text, support) = instance(&mut rng, 4, 2, 8);
    let mut model = AtcModel::new(&text, &support, &small_config(true, Activation::Linear), &mut rng).unwrap();
    randomize_head(&mut model, &mut rng);
    let mut scaled = model.clone();
    scaled.logit_scale = 1.0;
    for _ in 0..50 {
        let f = unit_vec(&mut rng, 8);
        let a = model.predict(&f).unwrap();
        let b = scaled.predict(&f).unwrap();
        assert_eq!(a.predicted_class, b.predicted_class);
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert!((x - 100.0 * y).abs() <= 1e-10 * (1.0 + x.abs()));
        }
    }
}

fn grads_for(model: &AtcModel, rng: &mut Rng, n: usize) -> atc_core::model::AtcGrads {
    let queries: Vec<Vec<f64>> = (0..n).map(|_| unit_vec(rng, model.dim())).collect();
    let samples: Vec<Sample<'_>> = queries
        .iter()
        .enumerate()
        .map(|(i, q)| Sample {
            query: q,
            target: i % model.num_classes(),
            exclude: None,
        })
        .collect();
    model.loss_and_grads(&samples).unwrap().1
}

#[test]
fn zero_alpha_gives_zero_visual_gradient() {
    let mut rng = Rng::new(6);
    let (text, support) = instance(&mut rng, 3, 2, 8);
    let cfg = ModelConfig {
        alpha: 0.0,
        ..small_config(true, Activation::Linear)
    };
    let mut model = AtcModel::new(&text, &support, &cfg, &mut rng).unwrap();
    randomize_head(&mut model, &mut rng);
    let grads = grads_for(&model, &mut rng, 6);
    assert!(grads.visual.unwrap().as_slice().iter().all(|&g| g == 0.0));
    assert!(grads
        .net
        .unwrap()
        .tensors()
        .iter()
        .any(|(_, _, g)| g.iter().any(|&v| v != 0.0)));
}

#[test]
fn without_renormalization_the_network_gets_no_gradient() {
    let mut rng = Rng::new(7);
    for _ in 0..5 {
        let (text, support) = instance(&mut rng, 4, 2, 8);
        let mut model = AtcModel::new(&text, &support, &small_config(false, Activation::Linear), &mut rng).unwrap();
        randomize_head(&mut model, &mut rng);
        let grads = grads_for(&model, &mut rng, 8);
        for (name, _, g) in grads.net.unwrap().tensors() {
            let worst = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(worst <= 1e-10, "{name}: {worst}");
        }
    }
}

#[test]
fn fixed_text_mode_has_no_network_parameters() {
    let mut rng = Rng::new(8);
    let (text, support) = instance(&mut rng, 3, 2, 8);
    let cfg = ModelConfig {
        text_mode: TextMode::Fixed,
        visual_mode: VisualMode::Fixed,
        ..small_config(true, Activation::Linear)
    };
    let model = AtcModel::new(&text, &support, &cfg, &mut rng).unwrap();
    assert!(model.trainable_tensors().is_empty());
    assert!(model.flat_trainables().is_empty());
}

#[test]
fn excluding_a_row_equals_dropping_it_from_the_cache() {
    let mut rng = Rng::new(9);
    let (text, support) = instance(&mut rng, 3, 2, 8);
    let cfg = small_config(true, Activation::TipExponential { sharpness: 4.0 });
    let model = AtcModel::new(&text, &support, &cfg, &mut Rng::new(1)).unwrap();
    for drop in 0..support.len() {
        let keep: Vec<usize> = (0..support.len()).filter(|&i| i != drop).collect();
        let reduced_support = support.subset(&keep, Role::Support).unwrap();
        let reduced = AtcModel::new(&text, &reduced_support, &cfg, &mut Rng::new(1)).unwrap();
        let f = unit_vec(&mut rng, 8);
        let a = model.prepare().logits(&f, Some(drop)).unwrap();
        let b = reduced.prepare().logits(&f, None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn flat_parameters_and_tensor_export_round_trip() {
    let mut rng = Rng::new(10);
    let (text, support) = instance(&mut rng, 3, 2, 8);
    let mut model = AtcModel::new(&text, &support, &small_config(true, Activation::Linear), &mut rng).unwrap();
    let theta: Vec<f64> = (0..model.flat_trainables().len())
        .map(|_| rng.uniform(-1.0, 1.0))
        .collect();
    model.set_flat_trainables(&theta).unwrap();
    assert_eq!(model.flat_trainables(), theta);
    assert!(model.set_flat_trainables(&theta[1..]).is_err());

    let exported = model.export_tensors();
    let mut fresh = AtcModel::new(
        &text,
        &support,
        &small_config(true, Activation::Linear),
        &mut Rng::new(99),
    )
    .unwrap();
    fresh.import_tensors(&exported).unwrap();
    assert_eq!(fresh.flat_trainables(), theta);
}

#[test]
fn empty_batch_is_rejected() {
    let mut rng = Rng::new(11);
    let (text, support) = instance(&mut rng, 2, 1, 4);
    let model = AtcModel::new(&text, &support, &small_config(true, Activation::Linear), &mut rng).unwrap();
    assert!(matches!(model.loss_and_grads(&[]), Err(atc_core::Error::Validation(_))));
}
