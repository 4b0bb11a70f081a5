use cpgm::aae::{train_cpgm_aae, AaeConfig, AaeVariant, CpgmAae};
use cpgm::autodiff::{GradCheckOptions, Tensor};
use cpgm::checkpoint::AnyModel;
use cpgm::cnn::{train_cnn, Cnn};
use cpgm::data::{gen_glyphs, Glyph};
use cpgm::gradsuite::{aae_suite, primitive_suite, vae_suite};
use cpgm::model::{infer, OpenSetModel};
use cpgm::nn::LayerSpec;
use cpgm::vae::{train_cpgm_vae, CpgmVae, VaeConfig};
use cpgm::Error;

fn small_spec() -> LayerSpec {
    LayerSpec { input_shape: [1, 8, 8], channels: vec![3, 4], kernel: 3, stride: 2, padding: 1 }
}

fn small_vae(ladder: bool) -> VaeConfig {
    VaeConfig { latent_dim: 3, ladder, layer_spec: small_spec(), batch_size: 8, epochs: 2, seed: 5, ..VaeConfig::new(3) }
}

fn small_aae(variant: AaeVariant) -> AaeConfig {
    AaeConfig { latent_dim: 3, layer_spec: small_spec(), batch_size: 8, epochs: 2, seed: 5, ..AaeConfig::new(3, variant) }
}

fn tiny_data() -> cpgm::data::Dataset {
    let ds = gen_glyphs(&Glyph::ALL[..3], 6, 16, 2).unwrap();
    let ds = cpgm::data::downscale(&ds, 8, 8).unwrap();
    let labels = ds.labels().iter().map(|&l| l).collect::<Vec<_>>();
    cpgm::data::Dataset::new(ds.images().clone(), labels, None).unwrap()
}

#[test]
fn primitive_gradients() {
    let entries = primitive_suite(4).unwrap();
    assert_eq!(entries.len(), 9);
    for e in entries {
        assert!(e.report.passes(1e-4) && e.report.flagged.is_empty(), "{} max rel error {}", e.name, e.report.max_rel_error);
    }
}

#[test]
fn vae_objective_gradients_small_and_default() {
    let opts = GradCheckOptions { coords_per_param: 6, ..Default::default() };
    for cfg in [small_vae(true), small_vae(false), VaeConfig::new(4)] {
        for e in vae_suite(&cfg, 6, opts).unwrap() {
            assert!(e.report.passes(1e-4), "{} max rel error {}", e.name, e.report.max_rel_error);
        }
    }
}

#[test]
fn aae_phase_gradients_every_variant() {
    let opts = GradCheckOptions { coords_per_param: 6, ..Default::default() };
    for v in [AaeVariant::Cpgm, AaeVariant::Variant1, AaeVariant::Variant2] {
        for cfg in [small_aae(v), AaeConfig::new(4, v)] {
            let entries = aae_suite(&cfg, 6, opts).unwrap();
            assert_eq!(entries.len(), 5);
            for e in entries {
                assert!(e.report.passes(1e-4), "{} max rel error {}", e.name, e.report.max_rel_error);
            }
        }
    }
}

#[test]
fn center_objective_has_gradient_inside_hinge() {
    let cfg = small_aae(AaeVariant::Cpgm);
    let mut m = CpgmAae::new(cfg.clone()).unwrap();
    let shrink = (cfg.eta * 3.0 / (16.0 * 3.0)).sqrt();
    m.params.get_mut("centers.weight").unwrap().data_mut().iter_mut().for_each(|v| *v *= shrink);
    let data = tiny_data();
    let x = data.batch(&(0..9).collect::<Vec<_>>()).unwrap();
    let y: Vec<usize> = data.labels()[..9].iter().map(|&l| l as usize).collect();
    let mut tape = cpgm::autodiff::Tape::new();
    let (obj, dist) = {
        let mut f = cpgm::nn::Forward::train(&mut tape, &m.params);
        m.center_objective(&mut f, &x, &y).unwrap()
    };
    assert!(dist > 0.0);
    let mut params = m.params.clone();
    tape.backward(obj, &mut params).unwrap();
    let g = params.get("centers.weight").unwrap().grad().unwrap();
    assert!(g.iter().any(|v| v.abs() > 1e-6));
}

fn batch_of(data: &cpgm::data::Dataset) -> Tensor {
    data.batch(&(0..data.len()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn detector_latent_follows_class_means_except_in_variant2() {
    let x = batch_of(&tiny_data());
    for (v, moves) in [(AaeVariant::Cpgm, true), (AaeVariant::Variant1, false), (AaeVariant::Variant2, false)] {
        let mut m = CpgmAae::new(small_aae(v)).unwrap();
        let before = m.infer_batch(&x, true).unwrap();
        m.params.get_mut("centers.weight").unwrap().data_mut().iter_mut().for_each(|c| *c += 0.5);
        let after = m.infer_batch(&x, true).unwrap();
        assert_eq!(before.latent != after.latent, moves, "{v:?}");
        // The decoder sees the composed latent whenever y exists.
        let recon_moves = v != AaeVariant::Variant1;
        assert_eq!(before.recon_error != after.recon_error, recon_moves, "{v:?}");
    }
}

#[test]
fn vae_latent_is_the_top_posterior_mean() {
    let m = CpgmVae::new(small_vae(true)).unwrap();
    let x = batch_of(&tiny_data());
    let a = m.infer_batch(&x, false).unwrap();
    let b = m.infer_batch(&x, true).unwrap();
    assert_eq!(a.latent, b.latent);
    assert!(a.recon_error.is_none() && b.recon_error.is_some());
    assert_eq!(m.classify(&a.latent).unwrap(), a.scores);
}

#[test]
fn vae_loss_rejects_beta_outside_unit_interval() {
    let m = CpgmVae::new(small_vae(true)).unwrap();
    let x = batch_of(&tiny_data());
    let y: Vec<usize> = (0..x.shape()[0]).map(|i| i % 3).collect();
    let mut tape = cpgm::autodiff::Tape::new();
    let mut f = cpgm::nn::Forward::train(&mut tape, &m.params);
    let mut r = cpgm::rng::stream(0, "t", 0);
    assert!(matches!(m.loss(&mut f, &x, &y, 1.5, &mut r), Err(Error::Contract(_))));
}

#[test]
fn beta_schedule_is_linear() {
    let mut c = small_vae(true);
    c.epochs = 5;
    assert_eq!((0..5).map(|e| c.beta(e)).collect::<Vec<_>>(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    c.epochs = 1;
    assert_eq!(c.beta(0), 1.0);
}

#[test]
fn configs_reject_bad_fields_by_name() {
    let e = serde_json::from_str::<VaeConfig>(r#"{"latent_dim": 4}"#).unwrap_err();
    assert!(e.to_string().contains("num_classes"));
    let bad = VaeConfig { latent_dim: 0, ..small_vae(true) };
    assert!(matches!(CpgmVae::new(bad), Err(Error::Config { field, .. }) if field == "latent_dim"));
    let bad = AaeConfig { eta: -1.0, ..small_aae(AaeVariant::Cpgm) };
    assert!(matches!(CpgmAae::new(bad), Err(Error::Config { field, .. }) if field == "eta"));
}

#[test]
fn checkpoints_round_trip_and_are_deterministic() {
    let data = tiny_data();
    let x = batch_of(&data);
    let models: Vec<(AnyModel, AnyModel)> = vec![
        (AnyModel::Vae(train_cpgm_vae(&data, &small_vae(true)).unwrap().0), AnyModel::Vae(train_cpgm_vae(&data, &small_vae(true)).unwrap().0)),
        (AnyModel::Vae(train_cpgm_vae(&data, &small_vae(false)).unwrap().0), AnyModel::Vae(train_cpgm_vae(&data, &small_vae(false)).unwrap().0)),
        (AnyModel::Cnn(train_cnn(&data, &small_vae(true)).unwrap().0), AnyModel::Cnn(train_cnn(&data, &small_vae(true)).unwrap().0)),
        (
            AnyModel::Aae(train_cpgm_aae(&data, &small_aae(AaeVariant::Variant1)).unwrap().0),
            AnyModel::Aae(train_cpgm_aae(&data, &small_aae(AaeVariant::Variant1)).unwrap().0),
        ),
        (
            AnyModel::Aae(train_cpgm_aae(&data, &small_aae(AaeVariant::Variant2)).unwrap().0),
            AnyModel::Aae(train_cpgm_aae(&data, &small_aae(AaeVariant::Variant2)).unwrap().0),
        ),
    ];
    for (a, b) in &models {
        let bytes = a.to_bytes().unwrap();
        assert_eq!(bytes, b.to_bytes().unwrap(), "{:?} training is not deterministic", a.kind());
        assert_eq!(&bytes[..8], b"CPGM0001");
        let back = AnyModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.kind(), a.kind());
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.as_model().infer_batch(&x, true).unwrap(), a.as_model().infer_batch(&x, true).unwrap());
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = AnyModel::Cnn(Cnn::new(small_vae(true)).unwrap()).to_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(AnyModel::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
    assert!(matches!(AnyModel::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Length(_))));
    let mut tag = bytes.clone();
    tag[8] = 9;
    assert!(matches!(AnyModel::from_bytes(&tag), Err(Error::Format { offset: 8, .. })));
    let mut extra = bytes;
    extra.push(0);
    assert!(matches!(AnyModel::from_bytes(&extra), Err(Error::Format { .. })));
}

#[test]
fn cnn_has_no_decoder() {
    let m = Cnn::new(small_vae(true)).unwrap();
    let out = infer(&m, &tiny_data(), true).unwrap();
    assert!(out.recon_error.is_none());
    assert!(!m.has_decoder());
}

#[test]
fn training_traces_have_one_row_per_epoch() {
    let data = tiny_data();
    let (_, t) = train_cpgm_vae(&data, &small_vae(true)).unwrap();
    assert_eq!(t.len(), 2);
    assert!(t.iter().all(|e| e.total.is_finite() && e.kl >= 0.0));
    let (_, t) = train_cpgm_aae(&data, &small_aae(AaeVariant::Cpgm)).unwrap();
    assert_eq!(t.len(), 2);
}
