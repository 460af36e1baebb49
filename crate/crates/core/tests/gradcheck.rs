//! Finite-difference checks of the micro motion encoders and decoder.

mod common;

use hivae_core::autograd::Graph;
use hivae_core::decoder::Stream;
use hivae_core::model::{HiVae, ModelConfig};
use hivae_core::motion::{DETAIL_NS, GLOBAL_NS};
use hivae_core::params::ParamStore;
use hivae_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn micro(seed: u64) -> (HiVae, ParamStore<f64>, ChaCha8Rng) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = HiVae::new(&mut store, ModelConfig::micro(), &mut r).unwrap();
    common::randomize(&mut store, 0.3, &mut r);
    (model, store, r)
}

fn assert_passes(rep: &common::GradReport) {
    assert!(rep.passes(), "{}/{} within tolerance, worst {:.2e} at {}", rep.within, rep.checked, rep.worst, rep.worst_name);
}

#[test]
fn global_encoder_gradients() {
    let (model, mut store, mut r) = micro(40);
    let [c, f, h, w] = model.cfg.latent_grid().unwrap();
    let z = Tensor::<f64>::randn(&[2, c, f, h, w], &mut r);
    let rep = common::grad_check(&mut store, GLOBAL_NS, 1e-4, 1e-5, &|g: &mut Graph<f64>| {
        let p = model.global.forward(g, &z, None).unwrap();
        let a = common::weighted_sum(g, p.mu);
        let b = common::weighted_sum(g, p.logvar);
        g.add(a, b)
    });
    assert_eq!(rep.checked, store.numel(GLOBAL_NS));
    assert_passes(&rep);
}

#[test]
fn detailed_encoder_gradients() {
    let (model, mut store, mut r) = micro(41);
    let [c, f, h, w] = model.cfg.latent_grid().unwrap();
    let z = Tensor::<f64>::randn(&[2, c, f, h, w], &mut r);
    let rep = common::grad_check(&mut store, DETAIL_NS, 1e-4, 1e-5, &|g: &mut Graph<f64>| {
        let p = model.detail.forward(g, &z).unwrap();
        let a = common::weighted_sum(g, p.mu);
        let b = common::weighted_sum(g, p.logvar);
        g.add(a, b)
    });
    assert_passes(&rep);
}

#[test]
fn decoder_gradients_with_values_and_null_streams() {
    let (model, mut store, mut r) = micro(42);
    let [c, f, h, w] = model.cfg.latent_grid().unwrap();
    let interp = Tensor::<f64>::randn(&[2, c, f, h, w], &mut r);
    let content = Tensor::<f64>::randn(&[2, c, h, w], &mut r);
    let gs = model.cfg.global.latent_shape();
    let u_g = Tensor::<f64>::randn(&[2, gs[0], gs[1], gs[2]], &mut r);
    let rep = common::grad_check(&mut store, "decoder.", 1e-4, 1e-5, &|g: &mut Graph<f64>| {
        let v = model.decoder.forward(g, &interp, Some(&content), Stream::Value(&u_g), Stream::Null, &[0.2, 0.9]).unwrap();
        common::weighted_sum(g, v)
    });
    assert_passes(&rep);
}
