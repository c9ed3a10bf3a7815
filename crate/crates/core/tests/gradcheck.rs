//! Autodiff gradients of the training objectives against central finite differences in f64.

mod common;

#[test]
fn autoencoder_objective_gradients() {
    let r = common::autoencoder_gradients(24, 11);
    assert!(r.failures.is_empty(), "{:#?}", r.failures);
    assert_eq!(r.checked, 24);
}

#[test]
fn diffusion_objective_gradients() {
    let r = common::denoiser_gradients(24, 12);
    assert!(r.failures.is_empty(), "{:#?}", r.failures);
    assert_eq!(r.checked, 24);
}
