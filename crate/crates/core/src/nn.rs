//! Parameter-name based layer helpers shared by the models.

use rand::Rng;
use synweather_autograd::{Float, Graph, Init, ParamSet, Var};

pub(crate) fn p<T: Float>(g: &mut Graph<T>, ps: &ParamSet<T>, name: &str) -> Var {
    let id = ps.id(name).unwrap_or_else(|| panic!("missing parameter {name}"));
    g.param(ps, id)
}

pub(crate) fn linear<T: Float>(g: &mut Graph<T>, ps: &ParamSet<T>, x: Var, prefix: &str) -> Var {
    let w = p(g, ps, &format!("{prefix}.weight"));
    let b = p(g, ps, &format!("{prefix}.bias"));
    g.linear(x, w, Some(b))
}

pub(crate) fn conv<T: Float>(g: &mut Graph<T>, ps: &ParamSet<T>, x: Var, prefix: &str, stride: usize, pad: usize) -> Var {
    let w = p(g, ps, &format!("{prefix}.weight"));
    let b = p(g, ps, &format!("{prefix}.bias"));
    g.conv2d(x, w, Some(b), stride, pad)
}

pub(crate) fn group_norm<T: Float>(g: &mut Graph<T>, ps: &ParamSet<T>, x: Var, prefix: &str, groups: usize) -> Var {
    let gamma = p(g, ps, &format!("{prefix}.weight"));
    let beta = p(g, ps, &format!("{prefix}.bias"));
    g.group_norm(x, gamma, beta, groups, 1e-6)
}

pub(crate) fn layer_norm<T: Float>(g: &mut Graph<T>, ps: &ParamSet<T>, x: Var, prefix: &str) -> Var {
    let gamma = p(g, ps, &format!("{prefix}.weight"));
    let beta = p(g, ps, &format!("{prefix}.bias"));
    g.layer_norm(x, Some((gamma, beta)), 1e-6)
}

pub(crate) fn init_linear<T: Float, R: Rng + ?Sized>(ps: &mut ParamSet<T>, prefix: &str, fan_in: usize, fan_out: usize, weight: Init, rng: &mut R) {
    ps.init(format!("{prefix}.weight"), &[fan_in, fan_out], weight, rng);
    ps.init(format!("{prefix}.bias"), &[fan_out], Init::Zeros, rng);
}

pub(crate) fn init_xavier<T: Float, R: Rng + ?Sized>(ps: &mut ParamSet<T>, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    init_linear(ps, prefix, fan_in, fan_out, Init::XavierUniform { fan_in, fan_out }, rng);
}

pub(crate) fn init_conv<T: Float, R: Rng + ?Sized>(ps: &mut ParamSet<T>, prefix: &str, cin: usize, cout: usize, k: usize, gain: f64, rng: &mut R) {
    ps.init(format!("{prefix}.weight"), &[cout, cin, k, k], Init::KaimingNormal { fan_in: cin * k * k, gain }, rng);
    ps.init(format!("{prefix}.bias"), &[cout], Init::Zeros, rng);
}

pub(crate) fn init_norm<T: Float, R: Rng + ?Sized>(ps: &mut ParamSet<T>, prefix: &str, c: usize, rng: &mut R) {
    ps.init(format!("{prefix}.weight"), &[c], Init::Ones, rng);
    ps.init(format!("{prefix}.bias"), &[c], Init::Zeros, rng);
}
