//! Finite-difference checks of every training objective against the tape.

use rand::Rng;

use crate::aae::{in_phase, phase, AaeConfig, AaeVariant, CpgmAae};
use crate::autodiff::gradcheck::{finite_difference_check, finite_difference_check_where, GradCheckOptions, GradCheckReport};
use crate::autodiff::{Tensor, Var};
use crate::error::Result;
use crate::nn::Forward;
use crate::rng;
use crate::vae::{CpgmVae, VaeConfig};

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

fn batch(shape: [usize; 3], n: usize, k: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut r = rng::stream(seed, "gradsuite", 0);
    let x = Tensor::from_fn(&[n, shape[0], shape[1], shape[2]], |_| r.random::<f64>());
    (x, (0..n).map(|i| i % k).collect())
}

/// The full VAE objective at `β = 0.5`, with a fixed reparameterization seed.
pub fn vae_suite(config: &VaeConfig, n: usize, opts: GradCheckOptions) -> Result<Vec<SuiteEntry>> {
    let model = CpgmVae::new(config.clone())?;
    let (x, y) = batch(config.layer_spec.input_shape, n, config.num_classes, config.seed);
    let report = finite_difference_check(
        |p, tape| {
            let mut r = rng::stream(config.seed, "gradsuite.reparam", 0);
            let mut f = Forward::train(tape, p);
            Ok(model.loss(&mut f, &x, &y, 0.5, &mut r)?.total)
        },
        &model.params,
        opts,
    )?;
    let name = if config.ladder { "vae.total" } else { "cvae.total" };
    Ok(vec![SuiteEntry { name: name.into(), report }])
}

/// Each AAE phase loss over the parameters that phase trains.
///
/// The model is first moved off its initialisation: the zero-initialised
/// discriminator head gets random weights (otherwise `D` is constant) and the
/// centers are shrunk inside the hinge radius (otherwise every pair is
/// clipped and the center objective is flat).
pub fn aae_suite(config: &AaeConfig, n: usize, opts: GradCheckOptions) -> Result<Vec<SuiteEntry>> {
    let mut model = CpgmAae::new(config.clone())?;
    let mut r = rng::stream(config.seed, "gradsuite.perturb", 0);
    for v in model.params.get_mut("disc.out.weight")?.data_mut() {
        *v = r.random_range(-0.5..0.5);
    }
    // He-uniform rows sit about 4J/K apart in squared distance; aim for η/4.
    let shrink = (config.eta * config.num_classes as f64 / (16.0 * config.latent_dim as f64)).sqrt();
    for v in model.params.get_mut("centers.weight")?.data_mut() {
        *v *= shrink;
    }
    let (x, y) = batch(config.layer_spec.input_shape, n, config.num_classes, config.seed);
    let prefix = match config.variant {
        AaeVariant::Cpgm => "aae",
        AaeVariant::Variant1 => "variant1",
        AaeVariant::Variant2 => "variant2",
    };
    let prior = || rng::stream(config.seed, "gradsuite.prior", 0);
    let m = &model;
    let check = |sel: &'static [&'static str], f: &dyn Fn(&mut Forward<'_>) -> Result<Var>| {
        finite_difference_check_where(|p, t| f(&mut Forward::train(t, p)), &m.params, opts, in_phase(sel))
    };
    Ok(vec![
        SuiteEntry { name: format!("{prefix}.recon"), report: check(phase::RECON, &|f| m.recon_loss(f, &x))? },
        SuiteEntry { name: format!("{prefix}.disc"), report: check(phase::DISC, &|f| m.disc_loss(f, &x, &y, &mut prior()))? },
        SuiteEntry { name: format!("{prefix}.gen"), report: check(phase::GEN, &|f| m.gen_loss(f, &x, &y, &mut prior()))? },
        SuiteEntry { name: format!("{prefix}.cls"), report: check(phase::CLS, &|f| Ok(m.cls_loss(f, &x, &y)?.0))? },
        SuiteEntry { name: format!("{prefix}.center"), report: check(phase::CENTER, &|f| Ok(m.center_objective(f, &x, &y)?.0))? },
    ])
}

fn rand_param(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// `Σ w ⊙ v` with fixed random weights, so every output coordinate reaches
/// the checked scalar.
fn weighted_sum(tape: &mut crate::autodiff::Tape, v: Var, seed: u64) -> Result<Var> {
    let mut r = rng::stream(seed, "gradsuite.weights", 0);
    let w = tape.constant(&rand_param(&mut r, tape.shape(v), -1.0, 1.0));
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

/// Every differentiable primitive of the tape and the Gaussian helpers, each
/// checked on every coordinate of small random operands.
pub fn primitive_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    use crate::autodiff::{BnMode, ParameterSet, Tape};
    use crate::gaussian::{kl_conditional_tape, kl_gaussian_tape, merge_gaussian_tape};

    type LossFn = Box<dyn Fn(&ParameterSet, &mut Tape) -> Result<Var>>;
    let mut r = rng::stream(seed, "gradsuite.primitives", 0);
    let mut cases: Vec<(&str, Vec<(&str, Tensor)>, LossFn)> = Vec::new();

    cases.push((
        "conv2d",
        vec![("x", rand_param(&mut r, &[2, 2, 5, 5], -1.0, 1.0)), ("w", rand_param(&mut r, &[3, 2, 3, 3], -1.0, 1.0)), ("b", rand_param(&mut r, &[3], -1.0, 1.0))],
        Box::new(|p, t| {
            let (x, w, b) = (t.param(p, "x")?, t.param(p, "w")?, t.param(p, "b")?);
            let y = t.conv2d(x, w, Some(b), 2, 1)?;
            weighted_sum(t, y, 1)
        }),
    ));
    cases.push((
        "conv_transpose2d",
        vec![("x", rand_param(&mut r, &[2, 3, 3, 3], -1.0, 1.0)), ("w", rand_param(&mut r, &[3, 2, 3, 3], -1.0, 1.0)), ("b", rand_param(&mut r, &[2], -1.0, 1.0))],
        Box::new(|p, t| {
            let (x, w, b) = (t.param(p, "x")?, t.param(p, "w")?, t.param(p, "b")?);
            let y = t.conv_transpose2d(x, w, Some(b), 2, 1, 1)?;
            weighted_sum(t, y, 2)
        }),
    ));
    cases.push((
        "linear_matmul",
        vec![("x", rand_param(&mut r, &[3, 4], -1.0, 1.0)), ("w", rand_param(&mut r, &[2, 4], -1.0, 1.0)), ("b", rand_param(&mut r, &[2], -1.0, 1.0)), ("m", rand_param(&mut r, &[2, 3], -1.0, 1.0))],
        Box::new(|p, t| {
            let (x, w, b, m) = (t.param(p, "x")?, t.param(p, "w")?, t.param(p, "b")?, t.param(p, "m")?);
            let y = t.linear(x, w, Some(b))?;
            let z = t.matmul(y, m)?;
            weighted_sum(t, z, 3)
        }),
    ));
    cases.push((
        "activations",
        vec![("x", rand_param(&mut r, &[3, 2, 2, 2], -2.0, 2.0)), ("s", rand_param(&mut r, &[2], 0.05, 0.5)), ("s1", rand_param(&mut r, &[1], 0.05, 0.5))],
        Box::new(|p, t| {
            let (x, s, s1) = (t.param(p, "x")?, t.param(p, "s")?, t.param(p, "s1")?);
            let a = t.prelu(x, s)?;
            let b = t.prelu(a, s1)?;
            let c = t.softplus(b);
            let d = t.sigmoid(c);
            weighted_sum(t, d, 4)
        }),
    ));
    cases.push((
        "softmax_log_softmax",
        vec![("x", rand_param(&mut r, &[3, 4], -2.0, 2.0))],
        Box::new(|p, t| {
            let x = t.param(p, "x")?;
            let a = t.softmax(x)?;
            let b = t.log_softmax(x)?;
            let a = weighted_sum(t, a, 5)?;
            let b = weighted_sum(t, b, 6)?;
            let g = t.gather(x, &[0, 3, 1])?;
            let g = t.sum(g);
            let ab = t.add(a, b)?;
            t.add(ab, g)
        }),
    ));
    cases.push((
        "batchnorm",
        vec![
            ("x", rand_param(&mut r, &[3, 2, 2, 2], -1.0, 1.0)),
            ("g", rand_param(&mut r, &[2], 0.5, 1.5)),
            ("b", rand_param(&mut r, &[2], -0.5, 0.5)),
            ("x2", rand_param(&mut r, &[4, 3], -1.0, 1.0)),
        ],
        Box::new(|p, t| {
            let (x, g, b) = (t.param(p, "x")?, t.param(p, "g")?, t.param(p, "b")?);
            let (y, _) = t.batchnorm(x, g, b, BnMode::Train)?;
            let (mean, var) = ([0.2, -0.1], [0.5, 2.0]);
            let (z, _) = t.batchnorm(y, g, b, BnMode::Eval { mean: &mean, var: &var })?;
            let x2 = t.param(p, "x2")?;
            let g3 = t.constant(&Tensor::new(vec![3], vec![1.0, 0.5, 2.0])?);
            let b3 = t.constant(&Tensor::zeros(&[3]));
            let (y2, _) = t.batchnorm(x2, g3, b3, BnMode::Train)?;
            let a = weighted_sum(t, z, 7)?;
            let c = weighted_sum(t, y2, 8)?;
            t.add(a, c)
        }),
    ));
    cases.push((
        "elementwise",
        vec![("a", rand_param(&mut r, &[2, 3], 0.5, 2.0)), ("b", rand_param(&mut r, &[2, 3], 0.5, 2.0)), ("c", rand_param(&mut r, &[2, 2], -1.0, 1.0))],
        Box::new(|p, t| {
            let (a, b, c) = (t.param(p, "a")?, t.param(p, "b")?, t.param(p, "c")?);
            let q = t.div(a, b)?;
            let l = t.ln(q);
            let e = t.exp(l);
            let s = t.sqrt(e);
            let m = t.mul(s, a)?;
            let d = t.sub(m, b)?;
            let sc = t.scale(d, 0.7);
            let off = t.offset(sc, 0.3);
            let cl = t.clamp(off, -0.9, 0.9);
            let rows = t.sum_rows(cl)?;
            let cat = t.concat(a, c)?;
            let flat = t.reshape(cat, &[2, 5])?;
            let cat_rows = t.sum_rows(flat)?;
            let sq = t.square(cat_rows);
            let both = t.add(rows, sq)?;
            let mean = t.mean(both);
            let w = weighted_sum(t, both, 9)?;
            t.add(w, mean)
        }),
    ));
    cases.push((
        "reparameterize",
        vec![("mu", rand_param(&mut r, &[2, 3], -1.0, 1.0)), ("var", rand_param(&mut r, &[2, 3], 0.2, 2.0))],
        Box::new(move |p, t| {
            let (mu, var) = (t.param(p, "mu")?, t.param(p, "var")?);
            let mut e = rng::stream(seed, "gradsuite.eps", 0);
            let eps = (0..6).map(|_| e.sample(rand_distr::StandardNormal)).collect();
            let z = t.reparameterize_with(mu, var, eps)?;
            weighted_sum(t, z, 10)
        }),
    ));
    cases.push((
        "gaussian",
        vec![
            ("mu", rand_param(&mut r, &[2, 3], -1.0, 1.0)),
            ("var", rand_param(&mut r, &[2, 3], 0.3, 2.0)),
            ("mu_t", rand_param(&mut r, &[2, 3], -1.0, 1.0)),
            ("var_t", rand_param(&mut r, &[2, 3], 0.3, 2.0)),
            ("mu_k", rand_param(&mut r, &[2, 3], -1.0, 1.0)),
        ],
        Box::new(|p, t| {
            let (mu, var, mu_t, var_t, mu_k) = (t.param(p, "mu")?, t.param(p, "var")?, t.param(p, "mu_t")?, t.param(p, "var_t")?, t.param(p, "mu_k")?);
            let (q_mu, q_var) = merge_gaussian_tape(t, mu, var, mu_t, var_t)?;
            let a = kl_conditional_tape(t, q_mu, q_var, mu_k)?;
            let b = kl_gaussian_tape(t, mu, var, q_mu, q_var)?;
            let c = kl_gaussian_tape(t, q_mu, q_var, mu_t, var_t)?;
            let ab = t.add(a, b)?;
            t.add(ab, c)
        }),
    ));

    let opts = GradCheckOptions { step: 1e-5, coords_per_param: usize::MAX, seed };
    cases
        .into_iter()
        .map(|(name, entries, f)| {
            let mut p = ParameterSet::new();
            for (n, t) in entries {
                p.insert(n, t)?;
            }
            Ok(SuiteEntry { name: format!("primitive.{name}"), report: finite_difference_check(|p, t| f(p, t), &p, opts)? })
        })
        .collect()
}
