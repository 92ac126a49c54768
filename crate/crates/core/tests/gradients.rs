//! Reverse-mode gradients against central finite differences.

use nvib_core::attention::{attn, dattn_discrete, dattn_gaussian_mixture, impulse_log_weights};
use nvib_core::distributions::{location_scale, log_dirichlet_sample, log_gamma_sample, GammaNoise, GaussianDiag};
use nvib_core::divergences::{kl_bfdp_expected_kappa, kl_bfdp_given_kappa, kl_one_sample};
use nvib_core::numerics::{check_gradients, GradCheckConfig};
use nvib_core::nvib::{nvib_forward_train, NvibConfig, PosteriorVars};
use nvib_core::{NoiseSource, Tape, Tensor, Var};

const TRIALS: u64 = 50;
const LEAF_TOL: f64 = 1e-5;

/// Fixed, shape-dependent weights so every output entry matters.
fn probe(rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|k| (1.3 * k as f64 + 0.1).sin() + 0.5).collect(),
    )
}

fn contract<'t>(out: Var<'t>) -> Var<'t> {
    let c = out.tape().constant(probe(out.rows(), out.cols()));
    (out * c).sum()
}

fn normal(noise: &mut NoiseSource, r: usize, c: usize) -> Tensor {
    noise.normal_tensor(r, c)
}

/// Entries bounded away from zero so kinks are never straddled.
fn away_from_zero(noise: &mut NoiseSource, r: usize, c: usize) -> Tensor {
    noise.normal_tensor(r, c).map(|x| if x.abs() < 0.05 { x + 0.1_f64.copysign(x) } else { x })
}

fn positive(noise: &mut NoiseSource, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    noise.uniform_tensor(r, c).map(|u| lo + (hi - lo) * u)
}

fn check<G, F>(name: &str, tol: f64, gen: G, f: F)
where
    G: Fn(&mut NoiseSource) -> Vec<Tensor>,
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let mut worst: f64 = 0.0;
    for seed in 0..TRIALS {
        let mut noise = NoiseSource::new(seed * 7919 + 1);
        let inputs = gen(&mut noise);
        let report = check_gradients(&inputs, GradCheckConfig::default(), |t, v| contract(f(t, v)));
        worst = worst.max(report.max_rel_error);
    }
    assert!(worst < tol, "{name}: max relative error {worst:e}");
}

#[test]
fn elementwise_binary_ops() {
    let two = |n: &mut NoiseSource| vec![normal(n, 3, 4), normal(n, 3, 4)];
    check("add", LEAF_TOL, two, |_, v| v[0] + v[1]);
    check("sub", LEAF_TOL, two, |_, v| v[0] - v[1]);
    check("mul", LEAF_TOL, two, |_, v| v[0] * v[1]);
    check("div", LEAF_TOL, |n| vec![normal(n, 3, 4), positive(n, 3, 4, 0.5, 2.0)], |_, v| v[0] / v[1]);
    check("neg", LEAF_TOL, two, |_, v| -v[0]);
}

#[test]
fn broadcast_ops() {
    check("add_row", LEAF_TOL, |n| vec![normal(n, 3, 4), normal(n, 1, 4)], |_, v| v[0].add_row(v[1]));
    check("mul_row", LEAF_TOL, |n| vec![normal(n, 3, 4), normal(n, 1, 4)], |_, v| v[0].mul_row(v[1]));
    check("add_col", LEAF_TOL, |n| vec![normal(n, 3, 4), normal(n, 3, 1)], |_, v| v[0].add_col(v[1]));
    check("mul_col", LEAF_TOL, |n| vec![normal(n, 3, 4), normal(n, 3, 1)], |_, v| v[0].mul_col(v[1]));
    check("add_scalar", LEAF_TOL, |n| vec![normal(n, 3, 4), normal(n, 1, 1)], |_, v| v[0].add_scalar_var(v[1]));
    check("mul_scalar", LEAF_TOL, |n| vec![normal(n, 3, 4), normal(n, 1, 1)], |_, v| v[0].mul_scalar_var(v[1]));
}

#[test]
fn elementwise_unary_ops() {
    let any = |n: &mut NoiseSource| vec![normal(n, 3, 4)];
    let pos = |n: &mut NoiseSource| vec![positive(n, 3, 4, 0.2, 3.0)];
    let kinked = |n: &mut NoiseSource| vec![away_from_zero(n, 3, 4)];
    check("scale", LEAF_TOL, any, |_, v| v[0].scale(-2.5));
    check("offset", LEAF_TOL, any, |_, v| v[0].offset(1.5));
    check("exp", LEAF_TOL, any, |_, v| v[0].exp());
    check("square", LEAF_TOL, any, |_, v| v[0].square());
    check("ln", LEAF_TOL, pos, |_, v| v[0].ln());
    check("sqrt", LEAF_TOL, pos, |_, v| v[0].sqrt());
    check("recip", LEAF_TOL, pos, |_, v| v[0].recip());
    check("log_gamma", LEAF_TOL, pos, |_, v| v[0].log_gamma());
    check("digamma", LEAF_TOL, pos, |_, v| v[0].digamma());
    check("relu", LEAF_TOL, kinked, |_, v| v[0].relu());
    check("clamp", LEAF_TOL, kinked, |_, v| v[0].clamp(-0.5, 0.5));
    check("floor_at", LEAF_TOL, kinked, |_, v| v[0].floor_at(0.0));
}

#[test]
fn matrix_ops() {
    check("matmul", LEAF_TOL, |n| vec![normal(n, 3, 4), normal(n, 4, 2)], |_, v| v[0].matmul(v[1]));
    check("matmul_t", LEAF_TOL, |n| vec![normal(n, 3, 4), normal(n, 5, 4)], |_, v| v[0].matmul_t(v[1]));
    check("transpose", LEAF_TOL, |n| vec![normal(n, 3, 4)], |_, v| v[0].t());
    check("select_rows", LEAF_TOL, |n| vec![normal(n, 3, 4)], |_, v| v[0].select_rows(&[2, 0, 2]));
    check("pick", LEAF_TOL, |n| vec![normal(n, 3, 4)], |_, v| v[0].pick(&[(0, 1), (2, 3), (0, 1)]));
    check("concat_rows", LEAF_TOL, |n| vec![normal(n, 2, 3), normal(n, 1, 3)], |_, v| {
        Var::concat_rows(&[v[0], v[1], v[0]])
    });
}

#[test]
fn reductions() {
    let any = |n: &mut NoiseSource| vec![normal(n, 3, 4)];
    check("sum", LEAF_TOL, any, |_, v| v[0].sum());
    check("mean", LEAF_TOL, any, |_, v| v[0].mean());
    check("sum_rows", LEAF_TOL, any, |_, v| v[0].sum_rows());
    check("sum_cols", LEAF_TOL, any, |_, v| v[0].sum_cols());
    check("column_max", LEAF_TOL, any, |_, v| v[0].column_max());
    check("softmax_rows", LEAF_TOL, any, |_, v| v[0].softmax_rows());
    check("log_softmax_rows", LEAF_TOL, any, |_, v| v[0].log_softmax_rows());
    check("logsumexp_rows", LEAF_TOL, any, |_, v| v[0].logsumexp_rows());
    check("layer_norm_rows", LEAF_TOL, any, |_, v| v[0].layer_norm_rows(1e-5));
}

#[test]
fn samplers() {
    check("location_scale", LEAF_TOL, |n| vec![normal(n, 3, 4), positive(n, 3, 4, 0.1, 2.0)], |_, v| {
        location_scale(v[0], v[1], &NoiseSource::new(3).normal_tensor(3, 4))
    });
    // Shapes on both sides of the branch switch, never straddling it.
    let alphas = |n: &mut NoiseSource| {
        let lo = positive(n, 1, 3, 0.05, 0.6);
        let hi = positive(n, 1, 3, 0.7, 20.0);
        vec![Tensor::from_vec(1, 6, lo.data().iter().chain(hi.data()).copied().collect())]
    };
    check("log_gamma_sample", LEAF_TOL, alphas, |_, v| {
        let mut noise = NoiseSource::new(5);
        let g = GammaNoise::draw(&mut noise, 1, 6);
        // Keep the Gaussian branch above its floor.
        let g = GammaNoise { u: g.u, eps: g.eps.map(|e| e.clamp(-0.6, 0.6)) };
        log_gamma_sample(v[0], &g)
    });
    check("log_dirichlet_sample", LEAF_TOL, alphas, |_, v| {
        let mut noise = NoiseSource::new(6);
        let g = GammaNoise::draw(&mut noise, 1, 6);
        let g = GammaNoise { u: g.u, eps: g.eps.map(|e| e.clamp(-0.6, 0.6)) };
        log_dirichlet_sample(v[0], &g)
    });
}

fn posterior_inputs(n: &mut NoiseSource, k: usize, d: usize) -> Vec<Tensor> {
    vec![positive(n, k, 1, 0.2, 4.0), normal(n, k, d), normal(n, k, d).scale(0.5)]
}

fn posterior<'t>(v: &[Var<'t>]) -> PosteriorVars<'t> {
    PosteriorVars { alphas: v[0], mus: v[1], log_sigmas: v[2] }
}

#[test]
fn divergences() {
    let base = GaussianDiag::standard(3);
    let gen = |n: &mut NoiseSource| posterior_inputs(n, 4, 3);
    check("kl_one_sample", 1e-4, gen, |_, v| {
        let kl = kl_one_sample(&posterior(v), 2.5, &base).unwrap();
        Var::concat_rows(&[kl.l_d, kl.l_g])
    });
    check("kl_given_kappa", 1e-4, gen, |_, v| {
        let kl = kl_bfdp_given_kappa(&posterior(v), 1.5, &[1, 3, 2, 5], &base).unwrap();
        Var::concat_rows(&[kl.l_d, kl.l_g])
    });
    check("kl_expected_kappa", 1e-4, gen, |_, v| {
        let kl = kl_bfdp_expected_kappa(&posterior(v), 1.5, 6.0, &base).unwrap();
        Var::concat_rows(&[kl.l_d, kl.l_g])
    });
}

#[test]
fn attention_forms() {
    check("attn", LEAF_TOL, |n| vec![normal(n, 2, 4), normal(n, 5, 4)], |_, v| attn(v[0], v[1], 4).unwrap());
    check("impulse_log_weights", LEAF_TOL, |n| vec![normal(n, 5, 4)], |_, v| impulse_log_weights(v[0], 4));
    check(
        "dattn_discrete",
        LEAF_TOL,
        |n| vec![normal(n, 2, 4), normal(n, 1, 5), normal(n, 5, 4)],
        |_, v| dattn_discrete(v[0], v[1], v[2], 4).unwrap(),
    );
    check(
        "dattn_gaussian_mixture",
        LEAF_TOL,
        |n| {
            let mut inputs = vec![normal(n, 2, 3)];
            inputs.extend(posterior_inputs(n, 4, 3));
            inputs
        },
        |_, v| dattn_gaussian_mixture(v[0], &posterior(&v[1..]), 3).unwrap(),
    );
}

#[test]
fn layer_through_sample() {
    let cfg = NvibConfig { lambda_d_prime: 1.0, lambda_g_prime: 0.5, ..NvibConfig::default() };
    check(
        "nvib_forward_train",
        1e-4,
        |n| {
            let mut inputs = posterior_inputs(n, 5, 3);
            // Shapes well above the Gamma branch switch.
            inputs[0] = positive(n, 5, 1, 0.8, 4.0);
            inputs.push(normal(n, 2, 3));
            inputs
        },
        |_, v| {
            let mut noise = NoiseSource::new(17);
            let s = nvib_forward_train(&posterior(&v[..3]), &cfg, &mut noise).unwrap();
            let out = dattn_discrete(v[3], s.log_weights, s.vectors, 3).unwrap();
            let kl = s.kl.weighted(0.25, 0.1);
            Var::concat_rows(&[out.sum_rows().t(), kl])
        },
    );
}
