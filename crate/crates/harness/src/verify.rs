//! Runtime verification suite over every declared invariant.
//!
//! [`MANIFEST`] lists the invariants; each is either checked by one of the
//! suites here or by a named test target. Running the full suite also
//! checks that every suite-covered manifest entry produced a result.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nvib_core::attention::{
    attn, attn_value, dattn_discrete, dattn_discrete_value, dattn_gaussian_mixture, dattn_gaussian_mixture_value,
    impulse_log_weights, impulse_mixture, DiscreteMixture,
};
use nvib_core::distributions::{
    location_scale, log_dirichlet_sample, log_gamma_sample, sample_bfdp, sample_gamma, sample_gaussian,
    BoundedDpSpec, GammaDraw, GammaNoise, GammaSampler, GaussianDiag,
};
use nvib_core::divergences::{
    kl_bfdp_expected_kappa, kl_bfdp_given_kappa, kl_dirichlet, kl_gaussian_diag, kl_one_sample, kl_value,
};
use nvib_core::numerics::special::{digamma, log_gamma};
use nvib_core::numerics::{check_gradients, GradCheckConfig};
use nvib_core::nvib::{nvib_forward_train, NvibConfig, PosteriorParams, PosteriorVars};
use nvib_core::{NoiseSource, Tape, Tensor, Var};
use nvib_model::gradcheck::check_model_gradients;
use nvib_model::latent::stride_indices;
use nvib_model::{Autoencoder, ModelConfig, TokenSequence, TrainConfig, Trainer, Variant};
use rand_distr::{Beta, Distribution, Gamma};

use crate::error::{HarnessError, Result};
use crate::fig3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Suite {
    Attention,
    Distributions,
    Kl,
    Gradients,
    Fdp,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Attention, Suite::Distributions, Suite::Kl, Suite::Gradients, Suite::Fdp];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Attention => "attention",
            Suite::Distributions => "distributions",
            Suite::Kl => "kl",
            Suite::Gradients => "gradients",
            Suite::Fdp => "fdp",
        })
    }
}

/// `all` or one suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    All,
    One(Suite),
}

impl FromStr for Selection {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Selection::All);
        }
        Suite::ALL
            .into_iter()
            .find(|suite| suite.to_string() == s)
            .map(Selection::One)
            .ok_or_else(|| HarnessError::Input(format!("unknown suite {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coverage {
    Suite(Suite),
    /// Checked by a test target rather than at run time.
    Test(&'static str),
}

#[derive(Clone, Copy, Debug)]
pub struct Invariant {
    pub id: &'static str,
    pub statement: &'static str,
    pub coverage: Coverage,
}

const fn inv(id: &'static str, statement: &'static str, coverage: Coverage) -> Invariant {
    Invariant { id, statement, coverage }
}

use Coverage::{Suite as S, Test};

pub const MANIFEST: &[Invariant] = &[
    inv("numerics.op_gradients", "every differentiable op matches central differences", S(Suite::Gradients)),
    inv("numerics.softmax_normalised", "softmax rows sum to one, including wide ranges", S(Suite::Distributions)),
    inv("numerics.log_gamma_recurrence", "ln Γ(x+1) = ln Γ(x) + ln x", S(Suite::Distributions)),
    inv("numerics.noise_reproducible", "a seeded noise source replays identically", S(Suite::Distributions)),
    inv("distributions.total_weight_beta", "BFDP total weight of component 1 is Beta(α₁, α₂)", S(Suite::Fdp)),
    inv("distributions.fdp_expected_weights", "per-component expected weights equal αᵢ/α₀", S(Suite::Fdp)),
    inv("distributions.gamma_switch", "Gamma sampler means at 0.63 and 0.64", S(Suite::Distributions)),
    inv("distributions.sampler_determinism", "samplers are functions of parameters and noise", S(Suite::Distributions)),
    inv("distributions.sampler_gradients", "sampler gradients match central differences", S(Suite::Gradients)),
    inv("distributions.approximation_crossover", "Gamma approximation error curves cross near 0.6363", S(Suite::Distributions)),
    inv("divergences.kl_dirichlet_nonnegative", "Dirichlet KL is non-negative and zero at equality", S(Suite::Kl)),
    inv("divergences.kl_gaussian_monte_carlo", "Gaussian KL matches Monte Carlo", S(Suite::Kl)),
    inv("divergences.kl_dirichlet_monte_carlo", "Dirichlet KL matches Monte Carlo", S(Suite::Kl)),
    inv("divergences.closed_form_consistency", "given-κ KL equals the combined-factor formula", S(Suite::Kl)),
    inv("divergences.one_sample_unit_kappa", "one-sample KL equals given-κ KL with κ = 1", S(Suite::Kl)),
    inv("divergences.kl_gradients", "L_D and L_G gradients match central differences", S(Suite::Gradients)),
    inv("divergences.conditional_prior_zero", "expected-κ L_D vanishes at α₀^q = α₀ᵖ′", S(Suite::Kl)),
    inv("attention.equivalence", "discrete denoising attention over impulses equals attention", S(Suite::Attention)),
    inv("attention.permutation_invariance", "attention forms ignore component order", S(Suite::Attention)),
    inv("attention.interpolant_hull", "mixture attention lies in the interpolant hull", S(Suite::Attention)),
    inv("attention.masked_zero_weight", "zero pseudo-count components get no weight", S(Suite::Attention)),
    inv("attention.quadrature", "closed-form mixture attention matches 1-d quadrature", S(Suite::Attention)),
    inv("attention.gradients", "denoising attention gradients match central differences", S(Suite::Gradients)),
    inv("nvib.train_test_consistency", "mean attention approaches discrete attention as σ → 0", S(Suite::Attention)),
    inv("nvib.prior_only_zero_kl", "training KL is zero for the prior alone at the target mass", S(Suite::Kl)),
    inv("nvib.sampling_finite", "the training pass never yields NaN", S(Suite::Distributions)),
    inv("nvib.nu_monotone_in_lambda_d", "ν does not grow with λ′_D", Test("nvib-harness acceptance")),
    inv("model.full_gradients", "full training loss gradients match central differences", S(Suite::Gradients)),
    inv("model.monotone_loss", "teacher-forced loss falls over the first 50 steps", S(Suite::Gradients)),
    inv("model.decoder_permutation_invariance", "decoder logits ignore latent order", S(Suite::Attention)),
    inv("model.stride_spacing", "VTS keeps evenly spaced, content-independent states", S(Suite::Attention)),
    inv("harness.cli_determinism", "fixed-seed training writes identical metrics", Test("nvib-harness cli")),
    inv("harness.checkpoint_round_trip", "checkpoint reload reproduces validation loss", Test("nvib-harness cli")),
    inv("harness.manifest_coverage", "every suite-covered invariant reports a result", S(Suite::Gradients)),
];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub id: String,
    pub suite: Suite,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub checks: Vec<CheckResult>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, id: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.id == id)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s.push_str(&format!(
                "{} [{}] {}: measured {:.3e} vs {:.1e} ({:.1}s) {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.suite,
                c.id,
                c.measured,
                c.threshold,
                c.seconds,
                c.detail
            ));
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        s.push_str(&format!("{} checks, {failed} failed\n", self.checks.len()));
        s
    }
}

/// Outcome of one check before timing is attached.
struct Outcome {
    measured: f64,
    threshold: f64,
    passed: bool,
    detail: String,
}

fn below(measured: f64, threshold: f64) -> Outcome {
    Outcome { measured, threshold, passed: measured < threshold, detail: String::new() }
}

impl Outcome {
    fn with(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

type CheckFn = fn() -> Result<Outcome>;

fn suite_checks(suite: Suite) -> Vec<(&'static str, CheckFn)> {
    match suite {
        Suite::Attention => vec![
            ("attention.equivalence", attention_equivalence as CheckFn),
            ("attention.permutation_invariance", attention_permutation),
            ("attention.interpolant_hull", attention_hull),
            ("attention.masked_zero_weight", attention_masked),
            ("attention.quadrature", attention_quadrature),
            ("nvib.train_test_consistency", train_test_consistency),
            ("model.decoder_permutation_invariance", decoder_permutation),
            ("model.stride_spacing", stride_spacing),
        ],
        Suite::Distributions => vec![
            ("numerics.softmax_normalised", softmax_normalised as CheckFn),
            ("numerics.log_gamma_recurrence", log_gamma_recurrence),
            ("numerics.noise_reproducible", noise_reproducible),
            ("distributions.gamma_switch", gamma_switch),
            ("distributions.sampler_determinism", sampler_determinism),
            ("distributions.approximation_crossover", approximation_crossover),
            ("nvib.sampling_finite", sampling_finite),
        ],
        Suite::Kl => vec![
            ("divergences.kl_dirichlet_nonnegative", kl_dirichlet_nonnegative as CheckFn),
            ("divergences.kl_gaussian_monte_carlo", kl_gaussian_monte_carlo),
            ("divergences.kl_dirichlet_monte_carlo", kl_dirichlet_monte_carlo),
            ("divergences.closed_form_consistency", closed_form_consistency),
            ("divergences.one_sample_unit_kappa", one_sample_unit_kappa),
            ("divergences.conditional_prior_zero", conditional_prior_zero),
            ("nvib.prior_only_zero_kl", prior_only_zero_kl),
        ],
        Suite::Gradients => vec![
            ("numerics.op_gradients", op_gradients as CheckFn),
            ("distributions.sampler_gradients", sampler_gradients),
            ("divergences.kl_gradients", kl_gradients),
            ("attention.gradients", attention_gradients),
            ("model.full_gradients", full_gradients),
            ("model.monotone_loss", monotone_loss),
        ],
        Suite::Fdp => vec![
            ("distributions.total_weight_beta", total_weight_beta as CheckFn),
            ("distributions.fdp_expected_weights", fdp_expected_weights),
        ],
    }
}

/// Runs one named check.
pub fn run_check(id: &str) -> Result<CheckResult> {
    for suite in Suite::ALL {
        if let Some((_, f)) = suite_checks(suite).into_iter().find(|(k, _)| *k == id) {
            return Ok(timed(id, suite, f));
        }
    }
    Err(HarnessError::Input(format!("no runtime check named {id:?}")))
}

fn timed(id: &str, suite: Suite, f: CheckFn) -> CheckResult {
    let t = Instant::now();
    let o = f().unwrap_or_else(|e| Outcome {
        measured: f64::INFINITY,
        threshold: 0.0,
        passed: false,
        detail: format!("error: {e}"),
    });
    CheckResult {
        id: id.to_string(),
        suite,
        passed: o.passed,
        measured: o.measured,
        threshold: o.threshold,
        detail: o.detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

/// Runs the selected suites; `progress` sees each result as it lands.
pub fn run(selection: Selection, mut progress: impl FnMut(&CheckResult)) -> Report {
    let suites: Vec<Suite> = match selection {
        Selection::All => Suite::ALL.to_vec(),
        Selection::One(s) => vec![s],
    };
    let mut report = Report::default();
    for suite in suites {
        for (id, f) in suite_checks(suite) {
            let r = timed(id, suite, f);
            progress(&r);
            report.checks.push(r);
        }
    }
    if selection == Selection::All {
        let missing = missing_from(&report);
        let r = CheckResult {
            id: "harness.manifest_coverage".into(),
            suite: Suite::Gradients,
            passed: missing.is_empty(),
            measured: missing.len() as f64,
            threshold: 1.0,
            detail: if missing.is_empty() { String::new() } else { format!("missing: {}", missing.join(", ")) },
            seconds: 0.0,
        };
        progress(&r);
        report.checks.push(r);
    }
    report
}

/// Suite-covered manifest entries without a result in `report`.
pub fn missing_from(report: &Report) -> Vec<&'static str> {
    MANIFEST
        .iter()
        .filter(|i| matches!(i.coverage, Coverage::Suite(_)) && i.id != "harness.manifest_coverage")
        .filter(|i| report.get(i.id).is_none())
        .map(|i| i.id)
        .collect()
}

/// Ids that the suites check but the manifest does not list.
pub fn unlisted_checks() -> Vec<&'static str> {
    Suite::ALL
        .into_iter()
        .flat_map(suite_checks)
        .map(|(id, _)| id)
        .filter(|id| !MANIFEST.iter().any(|i| i.id == *id))
        .collect()
}

// ---------------------------------------------------------------- helpers

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// Asymptotic two-sample critical value.
pub fn ks_critical(n: usize, m: usize, significance: f64) -> f64 {
    let c = (-(significance / 2.0).ln() / 2.0).sqrt();
    c * ((n + m) as f64 / (n * m) as f64).sqrt()
}

fn random_posterior(noise: &mut NoiseSource, k: usize, d: usize) -> Result<PosteriorParams> {
    let alphas = noise.uniform_tensor(k, 1).map(|u| 0.05 + 5.0 * u);
    let mus = noise.normal_tensor(k, d);
    let log_sigmas = noise.normal_tensor(k, d).map(|x| (0.7 * x).clamp(-8.0, 8.0));
    Ok(PosteriorParams::new(alphas, mus, log_sigmas)?)
}

fn shuffle(noise: &mut NoiseSource, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, noise.below(i + 1));
    }
    perm
}

// -------------------------------------------------------------- attention

fn attention_equivalence() -> Result<Outcome> {
    let mut noise = NoiseSource::new(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = 1 + noise.below(16);
        let p = 1 + noise.below(32);
        let z = noise.normal_tensor(n, p).scale(1.5);
        let u = noise.normal_tensor(1, p).scale(1.5);
        let direct = attn_value(&u, &z, p)?;
        let via = dattn_discrete_value(&u, &impulse_mixture(&z, p)?, p)?;
        worst = worst.max(direct.max_abs_diff(&via));
    }
    Ok(below(worst, 1e-9).with("1000 instances, n <= 16, p <= 32"))
}

fn attention_permutation() -> Result<Outcome> {
    let mut noise = NoiseSource::new(8);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = 2 + noise.below(8);
        let p = 1 + noise.below(6);
        let z = noise.normal_tensor(n, p);
        let u = noise.normal_tensor(3, p);
        let perm = shuffle(&mut noise, n);
        let zp = z.select_rows(&perm);
        worst = worst.max(attn_value(&u, &z, p)?.max_abs_diff(&attn_value(&u, &zp, p)?));
        let raw: Vec<f64> = (0..n).map(|_| noise.uniform() + 1e-3).collect();
        let s: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|r| r / s).collect();
        let m = DiscreteMixture::new(w.clone(), z.clone())?;
        let mp = DiscreteMixture::new(perm.iter().map(|&i| w[i]).collect(), zp)?;
        worst = worst.max(dattn_discrete_value(&u, &m, p)?.max_abs_diff(&dattn_discrete_value(&u, &mp, p)?));
        let post = random_posterior(&mut noise, n, p)?;
        let permuted = PosteriorParams::new(
            post.alphas().select_rows(&perm),
            post.mus().select_rows(&perm),
            post.log_sigmas().select_rows(&perm),
        )?;
        worst = worst.max(
            dattn_gaussian_mixture_value(&u, &post, p)?.max_abs_diff(&dattn_gaussian_mixture_value(&u, &permuted, p)?),
        );
    }
    Ok(below(worst, 1e-12))
}

fn attention_hull() -> Result<Outcome> {
    let mut noise = NoiseSource::new(31);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let k = 1 + noise.below(5);
        let d = 1 + noise.below(6);
        let post = random_posterior(&mut noise, k, d)?;
        let u = noise.normal_tensor(1, d).scale(2.0);
        let out = dattn_gaussian_mixture_value(&u, &post, d)?;
        let sd = (d as f64).sqrt();
        for h in 0..d {
            let interps: Vec<f64> = (0..k)
                .map(|i| {
                    let var = (2.0 * post.log_sigmas().get(i, h)).exp();
                    (u.get(0, h) / sd + post.mus().get(i, h) / var) / (1.0 / sd + 1.0 / var)
                })
                .collect();
            let lo = interps.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = interps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = out.get(0, h);
            worst = worst.max(lo - o).max(o - hi);
        }
    }
    Ok(below(worst, 1e-12).with("largest excursion outside the hull"))
}

fn attention_masked() -> Result<Outcome> {
    let mut noise = NoiseSource::new(5);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let post = random_posterior(&mut noise, 3, 4)?;
        let extra_mu = noise.normal_tensor(1, 4).scale(50.0);
        let with_masked = PosteriorParams::new(
            Tensor::col_vector([post.alphas().data(), &[0.0]].concat()),
            Tensor::from_vec(4, 4, [post.mus().data(), extra_mu.data()].concat()),
            Tensor::from_vec(4, 4, [post.log_sigmas().data(), &[0.0; 4]].concat()),
        )?;
        let u = noise.normal_tensor(2, 4);
        let a = dattn_gaussian_mixture_value(&u, &post, 4)?;
        let b = dattn_gaussian_mixture_value(&u, &with_masked, 4)?;
        worst = worst.max(a.max_abs_diff(&b));
    }
    Ok(Outcome { measured: worst, threshold: 0.0, passed: worst == 0.0, detail: "must be exactly zero".into() })
}

/// Posterior mean under a 1-d Gaussian mixture and a query likelihood of
/// variance `√d`, by trapezoidal quadrature.
pub fn quadrature_denoise(u: f64, pis: &[f64], mus: &[f64], sigmas: &[f64], d: usize) -> f64 {
    let noise_var = (d as f64).sqrt();
    let (lo, hi, n) = (-20.0, 20.0, 200_000);
    let h = (hi - lo) / n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..=n {
        let z = lo + k as f64 * h;
        let prior: f64 =
            pis.iter().zip(mus).zip(sigmas).map(|((p, m), s)| p * (-0.5 * ((z - m) / s).powi(2)).exp() / s).sum();
        let w = if k == 0 || k == n { 0.5 } else { 1.0 } * prior * (-0.5 * (u - z).powi(2) / noise_var).exp();
        num += w * z;
        den += w;
    }
    num / den
}

fn attention_quadrature() -> Result<Outcome> {
    let mut noise = NoiseSource::new(12);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let k = 1 + noise.below(4);
        let alphas: Vec<f64> = (0..k).map(|_| 0.2 + 3.0 * noise.uniform()).collect();
        let mus: Vec<f64> = (0..k).map(|_| 6.0 * noise.uniform() - 3.0).collect();
        let sigmas: Vec<f64> = (0..k).map(|_| 0.3 + 1.7 * noise.uniform()).collect();
        let post = PosteriorParams::new(
            Tensor::col_vector(alphas.clone()),
            Tensor::col_vector(mus.clone()),
            Tensor::col_vector(sigmas.iter().map(|s| s.ln()).collect()),
        )?;
        let u = 8.0 * noise.uniform() - 4.0;
        let out = dattn_gaussian_mixture_value(&Tensor::scalar(u), &post, 1)?.item();
        let a0: f64 = alphas.iter().sum();
        let pis: Vec<f64> = alphas.iter().map(|a| a / a0).collect();
        worst = worst.max((out - quadrature_denoise(u, &pis, &mus, &sigmas, 1)).abs());
    }
    Ok(below(worst, 1e-3).with("50 mixtures of up to 4 components"))
}

fn train_test_consistency() -> Result<Outcome> {
    let mut noise = NoiseSource::new(41);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let k = 2 + noise.below(5);
        let d = 4;
        let alphas: Vec<f64> = (0..k).map(|_| 0.5 + noise.uniform()).collect();
        let mus = noise.normal_tensor(k, d);
        // e⁻⁸ ≈ 3.4e-4 is the smallest σ the projection can emit.
        let post = PosteriorParams::new(Tensor::col_vector(alphas.clone()), mus.clone(), Tensor::filled(k, d, -8.0))?;
        let u = noise.normal_tensor(3, d);
        let mean_out = dattn_gaussian_mixture_value(&u, &post, d)?;
        let a0: f64 = alphas.iter().sum();
        let m = DiscreteMixture::new(alphas.iter().map(|a| a / a0).collect(), mus)?;
        worst = worst.max(mean_out.max_abs_diff(&dattn_discrete_value(&u, &m, d)?));
    }
    Ok(below(worst, 1e-2).with("log σ = -8"))
}

fn micro_model(variant: Variant, seed: u64) -> Result<Autoencoder> {
    let mut cfg = ModelConfig::toy(12, 10, variant);
    cfg.model_dim = 8;
    cfg.ff_dim = 16;
    cfg.nvib.lambda_g_prime = 0.5;
    cfg.nvib.delta_p = 0.2;
    Ok(Autoencoder::new(cfg, seed)?)
}

fn micro_batch() -> Result<Vec<TokenSequence>> {
    Ok(vec![TokenSequence::new(vec![3, 4, 5, 6])?, TokenSequence::new(vec![7, 8, 3])?])
}

fn decoder_permutation() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let seq = TokenSequence::new(vec![3, 9, 4, 11, 5, 6])?;
    let input = seq.decoder_input();
    let mut noise = NoiseSource::new(4);
    for variant in [Variant::Nvae, Variant::Vt, Variant::T] {
        let model = micro_model(variant, 2)?;
        let mut latents = vec![model.latent(&seq, None)?];
        if variant == Variant::Nvae {
            latents.push(model.latent(&seq, Some(&mut noise))?);
        }
        for latent in latents {
            let perm = shuffle(&mut noise, latent.len());
            let a = model.decoder_logits(&input, &latent)?;
            let b = model.decoder_logits(&input, &latent.permuted(&perm)?)?;
            worst = worst.max(a.max_abs_diff(&b));
        }
    }
    Ok(below(worst, 1e-9).with("NVAE mixture and sample, VT, T"))
}

fn stride_spacing() -> Result<Outcome> {
    let mut bad = 0usize;
    for n in 2..64 {
        for s in [0.5, 0.25, 1.0 / 3.0] {
            let idx = stride_indices(n, s);
            let period = (1.0 / s).round() as usize;
            let even = idx.windows(2).all(|w| {
                let gap = w[1] - w[0];
                gap == 1 || gap == 2
            });
            // One position in every `period` is dropped.
            let expected_dropped = (0..n).filter(|&i| ((i + 1) as f64 * s).floor() > (i as f64 * s).floor()).count();
            if !even || n - idx.len() != expected_dropped || expected_dropped > n.div_ceil(period) {
                bad += 1;
            }
        }
    }
    // Content independence: the kept rows are the same for different inputs.
    let model = micro_model(Variant::Vts(0.5), 3)?;
    let a = model.latent(&TokenSequence::new(vec![3, 4, 5, 6, 7])?, None)?.len();
    let b = model.latent(&TokenSequence::new(vec![11, 10, 9, 8, 7])?, None)?.len();
    if a != b || a != stride_indices(6, 0.5).len() {
        bad += 1;
    }
    Ok(below(bad as f64, 1.0).with("violations over n < 64 and three strides"))
}

// ---------------------------------------------------------- distributions

fn softmax_normalised() -> Result<Outcome> {
    let mut noise = NoiseSource::new(13);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = 1 + noise.below(12);
        let spread = if noise.uniform() < 0.5 { 1600.0 } else { 10.0 };
        let row: Vec<f64> = (0..n).map(|_| spread * (noise.uniform() - 0.5)).collect();
        let tape = Tape::new();
        let s = tape.constant(Tensor::row_vector(row)).softmax_rows().value();
        if s.data().iter().any(|p| p.is_nan() || *p < 0.0) {
            worst = f64::INFINITY;
        }
        worst = worst.max((s.sum() - 1.0).abs());
    }
    Ok(below(worst, 1e-12).with("rows with ranges up to 1600"))
}

fn log_gamma_recurrence() -> Result<Outcome> {
    let mut noise = NoiseSource::new(14);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x = 1e-3 + 100.0 * noise.uniform();
        worst = worst.max((log_gamma(x + 1.0)? - log_gamma(x)? - x.ln()).abs());
    }
    Ok(below(worst, 1e-10))
}

fn noise_reproducible() -> Result<Outcome> {
    let draw = |seed| {
        let mut n = NoiseSource::new(seed);
        let mut v: Vec<f64> = (0..100).map(|_| n.uniform()).collect();
        v.extend((0..100).map(|_| n.normal()));
        v.extend(n.fork(3).normal_tensor(4, 4).into_vec());
        v
    };
    let same = draw(42) == draw(42);
    let differs = draw(42) != draw(43);
    Ok(Outcome {
        measured: f64::from(u8::from(!(same && differs))),
        threshold: 1.0,
        passed: same && differs,
        detail: "same seed replays, different seeds diverge".into(),
    })
}

fn gamma_mean(sampler: GammaSampler, alpha: f64, n: usize, seed: u64) -> (f64, f64) {
    let mut noise = NoiseSource::new(seed);
    let xs: Vec<f64> = (0..n)
        .map(|_| match sampler {
            GammaSampler::Reparameterized => sample_gamma(alpha, GammaDraw::draw(&mut noise)).unwrap_or(f64::NAN),
            GammaSampler::Exact => sampler.log_draw(alpha, &mut noise).exp(),
        })
        .collect();
    let (m, v) = mean_var(&xs);
    (m, (v / n as f64).sqrt())
}

/// Mean of the inverse-CDF approximation, `Γ(α+1)^{1/α} / (1 + 1/α)`.
pub fn inverse_cdf_mean(alpha: f64) -> Result<f64> {
    Ok((log_gamma(alpha + 1.0)? / alpha).exp() / (1.0 + 1.0 / alpha))
}

/// Mean of the floored Gaussian approximation `max(α + √α ε, 0)`.
pub fn floored_gaussian_mean(alpha: f64) -> f64 {
    let s = alpha.sqrt();
    let t = alpha / s;
    let pdf = (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    alpha * nvib_core::numerics::special::normal_cdf(t) + s * pdf
}

fn gamma_switch() -> Result<Outcome> {
    let n = 100_000;
    let (e63, _) = gamma_mean(GammaSampler::Exact, 0.63, n, 21);
    let (e64, _) = gamma_mean(GammaSampler::Exact, 0.64, n, 22);
    let exact_gap = (e63 - e64).abs();
    let (a63, se63) = gamma_mean(GammaSampler::Reparameterized, 0.63, n, 23);
    let (a64, se64) = gamma_mean(GammaSampler::Reparameterized, 0.64, n, 24);
    let z63 = (a63 - inverse_cdf_mean(0.63)?).abs() / se63;
    let z64 = (a64 - floored_gaussian_mean(0.64)).abs() / se64;
    Ok(Outcome {
        measured: exact_gap,
        threshold: 0.05,
        passed: exact_gap < 0.05 && z63 < 4.0 && z64 < 4.0,
        detail: format!(
            "exact sampler gap {exact_gap:.4}; approximate means {a63:.4} and {a64:.4} sit {z63:.1} and {z64:.1} SE from their closed forms"
        ),
    })
}

fn sampler_determinism() -> Result<Outcome> {
    let spec = BoundedDpSpec::new(
        vec![(GaussianDiag::standard(3), 0.4), (GaussianDiag::new(vec![1.0; 3], vec![0.5; 3])?, 2.0)],
        vec![2, 3],
    )?;
    let mut same = true;
    for sampler in [GammaSampler::Exact, GammaSampler::Reparameterized] {
        let a = sample_bfdp(&spec, &mut NoiseSource::new(9), sampler)?;
        let b = sample_bfdp(&spec, &mut NoiseSource::new(9), sampler)?;
        same &= a == b;
        let a = sampler.dirichlet(&[0.3, 1.0, 4.0], &mut NoiseSource::new(10))?;
        let b = sampler.dirichlet(&[0.3, 1.0, 4.0], &mut NoiseSource::new(10))?;
        same &= a == b;
    }
    let eps = [0.3, -1.2, 0.7];
    let g = GaussianDiag::new(vec![0.0, 1.0, 2.0], vec![1.0, 0.5, 2.0])?;
    same &= sample_gaussian(&g, &eps)? == sample_gaussian(&g, &eps)?;
    Ok(Outcome {
        measured: f64::from(u8::from(!same)),
        threshold: 1.0,
        passed: same,
        detail: "bit-identical replays".into(),
    })
}

fn approximation_crossover() -> Result<Outcome> {
    let cross = fig3::crossover(0.3, 1.0, 1e-4)?;
    let (i02, g02) = fig3::approximation_errors(0.2)?;
    let (i2, g2) = fig3::approximation_errors(2.0)?;
    let dev = (cross - 0.6363).abs();
    Ok(Outcome {
        measured: dev,
        threshold: 0.05,
        passed: dev < 0.05 && i02 < g02 && i2 > g2,
        detail: format!("crossover {cross:.4}; at 0.2 {i02:.4} < {g02:.4}; at 2.0 {i2:.4} > {g2:.4}"),
    })
}

fn sampling_finite() -> Result<Outcome> {
    let mut noise = NoiseSource::new(99);
    let cfg = NvibConfig::default();
    let mut bad = 0usize;
    for _ in 0..10_000 {
        let n = 1 + noise.below(12);
        let d = 1 + noise.below(4);
        let mut alphas: Vec<f64> = (0..n)
            .map(|_| if noise.uniform() < 0.2 { 0.0 } else { (20.0 * noise.uniform() - 14.0).exp() })
            .collect();
        alphas.push(cfg.alpha0_p);
        let mus = noise.normal_tensor(n + 1, d).scale(10.0);
        let log_sigmas = noise.uniform_tensor(n + 1, d).map(|u| 16.0 * u - 8.0);
        let post = PosteriorParams::new(Tensor::col_vector(alphas), mus, log_sigmas)?;
        let tape = Tape::new();
        let s = nvib_forward_train(&post.constants(&tape), &cfg, &mut noise)?;
        let ok = s.log_weights.value().is_finite()
            && s.vectors.value().is_finite()
            && s.kl.l_d.item().is_finite()
            && s.kl.l_g.item().is_finite();
        bad += usize::from(!ok);
    }
    Ok(below(bad as f64, 1.0).with("non-finite outputs over 10^4 posteriors"))
}

// --------------------------------------------------------------------- kl

fn kl_dirichlet_nonnegative() -> Result<Outcome> {
    let mut noise = NoiseSource::new(15);
    let mut most_negative: f64 = 0.0;
    let mut at_equal: f64 = 0.0;
    for _ in 0..1000 {
        let k = 1 + noise.below(6);
        let q: Vec<f64> = (0..k).map(|_| 0.05 + 10.0 * noise.uniform()).collect();
        let p: Vec<f64> = (0..k).map(|_| 0.05 + 10.0 * noise.uniform()).collect();
        most_negative = most_negative.min(kl_dirichlet(&q, &p)?);
        at_equal = at_equal.max(kl_dirichlet(&q, &q)?.abs());
    }
    let m = (-most_negative).max(at_equal);
    Ok(below(m, 1e-12).with(format!("min KL {most_negative:.2e}, max |KL(q,q)| {at_equal:.2e}")))
}

const MC_DRAWS: usize = 1_000_000;

fn kl_gaussian_monte_carlo() -> Result<Outcome> {
    let mut noise = NoiseSource::new(11);
    let mut worst_z: f64 = 0.0;
    for _ in 0..20 {
        let d = 1 + noise.below(3);
        let mk = |noise: &mut NoiseSource| {
            GaussianDiag::new(
                (0..d).map(|_| noise.normal()).collect(),
                (0..d).map(|_| 0.4 + 1.2 * noise.uniform()).collect(),
            )
        };
        let q = mk(&mut noise)?;
        let p = mk(&mut noise)?;
        let log_density = |g: &GaussianDiag, x: &[f64]| -> f64 {
            x.iter().enumerate().map(|(h, xi)| -0.5 * ((xi - g.mu()[h]) / g.sigma()[h]).powi(2) - g.sigma()[h].ln()).sum()
        };
        let mut eps = vec![0.0; d];
        let samples: Vec<f64> = (0..MC_DRAWS)
            .map(|_| {
                eps.iter_mut().for_each(|e| *e = noise.normal());
                let x = sample_gaussian(&q, &eps).expect("matching dimension");
                log_density(&q, &x) - log_density(&p, &x)
            })
            .collect();
        let (m, v) = mean_var(&samples);
        let z = (m - kl_gaussian_diag(&q, &p)?).abs() / (v / MC_DRAWS as f64).sqrt();
        worst_z = worst_z.max(z);
    }
    Ok(below(worst_z, 3.0).with("largest deviation in standard errors over 20 pairs"))
}

fn kl_dirichlet_monte_carlo() -> Result<Outcome> {
    let mut noise = NoiseSource::new(10);
    let mut worst_z: f64 = 0.0;
    for _ in 0..20 {
        let k = 2 + noise.below(3);
        let q: Vec<f64> = (0..k).map(|_| 0.5 + 4.0 * noise.uniform()).collect();
        let p: Vec<f64> = (0..k).map(|_| 0.5 + 4.0 * noise.uniform()).collect();
        let norm = |a: &[f64]| -> Result<f64> {
            let mut c = log_gamma(a.iter().sum())?;
            for &x in a {
                c -= log_gamma(x)?;
            }
            Ok(c)
        };
        let (cq, cp) = (norm(&q)?, norm(&p)?);
        let gammas: Vec<Gamma<f64>> =
            q.iter().map(|&a| Gamma::new(a, 1.0).map_err(|e| HarnessError::Input(e.to_string()))).collect::<Result<_>>()?;
        let mut g = vec![0.0; k];
        let samples: Vec<f64> = (0..MC_DRAWS)
            .map(|_| {
                g.iter_mut().zip(&gammas).for_each(|(x, d)| *x = d.sample(noise.rng()));
                let ln_s = g.iter().sum::<f64>().ln();
                let diff: f64 = g.iter().zip(q.iter().zip(&p)).map(|(x, (a, b))| (a - b) * (x.ln() - ln_s)).sum();
                cq - cp + diff
            })
            .collect();
        let (m, v) = mean_var(&samples);
        let z = (m - kl_dirichlet(&q, &p)?).abs() / (v / MC_DRAWS as f64).sqrt();
        worst_z = worst_z.max(z);
    }
    Ok(below(worst_z, 3.0).with("largest deviation in standard errors over 20 pairs"))
}

/// The combined weight and vector divergence with known `κ`, written term
/// by term from the factor decomposition.
pub fn combined_formula(post: &PosteriorParams, alpha0_p: f64, kappas: &[usize]) -> Result<(f64, f64)> {
    let a = post.alphas().data();
    let a0: f64 = a.iter().sum();
    let mut l_d = log_gamma(a0)? - log_gamma(alpha0_p)?;
    let mut spread = 0.0;
    for (i, &k) in kappas.iter().enumerate() {
        let k = k as f64;
        l_d -= k * (log_gamma(a[i] / k)? - log_gamma(alpha0_p * a[i] / (a0 * k))?);
        spread += a[i] * (digamma(a[i] / k)? - digamma(a0)?);
    }
    l_d += (1.0 - alpha0_p / a0) * spread;
    let mut l_g = 0.0;
    for (i, &k) in kappas.iter().enumerate() {
        let mut s = 0.0;
        for h in 0..post.dim() {
            let mu = post.mus().get(i, h);
            let var = (2.0 * post.log_sigmas().get(i, h)).exp();
            s += mu * mu + var - 1.0 - var.ln();
        }
        l_g += 0.5 * k as f64 * s;
    }
    Ok((l_d, l_g))
}

fn closed_form_consistency() -> Result<Outcome> {
    let mut noise = NoiseSource::new(77);
    let mut worst: f64 = 0.0;
    let base = GaussianDiag::standard(3);
    for _ in 0..200 {
        let k = 1 + noise.below(6);
        let post = random_posterior(&mut noise, k, 3)?;
        let kappas: Vec<usize> = (0..k).map(|_| 1 + noise.below(6)).collect();
        let alpha0_p = 0.3 + 4.0 * noise.uniform();
        let (ld, lg) = kl_value(&post, |v| kl_bfdp_given_kappa(v, alpha0_p, &kappas, &base))?;
        let (od, og) = combined_formula(&post, alpha0_p, &kappas)?;
        worst = worst.max((ld - od).abs() / od.abs().max(1.0)).max((lg - og).abs() / og.abs().max(1.0));
    }
    Ok(below(worst, 1e-10))
}

fn one_sample_unit_kappa() -> Result<Outcome> {
    let mut noise = NoiseSource::new(78);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k = 1 + noise.below(8);
        let post = random_posterior(&mut noise, k, 4)?;
        let alpha0_p = 0.3 + 6.0 * noise.uniform();
        let base = GaussianDiag::standard(4);
        let a = kl_value(&post, |v| kl_one_sample(v, alpha0_p, &base))?;
        let b = kl_value(&post, |v| kl_bfdp_given_kappa(v, alpha0_p, &vec![1; k], &base))?;
        worst = worst.max((a.0 - b.0).abs()).max((a.1 - b.1).abs());
    }
    Ok(below(worst, 1e-10).with("100 random posteriors"))
}

fn conditional_prior_zero() -> Result<Outcome> {
    let cfg = NvibConfig::default();
    let mut noise = NoiseSource::new(12);
    let mut worst: f64 = 0.0;
    for n in 1..20 {
        let target = cfg.target_alpha0(n);
        let raw: Vec<f64> = (0..n + 1).map(|_| noise.uniform() + 0.01).collect();
        let s: f64 = raw.iter().sum();
        let post = PosteriorParams::new(
            Tensor::col_vector(raw.iter().map(|r| r * target / s).collect()),
            noise.normal_tensor(n + 1, 2),
            Tensor::zeros(n + 1, 2),
        )?;
        let (ld, _) = kl_value(&post, |v| kl_bfdp_expected_kappa(v, target, n as f64, &GaussianDiag::standard(2)))?;
        worst = worst.max(ld.abs());
    }
    Ok(below(worst, 1e-10))
}

fn prior_only_zero_kl() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for (alpha0_p, delta) in [(1.0, 1.0), (1.0, 0.2), (2.5, 0.5)] {
        let cfg = NvibConfig { alpha0_p, delta_p: delta, ..NvibConfig::default() };
        for n in 1..6 {
            // Prior component only, carrying the whole target mass.
            let post = PosteriorParams::new(
                Tensor::col_vector([vec![0.0; n], vec![cfg.target_alpha0(n)]].concat()),
                Tensor::zeros(n + 1, 3),
                Tensor::zeros(n + 1, 3),
            )?;
            let tape = Tape::new();
            let s = nvib_forward_train(&post.constants(&tape), &cfg, &mut NoiseSource::new(n as u64))?;
            worst = worst.max(s.kl.l_d.item().abs()).max(s.kl.l_g.item().abs());
        }
    }
    Ok(below(worst, 1e-10))
}

// -------------------------------------------------------------- gradients

const TRIALS: u64 = 50;
const LEAF_TOL: f64 = 1e-5;

fn probe(rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|k| (1.3 * k as f64 + 0.1).sin() + 0.5).collect())
}

fn contract<'t>(out: Var<'t>) -> Var<'t> {
    let c = out.tape().constant(probe(out.rows(), out.cols()));
    (out * c).sum()
}

fn positive(noise: &mut NoiseSource, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    noise.uniform_tensor(r, c).map(|u| lo + (hi - lo) * u)
}

fn away_from_zero(noise: &mut NoiseSource, r: usize, c: usize) -> Tensor {
    noise.normal_tensor(r, c).map(|x| if x.abs() < 0.05 { x + 0.1_f64.copysign(x) } else { x })
}

/// Worst relative error of one op over [`TRIALS`] random inputs.
fn grad_worst<G, F>(gen: G, f: F) -> f64
where
    G: Fn(&mut NoiseSource) -> Vec<Tensor>,
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let mut worst: f64 = 0.0;
    for seed in 0..TRIALS {
        let mut noise = NoiseSource::new(seed * 7919 + 1);
        let inputs = gen(&mut noise);
        worst = worst.max(check_gradients(&inputs, GradCheckConfig::default(), |t, v| contract(f(t, v))).max_rel_error);
    }
    worst
}

struct Worst {
    value: f64,
    name: &'static str,
}

impl Worst {
    fn new() -> Self {
        Worst { value: 0.0, name: "" }
    }

    fn add(&mut self, name: &'static str, e: f64) {
        if e > self.value || e.is_nan() {
            self.value = if e.is_nan() { f64::INFINITY } else { e };
            self.name = name;
        }
    }

    fn outcome(self, tol: f64) -> Outcome {
        let name = self.name;
        below(self.value, tol).with(format!("worst op {name}"))
    }
}

fn op_gradients() -> Result<Outcome> {
    let mut w = Worst::new();
    let n34 = |n: &mut NoiseSource| vec![n.normal_tensor(3, 4)];
    let two = |n: &mut NoiseSource| vec![n.normal_tensor(3, 4), n.normal_tensor(3, 4)];
    let pos = |n: &mut NoiseSource| vec![positive(n, 3, 4, 0.2, 3.0)];
    let kinked = |n: &mut NoiseSource| vec![away_from_zero(n, 3, 4)];
    let row = |n: &mut NoiseSource| vec![n.normal_tensor(3, 4), n.normal_tensor(1, 4)];
    let col = |n: &mut NoiseSource| vec![n.normal_tensor(3, 4), n.normal_tensor(3, 1)];
    let sc = |n: &mut NoiseSource| vec![n.normal_tensor(3, 4), n.normal_tensor(1, 1)];
    w.add("add", grad_worst(two, |_, v| v[0] + v[1]));
    w.add("sub", grad_worst(two, |_, v| v[0] - v[1]));
    w.add("mul", grad_worst(two, |_, v| v[0] * v[1]));
    w.add("div", grad_worst(|n| vec![n.normal_tensor(3, 4), positive(n, 3, 4, 0.5, 2.0)], |_, v| v[0] / v[1]));
    w.add("neg", grad_worst(n34, |_, v| -v[0]));
    w.add("add_row", grad_worst(row, |_, v| v[0].add_row(v[1])));
    w.add("mul_row", grad_worst(row, |_, v| v[0].mul_row(v[1])));
    w.add("add_col", grad_worst(col, |_, v| v[0].add_col(v[1])));
    w.add("mul_col", grad_worst(col, |_, v| v[0].mul_col(v[1])));
    w.add("add_scalar_var", grad_worst(sc, |_, v| v[0].add_scalar_var(v[1])));
    w.add("mul_scalar_var", grad_worst(sc, |_, v| v[0].mul_scalar_var(v[1])));
    w.add("scale", grad_worst(n34, |_, v| v[0].scale(-2.5)));
    w.add("offset", grad_worst(n34, |_, v| v[0].offset(1.5)));
    w.add("exp", grad_worst(n34, |_, v| v[0].exp()));
    w.add("square", grad_worst(n34, |_, v| v[0].square()));
    w.add("ln", grad_worst(pos, |_, v| v[0].ln()));
    w.add("sqrt", grad_worst(pos, |_, v| v[0].sqrt()));
    w.add("recip", grad_worst(pos, |_, v| v[0].recip()));
    w.add("log_gamma", grad_worst(pos, |_, v| v[0].log_gamma()));
    w.add("digamma", grad_worst(pos, |_, v| v[0].digamma()));
    w.add("relu", grad_worst(kinked, |_, v| v[0].relu()));
    w.add("clamp", grad_worst(kinked, |_, v| v[0].clamp(-0.5, 0.5)));
    w.add("floor_at", grad_worst(kinked, |_, v| v[0].floor_at(0.0)));
    w.add("matmul", grad_worst(|n| vec![n.normal_tensor(3, 4), n.normal_tensor(4, 2)], |_, v| v[0].matmul(v[1])));
    w.add("matmul_t", grad_worst(|n| vec![n.normal_tensor(3, 4), n.normal_tensor(5, 4)], |_, v| v[0].matmul_t(v[1])));
    w.add("t", grad_worst(n34, |_, v| v[0].t()));
    w.add("select_rows", grad_worst(n34, |_, v| v[0].select_rows(&[2, 0, 2])));
    w.add("row", grad_worst(n34, |_, v| v[0].row(1)));
    w.add("pick", grad_worst(n34, |_, v| v[0].pick(&[(0, 1), (2, 3), (0, 1)])));
    w.add(
        "concat_rows",
        grad_worst(|n| vec![n.normal_tensor(2, 3), n.normal_tensor(1, 3)], |_, v| Var::concat_rows(&[v[0], v[1], v[0]])),
    );
    w.add("sum", grad_worst(n34, |_, v| v[0].sum()));
    w.add("mean", grad_worst(n34, |_, v| v[0].mean()));
    w.add("sum_rows", grad_worst(n34, |_, v| v[0].sum_rows()));
    w.add("sum_cols", grad_worst(n34, |_, v| v[0].sum_cols()));
    w.add("column_max", grad_worst(n34, |_, v| v[0].column_max()));
    w.add("softmax_rows", grad_worst(n34, |_, v| v[0].softmax_rows()));
    w.add("log_softmax_rows", grad_worst(n34, |_, v| v[0].log_softmax_rows()));
    w.add("logsumexp_rows", grad_worst(n34, |_, v| v[0].logsumexp_rows()));
    w.add("layer_norm_rows", grad_worst(n34, |_, v| v[0].layer_norm_rows(1e-5)));
    Ok(w.outcome(LEAF_TOL))
}

fn sampler_gradients() -> Result<Outcome> {
    let mut w = Worst::new();
    w.add(
        "location_scale",
        grad_worst(
            |n| vec![n.normal_tensor(3, 4), positive(n, 3, 4, 0.1, 2.0)],
            |_, v| location_scale(v[0], v[1], &NoiseSource::new(3).normal_tensor(3, 4)),
        ),
    );
    let alphas = |n: &mut NoiseSource| {
        let lo = positive(n, 1, 3, 0.05, 0.6);
        let hi = positive(n, 1, 3, 0.7, 20.0);
        vec![Tensor::from_vec(1, 6, lo.data().iter().chain(hi.data()).copied().collect())]
    };
    let fixed = |seed| {
        let g = GammaNoise::draw(&mut NoiseSource::new(seed), 1, 6);
        GammaNoise { u: g.u, eps: g.eps.map(|e| e.clamp(-0.6, 0.6)) }
    };
    w.add("log_gamma_sample", grad_worst(alphas, |_, v| log_gamma_sample(v[0], &fixed(5))));
    w.add("log_dirichlet_sample", grad_worst(alphas, |_, v| log_dirichlet_sample(v[0], &fixed(6))));
    Ok(w.outcome(LEAF_TOL))
}

fn posterior_inputs(n: &mut NoiseSource, k: usize, d: usize) -> Vec<Tensor> {
    vec![positive(n, k, 1, 0.2, 4.0), n.normal_tensor(k, d), n.normal_tensor(k, d).scale(0.5)]
}

fn posterior<'t>(v: &[Var<'t>]) -> PosteriorVars<'t> {
    PosteriorVars { alphas: v[0], mus: v[1], log_sigmas: v[2] }
}

fn kl_pair(kl: nvib_core::divergences::KlTerms<'_>) -> Var<'_> {
    Var::concat_rows(&[kl.l_d, kl.l_g])
}

fn kl_gradients() -> Result<Outcome> {
    let base = GaussianDiag::standard(3);
    let gen = |n: &mut NoiseSource| posterior_inputs(n, 4, 3);
    let mut w = Worst::new();
    w.add("kl_one_sample", grad_worst(gen, |_, v| kl_pair(kl_one_sample(&posterior(v), 2.5, &base).expect("valid"))));
    w.add(
        "kl_bfdp_given_kappa",
        grad_worst(gen, |_, v| kl_pair(kl_bfdp_given_kappa(&posterior(v), 1.5, &[1, 3, 2, 5], &base).expect("valid"))),
    );
    w.add(
        "kl_bfdp_expected_kappa",
        grad_worst(gen, |_, v| kl_pair(kl_bfdp_expected_kappa(&posterior(v), 1.5, 6.0, &base).expect("valid"))),
    );
    Ok(w.outcome(1e-4))
}

fn attention_gradients() -> Result<Outcome> {
    let mut w = Worst::new();
    w.add(
        "attn",
        grad_worst(|n| vec![n.normal_tensor(2, 4), n.normal_tensor(5, 4)], |_, v| attn(v[0], v[1], 4).expect("shapes")),
    );
    w.add("impulse_log_weights", grad_worst(|n| vec![n.normal_tensor(5, 4)], |_, v| impulse_log_weights(v[0], 4)));
    w.add(
        "dattn_discrete",
        grad_worst(
            |n| vec![n.normal_tensor(2, 4), n.normal_tensor(1, 5), n.normal_tensor(5, 4)],
            |_, v| dattn_discrete(v[0], v[1], v[2], 4).expect("shapes"),
        ),
    );
    w.add(
        "dattn_gaussian_mixture",
        grad_worst(
            |n| {
                let mut inputs = vec![n.normal_tensor(2, 3)];
                inputs.extend(posterior_inputs(n, 4, 3));
                inputs
            },
            |_, v| dattn_gaussian_mixture(v[0], &posterior(&v[1..]), 3).expect("shapes"),
        ),
    );
    Ok(w.outcome(LEAF_TOL))
}

fn full_gradients() -> Result<Outcome> {
    let batch = micro_batch()?;
    let mut worst: f64 = 0.0;
    let mut detail = String::new();
    for variant in [Variant::Nvae, Variant::Vt, Variant::Vtp(nvib_model::Pooling::Max), Variant::Vts(0.5), Variant::T] {
        let mut model = micro_model(variant, 3)?;
        let r = check_model_gradients(&mut model, &batch, 11, GradCheckConfig::default())?;
        if r.max_rel_error >= worst {
            worst = r.max_rel_error;
            detail = format!("worst {variant} at {}[{}]", r.worst.0, r.worst.1);
        }
    }
    Ok(below(worst, 1e-3).with(detail))
}

/// Random toy sentences of 3 to 8 tokens.
fn toy_sentences(count: usize, vocab: usize, seed: u64) -> Result<Vec<TokenSequence>> {
    let mut noise = NoiseSource::new(seed);
    (0..count)
        .map(|_| {
            let len = 3 + noise.below(6);
            Ok(TokenSequence::new((0..len).map(|_| 3 + noise.below(vocab - 3)).collect())?)
        })
        .collect()
}

fn monotone_loss() -> Result<Outcome> {
    let seqs = toy_sentences(32, 20, 5)?;
    let mut cfg = ModelConfig::toy(20, 10, Variant::Nvae);
    cfg.dropout = 0.0;
    cfg.nvib.lambda_d_prime = 0.0;
    cfg.nvib.lambda_g_prime = 0.0;
    let model = Autoencoder::new(cfg, 6)?;
    let mut trainer = Trainer::new(model, TrainConfig { batch_size: 32, ..TrainConfig::default() }, 7);
    let mut prev = trainer.model.evaluate(&seqs)?.loss.l_r;
    let start = prev;
    let mut worst_rise: f64 = 0.0;
    for _ in 0..50 {
        trainer.step_on(&seqs)?;
        let now = trainer.model.evaluate(&seqs)?.loss.l_r;
        worst_rise = worst_rise.max(now - prev);
        prev = now;
    }
    Ok(Outcome {
        measured: worst_rise,
        threshold: 0.0,
        passed: worst_rise <= 0.0 && prev < start,
        detail: format!("eval loss {start:.4} -> {prev:.4}"),
    })
}

// -------------------------------------------------------------------- fdp

fn total_weight_beta() -> Result<Outcome> {
    let (a1, a2) = (1.3, 2.7);
    let g = GaussianDiag::standard(1);
    let spec = BoundedDpSpec::new(vec![(g.clone(), a1), (g, a2)], vec![3, 4])?;
    let mut noise = NoiseSource::new(8);
    let n = 10_000;
    let mut ours = Vec::with_capacity(n);
    let mut w0 = Vec::with_capacity(n);
    for _ in 0..n {
        let s = sample_bfdp(&spec, &mut noise, GammaSampler::Exact)?;
        let total: f64 = s.weights.iter().zip(&s.component_of).filter(|(_, &c)| c == 0).map(|(w, _)| w).sum();
        ours.push(total);
        w0.push(s.totals[0]);
    }
    let beta = Beta::new(a1, a2).map_err(|e| HarnessError::Input(e.to_string()))?;
    let mut direct: Vec<f64> = (0..n).map(|_| beta.sample(noise.rng())).collect();
    let d = ks_statistic(&mut ours, &mut direct);
    let crit = ks_critical(n, n, 0.01);
    let (m, v) = mean_var(&w0);
    let z = (m - a1 / (a1 + a2)).abs() / (v / n as f64).sqrt();
    Ok(Outcome {
        measured: d,
        threshold: crit,
        passed: d < crit && z < 3.0,
        detail: format!("mean weight {m:.4} is {z:.2} SE from {:.4}", a1 / (a1 + a2)),
    })
}

fn fdp_expected_weights() -> Result<Outcome> {
    let g = GaussianDiag::new(vec![0.5, -0.5], vec![1.0, 2.0])?;
    let alphas = [0.4, 1.1, 2.5];
    let spec = BoundedDpSpec::new(alphas.iter().map(|&a| (g.clone(), a)).collect(), vec![2, 1, 3])?;
    let a0: f64 = alphas.iter().sum();
    let mut noise = NoiseSource::new(9);
    let n = 100_000;
    let mut totals: Vec<Vec<f64>> = (0..3).map(|_| Vec::with_capacity(n)).collect();
    for _ in 0..n {
        let s = sample_bfdp(&spec, &mut noise, GammaSampler::Exact)?;
        for (i, t) in s.totals.iter().enumerate() {
            totals[i].push(*t);
        }
    }
    let mut worst_z: f64 = 0.0;
    for (i, xs) in totals.iter().enumerate() {
        let (m, v) = mean_var(xs);
        worst_z = worst_z.max((m - alphas[i] / a0).abs() / (v / n as f64).sqrt());
    }
    Ok(below(worst_z, 3.0).with("largest deviation in standard errors, 10^5 draws"))
}
