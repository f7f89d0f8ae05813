//! Score an EP fit against a long-run Metropolis reference on a small
//! probit model: aggregated mean/SD deviations per parameter block, plus
//! the unbiased squared maximum mean discrepancy between joint draw sets.

use epmix::diagnostics::{dev_stats, mmd2_u_with_se, MarginalSummary};
use epmix::engine::{fit, EpConfig};
use epmix::model::{
    layout_of, seeded_rng, simulate_dataset, Likelihood, ModelSpec, PriorSpec, SimConfig,
    STREAM_MCMC, STREAM_SAMPLE,
};
use epmix::reference::{glmm_log_posterior, glmm_param_dim, rw_metropolis};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

fn main() -> epmix::Result<()> {
    let sim = SimConfig {
        likelihood: Likelihood::BinomialProbit,
        n_groups: 5,
        obs_per_group: 10,
        p: 2,
        q: 1,
        beta: DVector::from_vec(vec![0.6, -0.4]),
        lambda: None,
        sigma: DMatrix::from_element(1, 1, 0.5),
        offset: 0.0,
        trials: 5,
        seed: 17,
    };
    let (data, _) = simulate_dataset(&sim)?;
    let spec = ModelSpec {
        likelihood: sim.likelihood,
        priors: PriorSpec::diffuse(sim.likelihood, sim.p, sim.q),
    };
    let layout = layout_of(&spec, &data)?;
    let post = fit(&data, &spec, &EpConfig::default())?;

    println!("running the Metropolis reference (150k iterations)...");
    let mut rng = seeded_rng(17, STREAM_MCMC);
    let chain = rw_metropolis(
        |x| glmm_log_posterior(&data, &spec, &layout, x),
        &DVector::zeros(glmm_param_dim(&layout)),
        150_000,
        0.12,
        10,
        &mut rng,
    )?;
    println!("acceptance rate {:.2}", chain.acceptance);
    let kept = &chain.samples[chain.samples.len() / 5..];
    let dim = layout.dim();
    let mut ref_draws = DMatrix::zeros(kept.len(), dim);
    for (i, s) in kept.iter().enumerate() {
        for j in 0..dim {
            ref_draws[(i, j)] = s[j];
        }
    }
    let reference = MarginalSummary::from_samples(layout.labels(), &ref_draws)?;

    let (mean, sd) = post.theta_summaries();
    let approx = MarginalSummary::new(layout.labels(), mean, sd)?;
    println!("\nblock   dev(mu)  adev(mu)  dev(sd)  adev(sd)  n");
    for prefix in ["u[", "beta["] {
        let d = dev_stats(&approx, &reference, prefix)?;
        println!(
            "{:<6} {:>8.3} {:>9.3} {:>8.3} {:>9.3}  {}",
            prefix.trim_end_matches('['),
            d.dev_mu,
            d.adev_mu,
            d.dev_sigma,
            d.adev_sigma,
            d.n_components
        );
    }

    // Joint-draw discrepancy between the Gaussian approximation and the
    // chain, matched in draw count.
    let m = kept.len();
    let sampler = post.theta.sampler()?;
    let mut srng = seeded_rng(17, STREAM_SAMPLE);
    let mut ep_draws = DMatrix::zeros(m, dim);
    for i in 0..m {
        let noise = DVector::from_fn(dim, |_, _| srng.sample::<f64, _>(StandardNormal));
        let draw = sampler.draw(&noise);
        for j in 0..dim {
            ep_draws[(i, j)] = draw[j];
        }
    }
    let (mmd, se) = mmd2_u_with_se(&ep_draws, &ref_draws)?;
    println!("\nsquared discrepancy between draw sets: {mmd:.4} (se {se:.4})");
    Ok(())
}
