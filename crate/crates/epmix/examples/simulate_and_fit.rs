//! Simulate a binomial-probit mixed model at the simulation-study settings
//! and fit it, printing the shared-block posterior and the pass trace.

use epmix::engine::{fit, EpConfig};
use epmix::model::{simulate_dataset, Likelihood, ModelSpec, PriorSpec, SimConfig};

fn main() -> epmix::Result<()> {
    let mut sim = SimConfig::study_defaults(Likelihood::BinomialProbit, 30, 7);
    sim.trials = 5;
    let (data, truth) = simulate_dataset(&sim)?;
    println!(
        "simulated {} observations in {} groups (p = {}, q = {})",
        data.n_obs(),
        data.n_groups(),
        data.p(),
        data.q()
    );

    let spec = ModelSpec {
        likelihood: sim.likelihood,
        priors: PriorSpec::diffuse(sim.likelihood, sim.p, sim.q),
    };
    let cfg = EpConfig {
        max_passes: 12,
        ..EpConfig::default()
    };
    let post = fit(&data, &spec, &cfg)?;
    println!(
        "finished after {} passes (converged flag: {}, skipped refinements: {})",
        post.passes,
        post.converged,
        post.skips.total()
    );

    let (mean, sd) = post.theta_summaries();
    let labels = post.layout.labels();
    println!("\n{:<10} {:>10} {:>9} {:>9}", "component", "estimate", "sd", "truth");
    for j in 0..post.layout.p {
        let i = post.layout.fixed_range().start + j;
        println!(
            "{:<10} {:>10.4} {:>9.4} {:>9.4}",
            labels[i], mean[i], sd[i], truth.beta[j]
        );
    }
    let sigma_hat = post.sigma.mean()?;
    println!("\ngroup covariance estimate vs truth:");
    for i in 0..post.layout.q {
        for j in 0..post.layout.q {
            print!("  {:>7.4}/{:<7.4}", sigma_hat[(i, j)], truth.sigma[(i, j)]);
        }
        println!();
    }

    println!("\npass  max|dr|_like  max|dQ|_like");
    for s in &post.trace {
        println!("{:>4}  {:>12.3e}  {:>12.3e}", s.pass, s.like_info, s.like_prec);
    }
    Ok(())
}
