//! Fit a zero-inflated Poisson model with exposure offsets and check the
//! recovered fixed effects and zero-inflation logit against the simulation
//! truth.

use epmix::engine::{fit, EpConfig};
use epmix::model::{simulate_dataset, Likelihood, ModelSpec, PriorSpec, SimConfig};
use nalgebra::{DMatrix, DVector};

fn main() -> epmix::Result<()> {
    let sim = SimConfig {
        likelihood: Likelihood::Zip,
        n_groups: 40,
        obs_per_group: 12,
        p: 3,
        q: 1,
        beta: DVector::from_vec(vec![0.8, -0.5, 0.3]),
        lambda: Some(-1.5),
        sigma: DMatrix::from_element(1, 1, 0.3),
        offset: -0.7,
        trials: 1,
        seed: 11,
    };
    let (data, truth) = simulate_dataset(&sim)?;
    let zeros = data.y.iter().filter(|&&y| y == 0).count();
    println!(
        "{} observations, {} zeros ({:.0}%)",
        data.n_obs(),
        zeros,
        100.0 * zeros as f64 / data.n_obs() as f64
    );

    let spec = ModelSpec {
        likelihood: sim.likelihood,
        priors: PriorSpec::diffuse(sim.likelihood, sim.p, sim.q),
    };
    let post = fit(&data, &spec, &EpConfig { max_passes: 15, ..EpConfig::default() })?;
    let (mean, sd) = post.theta_summaries();
    let labels = post.layout.labels();

    println!("\n{:<10} {:>9} {:>8} {:>8} {:>8}", "component", "estimate", "sd", "truth", "z");
    let shared = post.layout.shared_range();
    for i in shared {
        let true_val = if i == post.layout.hyper_range().start {
            truth.lambda.unwrap()
        } else {
            truth.beta[i - post.layout.fixed_range().start]
        };
        let z = (mean[i] - true_val) / sd[i];
        println!(
            "{:<10} {:>9.4} {:>8.4} {:>8.4} {:>8.2}",
            labels[i], mean[i], sd[i], true_val, z
        );
    }
    println!(
        "\nsigma estimate {:.4} (truth {:.4}), {} passes",
        post.sigma.mean()?[(0, 0)],
        truth.sigma[(0, 0)],
        post.passes
    );
    Ok(())
}
