//! Quick scaling comparison: sparse-engine fit times grow about linearly in
//! the number of groups, dense-engine times much faster, because the dense
//! global carries an (LQ+H+P)^2 covariance through every site update. The
//! full study grid runs through the `bench` command; this example uses a
//! reduced grid to stay fast.

use std::time::Instant;

use epmix::engine::{fit, EpConfig};
use epmix::model::{simulate_dataset, Likelihood, ModelSpec, PriorSpec, SimConfig};
use epmix::reference::dense_ep_fit;

fn main() -> epmix::Result<()> {
    let cfg = EpConfig {
        max_passes: 2,
        min_passes: 2,
        ..EpConfig::default()
    };
    println!("groups  sparse(s)  dense(s)");
    let mut first: Option<(f64, f64)> = None;
    for l in [50usize, 100, 200] {
        let sim = SimConfig::study_defaults(Likelihood::BinomialProbit, l, 100 + l as u64);
        let (data, _) = simulate_dataset(&sim)?;
        let spec = ModelSpec {
            likelihood: sim.likelihood,
            priors: PriorSpec::diffuse(sim.likelihood, sim.p, sim.q),
        };

        let t0 = Instant::now();
        fit(&data, &spec, &cfg)?;
        let sparse = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        dense_ep_fit(&data, &spec, &cfg)?;
        let dense = t1.elapsed().as_secs_f64();

        println!("{l:>6}  {sparse:>9.3}  {dense:>8.3}");
        if first.is_none() {
            first = Some((sparse, dense));
        } else if l == 200 {
            let (s0, d0) = first.unwrap();
            println!(
                "\n4x the groups: sparse {:.1}x slower, dense {:.1}x slower",
                sparse / s0,
                dense / d0
            );
        }
    }
    Ok(())
}
