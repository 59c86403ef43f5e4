//! Random benchmark instances.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::{ExperimentError, Result};
use crate::rng::rng_for;
use crate::trajopt::{Instance, Obstacle};

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Uniform initial state, then obstacles drawn one at a time and rejected
/// while they touch an earlier obstacle, a transit region or (optionally)
/// the initial-position box. The draw budget covers the whole instance.
pub fn sample_instance(cfg: &ExperimentConfig, seed: u64) -> Result<Instance> {
    let mut rng = rng_for(seed, &[]);
    let i = &cfg.init;
    let x0 = vec![
        draw(&mut rng, i.p1),
        draw(&mut rng, i.p2),
        draw(&mut rng, i.theta),
        draw(&mut rng, i.v),
        0.0,
    ];
    let o = &cfg.obstacles;
    let init_box = i.region();
    let mut placed: Vec<Obstacle> = Vec::with_capacity(o.count);
    let mut draws = 0;
    while placed.len() < o.count {
        if draws == o.max_draws {
            return Err(ExperimentError::Sampling { seed, draws });
        }
        draws += 1;
        let cand = Obstacle {
            center: [draw(&mut rng, o.c1), draw(&mut rng, o.c2)],
            radius: draw(&mut rng, o.radius),
        };
        let clash = placed.iter().any(|p| p.overlaps(&cand))
            || cfg.regions.transit.iter().any(|t| t.meets_disk(cand.center, cand.radius))
            || (o.avoid_init_region && init_box.meets_disk(cand.center, cand.radius));
        if !clash {
            placed.push(cand);
        }
    }
    Ok(Instance {
        x0,
        xi: placed.iter().map(Obstacle::xi).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_instance() {
        let c = ExperimentConfig::default();
        assert_eq!(sample_instance(&c, 5).unwrap(), sample_instance(&c, 5).unwrap());
        assert_ne!(sample_instance(&c, 5).unwrap(), sample_instance(&c, 6).unwrap());
    }

    #[test]
    fn impossible_layout_exhausts_budget() {
        let mut c = ExperimentConfig::default();
        c.obstacles.c1 = [2.0, 2.0];
        c.obstacles.c2 = [9.0, 9.0];
        c.obstacles.max_draws = 50;
        assert!(matches!(
            sample_instance(&c, 0),
            Err(ExperimentError::Sampling { draws: 50, .. })
        ));
    }
}
