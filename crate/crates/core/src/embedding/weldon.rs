use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel max+min region aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeldonConfig {
    pub k_plus: usize,
    pub k_minus: usize,
    /// Weight on the mean of the lowest activations.
    pub beta: f64,
}

impl Default for WeldonConfig {
    fn default() -> Self {
        Self {
            k_plus: 3,
            k_minus: 3,
            beta: 1.0,
        }
    }
}

impl WeldonConfig {
    pub fn regions_needed(&self) -> usize {
        self.k_plus + self.k_minus
    }
}

/// Pools `regions: [R×d]` to `[d]`: for every channel, the mean of its
/// `k_plus` largest values plus `beta` times the mean of its `k_minus`
/// smallest. Top values are summed in descending order, bottom values in
/// ascending order.
pub fn weldon_pool(regions: &Tensor, cfg: &WeldonConfig) -> Result<Tensor> {
    if regions.rank() != 2 {
        return Err(Error::dim("weldon_pool", regions.shape(), &[0, 0]));
    }
    let (r, d) = (regions.shape()[0], regions.shape()[1]);
    if cfg.k_plus == 0 {
        return Err(Error::Config("weldon k_plus must be positive".into()));
    }
    if r < cfg.regions_needed() {
        return Err(Error::PoolingConfig {
            needed: cfg.regions_needed(),
            regions: r,
        });
    }
    let mut column = vec![0.0; r];
    let mut out = Vec::with_capacity(d);
    for c in 0..d {
        for (i, v) in column.iter_mut().enumerate() {
            *v = regions.at(i, c);
        }
        out.push(pool_column(&mut column, cfg));
    }
    Ok(Tensor::vector(out))
}

fn pool_column(column: &mut [f64], cfg: &WeldonConfig) -> f64 {
    let desc = |a: &f64, b: &f64| b.total_cmp(a);
    let r = column.len();
    let top = {
        if cfg.k_plus < r {
            column.select_nth_unstable_by(cfg.k_plus - 1, desc);
        }
        let head = &mut column[..cfg.k_plus];
        head.sort_unstable_by(desc);
        head.iter().fold(0.0, |s, v| s + v) / cfg.k_plus as f64
    };
    if cfg.k_minus == 0 {
        return top;
    }
    let asc = |a: &f64, b: &f64| a.total_cmp(b);
    if cfg.k_minus < r {
        column.select_nth_unstable_by(cfg.k_minus - 1, asc);
    }
    let tail = &mut column[..cfg.k_minus];
    tail.sort_unstable_by(asc);
    let bottom = tail.iter().fold(0.0, |s, v| s + v) / cfg.k_minus as f64;
    top + cfg.beta * bottom
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_plus_min() {
        let regions = Tensor::from_rows(&[[3.0], [1.0], [2.0]]).unwrap();
        let cfg = WeldonConfig {
            k_plus: 1,
            k_minus: 1,
            beta: 1.0,
        };
        assert_eq!(weldon_pool(&regions, &cfg).unwrap().data(), &[4.0]);
    }

    #[test]
    fn full_top_k_is_mean() {
        let regions = Tensor::from_rows(&[[1.0, 10.0], [2.0, 20.0], [6.0, 0.0]]).unwrap();
        let cfg = WeldonConfig {
            k_plus: 3,
            k_minus: 0,
            beta: 1.0,
        };
        assert_eq!(weldon_pool(&regions, &cfg).unwrap().data(), &[3.0, 10.0]);
    }

    #[test]
    fn too_few_regions() {
        let regions = Tensor::zeros(&[4, 2]);
        let cfg = WeldonConfig::default();
        assert!(matches!(
            weldon_pool(&regions, &cfg),
            Err(Error::PoolingConfig {
                needed: 6,
                regions: 4
            })
        ));
    }
}
