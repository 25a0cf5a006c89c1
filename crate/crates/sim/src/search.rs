//! Maximum stable offered rate of a configuration.

use log::debug;
use serde::{Deserialize, Serialize};
use streamcap_core::{Configuration, LogicalDag};

use crate::engine::{simulate, SimOptions};
use crate::error::{Error, Result};
use crate::truth::GroundTruth;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    /// First probe; doubled or halved until the stable region is bracketed.
    pub initial_rate: f64,
    /// Relative width of the final bracket.
    pub tolerance: f64,
    pub max_probes: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            initial_rate: 1000.0,
            tolerance: 0.01,
            max_probes: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxRate {
    /// Largest probed offered rate that ran stable.
    pub rate: f64,
    /// Smallest probed offered rate that ran unstable.
    pub unstable_at: f64,
    pub probes: Vec<Probe>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub offered: f64,
    pub achieved: f64,
    pub stable: bool,
}

/// Brackets the stable/unstable boundary, then bisects until `hi / lo - 1 <= tolerance`.
///
/// An overloaded run drains at roughly the bottleneck rate, so its achieved rate is tried
/// as the next probe before plain bisection.
pub fn find_max_rate(
    dag: &LogicalDag,
    gt: &GroundTruth,
    config: &Configuration,
    sim: &SimOptions,
    search: &SearchOptions,
) -> Result<MaxRate> {
    if !(search.initial_rate > 0.0) || !(search.tolerance > 0.0) {
        return Err(Error::InvalidArgument(
            "initial_rate and tolerance must be > 0".into(),
        ));
    }
    let mut probes = Vec::new();
    let probe = |rate: f64, probes: &mut Vec<Probe>| -> Result<Probe> {
        let r = simulate(dag, gt, config, rate, sim)?;
        let p = Probe {
            offered: rate,
            achieved: r.achieved_rate,
            stable: r.stable,
        };
        debug!("probe {rate:.2}: achieved {:.2}, stable {}", p.achieved, p.stable);
        probes.push(p);
        Ok(p)
    };

    let mut lo;
    let mut hi;
    let mut rate = search.initial_rate;
    let first = probe(rate, &mut probes)?;
    if first.stable {
        lo = rate;
        loop {
            rate *= 2.0;
            let p = probe(rate, &mut probes)?;
            if !p.stable {
                hi = rate;
                break;
            }
            lo = rate;
            if probes.len() >= search.max_probes {
                return Err(Error::InvalidArgument(format!(
                    "no unstable rate found up to {rate}"
                )));
            }
        }
    } else {
        hi = rate;
        loop {
            rate /= 2.0;
            let p = probe(rate, &mut probes)?;
            if p.stable {
                lo = rate;
                break;
            }
            hi = rate;
            if probes.len() >= search.max_probes || rate < 1e-6 {
                return Ok(MaxRate {
                    rate: 0.0,
                    unstable_at: hi,
                    probes,
                });
            }
        }
    }

    let hint = probes
        .iter()
        .filter(|p| !p.stable)
        .map(|p| p.achieved)
        .fold(f64::INFINITY, f64::min);
    let guess = hint * (1.0 - search.tolerance / 2.0);
    if guess > lo && guess < hi {
        let p = probe(guess, &mut probes)?;
        if p.stable {
            lo = guess;
            let above = (guess * (1.0 + search.tolerance)).min(hi);
            if above < hi {
                let q = probe(above, &mut probes)?;
                if q.stable {
                    lo = above;
                } else {
                    hi = above;
                }
            }
        } else {
            hi = guess;
        }
    }
    while hi / lo - 1.0 > search.tolerance && probes.len() < search.max_probes {
        let mid = (lo * hi).sqrt();
        if probe(mid, &mut probes)?.stable {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(MaxRate {
        rate: lo,
        unstable_at: hi,
        probes,
    })
}
