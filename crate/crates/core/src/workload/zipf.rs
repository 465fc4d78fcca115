use rand::Rng;

use super::WorkloadError;

/// Sampler over ranks `0..n` with P(rank r) proportional to 1/(r+1)^s.
#[derive(Debug, Clone)]
pub struct ZipfTable {
    exponent: f64,
    cdf: Vec<f64>,
}

impl ZipfTable {
    pub fn new(n: usize, exponent: f64) -> Self {
        assert!(n > 0, "zipf universe must be nonempty");
        let mut cdf = Vec::with_capacity(n);
        let mut acc = 0.0;
        for r in 0..n {
            acc += weight(r, exponent);
            cdf.push(acc);
        }
        for c in &mut cdf {
            *c /= acc;
        }
        *cdf.last_mut().unwrap() = 1.0;
        Self { exponent, cdf }
    }

    pub fn len(&self) -> usize {
        self.cdf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cdf.is_empty()
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    /// Probability mass of ranks `0..k`.
    pub fn mass_of_top(&self, k: usize) -> f64 {
        match k {
            0 => 0.0,
            k => self.cdf[(k - 1).min(self.cdf.len() - 1)],
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }
}

fn weight(rank: usize, s: f64) -> f64 {
    ((rank + 1) as f64).powf(-s)
}

fn top_count(universe: usize, top_fraction: f64) -> usize {
    ((top_fraction * universe as f64).ceil() as usize).clamp(1, universe)
}

/// Analytic mass on the top `top_fraction` of `universe` ranks.
pub fn top_mass(universe: usize, top_fraction: f64, exponent: f64) -> f64 {
    let k = top_count(universe, top_fraction);
    let (mut head, mut total) = (0.0, 0.0);
    for r in 0..universe {
        let w = weight(r, exponent);
        total += w;
        if r < k {
            head += w;
        }
    }
    head / total
}

/// Smallest exponent (to bisection precision) whose top ranks carry at
/// least `mass_fraction`; the mass it yields exceeds the target by less
/// than 0.005.
pub fn calibrate_zipf(universe: usize, top_fraction: f64, mass_fraction: f64) -> Result<f64, WorkloadError> {
    if universe < 2 || !(top_fraction > 0.0 && top_fraction < 1.0) {
        return Err(WorkloadError::InvalidSpec(format!(
            "calibration needs universe > 1 and 0 < top_fraction < 1 (got {universe}, {top_fraction})"
        )));
    }
    let unachievable = WorkloadError::Unachievable {
        top_fraction,
        mass_fraction,
    };
    if !(mass_fraction > 0.0 && mass_fraction < 1.0) {
        return Err(unachievable);
    }
    let mass = |s: f64| top_mass(universe, top_fraction, s);
    if mass(0.0) >= mass_fraction {
        return Ok(0.0);
    }
    let mut hi = 1.0;
    while mass(hi) < mass_fraction {
        hi *= 2.0;
        if hi > 1024.0 {
            return Err(unachievable);
        }
    }
    let mut lo = 0.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) >= mass_fraction {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-9 || mass(hi) - mass_fraction < 1e-4 {
            break;
        }
    }
    Ok(hi)
}
