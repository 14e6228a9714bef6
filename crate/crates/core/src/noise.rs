//! Controlled corruption of segmentations for robustness tests.
//!
//! Noise level is measured the way it is reported: the fraction of pixels of
//! the hard raster that change. Every rectangle corner gets a fixed Gaussian
//! direction drawn from the seed; a single scale `sigma` is then searched
//! (geometric growth, then bisection) until the measured difference lands
//! within one percentage point of the requested level. Because the
//! directions do not depend on the level, larger levels perturb the same
//! rectangles the same way, only further.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{rasterize_labels, Rect, RectLayout};

pub const MAX_NOISE_LEVEL: f64 = 0.3;
/// Accepted distance between measured and requested pixel difference.
pub const NOISE_TOLERANCE: f64 = 0.01;
/// Smallest extent a jittered rectangle keeps along either axis.
const MIN_EXTENT: f64 = 1e-4;
const GROWTH_STEPS: usize = 24;
const BISECTION_STEPS: usize = 48;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum NoiseError {
    #[error("noise level {0} outside [0, {MAX_NOISE_LEVEL}]")]
    InvalidLevel(f64),
    #[error("evaluation resolution must be at least 1")]
    InvalidResolution,
    #[error("could not reach noise level {target}; closest measured {achieved}")]
    UnreachableNoiseLevel { target: f64, achieved: f64, closest: RectLayout },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyLayout {
    pub layout: RectLayout,
    /// Measured fraction of changed pixels.
    pub achieved: f64,
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Orders and widens an interval so it has at least `MIN_EXTENT` inside [0, 1].
fn settle(a: f64, b: f64) -> (f64, f64) {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    if hi - lo >= MIN_EXTENT {
        return (lo, hi);
    }
    let lo = lo.min(1.0 - MIN_EXTENT);
    (lo, lo + MIN_EXTENT)
}

fn jitter(layout: &RectLayout, dirs: &[[f64; 4]], sigma: f64) -> RectLayout {
    RectLayout::new(
        layout
            .rects
            .iter()
            .zip(dirs)
            .map(|(r, d)| {
                let (x0, x1) = settle(clamp01(r.x + sigma * d[0]), clamp01(r.right() + sigma * d[2]));
                let (y0, y1) = settle(clamp01(r.y + sigma * d[1]), clamp01(r.top() + sigma * d[3]));
                Rect::new(r.label, x0, y0, x1 - x0, y1 - y0)
            })
            .collect(),
    )
}

/// Perturbs `layout` so that about `target` of the pixels change at
/// `eval_res`×`eval_res`. A zero level returns the input unchanged.
pub fn inject_noise(layout: &RectLayout, target: f64, seed: u64, eval_res: usize) -> Result<NoisyLayout, NoiseError> {
    if !(0.0..=MAX_NOISE_LEVEL).contains(&target) {
        return Err(NoiseError::InvalidLevel(target));
    }
    if eval_res == 0 {
        return Err(NoiseError::InvalidResolution);
    }
    if target == 0.0 {
        return Ok(NoisyLayout { layout: layout.clone(), achieved: 0.0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<[f64; 4]> = layout
        .rects
        .iter()
        .map(|_| std::array::from_fn(|_| StandardNormal.sample(&mut rng)))
        .collect();
    let clean = rasterize_labels(layout, eval_res, eval_res);
    let measure = |sigma: f64| {
        let noisy = jitter(layout, &dirs, sigma);
        let diff = rasterize_labels(&noisy, eval_res, eval_res).mismatch_fraction(&clean);
        (noisy, diff)
    };
    let mut best: Option<(RectLayout, f64)> = None;
    let mut consider = |noisy: RectLayout, diff: f64| -> bool {
        if best.as_ref().is_none_or(|(_, d)| (diff - target).abs() < (d - target).abs()) {
            best = Some((noisy, diff));
        }
        (diff - target).abs() <= NOISE_TOLERANCE
    };

    // Grow until the target is bracketed.
    let mut lo = 0.0;
    let mut hi = 0.25 / eval_res as f64;
    let mut bracketed = false;
    for _ in 0..GROWTH_STEPS {
        let (noisy, diff) = measure(hi);
        if consider(noisy, diff) {
            let (layout, achieved) = best.expect("just set");
            return Ok(NoisyLayout { layout, achieved });
        }
        if diff > target {
            bracketed = true;
            break;
        }
        lo = hi;
        hi *= 2.0;
    }
    if bracketed {
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            let (noisy, diff) = measure(mid);
            if consider(noisy, diff) {
                let (layout, achieved) = best.expect("just set");
                return Ok(NoisyLayout { layout, achieved });
            }
            if diff > target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }
    let (closest, achieved) = best.expect("at least one measurement");
    Err(NoiseError::UnreachableNoiseLevel { target, achieved, closest })
}

impl NoiseError {
    /// The closest layout found, when the level was not reached.
    pub fn closest(&self) -> Option<NoisyLayout> {
        match self {
            NoiseError::UnreachableNoiseLevel { achieved, closest, .. } => {
                Some(NoisyLayout { layout: closest.clone(), achieved: *achieved })
            }
            _ => None,
        }
    }
}
