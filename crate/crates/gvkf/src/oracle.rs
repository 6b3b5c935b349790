//! Independent numerical oracles.
//!
//! These deliberately avoid the closed forms used elsewhere in the crate:
//! the ray transform is checked against golden-section search on the raw 3D
//! evaluation, and the transcendental root solver against a two-stage grid
//! scan that only looks at sign changes. Both the test suites and the
//! `verify` subcommand lean on this module.

/// Golden-section search for the maximizer of `f` on `[lo, hi]`.
///
/// `f` must be unimodal on the interval. Returns the abscissa of the maximum
/// to within `tol`.
pub fn golden_section_argmax(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - (b - a) * INV_PHI;
    let mut d = a + (b - a) * INV_PHI;
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - (b - a) * INV_PHI;
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + (b - a) * INV_PHI;
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Grid scan followed by golden-section refinement around the best cell.
///
/// Plain golden-section search fails when most of the bracket is numerically
/// flat (for a narrow bump the first probes straddle it and compare equal),
/// so the scan locates the bump first and the refinement only has to resolve
/// it locally.
pub fn scanned_argmax(
    f: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    samples: usize,
    tol: f64,
) -> Option<f64> {
    let step = (hi - lo) / samples as f64;
    let mut best_i = 0;
    let mut best_v = f(lo);
    for i in 1..=samples {
        let v = f(lo + i as f64 * step);
        if v > best_v {
            best_v = v;
            best_i = i;
        }
    }
    if best_i == 0 || best_i == samples {
        // Maximum not bracketed by the interior of the scan range.
        return None;
    }
    let best_x = lo + best_i as f64 * step;
    Some(golden_section_argmax(f, best_x - step, best_x + step, tol))
}

/// Locates the sign change of `f` on `[lo, hi]` by pure grid scanning.
///
/// A coarse pass at `coarse_step` finds the bracketing cell, then a fine pass
/// at `fine_step` inside that cell pins the crossing down. For a function with
/// a single sign change this is equivalent to scanning the whole interval at
/// `fine_step`, at a fraction of the cost. Returns the midpoint of the last
/// fine cell whose endpoints had opposite signs, or `None` when no sign change
/// is found.
pub fn grid_sign_change(
    f: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    coarse_step: f64,
    fine_step: f64,
) -> Option<f64> {
    let (a, b) = scan(&f, lo, hi, coarse_step)?;
    let (a, b) = scan(&f, a, b, fine_step)?;
    Some(0.5 * (a + b))
}

fn scan(f: &impl Fn(f64) -> f64, lo: f64, hi: f64, step: f64) -> Option<(f64, f64)> {
    let mut x = lo;
    let mut fx = f(x);
    while x < hi {
        let x2 = (x + step).min(hi);
        let fx2 = f(x2);
        if fx == 0.0 {
            return Some((x, x));
        }
        if fx * fx2 <= 0.0 {
            return Some((x, x2));
        }
        x = x2;
        fx = fx2;
    }
    None
}

/// Streaming mean that mirrors the voxel gradient accumulator, recomputed
/// the naive way (sum then divide).
pub fn naive_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Adaptive trapezoid quadrature of `f` on `[a, b]` by interval halving until
/// the estimate changes by less than `tol`.
pub fn adaptive_quadrature(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let mut n = 64usize;
    let mut prev = trapezoid(&f, a, b, n);
    for _ in 0..24 {
        n *= 2;
        let cur = trapezoid(&f, a, b, n);
        if (cur - prev).abs() < tol {
            return cur;
        }
        prev = cur;
    }
    prev
}

fn trapezoid(f: &impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut acc = 0.5 * (f(a) + f(b));
    for i in 1..n {
        acc += f(a + i as f64 * h);
    }
    acc * h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_section_finds_parabola_peak() {
        let x = golden_section_argmax(|x| -(x - 3.25) * (x - 3.25), 0.0, 10.0, 1e-10);
        assert!((x - 3.25).abs() < 1e-8);
    }

    #[test]
    fn grid_scan_finds_linear_root() {
        let x = grid_sign_change(|x| x - 2.5, 0.0, 10.0, 0.3, 1e-7).unwrap();
        assert!((x - 2.5).abs() < 1e-6);
    }

    #[test]
    fn grid_scan_none_without_crossing() {
        assert!(grid_sign_change(|x| x * x + 1.0, -5.0, 5.0, 0.1, 1e-6).is_none());
    }

    #[test]
    fn quadrature_matches_analytic_integral() {
        let v = adaptive_quadrature(|x| x.cos(), 0.0, 1.0, 1e-12);
        assert!((v - 1.0f64.sin()).abs() < 1e-9);
    }
}
