//! Log-space adaptive quadrature.
//!
//! `log_integral_exp` evaluates `ln ∫ exp(f(z)) dz` on a finite interval.
//! The integrand is first normalized by the maximum of `f` located with a
//! dense scan plus local refinement, then integrated with an adaptive
//! Gauss–Kronrod (G7, K15) rule. Everything is deterministic and serial.

/// Kronrod-15 abscissae on [-1, 1] (non-negative half; the rule is symmetric).
const XK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144838258730,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];

/// Kronrod-15 weights matching `XK`.
const WK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];

/// Gauss-7 weights for the embedded nodes XK[1], XK[3], XK[5], XK[7].
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

/// One G7/K15 evaluation of `g` on [a, b]; returns (kronrod, |k - g|).
fn gk15<F: Fn(f64) -> f64>(g: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut k = 0.0;
    let mut gauss = 0.0;
    for (i, (&x, &wk)) in XK.iter().zip(WK.iter()).enumerate() {
        let (flo, fhi) = if x == 0.0 {
            let f0 = g(c);
            (f0, 0.0)
        } else {
            (g(c - h * x), g(c + h * x))
        };
        // the center node (i = 7, odd) enters each rule exactly once
        let pair = flo + fhi;
        k += wk * pair;
        if i % 2 == 1 {
            gauss += WG[i / 2] * pair;
        }
    }
    (k * h, (k - gauss).abs() * h)
}

/// ln ∫_lo^hi exp(f(z)) dz by peak-normalized adaptive G7/K15.
///
/// `f` may return `-inf` (integrand zero). `rel_tol` bounds the relative
/// error of the normalized integral; 1e-12 is a practical floor. Peaks
/// narrower than about 1/4096 of the interval are beyond the scan
/// resolution; callers with such integrands should recenter first.
pub fn log_integral_exp<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, rel_tol: f64) -> f64 {
    assert!(hi > lo, "empty integration interval");
    // locate the peak: dense scan, then two rounds of local refinement
    let scan = 512;
    let step = (hi - lo) / scan as f64;
    let mut zmax = lo;
    let mut fmax = f64::NEG_INFINITY;
    for i in 0..=scan {
        let z = lo + step * i as f64;
        let v = f(z);
        if v > fmax {
            fmax = v;
            zmax = z;
        }
    }
    let mut width = step;
    for _ in 0..2 {
        let a = (zmax - width).max(lo);
        let b = (zmax + width).min(hi);
        let fine = (b - a) / 64.0;
        for i in 0..=64 {
            let z = a + fine * i as f64;
            let v = f(z);
            if v > fmax {
                fmax = v;
                zmax = z;
            }
        }
        width = fine;
    }
    log_integral_exp_core(f, lo, hi, zmax, fmax, rel_tol)
}

/// Variant for callers that already know where the integrand peaks
/// (e.g. from a closed-form mode); skips the scan phase entirely.
pub fn log_integral_exp_at_peak<F: Fn(f64) -> f64>(
    f: F,
    lo: f64,
    hi: f64,
    zpeak: f64,
    rel_tol: f64,
) -> f64 {
    assert!(hi > lo, "empty integration interval");
    let z = zpeak.clamp(lo, hi);
    let fmax = f(z);
    log_integral_exp_core(f, lo, hi, z, fmax, rel_tol)
}

fn log_integral_exp_core<F: Fn(f64) -> f64>(
    f: F,
    lo: f64,
    hi: f64,
    zmax: f64,
    fmax: f64,
    rel_tol: f64,
) -> f64 {
    if !fmax.is_finite() {
        return f64::NEG_INFINITY;
    }

    let g = |z: f64| {
        let v = f(z) - fmax;
        if v.is_finite() {
            v.exp()
        } else {
            0.0
        }
    };

    // base grid: 64 uniform cells, with the cell containing the peak
    // pre-split so the rule cannot step over a narrow mode
    let base = 64usize;
    let cw = (hi - lo) / base as f64;
    let peak_cell = (((zmax - lo) / cw) as usize).min(base - 1);
    let mut cells: Vec<(f64, f64)> = Vec::with_capacity(base + 63);
    for i in 0..base {
        let a = lo + cw * i as f64;
        let b = if i + 1 == base { hi } else { lo + cw * (i + 1) as f64 };
        if i == peak_cell {
            let sub = (b - a) / 64.0;
            for j in 0..64 {
                let sa = a + sub * j as f64;
                let sb = if j == 63 { b } else { a + sub * (j + 1) as f64 };
                cells.push((sa, sb));
            }
        } else {
            cells.push((a, b));
        }
    }

    // first pass fixes the scale for the relative error test
    let mut scale = 0.0_f64;
    for &(a, b) in &cells {
        let (k, _) = gk15(&g, a, b);
        scale += k.abs();
    }
    let scale = scale.max(1e-300);

    // depth-first refinement, left to right for determinism
    let mut total = 0.0_f64;
    let mut stack: Vec<(f64, f64, u32)> = Vec::with_capacity(64);
    for &(a0, b0) in cells.iter() {
        stack.push((a0, b0, 0));
        while let Some((a, b, depth)) = stack.pop() {
            let (k, err) = gk15(&g, a, b);
            if err <= 0.5 * rel_tol * scale * ((b - a) / (hi - lo)).max(1.0 / 4096.0)
                || depth >= 40
                || (b - a) < 1e-280
            {
                total += k;
            } else {
                let m = 0.5 * (a + b);
                // push right first so the left half is processed first
                stack.push((m, b, depth + 1));
                stack.push((a, m, depth + 1));
            }
        }
    }
    if total <= 0.0 {
        return f64::NEG_INFINITY;
    }
    fmax + total.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::LN_SQRT_2PI;

    #[test]
    fn gaussian_integral() {
        // ∫ exp(-z^2/2) over the real line = sqrt(2*pi)
        let v = log_integral_exp(|z| -0.5 * z * z, -40.0, 40.0, 1e-13);
        assert!((v - LN_SQRT_2PI).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn scaled_peak_is_normalized_away() {
        // same integral shifted by a huge constant must not overflow
        let v = log_integral_exp(|z| 5000.0 - 0.5 * (z - 3.0) * (z - 3.0), -40.0, 50.0, 1e-13);
        assert!((v - (5000.0 + LN_SQRT_2PI)).abs() < 1e-11, "got {v}");
    }

    #[test]
    fn polynomial_times_exponential() {
        // ∫_0^inf z^4 exp(-z) dz = 24
        let v = log_integral_exp(
            |z| if z <= 0.0 { f64::NEG_INFINITY } else { 4.0 * z.ln() - z },
            0.0,
            200.0,
            1e-13,
        );
        assert!((v - 24.0_f64.ln()).abs() < 1e-11, "got {v}");
    }

    #[test]
    fn narrow_peak_found_by_refinement() {
        // sharp Gaussian, sigma = 1e-3, centered off-grid
        let s = 1e-3;
        let mu = 0.123456;
        let v = log_integral_exp(
            |z| -0.5 * ((z - mu) / s).powi(2),
            0.0,
            1.0,
            1e-12,
        );
        let expect = LN_SQRT_2PI + s.ln();
        assert!((v - expect).abs() < 1e-9, "got {v} expect {expect}");
    }
}
