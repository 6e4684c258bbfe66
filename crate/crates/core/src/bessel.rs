//! Modified Bessel functions of the first kind, integer and half-integer order.
//!
//! Integer orders use the ascending power series for small arguments and the
//! large-argument asymptotic expansion beyond it. Half-integer orders reduce
//! to elementary sinh/cosh expressions, with a series fallback near zero where
//! the elementary forms cancel catastrophically.

/// Switch point between the power series and the asymptotic expansion.
const SERIES_ASYMPTOTIC_SWITCH: f64 = 15.0;

/// Below this argument the half-integer closed forms lose too many digits
/// to cancellation and the power series is used instead.
const HALF_ORDER_SERIES_CUTOFF: f64 = 0.5;

/// I_n(x) for integer order n >= 0 and x >= 0.
pub fn bessel_i(n: u32, x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    if x <= SERIES_ASYMPTOTIC_SWITCH {
        bessel_i_series(f64::from(n), x)
    } else {
        bessel_i_asymptotic(f64::from(n), x)
    }
}

/// I_{k+1/2}(x) for k >= -1 and x >= 0, via the elementary closed forms
///
///   I_{-1/2}(x) = sqrt(2/(pi x)) cosh x
///   I_{ 1/2}(x) = sqrt(2/(pi x)) sinh x
///
/// and the upward recurrence I_{v+1}(x) = I_{v-1}(x) - (2v/x) I_v(x).
pub fn bessel_i_half(k: i32, x: f64) -> f64 {
    debug_assert!(k >= -1);
    debug_assert!(x >= 0.0);
    if x == 0.0 {
        // I_{-1/2} diverges at 0; callers only hit k >= 0 there.
        return if k >= 0 { 0.0 } else { f64::INFINITY };
    }
    if x < HALF_ORDER_SERIES_CUTOFF && k >= 0 {
        return bessel_i_series(k as f64 + 0.5, x);
    }
    let pref = (2.0 / (std::f64::consts::PI * x)).sqrt();
    let mut lo = pref * x.cosh(); // I_{-1/2}
    let mut hi = pref * x.sinh(); // I_{ 1/2}
    if k == -1 {
        return lo;
    }
    let mut order = 0.5; // current order of `hi`
    for _ in 0..k {
        let next = lo - (2.0 * order / x) * hi;
        lo = hi;
        hi = next;
        order += 1.0;
    }
    hi
}

/// Ascending series sum_{j>=0} (x/2)^{v+2j} / (j! Gamma(v+j+1)).
///
/// All terms are positive, so there is no cancellation; used for small x
/// at any real order v that is an integer or half-integer.
fn bessel_i_series(v: f64, x: f64) -> f64 {
    let half_x = 0.5 * x;
    let mut term = half_x.powf(v) / gamma_int_or_half(v + 1.0);
    let mut sum = term;
    let x2 = half_x * half_x;
    for j in 1..200 {
        let jf = j as f64;
        term *= x2 / (jf * (v + jf));
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Large-argument expansion I_v(x) ~ e^x/sqrt(2 pi x) * sum_k a_k, truncated
/// at the smallest term.
fn bessel_i_asymptotic(v: f64, x: f64) -> f64 {
    let mu = 4.0 * v * v;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut prev = f64::INFINITY;
    for k in 1..60 {
        let kf = k as f64;
        let odd = 2.0 * kf - 1.0;
        term *= -(mu - odd * odd) / (8.0 * x * kf);
        if term.abs() >= prev {
            break; // divergent tail reached
        }
        prev = term.abs();
        sum += term;
        if term.abs() < sum.abs() * 1e-17 {
            break;
        }
    }
    x.exp() / (2.0 * std::f64::consts::PI * x).sqrt() * sum
}

/// Gamma(z) for z a positive integer or half-integer.
fn gamma_int_or_half(z: f64) -> f64 {
    let mut g;
    let mut arg;
    if (z - z.round()).abs() < 1e-12 {
        g = 1.0;
        arg = 1.0;
    } else {
        g = std::f64::consts::PI.sqrt(); // Gamma(1/2)
        arg = 0.5;
    }
    while arg < z - 0.25 {
        g *= arg;
        arg += 1.0;
    }
    g
}
