// `core` has no transcendental functions; route them through libm so the
// crate builds without std.

#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub(crate) fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

#[inline]
pub(crate) fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub(crate) fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline]
pub(crate) fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub(crate) fn hypot(x: f64, y: f64) -> f64 {
    libm::hypot(x, y)
}

#[inline]
pub(crate) fn round(x: f64) -> f64 {
    libm::round(x)
}

#[inline]
pub(crate) fn floor(x: f64) -> f64 {
    libm::floor(x)
}

/// `(dot(a, b), dot(a, c))` in one pass over `a`, bit-identical to two calls.
#[inline]
pub(crate) fn dot2(a: &[f64], b: &[f64], c: &[f64]) -> (f64, f64) {
    debug_assert!(a.len() == b.len() && a.len() == c.len());
    let mut acc = [0.0f64; 4];
    let mut acd = [0.0f64; 4];
    let n = a.len() - a.len() % 4;
    for ((x, y), w) in a[..n].chunks_exact(4).zip(b[..n].chunks_exact(4)).zip(c[..n].chunks_exact(4)) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
            acd[i] += x[i] * w[i];
        }
    }
    let (mut tb, mut tc) = (0.0, 0.0);
    for i in n..a.len() {
        tb += a[i] * b[i];
        tc += a[i] * c[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3]) + tb, (acd[0] + acd[1]) + (acd[2] + acd[3]) + tc)
}

/// Dot product with four independent accumulators.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
