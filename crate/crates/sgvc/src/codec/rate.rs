//! Code-length model: bits for integer symbols under a Gaussian with a
//! half-unit integration window, floored so entropy-coder tables stay valid.

use ndarray::Array3;

pub const SIGMA_FLOOR: f64 = 1e-3;
/// Smallest per-element probability the model will report.
pub const PROB_FLOOR: f64 = 1.0 / 65536.0;

const SQRT2: f64 = std::f64::consts::SQRT_2;
const LN2: f64 = std::f64::consts::LN_2;

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Probability that a Gaussian(mu, sigma) value rounds to `q`.
pub fn window_prob(q: f64, mu: f64, sigma: f64) -> f64 {
    let s = sigma.max(SIGMA_FLOOR);
    phi((q - mu + 0.5) / s) - phi((q - mu - 0.5) / s)
}

/// Code length in bits for one symbol, probability floored.
pub fn symbol_bits(q: f64, mu: f64, sigma: f64) -> f64 {
    -window_prob(q, mu, sigma).max(PROB_FLOOR).log2()
}

/// Total bits for a map of (possibly noisy) symbols under elementwise
/// Gaussian parameters.
pub fn estimate_rate(q: &Array3<f32>, mu: &Array3<f32>, sigma: &Array3<f32>) -> f64 {
    let mut total = 0.0f64;
    for ((qv, mv), sv) in q.iter().zip(mu.iter()).zip(sigma.iter()) {
        total += symbol_bits(*qv as f64, *mv as f64, *sv as f64);
    }
    total
}

/// Per-element bits, used for bit-allocation maps.
pub fn elementwise_bits(q: &Array3<f32>, mu: &Array3<f32>, sigma: &Array3<f32>) -> Array3<f64> {
    let mut out = Array3::zeros(q.dim());
    for ((o, qv), (mv, sv)) in out
        .iter_mut()
        .zip(q.iter())
        .zip(mu.iter().zip(sigma.iter()))
    {
        *o = symbol_bits(*qv as f64, *mv as f64, *sv as f64);
    }
    out
}

/// Gradients of `estimate_rate` w.r.t. the symbols, means and sigmas.
/// Elements sitting on the probability floor contribute zero gradient.
pub fn rate_backward(
    q: &Array3<f32>,
    mu: &Array3<f32>,
    sigma: &Array3<f32>,
    scale: f64,
) -> (Array3<f32>, Array3<f32>, Array3<f32>) {
    let dim = q.dim();
    let mut gq = Array3::zeros(dim);
    let mut gmu = Array3::zeros(dim);
    let mut gsigma = Array3::zeros(dim);
    for i in 0..dim.0 {
        for j in 0..dim.1 {
            for k in 0..dim.2 {
                let qv = q[(i, j, k)] as f64;
                let mv = mu[(i, j, k)] as f64;
                let s = (sigma[(i, j, k)] as f64).max(SIGMA_FLOOR);
                let a = (qv - mv + 0.5) / s;
                let b = (qv - mv - 0.5) / s;
                let p = phi(a) - phi(b);
                if p <= PROB_FLOOR {
                    continue;
                }
                let pa = normal_pdf(a);
                let pb = normal_pdf(b);
                // bits = -ln(p)/ln2
                let coef = -scale / (p * LN2);
                let dp_dq = (pa - pb) / s;
                let dp_dsigma = -(a * pa - b * pb) / s;
                gq[(i, j, k)] = (coef * dp_dq) as f32;
                gmu[(i, j, k)] = (-coef * dp_dq) as f32;
                gsigma[(i, j, k)] = (coef * dp_dsigma) as f32;
            }
        }
    }
    (gq, gmu, gsigma)
}
