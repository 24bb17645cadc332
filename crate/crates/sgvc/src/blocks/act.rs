//! Elementwise activations with explicit backward rules.

use ndarray::{Array, Dimension};

pub const LEAKY_SLOPE: f32 = 0.01;

pub fn leaky_relu<D: Dimension>(x: &Array<f32, D>) -> Array<f32, D> {
    x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

/// `pre` is the activation input saved by the forward pass.
pub fn leaky_relu_grad<D: Dimension>(pre: &Array<f32, D>, g: &Array<f32, D>) -> Array<f32, D> {
    let mut out = g.clone();
    out.zip_mut_with(pre, |gv, pv| {
        if *pv <= 0.0 {
            *gv *= LEAKY_SLOPE;
        }
    });
    out
}

pub fn relu<D: Dimension>(x: &Array<f32, D>) -> Array<f32, D> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_grad<D: Dimension>(pre: &Array<f32, D>, g: &Array<f32, D>) -> Array<f32, D> {
    let mut out = g.clone();
    out.zip_mut_with(pre, |gv, pv| {
        if *pv <= 0.0 {
            *gv = 0.0;
        }
    });
    out
}

pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

pub fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        (1.0 + v.exp()).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    #[test]
    fn leaky_grad_uses_preactivation_sign() {
        let pre = Array1::from(vec![-1.0f32, 2.0]);
        let g = Array1::from(vec![1.0f32, 1.0]);
        let gx = leaky_relu_grad(&pre, &g);
        assert_eq!(gx[0], LEAKY_SLOPE);
        assert_eq!(gx[1], 1.0);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn softplus_at_zero_is_ln_two() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
