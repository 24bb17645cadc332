//! Fully-connected layer applied to row batches.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Linear {
    /// (in, out)
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Linear {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Linear {
            weight: Array2::zeros((c_in, c_out)),
            bias: Array1::zeros(c_out),
        }
    }

    pub fn init<R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let bound = (3.0 / c_in as f64).sqrt() as f32;
        Linear {
            weight: Array2::from_shape_simple_fn((c_in, c_out), || rng.gen_range(-bound..bound)),
            bias: Array1::zeros(c_out),
        }
    }

    /// x: (n, in) -> (n, out)
    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.weight);
        y += &self.bias.view().insert_axis(Axis(0));
        y
    }

    pub fn backward(&self, x: &Array2<f32>, gy: &Array2<f32>, g: &mut Linear) -> Array2<f32> {
        g.weight += &x.t().dot(gy);
        g.bias += &gy.sum_axis(Axis(0));
        gy.dot(&self.weight.t())
    }
}
