//! First-order adaptive-moment optimizer and global-norm gradient clipping.

use crate::codec::model::ModelState;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

pub struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: usize,
}

impl Adam {
    pub fn new(model: &ModelState) -> Self {
        let mut slots = Vec::new();
        model.visit_tensors(&mut slots);
        let m = slots.iter().map(|(_, t)| vec![0.0; t.data.len()]).collect();
        let v = slots.iter().map(|(_, t)| vec![0.0; t.data.len()]).collect();
        Adam { m, v, t: 0 }
    }

    pub fn step(&mut self, model: &mut ModelState, grads: &mut ModelState, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let mut params = Vec::new();
        model.visit_tensors_mut(&mut params);
        let mut gs = Vec::new();
        grads.visit_tensors_mut(&mut gs);
        debug_assert_eq!(params.len(), gs.len());
        for (idx, ((_, p), (_, g))) in params.into_iter().zip(gs.into_iter()).enumerate() {
            let ms = &mut self.m[idx];
            let vs = &mut self.v[idx];
            for i in 0..p.len() {
                let gi = g[i] as f64;
                let m = BETA1 * ms[i] as f64 + (1.0 - BETA1) * gi;
                let v = BETA2 * vs[i] as f64 + (1.0 - BETA2) * gi * gi;
                ms[i] = m as f32;
                vs[i] = v as f32;
                let mhat = m / bc1;
                let vhat = v / bc2;
                p[i] = (p[i] as f64 - lr * mhat / (vhat.sqrt() + EPS)) as f32;
            }
        }
    }
}

/// Scales gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut ModelState, max_norm: f64) -> f64 {
    let mut slots = Vec::new();
    grads.visit_tensors_mut(&mut slots);
    let mut sq = 0.0f64;
    for (_, s) in &slots {
        for v in s.iter() {
            sq += (*v as f64) * (*v as f64);
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for (_, s) in &mut slots {
            for v in s.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::model::CodecConfig;
    use crate::training::LambdaSpec;

    fn tiny() -> ModelState {
        let cfg = CodecConfig::new(4, 2, 1, LambdaSpec::mse_default()).unwrap();
        ModelState::new(cfg, 1).unwrap()
    }

    #[test]
    fn step_moves_against_gradient() {
        let mut model = tiny();
        let before = model.enc[0].conv.weight[(0, 0, 0, 0)];
        let mut grads = model.zeros_like();
        grads.enc[0].conv.weight[(0, 0, 0, 0)] = 1.0;
        let mut opt = Adam::new(&model);
        opt.step(&mut model, &mut grads, 1e-2);
        let after = model.enc[0].conv.weight[(0, 0, 0, 0)];
        assert!(after < before, "{after} vs {before}");
        // first step with bias correction moves by about lr
        assert!((before - after - 1e-2).abs() < 1e-3);
    }

    #[test]
    fn clipping_preserves_direction() {
        let model = tiny();
        let mut grads = model.zeros_like();
        grads.enc[0].conv.weight[(0, 0, 0, 0)] = 30.0;
        grads.enc[0].conv.weight[(0, 0, 0, 1)] = 40.0;
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 50.0).abs() < 1e-4);
        let a = grads.enc[0].conv.weight[(0, 0, 0, 0)];
        let b = grads.enc[0].conv.weight[(0, 0, 0, 1)];
        assert!((a / b - 0.75).abs() < 1e-5);
        assert!(((a * a + b * b).sqrt() - 1.0).abs() < 1e-5);
    }
}
