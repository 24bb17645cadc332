//! Residual channel attention block: a 3x3 conv pair whose output is scaled
//! per channel by a squeeze-style attention branch, then added back onto the
//! input.

use crate::blocks::act::{relu, relu_grad, sigmoid};
use crate::blocks::conv::Conv2d;
use crate::blocks::linear::Linear;
use crate::blocks::FeatureMap;
use crate::error::{Error, Result};
use ndarray::{Array2, Array3};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct RcabParams {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub fc_reduce: Linear,
    pub fc_expand: Linear,
}

impl RcabParams {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        Self::check(channels, reduction)?;
        Ok(RcabParams {
            conv1: Conv2d::zeros(3, channels, channels, 1, 1),
            conv2: Conv2d::zeros(3, channels, channels, 1, 1),
            fc_reduce: Linear::zeros(channels, channels / reduction),
            fc_expand: Linear::zeros(channels / reduction, channels),
        })
    }

    pub fn init<R: Rng>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        Self::check(channels, reduction)?;
        Ok(RcabParams {
            conv1: Conv2d::init(3, channels, channels, 1, 1, rng),
            conv2: Conv2d::init(3, channels, channels, 1, 1, rng),
            fc_reduce: Linear::init(channels, channels / reduction, rng),
            fc_expand: Linear::init(channels / reduction, channels, rng),
        })
    }

    fn check(channels: usize, reduction: usize) -> Result<()> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::config(format!(
                "attention reduction {reduction} must divide channel count {channels}"
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.conv1.c_in()
    }
}

pub struct RcabCache {
    pub x: Array3<f32>,
    pub a: Array3<f32>,
    pub b: Array3<f32>,
    pub u: Array3<f32>,
    pub pool: Array2<f32>,
    pub v_pre: Array2<f32>,
    pub v: Array2<f32>,
    pub scale: Array2<f32>,
}

pub fn rcab_forward(f: &FeatureMap, params: &RcabParams) -> Result<FeatureMap> {
    Ok(rcab_forward_cached(f, params)?.0)
}

pub fn rcab_forward_cached(
    f: &FeatureMap,
    params: &RcabParams,
) -> Result<(FeatureMap, RcabCache)> {
    let (h, w, c) = f.dim();
    let a = params.conv1.forward(f)?;
    let b = relu(&a);
    let u = params.conv2.forward(&b)?;
    // squeeze: global average pool per channel
    let mut pool = Array2::zeros((1, c));
    for k in 0..c {
        let mut sum = 0.0f64;
        for i in 0..h {
            for j in 0..w {
                sum += u[(i, j, k)] as f64;
            }
        }
        pool[(0, k)] = (sum / (h * w) as f64) as f32;
    }
    let v_pre = params.fc_reduce.forward(&pool);
    let v = relu(&v_pre);
    let s_pre = params.fc_expand.forward(&v);
    let scale = s_pre.mapv(sigmoid);
    let mut out = f.clone();
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                out[(i, j, k)] += u[(i, j, k)] * scale[(0, k)];
            }
        }
    }
    let cache = RcabCache {
        x: f.clone(),
        a,
        b,
        u,
        pool,
        v_pre,
        v,
        scale,
    };
    Ok((out, cache))
}

pub fn rcab_backward(
    params: &RcabParams,
    cache: &RcabCache,
    g_out: &Array3<f32>,
    grads: &mut RcabParams,
) -> Array3<f32> {
    let (h, w, c) = cache.x.dim();
    // gradient into the conv branch and into the channel scales
    let mut gu = Array3::zeros((h, w, c));
    let mut gscale = Array2::zeros((1, c));
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                let g = g_out[(i, j, k)];
                gu[(i, j, k)] = g * cache.scale[(0, k)];
                gscale[(0, k)] += g * cache.u[(i, j, k)];
            }
        }
    }
    // attention chain
    let gs_pre = &gscale * &cache.scale.mapv(|s| s * (1.0 - s));
    let gv = params.fc_expand.backward(&cache.v, &gs_pre, &mut grads.fc_expand);
    let gv_pre = relu_grad(&cache.v_pre, &gv);
    let gpool = params.fc_reduce.backward(&cache.pool, &gv_pre, &mut grads.fc_reduce);
    let inv = 1.0 / (h * w) as f32;
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                gu[(i, j, k)] += gpool[(0, k)] * inv;
            }
        }
    }
    let gb = params.conv2.backward(&cache.b, &gu, &mut grads.conv2);
    let ga = relu_grad(&cache.a, &gb);
    let gx = params.conv1.backward(&cache.x, &ga, &mut grads.conv1);
    gx + g_out
}
