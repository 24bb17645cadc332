//! Model state: every parameter tensor of the transforms, the hyperprior,
//! the shallow path and the fusion block, plus the frozen channel selection.
//!
//! The archive format is a little-endian binary dump of named tensors behind
//! a magic/version header; loading rebuilds the skeleton from the stored
//! settings and fills tensors by name, so round-trips are bitwise lossless.

use crate::blocks::conv::{Conv2d, ConvTranspose2d};
use crate::blocks::linear::Linear;
use crate::blocks::rcab::RcabParams;
use crate::blocks::sffm::SffmParams;
use crate::blocks::sgu::SguParams;
use crate::blocks::ssn::SsnParams;
use crate::error::{Error, Result};
use crate::training::{LambdaSpec, Metric};
use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

const MODEL_MAGIC: &[u8; 4] = b"SGVM";
const MODEL_VERSION: u8 = 1;

/// softplus(x) = 1 at this input, so fresh priors start with unit scale.
const PRIOR_SIGMA_RAW_INIT: f32 = 0.541_324_85;

#[derive(Debug, Clone)]
pub struct CodecConfig {
    /// Filter count of the transforms.
    pub n: usize,
    /// Number of stride-2 stages in the encoder and decoder.
    pub stages: usize,
    /// Shallow channels transmitted alongside the latent.
    pub k: usize,
    pub lambda_range: LambdaSpec,
    /// Frozen after calibration; strictly increasing indices into the
    /// shallow layer's channels.
    pub topk_indices: Vec<usize>,
    pub use_sgu: bool,
    pub use_sffm: bool,
}

impl CodecConfig {
    pub fn new(n: usize, stages: usize, k: usize, lambda_range: LambdaSpec) -> Result<Self> {
        let cfg = CodecConfig {
            n,
            stages,
            k,
            lambda_range,
            topk_indices: (0..k).collect(),
            use_sgu: true,
            use_sffm: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn default_full() -> Self {
        CodecConfig {
            n: 192,
            stages: 4,
            k: 32,
            lambda_range: LambdaSpec::mse_default(),
            topk_indices: (0..32).collect(),
            use_sgu: true,
            use_sffm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages < 2 {
            return Err(Error::config("at least two stages are required"));
        }
        if self.n == 0 {
            return Err(Error::config("filter count must be positive"));
        }
        if self.use_sffm {
            if self.k == 0 || self.k > self.n {
                return Err(Error::config(format!(
                    "shallow channel count {} must satisfy 1 <= K <= N = {}",
                    self.k, self.n
                )));
            }
            if self.topk_indices.len() != self.k {
                return Err(Error::config(format!(
                    "expected {} selected channels, got {}",
                    self.k,
                    self.topk_indices.len()
                )));
            }
            let mut prev: Option<usize> = None;
            for &i in &self.topk_indices {
                if i >= self.n || prev.is_some_and(|p| p >= i) {
                    return Err(Error::config(
                        "selected channels must be strictly increasing and below N",
                    ));
                }
                prev = Some(i);
            }
        }
        Ok(())
    }

    /// Transmitted shallow channels; zero when fusion is disabled.
    pub fn k_eff(&self) -> usize {
        if self.use_sffm {
            self.k
        } else {
            0
        }
    }

    /// Spatial downsampling factor of the analysis transform.
    pub fn spatial_factor(&self) -> usize {
        1 << self.stages
    }

    pub fn latent_dims(&self, padded_h: usize, padded_w: usize) -> (usize, usize) {
        (
            padded_h / self.spatial_factor(),
            padded_w / self.spatial_factor(),
        )
    }

    /// Hyper-latent dims follow two stride-2 convolutions over the latent.
    pub fn hyper_dims(&self, yh: usize, yw: usize) -> (usize, usize) {
        (yh.div_ceil(2).div_ceil(2), yw.div_ceil(2).div_ceil(2))
    }
}

#[derive(Debug, Clone)]
pub struct EncStage {
    pub conv: Conv2d,
    pub sgu: Option<SguParams>,
    pub ssn: SsnParams,
}

#[derive(Debug, Clone)]
pub struct DecStage {
    pub sgu: Option<SguParams>,
    pub ssn: SsnParams,
    pub tconv: ConvTranspose2d,
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: CodecConfig,
    pub enc: Vec<EncStage>,
    pub shallow_down: Vec<Conv2d>,
    pub shallow_up: Vec<ConvTranspose2d>,
    pub hyper_enc: Vec<Conv2d>,
    pub hyper_dec_up1: ConvTranspose2d,
    pub hyper_dec_up2: ConvTranspose2d,
    pub hyper_dec_out: Conv2d,
    pub dec: Vec<DecStage>,
    pub final_proj: Conv2d,
    pub sffm: Option<SffmParams>,
    pub prior_mu: Array1<f32>,
    pub prior_sigma_raw: Array1<f32>,
}

impl ModelState {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = config.n;
        let ke = config.k_eff();
        let spec = config.lambda_range;
        let rd_scale = (1.0 / (spec.lambda_min * spec.lambda_max).sqrt()) as f32;
        let mut enc = Vec::new();
        for i in 0..config.stages {
            let cin = if i == 0 { 3 } else { n };
            enc.push(EncStage {
                conv: Conv2d::init(5, cin, n, 2, 2, &mut rng),
                sgu: config.use_sgu.then(|| SguParams::init(n, &mut rng)),
                ssn: SsnParams::init(&mut rng, rd_scale),
            });
        }
        let mut shallow_down = Vec::new();
        let mut shallow_up = Vec::new();
        if ke > 0 {
            for _ in 0..config.stages - 1 {
                shallow_down.push(Conv2d::init(5, ke, ke, 2, 2, &mut rng));
            }
            for _ in 0..config.stages - 1 {
                shallow_up.push(ConvTranspose2d::init(5, ke, ke, 2, 2, 1, &mut rng));
            }
        }
        let hyper_enc = vec![
            Conv2d::init(3, n + ke, n, 1, 1, &mut rng),
            Conv2d::init(5, n, n, 2, 2, &mut rng),
            Conv2d::init(5, n, n, 2, 2, &mut rng),
        ];
        let hyper_dec_up1 = ConvTranspose2d::init(5, n, n, 2, 2, 1, &mut rng);
        let hyper_dec_up2 = ConvTranspose2d::init(5, n, n, 2, 2, 1, &mut rng);
        let hyper_dec_out = Conv2d::init(3, n, 2 * (n + ke), 1, 1, &mut rng);
        let mut dec = Vec::new();
        for _ in 0..config.stages {
            dec.push(DecStage {
                sgu: config.use_sgu.then(|| SguParams::init(n, &mut rng)),
                ssn: SsnParams::init(&mut rng, rd_scale),
                tconv: ConvTranspose2d::init(5, n, n, 2, 2, 1, &mut rng),
            });
        }
        let final_proj = Conv2d::init(3, n, 3, 1, 1, &mut rng);
        let sffm = if config.use_sffm {
            Some(SffmParams::init(n, ke, &mut rng)?)
        } else {
            None
        };
        Ok(ModelState {
            config,
            enc,
            shallow_down,
            shallow_up,
            hyper_enc,
            hyper_dec_up1,
            hyper_dec_up2,
            hyper_dec_out,
            dec,
            final_proj,
            sffm,
            prior_mu: Array1::zeros(n),
            prior_sigma_raw: Array1::from_elem(n, PRIOR_SIGMA_RAW_INIT),
        })
    }

    /// A structurally identical model with every tensor zeroed; used as a
    /// gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        let mut slots = Vec::new();
        out.visit_tensors_mut(&mut slots);
        for (_, slice) in slots {
            slice.fill(0.0);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        let mut slots = Vec::new();
        self.visit_tensors(&mut slots);
        slots.iter().map(|(_, t)| t.data.len()).sum()
    }

    /// Tensors in a fixed traversal order.
    pub fn visit_tensors<'a>(&'a self, out: &mut Vec<(String, TensorRef<'a>)>) {
        let mut v = Visitor { out };
        self.walk(&mut v);
    }

    pub fn visit_tensors_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut [f32])>) {
        let mut v = VisitorMut { out };
        self.walk_mut(&mut v);
    }

    fn walk<'a>(&'a self, v: &mut Visitor<'a, '_>) {
        for (i, st) in self.enc.iter().enumerate() {
            v.conv(&format!("enc{i}.conv"), &st.conv);
            if let Some(sgu) = &st.sgu {
                v.sgu(&format!("enc{i}.sgu"), sgu);
            }
            v.ssn(&format!("enc{i}.ssn"), &st.ssn);
        }
        for (i, c) in self.shallow_down.iter().enumerate() {
            v.conv(&format!("shallow_down{i}"), c);
        }
        for (i, c) in self.shallow_up.iter().enumerate() {
            v.tconv(&format!("shallow_up{i}"), c);
        }
        for (i, c) in self.hyper_enc.iter().enumerate() {
            v.conv(&format!("hyper_enc{i}"), c);
        }
        v.tconv("hyper_dec_up1", &self.hyper_dec_up1);
        v.tconv("hyper_dec_up2", &self.hyper_dec_up2);
        v.conv("hyper_dec_out", &self.hyper_dec_out);
        for (i, st) in self.dec.iter().enumerate() {
            if let Some(sgu) = &st.sgu {
                v.sgu(&format!("dec{i}.sgu"), sgu);
            }
            v.ssn(&format!("dec{i}.ssn"), &st.ssn);
            v.tconv(&format!("dec{i}.tconv"), &st.tconv);
        }
        v.conv("final_proj", &self.final_proj);
        if let Some(sffm) = &self.sffm {
            v.conv("sffm.in_proj", &sffm.in_proj);
            v.rcab("sffm.enc_rcab1", &sffm.enc_rcab1);
            v.rcab("sffm.enc_rcab2", &sffm.enc_rcab2);
            v.conv("sffm.down", &sffm.down);
            v.rcab("sffm.mid_rcab1", &sffm.mid_rcab1);
            v.rcab("sffm.mid_rcab2", &sffm.mid_rcab2);
            v.tconv("sffm.up", &sffm.up);
            v.conv("sffm.merge", &sffm.merge);
            v.conv("sffm.out_proj", &sffm.out_proj);
        }
        v.arr1("prior_mu", &self.prior_mu);
        v.arr1("prior_sigma_raw", &self.prior_sigma_raw);
    }

    fn walk_mut<'a>(&'a mut self, v: &mut VisitorMut<'a, '_>) {
        for (i, st) in self.enc.iter_mut().enumerate() {
            v.conv(&format!("enc{i}.conv"), &mut st.conv);
            if let Some(sgu) = &mut st.sgu {
                v.sgu(&format!("enc{i}.sgu"), sgu);
            }
            v.ssn(&format!("enc{i}.ssn"), &mut st.ssn);
        }
        for (i, c) in self.shallow_down.iter_mut().enumerate() {
            v.conv(&format!("shallow_down{i}"), c);
        }
        for (i, c) in self.shallow_up.iter_mut().enumerate() {
            v.tconv(&format!("shallow_up{i}"), c);
        }
        for (i, c) in self.hyper_enc.iter_mut().enumerate() {
            v.conv(&format!("hyper_enc{i}"), c);
        }
        v.tconv("hyper_dec_up1", &mut self.hyper_dec_up1);
        v.tconv("hyper_dec_up2", &mut self.hyper_dec_up2);
        v.conv("hyper_dec_out", &mut self.hyper_dec_out);
        for (i, st) in self.dec.iter_mut().enumerate() {
            if let Some(sgu) = &mut st.sgu {
                v.sgu(&format!("dec{i}.sgu"), sgu);
            }
            v.ssn(&format!("dec{i}.ssn"), &mut st.ssn);
            v.tconv(&format!("dec{i}.tconv"), &mut st.tconv);
        }
        v.conv("final_proj", &mut self.final_proj);
        if let Some(sffm) = &mut self.sffm {
            v.conv("sffm.in_proj", &mut sffm.in_proj);
            v.rcab("sffm.enc_rcab1", &mut sffm.enc_rcab1);
            v.rcab("sffm.enc_rcab2", &mut sffm.enc_rcab2);
            v.conv("sffm.down", &mut sffm.down);
            v.rcab("sffm.mid_rcab1", &mut sffm.mid_rcab1);
            v.rcab("sffm.mid_rcab2", &mut sffm.mid_rcab2);
            v.tconv("sffm.up", &mut sffm.up);
            v.conv("sffm.merge", &mut sffm.merge);
            v.conv("sffm.out_proj", &mut sffm.out_proj);
        }
        v.arr1("prior_mu", &mut self.prior_mu);
        v.arr1("prior_sigma_raw", &mut self.prior_sigma_raw);
    }

    pub fn save_to(&self, w: &mut dyn Write) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&[MODEL_VERSION])?;
        let c = &self.config;
        w.write_all(&(c.n as u32).to_le_bytes())?;
        w.write_all(&(c.stages as u32).to_le_bytes())?;
        w.write_all(&(c.k as u32).to_le_bytes())?;
        w.write_all(&c.lambda_range.lambda_min.to_le_bytes())?;
        w.write_all(&c.lambda_range.lambda_max.to_le_bytes())?;
        w.write_all(&[match c.lambda_range.metric {
            Metric::Mse => 0u8,
            Metric::Msssim => 1u8,
        }])?;
        w.write_all(&[c.use_sgu as u8, c.use_sffm as u8])?;
        w.write_all(&(c.topk_indices.len() as u32).to_le_bytes())?;
        for &i in &c.topk_indices {
            w.write_all(&(i as u32).to_le_bytes())?;
        }
        let mut slots = Vec::new();
        self.visit_tensors(&mut slots);
        w.write_all(&(slots.len() as u32).to_le_bytes())?;
        for (name, t) in slots {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u16).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&[t.shape.len() as u8])?;
            for d in &t.shape {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save_to(&mut f)
    }

    pub fn load_from(r: &mut dyn Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::data("model archive truncated"))?;
        if &magic != MODEL_MAGIC {
            return Err(Error::data("not a model archive (bad magic)"));
        }
        let mut ver = [0u8; 1];
        r.read_exact(&mut ver)?;
        if ver[0] != MODEL_VERSION {
            return Err(Error::data(format!(
                "unsupported model archive version {}",
                ver[0]
            )));
        }
        let n = read_u32(r)? as usize;
        let stages = read_u32(r)? as usize;
        let k = read_u32(r)? as usize;
        let lambda_min = read_f64(r)?;
        let lambda_max = read_f64(r)?;
        let metric = match read_u8(r)? {
            0 => Metric::Mse,
            1 => Metric::Msssim,
            m => return Err(Error::data(format!("unknown metric tag {m}"))),
        };
        let use_sgu = read_u8(r)? != 0;
        let use_sffm = read_u8(r)? != 0;
        let tk = read_u32(r)? as usize;
        let mut topk_indices = Vec::with_capacity(tk);
        for _ in 0..tk {
            topk_indices.push(read_u32(r)? as usize);
        }
        let config = CodecConfig {
            n,
            stages,
            k,
            lambda_range: LambdaSpec::new(lambda_min, lambda_max, metric)?,
            topk_indices,
            use_sgu,
            use_sffm,
        };
        config.validate()?;
        let mut model = ModelState::new(config, 0)?;
        let count = read_u32(r)? as usize;
        let mut slots = Vec::new();
        model.visit_tensors_mut(&mut slots);
        if count != slots.len() {
            return Err(Error::data(format!(
                "archive holds {count} tensors, model expects {}",
                slots.len()
            )));
        }
        for (name, slice) in slots {
            let nlen = read_u16(r)? as usize;
            let mut nb = vec![0u8; nlen];
            r.read_exact(&mut nb)?;
            let stored = String::from_utf8(nb)
                .map_err(|_| Error::data("tensor name is not utf-8"))?;
            if stored != name {
                return Err(Error::data(format!(
                    "tensor order mismatch: archive has '{stored}', expected '{name}'"
                )));
            }
            let ndim = read_u8(r)? as usize;
            let mut len = 1usize;
            for _ in 0..ndim {
                len *= read_u32(r)? as usize;
            }
            if len != slice.len() {
                return Err(Error::data(format!(
                    "tensor '{name}' has {len} entries, expected {}",
                    slice.len()
                )));
            }
            let mut buf = vec![0u8; len * 4];
            r.read_exact(&mut buf)
                .map_err(|_| Error::data(format!("archive truncated inside '{name}'")))?;
            for (i, out) in slice.iter_mut().enumerate() {
                *out = f32::from_le_bytes(buf[4 * i..4 * i + 4].try_into().unwrap());
            }
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
            Error::data(format!("cannot open model archive {}: {e}", path.display()))
        })?);
        Self::load_from(&mut f)
    }
}

pub struct TensorRef<'a> {
    pub shape: Vec<usize>,
    pub data: &'a [f32],
}

struct Visitor<'a, 'b> {
    out: &'b mut Vec<(String, TensorRef<'a>)>,
}

impl<'a> Visitor<'a, '_> {
    fn push(&mut self, name: String, shape: Vec<usize>, data: &'a [f32]) {
        self.out.push((name, TensorRef { shape, data }));
    }
    fn conv(&mut self, p: &str, c: &'a Conv2d) {
        let d = c.weight.dim();
        self.push(
            format!("{p}.w"),
            vec![d.0, d.1, d.2, d.3],
            c.weight.as_slice().unwrap(),
        );
        self.push(format!("{p}.b"), vec![c.bias.len()], c.bias.as_slice().unwrap());
    }
    fn tconv(&mut self, p: &str, c: &'a ConvTranspose2d) {
        let d = c.weight.dim();
        self.push(
            format!("{p}.w"),
            vec![d.0, d.1, d.2, d.3],
            c.weight.as_slice().unwrap(),
        );
        self.push(format!("{p}.b"), vec![c.bias.len()], c.bias.as_slice().unwrap());
    }
    fn linear(&mut self, p: &str, l: &'a Linear) {
        let d = l.weight.dim();
        self.push(format!("{p}.w"), vec![d.0, d.1], l.weight.as_slice().unwrap());
        self.push(format!("{p}.b"), vec![l.bias.len()], l.bias.as_slice().unwrap());
    }
    fn sgu(&mut self, p: &str, s: &'a SguParams) {
        self.conv(&format!("{p}.mask3"), &s.mask_conv3);
        self.conv(&format!("{p}.mask1"), &s.mask_conv1);
        self.conv(&format!("{p}.gate3"), &s.gate_conv3);
    }
    fn ssn(&mut self, p: &str, s: &'a SsnParams) {
        self.linear(&format!("{p}.hidden"), &s.hidden);
        self.linear(&format!("{p}.output"), &s.output);
    }
    fn rcab(&mut self, p: &str, r: &'a RcabParams) {
        self.conv(&format!("{p}.conv1"), &r.conv1);
        self.conv(&format!("{p}.conv2"), &r.conv2);
        self.linear(&format!("{p}.fc_reduce"), &r.fc_reduce);
        self.linear(&format!("{p}.fc_expand"), &r.fc_expand);
    }
    fn arr1(&mut self, p: &str, a: &'a Array1<f32>) {
        self.push(p.to_string(), vec![a.len()], a.as_slice().unwrap());
    }
}

struct VisitorMut<'a, 'b> {
    out: &'b mut Vec<(String, &'a mut [f32])>,
}

impl<'a> VisitorMut<'a, '_> {
    fn push(&mut self, name: String, data: &'a mut [f32]) {
        self.out.push((name, data));
    }
    fn conv(&mut self, p: &str, c: &'a mut Conv2d) {
        self.push(format!("{p}.w"), c.weight.as_slice_mut().unwrap());
        self.push(format!("{p}.b"), c.bias.as_slice_mut().unwrap());
    }
    fn tconv(&mut self, p: &str, c: &'a mut ConvTranspose2d) {
        self.push(format!("{p}.w"), c.weight.as_slice_mut().unwrap());
        self.push(format!("{p}.b"), c.bias.as_slice_mut().unwrap());
    }
    fn linear(&mut self, p: &str, l: &'a mut Linear) {
        self.push(format!("{p}.w"), l.weight.as_slice_mut().unwrap());
        self.push(format!("{p}.b"), l.bias.as_slice_mut().unwrap());
    }
    fn sgu(&mut self, p: &str, s: &'a mut SguParams) {
        self.conv(&format!("{p}.mask3"), &mut s.mask_conv3);
        self.conv(&format!("{p}.mask1"), &mut s.mask_conv1);
        self.conv(&format!("{p}.gate3"), &mut s.gate_conv3);
    }
    fn ssn(&mut self, p: &str, s: &'a mut SsnParams) {
        self.linear(&format!("{p}.hidden"), &mut s.hidden);
        self.linear(&format!("{p}.output"), &mut s.output);
    }
    fn rcab(&mut self, p: &str, r: &'a mut RcabParams) {
        self.conv(&format!("{p}.conv1"), &mut r.conv1);
        self.conv(&format!("{p}.conv2"), &mut r.conv2);
        self.linear(&format!("{p}.fc_reduce"), &mut r.fc_reduce);
        self.linear(&format!("{p}.fc_expand"), &mut r.fc_expand);
    }
    fn arr1(&mut self, p: &str, a: &'a mut Array1<f32>) {
        self.push(p.to_string(), a.as_slice_mut().unwrap());
    }
}

fn read_u8(r: &mut dyn Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}
fn read_u16(r: &mut dyn Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}
fn read_u32(r: &mut dyn Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
fn read_f64(r: &mut dyn Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> CodecConfig {
        CodecConfig::new(8, 4, 2, LambdaSpec::mse_default()).unwrap()
    }

    #[test]
    fn seeded_construction_is_deterministic() {
        let a = ModelState::new(tiny_config(), 3).unwrap();
        let b = ModelState::new(tiny_config(), 3).unwrap();
        let mut ta = Vec::new();
        let mut tb = Vec::new();
        a.visit_tensors(&mut ta);
        b.visit_tensors(&mut tb);
        assert_eq!(ta.len(), tb.len());
        for ((na, va), (nb, vb)) in ta.iter().zip(tb.iter()) {
            assert_eq!(na, nb);
            assert_eq!(va.data, vb.data);
        }
    }

    #[test]
    fn archive_roundtrip_is_bitwise_lossless() {
        let model = ModelState::new(tiny_config(), 9).unwrap();
        let mut buf = Vec::new();
        model.save_to(&mut buf).unwrap();
        let loaded = ModelState::load_from(&mut buf.as_slice()).unwrap();
        let mut ta = Vec::new();
        let mut tb = Vec::new();
        model.visit_tensors(&mut ta);
        loaded.visit_tensors(&mut tb);
        for ((na, va), (nb, vb)) in ta.iter().zip(tb.iter()) {
            assert_eq!(na, nb);
            for (x, y) in va.data.iter().zip(vb.data.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(loaded.config.topk_indices, model.config.topk_indices);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let model = ModelState::new(tiny_config(), 1).unwrap();
        let mut buf = Vec::new();
        model.save_to(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(ModelState::load_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn scheme_variants_have_strictly_fewer_params() {
        let full = ModelState::new(tiny_config(), 0).unwrap();
        let mut cfg_b = tiny_config();
        cfg_b.use_sffm = false;
        let b = ModelState::new(cfg_b, 0).unwrap();
        let mut cfg_a = tiny_config();
        cfg_a.use_sffm = false;
        cfg_a.use_sgu = false;
        let a = ModelState::new(cfg_a, 0).unwrap();
        assert!(a.param_count() < b.param_count());
        assert!(b.param_count() < full.param_count());
    }

    #[test]
    fn zeros_like_matches_layout() {
        let model = ModelState::new(tiny_config(), 2).unwrap();
        let z = model.zeros_like();
        assert_eq!(z.param_count(), model.param_count());
        let mut slots = Vec::new();
        z.visit_tensors(&mut slots);
        assert!(slots.iter().all(|(_, t)| t.data.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn latent_and_hyper_dims() {
        let cfg = tiny_config();
        assert_eq!(cfg.latent_dims(256, 256), (16, 16));
        assert_eq!(cfg.hyper_dims(16, 16), (4, 4));
        assert_eq!(cfg.hyper_dims(1, 1), (1, 1));
        assert_eq!(cfg.hyper_dims(3, 5), (1, 2));
    }
}
