//! Binary model container: header (architecture hash, dimensions,
//! normalization stats), named 64-bit float tensors and batchnorm
//! running stats, closed by a SHA-256 integrity trailer.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::BnState;
use crate::data::NormStats;
use crate::networks::{ArchConfig, DtsdaModel};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"DTSDAMDL";
const VERSION: u32 = 1;

fn arch_hash(params: &ParamSet<f64>) -> u64 {
    // FNV-1a over the sorted (name, shape) list
    let mut entries: Vec<(String, Vec<usize>)> = params
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec()))
        .collect();
    entries.sort();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for (name, shape) in entries {
        eat(name.as_bytes());
        eat(&[0]);
        for d in shape {
            eat(&(d as u64).to_le_bytes());
        }
    }
    h
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::ModelFile("truncated model file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        Ok(String::from_utf8_lossy(self.take(n)?).into_owned())
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn save_model(model: &DtsdaModel, path: &Path) -> Result<()> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u64(arch_hash(&model.params));
    w.u32(model.arch.num_classes as u32);
    w.u32(model.arch.states as u32);
    w.u32(model.arch.in_channels as u32);
    w.u32(model.arch.window_len as u32);
    w.u32(model.trained as u32);
    w.u32(model.update_extractor_in_phases_2_3 as u32);

    match &model.norm {
        Some(n) => {
            w.u32(1);
            w.f64s(&n.mean);
            w.f64s(&n.std);
        }
        None => w.u32(0),
    }

    w.u32(model.bn.len() as u32);
    for (name, st) in &model.bn {
        w.str(name);
        w.f64s(&st.running_mean);
        w.f64s(&st.running_var);
        w.f64(st.momentum);
        w.f64(st.eps);
    }

    w.u32(model.params.len() as u32);
    for p in model.params.iter() {
        w.str(&p.name);
        let shape = p.value.shape();
        w.u32(shape.len() as u32);
        for &d in shape {
            w.u64(d as u64);
        }
        w.f64s(p.value.data());
    }

    let digest = Sha256::digest(&w.buf);
    w.buf.extend_from_slice(&digest);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&w.buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<DtsdaModel> {
    let buf = std::fs::read(path)?;
    if buf.len() < 32 + MAGIC.len() {
        return Err(Error::ModelFile("file too short".into()));
    }
    let (body, trailer) = buf.split_at(buf.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(Error::ModelFile("checksum mismatch; file corrupt or truncated".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::ModelFile("not a model file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::ModelFile(format!("unsupported version {version}")));
    }
    let stored_hash = r.u64()?;
    let arch = ArchConfig {
        num_classes: r.u32()? as usize,
        states: r.u32()? as usize,
        in_channels: r.u32()? as usize,
        window_len: r.u32()? as usize,
    };
    let trained = r.u32()? != 0;
    let update_flag = r.u32()? != 0;

    let norm = if r.u32()? == 1 {
        Some(NormStats { mean: r.f64s()?, std: r.f64s()? })
    } else {
        None
    };

    let mut bn: BTreeMap<String, BnState<f64>> = BTreeMap::new();
    let bn_count = r.u32()?;
    for _ in 0..bn_count {
        let name = r.str()?;
        let running_mean = r.f64s()?;
        let running_var = r.f64s()?;
        let momentum = r.f64()?;
        let eps = r.f64()?;
        bn.insert(name, BnState { running_mean, running_var, momentum, eps });
    }

    // build a reference model to validate the name/shape sets
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut model = DtsdaModel::new(arch, &mut rng)?;
    model.trained = trained;
    model.update_extractor_in_phases_2_3 = update_flag;
    model.norm = norm;

    if arch_hash(&model.params) != stored_hash {
        return Err(Error::ModelFile("architecture hash mismatch".into()));
    }

    let param_count = r.u32()? as usize;
    if param_count != model.params.len() {
        return Err(Error::ModelFile(format!(
            "parameter count mismatch: file has {param_count}, architecture expects {}",
            model.params.len()
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..param_count {
        let name = r.str()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let data = r.f64s()?;
        if !model.params.contains(&name) {
            return Err(Error::ModelFile(format!("unexpected parameter {name}")));
        }
        let p = model.params.get_mut(&name);
        if p.value.shape() != shape.as_slice() {
            return Err(Error::ModelFile(format!(
                "shape mismatch for parameter {name}: file {:?}, architecture {:?}",
                shape,
                p.value.shape()
            )));
        }
        p.value = Tensor::new(shape, data);
        seen.insert(name);
    }
    if seen.len() != param_count {
        return Err(Error::ModelFile("duplicate parameter in file".into()));
    }
    for (name, st) in bn {
        match model.bn.get_mut(&name) {
            Some(slot) => {
                if slot.running_mean.len() != st.running_mean.len() {
                    return Err(Error::ModelFile(format!("shape mismatch for batchnorm state {name}")));
                }
                *slot = st;
            }
            None => return Err(Error::ModelFile(format!("unexpected batchnorm state {name}"))),
        }
    }
    Ok(model)
}
