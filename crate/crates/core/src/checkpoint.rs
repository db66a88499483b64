//! Binary checkpoints: the resolved config, a step counter, named parameter
//! stores and optimizer state. Little-endian throughout; values are stored
//! bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use gradtape::{Adam, ParamStore, Tensor};

use crate::alignment::Optimizers;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::pipeline::Models;

const MAGIC: &[u8; 8] = b"ACVCCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn of(opt: &Adam<f32>) -> Self {
        let (m, v) = opt.moments();
        AdamState { step: opt.steps_taken(), m: m.to_vec(), v: v.to_vec() }
    }

    pub fn restore(&self, opt: &mut Adam<f32>) -> Result<()> {
        let (m, _) = opt.moments();
        if m.len() != self.m.len() || m.iter().zip(&self.m).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Config("optimizer state does not match the model layout".into()));
        }
        opt.restore(self.step, self.m.clone(), self.v.clone());
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    /// Completed joint-training steps.
    pub step: u64,
    pub stores: Vec<(String, ParamStore<f32>)>,
    pub optimizers: Vec<(String, AdamState)>,
}

pub const TEACHER: &str = "teacher";
pub const ADAPTER: &str = "adapter";
pub const RECON: &str = "recon";
pub const RECON_PRETRAINED: &str = "recon_pretrained";
pub const DISC: &str = "disc";
pub const DISC_MVG: &str = "disc_mvg";

impl Checkpoint {
    /// Snapshot of every model store (and optimizer state when given).
    pub fn capture(
        config: &ExperimentConfig,
        step: u64,
        models: &Models,
        opts: Option<&Optimizers>,
        recon_pretrained: Option<&ParamStore<f32>>,
    ) -> Self {
        let mut stores = vec![
            (TEACHER.to_string(), models.mvg.base.clone()),
            (ADAPTER.to_string(), models.mvg.adapter.clone()),
            (RECON.to_string(), models.recon_params.clone()),
            (DISC.to_string(), models.disc_params.clone()),
            (DISC_MVG.to_string(), models.disc_mvg_params.clone()),
        ];
        if let Some(p) = recon_pretrained {
            stores.push((RECON_PRETRAINED.to_string(), p.clone()));
        }
        let optimizers = opts
            .map(|o| {
                vec![
                    (ADAPTER.to_string(), AdamState::of(&o.adapter)),
                    (RECON.to_string(), AdamState::of(&o.recon)),
                    (DISC.to_string(), AdamState::of(&o.disc)),
                    (DISC_MVG.to_string(), AdamState::of(&o.disc_mvg)),
                ]
            })
            .unwrap_or_default();
        Checkpoint { config: config.clone(), step, stores, optimizers }
    }

    pub fn store(&self, name: &str) -> Option<&ParamStore<f32>> {
        self.stores.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    fn optimizer(&self, name: &str) -> Option<&AdamState> {
        self.optimizers.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    /// Copies stored parameters into `models`; every store present in the
    /// checkpoint must match the target layout exactly.
    pub fn apply(&self, models: &mut Models) -> Result<()> {
        let targets: [(&str, &mut ParamStore<f32>); 5] = [
            (TEACHER, &mut models.mvg.base),
            (ADAPTER, &mut models.mvg.adapter),
            (RECON, &mut models.recon_params),
            (DISC, &mut models.disc_params),
            (DISC_MVG, &mut models.disc_mvg_params),
        ];
        for (name, target) in targets {
            if let Some(src) = self.store(name) {
                copy_store(name, src, target)?;
            }
        }
        Ok(())
    }

    pub fn apply_optimizers(&self, opts: &mut Optimizers) -> Result<()> {
        let targets: [(&str, &mut Adam<f32>); 4] = [
            (ADAPTER, &mut opts.adapter),
            (RECON, &mut opts.recon),
            (DISC, &mut opts.disc),
            (DISC_MVG, &mut opts.disc_mvg),
        ];
        for (name, opt) in targets {
            let state = self
                .optimizer(name)
                .ok_or_else(|| Error::Config(format!("checkpoint has no optimizer state for {name}")))?;
            state.restore(opt)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|m| Error::format(path, m))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let json = serde_json::to_string(&self.config).expect("config serializes");
        write_bytes(w, json.as_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.stores.len() as u32).to_le_bytes())?;
        for (name, store) in &self.stores {
            write_bytes(w, name.as_bytes())?;
            w.write_all(&(store.len() as u32).to_le_bytes())?;
            for (pname, t) in store.iter() {
                write_bytes(w, pname.as_bytes())?;
                write_tensor(w, t)?;
            }
        }
        w.write_all(&(self.optimizers.len() as u32).to_le_bytes())?;
        for (name, st) in &self.optimizers {
            write_bytes(w, name.as_bytes())?;
            w.write_all(&st.step.to_le_bytes())?;
            w.write_all(&(st.m.len() as u32).to_le_bytes())?;
            for t in st.m.iter().chain(&st.v) {
                write_tensor(w, t)?;
            }
        }
        Ok(())
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| "truncated header".to_string())?;
        if &magic != MAGIC {
            return Err("not a checkpoint file".into());
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let json = String::from_utf8(read_bytes(&mut r)?).map_err(|e| e.to_string())?;
        let config: ExperimentConfig = serde_json::from_str(&json).map_err(|e| format!("embedded config: {e}"))?;
        let step = read_u64(&mut r)?;
        let mut stores = Vec::new();
        for _ in 0..read_u32(&mut r)? {
            let name = read_string(&mut r)?;
            let mut store = ParamStore::new();
            for _ in 0..read_u32(&mut r)? {
                let pname = read_string(&mut r)?;
                store.add(pname, read_tensor(&mut r)?);
            }
            stores.push((name, store));
        }
        let mut optimizers = Vec::new();
        for _ in 0..read_u32(&mut r)? {
            let name = read_string(&mut r)?;
            let step = read_u64(&mut r)?;
            let n = read_u32(&mut r)? as usize;
            let m = (0..n).map(|_| read_tensor(&mut r)).collect::<std::result::Result<Vec<_>, _>>()?;
            let v = (0..n).map(|_| read_tensor(&mut r)).collect::<std::result::Result<Vec<_>, _>>()?;
            optimizers.push((name, AdamState { step, m, v }));
        }
        if !r.is_empty() {
            return Err(format!("{} trailing bytes", r.len()));
        }
        Ok(Checkpoint { config, step, stores, optimizers })
    }
}

fn copy_store(what: &str, src: &ParamStore<f32>, dst: &mut ParamStore<f32>) -> Result<()> {
    let same_layout = src.len() == dst.len()
        && src.iter().zip(dst.iter()).all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape());
    if !same_layout {
        return Err(Error::Config(format!("checkpoint store {what} does not match the model layout")));
    }
    for ((_, a), (_, b)) in src.iter().zip(dst.iter_mut()) {
        *b = a.clone();
    }
    Ok(())
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> std::io::Result<()> {
    w.write_all(&(b.len() as u64).to_le_bytes())?;
    w.write_all(b)
}

fn write_tensor(w: &mut impl Write, t: &Tensor<f32>) -> std::io::Result<()> {
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    w.write_all(&bytes)
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> std::result::Result<&'a [u8], String> {
    if r.len() < n {
        return Err("truncated checkpoint".into());
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_u32(r: &mut &[u8]) -> std::result::Result<u32, String> {
    Ok(u32::from_le_bytes(take(r, 4)?.try_into().expect("4 bytes")))
}

fn read_u64(r: &mut &[u8]) -> std::result::Result<u64, String> {
    Ok(u64::from_le_bytes(take(r, 8)?.try_into().expect("8 bytes")))
}

fn read_bytes(r: &mut &[u8]) -> std::result::Result<Vec<u8>, String> {
    let n = read_u64(r)? as usize;
    Ok(take(r, n)?.to_vec())
}

fn read_string(r: &mut &[u8]) -> std::result::Result<String, String> {
    String::from_utf8(read_bytes(r)?).map_err(|e| e.to_string())
}

fn read_tensor(r: &mut &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let rank = read_u32(r)? as usize;
    let shape = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
    let n: usize = shape.iter().product();
    let data = take(r, 4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Tensor::new(shape, data))
}
