//! Binary checkpoint format.
//!
//! ```text
//! "AWMF" | u32 version | u32 M | u32 W | u32 n_scales | u32 scale...
//! u32 n_records | record...
//! "OPTS" | u32 n_records | record...          (optimizer slots)
//! record = u32 name_len | name | u32 rank | u32 extent... | f32 value...
//! ```
//!
//! All integers and floats are little-endian. Running batch-norm statistics
//! are stored as `<name>.running_mean` / `<name>.running_var` records once
//! they have been initialized. Optimizer records are `<param>.m`,
//! `<param>.v` and `<param>.step`. The architecture is recovered from the
//! record shapes.

use std::collections::BTreeMap;
use std::path::Path;

use super::{BundleConfig, ModelBundle, FORMAT_VERSION, SCALES};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"AWMF";
const OPT_TAG: &[u8; 4] = b"OPTS";

struct Record {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_record<'a>(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: impl Iterator<Item = &'a f64>) {
    put_u32(buf, name.len());
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, shape.len());
    for &e in shape {
        put_u32(buf, e);
    }
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn record(&mut self) -> Result<(String, Record)> {
        let len = self.u32("record name length")?;
        let name = String::from_utf8(self.take(len, "record name")?.to_vec())
            .map_err(|_| Error::CheckpointMismatch("record name is not UTF-8".into()))?;
        let rank = self.u32(&name)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32(&name)?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::CheckpointMismatch(format!("{name}: extents overflow")))?;
        let bytes = self.take(n, &name)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((name, Record { shape, data }))
    }
}

impl ModelBundle {
    /// Serialize parameters, initialized running statistics and optimizer slots.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_u32(&mut buf, self.config.classes);
        put_u32(&mut buf, self.config.window);
        put_u32(&mut buf, SCALES.len());
        for s in SCALES {
            put_u32(&mut buf, s);
        }
        let stats: Vec<_> = self.store.all_stats().iter().filter(|s| s.initialized).collect();
        put_u32(&mut buf, self.store.params().len() + 2 * stats.len());
        for p in self.store.params() {
            put_record(&mut buf, &p.name, p.value.shape(), p.value.data().iter());
        }
        for s in stats {
            let c = [s.mean.len()];
            put_record(&mut buf, &format!("{}.running_mean", s.name), &c, s.mean.iter());
            put_record(&mut buf, &format!("{}.running_var", s.name), &c, s.var.iter());
        }
        buf.extend_from_slice(OPT_TAG);
        put_u32(&mut buf, 3 * self.store.params().len());
        for p in self.store.params() {
            put_record(&mut buf, &format!("{}.m", p.name), p.value.shape(), p.m.iter());
            put_record(&mut buf, &format!("{}.v", p.name), p.value.shape(), p.v.iter());
            let step = [p.step as f64];
            put_record(&mut buf, &format!("{}.step", p.name), &[1], step.iter());
        }
        buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let mut r = Reader { buf, pos: 4 };
        let version = r.u32("version")? as u32;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let classes = r.u32("class count")?;
        let window = r.u32("window")?;
        let n_scales = r.u32("scale count")?;
        let mut scales = Vec::new();
        for _ in 0..n_scales {
            scales.push(r.u32("scales")?);
        }
        if scales != SCALES {
            return Err(Error::CheckpointMismatch(format!("unsupported scales {scales:?}")));
        }
        let mut records = BTreeMap::new();
        let n = r.u32("record count")?;
        for _ in 0..n {
            let (name, rec) = r.record()?;
            records.insert(name, rec);
        }
        let mut opt = BTreeMap::new();
        if !r.at_end() {
            if r.take(4, "optimizer tag")? != OPT_TAG {
                return Err(Error::CheckpointMismatch("unknown trailing section".into()));
            }
            let n = r.u32("optimizer record count")?;
            for _ in 0..n {
                let (name, rec) = r.record()?;
                opt.insert(name, rec);
            }
            if !r.at_end() {
                return Err(Error::CheckpointMismatch("trailing bytes".into()));
            }
        }

        let config = infer_config(&records, classes, window)?;
        let mut bundle = ModelBundle::new(config, 0)?;
        let ids: Vec<_> = bundle.store.ids().collect();
        for id in ids {
            let p = bundle.store.get_mut(id);
            let rec = records
                .remove(&p.name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter {}", p.name)))?;
            if rec.shape != p.value.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "{}: stored shape {:?}, model expects {:?}",
                    p.name,
                    rec.shape,
                    p.value.shape()
                )));
            }
            copy_into(p.value.data_mut(), &rec.data);
            if let Some(m) = opt.remove(&format!("{}.m", p.name)) {
                check_len(&p.name, &m, p.m.len())?;
                copy_into(&mut p.m, &m.data);
            }
            if let Some(v) = opt.remove(&format!("{}.v", p.name)) {
                check_len(&p.name, &v, p.v.len())?;
                copy_into(&mut p.v, &v.data);
            }
            if let Some(s) = opt.remove(&format!("{}.step", p.name)) {
                check_len(&p.name, &s, 1)?;
                p.step = s.data[0] as u64;
            }
        }
        for i in 0..bundle.store.all_stats().len() {
            let name = bundle.store.all_stats()[i].name.clone();
            let id = bundle.store.stats_id(&name).expect("listed stats exist");
            let mean = records.remove(&format!("{name}.running_mean"));
            let var = records.remove(&format!("{name}.running_var"));
            match (mean, var) {
                (Some(mean), Some(var)) => {
                    let s = bundle.store.stats_mut(id);
                    check_len(&name, &mean, s.mean.len())?;
                    check_len(&name, &var, s.var.len())?;
                    copy_into(&mut s.mean, &mean.data);
                    copy_into(&mut s.var, &var.data);
                    s.initialized = true;
                }
                (None, None) => {}
                _ => {
                    return Err(Error::CheckpointMismatch(format!(
                        "{name}: running mean and variance must be stored together"
                    )))
                }
            }
        }
        if let Some(name) = records.keys().chain(opt.keys()).next() {
            return Err(Error::CheckpointMismatch(format!("unexpected record {name}")));
        }
        Ok(bundle)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&buf)
    }
}

fn copy_into(dst: &mut [f64], src: &[f32]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = s as f64;
    }
}

fn check_len(name: &str, rec: &Record, n: usize) -> Result<()> {
    if rec.data.len() != n {
        return Err(Error::CheckpointMismatch(format!(
            "{name}: {} stored values, expected {n}",
            rec.data.len()
        )));
    }
    Ok(())
}

/// Recover the architecture from the parameter shapes.
fn infer_config(records: &BTreeMap<String, Record>, classes: usize, window: usize) -> Result<BundleConfig> {
    let kernel = |name: String| -> Result<&[usize]> {
        records
            .get(&name)
            .map(|r| r.shape.as_slice())
            .filter(|s| s.len() == 4)
            .ok_or(Error::CheckpointMismatch(format!("missing parameter {name}")))
    };
    let enc0 = kernel("expert1.enc0.conv0.kernel".into())?;
    let in_channels = enc0[1];
    let mut expert_widths = Vec::new();
    while let Ok(s) = kernel(format!("expert1.enc{}.conv0.kernel", expert_widths.len())) {
        expert_widths.push(s[0]);
    }
    let mut weighting_widths = Vec::new();
    while let Ok(s) = kernel(format!("weighting.block{}.kernel", weighting_widths.len())) {
        weighting_widths.push(s[0]);
    }
    let aggregator_width = kernel("aggregator.conv0.kernel".into())?[0];
    Ok(BundleConfig {
        classes,
        window,
        in_channels,
        expert_widths,
        weighting_widths,
        aggregator_width,
        zero_heads: false,
    })
}
