//! Binary checkpoint format, magic "SMT1".
//!
//! Layout (all little-endian): magic, format version, model config, train
//! config, parameter tensors in canonical declaration order with f32 data,
//! optional optimizer state (step counter plus f32 moment arrays per
//! learnable tensor), best validation loss, epoch.
//!
//! Parameters are stored at 32-bit precision, so building a checkpoint
//! rounds values once; restoring is exact, which makes save -> load -> save
//! byte-identical and predictions from a restored model bitwise stable.

use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{PatchShape, Pillars, SmtConfig, SmtParams};
use crate::train::{OptimizerState, TrainConfig};

pub const MAGIC: [u8; 4] = *b"SMT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CkptTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    pub learnable: bool,
    pub weight_decay: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CkptOptimizer {
    pub step: u64,
    /// First/second moments per learnable tensor, in tensor order.
    pub moments: Vec<(Vec<f32>, Vec<f32>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub smt_config: SmtConfig,
    pub train_config: TrainConfig,
    pub tensors: Vec<CkptTensor>,
    pub optimizer: Option<CkptOptimizer>,
    pub best_val_loss: f64,
    pub epoch: u32,
}

/// Round an f64 array to storage precision and back.
pub fn round_to_f32(values: &mut [f64]) {
    for v in values.iter_mut() {
        *v = *v as f32 as f64;
    }
}

impl Checkpoint {
    pub fn from_params(
        params: &SmtParams,
        train_config: TrainConfig,
        optimizer: Option<&OptimizerState>,
        best_val_loss: f64,
        epoch: u32,
    ) -> Self {
        let tensors = params
            .tensors
            .iter()
            .map(|t| CkptTensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                values: t.values.iter().map(|&v| v as f32).collect(),
                learnable: t.learnable,
                weight_decay: t.weight_decay,
            })
            .collect();
        let optimizer = optimizer.map(|state| CkptOptimizer {
            step: state.step,
            moments: params
                .tensors
                .iter()
                .enumerate()
                .filter(|(_, t)| t.learnable)
                .map(|(i, _)| {
                    (
                        state.m[i].iter().map(|&v| v as f32).collect(),
                        state.v[i].iter().map(|&v| v as f32).collect(),
                    )
                })
                .collect(),
        });
        Checkpoint {
            smt_config: params.config,
            train_config,
            tensors,
            optimizer,
            best_val_loss,
            epoch,
        }
    }

    /// Rebuild the model; values restore exactly (f32 widens losslessly).
    pub fn restore_params(&self) -> Result<SmtParams> {
        let mut params = SmtParams::init(self.smt_config, 0)?;
        if params.tensors.len() != self.tensors.len() {
            return Err(CheckpointError::Corrupt(format!(
                "tensor count {} does not match config-derived {}",
                self.tensors.len(),
                params.tensors.len()
            ))
            .into());
        }
        for (slot, stored) in params.tensors.iter_mut().zip(&self.tensors) {
            if slot.name != stored.name || slot.shape != stored.shape {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor {} {:?} does not match config-derived {} {:?}",
                    stored.name, stored.shape, slot.name, slot.shape
                ))
                .into());
            }
            slot.values = stored.values.iter().map(|&v| v as f64).collect();
        }
        Ok(params)
    }

    pub fn restore_optimizer(&self, params: &SmtParams) -> Option<OptimizerState> {
        let ckpt_opt = self.optimizer.as_ref()?;
        let mut state = OptimizerState::new(params);
        state.step = ckpt_opt.step;
        let mut it = ckpt_opt.moments.iter();
        for (i, t) in params.tensors.iter().enumerate() {
            if !t.learnable {
                continue;
            }
            let (m, v) = it.next()?;
            state.m[i] = m.iter().map(|&x| x as f64).collect();
            state.v[i] = v.iter().map(|&x| x as f64).collect();
        }
        Some(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(&MAGIC);
        w.u32(VERSION);

        let c = &self.smt_config;
        w.u32(c.image_h as u32);
        w.u32(c.image_w as u32);
        w.u32(c.image_c as u32);
        let (kind, a, b) = match c.patch_shape {
            PatchShape::Square { a, b } => (0u8, a, b),
            PatchShape::Row => (1, 1, c.image_w),
            PatchShape::Column => (2, c.image_h, 1),
        };
        w.u8(kind);
        w.u32(a as u32);
        w.u32(b as u32);
        w.u32(c.ts_count as u32);
        w.u32(c.ts_len as u32);
        w.u32(c.embed_dim as u32);
        w.u32(c.layers as u32);
        w.u32(c.heads as u32);
        w.u32(c.mlp_ratio as u32);
        w.u32(c.frames as u32);
        w.u8(match c.pillars {
            Pillars::Both => 0,
            Pillars::ImageOnly => 1,
            Pillars::TsOnly => 2,
        });
        w.u8(c.final_layer_norm as u8);

        let t = &self.train_config;
        w.u32(t.batch_size as u32);
        w.u32(t.epochs as u32);
        w.f64(t.lr_peak);
        w.f64(t.lr_warmup_start);
        w.u32(t.warmup_epochs as u32);
        w.f64(t.cosine_final_ratio);
        w.u32(t.early_stop_patience as u32);
        w.f64(t.weight_decay);
        w.f64(t.beta1);
        w.f64(t.beta2);
        w.f64(t.eps);
        w.u64(t.seed);

        w.u32(self.tensors.len() as u32);
        for tensor in &self.tensors {
            let name = tensor.name.as_bytes();
            w.u16(name.len() as u16);
            w.bytes(name);
            w.u8(tensor.shape.len() as u8);
            for &d in &tensor.shape {
                w.u32(d as u32);
            }
            w.u8(tensor.learnable as u8);
            w.u8(tensor.weight_decay as u8);
            for &v in &tensor.values {
                w.f32(v);
            }
        }

        match &self.optimizer {
            None => w.u8(0),
            Some(opt) => {
                w.u8(1);
                w.u64(opt.step);
                for (m, v) in &opt.moments {
                    for &x in m {
                        w.f32(x);
                    }
                    for &x in v {
                        w.f32(x);
                    }
                }
            }
        }

        w.f64(self.best_val_loss);
        w.u32(self.epoch);
        w.out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.array::<4>("magic")?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic { found: magic }.into());
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::VersionSkew { found: version, supported: VERSION }.into());
        }

        let image_h = r.u32("config")? as usize;
        let image_w = r.u32("config")? as usize;
        let image_c = r.u32("config")? as usize;
        let kind = r.u8("config")?;
        let a = r.u32("config")? as usize;
        let b = r.u32("config")? as usize;
        let patch_shape = match kind {
            0 => PatchShape::Square { a, b },
            1 => PatchShape::Row,
            2 => PatchShape::Column,
            other => {
                return Err(CheckpointError::Corrupt(format!("patch kind {other}")).into());
            }
        };
        let ts_count = r.u32("config")? as usize;
        let ts_len = r.u32("config")? as usize;
        let embed_dim = r.u32("config")? as usize;
        let layers = r.u32("config")? as usize;
        let heads = r.u32("config")? as usize;
        let mlp_ratio = r.u32("config")? as usize;
        let frames = r.u32("config")? as usize;
        let pillars = match r.u8("config")? {
            0 => Pillars::Both,
            1 => Pillars::ImageOnly,
            2 => Pillars::TsOnly,
            other => return Err(CheckpointError::Corrupt(format!("pillars {other}")).into()),
        };
        let final_layer_norm = r.u8("config")? != 0;
        let smt_config = SmtConfig {
            image_h,
            image_w,
            image_c,
            patch_shape,
            ts_count,
            ts_len,
            embed_dim,
            layers,
            heads,
            mlp_ratio,
            frames,
            pillars,
            final_layer_norm,
        };

        let train_config = TrainConfig {
            batch_size: r.u32("train config")? as usize,
            epochs: r.u32("train config")? as usize,
            lr_peak: r.f64("train config")?,
            lr_warmup_start: r.f64("train config")?,
            warmup_epochs: r.u32("train config")? as usize,
            cosine_final_ratio: r.f64("train config")?,
            early_stop_patience: r.u32("train config")? as usize,
            weight_decay: r.f64("train config")?,
            beta1: r.f64("train config")?,
            beta2: r.f64("train config")?,
            eps: r.f64("train config")?,
            seed: r.u64("train config")?,
        };

        let count = r.u32("tensor table")? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16("tensor name")? as usize;
            let name = String::from_utf8(r.slice(name_len, "tensor name")?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("tensor name not utf-8".into()))?;
            let ndim = r.u8("tensor shape")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("tensor shape")? as usize);
            }
            let learnable = r.u8("tensor flags")? != 0;
            let weight_decay = r.u8("tensor flags")? != 0;
            let numel: usize = shape.iter().product();
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                values.push(r.f32("tensor data")?);
            }
            tensors.push(CkptTensor { name, shape, values, learnable, weight_decay });
        }

        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let step = r.u64("optimizer state")?;
                let mut moments = Vec::new();
                for t in tensors.iter().filter(|t| t.learnable) {
                    let numel = t.values.len();
                    let mut m = Vec::with_capacity(numel);
                    for _ in 0..numel {
                        m.push(r.f32("optimizer state")?);
                    }
                    let mut v = Vec::with_capacity(numel);
                    for _ in 0..numel {
                        v.push(r.f32("optimizer state")?);
                    }
                    moments.push((m, v));
                }
                Some(CkptOptimizer { step, moments })
            }
            other => return Err(CheckpointError::Corrupt(format!("optimizer flag {other}")).into()),
        };

        let best_val_loss = r.f64("footer")?;
        let epoch = r.u32("footer")?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            ))
            .into());
        }
        Ok(Checkpoint { smt_config, train_config, tensors, optimizer, best_val_loss, epoch })
    }
}

#[derive(Default)]
struct Writer {
    out: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.out.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.out.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn slice(&mut self, len: usize, section: &'static str) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(CheckpointError::Truncated { section }.into());
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }
    fn array<const N: usize>(&mut self, section: &'static str) -> Result<[u8; N]> {
        Ok(self.slice(N, section)?.try_into().expect("length checked"))
    }
    fn u8(&mut self, section: &'static str) -> Result<u8> {
        Ok(self.slice(1, section)?[0])
    }
    fn u16(&mut self, section: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(section)?))
    }
    fn u32(&mut self, section: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(section)?))
    }
    fn u64(&mut self, section: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(section)?))
    }
    fn f32(&mut self, section: &'static str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array(section)?))
    }
    fn f64(&mut self, section: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(section)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::CheckpointError;
    use crate::model::{ModelInput, Pillars};

    fn tiny_config() -> SmtConfig {
        SmtConfig {
            image_h: 8,
            image_w: 8,
            image_c: 3,
            patch_shape: PatchShape::Square { a: 4, b: 4 },
            ts_count: 1,
            ts_len: 6,
            embed_dim: 8,
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
            frames: 1,
            pillars: Pillars::Both,
            final_layer_norm: false,
        }
    }

    fn sample_ckpt() -> Checkpoint {
        let params = SmtParams::init(tiny_config(), 77).unwrap();
        Checkpoint::from_params(&params, TrainConfig::default(), None, 0.123, 9)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ckpt = sample_ckpt();
        let bytes = ckpt.to_bytes();
        let reloaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(reloaded.to_bytes(), bytes);
        assert_eq!(reloaded, ckpt);
    }

    #[test]
    fn restored_model_predicts_bitwise_identically() {
        let config = tiny_config();
        let params = SmtParams::init(config, 5).unwrap();
        let ckpt = Checkpoint::from_params(&params, TrainConfig::default(), None, 0.0, 0);

        let pixels = config.image_h * config.image_w * config.image_c;
        let input = ModelInput {
            images: vec![(0..pixels).map(|i| (i % 11) as f64 / 11.0).collect()],
            ts: vec![vec![0.4; config.ts_len]],
        };

        let restored_before = ckpt.restore_params().unwrap();
        let pred_before = crate::model::predict(&restored_before, &input).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.smt");
        ckpt.save(&path).unwrap();
        let restored_after = Checkpoint::load(&path).unwrap().restore_params().unwrap();
        let pred_after = crate::model::predict(&restored_after, &input).unwrap();
        assert_eq!(pred_before.to_bits(), pred_after.to_bits());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = sample_ckpt().to_bytes();
        bytes[0] = b'X';
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Checkpoint(CheckpointError::BadMagic { .. })) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn version_skew_is_distinct_from_truncation() {
        let ckpt = sample_ckpt();
        let mut bytes = ckpt.to_bytes();
        bytes[4] = 99;
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Checkpoint(CheckpointError::VersionSkew { found: 99, .. })) => {}
            other => panic!("expected VersionSkew, got {other:?}"),
        }

        let bytes = ckpt.to_bytes();
        let cut = &bytes[..bytes.len() / 2];
        match Checkpoint::from_bytes(cut) {
            Err(Error::Checkpoint(CheckpointError::Truncated { .. })) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let mut bytes = sample_ckpt().to_bytes();
        bytes.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checkpoint(CheckpointError::Corrupt(_)))
        ));
    }

    #[test]
    fn optimizer_state_round_trips() {
        let params = SmtParams::init(tiny_config(), 77).unwrap();
        let mut state = OptimizerState::new(&params);
        state.step = 41;
        for (i, t) in params.tensors.iter().enumerate() {
            if t.learnable {
                for (j, v) in state.m[i].iter_mut().enumerate() {
                    *v = (i + j) as f64 * 0.5;
                }
            }
        }
        let ckpt =
            Checkpoint::from_params(&params, TrainConfig::default(), Some(&state), 0.5, 3);
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.optimizer.as_ref().unwrap().step, 41);
        let restored_params = back.restore_params().unwrap();
        let restored = back.restore_optimizer(&restored_params).unwrap();
        assert_eq!(restored.step, 41);
        for (i, t) in params.tensors.iter().enumerate() {
            if t.learnable {
                for (j, &v) in restored.m[i].iter().enumerate() {
                    assert_eq!(v, ((i + j) as f64 * 0.5) as f32 as f64);
                }
            }
        }
    }
}
