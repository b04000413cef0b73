//! Residual 3-D convolutional encoder with a fully connected head.
//!
//! Layout: 3x3x3 stem conv, residual stages of basic blocks (conv, ReLU, conv, plus an
//! identity or 1x1x1 projection shortcut, then ReLU), global average pooling per channel,
//! then dense layers with ReLU between them and no activation on the embedding layer.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::kernels::conv_out_len;
use crate::tensor::{Tape, Tensor, Var};

const CHECKPOINT_MAGIC: &[u8; 8] = b"PSIAMCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub blocks: usize,
    pub channels: usize,
    pub stride: usize,
}

impl StageConfig {
    pub fn new(blocks: usize, channels: usize, stride: usize) -> Self {
        StageConfig { blocks, channels, stride }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// `[C, D, H, W]`
    pub input_shape: [usize; 4],
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageConfig>,
    pub head_dims: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for EncoderConfig {
    /// Four stages of two blocks each on 16^3 single-channel volumes.
    fn default() -> Self {
        EncoderConfig {
            input_shape: [1, 16, 16, 16],
            stem_channels: 8,
            stem_stride: 1,
            stages: vec![
                StageConfig::new(2, 8, 1),
                StageConfig::new(2, 16, 2),
                StageConfig::new(2, 32, 2),
                StageConfig::new(2, 64, 2),
            ],
            head_dims: vec![64, 32, 8],
            embedding_dim: 8,
        }
    }
}

/// How a parameter tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// Uniform in `±sqrt(6 / fan_in)`.
    FanIn(usize),
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
}

impl EncoderConfig {
    /// A two-stage, one-block-per-stage network with a strided stem. Cheap enough to train
    /// for hundreds of epochs on a single core.
    pub fn compact() -> Self {
        EncoderConfig {
            input_shape: [1, 16, 16, 16],
            stem_channels: 4,
            stem_stride: 2,
            stages: vec![StageConfig::new(1, 8, 2), StageConfig::new(1, 16, 2)],
            head_dims: vec![64, 32, 8],
            embedding_dim: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::EncoderConfig(m));
        if self.input_shape.contains(&0) {
            return bad(format!("input_shape {:?} has a zero extent", self.input_shape));
        }
        if self.stem_channels == 0 {
            return bad("stem_channels must be positive".into());
        }
        if !matches!(self.stem_stride, 1 | 2) {
            return bad(format!("stem_stride {} not in {{1, 2}}", self.stem_stride));
        }
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 || s.channels == 0 {
                return bad(format!("stage {i} needs positive blocks and channels"));
            }
            if !matches!(s.stride, 1 | 2) {
                return bad(format!("stage {i} stride {} not in {{1, 2}}", s.stride));
            }
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive".into());
        }
        match self.head_dims.last() {
            None => return bad("head_dims must be non-empty".into()),
            Some(&last) if last != self.embedding_dim => {
                return bad(format!("last head dim {last} != embedding_dim {}", self.embedding_dim))
            }
            _ => {}
        }
        if self.head_dims.contains(&0) {
            return bad("head_dims must be positive".into());
        }
        self.feature_extents()?;
        Ok(())
    }

    /// Spatial extents after the stem and after every stage, in order.
    pub fn feature_extents(&self) -> Result<Vec<[usize; 3]>> {
        let step = |e: [usize; 3], k: usize, stride: usize, pad: usize| -> Result<[usize; 3]> {
            let mut out = [0; 3];
            for a in 0..3 {
                out[a] = conv_out_len(e[a], k, stride, pad)
                    .ok_or_else(|| Error::EncoderConfig(format!("spatial extent {e:?} collapses")))?;
            }
            Ok(out)
        };
        let [_, d, h, w] = self.input_shape;
        let mut e = step([d, h, w], 3, self.stem_stride, 1)?;
        let mut all = vec![e];
        for s in &self.stages {
            e = step(e, 3, s.stride, 1)?;
            all.push(e);
        }
        Ok(all)
    }

    /// Every learned tensor, in forward order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: InitKind| {
            specs.push(ParamSpec { name, shape, init })
        };
        let c_in = self.input_shape[0];
        push("stem.w".into(), vec![self.stem_channels, c_in, 3, 3, 3], InitKind::FanIn(c_in * 27));
        let mut ch = self.stem_channels;
        for (si, stage) in self.stages.iter().enumerate() {
            for b in 0..stage.blocks {
                let stride = if b == 0 { stage.stride } else { 1 };
                let out = stage.channels;
                let p = format!("stage{si}.block{b}");
                push(format!("{p}.conv1.w"), vec![out, ch, 3, 3, 3], InitKind::FanIn(ch * 27));
                push(format!("{p}.conv2.w"), vec![out, out, 3, 3, 3], InitKind::FanIn(out * 27));
                if ch != out || stride != 1 {
                    push(format!("{p}.proj.w"), vec![out, ch, 1, 1, 1], InitKind::FanIn(ch));
                }
                ch = out;
            }
        }
        for (i, &dim) in self.head_dims.iter().enumerate() {
            push(format!("head{i}.w"), vec![dim, ch], InitKind::FanIn(ch));
            push(format!("head{i}.b"), vec![dim], InitKind::Zero);
            ch = dim;
        }
        specs
    }
}

/// Learned weights of an encoder, keyed by tensor name.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    seed: u64,
    tensors: BTreeMap<String, Tensor>,
}

impl EncoderParams {
    /// Fan-in scaled uniform weights, zero biases; a pure function of `(config, seed)`.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for spec in config.param_specs() {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                InitKind::Zero => vec![0.0; n],
                InitKind::FanIn(fan_in) => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
            };
            tensors.insert(spec.name, Tensor::new(spec.shape, data)?);
        }
        Ok(EncoderParams { config: config.clone(), seed, tensors })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers every tensor as a parameter leaf on `tape`, once.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self.tensors.iter().map(|(k, t)| (k.clone(), tape.param(t.clone()))).collect();
        BoundParams { vars }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
            offset += t.len();
        }
        let header = CheckpointHeader { config: self.config.clone(), seed: self.seed, tensors: entries };
        let hbytes = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + hbytes.len() + offset * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(hbytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&hbytes);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fmt = |d: &str| Error::Format { path: origin.to_path_buf(), detail: d.to_string() };
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fmt("not a checkpoint (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let hend = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| fmt("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[16..hend]).map_err(|e| fmt(&format!("header: {e}")))?;
        header.config.validate()?;
        let body = &bytes[hend..];
        if !body.len().is_multiple_of(8) {
            return Err(fmt("data section is not a whole number of f64 values"));
        }
        let values: Vec<f64> =
            body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();

        let specs = header.config.param_specs();
        if specs.len() != header.tensors.len() {
            return Err(fmt("tensor list does not match config"));
        }
        let expected: BTreeMap<&str, &[usize]> =
            specs.iter().map(|s| (s.name.as_str(), s.shape.as_slice())).collect();
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            if expected.get(e.name.as_str()) != Some(&e.shape.as_slice()) {
                return Err(fmt(&format!("tensor `{}` has unexpected shape {:?}", e.name, e.shape)));
            }
            let n: usize = e.shape.iter().product();
            let data = values.get(e.offset..e.offset + n).ok_or_else(|| fmt("truncated data"))?;
            tensors.insert(e.name, Tensor::new(e.shape, data.to_vec())?);
        }
        if tensors.values().map(Tensor::len).sum::<usize>() != values.len() {
            return Err(fmt("trailing data"));
        }
        Ok(EncoderParams { config: header.config, seed: header.seed, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&io::read(path)?, path)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: EncoderConfig,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the data section.
    offset: usize,
}

/// Tape handles for one encoder's parameters.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Handles supplied by the caller, e.g. parameters registered as gradient-check inputs.
impl FromIterator<(String, Var)> for BoundParams {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        BoundParams { vars: iter.into_iter().collect() }
    }
}

/// Forward pass on the tape. All branches of a Siamese network call this with the same
/// `bound` handles, so they share one set of weights.
pub fn embed_on_tape(
    tape: &mut Tape,
    config: &EncoderConfig,
    bound: &BoundParams,
    volume: Var,
) -> Result<Var> {
    let got = tape.value(volume).shape();
    if got != config.input_shape.as_slice() {
        return Err(Error::shape(
            "embed",
            format!("volume shape {got:?} != input_shape {:?}", config.input_shape),
        ));
    }
    let mut x = tape.conv3d(volume, bound.var("stem.w")?, config.stem_stride, 1)?;
    x = tape.relu(x)?;
    let mut ch = config.stem_channels;
    for (si, stage) in config.stages.iter().enumerate() {
        for b in 0..stage.blocks {
            let stride = if b == 0 { stage.stride } else { 1 };
            let p = format!("stage{si}.block{b}");
            let h = tape.conv3d(x, bound.var(&format!("{p}.conv1.w"))?, stride, 1)?;
            let h = tape.relu(h)?;
            let h = tape.conv3d(h, bound.var(&format!("{p}.conv2.w"))?, 1, 1)?;
            let shortcut = if ch != stage.channels || stride != 1 {
                tape.conv3d(x, bound.var(&format!("{p}.proj.w"))?, stride, 0)?
            } else {
                x
            };
            let sum = tape.add(h, shortcut)?;
            x = tape.relu(sum)?;
            ch = stage.channels;
        }
    }
    x = tape.global_avg_pool(x)?;
    let last = config.head_dims.len() - 1;
    for i in 0..config.head_dims.len() {
        x = tape.dense(x, bound.var(&format!("head{i}.w"))?, bound.var(&format!("head{i}.b"))?)?;
        if i != last {
            x = tape.relu(x)?;
        }
    }
    Ok(x)
}

/// Embeds a single volume without keeping gradients.
pub fn embed(params: &EncoderParams, volume: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let v = tape.constant(volume.clone());
    let out = embed_on_tape(&mut tape, &params.config, &bound, v)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            input_shape: [1, 4, 4, 4],
            stem_channels: 2,
            stem_stride: 1,
            stages: vec![StageConfig::new(1, 3, 2)],
            head_dims: vec![5, 4],
            embedding_dim: 4,
        }
    }

    #[test]
    fn default_config_is_valid() {
        EncoderConfig::default().validate().unwrap();
        EncoderConfig::compact().validate().unwrap();
        assert_eq!(
            EncoderConfig::default().feature_extents().unwrap(),
            vec![[16; 3], [16; 3], [8; 3], [4; 3], [2; 3]]
        );
    }

    #[test]
    fn invalid_configs() {
        let mut c = tiny();
        c.head_dims = vec![5, 3];
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.stages[0].stride = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.head_dims.clear();
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.stages.clear();
        assert!(c.validate().is_err());
        assert!(EncoderParams::init(&EncoderConfig { stem_channels: 0, ..tiny() }, 1).is_err());
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let a = EncoderParams::init(&tiny(), 3).unwrap();
        assert_eq!(a, EncoderParams::init(&tiny(), 3).unwrap());
        let b = EncoderParams::init(&tiny(), 4).unwrap();
        assert!(a.tensors().iter().any(|(k, t)| b.get(k) != Some(t)));
        assert!(a.get("head0.b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_shapes_follow_config() {
        let p = EncoderParams::init(&tiny(), 0).unwrap();
        assert_eq!(p.get("stem.w").unwrap().shape(), &[2, 1, 3, 3, 3]);
        assert_eq!(p.get("stage0.block0.proj.w").unwrap().shape(), &[3, 2, 1, 1, 1]);
        assert_eq!(p.get("head0.w").unwrap().shape(), &[5, 3]);
        assert_eq!(p.get("head1.w").unwrap().shape(), &[4, 5]);
        assert_eq!(p.tensors().len(), 8);
    }

    #[test]
    fn identity_shortcut_has_no_projection() {
        let cfg = EncoderConfig {
            stages: vec![StageConfig::new(2, 2, 1)],
            ..tiny()
        };
        let names: Vec<_> = cfg.param_specs().into_iter().map(|s| s.name).collect();
        assert!(!names.iter().any(|n| n.contains("proj")));
    }

    #[test]
    fn embed_shape_and_zero_volume() {
        let cfg = EncoderConfig::compact();
        let mut p = EncoderParams::init(&cfg, 1).unwrap();
        let v = Tensor::zeros(&cfg.input_shape);
        let e = embed(&p, &v).unwrap();
        assert_eq!(e.shape(), &[8]);
        assert!(e.data().iter().all(|&x| x == 0.0));
        // Biases are zero at init; a non-zero bias must show up.
        p.get_mut("head2.b").unwrap().data_mut()[0] = 0.5;
        assert_eq!(embed(&p, &v).unwrap().data()[0], 0.5);
    }

    #[test]
    fn embed_rejects_wrong_shape() {
        let p = EncoderParams::init(&tiny(), 1).unwrap();
        assert!(embed(&p, &Tensor::zeros(&[1, 5, 4, 4])).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let p = EncoderParams::init(&tiny(), 9).unwrap();
        let bytes = p.to_bytes().unwrap();
        let q = EncoderParams::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.to_bytes().unwrap(), bytes);
        assert!(EncoderParams::from_bytes(&bytes[..bytes.len() - 8], Path::new("x")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(EncoderParams::from_bytes(&bad, Path::new("x")).is_err());
    }
}
