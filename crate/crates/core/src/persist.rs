//! Binary model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "HFST" | u16 version | u8 role
//! u32 config length | config text (sorted `key=value` lines)
//! u32 tensor count
//!   per tensor: u16 name length | name | u8 rank | u32 dims… | f32 payload
//! u32 CRC-32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::{ColumnState, StandardizerState};
use crate::error::{Error, Result};
use crate::hypernet::{AnchorStage, GeneratedNetwork, HyperNetConfig, HyperNetParams};
use crate::inference::{FittedModel, Member};
use crate::linalg::Matrix;
use crate::mainnet::{Dense, GeneratedLayers, ResidualMode};
use crate::meta::Checkpoint;
use crate::transform::{InputMap, PcaState, RfProjection, TransformState};

pub const MAGIC: &[u8; 4] = b"HFST";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileRole {
    Params = 1,
    Fitted = 2,
    Checkpoint = 3,
}

impl FileRole {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(FileRole::Params),
            2 => Ok(FileRole::Fitted),
            3 => Ok(FileRole::Checkpoint),
            other => Err(Error::Format(format!("unknown role byte {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub role: FileRole,
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<Tensor>,
}

fn escape(v: &str) -> String {
    v.replace('\\', "\\\\").replace('\n', "\\n").replace('\r', "\\r")
}

fn unescape(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    let mut chars = v.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some('r') => out.push('\r'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl ModelFile {
    pub fn new(role: FileRole) -> Self {
        Self {
            role,
            config: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.config.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.config
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("missing config key `{key}`")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse()
            .map_err(|_| Error::Format(format!("bad value for `{key}`")))
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, values: &[f64]) {
        self.tensors.push(Tensor {
            name: name.into(),
            dims,
            data: values.iter().map(|&v| v as f32).collect(),
        });
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    }

    pub fn tensor_f64(&self, name: &str, dims: &[usize]) -> Result<Vec<f64>> {
        let t = self.tensor(name)?;
        if t.dims != dims {
            return Err(Error::Format(format!(
                "tensor `{name}` has dims {:?}, expected {dims:?}",
                t.dims
            )));
        }
        Ok(t.data.iter().map(|&v| v as f64).collect())
    }

    fn matrix(&self, name: &str) -> Result<Matrix<f64>> {
        let t = self.tensor(name)?;
        match t.dims[..] {
            [r, c] => Matrix::from_vec(r, c, t.data.iter().map(|&v| v as f64).collect()),
            _ => Err(Error::Format(format!("tensor `{name}` is not a matrix"))),
        }
    }

    fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let t = self.tensor(name)?;
        if t.dims.len() != 1 {
            return Err(Error::Format(format!("tensor `{name}` is not a vector")));
        }
        Ok(t.data.iter().map(|&v| v as f64).collect())
    }

    fn indices(&self, name: &str) -> Result<Vec<usize>> {
        self.vector(name)?
            .into_iter()
            .map(|v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Format(format!("tensor `{name}` holds a non-index value {v}")))
                }
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.role as u8);
        let mut text = String::new();
        for (k, v) in &self.config {
            if k.contains(['=', '\n', '\r']) {
                return Err(Error::Format(format!("config key `{k}` is not representable")));
            }
            text.push_str(k);
            text.push('=');
            text.push_str(&escape(v));
            text.push('\n');
        }
        let len = |n: usize, what: &str| {
            u32::try_from(n).map_err(|_| Error::Format(format!("{what} too large")))
        };
        out.extend_from_slice(&len(text.len(), "config")?.to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&len(self.tensors.len(), "tensor count")?.to_le_bytes());
        for t in &self.tensors {
            let name_len = u16::try_from(t.name.len())
                .map_err(|_| Error::Format(format!("tensor name `{}` too long", t.name)))?;
            let rank = u8::try_from(t.dims.len()).map_err(|_| Error::Format("tensor rank too large".into()))?;
            if t.dims.iter().product::<usize>() != t.data.len() {
                return Err(Error::Format(format!("tensor `{}` dims do not match its data", t.name)));
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(rank);
            for &d in &t.dims {
                out.extend_from_slice(&len(d, "tensor dim")?.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 2 + 1 + 4 + 4 + 4 {
            return Err(Error::Format("file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Format("checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a model file (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let role = FileRole::from_byte(r.u8()?)?;
        let text_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
        let mut config = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad config line `{line}`")))?;
            config.insert(k.to_string(), unescape(v));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format("tensor too large".into()))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(Tensor { name, dims, data });
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after the tensor directory".into()));
        }
        Ok(Self { role, config, tensors })
    }

    /// Write through a temporary file in the same directory, then rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        std::io::Write::write_all(&mut tmp, &bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn expect_role(&self, role: FileRole) -> Result<()> {
        if self.role != role {
            return Err(Error::Format(format!("expected a {role:?} file, found {:?}", self.role)));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Hypernetwork configuration and parameters
// ---------------------------------------------------------------------------

fn bool_str(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}

pub fn write_hypernet_config(f: &mut ModelFile, cfg: &HyperNetConfig) {
    let p = "hypernet.";
    f.set(format!("{p}n_pc"), cfg.n_pc);
    f.set(format!("{p}d_rf"), cfg.d_rf);
    f.set(format!("{p}h_hn"), cfg.h_hn);
    f.set(format!("{p}n_layers"), cfg.n_layers);
    f.set(format!("{p}trunk_depth"), cfg.trunk_depth);
    f.set(format!("{p}max_classes"), cfg.max_classes);
    f.set(format!("{p}max_support"), cfg.max_support);
    f.set(format!("{p}nn_anchor_cap"), cfg.nn_anchor_cap);
    f.set(format!("{p}clip_sigma"), cfg.clip_sigma);
    f.set(format!("{p}residual"), cfg.residual.as_str());
    f.set(format!("{p}classifier_residual"), bool_str(cfg.classifier_residual));
    f.set(format!("{p}concat_pca"), bool_str(cfg.concat_pca));
    f.set(format!("{p}classifier_shares_trunk"), bool_str(cfg.classifier_shares_trunk));
    f.set(format!("{p}use_rf_pca"), bool_str(cfg.use_rf_pca));
    f.set(format!("{p}random_main_weights"), bool_str(cfg.random_main_weights));
    f.set(format!("{p}nn_bias_pca"), bool_str(cfg.nn_bias_pca));
    f.set(format!("{p}nn_bias_hidden"), bool_str(cfg.nn_bias_hidden));
}

pub fn read_hypernet_config(f: &ModelFile) -> Result<HyperNetConfig> {
    let p = "hypernet.";
    let k = |name: &str| format!("{p}{name}");
    let cfg = HyperNetConfig {
        n_pc: f.parse(&k("n_pc"))?,
        d_rf: f.parse(&k("d_rf"))?,
        h_hn: f.parse(&k("h_hn"))?,
        n_layers: f.parse(&k("n_layers"))?,
        trunk_depth: f.parse(&k("trunk_depth"))?,
        max_classes: f.parse(&k("max_classes"))?,
        max_support: f.parse(&k("max_support"))?,
        nn_anchor_cap: f.parse(&k("nn_anchor_cap"))?,
        clip_sigma: f.parse(&k("clip_sigma"))?,
        residual: ResidualMode::parse(f.get(&k("residual"))?)?,
        classifier_residual: f.parse(&k("classifier_residual"))?,
        concat_pca: f.parse(&k("concat_pca"))?,
        classifier_shares_trunk: f.parse(&k("classifier_shares_trunk"))?,
        use_rf_pca: f.parse(&k("use_rf_pca"))?,
        random_main_weights: f.parse(&k("random_main_weights"))?,
        nn_bias_pca: f.parse(&k("nn_bias_pca"))?,
        nn_bias_hidden: f.parse(&k("nn_bias_hidden"))?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write_params(f: &mut ModelFile, params: &HyperNetParams<f64>) {
    for (name, dims, values) in params.named_tensors() {
        f.push(format!("params.{name}"), dims, values);
    }
}

fn read_params(f: &ModelFile, cfg: &HyperNetConfig) -> Result<HyperNetParams<f64>> {
    let mut params = HyperNetParams::<f64>::init(cfg, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
    let shapes: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, d, _)| (n, d))
        .collect();
    for ((name, dims), buf) in shapes.into_iter().zip(params.buffers_mut()) {
        let values = f.tensor_f64(&format!("params.{name}"), &dims)?;
        buf.copy_from_slice(&values);
    }
    Ok(params)
}

pub fn encode_params(params: &HyperNetParams<f64>, cfg: &HyperNetConfig) -> ModelFile {
    let mut f = ModelFile::new(FileRole::Params);
    write_hypernet_config(&mut f, cfg);
    write_params(&mut f, params);
    f
}

pub fn encode_checkpoint(ckpt: &Checkpoint, cfg: &HyperNetConfig) -> ModelFile {
    let mut f = ModelFile::new(FileRole::Checkpoint);
    write_hypernet_config(&mut f, cfg);
    f.set("checkpoint.step", ckpt.step);
    f.set("checkpoint.meta_val_score", ckpt.meta_val_score);
    write_params(&mut f, &ckpt.params);
    f
}

/// Parameters from a params or checkpoint file.
pub fn decode_params(f: &ModelFile) -> Result<(HyperNetParams<f64>, HyperNetConfig)> {
    if !matches!(f.role, FileRole::Params | FileRole::Checkpoint) {
        return Err(Error::Format("file holds a fitted model, not hypernetwork parameters".into()));
    }
    let cfg = read_hypernet_config(f)?;
    Ok((read_params(f, &cfg)?, cfg))
}

pub fn decode_checkpoint(f: &ModelFile) -> Result<(Checkpoint, HyperNetConfig)> {
    f.expect_role(FileRole::Checkpoint)?;
    let (params, cfg) = decode_params(f)?;
    Ok((
        Checkpoint {
            params,
            step: f.parse("checkpoint.step")?,
            meta_val_score: f.parse("checkpoint.meta_val_score")?,
        },
        cfg,
    ))
}

// ---------------------------------------------------------------------------
// Fitted models
// ---------------------------------------------------------------------------

/// Everything `predict` needs besides the model: how to standardize raw
/// columns and the original label strings.
#[derive(Clone, Debug, PartialEq)]
pub struct FittedBundle {
    pub model: FittedModel,
    pub standardizer: StandardizerState,
    pub label_column: String,
    pub labels: Vec<String>,
}

fn write_standardizer(f: &mut ModelFile, s: &StandardizerState) {
    f.set("standardizer.columns", s.columns.len());
    for (i, c) in s.columns.iter().enumerate() {
        let p = format!("standardizer.{i}.");
        f.set(format!("{p}name"), c.name());
        match c {
            ColumnState::Numeric { impute, mean, std, .. } => {
                f.set(format!("{p}kind"), "numeric");
                f.set(format!("{p}impute"), impute);
                f.set(format!("{p}mean"), mean);
                f.set(format!("{p}std"), std);
            }
            ColumnState::Categorical { impute, vocabulary, .. } => {
                f.set(format!("{p}kind"), "categorical");
                f.set(format!("{p}impute"), impute);
                f.set(format!("{p}categories"), vocabulary.len());
                for (k, v) in vocabulary.iter().enumerate() {
                    f.set(format!("{p}category.{k}"), v);
                }
            }
        }
    }
}

fn read_standardizer(f: &ModelFile) -> Result<StandardizerState> {
    let n: usize = f.parse("standardizer.columns")?;
    let columns = (0..n)
        .map(|i| {
            let p = format!("standardizer.{i}.");
            let name = f.get(&format!("{p}name"))?.to_string();
            match f.get(&format!("{p}kind"))? {
                "numeric" => Ok(ColumnState::Numeric {
                    name,
                    impute: f.parse(&format!("{p}impute"))?,
                    mean: f.parse(&format!("{p}mean"))?,
                    std: f.parse(&format!("{p}std"))?,
                }),
                "categorical" => {
                    let k: usize = f.parse(&format!("{p}categories"))?;
                    Ok(ColumnState::Categorical {
                        name,
                        impute: f.get(&format!("{p}impute"))?.to_string(),
                        vocabulary: (0..k)
                            .map(|j| f.get(&format!("{p}category.{j}")).map(str::to_string))
                            .collect::<Result<_>>()?,
                    })
                }
                other => Err(Error::Format(format!("unknown column kind `{other}`"))),
            }
        })
        .collect::<Result<_>>()?;
    Ok(StandardizerState { columns })
}

fn as_f64(v: &[usize]) -> Vec<f64> {
    v.iter().map(|&i| i as f64).collect()
}

fn write_dense(f: &mut ModelFile, name: &str, d: &Dense<f64>) {
    f.push(format!("{name}.weight"), vec![d.fan_in(), d.fan_out()], d.weight.as_slice());
    f.push(format!("{name}.bias"), vec![d.fan_out()], &d.bias);
}

fn read_dense(f: &ModelFile, name: &str) -> Result<Dense<f64>> {
    let weight = f.matrix(&format!("{name}.weight"))?;
    let bias = f.vector(&format!("{name}.bias"))?;
    if bias.len() != weight.cols() {
        return Err(Error::Format(format!("`{name}` bias does not match its weight")));
    }
    Ok(Dense { weight, bias })
}

fn write_member(f: &mut ModelFile, m: usize, member: &Member) {
    let p = format!("member.{m}.");
    let net = &member.net;
    match &net.input_map {
        InputMap::RfPca(t) => {
            f.set(format!("{p}input_map"), "rf_pca");
            f.set(format!("{p}clip_sigma"), t.clip_sigma);
            f.push(format!("{p}rf.weight"), vec![t.d_in(), t.rf.d_rf()], t.rf.weight.as_slice());
            f.push(format!("{p}pca.mean"), vec![t.pca.mean.len()], &t.pca.mean);
            f.push(
                format!("{p}pca.components"),
                vec![t.pca.components.rows(), t.pca.components.cols()],
                t.pca.components.as_slice(),
            );
            f.push(format!("{p}pca.sigma"), vec![t.pca.sigma.len()], &t.pca.sigma);
        }
        InputMap::Pad { d_in, n_pc } => {
            f.set(format!("{p}input_map"), "pad");
            f.set(format!("{p}pad.d_in"), d_in);
            f.set(format!("{p}pad.n_pc"), n_pc);
        }
    }
    f.set(format!("{p}residual"), net.residual.as_str());
    f.set(format!("{p}hidden_layers"), net.layers.hidden.len());
    f.set(format!("{p}use_nn_bias"), bool_str(net.use_nn_bias));
    f.set(format!("{p}fine_tune_reverted"), bool_str(member.fine_tune_reverted));
    let stages: Vec<String> = net.anchor_stages.iter().map(|s| s.stage.to_string()).collect();
    f.set(format!("{p}anchor_stages"), stages.join(","));
    for (l, d) in net.layers.hidden.iter().enumerate() {
        write_dense(f, &format!("{p}hidden.{l}"), d);
    }
    write_dense(f, &format!("{p}classifier"), &net.layers.classifier);
    for st in &net.anchor_stages {
        f.push(
            format!("{p}anchors.{}", st.stage),
            vec![st.anchors.rows(), st.anchors.cols()],
            st.anchors.as_slice(),
        );
    }
    f.push(format!("{p}anchor_labels"), vec![net.anchor_labels.len()], &as_f64(&net.anchor_labels));
    f.push(format!("{p}nn_bias"), vec![net.nn_bias.len()], &net.nn_bias);
    f.push(format!("{p}class_map"), vec![net.class_map.len()], &as_f64(&net.class_map));
    if let Some(cols) = &member.features {
        f.push(format!("{p}features"), vec![cols.len()], &as_f64(cols));
    }
}

fn read_member(f: &ModelFile, m: usize) -> Result<Member> {
    let p = format!("member.{m}.");
    let input_map = match f.get(&format!("{p}input_map"))? {
        "rf_pca" => InputMap::RfPca(TransformState {
            rf: RfProjection {
                weight: f.matrix(&format!("{p}rf.weight"))?,
            },
            pca: PcaState {
                mean: f.vector(&format!("{p}pca.mean"))?,
                components: f.matrix(&format!("{p}pca.components"))?,
                sigma: f.vector(&format!("{p}pca.sigma"))?,
            },
            clip_sigma: f.parse(&format!("{p}clip_sigma"))?,
        }),
        "pad" => InputMap::Pad {
            d_in: f.parse(&format!("{p}pad.d_in"))?,
            n_pc: f.parse(&format!("{p}pad.n_pc"))?,
        },
        other => return Err(Error::Format(format!("unknown input map `{other}`"))),
    };
    let n_hidden: usize = f.parse(&format!("{p}hidden_layers"))?;
    let hidden = (0..n_hidden)
        .map(|l| read_dense(f, &format!("{p}hidden.{l}")))
        .collect::<Result<Vec<_>>>()?;
    let classifier = read_dense(f, &format!("{p}classifier"))?;
    let stages_text = f.get(&format!("{p}anchor_stages"))?;
    let anchor_stages = stages_text
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            let stage: usize = s
                .parse()
                .map_err(|_| Error::Format(format!("bad anchor stage `{s}`")))?;
            Ok(AnchorStage {
                stage,
                anchors: f.matrix(&format!("{p}anchors.{stage}"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let features = f
        .tensors
        .iter()
        .any(|t| t.name == format!("{p}features"))
        .then(|| f.indices(&format!("{p}features")))
        .transpose()?;
    let net = GeneratedNetwork {
        input_map,
        layers: GeneratedLayers { hidden, classifier },
        residual: ResidualMode::parse(f.get(&format!("{p}residual"))?)?,
        anchor_stages,
        anchor_labels: f.indices(&format!("{p}anchor_labels"))?,
        nn_bias: f.vector(&format!("{p}nn_bias"))?,
        use_nn_bias: f.parse(&format!("{p}use_nn_bias"))?,
        class_map: f.indices(&format!("{p}class_map"))?,
    };
    Ok(Member {
        features,
        net,
        fine_tune_reverted: f.parse(&format!("{p}fine_tune_reverted"))?,
    })
}

pub fn encode_fitted(bundle: &FittedBundle) -> ModelFile {
    let mut f = ModelFile::new(FileRole::Fitted);
    let model = &bundle.model;
    f.set("model.d_in", model.d_in);
    f.set("model.n_classes", model.n_classes);
    f.set("model.members", model.members.len());
    f.set("labels.column", &bundle.label_column);
    for (k, name) in bundle.labels.iter().enumerate() {
        f.set(format!("labels.{k}"), name);
    }
    write_standardizer(&mut f, &bundle.standardizer);
    for (m, member) in model.members.iter().enumerate() {
        write_member(&mut f, m, member);
    }
    f
}

pub fn decode_fitted(f: &ModelFile) -> Result<FittedBundle> {
    f.expect_role(FileRole::Fitted)?;
    let n_classes: usize = f.parse("model.n_classes")?;
    let n_members: usize = f.parse("model.members")?;
    let model = FittedModel {
        d_in: f.parse("model.d_in")?,
        n_classes,
        members: (0..n_members).map(|m| read_member(f, m)).collect::<Result<_>>()?,
    };
    let labels = (0..n_classes)
        .map(|k| f.get(&format!("labels.{k}")).map(str::to_string))
        .collect::<Result<_>>()?;
    Ok(FittedBundle {
        model,
        standardizer: read_standardizer(f)?,
        label_column: f.get("labels.column")?.to_string(),
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DesignMatrix;
    use crate::inference::{fit, predict_proba, InferenceConfig, Optimization};
    use crate::meta::stream_rng;
    use crate::synthetic::{blob_dataset, BlobSpec};

    fn initial_params(cfg: &HyperNetConfig, seed: u64) -> HyperNetParams<f64> {
        let mut p = HyperNetParams::init(cfg, &mut stream_rng(seed, 0));
        p.quantize_f32();
        p
    }

    fn train_set() -> DesignMatrix {
        blob_dataset("t", &BlobSpec::default(), &mut stream_rng(3, 0)).unwrap().train
    }

    fn bundle(hcfg: &HyperNetConfig, icfg: &InferenceConfig) -> FittedBundle {
        let train = train_set();
        let params = initial_params(hcfg, 1);
        let model = fit(&train, &params, hcfg, icfg).unwrap();
        let names: Vec<&str> = (0..train.d_in()).map(|_| "c").collect();
        let mut standardizer = StandardizerState::identity(&names);
        standardizer.columns.push(ColumnState::Categorical {
            name: "colour".into(),
            impute: "red".into(),
            vocabulary: vec!["red".into(), "line\nbreak".into(), "back\\slash=1".into()],
        });
        FittedBundle {
            model,
            standardizer,
            label_column: "class".into(),
            labels: vec!["no".into(), "yes".into()],
        }
    }

    fn round_trip(b: &FittedBundle) {
        let bytes = encode_fitted(b).to_bytes().unwrap();
        let back = decode_fitted(&ModelFile::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(&back, b);
        assert_eq!(encode_fitted(&back).to_bytes().unwrap(), bytes);
    }

    #[test]
    fn fitted_model_round_trips_bit_exactly() {
        let hcfg = HyperNetConfig::tiny();
        let icfg = InferenceConfig {
            n_ensemble: 3,
            ..InferenceConfig::default()
        };
        let b = bundle(&hcfg, &icfg);
        round_trip(&b);
        let bytes = encode_fitted(&b).to_bytes().unwrap();
        let back = decode_fitted(&ModelFile::from_bytes(&bytes).unwrap()).unwrap();
        let x = &train_set().x;
        assert_eq!(
            predict_proba(&back.model, x).unwrap().as_slice(),
            predict_proba(&b.model, x).unwrap().as_slice()
        );
    }

    #[test]
    fn fine_tuned_bagged_and_padded_models_round_trip() {
        let mut hcfg = HyperNetConfig::tiny();
        let icfg = InferenceConfig {
            n_ensemble: 2,
            optimization: Optimization::EnsembleOptimize,
            optimize_steps: 3,
            feature_bag_width: 3,
            ..InferenceConfig::default()
        };
        round_trip(&bundle(&hcfg, &icfg));
        hcfg.use_rf_pca = false;
        hcfg.nn_bias_hidden = false;
        round_trip(&bundle(&hcfg, &InferenceConfig::default()));
    }

    #[test]
    fn params_and_checkpoints_round_trip() {
        let cfg = HyperNetConfig::tiny();
        let params = initial_params(&cfg, 9);
        let f = encode_params(&params, &cfg);
        let bytes = f.to_bytes().unwrap();
        let (back, back_cfg) = decode_params(&ModelFile::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, params);
        assert_eq!(back_cfg, cfg);
        assert_eq!(encode_params(&back, &back_cfg).to_bytes().unwrap(), bytes);

        let ckpt = Checkpoint {
            params,
            step: 40,
            meta_val_score: 0.8125,
        };
        let bytes = encode_checkpoint(&ckpt, &cfg).to_bytes().unwrap();
        let (back, _) = decode_checkpoint(&ModelFile::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.step, 40);
        assert_eq!(back.meta_val_score, 0.8125);
        assert_eq!(back.params, ckpt.params);
        // A checkpoint also serves as a params file.
        assert!(decode_params(&ModelFile::from_bytes(&bytes).unwrap()).is_ok());
    }

    #[test]
    fn header_layout() {
        let cfg = HyperNetConfig::tiny();
        let bytes = encode_params(&initial_params(&cfg, 0), &cfg).to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"HFST");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(bytes[6], 1);
        let n = bytes.len();
        let crc = u32::from_le_bytes(bytes[n - 4..].try_into().unwrap());
        assert_eq!(crc, crc32fast::hash(&bytes[..n - 4]));
        let text_len = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[11..11 + text_len]).unwrap();
        let keys: Vec<&str> = text.lines().map(|l| l.split_once('=').unwrap().0).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn corrupted_files_are_refused() {
        let cfg = HyperNetConfig::tiny();
        let bytes = encode_params(&initial_params(&cfg, 0), &cfg).to_bytes().unwrap();
        for pos in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            assert!(matches!(ModelFile::from_bytes(&bad), Err(Error::Format(_))), "flip at {pos}");
        }
        assert!(ModelFile::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(ModelFile::from_bytes(&[]).is_err());
    }

    #[test]
    fn unknown_version_and_wrong_role_are_refused() {
        let cfg = HyperNetConfig::tiny();
        let f = encode_params(&initial_params(&cfg, 0), &cfg);
        let mut bytes = f.to_bytes().unwrap();
        bytes[4] = 2;
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        let err = ModelFile::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        assert!(decode_fitted(&f).is_err());
        assert!(decode_checkpoint(&f).is_err());
    }

    #[test]
    fn save_and_load_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.hf");
        let cfg = HyperNetConfig::tiny();
        let f = encode_params(&initial_params(&cfg, 0), &cfg);
        f.save(&path).unwrap();
        f.save(&path).unwrap();
        assert_eq!(ModelFile::load(&path).unwrap(), f);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
