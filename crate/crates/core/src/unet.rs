//! The encoder-decoder segmentation network and its checkpoint format.
//!
//! Encoder level i: [conv3x3 -> BN -> ReLU] x2 at width base*multiplier[i],
//! then 2x2 max-pool and dropout. Bottleneck: [conv -> BN -> ReLU] x2.
//! Decoder level i: 2x2 stride-2 transpose conv, skip merge with encoder
//! level i (concat by default, add available), [conv -> BN -> ReLU] x2,
//! dropout. Head: 1x1 conv to one channel plus sigmoid.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{
    he_init, xavier_init, zeros, AutodiffError, Graph, Scalar, Tensor, TensorId,
};
use crate::seeds;

const WSLM_MAGIC: &[u8; 4] = b"WSLM";
const WSLM_VERSION: u16 = 1;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f32 = 0.99;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("width_multipliers length {got} does not match depth {depth}")]
    BadMultipliers { depth: usize, got: usize },
    #[error("depth must be >= 1")]
    ZeroDepth,
    #[error("input side {side} is not divisible by 2^depth = {div}")]
    IndivisibleSide { side: usize, div: usize },
    #[error("input batch has shape {got:?}, expected N x H x W x {channels}")]
    BadInputShape { got: Vec<usize>, channels: usize },
    #[error("bad magic in checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u16),
    #[error("checkpoint tensor {name} has shape {got:?}, expected {expected:?}")]
    TensorShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint truncated")]
    Truncated,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipMode {
    Concat,
    Add,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Normal(0, sqrt(2/fan_in)); the default.
    He,
    Xavier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnetConfig {
    pub depth: usize,
    pub base_filters: usize,
    pub width_multipliers: Vec<usize>,
    pub bottleneck_multiplier: usize,
    pub dropout_rate: f64,
    pub skip_mode: SkipMode,
    pub input_channels: usize,
    pub output_channels: usize,
    pub init: InitScheme,
}

impl UnetConfig {
    /// Full-size configuration: 5 encoder levels, 32 base filters, widths
    /// 32*[1,2,4,8,16] and a 1024-channel bottleneck.
    pub fn full() -> Self {
        Self {
            depth: 5,
            base_filters: 32,
            width_multipliers: vec![1, 2, 4, 8, 16],
            bottleneck_multiplier: 32,
            dropout_rate: 0.5,
            skip_mode: SkipMode::Concat,
            input_channels: 2,
            output_channels: 1,
            init: InitScheme::He,
        }
    }

    /// Desk-scale configuration for tests and the built-in benchmark.
    pub fn tiny() -> Self {
        Self {
            depth: 3,
            base_filters: 8,
            width_multipliers: vec![1, 2, 4],
            bottleneck_multiplier: 8,
            dropout_rate: 0.5,
            skip_mode: SkipMode::Concat,
            input_channels: 2,
            output_channels: 1,
            init: InitScheme::He,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::full()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.depth == 0 {
            return Err(ModelError::ZeroDepth);
        }
        if self.width_multipliers.len() != self.depth {
            return Err(ModelError::BadMultipliers {
                depth: self.depth,
                got: self.width_multipliers.len(),
            });
        }
        Ok(())
    }

    fn level_width(&self, i: usize) -> usize {
        self.base_filters * self.width_multipliers[i]
    }

    fn bottleneck_width(&self) -> usize {
        self.base_filters * self.bottleneck_multiplier
    }
}

/// Shapes of every trainable tensor, in stable iteration order.
fn param_specs(config: &UnetConfig) -> Vec<(String, Vec<usize>)> {
    fn conv_block(specs: &mut Vec<(String, Vec<usize>)>, name: String, cin: usize, cout: usize) {
        specs.push((format!("{name}.kernel"), vec![3, 3, cin, cout]));
        specs.push((format!("{name}.bias"), vec![cout]));
        specs.push((format!("{name}.gamma"), vec![cout]));
        specs.push((format!("{name}.beta"), vec![cout]));
    }
    let mut specs = Vec::new();
    let mut cin = config.input_channels;
    for i in 0..config.depth {
        let w = config.level_width(i);
        conv_block(&mut specs, format!("enc{i}.block0"), cin, w);
        conv_block(&mut specs, format!("enc{i}.block1"), w, w);
        cin = w;
    }
    let bw = config.bottleneck_width();
    conv_block(&mut specs, "bottleneck.block0".into(), cin, bw);
    conv_block(&mut specs, "bottleneck.block1".into(), bw, bw);
    let mut above = bw;
    for i in (0..config.depth).rev() {
        let w = config.level_width(i);
        specs.push((format!("dec{i}.up.kernel"), vec![2, 2, above, w]));
        let merged = match config.skip_mode {
            SkipMode::Concat => 2 * w,
            SkipMode::Add => w,
        };
        conv_block(&mut specs, format!("dec{i}.block0"), merged, w);
        conv_block(&mut specs, format!("dec{i}.block1"), w, w);
        above = w;
    }
    specs.push((
        "head.kernel".into(),
        vec![1, 1, above, config.output_channels],
    ));
    specs.push(("head.bias".into(), vec![config.output_channels]));
    specs
}

/// Names and channel counts of every batch-norm layer, in forward order.
fn bn_specs(config: &UnetConfig) -> Vec<(String, usize)> {
    param_specs(config)
        .iter()
        .filter_map(|(name, shape)| {
            name.strip_suffix(".gamma")
                .map(|base| (base.to_string(), shape[0]))
        })
        .collect()
}

/// Batch-norm running statistics. The first observed batch is assigned
/// outright (the (0, 1) init carries no information and would otherwise decay
/// only as 0.99^steps); later batches blend in with the standard momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub initialized: bool,
}

/// A built network: ordered named parameters plus batch-norm running stats.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: UnetConfig,
    pub params: Vec<(String, Tensor<f32>)>,
    pub bn_stats: Vec<(String, BnStats)>,
}

/// Graph-side handles to one bound copy of the parameters.
pub struct Binding {
    pub param_ids: Vec<(String, TensorId)>,
}

impl Binding {
    pub fn id(&self, name: &str) -> TensorId {
        self.param_ids
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }
}

/// Build a freshly initialized model. Kernels follow the configured scheme,
/// biases and beta start at zero, gamma at one, running stats at (0, 1).
pub fn build(config: &UnetConfig, seed: u64) -> Result<Model, ModelError> {
    config.validate()?;
    let mut params = Vec::new();
    for (idx, (name, shape)) in param_specs(config).into_iter().enumerate() {
        let tensor = if name.ends_with(".kernel") {
            let s = seeds::subseed_indexed(seed, "unet.init", idx as u64);
            match config.init {
                InitScheme::He => he_init(&shape, s)?,
                InitScheme::Xavier => xavier_init(&shape, s)?,
            }
        } else if name.ends_with(".gamma") {
            let n = shape.iter().product();
            Tensor::new(shape, vec![1.0f32; n])
        } else {
            zeros(&shape)?
        };
        params.push((name, tensor));
    }
    let bn_stats = bn_specs(config)
        .into_iter()
        .map(|(name, c)| {
            (
                name,
                BnStats {
                    mean: vec![0.0; c],
                    var: vec![1.0; c],
                    initialized: false,
                },
            )
        })
        .collect();
    Ok(Model {
        config: config.clone(),
        params,
        bn_stats,
    })
}

impl Model {
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    fn bn_stats_for(&self, name: &str) -> &BnStats {
        &self
            .bn_stats
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown bn layer {name}"))
            .1
    }

    /// Create leaves for every parameter at precision `T`.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>) -> Binding {
        let param_ids = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.cast::<T>())))
            .collect();
        Binding { param_ids }
    }

    /// Run the network on a bound graph. Returns the sigmoid output and, in
    /// training mode, the batch-norm nodes whose batch statistics feed the
    /// running-average update.
    pub fn forward_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        binding: &Binding,
        input: TensorId,
        training: bool,
        dropout_seed: u64,
    ) -> Result<(TensorId, Vec<(String, TensorId)>), ModelError> {
        let shape = g.value(input).shape.clone();
        if shape.len() != 4 || shape[3] != self.config.input_channels {
            return Err(ModelError::BadInputShape {
                got: shape,
                channels: self.config.input_channels,
            });
        }
        let div = 1 << self.config.depth;
        for side in [shape[1], shape[2]] {
            if side % div != 0 {
                return Err(ModelError::IndivisibleSide { side, div });
            }
        }

        let mut bn_nodes = Vec::new();
        let mut dropout_idx = 0u64;
        let mut x = input;

        let conv_block = |g: &mut Graph<T>,
                              x: TensorId,
                              name: &str,
                              bn_nodes: &mut Vec<(String, TensorId)>|
         -> Result<TensorId, ModelError> {
            let c = g.conv2d(
                x,
                binding.id(&format!("{name}.kernel")),
                binding.id(&format!("{name}.bias")),
            )?;
            let stats = self.bn_stats_for(name);
            let mean: Vec<T> = stats.mean.iter().map(|&v| T::from_f64(v as f64)).collect();
            let var: Vec<T> = stats.var.iter().map(|&v| T::from_f64(v as f64)).collect();
            let b = g.batch_norm(
                c,
                binding.id(&format!("{name}.gamma")),
                binding.id(&format!("{name}.beta")),
                &mean,
                &var,
                training,
                T::from_f64(BN_EPS),
            )?;
            if training {
                bn_nodes.push((name.to_string(), b));
            }
            Ok(g.relu(b))
        };

        let dropout = |g: &mut Graph<T>, x: TensorId, idx: &mut u64| {
            let s = seeds::subseed_indexed(dropout_seed, "unet.dropout", *idx);
            *idx += 1;
            g.dropout(x, self.config.dropout_rate, training, s)
        };

        let mut skips = Vec::with_capacity(self.config.depth);
        for i in 0..self.config.depth {
            x = conv_block(g, x, &format!("enc{i}.block0"), &mut bn_nodes)?;
            x = conv_block(g, x, &format!("enc{i}.block1"), &mut bn_nodes)?;
            skips.push(x);
            x = g.max_pool2(x)?;
            x = dropout(g, x, &mut dropout_idx)?;
        }
        x = conv_block(g, x, "bottleneck.block0", &mut bn_nodes)?;
        x = conv_block(g, x, "bottleneck.block1", &mut bn_nodes)?;

        for i in (0..self.config.depth).rev() {
            x = g.conv2d_transpose(x, binding.id(&format!("dec{i}.up.kernel")))?;
            x = match self.config.skip_mode {
                SkipMode::Concat => g.concat_channels(skips[i], x)?,
                SkipMode::Add => g.add(skips[i], x)?,
            };
            x = conv_block(g, x, &format!("dec{i}.block0"), &mut bn_nodes)?;
            x = conv_block(g, x, &format!("dec{i}.block1"), &mut bn_nodes)?;
            x = dropout(g, x, &mut dropout_idx)?;
        }

        let head = g.conv2d(x, binding.id("head.kernel"), binding.id("head.bias"))?;
        Ok((g.sigmoid(head), bn_nodes))
    }

    /// Fold the batch statistics observed by a training forward pass into the
    /// running averages.
    pub fn update_bn_stats<T: Scalar>(&mut self, g: &Graph<T>, bn_nodes: &[(String, TensorId)]) {
        for (name, id) in bn_nodes {
            let (mean, var) = g.batch_stats(*id).expect("training-mode bn node");
            let stats = &mut self
                .bn_stats
                .iter_mut()
                .find(|(n, _)| n == name)
                .expect("known bn layer")
                .1;
            let keep = if stats.initialized { BN_MOMENTUM } else { 0.0 };
            for (r, &b) in stats.mean.iter_mut().zip(mean) {
                *r = keep * *r + (1.0 - keep) * Scalar::to_f64(b) as f32;
            }
            for (r, &b) in stats.var.iter_mut().zip(var) {
                *r = keep * *r + (1.0 - keep) * Scalar::to_f64(b) as f32;
            }
            stats.initialized = true;
        }
    }

    /// Deterministic inference on a batch (N x H x W x Cin -> N x H x W x 1).
    pub fn forward(&self, inputs: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        let mut g = Graph::<f32>::new();
        let binding = self.bind(&mut g);
        let x = g.leaf(inputs.clone());
        let (out, _) = self.forward_graph(&mut g, &binding, x, false, 0)?;
        Ok(g.value(out).clone())
    }
}

/// Save a checkpoint: magic "WSLM" | version u16 | config block | per-tensor
/// records (name length + bytes + rank + dims u32[] + f32 payload), all
/// little-endian. Batch-norm running stats ride along as tensors.
pub fn save_checkpoint<P: AsRef<Path>>(model: &Model, path: P) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(WSLM_MAGIC)?;
    w.write_all(&WSLM_VERSION.to_le_bytes())?;
    let c = &model.config;
    for v in [
        c.depth as u32,
        c.base_filters as u32,
        c.width_multipliers.len() as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for &m in &c.width_multipliers {
        w.write_all(&(m as u32).to_le_bytes())?;
    }
    w.write_all(&(c.bottleneck_multiplier as u32).to_le_bytes())?;
    w.write_all(&c.dropout_rate.to_bits().to_le_bytes())?;
    w.write_all(&[match c.skip_mode {
        SkipMode::Concat => 0u8,
        SkipMode::Add => 1,
    }])?;
    w.write_all(&[match c.init {
        InitScheme::He => 0u8,
        InitScheme::Xavier => 1,
    }])?;
    w.write_all(&(c.input_channels as u32).to_le_bytes())?;
    w.write_all(&(c.output_channels as u32).to_le_bytes())?;

    let seen: Vec<(String, Vec<f32>)> = model
        .bn_stats
        .iter()
        .map(|(name, s)| {
            (
                format!("{name}.stats_seen"),
                vec![f32::from(s.initialized)],
            )
        })
        .collect();
    let mut stat_tensors: Vec<(String, Vec<usize>, &[f32])> = model
        .bn_stats
        .iter()
        .flat_map(|(name, s)| {
            [
                (
                    format!("{name}.running_mean"),
                    vec![s.mean.len()],
                    s.mean.as_slice(),
                ),
                (
                    format!("{name}.running_var"),
                    vec![s.var.len()],
                    s.var.as_slice(),
                ),
            ]
        })
        .collect();
    for (name, data) in &seen {
        stat_tensors.push((name.clone(), vec![1], data.as_slice()));
    }
    let total = model.params.len() + stat_tensors.len();
    w.write_all(&(total as u32).to_le_bytes())?;

    let write_tensor = |w: &mut BufWriter<File>,
                            name: &str,
                            shape: &[usize],
                            data: &[f32]|
     -> Result<(), ModelError> {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in data {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
        Ok(())
    };
    for (name, t) in &model.params {
        write_tensor(&mut w, name, &t.shape, &t.data)?;
    }
    for (name, shape, data) in &stat_tensors {
        write_tensor(&mut w, name, shape, data)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| ModelError::Truncated)?;
    Ok(u32::from_le_bytes(b))
}

/// Load a checkpoint written by [`save_checkpoint`]. Tensor shapes are
/// validated against the declared configuration.
pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<Model, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| ModelError::Truncated)?;
    if &magic != WSLM_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2).map_err(|_| ModelError::Truncated)?;
    let version = u16::from_le_bytes(b2);
    if version != WSLM_VERSION {
        return Err(ModelError::BadVersion(version));
    }
    let depth = read_u32(&mut r)? as usize;
    let base_filters = read_u32(&mut r)? as usize;
    let n_mult = read_u32(&mut r)? as usize;
    let mut width_multipliers = Vec::with_capacity(n_mult);
    for _ in 0..n_mult {
        width_multipliers.push(read_u32(&mut r)? as usize);
    }
    let bottleneck_multiplier = read_u32(&mut r)? as usize;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|_| ModelError::Truncated)?;
    let dropout_rate = f64::from_bits(u64::from_le_bytes(b8));
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1).map_err(|_| ModelError::Truncated)?;
    let skip_mode = if b1[0] == 0 {
        SkipMode::Concat
    } else {
        SkipMode::Add
    };
    r.read_exact(&mut b1).map_err(|_| ModelError::Truncated)?;
    let init = if b1[0] == 0 {
        InitScheme::He
    } else {
        InitScheme::Xavier
    };
    let input_channels = read_u32(&mut r)? as usize;
    let output_channels = read_u32(&mut r)? as usize;
    let config = UnetConfig {
        depth,
        base_filters,
        width_multipliers,
        bottleneck_multiplier,
        dropout_rate,
        skip_mode,
        input_channels,
        output_channels,
        init,
    };
    config.validate()?;

    let total = read_u32(&mut r)? as usize;
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::with_capacity(total);
    for _ in 0..total {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| ModelError::Truncated)?;
        let name = String::from_utf8(name_bytes).map_err(|_| ModelError::Truncated)?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f32::from_bits(read_u32(&mut r)?));
        }
        tensors.push((name, shape, data));
    }

    let take = |name: &str, expected: &[usize]| -> Result<Vec<f32>, ModelError> {
        let (_, shape, data) = tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| ModelError::MissingTensor(name.to_string()))?;
        if shape != expected {
            return Err(ModelError::TensorShapeMismatch {
                name: name.to_string(),
                expected: expected.to_vec(),
                got: shape.clone(),
            });
        }
        Ok(data.clone())
    };

    let mut params = Vec::new();
    for (name, shape) in param_specs(&config) {
        let data = take(&name, &shape)?;
        params.push((name, Tensor::new(shape, data)));
    }
    let mut bn_stats = Vec::new();
    for (name, c) in bn_specs(&config) {
        let mean = take(&format!("{name}.running_mean"), &[c])?;
        let var = take(&format!("{name}.running_var"), &[c])?;
        let initialized = take(&format!("{name}.stats_seen"), &[1])?[0] != 0.0;
        bn_stats.push((name, BnStats { mean, var, initialized }));
    }
    Ok(Model {
        config,
        params,
        bn_stats,
    })
}
