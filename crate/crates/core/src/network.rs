//! Attribute-aware sub-networks and the dual (shop / street) container.
//!
//! A sub-network is a Network-in-Network style convolution stack: every stage
//! is a `k x k` convolution followed by `mlpconv_count` 1x1 convolutions
//! (per-pixel MLPs), each with ReLU, and an optional max-pool. The last two
//! stage outputs are the "C4" and "C5" maps. The flattened C5 map feeds FC1
//! and FC2, and FC2 fans out into one hidden+output branch per attribute
//! category.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::schema::{AttributeSchema, Domain};
use crate::tensor::{read_archive, read_u32, write_archive, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub mlpconv_count: usize,
    pub pool: Option<PoolSpec>,
}

impl ConvStage {
    /// Padding that keeps the spatial size at stride 1.
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubNetworkConfig {
    /// `[C, H, W]` of input images.
    pub input_shape: [usize; 3],
    pub conv_stages: Vec<ConvStage>,
    pub fc1_dim: usize,
    pub fc2_dim: usize,
    pub head_hidden_dim: usize,
}

impl Default for SubNetworkConfig {
    /// Desk-scale default for 3x16x16 images: five stages of 16 filters,
    /// with the fourth stage carrying two MLPConv layers.
    fn default() -> Self {
        let stage = |mlpconv_count, pool: bool| ConvStage {
            filters: 16,
            kernel: 3,
            stride: 1,
            mlpconv_count,
            pool: pool.then_some(PoolSpec {
                window: 2,
                stride: 2,
            }),
        };
        SubNetworkConfig {
            input_shape: [3, 16, 16],
            conv_stages: vec![
                stage(1, true),
                stage(1, false),
                stage(1, true),
                stage(2, false),
                stage(1, false),
            ],
            fc1_dim: 64,
            fc2_dim: 64,
            head_hidden_dim: 32,
        }
    }
}

impl SubNetworkConfig {
    /// Spatial output size `(h, w)` of every stage; errors if a stage does
    /// not fit.
    pub fn stage_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let [_, mut h, mut w] = self.input_shape;
        let mut out = Vec::with_capacity(self.conv_stages.len());
        for (i, s) in self.conv_stages.iter().enumerate() {
            let pad = s.pad();
            if s.kernel > h + 2 * pad || s.kernel > w + 2 * pad {
                return Err(Error::dim(
                    "network",
                    format!("stage {i} kernel {} does not fit {h}x{w}", s.kernel),
                ));
            }
            h = (h + 2 * pad - s.kernel) / s.stride + 1;
            w = (w + 2 * pad - s.kernel) / s.stride + 1;
            // The C4/C5 maps are taken before pooling.
            out.push((s.filters, h, w));
            if let Some(p) = s.pool {
                if p.window > h || p.window > w {
                    return Err(Error::dim(
                        "network",
                        format!("stage {i} pool window {} does not fit {h}x{w}", p.window),
                    ));
                }
                h = (h - p.window) / p.stride + 1;
                w = (w - p.window) / p.stride + 1;
            }
        }
        Ok(out)
    }

    /// Flattened size of the final stage output (FC1 fan-in).
    pub fn trunk_output_dim(&self) -> Result<usize> {
        let [_, mut h, mut w] = self.input_shape;
        let mut c = self.input_shape[0];
        for s in &self.conv_stages {
            let pad = s.pad();
            h = (h + 2 * pad - s.kernel) / s.stride + 1;
            w = (w + 2 * pad - s.kernel) / s.stride + 1;
            if let Some(p) = s.pool {
                h = (h - p.window) / p.stride + 1;
                w = (w - p.window) / p.stride + 1;
            }
            c = s.filters;
        }
        Ok(c * h * w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.iter().any(|&e| e == 0) {
            return Err(Error::config("input_shape", "extents must be positive"));
        }
        if self.conv_stages.len() < 2 {
            return Err(Error::config(
                "conv_stages",
                "at least two stages are needed for the C4/C5 maps",
            ));
        }
        for (i, s) in self.conv_stages.iter().enumerate() {
            if s.filters == 0 || s.kernel == 0 || s.stride == 0 {
                return Err(Error::config(
                    format!("conv_stages[{i}]"),
                    "filters, kernel and stride must be positive",
                ));
            }
            if let Some(p) = s.pool {
                if p.window == 0 || p.stride == 0 {
                    return Err(Error::config(
                        format!("conv_stages[{i}].pool"),
                        "window and stride must be positive",
                    ));
                }
            }
        }
        for (name, v) in [
            ("fc1_dim", self.fc1_dim),
            ("fc2_dim", self.fc2_dim),
            ("head_hidden_dim", self.head_hidden_dim),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        let shapes = self.stage_shapes()?;
        for (label, &(_, h, w)) in ["C4", "C5"].iter().zip(&shapes[shapes.len() - 2..]) {
            if h < 3 || w < 3 {
                return Err(Error::config(
                    "conv_stages",
                    format!("{label} map is {h}x{w}; 3x3 pooling needs at least 3x3"),
                ));
            }
        }
        Ok(())
    }

    /// Filter counts of the C4 and C5 stages.
    pub fn local_filters(&self) -> (usize, usize) {
        let n = self.conv_stages.len();
        (
            self.conv_stages[n - 2].filters,
            self.conv_stages[n - 1].filters,
        )
    }
}

/// Node handles for every activation a loss or feature extractor may need.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    pub fc1: NodeId,
    pub fc2: NodeId,
    pub c4: NodeId,
    pub c5: NodeId,
    pub branch_logits: Vec<NodeId>,
}

/// One attribute-aware sub-network with its own parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SubNetwork {
    config: SubNetworkConfig,
    schema: AttributeSchema,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl SubNetwork {
    fn layer_shapes(config: &SubNetworkConfig, schema: &AttributeSchema) -> Result<Vec<(String, Vec<usize>)>> {
        let mut shapes = Vec::new();
        let mut c = config.input_shape[0];
        for (i, s) in config.conv_stages.iter().enumerate() {
            shapes.push((format!("stage{i}.conv.weight"), vec![s.filters, c, s.kernel, s.kernel]));
            shapes.push((format!("stage{i}.conv.bias"), vec![s.filters]));
            for j in 0..s.mlpconv_count {
                shapes.push((format!("stage{i}.mlp{j}.weight"), vec![s.filters, s.filters, 1, 1]));
                shapes.push((format!("stage{i}.mlp{j}.bias"), vec![s.filters]));
            }
            c = s.filters;
        }
        let trunk = config.trunk_output_dim()?;
        shapes.push(("fc1.weight".into(), vec![trunk, config.fc1_dim]));
        shapes.push(("fc1.bias".into(), vec![config.fc1_dim]));
        shapes.push(("fc2.weight".into(), vec![config.fc1_dim, config.fc2_dim]));
        shapes.push(("fc2.bias".into(), vec![config.fc2_dim]));
        for cat in schema.categories() {
            let n = &cat.name;
            shapes.push((format!("head.{n}.hidden.weight"), vec![config.fc2_dim, config.head_hidden_dim]));
            shapes.push((format!("head.{n}.hidden.bias"), vec![config.head_hidden_dim]));
            shapes.push((format!("head.{n}.out.weight"), vec![config.head_hidden_dim, cat.cardinality]));
            shapes.push((format!("head.{n}.out.bias"), vec![cat.cardinality]));
        }
        Ok(shapes)
    }

    /// Zero-mean Gaussian weights with variance `2 / fan_in`, zero biases.
    fn init(config: &SubNetworkConfig, schema: &AttributeSchema, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let shapes = Self::layer_shapes(config, schema)?;
        let mut names = Vec::with_capacity(shapes.len());
        let mut params = Vec::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = if shape.len() == 4 {
                    shape[1..].iter().product()
                } else {
                    shape[0]
                };
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect())?
            };
            names.push(name);
            params.push(t);
        }
        Ok(SubNetwork {
            config: config.clone(),
            schema: schema.clone(),
            names,
            params,
        })
    }

    pub fn config(&self) -> &SubNetworkConfig {
        &self.config
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.params[i])
    }

    /// Number of attribute branches.
    pub fn branch_count(&self) -> usize {
        self.schema.len()
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params.iter().map(|p| g.param(p.clone())).collect()
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params.iter().map(|p| g.input(p.clone())).collect()
    }

    /// Runs `[N,C,H,W]` images through the trunk and all branches.
    pub fn forward(&self, g: &mut Graph, bound: &[NodeId], batch: NodeId) -> Result<ForwardOutputs> {
        let s = g.value(batch).shape();
        let [c, h, w] = self.config.input_shape;
        if s.len() != 4 || s[1] != c || s[2] != h || s[3] != w {
            return Err(Error::dim(
                "forward",
                format!("batch {s:?} incompatible with input shape [N,{c},{h},{w}]"),
            ));
        }
        let mut p = bound.iter().copied();
        let mut next = || p.next().expect("bound parameters match layer layout");
        let mut x = batch;
        let mut maps = Vec::with_capacity(self.config.conv_stages.len());
        for stage in &self.config.conv_stages {
            let (wt, b) = (next(), next());
            x = g.conv2d(x, wt, b, stage.stride, stage.pad())?;
            x = g.relu(x);
            for _ in 0..stage.mlpconv_count {
                let (wt, b) = (next(), next());
                x = g.conv2d(x, wt, b, 1, 0)?;
                x = g.relu(x);
            }
            maps.push(x);
            if let Some(pool) = stage.pool {
                x = g.maxpool(x, pool.window, pool.stride)?;
            }
        }
        let flat = g.flatten(x)?;
        let (wt, b) = (next(), next());
        let fc1 = g.linear(flat, wt, b)?;
        let fc1 = g.relu(fc1);
        let (wt, b) = (next(), next());
        let fc2 = g.linear(fc1, wt, b)?;
        let fc2 = g.relu(fc2);
        let mut branch_logits = Vec::with_capacity(self.schema.len());
        for _ in self.schema.categories() {
            let (wt, b) = (next(), next());
            let hdn = g.linear(fc2, wt, b)?;
            let hdn = g.relu(hdn);
            let (wt, b) = (next(), next());
            branch_logits.push(g.linear(hdn, wt, b)?);
        }
        let n = maps.len();
        Ok(ForwardOutputs {
            fc1,
            fc2,
            c4: maps[n - 2],
            c5: maps[n - 1],
            branch_logits,
        })
    }
}

/// Whether street images get their own sub-network or share the shop one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Dual,
    /// Single network for both domains (ablation baselines).
    Shared,
}

/// Shop (online) and street (offline) sub-networks with disjoint weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DualNetwork {
    shop: SubNetwork,
    street: Option<SubNetwork>,
}

/// Graph handles for a bound [`DualNetwork`].
#[derive(Debug, Clone)]
pub struct BoundDual {
    pub shop: Vec<NodeId>,
    pub street: Vec<NodeId>,
}

/// Per-domain forward outputs plus, for each input sample, its row within
/// its domain's sub-batch.
#[derive(Debug, Clone)]
pub struct RoutedOutputs {
    pub online: Option<ForwardOutputs>,
    pub offline: Option<ForwardOutputs>,
    pub positions: Vec<(Domain, usize)>,
}

impl RoutedOutputs {
    pub fn for_domain(&self, d: Domain) -> Option<&ForwardOutputs> {
        match d {
            Domain::Online => self.online.as_ref(),
            Domain::Offline => self.offline.as_ref(),
        }
    }
}

pub fn build_dual_network(
    config: &SubNetworkConfig,
    schema: &AttributeSchema,
    seed: u64,
) -> Result<DualNetwork> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shop = SubNetwork::init(config, schema, &mut rng)?;
    let street = SubNetwork::init(config, schema, &mut rng)?;
    Ok(DualNetwork {
        shop,
        street: Some(street),
    })
}

/// One network used for both domains.
pub fn build_shared_network(
    config: &SubNetworkConfig,
    schema: &AttributeSchema,
    seed: u64,
) -> Result<DualNetwork> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shop = SubNetwork::init(config, schema, &mut rng)?;
    Ok(DualNetwork { shop, street: None })
}

impl DualNetwork {
    pub fn topology(&self) -> Topology {
        if self.street.is_some() {
            Topology::Dual
        } else {
            Topology::Shared
        }
    }

    pub fn config(&self) -> &SubNetworkConfig {
        &self.shop.config
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.shop.schema
    }

    pub fn shop(&self) -> &SubNetwork {
        &self.shop
    }

    /// The network that sees street images (the shop network when shared).
    pub fn street(&self) -> &SubNetwork {
        self.street.as_ref().unwrap_or(&self.shop)
    }

    pub fn shop_mut(&mut self) -> &mut SubNetwork {
        &mut self.shop
    }

    pub fn street_mut(&mut self) -> &mut SubNetwork {
        self.street.as_mut().unwrap_or(&mut self.shop)
    }

    pub fn net_for(&self, d: Domain) -> &SubNetwork {
        match d {
            Domain::Online => &self.shop,
            Domain::Offline => self.street(),
        }
    }

    /// Distinct sub-networks with their checkpoint prefixes.
    pub fn nets(&self) -> Vec<(&'static str, &SubNetwork)> {
        let mut v = vec![("shop", &self.shop)];
        if let Some(s) = &self.street {
            v.push(("street", s));
        }
        v
    }

    pub fn nets_mut(&mut self) -> Vec<(&'static str, &mut SubNetwork)> {
        let mut v = vec![("shop", &mut self.shop)];
        if let Some(s) = self.street.as_mut() {
            v.push(("street", s));
        }
        v
    }

    pub fn bind(&self, g: &mut Graph) -> BoundDual {
        let shop = self.shop.bind(g);
        let street = match &self.street {
            Some(s) => s.bind(g),
            None => shop.clone(),
        };
        BoundDual { shop, street }
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> BoundDual {
        let shop = self.shop.bind_frozen(g);
        let street = match &self.street {
            Some(s) => s.bind_frozen(g),
            None => shop.clone(),
        };
        BoundDual { shop, street }
    }

    /// Sends online images through the shop network and offline images
    /// through the street network, each as one sub-batch in input order.
    pub fn route_batch(
        &self,
        g: &mut Graph,
        bound: &BoundDual,
        samples: &[(Domain, &Tensor)],
    ) -> Result<RoutedOutputs> {
        let mut online = Vec::new();
        let mut offline = Vec::new();
        let mut positions = Vec::with_capacity(samples.len());
        for &(d, img) in samples {
            let bucket = match d {
                Domain::Online => &mut online,
                Domain::Offline => &mut offline,
            };
            positions.push((d, bucket.len()));
            bucket.push(img);
        }
        let mut run = |imgs: &[&Tensor], net: &SubNetwork, ids: &[NodeId]| -> Result<Option<ForwardOutputs>> {
            if imgs.is_empty() {
                return Ok(None);
            }
            let batch = g.input(Tensor::stack(imgs)?);
            net.forward(g, ids, batch).map(Some)
        };
        let online = run(&online, &self.shop, &bound.shop)?;
        let offline = run(&offline, self.street(), &bound.street)?;
        Ok(RoutedOutputs {
            online,
            offline,
            positions,
        })
    }

    pub fn save(&self, path: &Path, meta: &serde_json::Value) -> Result<()> {
        Checkpoint {
            network: self.clone(),
            velocities: None,
            meta: meta.clone(),
        }
        .save(path)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DARNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    topology: Topology,
    config: SubNetworkConfig,
    schema: AttributeSchema,
    has_velocities: bool,
    meta: serde_json::Value,
}

/// Network weights plus optional optimizer state and free-form metadata.
///
/// On disk: `DARNCKPT`, `u32` version, `u32` header length, a UTF-8 JSON
/// header echoing config and schema, then a named-tensor archive with one
/// TNSR entry per parameter (`shop.*`, `street.*`, `velocity.*`).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: DualNetwork,
    /// Momentum buffers aligned with `network.nets()` parameter order.
    pub velocities: Option<Vec<Vec<Tensor>>>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            topology: self.network.topology(),
            config: self.network.config().clone(),
            schema: self.network.schema().clone(),
            has_velocities: self.velocities.is_some(),
            meta: self.meta.clone(),
        };
        let text = serde_json::to_string_pretty(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        let mut entries = Vec::new();
        for (k, (prefix, net)) in self.network.nets().into_iter().enumerate() {
            for (name, t) in net.names.iter().zip(&net.params) {
                entries.push((format!("{prefix}.{name}"), t));
            }
            if let Some(vel) = &self.velocities {
                for (name, t) in net.names.iter().zip(&vel[k]) {
                    entries.push((format!("velocity.{prefix}.{name}"), t));
                }
            }
        }
        write_archive(w, &entries)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "checkpoint",
            detail,
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = read_u32(r).map_err(|e| bad(e.to_string()))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = read_u32(r).map_err(|e| bad(e.to_string()))?;
        let mut text = vec![0u8; len as usize];
        r.read_exact(&mut text).map_err(|e| bad(e.to_string()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&text).map_err(|e| bad(format!("header: {e}")))?;
        let entries = read_archive(r)?;
        let mut network = match header.topology {
            Topology::Dual => build_dual_network(&header.config, &header.schema, 0)?,
            Topology::Shared => build_shared_network(&header.config, &header.schema, 0)?,
        };
        let mut lookup: std::collections::HashMap<String, Tensor> = entries.into_iter().collect();
        let mut velocities = header.has_velocities.then(Vec::new);
        for (prefix, net) in network.nets_mut() {
            let mut vel = Vec::new();
            for (name, slot) in net.names.iter().zip(net.params.iter_mut()) {
                let key = format!("{prefix}.{name}");
                let t = lookup.remove(&key).ok_or_else(|| bad(format!("missing tensor {key}")))?;
                if t.shape() != slot.shape() {
                    return Err(bad(format!("{key}: shape {:?} vs {:?}", t.shape(), slot.shape())));
                }
                *slot = t;
                if velocities.is_some() {
                    let key = format!("velocity.{prefix}.{name}");
                    let v = lookup.remove(&key).ok_or_else(|| bad(format!("missing tensor {key}")))?;
                    vel.push(v);
                }
            }
            if let Some(v) = velocities.as_mut() {
                v.push(vel);
            }
        }
        if let Some(extra) = lookup.keys().next() {
            return Err(bad(format!("unexpected tensor {extra}")));
        }
        Ok(Checkpoint {
            network,
            velocities,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }
}
