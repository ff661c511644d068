//! Network construction: stacked stride-2 convolutional encoder, bias-free
//! linear self-expressive layer, mirrored deconvolutional decoder.
//!
//! A [`ModelConfig`] describes only the encoder; the decoder is always its
//! mirror. [`Model::new`] wires the computation graph for one of three modes:
//! the plain auto-encoder used in pre-training, the full network used in
//! fine-tuning (decoder fed with the transformed latent code C·Z), and a
//! diagnostic mode where the self-expressive layer is present but the decoder
//! is fed Z directly.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_out_dim, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Magic string opening a model checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8] = b"DSCNET1\n";

/// One encoder layer: square kernel and output channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kernel_size: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    L1,
    L2,
}

/// Declarative architecture description. The decoder mirrors the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder_layers: Vec<LayerSpec>,
    pub input_hw: (usize, usize),
    pub dataset_size: usize,
    pub regularizer: Regularizer,
    /// Hard-project diag(C) to zero after init and after every update.
    pub zero_diag: bool,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_layers.is_empty() {
            return Err(Error::invalid("ModelConfig", "no encoder layers"));
        }
        for (i, l) in self.encoder_layers.iter().enumerate() {
            if !matches!(l.kernel_size, 1 | 3 | 5 | 7) {
                return Err(Error::invalid(
                    "ModelConfig",
                    format!("layer {}: kernel size {} not in {{1,3,5,7}}", i, l.kernel_size),
                ));
            }
            if l.channels == 0 {
                return Err(Error::invalid(
                    "ModelConfig",
                    format!("layer {}: zero channels", i),
                ));
            }
        }
        if self.input_hw.0 == 0 || self.input_hw.1 == 0 {
            return Err(Error::invalid("ModelConfig", "input dims must be >= 1"));
        }
        if self.dataset_size < 2 {
            return Err(Error::invalid("ModelConfig", "dataset size must be >= 2"));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::invalid("ModelConfig", "lambdas must be nonnegative"));
        }
        Ok(())
    }

    /// Spatial sizes along the encoder: index 0 is the input, index i the
    /// output of encoder layer i. Each step is ceil-halving.
    pub fn spatial_chain(&self) -> Vec<(usize, usize)> {
        let mut chain = vec![self.input_hw];
        for _ in &self.encoder_layers {
            let (h, w) = *chain.last().unwrap();
            chain.push((conv_out_dim(h), conv_out_dim(w)));
        }
        chain
    }

    /// Flattened per-sample latent dimension: channels of the last encoder
    /// layer times the final spatial extent.
    pub fn latent_dim(&self) -> usize {
        let (h, w) = *self.spatial_chain().last().unwrap();
        self.encoder_layers.last().unwrap().channels * h * w
    }
}

/// Per-layer weight+bias counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCounts {
    pub encoder: Vec<usize>,
    pub self_expressive: usize,
    pub decoder: Vec<usize>,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.encoder.iter().sum::<usize>()
            + self.self_expressive
            + self.decoder.iter().sum::<usize>()
    }
}

/// Parameter accounting: encoder layer i holds k_i²·n_{i-1}·n_i weights plus
/// n_i biases (n_0 = 1); the decoder mirrors the encoder; the self-expressive
/// layer holds N² weights and no bias.
pub fn count_params(config: &ModelConfig) -> ParamCounts {
    let layers = &config.encoder_layers;
    let l = layers.len();
    let ch = |i: isize| -> usize {
        if i <= 0 {
            1
        } else {
            layers[(i - 1) as usize].channels
        }
    };
    let mut encoder = Vec::with_capacity(l);
    for i in 0..l {
        let k = layers[i].kernel_size;
        encoder.push(k * k * ch(i as isize) * ch(i as isize + 1) + ch(i as isize + 1));
    }
    let mut decoder = Vec::with_capacity(l);
    for j in 0..l {
        let src = l - j; // decoder layer j inverts encoder layer src (1-based)
        let k = layers[src - 1].kernel_size;
        decoder.push(k * k * ch(src as isize) * ch(src as isize - 1) + ch(src as isize - 1));
    }
    ParamCounts {
        encoder,
        self_expressive: config.dataset_size * config.dataset_size,
        decoder,
    }
}

/// How the self-expressive layer participates in the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelfExpressiveMode {
    /// Plain auto-encoder (pre-training): no C at all.
    Disabled,
    /// Full network: decoder consumes C·Z, loss carries all three terms.
    Enabled,
    /// C exists and the regularizer/self-expression terms are active, but
    /// the decoder consumes Z directly (diagnostic path).
    Bypassed,
}

/// Loss value split into its three terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub reg: f64,
    pub selfexpr: f64,
}

/// Snapshot of the tensors flowing through the network after a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardState {
    /// Flattened latent codes, one row per sample (channel-major, then
    /// row-major spatial within each channel).
    pub z: Tensor,
    /// Transformed latent codes C·Z (equal to `z` when there is no
    /// self-expressive path).
    pub zc: Tensor,
    pub xhat: Tensor,
    pub spatial_chain: Vec<(usize, usize)>,
}

/// Name of the self-expressive parameter in the registry.
pub const SELF_EXPR_PARAM: &str = "selfexpr.c";

/// The wired network: computation graph plus the node ids of interest.
pub struct Model {
    pub config: ModelConfig,
    pub mode: SelfExpressiveMode,
    pub graph: Graph,
    input: NodeId,
    z: NodeId,
    zc: Option<NodeId>,
    xhat: NodeId,
    loss_total: NodeId,
    loss_recon: NodeId,
    loss_reg: Option<NodeId>,
    loss_selfexpr: Option<NodeId>,
    spatial_chain: Vec<(usize, usize)>,
}

impl Model {
    /// Build the graph with freshly initialized parameters. Kernels are drawn
    /// uniformly from ±sqrt(2/fan_in), biases start at zero, and C starts as
    /// uniform noise in ±1e-8 (diagonal zeroed when configured).
    pub fn new(config: &ModelConfig, mode: SelfExpressiveMode, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = &config.encoder_layers;
        let l = layers.len();
        let n = config.dataset_size;
        let (h0, w0) = config.input_hw;
        let chain = config.spatial_chain();

        let mut graph = Graph::new();
        let input = graph.input(Tensor::zeros(&[n, 1, h0, w0]));

        // Encoder: conv + relu per layer.
        let mut cur = input;
        let mut in_ch = 1usize;
        for (i, layer) in layers.iter().enumerate() {
            let k = layer.kernel_size;
            let fan_in = in_ch * k * k;
            let kernel = graph.param(
                &format!("enc{}.kernel", i),
                uniform_init(&[layer.channels, in_ch, k, k], fan_in, &mut rng),
            );
            let bias = graph.param(&format!("enc{}.bias", i), Tensor::zeros(&[layer.channels]));
            let conv = graph.conv2d_s2(cur, kernel, bias)?;
            cur = graph.relu(conv);
            in_ch = layer.channels;
        }

        let d_latent = config.latent_dim();
        let z = graph.reshape(cur, &[n, d_latent])?;

        // Self-expressive layer: bias-free linear map of the latent rows.
        let (zc, c_node) = match mode {
            SelfExpressiveMode::Disabled => (None, None),
            SelfExpressiveMode::Enabled | SelfExpressiveMode::Bypassed => {
                let mut c_init = Tensor::zeros(&[n, n]);
                for v in c_init.data_mut() {
                    *v = rng.random_range(-1e-8..1e-8);
                }
                if config.zero_diag {
                    zero_diagonal(&mut c_init);
                }
                let c = graph.param(SELF_EXPR_PARAM, c_init);
                let zc = graph.matmul(c, z)?;
                (Some(zc), Some(c))
            }
        };

        // Decoder input: the transformed code when the self-expressive path
        // is live, the raw code otherwise.
        let dec_src = match (mode, zc) {
            (SelfExpressiveMode::Enabled, Some(zc)) => zc,
            _ => z,
        };
        let (hl, wl) = chain[l];
        let last_ch = layers[l - 1].channels;
        let mut cur = graph.reshape(dec_src, &[n, last_ch, hl, wl])?;

        // Mirrored decoder: convT per layer, relu on all but the last.
        for j in 0..l {
            let src = l - j; // inverts encoder layer src (1-based)
            let k = layers[src - 1].kernel_size;
            let cin = layers[src - 1].channels;
            let cout = if src >= 2 { layers[src - 2].channels } else { 1 };
            let fan_in = cin * k * k;
            let kernel = graph.param(
                &format!("dec{}.kernel", j),
                uniform_init(&[cin, cout, k, k], fan_in, &mut rng),
            );
            let bias = graph.param(&format!("dec{}.bias", j), Tensor::zeros(&[cout]));
            let target = chain[src - 1];
            let deconv = graph.conv_t2d_s2(cur, kernel, bias, target)?;
            cur = if j + 1 < l { graph.relu(deconv) } else { deconv };
        }
        let xhat = cur;

        // Loss: ½‖X - X̂‖² + λ1·reg(C) + (λ2/2)‖Z - ZC‖².
        let diff = graph.sub(input, xhat)?;
        let recon_raw = graph.frobenius_sq(diff);
        let loss_recon = graph.scale(recon_raw, 0.5);

        let (loss_total, loss_reg, loss_selfexpr) = match (c_node, zc) {
            (Some(c), Some(zc)) => {
                let reg_raw = match config.regularizer {
                    Regularizer::L1 => graph.l1_sum(c),
                    Regularizer::L2 => graph.frobenius_sq(c),
                };
                let reg = graph.scale(reg_raw, config.lambda1);
                let sdiff = graph.sub(z, zc)?;
                let se_raw = graph.frobenius_sq(sdiff);
                let se = graph.scale(se_raw, config.lambda2 * 0.5);
                let partial = graph.add(loss_recon, reg)?;
                let total = graph.add(partial, se)?;
                (total, Some(reg), Some(se))
            }
            _ => (loss_recon, None, None),
        };

        Ok(Model {
            config: config.clone(),
            mode,
            graph,
            input,
            z,
            zc,
            xhat,
            loss_total,
            loss_recon,
            loss_reg,
            loss_selfexpr,
            spatial_chain: chain,
        })
    }

    /// Set the data batch (shape [N, 1, H, W]) and refresh derived nodes.
    pub fn set_input(&mut self, x: Tensor) -> Result<()> {
        self.graph.set_value(self.input, x)?;
        self.graph.forward();
        Ok(())
    }

    pub fn forward(&mut self) {
        self.graph.forward();
    }

    pub fn loss_node(&self) -> NodeId {
        self.loss_total
    }

    pub fn loss_parts(&self) -> LossParts {
        LossParts {
            total: self.graph.value(self.loss_total).item(),
            recon: self.graph.value(self.loss_recon).item(),
            reg: self.loss_reg.map_or(0.0, |id| self.graph.value(id).item()),
            selfexpr: self
                .loss_selfexpr
                .map_or(0.0, |id| self.graph.value(id).item()),
        }
    }

    pub fn forward_state(&self) -> ForwardState {
        ForwardState {
            z: self.graph.value(self.z).clone(),
            zc: self.zc.map_or_else(
                || self.graph.value(self.z).clone(),
                |id| self.graph.value(id).clone(),
            ),
            xhat: self.graph.value(self.xhat).clone(),
            spatial_chain: self.spatial_chain.clone(),
        }
    }

    /// The current coefficient matrix, diagonal projected when configured.
    pub fn coefficients(&self) -> Result<Tensor> {
        let id = self
            .graph
            .param_id(SELF_EXPR_PARAM)
            .ok_or_else(|| Error::invalid("coefficients", "model has no self-expressive layer"))?;
        let mut c = self.graph.value(id).clone();
        if self.config.zero_diag {
            zero_diagonal(&mut c);
        }
        Ok(c)
    }

    /// Copy parameter values from a checkpoint into this graph. Parameters
    /// present here but absent from the checkpoint keep their init (that is
    /// how a fine-tune model consumes a pre-train checkpoint).
    pub fn apply_params(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        for (name, value) in params {
            let id = self.graph.param_id(name).ok_or_else(|| {
                Error::invalid(
                    "apply_params",
                    format!("checkpoint parameter `{}` not in model", name),
                )
            })?;
            self.graph.set_value(id, value.clone())?;
        }
        self.graph.forward();
        Ok(())
    }

    /// Named parameter snapshots in registry order.
    pub fn param_values(&self) -> Vec<(String, Tensor)> {
        self.graph
            .params()
            .iter()
            .map(|(name, id)| (name.clone(), self.graph.value(*id).clone()))
            .collect()
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let params = self.param_values();
        write_checkpoint(path, &self.config, &params)
    }
}

pub(crate) fn zero_diagonal(c: &mut Tensor) {
    let n = c.shape()[0];
    for i in 0..n {
        c.data_mut()[i * n + i] = 0.0;
    }
}

fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (2.0 / fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Composite loss recomputed directly from tensors (no graph); used to
/// cross-check the wired loss and for plug-in calculations.
pub fn composite_loss(
    x: &Tensor,
    xhat: &Tensor,
    z: &Tensor,
    zc: &Tensor,
    c: &Tensor,
    config: &ModelConfig,
) -> Result<LossParts> {
    let recon = 0.5 * crate::tensor::frobenius_sq(&x.sub(xhat)?);
    let reg = config.lambda1
        * match config.regularizer {
            Regularizer::L1 => crate::tensor::l1_sum(c),
            Regularizer::L2 => crate::tensor::frobenius_sq(c),
        };
    let selfexpr = 0.5 * config.lambda2 * crate::tensor::frobenius_sq(&z.sub(zc)?);
    Ok(LossParts {
        total: recon + reg + selfexpr,
        recon,
        reg,
        selfexpr,
    })
}

/// Checkpoint contents: architecture plus named parameter tensors.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Write a checkpoint: magic, JSON config block, then named float64
/// little-endian tensors.
pub fn write_checkpoint(
    path: &Path,
    config: &ModelConfig,
    params: &[(String, Tensor)],
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    checkpoint_to_writer(&mut w, config, params)?;
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

fn checkpoint_to_writer(
    w: &mut impl Write,
    config: &ModelConfig,
    params: &[(String, Tensor)],
) -> Result<()> {
    let io_err = |e: std::io::Error| Error::io("<checkpoint writer>", e);
    let cfg = serde_json::to_vec(config).map_err(|e| Error::Config(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    w.write_all(&(cfg.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&cfg).map_err(io_err)?;
    w.write_all(&(params.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    for (name, tensor) in params {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(nb).map_err(io_err)?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes())
            .map_err(io_err)?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let p = path.display().to_string();
    if buf.len() < CHECKPOINT_MAGIC.len() || &buf[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(Error::MalformedFile {
            path: p,
            detail: "bad magic, expected DSCNET1".to_string(),
        });
    }
    let mut pos = CHECKPOINT_MAGIC.len();
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > buf.len() {
            return Err(Error::MalformedFile {
                path: path.display().to_string(),
                detail: "truncated".to_string(),
            });
        }
        let s = &buf[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let cfg_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let config: ModelConfig =
        serde_json::from_slice(take(cfg_len)?).map_err(|e| Error::MalformedFile {
            path: path.display().to_string(),
            detail: format!("bad config block: {}", e),
        })?;
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name =
            String::from_utf8(take(name_len)?.to_vec()).map_err(|_| Error::MalformedFile {
                path: path.display().to_string(),
                detail: "parameter name is not utf-8".to_string(),
            })?;
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
        }
        params.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(Checkpoint { config, params })
}
