//! Configurable U-Net with an explicit forward tape and hand-written
//! backward pass, plus training and checkpointing.
//!
//! Layout for `depth = D`, channel width `ch(d) = base * growth^d`:
//!
//! ```text
//! input   : shifted by -0.5 so normalized intensities center on zero
//! enc d   : 2 x [conv3x3 + ELU]            -> skip d, then max_pool2
//! bottom  : 2 x [conv3x3 + ELU]            at ch(D)
//! dec d   : upsample2, conv3x3 + ELU to ch(d), concat skip d,
//!           2 x [conv3x3 + ELU]
//! head    : conv1x1 to one channel + sigmoid
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, AdamHyper, AdamState, Param, Real, Tensor4};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    WeightedBce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// Square spatial input size in pixels.
    pub input_size: usize,
    pub in_channels: usize,
    /// Number of down-sampling blocks.
    pub depth: usize,
    pub base_channels: usize,
    pub channel_growth: usize,
    pub loss: LossKind,
    /// Positive-class weight for `weighted_bce`. `None` means "derive from
    /// the training set".
    #[serde(default)]
    pub w_pos: Option<f64>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Index of the initialization substream under the run seed; changing
    /// it draws a different initialization with everything else fixed.
    pub seed: u64,
}

impl UNetConfig {
    /// Slice-level bone segmentation net at full resolution (384 x 384).
    pub fn bonenet_default() -> Self {
        Self {
            input_size: 384,
            in_channels: 1,
            depth: 4,
            base_channels: 16,
            channel_growth: 2,
            loss: LossKind::Bce,
            w_pos: None,
            lr: AdamHyper::default().lr,
            epochs: 20,
            batch_size: 4,
            seed: 0,
        }
    }

    /// Patch-level lesion net at full resolution (64 x 64 patches).
    pub fn lesionnet_default() -> Self {
        Self {
            input_size: 64,
            in_channels: 1,
            depth: 3,
            base_channels: 16,
            channel_growth: 2,
            loss: LossKind::WeightedBce,
            w_pos: None,
            lr: AdamHyper::default().lr,
            epochs: 20,
            batch_size: 32,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("input_size", self.input_size),
            ("in_channels", self.in_channels),
            ("depth", self.depth),
            ("base_channels", self.base_channels),
            ("channel_growth", self.channel_growth),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.depth >= usize::BITS as usize || self.input_size % (1usize << self.depth) != 0 {
            return Err(Error::Config(format!(
                "input_size {} is not divisible by 2^depth (depth {})",
                self.input_size, self.depth
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if let Some(w) = self.w_pos {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("w_pos must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_growth.pow(level as u32)
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let conv = |ci: usize, co: usize| 9 * ci * co + co;
        let mut total = 0;
        for d in 0..self.depth {
            let cin = if d == 0 { self.in_channels } else { self.channels(d - 1) };
            total += conv(cin, self.channels(d)) + conv(self.channels(d), self.channels(d));
        }
        let cb = self.channels(self.depth);
        total += conv(self.channels(self.depth - 1), cb) + conv(cb, cb);
        for d in 0..self.depth {
            let c = self.channels(d);
            total += conv(self.channels(d + 1), c) + conv(2 * c, c) + conv(c, c);
        }
        total + self.channels(0) + 1
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSpec {
    c_in: usize,
    c_out: usize,
    k: usize,
}

/// Layer indices of each block; parameters of layer `l` are `2l` (kernel)
/// and `2l + 1` (bias).
#[derive(Debug, Clone)]
struct Layout {
    layers: Vec<(String, LayerSpec)>,
    enc: Vec<[usize; 2]>,
    bottom: [usize; 2],
    /// Indexed by level, not by execution order.
    dec: Vec<[usize; 3]>,
    head: usize,
}

impl Layout {
    fn new(cfg: &UNetConfig) -> Self {
        let mut layers = Vec::new();
        let mut push = |name: String, c_in, c_out, k| {
            layers.push((name, LayerSpec { c_in, c_out, k }));
            layers.len() - 1
        };
        let mut enc = Vec::new();
        for d in 0..cfg.depth {
            let cin = if d == 0 { cfg.in_channels } else { cfg.channels(d - 1) };
            let c = cfg.channels(d);
            enc.push([push(format!("enc{d}.conv1"), cin, c, 3), push(format!("enc{d}.conv2"), c, c, 3)]);
        }
        let cb = cfg.channels(cfg.depth);
        let bottom = [
            push("bottom.conv1".into(), cfg.channels(cfg.depth - 1), cb, 3),
            push("bottom.conv2".into(), cb, cb, 3),
        ];
        let mut dec = vec![[0; 3]; cfg.depth];
        for d in (0..cfg.depth).rev() {
            let c = cfg.channels(d);
            dec[d] = [
                push(format!("dec{d}.up"), cfg.channels(d + 1), c, 3),
                push(format!("dec{d}.conv1"), 2 * c, c, 3),
                push(format!("dec{d}.conv2"), c, c, 3),
            ];
        }
        let head = push("head".into(), cfg.channels(0), 1, 1);
        Self {
            layers,
            enc,
            bottom,
            dec,
            head,
        }
    }
}

/// Activations recorded during a training forward pass.
pub struct Tape<T> {
    /// `(input, post-activation output)` per conv layer, by layer index.
    convs: Vec<Option<(Tensor4<T>, Tensor4<T>)>>,
    pools: Vec<nn::PoolIndices>,
    output: Tensor4<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T = f32> {
    config: UNetConfig,
    layout_len: usize,
    params: Vec<Param<T>>,
    adam: AdamState<T>,
}

/// The single-precision model used for training and inference.
pub type UNetModel = UNet<f32>;

impl<T: Real> UNet<T> {
    /// He-scaled normal initialization from `seed` for the 3x3 convolutions,
    /// unit-gain normal for the 1x1 head, zero biases.
    pub fn build(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = seed::rng(seed);
        let mut params = Vec::with_capacity(2 * layout.layers.len());
        for (name, spec) in &layout.layers {
            let fan_in = (spec.c_in * spec.k * spec.k) as f64;
            let gain = if spec.k == 1 { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive std");
            let shape = vec![spec.c_out, spec.c_in, spec.k, spec.k];
            let len = shape.iter().product();
            let data = (0..len).map(|_| T::from_f64c(normal.sample(&mut rng))).collect();
            params.push(Param {
                name: format!("{name}.weight"),
                shape,
                data,
            });
            params.push(Param::zeros(format!("{name}.bias"), vec![spec.c_out]));
        }
        let adam = AdamState::new(
            AdamHyper {
                lr: config.lr,
                ..AdamHyper::default()
            },
            &params,
        );
        Ok(Self {
            config,
            layout_len: layout.layers.len(),
            params,
            adam,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn adam(&self) -> &AdamState<T> {
        &self.adam
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Same model in another precision; Adam moments are converted too.
    pub fn cast<U: Real>(&self) -> UNet<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64c(x.to_f64().expect("finite"))).collect::<Vec<U>>();
        UNet {
            config: self.config.clone(),
            layout_len: self.layout_len,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: conv(&p.data),
                })
                .collect(),
            adam: AdamState {
                hyper: self.adam.hyper,
                step: self.adam.step,
                m: self.adam.m.iter().map(|m| conv(m)).collect(),
                v: self.adam.v.iter().map(|v| conv(v)).collect(),
            },
        }
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        let s = self.config.input_size;
        if x.c() != self.config.in_channels || x.h() != s || x.w() != s {
            return Err(Error::Shape(format!(
                "network expects (n, {}, {s}, {s}), got {:?}",
                self.config.in_channels,
                x.shape()
            )));
        }
        Ok(())
    }

    fn conv_act(&self, l: usize, x: &Tensor4<T>, tape: &mut Option<&mut Tape<T>>) -> Result<Tensor4<T>> {
        let y = nn::elu(&nn::conv2d(x, &self.params[2 * l].data, &self.params[2 * l + 1].data)?);
        if let Some(t) = tape.as_deref_mut() {
            t.convs[l] = Some((x.clone(), y.clone()));
        }
        Ok(y)
    }

    fn run(&self, x: &Tensor4<T>, mut tape: Option<&mut Tape<T>>) -> Result<Tensor4<T>> {
        self.check_input(x)?;
        let layout = Layout::new(&self.config);
        let mut skips = Vec::with_capacity(self.config.depth);
        let half = T::from_f64c(0.5);
        let mut h = x.map(|v| v - half);
        for enc in &layout.enc {
            h = self.conv_act(enc[0], &h, &mut tape)?;
            h = self.conv_act(enc[1], &h, &mut tape)?;
            let (pooled, idx) = nn::max_pool2(&h)?;
            if let Some(t) = tape.as_deref_mut() {
                t.pools.push(idx);
            }
            skips.push(h);
            h = pooled;
        }
        h = self.conv_act(layout.bottom[0], &h, &mut tape)?;
        h = self.conv_act(layout.bottom[1], &h, &mut tape)?;
        for d in (0..self.config.depth).rev() {
            let [up, c1, c2] = layout.dec[d];
            let u = self.conv_act(up, &nn::upsample2(&h), &mut tape)?;
            let cat = nn::concat_channels(&skips[d], &u)?;
            h = self.conv_act(c1, &cat, &mut tape)?;
            h = self.conv_act(c2, &h, &mut tape)?;
        }
        let l = layout.head;
        let logits = nn::conv1x1(&h, &self.params[2 * l].data, &self.params[2 * l + 1].data)?;
        let out = nn::sigmoid(&logits);
        if let Some(t) = tape {
            t.convs[l] = Some((h, out.clone()));
            t.output = out.clone();
        }
        Ok(out)
    }

    /// Inference. Output is `(n, 1, input_size, input_size)` in `(0, 1)`.
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.run(x, None)
    }

    /// Forward pass that records what [`UNet::backward`] needs.
    pub fn forward_train(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, Tape<T>)> {
        let mut tape = Tape {
            convs: vec![None; self.layout_len],
            pools: Vec::with_capacity(self.config.depth),
            output: Tensor4::zeros([0, 0, 0, 0]),
        };
        let out = self.run(x, Some(&mut tape))?;
        Ok((out, tape))
    }

    fn conv_back(&self, l: usize, tape: &Tape<T>, g: &Tensor4<T>, grads: &mut [Vec<T>]) -> Result<Tensor4<T>> {
        let (x, y) = tape.convs[l].as_ref().expect("layer recorded");
        let g_pre = nn::elu_backward(y, g);
        let cg = nn::conv2d_backward(x, &self.params[2 * l].data, &g_pre)?;
        grads[2 * l] = cg.kernel;
        grads[2 * l + 1] = cg.bias;
        Ok(cg.input)
    }

    /// Parameter gradients (in parameter order) given `d loss / d output`.
    pub fn backward(&self, tape: &Tape<T>, grad_out: &Tensor4<T>) -> Result<Vec<Vec<T>>> {
        if grad_out.shape() != tape.output.shape() {
            return Err(Error::Shape(format!(
                "output gradient {:?} vs output {:?}",
                grad_out.shape(),
                tape.output.shape()
            )));
        }
        self.backward_logits(tape, &nn::sigmoid_backward(&tape.output, grad_out))
    }

    /// Parameter gradients given `d loss / d logits` of the output sigmoid.
    pub fn backward_logits(&self, tape: &Tape<T>, g_logits: &Tensor4<T>) -> Result<Vec<Vec<T>>> {
        if g_logits.shape() != tape.output.shape() {
            return Err(Error::Shape(format!(
                "logit gradient {:?} vs output {:?}",
                g_logits.shape(),
                tape.output.shape()
            )));
        }
        let layout = Layout::new(&self.config);
        let mut grads = vec![Vec::new(); self.params.len()];
        let l = layout.head;
        let (hx, _) = tape.convs[l].as_ref().expect("head recorded");
        let cg = nn::conv1x1_backward(hx, &self.params[2 * l].data, g_logits)?;
        grads[2 * l] = cg.kernel;
        grads[2 * l + 1] = cg.bias;
        let mut g = cg.input;
        let mut skip_grads: Vec<Option<Tensor4<T>>> = vec![None; self.config.depth];
        for d in 0..self.config.depth {
            let [up, c1, c2] = layout.dec[d];
            g = self.conv_back(c2, tape, &g, &mut grads)?;
            g = self.conv_back(c1, tape, &g, &mut grads)?;
            let (g_skip, g_up) = nn::concat_channels_backward(&g, self.config.channels(d));
            skip_grads[d] = Some(g_skip);
            g = nn::upsample2_backward(&self.conv_back(up, tape, &g_up, &mut grads)?);
        }
        g = self.conv_back(layout.bottom[1], tape, &g, &mut grads)?;
        g = self.conv_back(layout.bottom[0], tape, &g, &mut grads)?;
        for d in (0..self.config.depth).rev() {
            let mut gs = nn::max_pool2_backward(&tape.pools[d], &g);
            let sk = skip_grads[d].take().expect("decoder visited");
            for (a, &b) in gs.data_mut().iter_mut().zip(sk.data()) {
                *a = *a + b;
            }
            g = self.conv_back(layout.enc[d][1], tape, &gs, &mut grads)?;
            g = self.conv_back(layout.enc[d][0], tape, &g, &mut grads)?;
        }
        Ok(grads)
    }

    /// Loss per `config.loss` and its gradient with respect to the output.
    pub fn loss(&self, p: &Tensor4<T>, y: &Tensor4<T>) -> Result<(T, Tensor4<T>)> {
        match self.config.loss {
            LossKind::Bce => nn::bce_loss(p, y),
            LossKind::WeightedBce => nn::weighted_bce_loss(p, y, self.positive_weight()?),
        }
    }

    fn positive_weight(&self) -> Result<T> {
        match self.config.loss {
            LossKind::Bce => Ok(T::one()),
            LossKind::WeightedBce => self
                .config
                .w_pos
                .map(T::from_f64c)
                .ok_or_else(|| Error::Config("weighted_bce needs w_pos (set it or derive it from the data)".into())),
        }
    }

    /// One optimizer step on a batch. Returns the batch loss.
    pub fn train_batch(&mut self, x: &Tensor4<T>, y: &Tensor4<T>) -> Result<T> {
        let (p, tape) = self.forward_train(x)?;
        let (loss, _) = self.loss(&p, y)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                batch: 0,
                loss: loss.to_f64().unwrap_or(f64::NAN),
            });
        }
        let g = nn::bce_logit_grad(&p, y, self.positive_weight()?)?;
        let grads = self.backward_logits(&tape, &g)?;
        nn::adam_step(&mut self.params, &grads, &mut self.adam)?;
        Ok(loss)
    }

    /// One pass over `dataset` in seeded random order. Targets are
    /// binarized at 0.5. Returns the mean batch loss.
    pub fn train_epoch(&mut self, dataset: &[(Tensor4<T>, Tensor4<T>)], shuffle_seed: u64) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::Precondition("training dataset is empty".into()));
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut seed::rng(shuffle_seed));
        let half = T::from_f64c(0.5);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let xs: Vec<&Tensor4<T>> = chunk.iter().map(|&i| &dataset[i].0).collect();
            let ys: Vec<&Tensor4<T>> = chunk.iter().map(|&i| &dataset[i].1).collect();
            let x = Tensor4::stack(&xs)?;
            let y = Tensor4::stack(&ys)?.map(|v| if v >= half { T::one() } else { T::zero() });
            let loss = self.train_batch(&x, &y).map_err(|e| match e {
                Error::NonFiniteLoss { loss, .. } => Error::NonFiniteLoss { batch: b, loss },
                other => other,
            })?;
            total += loss.to_f64().expect("finite");
            batches += 1;
        }
        Ok(total / batches as f64)
    }
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in float32 elements from the start of the blob.
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    config: UNetConfig,
    adam: AdamHyper,
    adam_step: u64,
    /// Parameter entries; the blob holds all parameters, then all first
    /// moments, then all second moments, each in this order.
    tensors: Vec<TensorEntry>,
    blob_len_bytes: usize,
    blob_sha256: String,
}

/// `<stem>.json` and `<stem>.bin` for a checkpoint path given with or
/// without one of those extensions.
pub fn checkpoint_paths(path: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let p = path.as_ref();
    let stem = match p.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => p.with_extension(""),
        _ => p.to_path_buf(),
    };
    let mut json = stem.clone().into_os_string();
    json.push(".json");
    let mut bin = stem.into_os_string();
    bin.push(".bin");
    (json.into(), bin.into())
}

impl UNet<f32> {
    fn blob(&self) -> Vec<u8> {
        let n = self.param_count();
        let mut out = Vec::with_capacity(12 * n);
        for group in [
            self.params.iter().map(|p| &p.data).collect::<Vec<_>>(),
            self.adam.m.iter().collect(),
            self.adam.v.iter().collect(),
        ] {
            for t in group {
                for v in t {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Writes `<stem>.json` + `<stem>.bin`; returns the blob's SHA-256.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<String> {
        let (json_path, bin_path) = checkpoint_paths(path);
        let blob = self.blob();
        let sha = seed::sha256_hex(&blob);
        let mut offset = 0;
        let tensors = self
            .params
            .iter()
            .map(|p| {
                let e = TensorEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    offset,
                    len: p.data.len(),
                };
                offset += p.data.len();
                e
            })
            .collect();
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            adam: self.adam.hyper,
            adam_step: self.adam.step,
            tensors,
            blob_len_bytes: blob.len(),
            blob_sha256: sha.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
        fs::write(&bin_path, &blob).map_err(|e| Error::io(&bin_path, e))?;
        Ok(sha)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let (json_path, bin_path) = checkpoint_paths(path);
        let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| Error::Corruption(format!("manifest: {e}")))?;
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Unsupported(format!(
                "checkpoint format_version {}",
                manifest.format_version
            )));
        }
        let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let mut model = UNet::<f32>::build(manifest.config.clone(), 0)
            .map_err(|e| Error::Corruption(format!("manifest config: {e}")))?;
        let n = model.param_count();
        if blob.len() != 12 * n || manifest.blob_len_bytes != blob.len() {
            return Err(Error::Corruption(format!(
                "blob has {} bytes, manifest says {}, config implies {}",
                blob.len(),
                manifest.blob_len_bytes,
                12 * n
            )));
        }
        if manifest.tensors.len() != model.params.len() {
            return Err(Error::Corruption(format!(
                "manifest lists {} tensors, config implies {}",
                manifest.tensors.len(),
                model.params.len()
            )));
        }
        let mut offset = 0;
        for (entry, p) in manifest.tensors.iter().zip(&model.params) {
            if entry.name != p.name || entry.shape != p.shape || entry.offset != offset || entry.len != p.data.len() {
                return Err(Error::Corruption(format!(
                    "tensor entry `{}` {:?} does not match config layout `{}` {:?}",
                    entry.name, entry.shape, p.name, p.shape
                )));
            }
            offset += entry.len;
        }
        if seed::sha256_hex(&blob) != manifest.blob_sha256 {
            return Err(Error::Corruption("blob checksum mismatch".into()));
        }
        let mut floats = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        for p in model.params.iter_mut() {
            p.data.iter_mut().for_each(|v| *v = floats.next().expect("length checked"));
        }
        for m in model.adam.m.iter_mut().chain(model.adam.v.iter_mut()) {
            m.iter_mut().for_each(|v| *v = floats.next().expect("length checked"));
        }
        if model.params.iter().any(|p| p.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::Corruption("non-finite parameter".into()));
        }
        model.adam.hyper = manifest.adam;
        model.adam.step = manifest.adam_step;
        Ok(model)
    }
}
