use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::FcdnConfig;
use crate::connectivity::ChannelWeights;
use crate::data::EpochSet;
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{
    encoder_block, load_checkpoint, save_checkpoint, softmax_in_place, BlockVars, BnStats, Checkpoint, Graph, Padding, ParamStore,
    Precision, Tensor, Var,
};
use crate::rng::{self, Rng};

pub const N_BANDS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
struct BandIdx {
    conv: [usize; 3],
    bn_gamma: [usize; 3],
    bn_beta: [usize; 3],
}

#[derive(Debug, Clone, PartialEq)]
struct BlockIdx([usize; 12]);

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    bands: Vec<BandIdx>,
    patch_w: usize,
    patch_b: usize,
    cls: usize,
    dist: usize,
    pos: usize,
    blocks: Vec<BlockIdx>,
    norm_g: usize,
    norm_b: usize,
    head_w: usize,
    head_b: usize,
    dhead_w: usize,
    dhead_b: usize,
}

enum Init {
    /// Uniform in `+-1/sqrt(fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

fn build_params(cfg: &FcdnConfig, r: &mut Rng) -> (ParamStore, Layout) {
    let mut ps = ParamStore::new();
    let mut add = |name: String, shape: &[usize], init: Init| {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::FanIn(fan) => {
                let b = 1.0 / (fan as f64).sqrt();
                (0..n).map(|_| r.random_range(-b..b)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        ps.push(name, Tensor::new(shape, data).expect("consistent shape"), true)
    };
    let [c1, c2, c3] = cfg.conv_channels;
    let [w1, w2, w3] = cfg.kernel_widths;
    let plan = [(1, c1, w1), (c1, c2, w2), (c2, c3, w3)];
    let mut bands = Vec::new();
    for b in 0..N_BANDS {
        let mut idx = BandIdx {
            conv: [0; 3],
            bn_gamma: [0; 3],
            bn_beta: [0; 3],
        };
        for (l, &(cin, cout, w)) in plan.iter().enumerate() {
            idx.conv[l] = add(format!("band{b}.conv{}.weight", l + 1), &[cout, cin, 1, w], Init::FanIn(cin * w));
            idx.bn_gamma[l] = add(format!("band{b}.bn{}.gamma", l + 1), &[cout], Init::Ones);
            idx.bn_beta[l] = add(format!("band{b}.bn{}.beta", l + 1), &[cout], Init::Zeros);
        }
        bands.push(idx);
    }
    let d = cfg.embed_dim;
    let pdim = N_BANDS * cfg.patch * cfg.patch;
    let hidden = d * cfg.mlp_ratio;
    let patch_w = add("patch.weight".into(), &[d, pdim], Init::FanIn(pdim));
    let patch_b = add("patch.bias".into(), &[d], Init::Zeros);
    let cls = add("cls_token".into(), &[1, 1, d], Init::FanIn(d));
    let dist = add("dist_token".into(), &[1, 1, d], Init::FanIn(d));
    let pos = add("pos_embed".into(), &[cfg.seq_len(), d], Init::FanIn(d));
    let mut blocks = Vec::new();
    for i in 0..cfg.depth {
        let p = |s: &str| format!("block{i}.{s}");
        blocks.push(BlockIdx([
            add(p("ln1.gamma"), &[d], Init::Ones),
            add(p("ln1.beta"), &[d], Init::Zeros),
            add(p("attn.qkv.weight"), &[3 * d, d], Init::FanIn(d)),
            add(p("attn.qkv.bias"), &[3 * d], Init::Zeros),
            add(p("attn.proj.weight"), &[d, d], Init::FanIn(d)),
            add(p("attn.proj.bias"), &[d], Init::Zeros),
            add(p("ln2.gamma"), &[d], Init::Ones),
            add(p("ln2.beta"), &[d], Init::Zeros),
            add(p("mlp.fc1.weight"), &[hidden, d], Init::FanIn(d)),
            add(p("mlp.fc1.bias"), &[hidden], Init::Zeros),
            add(p("mlp.fc2.weight"), &[d, hidden], Init::FanIn(hidden)),
            add(p("mlp.fc2.bias"), &[d], Init::Zeros),
        ]));
    }
    let norm_g = add("norm.gamma".into(), &[d], Init::Ones);
    let norm_b = add("norm.beta".into(), &[d], Init::Zeros);
    let head_w = add("head.weight".into(), &[cfg.n_classes, d], Init::FanIn(d));
    let head_b = add("head.bias".into(), &[cfg.n_classes], Init::Zeros);
    let dhead_w = add("head_dist.weight".into(), &[cfg.n_classes, d], Init::FanIn(d));
    let dhead_b = add("head_dist.bias".into(), &[cfg.n_classes], Init::Zeros);
    let layout = Layout {
        bands,
        patch_w,
        patch_b,
        cls,
        dist,
        pos,
        blocks,
        norm_g,
        norm_b,
        head_w,
        head_b,
        dhead_w,
        dhead_b,
    };
    (ps, layout)
}

/// Behaviour of a forward pass.
pub enum Mode<'a> {
    /// Batch statistics for normalization (updating running stats) and,
    /// when an RNG is given, active dropout.
    Train(Option<&'a mut Rng>),
    /// Running statistics, no dropout.
    Eval,
}

/// Everything a forward pass exposes.
pub struct ForwardOut {
    pub cls_logits: Var,
    pub dist_logits: Var,
    /// Mean of the two heads' logits, the evaluation output.
    pub logits: Var,
    /// Output of every encoder block, `[B, L, D]`.
    pub hidden: Vec<Var>,
    /// Attention probabilities of every block, `[B, H, L, L]`.
    pub attn: Vec<Var>,
    /// Final-norm class-token embedding, `[B, D]`.
    pub cls_embedding: Var,
    /// Per-band outputs of the three convolution stages (after their
    /// normalization and activation).
    pub conv_features: Vec<[Var; 3]>,
    /// Stage names and shapes along the first band's path and the fused tail.
    pub stages: Vec<(String, Vec<usize>)>,
}

/// FC-weighted three-band convolutional front end feeding a
/// distillation-token transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct FcdnModel {
    config: FcdnConfig,
    weights: Vec<ChannelWeights>,
    params: ParamStore,
    bn: Vec<BnStats>,
    layout: Layout,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: FcdnConfig,
    bands: Vec<Option<crate::BandSpec>>,
}

impl FcdnModel {
    /// Builds a model with seeded fan-in uniform initialization. `weights`
    /// holds one frozen channel-weight vector per band.
    pub fn build(config: &FcdnConfig, weights: Vec<ChannelWeights>, seed: u64) -> Result<Self> {
        config.validate()?;
        if weights.len() != N_BANDS {
            return Err(invalid!("expected {N_BANDS} channel-weight vectors, got {}", weights.len()));
        }
        if let Some(w) = weights.iter().find(|w| w.len() != config.n_channels) {
            return Err(invalid!("channel weights of length {} for K={}", w.len(), config.n_channels));
        }
        let mut r = rng::seeded(rng::derive_seed(seed, 0x1417));
        let (mut params, layout) = build_params(config, &mut r);
        let mut weights = weights;
        if config.precision == Precision::F32 {
            params.round_to_f32();
            weights.iter_mut().flat_map(|w| w.w.iter_mut()).for_each(|v| *v = *v as f32 as f64);
        }
        let bn = (0..N_BANDS)
            .flat_map(|_| config.conv_channels.iter().map(|&c| BnStats::new(c)))
            .collect();
        Ok(Self {
            config: config.clone(),
            weights,
            params,
            bn,
            layout,
        })
    }

    pub fn config(&self) -> &FcdnConfig {
        &self.config
    }

    pub fn channel_weights(&self) -> &[ChannelWeights] {
        &self.weights
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &[BnStats] {
        &self.bn
    }

    /// Copy whose channel weights are all ones, removing the connectivity stage.
    pub fn ablate_fc(&self) -> Self {
        let mut m = self.clone();
        m.weights = (0..N_BANDS).map(|_| ChannelWeights::ones(self.config.n_channels)).collect();
        m
    }

    /// Zeroes both classifier heads.
    pub fn zero_heads(&mut self) {
        let l = &self.layout;
        for i in [l.head_w, l.head_b, l.dhead_w, l.dhead_b] {
            self.params.get_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub(crate) fn round_state(&mut self) {
        if self.config.precision == Precision::F32 {
            self.params.round_to_f32();
            for s in &mut self.bn {
                s.mean.iter_mut().chain(s.var.iter_mut()).for_each(|v| *v = *v as f32 as f64);
            }
        }
    }

    /// Stacks trials `idx` of each band into `[B, 1, K, T]` tensors with the
    /// channel weights applied.
    pub fn batch_input(&self, bands: &[EpochSet], idx: &[usize]) -> Result<Vec<Tensor>> {
        self.check_bands(bands)?;
        let (k, t) = (self.config.n_channels, self.config.n_samples);
        bands
            .iter()
            .zip(&self.weights)
            .map(|(set, w)| {
                let mut data = Vec::with_capacity(idx.len() * k * t);
                for &n in idx {
                    if n >= set.n_trials() {
                        return Err(invalid!("trial {n} out of range"));
                    }
                    for (ki, &wk) in w.w.iter().enumerate() {
                        data.extend(set.channel(n, ki).iter().map(|&v| v as f64 * wk));
                    }
                }
                Tensor::new(&[idx.len(), 1, k, t], data)
            })
            .collect()
    }

    pub fn check_bands(&self, bands: &[EpochSet]) -> Result<()> {
        if bands.len() != N_BANDS {
            return Err(invalid!("expected {N_BANDS} band sets, got {}", bands.len()));
        }
        let n = bands[0].n_trials();
        for b in bands {
            if b.n_channels() != self.config.n_channels || b.n_samples() != self.config.n_samples {
                return Err(shape_err!(
                    "band set is {}x{}, model expects {}x{}",
                    b.n_channels(),
                    b.n_samples(),
                    self.config.n_channels,
                    self.config.n_samples
                ));
            }
            if b.n_trials() != n || b.labels() != bands[0].labels() {
                return Err(invalid!("band sets are not trial-aligned"));
            }
        }
        Ok(())
    }

    /// Runs the network on band inputs `[B, 1, K, T]` (weights already applied).
    pub fn forward(&mut self, g: &mut Graph, vars: &[Var], inputs: &[Tensor], mode: Mode) -> Result<ForwardOut> {
        match mode {
            Mode::Eval => self.forward_eval(g, vars, inputs),
            Mode::Train(rng) => {
                let mut bn = std::mem::take(&mut self.bn);
                let out = self.forward_with(g, vars, inputs, &mut bn, true, rng);
                self.bn = bn;
                out
            }
        }
    }

    /// Evaluation-mode forward pass that leaves the model untouched.
    pub fn forward_eval(&self, g: &mut Graph, vars: &[Var], inputs: &[Tensor]) -> Result<ForwardOut> {
        let mut bn = self.bn.clone();
        self.forward_with(g, vars, inputs, &mut bn, false, None)
    }

    fn forward_with(
        &self,
        g: &mut Graph,
        vars: &[Var],
        inputs: &[Tensor],
        bn: &mut [BnStats],
        train: bool,
        mut rng: Option<&mut Rng>,
    ) -> Result<ForwardOut> {
        let cfg = &self.config;
        if inputs.len() != N_BANDS {
            return Err(invalid!("expected {N_BANDS} band inputs, got {}", inputs.len()));
        }
        let bsz = inputs[0].shape()[0];
        for x in inputs {
            if x.shape() != [bsz, 1, cfg.n_channels, cfg.n_samples] {
                return Err(shape_err!(
                    "band input {:?}, expected [{bsz}, 1, {}, {}]",
                    x.shape(),
                    cfg.n_channels,
                    cfg.n_samples
                ));
            }
        }
        let l = &self.layout;
        let v = |i: usize| vars[i];
        let mut stages = Vec::new();
        let mut planes = Vec::new();
        let mut conv_features = Vec::new();
        for (b, x) in inputs.iter().enumerate() {
            let trace = b == 0;
            let mut rec = |name: &str, g: &Graph, var: Var| {
                if trace {
                    stages.push((name.to_string(), g.shape(var).to_vec()));
                }
            };
            let idx = &l.bands[b];
            let h = g.constant(x.clone());
            rec("input", g, h);
            let pads = [Padding::Valid, Padding::Valid, Padding::Same];
            let mut h = h;
            let mut feats = [h; 3];
            for s in 0..3 {
                h = g.conv_temporal(h, v(idx.conv[s]), None, pads[s])?;
                rec(&format!("conv{}", s + 1), g, h);
                h = g.batch_norm(h, v(idx.bn_gamma[s]), v(idx.bn_beta[s]), &mut bn[b * 3 + s], train)?;
                if s > 0 {
                    h = g.elu(h)?;
                }
                feats[s] = h;
            }
            conv_features.push(feats);
            h = g.avg_pool_temporal(h, cfg.pool_widths[0])?;
            h = g.elu(h)?;
            h = g.dropout(h, cfg.dropout, rng.as_deref_mut())?;
            rec("pool1", g, h);
            h = g.avg_pool_temporal(h, cfg.pool_widths[1])?;
            h = g.dropout(h, cfg.dropout, rng.as_deref_mut())?;
            rec("pool2", g, h);
            h = g.reshape(h, &[bsz, cfg.conv_channels[2], cfg.n_channels])?;
            h = g.bicubic(h, cfg.resize, cfg.resize)?;
            rec("interp", g, h);
            h = g.scale_0_255(h)?;
            h = g.reshape(h, &[bsz, 1, cfg.resize, cfg.resize])?;
            planes.push(h);
        }
        let img = g.concat(&planes, 1)?;
        stages.push(("concat".into(), g.shape(img).to_vec()));
        // fixed input normalization of the 0-255 planes to [-1, 1]
        let img = g.affine(img, 1.0 / 127.5, -1.0)?;

        let (r, p, d) = (cfg.resize, cfg.patch, cfg.embed_dim);
        let np = r / p;
        let x = g.reshape(img, &[bsz, N_BANDS, np, p, np, p])?;
        let x = g.permute(x, &[0, 2, 4, 1, 3, 5])?;
        let x = g.reshape(x, &[bsz, np * np, N_BANDS * p * p])?;
        let x = g.linear(x, v(l.patch_w), Some(v(l.patch_b)))?;
        let cls = g.expand_batch(v(l.cls), bsz)?;
        let dist = g.expand_batch(v(l.dist), bsz)?;
        let x = g.concat(&[cls, dist, x], 1)?;
        let mut x = g.add_bcast(x, v(l.pos))?;
        let mut hidden = Vec::with_capacity(cfg.depth);
        let mut attn = Vec::with_capacity(cfg.depth);
        for blk in &l.blocks {
            let i = blk.0;
            let bv = BlockVars {
                ln1_g: v(i[0]),
                ln1_b: v(i[1]),
                qkv_w: v(i[2]),
                qkv_b: v(i[3]),
                proj_w: v(i[4]),
                proj_b: v(i[5]),
                ln2_g: v(i[6]),
                ln2_b: v(i[7]),
                fc1_w: v(i[8]),
                fc1_b: v(i[9]),
                fc2_w: v(i[10]),
                fc2_b: v(i[11]),
            };
            let (out, a) = encoder_block(g, x, cfg.heads, &bv)?;
            hidden.push(out);
            attn.push(a);
            x = out;
        }
        let x = g.layer_norm(x, v(l.norm_g), v(l.norm_b))?;
        let seq = cfg.seq_len();
        let c = g.narrow(x, 1, 0, 1)?;
        let cls_embedding = g.reshape(c, &[bsz, d])?;
        let dt = g.narrow(x, 1, 1, 1)?;
        let dt = g.reshape(dt, &[bsz, d])?;
        let cls_logits = g.linear(cls_embedding, v(l.head_w), Some(v(l.head_b)))?;
        let dist_logits = g.linear(dt, v(l.dhead_w), Some(v(l.dhead_b)))?;
        let sum = g.add(cls_logits, dist_logits)?;
        let logits = g.affine(sum, 0.5, 0.0)?;
        debug_assert_eq!(g.shape(x)[1], seq);
        stages.push(("deit".into(), g.shape(logits).to_vec()));
        Ok(ForwardOut {
            cls_logits,
            dist_logits,
            logits,
            hidden,
            attn,
            cls_embedding,
            conv_features,
            stages,
        })
    }

    /// Evaluation-mode logits `[N, C]` for every trial.
    pub fn logits(&self, bands: &[EpochSet]) -> Result<Tensor> {
        self.check_bands(bands)?;
        let n = bands[0].n_trials();
        let c = self.config.n_classes;
        let mut out = Vec::with_capacity(n * c);
        let all: Vec<usize> = (0..n).collect();
        for chunk in all.chunks(self.config.batch_size.max(1)) {
            let inputs = self.batch_input(bands, chunk)?;
            let mut g = Graph::new(self.config.precision);
            let vars = self.params.bind(&mut g);
            let f = self.forward_eval(&mut g, &vars, &inputs)?;
            out.extend_from_slice(g.value(f.logits).data());
        }
        Tensor::new(&[n, c], out)
    }

    /// Evaluation-mode activations per trial: the three convolution stages
    /// (bands concatenated in order, each flattened) and the class-token
    /// embedding. Returns `(name, width, rows)` with `rows` of `N * width`.
    pub fn stage_features(&self, bands: &[EpochSet]) -> Result<Vec<(String, usize, Vec<f64>)>> {
        self.check_bands(bands)?;
        let n = bands[0].n_trials();
        let names = ["conv1", "conv2", "conv3", "cls_token"];
        let mut out: Vec<(String, usize, Vec<f64>)> = names.iter().map(|s| (s.to_string(), 0, Vec::new())).collect();
        let all: Vec<usize> = (0..n).collect();
        for chunk in all.chunks(self.config.batch_size.max(1)) {
            let inputs = self.batch_input(bands, chunk)?;
            let mut g = Graph::new(self.config.precision);
            let vars = self.params.bind(&mut g);
            let f = self.forward_eval(&mut g, &vars, &inputs)?;
            for i in 0..chunk.len() {
                for s in 0..3 {
                    let mut width = 0;
                    for band in &f.conv_features {
                        let v = g.value(band[s]);
                        let per = v.numel() / chunk.len();
                        out[s].2.extend_from_slice(&v.data()[i * per..(i + 1) * per]);
                        width += per;
                    }
                    out[s].1 = width;
                }
                let v = g.value(f.cls_embedding);
                let per = v.numel() / chunk.len();
                out[3].2.extend_from_slice(&v.data()[i * per..(i + 1) * per]);
                out[3].1 = per;
            }
        }
        Ok(out)
    }

    /// Evaluation-mode predictions: argmax labels and softmax probabilities `[N, C]`.
    pub fn predict(&self, bands: &[EpochSet]) -> Result<(Vec<usize>, Tensor)> {
        let logits = self.logits(bands)?;
        let c = self.config.n_classes;
        let mut probs = logits.into_data();
        probs.chunks_mut(c).for_each(softmax_in_place);
        let labels = probs.chunks(c).map(argmax).collect();
        Ok((labels, Tensor::new(&[probs.len() / c, c], probs)?))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        for (i, s) in self.bn.iter().enumerate() {
            let (b, l) = (i / 3, i % 3 + 1);
            let c = s.mean.len();
            tensors.push((format!("band{b}.bn{l}.running_mean"), Tensor::new(&[c], s.mean.clone()).unwrap()));
            tensors.push((format!("band{b}.bn{l}.running_var"), Tensor::new(&[c], s.var.clone()).unwrap()));
        }
        for (b, w) in self.weights.iter().enumerate() {
            tensors.push((format!("band{b}.fc_weights"), Tensor::new(&[w.len()], w.w.clone()).unwrap()));
        }
        let meta = CheckpointMeta {
            config: self.config.clone(),
            bands: self.weights.iter().map(|w| w.band.clone()).collect(),
        };
        Checkpoint {
            meta: serde_json::to_value(meta).expect("meta serializes"),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_value(ck.meta.clone()).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let k = meta.config.n_channels;
        let find = |name: &str| -> Result<&Tensor> {
            ck.tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))
        };
        let mut weights = Vec::new();
        for b in 0..N_BANDS {
            let t = find(&format!("band{b}.fc_weights"))?;
            let band = meta.bands.get(b).cloned().flatten();
            weights.push(ChannelWeights {
                w: t.data().to_vec(),
                band,
            });
        }
        if weights.iter().any(|w| w.len() != k) {
            return Err(Error::Format("channel weight length does not match the config".into()));
        }
        let mut m = Self::build(&meta.config, weights, 0).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        for i in 0..m.params.len() {
            let name = m.params.names()[i].clone();
            let t = find(&name)?;
            if t.shape() != m.params.get(i).shape() {
                return Err(Error::Format(format!("tensor {name} has shape {:?}", t.shape())));
            }
            *m.params.get_mut(i) = t.clone();
        }
        for i in 0..m.bn.len() {
            let (b, l) = (i / 3, i % 3 + 1);
            let mean = find(&format!("band{b}.bn{l}.running_mean"))?;
            let var = find(&format!("band{b}.bn{l}.running_var"))?;
            if mean.numel() != m.bn[i].mean.len() || var.numel() != m.bn[i].var.len() {
                return Err(Error::Format(format!("running stats of band{b}.bn{l} have the wrong length")));
            }
            m.bn[i].mean = mean.data().to_vec();
            m.bn[i].var = var.data().to_vec();
        }
        Ok(m)
    }

    /// Writes the checkpoint in the model's precision.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(&self.to_checkpoint(), path, self.config.precision)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (ck, _) = load_checkpoint(path)?;
        Self::from_checkpoint(&ck)
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
