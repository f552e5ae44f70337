//! Dual-path token Transformer over MSTmaps.
//!
//! The spatial path embeds each ROI-combination row of the map as a patch,
//! the temporal path embeds each frame. Both prepend a learnable token, run a
//! pre-norm encoder stack and hand the token row to a two-layer regression
//! head that emits one waveform sample per frame.
//!
//! Weight matrices are stored input-major, so a linear layer is `x · W + b`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::io::ByteCursor;
use crate::mstmap::{ColorSpace, MstMap};
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DTLC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathMode {
    #[default]
    Dual,
    SOnly,
    TOnly,
}

impl PathMode {
    pub fn uses_spatial(self) -> bool {
        self != PathMode::TOnly
    }

    pub fn uses_temporal(self) -> bool {
        self != PathMode::SOnly
    }
}

impl FromStr for PathMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dual" => Ok(PathMode::Dual),
            "s" | "s_only" => Ok(PathMode::SOnly),
            "t" | "t_only" => Ok(PathMode::TOnly),
            other => Err(Error::Config(format!("unknown path mode {other:?}"))),
        }
    }
}

impl fmt::Display for PathMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PathMode::Dual => "dual",
            PathMode::SOnly => "s_only",
            PathMode::TOnly => "t_only",
        })
    }
}

/// Activation inside the regression head. Encoder FFNs always use GELU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// N, rows of the map.
    pub combinations: usize,
    /// T, frames per segment and output samples.
    pub frames: usize,
    /// C, channels per combination.
    pub channels: usize,
    /// D, embedding width.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub path_mode: PathMode,
    pub use_spatial_token: bool,
    pub use_temporal_token: bool,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            combinations: 63,
            frames: 300,
            channels: 3,
            dim: 300,
            layers: 6,
            heads: 4,
            ffn_mult: 4,
            path_mode: PathMode::Dual,
            use_spatial_token: true,
            use_temporal_token: true,
            activation: Activation::Gelu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("combinations", self.combinations),
            ("frames", self.frames),
            ("channels", self.channels),
            ("dim", self.dim),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.frames < 2 {
            return Err(Error::Config("frames must be at least 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Errors unless `map` has this configuration's N, C and T.
    pub fn check_map(&self, map: &MstMap) -> Result<()> {
        let expected = (self.combinations, self.channels, self.frames);
        if map.shape() != expected {
            return Err(Error::shape(format!(
                "map shape {:?} does not match model (N, C, T) = {expected:?}",
                map.shape()
            )));
        }
        Ok(())
    }
}

macro_rules! encoder_layer {
    ($($field:ident => $name:literal),* $(,)?) => {
        /// One pre-norm encoder layer. Attention heads are column blocks of
        /// the D×D query, key and value projections.
        #[derive(Debug, Clone, PartialEq)]
        pub struct EncoderLayer<T> {
            $(pub $field: T,)*
        }

        impl<T> EncoderLayer<T> {
            pub const NAMES: &'static [&'static str] = &[$($name),*];

            fn try_map<U, E>(
                &self,
                prefix: &str,
                f: &mut impl FnMut(&str, &T) -> std::result::Result<U, E>,
            ) -> std::result::Result<EncoderLayer<U>, E> {
                Ok(EncoderLayer { $($field: f(&format!("{prefix}.{}", $name), &self.$field)?,)* })
            }

            fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
                $(out.push((format!("{prefix}.{}", $name), &self.$field));)*
            }

            fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
                $(out.push(&mut self.$field);)*
            }
        }
    };
}

encoder_layer! {
    ln1_gain => "ln1.gain",
    ln1_bias => "ln1.bias",
    wq => "attn.q.weight",
    bq => "attn.q.bias",
    wk => "attn.k.weight",
    bk => "attn.k.bias",
    wv => "attn.v.weight",
    bv => "attn.v.bias",
    wo => "attn.out.weight",
    bo => "attn.out.bias",
    ln2_gain => "ln2.gain",
    ln2_bias => "ln2.bias",
    ffn_w1 => "ffn.fc1.weight",
    ffn_b1 => "ffn.fc1.bias",
    ffn_w2 => "ffn.fc2.weight",
    ffn_b2 => "ffn.fc2.bias",
}

/// Every learnable tensor, generic over storage so the same layout holds
/// values, graph handles, gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    /// E_s, (C·T)×D.
    pub spatial_embed: T,
    pub spatial_token: T,
    /// (N+1)×D.
    pub spatial_pos: T,
    pub spatial_layers: Vec<EncoderLayer<T>>,
    /// E_t, (N·C)×D.
    pub temporal_embed: T,
    pub temporal_token: T,
    /// (T+1)×D.
    pub temporal_pos: T,
    pub temporal_layers: Vec<EncoderLayer<T>>,
    /// 2D×2D.
    pub fc1_w: T,
    pub fc1_b: T,
    /// 2D×T.
    pub fc2_w: T,
    pub fc2_b: T,
}

pub type ModelParams = ModelWeights<Tensor>;

impl<T> ModelWeights<T> {
    /// Applies `f` to every tensor in checkpoint order.
    pub fn try_map<U, E>(
        &self,
        mut f: impl FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<ModelWeights<U>, E> {
        let spatial_embed = f("spatial.embed", &self.spatial_embed)?;
        let spatial_token = f("spatial.token", &self.spatial_token)?;
        let spatial_pos = f("spatial.pos", &self.spatial_pos)?;
        let spatial_layers = self
            .spatial_layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.try_map(&format!("spatial.layers.{i}"), &mut f))
            .collect::<std::result::Result<_, E>>()?;
        let temporal_embed = f("temporal.embed", &self.temporal_embed)?;
        let temporal_token = f("temporal.token", &self.temporal_token)?;
        let temporal_pos = f("temporal.pos", &self.temporal_pos)?;
        let temporal_layers = self
            .temporal_layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.try_map(&format!("temporal.layers.{i}"), &mut f))
            .collect::<std::result::Result<_, E>>()?;
        Ok(ModelWeights {
            spatial_embed,
            spatial_token,
            spatial_pos,
            spatial_layers,
            temporal_embed,
            temporal_token,
            temporal_pos,
            temporal_layers,
            fc1_w: f("head.fc1.weight", &self.fc1_w)?,
            fc1_b: f("head.fc1.bias", &self.fc1_b)?,
            fc2_w: f("head.fc2.weight", &self.fc2_w)?,
            fc2_b: f("head.fc2.bias", &self.fc2_b)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ModelWeights<U> {
        self.try_map(|name, t| Ok::<U, std::convert::Infallible>(f(name, t)))
            .unwrap_or_else(|never| match never {})
    }

    /// Named tensors in checkpoint order.
    pub fn visit(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("spatial.embed".to_string(), &self.spatial_embed),
            ("spatial.token".to_string(), &self.spatial_token),
            ("spatial.pos".to_string(), &self.spatial_pos),
        ];
        for (i, l) in self.spatial_layers.iter().enumerate() {
            l.visit(&format!("spatial.layers.{i}"), &mut out);
        }
        out.push(("temporal.embed".to_string(), &self.temporal_embed));
        out.push(("temporal.token".to_string(), &self.temporal_token));
        out.push(("temporal.pos".to_string(), &self.temporal_pos));
        for (i, l) in self.temporal_layers.iter().enumerate() {
            l.visit(&format!("temporal.layers.{i}"), &mut out);
        }
        out.push(("head.fc1.weight".to_string(), &self.fc1_w));
        out.push(("head.fc1.bias".to_string(), &self.fc1_b));
        out.push(("head.fc2.weight".to_string(), &self.fc2_w));
        out.push(("head.fc2.bias".to_string(), &self.fc2_b));
        out
    }

    /// Mutable tensors in checkpoint order.
    pub fn visit_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.spatial_embed, &mut self.spatial_token, &mut self.spatial_pos];
        for l in self.spatial_layers.iter_mut() {
            l.visit_mut(&mut out);
        }
        out.push(&mut self.temporal_embed);
        out.push(&mut self.temporal_token);
        out.push(&mut self.temporal_pos);
        for l in self.temporal_layers.iter_mut() {
            l.visit_mut(&mut out);
        }
        out.extend([&mut self.fc1_w, &mut self.fc1_b, &mut self.fc2_w, &mut self.fc2_b]);
        out
    }
}

/// Tensor shapes for `cfg`.
pub fn param_shapes(cfg: &ModelConfig) -> ModelWeights<Vec<usize>> {
    let (n, t, c, d) = (cfg.combinations, cfg.frames, cfg.channels, cfg.dim);
    let hidden = cfg.ffn_mult * d;
    let layer = || EncoderLayer {
        ln1_gain: vec![d],
        ln1_bias: vec![d],
        wq: vec![d, d],
        bq: vec![d],
        wk: vec![d, d],
        bk: vec![d],
        wv: vec![d, d],
        bv: vec![d],
        wo: vec![d, d],
        bo: vec![d],
        ln2_gain: vec![d],
        ln2_bias: vec![d],
        ffn_w1: vec![d, hidden],
        ffn_b1: vec![hidden],
        ffn_w2: vec![hidden, d],
        ffn_b2: vec![d],
    };
    ModelWeights {
        spatial_embed: vec![c * t, d],
        spatial_token: vec![d],
        spatial_pos: vec![n + 1, d],
        spatial_layers: (0..cfg.layers).map(|_| layer()).collect(),
        temporal_embed: vec![n * c, d],
        temporal_token: vec![d],
        temporal_pos: vec![t + 1, d],
        temporal_layers: (0..cfg.layers).map(|_| layer()).collect(),
        fc1_w: vec![2 * d, 2 * d],
        fc1_b: vec![2 * d],
        fc2_w: vec![2 * d, t],
        fc2_b: vec![t],
    }
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        param_shapes(cfg).map(|_, shape| Tensor::zeros(shape))
    }

    pub fn numel(&self) -> usize {
        self.visit().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.visit().iter().all(|(_, t)| t.is_finite())
    }

    /// All values concatenated in checkpoint order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.visit().iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::shape(format!("{} values for {} parameters", flat.len(), self.numel())));
        }
        let mut offset = 0;
        for t in self.visit_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Errors unless every tensor has the shape `cfg` requires.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let shapes = param_shapes(cfg);
        if shapes.spatial_layers.len() != self.spatial_layers.len()
            || shapes.temporal_layers.len() != self.temporal_layers.len()
        {
            return Err(Error::shape("encoder depth does not match the config"));
        }
        for ((name, t), (_, s)) in self.visit().iter().zip(shapes.visit()) {
            if t.shape() != s.as_slice() {
                return Err(Error::shape(format!("{name}: shape {:?}, expected {s:?}", t.shape())));
            }
        }
        Ok(())
    }
}

/// Weights ~ N(0, 0.02²) drawn in checkpoint order; biases zero; layer-norm
/// gains one.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).map_err(|e| Error::Config(e.to_string()))?;
    Ok(param_shapes(cfg).map(|name, shape| {
        if name.ends_with(".gain") {
            Tensor::full(shape, 1.0)
        } else if name.ends_with(".bias") {
            Tensor::zeros(shape)
        } else {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(shape.clone(), data).expect("shape and data agree")
        }
    }))
}

/// Patch views of one map, scaled to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequences {
    /// X_s, N×(C·T); row i is combination i, channel-major.
    pub spatial: Tensor,
    /// X_t, T×(N·C); row j is frame j, combination-major.
    pub temporal: Tensor,
}

pub fn flatten_views(map: &MstMap) -> Result<PatchSequences> {
    if !map.normalized {
        return Err(Error::domain("model input must be a normalized MSTmap"));
    }
    let (n, c, t) = map.shape();
    let spatial: Vec<f64> = map.values.iter().map(|v| v / 255.0).collect();
    let mut temporal = vec![0.0; t * n * c];
    for k in 0..n {
        for ch in 0..c {
            for j in 0..t {
                temporal[j * n * c + k * c + ch] = map.get(k, ch, j) / 255.0;
            }
        }
    }
    Ok(PatchSequences {
        spatial: Tensor::matrix(n, c * t, spatial)?,
        temporal: Tensor::matrix(t, n * c, temporal)?,
    })
}

/// Rebuilds the map from the spatial view and checks the temporal view agrees.
pub fn unflatten_views(seqs: &PatchSequences, channels: usize, color_space: ColorSpace) -> Result<MstMap> {
    let (n, ct) = seqs.spatial.dims2();
    if channels == 0 || ct % channels != 0 || seqs.temporal.dims2() != (ct / channels, n * channels) {
        return Err(Error::shape("inconsistent patch views"));
    }
    let t = ct / channels;
    let mut map = MstMap::zeros(n, color_space, t);
    if map.channels != channels {
        return Err(Error::shape(format!("{channels} channels for {color_space:?}")));
    }
    map.normalized = true;
    for k in 0..n {
        for ch in 0..channels {
            for j in 0..t {
                let v = seqs.spatial.get2(k, ch * t + j);
                if v != seqs.temporal.get2(j, k * channels + ch) {
                    return Err(Error::shape("spatial and temporal views disagree"));
                }
                let idx = map.index(k, ch, j);
                map.values[idx] = v * 255.0;
            }
        }
    }
    Ok(map)
}

/// Binds every parameter as a graph leaf.
pub fn bind_params(g: &mut Graph, params: &ModelParams) -> ModelWeights<Var> {
    params.map(|_, t| g.leaf(t.clone()))
}

/// Gradients for bound parameters; untouched tensors get zeros.
pub fn collect_grads(g: &Graph, vars: &ModelWeights<Var>) -> ModelParams {
    vars.map(|_, v| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(*v))))
}

/// Side outputs of a forward pass used by tests and diagnostics.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub spatial_layers_run: usize,
    pub temporal_layers_run: usize,
    pub z0_spatial: Option<Var>,
    pub z0_temporal: Option<Var>,
    pub spatial_out: Option<Var>,
    pub temporal_out: Option<Var>,
    pub t_dual: Option<Var>,
    /// Attention probabilities per layer and head.
    pub attention: Vec<Var>,
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// `[token; X·E] + pos`, or `X·E + pos[1..]` without the token.
pub fn patch_embed(g: &mut Graph, x: Var, embed: Var, token: Option<Var>, pos: Var) -> Result<Var> {
    let projected = g.matmul(x, embed)?;
    let (rows, width) = g.value(projected).dims2();
    match token {
        Some(token) => {
            let token = g.reshape(token, &[1, width])?;
            let z = g.concat_rows(&[token, projected])?;
            g.add(z, pos)
        }
        None => {
            let pos = g.slice_rows(pos, 1, rows)?;
            g.add(projected, pos)
        }
    }
}

/// `z' = MHSA(LN z) + z`, `out = FFN(LN z') + z'`.
pub fn encoder_layer(
    g: &mut Graph,
    z: Var,
    layer: &EncoderLayer<Var>,
    heads: usize,
    attention: &mut Vec<Var>,
) -> Result<Var> {
    let (_, d) = g.value(z).dims2();
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(format!("width {d} with {heads} heads")));
    }
    let dh = d / heads;
    let h = g.layer_norm(z, layer.ln1_gain, layer.ln1_bias, LAYER_NORM_EPS)?;
    let q = linear(g, h, layer.wq, layer.bq)?;
    let k = linear(g, h, layer.wk, layer.bk)?;
    let v = linear(g, h, layer.wv, layer.bv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = g.slice_cols(q, head * dh, dh)?;
        let kh = g.slice_cols(k, head * dh, dh)?;
        let vh = g.slice_cols(v, head * dh, dh)?;
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let probs = g.softmax_rows(scores);
        attention.push(probs);
        outs.push(g.matmul(probs, vh)?);
    }
    let joined = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let attn = linear(g, joined, layer.wo, layer.bo)?;
    let z1 = g.add(attn, z)?;
    let h2 = g.layer_norm(z1, layer.ln2_gain, layer.ln2_bias, LAYER_NORM_EPS)?;
    let f = linear(g, h2, layer.ffn_w1, layer.ffn_b1)?;
    let f = g.gelu(f);
    let f = linear(g, f, layer.ffn_w2, layer.ffn_b2)?;
    g.add(f, z1)
}

/// Runs one path and returns its learned token, `1×D`.
fn token_learner(
    g: &mut Graph,
    x: Var,
    embed: Var,
    token: Var,
    pos: Var,
    layers: &[EncoderLayer<Var>],
    use_token: bool,
    heads: usize,
    trace: &mut ForwardTrace,
) -> Result<(Var, Var, usize)> {
    let z0 = patch_embed(g, x, embed, use_token.then_some(token), pos)?;
    let mut z = z0;
    for layer in layers {
        z = encoder_layer(g, z, layer, heads, &mut trace.attention)?;
    }
    let out = if use_token { g.slice_rows(z, 0, 1)? } else { g.mean_rows(z) };
    Ok((z0, out, layers.len()))
}

/// Builds the forward graph and returns the `1×T` predicted waveform.
pub fn forward_graph(
    g: &mut Graph,
    seqs: &PatchSequences,
    w: &ModelWeights<Var>,
    cfg: &ModelConfig,
    trace: &mut ForwardTrace,
) -> Result<Var> {
    let mut spatial = None;
    if cfg.path_mode.uses_spatial() {
        let x = g.leaf(seqs.spatial.clone());
        let (z0, out, run) = token_learner(
            g,
            x,
            w.spatial_embed,
            w.spatial_token,
            w.spatial_pos,
            &w.spatial_layers,
            cfg.use_spatial_token,
            cfg.heads,
            trace,
        )?;
        trace.z0_spatial = Some(z0);
        trace.spatial_out = Some(out);
        trace.spatial_layers_run += run;
        spatial = Some(out);
    }
    let mut temporal = None;
    if cfg.path_mode.uses_temporal() {
        let x = g.leaf(seqs.temporal.clone());
        let (z0, out, run) = token_learner(
            g,
            x,
            w.temporal_embed,
            w.temporal_token,
            w.temporal_pos,
            &w.temporal_layers,
            cfg.use_temporal_token,
            cfg.heads,
            trace,
        )?;
        trace.z0_temporal = Some(z0);
        trace.temporal_out = Some(out);
        trace.temporal_layers_run += run;
        temporal = Some(out);
    }
    let (a, b) = match (spatial, temporal) {
        (Some(s), Some(t)) => (s, t),
        (Some(s), None) => (s, s),
        (None, Some(t)) => (t, t),
        (None, None) => unreachable!("every path mode uses a path"),
    };
    let t_dual = g.concat_cols(&[a, b])?;
    trace.t_dual = Some(t_dual);
    let h = linear(g, t_dual, w.fc1_w, w.fc1_b)?;
    let h = match cfg.activation {
        Activation::Gelu => g.gelu(h),
        Activation::Relu => g.relu(h),
    };
    linear(g, h, w.fc2_w, w.fc2_b)
}

/// Predicted waveform of length T for one normalized map.
pub fn dual_forward(map: &MstMap, params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<f64>> {
    cfg.check_map(map)?;
    let seqs = flatten_views(map)?;
    let mut g = Graph::new();
    let w = bind_params(&mut g, params);
    let out = forward_graph(&mut g, &seqs, &w, cfg, &mut ForwardTrace::default())?;
    let signal = g.value(out).data().to_vec();
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("model output".into()));
    }
    Ok(signal)
}

/// `1 - r(s_pre, s_gt)` in [0, 2]; constant inputs are a degenerate error.
pub fn pearson_loss(s_pre: &[f64], s_gt: &[f64]) -> Result<f64> {
    crate::autodiff::pearson_loss_and_grad(s_pre, s_gt).map(|(loss, _)| loss)
}

/// Loss and parameter gradients for one (map, target) pair.
pub fn loss_and_grad(
    map: &MstMap,
    target: &[f64],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(f64, ModelParams)> {
    cfg.check_map(map)?;
    if target.len() != cfg.frames {
        return Err(Error::shape(format!("target length {} for T = {}", target.len(), cfg.frames)));
    }
    let seqs = flatten_views(map)?;
    let mut g = Graph::new();
    let w = bind_params(&mut g, params);
    let out = forward_graph(&mut g, &seqs, &w, cfg, &mut ForwardTrace::default())?;
    let loss = g.pearson_loss(out, target)?;
    g.backward(loss)?;
    let value = g.value(loss).data()[0];
    Ok((value, collect_grads(&g, &w)))
}

pub fn encode_checkpoint(cfg: &ModelConfig, params: &ModelParams) -> Result<Vec<u8>> {
    params.check_shapes(cfg)?;
    let json = serde_json::to_vec(cfg)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * params.numel());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, t) in params.visit() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ModelParams)> {
    let mut cur = ByteCursor::new(bytes);
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format("missing DTLC magic"));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let len = cur.u32()? as usize;
    let cfg: ModelConfig = serde_json::from_slice(cur.take(len)?)?;
    cfg.validate()?;
    let params = param_shapes(&cfg).try_map(|name, shape| -> Result<Tensor> {
        let name_len = cur.u32()? as usize;
        let found = cur.take(name_len)?;
        if found != name.as_bytes() {
            return Err(Error::format(format!(
                "expected tensor {name}, found {:?}",
                String::from_utf8_lossy(found)
            )));
        }
        let rank = cur.u32()? as usize;
        if rank != shape.len() {
            return Err(Error::format(format!("{name}: rank {rank}, expected {}", shape.len())));
        }
        let dims = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(Error::format(format!("{name}: shape {dims:?}, expected {shape:?}")));
        }
        let data = cur.f32s(shape.iter().product())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{name} in checkpoint")));
        }
        Tensor::new(dims, data)
    })?;
    if !cur.is_empty() {
        return Err(Error::format("trailing bytes after checkpoint"));
    }
    Ok((cfg, params))
}

pub fn write_checkpoint(path: &std::path::Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    crate::io::write_atomic(path, &encode_checkpoint(cfg, params)?)
}

pub fn read_checkpoint(path: &std::path::Path) -> Result<(ModelConfig, ModelParams)> {
    decode_checkpoint(&std::fs::read(path)?).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            combinations: 3,
            frames: 8,
            channels: 3,
            dim: 8,
            layers: 2,
            heads: 2,
            ..ModelConfig::default()
        }
    }

    fn random_map(n: usize, c: usize, t: usize, seed: u64) -> MstMap {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cs = if c == 6 { ColorSpace::RgbYuv } else { ColorSpace::Yuv };
        let mut map = MstMap::zeros(n, cs, t);
        map.values.iter_mut().for_each(|v| *v = rng.random_range(0.0..255.0));
        map.normalized = true;
        map
    }

    #[test]
    fn flatten_tiny_example() {
        let mut map = MstMap::zeros(1, ColorSpace::Rgb, 2);
        map.channels = 1;
        map.values = vec![5.0, 9.0];
        map.normalized = true;
        let v = flatten_views(&map).unwrap();
        assert_eq!(v.spatial.shape(), &[1, 2]);
        assert_eq!(v.spatial.data(), &[5.0 / 255.0, 9.0 / 255.0]);
        assert_eq!(v.temporal.shape(), &[2, 1]);
        assert_eq!(v.temporal.data(), &[5.0 / 255.0, 9.0 / 255.0]);
    }

    #[test]
    fn flatten_requires_normalized() {
        let map = MstMap::zeros(1, ColorSpace::Yuv, 4);
        assert!(flatten_views(&map).is_err());
    }

    #[test]
    fn default_shapes() {
        let cfg = ModelConfig::default();
        let s = param_shapes(&cfg);
        assert_eq!(s.spatial_embed, vec![900, 300]);
        assert_eq!(s.temporal_embed, vec![189, 300]);
        assert_eq!(s.spatial_pos, vec![64, 300]);
        assert_eq!(s.temporal_pos, vec![301, 300]);
        assert_eq!(s.fc1_w, vec![600, 600]);
        assert_eq!(s.fc2_w, vec![600, 300]);
        assert_eq!(s.spatial_layers.len(), 6);
        let map = random_map(63, 3, 300, 0);
        let v = flatten_views(&map).unwrap();
        assert_eq!(v.spatial.shape(), &[63, 900]);
        assert_eq!(v.temporal.shape(), &[300, 189]);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { heads: 7, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { dim: 0, ..ModelConfig::default() }.validate().is_err());
        ModelConfig::default().validate().unwrap();
        assert_eq!("s".parse::<PathMode>().unwrap(), PathMode::SOnly);
        assert_eq!("t".parse::<PathMode>().unwrap(), PathMode::TOnly);
        assert!("x".parse::<PathMode>().is_err());
    }

    #[test]
    fn spatial_embed_zero_input_is_token() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[3, 4]));
        let e = g.leaf(Tensor::full(&[4, 2], 0.7));
        let token = g.leaf(Tensor::vector(vec![1.5, -2.0]));
        let pos = g.leaf(Tensor::zeros(&[4, 2]));
        let z = patch_embed(&mut g, x, e, Some(token), pos).unwrap();
        assert_eq!(g.shape(z), &[4, 2]);
        assert_eq!(&g.value(z).data()[..2], &[1.5, -2.0]);
        assert!(g.value(z).data()[2..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn embed_hand_computed() {
        // One patch [1, 2], E = [[1, 2], [3, 4]], token [0.5, 0.5], pos rows [1, 1], [0, -1].
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let e = g.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let token = g.leaf(Tensor::vector(vec![0.5, 0.5]));
        let pos = g.leaf(Tensor::matrix(2, 2, vec![1.0, 1.0, 0.0, -1.0]).unwrap());
        let z = patch_embed(&mut g, x, e, Some(token), pos).unwrap();
        assert_eq!(g.value(z).data(), &[1.5, 1.5, 7.0, 9.0]);
        let z = patch_embed(&mut g, x, e, None, pos).unwrap();
        assert_eq!(g.value(z).data(), &[7.0, 9.0]);
    }

    fn zero_layer(g: &mut Graph, d: usize) -> EncoderLayer<Var> {
        let shapes = param_shapes(&ModelConfig { dim: d, heads: 1, ..toy_config() });
        shapes.spatial_layers[0].try_map("x", &mut |_, s: &Vec<usize>| Ok::<_, Error>(g.leaf(Tensor::zeros(s)))).unwrap()
    }

    #[test]
    fn zero_weight_layer_is_identity() {
        let mut g = Graph::new();
        let layer = zero_layer(&mut g, 4);
        let z = g.leaf(Tensor::matrix(3, 4, (0..12).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap());
        let mut attn = Vec::new();
        let out = encoder_layer(&mut g, z, &layer, 2, &mut attn).unwrap();
        assert_eq!(g.value(out), g.value(z));
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let cfg = ModelConfig { dim: 4, heads: 2, ..toy_config() };
        let params = init_params(&cfg, 3).unwrap();
        let mut g = Graph::new();
        let w = bind_params(&mut g, &params);
        let layer = &w.spatial_layers[0];
        let z = g.leaf(Tensor::matrix(1, 4, vec![0.3, -0.2, 0.9, 0.1]).unwrap());
        let h = g.layer_norm(z, layer.ln1_gain, layer.ln1_bias, LAYER_NORM_EPS).unwrap();
        let v = linear(&mut g, h, layer.wv, layer.bv).unwrap();
        let attn_out = linear(&mut g, v, layer.wo, layer.bo).unwrap();
        let expected_mid = g.add(attn_out, z).unwrap();
        let mut probs = Vec::new();
        let out = encoder_layer(&mut g, z, layer, 2, &mut probs).unwrap();
        assert!(probs.iter().all(|p| g.value(*p).data() == [1.0]));
        // Rebuild the FFN half from the expected attention output.
        let h2 = g.layer_norm(expected_mid, layer.ln2_gain, layer.ln2_bias, LAYER_NORM_EPS).unwrap();
        let f = linear(&mut g, h2, layer.ffn_w1, layer.ffn_b1).unwrap();
        let f = g.gelu(f);
        let f = linear(&mut g, f, layer.ffn_w2, layer.ffn_b2).unwrap();
        let expected = g.add(f, expected_mid).unwrap();
        for (a, b) in g.value(out).data().iter().zip(g.value(expected).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = toy_config();
        let params = init_params(&cfg, 1).unwrap();
        let map = random_map(3, 3, 8, 2);
        let seqs = flatten_views(&map).unwrap();
        let mut g = Graph::new();
        let w = bind_params(&mut g, &params);
        let mut trace = ForwardTrace::default();
        forward_graph(&mut g, &seqs, &w, &cfg, &mut trace).unwrap();
        assert_eq!(trace.attention.len(), 2 * cfg.layers * cfg.heads);
        for p in &trace.attention {
            let (rows, cols) = g.value(*p).dims2();
            for r in 0..rows {
                let s: f64 = (0..cols).map(|c| g.value(*p).get2(r, c)).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn no_layers_returns_token_plus_pos() {
        let cfg = ModelConfig { layers: 0, ..toy_config() };
        let params = init_params(&cfg, 4).unwrap();
        let seqs = flatten_views(&random_map(3, 3, 8, 5)).unwrap();
        let mut g = Graph::new();
        let w = bind_params(&mut g, &params);
        let mut trace = ForwardTrace::default();
        forward_graph(&mut g, &seqs, &w, &cfg, &mut trace).unwrap();
        for (out, token, pos) in [
            (trace.spatial_out.unwrap(), &params.spatial_token, &params.spatial_pos),
            (trace.temporal_out.unwrap(), &params.temporal_token, &params.temporal_pos),
        ] {
            let got = g.value(out).data();
            assert_eq!(got.len(), cfg.dim);
            for i in 0..cfg.dim {
                assert_eq!(got[i], token.data()[i] + pos.get2(0, i));
            }
        }
    }

    #[test]
    fn tokenless_mode_is_mean_of_rows() {
        let cfg = ModelConfig { use_spatial_token: false, use_temporal_token: false, ..toy_config() };
        let params = init_params(&cfg, 6).unwrap();
        let seqs = flatten_views(&random_map(3, 3, 8, 7)).unwrap();
        let mut g = Graph::new();
        let w = bind_params(&mut g, &params);
        let x = g.leaf(seqs.spatial.clone());
        let mut z = patch_embed(&mut g, x, w.spatial_embed, None, w.spatial_pos).unwrap();
        let mut scratch = Vec::new();
        for layer in &w.spatial_layers {
            z = encoder_layer(&mut g, z, layer, cfg.heads, &mut scratch).unwrap();
        }
        let (rows, cols) = g.value(z).dims2();
        assert_eq!(rows, cfg.combinations);
        let expected: Vec<f64> = (0..cols)
            .map(|c| (0..rows).map(|r| g.value(z).get2(r, c)).sum::<f64>() / rows as f64)
            .collect();
        let mut trace = ForwardTrace::default();
        forward_graph(&mut g, &seqs, &w, &cfg, &mut trace).unwrap();
        let got = g.value(trace.spatial_out.unwrap()).data();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(g.shape(trace.z0_temporal.unwrap()), &[cfg.frames, cfg.dim]);
    }

    #[test]
    fn single_path_modes_skip_other_encoder() {
        let map = random_map(3, 3, 8, 8);
        let seqs = flatten_views(&map).unwrap();
        for (mode, s_run, t_run) in [(PathMode::SOnly, 2, 0), (PathMode::TOnly, 0, 2), (PathMode::Dual, 2, 2)] {
            let cfg = ModelConfig { path_mode: mode, ..toy_config() };
            let params = init_params(&cfg, 9).unwrap();
            let mut g = Graph::new();
            let w = bind_params(&mut g, &params);
            let mut trace = ForwardTrace::default();
            let out = forward_graph(&mut g, &seqs, &w, &cfg, &mut trace).unwrap();
            assert_eq!((trace.spatial_layers_run, trace.temporal_layers_run), (s_run, t_run));
            assert_eq!(g.shape(trace.t_dual.unwrap()), &[1, 2 * cfg.dim]);
            assert_eq!(g.value(out).numel(), cfg.frames);
            if mode != PathMode::Dual {
                let t = g.value(trace.t_dual.unwrap()).data();
                assert_eq!(&t[..cfg.dim], &t[cfg.dim..]);
            }
        }
    }

    #[test]
    fn zero_params_give_zero_signal() {
        let cfg = toy_config();
        let params = ModelParams::zeros(&cfg);
        let out = dual_forward(&random_map(3, 3, 8, 1), &params, &cfg).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn init_is_seeded_and_centred() {
        let cfg = toy_config();
        let a = init_params(&cfg, 11).unwrap();
        assert_eq!(a, init_params(&cfg, 11).unwrap());
        assert_ne!(a, init_params(&cfg, 12).unwrap());
        assert!(a.spatial_layers[0].ln1_gain.data().iter().all(|v| *v == 1.0));
        assert!(a.fc2_b.data().iter().all(|v| *v == 0.0));
        // E_s alone holds 3 * 300 * 112 = 100_800 draws.
        let big = ModelConfig { combinations: 2, frames: 300, channels: 3, dim: 112, layers: 0, heads: 1, ..toy_config() };
        let weights = init_params(&big, 13).unwrap().spatial_embed.into_data();
        assert!(weights.len() >= 100_000);
        let mean = weights.iter().sum::<f64>() / weights.len() as f64;
        assert!(mean.abs() < 3.0 * INIT_STD / (weights.len() as f64).sqrt());
    }

    #[test]
    fn loss_examples() {
        assert!(pearson_loss(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap().abs() < 1e-12);
        assert!((pearson_loss(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(pearson_loss(&[1.0; 4], &[1.0, 2.0, 3.0, 4.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let cfg = toy_config();
        let params = init_params(&cfg, 21).unwrap();
        let bytes = encode_checkpoint(&cfg, &params).unwrap();
        let (cfg2, params2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(cfg, cfg2);
        for ((_, a), (_, b)) in params.visit().iter().zip(params2.visit()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        assert_eq!(bytes, encode_checkpoint(&cfg2, &params2).unwrap());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }

    #[test]
    fn spatial_path_time_permutation_with_embedding_rows() {
        let cfg = ModelConfig { path_mode: PathMode::SOnly, ..toy_config() };
        let params = init_params(&cfg, 31).unwrap();
        let map = random_map(3, 3, 8, 32);
        let perm = [3usize, 0, 7, 1, 6, 2, 5, 4];
        let (n, c, t) = map.shape();
        let mut permuted = map.clone();
        for k in 0..n {
            for ch in 0..c {
                for j in 0..t {
                    let idx = permuted.index(k, ch, j);
                    permuted.values[idx] = map.get(k, ch, perm[j]);
                }
            }
        }
        let mut p2 = params.clone();
        let d = cfg.dim;
        for ch in 0..c {
            for j in 0..t {
                for col in 0..d {
                    p2.spatial_embed.data_mut()[(ch * t + j) * d + col] =
                        params.spatial_embed.get2(ch * t + perm[j], col);
                }
            }
        }
        let token = |map: &MstMap, p: &ModelParams| {
            let seqs = flatten_views(map).unwrap();
            let mut g = Graph::new();
            let w = bind_params(&mut g, p);
            let mut trace = ForwardTrace::default();
            forward_graph(&mut g, &seqs, &w, &cfg, &mut trace).unwrap();
            g.value(trace.spatial_out.unwrap()).data().to_vec()
        };
        let a = token(&map, &params);
        let b = token(&permuted, &p2);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_small() {
        let cfg = ModelConfig { combinations: 3, frames: 6, dim: 4, layers: 1, heads: 2, ..toy_config() };
        let params = init_params(&cfg, 41).unwrap();
        // Larger weights keep the loss away from flat regions.
        let params = params.map(|name, t| {
            let mut t = t.clone();
            if !name.ends_with(".gain") {
                t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = *v * 20.0 + 0.01 * (i % 5) as f64);
            }
            t
        });
        let map = random_map(3, 3, 6, 42);
        let target = [0.0, 1.0, 0.5, -0.7, -1.0, 0.2];
        let (_, grads) = loss_and_grad(&map, &target, &params, &cfg).unwrap();
        let x = params.to_flat();
        let analytic = grads.to_flat();
        let value = |flat: &[f64]| {
            let mut p = params.clone();
            p.assign_flat(flat)?;
            pearson_loss(&dual_forward(&map, &p, &cfg)?, &target)
        };
        let err = crate::autodiff::compare_with_finite_differences(value, &x, &analytic, 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn views_round_trip(n in 1usize..5, t in 1usize..9, six in any::<bool>(), seed in 0u64..1000) {
            let c = if six { 6 } else { 3 };
            let map = random_map(n, c, t, seed);
            let seqs = flatten_views(&map).unwrap();
            let back = unflatten_views(&seqs, c, map.color_space).unwrap();
            for (a, b) in map.values.iter().zip(&back.values) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn loss_affine_invariant(
            pred in proptest::collection::vec(-5.0f64..5.0, 8),
            target in proptest::collection::vec(-5.0f64..5.0, 8),
            a in 0.1f64..10.0,
            b in -10.0f64..10.0,
        ) {
            if let (Ok(l0), Ok(l1)) = (pearson_loss(&pred, &target), pearson_loss(&pred.iter().map(|v| a * v + b).collect::<Vec<_>>(), &target)) {
                prop_assert!((l0 - l1).abs() < 1e-9);
                prop_assert!((0.0..=2.0).contains(&l0));
            }
        }
    }
}
