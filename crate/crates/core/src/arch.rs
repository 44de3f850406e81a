//! Desk-scale student/teacher architectures and their functional forward pass.
//!
//! A network is an [`ArchSpec`]: an ordered list of [`LayerSpec`]s. The forward
//! pass takes its weights as graph inputs ([`WeightVars`]) rather than owning
//! them, so the same code runs a trained teacher and a student whose weights
//! were just produced by the generator (with gradients flowing back into it).
//!
//! Activations move between three layouts:
//! - spatial `[B, C, H, W]` (conv, norm, max-pool)
//! - tokens `[B·P, D]` (attention, token-wise fc, norm)
//! - flat `[B, D]` (fc, norm)
//!
//! Spatial maps become tokens on entering an attention layer (one token per
//! pixel, plus a fixed sinusoidal position code), and become flat on entering
//! an fc layer. Tokens become flat through [`Pool::MeanTokens`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;
use crate::weights::{layer_param_shapes, Batch, Role, WeightSet, WeightVars};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: usize,
    },
    Fc {
        n_input: usize,
        n_output: usize,
    },
    Attention {
        heads: usize,
        model_width: usize,
        key_dim: usize,
        value_dim: usize,
    },
    /// Per-sample normalization with a generated affine `(scale, shift)` per channel.
    Norm {
        channels: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindTag {
    Conv,
    Fc,
    Attention,
    Norm,
}

impl fmt::Display for KindTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KindTag::Conv => "conv",
            KindTag::Fc => "fc",
            KindTag::Attention => "attention",
            KindTag::Norm => "norm",
        })
    }
}

impl LayerKind {
    pub fn tag(&self) -> KindTag {
        match self {
            LayerKind::Conv { .. } => KindTag::Conv,
            LayerKind::Fc { .. } => KindTag::Fc,
            LayerKind::Attention { .. } => KindTag::Attention,
            LayerKind::Norm { .. } => KindTag::Norm,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    None,
    Relu,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "size")]
pub enum Pool {
    #[default]
    None,
    /// Non-overlapping spatial max pooling.
    Max(usize),
    /// Average over tokens, `[B·P, D] -> [B, D]`.
    MeanTokens,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub has_bias: bool,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub pool: Pool,
    /// Adds the layer input to its output (before activation).
    #[serde(default)]
    pub residual: bool,
}

impl LayerSpec {
    pub fn conv(name: &str, k: usize, n_input: usize, n_output: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv {
                kernel_size: k,
                in_channels: n_input,
                out_channels: n_output,
                stride: 1,
                padding: k / 2,
            },
            has_bias: true,
            activation: Activation::None,
            pool: Pool::None,
            residual: false,
        }
    }

    pub fn fc(name: &str, n_input: usize, n_output: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Fc { n_input, n_output },
            has_bias: true,
            activation: Activation::None,
            pool: Pool::None,
            residual: false,
        }
    }

    pub fn norm(name: &str, channels: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Norm { channels },
            has_bias: false,
            activation: Activation::None,
            pool: Pool::None,
            residual: false,
        }
    }

    pub fn attention(
        name: &str,
        heads: usize,
        model_width: usize,
        key_dim: usize,
        value_dim: usize,
    ) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Attention {
                heads,
                model_width,
                key_dim,
                value_dim,
            },
            has_bias: false,
            activation: Activation::None,
            pool: Pool::None,
            residual: true,
        }
    }

    pub fn relu(mut self) -> Self {
        self.activation = Activation::Relu;
        self
    }

    pub fn pooled(mut self, pool: Pool) -> Self {
        self.pool = pool;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.has_bias = false;
        self
    }

    pub fn param_count(&self) -> usize {
        layer_param_shapes(self)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    fn check_local(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::structural(format!("layer `{}`: {msg}", self.name)));
        match &self.kind {
            LayerKind::Conv {
                kernel_size,
                in_channels,
                out_channels,
                stride,
                ..
            } => {
                if *kernel_size == 0 || *in_channels == 0 || *out_channels == 0 || *stride == 0 {
                    return bad("conv sizes must be >= 1");
                }
            }
            LayerKind::Fc { n_input, n_output } => {
                if *n_input == 0 || *n_output == 0 {
                    return bad("fc sizes must be >= 1");
                }
            }
            LayerKind::Attention {
                heads,
                model_width,
                key_dim,
                value_dim,
            } => {
                if *heads == 0 || *model_width == 0 || *key_dim == 0 || *value_dim == 0 {
                    return bad("attention sizes must be >= 1");
                }
                if heads * value_dim != *model_width {
                    return bad("heads * value_dim must equal model_width");
                }
                if self.has_bias {
                    return bad("attention layers carry no bias");
                }
            }
            LayerKind::Norm { channels } => {
                if *channels == 0 {
                    return bad("norm needs >= 1 channel");
                }
                if self.has_bias {
                    return bad("norm layers use scale/shift, not bias");
                }
            }
        }
        Ok(())
    }
}

/// Activation layout between layers (per sample).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Spatial { c: usize, h: usize, w: usize },
    Tokens { p: usize, d: usize },
    Flat { d: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    CnnTiny,
    VitTiny,
    MlpTiny,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn_tiny" => Ok(Preset::CnnTiny),
            "vit_tiny" => Ok(Preset::VitTiny),
            "mlp_tiny" => Ok(Preset::MlpTiny),
            other => Err(Error::config(format!(
                "unknown architecture preset `{other}` (expected cnn_tiny, vit_tiny or mlp_tiny)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::CnnTiny => "cnn_tiny",
            Preset::VitTiny => "vit_tiny",
            Preset::MlpTiny => "mlp_tiny",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub num_classes: usize,
    /// `(channels, height, width)`
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// Builds a preset; `preset` is parsed so unknown names fail as configuration errors.
pub fn build_arch(preset: &str, num_classes: usize, input_shape: [usize; 3]) -> Result<ArchSpec> {
    let preset: Preset = preset.parse()?;
    let [ch, h, w] = input_shape;
    let layers = match preset {
        Preset::CnnTiny => {
            if h % 4 != 0 || w % 4 != 0 {
                return Err(Error::config(
                    "cnn_tiny needs height and width divisible by 4",
                ));
            }
            let (c1, c2, hidden) = (8, 16, 32);
            vec![
                LayerSpec::conv("conv1", 3, ch, c1),
                LayerSpec::norm("norm1", c1).relu().pooled(Pool::Max(2)),
                LayerSpec::conv("conv2", 3, c1, c2),
                LayerSpec::norm("norm2", c2).relu().pooled(Pool::Max(2)),
                LayerSpec::fc("fc1", c2 * (h / 4) * (w / 4), hidden).relu(),
                LayerSpec::fc("fc2", hidden, num_classes),
            ]
        }
        Preset::VitTiny => {
            let patch = if h >= 16 && w >= 16 { 4 } else { 2 };
            if h % patch != 0 || w % patch != 0 {
                return Err(Error::config(format!(
                    "vit_tiny needs sides divisible by {patch}"
                )));
            }
            let (d, heads, hidden) = (16, 2, 32);
            let mut embed = LayerSpec::conv("patch", patch, ch, d);
            if let LayerKind::Conv {
                stride, padding, ..
            } = &mut embed.kind
            {
                *stride = patch;
                *padding = 0;
            }
            vec![
                embed,
                LayerSpec::attention("attn", heads, d, d / heads, d / heads),
                LayerSpec::norm("norm", d).pooled(Pool::MeanTokens),
                LayerSpec::fc("fc1", d, hidden).relu(),
                LayerSpec::fc("fc2", hidden, num_classes),
            ]
        }
        Preset::MlpTiny => {
            let hidden = 32;
            vec![
                LayerSpec::fc("fc1", ch * h * w, hidden).relu(),
                LayerSpec::fc("fc2", hidden, hidden).relu(),
                LayerSpec::fc("fc3", hidden, num_classes),
            ]
        }
    };
    let arch = ArchSpec {
        name: preset.to_string(),
        num_classes,
        input_shape,
        layers,
    };
    arch.validate()?;
    Ok(arch)
}

impl ArchSpec {
    /// Propagates layouts through every layer and checks the composition rules.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::structural("num_classes must be positive"));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::structural("input_shape dims must be positive"));
        }
        if self.layers.is_empty() {
            return Err(Error::structural("architecture has no layers"));
        }
        let mut names = std::collections::BTreeSet::new();
        for l in &self.layers {
            if !names.insert(l.name.as_str()) || l.name.contains('.') {
                return Err(Error::structural(format!(
                    "layer name `{}` is duplicated or contains '.'",
                    l.name
                )));
            }
        }
        let out = self.layouts()?.last().copied().unwrap();
        match (self.layers.last().map(|l| &l.kind), out) {
            (Some(LayerKind::Fc { n_output, .. }), Layout::Flat { d })
                if *n_output == self.num_classes && d == self.num_classes =>
            {
                Ok(())
            }
            _ => Err(Error::structural(format!(
                "last layer must be a flat fc with n_output = num_classes ({})",
                self.num_classes
            ))),
        }
    }

    /// Layout after each layer (index 0 is the input layout).
    pub fn layouts(&self) -> Result<Vec<Layout>> {
        let [ch, h, w] = self.input_shape;
        let mut cur = Layout::Spatial { c: ch, h, w };
        let mut all = vec![cur];
        for l in &self.layers {
            l.check_local()?;
            cur = step_layout(l, cur)?;
            all.push(cur);
        }
        Ok(all)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }
}

fn step_layout(l: &LayerSpec, input: Layout) -> Result<Layout> {
    let err = |msg: String| Err(Error::structural(format!("layer `{}`: {msg}", l.name)));
    let out = match (&l.kind, input) {
        (
            LayerKind::Conv {
                kernel_size: k,
                in_channels,
                out_channels,
                stride,
                padding,
            },
            Layout::Spatial { c, h, w },
        ) => {
            if c != *in_channels {
                return err(format!("expects {in_channels} input channels, gets {c}"));
            }
            if h + 2 * padding < *k || w + 2 * padding < *k {
                return err("kernel larger than padded input".into());
            }
            Layout::Spatial {
                c: *out_channels,
                h: (h + 2 * padding - k) / stride + 1,
                w: (w + 2 * padding - k) / stride + 1,
            }
        }
        (LayerKind::Conv { .. }, other) => {
            return err(format!("conv needs a spatial input, got {other:?}"))
        }
        (LayerKind::Fc { n_input, n_output }, lay) => {
            let (width, tokens) = match lay {
                Layout::Spatial { c, h, w } => (c * h * w, None),
                Layout::Tokens { p, d } => (d, Some(p)),
                Layout::Flat { d } => (d, None),
            };
            if width != *n_input {
                return err(format!("expects {n_input} inputs, gets {width}"));
            }
            match tokens {
                Some(p) => Layout::Tokens { p, d: *n_output },
                None => Layout::Flat { d: *n_output },
            }
        }
        (LayerKind::Attention { model_width, .. }, lay) => {
            let (p, d) = match lay {
                Layout::Spatial { c, h, w } => (h * w, c),
                Layout::Tokens { p, d } => (p, d),
                Layout::Flat { .. } => return err("attention needs spatial or token input".into()),
            };
            if d != *model_width {
                return err(format!(
                    "model width {model_width} but tokens have width {d}"
                ));
            }
            Layout::Tokens { p, d }
        }
        (LayerKind::Norm { channels }, lay) => {
            let width = match lay {
                Layout::Spatial { c, .. } => c,
                Layout::Tokens { d, .. } | Layout::Flat { d } => d,
            };
            if width != *channels {
                return err(format!(
                    "norm over {channels} channels but input has {width}"
                ));
            }
            lay
        }
    };
    if l.residual {
        let in_tok = match input {
            Layout::Spatial { c, h, w } if l.kind.tag() == KindTag::Attention => {
                Layout::Tokens { p: h * w, d: c }
            }
            other => other,
        };
        if in_tok != out {
            return err("residual connection needs matching input and output shapes".into());
        }
    }
    let pooled = match (l.pool, out) {
        (Pool::None, o) => o,
        (Pool::Max(k), Layout::Spatial { c, h, w }) if k >= 1 && h >= k && w >= k => {
            Layout::Spatial {
                c,
                h: h / k,
                w: w / k,
            }
        }
        (Pool::MeanTokens, Layout::Tokens { d, .. }) => Layout::Flat { d },
        (p, o) => return err(format!("pool {p:?} does not apply to {o:?}")),
    };
    Ok(pooled)
}

/// Fixed sinusoidal position code `[p, d]`.
fn position_code<T: Scalar>(p: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(p * d);
    for pos in 0..p {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * freq;
            data.push(c(if i % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::new(vec![p, d], data).unwrap()
}

/// Runs `arch` on `inputs: [B, C, H, W]` with graph-resident weights.
pub fn forward_graph<T: Scalar>(
    g: &Graph<T>,
    arch: &ArchSpec,
    weights: &WeightVars,
    inputs: Var,
) -> Result<Var> {
    let shape = g.shape(inputs);
    let [ch, h, w] = arch.input_shape;
    if shape.len() != 4 || shape[1..] != [ch, h, w] {
        return Err(Error::structural(format!(
            "input batch {shape:?} does not match input_shape {:?}",
            arch.input_shape
        )));
    }
    let b = shape[0];
    let mut x = inputs;
    let mut lay = Layout::Spatial { c: ch, h, w };
    let eps = c::<T>(1e-5);
    for l in &arch.layers {
        let input = x;
        let next = step_layout(l, lay)?;
        let (y, y_lay) = match &l.kind {
            LayerKind::Conv {
                stride, padding, ..
            } => {
                let wv = weights.get(&l.name, Role::Weight)?;
                check_shape(g, wv, &l.name, Role::Weight, l)?;
                let mut y = g.conv2d(x, wv, *stride, *padding);
                if l.has_bias {
                    let bv = weights.get(&l.name, Role::Bias)?;
                    check_shape(g, bv, &l.name, Role::Bias, l)?;
                    y = g.add_channel(y, bv);
                }
                let unpooled = match next {
                    Layout::Spatial { .. } if l.pool == Pool::None => next,
                    _ => {
                        let s = g.shape(y);
                        Layout::Spatial {
                            c: s[1],
                            h: s[2],
                            w: s[3],
                        }
                    }
                };
                (y, unpooled)
            }
            LayerKind::Fc { n_output, .. } => {
                let wv = weights.get(&l.name, Role::Weight)?;
                check_shape(g, wv, &l.name, Role::Weight, l)?;
                let bv = if l.has_bias {
                    let bv = weights.get(&l.name, Role::Bias)?;
                    check_shape(g, bv, &l.name, Role::Bias, l)?;
                    Some(bv)
                } else {
                    None
                };
                let (x2, out_lay) = match lay {
                    Layout::Spatial { c, h, w } => {
                        (g.reshape(x, &[b, c * h * w]), Layout::Flat { d: *n_output })
                    }
                    Layout::Tokens { p, .. } => (x, Layout::Tokens { p, d: *n_output }),
                    Layout::Flat { .. } => (x, Layout::Flat { d: *n_output }),
                };
                (g.linear(x2, wv, bv), out_lay)
            }
            LayerKind::Attention {
                heads,
                model_width,
                key_dim,
                value_dim,
            } => {
                let (p, tokens) = match lay {
                    Layout::Spatial { c, h, w } => {
                        // [B, C, H, W] -> [B·HW, C] plus position code
                        let p = h * w;
                        let t = g.reshape(x, &[b * c, p]);
                        let t = g.transpose(t); // [p, B·C]
                        let t = g.reshape(t, &[p * b, c]);
                        // rows are now ordered (pos, batch); regroup per sample
                        let idx: Vec<usize> = (0..b)
                            .flat_map(|bi| {
                                (0..p).flat_map(move |pi| {
                                    ((pi * b + bi) * c)..((pi * b + bi) * c + c)
                                })
                            })
                            .collect();
                        let t = g.gather(t, std::rc::Rc::new(idx), &[b * p, c]);
                        let pe = position_code::<T>(p, c);
                        let mut pe_all = Vec::with_capacity(b * p * c);
                        for _ in 0..b {
                            pe_all.extend_from_slice(pe.data());
                        }
                        let pe_v = g.constant(Tensor::new(vec![b * p, c], pe_all).unwrap());
                        (p, g.add(t, pe_v))
                    }
                    Layout::Tokens { p, .. } => (p, x),
                    Layout::Flat { .. } => unreachable!("rejected by step_layout"),
                };
                let y = attention(
                    g,
                    weights,
                    l,
                    tokens,
                    b,
                    p,
                    *heads,
                    *model_width,
                    *key_dim,
                    *value_dim,
                )?;
                // residual uses the tokenized input
                let y = if l.residual { g.add(tokens, y) } else { y };
                (y, Layout::Tokens { p, d: *model_width })
            }
            LayerKind::Norm { .. } => {
                let sv = weights.get(&l.name, Role::Scale)?;
                let shv = weights.get(&l.name, Role::Shift)?;
                check_shape(g, sv, &l.name, Role::Scale, l)?;
                check_shape(g, shv, &l.name, Role::Shift, l)?;
                let y = match lay {
                    Layout::Spatial { c, h, w } => {
                        let flat = g.reshape(x, &[b, c * h * w]);
                        let n = g.layer_norm(flat, eps);
                        let n = g.reshape(n, &[b, c, h, w]);
                        let n = g.mul_channel(n, sv);
                        g.add_channel(n, shv)
                    }
                    _ => {
                        let n = g.layer_norm(x, eps);
                        let n = g.mul_row(n, sv);
                        g.add_row(n, shv)
                    }
                };
                (y, lay)
            }
        };
        let mut y = y;
        if l.residual && !matches!(l.kind, LayerKind::Attention { .. }) {
            y = g.add(input, y);
        }
        if l.activation == Activation::Relu {
            y = g.relu(y);
        }
        let (y, y_lay) = match (l.pool, y_lay) {
            (Pool::None, _) => (y, y_lay),
            (Pool::Max(k), _) => (g.max_pool(y, k), next),
            (Pool::MeanTokens, Layout::Tokens { p, d }) => (g.mean_middle(y, b, p, d), next),
            (p, o) => {
                return Err(Error::structural(format!(
                    "layer `{}`: pool {p:?} on {o:?}",
                    l.name
                )))
            }
        };
        debug_assert_eq!(y_lay, next);
        x = y;
        lay = y_lay;
    }
    Ok(x)
}

fn check_shape<T: Scalar>(
    g: &Graph<T>,
    v: Var,
    layer: &str,
    role: Role,
    l: &LayerSpec,
) -> Result<()> {
    let want = layer_param_shapes(l)
        .into_iter()
        .find(|(r, _)| *r == role)
        .map(|(_, s)| s)
        .unwrap_or_default();
    let got = g.shape(v);
    if got != want {
        return Err(Error::structural(format!(
            "layer `{layer}`: {role} has shape {got:?}, expected {want:?}"
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn attention<T: Scalar>(
    g: &Graph<T>,
    weights: &WeightVars,
    l: &LayerSpec,
    tokens: Var,
    b: usize,
    p: usize,
    heads: usize,
    d: usize,
    dk: usize,
    dv: usize,
) -> Result<Var> {
    let wq = weights.get(&l.name, Role::Query)?;
    let wk = weights.get(&l.name, Role::Key)?;
    let wv = weights.get(&l.name, Role::Value)?;
    let wo = weights.get(&l.name, Role::Output)?;
    for (v, r) in [
        (wq, Role::Query),
        (wk, Role::Key),
        (wv, Role::Value),
        (wo, Role::Output),
    ] {
        check_shape(g, v, &l.name, r, l)?;
    }
    let head_mat = |w: Var, i: usize, cols: usize| {
        let flat = g.reshape(w, &[heads, d * cols]);
        let one = g.slice_rows(flat, i, 1);
        g.reshape(one, &[d, cols])
    };
    let inv = c::<T>(1.0 / (dk as f64).sqrt());
    let mut head_outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let q = g.matmul(tokens, head_mat(wq, i, dk));
        let k = g.matmul(tokens, head_mat(wk, i, dk));
        let v = g.matmul(tokens, head_mat(wv, i, dv));
        let mut per_sample = Vec::with_capacity(b);
        for bi in 0..b {
            let qs = g.slice_rows(q, bi * p, p);
            let ks = g.slice_rows(k, bi * p, p);
            let vs = g.slice_rows(v, bi * p, p);
            let scores = g.scale(g.matmul_t(qs, false, ks, true), inv);
            let attn = g.softmax(scores);
            per_sample.push(g.matmul(attn, vs));
        }
        head_outs.push(g.concat_rows(&per_sample));
    }
    let cat = g.concat_cols(&head_outs);
    Ok(g.matmul(cat, wo))
}

/// Logits `[B, num_classes]` for a concrete weight set.
pub fn functional_forward<T: Scalar>(
    arch: &ArchSpec,
    weights: &WeightSet<T>,
    batch: &Batch<T>,
) -> Result<Tensor<T>> {
    if weights.arch().as_ref() != arch {
        weights.validate()?;
    }
    let g = Graph::new();
    let wv = weights.to_constants(&g);
    let x = g.constant(batch.inputs.clone());
    let out = forward_graph(&g, arch, &wv, x)?;
    let logits = g.value(out).clone();
    Ok(logits)
}

/// Exact scalar parameter count of `arch`.
pub fn param_count(arch: &ArchSpec) -> usize {
    arch.param_count()
}
