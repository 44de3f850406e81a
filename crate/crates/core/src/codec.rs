//! Layer weights as token sequences.
//!
//! Every parameterized layer is rewritten as a `[seq_len, d_layer]` token
//! matrix, one token per output unit:
//!
//! | kind      | seq_len          | d_layer                       | token `r`                                  |
//! |-----------|------------------|-------------------------------|--------------------------------------------|
//! | conv      | `n_output`       | `k²·n_input` (+1 with bias)   | `W[r]` flattened `(c, ky, kx)`, then `b[r]` |
//! | fc        | `n_output`       | `n_input` (+1 with bias)      | `W[r, :]`, then `b[r]`                     |
//! | norm      | `channels`       | `2`                           | `(scale[r], shift[r])`                     |
//! | attention | `2d_k + 2d_v`    | `h·d_trans`                   | see below                                  |
//!
//! Attention tokens come in the order Q, K, V, O. Token `j` of the Q block is
//! column `j` of every head's `W^Q` (each `d_trans` long) concatenated over
//! heads; K and V follow the same rule; token `j` of the O block is row
//! `head·d_v + j` of `W^O` concatenated over heads.
//!
//! The mapping is a bijection between tensor scalars and token cells, stored
//! as one index vector per tensor ([`TokenLayout`]), so tokenizing is a
//! scatter and detokenizing is a gather with the same indices, both on plain
//! tensors and inside the autodiff graph.

use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use crate::arch::{ArchSpec, KindTag, LayerKind, LayerSpec};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;
use crate::weights::{layer_param_shapes, ParamKey, Role, WeightSet, WeightVars};

/// Dictionary key: layers with the same kind and token width share an entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerKey {
    pub kind: KindTag,
    pub d_layer: usize,
}

impl fmt::Display for LayerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.kind, self.d_layer)
    }
}

impl std::str::FromStr for LayerKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::structural(format!("malformed layer key `{s}`"));
        let (kind, d) = s.rsplit_once('_').ok_or_else(bad)?;
        let kind = match kind {
            "conv" => KindTag::Conv,
            "fc" => KindTag::Fc,
            "attention" => KindTag::Attention,
            "norm" => KindTag::Norm,
            _ => return Err(bad()),
        };
        Ok(LayerKey {
            kind,
            d_layer: d.parse().map_err(|_| bad())?,
        })
    }
}

/// Scatter/gather indices between a layer's tensors and its token matrix.
#[derive(Clone, Debug)]
pub struct TokenLayout {
    pub seq_len: usize,
    pub d_layer: usize,
    pub key: LayerKey,
    /// `(role, tensor shape, token-cell index of each tensor scalar)`
    pub parts: Vec<(Role, Vec<usize>, Rc<Vec<usize>>)>,
}

impl TokenLayout {
    pub fn for_layer(spec: &LayerSpec) -> Self {
        let bias = usize::from(spec.has_bias);
        let shapes = layer_param_shapes(spec);
        let mut parts = Vec::with_capacity(shapes.len());
        let (seq_len, d_layer) = match &spec.kind {
            LayerKind::Conv {
                kernel_size: k,
                in_channels,
                out_channels,
                ..
            } => {
                let patch = k * k * in_channels;
                let d = patch + bias;
                let w: Vec<usize> = (0..out_channels * patch)
                    .map(|i| (i / patch) * d + i % patch)
                    .collect();
                parts.push((Role::Weight, shapes[0].1.clone(), Rc::new(w)));
                if spec.has_bias {
                    let b = (0..*out_channels).map(|o| o * d + patch).collect();
                    parts.push((Role::Bias, shapes[1].1.clone(), Rc::new(b)));
                }
                (*out_channels, d)
            }
            LayerKind::Fc { n_input, n_output } => {
                let d = n_input + bias;
                let w = (0..n_output * n_input)
                    .map(|i| (i / n_input) * d + i % n_input)
                    .collect();
                parts.push((Role::Weight, shapes[0].1.clone(), Rc::new(w)));
                if spec.has_bias {
                    let b = (0..*n_output).map(|o| o * d + n_input).collect();
                    parts.push((Role::Bias, shapes[1].1.clone(), Rc::new(b)));
                }
                (*n_output, d)
            }
            LayerKind::Norm { channels } => {
                parts.push((
                    Role::Scale,
                    vec![*channels],
                    Rc::new((0..*channels).map(|r| 2 * r).collect()),
                ));
                parts.push((
                    Role::Shift,
                    vec![*channels],
                    Rc::new((0..*channels).map(|r| 2 * r + 1).collect()),
                ));
                (*channels, 2)
            }
            LayerKind::Attention {
                heads,
                model_width: dt,
                key_dim: dk,
                value_dim: dv,
            } => {
                let d = heads * dt;
                // W^Q/W^K/W^V stored [h, d_trans, cols]: element (i, r, j)
                let proj = |cols: usize, token_base: usize| -> Vec<usize> {
                    let mut idx = Vec::with_capacity(heads * dt * cols);
                    for i in 0..*heads {
                        for r in 0..*dt {
                            for j in 0..cols {
                                idx.push((token_base + j) * d + i * dt + r);
                            }
                        }
                    }
                    idx
                };
                parts.push((Role::Query, vec![*heads, *dt, *dk], Rc::new(proj(*dk, 0))));
                parts.push((Role::Key, vec![*heads, *dt, *dk], Rc::new(proj(*dk, *dk))));
                parts.push((
                    Role::Value,
                    vec![*heads, *dt, *dv],
                    Rc::new(proj(*dv, 2 * dk)),
                ));
                // W^O stored [h·d_v, d_trans]: row (i·d_v + j), col r
                let mut o = Vec::with_capacity(heads * dv * dt);
                for i in 0..*heads {
                    for j in 0..*dv {
                        for r in 0..*dt {
                            o.push((2 * dk + dv + j) * d + i * dt + r);
                        }
                    }
                }
                parts.push((Role::Output, vec![heads * dv, *dt], Rc::new(o)));
                (2 * dk + 2 * dv, d)
            }
        };
        TokenLayout {
            seq_len,
            d_layer,
            key: LayerKey {
                kind: spec.kind.tag(),
                d_layer,
            },
            parts,
        }
    }
}

/// One layer's weights as a token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix<T> {
    /// `[seq_len, d_layer]`
    pub tokens: Tensor<T>,
    pub layer_kind: KindTag,
    pub layer_name: String,
}

impl<T: Scalar> TokenMatrix<T> {
    pub fn seq_len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn d_layer(&self) -> usize {
        self.tokens.cols()
    }

    pub fn key(&self) -> LayerKey {
        LayerKey {
            kind: self.layer_kind,
            d_layer: self.d_layer(),
        }
    }
}

/// Rewrites one layer's tensors as its token matrix.
pub fn tokenize_layer<T: Scalar>(
    weights: &WeightSet<T>,
    spec: &LayerSpec,
) -> Result<TokenMatrix<T>> {
    let layout = TokenLayout::for_layer(spec);
    let mut cells = vec![T::zero(); layout.seq_len * layout.d_layer];
    for (role, shape, idx) in &layout.parts {
        let t = weights
            .get(&spec.name, *role)
            .ok_or_else(|| Error::structural(format!("layer `{}`: missing {role}", spec.name)))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::structural(format!(
                "layer `{}`: {role} shape {:?}, expected {:?}",
                spec.name,
                t.shape(),
                shape
            )));
        }
        for (&i, &v) in idx.iter().zip(t.data()) {
            cells[i] = v;
        }
    }
    Ok(TokenMatrix {
        tokens: Tensor::new(vec![layout.seq_len, layout.d_layer], cells)?,
        layer_kind: spec.kind.tag(),
        layer_name: spec.name.clone(),
    })
}

/// Inverse of [`tokenize_layer`]: the layer's `(role, tensor)` pairs.
pub fn detokenize_layer<T: Scalar>(
    tm: &TokenMatrix<T>,
    spec: &LayerSpec,
) -> Result<Vec<(Role, Tensor<T>)>> {
    let layout = TokenLayout::for_layer(spec);
    if tm.tokens.shape() != [layout.seq_len, layout.d_layer] || tm.layer_kind != spec.kind.tag() {
        return Err(Error::structural(format!(
            "layer `{}`: token matrix {:?} ({}) does not fit expected [{}, {}] ({})",
            spec.name,
            tm.tokens.shape(),
            tm.layer_kind,
            layout.seq_len,
            layout.d_layer,
            spec.kind.tag()
        )));
    }
    let src = tm.tokens.data();
    layout
        .parts
        .iter()
        .map(|(role, shape, idx)| {
            let data = idx.iter().map(|&i| src[i]).collect();
            Ok((*role, Tensor::new(shape.clone(), data)?))
        })
        .collect()
}

/// Differentiable detokenization of a `[seq_len, d_layer]` graph node.
pub fn detokenize_graph<T: Scalar>(
    g: &Graph<T>,
    tokens: Var,
    spec: &LayerSpec,
    into: &mut WeightVars,
) -> Result<()> {
    let layout = TokenLayout::for_layer(spec);
    let shape = g.shape(tokens);
    if shape != [layout.seq_len, layout.d_layer] {
        return Err(Error::structural(format!(
            "layer `{}`: generated tokens {shape:?}, expected [{}, {}]",
            spec.name, layout.seq_len, layout.d_layer
        )));
    }
    for (role, tshape, idx) in &layout.parts {
        let v = g.gather(tokens, idx.clone(), tshape);
        into.insert(ParamKey::new(&spec.name, *role), v);
    }
    Ok(())
}

/// Tokenizes every layer of a network in architecture order.
pub fn tokenize_all<T: Scalar>(weights: &WeightSet<T>) -> Result<Vec<TokenMatrix<T>>> {
    weights
        .arch()
        .layers
        .iter()
        .map(|l| tokenize_layer(weights, l))
        .collect()
}

/// Distinct dictionary keys of an architecture, in first-use order.
pub fn layer_keys(arch: &ArchSpec) -> Vec<LayerKey> {
    let mut out: Vec<LayerKey> = Vec::new();
    for l in &arch.layers {
        let k = TokenLayout::for_layer(l).key;
        if !out.contains(&k) {
            out.push(k);
        }
    }
    out
}

/// Per-column standardization statistics per dictionary key.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats<T> {
    pub entries: BTreeMap<LayerKey, ColumnStats<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColumnStats<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

pub const STD_FLOOR: f64 = 1e-6;

impl<T: Scalar> NormStats<T> {
    /// Identity statistics (mean 0, std 1) for every key of `arch`.
    pub fn identity(arch: &ArchSpec) -> Self {
        let entries = layer_keys(arch)
            .into_iter()
            .map(|k| {
                (
                    k,
                    ColumnStats {
                        mean: vec![T::zero(); k.d_layer],
                        std: vec![T::one(); k.d_layer],
                    },
                )
            })
            .collect();
        Self { entries }
    }

    pub fn get(&self, key: &LayerKey) -> Result<&ColumnStats<T>> {
        self.entries.get(key).ok_or_else(|| {
            Error::config(format!("no normalization statistics for layer key {key}"))
        })
    }
}

/// Mean and (population) std of every token column, pooled over all layers
/// sharing a key and over all networks in `pool`.
pub fn fit_norm_stats<T: Scalar>(pool: &[WeightSet<T>]) -> Result<NormStats<T>> {
    let first = pool
        .first()
        .ok_or_else(|| Error::config("cannot fit normalization statistics on an empty pool"))?;
    let arch = first.arch().clone();
    let mut sums: BTreeMap<LayerKey, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for ws in pool {
        if ws.arch() != &arch {
            return Err(Error::structural("teacher pool mixes architectures"));
        }
        for tm in tokenize_all(ws)? {
            let key = tm.key();
            let d = key.d_layer;
            let e = sums
                .entry(key)
                .or_insert_with(|| (vec![0.0; d], vec![0.0; d], 0));
            for r in 0..tm.seq_len() {
                for (j, &v) in tm.tokens.row(r).iter().enumerate() {
                    e.0[j] += v.to_f64_lossy();
                }
            }
            e.2 += tm.seq_len();
        }
    }
    // second pass for the variance keeps it numerically stable
    let means: BTreeMap<LayerKey, Vec<f64>> = sums
        .iter()
        .map(|(k, (s, _, n))| (*k, s.iter().map(|v| v / *n as f64).collect()))
        .collect();
    for ws in pool {
        for tm in tokenize_all(ws)? {
            let key = tm.key();
            let m = &means[&key];
            let e = sums.get_mut(&key).unwrap();
            for r in 0..tm.seq_len() {
                for (j, &v) in tm.tokens.row(r).iter().enumerate() {
                    let d = v.to_f64_lossy() - m[j];
                    e.1[j] += d * d;
                }
            }
        }
    }
    let entries = sums
        .into_iter()
        .map(|(k, (_, sq, n))| {
            let mean = means[&k].iter().map(|&v| c(v)).collect();
            let std = sq
                .iter()
                .map(|&s| c((s / n as f64).sqrt().max(STD_FLOOR)))
                .collect();
            (k, ColumnStats { mean, std })
        })
        .collect();
    Ok(NormStats { entries })
}

/// Standardizes token columns: `(x - mean) / std`.
pub fn apply_norm<T: Scalar>(tm: &TokenMatrix<T>, stats: &NormStats<T>) -> Result<TokenMatrix<T>> {
    let cs = stats.get(&tm.key())?;
    let mut out = tm.clone();
    let d = tm.d_layer();
    for row in out.tokens.data_mut().chunks_mut(d) {
        for ((v, &m), &s) in row.iter_mut().zip(&cs.mean).zip(&cs.std) {
            *v = (*v - m) / s;
        }
    }
    Ok(out)
}

/// Inverse of [`apply_norm`].
pub fn invert_norm<T: Scalar>(tm: &TokenMatrix<T>, stats: &NormStats<T>) -> Result<TokenMatrix<T>> {
    let cs = stats.get(&tm.key())?;
    let mut out = tm.clone();
    let d = tm.d_layer();
    for row in out.tokens.data_mut().chunks_mut(d) {
        for ((v, &m), &s) in row.iter_mut().zip(&cs.mean).zip(&cs.std) {
            *v = *v * s + m;
        }
    }
    Ok(out)
}

/// Graph handles of one dictionary entry: `in_map: d_layer -> d_model`,
/// `out_map: d_model -> d_layer`, both affine.
#[derive(Clone, Copy, Debug)]
pub struct DictVars {
    pub in_w: Var,
    pub in_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

/// `[seq, d_layer] -> [seq, d_model]`
pub fn embed_tokens<T: Scalar>(g: &Graph<T>, tokens: Var, entry: &DictVars) -> Var {
    let y = g.matmul(tokens, entry.in_w);
    g.add_row(y, entry.in_b)
}

/// `[n, d_model] -> [n, d_layer]`
pub fn project_tokens<T: Scalar>(g: &Graph<T>, hidden: Var, entry: &DictVars) -> Var {
    let y = g.matmul(hidden, entry.out_w);
    g.add_row(y, entry.out_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::build_arch;
    use crate::rng;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn random_ws(arch: &ArchSpec, seed: u64) -> WeightSet<f64> {
        let mut ws = WeightSet::init(Arc::new(arch.clone()), &mut rng::stream(seed, "w"));
        // make biases/shifts non-zero too
        let keys: Vec<ParamKey> = ws.iter().map(|(k, _)| k.clone()).collect();
        let mut r = rng::stream(seed, "extra");
        for k in keys {
            let t = ws.tensor(&k).unwrap();
            let n = Tensor::randn(t.shape(), 1.0, &mut r);
            ws.set(k, n).unwrap();
        }
        ws
    }

    #[test]
    fn conv_and_attention_shapes() {
        let conv = LayerSpec::conv("c", 3, 16, 32).without_bias();
        let l = TokenLayout::for_layer(&conv);
        assert_eq!((l.seq_len, l.d_layer), (32, 144));
        let attn = LayerSpec::attention("a", 4, 64, 16, 16);
        let l = TokenLayout::for_layer(&attn);
        assert_eq!((l.seq_len, l.d_layer), (64, 256));
        let fc = LayerSpec::fc("f", 5, 7);
        let l = TokenLayout::for_layer(&fc);
        assert_eq!((l.seq_len, l.d_layer), (7, 6));
    }

    #[test]
    fn layout_is_a_bijection() {
        let specs = [
            LayerSpec::conv("c", 3, 2, 5),
            LayerSpec::fc("f", 4, 3),
            LayerSpec::norm("n", 6),
            LayerSpec::attention("a", 2, 8, 3, 4),
        ];
        for s in &specs {
            let l = TokenLayout::for_layer(s);
            let mut seen = vec![0u8; l.seq_len * l.d_layer];
            for (_, _, idx) in &l.parts {
                for &i in idx.iter() {
                    seen[i] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1), "{}", s.name);
        }
    }

    #[test]
    fn conv_row_is_output_channel_slice() {
        let arch = build_arch("cnn_tiny", 10, [1, 8, 8]).unwrap();
        let ws = random_ws(&arch, 1);
        let spec = arch.layer("conv2").unwrap();
        let tm = tokenize_layer(&ws, spec).unwrap();
        let w = ws.get("conv2", Role::Weight).unwrap();
        let b = ws.get("conv2", Role::Bias).unwrap();
        let patch = w.cols();
        for r in 0..tm.seq_len() {
            assert_eq!(&tm.tokens.row(r)[..patch], w.row(r));
            assert_eq!(tm.tokens.row(r)[patch], b.data()[r]);
        }
    }

    #[test]
    fn round_trip_every_preset() {
        for preset in ["cnn_tiny", "vit_tiny", "mlp_tiny"] {
            let arch = build_arch(preset, 10, [1, 8, 8]).unwrap();
            let ws = random_ws(&arch, 3);
            for l in &arch.layers {
                let tm = tokenize_layer(&ws, l).unwrap();
                for (role, t) in detokenize_layer(&tm, l).unwrap() {
                    assert_eq!(&t, ws.get(&l.name, role).unwrap());
                }
            }
        }
    }

    #[test]
    fn zero_tokens_give_zero_tensors() {
        let spec = LayerSpec::attention("a", 2, 8, 4, 4);
        let tm = TokenMatrix::<f32> {
            tokens: Tensor::zeros(&[16, 16]),
            layer_kind: KindTag::Attention,
            layer_name: "a".into(),
        };
        for (_, t) in detokenize_layer(&tm, &spec).unwrap() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
        let wrong = TokenMatrix::<f32> {
            tokens: Tensor::zeros(&[15, 16]),
            ..tm
        };
        assert!(matches!(
            detokenize_layer(&wrong, &spec),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn norm_stats_hand_computed() {
        // three single-fc "teachers" with known weights
        let arch = ArchSpec {
            name: "t".into(),
            num_classes: 2,
            input_shape: [1, 1, 1],
            layers: vec![LayerSpec::fc("f", 1, 2)],
        };
        let arc = Arc::new(arch);
        let mk = |w: [f64; 2], b: [f64; 2]| {
            let mut ws = WeightSet::<f64>::zeros(arc.clone());
            ws.set(
                ParamKey::new("f", Role::Weight),
                Tensor::new(vec![2, 1], w.to_vec()).unwrap(),
            )
            .unwrap();
            ws.set(
                ParamKey::new("f", Role::Bias),
                Tensor::new(vec![2], b.to_vec()).unwrap(),
            )
            .unwrap();
            ws
        };
        let pool = vec![
            mk([1., 2.], [0., 0.]),
            mk([3., 4.], [0., 6.]),
            mk([5., 6.], [0., 0.]),
        ];
        let st = fit_norm_stats(&pool).unwrap();
        let e = &st.entries[&LayerKey {
            kind: KindTag::Fc,
            d_layer: 2,
        }];
        // weight column: 1..6 -> mean 3.5, var 35/12
        assert!((e.mean[0] - 3.5).abs() < 1e-12);
        assert!((e.std[0] - (35.0f64 / 12.0).sqrt()).abs() < 1e-12);
        // bias column: one 6 among six values -> mean 1, var (25 + 5) / 6 = 5
        assert!((e.mean[1] - 1.0).abs() < 1e-12);
        assert!((e.std[1] - 5.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_pool_floors_std_and_round_trips() {
        let arch = build_arch("mlp_tiny", 3, [1, 2, 2]).unwrap();
        let mut ws = WeightSet::<f64>::zeros(Arc::new(arch.clone()));
        let keys: Vec<ParamKey> = ws.iter().map(|(k, _)| k.clone()).collect();
        for k in keys {
            let s = ws.tensor(&k).unwrap().shape().to_vec();
            ws.set(k, Tensor::full(&s, 0.25)).unwrap();
        }
        let st = fit_norm_stats(&[ws.clone(), ws.clone()]).unwrap();
        assert!(st
            .entries
            .values()
            .all(|e| e.std.iter().all(|&s| s == STD_FLOOR)));
        for tm in tokenize_all(&ws).unwrap() {
            let back = invert_norm(&apply_norm(&tm, &st).unwrap(), &st).unwrap();
            assert!(back.tokens.max_abs_diff(&tm.tokens) <= 1e-6 * 0.25);
        }
        assert!(matches!(fit_norm_stats::<f64>(&[]), Err(Error::Config(_))));
    }

    #[test]
    fn standardized_pool_has_zero_mean() {
        let arch = build_arch("cnn_tiny", 10, [1, 8, 8]).unwrap();
        let pool: Vec<_> = (0..3).map(|s| random_ws(&arch, 10 + s)).collect();
        let st = fit_norm_stats(&pool).unwrap();
        let mut per_key: BTreeMap<LayerKey, (f64, usize)> = BTreeMap::new();
        for ws in &pool {
            for tm in tokenize_all(ws).unwrap() {
                let n = apply_norm(&tm, &st).unwrap();
                let e = per_key.entry(n.key()).or_default();
                e.0 += n.tokens.sum();
                e.1 += n.tokens.numel();
            }
        }
        for (k, (s, n)) in per_key {
            assert!((s / n as f64).abs() < 1e-6, "{k}");
        }
    }

    #[test]
    fn embed_and_project_shapes_and_zero_map() {
        let g = Graph::<f64>::new();
        let toks = g.constant(Tensor::randn(&[32, 144], 1.0, &mut rng::stream(1, "t")));
        let entry = DictVars {
            in_w: g.param(Tensor::zeros(&[144, 128])),
            in_b: g.param(Tensor::zeros(&[128])),
            out_w: g.param(Tensor::randn(&[128, 144], 0.1, &mut rng::stream(2, "o"))),
            out_b: g.param(Tensor::zeros(&[144])),
        };
        let e = embed_tokens(&g, toks, &entry);
        assert_eq!(g.shape(e), vec![32, 128]);
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
        let p = project_tokens(&g, e, &entry);
        assert_eq!(g.shape(p), vec![32, 144]);
    }

    #[test]
    fn project_gradient_matches_finite_differences() {
        let hidden = Tensor::<f64>::randn(&[5, 6], 1.0, &mut rng::stream(3, "h"));
        let out_w = Tensor::<f64>::randn(&[6, 4], 0.5, &mut rng::stream(4, "w"));
        let out_b = Tensor::<f64>::randn(&[4], 0.5, &mut rng::stream(5, "b"));
        let probe = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng::stream(6, "p"));
        let eval = |w: &Tensor<f64>, b: &Tensor<f64>| {
            let g = Graph::new();
            let h = g.constant(hidden.clone());
            let entry = DictVars {
                in_w: g.constant(Tensor::zeros(&[4, 6])),
                in_b: g.constant(Tensor::zeros(&[6])),
                out_w: g.param(w.clone()),
                out_b: g.param(b.clone()),
            };
            let y = project_tokens(&g, h, &entry);
            let pr = g.constant(probe.clone());
            let s = g.mul(y, pr);
            let y2 = g.mul(s, s);
            let l = g.sum(y2);
            (
                g.scalar_value(l),
                g.backward(l).get(entry.out_w).cloned(),
                g.backward(l).get(entry.out_b).cloned(),
            )
        };
        let (_, gw, gb) = eval(&out_w, &out_b);
        let (gw, gb) = (gw.unwrap(), gb.unwrap());
        for i in 0..out_w.numel() {
            let num = crate::autograd::central_difference(&out_w, i, 1e-6, |p| eval(p, &out_b).0);
            let an = gw.data()[i];
            assert!((an - num).abs() / an.abs().max(num.abs()).max(1e-8) <= 1e-4);
        }
        for i in 0..out_b.numel() {
            let num = crate::autograd::central_difference(&out_b, i, 1e-6, |p| eval(&out_w, p).0);
            let an = gb.data()[i];
            assert!((an - num).abs() / an.abs().max(num.abs()).max(1e-8) <= 1e-4);
        }
    }

    #[test]
    fn graph_detokenize_matches_plain() {
        let arch = build_arch("vit_tiny", 10, [1, 8, 8]).unwrap();
        let ws = random_ws(&arch, 7);
        let g = Graph::<f64>::new();
        let mut wv = WeightVars::new();
        for l in &arch.layers {
            let tm = tokenize_layer(&ws, l).unwrap();
            let v = g.param(tm.tokens.clone());
            detokenize_graph(&g, v, l, &mut wv).unwrap();
        }
        let back = wv.snapshot(&g, ws.arch().clone()).unwrap();
        assert_eq!(back, ws);
    }

    #[test]
    fn layer_key_text_round_trip() {
        let k = LayerKey {
            kind: KindTag::Attention,
            d_layer: 256,
        };
        assert_eq!(k.to_string().parse::<LayerKey>().unwrap(), k);
    }

    proptest! {
        #[test]
        fn shape_law_holds(k in 1usize..5, n_in in 1usize..9, n_out in 1usize..9, bias: bool,
                           heads in 1usize..4, dk in 1usize..6, dv in 1usize..6) {
            let mut conv = LayerSpec::conv("c", k, n_in, n_out);
            conv.has_bias = bias;
            let l = TokenLayout::for_layer(&conv);
            prop_assert_eq!((l.seq_len, l.d_layer), (n_out, k * k * n_in + bias as usize));
            let mut fc = LayerSpec::fc("f", n_in, n_out);
            fc.has_bias = bias;
            let l = TokenLayout::for_layer(&fc);
            prop_assert_eq!((l.seq_len, l.d_layer), (n_out, n_in + bias as usize));
            let dt = heads * dv;
            let a = LayerSpec::attention("a", heads, dt, dk, dv);
            let l = TokenLayout::for_layer(&a);
            prop_assert_eq!((l.seq_len, l.d_layer), (2 * dk + 2 * dv, heads * dt));
        }
    }
}
