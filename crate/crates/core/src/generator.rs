//! Transformer weight generator.
//!
//! For each student layer the generator reads the token matrices of all `N`
//! teachers, prefixes a `[cross]` token that carries context from the
//! previous layer, encodes the sequence and reads the student's tokens off
//! the positions of the first teacher block:
//!
//! ```text
//! input : [cross] | t1_0 .. t1_{L-1} | t2_0 .. t2_{L-1} | ... | tN_{L-1}
//! embed :  cross  | in_map(std(t)) + pos[j] + id[slot]
//! output: project(hidden[1..=L]) -> de-standardize -> student tokens
//! carry : hidden[0] -> [cross] of the next layer
//! ```

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::autograd::{Graph, Var};
use crate::codec::{
    apply_norm, detokenize_graph, embed_tokens, layer_keys, project_tokens, tokenize_layer,
    DictVars, LayerKey, NormStats, TokenLayout,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;
use crate::weights::{WeightSet, WeightVars};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub d_model: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Teachers per generation at training time.
    pub n_teachers: usize,
    /// Rows of the model-id table; upper bound on teachers at inference.
    pub max_teachers: usize,
    /// Rows of the position table; upper bound on the composed sequence.
    pub max_seq_len: usize,
    pub cutoff_rate: f64,
    pub seed: u64,
    /// Carry the `[cross]` output to the next layer; off zeroes it.
    pub cross_layer: bool,
    /// Every slot uses model-id row 0.
    pub tie_model_ids: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            num_blocks: 4,
            num_heads: 4,
            ffn_dim: 256,
            n_teachers: 3,
            max_teachers: 8,
            max_seq_len: 0,
            cutoff_rate: 0.1,
            seed: 0,
            cross_layer: true,
            tie_model_ids: false,
        }
    }
}

impl GeneratorConfig {
    /// Smallest position table that fits `max_teachers` blocks of the
    /// longest layer of `arch`.
    pub fn required_seq_len(&self, arch: &ArchSpec) -> usize {
        let longest = arch
            .layers
            .iter()
            .map(|l| TokenLayout::for_layer(l).seq_len)
            .max()
            .unwrap_or(0);
        1 + self.max_teachers * longest
    }

    pub fn validate(&self, arch: &ArchSpec) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads)
        {
            return Err(Error::config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.num_blocks == 0 || self.ffn_dim == 0 {
            return Err(Error::config(
                "generator needs at least one block and a non-empty FFN",
            ));
        }
        if !(0.0..1.0).contains(&self.cutoff_rate) {
            return Err(Error::config(format!(
                "cutoff_rate {} outside [0, 1)",
                self.cutoff_rate
            )));
        }
        if self.n_teachers == 0 || self.n_teachers > self.max_teachers {
            return Err(Error::config(format!(
                "n_teachers {} must be in 1..={}",
                self.n_teachers, self.max_teachers
            )));
        }
        let need = self.required_seq_len(arch);
        if self.max_seq_len < need {
            return Err(Error::Capacity(format!(
                "max_seq_len {} is below the {need} positions `{}` needs for {} teachers",
                self.max_seq_len, arch.name, self.max_teachers
            )));
        }
        Ok(())
    }

    /// Fills `max_seq_len` from the architecture when left at zero.
    pub fn resolved(mut self, arch: &ArchSpec) -> Self {
        if self.max_seq_len == 0 {
            self.max_seq_len = self.required_seq_len(arch);
        }
        self
    }
}

/// Whether cutoff masks are drawn.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossOrigin {
    LearnedInit,
    Carried,
    Zeroed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub layer: String,
    pub input_seq_len: usize,
    pub cross_origin: CrossOrigin,
    pub cross_in: Vec<f64>,
    pub cross_out: Vec<f64>,
    pub out_seq_len: usize,
    pub out_d_layer: usize,
    pub out_mean: f64,
    pub out_std: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub layers: Vec<LayerTrace>,
}

/// Graph handles for every generator parameter.
#[derive(Clone, Debug, Default)]
pub struct GenVars {
    vars: BTreeMap<String, Var>,
}

impl FromIterator<(String, Var)> for GenVars {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

impl GenVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::structural(format!("generator has no parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn dict(&self, key: &LayerKey) -> Result<DictVars> {
        let p = format!("dict.{key}");
        Ok(DictVars {
            in_w: self.get(&format!("{p}.in_w"))?,
            in_b: self.get(&format!("{p}.in_b"))?,
            out_w: self.get(&format!("{p}.out_w"))?,
            out_b: self.get(&format!("{p}.out_b"))?,
        })
    }
}

/// Anything that maps a list of teacher networks to student weights through
/// named trainable tensors.
pub trait WeightGenerator<T: Scalar> {
    fn arch(&self) -> &Arc<ArchSpec>;

    fn params(&self) -> &BTreeMap<String, Tensor<T>>;

    fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>>;

    /// Builds the student's weights as graph nodes; differentiable in `vars`.
    fn generate_graph(
        &self,
        g: &Graph<T>,
        vars: &GenVars,
        teachers: &[WeightSet<T>],
        mode: Mode<'_>,
        trace: Option<&mut GenerationTrace>,
    ) -> Result<WeightVars>;

    /// Registers parameters as leaves (`trainable`) or constants.
    fn register(&self, g: &Graph<T>, trainable: bool) -> GenVars {
        self.params()
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect()
    }

    fn param_count(&self) -> usize {
        self.params().values().map(Tensor::numel).sum()
    }

    /// Plain-tensor generation.
    fn generate_student(
        &self,
        teachers: &[WeightSet<T>],
        mode: Mode<'_>,
    ) -> Result<(WeightSet<T>, GenerationTrace)> {
        let g = Graph::new();
        let vars = self.register(&g, false);
        let mut trace = GenerationTrace::default();
        let wv = self.generate_graph(&g, &vars, teachers, mode, Some(&mut trace))?;
        let ws = wv.snapshot(&g, self.arch().clone())?;
        Ok((ws, trace))
    }
}

/// Names and shapes of every trainable tensor.
pub fn param_shapes(cfg: &GeneratorConfig, arch: &ArchSpec) -> BTreeMap<String, Vec<usize>> {
    let d = cfg.d_model;
    let mut m = BTreeMap::new();
    m.insert("cross_init".to_string(), vec![d]);
    m.insert("pos".to_string(), vec![cfg.max_seq_len, d]);
    m.insert("model_id".to_string(), vec![cfg.max_teachers, d]);
    for key in layer_keys(arch) {
        let p = format!("dict.{key}");
        m.insert(format!("{p}.in_w"), vec![key.d_layer, d]);
        m.insert(format!("{p}.in_b"), vec![d]);
        m.insert(format!("{p}.out_w"), vec![d, key.d_layer]);
        m.insert(format!("{p}.out_b"), vec![key.d_layer]);
    }
    for b in 0..cfg.num_blocks {
        let p = format!("block{b}");
        for w in ["wq", "wk", "wv", "wo"] {
            m.insert(format!("{p}.{w}"), vec![d, d]);
        }
        for bias in [
            "bq", "bk", "bv", "bo", "ln1_g", "ln1_b", "ln2_g", "ln2_b", "ff2_b",
        ] {
            m.insert(format!("{p}.{bias}"), vec![d]);
        }
        m.insert(format!("{p}.ff1_w"), vec![d, cfg.ffn_dim]);
        m.insert(format!("{p}.ff1_b"), vec![cfg.ffn_dim]);
        m.insert(format!("{p}.ff2_w"), vec![cfg.ffn_dim, d]);
    }
    m
}

#[derive(Clone, Debug)]
pub struct Generator<T> {
    config: GeneratorConfig,
    arch: Arc<ArchSpec>,
    params: BTreeMap<String, Tensor<T>>,
    norm: NormStats<T>,
}

impl<T: Scalar> Generator<T> {
    /// Fresh parameters drawn from `rng`.
    pub fn new(
        config: GeneratorConfig,
        arch: Arc<ArchSpec>,
        norm: NormStats<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let config = config.resolved(&arch);
        config.validate(&arch)?;
        let d = config.d_model as f64;
        let mut params = BTreeMap::new();
        for (name, shape) in param_shapes(&config, &arch) {
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            let t = match leaf {
                "cross_init" | "pos" | "model_id" => Tensor::randn(&shape, 0.1, rng),
                "in_w" => Tensor::randn(&shape, 1.0 / (shape[0] as f64).sqrt(), rng),
                "out_w" => Tensor::randn(&shape, 1.0 / d.sqrt(), rng),
                "wq" | "wk" | "wv" | "wo" => Tensor::randn(&shape, 1.0 / d.sqrt(), rng),
                "ff1_w" => Tensor::randn(&shape, (2.0 / d).sqrt(), rng),
                "ff2_w" => Tensor::randn(&shape, 1.0 / (shape[0] as f64).sqrt(), rng),
                "ln1_g" | "ln2_g" => Tensor::full(&shape, T::one()),
                _ => Tensor::zeros(&shape),
            };
            params.insert(name, t);
        }
        Self::from_parts(config, arch, params, norm)
    }

    /// Reassembles a generator from stored tensors, checking every shape.
    pub fn from_parts(
        config: GeneratorConfig,
        arch: Arc<ArchSpec>,
        params: BTreeMap<String, Tensor<T>>,
        norm: NormStats<T>,
    ) -> Result<Self> {
        config.validate(&arch)?;
        let shapes = param_shapes(&config, &arch);
        if shapes.len() != params.len() {
            return Err(Error::structural(format!(
                "generator expects {} tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (name, shape) in &shapes {
            let t = params
                .get(name)
                .ok_or_else(|| Error::structural(format!("generator tensor `{name}` missing")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::structural(format!(
                    "generator tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        for key in layer_keys(&arch) {
            let cs = norm.get(&key)?;
            if cs.mean.len() != key.d_layer || cs.std.len() != key.d_layer {
                return Err(Error::structural(format!(
                    "normalization statistics for {key} have wrong width"
                )));
            }
        }
        Ok(Self {
            config,
            arch,
            params,
            norm,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut GeneratorConfig {
        &mut self.config
    }

    pub fn norm_stats(&self) -> &NormStats<T> {
        &self.norm
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }

    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|(k, t)| (k.clone(), t.cast()))
                .collect(),
            norm: NormStats {
                entries: self
                    .norm
                    .entries
                    .iter()
                    .map(|(k, cs)| {
                        (
                            *k,
                            crate::codec::ColumnStats {
                                mean: cs.mean.iter().map(|v| c(v.to_f64_lossy())).collect(),
                                std: cs.std.iter().map(|v| c(v.to_f64_lossy())).collect(),
                            },
                        )
                    })
                    .collect(),
            },
        }
    }

    fn check_teachers(&self, teachers: &[WeightSet<T>]) -> Result<()> {
        if teachers.is_empty() {
            return Err(Error::config("generation needs at least one teacher"));
        }
        if teachers.len() > self.config.max_teachers {
            return Err(Error::Capacity(format!(
                "{} teachers exceed the model-id table of {}",
                teachers.len(),
                self.config.max_teachers
            )));
        }
        for t in teachers {
            if **t.arch() != *self.arch {
                return Err(Error::structural(format!(
                    "teacher architecture `{}` does not match generator architecture `{}`",
                    t.arch().name,
                    self.arch.name
                )));
            }
        }
        Ok(())
    }
}

impl<T: Scalar> WeightGenerator<T> for Generator<T> {
    fn arch(&self) -> &Arc<ArchSpec> {
        &self.arch
    }

    fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.params
    }

    fn generate_graph(
        &self,
        g: &Graph<T>,
        vars: &GenVars,
        teachers: &[WeightSet<T>],
        mut mode: Mode<'_>,
        mut trace: Option<&mut GenerationTrace>,
    ) -> Result<WeightVars> {
        self.check_teachers(teachers)?;
        let d = self.config.d_model;
        let mut cross = g.reshape(vars.get("cross_init")?, &[1, d]);
        let mut origin = CrossOrigin::LearnedInit;
        let mut out = WeightVars::new();
        for (li, spec) in self.arch.layers.iter().enumerate() {
            if li > 0 && !self.config.cross_layer {
                cross = g.constant(Tensor::zeros(&[1, d]));
                origin = CrossOrigin::Zeroed;
            }
            let key = TokenLayout::for_layer(spec).key;
            let tokens = teachers
                .iter()
                .map(|t| {
                    let tm = apply_norm(&tokenize_layer(t, spec)?, &self.norm)?;
                    Ok(g.constant(tm.tokens))
                })
                .collect::<Result<Vec<_>>>()?;
            let dict = vars.dict(&key)?;
            let mut seq = compose_input(g, vars, &self.config, &tokens, cross, &dict)?;
            if let Mode::Train(rng) = &mut mode {
                seq = apply_cutoff(g, seq, self.config.cutoff_rate, rng);
            }
            let hidden = encode(g, vars, &self.config, seq)?;
            let seq_len = g.shape(tokens[0])[0];
            let std_out = project_tokens(g, g.slice_rows(hidden, 1, seq_len), &dict);
            let cs = self.norm.get(&key)?;
            let sd = g.constant(Tensor::new(vec![key.d_layer], cs.std.clone())?);
            let mu = g.constant(Tensor::new(vec![key.d_layer], cs.mean.clone())?);
            let student = g.add_row(g.mul_row(std_out, sd), mu);
            let next = g.slice_rows(hidden, 0, 1);
            if let Some(tr) = trace.as_deref_mut() {
                let v = g.value(student);
                let n = v.numel() as f64;
                let mean = v.data().iter().map(|x| x.to_f64_lossy()).sum::<f64>() / n;
                let var = v
                    .data()
                    .iter()
                    .map(|x| (x.to_f64_lossy() - mean).powi(2))
                    .sum::<f64>()
                    / n;
                let vec_of = |x: Var| g.value(x).data().iter().map(|v| v.to_f64_lossy()).collect();
                tr.layers.push(LayerTrace {
                    layer: spec.name.clone(),
                    input_seq_len: 1 + teachers.len() * seq_len,
                    cross_origin: origin,
                    cross_in: vec_of(cross),
                    cross_out: vec_of(next),
                    out_seq_len: seq_len,
                    out_d_layer: key.d_layer,
                    out_mean: mean,
                    out_std: var.sqrt(),
                });
            }
            detokenize_graph(g, student, spec, &mut out)?;
            cross = next;
            origin = CrossOrigin::Carried;
        }
        Ok(out)
    }
}

/// `[cross] | block_1 | ... | block_N` with each block
/// `in_map(tokens) + pos[0..L] + model_id[slot]`.
pub fn compose_input<T: Scalar>(
    g: &Graph<T>,
    vars: &GenVars,
    cfg: &GeneratorConfig,
    std_tokens: &[Var],
    cross: Var,
    dict: &DictVars,
) -> Result<Var> {
    let first = g.shape(
        *std_tokens
            .first()
            .ok_or_else(|| Error::config("no teacher tokens"))?,
    );
    if std_tokens.iter().any(|&t| g.shape(t) != first) {
        return Err(Error::structural("teacher token matrices differ in shape"));
    }
    let seq_len = first[0];
    let total = 1 + std_tokens.len() * seq_len;
    if total > cfg.max_seq_len {
        return Err(Error::Capacity(format!(
            "sequence of {total} positions exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    if std_tokens.len() > cfg.max_teachers {
        return Err(Error::Capacity(format!(
            "{} teachers exceed the model-id table of {}",
            std_tokens.len(),
            cfg.max_teachers
        )));
    }
    let pos = g.slice_rows(vars.get("pos")?, 0, seq_len);
    let ids = vars.get("model_id")?;
    let mut parts = vec![cross];
    for (slot, &t) in std_tokens.iter().enumerate() {
        let id_row = if cfg.tie_model_ids { 0 } else { slot };
        let id = g.gather_rows(ids, &[id_row]);
        let e = g.add(embed_tokens(g, t, dict), pos);
        parts.push(g.add_row(e, id));
    }
    Ok(g.concat_rows(&parts))
}

/// Zeroes `⌊rate·d_model⌋` random feature columns at every position.
pub fn apply_cutoff<T: Scalar>(g: &Graph<T>, seq: Var, rate: f64, rng: &mut Rng) -> Var {
    let d = g.shape(seq)[1];
    let k = (rate * d as f64).floor() as usize;
    if k == 0 {
        return seq;
    }
    let mut mask = vec![T::one(); d];
    for i in sample(rng, d, k) {
        mask[i] = T::zero();
    }
    let m = g.constant(Tensor::new(vec![d], mask).expect("mask"));
    g.mul_row(seq, m)
}

/// Post-norm Transformer encoder stack.
pub fn encode<T: Scalar>(
    g: &Graph<T>,
    vars: &GenVars,
    cfg: &GeneratorConfig,
    seq: Var,
) -> Result<Var> {
    let shape = g.shape(seq);
    if shape.len() != 2 || shape[1] != cfg.d_model {
        return Err(Error::structural(format!(
            "encoder input {shape:?} is not [n, {}]",
            cfg.d_model
        )));
    }
    if shape[0] > cfg.max_seq_len {
        return Err(Error::Capacity(format!(
            "sequence of {} positions exceeds max_seq_len {}",
            shape[0], cfg.max_seq_len
        )));
    }
    let eps: T = c(LN_EPS);
    let heads = cfg.num_heads;
    let dh = cfg.d_model / heads;
    let inv = c::<T>(1.0 / (dh as f64).sqrt());
    let mut x = seq;
    for b in 0..cfg.num_blocks {
        let p = |n: &str| vars.get(&format!("block{b}.{n}"));
        let lin = |x: Var, w: &str, bias: &str| -> Result<Var> {
            Ok(g.add_row(g.matmul(x, p(w)?), p(bias)?))
        };
        let q = lin(x, "wq", "bq")?;
        let k = lin(x, "wk", "bk")?;
        let v = lin(x, "wv", "bv")?;
        let mut heads_out = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.scale(g.matmul_t(qh, false, kh, true), inv);
            heads_out.push(g.matmul(g.softmax(scores), vh));
        }
        let attn = lin(g.concat_cols(&heads_out), "wo", "bo")?;
        let x1 = g.add_row(
            g.mul_row(g.layer_norm(g.add(x, attn), eps), p("ln1_g")?),
            p("ln1_b")?,
        );
        let hdn = g.relu(lin(x1, "ff1_w", "ff1_b")?);
        let ff = lin(hdn, "ff2_w", "ff2_b")?;
        x = g.add_row(
            g.mul_row(g.layer_norm(g.add(x1, ff), eps), p("ln2_g")?),
            p("ln2_b")?,
        );
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_arch, functional_forward};
    use crate::autograd::central_difference;
    use crate::codec::fit_norm_stats;
    use crate::rng;
    use crate::weights::Batch;

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig {
            d_model: 16,
            num_blocks: 1,
            num_heads: 2,
            ffn_dim: 24,
            n_teachers: 3,
            max_teachers: 4,
            cutoff_rate: 0.25,
            ..Default::default()
        }
    }

    fn setup(preset: &str, cfg: GeneratorConfig) -> (Generator<f64>, Vec<WeightSet<f64>>) {
        let arch = Arc::new(build_arch(preset, 10, [1, 8, 8]).unwrap());
        let teachers: Vec<_> = (0..3)
            .map(|i| WeightSet::init(arch.clone(), &mut rng::substream(1, "t", i)))
            .collect();
        let norm = fit_norm_stats(&teachers).unwrap();
        let gen = Generator::new(cfg, arch, norm, &mut rng::stream(2, "gen")).unwrap();
        (gen, teachers)
    }

    #[test]
    fn composed_sequence_shape() {
        let cfg = GeneratorConfig {
            d_model: 128,
            ..small_cfg()
        };
        let g = Graph::<f64>::new();
        let arch = build_arch("cnn_tiny", 10, [1, 8, 8]).unwrap();
        let cfg = GeneratorConfig {
            max_seq_len: 200,
            ..cfg
        };
        let mut r = rng::stream(0, "p");
        let mut vars = GenVars::default();
        for (n, s) in param_shapes(&cfg, &arch) {
            vars.vars.insert(n, g.param(Tensor::randn(&s, 0.1, &mut r)));
        }
        let dict = DictVars {
            in_w: g.param(Tensor::randn(&[144, 128], 0.1, &mut r)),
            in_b: g.param(Tensor::zeros(&[128])),
            out_w: g.param(Tensor::zeros(&[128, 144])),
            out_b: g.param(Tensor::zeros(&[144])),
        };
        let toks: Vec<_> = (0..3)
            .map(|_| g.constant(Tensor::randn(&[32, 144], 1.0, &mut r)))
            .collect();
        let cross = g.constant(Tensor::zeros(&[1, 128]));
        let seq = compose_input(&g, &vars, &cfg, &toks, cross, &dict).unwrap();
        assert_eq!(g.shape(seq), vec![97, 128]);

        let bad = vec![toks[0], g.constant(Tensor::zeros(&[31, 144]))];
        assert!(matches!(
            compose_input(&g, &vars, &cfg, &bad, cross, &dict),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn swapping_teachers_only_moves_model_ids() {
        let (gen, teachers) = setup("mlp_tiny", small_cfg());
        let g = Graph::new();
        let vars = gen.register(&g, false);
        let spec = &gen.arch().layers[0];
        let key = TokenLayout::for_layer(spec).key;
        let dict = vars.dict(&key).unwrap();
        let toks: Vec<Var> = teachers
            .iter()
            .map(|t| {
                g.constant(
                    apply_norm(&tokenize_layer(t, spec).unwrap(), gen.norm_stats())
                        .unwrap()
                        .tokens,
                )
            })
            .collect();
        let cross = g.reshape(vars.get("cross_init").unwrap(), &[1, 16]);
        let a = compose_input(&g, &vars, gen.config(), &toks, cross, &dict).unwrap();
        let b = compose_input(
            &g,
            &vars,
            gen.config(),
            &[toks[1], toks[0], toks[2]],
            cross,
            &dict,
        )
        .unwrap();
        let (a, b) = (g.value(a).clone(), g.value(b).clone());
        let l = g.shape(toks[0])[0];
        let ids = &gen.params()["model_id"];
        let d = 16;
        // block 0 of `b` = block 1 of `a` - id1 + id0, and vice versa; [cross] and block 2 unchanged
        for r in 0..l {
            for j in 0..d {
                let a0 = a.row(1 + r)[j];
                let a1 = a.row(1 + l + r)[j];
                let b0 = b.row(1 + r)[j];
                let b1 = b.row(1 + l + r)[j];
                let (i0, i1) = (ids.row(0)[j], ids.row(1)[j]);
                assert!((b0 - (a1 - i1 + i0)).abs() < 1e-12);
                assert!((b1 - (a0 - i0 + i1)).abs() < 1e-12);
            }
        }
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(&a.data()[(1 + 2 * l) * d..], &b.data()[(1 + 2 * l) * d..]);
    }

    #[test]
    fn identical_teachers_with_tied_ids_embed_identically() {
        let cfg = GeneratorConfig {
            tie_model_ids: true,
            ..small_cfg()
        };
        let (gen, teachers) = setup("mlp_tiny", cfg);
        let g = Graph::new();
        let vars = gen.register(&g, false);
        let spec = &gen.arch().layers[1];
        let tok = g.constant(
            apply_norm(
                &tokenize_layer(&teachers[0], spec).unwrap(),
                gen.norm_stats(),
            )
            .unwrap()
            .tokens,
        );
        let dict = vars.dict(&TokenLayout::for_layer(spec).key).unwrap();
        let cross = g.reshape(vars.get("cross_init").unwrap(), &[1, 16]);
        let s = compose_input(&g, &vars, gen.config(), &[tok, tok, tok], cross, &dict).unwrap();
        let v = g.value(s);
        let l = 32 * 16;
        let body = &v.data()[16..];
        assert_eq!(&body[..l], &body[l..2 * l]);
        assert_eq!(&body[..l], &body[2 * l..]);
    }

    #[test]
    fn cutoff_counts_and_identity() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[5, 128], 1.0));
        let mut r = rng::stream(0, "cut");
        assert_eq!(apply_cutoff(&g, x, 0.0, &mut r), x);
        let y = apply_cutoff(&g, x, 0.5, &mut r);
        let v = g.value(y);
        let zero_cols: Vec<usize> = (0..128).filter(|&j| v.row(0)[j] == 0.0).collect();
        assert_eq!(zero_cols.len(), 64);
        for row in 0..5 {
            for j in 0..128 {
                assert_eq!(v.row(row)[j] == 0.0, zero_cols.contains(&j));
            }
        }
    }

    #[test]
    fn distinct_streams_cut_distinct_dims() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 64], 1.0));
        let mut same = 0;
        for t in 0..100 {
            let a = apply_cutoff(&g, x, 0.25, &mut rng::substream(t, "a", 0));
            let b = apply_cutoff(&g, x, 0.25, &mut rng::substream(t, "b", 0));
            if g.value(a).data() == g.value(b).data() {
                same += 1;
            }
        }
        assert_eq!(same, 0);
    }

    #[test]
    fn zeroed_blocks_reduce_to_double_layer_norm() {
        let cfg = GeneratorConfig {
            max_seq_len: 10,
            ..small_cfg()
        };
        let arch = build_arch("mlp_tiny", 10, [1, 2, 2]).unwrap();
        let g = Graph::<f64>::new();
        let mut vars = GenVars::default();
        let mut r = rng::stream(4, "ln");
        let mut gam = Vec::new();
        for (n, s) in param_shapes(&cfg, &arch) {
            let t = if n.ends_with("_g") || n.ends_with("ln1_b") || n.ends_with("ln2_b") {
                let t = Tensor::randn(&s, 1.0, &mut r);
                gam.push((n.clone(), t.clone()));
                t
            } else {
                Tensor::zeros(&s)
            };
            vars.vars.insert(n, g.constant(t));
        }
        let x = Tensor::<f64>::randn(&[7, 16], 2.0, &mut r);
        let y = encode(&g, &vars, &cfg, g.constant(x.clone())).unwrap();
        let get = |n: &str| gam.iter().find(|(k, _)| k == n).unwrap().1.clone();
        let ln = |row: &[f64], gm: &Tensor<f64>, bt: &Tensor<f64>| -> Vec<f64> {
            let m = row.iter().sum::<f64>() / row.len() as f64;
            let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / row.len() as f64;
            row.iter()
                .enumerate()
                .map(|(j, a)| (a - m) / (v + LN_EPS).sqrt() * gm.data()[j] + bt.data()[j])
                .collect()
        };
        for i in 0..7 {
            let h1 = ln(x.row(i), &get("block0.ln1_g"), &get("block0.ln1_b"));
            let h2 = ln(&h1, &get("block0.ln2_g"), &get("block0.ln2_b"));
            for (a, b) in h2.iter().zip(g.value(y).row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_rejects_overlong_sequences() {
        let (gen, _) = setup("mlp_tiny", small_cfg());
        let g = Graph::new();
        let vars = gen.register(&g, false);
        let n = gen.config().max_seq_len + 1;
        let x = g.constant(Tensor::zeros(&[n, 16]));
        assert!(matches!(
            encode(&g, &vars, gen.config(), x),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn student_is_valid_and_eval_is_deterministic() {
        for preset in ["cnn_tiny", "vit_tiny", "mlp_tiny"] {
            let (gen, teachers) = setup(preset, small_cfg());
            let (a, tr) = gen.generate_student(&teachers, Mode::Eval).unwrap();
            let (b, _) = gen.generate_student(&teachers, Mode::Eval).unwrap();
            a.validate().unwrap();
            assert_eq!(a, b);
            assert_eq!(tr.layers.len(), gen.arch().layers.len());
            for (lt, spec) in tr.layers.iter().zip(&gen.arch().layers) {
                let lay = TokenLayout::for_layer(spec);
                assert_eq!(lt.layer, spec.name);
                assert_eq!((lt.out_seq_len, lt.out_d_layer), (lay.seq_len, lay.d_layer));
                assert_eq!(lt.input_seq_len, 1 + 3 * lay.seq_len);
            }
            assert_eq!(tr.layers[0].cross_origin, CrossOrigin::LearnedInit);
            assert_eq!(tr.layers[1].cross_origin, CrossOrigin::Carried);
        }
    }

    #[test]
    fn training_mode_masks_vary_with_stream() {
        let (gen, teachers) = setup("mlp_tiny", small_cfg());
        let (a, _) = gen
            .generate_student(&teachers, Mode::Train(&mut rng::stream(1, "c")))
            .unwrap();
        let (b, _) = gen
            .generate_student(&teachers, Mode::Train(&mut rng::stream(2, "c")))
            .unwrap();
        let (e, _) = gen.generate_student(&teachers, Mode::Eval).unwrap();
        assert_ne!(a, b);
        assert_ne!(a, e);
    }

    #[test]
    fn mismatched_teacher_arch_is_structural() {
        let (gen, mut teachers) = setup("mlp_tiny", small_cfg());
        let other = Arc::new(build_arch("mlp_tiny", 5, [1, 8, 8]).unwrap());
        teachers[1] = WeightSet::init(other, &mut rng::stream(0, "o"));
        assert!(matches!(
            gen.generate_student(&teachers, Mode::Eval),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn rotating_identical_teachers_with_tied_ids_is_exact() {
        let cfg = GeneratorConfig {
            tie_model_ids: true,
            ..small_cfg()
        };
        let (gen, teachers) = setup("cnn_tiny", cfg);
        let same = vec![teachers[0].clone(); 3];
        let mut rot = same.clone();
        rot.rotate_left(1);
        let (a, _) = gen.generate_student(&same, Mode::Eval).unwrap();
        let (b, _) = gen.generate_student(&rot, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zeroing_cross_state_changes_later_layers() {
        let (gen, teachers) = setup("cnn_tiny", small_cfg());
        let mut cut = gen.clone();
        cut.config_mut().cross_layer = false;
        let (a, ta) = gen.generate_student(&teachers, Mode::Eval).unwrap();
        let (b, tb) = cut.generate_student(&teachers, Mode::Eval).unwrap();
        let first = &gen.arch().layers[0].name;
        let last = &gen.arch().layers.last().unwrap().name;
        use crate::weights::Role;
        assert_eq!(a.get(first, Role::Weight), b.get(first, Role::Weight));
        assert_ne!(a.get(last, Role::Weight), b.get(last, Role::Weight));
        assert_eq!(tb.layers[1].cross_origin, CrossOrigin::Zeroed);
        assert!(tb.layers[1].cross_in.iter().all(|&v| v == 0.0));
        assert_eq!(ta.layers[1].cross_in, ta.layers[0].cross_out);
    }

    #[test]
    fn cross_state_perturbation_moves_output() {
        let (gen, teachers) = setup("mlp_tiny", small_cfg());
        let base = gen.params()["cross_init"].clone();
        let out = |ci: &Tensor<f64>| {
            let mut g2 = gen.clone();
            g2.params_mut().insert("cross_init".into(), ci.clone());
            let (ws, _) = g2.generate_student(&teachers, Mode::Eval).unwrap();
            ws.get("fc1", crate::weights::Role::Weight).unwrap().data()[0]
        };
        let dj = central_difference(&base, 3, 1e-5, |p| out(p));
        assert!(dj.abs() > 1e-8, "{dj}");
    }

    #[test]
    fn classification_gradient_matches_finite_differences() {
        let (gen, teachers) = setup("mlp_tiny", small_cfg());
        let arch = gen.arch().clone();
        let mut r = rng::stream(9, "b");
        let batch =
            Batch::new(Tensor::randn(&[4, 1, 8, 8], 1.0, &mut r), vec![0, 3, 7, 1]).unwrap();
        let loss_of = |gen: &Generator<f64>| -> f64 {
            let (ws, _) = gen.generate_student(&teachers, Mode::Eval).unwrap();
            let logits = functional_forward(&arch, &ws, &batch).unwrap();
            let g = Graph::new();
            let l = g.cross_entropy(g.constant(logits), &batch.labels);
            g.scalar_value(l)
        };
        let g = Graph::new();
        let vars = gen.register(&g, true);
        let wv = gen
            .generate_graph(&g, &vars, &teachers, Mode::Eval, None)
            .unwrap();
        let x = g.constant(batch.inputs.clone());
        let logits = crate::arch::forward_graph(&g, &arch, &wv, x).unwrap();
        let loss = g.cross_entropy(logits, &batch.labels);
        let grads = g.backward(loss);
        let names = ["block0.wq", "block0.ff1_w", "cross_init", "model_id", "pos"];
        let mut checked = 0;
        for name in names.iter().map(|s| s.to_string()).chain(
            gen.params()
                .keys()
                .filter(|k| k.starts_with("dict."))
                .cloned(),
        ) {
            let an_t = grads.get_or_zeros(vars.get(&name).unwrap(), gen.params()[&name].shape());
            let t = gen.params()[&name].clone();
            for i in [0, t.numel() / 2] {
                let num = central_difference(&t, i, 1e-6, |p| {
                    let mut g2 = gen.clone();
                    g2.params_mut().insert(name.clone(), p.clone());
                    loss_of(&g2)
                });
                let an = an_t.data()[i];
                let scale = an.abs().max(num.abs());
                if scale < 1e-9 {
                    continue;
                }
                assert!(
                    (an - num).abs() / scale <= 1e-3,
                    "{name}[{i}]: {an} vs {num}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 10, "{checked}");
    }
}
