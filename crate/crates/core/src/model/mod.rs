//! The scenario-modulated backbone.
//!
//! Each hidden layer computes `relu((S_i ⊙ W)^T h + b)`, where the per-sample
//! weighting matrix `S_i` comes from one of the [`DwmVariant`]s conditioned on
//! the scenario-aware embedding and the layer input. The output layer is a
//! plain sigmoid unit.

pub mod checkpoint;
pub mod dwm;
pub mod layers;

use serde::{Deserialize, Serialize};

pub use dwm::{low_rank_size_fraction, psi_repeat, DwmVariant, LayerWeighting, LowRank};
pub use layers::{BoundMlp, Mlp2};

use crate::data::{Sample, Schema};
use crate::error::{Error, Result};
use crate::init::init_uniform;
use crate::rng::Rng;
use crate::tape::{RepeatMode, Tape, Var};
use crate::tensor::{Binding, ParamId, ParamStore, Tensor};

/// How the backbone weights are modulated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Scenario-conditioned weighting matrices.
    #[default]
    Dwm,
    /// `S ≡ 1`: the plain backbone. No generators or discriminators exist.
    Ones,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DwmConfig {
    pub variant: DwmVariant,
    pub repeat_mode: RepeatMode,
    pub generator_hidden: usize,
    /// `d_r = d_m / row_divisor` on every layer unless `layers` is set.
    pub row_divisor: usize,
    /// `d_c = d_n / col_divisor` on every layer unless `layers` is set.
    pub col_divisor: usize,
    pub d_k: usize,
    /// Explicit per-layer sizes, overriding the divisors.
    pub layers: Option<Vec<LowRank>>,
}

impl Default for DwmConfig {
    fn default() -> Self {
        Self {
            variant: DwmVariant::R,
            repeat_mode: RepeatMode::Tile,
            generator_hidden: 16,
            row_divisor: 4,
            col_divisor: 4,
            d_k: 1,
            layers: None,
        }
    }
}

impl DwmConfig {
    /// Concrete factor sizes for each `(d_m, d_n)` layer shape.
    pub fn resolve(&self, shapes: &[(usize, usize)]) -> Result<Vec<LowRank>> {
        let sizes: Vec<LowRank> = match &self.layers {
            Some(explicit) => {
                if explicit.len() != shapes.len() {
                    return Err(Error::Config(format!(
                        "dwm.layers has {} entries but the backbone has {} hidden layers",
                        explicit.len(),
                        shapes.len()
                    )));
                }
                explicit.clone()
            }
            None => {
                if self.row_divisor == 0 || self.col_divisor == 0 {
                    return Err(Error::Config("dwm divisors must be positive".into()));
                }
                shapes
                    .iter()
                    .map(|&(d_m, d_n)| {
                        if d_m % self.row_divisor != 0 || d_n % self.col_divisor != 0 {
                            return Err(Error::Config(format!(
                                "layer {d_m}x{d_n} is not divisible by row_divisor {} / col_divisor {}",
                                self.row_divisor, self.col_divisor
                            )));
                        }
                        Ok(LowRank {
                            d_r: d_m / self.row_divisor,
                            d_c: d_n / self.col_divisor,
                            d_k: self.d_k,
                        })
                    })
                    .collect::<Result<_>>()?
            }
        };
        for (size, &(d_m, d_n)) in sizes.iter().zip(shapes) {
            if self.variant == DwmVariant::Non {
                continue;
            }
            size.validate(d_m, d_n)?;
        }
        Ok(sizes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub weighting: Weighting,
    pub dwm: DwmConfig,
    pub discriminator_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 8,
            hidden_dims: vec![128, 64, 32],
            weighting: Weighting::Dwm,
            dwm: DwmConfig::default(),
            discriminator_hidden: 16,
        }
    }
}

impl ModelConfig {
    pub fn plain() -> Self {
        Self {
            weighting: Weighting::Ones,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
enum LayerDwm {
    Non(Mlp2),
    Rc(Mlp2, Mlp2),
    R(Mlp2, ParamId),
    C(ParamId, Mlp2),
}

#[derive(Debug, Clone)]
struct HiddenLayer {
    weight: ParamId,
    bias: ParamId,
    d_m: usize,
    d_n: usize,
    size: LowRank,
    dwm: Option<LayerDwm>,
}

/// Trainable-scalar counts per component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub embeddings: usize,
    pub backbone: usize,
    pub generators: usize,
    pub shared_factors: usize,
    pub discriminator: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.embeddings + self.backbone + self.generators + self.shared_factors + self.discriminator
    }
}

/// Per-layer weighting factors for a batch, detached from any tape.
#[derive(Debug, Clone)]
pub struct WeightingFactors {
    pub d_m: usize,
    pub d_n: usize,
    pub mode: RepeatMode,
    /// `[B, d_r, d_k]`; `None` for the undecomposed variant.
    pub row: Option<Tensor>,
    /// `[B, d_k, d_c]`
    pub col: Option<Tensor>,
    /// Pre-sigmoid compact product `[B, d_r, d_c]`.
    pub logits: Tensor,
    /// `sigmoid(logits)`, `[B, d_r, d_c]`.
    pub compact: Tensor,
}

impl WeightingFactors {
    /// The full `[B, d_m, d_n]` weighting matrices.
    pub fn expanded(&self) -> Result<Tensor> {
        psi_repeat(&self.compact, self.d_m, self.d_n, self.mode)
    }

    pub fn batch(&self) -> usize {
        self.compact.shape()[0]
    }

    pub fn compact_dims(&self) -> (usize, usize) {
        let s = self.compact.shape();
        (s[1], s[2])
    }
}

/// Tape outputs of a batched forward pass.
#[derive(Debug, Clone)]
pub struct BatchForward {
    /// `[B, 1]` conversion probabilities.
    pub prob: Var,
    /// `[B, aware_fields * embed_dim]`
    pub e_aw: Var,
    /// One entry per modulated layer; empty under [`Weighting::Ones`].
    pub layers: Vec<LayerWeighting>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    schema: Schema,
    params: ParamStore,
    embeddings: Vec<ParamId>,
    layers: Vec<HiddenLayer>,
    output: (ParamId, ParamId),
    discriminators: Vec<Mlp2>,
}

impl Model {
    pub fn new(config: ModelConfig, schema: &Schema, seed: u64) -> Result<Self> {
        if config.embed_dim == 0 || config.hidden_dims.is_empty() || config.hidden_dims.contains(&0) {
            return Err(Error::Config("embed_dim and hidden_dims must be positive and non-empty".into()));
        }
        if config.dwm.generator_hidden == 0 || config.discriminator_hidden == 0 {
            return Err(Error::Config("generator and discriminator widths must be positive".into()));
        }
        let base = Rng::new(seed);
        let mut params = ParamStore::new();
        let e = config.embed_dim;

        let mut rng = base.derive(0);
        let mut embeddings = Vec::new();
        for f in schema.aware_fields().chain(schema.agnostic_fields()) {
            let t = init_uniform(&[f.vocab_size, e], 1.0, &mut rng)?;
            embeddings.push(params.insert(format!("embed.{}", f.name), t));
        }

        let aware_width = schema.num_aware() * e;
        let input_width = (schema.num_aware() + schema.num_agnostic()) * e;
        let mut shapes = Vec::new();
        let mut d_m = input_width;
        for &d_n in &config.hidden_dims {
            shapes.push((d_m, d_n));
            d_m = d_n;
        }
        let sizes = match config.weighting {
            Weighting::Dwm => config.dwm.resolve(&shapes)?,
            Weighting::Ones => shapes.iter().map(|&(m, n)| LowRank::full(m, n)).collect(),
        };

        let mut rng = base.derive(1);
        let mut layers = Vec::new();
        for (l, &(d_m, d_n)) in shapes.iter().enumerate() {
            let weight = params.insert(format!("backbone.{l}.weight"), init_uniform(&[d_m, d_n], 1.0, &mut rng)?);
            let bias = params.insert(format!("backbone.{l}.bias"), Tensor::zeros(vec![d_n])?);
            layers.push(HiddenLayer {
                weight,
                bias,
                d_m,
                d_n,
                size: sizes[l],
                dwm: None,
            });
        }
        let last = *config.hidden_dims.last().unwrap();
        let out_w = params.insert("backbone.out.weight", init_uniform(&[last, 1], 1.0, &mut rng)?);
        let out_b = params.insert("backbone.out.bias", Tensor::zeros(vec![1])?);

        let mut discriminators = Vec::new();
        if config.weighting == Weighting::Dwm {
            let mut rng = base.derive(2);
            let hidden = config.dwm.generator_hidden;
            for (l, layer) in layers.iter_mut().enumerate() {
                let gen_in = aware_width + layer.d_m;
                let LowRank { d_r, d_c, d_k } = layer.size;
                let gen = |params: &mut ParamStore, name: &str, out: usize, rng: &mut Rng| {
                    Mlp2::new(params, &format!("gen.{l}.{name}"), gen_in, hidden, out, false, rng)
                };
                layer.dwm = Some(match config.dwm.variant {
                    DwmVariant::Non => {
                        layer.size = LowRank::full(layer.d_m, layer.d_n);
                        LayerDwm::Non(gen(&mut params, "full", layer.d_m * layer.d_n, &mut rng)?)
                    }
                    DwmVariant::Rc => LayerDwm::Rc(
                        gen(&mut params, "row", d_r * d_k, &mut rng)?,
                        gen(&mut params, "col", d_k * d_c, &mut rng)?,
                    ),
                    DwmVariant::R => {
                        let g = gen(&mut params, "row", d_r * d_k, &mut rng)?;
                        let c = params.insert(format!("share.{l}.col"), init_uniform(&[d_k, d_c], 1.0, &mut rng)?);
                        LayerDwm::R(g, c)
                    }
                    DwmVariant::C => {
                        let r = params.insert(format!("share.{l}.row"), init_uniform(&[d_r, d_k], 1.0, &mut rng)?);
                        let g = gen(&mut params, "col", d_k * d_c, &mut rng)?;
                        LayerDwm::C(r, g)
                    }
                });
            }
            let mut rng = base.derive(3);
            for (l, layer) in layers.iter().enumerate() {
                let width = aware_width + layer.size.d_r * layer.size.d_c;
                discriminators.push(Mlp2::new(
                    &mut params,
                    &format!("disc.{l}"),
                    width,
                    config.discriminator_hidden,
                    1,
                    true,
                    &mut rng,
                )?);
            }
        }

        Ok(Self {
            config,
            schema: schema.clone(),
            params,
            embeddings,
            layers,
            output: (out_w, out_b),
            discriminators,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn is_modulated(&self) -> bool {
        self.config.weighting == Weighting::Dwm
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `(d_m, d_n)` of each hidden layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.d_m, l.d_n)).collect()
    }

    /// Resolved factor sizes per hidden layer.
    pub fn layer_sizes(&self) -> Vec<LowRank> {
        self.layers.iter().map(|l| l.size).collect()
    }

    pub fn aware_width(&self) -> usize {
        self.schema.num_aware() * self.config.embed_dim
    }

    pub fn discriminators(&self) -> &[Mlp2] {
        &self.discriminators
    }

    pub fn count_parameters(&self) -> ParamCounts {
        let mut c = ParamCounts::default();
        for (_, name, t) in self.params.iter() {
            let n = t.numel();
            match name.split('.').next() {
                Some("embed") => c.embeddings += n,
                Some("backbone") => c.backbone += n,
                Some("gen") => c.generators += n,
                Some("share") => c.shared_factors += n,
                Some("disc") => c.discriminator += n,
                _ => unreachable!("unknown parameter group in `{name}`"),
            }
        }
        c
    }

    /// Zeroes the output layer of every generator, so every weighting matrix
    /// becomes exactly 0.5.
    pub fn zero_generators(&mut self) {
        let ids: Vec<ParamId> = self
            .layers
            .iter()
            .filter_map(|l| l.dwm.as_ref())
            .flat_map(|d| match d {
                LayerDwm::Non(g) | LayerDwm::R(g, _) | LayerDwm::C(_, g) => vec![g.w2, g.b2],
                LayerDwm::Rc(gr, gc) => vec![gr.w2, gr.b2, gc.w2, gc.b2],
            })
            .collect();
        for id in ids {
            self.params.get_mut(id).values_mut().fill(0.0);
        }
    }

    fn check_ids(&self, sample: &Sample) -> Result<()> {
        let vocab = self.schema.aware_fields().chain(self.schema.agnostic_fields());
        let ids = sample.aware_features.iter().chain(&sample.agnostic_features);
        if sample.aware_features.len() != self.schema.num_aware()
            || sample.agnostic_features.len() != self.schema.num_agnostic()
        {
            return Err(Error::Data("sample arity does not match the model schema".into()));
        }
        for (f, &id) in vocab.zip(ids) {
            if id >= f.vocab_size {
                return Err(Error::OutOfRange {
                    what: format!("field `{}` id", f.name),
                    index: id,
                    size: f.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Batched embedding lookup: `(e_aw, e_ag, h1)` with `h1 = [e_aw, e_ag]`.
    pub fn embed_batch(&self, tape: &mut Tape, binding: &Binding, samples: &[&Sample]) -> Result<(Var, Var, Var)> {
        for s in samples {
            self.check_ids(s)?;
        }
        let na = self.schema.num_aware();
        let mut aware = Vec::with_capacity(na);
        let mut agnostic = Vec::new();
        for (k, &table) in self.embeddings.iter().enumerate() {
            let ids: Vec<usize> = samples
                .iter()
                .map(|s| if k < na { s.aware_features[k] } else { s.agnostic_features[k - na] })
                .collect();
            let rows = tape.gather_rows(binding.var(table), &ids)?;
            if k < na {
                aware.push(rows);
            } else {
                agnostic.push(rows);
            }
        }
        let e_aw = tape.concat(&aware)?;
        let (e_ag, h1) = if agnostic.is_empty() {
            (e_aw, e_aw)
        } else {
            let e_ag = tape.concat(&agnostic)?;
            (e_ag, tape.concat(&[e_aw, e_ag])?)
        };
        Ok((e_aw, e_ag, h1))
    }

    /// Single-sample embedding values `(e_aw, e_ag, h1)`.
    pub fn embed(&self, sample: &Sample) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape);
        let (a, g, h) = self.embed_batch(&mut tape, &binding, &[sample])?;
        let e_ag = if self.schema.num_agnostic() == 0 { Vec::new() } else { tape.value(g).to_vec() };
        Ok((tape.value(a).to_vec(), e_ag, tape.value(h).to_vec()))
    }

    fn layer_weighting(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        layer: &HiddenLayer,
        e_aw: Var,
        h: Var,
    ) -> Result<LayerWeighting> {
        let input = tape.concat(&[e_aw, h])?;
        let dwm = layer.dwm.as_ref().expect("modulated layers carry generators");
        match dwm {
            LayerDwm::Non(g) => dwm::dwm_non(tape, &g.bind(binding), input, layer.d_m, layer.d_n),
            LayerDwm::Rc(gr, gc) => dwm::dwm_rc(tape, &gr.bind(binding), &gc.bind(binding), input, layer.size),
            LayerDwm::R(gr, c) => dwm::dwm_r(tape, &gr.bind(binding), binding.var(*c), input, layer.size),
            LayerDwm::C(r, gc) => dwm::dwm_c(tape, binding.var(*r), &gc.bind(binding), input, layer.size),
        }
    }

    pub fn forward_batch(&self, tape: &mut Tape, binding: &Binding, samples: &[&Sample]) -> Result<BatchForward> {
        if samples.is_empty() {
            return Err(Error::Data("forward on an empty batch".into()));
        }
        let batch = samples.len();
        let (e_aw, _, mut h) = self.embed_batch(tape, binding, samples)?;
        let mode = self.config.dwm.repeat_mode;
        let mut weightings = Vec::new();
        for layer in &self.layers {
            let compact = match self.config.weighting {
                Weighting::Dwm => {
                    let lw = self.layer_weighting(tape, binding, layer, e_aw, h)?;
                    weightings.push(lw);
                    lw.compact
                }
                Weighting::Ones => tape.constant(vec![batch, 1, 1], vec![1.0; batch])?,
            };
            let z = tape.modulated_linear(h, compact, binding.var(layer.weight), mode)?;
            let z = tape.add_row(z, binding.var(layer.bias))?;
            h = tape.relu(z);
        }
        let logit = tape.matmul(h, binding.var(self.output.0))?;
        let logit = tape.add_row(logit, binding.var(self.output.1))?;
        let prob = tape.sigmoid(logit);
        Ok(BatchForward {
            prob,
            e_aw,
            layers: weightings,
        })
    }

    /// Conversion probability for one sample.
    pub fn forward(&self, sample: &Sample) -> Result<f64> {
        Ok(self.predict(&[sample])?[0])
    }

    pub fn predict(&self, samples: &[&Sample]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        let mut tape = Tape::new();
        for chunk in samples.chunks(1024) {
            tape.reset();
            let binding = self.params.bind(&mut tape);
            let fwd = self.forward_batch(&mut tape, &binding, chunk)?;
            out.extend_from_slice(tape.value(fwd.prob));
        }
        Ok(out)
    }

    /// Weighting factors of every modulated layer for `samples`.
    pub fn weighting_factors(&self, samples: &[&Sample]) -> Result<Vec<WeightingFactors>> {
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape);
        let fwd = self.forward_batch(&mut tape, &binding, samples)?;
        let mode = self.config.dwm.repeat_mode;
        Ok(fwd
            .layers
            .iter()
            .zip(&self.layers)
            .map(|(lw, layer)| WeightingFactors {
                d_m: layer.d_m,
                d_n: layer.d_n,
                mode,
                row: lw.row.map(|v| tape.tensor(v)),
                col: lw.col.map(|v| tape.tensor(v)),
                logits: tape.tensor(lw.logits),
                compact: tape.tensor(lw.compact),
            })
            .collect())
    }

    /// Compact weighting matrices of all modulated layers, flattened and
    /// concatenated per sample. Empty rows under [`Weighting::Ones`].
    pub fn compact_features(&self, samples: &[&Sample]) -> Result<Vec<Vec<f64>>> {
        let mut rows = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(512) {
            let factors = self.weighting_factors(chunk)?;
            for i in 0..chunk.len() {
                let mut row = Vec::new();
                for f in &factors {
                    let (dr, dc) = f.compact_dims();
                    row.extend_from_slice(&f.compact.values()[i * dr * dc..(i + 1) * dr * dc]);
                }
                rows.push(row);
            }
        }
        Ok(rows)
    }

    pub(crate) fn from_parts(config: ModelConfig, schema: &Schema, params: ParamStore) -> Result<Self> {
        let mut model = Model::new(config, schema, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((_, name, expected), (_, got_name, got)) in model.params.iter().zip(params.iter()) {
            if name != got_name || expected.shape() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{got_name}` {:?} does not match expected `{name}` {:?}",
                    got.shape(),
                    expected.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }
}
