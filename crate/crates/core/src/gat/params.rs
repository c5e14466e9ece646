use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::linalg;

pub const DEFAULT_LAYERS: usize = 5;
pub const DEFAULT_HIDDEN: usize = 200;
pub const DEFAULT_POOL_SIZE: usize = 16;
pub const DEFAULT_DROPOUT: f64 = 0.2;

const CHECKPOINT_FORMAT: &str = "kgexplain-gat";
const CHECKPOINT_VERSION: u32 = 1;

/// Nonlinearity used for the node update and the hidden layers of the
/// message and answer MLPs. `Identity` exists for the linear-only checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub(crate) fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// `Uniform` replaces the learned scores with 1/|N(i)|.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    #[default]
    Learned,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatConfig {
    /// Number of node types (T).
    pub node_types: usize,
    /// Number of relation types (R). Each edge also carries messages in the
    /// reverse direction under relation slot `R + r`.
    pub relation_types: usize,
    /// Hidden size D.
    pub hidden: usize,
    /// Number of GAT layers K.
    pub layers: usize,
    /// Width of the QA-context embedding fed to the answer head.
    pub lm_dim: usize,
    /// Number of answer options.
    pub options: usize,
    /// How many of the largest attention masses enter the answer head.
    pub pool_size: usize,
    /// Hidden width of the answer MLP.
    pub answer_hidden: usize,
    pub dropout: f64,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub attention: AttentionMode,
}

impl GatConfig {
    pub fn new(node_types: usize, relation_types: usize, lm_dim: usize, options: usize) -> Self {
        GatConfig {
            node_types,
            relation_types,
            hidden: DEFAULT_HIDDEN,
            layers: DEFAULT_LAYERS,
            lm_dim,
            options,
            pool_size: DEFAULT_POOL_SIZE,
            answer_hidden: DEFAULT_HIDDEN,
            dropout: DEFAULT_DROPOUT,
            activation: Activation::Relu,
            attention: AttentionMode::Learned,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.node_types == 0 {
            return bad("node_types must be positive");
        }
        if self.relation_types == 0 {
            return bad("relation_types must be positive");
        }
        if self.hidden == 0 || self.answer_hidden == 0 {
            return bad("hidden sizes must be positive");
        }
        if self.layers == 0 {
            return bad("at least one layer is required");
        }
        if self.options < 2 {
            return bad("at least two options are required");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Relation slots including reversed directions.
    pub fn relation_slots(&self) -> usize {
        2 * self.relation_types
    }

    pub(crate) fn msg_in(&self) -> usize {
        2 * self.hidden + self.node_types
    }

    pub(crate) fn rel_in(&self) -> usize {
        self.relation_slots() + 2 * self.node_types
    }

    pub(crate) fn head_in(&self) -> usize {
        self.lm_dim + self.hidden + self.pool_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerLayout {
    pub msg1_w: Range<usize>,
    pub msg1_b: Range<usize>,
    pub msg2_w: Range<usize>,
    pub msg2_b: Range<usize>,
    pub w: Range<usize>,
    pub att_u: Range<usize>,
    pub att_c: Range<usize>,
    pub att_v: Range<usize>,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub input_w: Range<usize>,
    pub input_b: Range<usize>,
    pub rel_w: Range<usize>,
    pub rel_b: Range<usize>,
    pub layers: Vec<LayerLayout>,
    pub ans1_w: Range<usize>,
    pub ans1_b: Range<usize>,
    pub ans2_w: Range<usize>,
    pub ans2_b: Range<usize>,
    pub total: usize,
}

impl Layout {
    pub fn new(c: &GatConfig) -> Layout {
        let mut at = 0usize;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let d = c.hidden;
        let input_w = take(d * (c.node_types + 1));
        let input_b = take(d);
        let rel_w = take(d * c.rel_in());
        let rel_b = take(d);
        let layers = (0..c.layers)
            .map(|_| LayerLayout {
                msg1_w: take(d * c.msg_in()),
                msg1_b: take(d),
                msg2_w: take(d * d),
                msg2_b: take(d),
                w: take(d * d),
                att_u: take(d * 2 * d),
                att_c: take(d),
                att_v: take(d),
            })
            .collect();
        let ans1_w = take(c.answer_hidden * c.head_in());
        let ans1_b = take(c.answer_hidden);
        let ans2_w = take(c.options * c.answer_hidden);
        let ans2_b = take(c.options);
        Layout {
            input_w,
            input_b,
            rel_w,
            rel_b,
            layers,
            ans1_w,
            ans1_b,
            ans2_w,
            ans2_b,
            total: at,
        }
    }

    /// Weight matrices with their fan-in and fan-out, for initialisation.
    fn weights(&self, c: &GatConfig) -> Vec<(Range<usize>, usize, usize)> {
        let d = c.hidden;
        let mut out = vec![
            (self.input_w.clone(), c.node_types + 1, d),
            (self.rel_w.clone(), c.rel_in(), d),
        ];
        for l in &self.layers {
            out.push((l.msg1_w.clone(), c.msg_in(), d));
            out.push((l.msg2_w.clone(), d, d));
            out.push((l.w.clone(), d, d));
            out.push((l.att_u.clone(), 2 * d, d));
            out.push((l.att_v.clone(), d, 1));
        }
        out.push((self.ans1_w.clone(), c.head_in(), c.answer_hidden));
        out.push((self.ans2_w.clone(), c.answer_hidden, c.options));
        out
    }
}

/// All trainable weights in one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GatParams {
    config: GatConfig,
    seed: u64,
    pub(crate) layout: Layout,
    pub(crate) values: Vec<f64>,
}

impl GatParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(config: GatConfig, seed: u64) -> Result<GatParams> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut values = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (range, fan_in, fan_out) in layout.weights(&config) {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut values[range] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(GatParams {
            config,
            seed,
            layout,
            values,
        })
    }

    pub fn from_values(config: GatConfig, seed: u64, values: Vec<f64>) -> Result<GatParams> {
        config.validate()?;
        let layout = Layout::new(&config);
        if values.len() != layout.total {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                layout.total,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite parameter".into()));
        }
        Ok(GatParams {
            config,
            seed,
            layout,
            values,
        })
    }

    pub fn config(&self) -> &GatConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Range of the output-layer weights of the answer head; handy for
    /// tests that need to freeze or zero the head.
    pub fn answer_output_range(&self) -> Range<usize> {
        self.layout.ans2_w.clone()
    }

    pub fn answer_output_bias_range(&self) -> Range<usize> {
        self.layout.ans2_b.clone()
    }

    /// Range of the message projection `W` of layer `layer`.
    pub fn layer_weight_range(&self, layer: usize) -> Option<Range<usize>> {
        self.layout.layers.get(layer).map(|l| l.w.clone())
    }

    /// r_ij = f_θ(onehot(relation) ‖ onehot(type_i) ‖ onehot(type_j)).
    /// `relation` is a slot in `0..2R`; `target_type` is the receiving node.
    pub fn relation_embed(
        &self,
        target_type: usize,
        source_type: usize,
        relation: usize,
    ) -> Result<Vec<f64>> {
        let c = &self.config;
        if relation >= c.relation_slots() {
            return Err(Error::Config(format!(
                "relation slot {relation} out of range (0..{})",
                c.relation_slots()
            )));
        }
        if target_type >= c.node_types || source_type >= c.node_types {
            return Err(Error::Config(format!(
                "node type out of range (0..{})",
                c.node_types
            )));
        }
        Ok(self.relation_embed_unchecked(target_type, source_type, relation))
    }

    pub(crate) fn relation_embed_unchecked(&self, ti: usize, tj: usize, slot: usize) -> Vec<f64> {
        let c = &self.config;
        let d = c.hidden;
        let cols = c.rel_in();
        let w = &self.values[self.layout.rel_w.clone()];
        let mut r = self.values[self.layout.rel_b.clone()].to_vec();
        linalg::add_column(w, d, cols, slot, 1.0, &mut r);
        linalg::add_column(w, d, cols, c.relation_slots() + ti, 1.0, &mut r);
        linalg::add_column(
            w,
            d,
            cols,
            c.relation_slots() + c.node_types + tj,
            1.0,
            &mut r,
        );
        r
    }

    pub fn write_checkpoint<W: Write>(&self, w: W) -> Result<()> {
        let ck = CheckpointRef {
            format: CHECKPOINT_FORMAT,
            version: CHECKPOINT_VERSION,
            config: &self.config,
            seed: self.seed,
            params: &self.values,
        };
        serde_json::to_writer(w, &ck)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: R) -> Result<GatParams> {
        let ck: Checkpoint = serde_json::from_reader(r)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "not a GAT checkpoint: {:?}",
                ck.format
            )));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        GatParams::from_values(ck.config, ck.seed, ck.params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.write_checkpoint(&mut f)?;
            f.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<GatParams> {
        let f = std::fs::File::open(path)?;
        GatParams::read_checkpoint(std::io::BufReader::new(f))
    }
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format: &'a str,
    version: u32,
    config: &'a GatConfig,
    seed: u64,
    params: &'a [f64],
}

#[derive(Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: GatConfig,
    seed: u64,
    params: Vec<f64>,
}
