use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ffn: usize,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    /// Decoder input embedding and output projection share one tensor.
    pub tie_decoder_embeddings: bool,
    /// Source and target share one vocabulary and one embedding tensor.
    pub joint_vocabulary: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: d=64, 4 heads, 2+2 layers, FFN 128, all embeddings tied.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ffn: 128,
            src_vocab_size: vocab_size,
            tgt_vocab_size: vocab_size,
            tie_decoder_embeddings: true,
            joint_vocabulary: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.d_model,
            self.n_heads,
            self.n_enc_layers,
            self.n_dec_layers,
            self.d_ffn,
            self.src_vocab_size,
            self.tgt_vocab_size,
        ];
        if sizes.contains(&0) {
            return Err(Error::invalid("model sizes must all be >= 1"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid("d_model must be divisible by n_heads"));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::invalid(
                "d_model must be even for sinusoidal positions",
            ));
        }
        if self.joint_vocabulary && self.src_vocab_size != self.tgt_vocab_size {
            return Err(Error::invalid(
                "joint vocabulary requires equal source/target sizes",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Embedding { d: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearIds {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LnIds {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfnIds {
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncLayerIds {
    pub ln_self: LnIds,
    pub self_attn: AttnIds,
    pub ln_ffn: LnIds,
    pub ffn: FfnIds,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecLayerIds {
    pub ln_self: LnIds,
    pub self_attn: AttnIds,
    pub ln_cross: LnIds,
    pub cross_attn: AttnIds,
    pub ln_ffn: LnIds,
    pub ffn: FfnIds,
}

/// Slot indices of every tensor, derived from the config.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub src_embed: usize,
    pub tgt_embed: usize,
    pub out_proj: usize,
    pub out_bias: usize,
    pub enc: Vec<EncLayerIds>,
    pub enc_ln: LnIds,
    pub dec: Vec<DecLayerIds>,
    pub dec_ln: LnIds,
}

struct Builder {
    shapes: Vec<(Vec<usize>, Init)>,
    names: Vec<(String, usize)>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let slot = self.shapes.len();
        self.shapes.push((shape, init));
        self.names.push((name, slot));
        slot
    }

    fn alias(&mut self, name: String, slot: usize) -> usize {
        self.names.push((name, slot));
        slot
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize) -> LinearIds {
        LinearIds {
            w: self.add(
                format!("{prefix}.weight"),
                vec![din, dout],
                Init::Xavier {
                    fan_in: din,
                    fan_out: dout,
                },
            ),
            b: self.add(format!("{prefix}.bias"), vec![dout], Init::Zeros),
        }
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIds {
        LnIds {
            g: self.add(format!("{prefix}.gain"), vec![d], Init::Ones),
            b: self.add(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        AttnIds {
            q: self.linear(&format!("{prefix}.q"), d, d),
            k: self.linear(&format!("{prefix}.k"), d, d),
            v: self.linear(&format!("{prefix}.v"), d, d),
            o: self.linear(&format!("{prefix}.o"), d, d),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> FfnIds {
        FfnIds {
            fc1: self.linear(&format!("{prefix}.fc1"), d, f),
            fc2: self.linear(&format!("{prefix}.fc2"), f, d),
        }
    }
}

fn build_layout(c: &ModelConfig) -> (Layout, Builder) {
    let d = c.d_model;
    let mut b = Builder {
        shapes: Vec::new(),
        names: Vec::new(),
    };
    let tgt_embed = b.add(
        "decoder.embed".into(),
        vec![c.tgt_vocab_size, d],
        Init::Embedding { d },
    );
    let src_embed = if c.joint_vocabulary {
        b.alias("encoder.embed".into(), tgt_embed)
    } else {
        b.add(
            "encoder.embed".into(),
            vec![c.src_vocab_size, d],
            Init::Embedding { d },
        )
    };
    let out_proj = if c.tie_decoder_embeddings {
        b.alias("decoder.out_proj".into(), tgt_embed)
    } else {
        b.add(
            "decoder.out_proj".into(),
            vec![c.tgt_vocab_size, d],
            Init::Embedding { d },
        )
    };
    let out_bias = b.add(
        "decoder.out_bias".into(),
        vec![c.tgt_vocab_size],
        Init::Zeros,
    );
    let enc = (0..c.n_enc_layers)
        .map(|i| {
            let p = format!("encoder.layers.{i}");
            EncLayerIds {
                ln_self: b.ln(&format!("{p}.ln_self"), d),
                self_attn: b.attn(&format!("{p}.self_attn"), d),
                ln_ffn: b.ln(&format!("{p}.ln_ffn"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d, c.d_ffn),
            }
        })
        .collect();
    let enc_ln = b.ln("encoder.ln_final", d);
    let dec = (0..c.n_dec_layers)
        .map(|i| {
            let p = format!("decoder.layers.{i}");
            DecLayerIds {
                ln_self: b.ln(&format!("{p}.ln_self"), d),
                self_attn: b.attn(&format!("{p}.self_attn"), d),
                ln_cross: b.ln(&format!("{p}.ln_cross"), d),
                cross_attn: b.attn(&format!("{p}.cross_attn"), d),
                ln_ffn: b.ln(&format!("{p}.ln_ffn"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d, c.d_ffn),
            }
        })
        .collect();
    let dec_ln = b.ln("decoder.ln_final", d);
    (
        Layout {
            src_embed,
            tgt_embed,
            out_proj,
            out_bias,
            enc,
            enc_ln,
            dec,
            dec_ln,
        },
        b,
    )
}

/// All model weights. Tensors live in slots; names map onto slots and tied
/// names share one slot, so a tied pair is a single storage.
#[derive(Debug, Clone)]
pub struct Parameters {
    config: ModelConfig,
    tensors: Vec<Tensor>,
    names: Vec<(String, usize)>,
    index: HashMap<String, usize>,
    pub(crate) layout: Layout,
}

impl PartialEq for Parameters {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors && self.names == other.names
    }
}

impl Parameters {
    /// Scaled-uniform initialization: Xavier for projections, `±sqrt(3/d)`
    /// for embeddings, ones/zeros for layer-norm gains/biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, builder) = build_layout(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = builder
            .shapes
            .into_iter()
            .map(|(shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Xavier { fan_in, fan_out } => {
                        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        (0..n).map(|_| rng.gen_range(-a..a)).collect()
                    }
                    Init::Embedding { d } => {
                        let a = (3.0 / d as f64).sqrt();
                        (0..n).map(|_| rng.gen_range(-a..a)).collect()
                    }
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                Tensor { shape, data }
            })
            .collect();
        Ok(Self::assemble(
            config.clone(),
            tensors,
            builder.names,
            layout,
        ))
    }

    fn assemble(
        config: ModelConfig,
        tensors: Vec<Tensor>,
        names: Vec<(String, usize)>,
        layout: Layout,
    ) -> Self {
        let index = names.iter().cloned().collect();
        Parameters {
            config,
            tensors,
            names,
            index,
            layout,
        }
    }

    /// Rebuilds parameters from named tensors (checkpoint loading). Every
    /// expected name must be present with the right shape; tied names must
    /// carry identical data.
    pub(crate) fn from_named(
        config: &ModelConfig,
        named: &HashMap<String, Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let (layout, builder) = build_layout(config);
        let mut tensors: Vec<Option<Tensor>> = vec![None; builder.shapes.len()];
        for (name, slot) in &builder.names {
            let t = named
                .get(name)
                .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            if t.shape != builder.shapes[*slot].0 {
                return Err(Error::Shape(format!(
                    "tensor `{name}` has shape {:?}",
                    t.shape
                )));
            }
            match &tensors[*slot] {
                Some(prev) if prev != t => {
                    return Err(Error::Format(format!(
                        "tied tensor `{name}` differs from its alias"
                    )))
                }
                Some(_) => {}
                None => tensors[*slot] = Some(t.clone()),
            }
        }
        let tensors = tensors
            .into_iter()
            .map(|t| t.expect("every slot named"))
            .collect();
        Ok(Self::assemble(
            config.clone(),
            tensors,
            builder.names,
            layout,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `(name, slot)` pairs in stable order; aliases appear with their slot.
    pub fn names(&self) -> &[(String, usize)] {
        &self.names
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slot(name).map(|s| &self.tensors[s])
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// First name registered for a slot.
    pub fn slot_name(&self, slot: usize) -> &str {
        self.names
            .iter()
            .find(|(_, s)| *s == slot)
            .map(|(n, _)| n.as_str())
            .unwrap_or("?")
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    #[inline]
    pub(crate) fn w(&self, slot: usize) -> &[f64] {
        &self.tensors[slot].data
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Gradient buffers laid out like [`Parameters`] slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub slots: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(p: &Parameters) -> Self {
        Gradients {
            slots: p.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.slots {
            for x in a.iter_mut() {
                *x *= s;
            }
        }
    }

    #[inline]
    pub(crate) fn g(&mut self, slot: usize) -> &mut [f64] {
        &mut self.slots[slot]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::desk(30)
    }

    #[test]
    fn deterministic_init() {
        let a = Parameters::init(&cfg(), 7).unwrap();
        let b = Parameters::init(&cfg(), 7).unwrap();
        assert_eq!(a, b);
        let c = Parameters::init(&cfg(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn tied_tensors_share_a_slot() {
        let p = Parameters::init(&cfg(), 1).unwrap();
        assert_eq!(p.slot("decoder.embed"), p.slot("decoder.out_proj"));
        assert_eq!(p.slot("decoder.embed"), p.slot("encoder.embed"));
        let mut c = cfg();
        c.tie_decoder_embeddings = false;
        c.joint_vocabulary = false;
        c.src_vocab_size = 20;
        let p = Parameters::init(&c, 1).unwrap();
        assert_ne!(p.slot("decoder.embed"), p.slot("decoder.out_proj"));
        assert_eq!(p.get("encoder.embed").unwrap().shape, vec![20, 64]);
    }

    #[test]
    fn shapes_match_config() {
        let c = cfg();
        let p = Parameters::init(&c, 3).unwrap();
        let (d, f, v) = (c.d_model, c.d_ffn, c.tgt_vocab_size);
        for (name, _) in p.names() {
            let shape = &p.get(name).unwrap().shape;
            let expected: Vec<usize> = if name.ends_with("embed") || name.ends_with("out_proj") {
                vec![v, d]
            } else if name.ends_with("out_bias") {
                vec![v]
            } else if name.contains("fc1.weight") {
                vec![d, f]
            } else if name.contains("fc1.bias") {
                vec![f]
            } else if name.contains("fc2.weight") {
                vec![f, d]
            } else if name.ends_with(".weight") {
                vec![d, d]
            } else {
                vec![d]
            };
            assert_eq!(shape, &expected, "{name}");
            assert_eq!(
                p.get(name).unwrap().data.len(),
                shape.iter().product::<usize>()
            );
        }
        assert!(p.all_finite());
    }

    #[test]
    fn invalid_configs() {
        let mut c = cfg();
        c.n_heads = 5;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.src_vocab_size = 10;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.d_ffn = 0;
        assert!(c.validate().is_err());
    }
}
