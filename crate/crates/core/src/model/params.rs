use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::rng::stream;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<F>>) -> Self {
        assert_eq!(names.len(), tensors.len());
        Self { names, tensors }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Ln {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Attn {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncLayer {
    pub ln1: Ln,
    pub attn: Attn,
    pub ln2: Ln,
    pub ffn: Ffn,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecLayer {
    pub ln1: Ln,
    pub self_attn: Attn,
    pub ln2: Ln,
    pub cross_attn: Attn,
    pub ln3: Ln,
    pub ffn: Ffn,
}

/// Where each parameter lives in the store.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub patch: Linear,
    pub spatial: usize,
    pub temporal: usize,
    pub text_pos: usize,
    pub dec_pos: usize,
    pub enc: Vec<EncLayer>,
    pub enc_ln: Ln,
    pub dec: Vec<DecLayer>,
    pub dec_ln: Ln,
    /// `None` when the head is tied to the token embedding.
    pub head: Option<usize>,
}

struct Builder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            weight: self.push(format!("{name}.weight"), vec![fan_in, fan_out], Init::Normal),
            bias: self.push(format!("{name}.bias"), vec![fan_out], Init::Zeros),
        }
    }

    fn ln(&mut self, name: &str, d: usize) -> Ln {
        Ln {
            gain: self.push(format!("{name}.gain"), vec![d], Init::Ones),
            bias: self.push(format!("{name}.bias"), vec![d], Init::Zeros),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            out: self.linear(&format!("{name}.out"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, mult: usize) -> Ffn {
        Ffn {
            up: self.linear(&format!("{name}.up"), d, d * mult),
            down: self.linear(&format!("{name}.down"), d * mult, d),
        }
    }
}

fn build(config: &ModelConfig) -> (Layout, Builder) {
    let d = config.hidden;
    let mut b = Builder { specs: Vec::new() };
    let tok_emb = b.push("embed.tokens".into(), vec![config.vocab, d], Init::Normal);
    let patch = b.linear("embed.patch", config.patch_dim(), d);
    let spatial = b.push("embed.spatial".into(), vec![config.patches_per_frame(), d], Init::Normal);
    let temporal = b.push("embed.temporal".into(), vec![config.max_frames, d], Init::Zeros);
    let text_pos = b.push("embed.text_pos".into(), vec![config.max_text_len, d], Init::Normal);
    let dec_pos = b.push("embed.dec_pos".into(), vec![config.max_target_len, d], Init::Normal);
    let enc = (0..config.enc_layers)
        .map(|i| EncLayer {
            ln1: b.ln(&format!("enc.{i}.ln1"), d),
            attn: b.attn(&format!("enc.{i}.attn"), d),
            ln2: b.ln(&format!("enc.{i}.ln2"), d),
            ffn: b.ffn(&format!("enc.{i}.ffn"), d, config.ffn_mult),
        })
        .collect();
    let enc_ln = b.ln("enc.ln", d);
    let dec = (0..config.dec_layers)
        .map(|i| DecLayer {
            ln1: b.ln(&format!("dec.{i}.ln1"), d),
            self_attn: b.attn(&format!("dec.{i}.self"), d),
            ln2: b.ln(&format!("dec.{i}.ln2"), d),
            cross_attn: b.attn(&format!("dec.{i}.cross"), d),
            ln3: b.ln(&format!("dec.{i}.ln3"), d),
            ffn: b.ffn(&format!("dec.{i}.ffn"), d, config.ffn_mult),
        })
        .collect();
    let dec_ln = b.ln("dec.ln", d);
    let head = (!config.tie_output_head).then(|| b.push("head.weight".into(), vec![d, config.vocab], Init::Normal));
    let layout = Layout {
        tok_emb,
        patch,
        spatial,
        temporal,
        text_pos,
        dec_pos,
        enc,
        enc_ln,
        dec,
        dec_ln,
        head,
    };
    (layout, b)
}

pub(crate) fn layout(config: &ModelConfig) -> Layout {
    build(config).0
}

/// Expected `(name, shape)` of every parameter, in store order.
pub(crate) fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    build(config).1.specs.into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// Normal(0, init_std) weights, zero biases and temporal embeddings, unit
/// layer-norm gains. Each tensor draws from its own stream.
pub(crate) fn init_params<F: Real>(config: &ModelConfig, seed: u64) -> (Layout, ParamStore<F>) {
    let (layout, builder) = build(config);
    let normal = Normal::new(0.0, config.init_std).expect("finite std");
    let mut names = Vec::with_capacity(builder.specs.len());
    let mut tensors = Vec::with_capacity(builder.specs.len());
    for (i, (name, shape, init)) in builder.specs.into_iter().enumerate() {
        let n: usize = shape.iter().product();
        let data: Vec<F> = match init {
            Init::Zeros => vec![F::zero(); n],
            Init::Ones => vec![F::one(); n],
            Init::Normal => {
                let mut rng = stream(seed, "init", i as u64);
                (0..n).map(|_| F::lit(normal.sample(&mut rng))).collect()
            }
        };
        tensors.push(Tensor::new(shape, data).expect("shape matches"));
        names.push(name);
    }
    (layout, ParamStore { names, tensors })
}
