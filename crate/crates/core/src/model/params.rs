use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum EmbedIdx {
    Factorized { e1: usize, e2: usize },
    Full { e: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct LnIdx {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct AttnIdx {
    pub wq: usize,
    pub bq: usize,
    /// No key bias: it shifts every score of a query equally and cancels
    /// in the softmax.
    pub wk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct FfIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct EncBlockIdx {
    pub ln1: LnIdx,
    pub attn: AttnIdx,
    pub ln2: LnIdx,
    pub ff: FfIdx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct DecBlockIdx {
    pub ln1: LnIdx,
    pub self_attn: AttnIdx,
    pub ln2: LnIdx,
    pub cross: AttnIdx,
    pub ln3: LnIdx,
    pub ff: FfIdx,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Layout {
    pub embed: EmbedIdx,
    pub enc: Vec<EncBlockIdx>,
    pub enc_ln: LnIdx,
    pub dec: Vec<DecBlockIdx>,
    pub dec_ln: LnIdx,
    pub out_bias: usize,
    /// Copy gate `W1 (D x 1)`, `b1 (1 x 1)`.
    pub copy: Option<(usize, usize)>,
}

/// How a parameter is initialised.
#[derive(Clone, Copy)]
enum Init {
    /// Uniform with bound `sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    /// Uniform with the given standard deviation.
    Std(f64),
    Zeros,
    Ones,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn ln(&mut self, p: &str, d: usize) -> LnIdx {
        LnIdx {
            gamma: self.add(format!("{p}.gamma"), vec![1, d], Init::Ones),
            beta: self.add(format!("{p}.beta"), vec![1, d], Init::Zeros),
        }
    }

    fn linear(&mut self, p: &str, w: &str, b: &str, rows: usize, cols: usize) -> (usize, usize) {
        (
            self.add(format!("{p}.{w}"), vec![rows, cols], Init::Xavier),
            self.add(format!("{p}.{b}"), vec![1, cols], Init::Zeros),
        )
    }

    fn attn(&mut self, p: &str, d: usize) -> AttnIdx {
        let (wq, bq) = self.linear(p, "wq", "bq", d, d);
        let wk = self.add(format!("{p}.wk"), vec![d, d], Init::Xavier);
        let (wv, bv) = self.linear(p, "wv", "bv", d, d);
        let (wo, bo) = self.linear(p, "wo", "bo", d, d);
        AttnIdx { wq, bq, wk, wv, bv, wo, bo }
    }

    fn ff(&mut self, p: &str, d: usize, f: usize) -> FfIdx {
        let (w1, b1) = self.linear(p, "w1", "b1", d, f);
        let (w2, b2) = self.linear(p, "w2", "b2", f, d);
        FfIdx { w1, b1, w2, b2 }
    }
}

fn plan(cfg: &ModelConfig) -> (Layout, Builder) {
    let mut b = Builder {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let (v, d, h) = (cfg.vocab_size, cfg.embed_dim, cfg.factor_dim);
    let d_scale = 1.0 / (d as f64).sqrt();
    let embed = if cfg.factorized {
        // Composed entries then have standard deviation 1/sqrt(D).
        EmbedIdx::Factorized {
            e1: b.add("embed.e1".into(), vec![v, h], Init::Std(d_scale)),
            e2: b.add("embed.e2".into(), vec![h, d], Init::Std(1.0 / (h as f64).sqrt())),
        }
    } else {
        EmbedIdx::Full {
            e: b.add("embed.e".into(), vec![v, d], Init::Std(d_scale)),
        }
    };
    let enc = (0..cfg.blocks)
        .map(|i| EncBlockIdx {
            ln1: b.ln(&format!("enc.{i}.ln1"), d),
            attn: b.attn(&format!("enc.{i}.attn"), d),
            ln2: b.ln(&format!("enc.{i}.ln2"), d),
            ff: b.ff(&format!("enc.{i}.ff"), d, cfg.ff_dim),
        })
        .collect();
    let enc_ln = b.ln("enc.ln", d);
    let dec = (0..cfg.blocks)
        .map(|i| DecBlockIdx {
            ln1: b.ln(&format!("dec.{i}.ln1"), d),
            self_attn: b.attn(&format!("dec.{i}.self"), d),
            ln2: b.ln(&format!("dec.{i}.ln2"), d),
            cross: b.attn(&format!("dec.{i}.cross"), d),
            ln3: b.ln(&format!("dec.{i}.ln3"), d),
            ff: b.ff(&format!("dec.{i}.ff"), d, cfg.ff_dim),
        })
        .collect();
    let dec_ln = b.ln("dec.ln", d);
    let out_bias = b.add("out.bias".into(), vec![1, v], Init::Zeros);
    let copy = cfg.copy_enabled.then(|| b.linear("copy", "w", "b", d, 1));
    (
        Layout {
            embed,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out_bias,
            copy,
        },
        b,
    )
}

/// Every trainable tensor of the encoder-decoder, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerParams {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    pub(crate) layout: Layout,
}

impl TransformerParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, b) = plan(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::with_capacity(b.shapes.len());
        for (shape, init) in b.shapes.iter().zip(&b.inits) {
            let n: usize = shape.iter().product();
            let data = match *init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Xavier => {
                    let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-a..a)).collect()
                }
                Init::Std(s) => {
                    let a = s * 3f64.sqrt();
                    (0..n).map(|_| rng.gen_range(-a..a)).collect()
                }
            };
            tensors.push(Tensor::new(shape.clone(), data)?);
        }
        Ok(Self {
            config: config.clone(),
            names: b.names,
            tensors,
            layout,
        })
    }

    /// Rebuilds parameters from named tensors in layout order.
    pub fn from_tensors(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (layout, b) = plan(config);
        if named.len() != b.names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                b.names.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, t), (want, shape)) in named.into_iter().zip(b.names.iter().zip(&b.shapes)) {
            if &name != want || t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {:?} does not match expected {want} {shape:?}",
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names: b.names,
            tensors,
            layout,
        })
    }

    /// Names and shapes the layout of `config` would produce.
    pub fn manifest(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (_, b) = plan(config);
        b.names.into_iter().zip(b.shapes).collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn embedding_param_count(&self) -> usize {
        self.names
            .iter()
            .zip(&self.tensors)
            .filter(|(n, _)| n.starts_with("embed."))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}
