use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LinearIds {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NormIds {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct AttnIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct FfnIds {
    pub up: LinearIds,
    pub down: LinearIds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct EncLayerIds {
    pub norm1: NormIds,
    pub attn: AttnIds,
    pub norm2: NormIds,
    pub ffn: FfnIds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct DecLayerIds {
    pub norm1: NormIds,
    pub self_attn: AttnIds,
    pub norm2: NormIds,
    pub cross_attn: AttnIds,
    pub norm3: NormIds,
    pub ffn: FfnIds,
}

/// Index of every tensor in [`Parameters`], derived from the config alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub src_embed: usize,
    pub src_pos: usize,
    pub tgt_embed: usize,
    pub tgt_pos: usize,
    pub enc: Vec<EncLayerIds>,
    pub enc_norm: NormIds,
    pub dec: Vec<DecLayerIds>,
    pub dec_norm: NormIds,
    pub out: LinearIds,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> LinearIds {
        LinearIds {
            w: self.add(
                format!("{prefix}.weight"),
                (fan_in, fan_out),
                Init::Normal((fan_in as f64).powf(-0.5)),
            ),
            b: self.add(format!("{prefix}.bias"), (1, fan_out), Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, width: usize) -> NormIds {
        NormIds {
            gain: self.add(format!("{prefix}.gain"), (1, width), Init::Ones),
            bias: self.add(format!("{prefix}.bias"), (1, width), Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, width: usize) -> AttnIds {
        AttnIds {
            q: self.linear(&format!("{prefix}.q"), width, width),
            k: self.linear(&format!("{prefix}.k"), width, width),
            v: self.linear(&format!("{prefix}.v"), width, width),
            o: self.linear(&format!("{prefix}.o"), width, width),
        }
    }

    fn ffn(&mut self, prefix: &str, width: usize, hidden: usize) -> FfnIds {
        FfnIds {
            up: self.linear(&format!("{prefix}.up"), width, hidden),
            down: self.linear(&format!("{prefix}.down"), hidden, width),
        }
    }
}

fn build_layout(c: &ModelConfig) -> (Layout, Builder) {
    let mut b = Builder {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let w = c.width;
    let emb_std = (w as f64).powf(-0.5);
    let src_embed = b.add("encoder.embed".into(), (c.vocab_size, w), Init::Normal(emb_std));
    let src_pos = b.add("encoder.position".into(), (c.max_len, w), Init::Normal(emb_std));
    let enc = (1..=c.enc_layers)
        .map(|i| {
            let p = format!("encoder.layer{i}");
            EncLayerIds {
                norm1: b.norm(&format!("{p}.norm1"), w),
                attn: b.attn(&format!("{p}.self_attn"), w),
                norm2: b.norm(&format!("{p}.norm2"), w),
                ffn: b.ffn(&format!("{p}.ffn"), w, c.ffn_width),
            }
        })
        .collect();
    let enc_norm = b.norm("encoder.final_norm", w);
    let tgt_embed = b.add("decoder.embed".into(), (c.vocab_size, w), Init::Normal(emb_std));
    let tgt_pos = b.add("decoder.position".into(), (c.max_len, w), Init::Normal(emb_std));
    let dec = (1..=c.dec_layers)
        .map(|i| {
            let p = format!("decoder.layer{i}");
            DecLayerIds {
                norm1: b.norm(&format!("{p}.norm1"), w),
                self_attn: b.attn(&format!("{p}.self_attn"), w),
                norm2: b.norm(&format!("{p}.norm2"), w),
                cross_attn: b.attn(&format!("{p}.cross_attn"), w),
                norm3: b.norm(&format!("{p}.norm3"), w),
                ffn: b.ffn(&format!("{p}.ffn"), w, c.ffn_width),
            }
        })
        .collect();
    let dec_norm = b.norm("decoder.final_norm", w);
    let out = b.linear("output", w, c.vocab_size);
    let layout = Layout {
        src_embed,
        src_pos,
        tgt_embed,
        tgt_pos,
        enc,
        enc_norm,
        dec,
        dec_norm,
        out,
    };
    (layout, b)
}

/// All trainable tensors of a model, each addressable by a stable name such
/// as `encoder.layer3.self_attn.q.weight`. Layer numbers are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    config: ModelConfig,
    pub(crate) layout: Layout,
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
}

/// Deterministic initialization: linear weights ~ N(0, 1/fan_in),
/// embeddings ~ N(0, 1/width), biases 0, norm gains 1.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<Parameters> {
    config.validate()?;
    let (layout, builder) = build_layout(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = builder
        .shapes
        .iter()
        .zip(&builder.inits)
        .map(|(&shape, &init)| match init {
            Init::Zeros => Array2::zeros(shape),
            Init::Ones => Array2::ones(shape),
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).expect("positive std");
                Array2::from_shape_simple_fn(shape, || normal.sample(&mut rng))
            }
        })
        .collect();
    Ok(Parameters {
        config: config.clone(),
        layout,
        names: builder.names,
        tensors,
    })
}

impl Parameters {
    /// Rebuilds parameters from named tensors, e.g. when loading a
    /// checkpoint. Names and shapes must match the config's layout exactly.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Array2<f64>)>) -> Result<Self> {
        config.validate()?;
        let (layout, builder) = build_layout(config);
        if named.len() != builder.names.len() {
            return Err(Error::format(
                "parameters",
                format!("expected {} tensors, got {}", builder.names.len(), named.len()),
            ));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, t), (want, &shape)) in named.into_iter().zip(builder.names.iter().zip(&builder.shapes)) {
            if &name != want || t.dim() != shape {
                return Err(Error::format(
                    "parameters",
                    format!("tensor {name} {:?} where {want} {shape:?} was expected", t.dim()),
                ));
            }
            tensors.push(t);
        }
        Ok(Parameters {
            config: config.clone(),
            layout,
            names: builder.names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
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

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Array2::len).sum()
    }

    pub(crate) fn t(&self, id: usize) -> &Array2<f64> {
        &self.tensors[id]
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// A model that keeps only the listed 1-based encoder and decoder layers,
    /// stacked in the given order.
    pub fn restack(&self, enc_layers: &[usize], dec_layers: &[usize]) -> Result<Parameters> {
        let config = ModelConfig {
            enc_layers: enc_layers.len(),
            dec_layers: dec_layers.len(),
            ..self.config.clone()
        };
        let rename = |name: &str| -> Option<String> {
            for (side, keep) in [("encoder", enc_layers), ("decoder", dec_layers)] {
                let prefix = format!("{side}.layer");
                if let Some(rest) = name.strip_prefix(&prefix) {
                    let (num, tail) = rest.split_once('.').expect("layer names have a tail");
                    let num: usize = num.parse().expect("numeric layer index");
                    return keep
                        .iter()
                        .position(|&l| l == num)
                        .map(|new| format!("{prefix}{}.{tail}", new + 1));
                }
            }
            Some(name.to_string())
        };
        let mut named: Vec<(String, Array2<f64>)> = self
            .named()
            .filter_map(|(n, t)| rename(n).map(|n| (n, t.clone())))
            .collect();
        let (_, builder) = build_layout(&config);
        let order = |n: &String| builder.names.iter().position(|b| b == n);
        if named.iter().any(|(n, _)| order(n).is_none()) {
            return Err(Error::PlanMismatch("restack: layer index out of range".into()));
        }
        named.sort_by_key(|(n, _)| order(n));
        Parameters::from_named(&config, named)
    }
}

/// Gradients laid out like the [`Parameters`] they were computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    tensors: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &Parameters) -> Self {
        Gradients {
            tensors: params.tensors.iter().map(|t| Array2::zeros(t.dim())).collect(),
        }
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub(crate) fn t_mut(&mut self, id: usize) -> &mut Array2<f64> {
        &mut self.tensors[id]
    }

    pub fn get<'a>(&'a self, params: &Parameters, name: &str) -> Option<&'a Array2<f64>> {
        params.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Errors with the first parameter name holding a non-finite entry.
    pub fn check_finite(&self, params: &Parameters) -> Result<()> {
        match self.tensors.iter().position(|t| t.iter().any(|v| !v.is_finite())) {
            Some(i) => Err(Error::NonFiniteGradient {
                name: params.names[i].clone(),
            }),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let c = ModelConfig::default();
        let a = init_params(&c, 3).unwrap();
        assert_eq!(a, init_params(&c, 3).unwrap());
        assert_ne!(a, init_params(&c, 4).unwrap());
        assert!(a.all_finite());
    }

    #[test]
    fn names_and_shapes() {
        let c = ModelConfig::default();
        let p = init_params(&c, 0).unwrap();
        assert_eq!(p.get("encoder.layer1.self_attn.q.weight").unwrap().dim(), (32, 32));
        assert_eq!(p.get("decoder.layer2.cross_attn.o.bias").unwrap().dim(), (1, 32));
        assert_eq!(p.get("encoder.layer4.ffn.up.weight").unwrap().dim(), (32, 64));
        assert_eq!(p.get("output.weight").unwrap().dim(), (32, 16));
        assert!(p.get("encoder.layer5.norm1.gain").is_none());
        let unique: std::collections::HashSet<_> = p.names().iter().collect();
        assert_eq!(unique.len(), p.len());
    }

    #[test]
    fn restack_keeps_selected_layers() {
        let c = ModelConfig::default();
        let p = init_params(&c, 0).unwrap();
        let r = p.restack(&[2, 4], &[2]).unwrap();
        assert_eq!(r.config().enc_layers, 2);
        assert_eq!(
            r.get("encoder.layer2.ffn.up.weight"),
            p.get("encoder.layer4.ffn.up.weight")
        );
        assert_eq!(
            r.get("decoder.layer1.cross_attn.k.weight"),
            p.get("decoder.layer2.cross_attn.k.weight")
        );
        assert_eq!(r.get("output.weight"), p.get("output.weight"));
        assert!(p.restack(&[9], &[1]).is_err());
    }

    #[test]
    fn from_named_rejects_mismatch() {
        let c = ModelConfig::default();
        let p = init_params(&c, 0).unwrap();
        let mut named: Vec<_> = p.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
        named.swap(0, 1);
        assert!(Parameters::from_named(&c, named).is_err());
    }
}
