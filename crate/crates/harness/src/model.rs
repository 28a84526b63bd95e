//! Residual MLP models built from the core blocks.

use anyhow::{ensure, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use smoothfp8::nn::{LinearCache, LinearLayer, LinearSites, PrecisionPolicy, SiteConfig};
use smoothfp8::scaling::QuantSite;
use smoothfp8::swiglu::{BlockCache, BlockSites, GeluBlock, GeluCache, GeluSites, SmoothSettings, SwiGluBlock};
use smoothfp8::Tensor;

use crate::config::{Activation, RunConfig, Task};

pub const VOCAB: usize = 256;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}

#[derive(Clone, Debug)]
pub enum Mlp {
    SwiGlu(SwiGluBlock),
    Gelu(GeluBlock),
}

#[derive(Clone, Debug)]
pub enum MlpCache {
    SwiGlu(BlockCache),
    Gelu(GeluCache),
}

impl Mlp {
    fn forward(&mut self, x: &Tensor) -> Result<(Tensor, MlpCache)> {
        Ok(match self {
            Mlp::SwiGlu(b) => {
                let (y, c) = b.forward(x)?;
                (y, MlpCache::SwiGlu(c))
            }
            Mlp::Gelu(b) => {
                let (y, c) = b.forward(x)?;
                (y, MlpCache::Gelu(c))
            }
        })
    }

    /// Returns `dx` and the parameter gradients in [`Mlp::params`] order.
    fn backward(&mut self, dy: &Tensor, cache: &MlpCache) -> Result<(Tensor, Vec<Tensor>)> {
        Ok(match (self, cache) {
            (Mlp::SwiGlu(b), MlpCache::SwiGlu(c)) => {
                let g = b.backward(dy, c)?;
                (g.dx, vec![g.dw1, g.dw2, g.dw3])
            }
            (Mlp::Gelu(b), MlpCache::Gelu(c)) => {
                let (dx, dwa, dwb) = b.backward(dy, c)?;
                (dx, vec![dwa, dwb])
            }
            _ => unreachable!("cache built by the same block"),
        })
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Mlp::SwiGlu(b) => vec![("w1", &b.w1), ("w2", &b.w2), ("w3", &b.w3)],
            Mlp::Gelu(b) => vec![("wa", &b.wa), ("wb", &b.wb)],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Mlp::SwiGlu(b) => vec![&mut b.w1, &mut b.w2, &mut b.w3],
            Mlp::Gelu(b) => vec![&mut b.wa, &mut b.wb],
        }
    }

    pub fn sites_mut(&mut self) -> Vec<(&'static str, &mut QuantSite)> {
        match self {
            Mlp::SwiGlu(b) => b.sites.named_sites_mut(),
            Mlp::Gelu(b) => b.sites.named_sites_mut(),
        }
    }
}

/// Model input: byte contexts for the language model, features otherwise.
pub enum Input<'a> {
    Tokens(&'a [Vec<u8>]),
    Dense(&'a Tensor),
}

/// Optional byte embedding, residual MLP blocks of width `d`, linear head.
#[derive(Clone, Debug)]
pub struct Model {
    pub embed: Option<Tensor>,
    pub embed_site: QuantSite,
    pub blocks: Vec<Mlp>,
    pub head: LinearLayer,
}

pub struct ForwardCache {
    tokens: Option<Vec<Vec<u8>>>,
    pub blocks: Vec<MlpCache>,
    head: LinearCache,
}

impl Model {
    pub fn new(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d, d_out) = match cfg.task {
            Task::Lm => (cfg.context * cfg.embed_dim, VOCAB),
            Task::Regression => (cfg.d_in, cfg.d_out),
        };
        let sc = cfg.site_config();
        let edge = cfg.edge_policy();
        let embed = match cfg.task {
            Task::Lm => Some(uniform(rng, VOCAB, cfg.embed_dim, 1.0)),
            Task::Regression => None,
        };
        let h = cfg.hidden;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for _ in 0..cfg.blocks {
            let bound_in = 1.0 / (d as f64).sqrt();
            let bound_h = 1.0 / (h as f64).sqrt();
            blocks.push(match cfg.activation {
                Activation::Gelu => {
                    let wa = uniform(rng, d, h, bound_in);
                    let wb = uniform(rng, h, d, bound_h);
                    Mlp::Gelu(GeluBlock::new(wa, wb, GeluSites::new(&cfg.block_policy(), &sc)?)?)
                }
                Activation::Swiglu | Activation::SmoothSwiglu => {
                    let w1 = uniform(rng, d, h, bound_in);
                    let w2 = uniform(rng, d, h, bound_in);
                    let w3 = uniform(rng, h, d, bound_h);
                    let mode = cfg.swiglu_mode();
                    let sites = BlockSites::new(&cfg.block_policy(), mode, &sc)?;
                    let smooth =
                        SmoothSettings { margin: cfg.margin, refresh_every: cfg.smooth_refresh, ..Default::default() };
                    Mlp::SwiGlu(SwiGluBlock::new(w1, w2, w3, mode, sites)?.with_smooth(smooth))
                }
            });
        }
        let head_w = uniform(rng, d_out, d, 1.0 / (d as f64).sqrt());
        let head = LinearLayer::new(head_w, Some(Tensor::zeros(vec![d_out])), LinearSites::new(&edge, &sc)?)?;
        Ok(Model { embed, embed_site: edge_weight_site(&edge, &sc)?, blocks, head })
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Named parameters in a fixed order shared by gradients and optimizer state.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(e) = &self.embed {
            out.push(("embed".to_string(), e));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in b.params() {
                out.push((format!("block{i}.{n}"), t));
            }
        }
        out.push(("head.weight".to_string(), &self.head.weight));
        out.push(("head.bias".to_string(), self.head.bias.as_ref().expect("head has a bias")));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some(e) = &mut self.embed {
            out.push(e);
        }
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.push(&mut self.head.weight);
        out.push(self.head.bias.as_mut().expect("head has a bias"));
        out
    }

    /// Every quantization site with a stable name.
    pub fn sites_mut(&mut self) -> Vec<(String, &mut QuantSite)> {
        let mut out = vec![("embed".to_string(), &mut self.embed_site)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (n, s) in b.sites_mut() {
                out.push((format!("block{i}.{n}"), s));
            }
        }
        let h = &mut self.head.sites;
        out.push(("head.input".to_string(), &mut h.input));
        out.push(("head.weight".to_string(), &mut h.weight));
        out.push(("head.grad_output".to_string(), &mut h.grad_output));
        out
    }

    fn embed_tokens(&mut self, tokens: &[Vec<u8>]) -> Result<Tensor> {
        let table = self.embed.as_ref().expect("lm model has an embedding");
        let (table_q, _) = self.embed_site.apply(table)?;
        let e = table.shape()[1];
        let ctx = tokens.first().map_or(0, |c| c.len());
        ensure!(tokens.iter().all(|c| c.len() == ctx), "ragged token contexts");
        let mut x = Vec::with_capacity(tokens.len() * ctx * e);
        for c in tokens {
            for &b in c {
                x.extend_from_slice(table_q.row(b as usize));
            }
        }
        Ok(Tensor::from_vec(vec![tokens.len(), ctx * e], x)?)
    }

    pub fn forward(&mut self, input: Input<'_>) -> Result<(Tensor, ForwardCache)> {
        let (mut x, tokens) = match input {
            Input::Tokens(t) => (self.embed_tokens(t)?, Some(t.to_vec())),
            Input::Dense(x) => (x.clone(), None),
        };
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let (y, c) = b.forward(&x)?;
            x.add_assign(&y)?;
            caches.push(c);
        }
        let (out, head) = self.head.forward(&x)?;
        Ok((out, ForwardCache { tokens, blocks: caches, head }))
    }

    /// Parameter gradients in [`Model::params`] order.
    pub fn backward(&mut self, dout: &Tensor, cache: &ForwardCache) -> Result<Vec<Tensor>> {
        let hg = self.head.backward(dout, &cache.head)?;
        let mut dx = hg.dx;
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            let (dxb, g) = b.backward(&dx, c)?;
            dx.add_assign(&dxb)?;
            block_grads.push(g);
        }
        block_grads.reverse();
        let mut grads = Vec::new();
        if let (Some(table), Some(tokens)) = (&self.embed, &cache.tokens) {
            let e = table.shape()[1];
            let mut de = Tensor::zeros(table.shape().to_vec());
            let d = de.data_mut();
            for (r, ctx) in tokens.iter().enumerate() {
                let row = dx.row(r);
                for (j, &b) in ctx.iter().enumerate() {
                    let dst = &mut d[b as usize * e..(b as usize + 1) * e];
                    for (o, g) in dst.iter_mut().zip(&row[j * e..(j + 1) * e]) {
                        *o += g;
                    }
                }
            }
            grads.push(de);
        }
        for g in block_grads {
            grads.extend(g);
        }
        grads.push(hg.dw);
        let db = hg.dbias.expect("head has a bias");
        grads.push(Tensor::from_vec(vec![db.len()], db)?);
        Ok(grads)
    }
}

fn edge_weight_site(policy: &PrecisionPolicy, sc: &SiteConfig) -> Result<QuantSite> {
    Ok(policy.weights.site(sc)?)
}
