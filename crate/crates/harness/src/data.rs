//! Datasets: byte corpora for the language model, a teacher regression
//! problem, and a synthetic activation stream with a scheduled spike.

use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use smoothfp8::swiglu::sigmoid;
use smoothfp8::Tensor;

/// Independent random stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn load_corpus(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).with_context(|| format!("reading corpus {}", path.display()))?;
    if bytes.is_empty() {
        bail!("corpus {} is empty", path.display());
    }
    Ok(bytes)
}

/// Deterministic English-like text: sentences over a made-up vocabulary
/// with a sparse bigram structure, so a few bytes of context carry signal.
pub fn synthetic_text(seed: u64, n_bytes: usize) -> Vec<u8> {
    const CONS: &[u8] = b"bcdfghklmnprstvw";
    const VOWELS: &[u8] = b"aeiou";
    let mut rng = stream_rng(seed, 0x7E47);
    let vocab: Vec<Vec<u8>> = (0..160)
        .map(|_| {
            let syllables = rng.gen_range(1..=3);
            let mut w = Vec::new();
            for _ in 0..syllables {
                w.push(*CONS.choose(&mut rng).unwrap());
                w.push(*VOWELS.choose(&mut rng).unwrap());
            }
            if rng.gen_bool(0.4) {
                w.push(*CONS.choose(&mut rng).unwrap());
            }
            w
        })
        .collect();
    let successors: Vec<Vec<usize>> =
        (0..vocab.len()).map(|_| (0..6).map(|_| rng.gen_range(0..vocab.len())).collect()).collect();
    // Zipf-like preference among the successors.
    let weights = [0.4, 0.25, 0.15, 0.1, 0.06, 0.04];

    let mut out = Vec::with_capacity(n_bytes + 64);
    let mut word = rng.gen_range(0..vocab.len());
    while out.len() < n_bytes {
        let len = rng.gen_range(5..15);
        for k in 0..len {
            let w = &vocab[word];
            if k == 0 {
                out.push(w[0].to_ascii_uppercase());
                out.extend_from_slice(&w[1..]);
            } else {
                out.extend_from_slice(w);
            }
            out.push(if k + 1 == len { b'.' } else { b' ' });
            let r: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = successors[word].len() - 1;
            for (i, &p) in weights.iter().enumerate() {
                acc += p;
                if r < acc {
                    pick = i;
                    break;
                }
            }
            word = successors[word][pick];
        }
        out.push(b' ');
    }
    out.truncate(n_bytes);
    out
}

/// One next-byte prediction batch: `contexts[i]` holds the preceding bytes
/// of `targets[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LmBatch {
    pub contexts: Vec<Vec<u8>>,
    pub targets: Vec<usize>,
}

/// Byte corpus split into a training prefix and a held-out suffix.
#[derive(Clone, Debug)]
pub struct LmData {
    bytes: Vec<u8>,
    split: usize,
    context: usize,
    seed: u64,
}

impl LmData {
    pub fn new(bytes: Vec<u8>, context: usize, seed: u64, window: usize) -> Result<Self> {
        let split = bytes.len() * 9 / 10;
        if split < context + window + 1 || bytes.len() - split < context + window + 1 {
            bail!("corpus of {} bytes is too small for context {context} and window {window}", bytes.len());
        }
        Ok(LmData { bytes, split, context, seed })
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    fn sample(&self, rng: &mut ChaCha8Rng, lo: usize, hi: usize, batch: usize, seq: usize) -> LmBatch {
        let mut contexts = Vec::with_capacity(batch * seq);
        let mut targets = Vec::with_capacity(batch * seq);
        for _ in 0..batch {
            let start = rng.gen_range(lo + self.context..hi - seq);
            for p in start..start + seq {
                contexts.push(self.bytes[p - self.context..p].to_vec());
                targets.push(self.bytes[p] as usize);
            }
        }
        LmBatch { contexts, targets }
    }

    /// Training batch for `step`; depends only on the seed and the step.
    pub fn train_batch(&self, step: u64, batch: usize, seq: usize) -> LmBatch {
        let mut rng = stream_rng(self.seed, 1 + step);
        self.sample(&mut rng, 0, self.split, batch, seq)
    }

    /// Fixed held-out batch `i`.
    pub fn eval_batch(&self, i: usize, batch: usize, seq: usize) -> LmBatch {
        let mut rng = stream_rng(self.seed, u64::MAX - i as u64);
        self.sample(&mut rng, self.split, self.bytes.len(), batch, seq)
    }
}

/// Inputs and targets of a regression problem.
#[derive(Clone, Debug)]
pub struct Regression {
    pub x: Tensor,
    pub y: Tensor,
}

/// Teacher with `3 * d_out` hidden units `z² σ(z)` on random projections of
/// wide Gaussian inputs, plus label noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeacherSpec {
    pub d_in: usize,
    pub d_out: usize,
    pub n: usize,
    pub input_std: f64,
    pub weight_std: f64,
    pub out_scale: f64,
    pub noise: f64,
}

impl TeacherSpec {
    pub fn new(d_in: usize, d_out: usize, n: usize) -> Self {
        TeacherSpec { d_in, d_out, n, input_std: 4.0, weight_std: 1.5, out_scale: 0.01, noise: 0.1 }
    }

    pub fn generate(&self, seed: u64) -> Regression {
        let mut rng = stream_rng(seed, 0xDA7A);
        let mut normal = move || -> f64 { rng.sample(StandardNormal) };
        let x = Tensor::from_fn(self.n, self.d_in, |_, _| normal() * self.input_std);
        let units = 3;
        let a = Tensor::from_fn(self.d_in, units * self.d_out, |_, _| {
            normal() * self.weight_std / (self.d_in as f64).sqrt()
        });
        let z = x.matmul(&a).expect("shapes agree");
        let y = Tensor::from_fn(self.n, self.d_out, |r, k| {
            let s: f64 = (0..units).map(|j| z.at(r, k * units + j)).map(|z| z * z * sigmoid(z)).sum();
            s * self.out_scale + self.noise * normal()
        });
        Regression { x, y }
    }
}

/// `[tokens x channels]` Gaussian activations; at `spike_at` the largest
/// element of that batch is multiplied by `factor`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpikeStream {
    pub tokens: usize,
    pub channels: usize,
    pub spike_at: u64,
    pub factor: f64,
    pub seed: u64,
}

impl SpikeStream {
    pub fn batch(&self, iteration: u64) -> Tensor {
        let mut rng = stream_rng(self.seed, iteration);
        // Channels get fixed but different magnitudes.
        let mut crng = stream_rng(self.seed, u64::MAX);
        let mags: Vec<f64> = (0..self.channels).map(|_| 2f64.powf(crng.gen_range(-2.0..2.0))).collect();
        let mut t = Tensor::from_fn(self.tokens, self.channels, |_, c| {
            let z: f64 = rng.sample(StandardNormal);
            z * mags[c]
        });
        if iteration == self.spike_at {
            let data = t.data_mut();
            let i = (0..data.len()).fold(0, |b, i| if data[i].abs() > data[b].abs() { i } else { b });
            data[i] *= self.factor;
        }
        t
    }
}
