//! Deterministic training loop, checkpoints and run artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use smoothfp8::checkpoint::{Checkpoint, Payload, FLAG_FOLDED};
use smoothfp8::diagnostics::{channel_stats, write_csv, DiagnosticsRow};
use smoothfp8::nn::{cross_entropy_loss, l2_penalty, l2_penalty_grad, mse_loss, L2Mode};
use smoothfp8::optimizer::{memory_report, Adam, Moment};
use smoothfp8::scaling::{channel_amax, ChannelScales, QuantStats, Scale, ScaledTensor};
use smoothfp8::swiglu::fold_scales;
use smoothfp8::{Format, Tensor};

use crate::config::{RunConfig, Task};
use crate::data::{load_corpus, stream_rng, synthetic_text, LmData, Regression, TeacherSpec};
use crate::model::{ForwardCache, Input, Mlp, MlpCache, Model};

enum Data {
    Lm(LmData),
    Regression(Regression),
}

enum Batch {
    Lm { contexts: Vec<Vec<u8>>, targets: Vec<usize> },
    Dense { x: Tensor, y: Tensor },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Divergence {
    pub step: u64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Counters {
    pub saturations: u64,
    pub underflows: u64,
}

impl From<QuantStats> for Counters {
    fn from(s: QuantStats) -> Self {
        Counters { saturations: s.saturations, underflows: s.underflows }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemorySummary {
    pub master_bytes: u64,
    pub m_bytes: u64,
    pub v_bytes: u64,
    pub scale_bytes: u64,
    pub total_bytes: u64,
    pub bytes_per_param: f64,
}

/// Outcome of a run, written into the manifest.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub steps_completed: u64,
    pub n_params: usize,
    pub diverged: Option<Divergence>,
    /// Mean training loss over the last `min(50, steps)` steps.
    pub final_loss: Option<f64>,
    pub eval_loss: Option<f64>,
    /// Per quantization site, accumulated over every step.
    pub sites: BTreeMap<String, Counters>,
    /// Sum over blocks of the SwiGLU-output quantizer counts.
    pub w3_input_saturations: u64,
    pub m_moment: Counters,
    pub v_moment: Counters,
    pub memory: MemorySummary,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub adam: Adam,
    data: Data,
    pub step: u64,
    pub loss_rows: Vec<LossRow>,
    pub diag_rows: Vec<DiagnosticsRow>,
    pub totals: BTreeMap<String, QuantStats>,
    pub diverged: Option<Divergence>,
    initial_loss: Option<f64>,
}

fn is_divergence(e: &anyhow::Error) -> bool {
    e.downcast_ref::<smoothfp8::Error>().is_some_and(|e| e.is_divergence())
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Model::new(&cfg, &mut init)?;
        let data = match cfg.task {
            Task::Lm => {
                let bytes = match &cfg.corpus {
                    Some(p) => load_corpus(Path::new(p))?,
                    None => synthetic_text(cfg.seed, cfg.synthetic_bytes),
                };
                Data::Lm(LmData::new(bytes, cfg.context, cfg.seed, cfg.seq_len)?)
            }
            Task::Regression => {
                Data::Regression(TeacherSpec::new(cfg.d_in, cfg.d_out, cfg.n_samples).generate(cfg.seed))
            }
        };
        let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.len()).collect();
        let adam = Adam::new(cfg.adam(), &sizes)?;
        Ok(Trainer {
            cfg,
            model,
            adam,
            data,
            step: 0,
            loss_rows: Vec::new(),
            diag_rows: Vec::new(),
            totals: BTreeMap::new(),
            diverged: None,
            initial_loss: None,
        })
    }

    fn batch(&self, step: u64) -> Batch {
        match &self.data {
            Data::Lm(d) => {
                let b = d.train_batch(step, self.cfg.batch_size, self.cfg.seq_len);
                Batch::Lm { contexts: b.contexts, targets: b.targets }
            }
            Data::Regression(r) => {
                let n = r.x.shape()[0];
                let rows: Vec<usize> = if self.cfg.batch_size >= n {
                    (0..n).collect()
                } else {
                    let mut rng = stream_rng(self.cfg.seed, 1 + step);
                    (0..self.cfg.batch_size).map(|_| rng.gen_range(0..n)).collect()
                };
                let pick = |t: &Tensor| {
                    let c = t.shape()[1];
                    Tensor::from_fn(rows.len(), c, |i, j| t.at(rows[i], j))
                };
                Batch::Dense { x: pick(&r.x), y: pick(&r.y) }
            }
        }
    }

    fn loss_of(model: &mut Model, batch: &Batch) -> Result<(f64, Tensor, ForwardCache)> {
        Ok(match batch {
            Batch::Lm { contexts, targets } => {
                let (logits, cache) = model.forward(Input::Tokens(contexts))?;
                let (l, g) = cross_entropy_loss(&logits, targets)?;
                (l, g, cache)
            }
            Batch::Dense { x, y } => {
                let (out, cache) = model.forward(Input::Dense(x))?;
                let (l, g) = mse_loss(&out, y)?;
                (l, g, cache)
            }
        })
    }

    fn record_sites(&mut self, cache: &ForwardCache) {
        for (i, c) in cache.blocks.iter().enumerate() {
            let entries: Vec<(&str, QuantStats)> = match c {
                MlpCache::SwiGlu(c) => vec![("x", c.gate.x_stats.stats), ("w3_in", c.out_stats.stats)],
                MlpCache::Gelu(c) => vec![("hidden", c.hidden_stats.stats)],
            };
            for (name, s) in entries {
                self.totals.entry(format!("block{i}.{name}")).or_default().merge(s);
            }
        }
    }

    fn record_diagnostics(&mut self, cache: &ForwardCache) -> Result<()> {
        let it = self.step;
        for (i, (block, c)) in self.model.blocks.iter().zip(&cache.blocks).enumerate() {
            let layer = format!("block{i}");
            let site_row = |tensor: &str, s: &smoothfp8::scaling::SiteStats| DiagnosticsRow {
                amax_pre: Some(s.amax_pre),
                amax_post: Some(s.amax_post),
                scale: Some(s.scale),
                saturations: Some(s.stats.saturations),
                ..DiagnosticsRow::tensor(it, &layer, tensor)
            };
            match (block, c) {
                (Mlp::SwiGlu(b), MlpCache::SwiGlu(c)) => {
                    self.diag_rows.push(site_row("x", &c.gate.x_stats));
                    self.diag_rows.push(site_row("w3_in", &c.out_stats));
                    let stats = channel_stats(&b.w1, &b.w2)?;
                    let amax = channel_amax(&c.u)?;
                    for (ch, (s, a)) in stats.iter().zip(&amax).enumerate() {
                        self.diag_rows.push(DiagnosticsRow {
                            channel: Some(ch),
                            cos_w1w2: Some(s.cos_w1w2),
                            norm_w1: Some(s.norm_w1),
                            norm_w2: Some(s.norm_w2),
                            amax_pre: Some(*a),
                            scale: c.scales.as_ref().map(|sc| sc.as_slice()[ch]),
                            ..DiagnosticsRow::tensor(it, &layer, "channel")
                        });
                    }
                }
                (Mlp::Gelu(_), MlpCache::Gelu(c)) => self.diag_rows.push(site_row("hidden", &c.hidden_stats)),
                _ => unreachable!("cache built by the same block"),
            }
        }
        Ok(())
    }

    /// One optimizer step. Returns `false` once the run has diverged.
    pub fn step_once(&mut self) -> Result<bool> {
        if self.diverged.is_some() {
            return Ok(false);
        }
        match self.try_step() {
            Ok(()) => Ok(self.diverged.is_none()),
            Err(e) if is_divergence(&e) => {
                self.diverged = Some(Divergence { step: self.step, reason: e.to_string() });
                Ok(false)
            }
            Err(e) => Err(e),
        }
    }

    fn try_step(&mut self) -> Result<()> {
        let step = self.step;
        let lr = self.cfg.lr_at(step);
        if self.cfg.spike_at == Some(step) {
            if let Some(Mlp::SwiGlu(b)) = self.model.blocks.get_mut(self.cfg.spike_layer) {
                b.arm_spike(self.cfg.spike_factor);
            }
        }
        let batch = self.batch(step);
        let (mut loss, dout, cache) = Self::loss_of(&mut self.model, &batch)?;
        let coupled = self.cfg.mu > 0.0 && self.cfg.l2() == L2Mode::Coupled;
        if coupled {
            loss += self.model.params().iter().map(|(_, t)| l2_penalty(t.data(), self.cfg.mu)).sum::<f64>();
        }
        if !loss.is_finite() {
            return Err(smoothfp8::Error::NonFinite(format!("loss is {loss}")).into());
        }
        let first = *self.initial_loss.get_or_insert(loss);
        if loss > self.cfg.divergence_factor * first {
            self.diverged = Some(Divergence {
                step,
                reason: format!("loss {loss} exceeds {} times the initial {first}", self.cfg.divergence_factor),
            });
            return Ok(());
        }
        self.record_sites(&cache);
        let diag_due =
            step % self.cfg.diag_every == 0 || self.cfg.spike_at == Some(step) || step + 1 == self.cfg.steps;
        if diag_due {
            self.record_diagnostics(&cache)?;
        }
        self.loss_rows.push(LossRow { step, lr, loss });

        let mut grads = self.model.backward(&dout, &cache)?;
        if coupled {
            for ((_, p), g) in self.model.params().iter().zip(&mut grads) {
                l2_penalty_grad(p.data(), self.cfg.mu, g.data_mut())?;
            }
        }
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        let mut params = self.model.params_mut();
        self.adam.step(&mut params, &grad_refs, lr)?;
        self.step += 1;
        Ok(())
    }

    /// Train until `cfg.steps` or divergence.
    pub fn run(&mut self) -> Result<()> {
        while self.step < self.cfg.steps && self.step_once()? {}
        Ok(())
    }

    /// Mean loss on the held-out batches, computed on a copy of the model so
    /// that scaling state is untouched.
    pub fn eval_loss(&self) -> Result<f64> {
        let mut model = self.model.clone();
        match &self.data {
            Data::Lm(d) => {
                let mut total = 0.0;
                for i in 0..self.cfg.eval_batches {
                    let b = d.eval_batch(i, self.cfg.batch_size, self.cfg.seq_len);
                    let batch = Batch::Lm { contexts: b.contexts, targets: b.targets };
                    total += Self::loss_of(&mut model, &batch)?.0;
                }
                Ok(total / self.cfg.eval_batches as f64)
            }
            Data::Regression(r) => {
                let batch = Batch::Dense { x: r.x.clone(), y: r.y.clone() };
                Ok(Self::loss_of(&mut model, &batch)?.0)
            }
        }
    }

    pub fn summary(&self) -> Summary {
        let (m, v) = self.adam.totals();
        let n = self.model.n_params();
        let mem = memory_report(n as u64, self.adam.states.len() as u64, &self.adam.config);
        let tail = self.loss_rows.len().min(50);
        let final_loss = (tail > 0 && self.diverged.is_none()).then(|| {
            self.loss_rows[self.loss_rows.len() - tail..].iter().map(|r| r.loss).sum::<f64>() / tail as f64
        });
        let eval_loss = if self.diverged.is_none() { self.eval_loss().ok().filter(|l| l.is_finite()) } else { None };
        Summary {
            steps_completed: self.step,
            n_params: n,
            diverged: self.diverged.clone(),
            final_loss,
            eval_loss,
            sites: self.totals.iter().map(|(k, s)| (k.clone(), (*s).into())).collect(),
            w3_input_saturations: self
                .totals
                .iter()
                .filter(|(k, _)| k.ends_with(".w3_in"))
                .map(|(_, s)| s.saturations)
                .sum(),
            m_moment: m.into(),
            v_moment: v.into(),
            memory: MemorySummary {
                master_bytes: mem.master,
                m_bytes: mem.m,
                v_bytes: mem.v,
                scale_bytes: mem.scales,
                total_bytes: mem.total,
                bytes_per_param: mem.bytes_per_param(n as u64),
            },
        }
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,lr,loss\n");
        for r in &self.loss_rows {
            writeln!(s, "{},{},{}", r.step, r.lr, r.loss).expect("writing to a string");
        }
        s
    }

    pub fn diagnostics_csv(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_csv(&mut buf, &self.diag_rows)?;
        Ok(buf)
    }

    /// Full training state: parameters, optimizer moments (as stored codes
    /// for quantized formats), scaling histories and smooth-scale state.
    pub fn checkpoint(&mut self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.push("meta.step", vec![1], Payload::U64(vec![self.step]))?;
        if let Some(l) = self.initial_loss {
            ck.push_f64("meta.initial_loss", vec![1], vec![l])?;
        }
        for (name, t) in self.model.params() {
            ck.push_f64(format!("param.{name}"), t.shape().to_vec(), t.data().to_vec())?;
        }
        for (i, s) in self.adam.states.iter().enumerate() {
            for (tag, mom) in [("m", &s.m), ("v", &s.v)] {
                let key = format!("adam.{i}.{tag}");
                match mom {
                    Moment::Wide(v) => ck.push_f64(key, vec![v.len()], v.clone())?,
                    Moment::Quantized(q) => {
                        ck.push(key, vec![q.codes.len()], Payload::Codes(q.format, q.codes.clone()))?;
                        ck.push_f64(format!("adam.{i}.{tag}_scale"), vec![1], vec![mom.scale()])?;
                    }
                }
            }
            let c = vec![s.step, s.m_stats.saturations, s.m_stats.underflows, s.v_stats.saturations, s.v_stats.underflows];
            ck.push(format!("adam.{i}.counters"), vec![5], Payload::U64(c))?;
        }
        for (name, site) in self.model.sites_mut() {
            if let Some(h) = site.history() {
                let v: Vec<f64> = h.values().collect();
                ck.push_f64(format!("site.{name}"), vec![v.len()], v)?;
            }
        }
        for (i, b) in self.model.blocks.iter().enumerate() {
            if let Mlp::SwiGlu(b) = b {
                ck.push(format!("smooth.{i}.forwards"), vec![1], Payload::U64(vec![b.forward_count() as u64]))?;
                if let Some(s) = &b.channel_scales {
                    ck.push_f64(format!("smooth.{i}.scales"), vec![s.len()], s.as_slice().to_vec())?;
                }
            }
        }
        for (k, s) in &self.totals {
            ck.push(format!("totals.{k}"), vec![2], Payload::U64(vec![s.saturations, s.underflows]))?;
        }
        Ok(ck)
    }

    /// Rebuild a trainer mid-run. Loss and diagnostics rows start empty.
    pub fn from_checkpoint(cfg: RunConfig, ck: &Checkpoint) -> Result<Self> {
        if ck.folded() {
            bail!("folded inference checkpoints cannot be resumed");
        }
        let mut t = Trainer::new(cfg)?;
        t.step = ck.u64s("meta.step")?[0];
        if ck.get("meta.initial_loss").is_some() {
            t.initial_loss = Some(ck.f64s("meta.initial_loss")?[0]);
        }
        let names: Vec<String> = t.model.params().into_iter().map(|(n, _)| n).collect();
        for (name, p) in names.iter().zip(t.model.params_mut()) {
            let v = ck.f64s(&format!("param.{name}"))?;
            if v.len() != p.len() {
                bail!("checkpoint parameter {name} has {} values, model expects {}", v.len(), p.len());
            }
            p.data_mut().copy_from_slice(v);
        }
        for (i, s) in t.adam.states.iter_mut().enumerate() {
            for tag in ["m", "v"] {
                let key = format!("adam.{i}.{tag}");
                let rec = ck.require(&key)?;
                let mom = match &rec.payload {
                    Payload::F64(v) => Moment::Wide(v.clone()),
                    Payload::Codes(f, codes) => {
                        let scale = ck.f64s(&format!("adam.{i}.{tag}_scale"))?[0];
                        Moment::Quantized(ScaledTensor {
                            codes: codes.clone(),
                            scale: Scale::Tensor(scale),
                            format: *f,
                            shape: vec![codes.len()],
                            stats: QuantStats::default(),
                        })
                    }
                    _ => bail!("unexpected payload type for {key}"),
                };
                let expected = if tag == "m" { &s.m } else { &s.v };
                if std::mem::discriminant(expected) != std::mem::discriminant(&mom) || expected.len() != mom.len() {
                    bail!("optimizer state {key} does not match the configured moment formats");
                }
                if tag == "m" {
                    s.m = mom;
                } else {
                    s.v = mom;
                }
            }
            let c = ck.u64s(&format!("adam.{i}.counters"))?;
            s.step = c[0];
            s.m_stats = QuantStats { saturations: c[1], underflows: c[2] };
            s.v_stats = QuantStats { saturations: c[3], underflows: c[4] };
        }
        for (name, site) in t.model.sites_mut() {
            if let Some(h) = site.history_mut() {
                h.clear();
                for &v in ck.f64s(&format!("site.{name}"))? {
                    h.record(v)?;
                }
            }
        }
        for (i, b) in t.model.blocks.iter_mut().enumerate() {
            if let Mlp::SwiGlu(b) = b {
                b.set_forward_count(ck.u64s(&format!("smooth.{i}.forwards"))?[0] as usize);
                if ck.get(&format!("smooth.{i}.scales")).is_some() {
                    b.channel_scales = Some(ChannelScales::new(ck.f64s(&format!("smooth.{i}.scales"))?.to_vec())?);
                }
            }
        }
        for rec in &ck.records {
            if let Some(k) = rec.name.strip_prefix("totals.") {
                let v = ck.u64s(&rec.name)?;
                t.totals.insert(k.to_string(), QuantStats { saturations: v[0], underflows: v[1] });
            }
        }
        Ok(t)
    }

    /// Inference export: smooth scales folded into w1 and w3, weights stored
    /// as E4M3 codes with their scales.
    pub fn folded_checkpoint(&self) -> Result<Option<Checkpoint>> {
        let mut ck = Checkpoint { flags: FLAG_FOLDED, records: Vec::new() };
        let mut any = false;
        for (i, b) in self.model.blocks.iter().enumerate() {
            let Mlp::SwiGlu(b) = b else { continue };
            if b.channel_scales.is_none() {
                continue;
            }
            any = true;
            let f = fold_scales(b, Some(Format::E4M3))?;
            for (tag, q) in [("w1", &f.w1_q), ("w2", &f.w2_q), ("w3", &f.w3_q)] {
                let q = q.as_ref().expect("format given");
                ck.push(format!("block{i}.{tag}"), q.shape.clone(), Payload::Codes(q.format, q.codes.clone()))?;
                let scales = match &q.scale {
                    Scale::Tensor(s) => vec![*s],
                    Scale::Channel(c) => c.as_slice().to_vec(),
                };
                ck.push_f64(format!("block{i}.{tag}_scale"), vec![scales.len()], scales)?;
            }
        }
        Ok(any.then_some(ck))
    }
}

/// Everything a finished run produced.
pub struct RunArtifacts {
    pub summary: Summary,
    pub loss_csv: String,
    pub diagnostics_csv: Vec<u8>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_text: &'a str,
    config: &'a RunConfig,
    seed: u64,
    resumed_from_step: Option<u64>,
    wall_time_s: f64,
    summary: &'a Summary,
}

/// Run a configuration, optionally resuming, inside a pool of `cfg.threads`
/// workers. With `out`, writes the artifacts there.
pub fn run_config(
    cfg: &RunConfig,
    config_text: &str,
    resume: Option<&Checkpoint>,
    out: Option<&Path>,
) -> Result<RunArtifacts> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build()?;
    pool.install(|| {
        let start = Instant::now();
        let mut trainer = match resume {
            Some(ck) => Trainer::from_checkpoint(cfg.clone(), ck)?,
            None => Trainer::new(cfg.clone())?,
        };
        let resumed_from_step = resume.map(|_| trainer.step);
        trainer.run()?;
        let summary = trainer.summary();
        let loss_csv = trainer.loss_csv();
        let diagnostics_csv = trainer.diagnostics_csv()?;
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            std::fs::write(dir.join("config.toml"), config_text)?;
            std::fs::write(dir.join("loss.csv"), &loss_csv)?;
            std::fs::write(dir.join("diagnostics.csv"), &diagnostics_csv)?;
            trainer.checkpoint()?.write_to(std::fs::File::create(dir.join("checkpoint.bin"))?)?;
            if let Some(f) = trainer.folded_checkpoint()? {
                f.write_to(std::fs::File::create(dir.join("folded.bin"))?)?;
            }
            let manifest = Manifest {
                config_text,
                config: cfg,
                seed: cfg.seed,
                resumed_from_step,
                wall_time_s: start.elapsed().as_secs_f64(),
                summary: &summary,
            };
            std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        }
        Ok(RunArtifacts { summary, loss_csv, diagnostics_csv })
    })
}
