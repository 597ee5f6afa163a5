//! Alternating adversarial training with checkpointed model bundles.
//!
//! One iteration is one discriminator step followed by one generator (and
//! encoder) step on the same latents. Every random draw of iteration `t`
//! comes from the stream `train/t` of the run seed, so a resumed run
//! replays an uninterrupted one exactly.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dataset::{sample_positive_pairs, sample_view_tuples, Dataset, ObjectViews, Split};
use crate::error::{Error, Result};
use crate::models::{sample_priors, ArchConfig, NetSpec, Network};
use crate::nn::checkpoint::{self, write_atomic};
use crate::nn::{adam_step, AdamConfig};
use crate::objectives::{self, Bound, LossVariant, Scores};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gmv,
    Cgmv,
    Cgan,
    Dcganx2,
    Dcganx4,
    Dcganx8,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] =
        [ModelKind::Gmv, ModelKind::Cgmv, ModelKind::Cgan, ModelKind::Dcganx2, ModelKind::Dcganx4, ModelKind::Dcganx8];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gmv => "gmv",
            ModelKind::Cgmv => "cgmv",
            ModelKind::Cgan => "cgan",
            ModelKind::Dcganx2 => "dcganx2",
            ModelKind::Dcganx4 => "dcganx4",
            ModelKind::Dcganx8 => "dcganx8",
        }
    }

    /// Tuple size of the joint baselines.
    pub fn joint_views(self) -> Option<usize> {
        match self {
            ModelKind::Dcganx2 => Some(2),
            ModelKind::Dcganx4 => Some(4),
            ModelKind::Dcganx8 => Some(8),
            _ => None,
        }
    }

    /// Models with an encoder, conditioned on an input image.
    pub fn is_conditional(self) -> bool {
        matches!(self, ModelKind::Cgmv | ModelKind::Cgan)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown model `{s}` (expected gmv, cgmv, cgan, dcganx2, dcganx4, dcganx8)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub batch: usize,
    /// Total iterations; a resumed run continues up to this count.
    pub steps: u64,
    /// Generator rate, also used for the encoder.
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub seed: u64,
    pub arch: ArchConfig,
    pub loss: LossVariant,
    pub checkpoint_every: u64,
}

impl TrainConfig {
    /// Defaults for `model`: GMV and the joint baselines use 1e-3 (G) and
    /// 2e-4 (D); the conditional models use 5e-5 for every network.
    pub fn new(model: ModelKind) -> Self {
        let (lr_g, lr_d) = if model.is_conditional() { (5e-5, 5e-5) } else { (1e-3, 2e-4) };
        Self {
            model,
            batch: 64,
            steps: 8000,
            lr_g,
            lr_d,
            beta1: 0.9,
            seed: 0,
            arch: ArchConfig::default(),
            loss: LossVariant::Nonsaturating,
            checkpoint_every: 500,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.batch < 2 {
            return Err(Error::BatchTooSmall(self.batch));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Invalid("checkpoint interval must be positive".into()));
        }
        self.adam_g().validate()?;
        self.adam_d().validate()
    }

    pub fn adam_g(&self) -> AdamConfig {
        AdamConfig { lr: self.lr_g, beta1: self.beta1, ..AdamConfig::default() }
    }

    pub fn adam_d(&self) -> AdamConfig {
        AdamConfig { lr: self.lr_d, beta1: self.beta1, ..AdamConfig::default() }
    }
}

/// One JSON line per iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    /// Mean discriminator output on real inputs.
    pub d_real: f64,
    /// Mean discriminator output over all fake terms.
    pub d_fake: f64,
    pub wall_ms: f64,
}

pub const BUNDLE_FILE: &str = "bundle.json";
pub const LOG_FILE: &str = "log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format: String,
    pub model_kind: ModelKind,
    pub step: u64,
    pub config: TrainConfig,
    /// Role (`g`, `d`, `e`) to checkpoint file name, relative to the bundle.
    pub members: Vec<(String, String)>,
}

/// A trained (or freshly initialized) model: generator, discriminator and,
/// for conditional models, encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: TrainConfig,
    pub g: Network<f32>,
    pub d: Network<f32>,
    pub e: Option<Network<f32>>,
}

impl ModelBundle {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let a = &cfg.arch;
        let seed = |name: &str| rng::derive_seed(cfg.seed, name);
        let (g, d) = match cfg.model.joint_views() {
            Some(k) => (Network::joint_generator(a, k, seed("init/g"))?, Network::tuple_discriminator(a, k, seed("init/d"))?),
            None => (Network::generator(a, seed("init/g"))?, Network::pair_discriminator(a, seed("init/d"))?),
        };
        let e = cfg.model.is_conditional().then(|| Network::encoder(a, seed("init/e"))).transpose()?;
        Ok(Self { config: *cfg, g, d, e })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.model
    }

    /// Completed iterations (the discriminator's Adam step count).
    pub fn step(&self) -> u64 {
        self.d.params.step
    }

    fn members(&self) -> Vec<(&'static str, &Network<f32>)> {
        let mut m = vec![("g", &self.g), ("d", &self.d)];
        if let Some(e) = &self.e {
            m.push(("e", e));
        }
        m
    }

    /// Write `{g,d,e}.mvck` and `bundle.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut members = Vec::new();
        for (role, net) in self.members() {
            let file = format!("{role}.mvck");
            let extra = serde_json::json!({ "role": role, "model_kind": self.kind() });
            checkpoint::save(&dir.join(&file), &net.params, serde_json::to_value(&net.spec)?, self.config.seed, extra)?;
            members.push((role.to_string(), file));
        }
        let manifest = BundleManifest {
            format: "mvgen-bundle-1".into(),
            model_kind: self.kind(),
            step: self.step(),
            config: self.config,
            members,
        };
        write_atomic(&dir.join(BUNDLE_FILE), &serde_json::to_vec_pretty(&manifest)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(BUNDLE_FILE);
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: BundleManifest = serde_json::from_slice(&text)?;
        let mut nets = std::collections::HashMap::new();
        for (role, file) in &manifest.members {
            let (params, meta) = checkpoint::load::<f32>(&dir.join(file))?;
            let spec: NetSpec = serde_json::from_value(meta.arch)?;
            nets.insert(role.clone(), Network { spec, params });
        }
        let mut take = |role: &str| nets.remove(role);
        let g = take("g").ok_or_else(|| Error::Format("bundle lacks a generator".into()))?;
        let d = take("d").ok_or_else(|| Error::Format("bundle lacks a discriminator".into()))?;
        let e = take("e");
        if e.is_some() != manifest.model_kind.is_conditional() {
            return Err(Error::Format(format!("encoder presence does not match model `{}`", manifest.model_kind)));
        }
        Ok(Self { config: manifest.config, g, d, e })
    }

    /// Eval-mode generation; one `[N, 3, H, H]` batch per generator head.
    pub fn generate(&self, c: &Tensor<f32>, v: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        self.g.sample(c, v)
    }

    /// Eval-mode content codes `E(x)`.
    pub fn encode(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let e = self.e.as_ref().ok_or_else(|| Error::Invalid(format!("model `{}` has no encoder", self.kind())))?;
        Ok(e.infer(x)?.0)
    }
}

/// Drives the alternating updates of one bundle over one dataset.
pub struct Trainer<'a> {
    pub bundle: ModelBundle,
    ds: &'a Dataset,
    objects: Vec<ObjectViews>,
    pending: Option<(u64, Draws)>,
}

/// The per-iteration draws, shared by both half-steps.
struct Draws {
    real: Vec<Tensor<f32>>,
    c: Tensor<f32>,
    v: [Tensor<f32>; 3],
    z: Tensor<f32>,
}

impl<'a> Trainer<'a> {
    pub fn new(bundle: ModelBundle, ds: &'a Dataset) -> Result<Self> {
        bundle.config.validate()?;
        if ds.image_size() != bundle.config.arch.image_size {
            return Err(Error::Invalid(format!(
                "dataset images are {}px, model expects {}px",
                ds.image_size(),
                bundle.config.arch.image_size
            )));
        }
        let objects = ds.objects(Split::Train);
        let need = bundle.kind().joint_views().unwrap_or(2);
        if !objects.iter().any(|o| o.indices.len() >= need) {
            return Err(Error::Invalid(format!("no training object has {need} views")));
        }
        Ok(Self { bundle, ds, objects, pending: None })
    }

    fn draw(&self, t: u64) -> Result<Draws> {
        let cfg = &self.bundle.config;
        let mut r = rng::stream(cfg.seed, &format!("train/{t}"));
        let b = cfg.batch;
        let real = match cfg.model.joint_views() {
            Some(k) => sample_view_tuples(self.ds, &self.objects, b, k, &mut r)?,
            None => {
                let p = sample_positive_pairs(self.ds, &self.objects, b, &mut r)?;
                vec![p.x1, p.x2]
            }
        };
        let (cd, vd) = (cfg.arch.content_dim, cfg.arch.view_dim);
        let (c, v1) = sample_priors(&mut r, b, cd, vd);
        let (_, v2) = sample_priors(&mut r, b, 1, vd);
        let (_, v3) = sample_priors(&mut r, b, 1, vd);
        let z = Tensor::new(&[b, cd + vd], rng::standard_normal(&mut r, b * (cd + vd)))?;
        Ok(Draws { real, c, v: [v1, v2, v3], z })
    }

    /// Scores for the current model kind. `with_real` adds the real term.
    fn scores(&self, graph: &mut Graph<f32>, m: &mut Bound<'_, f32>, d: &Draws, with_real: bool) -> Result<Scores> {
        let real: Vec<Var> = d.real.iter().map(|x| graph.constant(x.clone())).collect();
        let pair = with_real.then(|| (real[0], real[real.len() - 1]));
        match self.bundle.kind() {
            ModelKind::Gmv => {
                let c = graph.constant(d.c.clone());
                let v1 = graph.constant(d.v[0].clone());
                let v2 = graph.constant(d.v[1].clone());
                objectives::gmv_scores(graph, m, pair, c, v1, v2)
            }
            ModelKind::Cgmv => {
                let v = [0, 1, 2].map(|i| graph.constant(d.v[i].clone()));
                objectives::cgmv_scores(graph, m, pair, real[1], v)
            }
            ModelKind::Cgan => {
                let v = graph.constant(d.v[0].clone());
                objectives::cgan_scores(graph, m, pair, real[1], v)
            }
            _ => {
                let z = graph.constant(d.z.clone());
                objectives::gan_scores(graph, m, with_real.then_some(real.as_slice()), z)
            }
        }
    }

    /// Discriminator half of iteration `step() + 1`. Draws the
    /// iteration's data and latents and keeps them for [`Self::g_step`].
    pub fn d_step(&mut self) -> Result<DStep> {
        let t = self.bundle.step() + 1;
        let draws = self.draw(t)?;
        let mut graph = Graph::new();
        let mut m = Bound::new(&mut graph, &self.bundle.g, &self.bundle.d, self.bundle.e.as_ref(), false, true);
        let s = self.scores(&mut graph, &mut m, &draws, true)?;
        let loss = objectives::discriminator_loss(&mut graph, &s)?;
        let d_loss = graph.value(loss).item() as f64;
        if !d_loss.is_finite() {
            return Err(Error::NonFinite(format!("discriminator loss at step {t}")));
        }
        let mean_of = |vars: &[Var]| {
            let (sum, n) = vars.iter().fold((0.0, 0usize), |(s, n), &v| {
                let d = graph.value(v).data();
                (s + d.iter().map(|&p| p as f64).sum::<f64>(), n + d.len())
            });
            sum / n as f64
        };
        let out = DStep { d_loss, d_real: mean_of(&s.real), d_fake: mean_of(&s.fake) };
        graph.backward(loss)?;
        // G and E were bound as constants; their batch statistics are dropped
        let db = m.db;
        self.bundle.d.params.zero_grads();
        self.bundle.d.absorb(&graph, db);
        adam_step(&mut self.bundle.d.params, &self.bundle.config.adam_d())?;
        self.pending = Some((t, draws));
        Ok(out)
    }

    /// Generator (and encoder) half, on the latents of the last
    /// [`Self::d_step`]. Returns the generator loss.
    pub fn g_step(&mut self) -> Result<f64> {
        let (t, draws) = self.pending.take().ok_or_else(|| Error::Invalid("generator step without a discriminator step".into()))?;
        let cfg = self.bundle.config;
        let mut graph = Graph::new();
        let mut m = Bound::new(&mut graph, &self.bundle.g, &self.bundle.d, self.bundle.e.as_ref(), true, false);
        let s = self.scores(&mut graph, &mut m, &draws, false)?;
        let loss = objectives::generator_loss(&mut graph, &s, cfg.loss)?;
        let g_loss = graph.value(loss).item() as f64;
        if !g_loss.is_finite() {
            return Err(Error::NonFinite(format!("generator loss at step {t}")));
        }
        graph.backward(loss)?;
        let (gb, eb) = (m.gb, m.e.map(|(_, b)| b));
        self.bundle.g.params.zero_grads();
        self.bundle.g.absorb(&graph, gb);
        adam_step(&mut self.bundle.g.params, &cfg.adam_g())?;
        if let (Some(e), Some(eb)) = (self.bundle.e.as_mut(), eb) {
            e.params.zero_grads();
            e.absorb(&graph, eb);
            adam_step(&mut e.params, &cfg.adam_g())?;
        }
        Ok(g_loss)
    }

    /// One full iteration: D step then G step.
    pub fn step(&mut self) -> Result<StepLog> {
        let start = Instant::now();
        let d = self.d_step()?;
        let g_loss = self.g_step()?;
        Ok(StepLog {
            step: self.bundle.step(),
            d_loss: d.d_loss,
            g_loss,
            d_real: d.d_real,
            d_fake: d.d_fake,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Outcome of a discriminator step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DStep {
    pub d_loss: f64,
    pub d_real: f64,
    pub d_fake: f64,
}

/// Where a run writes its bundle and log.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub dir: PathBuf,
}

impl RunDir {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join(LOG_FILE)
    }

    /// Keep only log lines up to `step` (after resuming from a checkpoint).
    fn truncate_log(&self, step: u64) -> Result<()> {
        let path = self.log_path();
        if !path.exists() {
            return Ok(());
        }
        let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut kept = String::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            let entry: StepLog = serde_json::from_str(&line)?;
            if entry.step <= step {
                kept.push_str(&line);
                kept.push('\n');
            }
        }
        fs::write(&path, kept).map_err(|e| Error::io(&path, e))
    }
}

/// Read a JSON-lines step log.
pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Train `bundle` up to `bundle.config.steps`. With `out`, the bundle is
/// checkpointed every interval and at the end, and the log is appended;
/// on error the last checkpoint is left in place. `observe` sees every
/// step after it is logged.
pub fn train(
    bundle: ModelBundle,
    ds: &Dataset,
    out: Option<&RunDir>,
    mut observe: impl FnMut(&StepLog, &ModelBundle) -> Result<()>,
) -> Result<ModelBundle> {
    let mut trainer = Trainer::new(bundle, ds)?;
    let cfg = trainer.bundle.config;
    let mut log = match out {
        Some(run) => {
            fs::create_dir_all(&run.dir).map_err(|e| Error::io(&run.dir, e))?;
            run.truncate_log(trainer.bundle.step())?;
            if !run.dir.join(BUNDLE_FILE).exists() || trainer.bundle.step() == 0 {
                trainer.bundle.save(&run.dir)?;
            }
            let path = run.log_path();
            Some(OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?)
        }
        None => None,
    };
    while trainer.bundle.step() < cfg.steps {
        let entry = trainer.step()?;
        if let (Some(f), Some(run)) = (log.as_mut(), out) {
            let mut line = serde_json::to_string(&entry)?;
            line.push('\n');
            f.write_all(line.as_bytes()).map_err(|e| Error::io(run.log_path(), e))?;
            if entry.step % cfg.checkpoint_every == 0 || entry.step == cfg.steps {
                f.flush().map_err(|e| Error::io(run.log_path(), e))?;
                trainer.bundle.save(&run.dir)?;
            }
        }
        observe(&entry, &trainer.bundle)?;
    }
    Ok(trainer.bundle)
}
