//! Evaluation battery: identity-preservation AUC, attribute statistics,
//! diversity, blur rate and content transfer.
//!
//! Identity is judged by a re-identification embedder trained to tell the
//! training objects apart; attributes by one small binary conv classifier
//! per attribute. Both are trained on the training split only.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Graph;
use crate::dataset::{
    attribute_bit, generate_dataset, Dataset, DatasetConfig, ObjectViews, Split, ATTRIBUTE_NAMES, NUM_ATTRIBUTES,
};
use crate::error::{Error, Result};
use crate::models::{sample_priors, ConvStackSpec, NetSpec, Network, OutputKind};
use crate::nn::checkpoint;
use crate::nn::{adam_step, AdamConfig};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::train::{ModelBundle, ModelKind};

/// Per-attribute cap on `-ln(BC)`.
pub const BHATTACHARYYA_CAP: f64 = 20.0;
pub const MIN_PAIRS: usize = 100;
pub const MIN_IMAGES: usize = 500;
/// Held-out accuracy an attribute classifier needs before it is used.
pub const CLASSIFIER_MIN_ACCURACY: f64 = 0.9;
pub const DECISION_THRESHOLD: f32 = 0.5;
const BLUR: usize = 9;
const CHUNK: usize = 250;

// ---------------------------------------------------------------- metrics

/// Probability that a positive distance is below a negative one, ties
/// counting one half. Sort-based, exact.
pub fn auc_lower_distance(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Invalid("AUC needs positive and negative distances".into()));
    }
    if pos.iter().chain(neg).any(|d| d.is_nan()) {
        return Err(Error::NonFinite("AUC distances".into()));
    }
    let mut sorted = neg.to_vec();
    sorted.sort_by(f64::total_cmp);
    // twice the win count, so ties stay integral
    let mut twice: u128 = 0;
    for &p in pos {
        let below_or_eq = sorted.partition_point(|&n| n <= p);
        let below = sorted.partition_point(|&n| n < p);
        twice += 2 * (sorted.len() - below_or_eq) as u128 + (below_or_eq - below) as u128;
    }
    Ok(twice as f64 / (2 * pos.len() * neg.len()) as f64)
}

/// Bhattacharyya distance between Bernoulli(p) and Bernoulli(q), capped.
pub fn bhattacharyya_bernoulli(p: f64, q: f64) -> f64 {
    let bc = (p * q).sqrt() + ((1.0 - p) * (1.0 - q)).sqrt();
    if bc <= 0.0 {
        return BHATTACHARYYA_CAP;
    }
    (-bc.ln()).clamp(0.0, BHATTACHARYYA_CAP)
}

pub fn bhattacharyya_bernoulli_sum(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("{} vs {} attributes", p.len(), q.len())));
    }
    if p.iter().chain(q).any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::Invalid("probabilities must lie in [0, 1]".into()));
    }
    Ok(p.iter().zip(q).map(|(&a, &b)| bhattacharyya_bernoulli(a, b)).sum())
}

/// Distinct attribute vectors over images.
pub fn unique_combination_ratio(bits: &[u16]) -> Result<f64> {
    if bits.is_empty() {
        return Err(Error::Invalid("no attribute vectors".into()));
    }
    Ok(bits.iter().collect::<HashSet<_>>().len() as f64 / bits.len() as f64)
}

/// Per-attribute frequency of set bits.
pub fn marginals(bits: &[u16]) -> Vec<f64> {
    (0..NUM_ATTRIBUTES)
        .map(|j| bits.iter().filter(|&&b| attribute_bit(b, j)).count() as f64 / bits.len().max(1) as f64)
        .collect()
}

// ------------------------------------------------------- trained evaluators

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluatorConfig {
    pub embedder_width: usize,
    pub embedder_dim: usize,
    pub embedder_steps: usize,
    pub classifier_width: usize,
    pub classifier_steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Objects (eight views each) in the labeled render the attribute
    /// classifiers learn from.
    pub classifier_objects: usize,
    /// Fresh renders of unseen objects used to measure classifier accuracy.
    pub held_out: usize,
    /// Held-out accuracy every attribute classifier must reach.
    pub min_accuracy: f64,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self {
            embedder_width: 32,
            embedder_dim: 64,
            embedder_steps: 1500,
            classifier_width: 32,
            classifier_steps: 2000,
            batch: 64,
            lr: 1e-3,
            classifier_objects: 1000,
            held_out: 2000,
            min_accuracy: CLASSIFIER_MIN_ACCURACY,
        }
    }
}

fn conv_stack(image_size: usize, width: usize, hidden: Option<usize>, out_dim: usize, output: OutputKind) -> NetSpec {
    NetSpec::ConvStack(ConvStackSpec {
        image_size,
        in_ch: 3,
        width,
        first_bn: false,
        hidden,
        out_dim,
        output,
        leaky_slope: 0.2,
    })
}

/// Eval-mode forward in chunks; returns `(outputs, features)` row by row.
fn infer_rows(net: &Network<f32>, images: &Tensor<f32>) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    let n = images.shape()[0];
    let (mut outs, mut feats) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for start in (0..n).step_by(CHUNK) {
        let len = CHUNK.min(n - start);
        let (o, f) = net.infer(&images.narrow0(start, len)?)?;
        let (ow, fw) = (o.numel() / len, f.numel() / len);
        outs.extend(o.data().chunks(ow).map(<[f32]>::to_vec));
        feats.extend(f.data().chunks(fw).map(<[f32]>::to_vec));
    }
    Ok((outs, feats))
}

/// One Adam step of `net` on a scalar loss built from a train-mode pass.
fn fit_step(
    net: &mut Network<f32>,
    images: Tensor<f32>,
    adam: &AdamConfig,
    loss: impl FnOnce(&mut Graph<f32>, crate::autodiff::Var) -> Result<crate::autodiff::Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let mut b = net.bind(&mut g, true, true);
    let x = g.constant(images);
    let (out, _) = net.stack_forward(&mut g, &mut b, x)?;
    let l = loss(&mut g, out)?;
    let value = g.value(l).item() as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite("evaluator training loss".into()));
    }
    g.backward(l)?;
    net.params.zero_grads();
    net.absorb(&g, b);
    adam_step(&mut net.params, adam)?;
    Ok(value)
}

/// Frozen feature extractor whose distances stand in for "same object"
/// judgments: a conv net trained to classify the training objects, read
/// at its hidden layer and L2-normalized.
#[derive(Debug, Clone)]
pub struct ReidEmbedder {
    pub net: Network<f32>,
}

impl ReidEmbedder {
    pub fn train(ds: &Dataset, cfg: &EvaluatorConfig, seed: u64) -> Result<Self> {
        let objects = ds.objects(Split::Train);
        if objects.len() < 2 {
            return Err(Error::Invalid("embedder needs at least two training objects".into()));
        }
        let spec = conv_stack(ds.image_size(), cfg.embedder_width, Some(cfg.embedder_dim), objects.len(), OutputKind::Linear);
        let mut net = Network::new(spec, rng::derive_seed(seed, "eval/embedder/init"))?;
        let mut r = rng::stream(seed, "eval/embedder");
        let adam = AdamConfig { lr: cfg.lr, beta1: 0.5, ..AdamConfig::default() };
        let images: Vec<(usize, usize)> =
            objects.iter().enumerate().flat_map(|(label, o)| o.indices.iter().map(move |&i| (i, label))).collect();
        for _ in 0..cfg.embedder_steps {
            let pick: Vec<(usize, usize)> = (0..cfg.batch).map(|_| images[r.random_range(0..images.len())]).collect();
            let idx: Vec<usize> = pick.iter().map(|p| p.0).collect();
            let labels: Vec<usize> = pick.iter().map(|p| p.1).collect();
            fit_step(&mut net, ds.batch(&idx), &adam, |g, logits| g.softmax_cross_entropy(logits, &labels))?;
        }
        Ok(Self { net })
    }

    pub fn embed(&self, images: &Tensor<f32>) -> Result<Vec<Vec<f32>>> {
        let (_, feats) = infer_rows(&self.net, images)?;
        Ok(feats
            .into_iter()
            .map(|f| {
                let norm = f.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
                f.iter().map(|&x| (x as f64 / norm) as f32).collect()
            })
            .collect())
    }

    /// Euclidean distances between row-aligned embeddings of two batches.
    pub fn distances(&self, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Vec<f64>> {
        let (ea, eb) = (self.embed(a)?, self.embed(b)?);
        Ok(ea.iter().zip(&eb).map(|(x, y)| x.iter().zip(y).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>().sqrt()).collect())
    }
}

#[derive(Debug, Clone)]
pub struct AttributeClassifier {
    pub attribute: usize,
    pub net: Network<f32>,
    /// Accuracy on the test split.
    pub accuracy: f64,
}

impl AttributeClassifier {
    /// Train on the training split of `ds` with class-balanced batches;
    /// refuses an attribute that is constant there. Accuracy is measured on
    /// `held_out` images with their true attribute bits.
    pub fn train(
        ds: &Dataset,
        attribute: usize,
        cfg: &EvaluatorConfig,
        seed: u64,
        held_out: (&Tensor<f32>, &[u16]),
    ) -> Result<Self> {
        let name = ATTRIBUTE_NAMES[attribute];
        let train = ds.indices(Split::Train);
        let (pos, neg): (Vec<usize>, Vec<usize>) =
            train.iter().partition(|&&i| attribute_bit(ds.records[i].attributes, attribute));
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::Invalid(format!("attribute `{name}` is constant on the training split")));
        }
        let spec = conv_stack(ds.image_size(), cfg.classifier_width, None, 1, OutputKind::Sigmoid);
        let mut net = Network::new(spec, rng::derive_seed(seed, &format!("eval/attr/{name}/init")))?;
        let mut r = rng::stream(seed, &format!("eval/attr/{name}"));
        let adam = AdamConfig { lr: cfg.lr, beta1: 0.5, ..AdamConfig::default() };
        let half = cfg.batch / 2;
        let mut labels = vec![1.0; half];
        labels.resize(cfg.batch, 0.0);
        for _ in 0..cfg.classifier_steps {
            let idx: Vec<usize> = (0..cfg.batch)
                .map(|k| if k < half { pos[r.random_range(0..pos.len())] } else { neg[r.random_range(0..neg.len())] })
                .collect();
            fit_step(&mut net, ds.batch(&idx), &adam, |g, p| g.bce_loss(p, &labels))?;
        }
        let mut c = Self { attribute, net, accuracy: 0.0 };
        let (images, bits) = held_out;
        let pred = c.predict(images)?;
        let hits = bits.iter().zip(&pred).filter(|(&b, &p)| attribute_bit(b, attribute) == p).count();
        c.accuracy = hits as f64 / bits.len().max(1) as f64;
        Ok(c)
    }

    pub fn predict(&self, images: &Tensor<f32>) -> Result<Vec<bool>> {
        Ok(infer_rows(&self.net, images)?.0.iter().map(|o| o[0] > DECISION_THRESHOLD).collect())
    }
}

/// All attribute classifiers plus the embedder, trained once per dataset.
#[derive(Debug, Clone)]
pub struct Evaluators {
    pub embedder: ReidEmbedder,
    pub classifiers: Vec<AttributeClassifier>,
}

impl Evaluators {
    /// Train everything, failing on the first classifier under the
    /// accuracy floor.
    pub fn train(ds: &Dataset, cfg: &EvaluatorConfig, seed: u64) -> Result<Self> {
        let embedder = ReidEmbedder::train(ds, cfg, seed)?;
        let labeled = labeled_renders(ds, cfg.classifier_objects, rng::derive_seed(seed, "eval/labeled"))?;
        let (images, bits) = reference_images(ds, cfg.held_out, rng::derive_seed(seed, "eval/held-out"))?;
        let classifiers = (0..NUM_ATTRIBUTES)
            .map(|j| AttributeClassifier::train(&labeled, j, cfg, seed, (&images, &bits)))
            .collect::<Result<Vec<_>>>()?;
        let ev = Self { embedder, classifiers };
        ev.check(cfg.min_accuracy)?;
        Ok(ev)
    }

    pub fn check(&self, min_accuracy: f64) -> Result<()> {
        for c in &self.classifiers {
            if c.accuracy < min_accuracy {
                return Err(Error::ClassifierBelowThreshold {
                    name: ATTRIBUTE_NAMES[c.attribute].into(),
                    accuracy: c.accuracy,
                    threshold: min_accuracy,
                });
            }
        }
        Ok(())
    }

    /// Load from `dir/<key>/` or train and store there. The key hashes the
    /// dataset bytes, the seed and the evaluator configuration.
    pub fn cached(ds: &Dataset, cfg: &EvaluatorConfig, seed: u64, dir: &Path) -> Result<Self> {
        let mut h = Sha256::new();
        h.update(ds.to_bytes()?);
        h.update(seed.to_le_bytes());
        h.update(serde_json::to_vec(cfg)?);
        let key: String = h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect();
        let dir = dir.join(key);
        let file = |name: &str| dir.join(format!("{name}.mvck"));
        if file("embedder").exists() {
            let load = |name: &str| -> Result<(Network<f32>, checkpoint::CheckpointMeta)> {
                let (params, meta) = checkpoint::load::<f32>(&file(name))?;
                Ok((Network { spec: serde_json::from_value(meta.arch.clone())?, params }, meta))
            };
            let embedder = ReidEmbedder { net: load("embedder")?.0 };
            let classifiers = (0..NUM_ATTRIBUTES)
                .map(|j| {
                    let (net, meta) = load(ATTRIBUTE_NAMES[j])?;
                    let accuracy = meta.extra["accuracy"].as_f64().ok_or_else(|| Error::Format("classifier without accuracy".into()))?;
                    Ok(AttributeClassifier { attribute: j, net, accuracy })
                })
                .collect::<Result<Vec<_>>>()?;
            let ev = Self { embedder, classifiers };
            ev.check(cfg.min_accuracy)?;
            return Ok(ev);
        }
        let ev = Self::train(ds, cfg, seed)?;
        for c in &ev.classifiers {
            let extra = serde_json::json!({ "attribute": ATTRIBUTE_NAMES[c.attribute], "accuracy": c.accuracy });
            checkpoint::save(&file(ATTRIBUTE_NAMES[c.attribute]), &c.net.params, serde_json::to_value(&c.net.spec)?, seed, extra)?;
        }
        // the embedder goes last: its presence marks a complete cache
        let net = &ev.embedder.net;
        checkpoint::save(&file("embedder"), &net.params, serde_json::to_value(&net.spec)?, seed, serde_json::json!({}))?;
        Ok(ev)
    }

    /// Attribute bit vectors of a batch of images.
    pub fn attribute_bits(&self, images: &Tensor<f32>) -> Result<Vec<u16>> {
        let mut bits = vec![0u16; images.shape()[0]];
        for c in &self.classifiers {
            for (b, p) in bits.iter_mut().zip(c.predict(images)?) {
                *b |= (p as u16) << c.attribute;
            }
        }
        Ok(bits)
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.classifiers.iter().map(|c| c.accuracy).collect()
    }
}

/// Per-attribute rate of classifier-positive images.
pub fn attribute_distribution(images: &Tensor<f32>, ev: &Evaluators) -> Result<Vec<f64>> {
    check_images(images)?;
    Ok(marginals(&ev.attribute_bits(images)?))
}

/// Share of images the blur classifier flags.
pub fn blurry_rate(images: &Tensor<f32>, ev: &Evaluators) -> Result<f64> {
    let blur = ev.classifiers.iter().find(|c| c.attribute == BLUR).ok_or_else(|| Error::Invalid("no blur classifier".into()))?;
    let flags = blur.predict(images)?;
    Ok(flags.iter().filter(|&&f| f).count() as f64 / flags.len().max(1) as f64)
}

fn check_images(images: &Tensor<f32>) -> Result<()> {
    if images.shape()[0] < MIN_IMAGES {
        return Err(Error::Invalid(format!("need at least {MIN_IMAGES} images, got {}", images.shape()[0])));
    }
    Ok(())
}

// ------------------------------------------------------------ generators

/// Source of image pairs that share an identity (positive) or not.
pub trait PairGenerator {
    fn pairs(&self, n: usize, positive: bool, r: &mut Rng) -> Result<(Tensor<f32>, Tensor<f32>)>;
}

/// Image-conditioned generation: encode, then decode with a view code.
pub trait ConditionalModel {
    fn view_dim(&self) -> usize;
    fn encode(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
    fn generate(&self, c: &Tensor<f32>, v: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// Pairs of real test-split views.
pub struct RealPairs<'a> {
    pub ds: &'a Dataset,
    objects: Vec<ObjectViews>,
}

impl<'a> RealPairs<'a> {
    pub fn new(ds: &'a Dataset, split: Split) -> Result<Self> {
        let objects: Vec<ObjectViews> = ds.objects(split).into_iter().filter(|o| o.indices.len() >= 2).collect();
        if objects.len() < 2 {
            return Err(Error::Invalid("need two objects with at least two views".into()));
        }
        Ok(Self { ds, objects })
    }
}

impl PairGenerator for RealPairs<'_> {
    fn pairs(&self, n: usize, positive: bool, r: &mut Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let (mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let i = r.random_range(0..self.objects.len());
            let oi = &self.objects[i].indices;
            if positive {
                let pick = rand::seq::index::sample(r, oi.len(), 2);
                a.push(oi[pick.index(0)]);
                b.push(oi[pick.index(1)]);
            } else {
                let j = (i + r.random_range(1..self.objects.len())) % self.objects.len();
                let oj = &self.objects[j].indices;
                a.push(oi[r.random_range(0..oi.len())]);
                b.push(oj[r.random_range(0..oj.len())]);
            }
        }
        Ok((self.ds.batch(&a), self.ds.batch(&b)))
    }
}

/// Unconditional bundles: same content code (or, for joint generators,
/// two heads of one latent) for positives; independent draws otherwise.
pub struct ModelPairs<'a>(pub &'a ModelBundle);

impl PairGenerator for ModelPairs<'_> {
    fn pairs(&self, n: usize, positive: bool, r: &mut Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let b = self.0;
        let (cd, vd) = (b.config.arch.content_dim, b.config.arch.view_dim);
        let (c1, v1) = sample_priors(r, n, cd, vd);
        let (c2, v2) = sample_priors(r, n, cd, vd);
        if b.kind().joint_views().is_some() {
            let x = b.generate(&c1, &v1)?;
            if positive {
                return Ok((x[0].clone(), x[1].clone()));
            }
            let y = b.generate(&c2, &v2)?;
            return Ok((x[0].clone(), y[1].clone()));
        }
        let first = b.generate(&c1, &v1)?.swap_remove(0);
        let second = b.generate(if positive { &c1 } else { &c2 }, &v2)?.swap_remove(0);
        Ok((first, second))
    }
}

impl ConditionalModel for ModelBundle {
    fn view_dim(&self) -> usize {
        self.config.arch.view_dim
    }
    fn encode(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        ModelBundle::encode(self, x)
    }
    fn generate(&self, c: &Tensor<f32>, v: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(ModelBundle::generate(self, c, v)?.swap_remove(0))
    }
}

fn conditional_generate(m: &dyn ConditionalModel, x: &Tensor<f32>, r: &mut Rng) -> Result<Tensor<f32>> {
    let n = x.shape()[0];
    let v = Tensor::new(&[n, m.view_dim()], rng::standard_normal(r, n * m.view_dim()))?;
    m.generate(&m.encode(x)?, &v)
}

// --------------------------------------------------------- identity AUC

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerativeAuc {
    /// Real positive vs real negative test pairs: the embedder's ceiling.
    pub real: f64,
    pub gen_vs_gen: f64,
    pub gen_pos_vs_real_neg: f64,
    pub real_pos_vs_gen_neg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalAuc {
    pub real: f64,
    /// `d(x, G(E(x), v))` against `d(x, G(E(x'), v))`.
    pub input_vs_gen: f64,
    /// `d(G(E(x), v1), G(E(x), v2))` against `d(G(E(x), v1), G(E(x'), v2))`.
    pub gen_vs_gen: f64,
}

fn check_pairs(n: usize) -> Result<()> {
    if n < MIN_PAIRS {
        return Err(Error::Invalid(format!("need at least {MIN_PAIRS} pairs, got {n}")));
    }
    Ok(())
}

/// Embedding distances of `n` pairs, generated in chunks.
pub fn pair_distances(g: &dyn PairGenerator, emb: &ReidEmbedder, n: usize, positive: bool, r: &mut Rng) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let (a, b) = g.pairs(CHUNK.min(n - start), positive, r)?;
        out.extend(emb.distances(&a, &b)?);
    }
    Ok(out)
}

pub fn identity_auc_suite(
    gen: &dyn PairGenerator,
    real: &dyn PairGenerator,
    emb: &ReidEmbedder,
    n_pairs: usize,
    seed: u64,
) -> Result<GenerativeAuc> {
    check_pairs(n_pairs)?;
    let mut r = rng::stream(seed, "eval/auc/real");
    let real_pos = pair_distances(real, emb, n_pairs, true, &mut r)?;
    let real_neg = pair_distances(real, emb, n_pairs, false, &mut r)?;
    let mut r = rng::stream(seed, "eval/auc/gen");
    let gen_pos = pair_distances(gen, emb, n_pairs, true, &mut r)?;
    let gen_neg = pair_distances(gen, emb, n_pairs, false, &mut r)?;
    Ok(GenerativeAuc {
        real: auc_lower_distance(&real_pos, &real_neg)?,
        gen_vs_gen: auc_lower_distance(&gen_pos, &gen_neg)?,
        gen_pos_vs_real_neg: auc_lower_distance(&gen_pos, &real_neg)?,
        real_pos_vs_gen_neg: auc_lower_distance(&real_pos, &gen_neg)?,
    })
}

/// Conditional rows on test-split inputs.
pub fn conditional_auc_suite(
    m: &dyn ConditionalModel,
    ds: &Dataset,
    emb: &ReidEmbedder,
    n_pairs: usize,
    seed: u64,
) -> Result<ConditionalAuc> {
    check_pairs(n_pairs)?;
    let real = RealPairs::new(ds, Split::Test)?;
    let mut r = rng::stream(seed, "eval/auc/real");
    let real_pos = pair_distances(&real, emb, n_pairs, true, &mut r)?;
    let real_neg = pair_distances(&real, emb, n_pairs, false, &mut r)?;

    let mut r = rng::stream(seed, "eval/auc/conditional");
    let (mut in_pos, mut in_neg, mut gg_pos, mut gg_neg) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for start in (0..n_pairs).step_by(CHUNK) {
        let k = CHUNK.min(n_pairs - start);
        // x and x' come from different objects
        let (x, other) = real.pairs(k, false, &mut r)?;
        let g1 = conditional_generate(m, &x, &mut r)?;
        let g2 = conditional_generate(m, &x, &mut r)?;
        let g_other = conditional_generate(m, &other, &mut r)?;
        in_pos.extend(emb.distances(&x, &g1)?);
        in_neg.extend(emb.distances(&x, &g_other)?);
        gg_pos.extend(emb.distances(&g1, &g2)?);
        gg_neg.extend(emb.distances(&g1, &g_other)?);
    }
    Ok(ConditionalAuc {
        real: auc_lower_distance(&real_pos, &real_neg)?,
        input_vs_gen: auc_lower_distance(&in_pos, &in_neg)?,
        gen_vs_gen: auc_lower_distance(&gg_pos, &gg_neg)?,
    })
}

// ------------------------------------------------------ content transfer

/// Multinomial logistic regression on standardized features.
#[derive(Debug, Clone)]
pub struct LinearClassifier {
    mean: Vec<f64>,
    std: Vec<f64>,
    weight: Tensor<f64>,
    bias: Tensor<f64>,
}

impl LinearClassifier {
    pub fn fit(features: &[Vec<f32>], labels: &[usize], classes: usize) -> Result<Self> {
        let n = features.len();
        if n == 0 || n != labels.len() || labels.iter().any(|&l| l >= classes) {
            return Err(Error::Invalid("bad classifier training set".into()));
        }
        let d = features[0].len();
        let mean: Vec<f64> = (0..d).map(|k| features.iter().map(|f| f[k] as f64).sum::<f64>() / n as f64).collect();
        let std: Vec<f64> = (0..d)
            .map(|k| (features.iter().map(|f| (f[k] as f64 - mean[k]).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-6))
            .collect();
        let mut c = Self { mean, std, weight: Tensor::zeros(&[classes, d]), bias: Tensor::zeros(&[classes]) };
        let x = c.standardize(features)?;
        let (mut mw, mut vw) = (vec![0.0; classes * d], vec![0.0; classes * d]);
        let (mut mb, mut vb) = (vec![0.0; classes], vec![0.0; classes]);
        let (lr, b1, b2, decay) = (0.05, 0.9, 0.999, 1e-3);
        for t in 1..=400 {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let w = g.variable(c.weight.clone());
            let b = g.variable(c.bias.clone());
            let logits = g.dense(xv, w, Some(b))?;
            let loss = g.softmax_cross_entropy(logits, labels)?;
            g.backward(loss)?;
            let gw: Vec<f64> = g.grad(w).expect("tracked").iter().zip(c.weight.data()).map(|(gr, wv)| gr + decay * wv).collect();
            let gb = g.grad(b).expect("tracked").to_vec();
            let step = |p: &mut [f64], gr: &[f64], m: &mut [f64], v: &mut [f64]| {
                for i in 0..p.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * gr[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * gr[i] * gr[i];
                    let mh = m[i] / (1.0 - b1.powi(t));
                    let vh = v[i] / (1.0 - b2.powi(t));
                    p[i] -= lr * mh / (vh.sqrt() + 1e-8);
                }
            };
            step(c.weight.data_mut(), &gw, &mut mw, &mut vw);
            step(c.bias.data_mut(), &gb, &mut mb, &mut vb);
        }
        Ok(c)
    }

    fn standardize(&self, features: &[Vec<f32>]) -> Result<Tensor<f64>> {
        let d = self.mean.len();
        let data: Vec<f64> =
            features.iter().flat_map(|f| f.iter().enumerate().map(|(k, &v)| (v as f64 - self.mean[k]) / self.std[k])).collect();
        if data.len() != features.len() * d {
            return Err(Error::Shape("feature width changed".into()));
        }
        Tensor::new(&[features.len(), d], data)
    }

    pub fn predict(&self, features: &[Vec<f32>]) -> Result<Vec<usize>> {
        let x = self.standardize(features)?;
        let mut g = Graph::new();
        let (xv, w, b) = (g.constant(x), g.constant(self.weight.clone()), g.constant(self.bias.clone()));
        let logits = g.dense(xv, w, Some(b))?;
        let classes = self.bias.numel();
        Ok(g.value(logits)
            .data()
            .chunks(classes)
            .map(|row| row.iter().enumerate().fold(0, |best, (k, &v)| if v > row[best] { k } else { best }))
            .collect())
    }

    pub fn accuracy(&self, features: &[Vec<f32>], labels: &[usize]) -> Result<f64> {
        let pred = self.predict(features)?;
        Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContentTransfer {
    /// Image classifier on held-out real views.
    pub image_real: f64,
    /// Linear classifier fitted and tested on content codes.
    pub code_linear: f64,
    /// Image classifier on `G(E(x), v)` for held-out inputs.
    pub image_generated: f64,
    pub chance: f64,
    pub objects: usize,
}

/// Object identification on the test objects, whose views are split into
/// a fitting half and a held-out half. The image classifier is a linear
/// classifier on re-identification embeddings.
pub fn content_transfer_suite(m: &dyn ConditionalModel, ds: &Dataset, emb: &ReidEmbedder, seed: u64) -> Result<ContentTransfer> {
    let objects: Vec<ObjectViews> = ds.objects(Split::Test).into_iter().filter(|o| o.indices.len() >= 2).collect();
    if objects.len() < 2 {
        return Err(Error::Invalid("content transfer needs two test objects with two views".into()));
    }
    let (mut fit, mut fit_y, mut hold, mut hold_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (label, o) in objects.iter().enumerate() {
        let half = o.indices.len().div_ceil(2);
        for (k, &i) in o.indices.iter().enumerate() {
            if k < half {
                fit.push(i);
                fit_y.push(label);
            } else {
                hold.push(i);
                hold_y.push(label);
            }
        }
    }
    let classes = objects.len();
    let (fit_x, hold_x) = (ds.batch(&fit), ds.batch(&hold));

    let image_clf = LinearClassifier::fit(&emb.embed(&fit_x)?, &fit_y, classes)?;
    let image_real = image_clf.accuracy(&emb.embed(&hold_x)?, &hold_y)?;

    let rows = |t: Tensor<f32>| -> Vec<Vec<f32>> {
        let w = t.shape()[1];
        t.data().chunks(w).map(<[f32]>::to_vec).collect()
    };
    let code_clf = LinearClassifier::fit(&rows(m.encode(&fit_x)?), &fit_y, classes)?;
    let code_linear = code_clf.accuracy(&rows(m.encode(&hold_x)?), &hold_y)?;

    let mut r = rng::stream(seed, "eval/transfer");
    let generated = conditional_generate(m, &hold_x, &mut r)?;
    let image_generated = image_clf.accuracy(&emb.embed(&generated)?, &hold_y)?;
    Ok(ContentTransfer { image_real, code_linear, image_generated, chance: 1.0 / classes as f64, objects: classes })
}

// ----------------------------------------------------------------- report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub pairs: usize,
    pub samples: usize,
    pub seed: u64,
    pub cache: Option<PathBuf>,
    #[serde(skip)]
    pub verbose: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { pairs: 5000, samples: 5000, seed: 0, cache: None, verbose: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AucReport {
    Generative(GenerativeAuc),
    Conditional(ConditionalAuc),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bhattacharyya {
    /// Against the classifier-estimated distribution of real images.
    pub d2e: f64,
    /// Against the ground-truth attribute bits of real images.
    pub d2t: f64,
    pub cap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    pub generated: f64,
    pub real_estimated: f64,
    pub real_truth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlurryRate {
    pub generated: f64,
    pub real_estimated: f64,
    pub real_truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDistributions {
    pub names: Vec<String>,
    pub generated: Vec<f64>,
    pub real_estimated: Vec<f64>,
    pub real_truth: Vec<f64>,
    pub classifier_accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: AucReport,
    pub bhattacharyya: Bhattacharyya,
    pub diversity: Diversity,
    pub blurry_rate: BlurryRate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_transfer: Option<ContentTransfer>,
    pub attributes: AttributeDistributions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub train: u64,
    pub eval: u64,
    pub dataset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub pairs: usize,
    pub samples: usize,
    pub model_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_kind: ModelKind,
    pub seeds: Seeds,
    pub metrics: Metrics,
    pub counts: Counts,
}

/// `n` generated images: prior draws for unconditional models (first head
/// of joint generators), test-split inputs cycled in order with fresh view
/// codes for conditional ones.
pub fn generated_samples(bundle: &ModelBundle, ds: &Dataset, n: usize, seed: u64) -> Result<Tensor<f32>> {
    let mut r = rng::stream(seed, "eval/samples");
    let test = ds.indices(Split::Test);
    let (cd, vd) = (bundle.config.arch.content_dim, bundle.config.arch.view_dim);
    let mut parts = Vec::new();
    for start in (0..n).step_by(CHUNK) {
        let k = CHUNK.min(n - start);
        let x = if bundle.kind().is_conditional() {
            let idx: Vec<usize> = (start..start + k).map(|i| test[i % test.len()]).collect();
            conditional_generate(bundle, &ds.batch(&idx), &mut r)?
        } else {
            let (c, v) = sample_priors(&mut r, k, cd, vd);
            bundle.generate(&c, &v)?.swap_remove(0)
        };
        parts.push(x);
    }
    Tensor::cat0(&parts.iter().collect::<Vec<_>>())
}

/// A labeled render of `objects` new objects from the dataset's sampler,
/// eight views each, in its training split.
///
/// Content attributes only vary across objects, and a classifier fitted on
/// a few dozen objects learns to recognize those objects instead of the
/// attribute; this gives it enough of them.
pub fn labeled_renders(ds: &Dataset, objects: usize, seed: u64) -> Result<Dataset> {
    generate_dataset(&DatasetConfig {
        train_objects: objects.max(2),
        train_views: 8,
        test_objects: 1,
        test_views: 2,
        image_size: ds.image_size(),
        seed: rng::derive_seed(seed ^ ds.header.config.seed, "eval/render"),
    })
}

/// `n` fresh renders of new objects with their ground-truth attribute bits.
pub fn reference_images(ds: &Dataset, n: usize, seed: u64) -> Result<(Tensor<f32>, Vec<u16>)> {
    let fresh = labeled_renders(ds, n.div_ceil(8), seed)?;
    let idx: Vec<usize> = fresh.indices(Split::Train).into_iter().take(n).collect();
    Ok((fresh.batch(&idx), idx.iter().map(|&i| fresh.records[i].attributes).collect()))
}

/// The full battery for one bundle.
pub fn evaluate(bundle: &ModelBundle, ds: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    evaluate_with(bundle, ds, opts, &EvaluatorConfig::default())
}

pub fn evaluate_with(bundle: &ModelBundle, ds: &Dataset, opts: &EvalOptions, cfg: &EvaluatorConfig) -> Result<EvalReport> {
    check_pairs(opts.pairs)?;
    if opts.samples < MIN_IMAGES {
        return Err(Error::Invalid(format!("need at least {MIN_IMAGES} samples, got {}", opts.samples)));
    }
    let note = |s: &str| {
        if opts.verbose {
            eprintln!("{s}");
        }
    };
    note("evaluators");
    let ev = match &opts.cache {
        Some(dir) => Evaluators::cached(ds, cfg, opts.seed, dir)?,
        None => Evaluators::train(ds, cfg, opts.seed)?,
    };
    evaluate_using(bundle, ds, opts, &ev)
}

/// The battery with already trained evaluators.
pub fn evaluate_using(bundle: &ModelBundle, ds: &Dataset, opts: &EvalOptions, ev: &Evaluators) -> Result<EvalReport> {
    check_pairs(opts.pairs)?;
    if opts.samples < MIN_IMAGES {
        return Err(Error::Invalid(format!("need at least {MIN_IMAGES} samples, got {}", opts.samples)));
    }
    let note = |s: &str| {
        if opts.verbose {
            eprintln!("{s}");
        }
    };
    note("identity AUC");
    let auc = if bundle.kind().is_conditional() {
        AucReport::Conditional(conditional_auc_suite(bundle, ds, &ev.embedder, opts.pairs, opts.seed)?)
    } else {
        let real = RealPairs::new(ds, Split::Test)?;
        AucReport::Generative(identity_auc_suite(&ModelPairs(bundle), &real, &ev.embedder, opts.pairs, opts.seed)?)
    };
    note("attribute statistics");
    let generated = generated_samples(bundle, ds, opts.samples, opts.seed)?;
    let gen_bits = ev.attribute_bits(&generated)?;
    let (reference, truth_bits) = reference_images(ds, opts.samples, opts.seed)?;
    let est_bits = ev.attribute_bits(&reference)?;
    let (p_gen, p_est, p_truth) = (marginals(&gen_bits), marginals(&est_bits), marginals(&truth_bits));
    let bhattacharyya = Bhattacharyya {
        d2e: bhattacharyya_bernoulli_sum(&p_gen, &p_est)?,
        d2t: bhattacharyya_bernoulli_sum(&p_gen, &p_truth)?,
        cap: BHATTACHARYYA_CAP,
    };
    let diversity = Diversity {
        generated: unique_combination_ratio(&gen_bits)?,
        real_estimated: unique_combination_ratio(&est_bits)?,
        real_truth: unique_combination_ratio(&truth_bits)?,
    };
    let blurry_rate = BlurryRate { generated: p_gen[BLUR], real_estimated: p_est[BLUR], real_truth: p_truth[BLUR] };
    let content_transfer = if bundle.kind().is_conditional() {
        note("content transfer");
        Some(content_transfer_suite(bundle, ds, &ev.embedder, opts.seed)?)
    } else {
        None
    };
    Ok(EvalReport {
        model_kind: bundle.kind(),
        seeds: Seeds { train: bundle.config.seed, eval: opts.seed, dataset: ds.header.config.seed },
        metrics: Metrics {
            auc,
            bhattacharyya,
            diversity,
            blurry_rate,
            content_transfer,
            attributes: AttributeDistributions {
                names: ATTRIBUTE_NAMES.iter().map(|s| s.to_string()).collect(),
                generated: p_gen,
                real_estimated: p_est,
                real_truth: p_truth,
                classifier_accuracy: ev.accuracies(),
            },
        },
        counts: Counts { pairs: opts.pairs, samples: opts.samples, model_steps: bundle.step() },
    })
}
