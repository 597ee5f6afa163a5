//! Adversarial objectives. Each objective builds the discriminator scores
//! of its real and fake terms; the losses are then plain sums of mean BCE
//! terms over those scores.
//!
//! | objective | real term        | fake terms                                           |
//! |-----------|------------------|------------------------------------------------------|
//! | GAN       | `D(x)`           | `D(G(z))`                                            |
//! | CGAN      | `D(x, y)`        | `D(G(E(y), v), y)`                                   |
//! | GMV       | `D(x1, x2)`      | `D(G(c, v1), G(c, v2))`                              |
//! | C-GMV     | `D(x1, x2)`      | `D(G(E(x), v1), G(E(x), v2))`, `D(G(E(x), v3), x)`   |
//!
//! For the joint DCGANxK baselines `x` is a K-tuple of views and `G(z)` a
//! K-headed generator; scoring channel-concatenates the tuple.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::models::{Binding, Network};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Generator minimizes `-log D(fake)`.
    #[default]
    Nonsaturating,
    /// Generator minimizes `log(1 - D(fake))`.
    Minimax,
}

impl std::str::FromStr for LossVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonsaturating" => Ok(Self::Nonsaturating),
            "minimax" => Ok(Self::Minimax),
            _ => Err(Error::Invalid(format!("unknown loss variant `{s}`"))),
        }
    }
}

/// Discriminator outputs (`[N, 1]` probabilities) of one objective.
#[derive(Debug, Clone, Default)]
pub struct Scores {
    pub real: Vec<Var>,
    pub fake: Vec<Var>,
}

/// `sum_t -mean log D(real_t) + sum_t -mean log(1 - D(fake_t))`
pub fn discriminator_loss<T: Scalar>(g: &mut Graph<T>, s: &Scores) -> Result<Var> {
    let mut terms = Vec::with_capacity(s.real.len() + s.fake.len());
    for &p in &s.real {
        terms.push(g.bce_loss(p, &[1.0])?);
    }
    for &p in &s.fake {
        terms.push(g.bce_loss(p, &[0.0])?);
    }
    sum_terms(g, &terms)
}

/// Generator side over the fake terms.
pub fn generator_loss<T: Scalar>(g: &mut Graph<T>, s: &Scores, variant: LossVariant) -> Result<Var> {
    let mut terms = Vec::with_capacity(s.fake.len());
    for &p in &s.fake {
        terms.push(match variant {
            LossVariant::Nonsaturating => g.bce_loss(p, &[1.0])?,
            LossVariant::Minimax => {
                let l = g.bce_loss(p, &[0.0])?;
                g.scale(l, -1.0)
            }
        });
    }
    sum_terms(g, &terms)
}

/// `(d_loss, g_loss)` for a set of scores.
pub fn losses<T: Scalar>(g: &mut Graph<T>, s: &Scores, variant: LossVariant) -> Result<(Var, Var)> {
    Ok((discriminator_loss(g, s)?, generator_loss(g, s, variant)?))
}

fn sum_terms<T: Scalar>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let (&first, rest) = terms.split_first().ok_or_else(|| Error::Invalid("objective without terms".into()))?;
    rest.iter().try_fold(first, |acc, &t| g.add(acc, t))
}

/// Networks of one model bound into a graph.
pub struct Bound<'n, T: Scalar> {
    pub g: &'n Network<T>,
    pub gb: Binding<T>,
    pub d: &'n Network<T>,
    pub db: Binding<T>,
    pub e: Option<(&'n Network<T>, Binding<T>)>,
}

impl<'n, T: Scalar> Bound<'n, T> {
    /// Bind `g`, `d` (and `e`) in train mode; `track_g` covers `e` too.
    pub fn new(
        graph: &mut Graph<T>,
        g: &'n Network<T>,
        d: &'n Network<T>,
        e: Option<&'n Network<T>>,
        track_g: bool,
        track_d: bool,
    ) -> Self {
        let gb = g.bind(graph, track_g, true);
        let db = d.bind(graph, track_d, true);
        let e = e.map(|e| (e, e.bind(graph, track_g, true)));
        Self { g, gb, d, db, e }
    }

    fn encode(&mut self, graph: &mut Graph<T>, x: Var) -> Result<Var> {
        let (e, eb) = self.e.as_mut().ok_or_else(|| Error::Invalid("objective needs an encoder".into()))?;
        Ok(e.stack_forward(graph, eb, x)?.0)
    }

    fn score(&mut self, graph: &mut Graph<T>, images: &[Var]) -> Result<Var> {
        self.d.discriminate(graph, &mut self.db, images)
    }

    /// Run `G` once on stacked latents and split the result back into
    /// equal chunks, so batch norm sees every fake of the step together.
    fn generate_chunks(&mut self, graph: &mut Graph<T>, c: &[Var], v: &[Var]) -> Result<Vec<Var>> {
        let n = graph.shape(c[0])[0];
        let (cs, vs) = if c.len() == 1 { (c[0], v[0]) } else { (graph.concat(c, 0)?, graph.concat(v, 0)?) };
        let x = self.g.generate(graph, &mut self.gb, cs, vs)?[0];
        (0..c.len()).map(|i| if c.len() == 1 { Ok(x) } else { graph.narrow(x, 0, i * n, n) }).collect()
    }
}

/// GAN over single images or K-tuples. `real` holds the K views of the
/// real tuples (K = 1 for a plain GAN); `z` is `[N, C + V]`.
pub fn gan_scores<T: Scalar>(graph: &mut Graph<T>, m: &mut Bound<'_, T>, real: Option<&[Var]>, z: Var) -> Result<Scores> {
    let mut s = Scores::default();
    if let Some(real) = real {
        s.real.push(m.score(graph, real)?);
    }
    let fakes = m.g.generate_from_z(graph, &mut m.gb, z)?;
    s.fake.push(m.score(graph, &fakes)?);
    Ok(s)
}

/// CGAN: real `(x, y)` and fake `(G(E(y), v), y)`, condition second.
pub fn cgan_scores<T: Scalar>(
    graph: &mut Graph<T>,
    m: &mut Bound<'_, T>,
    real: Option<(Var, Var)>,
    y: Var,
    v: Var,
) -> Result<Scores> {
    let mut s = Scores::default();
    if let Some((x, y_real)) = real {
        s.real.push(m.score(graph, &[x, y_real])?);
    }
    let c = m.encode(graph, y)?;
    let fake = m.generate_chunks(graph, &[c], &[v])?[0];
    s.fake.push(m.score(graph, &[fake, y])?);
    Ok(s)
}

/// GMV: real positive pairs and fake pairs sharing one content code.
pub fn gmv_scores<T: Scalar>(
    graph: &mut Graph<T>,
    m: &mut Bound<'_, T>,
    real: Option<(Var, Var)>,
    c: Var,
    v1: Var,
    v2: Var,
) -> Result<Scores> {
    let mut s = Scores::default();
    if let Some((x1, x2)) = real {
        s.real.push(m.score(graph, &[x1, x2])?);
    }
    let f = m.generate_chunks(graph, &[c, c], &[v1, v2])?;
    s.fake.push(m.score(graph, &[f[0], f[1]])?);
    Ok(s)
}

/// C-GMV: real pairs, two-view fakes from `E(x)`, and `(G(E(x), v3), x)`
/// with the genuine image second.
pub fn cgmv_scores<T: Scalar>(
    graph: &mut Graph<T>,
    m: &mut Bound<'_, T>,
    real: Option<(Var, Var)>,
    x: Var,
    v: [Var; 3],
) -> Result<Scores> {
    let mut s = Scores::default();
    if let Some((x1, x2)) = real {
        s.real.push(m.score(graph, &[x1, x2])?);
    }
    let c = m.encode(graph, x)?;
    let f = m.generate_chunks(graph, &[c, c, c], &v)?;
    s.fake.push(m.score(graph, &[f[0], f[1]])?);
    s.fake.push(m.score(graph, &[f[2], x])?);
    Ok(s)
}

/// `(1 - t) a + t b` for `t = i / (steps - 1)`, `i = 0..steps`.
pub fn interpolate_latent(a: &[f32], b: &[f32], steps: usize) -> Result<Vec<Vec<f32>>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("endpoints have lengths {} and {}", a.len(), b.len())));
    }
    if steps < 2 {
        return Err(Error::Invalid(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    Ok((0..steps)
        .map(|i| {
            let t = i as f64 / (steps - 1) as f64;
            a.iter().zip(b).map(|(&x, &y)| ((1.0 - t) * x as f64 + t * y as f64) as f32).collect()
        })
        .collect())
}
