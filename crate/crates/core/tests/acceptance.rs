//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Trained models come from a run cache (default `target/acceptance`, or
//! `MVGEN_ACCEPTANCE_DIR`): `dataset.mvds` plus `runs/<kind>-s<seed>/`
//! bundles as written by `mvgen train`. Runs that are missing or short of
//! their step budget are trained (resuming where they stopped) only when
//! `MVGEN_ACCEPTANCE_TRAIN=1`; otherwise the criteria that need them fail
//! and say which run is missing. Evaluation reports are cached next to the
//! runs, keyed by model step.

use std::collections::HashMap;
use std::f64::consts::LN_2;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use mvgen::dataset::{generate_dataset, read_ppm, Dataset, DatasetConfig};
use mvgen::evaluation::{self, AucReport, EvalOptions, EvalReport, EvaluatorConfig, Evaluators};
use mvgen::manifest::RunManifest;
use mvgen::nn::{adam_step, AdamConfig, Param, ParamSet};
use mvgen::objectives::{self, Bound, LossVariant, Scores};
use mvgen::rng;
use mvgen::sampling::{self, TileLatents};
use mvgen::train::{self, ModelBundle, ModelKind, RunDir, TrainConfig, BUNDLE_FILE};
use mvgen::{verify, Graph, Tensor};
use rand::Rng as _;
use sha2::{Digest, Sha256};

const STEPS: u64 = 8000;
const SEEDS: [u64; 3] = [0, 1, 2];
const PAIRS: usize = 5000;
const SAMPLES: usize = 5000;

type Outcome = Result<(bool, String), String>;

fn line(id: u32, name: &str, outcome: Outcome) -> bool {
    let (pass, detail) = match outcome {
        Ok(r) => r,
        Err(e) => (false, e),
    };
    println!("{} [{id:>2}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ------------------------------------------------------------------ 1-5

fn gradcheck() -> Outcome {
    let t = Instant::now();
    let results = verify::gradcheck_suite().map_err(err)?;
    let secs = t.elapsed().as_secs_f64();
    let (worst, name) = results
        .iter()
        .map(|r| (r.max_rel_error, r.name.as_str()))
        .fold((0.0, ""), |a, b| if b.0 > a.0 { b } else { a });
    let skipped: usize = results.iter().map(|r| r.skipped).sum();
    Ok((
        worst < 1e-4 && secs < 60.0,
        format!(
            "{} checks at h={:e}, worst relative error {worst:.2e} ({name}), {skipped} kink entries skipped, {secs:.1} s (need < 1e-4, < 60 s)",
            results.len(),
            verify::STEP
        ),
    ))
}

/// Long-hand Adam on each coordinate versus `adam_step`, max |diff|.
fn adam_trajectory(cfg: &AdamConfig, theta0: &[f64], grads: &[Vec<f64>]) -> Result<f64, String> {
    let d = theta0.len();
    let mut ps = ParamSet::new();
    ps.insert("w", Param::new(Tensor::new(&[d], theta0.to_vec()).map_err(err)?, true)).map_err(err)?;
    let (mut m, mut v, mut th) = (vec![0.0; d], vec![0.0; d], theta0.to_vec());
    let mut worst: f64 = 0.0;
    for (t, g) in grads.iter().enumerate() {
        ps.get_mut("w").unwrap().grad.copy_from_slice(g);
        adam_step(&mut ps, cfg).map_err(err)?;
        let t = t as i32 + 1;
        for i in 0..d {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - cfg.beta1.powi(t));
            let vh = v[i] / (1.0 - cfg.beta2.powi(t));
            th[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        for (a, b) in ps.value("w").unwrap().data().iter().zip(&th) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

fn adam() -> Outcome {
    let mut r = rng::stream(0, "acceptance/adam");
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for cfg in [AdamConfig::with_lr(1e-3), AdamConfig { lr: 2e-4, beta1: 0.5, ..AdamConfig::default() }, AdamConfig::with_lr(5e-5)] {
        let theta0: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let constant = vec![vec![0.7, -0.3, 1.5, 0.0]; 5];
        let random: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        for grads in [constant, random] {
            worst = worst.max(adam_trajectory(&cfg, &theta0, &grads)?);
            runs += 1;
        }
    }
    Ok((worst <= 1e-10, format!("{runs} five-step trajectories (constant and random gradients) vs long-hand Adam, max |diff| {worst:.1e} (need <= 1e-10)")))
}

fn auc_oracle(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in pos {
        for &n in neg {
            wins += if p < n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

fn metric_oracles() -> Outcome {
    let mut r = rng::stream(1, "acceptance/metrics");
    let mut auc_exact = 0;
    for _ in 0..100 {
        let (np, nn) = (r.random_range(1..=200), r.random_range(1..=200));
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| r.random_range(0..30) as f64 / 11.0).collect() };
        let (p, n) = (draw(np), draw(nn));
        auc_exact += (evaluation::auc_lower_distance(&p, &n).map_err(err)? == auc_oracle(&p, &n)) as usize;
    }
    let mut bh_worst: f64 = 0.0;
    for _ in 0..100 {
        let p: Vec<f64> = (0..10).map(|_| r.random::<f64>()).collect();
        let q: Vec<f64> = (0..10).map(|_| r.random::<f64>()).collect();
        let closed: f64 = p.iter().zip(&q).map(|(a, b)| -((a * b).sqrt() + ((1.0 - a) * (1.0 - b)).sqrt()).ln()).sum();
        bh_worst = bh_worst.max((evaluation::bhattacharyya_bernoulli_sum(&p, &q).map_err(err)? - closed).abs());
    }
    let mut unique_ok = 0;
    for _ in 0..100 {
        let n = r.random_range(1..=500);
        let bits: Vec<u16> = (0..n).map(|_| r.random_range(0..64u16) * 16).collect();
        let mut sorted = bits.clone();
        sorted.sort_unstable();
        sorted.dedup();
        unique_ok += (evaluation::unique_combination_ratio(&bits).map_err(err)? == sorted.len() as f64 / n as f64) as usize;
    }
    Ok((
        auc_exact == 100 && bh_worst <= 1e-12 && unique_ok == 100,
        format!("AUC exact on {auc_exact}/100 brute-force instances, Bhattacharyya max |diff| {bh_worst:.1e}, unique ratio {unique_ok}/100 vs set oracle"),
    ))
}

fn loss_identities() -> Outcome {
    let arch = mvgen::models::ArchConfig { image_size: 16, content_dim: 4, view_dim: 2, width: 4, ..Default::default() };
    let mut worst: f64 = 0.0;
    let mut fixtures = Vec::new();
    for kind in [ModelKind::Gmv, ModelKind::Cgmv, ModelKind::Cgan, ModelKind::Dcganx4] {
        for zero_d in [false, true] {
            let b = ModelBundle::init(&TrainConfig { arch, batch: 4, ..TrainConfig::new(kind) }).map_err(err)?;
            let (gn, mut dn) = (b.g.cast::<f64>(), b.d.cast::<f64>());
            let en = b.e.as_ref().map(|e| e.cast::<f64>());
            if zero_d {
                for name in ["fc.weight", "fc.bias"] {
                    dn.params.get_mut(name).unwrap().value.data_mut().fill(0.0);
                }
            }
            let mut r = rng::stream(2, kind.as_str());
            let mut randn = |shape: &[usize]| {
                let n = shape.iter().product();
                let d: Vec<f64> = rng::standard_normal(&mut r, n).into_iter().map(|x| (x as f64).tanh()).collect();
                Tensor::new(shape, d).unwrap()
            };
            let k = kind.joint_views().unwrap_or(2);
            let real: Vec<Tensor<f64>> = (0..k).map(|_| randn(&[4, 3, 16, 16])).collect();
            let (c, v, z) = (randn(&[4, 4]), (0..3).map(|_| randn(&[4, 2])).collect::<Vec<_>>(), randn(&[4, 6]));
            let mut g = Graph::new();
            let mut m = Bound::new(&mut g, &gn, &dn, en.as_ref(), true, true);
            let rv: Vec<_> = real.iter().map(|t| g.constant(t.clone())).collect();
            let cv = g.constant(c);
            let vv: Vec<_> = v.iter().map(|t| g.constant(t.clone())).collect();
            let s: Scores = match kind {
                ModelKind::Gmv => objectives::gmv_scores(&mut g, &mut m, Some((rv[0], rv[1])), cv, vv[0], vv[1]),
                ModelKind::Cgmv => objectives::cgmv_scores(&mut g, &mut m, Some((rv[0], rv[1])), rv[1], [vv[0], vv[1], vv[2]]),
                ModelKind::Cgan => objectives::cgan_scores(&mut g, &mut m, Some((rv[0], rv[1])), rv[1], vv[0]),
                _ => {
                    let zv = g.constant(z);
                    objectives::gan_scores(&mut g, &mut m, Some(&rv), zv)
                }
            }
            .map_err(err)?;
            let (dl, gl) = objectives::losses(&mut g, &s, LossVariant::Nonsaturating).map_err(err)?;
            let gm = objectives::generator_loss(&mut g, &s, LossVariant::Minimax).map_err(err)?;
            let mean_ln = |t: &Tensor<f64>, f: &dyn Fn(f64) -> f64| t.data().iter().map(|&p| f(p).ln()).sum::<f64>() / t.numel() as f64;
            let real_s: Vec<Tensor<f64>> = s.real.iter().map(|&p| g.value(p).clone()).collect();
            let fake_s: Vec<Tensor<f64>> = s.fake.iter().map(|&p| g.value(p).clone()).collect();
            let d_ref = -real_s.iter().map(|p| mean_ln(p, &|x| x)).sum::<f64>() - fake_s.iter().map(|p| mean_ln(p, &|x| 1.0 - x)).sum::<f64>();
            let g_ref = -fake_s.iter().map(|p| mean_ln(p, &|x| x)).sum::<f64>();
            let gm_ref = fake_s.iter().map(|p| mean_ln(p, &|x| 1.0 - x)).sum::<f64>();
            let (d, gv, gmv) = (g.value(dl).item(), g.value(gl).item(), g.value(gm).item());
            worst = worst.max((d - d_ref).abs()).max((gv - g_ref).abs()).max((gmv - gm_ref).abs());
            if zero_d {
                let terms = (real_s.len() + fake_s.len()) as f64;
                worst = worst.max((d - terms * LN_2).abs());
                fixtures.push(format!("{kind} {:.6}", d / LN_2));
            }
        }
    }
    Ok((worst <= 1e-6, format!("max |loss - BCE composition| {worst:.1e}; D=0.5 losses in units of ln2: {}", fixtures.join(", "))))
}

fn sha(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn determinism(cache: &Path) -> Outcome {
    let cfg = DatasetConfig::default();
    let a = generate_dataset(&cfg).map_err(err)?.to_bytes().map_err(err)?;
    let b = generate_dataset(&cfg).map_err(err)?.to_bytes().map_err(err)?;
    let cached = fs::read(cache.join("dataset.mvds")).ok();
    let dataset_ok = a == b && cached.as_ref().is_none_or(|c| *c == a);

    let ds = generate_dataset(&DatasetConfig { image_size: 32, ..DatasetConfig::default() }).map_err(err)?;
    let tmp = tempfile::tempdir().map_err(err)?;
    let mut digests = Vec::new();
    for i in 0..2 {
        let dir = tmp.path().join(format!("run{i}"));
        let cfg = TrainConfig { steps: 4, checkpoint_every: 2, ..TrainConfig::new(ModelKind::Cgmv) };
        train::train(ModelBundle::init(&cfg).map_err(err)?, &ds, Some(&RunDir { dir: dir.clone() }), |_, _| Ok(())).map_err(err)?;
        let mut h = Sha256::new();
        for f in ["g.mvck", "d.mvck", "e.mvck"] {
            h.update(fs::read(dir.join(f)).map_err(err)?);
        }
        digests.push(h.finalize());
    }
    let train_ok = digests[0] == digests[1];
    Ok((
        dataset_ok && train_ok,
        format!(
            "dataset sha {} twice{}; C-GMV 4-step checkpoints {}",
            sha(&a),
            if cached.is_some() { " and matches the cached file" } else { "" },
            if train_ok { "bit-identical" } else { "differ" }
        ),
    ))
}

// ----------------------------------------------------------- run cache

struct Cache {
    root: PathBuf,
    ds: Dataset,
    train: bool,
    evaluators: Option<Result<Evaluators, String>>,
    reports: HashMap<(ModelKind, u64), Result<EvalReport, String>>,
}

impl Cache {
    fn open(root: PathBuf) -> mvgen::Result<Self> {
        let path = root.join("dataset.mvds");
        let ds = if path.exists() {
            Dataset::read(&path)?
        } else {
            let ds = generate_dataset(&DatasetConfig::default())?;
            fs::create_dir_all(&root).map_err(|e| mvgen::Error::Io { path: root.clone(), source: e })?;
            ds.write(&path)?;
            ds
        };
        let train = std::env::var("MVGEN_ACCEPTANCE_TRAIN").is_ok_and(|v| v == "1");
        Ok(Self { root, ds, train, evaluators: None, reports: HashMap::new() })
    }

    fn run_dir(&self, kind: ModelKind, seed: u64) -> PathBuf {
        self.root.join("runs").join(format!("{kind}-s{seed}"))
    }

    fn bundle(&self, kind: ModelKind, seed: u64) -> Result<ModelBundle, String> {
        let dir = self.run_dir(kind, seed);
        let mut work = dir.clone().into_os_string();
        work.push(".incomplete");
        let work = PathBuf::from(work);
        let done = dir.join(BUNDLE_FILE).exists().then(|| ModelBundle::load(&dir)).transpose().map_err(err)?;
        if let Some(b) = &done {
            if b.step() >= STEPS {
                return Ok(b.clone());
            }
        }
        let partial = if work.join(BUNDLE_FILE).exists() { Some(ModelBundle::load(&work).map_err(err)?) } else { done };
        let at = partial.as_ref().map_or(0, |b| b.step());
        if !self.train {
            return Err(format!("run {kind}-s{seed} at step {at}/{STEPS} (set MVGEN_ACCEPTANCE_TRAIN=1 or run `mvgen train`)"));
        }
        let mut b = match partial {
            Some(b) => b,
            None => ModelBundle::init(&TrainConfig { seed, steps: STEPS, ..TrainConfig::new(kind) }).map_err(err)?,
        };
        b.config.steps = STEPS;
        if dir.exists() && !work.exists() {
            fs::rename(&dir, &work).map_err(err)?;
        }
        eprintln!("training {kind}-s{seed} from step {at}");
        let b = train::train(b, &self.ds, Some(&RunDir { dir: work.clone() }), |_, _| Ok(())).map_err(err)?;
        fs::rename(&work, &dir).map_err(err)?;
        Ok(b)
    }

    fn evaluators(&mut self) -> Result<&Evaluators, String> {
        if self.evaluators.is_none() {
            let r = Evaluators::cached(&self.ds, &EvaluatorConfig::default(), 0, &self.root.join("evaluators")).map_err(err);
            self.evaluators = Some(r);
        }
        self.evaluators.as_ref().unwrap().as_ref().map_err(Clone::clone)
    }

    fn report(&mut self, kind: ModelKind, seed: u64) -> Result<EvalReport, String> {
        if let Some(r) = self.reports.get(&(kind, seed)) {
            return r.clone();
        }
        let r = self.compute_report(kind, seed);
        self.reports.insert((kind, seed), r.clone());
        r
    }

    fn compute_report(&mut self, kind: ModelKind, seed: u64) -> Result<EvalReport, String> {
        let bundle = self.bundle(kind, seed)?;
        let path = self.root.join("reports").join(format!("{kind}-s{seed}.json"));
        if let Ok(bytes) = fs::read(&path) {
            if let Ok(r) = serde_json::from_slice::<EvalReport>(&bytes) {
                if r.counts.model_steps == bundle.step() && r.counts.pairs == PAIRS && r.counts.samples == SAMPLES {
                    return Ok(r);
                }
            }
        }
        let opts = EvalOptions { pairs: PAIRS, samples: SAMPLES, seed: 0, cache: None, verbose: false };
        let ds = self.ds.clone();
        let ev = self.evaluators()?;
        eprintln!("evaluating {kind}-s{seed}");
        let r = evaluation::evaluate_using(&bundle, &ds, &opts, ev).map_err(err)?;
        mvgen::nn::checkpoint::write_atomic(&path, &serde_json::to_vec_pretty(&r).map_err(err)?).map_err(err)?;
        Ok(r)
    }
}

fn gen_auc(r: &EvalReport) -> f64 {
    match r.metrics.auc {
        AucReport::Generative(a) => a.gen_vs_gen,
        AucReport::Conditional(a) => a.gen_vs_gen,
    }
}

// ------------------------------------------------------------------ 6-10

fn gmv_identity(c: &mut Cache) -> Outcome {
    let gmv = c.report(ModelKind::Gmv, 0)?;
    let dc = c.report(ModelKind::Dcganx8, 0)?;
    let real = match gmv.metrics.auc {
        AucReport::Generative(a) => a.real,
        AucReport::Conditional(a) => a.real,
    };
    let (a, b) = (gen_auc(&gmv), gen_auc(&dc));
    Ok((a >= 0.65 && a > b, format!("GMV gen-vs-gen AUC {a:.3} (need >= 0.65), DCGANx8 {b:.3}, real pairs {real:.3}")))
}

/// Per-seed comparison; passes when most of the seeds agree.
fn majority(c: &mut Cache, f: impl Fn(&mut Cache, u64) -> Result<(bool, String), String>) -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let (ok, text) = f(c, seed)?;
        wins += ok as usize;
        parts.push(format!("s{seed}: {text}"));
    }
    Ok((2 * wins > SEEDS.len(), format!("{wins}/{} seeds; {}", SEEDS.len(), parts.join("; "))))
}

fn diversity_and_d2e(c: &mut Cache) -> Outcome {
    let div = majority(c, |c, s| {
        let (a, b) = (c.report(ModelKind::Cgmv, s)?, c.report(ModelKind::Cgan, s)?);
        let (x, y) = (a.metrics.diversity.generated, b.metrics.diversity.generated);
        Ok((x > y, format!("unique C-GMV {x:.3} vs CGAN {y:.3}")))
    })?;
    let d2e = majority(c, |c, s| {
        let (a, b) = (c.report(ModelKind::Gmv, s)?, c.report(ModelKind::Cgan, s)?);
        let (x, y) = (a.metrics.bhattacharyya.d2e, b.metrics.bhattacharyya.d2e);
        Ok((x < y, format!("D2E GMV {x:.4} vs CGAN {y:.4}")))
    })?;
    Ok((div.0 && d2e.0, format!("diversity {}; D2E {}", div.1, d2e.1)))
}

fn content_transfer(c: &mut Cache) -> Outcome {
    let r = c.report(ModelKind::Cgmv, 0)?;
    let t = r.metrics.content_transfer.ok_or("C-GMV report without content transfer")?;
    Ok((
        t.code_linear >= 5.0 * t.chance && t.image_generated >= 3.0 * t.chance,
        format!(
            "{} objects, chance {:.3}: E(x) linear {:.3} (need >= {:.2}), image classifier on G(E(x),v) {:.3} (need >= {:.2}), on real holdout {:.3}",
            t.objects,
            t.chance,
            t.code_linear,
            5.0 * t.chance,
            t.image_generated,
            3.0 * t.chance,
            t.image_real
        ),
    ))
}

fn blur(c: &mut Cache) -> Outcome {
    majority(c, |c, s| {
        let (a, b) = (c.report(ModelKind::Gmv, s)?, c.report(ModelKind::Cgan, s)?);
        let (x, y) = (a.metrics.blurry_rate.generated, b.metrics.blurry_rate.generated);
        Ok(((x - 0.05).abs() <= 0.15 && x < y, format!("blur GMV {x:.3} vs CGAN {y:.3}")))
    })
}

fn reproducible_samples(c: &Cache) -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    // the trained GMV when present, a fresh one otherwise
    let dir = c.run_dir(ModelKind::Gmv, 0);
    let model = if dir.join(BUNDLE_FILE).exists() {
        dir
    } else {
        let d = tmp.path().join("fresh");
        ModelBundle::init(&TrainConfig::new(ModelKind::Gmv)).map_err(err)?.save(&d).map_err(err)?;
        d
    };
    let bin = env!("CARGO_BIN_EXE_mvgen");
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(bin).args(args).output().map_err(err)?;
        if out.status.success() {
            Ok(())
        } else {
            Err(String::from_utf8_lossy(&out.stderr).into_owned())
        }
    };
    let m = model.to_str().unwrap();
    let grid = tmp.path().join("grid.ppm");
    run(&["sample", "--model", m, "--out", grid.to_str().unwrap(), "--grid", "4x5", "--seed", "9"])?;
    let lat: TileLatents = serde_json::from_value(RunManifest::read(&RunManifest::path_for(&grid)).map_err(err)?.extra).map_err(err)?;
    let bundle = ModelBundle::load(&model).map_err(err)?;
    let (pixels, h, w) = read_ppm(&fs::read(&grid).map_err(err)?).map_err(err)?;
    // every tile on its own, from the manifest latents only
    let mut tiles_ok = 0;
    for r in 0..lat.rows {
        for col in 0..lat.cols {
            let one = sampling::render_tiles(&bundle, &lat, r * lat.cols + col, 1).map_err(err)?;
            let single = TileLatents { rows: 1, cols: 1, content: vec![lat.tile(r, col).0.to_vec()], view: vec![lat.tile(r, col).1.to_vec()], inputs: None };
            let alone = sampling::render(&bundle, &single).map_err(err)?;
            let (bytes, th, tw) = sampling::assemble(&one, 1, 1).map_err(err)?;
            let (bytes2, ..) = sampling::assemble(&alone, 1, 1).map_err(err)?;
            let same = bytes == bytes2
                && (0..3).all(|ch| {
                    (0..th).all(|y| {
                        (0..tw).all(|x| {
                            let (gy, gx) = (r * th + y, col * tw + x);
                            gy < h && gx < w && pixels[(ch * h + gy) * w + gx] == bytes[(ch * th + y) * tw + x]
                        })
                    })
                });
            tiles_ok += same as usize;
        }
    }
    let n_tiles = lat.rows * lat.cols;

    let cd = bundle.config.arch.content_dim;
    let mut r = rng::stream(4, "acceptance/endpoints");
    let (a, b) = (rng::standard_normal(&mut r, cd), rng::standard_normal(&mut r, cd));
    let ends = tmp.path().join("ends.json");
    fs::write(&ends, serde_json::to_vec(&serde_json::json!({ "a": a, "b": b })).map_err(err)?).map_err(err)?;
    let interp = tmp.path().join("interp.ppm");
    run(&["sample", "--model", m, "--out", interp.to_str().unwrap(), "--interpolate", "content", "--steps", "6", "--endpoints", ends.to_str().unwrap()])?;
    let il: TileLatents = serde_json::from_value(RunManifest::read(&RunManifest::path_for(&interp)).map_err(err)?.extra).map_err(err)?;
    let tiles = sampling::render(&bundle, &il).map_err(err)?;
    let v = Tensor::new(&[1, il.view[0].len()], il.view[0].clone()).map_err(err)?;
    let direct = |c: &Vec<f32>| -> Result<Tensor<f32>, String> {
        let c = Tensor::new(&[1, cd], c.clone()).map_err(err)?;
        Ok(bundle.generate(&c, &v).map_err(err)?.swap_remove(0))
    };
    let ends_ok = tiles[0].data() == direct(&a)?.data() && tiles[5].data() == direct(&b)?.data();
    Ok((
        tiles_ok == n_tiles && ends_ok,
        format!(
            "{tiles_ok}/{n_tiles} tiles of a CLI 4x5 grid regenerated bit-exactly from manifest latents; interpolation endpoints {} direct generations",
            if ends_ok { "equal" } else { "differ from" }
        ),
    ))
}

fn main() {
    // `cargo test` passes harness flags such as `--quiet`; filters select nothing here
    let root = std::env::var_os("MVGEN_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"));
    let mut passed = 0;
    let mut total = 0;
    let mut tally = |ok: bool| {
        total += 1;
        passed += ok as usize;
    };
    tally(line(1, "gradient check", gradcheck()));
    tally(line(2, "Adam reference", adam()));
    tally(line(3, "metric oracles", metric_oracles()));
    tally(line(4, "loss identities", loss_identities()));
    tally(line(5, "determinism", determinism(&root)));
    match Cache::open(root.clone()) {
        Ok(mut c) => {
            tally(line(6, "GMV identity AUC", gmv_identity(&mut c)));
            tally(line(7, "diversity and D2E orderings", diversity_and_d2e(&mut c)));
            tally(line(8, "content transfer", content_transfer(&mut c)));
            tally(line(9, "blur rate", blur(&mut c)));
            tally(line(10, "reproducible samples", reproducible_samples(&c)));
        }
        Err(e) => {
            for (id, name) in [(6, "GMV identity AUC"), (7, "diversity and D2E orderings"), (8, "content transfer"), (9, "blur rate"), (10, "reproducible samples")] {
                tally(line(id, name, Err(format!("run cache {}: {e}", root.display()))));
            }
        }
    }
    println!("acceptance: {passed}/{total} criteria pass");
}
