use std::f64::consts::LN_2;

use mvgen::dataset::{generate_dataset, Dataset, DatasetConfig};
use mvgen::models::{ArchConfig, Network};
use mvgen::objectives::{self, Bound, LossVariant, Scores};
use mvgen::rng;
use mvgen::train::{self, ModelBundle, ModelKind, RunDir, TrainConfig, Trainer};
use mvgen::{Error, Graph, Tensor};

fn arch() -> ArchConfig {
    ArchConfig { image_size: 16, content_dim: 4, view_dim: 2, width: 4, ..ArchConfig::default() }
}

fn config(model: ModelKind) -> TrainConfig {
    TrainConfig { batch: 4, steps: 3, arch: arch(), seed: 11, checkpoint_every: 2, ..TrainConfig::new(model) }
}

fn dataset() -> Dataset {
    generate_dataset(&DatasetConfig { train_objects: 3, train_views: 8, test_objects: 2, test_views: 2, image_size: 16, seed: 1 }).unwrap()
}

fn randn(shape: &[usize], name: &str) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = rng::standard_normal(&mut rng::stream(5, name), n).into_iter().map(f64::from).collect();
    Tensor::new(shape, data).unwrap()
}

fn images(n: usize, name: &str) -> Tensor<f64> {
    randn(&[n, 3, 16, 16], name).map(f64::tanh)
}

// Single forward passes in fresh graphs, as the objectives should compose them.

fn fresh_d(d: &Network<f64>, imgs: &[&Tensor<f64>]) -> Tensor<f64> {
    let mut g = Graph::new();
    let mut b = d.bind(&mut g, false, true);
    let vars: Vec<_> = imgs.iter().map(|t| g.constant((*t).clone())).collect();
    let p = d.discriminate(&mut g, &mut b, &vars).unwrap();
    g.value(p).clone()
}

fn fresh_g(net: &Network<f64>, c: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let mut b = net.bind(&mut g, false, true);
    let (c, v) = (g.constant(c.clone()), g.constant(v.clone()));
    let x = net.generate(&mut g, &mut b, c, v).unwrap()[0];
    g.value(x).clone()
}

fn fresh_e(net: &Network<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let mut b = net.bind(&mut g, false, true);
    let x = g.constant(x.clone());
    let c = net.stack_forward(&mut g, &mut b, x).unwrap().0;
    g.value(c).clone()
}

fn close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
}

fn mean_ln(t: &Tensor<f64>, f: impl Fn(f64) -> f64) -> f64 {
    t.data().iter().map(|&p| f(p).ln()).sum::<f64>() / t.numel() as f64
}

struct Case {
    kind: ModelKind,
    scores: Vec<Tensor<f64>>,
    real_terms: usize,
    d_loss: f64,
    g_ns: f64,
    g_mm: f64,
}

/// Build one objective on fixed inputs and check its terms against
/// independent forward passes.
fn run_case(kind: ModelKind, zero_d: bool) -> Case {
    let bundle = ModelBundle::init(&config(kind)).unwrap();
    let (gn, mut dn) = (bundle.g.cast::<f64>(), bundle.d.cast::<f64>());
    let en = bundle.e.as_ref().map(|e| e.cast::<f64>());
    if zero_d {
        for name in ["fc.weight", "fc.bias"] {
            dn.params.get_mut(name).unwrap().value.data_mut().fill(0.0);
        }
    }
    let n = 4;
    let k = kind.joint_views().unwrap_or(2);
    let real: Vec<Tensor<f64>> = (0..k).map(|i| images(n, &format!("real{i}"))).collect();
    let c = randn(&[n, 4], "c");
    let v: Vec<Tensor<f64>> = (0..3).map(|i| randn(&[n, 2], &format!("v{i}"))).collect();
    let z = randn(&[n, 6], "z");

    let mut graph = Graph::new();
    let mut m = Bound::new(&mut graph, &gn, &dn, en.as_ref(), true, true);
    let rv: Vec<_> = real.iter().map(|t| graph.constant(t.clone())).collect();
    let cv = graph.constant(c.clone());
    let vv: Vec<_> = v.iter().map(|t| graph.constant(t.clone())).collect();
    let s: Scores = match kind {
        ModelKind::Gmv => objectives::gmv_scores(&mut graph, &mut m, Some((rv[0], rv[1])), cv, vv[0], vv[1]),
        ModelKind::Cgmv => objectives::cgmv_scores(&mut graph, &mut m, Some((rv[0], rv[1])), rv[1], [vv[0], vv[1], vv[2]]),
        ModelKind::Cgan => objectives::cgan_scores(&mut graph, &mut m, Some((rv[0], rv[1])), rv[1], vv[0]),
        _ => {
            let zv = graph.constant(z.clone());
            objectives::gan_scores(&mut graph, &mut m, Some(&rv), zv)
        }
    }
    .unwrap();
    let (d_loss, g_ns) = objectives::losses(&mut graph, &s, LossVariant::Nonsaturating).unwrap();
    let g_mm = objectives::generator_loss(&mut graph, &s, LossVariant::Minimax).unwrap();
    let val = |v| graph.value(v).clone();
    let scores: Vec<Tensor<f64>> = s.real.iter().chain(&s.fake).map(|&p| val(p)).collect();

    // term structure from independent passes
    let refs: Vec<&Tensor<f64>> = real.iter().collect();
    assert!(close(&scores[0], &fresh_d(&dn, &refs), 1e-12), "{kind} real term");
    let stacked = |c: &Tensor<f64>, vs: &[&Tensor<f64>]| {
        let cs: Vec<&Tensor<f64>> = vs.iter().map(|_| c).collect();
        let x = fresh_g(&gn, &Tensor::cat0(&cs).unwrap(), &Tensor::cat0(vs).unwrap());
        (0..vs.len()).map(|i| x.narrow0(i * n, n).unwrap()).collect::<Vec<_>>()
    };
    match kind {
        ModelKind::Gmv => {
            let f = stacked(&c, &[&v[0], &v[1]]);
            assert!(close(&scores[1], &fresh_d(&dn, &[&f[0], &f[1]]), 1e-12));
        }
        ModelKind::Cgmv => {
            let code = fresh_e(en.as_ref().unwrap(), &real[1]);
            let f = stacked(&code, &[&v[0], &v[1], &v[2]]);
            assert!(close(&scores[1], &fresh_d(&dn, &[&f[0], &f[1]]), 1e-12));
            // genuine image second in the third term
            assert!(close(&scores[2], &fresh_d(&dn, &[&f[2], &real[1]]), 1e-12));
            assert!(!close(&scores[2], &fresh_d(&dn, &[&real[1], &f[2]]), 1e-6) || zero_d);
        }
        ModelKind::Cgan => {
            let code = fresh_e(en.as_ref().unwrap(), &real[1]);
            let f = stacked(&code, &[&v[0]]);
            assert!(close(&scores[1], &fresh_d(&dn, &[&f[0], &real[1]]), 1e-12));
        }
        _ => {}
    }
    Case { kind, real_terms: s.real.len(), scores, d_loss: val(d_loss).item(), g_ns: val(g_ns).item(), g_mm: val(g_mm).item() }
}

const OBJECTIVES: [ModelKind; 4] = [ModelKind::Dcganx2, ModelKind::Cgan, ModelKind::Gmv, ModelKind::Cgmv];

#[test]
fn losses_equal_bce_compositions() {
    for kind in OBJECTIVES {
        let c = run_case(kind, false);
        let (real, fake) = c.scores.split_at(c.real_terms);
        let d: f64 = -real.iter().map(|p| mean_ln(p, |p| p)).sum::<f64>() - fake.iter().map(|p| mean_ln(p, |p| 1.0 - p)).sum::<f64>();
        let g_ns: f64 = -fake.iter().map(|p| mean_ln(p, |p| p)).sum::<f64>();
        let g_mm: f64 = fake.iter().map(|p| mean_ln(p, |p| 1.0 - p)).sum::<f64>();
        assert!((c.d_loss - d).abs() < 1e-6, "{}: {} vs {d}", c.kind, c.d_loss);
        assert!((c.g_ns - g_ns).abs() < 1e-6, "{}", c.kind);
        assert!((c.g_mm - g_mm).abs() < 1e-6, "{}", c.kind);
        assert_eq!(fake.len(), if kind == ModelKind::Cgmv { 2 } else { 1 });
    }
}

#[test]
fn half_discriminator_fixtures() {
    for kind in OBJECTIVES {
        let c = run_case(kind, true);
        assert!(c.scores.iter().all(|s| s.data().iter().all(|&p| p == 0.5)));
        let terms = if kind == ModelKind::Cgmv { 3.0 } else { 2.0 };
        assert!((c.d_loss - terms * LN_2).abs() < 1e-6, "{kind}: {}", c.d_loss);
        assert!((c.g_ns - (terms - 1.0) * LN_2).abs() < 1e-6);
        assert!((c.g_mm + (terms - 1.0) * LN_2).abs() < 1e-6);
    }
}

#[test]
fn half_steps_touch_only_their_networks() {
    let ds = dataset();
    for kind in [ModelKind::Gmv, ModelKind::Cgmv, ModelKind::Cgan, ModelKind::Dcganx8] {
        let mut t = Trainer::new(ModelBundle::init(&config(kind)).unwrap(), &ds).unwrap();
        assert!(t.g_step().is_err());
        let before = t.bundle.clone();
        t.d_step().unwrap();
        assert_ne!(t.bundle.d, before.d);
        assert_eq!(t.bundle.g, before.g, "{kind}: D step moved G");
        assert_eq!(t.bundle.e, before.e);
        let mid = t.bundle.clone();
        t.g_step().unwrap();
        assert_eq!(t.bundle.d, mid.d, "{kind}: G step moved D");
        assert_ne!(t.bundle.g, mid.g);
        if let (Some(e), Some(e0)) = (&t.bundle.e, &mid.e) {
            assert_ne!(e, e0);
        }
        // one Adam step per network per iteration
        t.step().unwrap();
        assert_eq!((t.bundle.d.params.step, t.bundle.g.params.step), (2, 2));
        assert_eq!(t.bundle.e.as_ref().map(|e| e.params.step), kind.is_conditional().then_some(2));
    }
}

#[test]
fn minimax_generator_gets_finite_gradients() {
    let ds = dataset();
    for kind in [ModelKind::Gmv, ModelKind::Cgmv] {
        let cfg = TrainConfig { loss: LossVariant::Minimax, ..config(kind) };
        let mut t = Trainer::new(ModelBundle::init(&cfg).unwrap(), &ds).unwrap();
        let g0 = t.bundle.g.clone();
        let log = t.step().unwrap();
        assert!(log.g_loss.is_finite() && log.g_loss < 0.0);
        assert!(t.bundle.g.params.iter().all(|(_, p)| p.value.is_finite()));
        assert_ne!(t.bundle.g, g0);
    }
}

#[test]
fn zero_steps_writes_the_initial_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir { dir: dir.path().join("run") };
    let cfg = TrainConfig { steps: 0, ..config(ModelKind::Cgmv) };
    let init = ModelBundle::init(&cfg).unwrap();
    let out = train::train(init.clone(), &dataset(), Some(&run), |_, _| Ok(())).unwrap();
    assert_eq!(out, init);
    assert_eq!(ModelBundle::load(&run.dir).unwrap(), init);
    assert!(train::read_log(&run.log_path()).unwrap().is_empty());
}

#[test]
fn training_is_deterministic_and_logged() {
    let ds = dataset();
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<RunDir> = (0..2).map(|i| RunDir { dir: dir.path().join(format!("r{i}")) }).collect();
    let cfg = config(ModelKind::Gmv);
    let mut seen = Vec::new();
    for run in &runs {
        train::train(ModelBundle::init(&cfg).unwrap(), &ds, Some(run), |l, _| {
            seen.push(l.step);
            Ok(())
        })
        .unwrap();
    }
    assert_eq!(seen, [1, 2, 3, 1, 2, 3]);
    for f in ["g.mvck", "d.mvck"] {
        assert_eq!(std::fs::read(runs[0].dir.join(f)).unwrap(), std::fs::read(runs[1].dir.join(f)).unwrap());
    }
    let log = train::read_log(&runs[0].log_path()).unwrap();
    assert_eq!(log.iter().map(|l| l.step).collect::<Vec<_>>(), [1, 2, 3]);
    assert!(log.iter().all(|l| l.d_loss.is_finite() && l.g_loss.is_finite() && (0.0..=1.0).contains(&l.d_real)));

    let other = train::train(ModelBundle::init(&TrainConfig { seed: 12, ..cfg }).unwrap(), &ds, None, |_, _| Ok(())).unwrap();
    assert_ne!(other.g, ModelBundle::load(&runs[0].dir).unwrap().g);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let ds = dataset();
    let dir = tempfile::tempdir().unwrap();
    for kind in [ModelKind::Gmv, ModelKind::Cgmv] {
        let cfg = TrainConfig { steps: 4, ..config(kind) };
        let straight = train::train(ModelBundle::init(&cfg).unwrap(), &ds, None, |_, _| Ok(())).unwrap();

        let run = RunDir { dir: dir.path().join(kind.as_str()) };
        let first = TrainConfig { steps: 2, ..cfg };
        train::train(ModelBundle::init(&first).unwrap(), &ds, Some(&run), |_, _| Ok(())).unwrap();
        let mut resumed = ModelBundle::load(&run.dir).unwrap();
        assert_eq!(resumed.step(), 2);
        resumed.config.steps = 4;
        let resumed = train::train(resumed, &ds, Some(&run), |_, _| Ok(())).unwrap();
        assert_eq!(resumed.g, straight.g, "{kind}");
        assert_eq!(resumed.d, straight.d);
        assert_eq!(resumed.e, straight.e);
        let steps: Vec<u64> = train::read_log(&run.log_path()).unwrap().iter().map(|l| l.step).collect();
        assert_eq!(steps, [1, 2, 3, 4]);
    }
}

#[test]
fn non_finite_loss_aborts_and_keeps_the_checkpoint() {
    let ds = dataset();
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir { dir: dir.path().to_path_buf() };
    let cfg = TrainConfig { steps: 2, ..config(ModelKind::Gmv) };
    train::train(ModelBundle::init(&cfg).unwrap(), &ds, Some(&run), |_, _| Ok(())).unwrap();
    let saved = std::fs::read(run.dir.join("d.mvck")).unwrap();

    let mut bundle = ModelBundle::load(&run.dir).unwrap();
    bundle.config.steps = 5;
    bundle.d.params.get_mut("fc.bias").unwrap().value.data_mut()[0] = f32::NAN;
    let err = train::train(bundle, &ds, Some(&run), |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert_eq!(std::fs::read(run.dir.join("d.mvck")).unwrap(), saved);
}

#[test]
fn bundles_reject_mismatched_inputs() {
    let ds = dataset();
    let big = TrainConfig { arch: ArchConfig { image_size: 32, ..arch() }, ..config(ModelKind::Gmv) };
    assert!(Trainer::new(ModelBundle::init(&big).unwrap(), &ds).is_err());
    let few = generate_dataset(&DatasetConfig { train_objects: 2, train_views: 4, test_objects: 1, test_views: 2, image_size: 16, seed: 1 })
        .unwrap();
    assert!(Trainer::new(ModelBundle::init(&config(ModelKind::Dcganx8)).unwrap(), &few).is_err());
    assert!(ModelBundle::init(&TrainConfig { batch: 1, ..config(ModelKind::Gmv) }).is_err());
    assert!("gmv2".parse::<ModelKind>().is_err());
    assert_eq!("dcganx4".parse::<ModelKind>().unwrap(), ModelKind::Dcganx4);
}
