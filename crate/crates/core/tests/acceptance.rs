//! Acceptance suite. Each test checks one criterion at its tolerance and
//! prints a single `criterion N [PASS|FAIL|WARN]` line to stderr. Per-probe
//! detail is printed normally and shows with `--nocapture`.

use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use masked_diffuse::autograd::Graph;
use masked_diffuse::corpus::{read_records, Corpus, Split, TokenSequence, Vocabulary, PAD};
use masked_diffuse::denoiser::{Denoiser, ModelConfig};
use masked_diffuse::eval::{
    easy_first, length_accuracy, run_ablation, AblationConfig, CellResult, EvalConfig, TeacherConfig,
};
use masked_diffuse::guidance::{
    candidate_rng, guided_gradient, guided_objective, mbr_loss, mbr_select, ClassifierKind,
    ClassifierTrainConfig, ControlSpec, GuidanceConfig, LatentClassifier, Sampler,
};
use masked_diffuse::pos::PosTagger;
use masked_diffuse::schedule::{forward_step, q_sample, MaskState, NoiseSchedule, ScheduleConfig};
use masked_diffuse::strategy::{MaskPlanner, NoiseStrategy};
use masked_diffuse::tensor::{Latent, Matrix, Real};
use masked_diffuse::training::{
    ce_loss_graph, diffusion_ce_loss, gamma, l2_loss, l2_loss_graph, train, MaskedTerm, Objective,
    TrainConfig,
};

/// Writes past the test harness's output capture so the verdict shows up
/// in a plain `cargo test` run.
fn emit(line: &str) {
    let _ = writeln!(std::io::stderr().lock(), "{line}");
}

fn report(n: u32, name: &str, pass: bool, detail: &str) -> bool {
    let tag = if pass { "PASS" } else { "FAIL" };
    emit(&format!("criterion {n} [{tag}] {name}: {detail}"));
    pass
}

fn data_path(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn toy() -> (Vocabulary, Corpus, Corpus) {
    let recs = read_records(&data_path("toy_corpus.jsonl")).unwrap();
    let texts: Vec<&str> = recs.iter().map(|r| r.text.as_str()).collect();
    let v = Vocabulary::build(&texts, 1).unwrap();
    let c = Corpus::from_records(&recs, &v, Split::Train, 16).unwrap();
    let valid = Corpus::load(&data_path("toy_valid.jsonl"), &v, Split::Validation, 16).unwrap();
    (v, c, valid)
}

#[test]
fn c01_full_scale_results_not_claimed() {
    report(
        1,
        "scale",
        true,
        "full-scale benchmark numbers are out of scope; criteria 2-10 are the desk-scale checks",
    );
}

#[test]
fn c02_schedule_correctness() {
    let start = Instant::now();
    let s = NoiseSchedule::new(500, 1e-4, 1e-5).unwrap();
    let a0 = s.alpha_bar(0) == 0.99;
    let decreasing = (1..=500).all(|t| s.raw_alpha_bar(t) < s.raw_alpha_bar(t - 1));
    let beta_ok = (1..=500).all(|t| s.beta(t) > 0.0 && s.beta(t) < 1.0);
    let mut worst = 0.0f64;
    for a in 0..500 {
        let mut prod = 1.0;
        for t in a + 1..=500 {
            prod *= 1.0 - s.beta(t);
            worst = worst.max((prod - s.alpha_bar(t) / s.alpha_bar(a)).abs());
        }
    }
    let elapsed = start.elapsed();
    let pass = a0 && decreasing && beta_ok && worst <= 1e-10 && elapsed < Duration::from_secs(1);
    assert!(report(
        2,
        "schedule",
        pass,
        &format!(
            "alpha_bar_0 = {} exact={a0}, decreasing={decreasing}, beta in (0,1)={beta_ok}, max telescoping err {worst:.2e}, {elapsed:?}",
            s.alpha_bar(0)
        ),
    ));
}

#[test]
fn c03_forward_process_oracle() {
    let start = Instant::now();
    let (v, c, _) = toy();
    let tagger = PosTagger::default();
    let sc = ScheduleConfig::default();
    let planner = MaskPlanner {
        corpus: &c,
        vocab: &v,
        tagger: &tagger,
        schedule: sc,
        strategy: NoiseStrategy::MaskEntropyRel,
    };
    let s = sc.build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 10_000;
    let mut lines = Vec::new();
    let mut pass = true;
    let mut clean_exact = true;
    for probe in 0..5 {
        let d = &c.sentences[rng.random_range(0..c.len())];
        let mask = planner.mask_state(d, &mut rng).unwrap();
        let i = rng.random_range(0..d.len());
        // keep the probed token noisy at the probed step
        let t = rng.random_range(mask.activation[i] + 1..=500);
        let x0 = Latent::<f64>::randn(d.len(), 2, 1.0, &mut rng);
        let (mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            a.push(q_sample(&x0, t, &mask, &s, &mut rng).unwrap().get(i, 0));
            let mut x = x0.clone();
            for u in 0..t {
                x = forward_step(&x, u, &mask, &s, &mut rng).unwrap();
            }
            b.push(x.get(i, 0));
            let q = q_sample(&x0, t, &mask, &s, &mut rng).unwrap();
            for j in (0..d.len()).filter(|&j| mask.activation[j] >= t) {
                clean_exact &= q.row(j) == x0.row(j) && x.row(j) == x0.row(j);
            }
        }
        let moments = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            (m, var)
        };
        let ((ma, va), (mb, vb)) = (moments(&a), moments(&b));
        let nf = n as f64;
        let se_mean = (va / nf + vb / nf).sqrt();
        let se_var = (2.0 * va * va / (nf - 1.0) + 2.0 * vb * vb / (nf - 1.0)).sqrt();
        let ok = (ma - mb).abs() <= 3.0 * se_mean && (va - vb).abs() <= 3.0 * se_var;
        pass &= ok;
        let r = mask.retention(i, t, &s);
        lines.push(format!(
            "probe {probe} (token {i}, t {t}): exact mean {:.4} var {:.4}; mean {ma:.4}/{mb:.4} ({:.1} se), var {va:.4}/{vb:.4} ({:.1} se)",
            r.sqrt() * x0.get(i, 0),
            1.0 - r,
            (ma - mb).abs() / se_mean,
            (va - vb).abs() / se_var
        ));
    }
    let elapsed = start.elapsed();
    pass &= clean_exact && elapsed < Duration::from_secs(60);
    for l in &lines {
        println!("  {l}");
    }
    assert!(report(3, "forward oracle", pass, &format!("5 probes x {n} trajectories within 3 sigma, clean rows exact={clean_exact}, {elapsed:?}")));
}

fn micro(vocab: usize, hidden: usize, steps: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        hidden,
        layers: 1,
        heads: 2,
        ffn_mult: 2,
        max_len: 8,
        steps,
        dropout: 0.0,
        embed_std: 1.0,
        embed_norm: Some(1.0),
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Central differences of `f` over `coords` of parameter tensors, compared
/// with `analytic`. Returns the worst relative error.
fn check_params(
    model: &Denoiser<f64>,
    coords: &[(usize, usize)],
    analytic: &[f64],
    h: f64,
    f: impl Fn(&Denoiser<f64>) -> f64,
) -> f64 {
    coords
        .iter()
        .zip(analytic)
        .map(|(&(p, k), &a)| {
            let mut plus = model.clone();
            plus.params.tensors[p].data_mut()[k] += h;
            let mut minus = model.clone();
            minus.params.tensors[p].data_mut()[k] -= h;
            rel_err(a, (f(&plus) - f(&minus)) / (2.0 * h))
        })
        .fold(0.0, f64::max)
}

/// Up to `n` coordinates with a non-negligible analytic gradient, spread
/// over every parameter tensor.
fn pick_coords<F: Real>(grads: &[Option<Matrix<F>>], n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize, f64)> {
    let mut all: Vec<(usize, usize, f64)> = grads
        .iter()
        .enumerate()
        .filter_map(|(p, g)| g.as_ref().map(|g| (p, g)))
        .flat_map(|(p, g)| g.data().iter().enumerate().map(move |(k, v)| (p, k, v.f64())))
        .filter(|c| c.2.abs() > 1e-4)
        .collect();
    for i in (1..all.len()).rev() {
        all.swap(i, rng.random_range(0..=i));
    }
    all.truncate(n);
    all
}

struct GradCase {
    name: &'static str,
    worst64: f64,
    worst32: f64,
    coords: usize,
}

fn loss_case(objective: Objective) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let steps = 20;
    let s = NoiseSchedule::new(steps, 1e-4, 1e-5).unwrap();
    let d = TokenSequence::from_ids(vec![3, 5, 4, 7, 6]);
    let mask = MaskState::from_bucket_ids(&[1, 2, 3, 2, 1], 3, steps, Default::default());
    let t = 15;
    let m32 = Denoiser::<f32>::new(micro(9, 8, steps), 5).unwrap();
    let m64: Denoiser<f64> = m32.cast();
    let seed = 21;
    let eval = |m: &Denoiser<f64>| match objective {
        Objective::Ce => diffusion_ce_loss(&d, t, m, &s, &mask, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().total,
        Objective::L2 => l2_loss(&d, t, m, &s, &mask, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap(),
    };
    fn grads<F: Real>(
        m: &Denoiser<F>,
        objective: Objective,
        d: &TokenSequence,
        t: usize,
        mask: &MaskState,
        s: &NoiseSchedule,
        seed: u64,
    ) -> Vec<Option<Matrix<F>>> {
        let noise = Latent::<F>::randn(d.len(), m.config.hidden, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut g = m.graph();
        let out = match objective {
            Objective::Ce => ce_loss_graph(m, &mut g, d, t, mask, s, &noise, MaskedTerm::Full, None).unwrap().total,
            Objective::L2 => l2_loss_graph(m, &mut g, d, t, mask, s, &noise, None).unwrap().mse,
        };
        g.backward(out).into_params()
    }
    let g64 = grads(&m64, objective, &d, t, &mask, &s, seed);
    let g32 = grads(&m32, objective, &d, t, &mask, &s, seed);
    let c64 = pick_coords(&g64, 40, &mut rng);
    let coords: Vec<(usize, usize)> = c64.iter().map(|c| (c.0, c.1)).collect();
    let a64: Vec<f64> = c64.iter().map(|c| c.2).collect();
    let a32: Vec<f64> = coords
        .iter()
        .map(|&(p, k)| g32[p].as_ref().unwrap().data()[k] as f64)
        .collect();
    GradCase {
        name: match objective {
            Objective::Ce => "diffusion_ce_loss",
            Objective::L2 => "l2_loss",
        },
        worst64: check_params(&m64, &coords, &a64, 1e-5, eval),
        worst32: check_params(&m64, &coords, &a32, 1e-5, eval),
        coords: coords.len(),
    }
}

/// Gradient of a scalar function of `x` against central differences over
/// every coordinate of `x`.
fn check_input(x: &Latent<f64>, analytic: &Latent<f64>, h: f64, f: impl Fn(&Latent<f64>) -> f64) -> f64 {
    (0..x.data().len())
        .map(|k| {
            let mut p = x.clone();
            p.data_mut()[k] += h;
            let mut m = x.clone();
            m.data_mut()[k] -= h;
            rel_err(analytic.data()[k], (f(&p) - f(&m)) / (2.0 * h))
        })
        .fold(0.0, f64::max)
}

fn classifier_cases() -> Vec<GradCase> {
    let kind = ClassifierKind::Pos {
        tags: ["NOUN", "VERB", "DET", "ADJ"].map(String::from).to_vec(),
    };
    let c32 = LatentClassifier::<f32>::new(kind, 6, 10, 20, 4).unwrap();
    let c64 = LatentClassifier::<f64>::from_record(&c32.to_record()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x64 = Latent::<f64>::randn(4, 6, 1.0, &mut rng);
    let x32: Latent<f32> = x64.cast();
    let mu64 = Latent::<f64>::randn(4, 6, 1.0, &mut rng);
    let mu32: Latent<f32> = mu64.cast();
    let control: ControlSpec = "pos=\"DET NOUN VERB ADJ\"".parse().unwrap();
    let t = 7;

    let lp = |x: &Latent<f64>| c64.log_prob(x, t, &control).unwrap();
    let (_, g64) = c64.log_prob_grad(&x64, t, &control).unwrap();
    let (_, g32) = c32.log_prob_grad(&x32, t, &control).unwrap();
    let clf = GradCase {
        name: "classifier log-prob",
        worst64: check_input(&x64, &g64, 1e-5, lp),
        worst32: check_input(&x64, &g32.cast(), 1e-5, lp),
        coords: x64.data().len(),
    };

    let (beta, lambda) = (0.05, 0.3);
    let obj = |x: &Latent<f64>| guided_objective(x, &mu64, beta, lambda, t, &c64, &control).unwrap();
    let label64 = c64.target(&control).unwrap();
    let label32 = c32.target(&control).unwrap();
    let g64 = guided_gradient(&x64, &mu64, beta, lambda, t, &c64, &label64).unwrap();
    let g32 = guided_gradient(&x32, &mu32, beta, lambda, t, &c32, &label32).unwrap();
    let guided = GradCase {
        name: "guided step objective",
        worst64: check_input(&x64, &g64, 1e-5, obj),
        worst32: check_input(&x64, &g32.cast(), 1e-5, obj),
        coords: x64.data().len(),
    };
    vec![clf, guided]
}

#[test]
fn c04_gradient_checks() {
    let start = Instant::now();
    let mut cases = vec![loss_case(Objective::Ce), loss_case(Objective::L2)];
    cases.extend(classifier_cases());
    let elapsed = start.elapsed();
    let mut pass = elapsed < Duration::from_secs(120);
    for c in &cases {
        let ok = c.coords >= 20 && c.worst64 <= 1e-6 && c.worst32 <= 1e-3;
        pass &= ok;
        println!(
            "  {}: {} coords, worst rel err f64 {:.2e}, f32 {:.2e} {}",
            c.name,
            c.coords,
            c.worst64,
            c.worst32,
            if ok { "ok" } else { "FAIL" }
        );
    }
    assert!(report(4, "gradient checks", pass, &format!("{} functions, {elapsed:?}", cases.len())));
}

#[test]
fn c05_gamma_and_loss_identities() {
    let gamma_ok = gamma(500, 500) == 0.0;
    let mut g = Graph::<f64>::new(&[]);
    let v = 17;
    let logits = g.input(Matrix::zeros(3, v));
    let ce = g.cross_entropy(logits, &[0, 5, 16], &[1.0, 1.0, 1.0]);
    let uniform_err = (g.scalar(ce) - (v as f64).ln()).abs();

    let (vocab, c, _) = toy();
    let tagger = PosTagger::default();
    let sc = ScheduleConfig {
        steps: 50,
        ..Default::default()
    };
    let planner = MaskPlanner {
        corpus: &c,
        vocab: &vocab,
        tagger: &tagger,
        schedule: sc,
        strategy: NoiseStrategy::MaskEntropyRel,
    };
    let mut m = Denoiser::<f64>::new(micro(vocab.len(), 8, 50), 2).unwrap();
    m.config.max_len = 16;
    let mut m = Denoiser::<f64>::new(m.config, 2).unwrap();
    m.config.dropout = 0.0;
    let tc = TrainConfig {
        steps: 40,
        batch_size: 4,
        warmup: 0,
        lr: 1e-3,
        ..Default::default()
    };
    let log = train(&mut m, &planner, &sc.build().unwrap(), &tc, |_, _| Ok(())).unwrap();
    let worst = log
        .iter()
        .filter_map(|r| r.probe)
        .map(|p| (p.total - (p.gamma * p.ce_clean + p.ce_masked)).abs())
        .fold(0.0, f64::max);
    let every = log.iter().all(|r| r.probe.is_some());
    let pass = gamma_ok && uniform_err <= 1e-6 && worst <= 1e-12 && every;
    assert!(report(
        5,
        "gamma and loss identities",
        pass,
        &format!(
            "gamma_T = {}, uniform CE err {uniform_err:.1e}, max |total - (gamma ce_clean + ce_masked)| {worst:.1e} over {} steps",
            gamma(500, 500),
            log.len()
        ),
    ));
}

#[test]
fn c06_mbr_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut agree = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=50);
        let cands: Vec<Vec<u32>> = (0..n)
            .map(|_| {
                let l = rng.random_range(1..=8);
                (0..l).map(|_| rng.random_range(3..9)).collect()
            })
            .collect();
        let got = mbr_select(&cands, |a, b| mbr_loss(a, b)).unwrap();
        let matrix: Vec<Vec<f64>> = cands
            .iter()
            .map(|a| cands.iter().map(|b| mbr_loss(a, b)).collect())
            .collect();
        let mut best = 0;
        let mut best_risk = f64::INFINITY;
        for (i, row) in matrix.iter().enumerate() {
            let risk: f64 = row.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v).sum();
            if risk < best_risk {
                best = i;
                best_risk = risk;
            }
        }
        agree += usize::from(got == best);
    }
    let elapsed = start.elapsed();
    let pass = agree == 100 && elapsed < Duration::from_secs(10);
    assert!(report(6, "MBR oracle", pass, &format!("{agree}/100 sets agree with the exhaustive argmin, {elapsed:?}")));
}

struct Overfit {
    vocab: Vocabulary,
    corpus: Corpus,
    tagger: PosTagger,
    schedule_config: ScheduleConfig,
    schedule: NoiseSchedule,
    model: Denoiser<f32>,
    initial_loss: f64,
    final_loss: f64,
    train_time: Duration,
}

impl Overfit {
    fn planner(&self) -> MaskPlanner<'_> {
        MaskPlanner {
            corpus: &self.corpus,
            vocab: &self.vocab,
            tagger: &self.tagger,
            schedule: self.schedule_config,
            strategy: NoiseStrategy::MaskEntropyRel,
        }
    }

    fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            samples: 5,
            ..Default::default()
        }
    }
}

fn overfit() -> &'static Overfit {
    static MODEL: OnceLock<Overfit> = OnceLock::new();
    MODEL.get_or_init(|| {
        let (vocab, corpus, _) = toy();
        assert_eq!(corpus.len(), 50);
        let tagger = PosTagger::default();
        let schedule_config = ScheduleConfig::default();
        let schedule = schedule_config.build().unwrap();
        let mc = ModelConfig {
            vocab_size: vocab.len(),
            hidden: 32,
            layers: 2,
            heads: 2,
            ffn_mult: 2,
            max_len: 16,
            steps: 500,
            dropout: 0.0,
            embed_std: 1.0,
            embed_norm: Some(1.0),
        };
        let tc = TrainConfig {
            steps: 2000,
            lr: 3e-3,
            batch_size: 128,
            warmup: 100,
            objective: Objective::Ce,
            strategy: NoiseStrategy::MaskEntropyRel,
            ..Default::default()
        };
        let mut model = Denoiser::<f32>::new(mc, tc.seed).unwrap();
        let start = Instant::now();
        let planner = MaskPlanner {
            corpus: &corpus,
            vocab: &vocab,
            tagger: &tagger,
            schedule: schedule_config,
            strategy: NoiseStrategy::MaskEntropyRel,
        };
        let log = train(&mut model, &planner, &schedule, &tc, |_, _| Ok(())).unwrap();
        let train_time = start.elapsed();
        let mean = |r: &[masked_diffuse::training::MetricRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
        let initial_loss = mean(&log[..20]);
        let final_loss = mean(&log[log.len() - 50..]);
        Overfit {
            vocab,
            corpus,
            tagger,
            schedule_config,
            schedule,
            model,
            initial_loss,
            final_loss,
            train_time,
        }
    })
}

#[test]
fn c07_overfit_regression() {
    let o = overfit();
    let planner = o.planner();
    let sampler = Sampler::new(&o.model, &o.schedule, Some(&planner), o.guidance()).unwrap();
    let start = Instant::now();
    let outputs = 20;
    let (mut hit, mut total) = (0, 0);
    for k in 0..outputs {
        let l = o.corpus.sentences[k].len();
        let (best, _) = sampler.sample_mbr(l, None, None, k as u64).unwrap();
        let nearest = o
            .corpus
            .sentences
            .iter()
            .map(|s| {
                s.ids.iter().zip(&best.ids).filter(|(a, b)| a == b).count() as f64 / s.len().max(l) as f64
            })
            .fold(0.0, f64::max);
        hit += (nearest * l as f64).round() as usize;
        total += l;
        println!("  {}", o.vocab.detokenize(&best.ids));
    }
    let acc = hit as f64 / total as f64;
    let ratio = o.final_loss / o.initial_loss;
    let elapsed = o.train_time + start.elapsed();
    let pass = acc >= 0.9 && ratio < 0.2 && elapsed < Duration::from_secs(1800);
    assert!(report(
        7,
        "overfit regression",
        pass,
        &format!(
            "token accuracy {acc:.3} vs nearest training sentence over {outputs} MBR outputs, loss {:.3} -> {:.3} (ratio {ratio:.3}), {elapsed:?}",
            o.initial_loss, o.final_loss
        ),
    ));
}

#[test]
fn c08_easy_first() {
    let o = overfit();
    let planner = o.planner();
    let sampler = Sampler::new(&o.model, &o.schedule, Some(&planner), o.guidance()).unwrap();
    let r = easy_first(&sampler, &planner, 30, 8).unwrap();
    let detail = format!(
        "mean settle step: low-importance {:.1}, top bucket {:.1} over {} sentences",
        r.low_mean, r.top_mean, r.sentences
    );
    if r.holds() {
        report(8, "easy-first", true, &detail);
    } else {
        emit(&format!("criterion 8 [WARN] easy-first: direction not observed; {detail}"));
    }
}

#[test]
fn c09_length_control() {
    let o = overfit();
    let planner = o.planner();
    let sampler = Sampler::new(&o.model, &o.schedule, Some(&planner), o.guidance()).unwrap();
    let mut words = Vec::new();
    let mut targets = Vec::new();
    let mut exact = true;
    for (k, target) in (4..=12).enumerate() {
        let control = ControlSpec::Length { target };
        for s in 0..3 {
            let out = sampler
                .sample(target, None, Some(&control), &mut candidate_rng(k as u64, s))
                .unwrap();
            let live = out.ids.iter().filter(|&&i| i != PAD).count();
            exact &= live == target;
            words.push(masked_diffuse::corpus::split_words(&o.vocab.detokenize(&out.ids)));
            targets.push(target);
        }
    }
    let acc = length_accuracy(&words, &targets).unwrap();
    let pass = exact && acc == 1.0;
    assert!(report(
        9,
        "length control",
        pass,
        &format!("{} samples, exact non-PAD length {exact}, length accuracy {acc:.3}", words.len()),
    ));
}

fn ablation_config() -> AblationConfig {
    AblationConfig {
        model: ModelConfig {
            hidden: 16,
            layers: 1,
            heads: 2,
            ffn_mult: 2,
            max_len: 16,
            dropout: 0.0,
            ..ModelConfig::default()
        },
        schedule: ScheduleConfig {
            steps: 40,
            ..Default::default()
        },
        train: TrainConfig {
            steps: 120,
            batch_size: 8,
            lr: 3e-3,
            warmup: 10,
            ..Default::default()
        },
        guidance: GuidanceConfig {
            k: 1,
            ..Default::default()
        },
        classifier: ClassifierTrainConfig {
            hidden: 16,
            epochs: 2,
            draws: 2,
            ..Default::default()
        },
        teacher: TeacherConfig {
            hidden: 16,
            layers: 1,
            steps: 60,
            batch_size: 8,
            ..Default::default()
        },
        eval: EvalConfig {
            targets: 4,
            samples: 2,
            mbr: true,
            seed: 0,
        },
        field: "food".into(),
        jobs: 1,
    }
}

#[test]
fn c10_ablation_harness() {
    let start = Instant::now();
    let (v, c, valid) = toy();
    let tagger = PosTagger::default();
    let cfg = ablation_config();
    let run = || {
        run_ablation(&c, &valid, &v, &tagger, &NoiseStrategy::ALL, &Objective::ALL, &cfg).unwrap()
    };
    let a = run();
    let b = run();
    let identical = a.to_json().unwrap() == b.to_json().unwrap();
    let shaped = a.strategies == NoiseStrategy::ALL && a.objectives == Objective::ALL && a.cells.len() == 12;
    let failed = a
        .cells
        .iter()
        .filter(|c| matches!(c.result, CellResult::Failed { .. }))
        .count();
    print!("{}", a.to_table());
    let acc = |s| match &a.cell(s, Objective::Ce).unwrap().result {
        CellResult::Ok { report, .. } => Some(report.accuracy),
        CellResult::Failed { .. } => None,
    };
    println!(
        "  directional (reported only): Mask w. Entropy+Rel content accuracy {:?} vs Gaussian {:?}",
        acc(NoiseStrategy::MaskEntropyRel),
        acc(NoiseStrategy::GaussianUniform)
    );
    let pass = identical && shaped && failed == 0;
    assert!(report(
        10,
        "ablation harness",
        pass,
        &format!(
            "6 x 2 sweep, {failed} failed cells, table shape ok={shaped}, bit-identical rerun={identical}, {:?}",
            start.elapsed()
        ),
    ));
}
