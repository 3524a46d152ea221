//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Trains the desk-scale toy system, so it takes several minutes.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use dglm_core::checkpoint::Checkpoint;
use dglm_core::classifier::LinearAttributeClassifier;
use dglm_core::config::RunConfig;
use dglm_core::denoiser::{Denoiser, DenoiserConfig, DenoiserTrainConfig, DenoiserTrainer};
use dglm_core::diffusion::{convert, LatentState, PredKind, Prediction, WeightingFn};
use dglm_core::gmm::LabeledGmm;
use dglm_core::metrics::{attribute_rates, div, dist_n, embedding_similarity, Continuation, GenerationSet, PromptGroup};
use dglm_core::nn::normal_mat;
use dglm_core::pipeline::corpus::{gen_corpus, Record};
use dglm_core::pipeline::decoder::DecoderBatch;
use dglm_core::pipeline::system::{self, decode_seed, AttributeKind, Generator};
use dglm_core::pipeline::{DecoderConfig, SemanticDecoder, ToyGrammar};
use dglm_core::sampler::{
    cfg_blend, dps_estimate, mc_guidance_gradient, mc_guidance_gradient_with, mc_guidance_objective, sample,
    sample_streams, GuidanceConfig, GuidanceTerm, Jacobian, McForm, ScoreModel,
};
use dglm_core::schedules::{NoiseLevel, Schedule};
use dglm_core::verify;
use ndarray::{array, Array1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn fixtures_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures"))
}

fn fixture(name: &str) -> LabeledGmm {
    LabeledGmm::parse(&std::fs::read_to_string(fixtures_dir().join(name)).unwrap()).unwrap()
}

// ---------------------------------------------------------------- 1

fn algebraic_identities() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut vp, mut trip, mut tweedie) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let level = NoiseLevel::from_lambda(rng.random_range(-10.0..10.0));
        vp = vp.max((level.alpha2() + level.sigma2() - 1.0).abs());
        let z = LatentState::new(normal_mat(&mut rng, 1, 3, 1.0), 0.5, level);
        let value = normal_mat(&mut rng, 1, 3, 1.0);
        for from in PredKind::ALL {
            let p = Prediction::new(from, value.clone());
            for to in PredKind::ALL {
                let back = convert(&convert(&p, &z, to).unwrap(), &z, from).unwrap();
                let scale = value.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                trip = trip.max((&back.value - &value).iter().fold(0.0f64, |m, d| m.max(d.abs())) / scale);
            }
        }
        // Tweedie: x̂ from the exact score of N(μ, s²I) is the posterior mean
        let mu = array![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let s2 = rng.random_range(0.2..2.0);
        let g = LabeledGmm::new(vec![1.0], vec![mu.clone()], vec![Array1::from_elem(3, s2)], vec![0]).unwrap();
        let score = g.score_batch(&z.z, level.alpha, level.sigma);
        let x_hat = convert(&Prediction::new(PredKind::Score, score), &z, PredKind::X0).unwrap().value;
        let zr = z.z.row(0).to_owned();
        let post = &mu + &((&zr - &(&mu * level.alpha)) * (level.alpha * s2 / (level.alpha2() * s2 + level.sigma2())));
        let scale = post.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        tweedie = tweedie.max((&x_hat.row(0) - &post).iter().fold(0.0f64, |m, d| m.max(d.abs())) / scale);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        vp < 1e-10 && trip < 1e-10 && tweedie < 1e-10 && secs < 5.0,
        format!("VP {vp:.1e}, round-trip {trip:.1e}, Tweedie {tweedie:.1e} over 1e4 probes, {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- 2

fn rel_err(a: f64, fd: f64, floor: f64) -> f64 {
    (a - fd).abs() / a.abs().max(fd.abs()).max(floor)
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // denoiser training loss, every parameter entry
    let mut den = Denoiser::new(DenoiserConfig { time_features: 8, ..DenoiserConfig::new(4, 8, 2) }, &mut rng);
    den.params_mut().perturb(&mut rng, 0.2);
    let trainer = DenoiserTrainer::new(&den, &Schedule::cosine(), DenoiserTrainConfig::default());
    let x = normal_mat(&mut rng, 3, 4, 0.5);
    let pre = normal_mat(&mut rng, 3, 4, 0.5);
    let mut batch = trainer.draw_batch(&x, &pre, &mut rng);
    batch.keep_prefix = vec![true, false, true];
    let wfn = WeightingFn::default();
    let (_, grads, _) = den.batch_loss(&batch, &wfn).unwrap();
    let h = 1e-6;
    let mut den_err = 0.0f64;
    for (pi, g) in grads.iter().enumerate() {
        for (idx, &a) in g.indexed_iter() {
            let mut m = den.clone();
            m.params_mut().values_mut()[pi][idx] += h;
            let up = m.batch_loss(&batch, &wfn).unwrap().0;
            m.params_mut().values_mut()[pi][idx] -= 2.0 * h;
            let down = m.batch_loss(&batch, &wfn).unwrap().0;
            den_err = den_err.max(rel_err(a, (up - down) / (2.0 * h), 1e-4));
        }
    }

    // decoder + prompt generator, every parameter entry
    let cfg = DecoderConfig {
        width: 16,
        layers: 1,
        heads: 2,
        soft_tokens: 2,
        max_len: 16,
        time_features: 8,
        ..DecoderConfig::new(16, 4)
    };
    let mut dec = SemanticDecoder::new(cfg, &mut rng);
    dec.params_mut().perturb(&mut rng, 0.2);
    let b = DecoderBatch {
        prefixes: vec![vec![1, 2, 3], vec![4, 5, 6]],
        continuations: vec![vec![7, 8, 9, 10], vec![11, 12, 13, 14]],
        z: normal_mat(&mut rng, 2, 4, 1.0),
        lambdas: vec![-1.0, 2.0],
    };
    let (_, grads) = dec.batch_loss(&b).unwrap();
    let h = 1e-5;
    let mut dec_err = 0.0f64;
    for (pi, g) in grads.iter().enumerate() {
        for (idx, &a) in g.indexed_iter() {
            let orig = dec.params().values()[pi][idx];
            dec.params_mut().values_mut()[pi][idx] = orig + h;
            let up = dec.batch_loss(&b).unwrap().0;
            dec.params_mut().values_mut()[pi][idx] = orig - h;
            let down = dec.batch_loss(&b).unwrap().0;
            dec.params_mut().values_mut()[pi][idx] = orig;
            dec_err = dec_err.max(rel_err(a, (up - down) / (2.0 * h), 1e-4));
        }
    }

    // closed-form classifier input gradient on 100 probes
    let clf = LinearAttributeClassifier::new(
        normal_mat(&mut rng, 3, 5, 1.0),
        array![0.2, -0.1, 0.0],
        vec!["a".into(), "b".into(), "c".into()],
    )
    .unwrap();
    let mut clf_err = 0.0f64;
    for probe in 0..100 {
        let x = normal_mat(&mut rng, 1, 5, 1.0).row(0).to_owned();
        let y = probe % 3;
        let g = clf.loss_grad_x(x.view(), y).unwrap();
        let h = 1e-5;
        for j in 0..5 {
            let at = |d: f64| {
                let mut xx = x.clone();
                xx[j] += d;
                -clf.log_prob(xx.view(), y).unwrap()
            };
            // fourth-order central difference
            let fd = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
            clf_err = clf_err.max(rel_err(g[j], fd, 1e-3));
        }
    }

    // full-Jacobian guidance gradient through the denoiser with CFG
    let prefix = normal_mat(&mut rng, 2, 4, 0.5);
    let z = normal_mat(&mut rng, 2, 4, 1.0);
    let clf4 = LinearAttributeClassifier::new(normal_mat(&mut rng, 2, 4, 1.0), array![0.1, -0.2], vec!["a".into(), "b".into()])
        .unwrap();
    let terms = [GuidanceTerm { classifier: &clf4, target: 1, scale: 1.3 }];
    let mut guide_err = 0.0f64;
    for form in [McForm::PaperLiteral, McForm::LikelihoodMean] {
        let gcfg = GuidanceConfig { cfg_weight: 1.7, mc_samples: 5, mc_form: form, ..GuidanceConfig::default() };
        let xi = vec![normal_mat(&mut rng, 5, 4, 1.0), normal_mat(&mut rng, 5, 4, 1.0)];
        let state = LatentState::at(z.clone(), 0.4, &Schedule::cosine()).unwrap();
        let (gz, _) = mc_guidance_gradient_with(&den, &terms, &state, Some(&prefix), &gcfg, &xi).unwrap();
        let h = 1e-6;
        for ((i, j), &a) in gz.indexed_iter() {
            let obj = |d: f64| {
                let mut zz = z.clone();
                zz[[i, j]] += d;
                let s = LatentState::at(zz, 0.4, &Schedule::cosine()).unwrap();
                mc_guidance_objective(&den, &terms, &s, Some(&prefix), &gcfg, &xi).unwrap()[i]
            };
            guide_err = guide_err.max(rel_err(a, (obj(h) - obj(-h)) / (2.0 * h), 1e-6));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        den_err < 1e-3 && dec_err < 1e-3 && clf_err < 1e-6 && guide_err < 1e-3 && secs < 120.0,
        format!(
            "max rel err: denoiser {den_err:.1e}, decoder {dec_err:.1e}, classifier {clf_err:.1e}, guidance {guide_err:.1e}; {secs:.1}s"
        ),
    )
}

// ---------------------------------------------------------------- 3, 4

fn exact_oracle_sampling() -> Outcome {
    let start = Instant::now();
    let gmm = fixture("three_component.gmm");
    let r = verify::unconditional(&gmm, &GuidanceConfig::default(), 10_000, 3).unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        r.tv < 0.05 && r.mean_bias < 0.05 && secs < 120.0,
        format!(
            "occupancy {:?} vs {:?}: TV {:.4}; max mean bias {:.4}; {secs:.1}s",
            r.occupancy.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
            r.expected,
            r.tv,
            r.mean_bias
        ),
    )
}

fn guided_bayes_check() -> (Outcome, Vec<String>) {
    let start = Instant::now();
    let gmm = fixture("two_class.gmm");
    let cfg = GuidanceConfig { mc_form: McForm::LikelihoodMean, ..GuidanceConfig::default() };
    let r = verify::guided(&gmm, 0, 1.0, &cfg, 10_000, 4).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let main = outcome(
        r.tv < 0.07 && secs < 180.0,
        format!(
            "likelihood_mean, n=32: class-0 occupancy {:.4} vs oracle {:.4}, TV {:.4}; {secs:.1}s",
            r.occupancy[0], r.expected[0], r.tv
        ),
    );
    let mut info = Vec::new();
    for (label, cfg) in [
        ("paper_literal, n=32", GuidanceConfig::default()),
        ("plain DPS, n=1", GuidanceConfig { mc_samples: 1, ..GuidanceConfig::default() }),
        (
            "likelihood_mean, scaled-identity Jacobian",
            GuidanceConfig { mc_form: McForm::LikelihoodMean, jacobian: Jacobian::ScaledIdentity, ..GuidanceConfig::default() },
        ),
    ] {
        let r = verify::guided(&gmm, 0, 1.0, &cfg, 4_000, 4).unwrap();
        info.push(format!("{label}: occupancy {:.4} vs {:.4}, TV {:.4}", r.occupancy[0], r.expected[0], r.tv));
    }
    (main, info)
}

// ---------------------------------------------------------------- 7

fn identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut den = Denoiser::new(DenoiserConfig { time_features: 8, ..DenoiserConfig::new(4, 16, 2) }, &mut rng);
    den.params_mut().perturb(&mut rng, 0.3);
    let prefix = normal_mat(&mut rng, 6, 4, 0.5);
    let state = LatentState::at(normal_mat(&mut rng, 6, 4, 1.0), 0.45, &Schedule::cosine()).unwrap();

    // w = 1 is the conditional model alone
    let cond = Prediction::new(PredKind::V, den.predict(&state.z, state.level, Some(&prefix)).unwrap());
    let uncond = Prediction::new(PredKind::V, den.predict(&state.z, state.level, None).unwrap());
    let blended = cfg_blend(&cond, &uncond, 1.0).unwrap();
    let x_cond = convert(&cond, &state, PredKind::X0).unwrap().value;
    let w1 = blended == cond && dps_estimate(&den, &state, Some(&prefix), 1.0).unwrap() == x_cond;

    // s = 0 with two composed classifiers is unguided sampling
    let c1 = LinearAttributeClassifier::binary(Array1::from_elem(4, 0.7), 0.1, ["p", "n"]);
    let c2 = LinearAttributeClassifier::binary(array![1.0, -1.0, 0.5, 0.0], -0.2, ["a", "b"]);
    let zero = [
        GuidanceTerm { classifier: &c1, target: 0, scale: 0.0 },
        GuidanceTerm { classifier: &c2, target: 1, scale: 0.0 },
    ];
    let cfg = GuidanceConfig { steps: 20, ..GuidanceConfig::default() };
    let s = Schedule::cosine();
    let guided = sample(&den, Some(&prefix), &zero, &cfg, &s, 6, 21).unwrap();
    let plain = sample(&den, Some(&prefix), &[], &cfg, &s, 6, 21).unwrap();
    let s0 = guided == plain;

    // n = 1: both Monte-Carlo forms give the same gradient
    let terms = [GuidanceTerm { classifier: &c2, target: 0, scale: 2.0 }];
    let one = |form| {
        let cfg = GuidanceConfig { mc_samples: 1, mc_form: form, cfg_weight: 1.5, ..GuidanceConfig::default() };
        let (_, mut r) = sample_streams(3, 6);
        mc_guidance_gradient(&den, &terms, &state, Some(&prefix), &cfg, &mut r).unwrap()
    };
    let n1 = one(McForm::PaperLiteral) == one(McForm::LikelihoodMean);
    outcome(w1 && s0 && n1, format!("w=1 ≡ conditional: {w1}; s=0 ≡ unguided: {s0}; n=1 forms equal: {n1} (bitwise)"))
}

// ---------------------------------------------------------------- 8

fn metric_fixtures() -> Outcome {
    let toks = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let d = div(&[toks("a a a a")]).unwrap();
    let same = GenerationSet {
        prompts: vec![PromptGroup {
            id: "p0".into(),
            continuations: (0..25).map(|_| Continuation { tokens: toks("a b c d"), scores: BTreeMap::new() }).collect(),
        }],
    };
    let d3 = dist_n(&same, 3).unwrap();
    let mut scores = vec![Some(0.2); 24];
    scores.push(Some(0.9));
    let r = attribute_rates(&[scores], 0.5).unwrap();
    let errs = [
        (d - 1.0 / 6.0).abs(),
        (d3 - 0.04).abs(),
        (r.avg_max - 0.9).abs(),
        (r.rate - 1.0).abs(),
        (r.mean_prop - 0.04).abs(),
    ];
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    outcome(
        worst <= 1e-12,
        format!("Div {d}, Dist-3 {d3}, rates ({}, {}, {}); max error {worst:.1e}", r.avg_max, r.rate, r.mean_prop),
    )
}

// ---------------------------------------------------------------- 9

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_dglm")).args(args).env_remove("SEED").output().unwrap();
    assert!(out.status.success(), "dglm {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("tiny.conf");
    std::fs::write(
        &conf,
        "corpus.size=300\ndenoiser.hidden=16\ndenoiser.layers=1\ndenoiser.steps=30\ndenoiser.batch=16\ndenoiser.warmup=5\n\
         decoder.width=16\ndecoder.layers=1\ndecoder.heads=2\ndecoder.steps=10\ndecoder.warmup=2\ndecoder.batch=4\n\
         guidance.steps=8\nguidance.mc_samples=4\ngenerate.num=3\ngenerate.max_tokens=6\n",
    )
    .unwrap();
    let mut files: Vec<BTreeMap<String, Vec<u8>>> = Vec::new();
    for run in 0..2 {
        let dir = tmp.path().join(format!("run{run}"));
        std::fs::create_dir(&dir).unwrap();
        let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
        let c = conf.to_string_lossy().into_owned();
        let common = ["--config", c.as_str(), "--seed", "7"];
        let cmd = |args: &[&str]| run_cli(&[args, &common[..]].concat());
        cmd(&["gen-corpus", "--grammar-out", &p("grammar.txt"), "--out", &p("corpus.tsv")]);
        let data = ["--grammar", &p("grammar.txt"), "--corpus", &p("corpus.tsv")];
        cmd(&[&["train-diffusion"], &data[..], &["--out", &p("den.ckpt")]].concat());
        cmd(&[&["train-decoder"], &data[..], &["--out", &p("dec.ckpt")]].concat());
        cmd(&[&["train-classifier", "--attribute", "sentiment"], &data[..], &["--out", &p("clf.ckpt")]].concat());
        let gen = |out: &str, props: &str, s: &str| {
            cmd(&[
                "generate", "--grammar", &p("grammar.txt"), "--denoiser", &p("den.ckpt"), "--decoder", &p("dec.ckpt"),
                "--prompts", &p("corpus.tsv"), "--num-prompts", "4", "--classifier", &p("clf.ckpt"), "--target", "pos",
                "--guidance-s", s, "--out", &p(out), "--proposals-out", &p(props),
            ])
        };
        gen("gen0.tsv", "props0.txt", "0");
        gen("gen5.tsv", "props5.txt", "5");
        cmd(&["eval", "--input", &p("gen5.tsv"), "--grammar", &p("grammar.txt"), "--proposals", &p("props5.txt"), "--out", &p("report.tsv")]);
        files.push(
            std::fs::read_dir(&dir)
                .unwrap()
                .map(|e| {
                    let e = e.unwrap();
                    (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
                })
                .collect(),
        );
    }
    let cli_same = files[0] == files[1] && files[0].len() == 10;

    // checkpoint round trips of freshly trained models
    let ckpt_ok = ["den.ckpt", "dec.ckpt", "clf.ckpt"].iter().all(|name| {
        let bytes = &files[0][*name];
        Checkpoint::from_bytes(bytes).unwrap().to_bytes() == *bytes
    });
    let dir = tmp.path().join("run0");
    let den = Denoiser::load(&dir.join("den.ckpt"), None).unwrap();
    let dec = SemanticDecoder::load(&dir.join("dec.ckpt")).unwrap();
    let models_ok = den.to_checkpoint().to_bytes() == files[0]["den.ckpt"]
        && dec.to_checkpoint().to_bytes() == files[0]["dec.ckpt"];
    outcome(
        cli_same && ckpt_ok && models_ok,
        format!(
            "{} CLI output files byte-identical across runs: {cli_same}; checkpoint bytes round-trip: {ckpt_ok}; \
             loaded models re-serialize identically: {models_ok}",
            files[0].len()
        ),
    )
}

// ---------------------------------------------------------------- 5, 6

struct Trained {
    grammar: ToyGrammar,
    cfg: RunConfig,
    embedder: dglm_core::pipeline::Embedder,
    denoiser: Denoiser,
    decoder: SemanticDecoder,
    classifier: LinearAttributeClassifier,
    held: Vec<Record>,
    train_secs: f64,
}

fn train_toy_system() -> Trained {
    let start = Instant::now();
    let cfg = RunConfig::parse(include_str!("../../../configs/desk.conf")).unwrap();
    let grammar = ToyGrammar::generate(&cfg.grammar()).unwrap();
    let records = gen_corpus(&grammar, cfg.int("corpus.size"), cfg.seed());
    let held = gen_corpus(&grammar, 2000, cfg.seed() + 1);
    let embedder = cfg.embedder(grammar.vocab_size()).unwrap();
    let decoder =
        system::train_decoder(&records, &embedder, cfg.decoder(grammar.vocab_size()), cfg.decoder_train(), &mut |_, _| {})
            .unwrap();
    let denoiser =
        system::train_denoiser(&records, &embedder, cfg.denoiser(), cfg.denoiser_train(), &mut |_, _| {}).unwrap();
    let (classifier, _) = system::train_classifier(&records, &embedder, AttributeKind::Sentiment, cfg.classifier()).unwrap();
    Trained { grammar, cfg, embedder, denoiser, decoder, classifier, held, train_secs: start.elapsed().as_secs_f64() }
}

fn perplexity(grammar: &ToyGrammar, seqs: &[Vec<usize>]) -> f64 {
    let nll: f64 = seqs.iter().map(|s| -grammar.marginal_log_prob(s).unwrap()).sum();
    let n: usize = seqs.iter().map(Vec::len).sum();
    (nll / n as f64).exp()
}

/// Guided sentiment control from sentiment-neutral prompts.
fn control_sweep(t: &Trained, guidance: GuidanceConfig) -> (Vec<f64>, Vec<f64>) {
    let (prompts, per) = (40, 25);
    let neutral =
        system::neutral_prompts(&t.grammar, &t.held, AttributeKind::Sentiment, t.cfg.float("generate.neutral_band")).unwrap();
    let prefixes: Vec<Vec<usize>> =
        neutral[..prompts].iter().flat_map(|r| std::iter::repeat_n(r.prefix.clone(), per)).collect();
    let gen = Generator {
        embedder: &t.embedder,
        denoiser: &t.denoiser,
        decoder: &t.decoder,
        guidance,
        noise_var: t.cfg.float("generate.noise_var"),
        max_tokens: t.cfg.int("generate.max_tokens"),
    };
    let target = t.classifier.class_index("pos").unwrap();
    let mut props = Vec::new();
    let mut ppls = Vec::new();
    for s in [0.0, 5.0, 10.0, 20.0] {
        let terms = [GuidanceTerm { classifier: &t.classifier, target, scale: s }];
        let (out, _) = gen.generate(&prefixes, &terms, 100).unwrap();
        let groups: Vec<Vec<Option<f64>>> =
            out.chunks(per).map(|c| c.iter().map(|o| Some(t.grammar.p_positive(o).unwrap())).collect()).collect();
        props.push(attribute_rates(&groups, t.cfg.float("eval.threshold")).unwrap().mean_prop);
        ppls.push(perplexity(&t.grammar, &out));
    }
    (props, ppls)
}

fn control_monotonicity(t: &Trained) -> Outcome {
    let start = Instant::now();
    let (props, ppls) = control_sweep(t, t.cfg.guidance());
    let total = t.train_secs + start.elapsed().as_secs_f64();
    let monotone = props.windows(2).all(|w| w[1] >= w[0]);
    let ppl_rise = ppls.iter().cloned().fold(0.0, f64::max) / ppls[0] - 1.0;
    outcome(
        monotone && props[3] >= 0.90 && props[0] <= 0.60 && ppl_rise <= 0.25 && total <= 1800.0,
        format!(
            "{}: mean_prop(s=0,5,10,20) = {:.3?}; perplexity {:.2?} (max rise {:+.1}%); training + eval {:.0}s",
            t.cfg.get("guidance.mc_form"),
            props,
            ppls,
            100.0 * ppl_rise,
            total
        ),
    )
}

/// Two-sample χ² homogeneity test; sparse categories are pooled until every
/// expected count is at least 5.
fn chi2_two_sample(a: &[usize], b: &[usize]) -> (f64, f64) {
    let (na, nb) = (a.iter().sum::<usize>() as f64, b.iter().sum::<usize>() as f64);
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let mut pooled = (0.0, 0.0);
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by_key(|&k| std::cmp::Reverse(a[k] + b[k]));
    for k in order {
        let (x, y) = (a[k] as f64, b[k] as f64);
        let expected_min = (x + y) * na.min(nb) / (na + nb);
        if expected_min >= 5.0 {
            cells.push((x, y));
        } else {
            pooled.0 += x;
            pooled.1 += y;
        }
    }
    if pooled.0 + pooled.1 > 0.0 {
        cells.push(pooled);
    }
    let n = na + nb;
    let stat: f64 = cells
        .iter()
        .map(|&(x, y)| {
            let (ea, eb) = ((x + y) * na / n, (x + y) * nb / n);
            (x - ea).powi(2) / ea + (y - eb).powi(2) / eb
        })
        .sum();
    let dof = (cells.len() - 1) as f64;
    (stat, 1.0 - ChiSquared::new(dof).unwrap().cdf(stat))
}

fn noise_knob(t: &Trained) -> Outcome {
    let held = &t.held[..500];
    let prefixes: Vec<Vec<usize>> = held.iter().map(|r| r.prefix.clone()).collect();
    let gen = Generator {
        embedder: &t.embedder,
        denoiser: &t.denoiser,
        decoder: &t.decoder,
        guidance: t.cfg.guidance(),
        noise_var: 0.0,
        max_tokens: t.cfg.int("generate.max_tokens"),
    };
    let proposals = gen.proposals(&prefixes, &[], 200).unwrap();
    let prop_rows: Vec<Array1<f64>> = proposals.rows().into_iter().map(|r| r.to_owned()).collect();
    let seeds: Vec<u64> = (0..held.len() as u64).map(|i| decode_seed(300, i)).collect();
    let mut sims = Vec::new();
    for nv in [0.0, 0.05, 0.2, 1.0] {
        let out = t.decoder.generate(&prefixes, Some(&proposals), nv, gen.max_tokens, &seeds).unwrap();
        let emb: Vec<Array1<f64>> = out.iter().map(|o| t.embedder.embed(o).unwrap()).collect();
        sims.push(embedding_similarity(&emb, &prop_rows, None).unwrap());
    }
    let inversions: Vec<f64> = sims.windows(2).filter(|w| w[1] >= w[0]).map(|w| w[1] - w[0]).collect();
    let ordered = inversions.is_empty() || (inversions.len() == 1 && inversions[0] <= 0.01);

    // first-token law at noise 1 versus pure-noise (unconditional) decoding
    let draws = 10_000;
    let vocab = t.grammar.vocab_size();
    let (mut with_prop, mut uncond) = (vec![0usize; vocab], vec![0usize; vocab]);
    for chunk in 0..draws / 500 {
        let base = (chunk * 500) as u64;
        let s1: Vec<u64> = (0..500).map(|i| decode_seed(400, base + i)).collect();
        let s2: Vec<u64> = (0..500).map(|i| decode_seed(500, base + i)).collect();
        for o in t.decoder.generate(&prefixes, Some(&proposals), 1.0, 1, &s1).unwrap() {
            with_prop[o[0]] += 1;
        }
        for o in t.decoder.generate(&prefixes, None, 1.0, 1, &s2).unwrap() {
            uncond[o[0]] += 1;
        }
    }
    let (stat, p) = chi2_two_sample(&with_prop, &uncond);
    outcome(
        ordered && p > 0.01,
        format!(
            "similarity(noise 0, 0.05, 0.2, 1.0) = {:.4?}; first-token χ² = {stat:.1}, p = {p:.3} over {draws} draws each",
            sims
        ),
    )
}

fn main() {
    // `cargo test -- --list` and filters come through here too
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut failed = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        failed += (!o.pass) as usize;
        println!("{} criterion {n} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    };
    report(1, "algebraic identities", algebraic_identities());
    report(2, "gradient suite", gradients());
    report(3, "exact-oracle sampling", exact_oracle_sampling());
    let (bayes, info) = guided_bayes_check();
    report(4, "guided Bayes check", bayes);
    for line in info {
        println!("     info (criterion 4, other guidance forms): {line}");
    }
    let trained = train_toy_system();
    report(5, "control monotonicity", control_monotonicity(&trained));
    let alt = GuidanceConfig { mc_form: McForm::PaperLiteral, ..trained.cfg.guidance() };
    let (props, ppls) = control_sweep(&trained, alt);
    println!(
        "     info (criterion 5, paper_literal): mean_prop {props:.3?}; perplexity {ppls:.2?} (max rise {:+.1}%)",
        100.0 * (ppls.iter().cloned().fold(0.0, f64::max) / ppls[0] - 1.0)
    );
    report(6, "noise-knob trend", noise_knob(&trained));
    report(7, "CFG and zero-guidance identities", identities());
    report(8, "metric fixtures", metric_fixtures());
    report(9, "determinism and persistence", determinism());
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
