use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use dglm_core::checkpoint::Checkpoint;
use dglm_core::classifier::LinearAttributeClassifier;
use dglm_core::config::RunConfig;
use dglm_core::denoiser::Denoiser;
use dglm_core::gmm::LabeledGmm;
use dglm_core::metrics::{attribute_rates, div, dist_n, embedding_similarity, score_groups, Continuation, GenerationSet, PromptGroup};
use dglm_core::pipeline::corpus::{self, Record};
use dglm_core::pipeline::system::{self, decode_seed, AttributeKind, Generator};
use dglm_core::pipeline::{SemanticDecoder, ToyGrammar};
use dglm_core::sampler::{GuidanceTerm, McForm};
use dglm_core::verify;
use log::info;
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Command, DataArgs};

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    grammar: PathBuf,
    #[arg(long)]
    denoiser: PathBuf,
    #[arg(long)]
    decoder: PathBuf,
    /// Corpus file whose prefixes are continued.
    #[arg(long)]
    prompts: PathBuf,
    /// Keep only prefixes that leave this attribute undecided
    /// (see `generate.neutral_band`).
    #[arg(long)]
    neutral: Option<String>,
    /// Use only the first N prompts.
    #[arg(long)]
    num_prompts: Option<usize>,
    /// Classifier checkpoint; repeat together with --target and --guidance-s.
    #[arg(long)]
    classifier: Vec<PathBuf>,
    /// Class name the matching classifier is pushed towards.
    #[arg(long)]
    target: Vec<String>,
    #[arg(long = "guidance-s")]
    guidance_s: Vec<f64>,
    #[arg(long = "cfg-w")]
    cfg_w: Option<f64>,
    #[arg(long = "mc-n")]
    mc_n: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long = "mc-form")]
    mc_form: Option<String>,
    #[arg(long)]
    jacobian: Option<String>,
    /// Decoder noise variance applied to the proposal.
    #[arg(long)]
    noise: Option<f64>,
    /// Corpus file whose continuation latents replace diffusion proposals.
    #[arg(long)]
    proposal_from: Option<PathBuf>,
    /// Continuations per prompt.
    #[arg(long)]
    num: Option<usize>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Write the proposal latents, one line per continuation.
    #[arg(long)]
    proposals_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Generation file.
    #[arg(long)]
    input: PathBuf,
    /// Grammar for oracle perplexity; also needed for similarity.
    #[arg(long)]
    grammar: Option<PathBuf>,
    /// Proposal file written by `generate --proposals-out`.
    #[arg(long)]
    proposals: Option<PathBuf>,
    /// Corpus used to estimate the random-pair similarity baseline.
    #[arg(long)]
    baseline_corpus: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct VerifyArgs {
    /// Mixture fixture files.
    #[arg(required = true)]
    fixtures: Vec<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long = "mc-form", default_value = "likelihood_mean")]
    mc_form: String,
}

fn set_opt<T: ToString>(cfg: &mut RunConfig, key: &str, v: Option<T>) -> Result<()> {
    if let Some(v) = v {
        cfg.set(key, &v.to_string())?;
    }
    Ok(())
}

fn progress_logger(what: &'static str, total: usize) -> impl FnMut(usize, f64) {
    let start = Instant::now();
    let every = (total / 20).max(1);
    let mut ema = f64::NAN;
    move |step, loss| {
        ema = if ema.is_nan() { loss } else { 0.98 * ema + 0.02 * loss };
        if (step + 1) % every == 0 || step + 1 == total {
            info!("{what} step {}/{total} loss {ema:.4} ({:.1?})", step + 1, start.elapsed());
        }
    }
}

fn load_data(data: &DataArgs) -> Result<(ToyGrammar, Vec<Record>)> {
    let grammar = load_grammar(&data.grammar)?;
    let records = corpus::load(&grammar, &data.corpus).with_context(|| format!("reading {}", data.corpus.display()))?;
    ensure!(!records.is_empty(), "corpus {} is empty", data.corpus.display());
    Ok((grammar, records))
}

fn load_grammar(path: &Path) -> Result<ToyGrammar> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ToyGrammar::parse(&text)?)
}

pub fn run(command: Command, mut cfg: RunConfig) -> Result<()> {
    match command {
        Command::GenCorpus { size, grammar_out, out } => {
            set_opt(&mut cfg, "corpus.size", size)?;
            info!("resolved config:\n{}", cfg.resolved());
            let grammar = ToyGrammar::generate(&cfg.grammar())?;
            let records = corpus::gen_corpus(&grammar, cfg.int("corpus.size"), cfg.seed());
            fs::write(&grammar_out, grammar.to_text())?;
            corpus::save(&grammar, &records, &out)?;
            info!("wrote {} records to {}", records.len(), out.display());
        }
        Command::TrainDiffusion { data, steps, out } => {
            set_opt(&mut cfg, "denoiser.steps", steps)?;
            info!("resolved config:\n{}", cfg.resolved());
            let (grammar, records) = load_data(&data)?;
            let embedder = cfg.embedder(grammar.vocab_size())?;
            let train = cfg.denoiser_train();
            let model = system::train_denoiser(
                &records,
                &embedder,
                cfg.denoiser(),
                train,
                &mut progress_logger("denoiser", train.steps),
            )?;
            model.save(&out)?;
        }
        Command::TrainClassifier { data, attribute, l2, balanced, out } => {
            set_opt(&mut cfg, "classifier.l2", l2)?;
            if balanced {
                cfg.set("classifier.balanced", "true")?;
            }
            info!("resolved config:\n{}", cfg.resolved());
            let attribute = AttributeKind::parse(&attribute)?;
            let (grammar, records) = load_data(&data)?;
            let embedder = cfg.embedder(grammar.vocab_size())?;
            let (clf, _) = system::train_classifier(&records, &embedder, attribute, cfg.classifier())?;
            clf.to_checkpoint().save(&out)?;
        }
        Command::TrainDecoder { data, steps, out } => {
            set_opt(&mut cfg, "decoder.steps", steps)?;
            info!("resolved config:\n{}", cfg.resolved());
            let (grammar, records) = load_data(&data)?;
            let embedder = cfg.embedder(grammar.vocab_size())?;
            let train = cfg.decoder_train();
            let model = system::train_decoder(
                &records,
                &embedder,
                cfg.decoder(grammar.vocab_size()),
                train,
                &mut progress_logger("decoder", train.steps),
            )?;
            model.save(&out)?;
        }
        Command::Generate(args) => generate(args, cfg)?,
        Command::Eval(args) => eval(args, cfg)?,
        Command::VerifyOracle(args) => verify_oracle(args, cfg)?,
    }
    Ok(())
}

fn generate(a: GenerateArgs, mut cfg: RunConfig) -> Result<()> {
    set_opt(&mut cfg, "guidance.cfg_weight", a.cfg_w)?;
    set_opt(&mut cfg, "guidance.mc_samples", a.mc_n)?;
    set_opt(&mut cfg, "guidance.steps", a.steps)?;
    set_opt(&mut cfg, "guidance.mc_form", a.mc_form.as_ref())?;
    set_opt(&mut cfg, "guidance.jacobian", a.jacobian.as_ref())?;
    set_opt(&mut cfg, "generate.noise_var", a.noise)?;
    set_opt(&mut cfg, "generate.num", a.num)?;
    set_opt(&mut cfg, "generate.max_tokens", a.max_tokens)?;
    info!("resolved config:\n{}", cfg.resolved());
    ensure!(
        a.classifier.len() == a.target.len() && a.target.len() == a.guidance_s.len(),
        "--classifier, --target and --guidance-s must be given the same number of times ({}, {}, {})",
        a.classifier.len(),
        a.target.len(),
        a.guidance_s.len()
    );

    let grammar = load_grammar(&a.grammar)?;
    let embedder = cfg.embedder(grammar.vocab_size())?;
    let denoiser = Denoiser::load(&a.denoiser, Some(&cfg.denoiser()))
        .with_context(|| format!("loading {}", a.denoiser.display()))?;
    let decoder = SemanticDecoder::load(&a.decoder).with_context(|| format!("loading {}", a.decoder.display()))?;
    let classifiers = a
        .classifier
        .iter()
        .map(|p| Ok(LinearAttributeClassifier::from_checkpoint(&Checkpoint::load(p)?)?))
        .collect::<Result<Vec<_>>>()?;
    let mut terms = Vec::new();
    for ((clf, target), &scale) in classifiers.iter().zip(&a.target).zip(&a.guidance_s) {
        terms.push(GuidanceTerm { classifier: clf, target: clf.class_index(target)?, scale });
    }

    let mut records = corpus::load(&grammar, &a.prompts)?;
    if let Some(attr) = &a.neutral {
        let band = cfg.float("generate.neutral_band");
        let total = records.len();
        records = system::neutral_prompts(&grammar, &records, AttributeKind::parse(attr)?, band)?
            .into_iter()
            .cloned()
            .collect();
        info!("{} of {total} prompts are {attr}-neutral (band {band})", records.len());
    }
    if let Some(n) = a.num_prompts {
        ensure!(n <= records.len(), "asked for {n} prompts but {} has {}", a.prompts.display(), records.len());
        records.truncate(n);
    }
    ensure!(!records.is_empty(), "no prompts");
    let num = cfg.int("generate.num");
    ensure!(num > 0, "generate.num must be positive");
    let prefixes: Vec<Vec<usize>> = records.iter().flat_map(|r| std::iter::repeat_n(r.prefix.clone(), num)).collect();

    let gen = Generator {
        embedder: &embedder,
        denoiser: &denoiser,
        decoder: &decoder,
        guidance: cfg.guidance(),
        noise_var: cfg.float("generate.noise_var"),
        max_tokens: cfg.int("generate.max_tokens"),
    };
    let seed = cfg.seed();
    let start = Instant::now();
    let (tokens, proposals) = match &a.proposal_from {
        None => gen.generate(&prefixes, &terms, seed)?,
        Some(path) => {
            let source = corpus::load(&grammar, path)?;
            ensure!(
                source.len() >= records.len(),
                "{} has {} records but {} prompts need proposals",
                path.display(),
                source.len(),
                records.len()
            );
            let latents = system::continuation_latents(&embedder, &source[..records.len()])?;
            let rows: Vec<usize> = (0..records.len()).flat_map(|i| std::iter::repeat_n(i, num)).collect();
            let props = latents.select(ndarray::Axis(0), &rows);
            let seeds: Vec<u64> = (0..prefixes.len() as u64).map(|i| decode_seed(seed, i)).collect();
            let out = decoder.generate(&prefixes, Some(&props), gen.noise_var, gen.max_tokens, &seeds)?;
            (out, props)
        }
    };
    info!("generated {} continuations in {:.1?}", tokens.len(), start.elapsed());

    let mut set = GenerationSet::default();
    for (i, chunk) in tokens.chunks(num).enumerate() {
        let continuations = chunk
            .iter()
            .map(|t| {
                let p_pos = grammar.p_positive(t)?;
                let p_a = grammar.p_topic_a(t)?;
                let scores = BTreeMap::from([
                    ("pos".to_string(), p_pos),
                    ("neg".to_string(), 1.0 - p_pos),
                    ("a".to_string(), p_a),
                    ("b".to_string(), 1.0 - p_a),
                ]);
                Ok(Continuation { tokens: t.iter().map(|&id| grammar.symbol(id).to_string()).collect(), scores })
            })
            .collect::<Result<Vec<_>>>()?;
        set.prompts.push(PromptGroup { id: format!("p{i}"), continuations });
    }
    fs::write(&a.out, set.to_text())?;
    if let Some(path) = &a.proposals_out {
        let mut text = String::new();
        for row in proposals.rows() {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            text.push_str(&vals.join(" "));
            text.push('\n');
        }
        fs::write(path, text)?;
    }
    Ok(())
}

fn parse_vectors(text: &str) -> Result<Vec<Array1<f64>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| {
            let v = l
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .with_context(|| format!("proposal line {}", n + 1))?;
            Ok(Array1::from(v))
        })
        .collect()
}

fn eval(a: EvalArgs, mut cfg: RunConfig) -> Result<()> {
    set_opt(&mut cfg, "eval.threshold", a.threshold)?;
    let set = GenerationSet::parse(&fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?)?;
    ensure!(!set.is_empty(), "{} holds no continuations", a.input.display());
    let threshold = cfg.float("eval.threshold");

    let mut report: Vec<(String, f64)> = Vec::new();
    report.push(("continuations".into(), set.len() as f64));
    report.push(("prompts".into(), set.prompts.len() as f64));
    let samples: Vec<Vec<String>> = set.continuations().map(|c| c.tokens.clone()).collect();
    report.push(("div".into(), div(&samples)?));
    report.push(("dist3".into(), dist_n(&set, 3)?));

    let mut names: Vec<&String> = set.continuations().flat_map(|c| c.scores.keys()).collect();
    names.sort();
    names.dedup();
    for name in names {
        let r = attribute_rates(&score_groups(&set, name), threshold)?;
        report.push((format!("avg_max.{name}"), r.avg_max));
        report.push((format!("rate.{name}"), r.rate));
        report.push((format!("mean_prop.{name}"), r.mean_prop));
        report.push((format!("excluded.{name}"), r.excluded as f64));
    }

    if let Some(gpath) = &a.grammar {
        let grammar = load_grammar(gpath)?;
        let ids: Vec<Vec<usize>> = samples
            .iter()
            .map(|s| s.iter().map(|t| grammar.id(t)).collect::<dglm_core::Result<Vec<_>>>())
            .collect::<dglm_core::Result<_>>()?;
        // token-weighted: exp of the mean per-token negative log-likelihood
        let (mut nll, mut count) = (0.0, 0usize);
        for s in &ids {
            nll -= grammar.marginal_log_prob(s)?;
            count += s.len();
        }
        report.push(("perplexity".into(), (nll / count as f64).exp()));

        if let Some(ppath) = &a.proposals {
            let proposals = parse_vectors(&fs::read_to_string(ppath)?)?;
            let embedder = cfg.embedder(grammar.vocab_size())?;
            let generated = ids.iter().map(|s| embedder.embed(s)).collect::<dglm_core::Result<Vec<_>>>()?;
            report.push(("similarity".into(), embedding_similarity(&generated, &proposals, None)?));
            if let Some(cpath) = &a.baseline_corpus {
                let records = corpus::load(&grammar, cpath)?;
                ensure!(records.len() >= 2, "baseline corpus needs at least two records");
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed());
                let pairs = cfg.int("eval.baseline_pairs");
                ensure!(pairs > 0, "eval.baseline_pairs must be positive");
                let mut total = 0.0;
                for _ in 0..pairs {
                    let i = rng.random_range(0..records.len());
                    let mut j = rng.random_range(0..records.len() - 1);
                    j += (j >= i) as usize;
                    let (x, y) = (embedder.embed(&records[i].continuation)?, embedder.embed(&records[j].continuation)?);
                    total += x.dot(&y);
                }
                let base = total / pairs as f64;
                report.push(("similarity_baseline".into(), base));
                report.push(("similarity_rescaled".into(), embedding_similarity(&generated, &proposals, Some(base))?));
            }
        }
    } else if a.proposals.is_some() {
        bail!("--proposals needs --grammar to embed the continuations");
    }

    let mut out = String::new();
    for (k, v) in &report {
        let _ = writeln!(out, "{k}\t{v}");
    }
    for line in cfg.resolved().lines() {
        let (k, v) = line.split_once('=').expect("resolved lines are key=value");
        let _ = writeln!(out, "config.{k}\t{v}");
    }
    match &a.out {
        Some(path) => fs::write(path, out)?,
        None => print!("{out}"),
    }
    Ok(())
}

fn verify_oracle(a: VerifyArgs, cfg: RunConfig) -> Result<()> {
    let mut guidance = cfg.guidance();
    guidance.mc_form = a.mc_form.parse::<McForm>()?;
    let seed = cfg.seed();
    let mut failed = 0;
    let mut line = |name: String, ok: bool, detail: String| {
        failed += (!ok) as usize;
        println!("{}\t{name}\t{detail}", if ok { "PASS" } else { "FAIL" });
    };
    for path in &a.fixtures {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let gmm = LabeledGmm::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
        let name = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());

        let u = verify::unconditional(&gmm, &guidance, a.samples, seed)?;
        line(format!("{name}.occupancy"), u.tv < 0.05, format!("tv={:.4} (< 0.05)", u.tv));
        line(format!("{name}.mean_bias"), u.mean_bias < 0.05, format!("max_bias={:.4} (< 0.05)", u.mean_bias));
        // the guided check needs the exact log-linear Bayes classifier
        if gmm.classes() == 2 && gmm.components() == 2 {
            for target in 0..2 {
                let g = verify::guided(&gmm, target, 1.0, &guidance, a.samples, seed)?;
                line(
                    format!("{name}.guided_class{target}"),
                    g.tv < 0.07,
                    format!("tv={:.4} (< 0.07) occupancy={:.4} expected={:.4}", g.tv, g.occupancy[target], g.expected[target]),
                );
            }
        }
    }
    if failed > 0 {
        bail!("{failed} oracle check(s) failed");
    }
    Ok(())
}
