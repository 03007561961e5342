use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use raelab::conditioning::{sidecar, Generator};
use raelab::datagen::{Domain, DomainMix};
use raelab::error::{Error, Result};
use raelab::flow::euler_sample;
use raelab::harness::{
    eval_generator, eval_rae, gradcheck_report, hash_text, oracle_monotone, parse_metrics, quality_sign_counts, run, run_gradcheck,
    train_dit, DirLock, EvalSettings, ExperimentConfig, MixtureEval, RunOptions, Scope,
};
use raelab::latent::LatentBatch;
use raelab::rae::{decode_calls, train_decoder, DecoderTrainConfig, NoiseAugConfig, Rae};
use raelab::report::ExperimentReport;
use raelab::rng::derive_seed;
use raelab::tensor::{checkpoint, Tensor};
use raelab::tts::{sign_test_p, train_probe, tts_experiment, ConfidenceVerifier, OracleVerifier, TtsConfig, Verifier};

#[derive(Parser)]
#[command(name = "raelab", about = "Flow matching in representation-autoencoder token spaces")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default `runs/<command>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a labelled latent dataset from the configured mixture.
    GenData {
        #[arg(long, default_value_t = 256)]
        per_condition: usize,
    },
    /// Train a pixel decoder on frozen-encoder latents.
    TrainDecoder {
        #[arg(long)]
        epochs: Option<usize>,
        /// Noise-augmentation scale; 0 disables it.
        #[arg(long)]
        tau: Option<f64>,
        /// Comma-separated domains, mixed uniformly.
        #[arg(long, default_value = "smooth,texture,glyph")]
        domains: String,
    },
    /// Train the conditioned generator.
    TrainDit {
        /// Fixed training set written by `gen-data`; fresh mixture draws otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Draw latents from a generator checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        per_condition: usize,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Best-k-of-n selection sweep with a verifier.
    Tts {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `oracle` or `confidence`.
        #[arg(long, default_value = "confidence")]
        verifier: String,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value = "8,16,32")]
        n: String,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 16)]
        steps: usize,
    },
    /// Metrics of a generator or decoder checkpoint on fresh data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated: sliced_wasserstein, frechet_feature_distance, recon_l1.
        #[arg(long, default_value = "sliced_wasserstein")]
        metrics: String,
        /// Image domain for decoder checkpoints.
        #[arg(long, default_value = "glyph")]
        domain: String,
    },
    /// Run a registered experiment.
    Experiment { name: String },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// `ops`, `denoiser`, `losses` or `all`.
        #[arg(long, default_value = "all")]
        scope: String,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainDecoder { .. } => "train-decoder",
            Command::TrainDit { .. } => "train-dit",
            Command::Sample { .. } => "sample",
            Command::Tts { .. } => "tts",
            Command::Eval { .. } => "eval",
            Command::Experiment { .. } => "experiment",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

/// `--config`, else `config.lock` beside `near`, else defaults; then `--seed`.
fn resolve_config(global: &Global, near: Option<&Path>) -> Result<ExperimentConfig> {
    let beside = near.and_then(Path::parent).map(|d| d.join("config.lock"));
    let mut cfg = match (&global.config, beside) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(lock)) if lock.exists() => ExperimentConfig::load(&lock)?,
        _ => ExperimentConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_outputs(out: &Path, report: &ExperimentReport, lock: &str) -> Result<()> {
    report.write(out)?;
    std::fs::write(out.join("config.lock"), lock)?;
    print!("{}", report.summary());
    Ok(())
}

fn save_batch(path: &Path, batch: &LatentBatch) -> Result<()> {
    let conds = batch.conditions.iter().map(|&c| c as f64).collect();
    let entries = [
        ("latents".to_string(), batch.latents.clone()),
        ("conditions".to_string(), Tensor::new(&[batch.len()], conds)?),
    ];
    checkpoint::save(path, &entries.into_iter().collect())
}

fn load_batch(path: &Path) -> Result<LatentBatch> {
    let mut ck = checkpoint::load(path)?;
    let missing = |k: &str| Error::Format(format!("{} has no `{k}` entry", path.display()));
    let latents = ck.remove("latents").ok_or_else(|| missing("latents"))?;
    let conds = ck.remove("conditions").ok_or_else(|| missing("conditions"))?;
    LatentBatch::new(latents, conds.data().iter().map(|&c| c as usize).collect())
}

fn is_decoder_checkpoint(path: &Path) -> Result<bool> {
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(sidecar(path))?)?;
    Ok(meta.get("encoder").is_some())
}

fn parse_grid(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::Argument(format!("bad candidate count `{s}`"))))
        .collect()
}

/// Returns whether every check or direction the command reports passed.
fn execute(cli: &Cli, out: &Path) -> Result<bool> {
    let g = &cli.global;
    match &cli.command {
        Command::GenData { per_condition } => {
            let cfg = resolve_config(g, None)?;
            let spec = cfg.mixture()?;
            let batch = spec.sample_all(*per_condition, derive_seed(cfg.seed, 3))?;
            save_batch(&out.join("data.raet"), &batch)?;
            let mut report = ExperimentReport::new("gen-data", cfg.hash(), cfg.seed);
            for c in 0..spec.num_conditions() {
                let n = batch.conditions.iter().filter(|&&x| x == c).count();
                report.log(0, 0, format!("samples/cond={c}"), n as f64);
            }
            report.note(format!("wrote {} latents to data.raet", batch.len()));
            write_outputs(out, &report, &cfg.canonical())?;
        }
        Command::TrainDecoder { epochs, tau, domains } => {
            let picked: Vec<Domain> = domains.split(',').map(|d| d.trim().parse()).collect::<Result<_>>()?;
            let share = |d: Domain| picked.iter().filter(|&&p| p == d).count() as f64 / picked.len() as f64;
            let mix = DomainMix {
                smooth: share(Domain::Smooth),
                texture: share(Domain::Texture),
                glyph: share(Domain::Glyph),
            };
            let mut cfg = DecoderTrainConfig {
                mix,
                ..DecoderTrainConfig::toy()
            };
            if let Some(e) = epochs {
                cfg.epochs = *e;
            }
            if let Some(t) = tau {
                cfg.noise = if *t > 0.0 {
                    NoiseAugConfig { tau: *t, enabled: true }
                } else {
                    NoiseAugConfig::off()
                };
            }
            let seed = g.seed.unwrap_or(0);
            let text = serde_json::to_string_pretty(&cfg)?;
            let hash = hash_text(&text);
            let trained = train_decoder(&cfg, seed, &hash)?;
            let rae = Rae {
                encoder: trained.encoder,
                decoder: trained.decoder,
            };
            rae.save(&out.join("rae.raet"))?;
            let mut report = trained.report;
            report.note("wrote rae.raet");
            write_outputs(out, &report, &text)?;
        }
        Command::TrainDit { data } => {
            let cfg = resolve_config(g, None)?;
            let spec = cfg.mixture()?;
            let mut eval = MixtureEval::new(&spec, &cfg);
            let (generator, mut report) = match data {
                Some(path) => train_dit(&cfg, &load_batch(path)?, &mut eval, &cfg.hash())?,
                None => train_dit(&cfg, &spec, &mut eval, &cfg.hash())?,
            };
            generator.save(&out.join("generator.raet"))?;
            report.note("wrote generator.raet");
            write_outputs(out, &report, &cfg.canonical())?;
        }
        Command::Sample {
            checkpoint,
            per_condition,
            steps,
        } => {
            let cfg = resolve_config(g, Some(checkpoint))?;
            let generator = Generator::load(checkpoint)?;
            let spec = cfg.mixture()?;
            let k = generator.config.num_conditions;
            let conds: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat(c).take(*per_condition)).collect();
            let batch = euler_sample(
                &generator,
                &cfg.schedule()?,
                steps.unwrap_or(cfg.sampler_steps),
                generator.latent(),
                derive_seed(cfg.seed, 4),
                &conds,
            )?;
            save_batch(&out.join("samples.raet"), &batch)?;
            let mut report = ExperimentReport::new("sample", cfg.hash(), cfg.seed);
            if spec.shape == generator.latent() && spec.num_conditions() == k {
                for c in 0..k {
                    let rows: Vec<&[f64]> = (0..batch.len()).filter(|&i| conds[i] == c).map(|i| batch.sample(i)).collect();
                    let mut total = 0.0;
                    for r in &rows {
                        total += spec.component_log_density(c, r)?;
                    }
                    report.log(0, 0, format!("oracle_log_density/cond={c}"), total / rows.len() as f64);
                }
            }
            report.note(format!("wrote {} latents to samples.raet", batch.len()));
            write_outputs(out, &report, &cfg.canonical())?;
        }
        Command::Tts {
            checkpoint,
            verifier,
            k,
            n,
            trials,
            steps,
        } => {
            let cfg = resolve_config(g, Some(checkpoint))?;
            let generator = Generator::load(checkpoint)?;
            let spec = cfg.mixture()?;
            let tts = TtsConfig {
                k: *k,
                n_grid: parse_grid(n)?,
                trials: *trials,
                sampler_steps: *steps,
            };
            let probe;
            let oracle = OracleVerifier { spec: &spec };
            let confidence;
            let chosen: &dyn Verifier = match verifier.as_str() {
                "oracle" => &oracle,
                "confidence" => {
                    probe = train_probe(&spec, 256, 64, 500, derive_seed(cfg.seed, 5))?;
                    confidence = ConfidenceVerifier { probe: &probe };
                    &confidence
                }
                other => return Err(Error::Argument(format!("unknown verifier `{other}`"))),
            };
            let before = decode_calls();
            let mut report = tts_experiment(
                &generator,
                &cfg.schedule()?,
                &spec,
                chosen,
                &tts,
                derive_seed(cfg.seed, 7),
                &cfg.hash(),
            )?;
            let decodes = decode_calls() - before;
            report.log(0, 0, "decode_calls", decodes as f64);
            let monotone = oracle_monotone(&report, &tts).iter().filter(|m| **m).count();
            let (wins, losses) = quality_sign_counts(&report, &tts);
            let p = sign_test_p(wins, losses);
            report.note(format!("verifier: {}", chosen.name()));
            report.note(format!("selected score non-decreasing in n: {monotone}/{trials} trials"));
            report.note(format!(
                "oracle quality at largest vs smallest n: {wins} wins, {losses} losses, one-sided p = {p:.4}"
            ));
            report.note(format!("decode calls during selection: {decodes}"));
            write_outputs(out, &report, &cfg.canonical())?;
            return Ok(decodes == 0);
        }
        Command::Eval {
            checkpoint,
            metrics,
            domain,
        } => {
            let decoder = is_decoder_checkpoint(checkpoint)?;
            // A decoder's config.lock holds its training config, not a generator config.
            let cfg = resolve_config(g, if decoder { None } else { Some(checkpoint) })?;
            let metrics = parse_metrics(metrics)?;
            let settings = EvalSettings::from_config(&cfg);
            let report = if decoder {
                eval_rae(&Rae::load(checkpoint)?, domain.parse()?, &metrics, &settings, &cfg.hash())?
            } else {
                let generator = Generator::load(checkpoint)?;
                eval_generator(&generator, &cfg.schedule()?, &cfg.mixture()?, &metrics, &settings, &cfg.hash())?
            };
            let mut report = report;
            for r in report.records.clone() {
                report.note(format!("{} = {:.6}", r.name, r.value));
            }
            write_outputs(out, &report, &cfg.canonical())?;
        }
        Command::Experiment { name } => {
            let overrides = match &g.config {
                Some(path) => std::fs::read_to_string(path)?,
                None => String::new(),
            };
            let opts = RunOptions {
                seed: g.seed.unwrap_or(0),
                overrides,
            };
            let outcome = run(name, &opts)?;
            write_outputs(out, &outcome.report, &outcome.lock)?;
            return Ok(outcome.holds);
        }
        Command::Gradcheck { scope } => {
            let scopes = if scope == "all" { Scope::ALL.to_vec() } else { vec![Scope::parse(scope)?] };
            let mut report = ExperimentReport::new("gradcheck", "", 0);
            let mut passed = true;
            for s in scopes {
                let records = run_gradcheck(s)?;
                passed &= records.iter().all(|r| r.passed);
                let part = gradcheck_report(s, &records);
                for r in &part.records {
                    report.log(r.step, r.epoch, r.name.clone(), r.value);
                }
                report.notes.extend(part.notes);
            }
            write_outputs(out, &report, "")?;
            return Ok(passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli
        .global
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    let result = DirLock::acquire(&out).and_then(|_lock| execute(&cli, &out));
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more checks failed; see {}", out.join("summary.txt").display());
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
