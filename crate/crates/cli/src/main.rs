//! Command-line front end for the kNN-MT domain-adaptation pipeline.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric
//! failure. Every subcommand shares --config / --seed / --out; stage
//! artifacts are cached under the output directory, so subcommands build
//! whatever prerequisites they are missing and reuse the rest.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use udaknn::corpus::{TokenId, Vocabulary};
use udaknn::decode::KnnConfig;
use udaknn::error::Error;
use udaknn::eval::{corpus_bleu, dump_representations, measure_similarity, tune_lambda, SimCandidate};
use udaknn::pipeline::{
    knn_config, run_experiment, stage_adapters, stage_base, stage_data,
    stage_reverse, stage_store, translate_corpus, DataBundle, ExperimentConfig, Method,
};
use udaknn::Result;

#[derive(Parser)]
#[command(name = "udaknn", about = "kNN-MT unsupervised domain adaptation experiments")]
struct Cli {
    /// experiment config (TOML); built-in defaults when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// root random seed, overriding the config value
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// experiment directory for all stage artifacts
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpora and vocabulary
    GenData,
    /// Train the base general-domain model
    TrainBase,
    /// Train the reverse-direction model used for back-translation
    TrainReverse,
    /// Train encoder-side adapters by representation matching
    TrainAdapters,
    /// Build the datastore for a domain and retrieval method
    BuildDatastore {
        #[arg(long)]
        domain: String,
        /// one of: empty, copy, bt, uda, parallel
        #[arg(long)]
        method: String,
    },
    /// Build the IVF index over an existing (or freshly built) datastore
    BuildIndex {
        #[arg(long)]
        domain: String,
        #[arg(long)]
        method: String,
    },
    /// Translate sentences (domain test sources by default)
    Translate {
        #[arg(long)]
        domain: String,
        /// retrieval method; plain NMT when omitted
        #[arg(long)]
        method: Option<String>,
        /// interpolation coefficient for the retrieval distribution
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        /// source sentences, one per line; domain test sources when omitted
        #[arg(long)]
        input: Option<PathBuf>,
        /// write a per-step TSV trace of NMT/kNN/interpolated candidates
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Translate the domain test set and report BLEU
    Evaluate {
        #[arg(long)]
        domain: String,
        #[arg(long)]
        method: Option<String>,
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
    },
    /// Grid-search lambda on the domain dev set
    TuneLambda {
        #[arg(long)]
        domain: String,
        #[arg(long)]
        method: String,
    },
    /// Representation similarity of a synthetic pass vs the parallel pass
    MeasureSim {
        #[arg(long)]
        domain: String,
        /// one of: copy, copy+adapters, bt
        #[arg(long)]
        candidate: String,
    },
    /// Dump datastore entries for the given tokens to a TSV file
    DumpReps {
        #[arg(long)]
        domain: String,
        #[arg(long)]
        method: String,
        /// comma-separated token strings
        #[arg(long)]
        tokens: String,
        #[arg(long)]
        file: PathBuf,
    },
    /// Run every stage and write the result tables
    RunAll {
        /// comma-separated override of the baseline set
        #[arg(long)]
        baselines: Option<String>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.experiment.seed = seed;
    }
    Ok(cfg)
}

fn parse_method(s: &str) -> Result<Method> {
    let m = Method::parse(s)?;
    if !m.uses_datastore() {
        return Err(Error::Config(format!(
            "method '{s}' has no datastore; pick one of empty, copy, bt, uda, parallel"
        )));
    }
    Ok(m)
}

struct Session {
    cfg: ExperimentConfig,
    out: PathBuf,
    data: DataBundle,
}

impl Session {
    fn open(cli: &Cli) -> Result<Session> {
        let cfg = load_config(cli)?;
        cfg.validate()?;
        std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
        let data = stage_data(&cfg, &cli.out, &mut std::io::stderr())?;
        Ok(Session {
            cfg,
            out: cli.out.clone(),
            data,
        })
    }

    fn log(&self) -> std::io::Stderr {
        std::io::stderr()
    }

    fn base(&self) -> Result<udaknn::model::Model> {
        stage_base(&self.cfg, &self.out, &self.data, &mut self.log())
    }

    fn reverse(&self) -> Result<udaknn::model::Model> {
        stage_reverse(&self.cfg, &self.out, &self.data, &mut self.log())
    }

    fn store(
        &self,
        domain: &str,
        method: Method,
    ) -> Result<(udaknn::datastore::Datastore, udaknn::datastore::IvfIndex)> {
        let base = self.base()?;
        let dom = self.data.domain(domain)?;
        let adapters = if method == Method::Uda {
            Some(stage_adapters(&self.cfg, &self.out, &self.data, &base, &mut self.log())?)
        } else {
            None
        };
        let reverse = if method.needs_reverse() {
            Some(self.reverse()?)
        } else {
            None
        };
        stage_store(
            &self.cfg,
            &self.out,
            dom,
            method,
            &base,
            adapters.as_ref(),
            reverse.as_ref(),
            &mut self.log(),
        )
    }
}

fn read_sources(path: &PathBuf, vocab: &Vocabulary) -> Result<Vec<Vec<TokenId>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| vocab.tokenize(l)).collect())
}

fn write_trace(
    path: &PathBuf,
    vocab: &Vocabulary,
    traces: &[(usize, Vec<udaknn::decode::StepTrace>)],
) -> Result<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    writeln!(f, "sentence\tstep\tkind\tcandidates")
        .map_err(|e| Error::io(path, e))?;
    let fmt_tokens = |items: &[(TokenId, f64)]| -> String {
        items
            .iter()
            .map(|(t, p)| format!("{}:{p:.4}", vocab.token(*t)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    for (sent, steps) in traces {
        for (step, t) in steps.iter().enumerate() {
            let neighbors = t
                .neighbors
                .iter()
                .map(|(d, v)| format!("{}:{d:.4}", vocab.token(*v)))
                .collect::<Vec<_>>()
                .join(" ");
            for (kind, text) in [
                ("nmt", fmt_tokens(&t.top_nmt)),
                ("knn", neighbors),
                ("interp", fmt_tokens(&t.top_interpolated)),
            ] {
                writeln!(f, "{sent}\t{step}\t{kind}\t{text}").map_err(|e| Error::io(path, e))?;
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::GenData => {
            let s = Session::open(&cli)?;
            println!(
                "generated {} general pairs, {} domain(s), vocab {}",
                s.data.general_train.len(),
                s.data.domains.len(),
                s.data.vocab.len()
            );
        }
        Cmd::TrainBase => {
            let s = Session::open(&cli)?;
            s.base()?;
            println!("base model at {}", s.out.join("base.udak").display());
        }
        Cmd::TrainReverse => {
            let s = Session::open(&cli)?;
            s.reverse()?;
            println!("reverse model at {}", s.out.join("reverse.udak").display());
        }
        Cmd::TrainAdapters => {
            let s = Session::open(&cli)?;
            let base = s.base()?;
            stage_adapters(&s.cfg, &s.out, &s.data, &base, &mut s.log())?;
            println!("adapters at {}", s.out.join("adapters.udak").display());
        }
        Cmd::BuildDatastore { domain, method } | Cmd::BuildIndex { domain, method } => {
            let s = Session::open(&cli)?;
            let m = parse_method(method)?;
            let (ds, index) = s.store(domain, m)?;
            println!(
                "datastore {} entries, index {} lists",
                ds.len(),
                index.nlist()
            );
        }
        Cmd::Translate {
            domain,
            method,
            lambda,
            input,
            trace,
        } => {
            let s = Session::open(&cli)?;
            let base = s.base()?;
            let dom = s.data.domain(domain)?;
            let sources = match input {
                Some(path) => read_sources(path, &s.data.vocab)?,
                None => dom.test.iter().map(|p| p.source.clone()).collect(),
            };
            let store = match method {
                Some(name) => Some(s.store(domain, parse_method(name)?)?),
                None => None,
            };
            let store_ref = store.as_ref().map(|(d, i)| (d, i));
            let knn = match store_ref {
                Some(_) => knn_config(&s.cfg, *lambda),
                None => KnnConfig::disabled(),
            };
            let strategy = s.cfg.strategy();
            let mut traces = Vec::new();
            for (i, x) in sources.iter().enumerate() {
                let hyp = if trace.is_some() {
                    let (hyp, t) = udaknn::decode::translate_traced(
                        &base, x, store_ref, &knn, strategy,
                    )?;
                    traces.push((i, t));
                    hyp
                } else {
                    udaknn::decode::translate(&base, x, store_ref, &knn, strategy)?
                };
                println!("{}", s.data.vocab.detokenize(&hyp));
            }
            if let Some(path) = trace {
                write_trace(path, &s.data.vocab, &traces)?;
            }
        }
        Cmd::Evaluate {
            domain,
            method,
            lambda,
        } => {
            let s = Session::open(&cli)?;
            let base = s.base()?;
            let dom = s.data.domain(domain)?;
            let sources: Vec<Vec<TokenId>> = dom.test.iter().map(|p| p.source.clone()).collect();
            let refs: Vec<Vec<TokenId>> = dom.test.iter().map(|p| p.target.clone()).collect();
            let store = match method {
                Some(name) => Some(s.store(domain, parse_method(name)?)?),
                None => None,
            };
            let store_ref = store.as_ref().map(|(d, i)| (d, i));
            let knn = match store_ref {
                Some(_) => knn_config(&s.cfg, *lambda),
                None => KnnConfig::disabled(),
            };
            let hyps = translate_corpus(&base, &sources, store_ref, &knn, s.cfg.strategy())?;
            let bleu = corpus_bleu(&hyps, &refs)?;
            println!("BLEU\t{bleu:.2}");
        }
        Cmd::TuneLambda { domain, method } => {
            let s = Session::open(&cli)?;
            let base = s.base()?;
            let m = parse_method(method)?;
            let (ds, index) = s.store(domain, m)?;
            let dom = s.data.domain(domain)?;
            let sources: Vec<Vec<TokenId>> = dom.dev.iter().map(|p| p.source.clone()).collect();
            let mut system = |lambda: f64| {
                translate_corpus(
                    &base,
                    &sources,
                    Some((&ds, &index)),
                    &knn_config(&s.cfg, lambda),
                    s.cfg.strategy(),
                )
            };
            let (lambda, bleu) = tune_lambda(&dom.dev, &mut system, &s.cfg.knn.lambda_grid)?;
            println!("lambda\t{lambda:.1}\ndev_bleu\t{bleu:.2}");
        }
        Cmd::MeasureSim { domain, candidate } => {
            let s = Session::open(&cli)?;
            let base = s.base()?;
            let dom = s.data.domain(domain)?;
            let report = match candidate.as_str() {
                "copy" => measure_similarity(&dom.dev, &base, SimCandidate::Copy, None, None)?,
                "copy+adapters" => {
                    let adapters =
                        stage_adapters(&s.cfg, &s.out, &s.data, &base, &mut s.log())?;
                    measure_similarity(
                        &dom.dev,
                        &base,
                        SimCandidate::CopyWithAdapters,
                        Some(&adapters),
                        None,
                    )?
                }
                "bt" => {
                    let reverse = s.reverse()?;
                    measure_similarity(
                        &dom.dev,
                        &base,
                        SimCandidate::Backtranslate,
                        None,
                        Some(&reverse),
                    )?
                }
                other => {
                    return Err(Error::Config(format!(
                        "unknown candidate '{other}'; pick copy, copy+adapters or bt"
                    )))
                }
            };
            println!(
                "mean_cosine\t{:.6}\nmean_sq_euclidean\t{:.6}\nn_positions\t{}",
                report.mean_cosine, report.mean_sq_euclidean, report.n_positions
            );
        }
        Cmd::DumpReps {
            domain,
            method,
            tokens,
            file,
        } => {
            let s = Session::open(&cli)?;
            let m = parse_method(method)?;
            let (ds, _) = s.store(domain, m)?;
            let ids: Vec<TokenId> = tokens
                .split(',')
                .filter(|t| !t.is_empty())
                .map(|t| s.data.vocab.lookup(t))
                .collect();
            let missing = dump_representations(&ds, &ids, &s.data.vocab, file)?;
            if missing > 0 {
                eprintln!("warning: {missing} requested token(s) absent from the datastore");
            }
            println!("wrote {}", file.display());
        }
        Cmd::RunAll { baselines } => {
            let mut cfg = load_config(&cli)?;
            if let Some(list) = baselines {
                cfg.experiment.baselines =
                    list.split(',').map(|s| s.trim().to_string()).collect();
            }
            let report = run_experiment(&cfg, &cli.out, &mut std::io::stderr())?;
            println!("domain\tmethod\tlambda\tdev_bleu\ttest_bleu");
            for r in &report.results {
                println!(
                    "{}\t{}\t{:.1}\t{:.4}\t{:.4}",
                    r.domain,
                    r.method.as_str(),
                    r.lambda,
                    r.dev_bleu,
                    r.test_bleu
                );
            }
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err.root_cause() {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Parse { .. } | Error::Format { .. } | Error::Contract(_) => 3,
        Error::Numeric(_) | Error::Dimension { .. } => 4,
        Error::Stage { .. } => unreachable!("root_cause unwraps stages"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_parsing_rejects_non_store_methods() {
        assert!(parse_method("copy").is_ok());
        assert!(parse_method("basic").is_err());
        assert!(parse_method("bt-ft").is_err());
    }
}
