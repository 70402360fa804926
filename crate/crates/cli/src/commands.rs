use std::path::{Path, PathBuf};

use serde::Serialize;
use vmfmix_core::features::infer_state;
use vmfmix_core::matching::match_directions;
use vmfmix_core::numeric::argmax;
use vmfmix_core::{
    accumulate_stats, combine_and_infer, elbo, fit, sample_corpus, Corpus, Error, FitConfig,
    GenSpec, InferConfig, ModelParams,
};

use crate::error::{CliError, CliResult};
use crate::formats::{
    load_models, read_corpus, read_truth, write_corpus, write_features, write_trace, write_truth,
    FitRecord, Manifest, ManifestEntry, ModelFile, Truth, TruthDoc,
};
use crate::{EvalArgs, GenerateArgs, InferArgs, TrainArgs};

/// `dir/stem.json` → `dir/stem.<label>.json`, keeping the extension.
fn labelled_path(base: &Path, label: &str) -> PathBuf {
    let safe: String = label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    let stem = base
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match base.extension() {
        Some(ext) => format!("{stem}.{safe}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{safe}"),
    };
    base.with_file_name(name)
}

fn fit_and_record(
    corpus: &Corpus,
    config: &FitConfig,
    label: Option<&str>,
) -> CliResult<(ModelFile, vmfmix_core::FitReport)> {
    let (params, _, report) = fit(corpus, config)?;
    let final_elbo = report
        .final_elbo()
        .filter(|l| l.is_finite())
        .ok_or_else(|| Error::Numerical("training produced a non-finite bound".into()))?;
    let tag = label.map(|l| format!(" [{l}]")).unwrap_or_default();
    println!(
        "trained{tag}: K = {}, {} docs, {} tokens, {} iterations ({}), ELBO = {final_elbo}",
        params.k(),
        corpus.num_docs(),
        corpus.num_tokens(),
        report.iterations,
        if report.converged {
            "converged"
        } else {
            "not converged"
        },
    );
    let record = FitRecord::new(config, &report, corpus);
    Ok((
        ModelFile::new(
            &params,
            label.map(str::to_string),
            Some(final_elbo),
            Some(record),
        ),
        report,
    ))
}

pub fn train(args: &TrainArgs, deterministic: bool) -> CliResult<()> {
    let config = FitConfig {
        k: args.k,
        alpha: args.alpha,
        max_iters: args.max_iters,
        rel_tol: args.rel_tol,
        seed: args.seed,
        init: args.init,
        kappa_init: args.kappa_init,
        restarts: args.restarts,
        deterministic,
    };
    config.validate()?;
    let corpus = read_corpus(&args.corpus)?;

    if !args.per_label {
        let (model, report) = fit_and_record(&corpus, &config, None)?;
        model.write(&args.out)?;
        if let Some(trace) = &args.trace {
            write_trace(trace, &report)?;
        }
        return Ok(());
    }

    let parts = corpus.split_by_label()?;
    let mut entries = Vec::with_capacity(parts.len());
    let mut used = std::collections::HashSet::new();
    for (label, sub) in &parts {
        let path = labelled_path(&args.out, label);
        if !used.insert(path.clone()) {
            return Err(CliError::Usage(format!(
                "labels collide on output file {}",
                path.display()
            )));
        }
        let (model, report) = fit_and_record(sub, &config, Some(label))?;
        model.write(&path)?;
        if let Some(trace) = &args.trace {
            write_trace(&labelled_path(trace, label), &report)?;
        }
        entries.push(ManifestEntry {
            label: label.clone(),
            path: PathBuf::from(path.file_name().expect("labelled path has a file name")),
        });
    }
    Manifest::new(entries).write(&args.out)
}

fn load_all(paths: &[PathBuf]) -> CliResult<Vec<ModelParams>> {
    let mut out = Vec::new();
    for p in paths {
        for (path, file) in load_models(p)? {
            out.push(
                file.params()
                    .map_err(|e| CliError::format(&path, e.to_string()))?,
            );
        }
    }
    Ok(out)
}

pub fn infer(args: &InferArgs) -> CliResult<()> {
    if args.max_sweeps == 0 || !(args.rel_tol > 0.0) {
        return Err(CliError::Usage(
            "--max-sweeps and --rel-tol must be positive".into(),
        ));
    }
    let models = load_all(&args.models)?;
    let corpus = read_corpus(&args.corpus)?;
    let config = InferConfig {
        max_sweeps: args.max_sweeps,
        rel_tol: args.rel_tol,
    };
    let features = combine_and_infer(&models, &corpus, &config)?;
    write_features(&args.out, &features)
}

pub fn generate(args: &GenerateArgs) -> CliResult<()> {
    let spec = GenSpec {
        k: args.k,
        dim: args.d,
        num_docs: args.docs,
        tokens_min: args.tokens_min,
        tokens_max: args.tokens_max.unwrap_or(args.tokens_min),
        alpha: args.alpha,
        kappa: args.kappa,
        true_params: None,
        seed: args.seed,
    };
    if let Some(l) = &args.label {
        if l.is_empty() || l.contains(['\t', '\n', '\r']) {
            return Err(CliError::Usage(
                "--label must be non-empty and free of tabs and newlines".into(),
            ));
        }
    }
    let (corpus, gt) = sample_corpus(&spec)?;
    let label = args.label.as_deref();
    write_corpus(&args.out, &corpus, label)?;
    if let Some(path) = &args.truth {
        let truth = Truth {
            alpha: gt.params.alpha(),
            components: gt.params.components().to_vec(),
            docs: corpus
                .docs()
                .iter()
                .zip(gt.z)
                .zip(gt.theta)
                .map(|((d, z), theta)| TruthDoc {
                    id: match label {
                        Some(l) => format!("{l}-{}", d.id()),
                        None => d.id().to_string(),
                    },
                    z,
                    theta,
                })
                .collect(),
        };
        write_truth(path, &truth)?;
    }
    if let Some(path) = &args.truth_model {
        ModelFile::new(&gt.params, args.label.clone(), None, None).write(path)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchRow {
    /// 1-based component indices.
    pub true_k: usize,
    pub fitted_k: usize,
    pub cosine: f64,
    pub true_kappa: f64,
    pub fitted_kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub matches: Vec<MatchRow>,
    pub min_cosine: f64,
    /// Mean responsibility placed on the component matched to each token's
    /// true component.
    pub soft_accuracy: f64,
    /// Fraction of tokens whose most responsible component is the matched one.
    pub hard_accuracy: f64,
    /// Bound recorded when the model was trained.
    pub elbo_final: Option<f64>,
    /// Bound of the model on this corpus after frozen inference.
    pub elbo_corpus: f64,
}

fn check_truth_matches(truth: &Truth, corpus: &Corpus, truth_path: &Path) -> CliResult<()> {
    let mismatch =
        |msg: String| CliError::format(truth_path, format!("truth does not match corpus: {msg}"));
    if let Some(c) = truth.components.first() {
        if c.mu.len() != corpus.dim() {
            return Err(mismatch(format!(
                "dimension {} vs {}",
                c.mu.len(),
                corpus.dim()
            )));
        }
    }
    if truth.docs.len() != corpus.num_docs() {
        return Err(mismatch(format!(
            "{} documents vs {}",
            truth.docs.len(),
            corpus.num_docs()
        )));
    }
    for (t, d) in truth.docs.iter().zip(corpus.docs()) {
        if t.id != d.id() || t.z.len() != d.len() {
            return Err(mismatch(format!(
                "document '{}' ({} tokens) vs '{}' ({} tokens)",
                t.id,
                t.z.len(),
                d.id(),
                d.len()
            )));
        }
    }
    Ok(())
}

pub fn evaluate(model: &ModelFile, truth: &Truth, corpus: &Corpus) -> CliResult<EvalReport> {
    let params = model.params()?;
    let true_params = truth.params()?;
    let refs: Vec<Vec<f64>> = true_params
        .components()
        .iter()
        .map(|c| c.mu.clone())
        .collect();
    let fitted: Vec<Vec<f64>> = params.components().iter().map(|c| c.mu.clone()).collect();
    let matching = match_directions(&refs, &fitted)?;

    let (state, _) = infer_state(&params, corpus, &InferConfig::default())?;
    let stats = accumulate_stats(corpus, &state)?;
    let elbo_corpus = elbo(corpus, &params, &state, &stats)?;

    let (mut soft, mut hard) = (0.0, 0usize);
    for (i, t) in truth.docs.iter().enumerate() {
        for (j, &z) in t.z.iter().enumerate() {
            if let Some(f) = matching.fitted_for(z) {
                let row = state.row(i, j);
                soft += row[f];
                hard += usize::from(argmax(row) == f);
            }
        }
    }
    let n = corpus.num_tokens() as f64;
    Ok(EvalReport {
        matches: matching
            .pairs
            .iter()
            .map(|&(r, f, cosine)| MatchRow {
                true_k: r + 1,
                fitted_k: f + 1,
                cosine,
                true_kappa: true_params.components()[r].kappa,
                fitted_kappa: params.components()[f].kappa,
            })
            .collect(),
        min_cosine: matching.min_cosine(),
        soft_accuracy: soft / n,
        hard_accuracy: hard as f64 / n,
        elbo_final: model.elbo_final,
        elbo_corpus,
    })
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let model = ModelFile::read(&args.model)?;
    let truth = read_truth(&args.truth)?;
    let corpus = read_corpus(&args.corpus)?;
    check_truth_matches(&truth, &corpus, &args.truth)?;
    if model.dim != corpus.dim() {
        return Err(CliError::Core(Error::DimensionMismatch {
            expected: model.dim,
            found: corpus.dim(),
        }));
    }
    let report = evaluate(&model, &truth, &corpus)?;
    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("report serializes")
        );
        return Ok(());
    }
    println!("true_k\tfitted_k\tcosine\ttrue_kappa\tfitted_kappa");
    for m in &report.matches {
        println!(
            "{}\t{}\t{:.6}\t{}\t{:.4}",
            m.true_k, m.fitted_k, m.cosine, m.true_kappa, m.fitted_kappa
        );
    }
    println!("min_cosine\t{:.6}", report.min_cosine);
    println!("soft_accuracy\t{:.6}", report.soft_accuracy);
    println!("hard_accuracy\t{:.6}", report.hard_accuracy);
    match report.elbo_final {
        Some(l) => println!("elbo_final\t{l}"),
        None => println!("elbo_final\tNA"),
    }
    println!("elbo_corpus\t{}", report.elbo_corpus);
    Ok(())
}
