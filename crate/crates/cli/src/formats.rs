//! On-disk formats: corpus TSV, model and manifest JSON, truth TSV, trace
//! CSV and feature TSV.
//!
//! Floats are written with Rust's shortest round-trip formatting and read
//! back with correctly rounded parsing, so every value survives a
//! write/read cycle bit for bit.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vmfmix_core::{
    Corpus, CorpusBuilder, FitConfig, FitReport, ModelParams, TopicFeatures, VmfComponent,
};

use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::io(path, e))
}

fn write_floats<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            w.write_all(b" ")?;
        }
        write!(w, "{v}")?;
    }
    Ok(())
}

fn parse_floats(path: &Path, line: usize, text: &str) -> CliResult<Vec<f64>> {
    text.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| CliError::parse(path, line, format!("invalid number '{t}'")))
        })
        .collect()
}

/// Lines that carry data: 1-based line number and content, skipping blank
/// lines and `#` comments.
fn data_lines(path: &Path) -> CliResult<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (n, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push((n + 1, trimmed.to_string()));
    }
    Ok(out)
}

/// Reads a corpus: one token per line as `doc_id<TAB>floats` or
/// `doc_id<TAB>label<TAB>floats`. An empty label means none.
pub fn read_corpus(path: &Path) -> CliResult<Corpus> {
    let mut builder: Option<CorpusBuilder> = None;
    for (line, text) in data_lines(path)? {
        let fields: Vec<&str> = text.split('\t').collect();
        let (id, label, values) = match fields[..] {
            [id, values] => (id, None, values),
            [id, label, values] => (id, (!label.is_empty()).then_some(label), values),
            _ => {
                return Err(CliError::parse(
                    path,
                    line,
                    format!(
                        "expected 2 or 3 tab-separated fields, found {}",
                        fields.len()
                    ),
                ))
            }
        };
        if id.is_empty() {
            return Err(CliError::parse(path, line, "empty document id"));
        }
        let v = parse_floats(path, line, values)?;
        let b = match &mut builder {
            Some(b) => b,
            None => builder.insert(
                CorpusBuilder::new(v.len())
                    .map_err(|e| CliError::parse(path, line, e.to_string()))?,
            ),
        };
        b.push(id, label, &v).map_err(|e| match e {
            vmfmix_core::Error::DimensionMismatch { expected, found } => CliError::parse(
                path,
                line,
                format!("ragged row: expected {expected} values, found {found}"),
            ),
            other => CliError::parse(path, line, other.to_string()),
        })?;
    }
    let builder = builder.ok_or_else(|| CliError::format(path, "corpus has no tokens"))?;
    let corpus = builder.build()?;
    if corpus.renormalized() > 0 {
        log::warn!(
            "{}: rescaled {} vectors onto the unit sphere",
            path.display(),
            corpus.renormalized()
        );
    }
    Ok(corpus)
}

/// Writes `corpus` in the format read by [`read_corpus`]. With `relabel`,
/// every document gets that label and its id is prefixed with `label-`.
pub fn write_corpus(path: &Path, corpus: &Corpus, relabel: Option<&str>) -> CliResult<()> {
    let mut w = create(path)?;
    let res: std::io::Result<()> = (|| {
        for doc in corpus.docs() {
            let id = match relabel {
                Some(l) => format!("{l}-{}", doc.id()),
                None => doc.id().to_string(),
            };
            let label = relabel.or(doc.label());
            for x in doc.tokens() {
                match label {
                    Some(l) => write!(w, "{id}\t{l}\t")?,
                    None => write!(w, "{id}\t")?,
                }
                write_floats(&mut w, x)?;
                w.write_all(b"\n")?;
            }
        }
        w.flush()
    })();
    res.map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentRecord {
    pub mu: Vec<f64>,
    pub kappa: f64,
}

/// Provenance of a fitted model. Wall-clock time is left out so that
/// deterministic runs produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitRecord {
    pub iterations: usize,
    pub converged: bool,
    pub seed: u64,
    pub init: String,
    pub kappa_init: f64,
    pub restarts: usize,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub deterministic: bool,
    pub kappa_clamps: usize,
    pub rescued: usize,
    pub num_docs: usize,
    pub num_tokens: usize,
}

impl FitRecord {
    pub fn new(config: &FitConfig, report: &FitReport, corpus: &Corpus) -> Self {
        Self {
            iterations: report.iterations,
            converged: report.converged,
            seed: config.seed,
            init: config.init.as_str().to_string(),
            kappa_init: config.kappa_init,
            restarts: config.restarts,
            max_iters: config.max_iters,
            rel_tol: config.rel_tol,
            deterministic: config.deterministic,
            kappa_clamps: report.kappa_clamps,
            rescued: report.rescued,
            num_docs: corpus.num_docs(),
            num_tokens: corpus.num_tokens(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub kind: String,
    pub dim: usize,
    pub k: usize,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub components: Vec<ComponentRecord>,
    pub elbo_final: Option<f64>,
    pub fit: Option<FitRecord>,
}

impl ModelFile {
    pub fn new(
        params: &ModelParams,
        label: Option<String>,
        elbo_final: Option<f64>,
        fit: Option<FitRecord>,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: "model".into(),
            dim: params.dim(),
            k: params.k(),
            alpha: params.alpha(),
            label,
            components: params
                .components()
                .iter()
                .map(|c| ComponentRecord {
                    mu: c.mu.clone(),
                    kappa: c.kappa,
                })
                .collect(),
            elbo_final,
            fit,
        }
    }

    pub fn params(&self) -> vmfmix_core::Result<ModelParams> {
        if self.components.len() != self.k {
            return Err(vmfmix_core::Error::ShapeMismatch(format!(
                "k = {} but {} components listed",
                self.k,
                self.components.len()
            )));
        }
        if let Some(c) = self.components.iter().find(|c| c.mu.len() != self.dim) {
            return Err(vmfmix_core::Error::DimensionMismatch {
                expected: self.dim,
                found: c.mu.len(),
            });
        }
        let comps = self
            .components
            .iter()
            .map(|c| VmfComponent {
                mu: c.mu.clone(),
                kappa: c.kappa,
            })
            .collect();
        ModelParams::new(self.alpha, comps)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_json()).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> CliResult<ModelFile> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let m: ModelFile =
            serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))?;
        m.check_header(path)?;
        Ok(m)
    }

    fn check_header(&self, path: &Path) -> CliResult<()> {
        if self.kind != "model" {
            return Err(CliError::format(
                path,
                format!("expected a model file, found kind '{}'", self.kind),
            ));
        }
        if self.format_version != FORMAT_VERSION {
            return Err(CliError::format(
                path,
                format!("unsupported format_version {}", self.format_version),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub label: String,
    /// Relative paths are resolved against the manifest's directory.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub models: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(models: Vec<ManifestEntry>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: "manifest".into(),
            models,
        }
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        std::fs::write(path, s).map_err(|e| CliError::io(path, e))
    }
}

/// Loads a model file or every model listed in a manifest, in order.
pub fn load_models(path: &Path) -> CliResult<Vec<(PathBuf, ModelFile)>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))?;
    match value.get("kind").and_then(|k| k.as_str()) {
        Some("manifest") => {
            let m: Manifest =
                serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))?;
            if m.format_version != FORMAT_VERSION {
                return Err(CliError::format(
                    path,
                    format!("unsupported format_version {}", m.format_version),
                ));
            }
            let base = path.parent().unwrap_or(Path::new(""));
            m.models
                .iter()
                .map(|e| {
                    let p = base.join(&e.path);
                    ModelFile::read(&p).map(|f| (p, f))
                })
                .collect()
        }
        Some("model") => Ok(vec![(path.to_path_buf(), ModelFile::read(path)?)]),
        _ => Err(CliError::format(path, "not a model or manifest file")),
    }
}

/// `iter,elbo,wall_ms` with 1-based iterations.
pub fn write_trace(path: &Path, report: &FitReport) -> CliResult<()> {
    let mut w = create(path)?;
    let res: std::io::Result<()> = (|| {
        writeln!(w, "iter,elbo,wall_ms")?;
        for (i, (l, ms)) in report.elbo_trace.iter().zip(&report.elapsed_ms).enumerate() {
            writeln!(w, "{},{l},{ms:.3}", i + 1)?;
        }
        w.flush()
    })();
    res.map_err(|e| CliError::io(path, e))
}

/// `doc_id<TAB>p_1 … p_K` with a header row.
pub fn write_features(path: &Path, features: &[TopicFeatures]) -> CliResult<()> {
    let mut w = create(path)?;
    let k = features.first().map_or(0, |f| f.proportions.len());
    let res: std::io::Result<()> = (|| {
        write!(w, "doc_id")?;
        for c in 1..=k {
            write!(w, "\tp_{c}")?;
        }
        writeln!(w)?;
        for f in features {
            write!(w, "{}", f.doc_id)?;
            for p in &f.proportions {
                write!(w, "\t{p}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    })();
    res.map_err(|e| CliError::io(path, e))
}

/// Reads a feature table written by [`write_features`].
pub fn read_features(path: &Path) -> CliResult<Vec<TopicFeatures>> {
    let mut out = Vec::new();
    for (line, text) in data_lines(path)?.into_iter().skip(1) {
        let mut fields = text.split('\t');
        let doc_id = fields.next().unwrap_or_default().to_string();
        let proportions = fields
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| CliError::parse(path, line, format!("invalid number '{t}'")))
            })
            .collect::<CliResult<_>>()?;
        out.push(TopicFeatures {
            doc_id,
            proportions,
        });
    }
    Ok(out)
}

/// Latent variables of a generated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub alpha: f64,
    pub components: Vec<VmfComponent>,
    pub docs: Vec<TruthDoc>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthDoc {
    pub id: String,
    /// Component of each token, 0-based in memory.
    pub z: Vec<usize>,
    pub theta: Vec<f64>,
}

impl Truth {
    pub fn params(&self) -> vmfmix_core::Result<ModelParams> {
        ModelParams::new(self.alpha, self.components.clone())
    }
}

/// Record-per-line TSV; components, tokens and assignments are 1-based:
///
/// ```text
/// alpha      <alpha>
/// component  <k>  <kappa>  <mu…>
/// theta      <doc_id>  <p_1 … p_K>
/// z          <doc_id>  <token>  <k>
/// ```
pub fn write_truth(path: &Path, truth: &Truth) -> CliResult<()> {
    let mut w = create(path)?;
    let res: std::io::Result<()> = (|| {
        writeln!(w, "alpha\t{}", truth.alpha)?;
        for (k, c) in truth.components.iter().enumerate() {
            write!(w, "component\t{}\t{}\t", k + 1, c.kappa)?;
            write_floats(&mut w, &c.mu)?;
            writeln!(w)?;
        }
        for d in &truth.docs {
            write!(w, "theta\t{}\t", d.id)?;
            write_floats(&mut w, &d.theta)?;
            writeln!(w)?;
        }
        for d in &truth.docs {
            for (j, z) in d.z.iter().enumerate() {
                writeln!(w, "z\t{}\t{}\t{}", d.id, j + 1, z + 1)?;
            }
        }
        w.flush()
    })();
    res.map_err(|e| CliError::io(path, e))
}

pub fn read_truth(path: &Path) -> CliResult<Truth> {
    let mut alpha = None;
    let mut components: Vec<Option<VmfComponent>> = Vec::new();
    let mut docs: Vec<TruthDoc> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut doc_slot = |id: &str, docs: &mut Vec<TruthDoc>| -> usize {
        *index.entry(id.to_string()).or_insert_with(|| {
            docs.push(TruthDoc {
                id: id.to_string(),
                z: Vec::new(),
                theta: Vec::new(),
            });
            docs.len() - 1
        })
    };
    let int = |line: usize, t: &str| -> CliResult<usize> {
        t.parse::<usize>().ok().filter(|&v| v >= 1).ok_or_else(|| {
            CliError::parse(
                path,
                line,
                format!("expected a positive integer, found '{t}'"),
            )
        })
    };

    for (line, text) in data_lines(path)? {
        let f: Vec<&str> = text.split('\t').collect();
        match f[..] {
            ["alpha", a] => {
                alpha = Some(
                    parse_floats(path, line, a)?
                        .first()
                        .copied()
                        .ok_or_else(|| CliError::parse(path, line, "missing alpha value"))?,
                )
            }
            ["component", k, kappa, mu] => {
                let k = int(line, k)? - 1;
                if components.len() <= k {
                    components.resize(k + 1, None);
                }
                let kappa = kappa
                    .parse::<f64>()
                    .map_err(|_| CliError::parse(path, line, format!("invalid kappa '{kappa}'")))?;
                components[k] = Some(VmfComponent {
                    mu: parse_floats(path, line, mu)?,
                    kappa,
                });
            }
            ["theta", id, p] => {
                let i = doc_slot(id, &mut docs);
                docs[i].theta = parse_floats(path, line, p)?;
            }
            ["z", id, j, z] => {
                let i = doc_slot(id, &mut docs);
                let j = int(line, j)?;
                if j != docs[i].z.len() + 1 {
                    return Err(CliError::parse(
                        path,
                        line,
                        format!("token {j} of '{id}' out of order"),
                    ));
                }
                docs[i].z.push(int(line, z)? - 1);
            }
            _ => return Err(CliError::parse(path, line, "unrecognized truth record")),
        }
    }
    let alpha = alpha.ok_or_else(|| CliError::format(path, "missing alpha record"))?;
    let components = components
        .into_iter()
        .enumerate()
        .map(|(k, c)| {
            c.ok_or_else(|| CliError::format(path, format!("component {} missing", k + 1)))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let k = components.len();
    if let Some(d) = docs.iter().find(|d| d.z.iter().any(|&z| z >= k)) {
        return Err(CliError::format(
            path,
            format!("'{}' assigns a token to a missing component", d.id),
        ));
    }
    Ok(Truth {
        alpha,
        components,
        docs,
    })
}
