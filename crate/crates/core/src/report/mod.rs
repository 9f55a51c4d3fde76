//! Orchestration of analyses over one or more dumps.
//!
//! Dumps are validated and analysed in parallel, but every reduction over
//! dumps runs in input order and all files are produced in memory before a
//! single writer moves them into the output directory. The same inputs and
//! flags therefore give byte-identical outputs for any thread count.

pub mod svg;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::contextualization::{
    aggregate_curves, segment_phases, similarity_curve, CurveKind, PhaseConfig, PhaseDiagram,
    SimilarityCurve,
};
use crate::dump_io::{read_manifest, validate_dump, ValidatedDump, ValidationReport};
use crate::error::{Error, Result};
use crate::logit_lens::{
    aggregate_recall, recall_from_decoded, verbalize_visual_tokens, DecodedLayer, RecallCurve,
    Stoplist, DEFAULT_TOP_K,
};
use crate::norm_attention::{last_token_saliency, top_attended_tokens, SaliencyStack, TopTokens};
use svg::Series;

pub const REPORT_FILE: &str = "report.json";
pub const THREADS_ENV: &str = "MMDYN_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Analysis {
    Contextualization,
    Intra,
    Attention,
    Logitlens,
    Phases,
}

impl Analysis {
    pub const ALL: [Analysis; 5] = [
        Analysis::Contextualization,
        Analysis::Intra,
        Analysis::Attention,
        Analysis::Logitlens,
        Analysis::Phases,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Analysis::Contextualization => "contextualization",
            Analysis::Intra => "intra",
            Analysis::Attention => "attention",
            Analysis::Logitlens => "logitlens",
            Analysis::Phases => "phases",
        }
    }
}

impl FromStr for Analysis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Analysis::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown analysis `{s}`")))
    }
}

/// Parses a comma-separated analysis list; empty means validation only.
pub fn parse_analyses(list: &str) -> Result<BTreeSet<Analysis>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dump_paths: Vec<PathBuf>,
    pub analyses: BTreeSet<Analysis>,
    /// Top-k per visual token for LogitLens.
    pub k: usize,
    /// Tokens listed per layer in the attention summary.
    pub top_tokens: usize,
    pub phases: PhaseConfig,
    /// `None` uses the built-in English stoplist.
    pub stoplist_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// 0 = one per core.
    pub threads: usize,
}

impl RunConfig {
    pub fn new(dump_paths: Vec<PathBuf>, out_dir: PathBuf) -> Self {
        Self {
            dump_paths,
            analyses: BTreeSet::new(),
            k: DEFAULT_TOP_K,
            top_tokens: 5,
            phases: PhaseConfig::default(),
            stoplist_path: None,
            out_dir,
            threads: 0,
        }
    }

    pub fn with_analyses(mut self, analyses: impl IntoIterator<Item = Analysis>) -> Self {
        self.analyses = analyses.into_iter().collect();
        self
    }

    /// `MMDYN_THREADS` wins over the configured value when set.
    pub fn effective_threads(&self) -> Result<usize> {
        match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{THREADS_ENV}={v} is not a thread count"))),
            Err(_) => Ok(self.threads),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.dump_paths.is_empty() {
            return Err(Error::Config("at least one dump is required".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.top_tokens == 0 {
            return Err(Error::Config("top_tokens must be >= 1".into()));
        }
        self.phases.check()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmittedFile {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ReportBundle {
    pub inter: Option<SimilarityCurve>,
    pub intra_visual: Option<SimilarityCurve>,
    pub intra_text: Option<SimilarityCurve>,
    pub phase_diagram: Option<PhaseDiagram>,
    pub saliency: Vec<SaliencyStack>,
    pub top_tokens: Vec<TopTokens>,
    pub recall: Option<RecallCurve>,
    /// Every file written, `report.json` last.
    pub files: Vec<EmittedFile>,
}

impl ReportBundle {
    /// Hash over all emitted file hashes, in emission order.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for f in &self.files {
            hasher.update(f.path.as_bytes());
            hasher.update([0]);
            hasher.update(f.sha256.as_bytes());
            hasher.update([0]);
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Default)]
struct DumpResults {
    inter: Option<SimilarityCurve>,
    intra_visual: Option<SimilarityCurve>,
    intra_text: Option<SimilarityCurve>,
    saliency: Option<SaliencyStack>,
    decoded: Option<Vec<DecodedLayer>>,
    vocab: Vec<String>,
    recall: Option<RecallCurve>,
}

fn analyse_dump(dump: &ValidatedDump, cfg: &RunConfig, stoplist: &Stoplist) -> Result<DumpResults> {
    let wants = |a| cfg.analyses.contains(&a);
    let mut out = DumpResults::default();
    if wants(Analysis::Contextualization) || wants(Analysis::Phases) {
        out.inter = Some(similarity_curve(dump, CurveKind::Inter)?);
    }
    if wants(Analysis::Intra) {
        out.intra_visual = Some(similarity_curve(dump, CurveKind::IntraVisual)?);
        out.intra_text = Some(similarity_curve(dump, CurveKind::IntraText)?);
    }
    if wants(Analysis::Attention) {
        out.saliency = Some(last_token_saliency(dump)?);
    }
    if wants(Analysis::Logitlens) {
        let caption = dump
            .manifest()
            .caption
            .as_deref()
            .ok_or(Error::MissingCaption)?;
        let decoded = verbalize_visual_tokens(dump, cfg.k)?;
        out.recall = Some(recall_from_decoded(
            &decoded,
            &dump.manifest().head.vocab,
            caption,
            cfg.k,
            stoplist,
        )?);
        out.decoded = Some(decoded);
        out.vocab = dump.manifest().head.vocab.clone();
    }
    Ok(out)
}

/// Validates every dump without analysing anything.
pub fn validate_paths(paths: &[PathBuf]) -> Vec<Result<ValidationReport>> {
    paths
        .iter()
        .map(|p| {
            read_manifest(p)
                .map(|m| validate_dump(&m))
                .map_err(Error::in_dump(p))
        })
        .collect()
}

pub fn run_analysis(cfg: &RunConfig) -> Result<ReportBundle> {
    cfg.check()?;
    let threads = cfg.effective_threads()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let stoplist = match &cfg.stoplist_path {
        Some(p) => Stoplist::from_file(p)?,
        None => Stoplist::builtin(),
    };

    let per_dump: Vec<DumpResults> = pool.install(|| {
        let dumps = cfg
            .dump_paths
            .par_iter()
            .map(|p| ValidatedDump::open(p).map_err(Error::in_dump(p)))
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        dumps
            .par_iter()
            .zip(&cfg.dump_paths)
            .map(|(dump, path)| analyse_dump(dump, cfg, &stoplist).map_err(Error::in_dump(path)))
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<Vec<_>>>()
    })?;

    let mut bundle = ReportBundle::default();
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();

    let collect =
        |pick: fn(&DumpResults) -> Option<&SimilarityCurve>| -> Result<Option<SimilarityCurve>> {
            let curves: Vec<SimilarityCurve> =
                per_dump.iter().filter_map(|r| pick(r).cloned()).collect();
            if curves.is_empty() {
                Ok(None)
            } else {
                aggregate_curves(&curves).map(Some)
            }
        };
    bundle.inter = collect(|r| r.inter.as_ref())?;
    bundle.intra_visual = collect(|r| r.intra_visual.as_ref())?;
    bundle.intra_text = collect(|r| r.intra_text.as_ref())?;

    if cfg.analyses.contains(&Analysis::Contextualization) {
        let inter = bundle.inter.as_ref().expect("computed above");
        files.push(("curve_inter.csv".into(), curve_csv(inter).into_bytes()));
        let svg = svg::line_chart(
            "Inter-modal contextualization",
            "mean cosine similarity",
            &[Series {
                name: "inter",
                values: &inter.values,
            }],
        )?;
        files.push(("curve_inter.svg".into(), svg.into_bytes()));
    }
    if let (Some(v), Some(t)) = (&bundle.intra_visual, &bundle.intra_text) {
        files.push(("curve_intra_visual.csv".into(), curve_csv(v).into_bytes()));
        files.push(("curve_intra_text.csv".into(), curve_csv(t).into_bytes()));
        let mut series = vec![
            Series {
                name: "intra_visual",
                values: &v.values,
            },
            Series {
                name: "intra_text",
                values: &t.values,
            },
        ];
        if let Some(inter) = &bundle.inter {
            series.push(Series {
                name: "inter",
                values: &inter.values,
            });
        }
        let svg = svg::line_chart(
            "Intra-modal contextualization",
            "mean cosine similarity",
            &series,
        )?;
        files.push(("curve_intra.svg".into(), svg.into_bytes()));
    }
    if cfg.analyses.contains(&Analysis::Phases) {
        let inter = bundle.inter.as_ref().expect("computed above");
        let diagram = segment_phases(inter, &cfg.phases)?;
        let mut json = serde_json::to_string_pretty(&diagram)?;
        json.push('\n');
        files.push(("phases.json".into(), json.into_bytes()));
        bundle.phase_diagram = Some(diagram);
    }

    if cfg.analyses.contains(&Analysis::Attention) {
        let mut summaries = Vec::new();
        for (i, r) in per_dump.iter().enumerate() {
            let stack = r.saliency.clone().expect("computed for every dump");
            let k = cfg.top_tokens.min(stack.num_tokens());
            let top = top_attended_tokens(&stack, k)?;
            files.push((
                format!("saliency_{}.csv", dump_tag(i)),
                saliency_csv(&stack).into_bytes(),
            ));
            let svg = svg::heatmap(
                &format!(
                    "Norm-based attention of token {} ({})",
                    stack.query_index,
                    dump_tag(i)
                ),
                "layer",
                "token",
                &stack.rows(),
            )?;
            files.push((format!("saliency_{}.svg", dump_tag(i)), svg.into_bytes()));
            summaries.push(json!({
                "dump": dump_tag(i),
                "query_index": stack.query_index,
                "k": top.k,
                "per_layer": top.per_layer,
                "global": &top.global[..k],
            }));
            bundle.top_tokens.push(top);
            bundle.saliency.push(stack);
        }
        let mut json = serde_json::to_string_pretty(&summaries)?;
        json.push('\n');
        files.push(("top_tokens.json".into(), json.into_bytes()));
    }

    if cfg.analyses.contains(&Analysis::Logitlens) {
        let mut curves = Vec::new();
        for (i, r) in per_dump.iter().enumerate() {
            let decoded = r.decoded.as_ref().expect("computed for every dump");
            files.push((
                format!("decoded_{}.jsonl", dump_tag(i)),
                decoded_jsonl(decoded, &r.vocab)?.into_bytes(),
            ));
            curves.push(r.recall.clone().expect("computed for every dump"));
        }
        let recall = aggregate_recall(&curves)?;
        files.push(("recall.csv".into(), recall_csv(&recall).into_bytes()));
        let svg = svg::line_chart(
            &format!("LogitLens caption recall (top-{})", recall.k),
            "recall",
            &[Series {
                name: "recall",
                values: &recall.values,
            }],
        )?;
        files.push(("recall.svg".into(), svg.into_bytes()));
        bundle.recall = Some(recall);
    }

    let mut emitted: Vec<EmittedFile> = files
        .iter()
        .map(|(path, bytes)| EmittedFile {
            path: path.clone(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len(),
        })
        .collect();
    let report = report_json(cfg, &stoplist, &emitted)?;
    emitted.push(EmittedFile {
        path: REPORT_FILE.into(),
        sha256: hex::encode(Sha256::digest(report.as_bytes())),
        bytes: report.len(),
    });
    files.push((REPORT_FILE.into(), report.into_bytes()));

    write_all(&cfg.out_dir, &files)?;
    bundle.files = emitted;
    Ok(bundle)
}

fn dump_tag(i: usize) -> String {
    format!("dump{i:03}")
}

fn report_json(cfg: &RunConfig, stoplist: &Stoplist, files: &[EmittedFile]) -> Result<String> {
    let dumps: Vec<String> = cfg
        .dump_paths
        .iter()
        .map(|p| p.to_string_lossy().into_owned())
        .collect();
    let analyses: Vec<&str> = cfg.analyses.iter().map(|a| a.name()).collect();
    let value = json!({
        "tool": "mmdyn",
        "version": env!("CARGO_PKG_VERSION"),
        "dumps": dumps,
        "analyses": analyses,
        "parameters": {
            "k": cfg.k,
            "top_tokens": cfg.top_tokens,
            "smooth_window": cfg.phases.smooth_window,
            "deadband": cfg.phases.deadband,
            "target_phases": cfg.phases.target_phases,
        },
        "stoplist_id": stoplist.id(),
        "files": files,
    });
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    Ok(text)
}

/// Writes into a staging directory inside `out_dir`, then moves every file
/// into place. Nothing is left behind on failure.
fn write_all(out_dir: &Path, files: &[(String, Vec<u8>)]) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let staging = tempfile::Builder::new()
        .prefix(".mmdyn-staging-")
        .tempdir_in(out_dir)?;
    for (name, bytes) in files {
        fs::write(staging.path().join(name), bytes)?;
    }
    let mut moved: Vec<PathBuf> = Vec::new();
    for (name, _) in files {
        let dest = out_dir.join(name);
        if let Err(e) = fs::rename(staging.path().join(name), &dest) {
            for p in &moved {
                let _ = fs::remove_file(p);
            }
            return Err(e.into());
        }
        moved.push(dest);
    }
    Ok(())
}

pub fn curve_csv(curve: &SimilarityCurve) -> String {
    let mut out = String::from("layer,value,stddev,sample_count\n");
    for (l, v) in curve.values.iter().enumerate() {
        let sd = curve
            .stddev
            .as_ref()
            .map(|s| s[l].to_string())
            .unwrap_or_default();
        let _ = writeln!(out, "{l},{v},{sd},{}", curve.sample_count);
    }
    out
}

pub fn recall_csv(curve: &RecallCurve) -> String {
    let mut out = String::from("layer,recall\n");
    for (l, v) in curve.values.iter().enumerate() {
        let _ = writeln!(out, "{l},{v}");
    }
    out
}

/// Rows are decoder blocks, columns token indices.
pub fn saliency_csv(stack: &SaliencyStack) -> String {
    let mut out = String::from("layer");
    for j in 0..stack.num_tokens() {
        let _ = write!(out, ",{j}");
    }
    out.push('\n');
    for m in &stack.maps {
        let _ = write!(out, "{}", m.layer);
        for v in &m.values {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn decoded_jsonl(decoded: &[DecodedLayer], vocab: &[String]) -> Result<String> {
    let mut out = String::new();
    for layer in decoded {
        for tok in &layer.per_token {
            let decodes: Vec<_> = tok
                .decodes
                .iter()
                .map(|&(id, logit)| {
                    json!({
                        "id": id,
                        "word": vocab.get(id).map(String::as_str).unwrap_or(""),
                        "logit": logit,
                    })
                })
                .collect();
            let line = json!({
                "layer": layer.layer,
                "token_index": tok.token_index,
                "decodes": decodes,
            });
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
    }
    Ok(out)
}
